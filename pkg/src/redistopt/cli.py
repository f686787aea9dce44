"""Command-line driver: ingestion, experiment runs and solver comparisons.

Usage::

    redistopt run --config=exp.json --solver=nmapg --seed=3
    redistopt compare a.json b.json --table=summary.csv
    redistopt ingest data.svm --format=libsvm

Each run writes ``<outdir>/<task>_<solver>_<seed>/`` holding ``trace.csv``,
``metrics.json`` and a ``solution.*`` file.  Exit codes: 0 success, 2 bad
configuration, 3 bad data, 4 solver abort.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import sparse

from . import lowrank as lr
from . import models as md
from .proximal import StructureError
from .regularizers import DomainError, KappaSpec, UnsupportedVariantError, Variant, parse_regularizer
from .solvers import (SolveTrace, SolverAbort, SolverParams, admm_consensus, cccp, fista,
                      inexact_nmapg, nmapg, scp, smoothing_solver)

log = logging.getLogger("redistopt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# ingestion

def _lines(path):
    try:
        with open(path, "r") as fh:
            for k, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if line:
                    yield k, line
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _num(text) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def read_libsvm(path, n_features=None) -> md.Dataset:
    """``label idx:val ...`` lines with 1-based feature indices."""
    labels, rows, cols, vals = [], [], [], []
    for k, line in _lines(path):
        parts = line.split()
        try:
            labels.append(_num(parts[0]))
            for item in parts[1:]:
                i, v = item.split(":")
                i = int(i)
                if i < 1:
                    raise DataError(f"line {k}: feature index {i} must be >= 1")
                rows.append(len(labels) - 1)
                cols.append(i - 1)
                vals.append(_num(v))
        except DataError:
            raise
        except ValueError:
            raise DataError(f"line {k}: malformed libsvm record {line!r}") from None
    d = max(cols, default=-1) + 1
    if n_features is not None:
        if d > n_features:
            raise DataError(f"feature index {d} exceeds n_features={n_features}")
        d = n_features
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(labels), d))
    return md.Dataset(A, np.array(labels))


def write_libsvm(path, data: md.Dataset):
    A = sparse.csr_matrix(data.features)
    with open(path, "w") as fh:
        for i, y in enumerate(data.targets):
            row = A.getrow(i)
            items = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(row.indices, row.data))
            fh.write(f"{float(y)!r} {items}".rstrip() + "\n")


def read_triples(path, shape=None) -> lr.ObservedMatrix:
    """``row col value`` lines with 1-based indices."""
    r, c, v = [], [], []
    for k, line in _lines(path):
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"line {k}: expected 'row col value', got {line!r}")
        try:
            i, j, x = int(parts[0]), int(parts[1]), _num(parts[2])
        except ValueError:
            raise DataError(f"line {k}: malformed triple {line!r}") from None
        if i < 1 or j < 1:
            raise DataError(f"line {k}: indices are 1-based, got ({i}, {j})")
        if shape is not None and (i > shape[0] or j > shape[1]):
            raise DataError(f"line {k}: index ({i}, {j}) outside shape {tuple(shape)}")
        r.append(i - 1)
        c.append(j - 1)
        v.append(x)
    if shape is None:
        shape = (max(r, default=-1) + 1, max(c, default=-1) + 1)
    try:
        return lr.ObservedMatrix(shape, r, c, v)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def write_triples(path, data: lr.ObservedMatrix):
    with open(path, "w") as fh:
        for i, j, x in zip(data.rows, data.cols, data.values):
            fh.write(f"{i + 1} {j + 1} {float(x)!r}\n")


def read_pgm(path) -> md.ImageGrid:
    """ASCII (P2) or binary (P5) greymap, scaled to [0, 1] by its maxval."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    tokens = []
    pos = 0
    # header: magic, width, height, maxval (comments allowed)
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(raw):
            raise DataError("truncated PGM header")
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii", "replace"))
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"bad PGM header {tokens}") from None
    if magic not in ("P2", "P5") or w < 1 or h < 1 or not 0 < maxval <= 255:
        raise DataError(f"unsupported PGM header {tokens} (need P2/P5 with maxval <= 255)")
    if magic == "P5":
        body = raw[pos + 1:pos + 1 + w * h]
        if len(body) != w * h:
            raise DataError(f"PGM body has {len(body)} bytes, expected {w * h}")
        pix = np.frombuffer(body, dtype=np.uint8).astype(float)
    else:
        text = b"\n".join(l.split(b"#", 1)[0] for l in raw[pos:].splitlines())
        try:
            pix = np.array([int(t) for t in text.split()], dtype=float)
        except ValueError:
            raise DataError("non-integer pixel in P2 body") from None
        if pix.size != w * h:
            raise DataError(f"PGM body has {pix.size} pixels, expected {w * h}")
    if pix.max(initial=0) > maxval:
        raise DataError("pixel value exceeds maxval")
    return md.ImageGrid(pix.reshape(h, w) / maxval, "clean")


def write_pgm(path, image, binary=False):
    X = np.asarray(getattr(image, "pixels", image), dtype=float)
    q = np.clip(np.rint(X * 255), 0, 255).astype(np.uint8)
    h, w = q.shape
    if binary:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + q.tobytes())
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in q)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{body}\n")


def read_csv_matrix(path) -> np.ndarray:
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for k, rec in enumerate(csv.reader(fh), 1):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                rows.append([_num(f) for f in rec])
            except ValueError:
                raise DataError(f"line {k}: non-numeric or non-finite field in {rec}") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"line {k}: expected {len(rows[0])} fields, got {len(rows[-1])}")
    return np.array(rows, dtype=float).reshape(len(rows), -1)


def write_csv_matrix(path, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in X:
            w.writerow([repr(float(v)) for v in row])


FORMATS = {"libsvm": read_libsvm, "triples": read_triples, "pgm": read_pgm, "csv_matrix": read_csv_matrix}
_EXT = {".svm": "libsvm", ".libsvm": "libsvm", ".txt": "triples", ".triples": "triples",
        ".pgm": "pgm", ".csv": "csv_matrix"}


def ingest(path, format=None):
    """Load ``path`` as Dataset (libsvm), ObservedMatrix (triples), ImageGrid (pgm) or ndarray (csv_matrix)."""
    fmt = format or _EXT.get(Path(path).suffix.lower())
    if fmt not in FORMATS:
        raise ConfigError(f"unknown data format {fmt!r} for {path}")
    return FORMATS[fmt](path)


# --------------------------------------------------------------------------
# configuration

TASK_SOLVERS = {
    "sparse_group": ("nmapg", "inexact_nmapg", "fista", "scp", "cccp", "admm"),
    "tree": ("nmapg", "inexact_nmapg", "fista"),
    "matcomp": ("fw",),
    "tv_denoise": ("inexact_nmapg", "cccp", "smoothing", "fista"),
    "rsc": ("inexact_nmapg", "fista"),
}
DEFAULT_REGULARIZER = {"sparse_group": "lsp:beta=1,theta=0.5", "tree": "lsp:beta=1,theta=0.5",
                       "matcomp": "lsp:beta=1", "tv_denoise": "lsp:beta=1,theta=1",
                       "rsc": "lsp:beta=1,theta=1"}
NEEDS_SPLIT = ("scp", "cccp", "smoothing")
PARAM_GRID = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field is also a ``--key=value`` flag.

    ``regularizer="none"`` selects the convex model (identity penalty); for
    ``matcomp`` an LSP string without ``theta`` gets ``theta = sqrt(mu)``.
    ``lam`` / ``mu`` left unset are picked on a validation split over
    ``{1e-3, 1e-2, 1e-1, 1}`` (TV uses a fixed default instead).
    """

    task: str = ""
    solver: str = ""
    regularizer: Optional[str] = None
    lam: Optional[float] = None
    mu: Optional[float] = None
    tau: Optional[float] = None
    T: Optional[int] = None
    seed: int = 0
    tolerance: float = 1e-10
    eps_base: float = 0.95
    data: str = "synthetic:"
    data_format: Optional[str] = None
    outdir: str = "runs"
    workers: int = 4
    n_groups: int = 10
    record_time: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = _coerce(k, known[k].type, v)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self):
        if self.task not in TASK_SOLVERS:
            raise ConfigError(f"task must be one of {sorted(TASK_SOLVERS)}, got {self.task!r}")
        if self.solver not in TASK_SOLVERS[self.task]:
            raise ConfigError(f"solver {self.solver!r} is not available for task {self.task!r} "
                              f"(choose from {TASK_SOLVERS[self.task]})")
        spec = self.spec()
        if self.solver == "fista" and spec is not None:
            raise ConfigError("fista needs a convex model; set regularizer=none")
        if self.solver in NEEDS_SPLIT and spec is None:
            raise ConfigError(f"{self.solver} needs a nonconvex regularizer")
        if self.solver == "smoothing" and spec.variant is not Variant.LSP:
            raise ConfigError("smoothing supports the LSP penalty only")
        if self.T is not None and self.T < 1:
            raise ConfigError("T must be positive")
        for key in ("lam", "mu", "tau"):
            v = getattr(self, key)
            if v is not None and not v >= 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if not self.data.startswith("synthetic:") and not Path(self.data).exists():
            raise ConfigError(f"data file {self.data} does not exist")

    def spec(self) -> Optional[KappaSpec]:
        text = self.regularizer or DEFAULT_REGULARIZER[self.task]
        if text.strip().lower() in ("none", "convex", "l1"):
            return None
        try:
            spec = parse_regularizer(text)
        except (ValueError, DomainError, UnsupportedVariantError) as exc:
            raise ConfigError(f"bad regularizer {text!r}: {exc}") from None
        if self.task == "matcomp" and "theta" not in text:
            spec = KappaSpec(spec.variant, spec.beta, math.sqrt(self.mu if self.mu else 1.0))
        return spec


def _coerce(key, typ, v):
    if v is None:
        return None
    typ = str(typ)
    try:
        if "bool" in typ:
            if isinstance(v, str):
                if v.lower() in ("1", "true", "yes", "on"):
                    return True
                if v.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(v)
            return bool(v)
        if "int" in typ:
            f = float(v)
            if f != int(f):
                raise ValueError(v)
            return int(f)
        if "float" in typ:
            if isinstance(v, str) and v.lower() in ("none", "null", ""):
                return None
            return float(v)
        return str(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {v!r} for {key}") from None


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read a JSON config and apply flag overrides (flags win)."""
    d = {}
    if path:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object with flat keys")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d)


def parse_recipe(text: str) -> dict:
    """``"synthetic:d=100,N=200"`` -> ``{"d": 100, "N": 200}``."""
    body = text.split(":", 1)[1]
    out = {}
    for item in filter(None, (s.strip() for s in body.split(","))):
        k, sep, v = item.partition("=")
        if not sep:
            raise ConfigError(f"bad synthetic recipe item {item!r}")
        try:
            f = float(v)
        except ValueError:
            raise ConfigError(f"non-numeric recipe value {item!r}") from None
        out[k.strip()] = int(f) if f == int(f) and "." not in v and "e" not in v.lower() else f
    return out


def _recipe(cfg, allowed, defaults):
    given = parse_recipe(cfg.data)
    bad = set(given) - set(allowed)
    if bad:
        raise ConfigError(f"unknown synthetic recipe keys for {cfg.task}: {sorted(bad)}")
    out = dict(defaults)
    out.update(given)
    return out


# --------------------------------------------------------------------------
# running

def _params(cfg: ExperimentConfig, default_T, **extra) -> SolverParams:
    return SolverParams(max_iterations=cfg.T or default_T, tau=cfg.tau, tolerance=cfg.tolerance,
                        eps_base=cfg.eps_base, seed=cfg.seed, record_time=cfg.record_time, **extra)


SOLVER_FUNCS = {"nmapg": nmapg, "inexact_nmapg": inexact_nmapg, "fista": fista, "scp": scp,
                "cccp": cccp, "smoothing": smoothing_solver}


def _split3(n, seed):
    perm = md.make_rng(seed, "split").permutation(n)
    a, b = n // 2, n // 2 + n // 4
    return perm[:a], perm[a:b], perm[b:]


def _f1(x, truth, tol=1e-8):
    est = np.abs(x) > tol
    true = np.abs(truth) > 0
    tp = float(np.sum(est & true))
    if tp == 0:
        return 0.0
    p, r = tp / est.sum(), tp / true.sum()
    return 2 * p * r / (p + r)


def _run_sparse_group(cfg, spec):
    if cfg.data.startswith("synthetic:"):
        rec = _recipe(cfg, ("d", "n_groups", "zero_group_frac", "within_zero_frac", "N", "noise"),
                      dict(d=100, n_groups=cfg.n_groups, zero_group_frac=0.75, within_zero_frac=0.25,
                           N=200, noise=0.05))
        data, truth = md.synth_sparse_group(rec["d"], rec["n_groups"], rec["zero_group_frac"],
                                            rec["within_zero_frac"], rec["N"], rec["noise"], cfg.seed)
        n_groups = rec["n_groups"]
    else:
        data, truth = _load(cfg, md.Dataset), None
        n_groups = cfg.n_groups
    d = data.n_features
    if n_groups > d:
        raise ConfigError("more groups than features")
    tr, va, te = _split3(data.n_samples, cfg.seed)
    train, val, test = data.subset(tr), data.subset(va), data.subset(te)

    def solve(lam, mu, ds):
        groups = md.contiguous_groups(d, n_groups, mu)
        prob = md.build_sparse_group(ds, spec, lam, groups)
        x0 = np.zeros(d)
        if cfg.solver == "admm":
            chunks = np.array_split(np.arange(ds.n_samples), cfg.workers)
            subs = [md.build_sparse_group(ds.subset(c), spec, lam / cfg.workers,
                                          groups.with_weights(groups.weights / cfg.workers)) for c in chunks]
            tau = cfg.tau or 0.5 * max(p.lipschitz for p in subs)
            params = dataclasses.replace(_params(cfg, 2000), tau=None, tolerance=max(cfg.tolerance, 1e-7))
            return admm_consensus([p.smooth for p in subs], prob.convex, tau, params, x0, prob.objective), prob
        default_T = 5000
        return SOLVER_FUNCS[cfg.solver](prob, x0, _params(cfg, default_T)), prob

    def pred_rmse(x, ds):
        r = ds.features @ x - ds.targets
        return float(np.sqrt(np.mean(r * r)))

    lam, mu = cfg.lam, cfg.mu
    if lam is None or mu is None:
        best = None
        for lg in ([lam] if lam is not None else PARAM_GRID):
            for mg in ([mu] if mu is not None else PARAM_GRID):
                (x, _), _ = solve(lg, mg, train)
                score = pred_rmse(x, val)
                if best is None or score < best[0]:
                    best = (score, lg, mg)
        lam, mu = best[1], best[2]
    t0 = time.perf_counter()
    (x, trace), prob = solve(lam, mu, train)
    ms = (time.perf_counter() - t0) * 1e3
    metrics = {"objective": trace.final_objective, "rmse": pred_rmse(x, test),
               "abs_error": None if truth is None else float(np.mean(np.abs(x - truth))),
               "f1": None if truth is None else _f1(x, truth),
               "nnz": int(np.sum(np.abs(x) > 1e-8)), "lam": lam, "mu": mu}
    return metrics, trace, ms, ("vector", x)


def _run_tree(cfg, spec):
    if cfg.data.startswith("synthetic:"):
        rec = _recipe(cfg, ("N", "depth", "leaf_size", "active_leaves", "noise"),
                      dict(N=200, depth=3, leaf_size=16, active_leaves=1, noise=0.1))
        data, truth, tree = md.synth_tree(rec["N"], rec["depth"], rec["leaf_size"], rec["active_leaves"],
                                          rec["noise"], cfg.seed)
    else:
        data, truth = _load(cfg, md.Dataset), None
        d = data.n_features
        if d % 4:
            raise DataError("tree task on a file needs a feature count divisible by 4")
        tree = md.binary_tree_groups(3, d // 4)
    try:
        data.check_labels()
    except ValueError as exc:
        raise DataError(str(exc)) from None
    tr, va, te = _split3(data.n_samples, cfg.seed)
    train, val, test = data.subset(tr), data.subset(va), data.subset(te)
    d = data.n_features

    def solve(mu, ds):
        prob = md.build_tree(ds, spec, mu, tree)
        return SOLVER_FUNCS[cfg.solver](prob, np.zeros(d), _params(cfg, 5000))

    def acc(x, ds):
        pred = np.where(ds.dense() @ x >= 0, 1.0, -1.0)
        return float(np.mean(pred == ds.targets))

    mu = cfg.mu
    if mu is None:
        scores = [(acc(solve(m, train)[0], val), -m, m) for m in PARAM_GRID]
        mu = max(scores)[2]
    t0 = time.perf_counter()
    x, trace = solve(mu, train)
    ms = (time.perf_counter() - t0) * 1e3
    metrics = {"objective": trace.final_objective, "accuracy": acc(x, test),
               "sparsity": int(np.sum(np.abs(x) > 1e-8)), "mu": mu,
               "f1": None if truth is None else _f1(x, truth)}
    return metrics, trace, ms, ("vector", x)


def _run_matcomp(cfg, spec):
    if cfg.data.startswith("synthetic:"):
        rec = _recipe(cfg, ("m", "n", "rank", "obs", "noise"), dict(m=20, n=15, rank=3, obs=0.5, noise=0.1))
        train, test, _ = lr.synth_lowrank(rec["m"], rec["n"], rec["rank"], rec["obs"], rec["noise"], cfg.seed)
    else:
        full = _load(cfg, lr.ObservedMatrix)
        mask = md.make_rng(cfg.seed, "split").random(len(full)) < 0.8
        train, test = full.subset(mask), full.subset(~mask)
    T = cfg.T or 12
    params = lr.FWParams(seed=cfg.seed, record_time=cfg.record_time)
    mu = cfg.mu
    if mu is None:
        mask = md.make_rng(cfg.seed, "validation").random(len(train)) < 0.8
        fit, val = train.subset(mask), train.subset(~mask)
        scores = []
        for m in PARAM_GRID:
            c = dataclasses.replace(cfg, mu=m)
            x, _ = lr.fw_solve(fit, c.spec(), m, T, params)
            scores.append((lr.rmse_on(x, val), m))
        mu = min(scores)[1]
    spec = dataclasses.replace(cfg, mu=mu).spec()
    t0 = time.perf_counter()
    x, trace = lr.fw_solve(train, spec, mu, T, params)
    ms = (time.perf_counter() - t0) * 1e3
    metrics = {"objective": trace.final_objective, "rmse": lr.rmse_on(x, test), "rank": x.rank, "mu": mu}
    return metrics, trace, ms, ("factor", x)


TV_DEFAULT_MU = 1.0


def _run_tv(cfg, spec):
    if cfg.data.startswith("synthetic:"):
        rec = _recipe(cfg, ("m", "n", "frac"), dict(m=8, n=8, frac=0.1))
        clean = md.synth_image(rec["m"], rec["n"])
        frac = rec["frac"]
    else:
        clean = _load(cfg, md.ImageGrid)
        frac = 0.1
    noisy = md.salt_and_pepper(clean, frac, cfg.seed)
    mu = TV_DEFAULT_MU if cfg.mu is None else cfg.mu
    if mu <= 0:
        raise ConfigError("tv_denoise needs mu > 0")
    t0 = time.perf_counter()
    if cfg.solver == "fista":
        X, trace = md.solve_convex_tv_l1(noisy, mu, _params(cfg, 2000))
    else:
        prob = md.build_tv_denoise(noisy, spec, mu)
        extra = {"tolerance": 1e-6} if cfg.solver == "smoothing" else {}
        params = _params(cfg, 1000 if cfg.solver == "smoothing" else 3000)
        if extra and cfg.tolerance == ExperimentConfig.tolerance:
            params = dataclasses.replace(params, **extra)
        X, trace = SOLVER_FUNCS[cfg.solver](prob, noisy.pixels, params)
    ms = (time.perf_counter() - t0) * 1e3
    metrics = {"objective": trace.final_objective, "rmse": md.rmse(X, clean.pixels), "mu": mu,
               "inner_iterations": trace.total("inner_prox" if cfg.solver == "cccp" else "inner")}
    return metrics, trace, ms, ("matrix", X)


RSC_DEFAULT_MU = 1.0


def _run_rsc(cfg, spec):
    if cfg.data.startswith("synthetic:"):
        rec = _recipe(cfg, ("m", "d", "sparsity", "outliers", "noise"),
                      dict(m=20, d=30, sparsity=3, outliers=0.1, noise=0.01))
        y, D, truth = md.synth_rsc(rec["m"], rec["d"], rec["sparsity"], rec["outliers"], rec["noise"], cfg.seed)
    else:
        M = _load(cfg, np.ndarray)
        if M.ndim != 2 or M.shape[1] < 2:
            raise DataError("rsc data needs columns [D | y]")
        D, y, truth = M[:, :-1], M[:, -1], None
    mu = RSC_DEFAULT_MU if cfg.mu is None else cfg.mu
    prob = md.build_rsc(y, D, spec, mu)
    x0 = np.zeros(D.shape[1])
    t0 = time.perf_counter()
    if cfg.solver == "fista":
        params = _params(cfg, 2000)
        if params.tau is None:
            params = dataclasses.replace(params, tau=1.0)
        x, trace = fista(prob, x0, params)
    else:
        x, trace = inexact_nmapg(prob, x0, _params(cfg, 3000))
    ms = (time.perf_counter() - t0) * 1e3
    metrics = {"objective": trace.final_objective, "mu": mu,
               "abs_error": None if truth is None else float(np.mean(np.abs(x - truth))),
               "f1": None if truth is None else _f1(x, truth, 1e-3)}
    return metrics, trace, ms, ("vector", x)


RUNNERS = {"sparse_group": _run_sparse_group, "tree": _run_tree, "matcomp": _run_matcomp,
           "tv_denoise": _run_tv, "rsc": _run_rsc}
_EXPECTED = {md.Dataset: "a libsvm file", lr.ObservedMatrix: "a triples file",
             md.ImageGrid: "a PGM image", np.ndarray: "a CSV matrix"}


def _load(cfg, kind):
    obj = ingest(cfg.data, cfg.data_format)
    if not isinstance(obj, kind):
        raise ConfigError(f"task {cfg.task} needs {_EXPECTED[kind]}")
    return obj


def run_dir(cfg: ExperimentConfig, suffix="") -> Path:
    return Path(cfg.outdir) / f"{cfg.task}_{cfg.solver}_{cfg.seed}{suffix}"


def _write_solution(out: Path, kind, value):
    if kind == "factor":
        value.save(out / "solution.npz")
    elif kind == "matrix":
        write_csv_matrix(out / "solution.csv", value)
    else:
        write_csv_matrix(out / "solution.csv", np.asarray(value).reshape(-1, 1))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def execute(cfg: ExperimentConfig, suffix="") -> dict:
    """Run one experiment and write its artefacts; raises on failure."""
    cfg.validate()
    out = run_dir(cfg, suffix)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.spec()
    try:
        metrics, trace, ms, (kind, sol) = RUNNERS[cfg.task](cfg, spec)
    except SolverAbort as exc:
        if exc.trace is not None:
            exc.trace.to_csv(out / "trace.csv")
        raise
    except (ConfigError, DataError):
        raise
    except (StructureError, DomainError, ValueError) as exc:
        # solver parameter checks (e.g. tau below the Lipschitz estimate)
        raise ConfigError(str(exc)) from None
    metrics["time_ms"] = ms if cfg.record_time else 0.0
    metrics["iterations"] = len(trace) - 1
    metrics["termination"] = trace.reason
    metrics["regularizer"] = "none" if spec is None else str(spec)
    metrics = {k: _clean(v) for k, v in metrics.items()}
    trace.to_csv(out / "trace.csv")
    _write_solution(out, kind, sol)
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def run(cfg: ExperimentConfig) -> int:
    """Run one experiment and map failures onto exit codes."""
    try:
        execute(cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except SolverAbort as exc:
        log.error("solver aborted: %s", exc)
        return EXIT_ABORT
    return EXIT_OK


def thread_cap() -> int:
    raw = os.environ.get("REDIST_OPT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"REDIST_OPT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("REDIST_OPT_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def compare(configs, table_path=None) -> list:
    """Run every config and return one summary row per member.

    Members must share task and seed.  A failing member is recorded with
    its status and the others still run.  Members with the same solver get
    a numeric suffix on their run directory.
    """
    configs = list(configs)
    if configs:
        tasks = {c.task for c in configs}
        seeds = {c.seed for c in configs}
        if len(tasks) > 1 or len(seeds) > 1:
            raise ConfigError("compare needs configs that share task and seed")
    seen = {}
    suffixes = []
    for c in configs:
        k = seen.get(c.solver, 0)
        suffixes.append("" if k == 0 else f"_{k}")
        seen[c.solver] = k + 1

    def one(args):
        c, suffix = args
        row = {"solver": c.solver, "regularizer": c.regularizer or DEFAULT_REGULARIZER.get(c.task, "")}
        try:
            row.update(execute(c, suffix))
            row["status"] = "ok"
        except ConfigError as exc:
            row["status"] = f"config error: {exc}"
        except DataError as exc:
            row["status"] = f"data error: {exc}"
        except SolverAbort as exc:
            row["status"] = f"solver abort: {exc}"
        return row

    workers = min(thread_cap(), max(len(configs), 1))
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(one, zip(configs, suffixes)))
    if table_path is not None:
        write_table(table_path, rows)
    return rows


def write_table(path, rows):
    cols = ["solver", "regularizer", "status"]
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# argument parsing

def _add_config_flags(p):
    for f in fields(ExperimentConfig):
        p.add_argument(f"--{f.name}", default=None, help=f"override config key {f.name!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redistopt", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment")
    p_run.add_argument("--config", help="JSON file with flat keys")
    _add_config_flags(p_run)
    p_cmp = sub.add_parser("compare", help="run several configs and tabulate them")
    p_cmp.add_argument("configs", nargs="*", help="JSON config files (an array of objects is also accepted)")
    p_cmp.add_argument("--table", default=None, help="summary CSV path (default <outdir>/compare.csv)")
    _add_config_flags(p_cmp)
    p_ing = sub.add_parser("ingest", help="parse a data file and print a summary")
    p_ing.add_argument("path")
    p_ing.add_argument("--format", choices=sorted(FORMATS), default=None)
    return parser


def _overrides(ns) -> dict:
    return {f.name: getattr(ns, f.name) for f in fields(ExperimentConfig) if getattr(ns, f.name) is not None}


def _compare_configs(ns) -> list:
    out = []
    for path in ns.configs:
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        items = obj if isinstance(obj, list) else [obj]
        for item in items:
            if not isinstance(item, dict):
                raise ConfigError(f"{path}: config entries must be JSON objects")
            d = dict(item)
            d.update(_overrides(ns))
            out.append(ExperimentConfig.from_dict(d))
    return out


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if ns.command == "run":
            return run(load_config(ns.config, _overrides(ns)))
        if ns.command == "compare":
            configs = _compare_configs(ns)
            outdir = Path(_overrides(ns).get("outdir") or (configs[0].outdir if configs else "runs"))
            outdir.mkdir(parents=True, exist_ok=True)
            table = ns.table or outdir / "compare.csv"
            rows = compare(configs, table)
            print(f"{len(rows)} runs, table written to {table}")
            return EXIT_OK
        obj = ingest(ns.path, ns.format)
        if isinstance(obj, md.Dataset):
            print(f"dataset: {obj.n_samples} samples x {obj.n_features} features")
        elif isinstance(obj, lr.ObservedMatrix):
            print(f"observed matrix: shape {obj.shape}, {len(obj)} entries")
        elif isinstance(obj, md.ImageGrid):
            print(f"image: {obj.pixels.shape[0]} x {obj.pixels.shape[1]}")
        else:
            print(f"matrix: {obj.shape[0]} x {obj.shape[1]}")
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
