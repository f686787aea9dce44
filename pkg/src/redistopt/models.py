"""Problem builders and synthetic data.

Each builder returns a :class:`~redistopt.solvers.CompositeProblem` whose
smooth part carries the concave remainder of the penalty and whose convex
part is the ``kappa0``-scaled convex norm.  Passing ``spec=None`` gives the
convex model (identity penalty), where the remainder vanishes.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse

from . import proximal as px
from .proximal import GroupStructure, ProxResult, StructureError
from .regularizers import (KappaSpec, SmoothedKappaSpec, Variant, bar_group, bar_scalar,
                           derived_constants, kappa_value, smoothed_kappa)
from .solvers import CompositeProblem, ConvexTerm, DCSplit, SolverParams, fista, zero_oracle


def make_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stream ``name`` derived from one 64-bit seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), zlib.crc32(name.encode())]))


@dataclass
class Dataset:
    features: object
    targets: np.ndarray
    sample_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if not sparse.issparse(self.features):
            self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError(f"{self.features.shape[0]} rows but {self.targets.shape[0]} targets")
        if self.sample_weights is not None:
            self.sample_weights = np.asarray(self.sample_weights, dtype=float).reshape(-1)
            if self.sample_weights.shape != self.targets.shape or np.any(self.sample_weights < 0):
                raise ValueError("sample weights must be non-negative, one per sample")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    def dense(self) -> np.ndarray:
        return self.features.toarray() if sparse.issparse(self.features) else self.features

    def subset(self, idx) -> "Dataset":
        w = None if self.sample_weights is None else self.sample_weights[idx]
        return Dataset(self.features[idx], self.targets[idx], w)

    def check_labels(self):
        if not np.all(np.isin(self.targets, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")


@dataclass
class ImageGrid:
    pixels: np.ndarray
    tag: str = "clean"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise ValueError("image must be two-dimensional")
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")


def _kappa_parts(spec):
    """``(kappa0, rho, kappa)`` with the identity penalty for ``spec=None``."""
    if spec is None:
        return 1.0, 0.0, lambda a: a
    k0, rho = derived_constants(spec)
    return k0, rho, lambda a: kappa_value(spec, a)


def _scalar_bar(spec, r):
    if spec is None:
        return 0.0, np.zeros_like(r)
    v, g = bar_scalar(spec, r)
    return float(np.sum(v)), g


# --------------------------------------------------------------------------
# sparse group lasso

def contiguous_groups(d: int, n_groups: int, weight=1.0, kind="disjoint") -> GroupStructure:
    bounds = np.linspace(0, d, n_groups + 1).round().astype(int)
    groups = [np.arange(bounds[j], bounds[j + 1]) for j in range(n_groups)]
    return GroupStructure(groups, np.full(n_groups, float(weight)), kind)


def build_sparse_group(data: Dataset, spec: Optional[KappaSpec], lam: float,
                       groups: GroupStructure, lipschitz: str = "conservative") -> CompositeProblem:
    """Square loss with the sparse-group penalty ``lam sum kappa(|x_i|) + sum mu_j kappa(||x_Gj||)``.

    ``groups.weights`` hold the per-group ``mu_j``.  ``lipschitz`` selects the
    smoothness estimate: ``"loss"`` uses ``sigma_1(A^T A)`` alone (the
    concave remainder only lowers curvature), ``"conservative"`` adds the
    ``2 rho (lam + max mu_j)`` bound of the remainder.
    """
    if groups.kind != "disjoint":
        raise StructureError("sparse group model needs disjoint groups")
    A = data.features
    b = data.targets
    d = data.n_features
    for g in groups.groups:
        if len(g) and g.max() >= d:
            raise ValueError("group index out of range")
    k0, rho, kap = _kappa_parts(spec)
    mus = groups.weights

    def loss(x):
        r = A @ x - b
        return 0.5 * float(r @ r), A.T @ r

    def gbar(x):
        val, grad = _scalar_bar(spec, x)
        val, grad = lam * val, lam * grad
        if spec is not None:
            for g, w in zip(groups.groups, mus):
                if w:
                    v, gg = bar_group(spec, x[g])
                    val += w * v
                    grad[g] += w * gg
        return val, grad

    def smooth(x):
        fl, gl = loss(x)
        fb, gb = gbar(x)
        return fl + fb, gl + gb

    def gbreve(x):
        return k0 * (lam * np.abs(x).sum() + sum(w * np.linalg.norm(x[g]) for g, w in zip(groups.groups, mus)))

    def prox(z, c, eps=None, warm=None):
        return ProxResult(px.prox_sparse_group(z, c * k0 * lam, groups.with_weights(c * k0 * mus)))

    def objective(x):
        val = loss(x)[0] + lam * float(np.sum(kap(np.abs(x))))
        return val + sum(w * float(kap(np.linalg.norm(x[g]))) for g, w in zip(groups.groups, mus))

    L_loss = float(np.linalg.norm(A.toarray() if sparse.issparse(A) else A, 2) ** 2)
    mu_max = float(mus.max()) if len(mus) else 0.0
    L = L_loss + (2 * rho * (lam + mu_max) if lipschitz == "conservative" else 0.0)

    convex = ConvexTerm(gbreve, prox)
    dc = None
    if spec is not None:
        def quad(x):
            val = 0.5 * rho * lam * float(x @ x)
            grad = rho * lam * x
            for g, w in zip(groups.groups, mus):
                val += 0.5 * rho * w * float(x[g] @ x[g])
                grad[g] += rho * w * x[g]
            return val, grad

        def convex_smooth(x):
            fb, gb = gbar(x)
            fq, gq = quad(x)
            return fb + fq, gb + gq

        def concave(x):
            fq, gq = quad(x)
            return -fq, -gq

        dc = DCSplit(loss, L_loss, convex_smooth, rho * (lam + mu_max), convex, concave)
    return CompositeProblem(smooth, convex, max(L, 1e-12), (d,), objective, dc, name="sparse_group")


def synth_sparse_group(d=100, n_groups=10, zero_group_frac=0.75, within_zero_frac=0.25,
                       N=200, noise_sigma=0.05, seed=0):
    """Group-sparse regression data with standard normal design.

    Returns ``(Dataset, x_true)``.  ``round(zero_group_frac * n_groups)``
    groups are zero; inside the other groups ``round(within_zero_frac * size)``
    entries are zeroed and the rest drawn from N(0, 1).
    """
    if min(d, n_groups, N) <= 0 or noise_sigma < 0:
        raise ValueError("sizes must be positive and noise non-negative")
    if not (0 <= zero_group_frac <= 1 and 0 <= within_zero_frac <= 1):
        raise ValueError("fractions must lie in [0, 1]")
    rng = make_rng(seed, "sparse_group")
    groups = contiguous_groups(d, n_groups).groups
    x = np.zeros(d)
    n_zero = int(round(zero_group_frac * n_groups))
    live = rng.permutation(n_groups)[n_zero:]
    for j in sorted(live):
        g = groups[j]
        vals = rng.standard_normal(len(g))
        off = rng.permutation(len(g))[: int(round(within_zero_frac * len(g)))]
        vals[off] = 0.0
        x[g] = vals
    A = rng.standard_normal((N, d))
    y = A @ x + noise_sigma * rng.standard_normal(N)
    return Dataset(A, y), x


# --------------------------------------------------------------------------
# tree-structured group lasso with weighted logistic loss

def class_balance_weights(labels) -> np.ndarray:
    """Each sample weighted by the reciprocal of its class size."""
    labels = np.asarray(labels)
    w = np.empty(len(labels))
    for c in np.unique(labels):
        mask = labels == c
        w[mask] = 1.0 / mask.sum()
    return w


def build_tree(data: Dataset, spec: Optional[KappaSpec], mu: float, tree: GroupStructure,
               group_weights=None) -> CompositeProblem:
    """Weighted logistic loss plus ``mu sum_j lam_j kappa(||x_Gj||)`` over a tree.

    ``lam_j`` defaults to ``1 / sqrt(|G_j|)``; sample weights default to the
    reciprocal class sizes.
    """
    if tree.kind != "tree":
        raise StructureError("tree model needs kind='tree'")
    data.check_labels()
    A = data.dense()
    yl = data.targets
    w = class_balance_weights(yl) if data.sample_weights is None else data.sample_weights
    lams = (np.array([1.0 / np.sqrt(len(g)) for g in tree.groups]) if group_weights is None
            else np.asarray(group_weights, dtype=float))
    k0, rho, kap = _kappa_parts(spec)

    def loss(x):
        m = yl * (A @ x)
        val = float(w @ np.logaddexp(0.0, -m))
        s = -w * yl * np.exp(-np.logaddexp(0.0, m))
        return val, A.T @ s

    def gbar(x):
        val, grad = 0.0, np.zeros_like(x)
        if spec is not None:
            for g, lj in zip(tree.groups, lams):
                v, gg = bar_group(spec, x[g])
                val += mu * lj * v
                grad[g] += mu * lj * gg
        return val, grad

    def smooth(x):
        fl, gl = loss(x)
        fb, gb = gbar(x)
        return fl + fb, gl + gb

    def gbreve(x):
        return k0 * mu * sum(lj * np.linalg.norm(x[g]) for g, lj in zip(tree.groups, lams))

    def prox(z, c, eps=None, warm=None):
        return ProxResult(px.prox_tree(z, tree.with_weights(c * k0 * mu * lams)))

    def objective(x):
        return loss(x)[0] + mu * sum(lj * float(kap(np.linalg.norm(x[g]))) for g, lj in zip(tree.groups, lams))

    L_loss = 0.25 * float(np.linalg.norm(A * np.sqrt(w)[:, None], 2) ** 2)
    cover = np.zeros(A.shape[1])
    for g, lj in zip(tree.groups, lams):
        cover[g] += lj
    L = L_loss + 2 * rho * mu * float(cover.max(initial=0.0))
    return CompositeProblem(smooth, ConvexTerm(gbreve, prox), max(L, 1e-12), (A.shape[1],),
                            objective, name="tree")


def binary_tree_groups(depth: int, leaf_size: int) -> GroupStructure:
    """Complete binary tree over ``2**(depth-1) * leaf_size`` features.

    Every node is a group holding the features of its subtree; weights are
    set to one.
    """
    d = 2 ** (depth - 1) * leaf_size
    groups = []
    for level in range(depth):
        n_nodes = 2 ** level
        size = d // n_nodes
        groups += [np.arange(k * size, (k + 1) * size) for k in range(n_nodes)]
    return GroupStructure(groups, np.ones(len(groups)), "tree")


def synth_tree(N=200, depth=3, leaf_size=16, active_leaves=1, noise=0.1, seed=0):
    """Binary labels from a linear model supported on a few tree leaves.

    Returns ``(Dataset, x_true, tree)`` with ``d = 2**(depth-1) * leaf_size``.
    """
    rng = make_rng(seed, "tree")
    tree = binary_tree_groups(depth, leaf_size)
    d = 2 ** (depth - 1) * leaf_size
    n_leaves = 2 ** (depth - 1)
    x = np.zeros(d)
    for leaf in rng.permutation(n_leaves)[:active_leaves]:
        x[leaf * leaf_size:(leaf + 1) * leaf_size] = rng.standard_normal(leaf_size) + np.sign(rng.standard_normal())
    A = rng.standard_normal((N, d))
    m = A @ x + noise * rng.standard_normal(N)
    y = np.where(m >= 0, 1.0, -1.0)
    return Dataset(A, y), x, tree


# --------------------------------------------------------------------------
# TV image denoising with l1 loss

def _tv_terms(X, Y):
    return Y - X, px.dv(X), px.dh(X)


def build_tv_denoise(noisy: ImageGrid, spec: Optional[KappaSpec], mu: float) -> CompositeProblem:
    """``sum kappa(|Y - X|) + mu (sum kappa(|D_v X|) + sum kappa(|X D_h|))``.

    The convex part ``kappa0 (||X - Y||_1 + mu TV(X))`` has no closed-form
    prox; its oracle solves the dual to the requested gap and accepts a dual
    warm start.  The problem also carries the quadratic DC split (for CCCP)
    and, for LSP, the smoothed objective.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    Y = noisy.pixels
    m, n = Y.shape
    k0, rho, kap = _kappa_parts(spec)

    def combine(gr, gv, gh):
        return -gr + mu * (px.dv_t(gv) + px.dh_t(gh))

    def smooth(X):
        r, a, b = _tv_terms(X, Y)
        fr, gr = _scalar_bar(spec, r)
        fa, ga = _scalar_bar(spec, a)
        fb, gb = _scalar_bar(spec, b)
        return fr + mu * (fa + fb), combine(gr, ga, gb)

    def gbreve(X):
        return k0 * (np.abs(X - Y).sum() + mu * px.tv_norm(X))

    def prox(Z, c, eps=1e-10, warm=None):
        eps = 1e-10 if eps is None else eps
        return px.prox_tv_inexact(Z, Y, mu, 1.0 / (c * k0), eps, True, dual0=warm)

    def objective(X):
        r, a, b = _tv_terms(X, Y)
        return float(np.sum(kap(np.abs(r))) + mu * (np.sum(kap(np.abs(a))) + np.sum(kap(np.abs(b)))))

    op_norm = 1.0 + 8.0 * mu  # ||I||^2 + mu (||D_v||^2 + ||D_h||^2) upper bound
    L = max(rho * op_norm, 1e-12)
    convex = ConvexTerm(gbreve, prox, exact=False)

    dc = None
    smoothed = None
    if spec is not None:
        def convex_smooth(X):
            r, a, b = _tv_terms(X, Y)
            fr, gr = _scalar_bar(spec, r)
            fa, ga = _scalar_bar(spec, a)
            fb, gb = _scalar_bar(spec, b)
            q = 0.5 * rho * (np.sum(r * r) + mu * (np.sum(a * a) + np.sum(b * b)))
            return fr + mu * (fa + fb) + q, combine(gr + rho * r, ga + rho * a, gb + rho * b)

        def concave(X):
            r, a, b = _tv_terms(X, Y)
            q = 0.5 * rho * (np.sum(r * r) + mu * (np.sum(a * a) + np.sum(b * b)))
            return -q, -combine(rho * r, rho * a, rho * b)

        dc = DCSplit(zero_oracle, 0.0, convex_smooth, rho * op_norm, convex, concave)

        if spec.variant is Variant.LSP:
            def smoothed(X, lam):
                s = SmoothedKappaSpec(spec, lam)
                r, a, b = _tv_terms(X, Y)
                vr, gr = smoothed_kappa(s, r)
                va, ga = smoothed_kappa(s, a)
                vb, gb = smoothed_kappa(s, b)
                return float(vr.sum() + mu * (va.sum() + vb.sum())), combine(gr, ga, gb)

    return CompositeProblem(smooth, convex, L, (m, n), objective, dc, smoothed, name="tv_denoise")


def solve_convex_tv_l1(noisy: ImageGrid, mu: float, params=None):
    """Convex baseline ``min ||X - Y||_1 + mu TV(X)``.

    The objective has no smooth part, so :func:`~redistopt.solvers.fista`
    with step ``1 / params.tau`` (default 1) runs accelerated proximal-point
    iterations, each one an inexact TV prox.  Returns ``(X, trace)``.
    """
    params = params or SolverParams(max_iterations=2000)
    if params.tau is None:
        params = dataclasses.replace(params, tau=1.0)
    problem = build_tv_denoise(noisy, None, mu)
    return fista(problem, noisy.pixels, params)


def checkerboard(m=8, n=8, cells=2, low=0.25, high=0.75) -> ImageGrid:
    """Piecewise-constant test image with ``cells x cells`` blocks."""
    ri = (np.arange(m) * cells) // m
    ci = (np.arange(n) * cells) // n
    board = (ri[:, None] + ci[None, :]) % 2
    return ImageGrid(np.where(board == 1, high, low), "clean")


def synth_image(m=8, n=8) -> ImageGrid:
    """Shaded step: two flat levels split at mid-height plus a horizontal ramp.

    Values are ``0.3 + 0.4 [row > (m-1)/2] + 0.2 col/(n-1)``.  The ramp is
    what separates the penalties: the convex model shrinks the contrast of
    every small jump, the nonconvex ones keep it.
    """
    if m < 2 or n < 2:
        raise ValueError("image needs at least 2x2 pixels")
    i = np.arange(m)[:, None] / (m - 1)
    j = np.arange(n)[None, :] / (n - 1)
    return ImageGrid(0.3 + 0.4 * (i > 0.5) + 0.2 * j, "clean")


def salt_and_pepper(image: ImageGrid, frac=0.1, seed=0) -> ImageGrid:
    """Set ``frac`` of the pixels to 0 or 1 with equal probability."""
    rng = make_rng(seed, "salt_and_pepper")
    X = image.pixels.copy()
    k = int(round(frac * X.size))
    idx = rng.permutation(X.size)[:k]
    X.flat[idx] = rng.integers(0, 2, size=k).astype(float)
    return ImageGrid(X, "corrupted")


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean((a - b) ** 2)))


# --------------------------------------------------------------------------
# robust sparse coding

def build_rsc(y, D, spec: Optional[KappaSpec], mu: float) -> CompositeProblem:
    """``sum kappa(|y - D x|) + mu sum kappa(|x_i|)`` with a fixed dictionary ``D``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or D.shape[0] != y.shape[0]:
        raise ValueError(f"dictionary {D.shape} does not match signal of length {y.shape[0]}")
    d = D.shape[1]
    k0, rho, kap = _kappa_parts(spec)

    def smooth(x):
        fr, gr = _scalar_bar(spec, y - D @ x)
        fx, gx = _scalar_bar(spec, x)
        return fr + mu * fx, -D.T @ gr + mu * gx

    def gbreve(x):
        return k0 * (np.abs(y - D @ x).sum() + mu * np.abs(x).sum())

    def prox(z, c, eps=1e-10, warm=None):
        eps = 1e-10 if eps is None else eps
        return px.prox_l1_analysis(z, y, D, mu, 1.0 / (c * k0), eps, dual0=warm)

    def objective(x):
        return float(np.sum(kap(np.abs(y - D @ x))) + mu * np.sum(kap(np.abs(x))))

    L = max(rho * (float(np.linalg.norm(D, 2) ** 2) + mu), 1e-12)
    return CompositeProblem(smooth, ConvexTerm(gbreve, prox, exact=False), L, (d,), objective, name="rsc")


def synth_rsc(m=20, d=30, sparsity=3, outlier_frac=0.1, noise=0.01, seed=0):
    """Gaussian dictionary with unit columns, sparse code, gross outliers.

    Returns ``(y, D, x_true)``.
    """
    rng = make_rng(seed, "rsc")
    D = rng.standard_normal((m, d))
    D /= np.linalg.norm(D, axis=0)
    x = np.zeros(d)
    supp = rng.permutation(d)[:sparsity]
    x[supp] = rng.choice([-1.0, 1.0], sparsity) * (1.0 + rng.random(sparsity))
    y = D @ x + noise * rng.standard_normal(m)
    k = int(round(outlier_frac * m))
    out = rng.permutation(m)[:k]
    y[out] += rng.choice([-1.0, 1.0], k) * (3.0 + 2.0 * rng.random(k))
    return y, D, x
