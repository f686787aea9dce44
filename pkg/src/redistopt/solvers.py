"""Outer optimisation loops over ``F = smooth + convex``.

All solvers work on a :class:`CompositeProblem`, which bundles a smooth
value/gradient oracle, a convex term with a (possibly inexact) prox, and a
Lipschitz estimate for the smooth part.  Difference-of-convex baselines (SCP,
CCCP) and the smoothing baseline read the extra pieces a builder attaches
(``dc`` and ``smoothed``).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .proximal import ProxResult, power_iteration

log = logging.getLogger(__name__)

Oracle = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SolverAbort(RuntimeError):
    """Raised when an objective turns non-finite; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class ConvexTerm:
    """Convex, possibly nonsmooth term with a proximal oracle.

    ``prox(z, c, eps=None, warm=None)`` returns a :class:`ProxResult` for
    ``argmin_x 0.5||x - z||^2 + c * term(x)``.  Exact oracles ignore ``eps``
    and ``warm``.
    """

    value: Callable[[np.ndarray], float]
    prox: Callable[..., ProxResult]
    exact: bool = True


def zero_term() -> ConvexTerm:
    return ConvexTerm(lambda x: 0.0, lambda z, c, eps=None, warm=None: ProxResult(np.array(z, dtype=float)))


def zero_oracle(x):
    return 0.0, np.zeros_like(x)


@dataclass
class DCSplit:
    """``F = loss + convex_smooth + convex + concave`` with the last one concave.

    ``convex_smooth + convex`` is the convex part of the regulariser after
    adding a quadratic; ``concave`` is the (smooth) concave quadratic that
    compensates.  ``loss`` is the smooth data term, zero when the loss is
    folded into the other pieces.
    """

    loss: Oracle
    loss_lipschitz: float
    convex_smooth: Oracle
    convex_smooth_lipschitz: float
    convex: ConvexTerm
    concave: Oracle


@dataclass
class CompositeProblem:
    """``min_x smooth(x) + convex(x)``.

    ``objective`` evaluates the original (untransformed) F; by construction
    it equals ``smooth + convex`` and defaults to that sum.
    """

    smooth: Oracle
    convex: ConvexTerm
    lipschitz: float
    shape: tuple
    objective: Optional[Callable[[np.ndarray], float]] = None
    dc: Optional[DCSplit] = None
    smoothed: Optional[Callable[[np.ndarray, float], "tuple[float, np.ndarray]"]] = None
    name: str = ""

    def __post_init__(self):
        if self.objective is None:
            self.objective = lambda x: self.smooth(x)[0] + self.convex.value(x)
        if not self.lipschitz > 0:
            raise ValueError("lipschitz estimate must be positive")


@dataclass
class SolverParams:
    max_iterations: int = 1000
    tau: Optional[float] = None
    delta: Optional[float] = None
    eta: float = 0.8
    eps_base: float = 0.95
    eps_schedule: Optional[Callable[[int], float]] = None
    tolerance: float = 1e-10
    seed: int = 0
    inner_tolerance: float = 1e-8
    inner_max_iterations: int = 5000
    prox_eps: float = 1e-12
    lambda0: float = 0.1
    nu: float = 0.95
    lambda_min: float = 1e-4
    stage_tolerance: float = 1e-4
    record_time: bool = True

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ValueError("eta must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def epsilon(self, t: int) -> float:
        if self.eps_schedule is not None:
            return float(self.eps_schedule(t))
        return self.eps_base ** t

    def resolve(self, lipschitz: float) -> tuple[float, float]:
        """Step parameter and sufficient-decrease margin for a given modulus."""
        tau = 1.05 * lipschitz if self.tau is None else float(self.tau)
        if not tau > lipschitz:
            raise ValueError(f"tau={tau} must exceed the Lipschitz estimate {lipschitz}")
        delta = 0.45 * (tau - lipschitz) if self.delta is None else float(self.delta)
        if not 0 < delta < tau - lipschitz:
            raise ValueError(f"delta={delta} must lie in (0, {tau - lipschitz})")
        return tau, delta


@dataclass
class SolveTrace:
    """Per-iteration record of a solve."""

    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    d_t: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    elapsed_ms: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    point: Optional[np.ndarray] = None
    reason: str = ""
    record_time: bool = True
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add(self, it, obj, d, gap=0.0, **extra):
        if not math.isfinite(obj):
            self.reason = "non-finite objective"
            raise SolverAbort(f"objective became {obj} at iteration {it}", self)
        self.iteration.append(int(it))
        self.objective.append(float(obj))
        self.d_t.append(float(d))
        self.gap.append(float(gap))
        ms = (time.perf_counter() - self._t0) * 1e3 if self.record_time else 0.0
        self.elapsed_ms.append(ms)
        for k, v in extra.items():
            self.extras.setdefault(k, []).append(v)

    def __len__(self):
        return len(self.iteration)

    @property
    def final_objective(self) -> float:
        return self.objective[-1] if self.objective else float("nan")

    def total(self, key) -> int:
        return int(sum(self.extras.get(key, [])))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "objective", "d_t", "gap", "elapsed_ms"])
        for row in zip(self.iteration, self.objective, self.d_t, self.gap, self.elapsed_ms):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _sqdist(a, b) -> float:
    d = np.asarray(a) - np.asarray(b)
    return float(np.vdot(d, d).real)


# --------------------------------------------------------------------------
# proximal-gradient family

def nmapg(problem: CompositeProblem, x0, params: SolverParams = None):
    """Nonmonotone accelerated proximal gradient with an exact prox.

    Returns ``(x, trace)``.  Extrapolated steps are accepted against the
    averaged reference ``c_t``; otherwise a plain proximal-gradient step from
    ``x_t`` is computed and the lower-objective candidate is kept.
    """
    params = params or SolverParams()
    tau, delta = params.resolve(problem.lipschitz)
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)

    def step(v):
        _, g = problem.smooth(v)
        return problem.convex.prox(v - g / tau, 1.0 / tau).point

    x = np.array(x0, dtype=float)
    x_prev, z = x.copy(), x.copy()
    a_prev, a = 0.0, 1.0
    Fx = F(x)
    c, q = Fx, 1.0
    trace.add(0, Fx, 0.0, accepted=True, reference=c, sufficient=0.0)
    for t in range(1, params.max_iterations + 1):
        y = x + (a_prev / a) * (z - x) + ((a_prev - 1.0) / a) * (x - x_prev)
        z = step(y)
        Fz = F(z)
        dz = _sqdist(z, y)
        if Fz <= c - 0.5 * delta * dz:
            x_new, F_new, d, accepted = z, Fz, dz, True
        else:
            v = step(x)
            Fv = F(v)
            accepted = False
            if Fz <= Fv:
                x_new, F_new, d = z, Fz, dz
            else:
                x_new, F_new, d = v, Fv, _sqdist(v, x)
        trace.add(t, F_new, d, accepted=accepted, reference=c, sufficient=dz)
        x_prev, x = x, x_new
        a_prev, a = a, 0.5 * (math.sqrt(4 * a * a + 1) + 1)
        q_new = params.eta * q + 1
        c = (params.eta * q * c + F_new) / q_new
        q = q_new
        if d < params.tolerance:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = x
    return x, trace


def inexact_nmapg(problem: CompositeProblem, x0, params: SolverParams = None):
    """Nonmonotone APG with gap-controlled inexact proximal steps.

    Each prox is solved until its duality gap is at most ``eps_t`` (from
    ``params.epsilon(t)``); the extrapolated candidate is accepted against
    ``F(x_t)``, and otherwise replaced by an inexact step from ``x_t``.  The
    trace records ``d_t = ||x_{t+1} - v_t||^2`` with ``v_t`` the point the
    accepted prox was taken from.
    """
    params = params or SolverParams()
    tau, delta = params.resolve(problem.lipschitz)
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)
    warm = [None]

    def step(v, eps):
        _, g = problem.smooth(v)
        res = problem.convex.prox(v - g / tau, 1.0 / tau, eps=eps, warm=warm[0])
        if res.dual is not None:
            warm[0] = res.dual
        return res

    x = np.array(x0, dtype=float)
    x_prev, z = x.copy(), x.copy()
    a_prev, a = 0.0, 1.0
    Fx = F(x)
    trace.add(0, Fx, 0.0, accepted=True, eps=0.0, inner=0, reference=Fx)
    for t in range(1, params.max_iterations + 1):
        eps = params.epsilon(t)
        y = x + (a_prev / a) * (z - x) + ((a_prev - 1.0) / a) * (x - x_prev)
        res = step(y, eps)
        z = res.point
        Fz = F(z)
        inner = res.inner_iterations
        dz = _sqdist(z, y)
        if Fz <= Fx - 0.5 * delta * dz:
            x_new, F_new, d, gap, accepted = z, Fz, dz, res.gap, True
        else:
            res_v = step(x, eps)
            inner += res_v.inner_iterations
            x_new, F_new = res_v.point, F(res_v.point)
            d, gap, accepted = _sqdist(x_new, x), res_v.gap, False
        trace.add(t, F_new, d, gap, accepted=accepted, eps=eps, inner=inner, reference=Fx)
        x_prev, x, Fx = x, x_new, F_new
        a_prev, a = a, 0.5 * (math.sqrt(4 * a * a + 1) + 1)
        if d < params.tolerance:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = x
    return x, trace


def fista(problem: CompositeProblem, x0, params: SolverParams = None):
    """Accelerated proximal gradient for a convex smooth part.

    Step ``1/L`` with ``L = params.tau`` (default: the problem's Lipschitz
    estimate) and the ``alpha_0 = alpha_1 = 1`` momentum recursion.
    Inexact prox oracles are called with ``params.prox_eps``.
    """
    params = params or SolverParams()
    L = problem.lipschitz if params.tau is None else float(params.tau)
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)
    warm = None
    x = np.array(x0, dtype=float)
    x_prev = x.copy()
    a_prev, a = 1.0, 1.0
    trace.add(0, F(x), 0.0, inner=0)
    for t in range(1, params.max_iterations + 1):
        y = x + ((a_prev - 1.0) / a) * (x - x_prev)
        _, g = problem.smooth(y)
        res = problem.convex.prox(y - g / L, 1.0 / L, eps=params.prox_eps, warm=warm)
        if res.dual is not None:
            warm = res.dual
        d = _sqdist(res.point, y)
        x_prev, x = x, res.point
        trace.add(t, F(x), d, res.gap, inner=res.inner_iterations)
        a_prev, a = a, 0.5 * (math.sqrt(4 * a * a + 1) + 1)
        if d < params.tolerance:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = x
    return x, trace


def _prox_split(w, c, smooth: Oracle, smooth_lip: float, term: ConvexTerm, tol, max_iter, x0=None):
    """``argmin_x 0.5||x - w||^2 + c (smooth(x) + term(x))`` by proximal gradient.

    The objective is 1-strongly convex, so plain forward-backward steps
    contract; iteration stops once a step moves less than ``tol``.
    """
    step = 1.0 / (1.0 + c * smooth_lip)
    x = np.array(w if x0 is None else x0, dtype=float)
    for k in range(1, max_iter + 1):
        _, g = smooth(x)
        x_new = term.prox(x - step * (x - w + c * g), step * c).point
        moved = np.linalg.norm(x_new - x)
        x = x_new
        if moved <= tol:
            return x, k
    return x, max_iter


def scp(problem: CompositeProblem, x0, params: SolverParams = None):
    """Sequential convex programming on the quadratic DC split.

    ``x_{t+1} = prox_{convex / L}(x_t - (grad loss(x_t) + grad concave(x_t)) / L)``
    where the prox of the convex regulariser part is solved numerically to
    high accuracy.  ``L`` is ``params.tau`` or 1.05 times the loss modulus.
    """
    params = params or SolverParams()
    dc = problem.dc
    if dc is None:
        raise ValueError("scp needs a problem with a DC split")
    L = 1.05 * dc.loss_lipschitz if params.tau is None else float(params.tau)
    if L <= 0:
        L = 1.0
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)
    x = np.array(x0, dtype=float)
    trace.add(0, F(x), 0.0, inner=0)
    for t in range(1, params.max_iterations + 1):
        _, gl = dc.loss(x)
        _, gc = dc.concave(x)
        w = x - (gl + gc) / L
        x_new, inner = _prox_split(w, 1.0 / L, dc.convex_smooth, dc.convex_smooth_lipschitz,
                                   dc.convex, 1e-14, params.inner_max_iterations, x0=x)
        d = _sqdist(x_new, x)
        x = x_new
        trace.add(t, F(x), d, inner=inner)
        if d < params.tolerance:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = x
    return x, trace


def cccp(problem: CompositeProblem, x0, params: SolverParams = None):
    """Convex-concave procedure.

    The concave part is linearised at ``x_t`` and the convex surrogate
    ``loss + convex_smooth + <grad concave(x_t), x> + convex`` is minimised by
    :func:`fista`, warm-started at ``x_t``, until its step norm drops below
    ``params.inner_tolerance``.  Stops when ``||x_{t+1} - x_t||^2`` is below
    ``params.tolerance``.
    """
    params = params or SolverParams()
    dc = problem.dc
    if dc is None:
        raise ValueError("cccp needs a problem with a DC split")
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)
    inner_params = SolverParams(max_iterations=params.inner_max_iterations,
                                tolerance=params.inner_tolerance ** 2,
                                prox_eps=params.prox_eps, record_time=False)
    lip = dc.loss_lipschitz + dc.convex_smooth_lipschitz
    x = np.array(x0, dtype=float)
    trace.add(0, F(x), 0.0, inner=0, inner_prox=0)
    for t in range(1, params.max_iterations + 1):
        _, s = dc.concave(x)

        def surrogate(v, s=s):
            fl, gl = dc.loss(v)
            fs, gs = dc.convex_smooth(v)
            return fl + fs + float(np.vdot(s, v)), gl + gs + s

        sub = CompositeProblem(surrogate, dc.convex, max(lip, 1e-12), problem.shape)
        x_new, tr = fista(sub, x, inner_params)
        d = _sqdist(x_new, x)
        x = x_new
        trace.add(t, F(x), d, inner=len(tr) - 1, inner_prox=tr.total("inner"))
        if d < params.tolerance:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = x
    return x, trace


# --------------------------------------------------------------------------
# smooth inner solvers

def gradient_descent(oracle: Oracle, x0, tol, max_iter, step0=1.0, shrink=0.5, slope=1e-4):
    """Gradient descent with Armijo backtracking until ``||grad|| < tol``.

    Returns ``(x, iterations, last_step, grad_norm)``.  The trial step grows
    by 2x after each accepted step so it can recover from early shrinking.
    """
    x = np.array(x0, dtype=float)
    fx, g = oracle(x)
    step = step0
    gn = float(np.linalg.norm(g))
    k = 0
    while k < max_iter and gn >= tol:
        k += 1
        gg = gn * gn
        while True:
            x_try = x - step * g
            f_try, g_try = oracle(x_try)
            if abs(f_try - fx) <= 1e-12 * max(1.0, abs(fx)):
                # change below round-off, where the Armijo test can pass on a
                # step that merely reflects across the minimiser; decide on the
                # directional derivative instead (Hager-Zhang style)
                if float(np.vdot(g_try, g)) >= 0.5 * gg:
                    break
            elif f_try <= fx - slope * step * gg:
                break
            step *= shrink
            if step < 1e-20:
                return x, k, step, gn
        x, fx, g = x_try, f_try, g_try
        gn = float(np.linalg.norm(g))
        step *= 2.0
    return x, k, step, gn


def smoothing_solver(problem: CompositeProblem, x0, params: SolverParams = None):
    """Continuation on the smoothing radius ``lambda_i = lambda0 * nu**i``.

    Each stage minimises ``problem.smoothed(x, lambda_i)`` by backtracking
    gradient descent, warm-started from the previous stage.  Intermediate
    stages stop at ``params.stage_tolerance``; the solve ends at the first
    stage with ``lambda < params.lambda_min`` whose gradient norm falls below
    ``params.tolerance``.
    """
    params = params or SolverParams()
    if problem.smoothed is None:
        raise ValueError("smoothing_solver needs a problem with a smoothed objective")
    F = problem.objective
    trace = SolveTrace(record_time=params.record_time)
    x = np.array(x0, dtype=float)
    trace.add(0, F(x), 0.0, inner=0, lam=params.lambda0)
    lam = params.lambda0
    step = 1.0 / problem.lipschitz
    i = 0
    while True:
        last = lam < params.lambda_min
        tol = params.tolerance if last else params.stage_tolerance
        oracle = lambda v, lam=lam: problem.smoothed(v, lam)
        x_new, its, step, gn = gradient_descent(oracle, x, tol, params.inner_max_iterations, step0=step)
        d = _sqdist(x_new, x)
        x = x_new
        i += 1
        trace.add(i, F(x), d, inner=its, lam=lam, grad_norm=gn)
        if last:
            trace.reason = "converged" if gn < tol else "stage_cap"
            break
        if i >= params.max_iterations:
            trace.reason = "max_iterations"
            break
        lam *= params.nu
    trace.point = x
    return x, trace


def admm_consensus(locals_: Sequence[Oracle], convex: ConvexTerm, tau: float,
                   params: SolverParams = None, x0=None, objective=None):
    """Consensus ADMM for ``sum_i f_i(x^i) + g(y)`` s.t. ``x^i = y``.

    ``locals_`` are smooth oracles (each already carrying its ``1/M`` share
    of the concave remainder) and ``convex`` is the convexified regulariser.
    The y-step is the exact minimiser of the augmented Lagrangian,
    ``prox_{g/(M tau)}(mean_i(x^i + p^i / tau))``.  ``x0`` is the common
    starting point of all local copies and ``y``.
    """
    params = params or SolverParams()
    if x0 is None:
        raise ValueError("admm_consensus needs an initial point x0")
    M = len(locals_)
    if M == 0:
        raise ValueError("at least one local oracle is required")
    y = np.array(x0, dtype=float)
    xs = [y.copy() for _ in range(M)]
    ps = [np.zeros_like(y) for _ in range(M)]
    steps = [1.0 / tau] * M
    if objective is None:
        objective = lambda v: sum(f(v)[0] for f in locals_) + convex.value(v)
    trace = SolveTrace(record_time=params.record_time)
    trace.add(0, objective(y), 0.0, residual=0.0, inner=0)
    for t in range(1, params.max_iterations + 1):
        inner = 0
        for i, f in enumerate(locals_):
            def aug(v, f=f, p=ps[i]):
                fv, gv = f(v)
                r = v - y
                return fv + float(p @ r) + 0.5 * tau * float(r @ r), gv + p + tau * r
            xs[i], its, steps[i], gn = gradient_descent(aug, xs[i], params.inner_tolerance,
                                                        params.inner_max_iterations, step0=steps[i])
            inner += its
            if gn >= params.inner_tolerance:
                trace.reason = "inner solver did not converge"
                raise SolverAbort(f"local solve {i} stalled at gradient norm {gn:.3g}", trace)
        avg = sum(xi + pi / tau for xi, pi in zip(xs, ps)) / M
        y_new = convex.prox(avg, 1.0 / (M * tau)).point
        for i in range(M):
            ps[i] = ps[i] + tau * (xs[i] - y_new)
        residual = max(float(np.linalg.norm(xi - y_new)) for xi in xs)
        d = _sqdist(y_new, y)
        y = y_new
        trace.add(t, objective(y), d, residual=residual, inner=inner)
        if residual < params.tolerance and d < params.tolerance ** 2:
            trace.reason = "converged"
            break
    else:
        trace.reason = "max_iterations"
    trace.point = y
    trace.extras["locals"] = [xi.copy() for xi in xs]
    return y, trace


def estimate_lipschitz(oracle: Oracle = None, shape=None, seed=0, data=None, n_iter=100) -> float:
    """Smoothness modulus of a gradient oracle.

    With ``data`` (a matrix ``A``) the largest eigenvalue of ``A^T A`` is
    returned by power iteration.  Otherwise the largest of ten random
    gradient-difference ratios ``||g(x) - g(y)|| / ||x - y||`` is used.
    """
    if data is not None:
        A = data
        n = A.shape[1]
        return power_iteration(lambda v: A.T @ (A @ v), n, n_iter, seed)
    if oracle is None or shape is None:
        raise ValueError("need either data or (oracle, shape)")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(10):
        a = rng.standard_normal(shape)
        b = a + 1e-2 * rng.standard_normal(shape)
        ga, gb = oracle(a)[1], oracle(b)[1]
        best = max(best, float(np.linalg.norm(ga - gb) / np.linalg.norm(a - b)))
    return best if best > 0 else 1.0
