"""Proximal operators of the convexified regularizers.

Closed forms are provided for the lasso, group-lasso, sparse-group and
tree-structured penalties.  The total-variation and l1-analysis composites
have no closed form and are solved through their box-constrained duals, with
the primal-dual gap reported so callers can control inexactness.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .regularizers import DomainError

INNER_MAX_ITER = 10_000


class StructureError(ValueError):
    """Group family does not have the required disjoint / laminar shape."""


@dataclass
class GroupStructure:
    """Index groups over a length-``d`` vector with non-negative weights.

    Indices are 0-based.  ``kind="disjoint"`` requires pairwise disjoint
    groups; ``kind="tree"`` requires a laminar family (any two groups are
    disjoint or nested).
    """

    groups: list
    weights: np.ndarray
    kind: str = "disjoint"

    def __post_init__(self):
        self.groups = [np.asarray(g, dtype=int) for g in self.groups]
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.weights) != len(self.groups):
            raise StructureError("one weight per group is required")
        if np.any(self.weights < 0):
            raise StructureError("group weights must be non-negative")
        if self.kind not in ("disjoint", "tree"):
            raise StructureError(f"unknown group kind {self.kind!r}")
        sets = [frozenset(g.tolist()) for g in self.groups]
        for g, s in zip(self.groups, sets):
            if len(s) != len(g) or (len(g) and g.min() < 0):
                raise StructureError("groups must hold distinct non-negative indices")
        for i in range(len(sets)):
            for j in range(i + 1, len(sets)):
                a, b = sets[i], sets[j]
                if not (a & b):
                    continue
                if self.kind == "disjoint":
                    raise StructureError(f"groups {i} and {j} overlap")
                if not (a <= b or b <= a):
                    raise StructureError(f"groups {i} and {j} are neither disjoint nor nested")

    def __len__(self):
        return len(self.groups)

    def with_weights(self, weights) -> "GroupStructure":
        return GroupStructure(self.groups, weights, self.kind)

    def order(self) -> list:
        """Group indices sorted children-before-parents (by size, then index)."""
        return sorted(range(len(self.groups)), key=lambda j: (len(self.groups[j]), j))


@dataclass
class ProxResult:
    point: np.ndarray
    gap: float = 0.0
    inner_iterations: int = 0
    converged: bool = True
    dual: Optional[tuple] = field(default=None, repr=False)


def _check_lam(lam):
    if lam < 0:
        raise DomainError(f"threshold must be non-negative, got {lam}")


def prox_l1(z, lam: float) -> np.ndarray:
    """Soft thresholding ``sign(z) * max(|z| - lam, 0)``."""
    _check_lam(lam)
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def prox_group_l2(z, lam: float) -> np.ndarray:
    """Block shrinkage ``max(1 - lam / ||z||, 0) * z``."""
    _check_lam(lam)
    z = np.asarray(z, dtype=float)
    n = np.linalg.norm(z)
    if n <= lam:
        return np.zeros_like(z)
    return (1.0 - lam / n) * z


def prox_sparse_group(z, lam: float, groups: GroupStructure) -> np.ndarray:
    """Prox of ``lam ||x||_1 + sum_j w_j ||x_Gj||_2`` for disjoint groups.

    Soft thresholding followed by per-group shrinkage; coordinates outside
    every group only see the soft threshold.
    """
    if groups.kind != "disjoint":
        raise StructureError("sparse-group prox needs disjoint groups")
    x = prox_l1(z, lam)
    for g, w in zip(groups.groups, groups.weights):
        x[g] = prox_group_l2(x[g], w)
    return x


def prox_tree(z, groups: GroupStructure) -> np.ndarray:
    """Prox of ``sum_j w_j ||x_Gj||_2`` over a laminar (tree) group family.

    One pass of block shrinkage, visiting leaves before their ancestors,
    gives the exact proximal point.
    """
    if groups.kind != "tree":
        raise StructureError("tree prox needs kind='tree'")
    x = np.array(z, dtype=float)
    for j in groups.order():
        g = groups.groups[j]
        x[g] = prox_group_l2(x[g], groups.weights[j])
    return x


# --------------------------------------------------------------------------
# finite differences for images (matrix free)

def dv(X):
    """Vertical differences ``D_v X`` of shape ``(m-1, n)``."""
    return X[1:, :] - X[:-1, :]


def dh(X):
    """Horizontal differences ``X D_h`` of shape ``(m, n-1)``."""
    return X[:, 1:] - X[:, :-1]


def dv_t(P):
    """Adjoint of :func:`dv`: ``D_v^T P`` with shape ``(m, n)``."""
    m = P.shape[0] + 1
    out = np.zeros((m, P.shape[1]))
    out[1:, :] += P
    out[:-1, :] -= P
    return out


def dh_t(Q):
    """Adjoint of :func:`dh`: ``Q D_h^T`` with shape ``(m, n)``."""
    n = Q.shape[1] + 1
    out = np.zeros((Q.shape[0], n))
    out[:, 1:] += Q
    out[:, :-1] -= Q
    return out


def tv_norm(X) -> float:
    return float(np.abs(dv(X)).sum() + np.abs(dh(X)).sum())


def power_iteration(apply, size, n_iter=50, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD operator given by ``apply``."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = apply(v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
    return lam


def _box_dual_apg(u0, grad, certify, L, eps, max_iter):
    """Accelerated projected gradient on ``[-1, 1]^n`` with gap-based exit.

    ``grad(u)`` is the gradient of the dual objective being minimised and
    ``certify(u)`` returns ``(gap, primal_point)`` for a feasible ``u``.
    Momentum is restarted whenever the step direction turns uphill.
    """
    u = np.clip(u0, -1.0, 1.0)
    gap, point = certify(u)
    best = (gap, point, u)
    if gap <= eps or L == 0:
        return best[0], best[1], best[2], 0, gap <= eps
    step = 1.0 / L
    y, u_prev, t = u.copy(), u.copy(), 1.0
    for k in range(1, max_iter + 1):
        u_new = np.clip(y - step * grad(y), -1.0, 1.0)
        if np.dot(y - u_new, u_new - u_prev) > 0:
            t = 1.0
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = u_new + ((t - 1.0) / t_new) * (u_new - u_prev)
        u_prev, t = u_new, t_new
        gap, point = certify(u_new)
        if gap < best[0]:
            best = (gap, point, u_new)
        if gap <= eps:
            return gap, point, u_new, k, True
    return best[0], best[1], best[2], max_iter, False


def prox_tv_inexact(Z, Y=None, mu=1.0, tau=1.0, eps=1e-8, include_l1=True,
                    dual0=None, max_iter=INNER_MAX_ITER) -> ProxResult:
    """Approximately solve ``min_X 0.5||X - Z||^2 + (||X - Y||_1 + mu TV(X)) / tau``.

    The dual over ``(W, P, Q)`` in unit boxes is maximised by accelerated
    projected gradient until the primal-dual gap drops below ``eps``.  The
    ``||X - Y||_1`` term (and ``W``) is dropped when ``include_l1`` is false.
    ``dual0`` warm-starts the dual; the final dual is returned in
    ``ProxResult.dual``.
    """
    Z = np.asarray(Z, dtype=float)
    m, n = Z.shape
    if include_l1:
        if Y is None:
            raise ValueError("Y is required when include_l1 is set")
        Y = np.asarray(Y, dtype=float)
        if Y.shape != Z.shape:
            raise ValueError("Z and Y must have the same shape")
    if mu < 0 or tau <= 0 or eps <= 0:
        raise DomainError("need mu >= 0, tau > 0 and eps > 0")

    nw = m * n if include_l1 else 0
    npv = (m - 1) * n
    nq = m * (n - 1)

    def split(u):
        W = u[:nw].reshape(m, n) if include_l1 else None
        P = u[nw:nw + npv].reshape(m - 1, n)
        Q = u[nw + npv:].reshape(m, n - 1)
        return W, P, Q

    def adjoint(u):
        W, P, Q = split(u)
        K = mu * (dv_t(P) + dh_t(Q))
        if include_l1:
            K = K + W
        return K

    def forward(X):
        parts = [mu * dv(X).ravel(), mu * dh(X).ravel()]
        if include_l1:
            parts.insert(0, X.ravel())
        return np.concatenate(parts)

    shift = np.zeros(nw + npv + nq)
    if include_l1:
        shift[:nw] = Y.ravel()

    def grad(u):
        X = Z - adjoint(u) / tau
        return shift - forward(X)

    def primal(X):
        r = mu * tv_norm(X)
        if include_l1:
            r += np.abs(X - Y).sum()
        return 0.5 * np.sum((X - Z) ** 2) + r / tau

    def certify(u):
        K = adjoint(u)
        X = Z - K / tau
        d = (np.sum(K * Z) - 0.5 * np.sum(K * K) / tau) / tau
        if include_l1:
            d -= np.sum(u[:nw] * Y.ravel()) / tau
        return max(primal(X) - d, 0.0), X

    size = nw + npv + nq
    if size == 0:
        return ProxResult(Z.copy())
    L = 1.05 * power_iteration(lambda v: forward(adjoint(v)), size, 50) / tau
    u0 = np.zeros(size) if dual0 is None else np.asarray(dual0, dtype=float)
    gap, X, u, its, ok = _box_dual_apg(u0, grad, certify, L, eps, max_iter)
    return ProxResult(X, gap, its, ok, u)


def prox_l1_analysis(z, y, D, mu=1.0, tau=1.0, eps=1e-8, dual0=None,
                     max_iter=INNER_MAX_ITER) -> ProxResult:
    """Approximately solve ``min_x 0.5||x - z||^2 + (||y - D x||_1 + mu ||x||_1) / tau``.

    Works on the dual over ``(p, q)`` in unit boxes; ``x = z - (D^T p + mu q) / tau``.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    m, d = D.shape
    if z.shape != (d,) or y.shape != (m,):
        raise ValueError(f"shape mismatch: D {D.shape}, z {z.shape}, y {y.shape}")
    if mu < 0 or tau <= 0 or eps <= 0:
        raise DomainError("need mu >= 0, tau > 0 and eps > 0")

    def adjoint(u):
        return D.T @ u[:m] + mu * u[m:]

    def forward(x):
        return np.concatenate([D @ x, mu * x])

    shift = np.concatenate([y, np.zeros(d)])

    def grad(u):
        return shift - forward(z - adjoint(u) / tau)

    def certify(u):
        K = adjoint(u)
        x = z - K / tau
        p = np.abs(y - D @ x).sum() + mu * np.abs(x).sum()
        primal = 0.5 * np.sum((x - z) ** 2) + p / tau
        dual = (K @ z - 0.5 * (K @ K) / tau - u[:m] @ y) / tau
        return max(primal - dual, 0.0), x

    L = 1.05 * power_iteration(lambda v: forward(adjoint(v)), m + d, 50) / tau
    u0 = np.zeros(m + d) if dual0 is None else np.asarray(dual0, dtype=float)
    gap, x, u, its, ok = _box_dual_apg(u0, grad, certify, L, eps, max_iter)
    return ProxResult(x, gap, its, ok, u)
