"""Nonconvex Frank-Wolfe for low-rank matrix completion.

The iterate is kept as a factor ``X = U B V^T`` with orthonormal ``U, V``
and PSD ``B``; its singular values are the eigenvalues of ``B``, so the
spectral penalty is evaluated on ``B`` alone.  The observed-entry residual
is a sparse matrix and ``X`` is never formed densely.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator

from .models import make_rng
from .regularizers import KappaSpec, derived_constants, kappa_derivative, kappa_value
from .solvers import SolveTrace

ORTHO_TOL = 1e-8
PRUNE_TOL = 1e-12


@dataclass
class FactoredMatrix:
    """``X = U B V^T`` with orthonormal ``U`` (m x k), ``V`` (n x k) and PSD ``B``."""

    U: np.ndarray
    B: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.B.size == 0:
            self.B = np.zeros((0, 0))
        k = self.B.shape[0]
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[1] != k or self.V.shape[1] != k \
                or self.B.shape != (k, k):
            raise ValueError(f"inconsistent factor shapes U{self.U.shape} B{self.B.shape} V{self.V.shape}")

    @classmethod
    def zeros(cls, m, n):
        return cls(np.zeros((m, 0)), np.zeros((0, 0)), np.zeros((n, 0)))

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    @property
    def rank(self):
        return self.B.shape[0]

    def check(self):
        """Raise if the orthonormality / PSD invariants are violated."""
        k = self.rank
        if np.linalg.norm(self.U.T @ self.U - np.eye(k)) > ORTHO_TOL:
            raise ValueError("U is not orthonormal")
        if np.linalg.norm(self.V.T @ self.V - np.eye(k)) > ORTHO_TOL:
            raise ValueError("V is not orthonormal")
        if k and np.linalg.norm(self.B - self.B.T) > 1e-10:
            raise ValueError("B is not symmetric")
        if k and np.linalg.eigvalsh(0.5 * (self.B + self.B.T)).min() < -1e-10:
            raise ValueError("B is not PSD")

    def singular_values(self) -> np.ndarray:
        if self.rank == 0:
            return np.zeros(0)
        return np.clip(np.linalg.eigvalsh(0.5 * (self.B + self.B.T))[::-1], 0.0, None)

    def entries(self, rows, cols) -> np.ndarray:
        """``X[rows, cols]`` computed from the factor."""
        if self.rank == 0:
            return np.zeros(len(rows))
        return np.einsum("ij,ij->i", (self.U @ self.B)[rows], self.V[cols])

    def dense(self) -> np.ndarray:
        return self.U @ self.B @ self.V.T

    def save(self, path):
        np.savez(path, shape=np.array(self.shape), U=self.U, B=self.B, V=self.V)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["U"], z["B"], z["V"])


def factor_sqdist(a: FactoredMatrix, b: FactoredMatrix) -> float:
    """``||X_a - X_b||_F^2`` through the factors."""
    def sq(x):
        return float(np.sum(x.B * x.B))
    cross = 0.0
    if a.rank and b.rank:
        cross = float(np.sum((a.U.T @ b.U @ b.B @ b.V.T @ a.V) * a.B))
    return max(sq(a) + sq(b) - 2 * cross, 0.0)


@dataclass
class ObservedMatrix:
    """Observed entries ``(rows[i], cols[i]) -> values[i]``, 0-based, sorted by (row, col)."""

    shape: tuple
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise ValueError("rows, cols and values must have equal length")
        m, n = self.shape
        if len(self.rows) and (self.rows.min() < 0 or self.rows.max() >= m
                               or self.cols.min() < 0 or self.cols.max() >= n):
            raise ValueError(f"observed index out of range for shape {self.shape}")
        order = np.lexsort((self.cols, self.rows))
        self.rows, self.cols, self.values = self.rows[order], self.cols[order], self.values[order]
        key = self.rows * n + self.cols
        if len(key) > 1 and np.any(np.diff(key) == 0):
            raise ValueError("duplicate observed entry")

    def __len__(self):
        return len(self.values)

    def to_sparse(self, values=None) -> sparse.csr_matrix:
        vals = self.values if values is None else values
        return sparse.csr_matrix((vals, (self.rows, self.cols)), shape=self.shape)

    def subset(self, mask) -> "ObservedMatrix":
        return ObservedMatrix(self.shape, self.rows[mask], self.cols[mask], self.values[mask])


def completion_loss(x: FactoredMatrix, data: ObservedMatrix):
    """``0.5 ||P_Omega(X - O)||^2`` and the sparse residual ``P_Omega(X - O)``."""
    if x.shape != data.shape:
        raise ValueError(f"factor shape {x.shape} does not match data shape {data.shape}")
    r = x.entries(data.rows, data.cols) - data.values
    return 0.5 * float(r @ r), data.to_sparse(r)


def rmse_on(x: FactoredMatrix, data: ObservedMatrix) -> float:
    r = x.entries(data.rows, data.cols) - data.values
    return float(np.sqrt(np.mean(r * r))) if len(r) else 0.0


# --------------------------------------------------------------------------
# penalty on the factor

def _penalty_parts(spec: Optional[KappaSpec], mu: float):
    """``(mubar, rho)``; ``spec=None`` is the convex nuclear-norm path."""
    if spec is None:
        return mu, 0.0
    k0, rho = derived_constants(spec)
    return mu * k0, rho


def _eig(B):
    if B.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    s, Q = np.linalg.eigh(0.5 * (B + B.T))
    return np.clip(s, 0.0, None), Q


def _spectral_weights(spec, s):
    if spec is None or len(s) == 0:
        return np.zeros_like(s)
    return kappa_derivative(spec, s) - derived_constants(spec)[0]


def penalty_value(x: FactoredMatrix, spec: Optional[KappaSpec], mu: float) -> float:
    """``mu sum kappa(sigma_i(X))`` from the eigenvalues of ``B``."""
    s = x.singular_values()
    if spec is None:
        return mu * float(s.sum())
    return mu * float(np.sum(kappa_value(spec, s)))


def objective(x: FactoredMatrix, data: ObservedMatrix, spec, mu) -> float:
    return completion_loss(x, data)[0] + penalty_value(x, spec, mu)


def gradient_operator(x: FactoredMatrix, data: ObservedMatrix, spec, mu) -> LinearOperator:
    """``grad fbar(X) = P_Omega(X - O) + mu (U Q) diag(w) (V Q)^T`` as a linear operator.

    ``B = Q diag(s) Q^T`` and ``w = kappa'(s) - kappa0``.
    """
    _, R = completion_loss(x, data)
    s, Q = _eig(x.B)
    w = mu * _spectral_weights(spec, s)
    UQ, VQ = x.U @ Q, x.V @ Q
    m, n = data.shape
    if not np.any(w):
        return LinearOperator((m, n), matvec=lambda v: R @ np.ravel(v),
                              rmatvec=lambda u: R.T @ np.ravel(u), dtype=float)
    return LinearOperator(
        (m, n),
        matvec=lambda v: R @ np.ravel(v) + UQ @ (w * (VQ.T @ np.ravel(v))),
        rmatvec=lambda u: R.T @ np.ravel(u) + VQ @ (w * (UQ.T @ np.ravel(u))),
        dtype=float)


def rank1_svd(op, shape=None, seed=0, max_iter=100, tol=1e-9):
    """Leading singular triplet ``(u, s, v)`` of ``op`` by power iteration on ``op^T op``.

    ``op`` needs ``@`` and ``.T @`` (a dense/sparse matrix or a
    ``LinearOperator``).  A zero operator gives ``s = 0`` with unit ``u, v``.
    """
    m, n = op.shape if shape is None else shape
    if op.shape != (m, n):
        raise ValueError(f"operator shape {op.shape} does not match {(m, n)}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    s_old = 0.0
    opT = op.T
    for _ in range(max_iter):
        u = np.asarray(op @ v).ravel()
        s = float(np.linalg.norm(u))
        if s == 0.0:
            e = np.zeros(m)
            e[0] = 1.0
            return e, 0.0, v
        u /= s
        w = np.asarray(opT @ u).ravel()
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            break
        v = w / nw
        if abs(nw - s_old) <= tol * nw:
            s_old = nw
            break
        s_old = nw
    u = np.asarray(op @ v).ravel()
    s = float(np.linalg.norm(u))
    if s == 0.0:
        u = np.zeros(m)
        u[0] = 1.0
        return u, 0.0, v
    return u / s, s, v


def qp_objective(alpha, beta, c_bb, c_cross, s, c_grad, c_nuc, Lbar, mubar):
    a = np.asarray(alpha, dtype=float) - 1.0
    b = np.asarray(beta, dtype=float)
    quad = a * a * c_bb + 2 * a * b * c_cross + b * b
    return a * c_grad + b * s + 0.5 * Lbar * quad + mubar * ((a + 1.0) * c_nuc + b)


def fw_qp(c_bb, c_cross, s, c_grad, c_nuc, Lbar, mubar):
    """Minimise the two-variable step model over ``alpha, beta >= 0``.

    The model of ``X_{t+1} = alpha X_t + beta u v^T`` is
    ``(alpha-1) c_grad + beta s + Lbar/2 ||(alpha-1) X_t + beta u v^T||^2
    + mubar (alpha c_nuc + beta)`` with ``c_bb = ||B||_F^2``,
    ``c_cross = (u^T U) B (V^T v)``, ``s = u^T grad v``,
    ``c_grad = <B, U^T grad V>`` and ``c_nuc = ||B||_*``.  All KKT cases
    are enumerated and the best feasible one returned.
    """
    if not Lbar > 0:
        raise ValueError("Lbar must be positive")
    args = (c_bb, c_cross, s, c_grad, c_nuc, Lbar, mubar)
    cands = [(0.0, 0.0)]
    # beta = 0 edge
    if c_bb > 0:
        cands.append((max(0.0, 1.0 - (c_grad + mubar * c_nuc) / (Lbar * c_bb)), 0.0))
    # alpha = 0 edge
    cands.append((0.0, max(0.0, -(s - Lbar * c_cross + mubar) / Lbar)))
    # interior stationary point
    H = Lbar * np.array([[c_bb, c_cross], [c_cross, 1.0]])
    g0 = np.array([c_grad - Lbar * c_bb + mubar * c_nuc, s - Lbar * c_cross + mubar])
    if abs(np.linalg.det(H)) > 1e-14 * max(1.0, np.abs(H).max()) ** 2:
        a, b = np.linalg.solve(H, -g0)
        if a >= 0 and b >= 0:
            cands.append((float(a), float(b)))
    vals = [float(qp_objective(a, b, *args)) for a, b in cands]
    return cands[int(np.argmin(vals))]


def _prune(U, Bhat, V):
    """Rotate ``U Bhat V^T`` to ``U' diag(s) V'^T`` and drop zero singular values."""
    if Bhat.shape[0] == 0:
        return FactoredMatrix(U, np.zeros((0, 0)), V)
    P, s, Qt = np.linalg.svd(Bhat)
    keep = s > PRUNE_TOL * max(1.0, s[0] if len(s) else 0.0)
    return FactoredMatrix(U @ P[:, keep], np.diag(s[keep]), V @ Qt.T[:, keep])


def _psd_prune(U, B, V):
    """Eigen-rotate a symmetric PSD ``B`` and drop zero eigenvalues."""
    s, Q = _eig(B)
    keep = s > PRUNE_TOL * max(1.0, s.max(initial=0.0))
    return FactoredMatrix(U @ Q[:, keep], np.diag(s[keep]), V @ Q[:, keep])


def warmstart(U, u, V, v, B, alpha, beta) -> FactoredMatrix:
    """Factor of ``alpha U B V^T + beta u v^T``.

    ``[U, u]`` and ``[V, v]`` are QR-factorised and the small core
    ``R_U blockdiag(alpha B, beta) R_V^T`` is diagonalised by an SVD whose
    singular vectors are absorbed into the bases.  This keeps the
    reconstruction exact while making the core diagonal and non-negative.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    u = np.asarray(u, dtype=float).reshape(-1, 1)
    v = np.asarray(v, dtype=float).reshape(-1, 1)
    B = np.atleast_2d(np.asarray(B, dtype=float)) if np.size(B) else np.zeros((0, 0))
    k = B.shape[0]
    if k == 0:
        if beta == 0:
            return FactoredMatrix(np.zeros((u.shape[0], 0)), np.zeros((0, 0)), np.zeros((v.shape[0], 0)))
        return FactoredMatrix(u, [[float(beta)]], v)
    QU, RU = np.linalg.qr(np.hstack([U, u]))
    QV, RV = np.linalg.qr(np.hstack([V, v]))
    core = np.zeros((k + 1, k + 1))
    core[:k, :k] = alpha * B
    core[k, k] = beta
    return _prune(QU, RU @ core @ RV.T, QV)


# --------------------------------------------------------------------------
# local refinement on the factor

def _local_value(U, B, V, data, spec, mu, mubar):
    x = FactoredMatrix(U, B, V) if B.shape[0] else FactoredMatrix.zeros(*data.shape)
    loss, R = completion_loss(x, data)
    s, _ = _eig(B)
    if spec is None:
        pen = mubar * float(s.sum())
    else:
        pen = mu * float(np.sum(kappa_value(spec, s)))
    return loss + pen, R


def _retract(M):
    Q, R = np.linalg.qr(M)
    # fix column signs so the retraction is continuous
    sgn = np.sign(np.diag(R))
    sgn[sgn == 0] = 1.0
    return Q * sgn


def _sym(M):
    return 0.5 * (M + M.T)


def _proj_psd(B):
    S = 0.5 * (B + B.T)
    s, Q = np.linalg.eigh(S)
    return (Q * np.clip(s, 0.0, None)) @ Q.T


@dataclass
class FWParams:
    local_sweeps: int = 30
    power_iterations: int = 100
    power_tol: float = 1e-9
    seed: int = 0
    record_time: bool = True
    loss_lipschitz: float = 1.0


def local_optimize(x: FactoredMatrix, data: ObservedMatrix, spec: Optional[KappaSpec], mu: float,
                   params: FWParams = None) -> FactoredMatrix:
    """Decrease ``f(U B V^T) + mu sum kappa(eig(B))`` over the factor.

    Each sweep takes a backtracked gradient step on ``U`` (QR retraction),
    on ``V`` (QR retraction) and on ``B`` (symmetric PSD projection).  A
    step is kept only if it lowers the objective, so the result is never
    worse than the input.
    """
    params = params or FWParams()
    if x.rank == 0:
        return x
    mubar, _ = _penalty_parts(spec, mu)
    U, B, V = x.U.copy(), 0.5 * (x.B + x.B.T), x.V.copy()
    f, R = _local_value(U, B, V, data, spec, mu, mubar)
    steps = {"U": 1.0, "V": 1.0, "B": 1.0}

    def try_block(name, direction, make):
        nonlocal U, B, V, f, R
        gg = float(np.sum(direction * direction))
        if gg == 0.0:
            return
        eta = steps[name]
        for _ in range(30):
            cand = make(eta)
            fc, Rc = _local_value(*cand, data, spec, mu, mubar)
            if fc <= f - 1e-4 * eta * gg and fc < f:
                U, B, V = cand
                f, R = fc, Rc
                steps[name] = 2.0 * eta
                return
            eta *= 0.5
        steps[name] = eta

    for _ in range(params.local_sweeps):
        f_start = f
        # Stiefel gradients keep the skew part of U^T GU: rotations inside
        # span(U) change U B V^T because B is held symmetric
        GU = R @ (V @ B.T)
        GU = GU - U @ _sym(U.T @ GU)
        try_block("U", GU, lambda e: (_retract(U - e * GU), B, V))
        GV = R.T @ (U @ B)
        GV = GV - V @ _sym(V.T @ GV)
        try_block("V", GV, lambda e: (U, B, _retract(V - e * GV)))
        s, Q = _eig(B)
        GB = U.T @ (R @ V)
        GB = 0.5 * (GB + GB.T)
        if spec is None:
            GB = GB + mubar * np.eye(B.shape[0])
        else:
            GB = GB + (Q * (mu * kappa_derivative(spec, s))) @ Q.T
        PB = B - _proj_psd(B - GB)  # projected-gradient direction
        try_block("B", PB, lambda e: (U, _proj_psd(B - e * GB), V))
        if f_start - f <= 1e-15 * max(1.0, abs(f)):
            break
    return _psd_prune(U, B, V)


# --------------------------------------------------------------------------
# outer loop

def fw_step_coefficients(x: FactoredMatrix, op, u, v):
    """``(c_bb, c_cross, s, c_grad, c_nuc)`` for :func:`fw_qp`; all B terms are 0 when empty."""
    s = float(u @ np.asarray(op @ v).ravel())
    if x.rank == 0:
        return 0.0, 0.0, s, 0.0, 0.0
    B = x.B
    c_bb = float(np.sum(B * B))
    c_cross = float((u @ x.U) @ B @ (x.V.T @ v))
    GV = np.column_stack([np.asarray(op @ x.V[:, j]).ravel() for j in range(x.rank)])
    c_grad = float(np.sum(B * (x.U.T @ GV)))
    c_nuc = float(np.sum(x.singular_values()))
    return c_bb, c_cross, s, c_grad, c_nuc


def fw_solve(data: ObservedMatrix, spec: Optional[KappaSpec], mu: float, T: int,
             params: FWParams = None, x0: FactoredMatrix = None):
    """Frank-Wolfe on ``0.5||P_Omega(X - O)||^2 + mu sum kappa(sigma_i(X))``.

    ``spec=None`` runs the convex nuclear-norm path (zero spectral weights).
    Returns ``(FactoredMatrix, SolveTrace)``; the trace extras hold the
    rank, the objective right after the warm start (``warm``) and the
    step ``(alpha, beta)``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    params = params or FWParams()
    mubar, rho = _penalty_parts(spec, mu)
    Lbar = params.loss_lipschitz + 2 * rho * mu
    x = FactoredMatrix.zeros(*data.shape) if x0 is None else x0
    trace = SolveTrace(record_time=params.record_time)
    trace.add(0, objective(x, data, spec, mu), 0.0, rank=x.rank, warm=objective(x, data, spec, mu),
              alpha=1.0, beta=0.0)
    for t in range(1, T + 1):
        op = gradient_operator(x, data, spec, mu)
        u1, sig, v = rank1_svd(op, data.shape, seed=params.seed + t,
                               max_iter=params.power_iterations, tol=params.power_tol)
        u = -u1
        coeffs = fw_step_coefficients(x, op, u, v)
        alpha, beta = fw_qp(*coeffs, Lbar, mubar)
        xw = warmstart(x.U, u, x.V, v, x.B, alpha, beta)
        f_warm = objective(xw, data, spec, mu)
        x_new = local_optimize(xw, data, spec, mu, params)
        d = factor_sqdist(x_new, x)
        x = x_new
        trace.add(t, objective(x, data, spec, mu), d, rank=x.rank, warm=f_warm, alpha=alpha, beta=beta)
    trace.reason = "max_iterations"
    trace.point = x
    return x, trace


def critical_residual(x: FactoredMatrix, data: ObservedMatrix, spec, mu) -> float:
    """Distance from ``-grad fbar(X)`` to ``mubar * d||X||_*`` (dense diagnostic).

    With ``X = U S V^T`` the subdifferential is ``U V^T + W`` with
    ``U^T W = 0``, ``W V = 0`` and ``||W||_2 <= 1``.
    """
    mubar, _ = _penalty_parts(spec, mu)
    m, n = data.shape
    G = gradient_operator(x, data, spec, mu) @ np.eye(n)
    U, V = x.U, x.V
    k = x.rank
    PU = np.eye(m) - U @ U.T
    PV = np.eye(n) - V @ V.T
    res = 0.0
    if k:
        res += float(np.sum((U.T @ G @ V + mubar * np.eye(k)) ** 2))
        res += float(np.sum((U.T @ G @ PV) ** 2)) + float(np.sum((PU @ G @ V) ** 2))
    sv = np.linalg.svd(PU @ G @ PV, compute_uv=False)
    res += float(np.sum(np.maximum(sv - mubar, 0.0) ** 2))
    return float(np.sqrt(res))


def synth_lowrank(m=20, n=15, rank=3, obs_frac=0.5, noise=0.1, seed=0):
    """Planted ``m x n`` rank-``rank`` matrix with a random observed subset.

    Returns ``(train, test, truth)``: observed entries, the remaining
    entries as held-out set, and the dense noiseless matrix.
    """
    rng = make_rng(seed, "lowrank")
    truth = rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))
    k = int(round(obs_frac * m * n))
    perm = rng.permutation(m * n)
    rows, cols = np.divmod(np.arange(m * n), n)
    obs = np.zeros(m * n, dtype=bool)
    obs[perm[:k]] = True
    noisy = truth.ravel() + noise * rng.standard_normal(m * n)
    train = ObservedMatrix((m, n), rows[obs], cols[obs], noisy[obs])
    test = ObservedMatrix((m, n), rows[~obs], cols[~obs], truth.ravel()[~obs])
    return train, test, truth
