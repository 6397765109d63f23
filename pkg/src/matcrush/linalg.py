"""Dense matrix kernels shared by the compressors and the test oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ZERO_NORM = 1e-12
OVERSAMPLE = 10


@dataclass(frozen=True)
class TruncatedSVD:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _orth(a: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(a, mode="reduced")
    return q


def truncated_svd(M: np.ndarray, k: int, power_iters: int = 4, seed: int = 0,
                  tol: float = 1e-14, max_extra_iters: int = 2000) -> TruncatedSVD:
    """Randomized rank-k SVD (range finder + power iterations, Halko et al. style).

    ``power_iters`` is the minimum number of power iterations; subspace iteration
    then continues until the top-k singular values move by less than
    ``tol * S[0]`` between sweeps. The Gaussian test matrix is drawn from
    ``default_rng(seed)`` so the result is a deterministic function of the arguments.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    n, m = M.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"rank k={k} out of range [1, {min(n, m)}] for a {n}x{m} matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite values")

    rng = np.random.default_rng(seed)
    width = min(k + OVERSAMPLE, min(n, m))
    Q = _orth(M @ rng.standard_normal((m, width)))
    for _ in range(power_iters):
        Q = _orth(M.T @ Q)
        Q = _orth(M @ Q)

    Ub, S, Vt = np.linalg.svd(Q.T @ M, full_matrices=False)
    # flat spectra need more than the fixed iteration count to reach the optimum
    for _ in range(max_extra_iters):
        if width == min(n, m):
            break
        Q = _orth(M @ _orth(M.T @ Q))
        Ub, S_new, Vt = np.linalg.svd(Q.T @ M, full_matrices=False)
        done = np.all(np.abs(S_new[:k] - S[:k]) <= tol * max(S_new[0], np.finfo(float).tiny))
        S = S_new
        if done:
            break
    U = (Q @ Ub)[:, :k]
    S = S[:k]
    V = Vt[:k].T

    # largest-magnitude entry of every U column made non-negative
    pivots = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivots, np.arange(k)])
    signs[signs == 0] = 1.0
    return TruncatedSVD(U * signs, S.copy(), V * signs)


def kron(B: np.ndarray, C: np.ndarray) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    p, q = B.shape
    r, s = C.shape
    return (B[:, None, :, None] * C[None, :, None, :]).reshape(p * r, q * s)


def _check_same_shape(X: np.ndarray, Y: np.ndarray) -> None:
    if X.shape != Y.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {Y.shape}")


def rmse(X: np.ndarray, X_hat: np.ndarray) -> float:
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    _check_same_shape(X, X_hat)
    return float(np.sqrt(np.mean((X - X_hat) ** 2)))


def row_cosine_distance(X: np.ndarray, X_hat: np.ndarray) -> np.ndarray:
    """Per-row ``1 - cos``; rows where either side has norm < 1e-12 give 0."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    _check_same_shape(X, X_hat)
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(X_hat, axis=1)
    live = (nx >= ZERO_NORM) & (ny >= ZERO_NORM)
    out = np.zeros(X.shape[0])
    dots = np.einsum("ij,ij->i", X[live], X_hat[live])
    out[live] = 1.0 - dots / (nx[live] * ny[live])
    return out


def mean_cosine_distance(X: np.ndarray, X_hat: np.ndarray, row_weights: np.ndarray | None = None) -> float:
    d = row_cosine_distance(X, X_hat)
    if row_weights is None:
        return float(d.mean())
    w = np.asarray(row_weights, dtype=np.float64)
    if w.shape != (d.shape[0],):
        raise ValueError(f"row_weights must have length {d.shape[0]}, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("row_weights must be finite and non-negative")
    total = w.sum()
    if total == 0:
        raise ValueError("row_weights are all zero")
    return float(np.dot(w / total, d))
