"""Dense SVD by one-sided Jacobi rotations, plus low-rank factor splitting.

Matrices here are desk scale (at most a few tens of thousands of rows by a
few hundred columns), so a cubic dense method is fine and keeps the whole
numeric stack free of black-box decompositions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_JACOBI_EPS = 1e-15
_MAX_SWEEPS = 100


@dataclass
class SvdResult:
    """Thin SVD: a = u @ diag(sigma) @ v, with v stored row-style (r x n)."""
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v


def svd(a) -> SvdResult:
    """Full thin SVD with non-increasing singular values.

    Sign convention: the first entry of each u column whose magnitude
    exceeds 1e-12 is made non-negative, so repeated runs on the same matrix
    give identical factors.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"svd expects a 2d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains NaN or Inf")
    m, n = a.shape
    if m < n:
        flipped = svd(a.T)
        return _fix_signs(SvdResult(u=flipped.v.T, sigma=flipped.sigma,
                                    v=flipped.u.T))
    u, sigma, v = _one_sided_jacobi(a)
    return _fix_signs(SvdResult(u=u, sigma=sigma, v=v))


def _one_sided_jacobi(a):
    # Rotate column pairs of b until all pairs are orthogonal; the column
    # norms are then the singular values and b's columns the left vectors.
    # vt accumulates the same rotations, so a == b @ vt.T throughout.
    m, n = a.shape
    b = a.copy()
    vt = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                bi, bj = b[:, i], b[:, j]
                alpha = bi @ bi
                beta = bj @ bj
                gamma = bi @ bj
                if gamma == 0.0 or abs(gamma) <= _JACOBI_EPS * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                b[:, i], b[:, j] = c * bi - s * bj, s * bi + c * bj
                vi, vj = vt[:, i].copy(), vt[:, j].copy()
                vt[:, i], vt[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            break
    norms = np.linalg.norm(b, axis=0)
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    b = b[:, order]
    vt = vt[:, order]
    u = np.zeros((m, n))
    cutoff = norms[0] * 1e-14 if norms[0] > 0 else 0.0
    for k in range(n):
        if norms[k] > cutoff:
            u[:, k] = b[:, k] / norms[k]
        else:
            norms[k] = 0.0
            u[:, k] = _orthonormal_fill(u[:, :k])
    return u, norms, vt.T


def _orthonormal_fill(existing):
    # Deterministic completion for null-space columns: orthogonalize each
    # standard basis vector against the columns found so far and keep the
    # first with a usable residual.
    m = existing.shape[0]
    for idx in range(m):
        cand = np.zeros(m)
        cand[idx] = 1.0
        if existing.shape[1]:
            cand = cand - existing @ (existing.T @ cand)
            cand = cand - existing @ (existing.T @ cand)
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            return cand / norm
    raise RuntimeError("could not complete orthonormal basis")


def _fix_signs(res: SvdResult) -> SvdResult:
    for k in range(res.u.shape[1]):
        col = res.u[:, k]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            res.u[:, k] = -col
            res.v[k, :] = -res.v[k, :]
    return res


def truncate_factor(res: SvdResult, rank: int):
    """Split the best rank-R approximation into (u_r * sigma_r, v_r).

    The product of the returned pair is the closest rank-R matrix in
    Frobenius norm; the discarded squared error is sum(sigma[R:]**2).
    """
    r = len(res.sigma)
    if not 1 <= rank <= r:
        raise ValueError(f"rank must be in [1, {r}], got {rank}")
    w1 = res.u[:, :rank] * res.sigma[:rank]
    w2 = res.v[:rank, :]
    return w1, w2
