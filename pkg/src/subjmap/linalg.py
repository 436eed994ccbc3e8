"""Dense linear algebra kernels and the seeded randomness substrate.

Everything operates on float64 numpy arrays.  The three factorization
routines are self-contained so their behaviour is identical on every
platform: QR orthonormalization uses Householder reflections with the
R-diagonal forced positive, the SVD is a one-sided Jacobi iteration, and
PCA diagonalizes the sample covariance with that SVD.

Randomness is drawn from numpy's Philox bit generator, a counter-based
generator whose full stream is determined by a 64-bit key.  Component
streams are split off a root seed with ``SeededRng.derive(tag)``, which
hashes ``(seed, tag)`` with SHA-256, so one global seed reproduces every
draw in an experiment.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import ConvergenceError, DimensionError, RankDeficient, ShapeError

SVD_MAX_SIDE = 512


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 2-D array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


class SeededRng:
    """Deterministic random source with hierarchical stream derivation.

    Backed by ``numpy.random.Philox`` keyed on a 64-bit seed.  Instances
    are single-owner: never share one across concurrent tasks; derive a
    child stream per task instead.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) % 2**64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def derive(self, tag: str) -> "SeededRng":
        """Child stream keyed on SHA-256(seed || tag); independent of draws made so far."""
        payload = self.seed.to_bytes(8, "little") + tag.encode("utf-8")
        digest = hashlib.sha256(payload).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def qr_orthonormalize(m) -> np.ndarray:
    """Orthonormalize the columns of ``m`` (r >= c) via Householder QR.

    Returns Q with Q.T @ Q = I and span(Q) = span(m).  The implicit R has a
    positive diagonal, which pins the sign of every column and makes the
    routine idempotent up to float roundoff.

    Raises RankDeficient when a pivot column norm falls below 1e-12.
    """
    a = as_matrix(m, "m")
    r, c = a.shape
    if r < c:
        raise ShapeError(f"need rows >= cols, got {r}x{c}")

    work = a.copy()
    reflectors: list[np.ndarray] = []
    for j in range(c):
        x = work[j:, j].copy()
        norm_x = math.sqrt(float(x @ x))
        if norm_x < 1e-12:
            raise RankDeficient(f"pivot {j} has norm {norm_x:.3e} < 1e-12")
        v = x
        v[0] += math.copysign(norm_x, x[0] if x[0] != 0.0 else 1.0)
        v /= math.sqrt(float(v @ v))
        work[j:, j:] -= 2.0 * np.outer(v, v @ work[j:, j:])
        reflectors.append(v)

    q = np.eye(r, c)
    for j in range(c - 1, -1, -1):
        v = reflectors[j]
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    # Householder leaves R_jj = -sign(x_0)*|x|; flip columns so diag(R) > 0.
    signs = np.sign(np.diag(work)[:c])
    signs[signs == 0.0] = 1.0
    return q * signs


def _onesided_jacobi(a: np.ndarray, max_sweeps: int, tol: float):
    """One-sided Jacobi on a (r x c, r >= c): rotate column pairs until mutually orthogonal."""
    work = a.copy()
    c = work.shape[1]
    v = np.eye(c)
    worst = 0.0
    for _ in range(max_sweeps):
        worst = 0.0
        for i in range(c - 1):
            for j in range(i + 1, c):
                col_i = work[:, i]
                col_j = work[:, j]
                alpha = float(col_i @ col_i)
                beta = float(col_j @ col_j)
                gamma = float(col_i @ col_j)
                denom = math.sqrt(alpha * beta)
                if denom == 0.0 or abs(gamma) <= tol * denom:
                    continue
                worst = max(worst, abs(gamma) / denom)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                cs = 1.0 / math.hypot(1.0, t)
                sn = cs * t
                rot = np.array([[cs, sn], [-sn, cs]])
                work[:, [i, j]] = work[:, [i, j]] @ rot
                v[:, [i, j]] = v[:, [i, j]] @ rot
        if worst == 0.0:
            return work, v
    raise ConvergenceError(
        f"jacobi SVD: {max_sweeps} sweeps exhausted, residual coherence {worst:.3e}"
    )


def _orthonormal_completion(u: np.ndarray, known: int) -> np.ndarray:
    """Fill columns known.. of u with vectors orthonormal to the first ``known``."""
    r, c = u.shape
    col = known
    for basis in range(r):
        if col >= c:
            break
        w = np.zeros(r)
        w[basis] = 1.0
        w -= u[:, :col] @ (u[:, :col].T @ w)
        norm = math.sqrt(float(w @ w))
        if norm > 0.5:
            u[:, col] = w / norm
            col += 1
    return u


def svd_small(m, *, max_sweeps: int = 60, tol: float = 1e-13):
    """Full SVD of a small dense matrix: M = U @ diag(s) @ Vt.

    One-sided Jacobi with pairwise rotations; sides are capped at 512 (the
    sweep cost grows cubically).  Singular values come back non-negative
    and non-increasing; U and V have orthonormal columns, with zero
    singular directions completed deterministically from the standard
    basis.
    """
    a = as_matrix(m, "m")
    r, c = a.shape
    if max(r, c) > SVD_MAX_SIDE:
        raise DimensionError(f"svd_small caps sides at {SVD_MAX_SIDE}, got {r}x{c}")

    transposed = r < c
    if transposed:
        a = a.T
        r, c = c, r

    rotated, v = _onesided_jacobi(a, max_sweeps, tol)
    s = np.sqrt(np.einsum("ij,ij->j", rotated, rotated))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    rotated = rotated[:, order]
    v = v[:, order]

    cutoff = max(r, c) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    u = np.zeros((r, c))
    known = 0
    for j in range(c):
        if s[j] > cutoff:
            u[:, j] = rotated[:, j] / s[j]
            known += 1
        else:
            break
    if known < c:
        s[known:] = 0.0
        u = _orthonormal_completion(u, known)

    if transposed:
        return v, s, u.T
    return u, s, v.T


def pca(x, k: int):
    """Principal components of the rows of ``x``.

    Returns ``(components, scores, explained_variance)`` where components
    is d x k with orthonormal columns, scores = (x - mean) @ components and
    explained_variance holds the top-k covariance eigenvalues (ddof=1).
    The sign of each component is fixed so its largest-magnitude entry is
    positive.
    """
    xm = as_matrix(x, "x")
    n, d = xm.shape
    if n < 2:
        raise DimensionError(f"pca needs at least 2 rows, got {n}")
    if not 1 <= k <= min(n, d):
        raise DimensionError(f"k={k} out of range for {n}x{d} input")

    centered = xm - xm.mean(axis=0)
    cov = (centered.T @ centered) / (n - 1)
    eigvecs, eigvals, _ = svd_small(cov)

    components = eigvecs[:, :k].copy()
    for j in range(k):
        hot = int(np.argmax(np.abs(components[:, j])))
        if components[hot, j] < 0:
            components[:, j] = -components[:, j]
    scores = centered @ components
    return components, scores, eigvals[:k].copy()
