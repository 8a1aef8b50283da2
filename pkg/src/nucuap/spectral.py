"""Dense spectral kernels: SVD with a fixed sign convention, Schatten norms,
the rectangular diag embedding, the principal Lambert W branch, and
singular value soft-thresholding.

Everything here works in float64 regardless of the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nucuap.errors import NumericalError

INV_E = math.exp(-1.0)
_LAMBERT_MAX_ITER = 50
# Above this exponent W0(exp(y)) is solved in log space (w + log w = y).
_LOG_DOMAIN_SWITCH = 30.0


@dataclass(frozen=True)
class SvdFactors:
    """Full SVD ``a = u @ diag_embed(sigma, m, n) @ vt``.

    ``u`` is m x m, ``vt`` is n x n and ``sigma`` has length min(m, n),
    sorted in descending order.
    """

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank_dim(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        r = self.rank_dim
        return (self.u[:, :r] * self.sigma) @ self.vt[:r, :]


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains NaN or Inf entries")
    return a


def svd(a) -> SvdFactors:
    """Full singular value decomposition with deterministic signs.

    The first entry of each left singular vector whose magnitude exceeds
    1e-12 times the column's largest magnitude is made non-negative; the
    matching row of ``vt`` is flipped with it.

    Raises
    ------
    NumericalError
        If LAPACK's divide-and-conquer driver fails to converge.
    """
    a = _as_matrix(a)
    try:
        u, sigma, vt = np.linalg.svd(a, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc

    r = sigma.shape[0]
    mag = np.abs(u)
    significant = mag > 1e-12 * mag.max(axis=0, keepdims=True)
    first = np.argmax(significant, axis=0)
    signs = np.where(u[first, np.arange(u.shape[1])] < 0.0, -1.0, 1.0)
    u = u * signs
    vt = vt.copy()
    vt[:r] *= signs[:r, None]
    return SvdFactors(u=u, sigma=sigma, vt=vt)


def singular_values(a) -> np.ndarray:
    a = _as_matrix(a)
    try:
        return np.linalg.svd(a, compute_uv=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc


def schatten_norm(a, p) -> float:
    """Schatten p-norm for p in {1, 2, inf}.

    p=1 is the nuclear norm, p=2 the Frobenius norm, p=inf the spectral norm.
    """
    s = singular_values(a)
    if p == 1:
        return float(np.sum(s))
    if p == 2:
        return float(np.sqrt(np.sum(s * s)))
    if p == math.inf or p == "inf":
        return float(s[0])
    raise ValueError(f"unsupported Schatten order {p!r}; use 1, 2 or inf")


def nuclear_norm(a) -> float:
    return schatten_norm(a, 1)


def spectral_norm(a) -> float:
    return schatten_norm(a, math.inf)


def diag_embed(sigma, rows: int, cols: int) -> np.ndarray:
    """Rectangular ``rows x cols`` matrix with ``sigma`` on its main diagonal."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be positive")
    if sigma.shape[0] > min(rows, cols):
        raise ValueError(
            f"{sigma.shape[0]} diagonal values do not fit a {rows}x{cols} matrix"
        )
    out = np.zeros((rows, cols))
    k = sigma.shape[0]
    out[np.arange(k), np.arange(k)] = sigma
    return out


def _halley_w0(x: np.ndarray) -> np.ndarray:
    w = np.empty_like(x)
    pos = x >= 0.0
    w[pos] = np.log1p(x[pos])
    # branch-point series for the negative part
    p = np.sqrt(np.maximum(2.0 * (math.e * x[~pos] + 1.0), 0.0))
    w[~pos] = -1.0 + p - p * p / 3.0 + (11.0 / 72.0) * p ** 3

    at_branch = x == -INV_E
    active = ~at_branch
    w[at_branch] = -1.0
    for _ in range(_LAMBERT_MAX_ITER):
        if not active.any():
            return w
        wa = w[active]
        ew = np.exp(wa)
        f = wa * ew - x[active]
        wp1 = wa + 1.0
        step = f / (ew * wp1 - (wa + 2.0) * f / (2.0 * wp1))
        w_new = wa - step
        w[active] = w_new
        eps4 = 4.0 * np.finfo(float).eps
        # relative step test (W0(x) ~ x for tiny x); near -1/e the step is
        # noise-dominated, so a rounding-level residual also terminates
        done = (np.abs(step) <= eps4 * np.abs(w_new)) | (np.abs(f) <= eps4 * np.abs(x[active]))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    if active.any():
        raise NumericalError(
            f"Lambert W Halley iteration did not converge in {_LAMBERT_MAX_ITER} steps"
        )
    return w


def lambert_w0(x):
    """Principal branch W0 of the Lambert function, ``w * exp(w) = x``.

    Halley iteration seeded with ``log(1 + x)`` for x >= 0 and with the
    branch-point series for -1/e <= x < 0. Accepts scalars or arrays.

    Raises
    ------
    ValueError
        If any x < -1/e.
    NumericalError
        If the iteration does not converge within 50 steps.
    """
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise NumericalError("Lambert W of NaN")
    if np.any(arr < -INV_E):
        raise ValueError("Lambert W0 is undefined for x < -1/e")
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    finite = np.isfinite(flat)
    out[~finite] = np.inf
    if finite.any():
        out[finite] = _halley_w0(flat[finite].copy())
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def lambert_w0_exp(y):
    """``W0(exp(y))`` without forming ``exp(y)``.

    Moderate exponents go through :func:`lambert_w0`; large ones solve
    ``w + log(w) = y`` by Halley iteration so nothing overflows.
    """
    arr = np.asarray(y, dtype=np.float64)
    if np.any(~np.isfinite(arr)):
        raise NumericalError("non-finite exponent passed to Lambert W")
    flat = arr.reshape(-1)
    out = np.empty_like(flat)
    small = flat <= _LOG_DOMAIN_SWITCH
    if small.any():
        out[small] = lambert_w0(np.exp(flat[small]))
    if (~small).any():
        yy = flat[~small]
        w = yy - np.log(yy)
        active = np.ones(yy.shape, dtype=bool)
        for _ in range(_LAMBERT_MAX_ITER):
            g = w + np.log(w) - yy
            g1 = 1.0 + 1.0 / w
            g2 = -1.0 / (w * w)
            step = 2.0 * g * g1 / (2.0 * g1 * g1 - g * g2)
            w = np.where(active, w - step, w)
            active &= np.abs(step) > 4.0 * np.finfo(float).eps * w
            if not active.any():
                break
        else:
            raise NumericalError("log-domain Lambert W did not converge")
        out[~small] = w
    out = out.reshape(arr.shape)
    return float(out) if out.ndim == 0 else out


def svt_prox(a, lam: float) -> np.ndarray:
    """Singular value soft-thresholding, the prox of ``lam * ||.||_*``.

    Returns the unique minimizer of ``0.5 * ||X - a||_F^2 + lam * ||X||_*``.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    f = svd(a)
    r = f.rank_dim
    shrunk = np.maximum(f.sigma - lam, 0.0)
    return (f.u[:, :r] * shrunk) @ f.vt[:r, :]
