"""Probability primitives used by the copula chains and the FHMM emissions.

All functions operate on float64 and broadcast over array arguments.
"""

import math

import numpy as np
from scipy import linalg, special

from .exceptions import DomainError

#: Correlation clamp: admissible copula correlations lie in [-1 + EPS_RHO, 1 - EPS_RHO].
EPS_RHO = 1e-6
#: Marginal clamp: admissible Bernoulli parameters lie in [EPS_THETA, 1 - EPS_THETA].
EPS_THETA = 1e-6

_TWO_PI = 2.0 * math.pi
_LOG_TWO_PI = math.log(_TWO_PI)
# Beyond this magnitude the standard normal CDF is 0 or 1 in double precision.
_CDF_SATURATION = 40.0

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(_TWO_PI)


def std_normal_cdf(x):
    """Standard normal CDF, saturating smoothly in the tails."""
    return special.ndtr(np.asarray(x, dtype=float))


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf`.

    Raises
    ------
    DomainError
        If any ``p`` lies outside the open interval (0, 1).
    """
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise DomainError("quantile argument must lie in (0, 1)")
    return special.ndtri(p)


def _check_rho(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(~(np.abs(rho) <= 1.0 - EPS_RHO + 1e-15)):
        raise DomainError(
            f"correlation must lie in [-1 + {EPS_RHO:g}, 1 - {EPS_RHO:g}]")
    return rho


def _bvn_upper(h, k, r):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r.

    Follows Genz's BVNU: Plackett's identity integrated in arcsine
    coordinates for moderate |r|, and an expansion around |r| = 1 plus a
    quadrature correction otherwise.
    """
    h, k, r = np.broadcast_arrays(h, k, r)
    out = np.empty(h.shape)
    x, w = _GL_NODES, _GL_WEIGHTS

    low = np.abs(r) < 0.925
    if np.any(low):
        hl, kl, rl = h[low], k[low], r[low]
        hk = hl * kl
        hs = 0.5 * (hl * hl + kl * kl)
        asr = np.arcsin(rl)
        sn = np.sin(asr[:, None] * 0.5 * (x + 1.0))
        f = np.exp((sn * hk[:, None] - hs[:, None]) / (1.0 - sn * sn))
        out[low] = (f @ w) * asr / (2.0 * _TWO_PI) \
            + special.ndtr(-hl) * special.ndtr(-kl)

    high = ~low
    if np.any(high):
        hh, rh = h[high], r[high]
        neg = rh < 0
        kh = np.where(neg, -k[high], k[high])
        hk = hh * kh
        bvn = np.zeros(hh.shape)
        inner = np.abs(rh) < 1.0
        if np.any(inner):
            hi, ki, hki, ri = hh[inner], kh[inner], hk[inner], rh[inner]
            a_s = (1.0 - ri) * (1.0 + ri)
            a = np.sqrt(a_s)
            b_s = (hi - ki) ** 2
            c = (4.0 - hki) / 8.0
            d = (12.0 - hki) / 16.0
            val = a * np.exp(-0.5 * (b_s / a_s + hki)) * (
                1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                + c * d * a_s * a_s / 5.0)
            b = np.sqrt(b_s)
            tail = np.exp(-0.5 * hki) * math.sqrt(_TWO_PI) \
                * special.ndtr(-b / a) * b \
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0)
            val = val - np.where(hki > -160.0, tail, 0.0)
            half = 0.5 * a
            xs = (half[:, None] * (x + 1.0)) ** 2
            rs = np.sqrt(1.0 - xs)
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                term = np.exp(-b_s[:, None] / (2.0 * xs) - hki[:, None] / (1.0 + rs)) / rs \
                    - np.exp(-0.5 * (b_s[:, None] / xs + hki[:, None])) \
                    * (1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs))
            term = np.where(np.isfinite(term), term, 0.0)
            val = val + half * (term @ w)
            bvn[inner] = -val / _TWO_PI
        pos_part = bvn + special.ndtr(-np.maximum(hh, kh))
        neg_part = -bvn + np.where(
            kh > hh,
            np.where(hh < 0.0,
                     special.ndtr(kh) - special.ndtr(hh),
                     special.ndtr(-hh) - special.ndtr(-kh)),
            0.0)
        out[high] = np.where(neg, neg_part, pos_part)
    return out


def bvn_cdf(a, b, rho):
    """Standard bivariate normal CDF ``P(X <= a, Y <= b)`` with correlation ``rho``.

    Parameters
    ----------
    a, b : float or array_like
        Upper integration limits; infinite values are allowed.
    rho : float or array_like
        Correlation in ``[-1 + EPS_RHO, 1 - EPS_RHO]``.

    Returns
    -------
    ndarray or float
        Probabilities, clipped to the Frechet bounds of the marginals.
    """
    rho = _check_rho(rho)
    a = np.clip(np.asarray(a, dtype=float), -_CDF_SATURATION, _CDF_SATURATION)
    b = np.clip(np.asarray(b, dtype=float), -_CDF_SATURATION, _CDF_SATURATION)
    p = _bvn_upper(-a, -b, rho)
    pa, pb = special.ndtr(a), special.ndtr(b)
    p = np.clip(p, np.maximum(0.0, pa + pb - 1.0), np.minimum(pa, pb))
    return p[()] if p.ndim == 0 else p


def bvn_pdf(a, b, rho):
    """Standard bivariate normal density with correlation ``rho``."""
    a, b, rho = (np.asarray(v, dtype=float) for v in (a, b, rho))
    one_m = (1.0 - rho) * (1.0 + rho)
    q = (a * a - 2.0 * rho * a * b + b * b) / one_m
    return np.exp(-0.5 * q) / (_TWO_PI * np.sqrt(one_m))


def bvn_cdf_grad(a, b, rho):
    """Partial derivatives of :func:`bvn_cdf` with respect to ``a``, ``b`` and ``rho``.

    The correlation derivative is the bivariate density (Plackett's identity).
    """
    rho = _check_rho(rho)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    da = std_normal_pdf(a) * special.ndtr((b - rho * a) / s)
    db = std_normal_pdf(b) * special.ndtr((a - rho * b) / s)
    dr = bvn_pdf(a, b, rho)
    return da, db, dr


def as_cholesky(L):
    """Validate a lower-triangular Cholesky factor with positive diagonal.

    Returns
    -------
    ndarray of shape (D, D)
    """
    L = np.array(L, dtype=float, ndmin=2)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError(f"Cholesky factor must be square, got shape {L.shape}")
    if np.any(np.triu(L, 1) != 0.0):
        raise ValueError("Cholesky factor must be lower triangular")
    if np.any(~(np.diag(L) > 0.0)):
        raise ValueError("Cholesky factor must have a strictly positive diagonal")
    return L


def whiten(x, L):
    """Solve ``L z = x`` for each row of ``x`` (shape ``(..., D)``)."""
    x = np.asarray(x, dtype=float)
    z = linalg.solve_triangular(L, x.reshape(-1, L.shape[0]).T, lower=True)
    return z.T.reshape(x.shape)


def gaussian_logpdf(y, mu, L):
    """Log-density of ``N(mu, L L^T)`` evaluated at ``y``.

    ``y`` and ``mu`` broadcast along leading axes; the last axis is the
    observation dimension. The precision matrix is never formed.
    """
    L = as_cholesky(L)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    D = L.shape[0]
    if y.shape[-1:] != (D,) or mu.shape[-1:] != (D,):
        raise ValueError(
            f"dimension mismatch: y {y.shape}, mu {mu.shape}, L {L.shape}")
    r = np.broadcast_to(y - mu, np.broadcast_shapes(y.shape, mu.shape))
    z = whiten(r, L)
    out = -0.5 * D * _LOG_TWO_PI - np.sum(np.log(np.diag(L))) \
        - 0.5 * np.sum(z * z, axis=-1)
    return out[()] if np.ndim(out) == 0 else out


def logsumexp(a, axis=None):
    return special.logsumexp(a, axis=axis)
