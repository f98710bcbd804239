"""Chains of bivariate Gaussian-Bernoulli copulas.

A binary chain ``s_1, ..., s_T`` is given the distribution

    q(s) = prod_t q(s_{t-1}, s_t) / prod_{interior t} q(s_t)

where each pair table has Bernoulli marginals ``theta_{t-1}``, ``theta_t``
coupled through a Gaussian copula with correlation ``rho_t``. Adjacent
pairs share the marginal at their junction, so the chain is coherent by
construction. Pair tables are indexed ``q[i, j] = q(s_{t-1} = i, s_t = j)``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConsistencyError, DomainError
from .numerics import (EPS_RHO, EPS_THETA, bvn_cdf, bvn_cdf_grad,
                       std_normal_pdf, std_normal_quantile)

# Negative cells down to this value are treated as round-off.
_ROUNDOFF = 1e-9
_TINY = 1e-300


def _check_params(theta_prev, theta_cur, rho):
    theta_prev = np.asarray(theta_prev, dtype=float)
    theta_cur = np.asarray(theta_cur, dtype=float)
    rho = np.asarray(rho, dtype=float)
    slack = 1e-15
    for name, th in (("theta_prev", theta_prev), ("theta_cur", theta_cur)):
        if np.any(~((th >= EPS_THETA - slack) & (th <= 1.0 - EPS_THETA + slack))):
            raise DomainError(f"{name} must lie in [{EPS_THETA:g}, 1 - {EPS_THETA:g}]")
    if np.any(~(np.abs(rho) <= 1.0 - EPS_RHO + slack)):
        raise DomainError(f"rho must lie in [-1 + {EPS_RHO:g}, 1 - {EPS_RHO:g}]")
    return theta_prev, theta_cur, rho


def pair_pmf(theta_prev, theta_cur, rho):
    """Gaussian-copula pair table for two Bernoulli variables.

    Parameters
    ----------
    theta_prev, theta_cur : float or array_like
        ``q(s_{t-1} = 1)`` and ``q(s_t = 1)``.
    rho : float or array_like
        Copula correlation.

    Returns
    -------
    ndarray, shape (..., 2, 2)
        ``q[..., i, j] = q(s_{t-1} = i, s_t = j)``.
    """
    tp, tc, rho = _check_params(theta_prev, theta_cur, rho)
    q00 = bvn_cdf(std_normal_quantile(1.0 - tp), std_normal_quantile(1.0 - tc), rho)
    q = np.stack([
        np.stack([q00, 1.0 - tp - q00], axis=-1),
        np.stack([1.0 - tc - q00, tc + tp + q00 - 1.0], axis=-1),
    ], axis=-2)
    if q.size == 0:
        return q
    low = q.min(axis=(-2, -1))
    if np.any(low < -_ROUNDOFF):
        raise ConsistencyError(f"copula cell probability {low.min():.3e} < 0")
    if np.any(low < 0.0):
        q = np.maximum(q, 0.0)
        q = q / q.sum(axis=(-2, -1), keepdims=True)
    return q


def pair_pmf_grad(theta_prev, theta_cur, rho):
    """Derivatives of :func:`pair_pmf`.

    Returns
    -------
    ndarray, shape (..., 2, 2, 3)
        ``g[..., i, j, k]`` is the derivative of cell ``(i, j)`` with respect
        to ``theta_prev`` (k=0), ``theta_cur`` (k=1) and ``rho`` (k=2).
    """
    tp, tc, rho = _check_params(theta_prev, theta_cur, rho)
    a = std_normal_quantile(1.0 - tp)
    b = std_normal_quantile(1.0 - tc)
    da, db, dr = bvn_cdf_grad(a, b, rho)
    # d quantile(1 - u) / du = -1 / pdf(quantile(1 - u))
    d00 = np.stack([-da / std_normal_pdf(a), -db / std_normal_pdf(b), dr], axis=-1)
    e_prev = np.array([1.0, 0.0, 0.0])
    e_cur = np.array([0.0, 1.0, 0.0])
    return np.stack([
        np.stack([d00, -e_prev - d00], axis=-2),
        np.stack([-e_cur - d00, e_prev + e_cur + d00], axis=-2),
    ], axis=-3)


def chain_log_pmf(theta, rho, path):
    """Log-probability of a binary ``path`` under one copula chain.

    ``theta`` has length ``n`` and ``rho`` length ``n - 1``; ``rho[k]``
    couples positions ``k`` and ``k + 1``. Returns ``-inf`` when the path
    touches a cell of (numerically) zero probability.
    """
    theta = np.asarray(theta, dtype=float)
    rho = np.asarray(rho, dtype=float)
    path = np.asarray(path, dtype=int)
    n = theta.shape[0]
    if path.shape != (n,) or rho.shape != (n - 1,):
        raise ValueError("path, theta and rho lengths are inconsistent")
    if n == 1:
        p = theta[0] if path[0] else 1.0 - theta[0]
        return float(np.log(p)) if p >= _TINY else -np.inf
    q = pair_pmf(theta[:-1], theta[1:], rho)
    cells = q[np.arange(n - 1), path[:-1], path[1:]]
    inner = np.where(path[1:-1] == 1, theta[1:-1], 1.0 - theta[1:-1])
    if np.any(cells < _TINY):
        return -np.inf
    return float(np.sum(np.log(cells)) - np.sum(np.log(inner)))


@dataclass(frozen=True, eq=False)
class PosteriorMarginals:
    """Per-time Bernoulli marginals and adjacent-pair tables for M chains.

    Attributes
    ----------
    theta : ndarray, shape (n, M)
        ``q(s_t^m = 1)`` for ``t = offset, ..., offset + n - 1``.
    pairs : ndarray, shape (n - 1, M, 2, 2)
        Pair tables for consecutive positions.
    offset : int
        Index of the first position in the full sequence.
    """

    theta: np.ndarray
    pairs: np.ndarray
    offset: int = 0


@dataclass(frozen=True, eq=False)
class CopulaChains:
    """Variational parameters for M independent copula chains.

    Attributes
    ----------
    theta : ndarray, shape (n, M)
        Marginals ``q(s_t^m = 1)``.
    rho : ndarray, shape (n - 1, M)
        ``rho[k, m]`` couples positions ``k`` and ``k + 1`` of chain ``m``.
    offset : int
        Index of the first position in the full sequence.
    """

    theta: np.ndarray
    rho: np.ndarray
    offset: int = 0

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float, ndmin=2)
        rho = np.array(self.rho, dtype=float).reshape(-1, theta.shape[1])
        if rho.shape[0] != theta.shape[0] - 1:
            raise ValueError("rho must have one row fewer than theta")
        _check_params(theta, theta, rho)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "rho", rho)

    @property
    def n_chains(self):
        return self.theta.shape[1]

    def log_pmf(self, states):
        """Log-probability of a joint path ``states`` of shape (n, M)."""
        states = np.asarray(states)
        return sum(chain_log_pmf(self.theta[:, m], self.rho[:, m], states[:, m])
                   for m in range(self.n_chains))


def posterior_marginals_from_chain(chains):
    """Marginals and pair tables implied by :class:`CopulaChains`."""
    pairs = pair_pmf(chains.theta[:-1], chains.theta[1:], chains.rho)
    return PosteriorMarginals(chains.theta.copy(), pairs, chains.offset)
