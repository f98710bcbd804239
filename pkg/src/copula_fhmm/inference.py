"""Posterior marginals over a whole sequence from trained recognition networks."""

import numpy as np

from .copula import PosteriorMarginals, pair_pmf
from .smf import boundary_posterior


def infer_marginals(params, net, y):
    """Per-time marginals and pair tables for every position of ``y``.

    Interior positions come from the recognition networks; the ``dt // 2``
    positions at either end come from a structured mean-field pass whose
    junction with the interior is pinned to the network output.
    """
    y = np.asarray(y, dtype=float)
    T = y.shape[0]
    dt = net.spec.window
    half = dt // 2
    M = params.n_chains
    if T < dt + 1:
        raise ValueError(f"sequence of length {T} is shorter than one window ({dt + 1})")
    theta_in, rho_in = net.marginals(y)
    theta = np.empty((T, M))
    theta[half:T - half] = theta_in
    pairs = np.empty((T - 1, M, 2, 2))
    if theta_in.shape[0] > 1:
        pairs[half:T - half - 1] = pair_pmf(theta_in[:-1], theta_in[1:], rho_in[1:])
    left = boundary_posterior(params, y, theta_in[0], dt, "left")
    right = boundary_posterior(params, y, theta_in[-1], dt, "right")
    theta[:half] = left.theta[:-1]
    pairs[:half] = left.pairs
    theta[T - half:] = right.theta[1:]
    pairs[T - half - 1:] = right.pairs
    return PosteriorMarginals(theta, pairs, 0)
