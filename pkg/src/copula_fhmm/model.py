"""Factorial HMM with binary chains and linear-Gaussian emissions.

The emission mean at time ``t`` is ``W.T @ [s_t^1, ..., s_t^M, 1]``: the
first ``M`` rows of ``W`` are per-chain offsets and the last row is the
bias. All chains share the covariance ``L @ L.T``. The initial state of
every chain is drawn from the stationary distribution of its transition
matrix, both when simulating and when evaluating likelihoods.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import ModelSizeError, NonErgodicError
from .numerics import as_cholesky, gaussian_logpdf

#: Largest number of chains for which the joint 2**M state space is enumerated.
MAX_EXACT_CHAINS = 12
# Joint transition matrices up to this size are formed explicitly.
_KRON_LIMIT = 64


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FhmmParams:
    """Generative parameters of a binary-chain FHMM.

    Parameters
    ----------
    W : array_like, shape (M + 1, D)
        Emission weights; row ``M`` is the bias.
    L : array_like, shape (D, D)
        Lower-triangular Cholesky factor of the emission covariance.
    A : array_like, shape (M, 2, 2)
        Row-stochastic transition matrices, ``A[m, i, j] = p(s_t = j | s_{t-1} = i)``.
    """

    W: np.ndarray
    L: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=float, ndmin=2)
        L = as_cholesky(self.L)
        A = np.array(self.A, dtype=float)
        if A.ndim == 2:
            A = A[None]
        if A.ndim != 3 or A.shape[1:] != (2, 2):
            raise ValueError(f"A must have shape (M, 2, 2), got {A.shape}")
        M = A.shape[0]
        if W.shape != (M + 1, L.shape[0]):
            raise ValueError(
                f"W must have shape ({M + 1}, {L.shape[0]}), got {W.shape}")
        if np.any(A < 0.0) or np.any(A > 1.0):
            raise ValueError("transition probabilities must lie in [0, 1]")
        if np.any(np.abs(A.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("transition matrix rows must sum to 1")
        object.__setattr__(self, "W", _frozen(W))
        object.__setattr__(self, "L", _frozen(L))
        object.__setattr__(self, "A", _frozen(A))

    @property
    def n_chains(self):
        return self.A.shape[0]

    @property
    def n_dims(self):
        return self.W.shape[1]

    @property
    def covariance(self):
        return self.L @ self.L.T

    @property
    def stationary(self):
        """Stationary ``p(s = 1)`` for each chain, shape (M,)."""
        return np.array([stationary_dist(a) for a in self.A])

    def state_means(self, states):
        """Emission means for binary state vectors of shape (..., M)."""
        states = np.asarray(states, dtype=float)
        return states @ self.W[:-1] + self.W[-1]

    def permuted(self, order):
        """Return the parameters with chains reordered as ``order``."""
        order = list(order)
        return FhmmParams(np.vstack([self.W[order], self.W[-1:]]), self.L,
                          self.A[order])

    def __eq__(self, other):
        if not isinstance(other, FhmmParams):
            return NotImplemented
        return (np.array_equal(self.W, other.W)
                and np.array_equal(self.L, other.L)
                and np.array_equal(self.A, other.A))

    __hash__ = None


def stationary_dist(A):
    """Stationary probability of state 1 for a 2x2 transition matrix.

    Raises
    ------
    NonErgodicError
        When both off-diagonal entries vanish.
    """
    A = np.asarray(A, dtype=float)
    up, down = A[0, 1], A[1, 0]
    if up < 1e-12 and down < 1e-12:
        raise NonErgodicError(
            "transition matrix has no unique stationary distribution")
    return float(up / (up + down))


def simulate(params, T, seed):
    """Draw a state path and observations from the FHMM.

    Random streams are split per chain: ``SeedSequence(seed).spawn(M + 1)``
    gives one PCG64 stream per chain (uniform draw ``t`` decides the state
    at time ``t``) and a final stream for the emission noise. Output is
    therefore reproducible bit-for-bit from ``seed``.

    Returns
    -------
    states : ndarray of int, shape (T, M)
    y : ndarray, shape (T, D)
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    M, D = params.n_chains, params.n_dims
    pi = params.stationary
    streams = np.random.SeedSequence(seed).spawn(M + 1)
    states = np.empty((T, M), dtype=int)
    for m in range(M):
        u = np.random.Generator(np.random.PCG64(streams[m])).random(T)
        p_one = params.A[m, :, 1]
        s = int(u[0] < pi[m])
        states[0, m] = s
        for t in range(1, T):
            s = int(u[t] < p_one[s])
            states[t, m] = s
    noise = np.random.Generator(np.random.PCG64(streams[M])).standard_normal((T, D))
    y = params.state_means(states) + noise @ params.L.T
    return states, y


def joint_states(M):
    """All binary state vectors, chain 0 most significant; shape (2**M, M)."""
    return np.array(list(itertools.product((0, 1), repeat=M)), dtype=int)


def _check_size(params):
    if params.n_chains > MAX_EXACT_CHAINS:
        raise ModelSizeError(
            f"exact inference refused for M={params.n_chains} > {MAX_EXACT_CHAINS}")


def _joint_setup(params, y):
    _check_size(params)
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[1] != params.n_dims:
        raise ValueError(f"y must have shape (T, {params.n_dims}), got {y.shape}")
    M = params.n_chains
    S = joint_states(M)
    pi = params.stationary
    init = np.prod(np.where(S == 1, pi, 1.0 - pi), axis=1)
    log_b = gaussian_logpdf(y[:, None, :], params.state_means(S)[None], params.L)
    return init, log_b


def _transition_op(params):
    """Return ``f(alpha) = alpha @ P`` and ``g(beta) = P @ beta`` for the joint chain."""
    M = params.n_chains
    if 2 ** M <= _KRON_LIMIT:
        P = np.ones((1, 1))
        for a in params.A:
            P = np.kron(P, a)
        return (lambda v: v @ P), (lambda v: P @ v)

    shape = (2,) * M

    def forward(v):
        v = v.reshape(shape)
        for m, a in enumerate(params.A):
            v = np.moveaxis(np.tensordot(v, a, axes=([m], [0])), -1, m)
        return v.reshape(-1)

    def backward(v):
        v = v.reshape(shape)
        for m, a in enumerate(params.A):
            v = np.moveaxis(np.tensordot(v, a, axes=([m], [1])), -1, m)
        return v.reshape(-1)

    return forward, backward


def _scaled_forward(init, log_b, fwd):
    T, S = log_b.shape
    shift = log_b.max(axis=1)
    B = np.exp(log_b - shift[:, None])
    alpha = np.empty((T, S))
    scale = np.empty(T)
    a = init * B[0]
    for t in range(T):
        if t:
            a = fwd(a) * B[t]
        c = a.sum()
        a = a / c
        alpha[t] = a
        scale[t] = c
    return alpha, scale, B, shift


def exact_loglik(params, y):
    """Total log-likelihood ``log p(y)`` by the forward algorithm on 2**M states."""
    init, log_b = _joint_setup(params, y)
    fwd, _ = _transition_op(params)
    _, scale, _, shift = _scaled_forward(init, log_b, fwd)
    return float(np.sum(np.log(scale)) + np.sum(shift))


def exact_posterior(params, y):
    """Exact smoothed per-chain marginals ``p(s_t^m = 1 | y)``, shape (T, M)."""
    init, log_b = _joint_setup(params, y)
    fwd, bwd = _transition_op(params)
    alpha, scale, B, _ = _scaled_forward(init, log_b, fwd)
    T, S = log_b.shape
    gamma = np.empty((T, S))
    beta = np.ones(S)
    gamma[-1] = alpha[-1]
    for t in range(T - 2, -1, -1):
        beta = bwd(B[t + 1] * beta) / scale[t + 1]
        g = alpha[t] * beta
        gamma[t] = g / g.sum()
    return gamma @ joint_states(params.n_chains)


def smoothed_reconstruction(W, theta):
    """Posterior-weighted emission means ``W.T @ [theta_t, 1]`` for each row of ``theta``."""
    W = np.asarray(W, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 2 or theta.shape[1] + 1 != W.shape[0]:
        raise ValueError(
            f"theta shape {theta.shape} incompatible with W shape {W.shape}")
    if np.any(theta < 0.0) or np.any(theta > 1.0):
        raise ValueError("marginals must lie in [0, 1]")
    return theta @ W[:-1] + W[-1]


def initial_params(y, n_chains, rng, stay=0.8):
    """Data-scaled starting point for learning.

    Chain offsets are random draws with covariance ``cov(y) / n_chains``,
    so their sum has the spread of the data; the bias puts the half-on
    mixture mean at the data mean, and the noise starts at the data
    covariance. Offsets drawn at the full data scale often drive a chain
    into a constant state that SVI cannot leave.
    """
    y = np.asarray(y, dtype=float)
    D = y.shape[1]
    cov = np.atleast_2d(np.cov(y, rowvar=False)) + 1e-9 * np.eye(D)
    L = np.linalg.cholesky(cov)
    offsets = rng.standard_normal((n_chains, D)) @ L.T / np.sqrt(n_chains)
    bias = y.mean(axis=0) - 0.5 * offsets.sum(axis=0)
    A = np.tile([[stay, 1.0 - stay], [1.0 - stay, stay]], (n_chains, 1, 1))
    return FhmmParams(np.vstack([offsets, bias]), L, A)


#: Named ground-truth models for simulation. ``validation`` is a two-chain,
#: two-dimensional model with well separated offsets, moderate noise and
#: persistent chains; ``scalability`` has four chains in two dimensions.
PRESETS = {
    "validation": dict(
        W=[[2.0, 0.5], [-0.5, 2.0], [0.0, 0.0]],
        L=[[0.5, 0.0], [0.0, 0.5]],
        A=[[[0.95, 0.05], [0.10, 0.90]], [[0.90, 0.10], [0.05, 0.95]]]),
    "scalability": dict(
        W=[[1.5, 0.3], [-0.3, 1.5], [1.0, -1.0], [0.8, 0.8], [0.0, 0.0]],
        L=[[0.5, 0.0], [0.0, 0.5]],
        A=[[[0.95, 0.05], [0.05, 0.95]], [[0.90, 0.10], [0.10, 0.90]],
           [[0.97, 0.03], [0.06, 0.94]], [[0.92, 0.08], [0.04, 0.96]]]),
}


def preset_params(name):
    """Ground-truth :class:`FhmmParams` for a name in :data:`PRESETS`."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return FhmmParams(**PRESETS[name])
