"""Truncated stochastic ELBO for copula-chain FHMM posteriors and its optimiser.

The objective is a sum of local terms, one per *valid centre* ``t``::

    local(t) = <log p(y_t | s_t)>
               + sum_m [ <log p(s_t^m | s_{t-1}^m)> + <log q(s_t^m)>
                         - <log q(s_t^m, s_{t+1}^m)> ]

where every expectation is under the copula chains whose parameters the
recognition networks produce from data windows. A centre is valid when
the windows for ``theta_{t-1}, theta_t, theta_{t+1}`` and
``rho_t, rho_{t+1}`` all fit, i.e. ``dt/2 + 1 <= t <= T - dt/2 - 2``
(0-based), giving ``T - dt - 2`` centres.

Model parameters are optimised in an unconstrained flat layout: ``W``
row-major, the lower triangle of ``L`` row-major with the diagonal stored
as logarithms, then per-chain 2x2 transition logits (row softmax).
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .copula import pair_pmf, pair_pmf_grad
from .exceptions import BoundaryError, NumericalError
from .model import FhmmParams
from .recognition import MlpSpec, RecognitionNet, all_windows

_log = logging.getLogger(__name__)

_LOG_TWO_PI = math.log(2.0 * math.pi)
#: Floor applied to transition probabilities inside logarithms.
TRANSITION_FLOOR = 1e-12
_TINY = 1e-300


# ---------------------------------------------------------------------------
# Flat model parameterisation

def n_model_params(M, D):
    return (M + 1) * D + D * (D + 1) // 2 + 4 * M


def pack_model(params):
    """Unconstrained flat vector for :class:`FhmmParams`."""
    L = params.L.copy()
    idx = np.diag_indices_from(L)
    L[idx] = np.log(L[idx])
    tril = L[np.tril_indices_from(L)]
    logits = np.log(np.maximum(params.A, TRANSITION_FLOOR))
    return np.concatenate([params.W.ravel(), tril, logits.ravel()])


def unpack_model(flat, M, D):
    """Inverse of :func:`pack_model`."""
    flat = np.asarray(flat, dtype=float)
    if flat.shape != (n_model_params(M, D),):
        raise ValueError("flat model vector has the wrong length")
    nW = (M + 1) * D
    nL = D * (D + 1) // 2
    W = flat[:nW].reshape(M + 1, D)
    L = np.zeros((D, D))
    L[np.tril_indices(D)] = flat[nW:nW + nL]
    idx = np.diag_indices(D)
    L[idx] = np.exp(L[idx])
    logits = flat[nW + nL:].reshape(M, 2, 2)
    A = np.exp(logits - logits.max(axis=2, keepdims=True))
    A /= A.sum(axis=2, keepdims=True)
    return FhmmParams(W, L, A)


# ---------------------------------------------------------------------------
# Expectation terms

def _emission(W, L, theta, y, want_grad=False):
    """Expected emission log-density for rows of ``theta`` (n, M) and ``y`` (n, D)."""
    D = L.shape[0]
    offsets = W[:-1]
    r = y - (theta @ offsets + W[-1])
    Z = linalg.solve_triangular(L, r.T, lower=True)
    Wz = linalg.solve_triangular(L, offsets.T, lower=True)
    kappa = np.sum(Wz * Wz, axis=0)
    var = theta * (1.0 - theta)
    value = (-0.5 * D * _LOG_TWO_PI - np.sum(np.log(np.diag(L)))
             - 0.5 * np.sum(Z * Z, axis=0) - 0.5 * (var @ kappa))
    if not want_grad:
        return value
    U = linalg.solve_triangular(L.T, Z, lower=False)
    Wu = linalg.solve_triangular(L.T, Wz, lower=False)
    d_theta = U.T @ offsets.T - 0.5 * (1.0 - 2.0 * theta) * kappa
    v_sum = var.sum(axis=0)
    gW = np.empty_like(W)
    gW[:-1] = theta.T @ U.T - v_sum[:, None] * Wu.T
    gW[-1] = U.sum(axis=1)
    gL = U @ Z.T + (Wu * v_sum) @ Wz.T
    gL[np.diag_indices(D)] -= theta.shape[0] / np.diag(L)
    return value, d_theta, gW, np.tril(gL)


def expected_emission_loglik(params, theta_t, y_t):
    """``E_q[log N(y_t; W.T s_hat_t, Sigma)]`` with independent Bernoulli(theta) chains.

    Equals the log-density at the mean state minus
    ``1/2 sum_m theta_m (1 - theta_m) w_m' Sigma^{-1} w_m``.
    """
    theta_t = np.asarray(theta_t, dtype=float)
    y_t = np.asarray(y_t, dtype=float)
    if theta_t.shape[-1] != params.n_chains or y_t.shape[-1] != params.n_dims:
        raise ValueError("theta or y has the wrong trailing dimension")
    if np.any(theta_t < 0.0) or np.any(theta_t > 1.0):
        raise ValueError("theta must lie in [0, 1]")
    th = np.atleast_2d(theta_t)
    yy = np.broadcast_to(np.atleast_2d(y_t), (th.shape[0], params.n_dims))
    out = _emission(params.W, params.L, th, yy)
    return float(out[0]) if theta_t.ndim == 1 and y_t.ndim == 1 else out


def expected_transition_loglik(A, pair):
    """``sum_ij pair[i, j] log A[i, j]`` with ``A`` floored at ``TRANSITION_FLOOR``."""
    A = np.asarray(A, dtype=float)
    pair = np.asarray(pair, dtype=float)
    return np.sum(pair * np.log(np.maximum(A, TRANSITION_FLOOR)), axis=(-2, -1))


def _xlogx(p):
    p = np.asarray(p, dtype=float)
    return np.where(p > 0.0, p * np.log(np.maximum(p, _TINY)), 0.0)


def entropy_terms(theta_t, pair_next):
    """Negative-entropy pieces ``(<log q(s_t)>, <log q(s_t, s_{t+1})>)``.

    The local objective adds the first and subtracts the second.
    """
    theta_t = np.asarray(theta_t, dtype=float)
    marginal = _xlogx(theta_t) + _xlogx(1.0 - theta_t)
    pair = np.sum(_xlogx(pair_next), axis=(-2, -1))
    return marginal, pair


# ---------------------------------------------------------------------------
# Centres, sampling and scaling

def valid_centers(T, dt):
    """0-based centres whose local term can be evaluated."""
    half = dt // 2
    return np.arange(half + 1, T - half - 1)


def epoch_sampler(T, dt, n_minibatch, seed):
    """Yield minibatches of centres forever, without replacement within an epoch.

    Each epoch is a fresh permutation of all valid centres cut into chunks of
    ``n_minibatch``; the last chunk of an epoch may be smaller.
    """
    centers = valid_centers(T, dt)
    if centers.size == 0:
        raise BoundaryError(f"no valid centres for T={T}, dt={dt}")
    if n_minibatch < 1:
        raise ValueError("n_minibatch must be at least 1")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(centers)
        for start in range(0, order.size, n_minibatch):
            yield order[start:start + n_minibatch]


def batch_factor(T, dt, n_batch_actual, n_centers=None):
    """Scale making a minibatch sum an unbiased estimate of the full sum.

    Returns ``(T - dt) / n_batch_actual`` by default. Passing the exact number
    of valid centres as ``n_centers`` replaces the numerator, which is what
    the optimiser uses.
    """
    if n_batch_actual <= 0:
        raise ValueError("minibatch size must be positive")
    numerator = T - dt if n_centers is None else n_centers
    return numerator / n_batch_actual


# ---------------------------------------------------------------------------
# Value and gradient of the local terms

def _chunk_terms(model, net, windows, y, centers, dt, want_grad):
    """Sum of local terms over ``centers`` and, optionally, its gradients."""
    M = model.n_chains
    n = centers.size
    half = dt // 2
    rows = np.concatenate([centers - 1 - half, centers - half, centers + 1 - half])
    theta_all, rho_all, cache = net.forward_with_cache(windows[rows])
    th_p, th_c, th_n = theta_all[:n], theta_all[n:2 * n], theta_all[2 * n:]
    rho_c, rho_n = rho_all[n:2 * n], rho_all[2 * n:]

    q_prev = pair_pmf(th_p, th_c, rho_c)
    q_next = pair_pmf(th_c, th_n, rho_n)
    log_a = np.log(np.maximum(model.A, TRANSITION_FLOOR))
    y_c = y[centers]

    if want_grad:
        emis, d_emis, gW, gL = _emission(model.W, model.L, th_c, y_c, True)
    else:
        emis = _emission(model.W, model.L, th_c, y_c)
    trans = np.sum(q_prev * log_a, axis=(-2, -1))
    marg, pair_term = entropy_terms(th_c, q_next)
    value = float(np.sum(emis) + np.sum(trans + marg - pair_term))
    if not want_grad:
        return value, None, None

    g_prev = pair_pmf_grad(th_p, th_c, rho_c)
    g_next = pair_pmf_grad(th_c, th_n, rho_n)
    d_prev = np.einsum("mij,nmijk->nmk", log_a, g_prev)
    up_next = -(np.log(np.maximum(q_next, _TINY)) + 1.0)
    d_next = np.einsum("nmij,nmijk->nmk", up_next, g_next)

    d_theta = np.concatenate([
        d_prev[..., 0],
        d_emis + d_prev[..., 1] + np.log(th_c / (1.0 - th_c)) + d_next[..., 0],
        d_next[..., 1],
    ])
    d_rho = np.concatenate([np.zeros((n, M)), d_prev[..., 2], d_next[..., 2]])
    g_net = net.backward(cache, d_theta, d_rho)

    q_sum = q_prev.sum(axis=0)
    g_logits = q_sum - q_sum.sum(axis=2, keepdims=True) * model.A
    D = model.n_dims
    gL_flat = gL.copy()
    diag = np.diag_indices(D)
    gL_flat[diag] *= np.diag(model.L)
    g_model = np.concatenate([gW.ravel(), gL_flat[np.tril_indices(D)], g_logits.ravel()])
    return value, g_model, g_net


def _tree_sum(items):
    """Pairwise sum in a fixed order (independent of how items were computed)."""
    items = list(items)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


class _Objective:
    """Evaluates scaled minibatch sums of local terms over a fixed sequence."""

    def __init__(self, y, dt, chunk_size=64, n_threads=1):
        self.y = np.asarray(y, dtype=float)
        self.dt = dt
        self.windows = all_windows(self.y, dt)
        self.n_centers = valid_centers(self.y.shape[0], dt).size
        self.chunk_size = chunk_size
        self.n_threads = max(1, int(n_threads))
        self._pool = ThreadPoolExecutor(self.n_threads) if self.n_threads > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def __call__(self, model, net, centers, scale, want_grad=True):
        centers = np.asarray(centers, dtype=int)
        chunks = [centers[i:i + self.chunk_size]
                  for i in range(0, centers.size, self.chunk_size)]

        def run(chunk):
            return _chunk_terms(model, net, self.windows, self.y, chunk,
                                self.dt, want_grad)

        if self._pool is not None and len(chunks) > 1:
            parts = list(self._pool.map(run, chunks))
        else:
            parts = [run(c) for c in chunks]
        value = scale * _tree_sum([p[0] for p in parts])
        if not want_grad:
            return value, None, None
        g_model = scale * _tree_sum([p[1] for p in parts])
        g_net = scale * _tree_sum([p[2] for p in parts])
        return value, g_model, g_net


def local_elbo(params, net, y, t):
    """Local objective term attached to centre ``t`` (0-based)."""
    y = np.asarray(y, dtype=float)
    dt = net.spec.window
    centers = valid_centers(y.shape[0], dt)
    if not (centers.size and centers[0] <= t <= centers[-1]):
        raise BoundaryError(f"t={t} is not a valid centre for T={y.shape[0]}, dt={dt}")
    windows = all_windows(y, dt)
    value, _, _ = _chunk_terms(params, net, windows, y, np.array([t]), dt, False)
    return value


def interior_elbo(params, net, y):
    """Sum of :func:`local_elbo` over all valid centres."""
    objective = _Objective(y, net.spec.window)
    centers = valid_centers(objective.y.shape[0], net.spec.window)
    return objective(params, net, centers, 1.0, want_grad=False)[0]


def stochastic_gradient(params, net, y, minibatch, n_threads=1, chunk_size=64):
    """Batch-factor scaled estimate of the objective and its gradient.

    Parameters
    ----------
    params : FhmmParams
    net : RecognitionNet
    y : ndarray, shape (T, D)
    minibatch : array_like of int
        Valid centres (0-based).

    Returns
    -------
    grad_model : ndarray
        Gradient with respect to :func:`pack_model` coordinates.
    grad_net : ndarray
        Gradient with respect to ``net.params``.
    elbo_estimate : float
    """
    objective = _Objective(y, net.spec.window, chunk_size, n_threads)
    try:
        minibatch = np.asarray(minibatch, dtype=int)
        c = batch_factor(objective.y.shape[0], net.spec.window, minibatch.size,
                         n_centers=objective.n_centers)
        value, g_model, g_net = objective(params, net, minibatch, c)
    finally:
        objective.close()
    if not (np.isfinite(value) and np.all(np.isfinite(g_model))
            and np.all(np.isfinite(g_net))):
        raise NumericalError("non-finite stochastic gradient")
    return g_model, g_net, value


# ---------------------------------------------------------------------------
# Optimiser and training loop

def rmsprop_step(x, v, g, lr, decay, eps):
    """One RMSprop ascent step; returns ``(x_new, v_new)``."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if x.shape != g.shape or np.shape(v) != g.shape:
        raise ValueError("parameter, state and gradient shapes differ")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient passed to RMSprop")
    v = decay * np.asarray(v, dtype=float) + (1.0 - decay) * g * g
    return x + lr * g / (np.sqrt(v) + eps), v


@dataclass
class TrainConfig:
    """Hyperparameters of stochastic training.

    ``window`` is ``dt`` (window width minus one). ``budget_seconds`` stops
    training on wall-clock time in addition to ``iterations``.
    """

    window: int = 4
    hidden: tuple = (30,)
    activation: str = "tanh"
    sharing: str = "chain"
    n_minibatch: int = 10
    iterations: int = 20000
    learning_rate: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    train_model: bool = True
    train_nets: bool = True
    log_every: int = 100
    budget_seconds: float = None
    n_threads: int = 1
    chunk_size: int = 64

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.n_minibatch < 1:
            raise ValueError("n_minibatch must be at least 1")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        if self.window < 2 or self.window % 2:
            raise ValueError(
                f"window dt={self.window} must be even and >= 2 "
                "(a window of 5 observations is dt=4)")
        if self.log_every < 1 or self.chunk_size < 1:
            raise ValueError("log_every and chunk_size must be positive")


@dataclass
class TrainTrace:
    """Per-logged-iteration diagnostics (append-only)."""

    iteration: list = field(default_factory=list)
    elbo: list = field(default_factory=list)
    grad_norm_model: list = field(default_factory=list)
    grad_norm_net: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    #: Iterations actually performed (set when training stops).
    n_iterations: int = 0

    def append(self, iteration, elbo, gnorm_model, gnorm_net, wall_clock):
        if self.iteration and iteration <= self.iteration[-1]:
            raise ValueError("trace iterations must increase")
        self.iteration.append(int(iteration))
        self.elbo.append(float(elbo))
        self.grad_norm_model.append(float(gnorm_model))
        self.grad_norm_net.append(float(gnorm_net))
        self.wall_clock.append(float(wall_clock))

    def records(self):
        return [dict(iteration=i, elbo=e, grad_norm_model=gm, grad_norm_net=gn,
                     wall_clock=w)
                for i, e, gm, gn, w in zip(self.iteration, self.elbo,
                                           self.grad_norm_model,
                                           self.grad_norm_net, self.wall_clock)]

    def __len__(self):
        return len(self.iteration)


def train(config, y, init, net=None):
    """Jointly fit FHMM and recognition-network parameters by stochastic ascent.

    Parameters
    ----------
    config : TrainConfig
    y : ndarray, shape (T, D)
    init : FhmmParams
        Starting model parameters.
    net : RecognitionNet, optional
        Starting networks; initialised from ``config.seed`` when omitted.

    Returns
    -------
    params : FhmmParams
    net : RecognitionNet
    trace : TrainTrace
    """
    y = np.asarray(y, dtype=float)
    T, D = y.shape
    M = init.n_chains
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if net is None:
        spec = MlpSpec(config.window, D, M, config.hidden, config.activation,
                       config.sharing)
        net = RecognitionNet(spec, rng=np.random.default_rng(seeds[0]))
    else:
        net = RecognitionNet(net.spec, net.params.copy())
    if net.spec.window != config.window:
        raise ValueError("network window differs from config.window")

    objective = _Objective(y, config.window, config.chunk_size, config.n_threads)
    sampler = epoch_sampler(T, config.window, config.n_minibatch,
                            np.random.default_rng(seeds[1]).integers(2 ** 63))
    n_model = n_model_params(M, D)
    x = np.concatenate([pack_model(init), net.params])
    v = np.zeros_like(x)
    mask = np.concatenate([np.full(n_model, float(config.train_model)),
                           np.full(net.params.size, float(config.train_nets))])
    trace = TrainTrace()
    params = init
    start = time.perf_counter()
    try:
        for it in range(config.iterations):
            if (config.budget_seconds is not None
                    and time.perf_counter() - start >= config.budget_seconds):
                break
            batch = next(sampler)
            c = batch_factor(T, config.window, batch.size,
                             n_centers=objective.n_centers)
            try:
                value, g_model, g_net = objective(params, net, batch, c)
            except FloatingPointError as exc:
                raise NumericalError(str(exc), it) from exc
            g = np.concatenate([g_model, g_net])
            if not (np.isfinite(value) and np.all(np.isfinite(g))):
                raise NumericalError("non-finite stochastic gradient", it)
            if it % config.log_every == 0 or it == config.iterations - 1:
                trace.append(it, value, np.linalg.norm(g_model),
                             np.linalg.norm(g_net), time.perf_counter() - start)
                _log.debug("iter %d elbo %.6f", it, value)
            x, v = rmsprop_step(x, v, g * mask, config.learning_rate,
                                config.decay, config.eps)
            if not np.all(np.isfinite(x)):
                raise NumericalError("parameters diverged", it)
            if config.train_model and config.learning_rate > 0.0:
                try:
                    with np.errstate(over="raise"):
                        params = unpack_model(x[:n_model], M, D)
                except (FloatingPointError, ValueError) as exc:
                    # overflowing scales or degenerate transition matrices
                    raise NumericalError(f"parameters diverged: {exc}", it) from exc
            net.params = x[n_model:].copy()
            trace.n_iterations = it + 1
    finally:
        objective.close()
    return params, net, trace
