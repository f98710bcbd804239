"""Structured mean-field variational EM for binary-chain FHMMs.

The posterior is approximated by independent Markov chains. Chain ``m``
keeps its prior dynamics and receives per-time evidence

    log h_t^m(1) - log h_t^m(0) = w_m' Sigma^{-1} (y_t - b - sum_{l != m} w_l gamma_t^l)
                                  - 1/2 w_m' Sigma^{-1} w_m

which is the exact coordinate-ascent update for linear-Gaussian emissions
with binary states. The bound is

    ELBO = sum_t <log p(y_t | s_t)> + sum_m [log Z_m - sum_t gamma_t^m e_t^m].
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .copula import PosteriorMarginals
from .elbo import _emission
from .exceptions import ConsistencyError
from .model import FhmmParams

#: Relative ELBO change below which the E-step stops.
DEFAULT_TOL = 1e-6
DEFAULT_MAX_INNER = 50
_A_BOUND = 1e-10


class _Timeout(Exception):
    pass


def _log_potentials(h):
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[1] != 2:
        raise ValueError("potentials must have shape (T, 2)")
    if np.any(h < 0.0) or np.any(h.sum(axis=1) <= 0.0):
        raise ValueError("potential rows must be non-negative and not all zero")
    with np.errstate(divide="ignore"):
        return np.log(h)


def _fb(log_h, A, pi1):
    """Scaled forward-backward for a 2-state chain with log-potentials (T, 2)."""
    T = log_h.shape[0]
    shift = log_h.max(axis=1)
    h = np.exp(log_h - shift[:, None])
    h0, h1 = h[:, 0].tolist(), h[:, 1].tolist()
    a00, a01, a10, a11 = (float(v) for v in np.asarray(A).ravel())
    f0 = np.empty(T)
    f1 = np.empty(T)
    c = np.empty(T)
    x0 = (1.0 - pi1) * h0[0]
    x1 = pi1 * h1[0]
    for t in range(T):
        if t:
            x0, x1 = (x0 * a00 + x1 * a10) * h0[t], (x0 * a01 + x1 * a11) * h1[t]
        s = x0 + x1
        if not s > 0.0:
            raise ValueError(f"evidence is incompatible with the chain at t={t}")
        x0 /= s
        x1 /= s
        f0[t] = x0
        f1[t] = x1
        c[t] = s
    b0 = np.ones(T)
    b1 = np.ones(T)
    ct = c.tolist()
    y0, y1 = 1.0, 1.0
    for t in range(T - 2, -1, -1):
        u0 = h0[t + 1] * y0
        u1 = h1[t + 1] * y1
        y0 = (a00 * u0 + a01 * u1) / ct[t + 1]
        y1 = (a10 * u0 + a11 * u1) / ct[t + 1]
        b0[t] = y0
        b1[t] = y1
    gamma = f1 * b1
    gamma = gamma / (f0 * b0 + gamma)
    alpha = np.stack([f0, f1], axis=1)
    beta = np.stack([b0, b1], axis=1)
    xi = (alpha[:-1, :, None] * np.asarray(A)[None]
          * (h[1:] * beta[1:])[:, None, :] / c[1:, None, None])
    log_z = float(np.sum(np.log(c)) + np.sum(shift))
    return gamma, xi, log_z


def forward_backward(h, A, pi):
    """Posterior of a 2-state Markov chain under per-time potentials.

    Parameters
    ----------
    h : array_like, shape (T, 2)
        Non-negative evidence potentials.
    A : array_like, shape (2, 2)
        Transition matrix.
    pi : float
        Initial probability of state 1.

    Returns
    -------
    gamma : ndarray, shape (T,)
        ``q(s_t = 1)``.
    xi : ndarray, shape (T - 1, 2, 2)
        Pair marginals ``q(s_t = i, s_{t+1} = j)``.
    log_z : float
        ``log sum_s p(s) prod_t h_t(s_t)``.
    """
    return _fb(_log_potentials(h), A, float(pi))


def _fb_evidence(e, A, pi1):
    """Forward-backward with evidence given as log-odds ``e_t`` (``h_t(0) = 1``)."""
    log_h = np.stack([np.zeros_like(e), e], axis=1)
    return _fb(log_h, A, pi1)


@dataclass
class SmfState:
    """Variational state of the structured mean-field posterior.

    Attributes
    ----------
    evidence : ndarray, shape (T, M)
        Log-odds potentials ``log h_t^m(1) - log h_t^m(0)``.
    gamma : ndarray, shape (T, M)
        Marginals ``q(s_t^m = 1)``.
    xi : ndarray, shape (T - 1, M, 2, 2)
        Pair tables.
    log_z : ndarray, shape (M,)
    elbo : float
    converged : bool
    """

    evidence: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_z: np.ndarray
    elbo: float = -np.inf
    converged: bool = False

    def marginals(self):
        return PosteriorMarginals(self.gamma.copy(), self.xi.copy(), 0)


def init_state(params, T):
    """Prior marginals for every chain, no evidence."""
    M = params.n_chains
    pi = params.stationary
    gamma = np.tile(pi, (T, 1))
    xi = np.empty((max(T - 1, 0), M, 2, 2))
    for m in range(M):
        marg = np.array([1.0 - pi[m], pi[m]])
        xi[:, m] = marg[:, None] * params.A[m]
    return SmfState(np.zeros((T, M)), gamma, xi, np.zeros(M))


class _Whitened:
    def __init__(self, params, y):
        self.params = params
        W, L = params.W, params.L
        self.offsets = W[:-1]
        self.Sinv_w = linalg.cho_solve((L, True), self.offsets.T)  # (D, M)
        self.quad = np.einsum("dm,md->m", self.Sinv_w, self.offsets)
        self.proj = (y - W[-1]) @ self.Sinv_w  # (T, M): w_m' Sigma^-1 (y_t - b)
        self.cross = self.offsets @ self.Sinv_w  # (M, M): w_l' Sigma^-1 w_m

    def evidence(self, gamma, m):
        others = gamma @ self.cross[:, m] - gamma[:, m] * self.cross[m, m]
        return self.proj[:, m] - others - 0.5 * self.quad[m]


def smf_elbo(params, y, state):
    """Structured mean-field bound for the current state."""
    emis = _emission(params.W, params.L, state.gamma, y)
    return float(np.sum(emis) + np.sum(state.log_z)
                 - np.sum(state.gamma * state.evidence))


def _sweep(params, y, state, wh, deadline):
    pi = params.stationary
    for m in range(params.n_chains):
        if deadline is not None and time.perf_counter() > deadline:
            raise _Timeout
        e = wh.evidence(state.gamma, m)
        g, xi, lz = _fb_evidence(e, params.A[m], pi[m])
        state.evidence[:, m] = e
        state.gamma[:, m] = g
        state.xi[:, m] = xi
        state.log_z[m] = lz


def smf_e_step(params, y, state=None, max_inner=DEFAULT_MAX_INNER, tol=DEFAULT_TOL,
               deadline=None):
    """Round-robin fixed-point updates of the chain evidence.

    Stops when the relative change of the bound falls below ``tol`` or after
    ``max_inner`` sweeps (``state.converged`` records which).

    Raises
    ------
    ConsistencyError
        If a sweep decreases the bound beyond round-off.
    """
    y = np.asarray(y, dtype=float)
    T = y.shape[0]
    if state is None:
        state = init_state(params, T)
    else:
        state = SmfState(state.evidence.copy(), state.gamma.copy(), state.xi.copy(),
                         state.log_z.copy(), state.elbo, state.converged)
    wh = _Whitened(params, y)
    prev = None
    state.converged = False
    for _ in range(max_inner):
        _sweep(params, y, state, wh, deadline)
        cur = smf_elbo(params, y, state)
        if prev is not None:
            if cur < prev - 1e-9 * max(1.0, abs(prev)):
                raise ConsistencyError(
                    f"structured mean-field bound decreased from {prev} to {cur}")
            if abs(cur - prev) <= tol * max(1.0, abs(cur)):
                state.elbo = cur
                state.converged = True
                break
        prev = cur
        state.elbo = cur
    return state


def _transition_objective(counts, g1):
    n00, n01, n10, n11 = counts.ravel()

    def f(x):
        a, b = x
        return -(n00 * math.log(1.0 - a) + n01 * math.log(a) + n10 * math.log(b)
                 + n11 * math.log(1.0 - b) + (1.0 - g1) * math.log(b / (a + b))
                 + g1 * math.log(a / (a + b)))
    return f


def _update_transition(counts, g1, A_old):
    """Maximise expected transition and stationary-initial log-probability."""
    f = _transition_objective(counts, g1)
    lo, hi = _A_BOUND, 1.0 - _A_BOUND
    row0 = counts[0].sum()
    row1 = counts[1].sum()
    a0 = counts[0, 1] / row0 if row0 > 0 else A_old[0, 1]
    b0 = counts[1, 0] / row1 if row1 > 0 else A_old[1, 0]
    x0 = np.clip([a0, b0], lo, hi)
    res = optimize.minimize(f, x0, method="L-BFGS-B", bounds=[(lo, hi), (lo, hi)])
    old = np.clip([A_old[0, 1], A_old[1, 0]], lo, hi)
    best = min((res.x, x0, old), key=f)
    a, b = best
    return np.array([[1.0 - a, a], [b, 1.0 - b]])


def smf_m_step(params, y, state):
    """Closed-form updates of ``W`` and ``Sigma``; exact 2-parameter update of each ``A_m``."""
    y = np.asarray(y, dtype=float)
    T, D = y.shape
    M = params.n_chains
    g = state.gamma
    S = np.hstack([g, np.ones((T, 1))])
    C = S.T @ S
    C[np.arange(M), np.arange(M)] += np.sum(g * (1.0 - g), axis=0)
    B = S.T @ y
    W = linalg.solve(C + 1e-10 * np.eye(M + 1), B, assume_a="pos")
    cov = (y.T @ y - B.T @ W) / T
    cov = 0.5 * (cov + cov.T) + 1e-10 * np.eye(D)
    L = np.linalg.cholesky(cov)
    A = np.empty((M, 2, 2))
    for m in range(M):
        A[m] = _update_transition(state.xi[:, m].sum(axis=0), g[0, m], params.A[m])
    return FhmmParams(W, L, A)


@dataclass
class SmfTrace:
    """Per-outer-iteration bound and elapsed time."""

    elbo: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    timed_out: bool = False

    def __len__(self):
        return len(self.elbo)


def smf_em_fit(init, y, outer_iterations=100, budget_seconds=None,
               max_inner=DEFAULT_MAX_INNER, tol=DEFAULT_TOL, outer_tol=1e-8):
    """Variational EM under an iteration and wall-clock budget.

    Each outer iteration runs the E-step on the current parameters, records
    the bound, then applies the M-step. An iteration interrupted by the
    budget is discarded, so the returned parameters are always those of the
    last completed M-step.

    Returns
    -------
    params : FhmmParams
    state : SmfState
    trace : SmfTrace
    """
    y = np.asarray(y, dtype=float)
    start = time.perf_counter()
    deadline = None if budget_seconds is None else start + budget_seconds
    params = init
    state = init_state(init, y.shape[0])
    trace = SmfTrace()
    if budget_seconds is not None and budget_seconds <= 0:
        trace.timed_out = True
        return params, state, trace
    for _ in range(outer_iterations):
        try:
            new_state = smf_e_step(params, y, state, max_inner, tol, deadline)
            new_params = smf_m_step(params, y, new_state)
        except _Timeout:
            trace.timed_out = True
            break
        if trace.elbo and new_state.elbo < trace.elbo[-1] - 1e-6 * max(1.0, abs(new_state.elbo)):
            raise ConsistencyError(
                f"EM bound decreased from {trace.elbo[-1]} to {new_state.elbo}")
        state = new_state
        params = new_params
        trace.elbo.append(state.elbo)
        trace.wall_clock.append(time.perf_counter() - start)
        if len(trace.elbo) > 1 and \
                abs(trace.elbo[-1] - trace.elbo[-2]) <= outer_tol * abs(trace.elbo[-1]):
            break
    return params, state, trace


def boundary_posterior(params, y, theta_junction, dt, side, max_inner=DEFAULT_MAX_INNER,
                       tol=1e-10):
    """Structured mean-field posterior on one boundary segment.

    The segment holds the ``dt // 2`` positions the recognition networks
    cannot reach plus the adjacent interior position, whose marginals are
    fixed to ``theta_junction`` (the network output there).

    Parameters
    ----------
    theta_junction : array_like, shape (M,)
    side : {"left", "right"}

    Returns
    -------
    PosteriorMarginals
        ``dt // 2 + 1`` positions including the junction; empty when ``dt == 0``.
    """
    y = np.asarray(y, dtype=float)
    T = y.shape[0]
    M = params.n_chains
    half = dt // 2
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    if half == 0:
        return PosteriorMarginals(np.empty((0, M)), np.empty((0, M, 2, 2)),
                                  0 if side == "left" else T)
    n = half + 1
    if n > T:
        raise ValueError("sequence shorter than the boundary segment")
    junction = np.asarray(theta_junction, dtype=float)
    if side == "left":
        seg = slice(0, n)
        pin = n - 1
        offset = 0
    else:
        seg = slice(T - n, T)
        pin = 0
        offset = T - n
    ys = y[seg]
    wh = _Whitened(params, ys)
    pi = params.stationary
    gamma = np.tile(pi, (n, 1))
    gamma[pin] = junction
    xi = np.empty((n - 1, M, 2, 2))
    free = np.arange(n) != pin
    for _ in range(max_inner):
        old = gamma.copy()
        for m in range(M):
            e = wh.evidence(gamma, m)
            if side == "left":
                # filtered state at the last free position, then one step ahead
                g_pre, _, _ = _fb_evidence(e[:-1], params.A[m], pi[m])
                pred1 = (1.0 - g_pre[-1]) * params.A[m, 0, 1] \
                    + g_pre[-1] * params.A[m, 1, 1]
                ee = e.copy()
                ee[-1] = _logit(junction[m]) - _logit(pred1)
                g, x, _ = _fb_evidence(ee, params.A[m], pi[m])
            else:
                # choose the segment's initial law so the junction posterior is pinned
                ee = e.copy()
                ee[0] = 0.0
                g0, _, _ = _fb_evidence(ee, params.A[m], junction[m])
                back = _logit(g0[0]) - _logit(junction[m])
                init1 = _sigmoid(_logit(junction[m]) - back)
                g, x, _ = _fb_evidence(ee, params.A[m], init1)
            gamma[free, m] = g[free]
            gamma[pin, m] = junction[m]
            xi[:, m] = x
        if np.max(np.abs(gamma - old)) < tol:
            break
    return PosteriorMarginals(gamma, xi, offset)


def _logit(p):
    p = min(max(p, 1e-300), 1.0 - 1e-16)
    return math.log(p) - math.log1p(-p)


def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)
