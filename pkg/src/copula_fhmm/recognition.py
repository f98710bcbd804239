"""Feed-forward recognition networks for the copula-chain parameters.

For every chain ``m`` a network maps the data window centred at ``t`` to
the marginal ``theta_{t,m}`` (sigmoid output) and the correlation
``rho_{t,m}`` coupling ``t - 1`` and ``t`` (tanh output). Hidden layers
can be shared in three ways:

``"chain"``
    one trunk per chain feeding both its theta and rho heads (default);
``"separate"``
    one trunk per output, ``2 M`` trunks in total;
``"shared"``
    a single trunk feeding all ``2 M`` heads.

Time indices are 0-based throughout.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import BoundaryError
from .numerics import EPS_RHO, EPS_THETA

SHARING_MODES = ("chain", "separate", "shared")

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda h: 1.0 - h * h),
    "relu": (lambda a: np.maximum(a, 0.0), lambda h: (h > 0.0).astype(float)),
    "sigmoid": (lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)), lambda h: h * (1.0 - h)),
}


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def window(y, t, dt):
    """Flattened window ``y[t - dt/2 : t + dt/2 + 1]`` of length ``(dt + 1) * D``.

    Raises
    ------
    BoundaryError
        If the window does not fit inside ``y``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    half = dt // 2
    if dt % 2 or dt < 0:
        raise ValueError("window size dt must be a non-negative even integer")
    if t < half or t > y.shape[0] - 1 - half:
        raise BoundaryError(
            f"t={t} needs rows {t - half}..{t + half} of a length-{y.shape[0]} sequence")
    return y[t - half:t + half + 1].reshape(-1)


def all_windows(y, dt):
    """Windows for every admissible centre; row ``i`` is centred at ``i + dt // 2``."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < dt + 1:
        return np.empty((0, (dt + 1) * y.shape[1]))
    v = sliding_window_view(y, (dt + 1, y.shape[1]))[:, 0]
    return v.reshape(v.shape[0], -1)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the recognition networks.

    Parameters
    ----------
    window : int
        Window width minus one (``dt``); must be even and at least 2.
    n_dims : int
        Observation dimension ``D``.
    n_chains : int
        Number of hidden chains ``M``.
    hidden : tuple of int
        Hidden layer sizes of every trunk.
    activation : {"tanh", "relu", "sigmoid"}
    sharing : {"chain", "separate", "shared"}
    """

    window: int
    n_dims: int
    n_chains: int
    hidden: tuple = (30,)
    activation: str = "tanh"
    sharing: str = "chain"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.window < 2 or self.window % 2:
            raise ValueError(
                f"window dt={self.window} must be even and >= 2 "
                "(a window of 5 observations is dt=4)")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("at least one hidden layer of size >= 1 is required")
        if self.n_dims < 1 or self.n_chains < 1:
            raise ValueError("n_dims and n_chains must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"unknown sharing mode {self.sharing!r}")

    @property
    def input_dim(self):
        return (self.window + 1) * self.n_dims

    def trunks(self):
        """Output assignment per trunk: lists of ``(kind, chain)`` with kind 0=theta, 1=rho."""
        M = self.n_chains
        if self.sharing == "chain":
            return [[(0, m), (1, m)] for m in range(M)]
        if self.sharing == "separate":
            return [[(k, m)] for m in range(M) for k in (0, 1)]
        return [[(0, m) for m in range(M)] + [(1, m) for m in range(M)]]

    def layer_shapes(self):
        """``(fan_in, fan_out)`` of every layer, grouped by trunk."""
        out = []
        for heads in self.trunks():
            sizes = (self.input_dim,) + self.hidden + (len(heads),)
            out.append(list(zip(sizes[:-1], sizes[1:])))
        return out

    @property
    def n_params(self):
        return sum(i * o + o for trunk in self.layer_shapes() for i, o in trunk)


def unpack(params, spec):
    """Views ``[[(W, b), ...] per trunk]`` into the flat parameter vector."""
    params = np.asarray(params)
    if params.shape != (spec.n_params,):
        raise ValueError(
            f"expected {spec.n_params} network parameters, got {params.shape}")
    layers, pos = [], 0
    for trunk in spec.layer_shapes():
        tl = []
        for i, o in trunk:
            W = params[pos:pos + i * o].reshape(i, o)
            pos += i * o
            b = params[pos:pos + o]
            pos += o
            tl.append((W, b))
        layers.append(tl)
    return layers


def init_params(spec, rng):
    """Glorot-uniform weights and zero biases (initial theta = 0.5, rho = 0)."""
    params = np.zeros(spec.n_params)
    for trunk in unpack(params, spec):
        for W, _ in trunk:
            limit = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
            W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


def _forward(params, spec, X):
    act, _ = _ACTIVATIONS[spec.activation]
    n = X.shape[0]
    M = spec.n_chains
    raw = np.empty((2, n, M))
    caches = []
    for heads, trunk in zip(spec.trunks(), unpack(params, spec)):
        hs = [X]
        h = X
        for W, b in trunk[:-1]:
            h = act(h @ W + b)
            hs.append(h)
        W, b = trunk[-1]
        z = h @ W + b
        for col, (kind, m) in enumerate(heads):
            raw[kind, :, m] = z[:, col]
        caches.append(hs)
    return raw, caches


def _squash(raw):
    theta_raw = _sigmoid(raw[0])
    rho_raw = np.tanh(raw[1])
    theta = np.clip(theta_raw, EPS_THETA, 1.0 - EPS_THETA)
    rho = np.clip(rho_raw, -1.0 + EPS_RHO, 1.0 - EPS_RHO)
    return theta_raw, rho_raw, theta, rho


def _check_input(spec, X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != spec.input_dim:
        raise ValueError(
            f"window vector length {X.shape[1]} != expected {spec.input_dim}")
    return X, single


def recog_forward(params, spec, x):
    """Evaluate the networks on one window or a batch of windows.

    Returns
    -------
    theta, rho : ndarray, shape (M,) or (n, M)
        Clamped marginals in ``[EPS_THETA, 1 - EPS_THETA]`` and correlations
        in ``[-1 + EPS_RHO, 1 - EPS_RHO]``.
    """
    X, single = _check_input(spec, x)
    raw, _ = _forward(params, spec, X)
    _, _, theta, rho = _squash(raw)
    if single:
        return theta[0], rho[0]
    return theta, rho


def recog_backward(params, spec, x, upstream):
    """Gradient of ``sum(upstream_theta * theta + upstream_rho * rho)`` w.r.t. ``params``.

    Parameters
    ----------
    upstream : tuple of array_like
        ``(d_theta, d_rho)`` with the shapes returned by :func:`recog_forward`.

    Returns
    -------
    ndarray, shape (spec.n_params,)
        Sum of the per-window gradients.
    """
    X, _ = _check_input(spec, x)
    d_theta = np.asarray(upstream[0], dtype=float).reshape(X.shape[0], -1)
    d_rho = np.asarray(upstream[1], dtype=float).reshape(X.shape[0], -1)
    raw, caches = _forward(params, spec, X)
    return _backward(params, spec, raw, caches, d_theta, d_rho)


def _backward(params, spec, raw, caches, d_theta, d_rho):
    _, dact = _ACTIVATIONS[spec.activation]
    theta_raw, rho_raw, _, _ = _squash(raw)
    in_theta = (theta_raw > EPS_THETA) & (theta_raw < 1.0 - EPS_THETA)
    in_rho = (rho_raw > -1.0 + EPS_RHO) & (rho_raw < 1.0 - EPS_RHO)
    d_raw = np.stack([
        d_theta * theta_raw * (1.0 - theta_raw) * in_theta,
        d_rho * (1.0 - rho_raw * rho_raw) * in_rho,
    ])
    grad = np.zeros(spec.n_params)
    for heads, g_trunk, (p_trunk, hs) in zip(
            spec.trunks(), unpack(grad, spec), zip(unpack(params, spec), caches)):
        dz = np.stack([d_raw[kind, :, m] for kind, m in heads], axis=1)
        for layer in range(len(p_trunk) - 1, -1, -1):
            W, _ = p_trunk[layer]
            gW, gb = g_trunk[layer]
            h_in = hs[layer]
            gW += h_in.T @ dz
            gb += dz.sum(axis=0)
            if layer:
                dz = (dz @ W.T) * dact(h_in)
    return grad


class RecognitionNet:
    """Recognition networks with a flat parameter vector.

    Parameters
    ----------
    spec : MlpSpec
    params : ndarray, optional
        Flat parameters; freshly initialised from ``rng`` when omitted.
    rng : numpy.random.Generator, optional
    """

    def __init__(self, spec, params=None, rng=None):
        self.spec = spec
        if params is None:
            params = init_params(spec, rng if rng is not None else np.random.default_rng())
        params = np.array(params, dtype=float)
        unpack(params, spec)
        self.params = params

    def __call__(self, X):
        return recog_forward(self.params, self.spec, X)

    def forward_with_cache(self, X):
        raw, caches = _forward(self.params, self.spec, X)
        _, _, theta, rho = _squash(raw)
        return theta, rho, (raw, caches)

    def backward(self, cache, d_theta, d_rho):
        raw, caches = cache
        return _backward(self.params, self.spec, raw, caches, d_theta, d_rho)

    def marginals(self, y):
        """theta and rho for every admissible centre of ``y``; rows start at ``dt // 2``."""
        X = all_windows(y, self.spec.window)
        if X.shape[0] == 0:
            M = self.spec.n_chains
            return np.empty((0, M)), np.empty((0, M))
        return self(X)
