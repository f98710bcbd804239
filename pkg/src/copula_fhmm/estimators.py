"""scikit-learn style estimators wrapping the two learning algorithms.

Both estimators take a single observation sequence ``X`` of shape
``(T, D)``; rows are time steps.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .elbo import TrainConfig, train
from .evaluation import loglik_per_timestep
from .inference import infer_marginals
from .model import FhmmParams, initial_params, simulate, smoothed_reconstruction
from .recognition import RecognitionNet
from .smf import DEFAULT_MAX_INNER, DEFAULT_TOL, smf_e_step, smf_em_fit


def _check_seed(random_state):
    if random_state is None:
        return 0
    if isinstance(random_state, (int, np.integer)) and random_state >= 0:
        return int(random_state)
    raise ValueError("random_state must be a non-negative integer or None")


def starting_point(est, X):
    """``est.init_params`` if set, else a data-scaled draw from ``est.random_state``."""
    if est.init_params is not None:
        init = est.init_params
        if not isinstance(init, FhmmParams):
            raise TypeError("init_params must be an FhmmParams instance")
        if init.n_chains != est.n_chains or init.n_dims != X.shape[1]:
            raise ValueError("init_params does not match n_chains and the data width")
        return init
    if est.n_chains < 1:
        raise ValueError("n_chains must be at least 1")
    seed = np.random.SeedSequence(_check_seed(est.random_state)).spawn(2)[1]
    return initial_params(X, est.n_chains, np.random.default_rng(seed))


class _FhmmMixin(TransformerMixin):
    """Methods shared by both estimators; needs ``params_`` and ``predict_proba``."""

    def _validate(self, X, reset=False, min_samples=2):
        X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, the model was fitted with "
                f"{self.n_features_in_}")
        return X

    def transform(self, X):
        """Posterior marginals ``q(s_t^m = 1)``, shape (T, M)."""
        return self.predict_proba(X)

    def predict(self, X):
        """Most probable state of each chain at each time, shape (T, M)."""
        return (self.predict_proba(X) > 0.5).astype(int)

    def reconstruct(self, X):
        """Posterior-weighted emission means, shape (T, D)."""
        return smoothed_reconstruction(self.params_.W, self.predict_proba(X))

    def score(self, X, y=None):
        """Exact log-likelihood per time step."""
        check_is_fitted(self, "params_")
        return loglik_per_timestep(self.params_, self._validate(X, min_samples=1))

    def sample(self, n_samples, random_state=0):
        """Draw ``(X, states)`` from the fitted model."""
        check_is_fitted(self, "params_")
        states, y = simulate(self.params_, n_samples, random_state)
        return y, states


class CopulaFHMM(_FhmmMixin, BaseEstimator):
    """FHMM learned by stochastic variational inference with copula chains.

    Recognition networks map windows of ``window + 1`` observations to
    per-chain marginals and copula correlations; model and network
    parameters are fitted jointly by minibatch RMSprop.

    Parameters
    ----------
    n_chains : int, default=2
    window : int, default=4
        Even window width ``dt``; each network sees ``dt + 1`` observations.
    hidden : tuple of int, default=(30,)
    activation : {"tanh", "relu", "sigmoid"}, default="tanh"
    sharing : {"chain", "separate", "shared"}, default="chain"
    n_minibatch : int, default=10
    max_iter : int, default=20000
    learning_rate, decay, eps : float
        RMSprop settings.
    budget_seconds : float, optional
        Wall-clock limit on training.
    n_threads : int, default=1
        Worker threads for gradient chunks; results do not depend on it.
    random_state : int, default=0
    init_params : FhmmParams, optional
        Starting model; drawn from the data when omitted.
    log_every : int, default=100

    Attributes
    ----------
    params_ : FhmmParams
    net_ : RecognitionNet
    trace_ : TrainTrace
    n_iter_ : int
    n_features_in_ : int

    Examples
    --------
    >>> from copula_fhmm import CopulaFHMM
    >>> est = CopulaFHMM(n_chains=2, max_iter=200).fit(X)   # doctest: +SKIP
    >>> theta = est.predict_proba(X)                        # doctest: +SKIP
    """

    algorithm_tag = "svi"

    def __init__(self, n_chains=2, window=4, hidden=(30,), activation="tanh",
                 sharing="chain", n_minibatch=10, max_iter=20000, learning_rate=1e-3,
                 decay=0.9, eps=1e-8, budget_seconds=None, n_threads=1,
                 random_state=0, init_params=None, log_every=100):
        self.n_chains = n_chains
        self.window = window
        self.hidden = hidden
        self.activation = activation
        self.sharing = sharing
        self.n_minibatch = n_minibatch
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.budget_seconds = budget_seconds
        self.n_threads = n_threads
        self.random_state = random_state
        self.init_params = init_params
        self.log_every = log_every

    def train_config(self):
        """The :class:`TrainConfig` equivalent of the current settings."""
        return TrainConfig(
            window=self.window, hidden=tuple(self.hidden), activation=self.activation,
            sharing=self.sharing, n_minibatch=self.n_minibatch,
            iterations=self.max_iter, learning_rate=self.learning_rate,
            decay=self.decay, eps=self.eps, seed=_check_seed(self.random_state),
            log_every=self.log_every, budget_seconds=self.budget_seconds,
            n_threads=self.n_threads)

    def fit(self, X, y=None, net=None):
        """Fit on one sequence ``X`` of shape (T, D); ``net`` warm-starts the networks."""
        config = self.train_config()
        X = self._validate(X, reset=True, min_samples=config.window + 3)
        init = starting_point(self, X)
        self.params_, self.net_, self.trace_ = train(config, X, init, net)
        self.n_iter_ = self.trace_.n_iterations
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = self._validate(X, min_samples=self.net_.spec.window + 1)
        return infer_marginals(self.params_, self.net_, X).theta

    def marginals(self, X):
        """Full :class:`PosteriorMarginals` (including pair tables) for ``X``."""
        check_is_fitted(self, "params_")
        X = self._validate(X, min_samples=self.net_.spec.window + 1)
        return infer_marginals(self.params_, self.net_, X)

    @classmethod
    def from_fitted(cls, params, net, **kwargs):
        """An estimator holding already-learned parameters and networks."""
        if not isinstance(net, RecognitionNet):
            raise TypeError("net must be a RecognitionNet")
        spec = net.spec
        est = cls(n_chains=params.n_chains, window=spec.window, hidden=spec.hidden,
                  activation=spec.activation, sharing=spec.sharing, **kwargs)
        est.params_ = params
        est.net_ = net
        est.n_features_in_ = params.n_dims
        est.n_iter_ = 0
        return est


class StructuredMeanFieldFHMM(_FhmmMixin, BaseEstimator):
    """FHMM learned by structured mean-field variational EM.

    Parameters
    ----------
    n_chains : int, default=2
    max_iter : int, default=100
        Outer EM iterations.
    tol : float, default=1e-6
        Relative tolerance of the inner fixed-point loop.
    max_inner : int, default=50
    outer_tol : float, default=1e-8
    budget_seconds : float, optional
    random_state : int, default=0
    init_params : FhmmParams, optional

    Attributes
    ----------
    params_ : FhmmParams
    trace_ : SmfTrace
    n_iter_ : int
    n_features_in_ : int
    """

    algorithm_tag = "smf"

    def __init__(self, n_chains=2, max_iter=100, tol=DEFAULT_TOL,
                 max_inner=DEFAULT_MAX_INNER, outer_tol=1e-8, budget_seconds=None,
                 random_state=0, init_params=None):
        self.n_chains = n_chains
        self.max_iter = max_iter
        self.tol = tol
        self.max_inner = max_inner
        self.outer_tol = outer_tol
        self.budget_seconds = budget_seconds
        self.random_state = random_state
        self.init_params = init_params

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        init = starting_point(self, X)
        self.params_, _, self.trace_ = smf_em_fit(
            init, X, self.max_iter, self.budget_seconds, self.max_inner, self.tol,
            self.outer_tol)
        self.n_iter_ = len(self.trace_)
        return self

    def marginals(self, X):
        check_is_fitted(self, "params_")
        X = self._validate(X, min_samples=1)
        return smf_e_step(self.params_, X, max_inner=self.max_inner, tol=self.tol).marginals()

    def predict_proba(self, X):
        return self.marginals(X).theta

    @classmethod
    def from_fitted(cls, params, **kwargs):
        est = cls(n_chains=params.n_chains, **kwargs)
        est.params_ = params
        est.n_features_in_ = params.n_dims
        est.n_iter_ = 0
        return est
