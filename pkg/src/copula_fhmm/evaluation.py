"""Metrics and head-to-head protocols for fitted FHMMs."""

import itertools
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .copula import PosteriorMarginals
from .exceptions import ModelSizeError
from .model import MAX_EXACT_CHAINS, FhmmParams, exact_loglik, smoothed_reconstruction

#: Largest number of chains :func:`align_chains` will search over.
MAX_ALIGN_CHAINS = 8


def loglik_per_timestep(params, y):
    """Exact log-likelihood divided by the number of time steps."""
    if params.n_chains > MAX_EXACT_CHAINS:
        raise ModelSizeError(
            f"exact log-likelihood needs 2**{params.n_chains} joint states; "
            "compare models with smoothing_mse instead")
    y = np.asarray(y, dtype=float)
    return exact_loglik(params, y) / y.shape[0]


def smoothing_mse(params, marginals, y):
    """Per-dimension mean squared error of the posterior-weighted emission means."""
    theta = marginals.theta if isinstance(marginals, PosteriorMarginals) else marginals
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float)
    if theta.shape[0] != y.shape[0]:
        raise ValueError(f"{theta.shape[0]} marginals for {y.shape[0]} observations")
    resid = y - smoothed_reconstruction(params.W, theta)
    return np.mean(resid * resid, axis=0)


def relabel(params, flips):
    """Swap the state labels of the chains where ``flips`` is true.

    Relabelling chain ``m`` negates its offset, adds the old offset to the
    bias and reverses its transition matrix; the likelihood is unchanged.
    """
    flips = np.asarray(flips, dtype=bool)
    W = params.W.copy()
    A = params.A.copy()
    W[-1] += W[:-1][flips].sum(axis=0)
    W[:-1][flips] *= -1.0
    A[flips] = A[flips][:, ::-1, ::-1]
    return FhmmParams(W, params.L, A)


@dataclass
class Alignment:
    """Result of :func:`align_chains`.

    ``aligned`` is the learned model with its chain ``permutation[m]`` moved
    to position ``m`` after relabelling the chains in ``flips``.
    """

    permutation: tuple
    flips: tuple
    distance: float
    aligned: FhmmParams

    def max_errors(self, truth):
        """Largest absolute ``W`` and ``A`` deviations from ``truth``."""
        return (float(np.max(np.abs(self.aligned.W - truth.W))),
                float(np.max(np.abs(self.aligned.A - truth.A))))


def alignment_distance(truth, candidate):
    return float(np.sum((truth.W - candidate.W) ** 2) + np.sum((truth.A - candidate.A) ** 2))


def align_chains(true_params, learned):
    """Match learned chains to true chains up to permutation and relabelling.

    Every relabelling pattern is tried; for each, the optimal permutation is
    an assignment problem over squared ``W``-row and ``A`` distances, with
    the bias row added afterwards.
    """
    M = true_params.n_chains
    if learned.n_chains != M or learned.n_dims != true_params.n_dims:
        raise ValueError("models differ in number of chains or dimensions")
    if M > MAX_ALIGN_CHAINS:
        raise ModelSizeError(f"alignment search refused for M={M} > {MAX_ALIGN_CHAINS}")
    best = None
    for flips in itertools.product((False, True), repeat=M):
        cand = relabel(learned, flips)
        cost = (np.sum((true_params.W[:-1, None] - cand.W[None, :-1]) ** 2, axis=2)
                + np.sum((true_params.A[:, None] - cand.A[None]) ** 2, axis=(2, 3)))
        rows, cols = linear_sum_assignment(cost)
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
        aligned = cand.permuted(perm)
        dist = alignment_distance(true_params, aligned)
        if best is None or dist < best.distance:
            applied = tuple(bool(flips[j]) for j in perm)
            best = Alignment(perm, applied, dist, aligned)
    return best


@dataclass
class EvalReport:
    """Metrics for one fitted model.

    ``ll_train`` and ``ll_test`` are exact log-likelihoods per time step
    (``None`` when not computed). ``mse`` is the per-dimension smoothing MSE
    on the test data.
    """

    algorithm: str
    ll_train: float = None
    ll_test: float = None
    mse: list = field(default_factory=list)
    wall_clock: float = 0.0
    iterations: int = 0
    flags: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def evaluate(estimator, y_train, y_test, algorithm, wall_clock=0.0, iterations=0,
             flags=()):
    """Build an :class:`EvalReport` from a fitted estimator."""
    report = EvalReport(algorithm, wall_clock=float(wall_clock),
                        iterations=int(iterations), flags=list(flags))
    if estimator.params_.n_chains <= MAX_EXACT_CHAINS:
        report.ll_train = loglik_per_timestep(estimator.params_, y_train)
        report.ll_test = loglik_per_timestep(estimator.params_, y_test)
    report.mse = [float(v) for v in smoothing_mse(
        estimator.params_, estimator.predict_proba(y_test), y_test)]
    return report


def budgeted_comparison(y_train, y_test, budget_seconds, svi, smf, smf_train=None):
    """Fit both estimators under the same wall-clock budget and report metrics.

    Parameters
    ----------
    y_train, y_test : ndarray
    budget_seconds : float
    svi, smf : estimator
        Unfitted :class:`~copula_fhmm.estimators.CopulaFHMM` and
        :class:`~copula_fhmm.estimators.StructuredMeanFieldFHMM`; their
        ``budget_seconds`` is overridden.
    smf_train : ndarray, optional
        Training data for the SMF arm (defaults to ``y_train``), e.g. a
        suffix of the training sequence.

    Returns
    -------
    (EvalReport, EvalReport)
        Reports for the SVI and SMF arms, computed from the last parameters
        available when the budget ran out.
    """
    reports = []
    for est, data in ((svi, y_train), (smf, y_train if smf_train is None else smf_train)):
        est.set_params(budget_seconds=budget_seconds)
        start = time.perf_counter()
        est.fit(data)
        elapsed = time.perf_counter() - start
        flags = [] if est.n_iter_ > 0 else ["no_completed_iteration"]
        reports.append(evaluate(est, y_train, y_test, est.algorithm_tag,
                                elapsed, est.n_iter_, flags))
    return tuple(reports)
