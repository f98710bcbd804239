"""Command-line entry point: ``copula-fhmm {simulate,train,eval,infer,compare}``."""

import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .estimators import CopulaFHMM, StructuredMeanFieldFHMM, starting_point
from .evaluation import budgeted_comparison, evaluate
from .exceptions import ModelSizeError, NumericalError, ParseError
from .model import MAX_EXACT_CHAINS, preset_params, simulate
from .recognition import MlpSpec

_log = logging.getLogger("copula_fhmm")

def _add_common(p):
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="observation CSV (input, or output for simulate)")
    p.add_argument("--model-in")
    p.add_argument("--model-out")
    p.add_argument("--algo", choices=("svi", "smf"))
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--threads", type=int, dest="n_threads",
                   help="worker threads (default: machine parallelism)")
    p.add_argument("--columns", help="1-based columns to keep, e.g. 2,3")
    p.add_argument("--rows", help="inclusive 1-based row range, e.g. 1:1000")
    p.add_argument("--standardize", action="store_const", const=True)
    p.add_argument("--header", action="store_const", const=True,
                   help="skip the first CSV line")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_training(p):
    p.add_argument("--n-chains", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--hidden", type=lambda s: tuple(int(t) for t in s.split(",")))
    p.add_argument("--activation", choices=("tanh", "relu", "sigmoid"))
    p.add_argument("--sharing", choices=("chain", "separate", "shared"))
    p.add_argument("--n-minibatch", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--decay", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--log-every", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--smf-iterations", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="copula-fhmm",
        description="Factorial HMMs by stochastic variational inference with copula chains.")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("simulate", help="draw a sequence from a ground-truth model")
    _add_common(p)
    p.add_argument("--preset", help="named ground-truth model (validation, scalability)")
    p.add_argument("--length", type=int)
    p.add_argument("--states-out", help="optional CSV of the true states")

    p = sub.add_parser("train", help="fit a model to a sequence (--model-in warm-starts)")
    _add_common(p)
    _add_training(p)
    p.add_argument("--trace-out", help="line-delimited JSON training trace")

    p = sub.add_parser("eval", help="log-likelihood and smoothing MSE of a model")
    _add_common(p)
    p.add_argument("--train-data", help="optional training CSV for a train LL entry")
    p.add_argument("--report-out")

    p = sub.add_parser("infer", help="per-time posterior marginals")
    _add_common(p)
    p.add_argument("--out", help="marginals CSV (default: stdout)")

    p = sub.add_parser("compare", help="SVI and SMF-EM under the same wall-clock budget")
    _add_common(p)
    _add_training(p)
    p.add_argument("--test-data")
    p.add_argument("--smf-suffix", type=int,
                   help="train SMF-EM on only the last N training rows")
    p.add_argument("--report-out")
    return parser


def _settings(args):
    """Merge config-file values with explicit flags (flags win)."""
    values = io.load_config(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in ("config", "mode", "verbose") or value is None:
            continue
        values[key.replace("-", "_")] = value
    if "seed" not in values:
        values["seed"] = 0
    if "n_threads" not in values:
        values["n_threads"] = os.cpu_count() or 1
    return values


def _require(values, *keys):
    for key in keys:
        if not values.get(key):
            raise ValueError(f"--{key.replace('_', '-')} is required")


def _load_data(values, key="data", transform=None):
    columns = io.parse_index_list(values["columns"]) if values.get("columns") else None
    rows = io.parse_range(values["rows"]) if values.get("rows") else None
    standardize = bool(values.get("standardize")) and transform is None
    y, fitted = io.load_csv(values[key], columns, rows, standardize,
                            bool(values.get("header")))
    if transform is not None:
        if transform["mean"].shape != (y.shape[1],):
            raise ValueError("stored standardisation does not match the data width")
        return y, transform
    return y, fitted


def _stored_transform(mf):
    prov = mf.provenance
    if "standardize_mean" in prov:
        return {"mean": np.atleast_1d(prov["standardize_mean"]),
                "scale": np.atleast_1d(prov["standardize_scale"])}
    return None


def _apply(y, transform):
    return y if transform is None else (y - transform["mean"]) / transform["scale"]


def _svi_estimator(values):
    cfg = io.train_config_from(values)
    return CopulaFHMM(
        n_chains=values.get("n_chains", 2), window=cfg.window, hidden=cfg.hidden,
        activation=cfg.activation, sharing=cfg.sharing, n_minibatch=cfg.n_minibatch,
        max_iter=cfg.iterations, learning_rate=cfg.learning_rate, decay=cfg.decay,
        eps=cfg.eps, budget_seconds=cfg.budget_seconds, n_threads=cfg.n_threads,
        random_state=cfg.seed, log_every=cfg.log_every)


def _smf_estimator(values):
    return StructuredMeanFieldFHMM(
        n_chains=values.get("n_chains", 2), max_iter=values.get("smf_iterations", 100),
        budget_seconds=values.get("budget_seconds"), random_state=values["seed"])


def _model_file(est, values, transform):
    prov = {"seed": values["seed"], "iterations": est.n_iter_}
    if est.algorithm_tag == "svi":
        prov["config_hash"] = io.config_hash(est.train_config())
        mf_net = est.net_
    else:
        mf_net = None
    if transform is not None:
        prov["standardize_mean"] = transform["mean"]
        prov["standardize_scale"] = transform["scale"]
    return io.ModelFile.from_model(est.params_, mf_net, est.algorithm_tag, prov)


def _estimator_from_file(mf):
    if mf.algorithm == "svi":
        return CopulaFHMM.from_fitted(mf.params, mf.net)
    return StructuredMeanFieldFHMM.from_fitted(mf.params)


def cmd_simulate(values):
    _require(values, "data")
    if values.get("model_in"):
        params = io.ModelFile.load(values["model_in"]).params
    else:
        params = preset_params(values.get("preset", "validation"))
    states, y = simulate(params, values.get("length", 1000), values["seed"])
    io.save_csv(values["data"], y)
    if values.get("model_out"):
        io.ModelFile.from_model(params, algorithm="truth",
                                provenance={"seed": values["seed"]}).save(values["model_out"])
    if values.get("states_out"):
        io.save_csv(values["states_out"], states)
    return 0


def cmd_train(values):
    _require(values, "data", "model_out")
    y, transform = _load_data(values)
    est = _svi_estimator(values) if values.get("algo", "svi") == "svi" else _smf_estimator(values)
    fit_kw = {}
    if values.get("model_in"):
        # warm start from a saved model (and its networks, when compatible)
        mf = io.ModelFile.load(values["model_in"])
        est.set_params(n_chains=mf.n_chains, init_params=mf.params)
        if est.algorithm_tag == "svi" and mf.spec == MlpSpec(
                est.window, mf.n_dims, mf.n_chains, tuple(est.hidden), est.activation,
                est.sharing):
            fit_kw["net"] = mf.net
    est.fit(y, **fit_kw)
    _model_file(est, values, transform).save(values["model_out"])
    if values.get("trace_out"):
        if est.algorithm_tag == "svi":
            io.write_trace(values["trace_out"], est.trace_)
        else:
            with open(values["trace_out"], "w") as fh:
                for i, (e, w) in enumerate(zip(est.trace_.elbo, est.trace_.wall_clock)):
                    fh.write(f'{{"elbo": {e!r}, "iteration": {i}, "wall_clock": {w!r}}}\n')
    _log.info("trained %s model for %d iterations", est.algorithm_tag, est.n_iter_)
    return 0


def _report(est, y_train, y_test, transform, tag):
    """Report with LL and MSE in the original data units."""
    rep = evaluate(est, _apply(y_train, transform), _apply(y_test, transform), tag)
    if transform is not None:
        log_jac = float(np.sum(np.log(transform["scale"])))
        rep.ll_train = None if rep.ll_train is None else rep.ll_train - log_jac
        rep.ll_test = None if rep.ll_test is None else rep.ll_test - log_jac
        rep.mse = [m * s * s for m, s in zip(rep.mse, transform["scale"])]
    if est.params_.n_chains > MAX_EXACT_CHAINS:
        rep.flags.append("exact_ll_skipped")
    return rep


def cmd_eval(values):
    _require(values, "model_in", "data")
    mf = io.ModelFile.load(values["model_in"])
    transform = _stored_transform(mf)
    y, _ = _load_data(values, transform=transform)
    y_train = y
    if values.get("train_data"):
        y_train, _ = _load_data(values, "train_data", transform=transform)
    rep = _report(_estimator_from_file(mf), y_train, y, transform, mf.algorithm)
    if not values.get("train_data"):
        rep.ll_train = None
    _emit(values.get("report_out"), rep.to_json() + "\n")
    return 0


def cmd_infer(values):
    _require(values, "model_in", "data")
    mf = io.ModelFile.load(values["model_in"])
    transform = _stored_transform(mf)
    y, _ = _load_data(values, transform=transform)
    theta = _estimator_from_file(mf).predict_proba(_apply(y, transform))
    if values.get("out"):
        io.save_csv(values["out"], theta)
    else:
        for row in theta:
            sys.stdout.write(",".join(format(v, ".17g") for v in row) + "\n")
    return 0


def cmd_compare(values):
    _require(values, "data", "test_data", "budget_seconds")
    y_train, transform = _load_data(values)
    y_test, _ = _load_data(values, "test_data", transform=transform)
    y_test = _apply(y_test, transform)
    suffix = values.get("smf_suffix")
    smf_train = y_train[-suffix:] if suffix else None
    svi, smf = _svi_estimator(values), _smf_estimator(values)
    # both arms start from the same model
    init = starting_point(svi, y_train)
    svi.set_params(init_params=init)
    smf.set_params(init_params=init)
    reports = budgeted_comparison(y_train, y_test, values["budget_seconds"], svi, smf,
                                  smf_train=smf_train)
    _emit(values.get("report_out"), "".join(r.to_json() + "\n" for r in reports))
    return 0


def _emit(path, text):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "eval": cmd_eval,
            "infer": cmd_infer, "compare": cmd_compare}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        values = _settings(args)
        return COMMANDS[args.mode](values)
    except NumericalError as exc:
        print(f"copula-fhmm {args.mode}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except (ParseError, ModelSizeError, ValueError, OSError) as exc:
        print(f"copula-fhmm {args.mode}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
