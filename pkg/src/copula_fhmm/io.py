"""File formats: observation CSVs, model files, training traces and run configs.

Model files and configs are line-oriented ``key = value`` text. Arrays are
whitespace-separated decimals written with 17 significant digits, which
round-trip every double exactly.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .elbo import TRANSITION_FLOOR, TrainConfig, TrainTrace
from .exceptions import ParseError
from .model import FhmmParams
from .recognition import MlpSpec, RecognitionNet

MODEL_FORMAT_VERSION = "copula-fhmm-model 1"


# ---------------------------------------------------------------------------
# Observations

def parse_index_list(text):
    """Parse ``"2,3,5"`` into 1-based column numbers."""
    try:
        cols = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"bad column list {text!r}") from exc
    if not cols or min(cols) < 1:
        raise ValueError(f"column numbers are 1-based, got {text!r}")
    return cols


def parse_range(text):
    """Parse an inclusive 1-based ``"first:last"`` range; either end may be empty."""
    first, sep, last = text.partition(":")
    if not sep:
        raise ValueError(f"row range must look like first:last, got {text!r}")
    try:
        lo = int(first) if first.strip() else 1
        hi = int(last) if last.strip() else None
    except ValueError as exc:
        raise ValueError(f"bad row range {text!r}") from exc
    if lo < 1 or (hi is not None and hi < lo):
        raise ValueError(f"empty or invalid row range {text!r}")
    return lo, hi


def load_csv(path, columns=None, rows=None, standardize=False, header=False):
    """Read a numeric CSV into a ``(T, D)`` array.

    Parameters
    ----------
    path : str or path-like
    columns : list of int, optional
        1-based columns to keep, in the given order.
    rows : (int, int or None), optional
        Inclusive 1-based range of data rows to keep.
    standardize : bool
        Z-score each kept column.
    header : bool
        Skip the first line.

    Returns
    -------
    y : ndarray
    transform : dict or None
        ``{"mean": ..., "scale": ...}`` with ``y_original = y * scale + mean``
        when ``standardize`` is set.

    Raises
    ------
    ParseError
        For an empty file, ragged rows or non-finite / non-numeric cells.
    """
    data = []
    width = None
    with open(path, newline="") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if header and lineno == 1:
                continue
            if not record or all(not c.strip() for c in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise ParseError(f"expected {width} columns, found {len(record)}", lineno)
            try:
                values = [float(c) for c in record]
            except ValueError:
                bad = next(c for c in record if not _is_float(c))
                raise ParseError(f"non-numeric cell {bad.strip()!r}", lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("missing or non-finite value (missing data is not supported)",
                                 lineno)
            data.append(values)
    if not data:
        raise ParseError("no data rows", 1)
    y = np.array(data, dtype=float)
    if rows is not None:
        lo, hi = rows
        y = y[lo - 1:hi]
        if y.shape[0] == 0:
            raise ValueError(f"row range {lo}:{hi} selects no rows")
    if columns is not None:
        if max(columns) > y.shape[1]:
            raise ValueError(f"column {max(columns)} requested but file has {y.shape[1]}")
        y = y[:, [c - 1 for c in columns]]
    transform = None
    if standardize:
        mean = y.mean(axis=0)
        scale = y.std(axis=0)
        scale[scale == 0.0] = 1.0
        y = (y - mean) / scale
        transform = {"mean": mean, "scale": scale}
    return y, transform


def _is_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def save_csv(path, array, header=None):
    array = np.atleast_2d(np.asarray(array, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        for row in array:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# Key-value text

def _fmt(x):
    return format(float(x), ".17g")


def _fmt_array(a):
    return " ".join(_fmt(v) for v in np.asarray(a, dtype=float).ravel())


def read_key_values(text, source="<text>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Duplicate keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParseError(f"{source}: expected 'key = value', got {raw.strip()!r}", lineno)
        if key in out:
            raise ParseError(f"{source}: duplicate key {key!r}", lineno)
        out[key] = (value.strip(), lineno)
    return out


def _floats(kv, key, n, source):
    value, lineno = _require(kv, key, source)
    try:
        arr = np.array([float(tok) for tok in value.split()], dtype=float)
    except ValueError:
        raise ParseError(f"{source}: {key} holds a non-numeric entry", lineno) from None
    if arr.size != n:
        raise ParseError(f"{source}: {key} has {arr.size} values, expected {n}", lineno)
    return arr


def _require(kv, key, source):
    if key not in kv:
        raise ParseError(f"{source}: missing key {key!r}")
    return kv[key]


def _int(kv, key, source):
    value, lineno = _require(kv, key, source)
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"{source}: {key} must be an integer", lineno) from None


# ---------------------------------------------------------------------------
# Model files

@dataclass(eq=False)
class ModelFile:
    """On-disk representation of a learned model.

    Transition matrices are stored as per-row logits; :attr:`params` applies
    the row softmax. ``net_params`` is empty for models without recognition
    networks (``window == 0``). ``provenance`` holds free-form scalars and
    arrays such as the seed, config hash and standardisation transform.
    """

    W: np.ndarray
    L: np.ndarray
    A_logits: np.ndarray
    window: int = 0
    hidden: tuple = ()
    activation: str = "tanh"
    sharing: str = "chain"
    net_params: np.ndarray = field(default_factory=lambda: np.empty(0))
    algorithm: str = "svi"
    provenance: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.A_logits.shape[0]

    @property
    def n_dims(self):
        return self.W.shape[1]

    @property
    def params(self):
        z = self.A_logits - self.A_logits.max(axis=2, keepdims=True)
        A = np.exp(z)
        A /= A.sum(axis=2, keepdims=True)
        return FhmmParams(self.W, self.L, A)

    @property
    def spec(self):
        if self.window == 0:
            return None
        return MlpSpec(self.window, self.n_dims, self.n_chains, tuple(self.hidden),
                       self.activation, self.sharing)

    @property
    def net(self):
        spec = self.spec
        return None if spec is None else RecognitionNet(spec, self.net_params.copy())

    @classmethod
    def from_model(cls, params, net=None, algorithm="svi", provenance=None):
        logits = np.log(np.maximum(params.A, TRANSITION_FLOOR))
        kwargs = {}
        if net is not None:
            s = net.spec
            kwargs = dict(window=s.window, hidden=tuple(s.hidden), activation=s.activation,
                          sharing=s.sharing, net_params=np.array(net.params, dtype=float))
        return cls(np.array(params.W), np.array(params.L), logits, algorithm=algorithm,
                   provenance=dict(provenance or {}), **kwargs)

    def dumps(self):
        M, D = self.n_chains, self.n_dims
        lines = [f"version = {MODEL_FORMAT_VERSION}",
                 f"algorithm = {self.algorithm}",
                 f"n_chains = {M}",
                 f"n_dims = {D}",
                 f"window = {self.window}",
                 f"W = {_fmt_array(self.W)}",
                 f"L = {_fmt_array(self.L[np.tril_indices(D)])}",
                 f"A_logits = {_fmt_array(self.A_logits)}"]
        if self.window:
            lines += [f"net.hidden = {' '.join(str(h) for h in self.hidden)}",
                      f"net.activation = {self.activation}",
                      f"net.sharing = {self.sharing}",
                      f"net.params = {_fmt_array(self.net_params)}"]
        for key in sorted(self.provenance):
            value = self.provenance[key]
            if isinstance(value, (list, tuple, np.ndarray)):
                text = "[" + _fmt_array(value) + "]"
            elif isinstance(value, (float, np.floating)):
                text = _fmt(value)
            else:
                text = str(value)
            if "\n" in text or "#" in text:
                raise ValueError(f"provenance value for {key!r} is not single-line text")
            lines.append(f"provenance.{key} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text, source="<model>"):
        kv = read_key_values(text, source)
        version, lineno = _require(kv, "version", source)
        if version != MODEL_FORMAT_VERSION:
            raise ParseError(f"{source}: unsupported model format {version!r} "
                             f"(this build reads {MODEL_FORMAT_VERSION!r})", lineno)
        M = _int(kv, "n_chains", source)
        D = _int(kv, "n_dims", source)
        window = _int(kv, "window", source)
        if M < 1 or D < 1 or window < 0:
            raise ParseError(f"{source}: invalid header sizes")
        W = _floats(kv, "W", (M + 1) * D, source).reshape(M + 1, D)
        L = np.zeros((D, D))
        L[np.tril_indices(D)] = _floats(kv, "L", D * (D + 1) // 2, source)
        logits = _floats(kv, "A_logits", 4 * M, source).reshape(M, 2, 2)
        algorithm = _require(kv, "algorithm", source)[0]
        extra = {}
        if window:
            hidden_text, lineno = _require(kv, "net.hidden", source)
            try:
                hidden = tuple(int(h) for h in hidden_text.split())
            except ValueError:
                raise ParseError(f"{source}: net.hidden must be integers", lineno) from None
            extra = dict(hidden=hidden,
                         activation=_require(kv, "net.activation", source)[0],
                         sharing=_require(kv, "net.sharing", source)[0])
            spec = MlpSpec(window, D, M, hidden, extra["activation"], extra["sharing"])
            extra["net_params"] = _floats(kv, "net.params", spec.n_params, source)
        provenance = {}
        for key, (value, _) in kv.items():
            if key.startswith("provenance."):
                provenance[key[len("provenance."):]] = _parse_scalar(value)
        known = {"version", "algorithm", "n_chains", "n_dims", "window", "W", "L",
                 "A_logits", "net.hidden", "net.activation", "net.sharing", "net.params"}
        for key, (_, lineno) in kv.items():
            if key not in known and not key.startswith("provenance."):
                raise ParseError(f"{source}: unknown key {key!r}", lineno)
        return cls(W, L, logits, window=window, algorithm=algorithm,
                   provenance=provenance, **extra)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read(), str(path))

    def __eq__(self, other):
        if not isinstance(other, ModelFile):
            return NotImplemented
        return self.dumps() == other.dumps()


def _parse_scalar(text):
    if text.startswith("[") and text.endswith("]"):
        return np.array([float(tok) for tok in text[1:-1].split()], dtype=float)
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


# ---------------------------------------------------------------------------
# Training traces

def trace_lines(trace):
    """One JSON object per logged iteration."""
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in trace.records())


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write(trace_lines(trace))


def read_trace(path):
    trace = TrainTrace()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                trace.append(r["iteration"], r["elbo"], r["grad_norm_model"],
                             r["grad_norm_net"], r["wall_clock"])
            except (ValueError, KeyError) as exc:
                raise ParseError(f"{path}: bad trace record ({exc})", lineno) from None
    return trace


# ---------------------------------------------------------------------------
# Run configuration

#: Keys accepted in a config file besides the :class:`TrainConfig` fields.
RUN_KEYS = {
    "algo": str, "n_chains": int, "data": str, "test_data": str, "model_in": str,
    "model_out": str, "trace_out": str, "report_out": str, "out": str,
    "columns": str, "rows": str, "standardize": bool, "header": bool,
    "length": int, "preset": str, "smf_iterations": int, "smf_suffix": int,
}
_TRAIN_TYPES = {"window": int, "hidden": tuple, "activation": str, "sharing": str,
                "n_minibatch": int, "iterations": int, "learning_rate": float,
                "decay": float, "eps": float, "seed": int, "train_model": bool,
                "train_nets": bool, "log_every": int, "budget_seconds": float,
                "n_threads": int, "chunk_size": int}


def _convert(key, kind, text, lineno, source):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(tok) for tok in text.replace(",", " ").split())
        return kind(text)
    except ValueError:
        raise ParseError(f"{source}: bad value {text!r} for {key}", lineno) from None


def parse_config(text, source="<config>"):
    """Parse a flat key-value config into a dict of typed values.

    Raises
    ------
    ParseError
        On unknown keys or values of the wrong type.
    """
    out = {}
    for key, (value, lineno) in read_key_values(text, source).items():
        kind = _TRAIN_TYPES.get(key) or RUN_KEYS.get(key)
        if kind is None:
            raise ParseError(f"{source}: unknown config key {key!r}", lineno)
        out[key] = _convert(key, kind, value, lineno, source)
    return out


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def train_config_from(values):
    """Build a :class:`TrainConfig` from the train-related entries of ``values``."""
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in names and v is not None})


def config_hash(config):
    """Short stable digest of a :class:`TrainConfig`, excluding thread count and budget."""
    items = {f.name: getattr(config, f.name) for f in fields(config)
             if f.name not in ("n_threads", "budget_seconds")}
    text = json.dumps(items, sort_keys=True, default=list)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
