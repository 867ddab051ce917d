"""Plain-text serialization: model files, twist files, output tables.

Documents are JSON, one top-level record.  Floats are written with 17
significant digits so every value round-trips bit-exactly through the
decimal representation; the writer below formats them itself because the
stdlib encoder does not expose float formatting.

Model files carry ``horizon``, ``state_sizes``, ``initial_log_probs``,
``transition_log_probs`` (row-major matrices), ``potential_log`` and
``alpha``.  With ``"space": "linear"`` the same numeric fields are read as
linear-space probabilities/potentials and converted (the loader validates
normalization either way, via the model constructor).  Twist files mirror
this: ``kind`` plus per-step ``log_psi`` tables, or ``theta`` plus
``features``.

Tables are tab-separated with '#'-prefixed header lines; the first header
line carries the fully resolved configuration, so an output file identifies
the run that produced it.
"""

from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .fk import FkModel
from .twist import TwistFunction


def _fmt_float(x: float) -> str:
    if math.isinf(x):
        return "-1e9999" if x < 0 else "1e9999"  # parses back to inf
    return format(float(x), ".17g")


def _emit(value, out: list, indent: int) -> None:
    pad = "  " * indent
    if isinstance(value, dict):
        out.append("{\n")
        for i, (k, v) in enumerate(value.items()):
            out.append(f"{pad}  {json.dumps(k)}: ")
            _emit(v, out, indent + 1)
            out.append(",\n" if i < len(value) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(value, (list, tuple, np.ndarray)):
        items = list(value)
        flat = not any(isinstance(v, (dict, list, tuple, np.ndarray)) for v in items)
        if flat:
            out.append("[" + ", ".join(_scalar(v) for v in items) + "]")
        else:
            out.append("[\n")
            for i, v in enumerate(items):
                out.append(pad + "  ")
                _emit(v, out, indent + 1)
                out.append(",\n" if i < len(items) - 1 else "\n")
            out.append(pad + "]")
    else:
        out.append(_scalar(value))


def _scalar(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    if v is None:
        return "null"
    return json.dumps(v)


def dumps_document(doc: dict) -> str:
    out: list[str] = []
    _emit(doc, out, 0)
    out.append("\n")
    return "".join(out)


def model_to_document(model: FkModel) -> dict:
    return {
        "horizon": model.horizon,
        "state_sizes": list(model.state_sizes),
        "initial_log_probs": model.initial_log_probs,
        "transition_log_probs": [m for m in model.transition_log_probs],
        "potential_log": [v for v in model.potential_log],
        "alpha": model.alpha,
    }


def save_model(model: FkModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_document(model_to_document(model)))


def model_from_document(doc: dict) -> FkModel:
    try:
        space = doc.get("space", "log")
        if space not in ("log", "linear"):
            raise ConfigError(f"unknown space {space!r}")
        with np.errstate(divide="ignore"):
            def to_log(a):
                a = np.asarray(a, dtype=float)
                return np.log(a) if space == "linear" else a

            return FkModel(
                horizon=int(doc["horizon"]),
                state_sizes=tuple(int(s) for s in doc["state_sizes"]),
                initial_log_probs=to_log(doc["initial_log_probs"]),
                transition_log_probs=tuple(to_log(m) for m in doc["transition_log_probs"]),
                potential_log=tuple(to_log(v) for v in doc["potential_log"]),
                alpha=float(doc.get("alpha", 1.0)),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad model document: {exc}") from exc


def load_model(path) -> FkModel:
    with open(path) as fh:
        return model_from_document(json.load(fh))


def twist_to_document(tw: TwistFunction) -> dict:
    if tw.kind == "tabular":
        return {"kind": "tabular", "log_psi": [v for v in tw.tables]}
    return {
        "kind": "log_linear",
        "theta": [v for v in tw.thetas],
        "features": [f for f in tw.features],
    }


def save_twist(tw: TwistFunction, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_document(twist_to_document(tw)))


def twist_from_document(doc: dict) -> TwistFunction:
    try:
        if doc["kind"] == "tabular":
            return TwistFunction.tabular([np.asarray(v, dtype=float) for v in doc["log_psi"]])
        if doc["kind"] == "log_linear":
            return TwistFunction.log_linear(
                [np.asarray(v, dtype=float) for v in doc["theta"]],
                [np.asarray(f, dtype=float) for f in doc["features"]],
            )
        raise ConfigError(f"unknown twist kind {doc['kind']!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad twist document: {exc}") from exc


def load_twist(path) -> TwistFunction:
    with open(path) as fh:
        return twist_from_document(json.load(fh))


def format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    return str(v)


def format_table(columns: Sequence[str], rows, header: dict | None = None) -> str:
    """Tab-separated table; the '# config' line carries the resolved config."""
    lines = []
    if header is not None:
        lines.append("# config " + json.dumps(header, sort_keys=True, default=format_cell))
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def smc_output_table(out) -> str:
    """One row per particle: trajectory indices plus residual log weight."""
    header = {
        "log_Z_estimate": out.log_Z_estimate,
        "ess_sequence": [float(e) for e in out.ess_sequence],
        "seed": out.seed,
        "schedule": list(out.schedule),
    }
    T = out.trajectories.shape[1]
    cols = ["particle"] + [f"x{t}" for t in range(T)] + ["residual_log_weight"]
    rows = [
        [k, *out.trajectories[k], out.residual_log_weights[k]]
        for k in range(out.trajectories.shape[0])
    ]
    return format_table(cols, rows, header=header)
