"""Checkpoint files: a versioned JSON document holding the model dims, the schedule parameters and
every parameter array.

Example layout::

    {
      "format": "codestream-checkpoint",
      "version": 1,
      "model": {"hidden_width": 128, "embed_width": 32, "activation": "silu", "frequency_base": 1000.0},
      "schedule": {"steps": 1000, "beta_start": 0.0001, "beta_end": 0.02},
      "parameters": {"W1": {"shape": [34, 128], "data": [...]}, "b1": {...}, ...}
    }

Arrays are stored row-major as decimal strings produced by ``repr(float)``, which round-trips
float64 exactly, so save followed by load is bit-exact.
"""

import json
import logging

import numpy as np

from .model import ACTIVATIONS, EpsModel, LAYERS
from .streams.diffusion import build_linear_schedule

log = logging.getLogger(__name__)

FORMAT = "codestream-checkpoint"
VERSION = 1


class CheckpointError(Exception):
    pass

class CheckpointVersionError(CheckpointError):
    pass

class CheckpointFormatError(CheckpointError):
    pass

class CheckpointShapeError(CheckpointError):
    def __init__(self, layer, message):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


def save_checkpoint(model, sched, path):
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model": {
            "hidden_width": model.hidden_width,
            "embed_width": model.embed_width,
            "activation": model.activation,
            "frequency_base": model.frequency_base,
        },
        "schedule": {"steps": sched.T, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        "parameters": {
            name: {"shape": list(model.params[name].shape), "data": model.params[name].ravel().tolist()}
            for name in LAYERS
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, allow_nan=False)
        f.write("\n")
    log.info("Saved checkpoint to %s (%d parameters)", path, model.parameter_count())


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointFormatError(f"{path} is not a codestream checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointVersionError(f"{path} has checkpoint version {doc.get('version')!r}; expected {VERSION}")
    try:
        dims = doc["model"]
        schedule = doc["schedule"]
        hidden, embed = int(dims["hidden_width"]), int(dims["embed_width"])
        activation = dims["activation"]
        frequency_base = float(dims["frequency_base"])
        sched = build_linear_schedule(int(schedule["steps"]), float(schedule["beta_start"]), float(schedule["beta_end"]))
        stored = doc["parameters"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header ({exc!r})") from None
    if activation not in ACTIVATIONS:
        raise CheckpointFormatError(f"{path}: unknown activation {activation!r}")
    if not isinstance(stored, dict):
        raise CheckpointFormatError(f"{path}: parameters must be a mapping of layer name to array")

    expected = {'W1': (2 + embed, hidden), 'b1': (hidden,), 'W2': (hidden, hidden), 'b2': (hidden,), 'W3': (hidden, 2), 'b3': (2,)}
    params = {}
    for name in LAYERS:
        if name not in stored:
            raise CheckpointShapeError(name, "layer missing from checkpoint")
        entry = stored[name]
        if not isinstance(entry, dict) or not isinstance(entry.get("shape"), list) or "data" not in entry:
            raise CheckpointFormatError(f"{path}: layer {name} must be a mapping with 'shape' and 'data'")
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointShapeError(name, f"declared shape {shape} does not match model dims {expected[name]}")
        try:
            data = np.asarray(entry["data"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: layer {name} has non-numeric data ({exc})") from None
        if data.ndim != 1:
            raise CheckpointFormatError(f"{path}: layer {name} data must be a flat list of numbers")
        if data.size != np.prod(shape):
            raise CheckpointShapeError(name, f"expected {int(np.prod(shape))} values, found {data.size}")
        params[name] = data.reshape(shape)
    return EpsModel(params, activation, frequency_base), sched
