"""Run configuration: JSON schema, validation with JSON-pointer error paths,
and builders turning a validated document into model / task / trainer
objects. Unknown keys are rejected so a typo cannot silently fall back to a
default.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .models import GruModel, RnnModel, gru_init, rnn_init
from .tasks import TASK_ORDER, TaskSpec
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


_REQUIRED = object()


def _field(ftype, default=_REQUIRED, choices=None, minimum=None, nullable=False):
    return {"type": ftype, "default": default, "choices": choices,
            "minimum": minimum, "nullable": nullable}


SCHEMA = {
    "run_id": _field(str),
    "seed": _field(int),
    "model": {
        "kind": _field(str, choices=("rnn", "gru")),
        "H": _field(int, minimum=1),
        "g": _field(float, minimum=0.0),
        "alpha": _field(float, default=1.0),
        "activation": _field(str, default="tanh", choices=("tanh", "relu")),
        "readout_scale": _field(float, default=0.001, minimum=0.0),
    },
    "task": {
        "kind": _field(str, choices=TASK_ORDER),
        "T_ctx": _field(int, default=0, minimum=0),
        "T_stim": _field(int, default=30, minimum=0),
        "T_mem": _field(int, default=30, minimum=0),
        "T_resp": _field(int, default=30, minimum=0),
        "noise_std": _field(float, default=0.1, minimum=0.0),
        "n_context_channels": _field(int, default=0, minimum=0),
    },
    "train": {
        "learning_rate": _field(float, default=0.001, minimum=0.0),
        "batch_size": _field(int, default=64, minimum=1),
        "max_iters": _field(int, default=2000, minimum=1),
        "convergence_loss_threshold": _field(float, default=0.01665),
        "grad_clip_norm": _field(float, default=0.0001, nullable=True),
        "snapshot_every": _field(int, default=0, minimum=0),
        "eval_every": _field(int, default=10, minimum=1),
        "pool_size": _field(int, default=3000, minimum=1),
        "eval_size": _field(int, default=30, minimum=1),
        "use_adam": _field(bool, default=True),
        "stop_on_convergence": _field(bool, default=True),
    },
    "analysis": {
        "spectra_every": _field(int, default=0, minimum=0),
        "spectra_k": _field(int, default=20, minimum=1),
        "interference": _field(bool, default=False),
        "lyapunov": _field(bool, default=False),
        "consensus_axes": _field(list, default=["trial", "unit"]),
    },
}


def _check_type(value, f, pointer):
    ftype = f["type"]
    if f["nullable"] and value is None:
        return None
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(pointer, f"expected a number, got {value!r}")
        value = float(value)
    elif ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(pointer, f"expected an integer, got {value!r}")
    elif not isinstance(value, ftype):
        raise ConfigError(pointer, f"expected {ftype.__name__}, got {value!r}")
    if f["choices"] is not None and value not in f["choices"]:
        raise ConfigError(pointer, f"must be one of {list(f['choices'])}, got {value!r}")
    if f["minimum"] is not None and value < f["minimum"]:
        raise ConfigError(pointer, f"must be >= {f['minimum']}, got {value!r}")
    return value


def _validate_node(doc, schema, pointer):
    if not isinstance(doc, dict):
        raise ConfigError(pointer or "/", "expected an object")
    out = {}
    for key in doc:
        if key not in schema:
            raise ConfigError(f"{pointer}/{key}", "unknown key")
    for key, sub in schema.items():
        child_ptr = f"{pointer}/{key}"
        if isinstance(sub, dict) and "type" not in sub:
            out[key] = _validate_node(doc.get(key, {}), sub, child_ptr)
        else:
            if key not in doc:
                if sub["default"] is _REQUIRED:
                    raise ConfigError(child_ptr, "missing required key")
                out[key] = sub["default"]
            else:
                out[key] = _check_type(doc[key], sub, child_ptr)
    return out


def validate_config(doc: dict) -> dict:
    """Validate against the run-config schema; returns the document with
    defaults filled in. Raises ConfigError with a JSON pointer on failure."""
    cfg = _validate_node(doc, SCHEMA, "")
    axes = cfg["analysis"]["consensus_axes"]
    if not isinstance(axes, list) or not all(isinstance(a, str) for a in axes):
        raise ConfigError("/analysis/consensus_axes", "expected a list of axis names")
    return cfg


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("/", f"invalid JSON: {exc}") from exc
    return validate_config(doc)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def build_model(cfg: dict):
    mc = cfg["model"]
    n_inputs = 2 + cfg["task"]["n_context_channels"]
    seed = np.random.SeedSequence([cfg["seed"], 23])
    if mc["kind"] == "rnn":
        model = RnnModel()
        params = rnn_init(mc["H"], n_inputs, mc["g"], seed=seed,
                          alpha=mc["alpha"], activation=mc["activation"])
    else:
        model = GruModel()
        params = gru_init(mc["H"], n_inputs, mc["g"], seed=seed)
    return model, params


def build_readout(cfg: dict, n_outputs: int = 2):
    rng = np.random.default_rng([cfg["seed"], 29])
    H = cfg["model"]["H"]
    W_out = rng.normal(0.0, cfg["model"]["readout_scale"], size=(n_outputs, H))
    b_out = np.zeros(n_outputs)
    return W_out, b_out


def build_task(cfg: dict) -> TaskSpec:
    t = cfg["task"]
    return TaskSpec(kind=t["kind"], T_ctx=t["T_ctx"], T_stim=t["T_stim"],
                    T_mem=t["T_mem"], T_resp=t["T_resp"], noise_std=t["noise_std"],
                    n_context_channels=t["n_context_channels"])


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"], batch_size=t["batch_size"],
        max_iters=t["max_iters"],
        convergence_loss_threshold=t["convergence_loss_threshold"],
        grad_clip_norm=t["grad_clip_norm"], seed=cfg["seed"],
        snapshot_every=t["snapshot_every"], eval_every=t["eval_every"],
        pool_size=t["pool_size"], eval_size=t["eval_size"],
        use_adam=t["use_adam"], stop_on_convergence=t["stop_on_convergence"])
