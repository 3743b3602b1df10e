"""JSON/CSV/npz persistence for run artifacts.

Every JSON document carries ``schema_version`` and a ``kind`` tag so that a
loader can refuse files it does not understand.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .controller import ControllerParams
from .dynamics import TimeVaryingLinearModel
from .policy import GlobalPolicy, PolicyNet
from .sim import Trajectory

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    pass


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg_dict: dict) -> str:
    return hashlib.sha256(canonical_json(cfg_dict).encode()).hexdigest()


def save_json(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **to_jsonable(payload)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def load_json(path, kind: str | None = None) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {doc.get('schema_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise SchemaError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def fmt(x) -> str:
    """Shortest round-trip float text, so reruns produce identical bytes."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{path}: row has {len(row)} fields, header has {len(header)}")
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# domain objects
# ---------------------------------------------------------------------------

def controller_to_dict(theta: ControllerParams) -> dict:
    return {"F": theta.F, "e": theta.e, "Sigma": theta.cov, "Sigma_sqrt": theta.sqrt,
            "bound_fe": theta.bound_fe, "max_singular": theta.max_singular}


def controller_from_dict(d: dict) -> ControllerParams:
    return ControllerParams(np.asarray(d["F"], dtype=float), np.asarray(d["e"], dtype=float),
                            np.asarray(d["Sigma_sqrt"], dtype=float),
                            float(d.get("bound_fe", 1e3)), float(d.get("max_singular", 10.0)))


def save_controller(path, theta: ControllerParams, **meta) -> Path:
    return save_json(path, "controller", {**controller_to_dict(theta), "meta": meta})


def load_controller(path) -> ControllerParams:
    return controller_from_dict(load_json(path, "controller"))


_MODEL_FIELDS = ("Ad", "Bd", "cd", "Sd", "Ay", "By", "cy", "Sy")


def save_model(path, model: TimeVaryingLinearModel) -> Path:
    payload = {f: getattr(model, f) for f in _MODEL_FIELDS}
    payload["diagnostics"] = model.diagnostics
    return save_json(path, "dynamics_model", payload)


def load_model(path) -> TimeVaryingLinearModel:
    d = load_json(path, "dynamics_model")
    return TimeVaryingLinearModel(**{f: np.asarray(d[f], dtype=float) for f in _MODEL_FIELDS},
                                  diagnostics=d.get("diagnostics", {}))


def net_to_dict(net: PolicyNet) -> dict:
    return {"layer_sizes": net.sizes, "weights": net.weights, "biases": net.biases,
            "input_mean": net.in_mean, "input_std": net.in_std}


def net_from_dict(d: dict) -> PolicyNet:
    return PolicyNet([np.asarray(W, dtype=float) for W in d["weights"]],
                     [np.asarray(b, dtype=float) for b in d["biases"]],
                     d["input_mean"], d["input_std"])


def save_policy(path, policy: GlobalPolicy, **meta) -> Path:
    return save_json(path, "global_policy",
                     {**net_to_dict(policy.net), "Sigma_L": policy.covs, "meta": meta})


def load_policy(path) -> GlobalPolicy:
    d = load_json(path, "global_policy")
    return GlobalPolicy(net_from_dict(d), np.asarray(d["Sigma_L"], dtype=float))


def save_batch(path, batch: Sequence[Trajectory]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f: np.stack([getattr(t, f) for t in batch])
              for f in ("true_states", "observed_states", "actions", "action_means",
                        "running_costs", "cost_observations")}
    arrays["seed"] = np.array([t.seed for t in batch], dtype=np.int64)
    arrays["schema_version"] = np.array(SCHEMA_VERSION)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_batch(path) -> list[Trajectory]:
    with np.load(path) as z:
        if int(z["schema_version"]) != SCHEMA_VERSION:
            raise SchemaError(f"{path}: unsupported schema version")
        n = len(z["seed"])
        return [Trajectory(z["true_states"][j], z["observed_states"][j], z["actions"][j],
                           z["action_means"][j], z["running_costs"][j],
                           z["cost_observations"][j], int(z["seed"][j])) for j in range(n)]
