"""JSON artifacts: poison plans, triggers and line-delimited metric records."""

import json
from pathlib import Path

import numpy as np

from .threat import PoisonPlan


def save_plan(plan: PoisonPlan, path, variable_names=None) -> None:
    body = {"timestamps": list(plan.timestamps), "target_variables": list(plan.target_variables)}
    if variable_names is not None:
        body["target_names"] = [variable_names[v] for v in plan.target_variables]
    Path(path).write_text(json.dumps(body, indent=1) + "\n")


def load_plan(path) -> PoisonPlan:
    body = json.loads(Path(path).read_text())
    return PoisonPlan(body["timestamps"], body["target_variables"])


def save_triggers(triggers, path) -> None:
    """(|T_atk|, t_tgr, |S|) trigger stack as nested JSON lists."""
    arr = np.asarray(triggers, dtype=np.float64)
    Path(path).write_text(json.dumps({"shape": list(arr.shape), "values": arr.tolist()}) + "\n")


def load_triggers(path) -> np.ndarray:
    body = json.loads(Path(path).read_text())
    return np.asarray(body["values"], dtype=np.float64).reshape(body["shape"])


def write_records(records, path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_records(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=float) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
