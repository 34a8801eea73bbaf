"""Run configuration: one JSON document with optional sections.

Example::

    {
      "phantom": {"shape": [32, 32, 32], "noise_sigma": 0.0},
      "train": {"total_steps": 2000, "model": "direct-logit"},
      "adjacency": [[1, 1, 2, "LOF"], [2, 3, 4, "RHF"], [3, 3, 5, "ROF-upper"], [4, 4, 5, "ROF-lower"]],
      "registration": {"kind": "demons", "iterations": 3, "sigma": 1.0},
      "paths": {"data": "data", "out": "runs/ace_reg"}
    }

Unknown keys anywhere are rejected before any work starts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ParameterError
from .morphology import DEFAULT_ADJACENCY, FissureAdjacency, FissureEntry
from .registration import operator_from_config
from .synthdata import PhantomSpec
from .trainer import TrainConfig

SECTIONS = ("phantom", "train", "adjacency", "registration", "paths")
PATH_KEYS = ("data", "out")


def parse_adjacency(rows) -> FissureAdjacency:
    """Rows are ``[fissure, lobe_a, lobe_b]`` with an optional trailing name."""
    if not isinstance(rows, list):
        raise ParameterError("adjacency must be a list of [fissure, lobe_a, lobe_b(, name)] rows")
    entries = []
    for row in rows:
        if not isinstance(row, (list, tuple)) or len(row) not in (3, 4):
            raise ParameterError(f"bad adjacency row {row!r}")
        name = str(row[3]) if len(row) == 4 else ""
        try:
            entries.append(FissureEntry(int(row[0]), int(row[1]), int(row[2]), name))
        except (TypeError, ValueError) as exc:
            raise ParameterError(f"bad adjacency row {row!r}: {exc}") from exc
    return FissureAdjacency(tuple(entries))


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    adjacency: FissureAdjacency = DEFAULT_ADJACENCY
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ParameterError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        for name in ("phantom", "train", "registration", "paths"):
            if name in doc and not isinstance(doc[name], dict):
                raise ParameterError(f"config section {name!r} must be an object")
        try:
            phantom = PhantomSpec.from_dict(doc.get("phantom", {}))
            train = TrainConfig.from_dict(doc.get("train", {}))
        except TypeError as exc:
            raise ParameterError(f"bad config value: {exc}") from exc
        if "registration" in doc:
            operator_from_config(doc["registration"])
            train = replace(train, registration=dict(doc["registration"]))
        adjacency = parse_adjacency(doc["adjacency"]) if "adjacency" in doc else DEFAULT_ADJACENCY
        paths = dict(doc.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ParameterError(f"unknown path keys: {sorted(bad)}")
        return cls(phantom, train, adjacency, paths)


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(path=None) -> RunConfig:
    return RunConfig() if path is None else RunConfig.from_dict(load_json(path))
