import json

import pytest

from fissureseg.config import RunConfig, load_run_config, parse_adjacency
from fissureseg.errors import ParameterError
from fissureseg.morphology import DEFAULT_ADJACENCY


def test_defaults():
    cfg = RunConfig.from_dict({})
    assert cfg.train.total_steps == 2000 and cfg.train.lr == 1e-3 and cfg.train.weight_decay == 1e-4
    assert cfg.adjacency == DEFAULT_ADJACENCY


def test_full_document(tmp_path):
    doc = {
        "phantom": {"shape": [16, 16, 16], "noise_sigma": 0.01},
        "train": {"total_steps": 50, "model": "tiny-conv"},
        "adjacency": [[1, 1, 2, "A"], [2, 1, 3]],
        "registration": {"kind": "seeded-conv", "seed": 4},
        "paths": {"data": "d", "out": "o"},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    cfg = load_run_config(path)
    assert cfg.phantom.shape == (16, 16, 16)
    assert cfg.train.registration == {"kind": "seeded-conv", "seed": 4}
    assert cfg.adjacency.names() == ["A", "F2"]
    assert cfg.paths == {"data": "d", "out": "o"}


@pytest.mark.parametrize("doc", [
    {"extra": {}},
    {"train": {"epochs": 3}},
    {"phantom": {"colour": "red"}},
    {"registration": {"kind": "demons", "seed": 1}},
    {"paths": {"tmp": "x"}},
    {"adjacency": [[1, 1]]},
    {"adjacency": [[1, 2, 2]]},
    {"train": {"lr": "fast"}},
    {"train": []},
    [],
])
def test_invalid_documents_rejected(doc):
    with pytest.raises(ParameterError):
        RunConfig.from_dict(doc)


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ParameterError):
        load_run_config(bad)
    with pytest.raises(OSError, match="missing.json"):
        load_run_config(tmp_path / "missing.json")


def test_parse_adjacency_round_trip():
    assert parse_adjacency(DEFAULT_ADJACENCY.to_triples()).to_triples() == DEFAULT_ADJACENCY.to_triples()
