import json

import numpy as np
import pytest

import trilstm_model as tm
from biomarker_data import SCHEMA
from checkpoint import FORMAT_VERSION, load_checkpoint, restore_params, save_checkpoint
from errors import CheckpointError
from eval_harness import load_model
from linalg_core import RngStream
from nn_layers import named_params

SMALL = tm.ModelConfig(embed_dim=3, hidden_dim=4, head_hidden=3)


@pytest.fixture
def saved(tmp_path):
    params = tm.init_params(SMALL, RngStream(8))
    path = tmp_path / "ck.json"
    save_checkpoint(path, "tri-lstm", params, {"note": "small"}, SCHEMA, {"split_seed": 3})
    return path, params


def _rewrite(path, change):
    payload = json.loads(path.read_text())
    change(payload)
    path.write_text(json.dumps(payload))


def test_round_trip_is_exact(saved):
    path, params = saved
    ck = load_checkpoint(path, SCHEMA)
    assert ck.model_kind == "tri-lstm"
    assert ck.config == {"note": "small"}
    assert ck.extra == {"split_seed": 3}
    restored = restore_params(tm.init_params(SMALL, RngStream(0)), ck.arrays)
    for name, value in named_params(params).items():
        np.testing.assert_array_equal(named_params(restored)[name], value)


def test_header_fields(saved):
    path, _ = saved
    payload = json.loads(path.read_text())
    assert payload["format_version"] == FORMAT_VERSION
    assert payload["schema_hash"] == SCHEMA.schema_hash()


def test_wrong_version(saved):
    path, _ = saved
    _rewrite(path, lambda d: d.update(format_version=FORMAT_VERSION + 1))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, SCHEMA)


def test_wrong_schema(saved):
    path, _ = saved
    _rewrite(path, lambda d: d.update(schema_hash="0" * 16))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, SCHEMA)


def test_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, SCHEMA)


def test_malformed_entry(saved):
    path, _ = saved
    _rewrite(path, lambda d: d["params"]["W_e1"].pop("shape"))
    with pytest.raises(CheckpointError):
        load_checkpoint(path, SCHEMA)


def test_shape_mismatch(saved):
    path, _ = saved
    arrays = load_checkpoint(path, SCHEMA).arrays
    arrays["W_e1"] = arrays["W_e1"].T
    with pytest.raises(CheckpointError):
        restore_params(tm.init_params(SMALL, RngStream(0)), arrays)


def test_missing_parameter(saved):
    path, _ = saved
    arrays = load_checkpoint(path, SCHEMA).arrays
    del arrays["W_e2"]
    with pytest.raises(CheckpointError) as info:
        restore_params(tm.init_params(SMALL, RngStream(0)), arrays)
    assert "W_e2" in str(info.value)


def test_unknown_model_kind(saved):
    path, _ = saved
    _rewrite(path, lambda d: d.update(model_kind="gru"))
    with pytest.raises(CheckpointError):
        load_model(path)
