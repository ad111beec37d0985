"""Checkpoint round-trip and tamper detection."""

import json

import numpy as np
import pytest

from slimexit.checkpoint import (BLOB_NAME, MANIFEST_NAME, load_model,
                                 read_manifest, save_model, stable_hash)
from slimexit.model import ModelConfig, forward_all, init_model

CFG = ModelConfig(layers=2, hidden=4, num_heads=2, head_size=2, ffn=6,
                  vocab_size=12, max_positions=8, num_type_ids=1,
                  num_classes=2, seq_len=4)


def _assert_same_weights(a, b):
    pa, pb = a.named_parameters(), b.named_parameters()
    assert [n for n, _ in pa] == [n for n, _ in pb]
    for (n, ta), (_, tb) in zip(pa, pb):
        np.testing.assert_array_equal(ta.value, tb.value, err_msg=n)


def test_round_trip_bit_exact(tmp_path):
    m = init_model(CFG, seed=11)
    save_model(m, tmp_path / "ck")
    back = load_model(tmp_path / "ck")
    _assert_same_weights(m, back)
    assert back.config == CFG
    assert back.exit_layers() == m.exit_layers()
    ids = np.array([[1, 5, 7]])
    mask = np.ones_like(ids)
    za = forward_all(m, ids, mask).exit_logits[2].value
    zb = forward_all(back, ids, mask).exit_logits[2].value
    np.testing.assert_array_equal(za, zb)


def test_round_trip_factorized_and_pruned(tmp_path):
    cfg = ModelConfig(**{**CFG.to_dict(), "embed_rank": 3})
    m = init_model(cfg, seed=2, exit_layers=(2,))
    m.layers[0].heads.pop()  # uneven widths must survive the trip
    save_model(m, tmp_path / "ck")
    back = load_model(tmp_path / "ck")
    assert back.is_factorized
    assert back.layer_widths() == [(1, 6), (2, 6)]
    assert back.exit_layers() == [2]
    _assert_same_weights(m, back)


def test_save_is_deterministic(tmp_path):
    m = init_model(CFG, seed=5)
    save_model(m, tmp_path / "a")
    save_model(m, tmp_path / "b")
    assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == \
        (tmp_path / "b" / MANIFEST_NAME).read_bytes()
    assert (tmp_path / "a" / BLOB_NAME).read_bytes() == \
        (tmp_path / "b" / BLOB_NAME).read_bytes()


def test_truncated_blob_rejected(tmp_path):
    save_model(init_model(CFG, seed=0), tmp_path / "ck")
    blob = (tmp_path / "ck" / BLOB_NAME).read_bytes()
    (tmp_path / "ck" / BLOB_NAME).write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        load_model(tmp_path / "ck")


def test_manifest_tamper_rejected(tmp_path):
    save_model(init_model(CFG, seed=0), tmp_path / "ck")
    path = tmp_path / "ck" / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    manifest["tensors"] = manifest["tensors"][:-1]
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        load_model(tmp_path / "ck")
    manifest["format"] = "something-else"
    path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "ck")


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "nope")


def test_extra_manifest_entries(tmp_path):
    m = init_model(CFG, seed=0)
    save_model(m, tmp_path / "ck", extra={"stage": "teacher",
                                          "pipeline_hash": "abc"})
    manifest = read_manifest(tmp_path / "ck")
    assert manifest["stage"] == "teacher"
    assert manifest["pipeline_hash"] == "abc"
    with pytest.raises(ValueError):
        save_model(m, tmp_path / "ck2", extra={"config": {}})


def test_stable_hash_behaves():
    a = {"x": 1, "y": [1, 2]}
    assert stable_hash(a) == stable_hash({"y": [1, 2], "x": 1})
    assert stable_hash(a) != stable_hash({"x": 1, "y": [2, 1]})
    assert len(stable_hash(a)) == 64
