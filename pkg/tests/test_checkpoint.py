"""Checkpoint byte-format tests."""

import numpy as np
import pytest

from pieplan.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    params = [("a.w", rng.normal(size=(3, 4))), ("a.b", rng.normal(size=4)),
              ("deep.nested.thing", rng.normal(size=(2, 2, 2)))]
    p = tmp_path / "ck.bin"
    save_checkpoint(p, params, config_hash="cafe01")
    loaded, h = load_checkpoint(p)
    assert h == "cafe01"
    assert list(loaded) == [n for n, _ in params]
    for name, arr in params:
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].dtype == np.float64

    p2 = tmp_path / "ck2.bin"
    save_checkpoint(p2, loaded.items(), config_hash=h)
    assert p.read_bytes() == p2.read_bytes()


def test_version_rejected(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, [("x", np.zeros(2))], config_hash="h")
    raw = bytearray(p.read_bytes())
    raw[4] = 99  # bump the little-endian version field
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_truncation_rejected(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, [("x", np.arange(8.0))], config_hash="h")
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"hello world, this is not a checkpoint")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "ck.bin"
    save_checkpoint(p, [("x", np.zeros(2))], config_hash="h")
    p.write_bytes(p.read_bytes() + b"extra")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
