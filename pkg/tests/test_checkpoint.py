"""Checkpoint container: bitwise round trips and corruption detection."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from aggnet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from aggnet.errors import DataError
from aggnet.model import AggNetConfig, init_params

from conftest import make_rng


@pytest.fixture
def saved(tmp_path):
    cfg = AggNetConfig(variant="MS", class_count=3, stem_depth=3,
                       module_depths=(2, 2, 2, 2))
    params = init_params(cfg, make_rng(80))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, seed=42, epoch=17, history_len=23)
    return path, cfg, params


def test_round_trip_is_bitwise(saved):
    path, cfg, params = saved
    ck = load_checkpoint(path)
    assert ck.config == cfg
    assert ck.seed == 42 and ck.epoch == 17 and ck.history_len == 23
    assert set(ck.params) == set(params)
    for name in params:
        npt.assert_array_equal(ck.params[name], params[name])


def test_save_is_deterministic(saved, tmp_path):
    path, cfg, params = saved
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, cfg, params, seed=42, epoch=17, history_len=23)
    assert path.read_bytes() == again.read_bytes()


def test_save_rejects_malformed_tables(tmp_path):
    cfg = AggNetConfig(variant="MS", class_count=3, stem_depth=3,
                       module_depths=(2, 2, 2, 2))
    params = init_params(cfg, make_rng(81))
    missing = dict(params)
    del missing["head.b"]
    with pytest.raises(DataError, match="head.b"):
        save_checkpoint(tmp_path / "x.ckpt", cfg, missing, seed=0, epoch=0)
    wrong = dict(params)
    wrong["head.b"] = np.zeros(7)
    with pytest.raises(DataError, match="shape"):
        save_checkpoint(tmp_path / "x.ckpt", cfg, wrong, seed=0, epoch=0)


def test_bad_magic_rejected(saved):
    path, _, _ = saved
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)


def test_truncation_rejected(saved):
    path, _, _ = saved
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_flipped_payload_bit_rejected(saved):
    path, _, _ = saved
    blob = bytearray(path.read_bytes())
    (head_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    blob[len(MAGIC) + 4 + head_len + 100] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="CRC"):
        load_checkpoint(path)


def test_garbled_header_rejected(saved):
    path, _, _ = saved
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC) + 4] = ord("!")   # breaks the JSON opening brace
    path.write_bytes(bytes(blob))
    with pytest.raises(DataError, match="header"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(saved):
    path, _, _ = saved
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(DataError, match="bytes"):
        load_checkpoint(path)
