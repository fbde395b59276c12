"""Binary checkpoint format: round trips, architecture checks, corruption."""

import os

import numpy as np
import pytest

from contextvit.checkpoint import load_checkpoint, restore_into, save_checkpoint
from contextvit.context import ContextKind, ContextViT
from contextvit.train import AdamWState
from contextvit.vit import ViTConfig


def _save_and_load(tmp_path, model, name="m.cvck", **kw):
    path = str(tmp_path / name)
    save_checkpoint(path, model.parameters(), **kw)
    return path, load_checkpoint(path)


def test_round_trip_preserves_every_array(tmp_path, toy_model):
    _, ckpt = _save_and_load(tmp_path, toy_model, config_hash="abc123")
    assert ckpt.config_hash == "abc123"
    assert set(ckpt.params) == set(toy_model.parameters())
    for name, p in toy_model.parameters().items():
        assert np.array_equal(ckpt.params[name], p.data), name
        assert ckpt.params[name].dtype == np.float64


def test_save_load_save_is_byte_identical(tmp_path, toy_model):
    p1 = str(tmp_path / "a.cvck")
    p2 = str(tmp_path / "b.cvck")
    save_checkpoint(p1, toy_model.parameters(), config_hash="h")
    ckpt = load_checkpoint(p1)
    save_checkpoint(p2, ckpt.params, config_hash=ckpt.config_hash)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_restore_into_round_trips_weights(tmp_path, toy_model, toy_config):
    path, ckpt = _save_and_load(tmp_path, toy_model)
    other = ContextViT.create(toy_config, toy_model.kind, seed=99)
    assert not np.array_equal(
        other.parameters()["patch_projection"].data, toy_model.parameters()["patch_projection"].data
    )
    restore_into(other.parameters(), ckpt)
    for name, p in toy_model.parameters().items():
        assert np.array_equal(other.parameters()[name].data, p.data), name


def test_restore_into_different_depth_names_first_mismatch(tmp_path, toy_model, toy_config):
    path, ckpt = _save_and_load(tmp_path, toy_model)
    import dataclasses

    deeper = ContextViT.create(dataclasses.replace(toy_config, depth=3), toy_model.kind, seed=0)
    with pytest.raises(ValueError, match="missing parameter"):
        restore_into(deeper.parameters(), ckpt)


def test_restore_into_extra_entry_rejected(tmp_path, toy_model):
    path, ckpt = _save_and_load(tmp_path, toy_model)
    ckpt.params["bogus.extra"] = np.zeros(3)
    with pytest.raises(ValueError, match="unexpected parameter 'bogus.extra'"):
        restore_into(toy_model.parameters(), ckpt)


def test_restore_into_shape_mismatch_names_parameter(tmp_path, toy_model):
    path, ckpt = _save_and_load(tmp_path, toy_model)
    ckpt.params["cls_token"] = np.zeros((1, 999))
    with pytest.raises(ValueError, match="'cls_token' shape mismatch"):
        restore_into(toy_model.parameters(), ckpt)


def test_optimizer_state_round_trip(tmp_path, toy_model):
    opt = AdamWState.init(toy_model.parameters())
    opt.step = 17
    for name in opt.m:
        opt.m[name] = opt.m[name] + 0.25
        opt.v[name] = opt.v[name] + 0.5
    path = str(tmp_path / "o.cvck")
    save_checkpoint(path, toy_model.parameters(), optimizer=opt)
    ckpt = load_checkpoint(path)
    assert ckpt.optimizer_step == 17
    assert set(ckpt.optimizer_m) == set(opt.m)
    for name in opt.m:
        assert np.array_equal(ckpt.optimizer_m[name], opt.m[name])
        assert np.array_equal(ckpt.optimizer_v[name], opt.v[name])


def test_no_optimizer_loads_as_none(tmp_path, toy_model):
    _, ckpt = _save_and_load(tmp_path, toy_model)
    assert ckpt.optimizer_step is None
    assert ckpt.optimizer_m == {} and ckpt.optimizer_v == {}


def test_ema_state_round_trip(tmp_path, toy_model):
    ema = {0: np.full(16, 0.5), 3: np.arange(16.0)}
    path = str(tmp_path / "e.cvck")
    save_checkpoint(path, toy_model.parameters(), ema_state=ema)
    loaded = load_checkpoint(path).ema_state()
    assert set(loaded) == {0, 3}
    for gid, vec in ema.items():
        assert np.array_equal(loaded[gid], vec)


def test_default_model_checkpoint_under_five_megabytes(tmp_path):
    from contextvit.config import RunConfig

    cfg = RunConfig()
    model = ContextViT.create(cfg.vit_config(), cfg.kind(), seed=0)
    path = str(tmp_path / "default.cvck")
    save_checkpoint(path, model.parameters())
    assert os.path.getsize(path) < 5 * 1024 * 1024


def test_missing_file_names_path(tmp_path):
    missing = str(tmp_path / "ghost.cvck")
    with pytest.raises(FileNotFoundError, match="ghost.cvck"):
        load_checkpoint(missing)


def test_bad_magic_rejected(tmp_path, toy_model):
    path, _ = _save_and_load(tmp_path, toy_model)
    blob = bytearray(open(path, "rb").read())
    blob[:4] = b"XXXX"
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(path)


def test_unsupported_version_rejected(tmp_path, toy_model):
    path, _ = _save_and_load(tmp_path, toy_model)
    blob = bytearray(open(path, "rb").read())
    blob[4:8] = (99).to_bytes(4, "little")
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ValueError, match="version 99"):
        load_checkpoint(path)


def test_truncation_rejected(tmp_path, toy_model):
    path, _ = _save_and_load(tmp_path, toy_model)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[: len(blob) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_trailing_garbage_rejected(tmp_path, toy_model):
    path, _ = _save_and_load(tmp_path, toy_model)
    with open(path, "ab") as f:
        f.write(b"\x00junk")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(path)
