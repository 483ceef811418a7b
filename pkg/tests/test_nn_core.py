import struct
import zlib

import hypothesis.strategies as st
import pytest
import torch
from hypothesis import given

from imbssl.errors import CheckpointError, InvalidConfigError
from imbssl.nn_core import (
    BackboneConfig,
    HeadConfig,
    checkpoint_bytes,
    classify,
    encode,
    init_bundle,
    load_checkpoint,
    predict,
    project,
    regress,
    save_checkpoint,
    state_hash,
    with_regression_heads,
)

TINY = BackboneConfig("tiny-conv", 16)


def test_same_seed_bit_identical():
    a = init_bundle(TINY, HeadConfig(), seed=3)
    b = init_bundle(TINY, HeadConfig(), seed=3)
    assert state_hash(a.net) == state_hash(b.net)
    assert state_hash(init_bundle(TINY, HeadConfig(), seed=4).net) != state_hash(a.net)


def test_init_does_not_disturb_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    init_bundle(TINY, HeadConfig(), seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_tiny_projector_input_dim(tiny_bundle):
    assert tiny_bundle.net.projector[0].in_features == 16


@pytest.mark.parametrize("family,d", [("tiny-conv", 16), ("resnet-cifar-18", 64), ("resnet19", 32)])
def test_forward_shapes(family, d):
    b = init_bundle(BackboneConfig(family, d), HeadConfig(num_regression_heads=3), seed=0).eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        f = encode(b, x)
        z = project(b, f)
        assert f.shape == z.shape == predict(b, z).shape == (2, d)
        assert regress(b, "base", z).shape == regress(b, 2, z).shape == (2, d)
        assert classify(b, f).shape == (2, 10)


def test_default_head_sizes():
    b = init_bundle(BackboneConfig("resnet-cifar-18", 512), HeadConfig(num_regression_heads=1), seed=0)
    assert b.net.predictor[0].out_features == 128
    assert b.net.projector[0].out_features == 512
    assert b.net.heads[0][0].out_features == 512
    assert b.net.backbone.stem[0].kernel_size == (3, 3)


def test_encode_single_and_duplicated_rows(tiny_bundle):
    tiny_bundle.eval()
    x = torch.randn(1, 3, 32, 32)
    with torch.no_grad():
        assert encode(tiny_bundle, x).shape == (1, 16)
        f = encode(tiny_bundle, torch.cat([x, x, torch.randn(1, 3, 32, 32)]))
    assert torch.equal(f[0], f[1])


def test_zero_input_is_finite(tiny_bundle):
    with torch.no_grad():
        assert torch.isfinite(encode(tiny_bundle.eval(), torch.zeros(2, 3, 32, 32))).all()


@given(st.integers(2, 6), st.integers(0, 5))
def test_eval_mode_batch_independence(n, row):
    row = row % n
    b = init_bundle(TINY, HeadConfig(), seed=1).eval()
    x = torch.randn(n, 3, 16, 16, generator=torch.Generator().manual_seed(n))
    with torch.no_grad():
        full = project(b, encode(b, x))[row]
        alone = project(b, encode(b, x[row:row + 1]))[0]
    torch.testing.assert_close(full, alone, rtol=1e-5, atol=1e-6)


def test_bad_shapes_and_heads(tiny_bundle):
    with pytest.raises(ValueError):
        encode(tiny_bundle, torch.zeros(2, 1, 32, 32))
    with pytest.raises(ValueError):
        project(tiny_bundle, torch.zeros(2, 15))
    b = with_regression_heads(tiny_bundle, 3, seed=0)
    z = torch.zeros(2, 16)
    for bad in (0, 3, -1, "expert", True):
        with pytest.raises(IndexError):
            regress(b, bad, z)
    with pytest.raises(IndexError):
        regress(tiny_bundle, "base", z)


@pytest.mark.parametrize("cfg", [
    dict(family="resnet50"), dict(family="tiny-conv", output_dim=0), dict(family="resnet-cifar-18", output_dim=20),
])
def test_invalid_backbone_config(cfg):
    with pytest.raises(InvalidConfigError):
        BackboneConfig(**cfg)


def test_with_regression_heads_leaves_source_untouched(tiny_bundle):
    before = state_hash(tiny_bundle.net)
    student = with_regression_heads(tiny_bundle, 4, seed=2)
    assert student.num_heads == 4 and tiny_bundle.num_heads == 0
    assert state_hash(tiny_bundle.net) == before
    assert state_hash(student.net.backbone) == state_hash(tiny_bundle.net.backbone)


# --- checkpoints -----------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    b = with_regression_heads(init_bundle(TINY, HeadConfig(), seed=5), 2, seed=1)
    b.epoch, b.step, b.extra = 3, 17, {"note": "x"}
    path = save_checkpoint(b, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert state_hash(loaded.net) == state_hash(b.net)
    assert (loaded.epoch, loaded.step, loaded.extra) == (3, 17, {"note": "x"})
    assert loaded.config_dict() == b.config_dict()
    assert checkpoint_bytes(loaded) == path.read_bytes()


def test_truncated_checkpoint(tmp_path, tiny_bundle):
    path = save_checkpoint(tiny_bundle, tmp_path / "m.ckpt")
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupt_and_foreign_checkpoints(tmp_path, tiny_bundle):
    data = bytearray(checkpoint_bytes(tiny_bundle))
    data[len(data) // 2] ^= 0xFF
    (tmp_path / "flip.ckpt").write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_version_mismatch(tmp_path, tiny_bundle):
    body = bytearray(checkpoint_bytes(tiny_bundle)[:-4])
    body[8:12] = struct.pack("<I", 99)
    (tmp_path / "v.ckpt").write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
