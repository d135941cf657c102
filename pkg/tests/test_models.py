import numpy as np
import pytest

from fewshot_seg.models import IdentityEncoder, level_decoder, load_checkpoint, save_checkpoint, tiny_encoder, weights_hash


def test_encoder_shapes(rng):
    enc = tiny_encoder(seed=0)
    imgs = rng.random((3, 32, 32, 3)).astype(np.float32)
    enc.forward(imgs.transpose(0, 3, 1, 2), train=True)
    feats = enc.encode(imgs)
    assert feats.shape == (3, enc.out_channels, 32 // enc.stride, 32 // enc.stride)
    assert feats.dtype == np.float32


def test_identity_encoder(rng):
    x = rng.random((5, 8, 8))
    out = IdentityEncoder(5).encode(x)
    assert out.shape == (1, 5, 8, 8) and np.allclose(out[0], x)


def test_checkpoint_round_trip(tmp_path, rng):
    enc = tiny_encoder(seed=3)
    decs = [level_decoder(enc.out_channels, 6, (32, 32), seed=l, width=8) for l in range(2)]
    imgs = rng.random((2, 32, 32, 3)).astype(np.float32)
    feats = enc.forward(imgs.transpose(0, 3, 1, 2), train=True)
    for d in decs:
        d.forward(feats, train=True)
    manifest = save_checkpoint(tmp_path, enc, decs, meta={"arm": "x", "config": {"a": 1}})
    enc2, decs2, manifest2 = load_checkpoint(tmp_path)
    assert manifest2 == manifest and manifest["meta"]["arm"] == "x"
    assert weights_hash(enc2) == weights_hash(enc) == manifest["weights_hash"]
    assert np.array_equal(enc.encode(imgs), enc2.encode(imgs))
    assert len(decs2) == 2
    for a, b in zip(decs, decs2):
        for k, v in a.state().items():
            assert np.array_equal(v, b.state()[k])


def test_weights_hash_sensitive():
    a, b = tiny_encoder(seed=0), tiny_encoder(seed=1)
    assert weights_hash(a) != weights_hash(b)
    assert weights_hash(a) == weights_hash(tiny_encoder(seed=0))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nothing")
