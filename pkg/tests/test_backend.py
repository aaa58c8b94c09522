import numpy as np
import pytest
import torch

from latent_interp.backend import BackendError, TapRequest, ToyBackend, load_backend, make_toy_backend


def _img(seed=0, size=32):
    return np.random.default_rng(seed).uniform(0, 1, (size, size, 3)).astype(np.float32)


def test_geometry_and_ids(toy):
    assert toy.latent_shape(64, 48) == (4, 8, 6)
    assert toy.block_ids() == ("up_block_1", "up_block_2")
    assert toy.attention_layer_ids() == ("up_block_1.attn_0", "up_block_2.attn_0")
    assert len(toy.lora_targets()) == 8 and toy.trainable


def test_encode_decode(toy):
    img = np.zeros((32, 32, 3), np.float32)
    img[:, 16:] = 1.0
    z = toy.encode_image(img)
    assert z.shape == (4, 4, 4) and z.dtype == np.float32
    out = toy.decode_latent(z)
    assert out.shape == img.shape and 0 <= out.min() and out.max() <= 1
    flat = np.full((32, 32, 3), 0.4, np.float32)
    np.testing.assert_allclose(toy.decode_latent(toy.encode_image(flat)), flat, atol=1e-5)


@pytest.mark.parametrize("bad", [np.zeros((30, 32, 3)), np.zeros((32, 32)), np.full((32, 32, 3), 1.5)])
def test_encode_rejects(toy, bad):
    with pytest.raises(ValueError):
        toy.encode_image(bad)


def test_predict_noise_contract(toy):
    z = toy.encode_image(_img())
    out = toy.predict_noise(z, 500, tap_request=TapRequest(blocks=("up_block_1", "up_block_2"), layers=toy.attention_layer_ids()))
    assert out.eps.shape == z.shape and out.eps.dtype == np.float32
    assert out.features["up_block_1"].values.shape == (32, 2, 2)
    assert out.features["up_block_2"].values.shape == (32, 4, 4)
    assert [t.keys.shape for t in out.taps] == [(4, 32), (16, 32)]
    np.testing.assert_array_equal(out.eps, toy.predict_noise(z, 500).eps)
    with pytest.raises(KeyError):
        toy.predict_noise(z, 500, tap_request=TapRequest(blocks=("nope",)))
    with pytest.raises(KeyError):
        toy.predict_noise(z, 500, kv_override={"nope": (np.zeros((1, 32)), np.zeros((1, 32)))})
    with pytest.raises(ValueError):
        toy.predict_noise(z[:3], 500)
    with pytest.raises(ValueError):
        toy.predict_noise(z, 1000)


def test_self_override_is_identity(toy):
    z = toy.encode_image(_img(1))
    layer = "up_block_2.attn_0"
    tap = toy.predict_noise(z, 300, tap_request=TapRequest(layers=(layer,))).taps[0]
    again = toy.predict_noise(z, 300, kv_override={layer: (tap.keys, tap.values)}).eps
    np.testing.assert_allclose(again, toy.predict_noise(z, 300).eps, atol=1e-6)


def test_prompt_conditioning(toy):
    z = toy.encode_image(_img())
    a = toy.predict_noise(z, 100, toy.encode_prompt("a cat")).eps
    b = toy.predict_noise(z, 100, toy.encode_prompt("a dog")).eps
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(toy.encode_prompt("x").embedding, toy.encode_prompt("x").embedding)


def test_seeded_construction_is_isolated():
    torch.manual_seed(99)
    before = torch.rand(1)
    a = make_toy_backend(3)
    torch.manual_seed(99)
    assert torch.rand(1) == before  # global RNG untouched
    b = make_toy_backend(3)
    for x, y in zip(a.module.state_dict().values(), b.module.state_dict().values()):
        assert torch.equal(x, y)
    assert a.identifier == "toy:seed=3,c=4,d=32"


def test_save_load_roundtrip(tmp_path, toy):
    path = tmp_path / "toy.bin"
    toy.save(path)
    assert path.read_bytes()[:8] == b"DMTOYB01"
    back = load_backend(f"toy:{path}")
    z = toy.encode_image(_img())
    np.testing.assert_array_equal(back.predict_noise(z, 10).eps, toy.predict_noise(z, 10).eps)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(BackendError):
        ToyBackend.load(path)
    (tmp_path / "junk.bin").write_bytes(b"nothing")
    with pytest.raises(BackendError):
        ToyBackend.load(tmp_path / "junk.bin")


def test_unknown_backend_spec():
    with pytest.raises(BackendError):
        load_backend("gan")
