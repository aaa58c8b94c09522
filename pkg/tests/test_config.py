import pytest

from latent_interp.config import RunConfig, dump_config, load_config, parse_config_text


def test_defaults():
    cfg = RunConfig()
    assert (cfg.ddim_steps, cfg.fusion_step, cfg.feature_step, cfg.n_frames) == (50, 30, 14, 32)
    assert (cfg.lora_rank, cfg.lora_lr, cfg.lora_steps) == (16, 5e-4, 80)
    assert cfg.cfg is False and cfg.splat_temperature == 10.0


def test_delta_grid():
    assert RunConfig(n_frames=1).deltas == [0.5]
    d = RunConfig(n_frames=4).deltas
    assert d == pytest.approx([0.2, 0.4, 0.6, 0.8])


@pytest.mark.parametrize(
    "kw",
    [
        dict(feature_step=0),
        dict(feature_step=31),
        dict(fusion_step=60),
        dict(n_frames=0),
        dict(fusion_mode="avg"),
        dict(flow_source="external"),
        dict(attn_step_range=(1,)),
        dict(workers=0),
    ],
)
def test_invalid(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_parse_and_roundtrip(tmp_path):
    text = "# run\nn_frames = 3\nfusion_mode = direct  # ablation\nlora_enabled = off\nprompt = \"a b\"\nattn_layers = x, y\n\n"
    values = parse_config_text(text)
    assert values == {"n_frames": 3, "fusion_mode": "direct", "lora_enabled": False, "prompt": "a b", "attn_layers": ("x", "y")}
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    cfg = load_config(path, n_frames=5, seed=None)
    assert cfg.n_frames == 5 and cfg.fusion_mode == "direct"
    dumped = tmp_path / "d.cfg"
    dumped.write_text(dump_config(RunConfig(n_frames=2, attn_step_range=(3, 9))), encoding="utf-8")
    assert load_config(dumped) == RunConfig(n_frames=2, attn_step_range=(3, 9))


@pytest.mark.parametrize("text", ["bogus = 1", "n_frames 3", "cfg = on", "lora_enabled = maybe", "n_frames = x"])
def test_parse_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)
