"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (lines are repeated in the
terminal summary) or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import psnr, sharp_pair  # noqa: E402
from oracles import all_pairs_cosine_flow, direct_dft_hf_energy, softmax_splat_ref, wta_splat_ref  # noqa: E402

from latent_interp import _kernels  # noqa: E402
from latent_interp.attention import concat_replace_attention, denoise_with_replacement, record_bank  # noqa: E402
from latent_interp.backend import AttentionTap, make_toy_backend  # noqa: E402
from latent_interp.cli import main as cli_main  # noqa: E402
from latent_interp.config import RunConfig  # noqa: E402
from latent_interp.flow import Flow, estimate_flow, save_flow  # noqa: E402
from latent_interp.fusion import FusionInputs, direct_fuse, fuse_low_level_wta, two_level_fuse  # noqa: E402
from latent_interp.io import save_image  # noqa: E402
from latent_interp.lora import apply_lora, fit_pair_lora, init_lora  # noqa: E402
from latent_interp.metrics import hf_energy, warping_error, zero_flow  # noqa: E402
from latent_interp.pipeline import reconstruct, run_interpolation  # noqa: E402
from latent_interp.sampling import ddim_invert, ddim_sample  # noqa: E402
from latent_interp.scheduler import ddim_invert_step, ddim_step, make_schedule, predict_clean, recompose  # noqa: E402
from latent_interp.warp import SplatMetric, softmax_splat, wta_splat  # noqa: E402

RESULTS: list[str] = []

_TOY = None


def toy():
    global _TOY
    if _TOY is None:
        _TOY = make_toy_backend(seed=0)
    return _TOY


def _gate(number: int, title: str, budget_s: float, body) -> None:
    start = time.perf_counter()
    ok, detail = False, ""
    try:
        detail = body()
        ok = True
    except AssertionError as exc:
        detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
    elapsed = time.perf_counter() - start
    if ok and elapsed >= budget_s:
        ok, detail = False, f"{detail}; over the {budget_s:.0f} s budget"
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number} {title}: {detail} ({elapsed:.1f} s / {budget_s:.0f} s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------
def _splat_oracle():
    g = np.random.default_rng(2024)
    worst_soft = worst_wta = 0.0
    for i in range(1000):
        c, h, w = int(g.integers(1, 4)), int(g.integers(1, 17)), int(g.integers(1, 17))
        z = g.standard_normal((c, h, w))
        if i % 4 == 0:  # integer flows with flat metric: exact collisions and ties
            dx = np.rint(g.uniform(-(w - 1), w - 1, (h, w)) * 0.5)
            dy = np.rint(g.uniform(-(h - 1), h - 1, (h, w)) * 0.5)
            m = np.zeros((h, w))
        else:
            dx = g.uniform(-(w - 1), w - 1, (h, w)) * g.uniform(0, 1)
            dy = g.uniform(-(h - 1), h - 1, (h, w)) * g.uniform(0, 1)
            m = g.uniform(-4, 4, (h, w))
        flow, metric = Flow(dx, dy), SplatMetric(m)
        ref, _ = softmax_splat_ref(z, dx, dy, m)
        worst_soft = max(worst_soft, float(np.abs(softmax_splat(z, flow, metric).values - ref).max()))
        ref, _ = wta_splat_ref(z, dx, dy, m)
        worst_wta = max(worst_wta, float(np.abs(wta_splat(z, flow, metric).values - ref).max()))
    assert worst_soft <= 1e-6 and worst_wta <= 1e-6, f"max error softmax {worst_soft:.2e}, wta {worst_wta:.2e}"
    return f"1000 instances, max error softmax {worst_soft:.1e}, wta {worst_wta:.1e} ({_kernels.IMPLEMENTATION} kernels)"


def test_ac1_splatting_oracle():
    _gate(1, "splatting oracle", 30, _splat_oracle)


# -- 2 -------------------------------------------------------------------
def _flow_recovery():
    g = np.random.default_rng(7)
    interior = exact = oracle_mismatch = 0
    for _ in range(40):
        h, w, d = int(g.integers(6, 17)), int(g.integers(6, 17)), 16
        sx, sy = (int(v) for v in g.integers(-4, 5, 2))
        dst = g.standard_normal((d, h, w))
        src = g.standard_normal((d, h, w))  # border pixels keep fresh descriptors
        ys, xs = np.mgrid[0:h, 0:w]
        inside = (xs + sx >= 0) & (xs + sx < w) & (ys + sy >= 0) & (ys + sy < h)
        src[:, inside] = dst[:, (ys + sy)[inside], (xs + sx)[inside]]
        f = estimate_flow(src, dst)
        interior += int(inside.sum())
        exact += int(((f.dx == sx) & (f.dy == sy) & inside).sum())
        odx, ody = all_pairs_cosine_flow(src, dst)
        oracle_mismatch += int(((f.dx != odx) | (f.dy != ody)).sum())
    assert exact == interior, f"exact shift at {exact}/{interior} interior pixels"
    assert oracle_mismatch == 0, f"{oracle_mismatch} pixels disagree with the all-pairs oracle"
    return f"40 maps, exact shift at {exact}/{interior} interior pixels, 0 oracle mismatches"


def test_ac2_flow_recovery():
    _gate(2, "flow recovery", 60, _flow_recovery)


# -- 3 -------------------------------------------------------------------
def _ddim_algebra():
    sched = make_schedule()
    g = np.random.default_rng(3)
    worst_clean = worst_step = 0.0
    for k in range(0, sched.ddim_steps + 1):
        z, e = g.standard_normal((2, 4, 8, 8))
        t = sched.timestep_at(k)
        worst_clean = max(worst_clean, float(np.abs(recompose(predict_clean(z, e, t, sched), e, t, sched) - z).max()))
        if k:
            tp = sched.timestep_at(k - 1)
            worst_step = max(worst_step, float(np.abs(ddim_step(ddim_invert_step(z, e, tp, t, sched), e, t, tp, sched) - z).max()))
    assert worst_clean <= 1e-6 and worst_step <= 1e-6, f"round-trip errors {worst_clean:.1e}, {worst_step:.1e}"
    b = toy()
    z0 = g.standard_normal((4, 8, 8)).astype(np.float32)
    out = ddim_sample(ddim_invert(z0, b, sched, 50).final, b, sched, 50).latent
    rel = float(np.linalg.norm(out - z0) / np.linalg.norm(z0))
    assert rel < 5e-2, f"50-step reconstruction relative L2 {rel:.3e}"
    return f"round trips {worst_clean:.1e} / {worst_step:.1e}, 50-step toy reconstruction rel L2 {rel:.2e}"


def test_ac3_ddim_algebra():
    _gate(3, "DDIM algebra", 60, _ddim_algebra)


# -- 4 -------------------------------------------------------------------
def _fusion_endpoints():
    sched = make_schedule()
    g = np.random.default_rng(4)
    worst = 0.0
    impure = 0
    for _ in range(100):
        h, w = int(g.integers(2, 13)), int(g.integers(2, 13))
        z0, z1, e0, e1 = g.standard_normal((4, 4, h, w))
        f01 = Flow(g.uniform(-(w - 1), w - 1, (h, w)) * 0.5, g.uniform(-(h - 1), h - 1, (h, w)) * 0.5)
        f10 = Flow(g.uniform(-(w - 1), w - 1, (h, w)) * 0.5, g.uniform(-(h - 1), h - 1, (h, w)) * 0.5)
        inp = FusionInputs(z0, z1, e0, e1, f01, f10, sched, 30)
        for delta, ref in ((0.0, z0), (1.0, z1)):
            worst = max(worst, float(np.abs(two_level_fuse(inp, delta) - ref).max()))
            worst = max(worst, float(np.abs(direct_fuse(inp, delta) - ref).max()))
        pool = np.concatenate([e0.ravel(), e1.ravel()])
        impure += int((~np.isin(fuse_low_level_wta(inp, float(g.uniform(0, 1))), pool)).sum())
    assert worst <= 1e-6, f"endpoint error {worst:.2e}"
    assert impure == 0, f"{impure} WTA noise values not drawn from the sources"
    return f"100 instances, endpoint error {worst:.1e}, WTA purity exact"


def test_ac4_fusion_endpoints():
    _gate(4, "fusion endpoints", 30, _fusion_endpoints)


# -- 5 -------------------------------------------------------------------
def _hf_retention():
    b = toy()
    cfg = RunConfig(n_frames=1)  # delta = 0.5, every other setting at its default
    two, direct = [], []
    for seed in range(10):
        a, c = sharp_pair(seed)
        two.append(hf_energy(run_interpolation(a, c, cfg, b).sequence.middle))
        direct.append(hf_energy(run_interpolation(a, c, cfg.replace(fusion_mode="direct"), b).sequence.middle))
    m2, md = float(np.mean(two)), float(np.mean(direct))
    wins = sum(x > y for x, y in zip(two, direct))
    assert m2 > md, f"mean hf_energy two-level {m2:.4f} <= direct {md:.4f}"
    return f"10 pairs, mean hf_energy two-level {m2:.4f} > direct {md:.4f} (per-pair wins {wins}/10)"


def test_ac5_high_frequency_retention():
    _gate(5, "high-frequency retention", 300, _hf_retention)


# -- 6 -------------------------------------------------------------------
def _attention_identities():
    g = np.random.default_rng(6)
    worst_dup = worst_row = 0.0
    perm_exact = True
    for _ in range(50):
        n0, n1, d = int(g.integers(1, 20)), int(g.integers(1, 20)), int(g.integers(1, 16))
        a = AttentionTap("l", None, g.standard_normal((n0, d)), g.standard_normal((n0, d)))
        b = AttentionTap("l", None, g.standard_normal((n1, d)), g.standard_normal((n1, d)))
        q = g.standard_normal((int(g.integers(1, 20)), d)) * 3
        s = q @ a.keys.T / np.sqrt(d)
        p = np.exp(s - s.max(axis=1, keepdims=True))
        single = (p / p.sum(axis=1, keepdims=True)) @ a.values
        worst_dup = max(worst_dup, float(np.abs(concat_replace_attention(q, (a, a)) - single).max()))
        out, wts = concat_replace_attention(q, (a, b), return_weights=True)
        worst_row = max(worst_row, float(np.abs(wts.sum(axis=1) - 1).max()))
        perm_exact &= bool(np.array_equal(out, concat_replace_attention(q, (b, a))))
    assert worst_dup <= 1e-6 and worst_row <= 1e-6 and perm_exact, f"dup {worst_dup:.1e}, rows {worst_row:.1e}, perm {perm_exact}"

    bk = toy()
    sched = make_schedule()
    img, _ = sharp_pair(0)
    z_T = ddim_invert(bk.encode_image(img), bk, sched, 30).final
    bank = record_bank(z_T, z_T, sched, bk, fusion_step=30)
    plain = bk.decode_latent(ddim_sample(z_T, bk, sched, 30).latent)
    replay = bk.decode_latent(denoise_with_replacement(z_T, bank, sched, bk, fusion_step=30))
    p = psnr(replay, plain)
    assert p > 30, f"self-bank replay PSNR {p:.1f} dB"
    return f"duplication {worst_dup:.1e}, row sums {worst_row:.1e}, permutation exact, self-replay PSNR {p:.1f} dB"


def test_ac6_attention_identities():
    _gate(6, "attention identities", 120, _attention_identities)


# -- 7 -------------------------------------------------------------------
def _lora_contracts():
    b = toy()
    img, other = sharp_pair(0)
    z0, z1 = b.encode_image(img), b.encode_image(other)
    noop = apply_lora(b, init_lora(b, rank=16, seed=0))
    for t in (0, 250, 999):
        assert np.array_equal(noop.predict_noise(z0, t).eps, b.predict_noise(z0, t).eps), "zero-init adapter changed eps"
    decreased = raw_decreased = 0
    max_rank = 0
    for seed in range(10):
        a, c = sharp_pair(100 + seed)
        params = fit_pair_lora(b, b.encode_image(a), b.encode_image(c), rank=16, lr=5e-4, steps=80, seed=seed)
        for name in params.factors:
            s = np.linalg.svd(params.delta(name), compute_uv=False)
            max_rank = max(max_rank, int((s > 1e-6 * s[0]).sum()) if s[0] > 0 else 0)
        decreased += params.final_loss < params.initial_loss
        hist = params.loss_history
        raw_decreased += np.mean(hist[-10:]) < np.mean(hist[:10])
    assert max_rank <= 16, f"adapter update rank {max_rank} exceeds 16"
    assert decreased >= 9, f"probe loss decreased on {decreased}/10 seeds"
    return (
        f"no-op bit-exact, max update rank {max_rank} <= 16, probe loss decreased on {decreased}/10 seeds"
        f" (raw first/last-10 window: {raw_decreased}/10)"
    )


def test_ac7_lora_contracts():
    _gate(7, "LoRA contracts", 300, _lora_contracts)


# -- 8 -------------------------------------------------------------------
def _metrics():
    g = np.random.default_rng(8)
    frame = g.uniform(0, 1, (16, 16, 3))
    we = warping_error([frame] * 5, zero_flow)
    assert we == 0.0, f"static warping error {we}"
    const = hf_energy(np.full((16, 16, 3), 0.3))
    assert abs(const) <= 1e-12, f"constant image hf_energy {const}"
    worst_dft = worst_shift = 0.0
    for _ in range(5):
        img = g.uniform(0, 1, (8, 8, 3))
        worst_dft = max(worst_dft, abs(hf_energy(img) - direct_dft_hf_energy(img)))
        big = g.uniform(0, 1, (16, 12, 3))
        shifted = np.roll(big, tuple(int(v) for v in g.integers(-8, 8, 2)), axis=(0, 1))
        worst_shift = max(worst_shift, abs(hf_energy(shifted) - hf_energy(big)))
    assert worst_dft <= 1e-6 and worst_shift <= 1e-6, f"DFT {worst_dft:.1e}, shift {worst_shift:.1e}"
    return f"static WE 0, constant hf 0, DFT oracle error {worst_dft:.1e}, shift invariance {worst_shift:.1e}"


def test_ac8_metrics():
    _gate(8, "metrics", 30, _metrics)


# -- 9 -------------------------------------------------------------------
def _degenerate_run():
    b = toy()
    img, _ = sharp_pair(9)
    cfg = RunConfig(seed=3)
    ref = reconstruct(img, cfg, b)
    run = run_interpolation(img, img, cfg, b)
    n = cfg.n_frames
    assert len(run.sequence) == n + 2, f"{len(run.sequence)} frames for n={n}"
    worst = min(psnr(f, ref) for f in run.sequence.frames[1:-1])
    assert worst > 30, f"lowest intermediate PSNR {worst:.1f} dB"
    again = run_interpolation(img, img, cfg, make_toy_backend(seed=0))
    assert run.manifest(cfg)["hashes"] == again.manifest(cfg)["hashes"], "manifest hashes differ across identical runs"
    return f"{n + 2} frames, lowest PSNR vs reconstruction {worst:.1f} dB, hashes reproducible"


def test_ac9_degenerate_run():
    _gate(9, "end-to-end degenerate run", 300, _degenerate_run)


# -- 10 ------------------------------------------------------------------
def _cli_conformance(tmp: Path):
    a, c = sharp_pair(10, shift=16)
    save_image(a, tmp / "a.png")
    save_image(c, tmp / "b.png")
    # alternative flow: the known global translation, at image resolution
    save_flow(Flow(np.full((64, 64), 16.0), np.zeros((64, 64))), tmp / "f01.bin")
    save_flow(Flow(np.full((64, 64), -16.0), np.zeros((64, 64))), tmp / "f10.bin")
    base = ["interpolate", "--img0", str(tmp / "a.png"), "--img1", str(tmp / "b.png"), "--backend", "toy", "--frames", "3"]
    arms = {
        "full": ([], dict(fusion_mode="two_level", attn_replace=True, lora_enabled=True, flow_source="diffusion")),
        "w/o two-level fusion": (["--fusion", "direct"], dict(fusion_mode="direct")),
        "w/o replace attention": (["--no-attn-replace"], dict(attn_replace=False)),
        "w/o lora": (["--no-lora"], dict(lora_enabled=False)),
        "alternative flow": (["--flow0to1", str(tmp / "f01.bin"), "--flow1to0", str(tmp / "f10.bin")], dict(flow_source="external")),
    }
    for name, (flags, expect) in arms.items():
        out = tmp / name.replace(" ", "_").replace("/", "")
        code = cli_main([*base, "--out", str(out), *flags])
        assert code == 0, f"arm {name!r} exited {code}"
        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["frame_count"] == 5 and len(list(out.glob("frame_*.png"))) == 5, f"arm {name!r} frame count"
        assert len(manifest["hashes"]["frames"]) == 5 and len(manifest["deltas"]) == 3
        for key, value in expect.items():
            assert manifest["config"][key] == value, f"arm {name!r}: config {key}={manifest['config'][key]!r}"
    codes = {
        "missing --img1": cli_main(["interpolate", "--img0", str(tmp / "a.png"), "--out", str(tmp / "x")]),
        "unknown flag": cli_main([*base, "--out", str(tmp / "x"), "--bogus"]),
        "bad value": cli_main([*base, "--out", str(tmp / "x"), "--frames", "0"]),
        "backend failure": cli_main([*base[:-4], "--backend", "toy:" + str(tmp / "missing.bin"), "--out", str(tmp / "x")]),
    }
    expected = {"missing --img1": 1, "unknown flag": 1, "bad value": 1, "backend failure": 2}
    assert codes == expected, f"exit codes {codes}"
    return f"{len(arms)} arms wrote valid manifests; exit codes {sorted(codes.values())} as contracted"


def test_ac10_cli_conformance(tmp_path):
    _gate(10, "CLI conformance", 300, lambda: _cli_conformance(tmp_path))


if __name__ == "__main__":
    import tempfile

    checks = [
        (1, "splatting oracle", 30, _splat_oracle),
        (2, "flow recovery", 60, _flow_recovery),
        (3, "DDIM algebra", 60, _ddim_algebra),
        (4, "fusion endpoints", 30, _fusion_endpoints),
        (5, "high-frequency retention", 300, _hf_retention),
        (6, "attention identities", 120, _attention_identities),
        (7, "LoRA contracts", 300, _lora_contracts),
        (8, "metrics", 30, _metrics),
        (9, "end-to-end degenerate run", 300, _degenerate_run),
    ]
    failed = 0
    for number, title, budget, body in checks:
        try:
            _gate(number, title, budget, body)
        except AssertionError:
            failed += 1
    with tempfile.TemporaryDirectory() as tmp:
        try:
            _gate(10, "CLI conformance", 300, lambda: _cli_conformance(Path(tmp)))
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
