"""Self-attention concatenation and replacement for intermediate frames.

The denoising trajectories of both inputs are run once and their up-block
self-attention keys/values recorded into a :class:`KVBank`. Each
intermediate latent is then denoised with its own queries attending over the
row-concatenated keys/values of both inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from latent_interp.backend.base import AttentionTap
from latent_interp.sampling import ddim_sample
from latent_interp.scheduler import NoiseSchedule

BANK_DTYPE = np.float16


@dataclass(frozen=True)
class KVBank:
    records: dict[tuple[str, int], tuple[AttentionTap, AttentionTap]]
    layer_set: tuple[str, ...]

    def __post_init__(self):
        for key, (a, b) in self.records.items():
            if a.d_k != b.d_k or a.d_v != b.d_v:
                raise ValueError(f"bank entry {key} has mismatched key/value widths")

    @property
    def steps(self) -> list[int]:
        return sorted({step for _, step in self.records}, reverse=True)

    def entry(self, layer_id: str, step: int) -> tuple[AttentionTap, AttentionTap]:
        try:
            return self.records[(layer_id, step)]
        except KeyError:
            raise KeyError(f"bank has no record for layer {layer_id!r} at step {step}") from None


def _compact(tap: AttentionTap) -> AttentionTap:
    return AttentionTap(tap.layer_id, tap.step_index, tap.keys.astype(BANK_DTYPE), tap.values.astype(BANK_DTYPE))


def record_bank(
    z0_T,
    z1_T,
    sched: NoiseSchedule,
    backend,
    cond=None,
    fusion_step: int | None = None,
    layers: tuple[str, ...] | None = None,
) -> KVBank:
    """Denoise both inputs from ``fusion_step`` to 0, keeping every step's keys/values.

    ``layers`` defaults to all up-block self-attention layers of the backend.
    """
    if fusion_step is None:
        fusion_step = sched.ddim_steps
    layers = tuple(backend.attention_layer_ids() if layers is None else layers)
    if not layers:
        return KVBank({}, ())
    runs = [ddim_sample(z, backend, sched, fusion_step, cond, tap_layers=layers).taps for z in (z0_T, z1_T)]
    records = {}
    for step in runs[0]:
        by_layer0 = {t.layer_id: t for t in runs[0][step]}
        by_layer1 = {t.layer_id: t for t in runs[1][step]}
        for name in layers:
            records[(name, step)] = (_compact(by_layer0[name]), _compact(by_layer1[name]))
    return KVBank(records, layers)


def concat_replace_attention(q, entry: tuple[AttentionTap, AttentionTap], return_weights: bool = False):
    """``softmax(Q [K0; K1]^T / sqrt(d_k)) [V0; V1]`` for an ``L x d_k`` query matrix."""
    q = np.asarray(q, dtype=np.float64)
    a, b = entry
    if q.ndim != 2 or q.shape[1] != a.d_k or a.d_k != b.d_k or a.d_v != b.d_v:
        raise ValueError(f"query width {q.shape} does not match bank d_k={a.d_k}/{b.d_k}")
    scale = 1.0 / np.sqrt(a.d_k)
    s0 = q @ a.keys.astype(np.float64).T * scale
    s1 = q @ b.keys.astype(np.float64).T * scale
    # per-bank partial sums joined by one commutative addition, so swapping banks is bit-exact
    top = np.maximum(s0.max(axis=1, keepdims=True), s1.max(axis=1, keepdims=True))
    e0, e1 = np.exp(s0 - top), np.exp(s1 - top)
    den = e0.sum(axis=1, keepdims=True) + e1.sum(axis=1, keepdims=True)
    out = (e0 @ a.values.astype(np.float64) + e1 @ b.values.astype(np.float64)) / den
    if return_weights:
        return out, np.concatenate([e0, e1], axis=1) / den
    return out


def concatenated_kv(entry: tuple[AttentionTap, AttentionTap]) -> tuple[np.ndarray, np.ndarray]:
    a, b = entry
    return (
        np.concatenate([a.keys, b.keys]).astype(np.float32),
        np.concatenate([a.values, b.values]).astype(np.float32),
    )


def denoise_with_replacement(
    z_delta_T,
    bank: KVBank,
    sched: NoiseSchedule,
    backend,
    cond=None,
    fusion_step: int | None = None,
    step_range: tuple[int, int] | None = None,
) -> np.ndarray:
    """DDIM-sample ``z_delta_T`` to a clean latent with banked key/value replacement.

    ``step_range=(lo, hi)`` restricts replacement to DDIM steps ``lo <= k <= hi``.
    An empty bank layer set reduces to plain sampling.
    """
    if fusion_step is None:
        fusion_step = max(bank.steps, default=sched.ddim_steps)
    lo, hi = step_range if step_range is not None else (1, fusion_step)

    def override(step: int):
        if not bank.layer_set or not lo <= step <= hi:
            return None
        return {name: concatenated_kv(bank.entry(name, step)) for name in bank.layer_set}

    if bank.layer_set:
        # fail before any denoising if the bank does not cover the trajectory
        for step in range(max(lo, 1), min(hi, fusion_step) + 1):
            for name in bank.layer_set:
                bank.entry(name, step)
    return ddim_sample(z_delta_T, backend, sched, fusion_step, cond, kv_override_fn=override).latent
