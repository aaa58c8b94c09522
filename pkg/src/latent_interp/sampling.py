"""Multi-step DDIM inversion and sampling driven by a backend.

Steps are DDIM indices: index 0 is the clean latent, index ``k`` the latent at
``sched.timestep_at(k)``. Inversion evaluates the noise at the current
(lower-noise) latent with the next timestep, the usual first-order
approximation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from latent_interp.backend.base import AttentionTap, FeatureMap, TapRequest
from latent_interp.scheduler import NoiseSchedule, ddim_invert_step, ddim_step

KVOverrideFn = Callable[[int], Mapping[str, tuple] | None]


@dataclass
class InversionResult:
    latents: list[np.ndarray]  # latents[k] sits at DDIM index k
    eps_final: np.ndarray  # noise prediction at the last latent and its own timestep
    features: FeatureMap | None = None

    @property
    def final(self) -> np.ndarray:
        return self.latents[-1]


@dataclass
class SamplingResult:
    latent: np.ndarray
    taps: dict[int, list[AttentionTap]] = field(default_factory=dict)


def ddim_invert(
    z0,
    backend,
    sched: NoiseSchedule,
    to_index: int,
    cond=None,
    feature_step: int | None = None,
    feature_block: str | None = None,
) -> InversionResult:
    """Invert a clean latent up to DDIM index ``to_index``.

    When ``feature_step`` is given, the output of ``feature_block`` is
    recorded from a pass on the latent at that index, within the same
    trajectory.
    """
    if not 0 <= to_index <= sched.ddim_steps:
        raise ValueError(f"to_index={to_index} outside [0, {sched.ddim_steps}]")
    if feature_step is not None:
        if feature_block is None:
            raise ValueError("feature_block is required with feature_step")
        if not 0 <= feature_step <= to_index:
            raise ValueError(f"feature_step={feature_step} must lie in [0, {to_index}]")

    z = np.asarray(z0, dtype=np.float32)
    latents = [z]
    features = None
    for k in range(1, to_index + 1):
        if feature_step == k - 1:
            features = _features(z, backend, sched, k - 1, cond, feature_block)
        t_prev, t = sched.timestep_at(k - 1), sched.timestep_at(k)
        eps = backend.predict_noise(z, t, cond).eps
        z = ddim_invert_step(z, eps, t_prev, t, sched)
        latents.append(z)

    t_final = sched.timestep_at(to_index)
    if feature_step == to_index:
        out = backend.predict_noise(z, t_final, cond, TapRequest(blocks=(feature_block,)))
        features = out.features[feature_block]
    else:
        out = backend.predict_noise(z, t_final, cond)
    return InversionResult(latents, out.eps, features)


def _features(z, backend, sched, index, cond, block) -> FeatureMap:
    out = backend.predict_noise(z, sched.timestep_at(index), cond, TapRequest(blocks=(block,)))
    return out.features[block]


def ddim_sample(
    z,
    backend,
    sched: NoiseSchedule,
    from_index: int,
    cond=None,
    tap_layers: tuple[str, ...] = (),
    kv_override_fn: KVOverrideFn | None = None,
) -> SamplingResult:
    """Denoise from DDIM index ``from_index`` down to the clean latent.

    ``tap_layers`` are recorded at every step; ``kv_override_fn(step)``
    supplies an optional key/value override per step.
    """
    if not 0 <= from_index <= sched.ddim_steps:
        raise ValueError(f"from_index={from_index} outside [0, {sched.ddim_steps}]")
    z = np.asarray(z, dtype=np.float32)
    taps: dict[int, list[AttentionTap]] = {}
    request = TapRequest(layers=tuple(tap_layers)) if tap_layers else None
    for k in range(from_index, 0, -1):
        t, t_prev = sched.timestep_at(k), sched.timestep_at(k - 1)
        override = kv_override_fn(k) if kv_override_fn is not None else None
        out = backend.predict_noise(z, t, cond, request, override or None, step_index=k)
        if request is not None:
            taps[k] = out.taps
        z = ddim_step(z, out.eps, t, t_prev, sched)
    return SamplingResult(z, taps)
