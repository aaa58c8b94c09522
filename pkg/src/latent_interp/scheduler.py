"""Deterministic DDIM mathematics.

Timesteps here are training-timestep integers in ``[0, num_train_steps)``;
the sentinel :data:`CLEAN` (``-1``) denotes the noise-free state with
``alpha == 1``. Callers that count DDIM steps convert with
:meth:`NoiseSchedule.timestep_at`, where index 0 is the clean latent and
index ``k >= 1`` is ``ddim_timesteps[k - 1]``.

Schedule arithmetic is float64; outputs keep the dtype of the latent passed in.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

CLEAN = -1

Spacing = Literal["linear", "scaled_linear"]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray
    ddim_timesteps: np.ndarray
    num_train_steps: int

    def __post_init__(self):
        for arr in (self.betas, self.alphas_cumprod, self.ddim_timesteps):
            arr.setflags(write=False)

    @property
    def ddim_steps(self) -> int:
        return int(self.ddim_timesteps.size)

    def alpha(self, t: int) -> float:
        """Cumulative product at training timestep ``t`` (1.0 for :data:`CLEAN`)."""
        t = int(t)
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_steps})")
        return float(self.alphas_cumprod[t])

    def timestep_at(self, index: int) -> int:
        """Training timestep of DDIM step ``index`` (0 = clean)."""
        index = int(index)
        if not 0 <= index <= self.ddim_steps:
            raise ValueError(f"DDIM index {index} outside [0, {self.ddim_steps}]")
        return CLEAN if index == 0 else int(self.ddim_timesteps[index - 1])


def make_schedule(
    num_train_steps: int = 1000,
    ddim_steps: int = 50,
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
    spacing: Spacing = "scaled_linear",
) -> NoiseSchedule:
    """Build betas, their cumulative products and an evenly spaced DDIM subsequence."""
    if num_train_steps < 1 or ddim_steps < 1:
        raise ValueError("step counts must be positive")
    if ddim_steps > num_train_steps:
        raise ValueError(f"ddim_steps={ddim_steps} exceeds num_train_steps={num_train_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")

    if spacing == "linear":
        betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    elif spacing == "scaled_linear":
        betas = np.linspace(beta_start**0.5, beta_end**0.5, num_train_steps, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown spacing {spacing!r}")

    alphas_cumprod = np.cumprod(1.0 - betas)
    ratio = num_train_steps // ddim_steps
    ddim_timesteps = np.arange(ddim_steps, dtype=np.int64) * ratio
    return NoiseSchedule(betas, alphas_cumprod, ddim_timesteps, int(num_train_steps))


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.dtype]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    dtype = np.result_type(a.dtype, np.float32)
    return a.astype(np.float64, copy=False), b.astype(np.float64, copy=False), dtype


def predict_clean(z_t, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """One-step estimate of the clean latent from ``z_t`` and its noise prediction."""
    z, e, dtype = _pair(z_t, eps)
    a = sched.alpha(t)
    return ((z - np.sqrt(1.0 - a) * e) / np.sqrt(a)).astype(dtype)


def recompose(z_clean_pred, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noisy latent at ``t`` from a clean-latent estimate and a noise component."""
    z, e, dtype = _pair(z_clean_pred, eps)
    a = sched.alpha(t)
    return (np.sqrt(a) * z + np.sqrt(1.0 - a) * e).astype(dtype)


def ddim_step(z_t, eps, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to the less noisy ``t_prev``."""
    if int(t_prev) > int(t):
        raise ValueError(f"t_prev={t_prev} must not exceed t={t}")
    z, e, dtype = _pair(z_t, eps)
    a_t = sched.alpha(t)
    a_prev = sched.alpha(t_prev)
    clean = (z - np.sqrt(1.0 - a_t) * e) / np.sqrt(a_t)
    return (np.sqrt(a_prev) * clean + np.sqrt(1.0 - a_prev) * e).astype(dtype)


def ddim_invert_step(z_prev, eps, t_prev: int, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Inverse of :func:`ddim_step` for a fixed ``eps``: move from ``t_prev`` up to ``t``."""
    if int(t_prev) > int(t):
        raise ValueError(f"t_prev={t_prev} must not exceed t={t}")
    z, e, dtype = _pair(z_prev, eps)
    a_t = sched.alpha(t)
    a_prev = sched.alpha(t_prev)
    clean = (z - np.sqrt(1.0 - a_prev) * e) / np.sqrt(a_prev)
    return (np.sqrt(a_t) * clean + np.sqrt(1.0 - a_t) * e).astype(dtype)


def respace(sched: NoiseSchedule, ddim_steps: int) -> NoiseSchedule:
    """Same training betas, new evenly spaced DDIM subsequence of ``ddim_steps``."""
    if not 1 <= ddim_steps <= sched.num_train_steps:
        raise ValueError(f"ddim_steps={ddim_steps} outside [1, {sched.num_train_steps}]")
    ratio = sched.num_train_steps // ddim_steps
    timesteps = np.arange(ddim_steps, dtype=np.int64) * ratio
    return NoiseSchedule(sched.betas.copy(), sched.alphas_cumprod.copy(), timesteps, sched.num_train_steps)
