"""Single low-rank adapter fitted on the input pair.

A target linear map ``W`` becomes ``W x + scaling * A (B x)`` with
``A: d_out x r`` and ``B: r x d_in``. ``B`` starts at zero, so a fresh
adapter changes nothing. Target names are module paths inside the backend's
``module``.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

LORA_MAGIC = b"DMLORA01"


@dataclass(frozen=True, eq=False)  # array fields: compare factors explicitly
class LoraParams:
    rank: int
    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    scaling: float = 1.0
    loss_history: tuple[float, ...] = field(default=(), compare=False)
    initial_loss: float | None = field(default=None, compare=False)
    final_loss: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for name, (a, b) in self.factors.items():
            if a.ndim != 2 or b.ndim != 2 or a.shape[1] != self.rank or b.shape[0] != self.rank:
                raise ValueError(f"{name}: factor shapes {a.shape}, {b.shape} inconsistent with rank {self.rank}")

    def delta(self, name: str) -> np.ndarray:
        a, b = self.factors[name]
        return self.scaling * (a.astype(np.float64) @ b.astype(np.float64))

    def is_noop(self) -> bool:
        return self.scaling == 0 or all(not b.any() for _, b in self.factors.values())


class LoRALinear(nn.Module):
    def __init__(self, base: nn.Linear, a: torch.Tensor, b: torch.Tensor, scaling: float, trainable: bool = False):
        super().__init__()
        self.base = base
        self.scaling = float(scaling)
        if trainable:
            self.lora_a = nn.Parameter(a.clone())
            self.lora_b = nn.Parameter(b.clone())
        else:
            self.register_buffer("lora_a", a.clone())
            self.register_buffer("lora_b", b.clone())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        if self.scaling == 0:
            return out
        return out + self.scaling * ((x @ self.lora_b.T) @ self.lora_a.T)


def _base_linear(module: nn.Module) -> nn.Linear:
    return module.base if isinstance(module, LoRALinear) else module


def _inject(module: nn.Module, names, factors, scaling: float, trainable: bool) -> dict[str, LoRALinear]:
    injected = {}
    for name in names:
        parent_path, _, attr = name.rpartition(".")
        parent = module.get_submodule(parent_path) if parent_path else module
        target = getattr(parent, attr)
        a, b = factors[name]
        layer = LoRALinear(target, torch.as_tensor(a, dtype=torch.float32), torch.as_tensor(b, dtype=torch.float32), scaling, trainable)
        setattr(parent, attr, layer)
        injected[name] = layer
    return injected


def init_lora(backend, rank: int = 16, seed: int = 0, scaling: float = 1.0) -> LoraParams:
    """Fresh adapter: Gaussian ``A`` with variance ``1/rank``, zero ``B``."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    g = torch.Generator().manual_seed(seed)
    factors = {}
    for name, layer in backend.lora_targets().items():
        base = _base_linear(layer)
        a = torch.randn(base.out_features, rank, generator=g) / rank**0.5
        b = torch.zeros(rank, base.in_features)
        factors[name] = (a.numpy(), b.numpy())
    return LoraParams(rank, factors, scaling)


def apply_lora(backend, params: LoraParams):
    """New backend handle with the adapter baked in; ``backend`` is left untouched."""
    targets = backend.lora_targets()
    for name, (a, b) in params.factors.items():
        if name not in targets:
            raise ValueError(f"backend has no LoRA target {name!r}")
        base = _base_linear(targets[name])
        if a.shape[0] != base.out_features or b.shape[1] != base.in_features:
            raise ValueError(f"{name}: factors {a.shape}/{b.shape} do not fit {base.out_features}x{base.in_features}")
    module = copy.deepcopy(backend.module)
    _inject(module, params.factors, params.factors, params.scaling, trainable=False)
    return backend.with_module(module.eval())


def _corrupt(z, t, noise, alphas):
    return alphas[t].sqrt() * z + (1 - alphas[t]).sqrt() * noise


def denoising_loss(backend, latents, cond=None, probes: int = 32, seed: int = 0) -> float:
    """Mean noise-regression loss over a fixed, seeded set of (latent, t, noise) draws.

    Scoring two handles on the same probes compares them without the
    timestep-sampling variance of single training iterations.
    """
    alphas = torch.as_tensor(np.array(backend.schedule.alphas_cumprod), dtype=torch.float32)
    zs = [torch.as_tensor(np.asarray(z, dtype=np.float32))[None] for z in latents]
    g = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for i in range(probes):
            z = zs[i % len(zs)]
            t = int(torch.randint(0, backend.schedule.num_train_steps, (1,), generator=g))
            noise = torch.randn(z.shape, generator=g)
            total += float(torch.mean((backend.torch_eps(_corrupt(z, t, noise, alphas), t, cond) - noise) ** 2))
    return total / probes


def fit_pair_lora(
    backend,
    z0_clean,
    z1_clean,
    cond=None,
    rank: int = 16,
    lr: float = 5e-4,
    steps: int = 80,
    seed: int = 0,
    scaling: float = 1.0,
    weight_decay: float = 1e-2,
) -> LoraParams:
    """Fit one adapter to both latents with the standard noise-regression objective.

    Iteration ``i`` corrupts ``z0`` when ``i`` is even and ``z1`` when odd, at
    a timestep drawn uniformly from the training range; only the adapter
    factors are updated (AdamW). The per-iteration losses are kept in
    ``loss_history``; ``initial_loss``/``final_loss`` score the adapter
    before and after on the same :func:`denoising_loss` probes.
    """
    if rank < 1 or lr <= 0 or steps < 0:
        raise ValueError("rank and lr must be positive, steps non-negative")
    targets = backend.lora_targets()
    if not targets:
        raise ValueError(f"backend {backend.identifier} exposes no trainable LoRA targets")
    params = init_lora(backend, rank, seed, scaling)
    if steps == 0:
        return params

    module = copy.deepcopy(backend.module)
    for p in module.parameters():
        p.requires_grad_(False)
    layers = _inject(module, params.factors, params.factors, scaling, trainable=True)
    trainer = backend.with_module(module)
    probe_seed = seed + 2
    initial = denoising_loss(trainer, (z0_clean, z1_clean), cond, seed=probe_seed)
    trainable = [p for layer in layers.values() for p in (layer.lora_a, layer.lora_b)]
    opt = torch.optim.AdamW(trainable, lr=lr, weight_decay=weight_decay)

    sched = backend.schedule
    alphas = torch.as_tensor(np.array(sched.alphas_cumprod), dtype=torch.float32)
    latents = [torch.as_tensor(np.asarray(z, dtype=np.float32))[None] for z in (z0_clean, z1_clean)]
    g = torch.Generator().manual_seed(seed + 1)
    history = []
    with torch.enable_grad():
        for i in range(steps):
            z = latents[i % 2]
            t = int(torch.randint(0, sched.num_train_steps, (1,), generator=g))
            noise = torch.randn(z.shape, generator=g)
            z_t = _corrupt(z, t, noise, alphas)
            loss = torch.mean((trainer.torch_eps(z_t, t, cond) - noise) ** 2)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))

    factors = {
        name: (layer.lora_a.detach().numpy().copy(), layer.lora_b.detach().numpy().copy())
        for name, layer in layers.items()
    }
    final = denoising_loss(trainer, (z0_clean, z1_clean), cond, seed=probe_seed)
    return LoraParams(rank, factors, scaling, tuple(history), initial, final)


def save_lora(params: LoraParams, path) -> None:
    """``DMLORA01``, rank, layer count, then per layer: name, both factor shapes, float32 data."""
    with open(path, "wb") as fh:
        fh.write(LORA_MAGIC)
        fh.write(struct.pack("<II", params.rank, len(params.factors)))
        for name, (a, b) in params.factors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<IIII", *a.shape, *b.shape))
            fh.write(a.astype("<f4").tobytes())
            fh.write(b.astype("<f4").tobytes())


def load_lora(path, scaling: float = 1.0) -> LoraParams:
    data = Path(path).read_bytes()
    if data[:8] != LORA_MAGIC:
        raise ValueError(f"{path}: not a DMLORA01 file")
    rank, count = struct.unpack_from("<II", data, 8)
    pos = 16
    factors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            ar, ac, br, bc = struct.unpack_from("<IIII", data, pos)
            pos += 16
            a = np.frombuffer(data, "<f4", ar * ac, pos).reshape(ar, ac).astype(np.float32)
            pos += 4 * ar * ac
            b = np.frombuffer(data, "<f4", br * bc, pos).reshape(br, bc).astype(np.float32)
            pos += 4 * br * bc
            factors[name] = (a, b)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated LoRA file") from exc
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} layers")
    return LoraParams(rank, factors, scaling)
