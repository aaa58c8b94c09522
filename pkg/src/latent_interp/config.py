"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


@dataclass
class RunConfig:
    ddim_steps: int = 50
    fusion_step: int = 30
    feature_step: int = 14
    feature_block: str = "up_block_2"
    n_frames: int = 32
    fusion_mode: str = "two_level"
    attn_replace: bool = True
    attn_layers: tuple[str, ...] = ()  # empty: every up-block self-attention layer
    attn_step_range: tuple[int, ...] = ()  # (lo, hi) DDIM steps; empty: full range
    lora_enabled: bool = True
    lora_rank: int = 16
    lora_lr: float = 5e-4
    lora_steps: int = 80
    lora_scaling: float = 1.0
    prompt: str = ""
    seed: int = 0
    splat_temperature: float = 10.0
    flow_source: str = "diffusion"
    flow_0to1: str = ""
    flow_1to0: str = ""
    workers: int = 1
    # classifier-free guidance is never applied; kept so manifests state it
    cfg: bool = field(default=False, init=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.feature_step <= self.fusion_step <= self.ddim_steps:
            raise ValueError(
                f"need 0 < feature_step ({self.feature_step}) <= fusion_step ({self.fusion_step})"
                f" <= ddim_steps ({self.ddim_steps})"
            )
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.fusion_mode not in ("two_level", "direct"):
            raise ValueError(f"fusion_mode must be two_level or direct, got {self.fusion_mode!r}")
        if self.flow_source not in ("diffusion", "external"):
            raise ValueError(f"flow_source must be diffusion or external, got {self.flow_source!r}")
        if self.flow_source == "external" and not (self.flow_0to1 and self.flow_1to0):
            raise ValueError("external flow needs both flow_0to1 and flow_1to0 paths")
        if self.attn_step_range and len(self.attn_step_range) != 2:
            raise ValueError("attn_step_range takes two DDIM steps: lo, hi")
        if self.lora_rank < 1 or self.lora_lr <= 0 or self.lora_steps < 0:
            raise ValueError("LoRA rank/lr must be positive and steps non-negative")
        if self.splat_temperature <= 0:
            raise ValueError("splat_temperature must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def deltas(self) -> list[float]:
        n = self.n_frames
        return [k / (n + 1) for k in range(1, n + 1)]

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, hint) -> Any:
    text = raw.strip()
    if hint is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
            return text[1:-1]
        return text
    # tuples: comma-separated
    items = [part.strip() for part in text.split(",") if part.strip()]
    inner = hint.__args__[0]
    return tuple(inner(item) for item in items)


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    hints = get_type_hints(RunConfig)
    known = {f.name for f in dataclasses.fields(RunConfig) if f.init}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key == "cfg":
            if _coerce(key, raw, bool):
                raise ValueError(f"line {lineno}: classifier-free guidance is not supported")
            continue
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, hints[key])
    return values


def load_config(path, **overrides) -> RunConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
