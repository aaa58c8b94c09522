"""Command-line entry point: ``interpolate`` and ``metrics`` subcommands.

Exit codes: 0 on success, 1 on usage or validation errors, 2 when the
backend cannot be loaded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from latent_interp.backend import BackendError, load_backend
from latent_interp.config import RunConfig, load_config
from latent_interp.flow import load_flow, resample_flow, save_flow
from latent_interp.io import frame_hash, load_image, read_frames, write_frames
from latent_interp.metrics import FrameSequence, hf_ratio, warping_error, we_mid, zero_flow

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BACKEND = 2

log = logging.getLogger("latent_interp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latent-interp", description="Diffusion-latent image interpolation on a toy or pretrained denoiser.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("interpolate", help="render frames between two images")
    p.add_argument("--img0", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="number of intermediate frames")
    p.add_argument("--fusion", choices=("two_level", "direct"))
    p.add_argument("--no-lora", action="store_true")
    p.add_argument("--no-attn-replace", action="store_true")
    p.add_argument("--prompt")
    p.add_argument("--seed", type=int)
    p.add_argument("--backend", default="toy", help="toy, toy:PATH or pretrained:MODEL_ID")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--dump-flow", action="store_true", help="also write flow_0to1.bin / flow_1to0.bin")
    p.add_argument("--flow0to1", help="DMFLOW01 file replacing the feature-based estimate")
    p.add_argument("--flow1to0", help="DMFLOW01 file for the reverse direction")
    p.add_argument("--lora-steps", type=int)
    p.add_argument("--workers", type=int)

    m = sub.add_parser("metrics", help="score a frame_%%04d.png directory")
    m.add_argument("--frames", required=True)
    m.add_argument("--flow", choices=("diffusion", "zero", "file"), default="diffusion")
    m.add_argument("--flow-dir", help="directory of flow_PREV_NEXT.bin files for --flow file")
    m.add_argument("--backend", default="toy")
    m.add_argument("--seed", type=int, default=0)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {
        "n_frames": args.frames,
        "fusion_mode": args.fusion,
        "prompt": args.prompt,
        "seed": args.seed,
        "lora_steps": args.lora_steps,
        "workers": args.workers,
    }
    if args.no_lora:
        overrides["lora_enabled"] = False
    if args.no_attn_replace:
        overrides["attn_replace"] = False
    if bool(args.flow0to1) != bool(args.flow1to0):
        raise ValueError("--flow0to1 and --flow1to0 must be given together")
    if args.flow0to1:
        overrides.update(flow_source="external", flow_0to1=args.flow0to1, flow_1to0=args.flow1to0)
    if args.config:
        return load_config(args.config, **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def _interpolate(args) -> int:
    from latent_interp.pipeline import run_interpolation

    cfg = _run_config(args)
    image0 = load_image(args.img0)
    image1 = load_image(args.img1)
    try:
        backend = load_backend(args.backend, seed=cfg.seed)
    except (BackendError, OSError) as exc:
        raise BackendError(str(exc)) from exc

    run = run_interpolation(image0, image1, cfg, backend)
    out = Path(args.out)
    write_frames(run.sequence.frames, out)
    manifest = run.manifest(cfg, [frame_hash(image0), frame_hash(image1)])
    manifest["inputs"] = [str(args.img0), str(args.img1)]
    if args.dump_flow:
        save_flow(run.flow_0to1, out / "flow_0to1.bin")
        save_flow(run.flow_1to0, out / "flow_1to0.bin")
        manifest["flows"] = ["flow_0to1.bin", "flow_1to0.bin"]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    log.info("wrote %d frames to %s", len(run.sequence), out)
    return EXIT_OK


def _metrics(args) -> int:
    seq = FrameSequence(tuple(read_frames(args.frames)))
    h, w = seq.frames[0].shape[:2]
    if args.flow == "zero":
        flow_fn = zero_flow
    elif args.flow == "file":
        if not args.flow_dir:
            raise ValueError("--flow file needs --flow-dir")
        flow_fn = _file_flow_fn(seq, Path(args.flow_dir), (h, w))
    else:
        from latent_interp.pipeline import diffusion_flow_fn

        try:
            backend = load_backend(args.backend, seed=args.seed)
        except (BackendError, OSError) as exc:
            raise BackendError(str(exc)) from exc
        flow_fn = diffusion_flow_fn(backend)

    result = {"we": warping_error(seq, flow_fn)}
    result["we_mid"] = we_mid(seq, flow_fn) if len(seq) >= 3 else None
    mid = seq.middle
    try:
        result["hf_mid_ratio"] = 0.5 * (hf_ratio(mid, seq.frames[0]) + hf_ratio(mid, seq.frames[-1]))
    except ValueError:  # an endpoint without high-frequency content
        result["hf_mid_ratio"] = None
    print(json.dumps(result))
    return EXIT_OK


def _file_flow_fn(seq: FrameSequence, flow_dir: Path, size):
    """Reads ``flow_{prev:04d}_{next:04d}.bin``: the flow from frame ``next`` back to frame ``prev``."""
    index = {id(f): i for i, f in enumerate(seq.frames)}

    def flow_fn(frame_next, frame_prev):
        path = flow_dir / f"flow_{index[id(frame_prev)]:04d}_{index[id(frame_next)]:04d}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing flow file {path}")
        return resample_flow(load_flow(path), size)

    return flow_fn


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "interpolate":
            return _interpolate(args)
        return _metrics(args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
