"""Time the compiled kernels against the numpy fallback on latent-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--json]

Both implementations are imported directly, so the selection made at
package import does not matter here. The compiled module is reported as
missing when the extension was not built.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from latent_interp._kernels import _pykernels

try:
    from latent_interp._kernels import _ckernels
except ImportError:
    _ckernels = None


def _splat_case(size: int, channels: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((channels, size, size))
    dx = rng.uniform(-3, 3, (size, size))
    dy = rng.uniform(-3, 3, (size, size))
    weight = np.exp(rng.uniform(-1, 1, (size, size)))
    return values, dx, dy, weight


def _match_case(size: int, dim: int = 32, seed: int = 0):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((size * size, dim))
    dst = rng.standard_normal((size * size, dim))
    src /= np.linalg.norm(src, axis=1, keepdims=True)
    dst /= np.linalg.norm(dst, axis=1, keepdims=True)
    return src, dst, size, size, 1e-9


CASES = {
    "splat_sum 4x64x64": ("splat_sum", _splat_case(64)),
    "splat_max 4x64x64": ("splat_max", _splat_case(64)),
    "cosine_argmax 32x32 D=32": ("cosine_argmax", _match_case(32)),
    "cosine_argmax 64x64 D=32": ("cosine_argmax", _match_case(64)),
}


def _best_time(fn, args, repeat: int) -> float:
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05 and number < 1000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def run(repeat: int = 5) -> list[dict]:
    rows = []
    for label, (name, args) in CASES.items():
        py = _best_time(getattr(_pykernels, name), args, repeat)
        row = {"case": label, "python_ms": py * 1e3, "cython_ms": None, "speedup": None}
        if _ckernels is not None:
            cy = _best_time(getattr(_ckernels, name), args, repeat)
            row.update(cython_ms=cy * 1e3, speedup=py / cy)
            ref, got = getattr(_pykernels, name)(*args), getattr(_ckernels, name)(*args)
            ref = ref if isinstance(ref, tuple) else (ref,)
            got = got if isinstance(got, tuple) else (got,)
            row["max_abs_diff"] = max(float(np.max(np.abs(a - b))) for a, b in zip(ref, got))
        rows.append(row)
    return rows


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true")
    args = parser.parse_args()
    rows = run(args.repeat)
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'case':28s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for r in rows:
        cy = "n/a" if r["cython_ms"] is None else f"{r['cython_ms']:.3f}"
        sp = "n/a" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        diff = f"{r.get('max_abs_diff', float('nan')):.1e}"
        print(f"{r['case']:28s} {r['python_ms']:10.3f} {cy:>10s} {sp:>8s} {diff:>9s}")


if __name__ == "__main__":
    main()
