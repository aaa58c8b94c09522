"""Vectorised numpy implementations of the scatter and matching kernels.

These are the reference fallback for ``_ckernels``; both modules expose the
same three functions with identical semantics:

``splat_sum(values, dx, dy, weight)``
    Bilinear forward scatter of ``weight * values`` and ``weight``.
``splat_max(values, dx, dy, weight)``
    Same scatter geometry, keeping only the single largest contribution.
``cosine_argmax(src, dst, h, w, tol)``
    Best-matching destination index for every source descriptor.

All array arguments are float64 and C-contiguous. Values are ``(C, H, W)``,
displacements and weights ``(H, W)``.
"""

from __future__ import annotations

import numpy as np

#: rows of the similarity table evaluated at once by :func:`cosine_argmax`
_ROW_CHUNK = 512


def _contributions(dx, dy, weight):
    """Enumerate every (source, target, weight) triple of the bilinear scatter.

    Contributions with zero kernel weight or an out-of-bounds target are
    dropped. Sources are emitted in row-major order, neighbours in the order
    top-left, top-right, bottom-left, bottom-right.
    """
    h, w = dx.shape
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + dx
    ty = ys + dy
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = tx - x0
    fy = ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    src = np.arange(h * w, dtype=np.int64).reshape(h, w)

    corners = (
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    )
    srcs, tgts, wts = [], [], []
    for cx, cy, k in corners:
        ok = (k > 0.0) & (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        srcs.append(src[ok])
        tgts.append(cy[ok] * w + cx[ok])
        wts.append(weight[ok] * k[ok])
    return np.concatenate(srcs), np.concatenate(tgts), np.concatenate(wts)


def splat_sum(values, dx, dy, weight):
    c, h, w = values.shape
    src, tgt, wt = _contributions(dx, dy, weight)
    flat = values.reshape(c, h * w)
    num = np.zeros((c, h * w), dtype=np.float64)
    den = np.zeros(h * w, dtype=np.float64)
    np.add.at(den, tgt, wt)
    for ch in range(c):
        np.add.at(num[ch], tgt, wt * flat[ch, src])
    return num.reshape(c, h, w), den.reshape(h, w)


def splat_max(values, dx, dy, weight):
    c, h, w = values.shape
    src, tgt, wt = _contributions(dx, dy, weight)
    out = np.zeros((c, h * w), dtype=np.float64)
    best = np.zeros(h * w, dtype=np.float64)
    if src.size:
        # per target: largest weight first, then lowest source index
        order = np.lexsort((src, -wt, tgt))
        tgt_sorted = tgt[order]
        _, first = np.unique(tgt_sorted, return_index=True)
        win = order[first]
        best[tgt[win]] = wt[win]
        out[:, tgt[win]] = values.reshape(c, h * w)[:, src[win]]
    return out.reshape(c, h, w), best.reshape(h, w)


def cosine_argmax(src, dst, h, w, tol):
    n = src.shape[0]
    ys, xs = np.divmod(np.arange(n, dtype=np.int64), w)
    best = np.empty(n, dtype=np.int64)
    for start in range(0, n, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, n)
        sim = src[start:stop] @ dst.T
        top = sim.max(axis=1, keepdims=True)
        disp2 = (xs[None, :] - xs[start:stop, None]) ** 2 + (ys[None, :] - ys[start:stop, None]) ** 2
        key = np.where(sim >= top - tol, disp2, np.iinfo(np.int64).max)
        # argmin returns the first minimum, i.e. the row-major earliest
        best[start:stop] = key.argmin(axis=1)
    return best
