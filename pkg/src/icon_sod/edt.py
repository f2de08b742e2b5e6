"""Exact Euclidean distance transform with a feature (nearest-pixel) map.

Separable two-pass scheme over squared distances: pass one scans each
column for the best foreground row at every offset, pass two combines
column bests across the row axis.  All arithmetic is integer, so results
are exact; ties are pinned to the smallest column index, then the
smallest row index (numpy's first-minimum argmin gives both for free).
The feature map is what downstream weighted-error metrics consume, which
is why the tie rule is part of the contract here.
"""

from __future__ import annotations

import numpy as np


def euclidean_dt(fg: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Squared distance to, and coordinates of, the nearest foreground pixel.

    ``fg`` is a 2-d boolean mask.  Returns (dist2, nearest_row, nearest_col)
    as int64 arrays; foreground pixels map to themselves with distance 0.
    With no foreground at all, dist2 is a large sentinel (> any real
    squared distance) and the index maps are -1.
    """
    fg = np.asarray(fg, dtype=bool)
    if fg.ndim != 2:
        raise ValueError(f"expected a 2-d mask, got shape {fg.shape}")
    h, w = fg.shape
    sentinel = np.int64(h) * h + np.int64(w) * w + 1

    # pass 1: per column, best squared row offset and its (smallest) row
    col_d2 = np.full((h, w), sentinel, dtype=np.int64)
    col_row = np.full((h, w), -1, dtype=np.int64)
    rows = np.arange(h, dtype=np.int64)
    for c in range(w):
        fg_rows = rows[fg[:, c]]
        if fg_rows.size == 0:
            continue
        diff = rows[:, None] - fg_rows[None, :]
        d2 = diff * diff
        best = d2.argmin(axis=1)  # first minimum -> smallest fg row
        col_d2[:, c] = d2[rows, best]
        col_row[:, c] = fg_rows[best]

    # pass 2: per row, combine column bests with squared column offsets
    dist2 = np.empty((h, w), dtype=np.int64)
    near_r = np.full((h, w), -1, dtype=np.int64)
    near_c = np.full((h, w), -1, dtype=np.int64)
    cols = np.arange(w, dtype=np.int64)
    off2 = (cols[:, None] - cols[None, :]) ** 2  # (query col, source col)
    for r in range(h):
        total = col_d2[r][None, :] + off2
        best_c = total.argmin(axis=1)  # first minimum -> smallest column
        dist2[r] = total[cols, best_c]
        valid = col_row[r, best_c] >= 0
        near_c[r] = np.where(valid, best_c, -1)
        near_r[r] = np.where(valid, col_row[r, best_c], -1)
    return dist2, near_r, near_c


def nearest_fg_mean(values: np.ndarray, fg: np.ndarray) -> np.ndarray:
    """Per pixel: mean of ``values`` over ALL nearest foreground pixels.

    Unlike the single-index feature transform, averaging the full tied set
    has no directional bias, so consumers stay exactly symmetric under
    transposition and flips.  Foreground pixels map to their own value.
    Requires a nonempty mask.
    """
    fg = np.asarray(fg, dtype=bool)
    values = np.asarray(values, dtype=np.float64)
    if fg.shape != values.shape or fg.ndim != 2:
        raise ValueError("values and mask must be the same 2-d shape")
    if not fg.any():
        raise ValueError("nearest_fg_mean needs a nonempty foreground")
    h, w = fg.shape
    sentinel = np.int64(h) * h + np.int64(w) * w + 1

    col_d2 = np.full((h, w), sentinel, dtype=np.int64)
    col_cnt = np.zeros((h, w), dtype=np.int64)
    col_sum = np.zeros((h, w), dtype=np.float64)
    rows = np.arange(h, dtype=np.int64)
    for c in range(w):
        fg_rows = rows[fg[:, c]]
        if fg_rows.size == 0:
            continue
        d2 = (rows[:, None] - fg_rows[None, :]) ** 2
        m = d2.min(axis=1)
        ties = d2 == m[:, None]
        col_d2[:, c] = m
        col_cnt[:, c] = ties.sum(axis=1)
        col_sum[:, c] = ties @ values[fg_rows, c]

    out = np.empty((h, w), dtype=np.float64)
    cols = np.arange(w, dtype=np.int64)
    off2 = (cols[:, None] - cols[None, :]) ** 2
    for r in range(h):
        total = col_d2[r][None, :] + off2
        m = total.min(axis=1)
        ties = total == m[:, None]
        cnt = ties @ col_cnt[r]
        out[r] = (ties @ col_sum[r]) / cnt
    return out
