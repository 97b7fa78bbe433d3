"""Brute-force reference for the template search.

Written against the score definition only: Sobel gradients from scipy,
directions zeroed below the magnitude floor, and the mean absolute dot
product evaluated at every angle and every integer shift in the window at
full resolution. No pyramid, no candidate pruning.
"""

import math

import numpy as np
from scipy import ndimage


def unit_gradients(image, g_min):
    f = np.asarray(image, dtype=np.float64)
    gx = ndimage.sobel(f, axis=1, mode="mirror")
    gy = ndimage.sobel(f, axis=0, mode="mirror")
    mag = np.hypot(gx, gy)
    keep = mag >= g_min
    safe = np.where(keep, mag, 1.0)
    return np.where(keep, gx / safe, 0.0), np.where(keep, gy / safe, 0.0)


def exhaustive_search(image, templates, radius_px, g_min):
    """Best (score, angle index, sx, sy) over all finest-level templates and shifts within +-ceil(radius_px)."""
    gx, gy = unit_gradients(image, g_min)
    h, w = gx.shape
    r = int(math.ceil(radius_px))
    shifts = np.arange(-r, r + 1)
    best = (-1.0, -1, 0, 0)
    for k, t in enumerate(templates):
        px, py = t.pixels[:, 0].astype(np.int64), t.pixels[:, 1].astype(np.int64)
        d = t.directions.astype(np.float64)
        # (shift_y, shift_x, point) index grids
        X = px[None, None, :] + shifts[None, :, None]
        Y = py[None, None, :] + shifts[:, None, None]
        inside = (X >= 0) & (X < w) & (Y >= 0) & (Y < h)
        ok = inside.all(axis=2)
        Xc, Yc = np.clip(X, 0, w - 1), np.clip(Y, 0, h - 1)
        dots = np.abs(gx[Yc, Xc] * d[:, 0] + gy[Yc, Xc] * d[:, 1])
        scores = np.where(ok, dots.mean(axis=2), -1.0)
        iy, ix = np.unravel_index(int(np.argmax(scores)), scores.shape)
        if scores[iy, ix] > best[0]:
            best = (float(scores[iy, ix]), k, int(shifts[ix]), int(shifts[iy]))
    return best
