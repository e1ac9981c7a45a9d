"""Naive reference renderer: every pixel visits every fragment in global depth order.

No tiling and no binning. It exists as the small-instance oracle for the
tiled renderer and uses the same exp routine as the backend it is compared
against, so outputs can be checked for bit equality.
"""
from __future__ import annotations

import numpy as np

from ..geometry import Projection
from . import kernels
from .binning import depth_order
from .constants import RASTER


def reference_rasterize(proj: Projection, width: int, height: int, background=(0.0, 0.0, 0.0),
                        backend: str | None = None, consts=RASTER):
    exp = kernels(backend).libm_exp
    bg = np.asarray(background, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)
    T = np.ones(len(px))
    C = np.zeros((len(px), 3))
    done = np.zeros(len(px), dtype=bool)
    conic = proj.conic
    for g in depth_order(proj.depth):
        if not proj.valid[g]:
            continue
        a, b, c = conic[g, 0, 0], conic[g, 0, 1], conic[g, 1, 1]
        dx = px - proj.mean2d[g, 0]
        dy = py - proj.mean2d[g, 1]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        alpha = np.minimum(proj.opacity[g] * exp(-0.5 * q), consts.alpha_max)
        take = ~done & (q <= consts.cutoff) & (alpha >= consts.alpha_min)
        wgt = alpha * T
        C = np.where(take[:, None], C + proj.color[g] * wgt[:, None], C)
        T = np.where(take, T * (1.0 - alpha), T)
        done |= take & (T < consts.t_min)
    rgb = (C + T[:, None] * bg).reshape(height, width, 3)
    return rgb, (1.0 - T).reshape(height, width)
