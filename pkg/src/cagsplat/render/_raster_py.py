"""Pure-numpy fallback for the compiled rasterizer.

Vectorized over the pixels of one tile, sequential over that tile's
depth-sorted fragment list. Same signatures as the ``_raster`` extension.
"""
from __future__ import annotations

import numpy as np

libm_exp = np.exp


def _tile_pixels(tx, ty, tile, width, height):
    xs = np.arange(tx * tile, min((tx + 1) * tile, width), dtype=np.float64)
    ys = np.arange(ty * tile, min((ty + 1) * tile, height), dtype=np.float64)
    px, py = np.meshgrid(xs, ys)
    return px.reshape(-1), py.reshape(-1), len(ys), len(xs)


def forward(mean2d, conic, opacity, color, tile_ptr, tile_ids, width, height, tile, bg,
            alpha_max, alpha_min, t_min, cutoff):
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    image = np.empty((height, width, 3))
    final_t = np.empty((height, width))
    last = np.empty((height, width), dtype=np.int64)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t_idx = ty * tiles_x + tx
            start, end = int(tile_ptr[t_idx]), int(tile_ptr[t_idx + 1])
            px, py, h, w_ = _tile_pixels(tx, ty, tile, width, height)
            T = np.ones(len(px))
            C = np.zeros((len(px), 3))
            lst = np.full(len(px), start, dtype=np.int64)
            done = np.zeros(len(px), dtype=bool)
            for k in range(start, end):
                g = tile_ids[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                alpha = np.minimum(opacity[g] * libm_exp(-0.5 * q), alpha_max)
                take = ~done & (q <= cutoff) & (alpha >= alpha_min)
                if not take.any():
                    continue
                wgt = alpha * T
                C = np.where(take[:, None], C + color[g] * wgt[:, None], C)
                T = np.where(take, T * (1.0 - alpha), T)
                lst = np.where(take, k + 1, lst)
                done |= take & (T < t_min)
                if done.all():
                    break
            ys, xs = slice(ty * tile, ty * tile + h), slice(tx * tile, tx * tile + w_)
            image[ys, xs] = (C + T[:, None] * bg).reshape(h, w_, 3)
            final_t[ys, xs] = T.reshape(h, w_)
            last[ys, xs] = lst.reshape(h, w_)
    return image, final_t, last


def backward(mean2d, conic, opacity, color, tile_ptr, tile_ids, width, height, tile, bg,
             alpha_max, alpha_min, t_min, cutoff, final_t, last, grad_image):
    n = len(mean2d)
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_op = np.zeros(n)
    d_color = np.zeros((n, 3))
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            t_idx = ty * tiles_x + tx
            start = int(tile_ptr[t_idx])
            px, py, h, w_ = _tile_pixels(tx, ty, tile, width, height)
            ys, xs = slice(ty * tile, ty * tile + h), slice(tx * tile, tx * tile + w_)
            gi = grad_image[ys, xs].reshape(-1, 3)
            T = final_t[ys, xs].reshape(-1).copy()
            lst = last[ys, xs].reshape(-1)
            acc = T[:, None] * bg
            if lst.max(initial=start) <= start:
                continue
            for k in range(int(lst.max()) - 1, start - 1, -1):
                g = tile_ids[k]
                a, b, c = conic[g]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                G = libm_exp(-0.5 * q)
                raw = opacity[g] * G
                alpha = np.minimum(raw, alpha_max)
                take = (k < lst) & (q <= cutoff) & (alpha >= alpha_min)
                if not take.any():
                    continue
                one_m = 1.0 - alpha
                T = np.where(take, T / one_m, T)
                wgt = np.where(take, alpha * T, 0.0)
                d_color[g] += (wgt[:, None] * gi).sum(axis=0)
                d_alpha = T * (gi @ color[g]) - (acc * gi).sum(axis=1) / one_m
                acc = acc + color[g] * wgt[:, None]
                live = take & (raw <= alpha_max)
                d_alpha = np.where(live, d_alpha, 0.0)
                d_op[g] += (d_alpha * G).sum()
                d_q = -0.5 * G * d_alpha * opacity[g]
                d_mean[g, 0] += (-d_q * (2.0 * a * dx + 2.0 * b * dy)).sum()
                d_mean[g, 1] += (-d_q * (2.0 * b * dx + 2.0 * c * dy)).sum()
                d_conic[g, 0] += (d_q * dx * dx).sum()
                d_conic[g, 1] += (d_q * 2.0 * dx * dy).sum()
                d_conic[g, 2] += (d_q * dy * dy).sum()
    return d_mean, d_conic, d_op, d_color
