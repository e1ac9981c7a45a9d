from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import RASTER


@dataclass
class TileBins:
    """CSR layout: fragments of tile t are ``ids[ptr[t]:ptr[t+1]]``."""

    ptr: np.ndarray
    ids: np.ndarray
    tiles_x: int
    tiles_y: int
    tile: int

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.ids[self.ptr[t]:self.ptr[t + 1]]


def depth_order(depth: np.ndarray) -> np.ndarray:
    """Indices sorted by depth ascending, ties by index ascending."""
    return np.lexsort((np.arange(len(depth)), depth))


def pixel_extent(mean2d: np.ndarray, cov2d: np.ndarray, width: int, height: int, sigmas: float = 3.0):
    """Inclusive pixel-index AABB of each fragment's ``sigmas``-sigma ellipse, clipped to the image.

    Empty boxes come back with lo > hi.
    """
    pad = 1e-6
    rx = sigmas * np.sqrt(cov2d[:, 0, 0]) + pad
    ry = sigmas * np.sqrt(cov2d[:, 1, 1]) + pad
    x0 = np.maximum(np.ceil(mean2d[:, 0] - rx), 0)
    x1 = np.minimum(np.floor(mean2d[:, 0] + rx), width - 1)
    y0 = np.maximum(np.ceil(mean2d[:, 1] - ry), 0)
    y1 = np.minimum(np.floor(mean2d[:, 1] + ry), height - 1)
    return x0, x1, y0, y1


def bin_tiles(mean2d, cov2d, depth, valid, width: int, height: int, tile: int = RASTER.tile) -> TileBins:
    """Assign every valid fragment to each tile its 3-sigma screen box touches.

    Lists come out sorted by depth, ties broken by fragment index.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    order = depth_order(np.asarray(depth, dtype=np.float64))
    order = order[np.asarray(valid, dtype=bool)[order]]
    if len(order) == 0:
        return TileBins(np.zeros(n_tiles + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tiles_x, tiles_y, tile)
    x0, x1, y0, y1 = pixel_extent(mean2d[order], cov2d[order], width, height)
    keep = (x0 <= x1) & (y0 <= y1)
    order, x0, x1, y0, y1 = order[keep], x0[keep], x1[keep], y0[keep], y1[keep]
    tx0 = (x0 // tile).astype(np.int64)
    tx1 = (x1 // tile).astype(np.int64)
    ty0 = (y0 // tile).astype(np.int64)
    ty1 = (y1 // tile).astype(np.int64)
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)
    total = int(counts.sum())
    frag = np.repeat(np.arange(len(order)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    oy, ox = np.divmod(local, span_x[frag])
    tile_id = (ty0[frag] + oy) * tiles_x + tx0[frag] + ox
    sort = np.argsort(tile_id, kind="stable")
    ids = order[frag[sort]].astype(np.int64)
    ptr = np.zeros(n_tiles + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(np.bincount(tile_id, minlength=n_tiles))
    return TileBins(ptr, ids, tiles_x, tiles_y, tile)
