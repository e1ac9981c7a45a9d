"""Tile-binned Gaussian splatting with front-to-back alpha compositing.

The per-pixel compositing loop lives in a compiled extension
(``_raster``); when that extension is missing, or ``CAGSPLAT_BACKEND=python``
is set, the numpy fallback in ``_raster_py`` is used instead.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..errors import ContractError, DimensionError
from ..geometry import Camera, GaussianField, Projection, project_gaussians, project_gaussians_vjp
from . import _raster_py
from .binning import TileBins, bin_tiles, depth_order
from .constants import RASTER, RasterConstants

try:
    from . import _raster as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _raster_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def _default_backend() -> str:
    requested = os.environ.get("CAGSPLAT_BACKEND", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(f"CAGSPLAT_BACKEND={requested!r} is not available (have {available_backends()})")
        return requested
    return "compiled" if "compiled" in _BACKENDS else "python"


_active = _default_backend()


def get_backend() -> str:
    return _active


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown rasterizer backend {name!r}; available: {available_backends()}")
    _active = name


def kernels(name: str | None = None):
    return _BACKENDS[name or _active]


@dataclass
class RenderState:
    proj: Projection
    bins: TileBins
    final_t: np.ndarray
    last: np.ndarray
    background: np.ndarray
    width: int
    height: int
    backend: str
    mean2d: np.ndarray
    conic3: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


@dataclass
class ImageBuffer:
    rgb: np.ndarray  # H x W x 3
    alpha: np.ndarray  # H x W accumulated opacity
    state: RenderState | None = None

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass
class FragmentGrads:
    mean2d: np.ndarray  # N x 2
    conic: np.ndarray  # N x 2 x 2, symmetric
    opacity: np.ndarray  # N
    color: np.ndarray  # N x 3


def _kernel_inputs(proj: Projection):
    n = proj.count
    conic3 = np.empty((n, 3))
    conic3[:, 0] = proj.conic[:, 0, 0]
    conic3[:, 1] = proj.conic[:, 0, 1]
    conic3[:, 2] = proj.conic[:, 1, 1]
    return (np.ascontiguousarray(proj.mean2d, dtype=np.float64), conic3,
            np.ascontiguousarray(proj.opacity, dtype=np.float64),
            np.ascontiguousarray(proj.color, dtype=np.float64))


def rasterize(proj: Projection, width: int, height: int, background=(0.0, 0.0, 0.0),
              backend: str | None = None, consts: RasterConstants = RASTER) -> ImageBuffer:
    """Composite projected fragments into an image, keeping state for the backward pass."""
    backend = backend or _active
    bg = np.ascontiguousarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise DimensionError(f"background must be an RGB triple, got shape {bg.shape}")
    bins = bin_tiles(proj.mean2d, proj.cov2d, proj.depth, proj.valid, width, height, consts.tile)
    mean2d, conic3, opacity, color = _kernel_inputs(proj)
    image, final_t, last = _BACKENDS[backend].forward(
        mean2d, conic3, opacity, color, bins.ptr, bins.ids, width, height, consts.tile, bg,
        consts.alpha_max, consts.alpha_min, consts.t_min, consts.cutoff)
    state = RenderState(proj, bins, final_t, last, bg, width, height, backend, mean2d, conic3, opacity, color)
    return ImageBuffer(image, 1.0 - final_t, state)


def render(field: GaussianField, cam: Camera, background=(0.0, 0.0, 0.0), backend: str | None = None) -> ImageBuffer:
    """Render a (posed) Gaussian field from ``cam``."""
    proj = project_gaussians(field.means, field.rotation, field.log_scale, field.opacity_logit, field.sh, cam)
    return rasterize(proj, cam.width, cam.height, background, backend)


def render_backward(grad_image, state: RenderState, consts: RasterConstants = RASTER) -> FragmentGrads:
    """Gradients of sum(grad_image * rgb) w.r.t. the fragment attributes."""
    if state is None:
        raise ContractError("render_backward needs the state saved by a forward render")
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (state.height, state.width, 3):
        raise ContractError(f"grad_image shape {grad_image.shape} does not match rendered image "
                            f"{(state.height, state.width, 3)}")
    d_mean, d_conic3, d_op, d_color = _BACKENDS[state.backend].backward(
        state.mean2d, state.conic3, state.opacity, state.color, state.bins.ptr, state.bins.ids,
        state.width, state.height, consts.tile, state.background,
        consts.alpha_max, consts.alpha_min, consts.t_min, consts.cutoff,
        state.final_t, state.last, grad_image)
    d_conic = np.empty((len(d_conic3), 2, 2))
    d_conic[:, 0, 0] = d_conic3[:, 0]
    d_conic[:, 0, 1] = 0.5 * d_conic3[:, 1]
    d_conic[:, 1, 0] = 0.5 * d_conic3[:, 1]
    d_conic[:, 1, 1] = d_conic3[:, 2]
    return FragmentGrads(d_mean, d_conic, d_op, d_color)


def splat(means: ad.Tensor, rotation: ad.Tensor, log_scale: ad.Tensor, opacity_logit: ad.Tensor,
          sh: ad.Tensor, cam: Camera, background=(0.0, 0.0, 0.0), backend: str | None = None) -> ad.Tensor:
    """Differentiable render: returns the H x W x 3 image as a tape node.

    The ``ImageBuffer`` (with accumulated alpha) is available via ``splat.last_buffer``.
    """
    parents = [ad.as_tensor(t) for t in (means, rotation, log_scale, opacity_logit, sh)]
    data = [np.asarray(p.data, dtype=np.float64) for p in parents]
    proj = project_gaussians(*data, cam)
    buf = rasterize(proj, cam.width, cam.height, background, backend)
    splat.last_buffer = buf

    def vjp(g):
        fg = render_backward(g, buf.state)
        grads = project_gaussians_vjp(proj, fg.mean2d, fg.conic, fg.color, fg.opacity)
        return (grads["means"], grads["rotation"], grads["log_scale"],
                grads["opacity_logit"].reshape(parents[3].shape), grads["sh"])

    return ad.custom(buf.rgb, parents, vjp, "splat")


splat.last_buffer = None

__all__ = [
    "ImageBuffer", "RenderState", "FragmentGrads", "TileBins", "RASTER", "RasterConstants",
    "available_backends", "get_backend", "set_backend", "kernels",
    "bin_tiles", "depth_order", "rasterize", "render", "render_backward", "splat",
]
