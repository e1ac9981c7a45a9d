"""End-to-end finite-difference check of every trainable parameter class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .deformation import CROSS_ATTENTION
from .errors import ContractError
from .losses import LossConfig, total_loss
from .scene import default_camera, make_head_scene

PARAM_CLASSES = {
    "opacity": ("gaussian.opacity_logit",),
    "sh": ("gaussian.sh",),
    "rotation": ("gaussian.rotation",),
    "log_scale": ("gaussian.log_scale",),
    "W_Q": ("fusion.w_q",),
    "W_K": ("fusion.w_k",),
    "W_V": ("fusion.w_v",),
    "mlp": ("mlp.",),
}


@dataclass
class GradcheckEntry:
    name: str
    max_rel_error: float
    n_coords: int
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def build_problem(n_gaussians: int = 10, size: int = 16, seed: int = 0, loss_weight: float = 1.0):
    """A small randomized model plus a closure returning the scalar loss tensor."""
    from .training import AvatarModel  # training imports this module's siblings only

    rng = np.random.default_rng([seed, 0x6C])
    grid = int(np.ceil(np.sqrt(n_gaussians))) + 1
    cfg = RunConfig().replace(scene__resolution=size, scene__mesh_lat=6, scene__mesh_lon=8,
                              scene__seed=seed, model__n_gaussians=grid * grid)
    mesh = make_head_scene(seed, cfg.scene)
    probe = AvatarModel(mesh, cfg, CROSS_ATTENTION, rng)
    if probe.count < n_gaussians:
        raise ContractError(f"gradcheck scene only has {probe.count} anchors, asked for {n_gaussians}")
    subset = np.sort(rng.choice(probe.count, n_gaussians, replace=False))
    model = AvatarModel(mesh, cfg, CROSS_ATTENTION, rng, subset=subset)
    n = model.count
    # move away from the zero-initialized, uniform starting point so every path carries gradient
    model.sh.data[...] = rng.normal(0.0, 0.6, model.sh.shape)
    model.opacity_logit.data[...] = rng.uniform(-1.0, 2.0, n)
    model.rotation.data[...] += rng.normal(0.0, 0.1, model.rotation.shape)
    model.log_scale.data[...] += rng.normal(0.0, 0.1, model.log_scale.shape)
    w_out, b_out = model.fusion.layers[-1]
    w_out.data[...] = rng.normal(0.0, 0.02, w_out.shape)
    b_out.data[...] = rng.normal(0.0, 0.02, b_out.shape)
    psi = np.zeros(cfg.scene.psi_dim)
    psi[: cfg.scene.n_blendshapes + 1] = rng.normal(0.0, 0.3, cfg.scene.n_blendshapes + 1)
    cam = default_camera(cfg.scene)
    target = rng.uniform(0.0, 1.0, (size, size, 3))
    mask = (rng.uniform(size=(size, size)) < 0.3).astype(np.float64)
    lcfg = LossConfig(perceptual_start_iter=0)

    def loss_fn() -> ad.Tensor:
        img = model.render_tensor(psi, cam)
        return ad.scale(total_loss(target, img, mask, 1, lcfg), loss_weight)

    return model, loss_fn


def gradcheck(n_gaussians: int = 10, size: int = 16, tolerance: float = 1e-4, h: float = 1e-5,
              seed: int = 0, max_coords: int = 4096, loss_weight: float = 1.0) -> list[GradcheckEntry]:
    """Central differences vs. the tape, one report entry per parameter class.

    Each class checks at most ``max_coords`` coordinates (split evenly over its
    tensors, sampled without replacement); smaller classes are checked in full.
    """
    if ad.get_precision() != "verify":
        raise ContractError("gradcheck needs the 64-bit verification precision mode")
    model, loss_fn = build_problem(n_gaussians, size, seed, loss_weight)
    params = model.parameters()
    model.zero_grad()
    ad.backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}
    rng = np.random.default_rng([seed, 0xFD])
    report = []
    for cls, prefixes in PARAM_CLASSES.items():
        names = [k for k in params if any(k == p or (p.endswith(".") and k.startswith(p)) for p in prefixes)]
        per = max(1, max_coords // len(names))
        a_vals, n_vals = [], []
        for name in names:
            p = params[name]
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, min(per, flat.size), replace=False)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                n_vals.append((up - down) / (2 * h))
                a_vals.append(analytic[name].reshape(-1)[i])
        err = relative_error(np.array(a_vals), np.array(n_vals))
        report.append(GradcheckEntry(cls, err, len(a_vals), err < tolerance))
    return report
