"""Training objective and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, NumericError


@dataclass
class LossConfig:
    huber_delta: float = 0.1
    lambda_mouth: float = 40.0
    lambda_perceptual: float = 0.05
    perceptual_start_iter: int = 1500
    use_perceptual: bool = True

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ConfigError(f"huber_delta must be positive, got {self.huber_delta}")
        if self.lambda_mouth < 0 or self.lambda_perceptual < 0:
            raise ConfigError("loss weights must be non-negative")


def huber(residual: float, delta: float) -> float:
    r = abs(residual)
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def _image_pair(target, rendered):
    rendered = ad.as_tensor(rendered)
    target = np.asarray(target, dtype=rendered.data.dtype)
    if target.shape != rendered.shape:
        raise DimensionError(f"image shapes differ: target {target.shape} vs rendered {rendered.shape}")
    return target, rendered


def photometric_loss(target, rendered, mask, cfg: LossConfig) -> ad.Tensor:
    """Mean Huber over the image plus lambda_mouth x mean Huber of the mask-multiplied images.

    Pixels outside the mask still count in the second mean (as zero residual).
    """
    target, rendered = _image_pair(target, rendered)
    mask = np.asarray(mask, dtype=rendered.data.dtype)
    if mask.shape != target.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match image {target.shape[:2]}")
    full = ad.mean(ad.huber(ad.sub(rendered, ad.Tensor(target)), cfg.huber_delta))
    m3 = np.repeat(mask[:, :, None], target.shape[2], axis=2)
    masked = ad.sub(ad.mul(rendered, ad.Tensor(m3)), ad.Tensor(target * m3))
    return ad.add(full, ad.scale(ad.mean(ad.huber(masked, cfg.huber_delta)), cfg.lambda_mouth))


def _levels(img: ad.Tensor):
    out = [img]
    for _ in range(2):
        nxt = out[-1]
        if nxt.shape[0] < 2 or nxt.shape[1] < 2:
            break
        out.append(ad.avg_pool2(nxt))
    return [lv for lv in out if lv.shape[0] >= 2 and lv.shape[1] >= 2]


def perceptual_proxy(target, rendered) -> ad.Tensor:
    """Multi-scale (1, 1/2, 1/4) mean absolute difference of x/y image gradients.

    Stands in for a learned perceptual metric; scales too small for a
    finite difference are skipped.
    """
    target, rendered = _image_pair(target, rendered)
    terms = []
    for lt, lr in zip(_levels(ad.Tensor(target)), _levels(rendered)):
        gx = ad.mean(ad.abs_(ad.sub(ad.diff(lr, 1), ad.Tensor(np.diff(lt.data, axis=1)))))
        gy = ad.mean(ad.abs_(ad.sub(ad.diff(lr, 0), ad.Tensor(np.diff(lt.data, axis=0)))))
        terms.append(ad.scale(ad.add(gx, gy), 0.5))
    if not terms:
        return ad.scale(ad.sum_(rendered), 0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def perceptual_weight(iteration: int, cfg: LossConfig) -> float:
    if not cfg.use_perceptual or iteration < cfg.perceptual_start_iter:
        return 0.0
    return cfg.lambda_perceptual


def total_loss(target, rendered, mask, iteration: int, cfg: LossConfig) -> ad.Tensor:
    loss = photometric_loss(target, rendered, mask, cfg)
    w = perceptual_weight(iteration, cfg)
    if w > 0:
        loss = ad.add(loss, ad.scale(perceptual_proxy(target, rendered), w))
    return loss


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        """``lr`` is a float or a callable mapping parameter name to its rate."""
        rates = {name: (lr(name) if callable(lr) else float(lr)) for name in params}
        return cls(rates, beta1, beta2, eps, 0,
                   {k: np.zeros_like(_value(p)) for k, p in params.items()},
                   {k: np.zeros_like(_value(p)) for k, p in params.items()})


def _value(p) -> np.ndarray:
    return p.data if isinstance(p, ad.Tensor) else p


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``params`` maps names to Parameters (or arrays); ``grads`` maps the same
    names to gradient arrays.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        value = _value(p)
        if g.shape != value.shape or state.m[name].shape != value.shape:
            raise DimensionError(f"Adam: shape mismatch for {name!r}: param {value.shape}, grad {g.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        value -= state.lr[name] * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state
