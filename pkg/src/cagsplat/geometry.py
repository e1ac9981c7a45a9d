"""3D Gaussian primitive math: rotation, covariance, screen projection, SH color.

All functions are batched over a leading axis of primitives and come with a
matching ``*_vjp`` that maps an output cotangent to input cotangents.
Quaternions are stored ``(w, x, y, z)``. View space follows the pinhole
convention x right, y down, z forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
MIN_COV2D_DET = 1e-12


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_view: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.world_to_view = np.asarray(self.world_to_view, dtype=np.float64)
        if self.world_to_view.shape != (4, 4):
            raise ConfigError(f"world_to_view must be 4x4, got {self.world_to_view.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        r = self.rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ConfigError("world_to_view rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_view[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_view[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx: float, fy: float, width: int, height: int,
                cx: float | None = None, cy: float | None = None) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w2v = np.eye(4)
        w2v[:3, :3] = rot
        w2v[:3, 3] = -rot @ eye
        return cls(fx, fy, (width - 1) / 2.0 if cx is None else cx,
                   (height - 1) / 2.0 if cy is None else cy, w2v, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "world_to_view": self.world_to_view.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["world_to_view"]), d["width"], d["height"])


@dataclass
class GaussianField:
    """Per-primitive parameters in plain arrays.

    ``means`` holds canonical positions for a canonical field and posed
    positions once the field has been deformed.
    """

    means: np.ndarray  # N x 3
    rotation: np.ndarray  # N x 4
    log_scale: np.ndarray  # N x 3
    opacity_logit: np.ndarray  # N
    sh: np.ndarray  # N x B x 3

    def __post_init__(self):
        n = len(self.means)
        for name in ("rotation", "log_scale", "opacity_logit", "sh"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"GaussianField.{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.sh.ndim != 3 or self.sh.shape[1] not in (1, 4) or self.sh.shape[2] != 3:
            raise ConfigError(f"sh coefficients must be N x {{1,4}} x 3, got {self.sh.shape}")

    @property
    def count(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, sh_bands: int = 1) -> "GaussianField":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, sh_bands, 3)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ------------------------------------------------------------------ rotations

def _normalize_quat(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError("zero quaternion cannot be normalized")
    return q / norm, norm


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion, shape (..., 3, 3)."""
    u, _ = _normalize_quat(q)
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    r = np.empty(u.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_to_rotmat_vjp(q, d_r: np.ndarray) -> np.ndarray:
    u, norm = _normalize_quat(q)
    w, x, y, z = (u[..., i] for i in range(4))
    g = d_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    du = np.stack([dw, dx, dy, dz], axis=-1)
    return (du - u * (u * du).sum(axis=-1, keepdims=True)) / norm


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(a) -> np.ndarray:
    """Matrix L(a) with L(a) @ b == quat_multiply(a, b)."""
    a = np.asarray(a, dtype=np.float64)
    w, x, y, z = (a[..., i] for i in range(4))
    rows = [
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotmat_to_quat(r) -> np.ndarray:
    """Unit quaternion (w >= 0) of a rotation matrix, batched."""
    r = np.asarray(r, dtype=np.float64)
    m = r.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = m00 + m11 + m22
    # pick the numerically largest component as pivot
    cand = np.stack([tr, m00, m11, m22], axis=1)
    pivot = np.argmax(cand, axis=1)
    s = 2.0 * np.sqrt(np.maximum(1.0 + np.choose(pivot, [tr, 2 * m00 - tr, 2 * m11 - tr, 2 * m22 - tr]), 1e-300))
    a = m[:, 2, 1] - m[:, 1, 2]
    b = m[:, 0, 2] - m[:, 2, 0]
    c = m[:, 1, 0] - m[:, 0, 1]
    xy = m[:, 0, 1] + m[:, 1, 0]
    xz = m[:, 0, 2] + m[:, 2, 0]
    yz = m[:, 1, 2] + m[:, 2, 1]
    q = np.empty((len(m), 4))
    q[:] = np.choose(pivot[:, None], [
        np.stack([0.25 * s, a / s, b / s, c / s], axis=1),
        np.stack([a / s, 0.25 * s, xy / s, xz / s], axis=1),
        np.stack([b / s, xy / s, 0.25 * s, yz / s], axis=1),
        np.stack([c / s, xz / s, yz / s, 0.25 * s], axis=1),
    ])
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(r.shape[:-2] + (4,))


# ------------------------------------------------------------------ covariance

def build_covariance(q, log_s) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_s))."""
    m = quat_to_rotmat(q) * np.exp(np.asarray(log_s, dtype=np.float64))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance_vjp(q, log_s, d_sigma):
    r = quat_to_rotmat(q)
    s = np.exp(np.asarray(log_s, dtype=np.float64))
    m = r * s[..., None, :]
    d_m = (d_sigma + np.swapaxes(d_sigma, -1, -2)) @ m
    d_r = d_m * s[..., None, :]
    d_s = (d_m * r).sum(axis=-2)
    return quat_to_rotmat_vjp(q, d_r), d_s * s


def _jacobian(t: np.ndarray, cam: Camera) -> np.ndarray:
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    j = np.zeros(t.shape[:-1] + (2, 3))
    j[..., 0, 0] = cam.fx / z
    j[..., 0, 2] = -cam.fx * x / (z * z)
    j[..., 1, 1] = cam.fy / z
    j[..., 1, 2] = -cam.fy * y / (z * z)
    return j


def project_covariance(sigma, mean_view, cam: Camera, floor: float = COV2D_FLOOR) -> np.ndarray:
    """Screen-space covariance J W Sigma W^T J^T plus a diagonal low-pass floor.

    Only the rotation block of the view transform acts on a covariance.
    Callers cull primitives with view depth <= NEAR_PLANE beforehand.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(mean_view, dtype=np.float64)
    w = cam.rotation
    j = _jacobian(t, cam)
    t_mat = j @ w
    out = t_mat @ sigma @ np.swapaxes(t_mat, -1, -2)
    out[..., 0, 0] += floor
    out[..., 1, 1] += floor
    # exact symmetry regardless of rounding in the triple product
    off = 0.5 * (out[..., 0, 1] + out[..., 1, 0])
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    return out


def project_covariance_vjp(sigma, mean_view, cam: Camera, d_cov2d):
    """Returns (d_sigma, d_mean_view)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(mean_view, dtype=np.float64)
    w = cam.rotation
    j = _jacobian(t, cam)
    v = w @ sigma @ w.T
    g = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, -1, -2))
    d_sigma = w.T @ (np.swapaxes(j, -1, -2) @ g @ j) @ w
    d_j = 2.0 * g @ j @ v
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    fx, fy = cam.fx, cam.fy
    z2 = z * z
    z3 = z2 * z
    d_t = np.stack([
        d_j[..., 0, 2] * (-fx / z2),
        d_j[..., 1, 2] * (-fy / z2),
        d_j[..., 0, 0] * (-fx / z2) + d_j[..., 0, 2] * (2 * fx * x / z3)
        + d_j[..., 1, 1] * (-fy / z2) + d_j[..., 1, 2] * (2 * fy * y / z3),
    ], axis=-1)
    return d_sigma, d_t


def invert_2x2(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]
    det = a * c - b * b
    safe = np.where(det > MIN_COV2D_DET, det, 1.0)
    inv = np.empty_like(m)
    inv[..., 0, 0] = c / safe
    inv[..., 0, 1] = -b / safe
    inv[..., 1, 0] = -b / safe
    inv[..., 1, 1] = a / safe
    return inv, det


def eval_density(d, sigma2d_inv) -> np.ndarray:
    """exp(-1/2 d^T Sigma'^-1 d) for pixel offsets d."""
    d = np.asarray(d, dtype=np.float64)
    m = np.asarray(sigma2d_inv, dtype=np.float64)
    q = np.einsum("...i,...ij,...j->...", d, m, d)
    return np.exp(-0.5 * q)


# ------------------------------------------------------------------ color

def eval_sh_color(coeffs, view_dir) -> np.ndarray:
    """Degree-0/1 real SH color with +0.5 offset, clamped below at 0."""
    return _sh_raw(coeffs, view_dir).clip(min=0.0)


def _sh_raw(coeffs, view_dir) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    bands = coeffs.shape[-2]
    if bands not in (1, 4):
        raise ConfigError(f"unsupported SH band count {bands}; only degree 0 (1) or 1 (4)")
    out = SH_C0 * coeffs[..., 0, :] + 0.5
    if bands == 4:
        d = np.asarray(view_dir, dtype=np.float64)
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        out = out - SH_C1 * y * coeffs[..., 1, :] + SH_C1 * z * coeffs[..., 2, :] - SH_C1 * x * coeffs[..., 3, :]
    return out


def eval_sh_color_vjp(coeffs, view_dir, d_color):
    """Returns (d_coeffs, d_view_dir); d_view_dir is zero for degree 0."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    raw = _sh_raw(coeffs, view_dir)
    g = np.where(raw < 0.0, 0.0, d_color)
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[..., 0, :] = SH_C0 * g
    d_dir = np.zeros(g.shape[:-1] + (3,))
    if coeffs.shape[-2] == 4:
        d = np.asarray(view_dir, dtype=np.float64)
        x, y, z = d[..., 0:1], d[..., 1:2], d[..., 2:3]
        d_coeffs[..., 1, :] = -SH_C1 * y * g
        d_coeffs[..., 2, :] = SH_C1 * z * g
        d_coeffs[..., 3, :] = -SH_C1 * x * g
        d_dir[..., 0] = -SH_C1 * (coeffs[..., 3, :] * g).sum(-1)
        d_dir[..., 1] = -SH_C1 * (coeffs[..., 1, :] * g).sum(-1)
        d_dir[..., 2] = SH_C1 * (coeffs[..., 2, :] * g).sum(-1)
    return d_coeffs, d_dir


# ------------------------------------------------------------------ full projection

@dataclass
class Projection:
    """Screen-space fragments for a batch of Gaussians plus saved intermediates."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    valid: np.ndarray
    saved: dict = field(default_factory=dict, repr=False)

    @property
    def count(self) -> int:
        return len(self.depth)


def project_gaussians(means, rotation, log_scale, opacity_logit, sh, cam: Camera) -> Projection:
    means = np.asarray(means, dtype=np.float64)
    n = len(means)
    t = means @ cam.rotation.T + cam.translation
    valid = t[:, 2] > NEAR_PLANE
    t_safe = np.where(valid[:, None], t, np.array([0.0, 0.0, 1.0]))
    sigma = build_covariance(rotation, log_scale)
    cov2d = project_covariance(sigma, t_safe, cam)
    conic, det = invert_2x2(cov2d)
    valid &= det > MIN_COV2D_DET
    z = t_safe[:, 2]
    mean2d = np.stack([cam.fx * t_safe[:, 0] / z + cam.cx, cam.fy * t_safe[:, 1] / z + cam.cy], axis=1)
    dirs = means - cam.center
    dir_norm = np.linalg.norm(dirs, axis=1, keepdims=True)
    dir_norm = np.where(dir_norm > 0, dir_norm, 1.0)
    view_dir = dirs / dir_norm
    color = eval_sh_color(sh, view_dir) if n else np.zeros((0, 3))
    opacity = sigmoid(np.asarray(opacity_logit, dtype=np.float64).reshape(n))
    saved = dict(means=means, rotation=np.asarray(rotation, dtype=np.float64), log_scale=np.asarray(log_scale, dtype=np.float64),
                 sh=np.asarray(sh, dtype=np.float64), t=t_safe, sigma=sigma, view_dir=view_dir, dir_norm=dir_norm, cam=cam)
    return Projection(mean2d, cov2d, conic, t[:, 2], color, opacity, valid, saved)


def project_gaussians_vjp(proj: Projection, d_mean2d, d_conic, d_color, d_opacity) -> dict:
    """Cotangents of the fragment attributes back to the 3D parameters.

    ``d_conic`` is the gradient w.r.t. the symmetric 2x2 inverse covariance.
    Culled primitives receive zero gradient.
    """
    s = proj.saved
    cam: Camera = s["cam"]
    valid = proj.valid
    vm = valid[:, None]
    t = s["t"]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]

    # conic = inv(cov2d)  ->  d_cov2d = -conic^T d_conic conic^T
    d_conic = np.where(valid[:, None, None], d_conic, 0.0)
    d_cov2d = -proj.conic @ d_conic @ proj.conic
    d_sigma, d_t = project_covariance_vjp(s["sigma"], t, cam, d_cov2d)
    d_m2 = np.where(vm, d_mean2d, 0.0)
    d_t = d_t + np.stack([
        d_m2[:, 0] * cam.fx / z,
        d_m2[:, 1] * cam.fy / z,
        -d_m2[:, 0] * cam.fx * x / (z * z) - d_m2[:, 1] * cam.fy * y / (z * z),
    ], axis=1)
    d_means = d_t @ cam.rotation
    d_rot, d_log_scale = build_covariance_vjp(s["rotation"], s["log_scale"], d_sigma)

    d_color = np.where(vm, d_color, 0.0)
    d_sh, d_dir = eval_sh_color_vjp(s["sh"], s["view_dir"], d_color)
    u = s["view_dir"]
    d_means = d_means + (d_dir - u * (u * d_dir).sum(axis=1, keepdims=True)) / s["dir_norm"]

    d_op = np.where(valid, d_opacity, 0.0)
    d_logit = d_op * proj.opacity * (1.0 - proj.opacity)
    return dict(means=d_means, rotation=d_rot, log_scale=d_log_scale, opacity_logit=d_logit, sh=d_sh)
