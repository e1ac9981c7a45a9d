"""Procedural head scene standing in for tracked video.

A front-facing ellipsoidal "head" carries K smooth blendshapes; a rigid
slab in front of the lower face (the teeth analog) moves only through the
jaw channel. Ground truth comes from a fixed oracle Gaussian field bound to
the same mesh, plus expression-driven offsets the mesh does not explain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import SceneConfig
from .deformation import AnchorSet, MeshAnchoring, compose_pose, init_anchors_uv
from .errors import ConfigError, DimensionError
from .geometry import SH_C0, Camera, GaussianField, quat_multiply
from .render import render

PHI_MAX = 0.42 * math.pi
THETA_MAX = 0.40 * math.pi
RADII = np.array([0.75, 1.0, 0.8])
SKIN_V_MAX = 0.78


@dataclass
class BlendshapeMesh:
    vertices_rest: np.ndarray  # V x 3
    triangles: np.ndarray  # T x 3
    uv: np.ndarray  # V x 2
    blendshapes: np.ndarray  # K x V x 3
    rigid_vertex_set: np.ndarray  # indices
    jaw_pivot: np.ndarray
    jaw_axis: np.ndarray
    psi_dim: int = 16
    rigid_triangles: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_blendshapes(self) -> int:
        return len(self.blendshapes)

    @property
    def rigid_mask(self) -> np.ndarray:
        m = np.zeros(len(self.vertices_rest), dtype=bool)
        m[self.rigid_vertex_set] = True
        return m


def _grid_triangles(rows: int, cols: int, offset: int) -> list[tuple[int, int, int]]:
    tris = []
    for i in range(rows - 1):
        for j in range(cols - 1):
            v00 = offset + i * cols + j
            v01, v10, v11 = v00 + 1, v00 + cols, v00 + cols + 1
            tris.append((v00, v01, v11))
            tris.append((v00, v11, v10))
    return tris


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def make_head_scene(seed: int, config: SceneConfig | None = None) -> BlendshapeMesh:
    cfg = config or SceneConfig()
    rows, cols = cfg.mesh_lat, cfg.mesh_lon
    if rows < 3 or cols < 3:
        raise ConfigError(f"mesh resolution {rows}x{cols} too small (need >= 3x3)")
    if cfg.n_blendshapes < 0 or cfg.psi_dim < cfg.n_blendshapes + 1:
        raise ConfigError("psi_dim must hold every blendshape weight plus the jaw angle")
    rng = np.random.default_rng([seed, 0x5CE])

    # skin: rows go bottom -> top (theta), columns left -> right (phi)
    theta = np.linspace(-THETA_MAX, THETA_MAX, rows)
    phi = np.linspace(-PHI_MAX, PHI_MAX, cols)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    skin = np.stack([RADII[0] * np.sin(ph) * np.cos(th), RADII[1] * np.sin(th),
                     RADII[2] * np.cos(ph) * np.cos(th)], axis=-1).reshape(-1, 3)
    uu, vv = np.meshgrid(np.linspace(0, 1, cols), np.linspace(0, SKIN_V_MAX, rows))
    skin_uv = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    tris = _grid_triangles(rows, cols, 0)

    # teeth analog: front face + top face of a slab in front of the mouth
    y_mid, half_w, half_h, depth = -0.40, 0.28, 0.09, 0.12
    z_front = RADII[2] * math.cos(math.asin(y_mid / RADII[1])) + 0.06
    tr, tc = 4, 12
    xs = np.linspace(-half_w, half_w, tc)
    front_y = np.linspace(y_mid - half_h, y_mid + half_h, tr)
    fy, fx = np.meshgrid(front_y, xs, indexing="ij")
    front = np.stack([fx.reshape(-1), fy.reshape(-1), np.full(fx.size, z_front)], axis=1)
    fu, fv = np.meshgrid(np.linspace(0.05, 0.95, tc), np.linspace(0.80, 0.91, tr))
    front_uv = np.stack([fu.reshape(-1), fv.reshape(-1)], axis=1)
    # top face rows run back -> front so that its normal points up (+y)
    top_z = np.linspace(z_front - depth, z_front, tr)
    tz, tx = np.meshgrid(top_z, xs, indexing="ij")
    top = np.stack([tx.reshape(-1), np.full(tx.size, y_mid + half_h), tz.reshape(-1)], axis=1)
    tu, tv = np.meshgrid(np.linspace(0.05, 0.95, tc), np.linspace(0.93, 0.99, tr))
    top_uv = np.stack([tu.reshape(-1), tv.reshape(-1)], axis=1)

    n_skin = len(skin)
    front_tris = _grid_triangles(tr, tc, n_skin)
    top_tris = _grid_triangles(tr, tc, n_skin + len(front))
    # flip top winding so the normal faces +y
    top_tris = [(a, c, b) for a, b, c in top_tris]
    first_rigid_tri = len(tris)
    tris = tris + front_tris + top_tris
    vertices = np.concatenate([skin, front, top])
    uv = np.concatenate([skin_uv, front_uv, top_uv])
    rigid = np.arange(n_skin, len(vertices))

    # smooth blendshapes: Gaussian bumps on the skin sphere coordinates
    k = cfg.n_blendshapes
    shapes = np.zeros((k, len(vertices), 3))
    ang = np.stack([th.reshape(-1), ph.reshape(-1)], axis=1)
    for i in range(k):
        center = np.array([rng.uniform(-0.7, 0.6) * THETA_MAX, rng.uniform(-0.7, 0.7) * PHI_MAX])
        radius = rng.uniform(0.25, 0.45)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        d2 = ((ang - center) ** 2).sum(axis=1)
        weight = np.exp(-0.5 * d2 / radius**2)
        shapes[i, :n_skin] = cfg.blendshape_amplitude * weight[:, None] * direction

    return BlendshapeMesh(
        vertices_rest=vertices, triangles=np.asarray(tris, dtype=np.int64), uv=uv, blendshapes=shapes,
        rigid_vertex_set=rigid, jaw_pivot=np.array([0.0, -0.05, -0.15]), jaw_axis=np.array([1.0, 0.0, 0.0]),
        psi_dim=cfg.psi_dim, rigid_triangles=np.arange(first_rigid_tri, len(tris)))


def jaw_channel(mesh: BlendshapeMesh) -> int:
    return mesh.n_blendshapes


def deform_mesh(mesh: BlendshapeMesh, psi) -> np.ndarray:
    """rest + sum_k psi_k B_k, then the rigid set rotated about the jaw pivot by psi[K]."""
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if len(psi) != mesh.psi_dim:
        raise DimensionError(f"psi has length {len(psi)}, expected {mesh.psi_dim}")
    k = mesh.n_blendshapes
    verts = mesh.vertices_rest + np.tensordot(psi[:k], mesh.blendshapes, axes=1) if k else mesh.vertices_rest.copy()
    angle = psi[k]
    if angle != 0.0:
        rot = _rotation(mesh.jaw_axis, angle)
        idx = mesh.rigid_vertex_set
        verts[idx] = (verts[idx] - mesh.jaw_pivot) @ rot.T + mesh.jaw_pivot
    return verts


# ------------------------------------------------------------------ cameras

def default_camera(cfg: SceneConfig, orbit_deg: float = 0.0, elevation_deg: float = 0.0) -> Camera:
    res = cfg.resolution
    f = cfg.focal * res / 64.0
    a, e = math.radians(orbit_deg), math.radians(elevation_deg)
    d = cfg.camera_distance
    eye = np.array([d * math.sin(a) * math.cos(e), d * math.sin(e), d * math.cos(a) * math.cos(e)])
    return Camera.look_at(eye, [0.0, -0.05, 0.0], [0.0, 1.0, 0.0], f, f, res, res)


# ------------------------------------------------------------------ oracle field

@dataclass
class OracleField:
    """Fixed ground-truth Gaussians plus their hidden expression response."""

    anchors: AnchorSet
    anchoring: MeshAnchoring
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    sh: np.ndarray
    rigid: np.ndarray  # bool per Gaussian: anchored on a rigid triangle
    ripple: np.ndarray  # K x N x 3 tangent-frame offset per unit blendshape weight
    jaw_extra: float
    jaw_pivot: np.ndarray
    jaw_axis: np.ndarray
    n_blendshapes: int

    def posed(self, mesh_vertices: np.ndarray, psi) -> GaussianField:
        psi = np.asarray(psi, dtype=np.float64).reshape(-1)
        k = self.n_blendshapes
        frames = self.anchoring.frames(mesh_vertices)
        d_mu = np.tensordot(psi[:k], self.ripple, axes=1) if k else np.zeros((len(self.rigid), 3))
        zeros4 = np.zeros_like(self.rotation)
        zeros3 = np.zeros_like(self.log_scale)
        pose = compose_pose(frames, self.rotation, self.log_scale, d_mu, zeros4, zeros3)
        mu, rot = pose.mu.data.copy(), pose.rotation.data.copy()
        extra = self.jaw_extra * psi[k]
        if extra != 0.0 and self.rigid.any():
            r = _rotation(self.jaw_axis, extra)
            mu[self.rigid] = (mu[self.rigid] - self.jaw_pivot) @ r.T + self.jaw_pivot
            half = 0.5 * extra
            q = np.concatenate([[math.cos(half)], math.sin(half) * self.jaw_axis / np.linalg.norm(self.jaw_axis)])
            rot[self.rigid] = quat_multiply(q, rot[self.rigid])
        return GaussianField(mu, rot, pose.log_scale.data.copy(), self.opacity_logit, self.sh)


def anchor_spacing(mesh: BlendshapeMesh, anchors: AnchorSet, grid: int) -> np.ndarray:
    """Approximate 3D distance between neighbouring UV samples, per anchor."""
    tri = mesh.triangles[anchors.triangle_index]
    p = mesh.vertices_rest[tri]
    t = mesh.uv[tri]
    area3 = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
    area2 = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return np.sqrt(area3 / area2) / grid


def surface_init(mesh: BlendshapeMesh, n_target: int):
    """Anchors plus tangent-aligned rotations and disc-shaped log-scales."""
    anchors = init_anchors_uv(mesh, n_target)
    anchoring = MeshAnchoring(anchors, mesh.vertices_rest, mesh.triangles)
    grid = max(int(math.isqrt(n_target)), 1)
    spacing = anchor_spacing(mesh, anchors, grid)
    log_scale = np.log(spacing[:, None] * np.array([0.8, 0.8, 0.25]))
    return anchors, anchoring, anchoring.canonical_quat.copy(), log_scale


def _texture(uv: np.ndarray, rigid: np.ndarray) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1] / SKIN_V_MAX
    base = np.array([0.82, 0.62, 0.50])
    col = base + 0.06 * np.stack([np.sin(9 * u) * np.cos(7 * v), np.cos(11 * v), np.sin(5 * u + 3 * v)], axis=1)
    for ex in (0.36, 0.64):  # eyes
        d2 = ((u - ex) / 0.07) ** 2 + ((v - 0.66) / 0.045) ** 2
        col = np.where((d2 < 1)[:, None], [0.12, 0.10, 0.14], col)
    brow = (np.abs(v - 0.75) < 0.018) & (np.abs(u - 0.5) > 0.06) & (np.abs(u - 0.5) < 0.22)
    col = np.where(brow[:, None], [0.30, 0.20, 0.15], col)
    lips = ((u - 0.5) / 0.17) ** 2 + ((v - 0.28) / 0.07) ** 2
    col = np.where(((lips > 0.55) & (lips < 1.0))[:, None], [0.70, 0.25, 0.25], col)
    col = np.where((lips <= 0.55)[:, None], [0.25, 0.08, 0.08], col)  # mouth cavity
    stripes = 0.9 + 0.08 * (np.floor(uv[:, 0] * 12) % 2)
    teeth = np.stack([stripes, stripes, stripes * 0.96], axis=1)
    return np.where(rigid[:, None], teeth, col).clip(0.0, 1.0)


def make_oracle_field(mesh: BlendshapeMesh, cfg: SceneConfig, sh_bands: int = 1) -> OracleField:
    rng = np.random.default_rng([cfg.seed, 0x0AC1E])
    anchors, anchoring, rot, log_scale = surface_init(mesh, cfg.oracle_gaussians)
    n = len(anchors)
    rigid = np.isin(anchors.triangle_index, mesh.rigid_triangles)
    uv = np.einsum("nk,nkd->nd", anchors.barycentric, mesh.uv[mesh.triangles[anchors.triangle_index]])
    color = _texture(uv, rigid)
    sh = np.zeros((n, sh_bands, 3))
    sh[:, 0] = (color - 0.5) / SH_C0
    jitter = np.concatenate([np.ones((n, 1)), 0.05 * rng.normal(size=(n, 3))], axis=1)
    rot = quat_multiply(rot, jitter / np.linalg.norm(jitter, axis=1, keepdims=True))
    log_scale = log_scale + 0.1 * rng.normal(size=log_scale.shape)
    opacity = rng.uniform(0.85, 0.95, n)
    logit = np.log(opacity / (1 - opacity))

    k = cfg.n_blendshapes
    ripple = np.zeros((k, n, 3))
    skin = ~rigid
    for i in range(k):
        center = rng.uniform(0.15, 0.85, 2) * [1.0, SKIN_V_MAX]
        w = np.exp(-0.5 * ((uv - center) ** 2).sum(axis=1) / 0.15**2)
        freq = rng.uniform(4.0, 7.0, 2) * 2 * math.pi
        phase = rng.uniform(0, 2 * math.pi, 2)
        ripple[i, skin, 0] = cfg.fine_amplitude * w[skin] * np.cos(freq[0] * uv[skin, 1] + phase[0])
        ripple[i, skin, 1] = cfg.fine_amplitude * w[skin] * np.sin(freq[1] * uv[skin, 0] + phase[1])
    return OracleField(anchors, anchoring, rot, log_scale, logit, sh, rigid, ripple, cfg.jaw_extra,
                       mesh.jaw_pivot.copy(), mesh.jaw_axis.copy(), k)


# ------------------------------------------------------------------ dataset

@dataclass
class Frame:
    image: np.ndarray  # H x W x 3
    mask: np.ndarray  # H x W, 1 where the frontmost surface is rigid
    psi: np.ndarray
    camera: Camera
    index: int
    split: str


@dataclass
class Dataset:
    mesh: BlendshapeMesh
    oracle: OracleField
    frames: list[Frame]
    config: SceneConfig

    @property
    def train(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "train"]

    @property
    def test(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "test"]


def rasterize_rigid_mask(mesh: BlendshapeMesh, vertices: np.ndarray, cam: Camera) -> np.ndarray:
    """Pixel mask of where the frontmost mesh triangle belongs to the rigid set."""
    h, w = cam.height, cam.width
    t = vertices @ cam.rotation.T + cam.translation
    z = t[:, 2]
    zsafe = np.where(z > 1e-6, z, 1e-6)
    px = np.stack([cam.fx * t[:, 0] / zsafe + cam.cx, cam.fy * t[:, 1] / zsafe + cam.cy], axis=1)
    zbuf = np.full((h, w), np.inf)
    owner_rigid = np.zeros((h, w), dtype=bool)
    rigid_tri = np.zeros(len(mesh.triangles), dtype=bool)
    rigid_tri[mesh.rigid_triangles] = True
    # only pixels covered by some rigid triangle can end up 1
    if len(mesh.rigid_triangles) == 0:
        return owner_rigid.astype(np.float64)
    tri_px = px[mesh.triangles]  # T x 3 x 2
    tmin, tmax = tri_px.min(axis=1), tri_px.max(axis=1)
    lo, hi = tmin[mesh.rigid_triangles].min(axis=0), tmax[mesh.rigid_triangles].max(axis=0)
    e1, e2 = tri_px[:, 1] - tri_px[:, 0], tri_px[:, 2] - tri_px[:, 0]
    dets = e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1]
    xs0 = np.maximum(np.ceil(tmin[:, 0]), 0).astype(int)
    xs1 = np.minimum(np.floor(tmax[:, 0]), w - 1).astype(int)
    ys0 = np.maximum(np.ceil(tmin[:, 1]), 0).astype(int)
    ys1 = np.minimum(np.floor(tmax[:, 1]), h - 1).astype(int)
    keep = (np.all(z[mesh.triangles] > 1e-6, axis=1) & np.all(tmax >= lo, axis=1) & np.all(tmin <= hi, axis=1)
            & (xs0 <= xs1) & (ys0 <= ys1) & (np.abs(dets) >= 1e-12))
    for ti in np.nonzero(keep)[0]:
        tri, p, det = mesh.triangles[ti], tri_px[ti], dets[ti]
        x0, x1, y0, y1 = xs0[ti], xs1[ti], ys0[ti], ys1[ti]
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        l1 = ((gx - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (gy - p[0, 1])) / det
        l2 = ((p[1, 0] - p[0, 0]) * (gy - p[0, 1]) - (gx - p[0, 0]) * (p[1, 1] - p[0, 1])) / det
        l0 = 1 - l1 - l2
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        # perspective-correct depth
        inv_z = l0 / z[tri[0]] + l1 / z[tri[1]] + l2 / z[tri[2]]
        depth = 1.0 / inv_z
        region = zbuf[y0:y1 + 1, x0:x1 + 1]
        closer = inside & (depth < region)
        region[closer] = depth[closer]
        owner_rigid[y0:y1 + 1, x0:x1 + 1][closer] = rigid_tri[ti]
    return owner_rigid.astype(np.float64)


def psi_trajectory(n_frames: int, cfg: SceneConfig, seed: int) -> np.ndarray:
    """Smooth random codes; frame 0 is the rest pose (all zeros)."""
    rng = np.random.default_rng([seed, 0x7A1])
    t = np.arange(n_frames) / max(n_frames, 1)
    psi = np.zeros((n_frames, cfg.psi_dim))
    for k in range(cfg.n_blendshapes):
        freqs = rng.uniform(2.0, 12.0, 3)
        amps = rng.uniform(0.2, 0.5, 3)
        psi[:, k] = sum(a * np.sin(2 * math.pi * f * t) for a, f in zip(amps, freqs))
    f_jaw = rng.uniform(4.0, 10.0)
    psi[:, cfg.n_blendshapes] = 0.5 * cfg.jaw_max * (1 - np.cos(2 * math.pi * f_jaw * t))
    return psi


def oracle_render_dataset(mesh: BlendshapeMesh, n_frames: int, cameras, seed: int,
                          cfg: SceneConfig | None = None, oracle: OracleField | None = None,
                          background=(0.0, 0.0, 0.0)) -> Dataset:
    cfg = cfg or SceneConfig()
    oracle = oracle or make_oracle_field(mesh, cfg)
    cameras = list(cameras)
    psi = psi_trajectory(n_frames, cfg, seed)
    n_test = math.ceil(cfg.test_fraction * n_frames)
    frames = []
    for i in range(n_frames):
        cam = cameras[i % len(cameras)]
        verts = deform_mesh(mesh, psi[i])
        img = render(oracle.posed(verts, psi[i]), cam, background).rgb
        mask = rasterize_rigid_mask(mesh, verts, cam)
        frames.append(Frame(img, mask, psi[i].copy(), cam, i, "test" if i >= n_frames - n_test else "train"))
    return Dataset(mesh, oracle, frames, cfg)


def build_dataset(cfg: SceneConfig) -> Dataset:
    """Regenerate the full dataset from its recipe."""
    mesh = make_head_scene(cfg.seed, cfg)
    return oracle_render_dataset(mesh, cfg.n_frames, [default_camera(cfg)], cfg.seed, cfg)
