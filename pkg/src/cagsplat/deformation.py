"""Surface-anchored Gaussians and the expression-conditioned offset field.

Each Gaussian is bound to a mesh triangle. Its driven position follows the
tracked mesh; a small network then predicts per-Gaussian residuals in
position, rotation and log-scale. In ``cross_attention`` mode the network's
expression input is a per-Gaussian context vector obtained by attending
from the encoded canonical position to the tokenized expression code; in
``concat_baseline`` mode the raw code is concatenated instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .geometry import quat_left_matrix, quat_multiply, rotmat_to_quat

CROSS_ATTENTION = "cross_attention"
CONCAT_BASELINE = "concat_baseline"
MODES = (CROSS_ATTENTION, CONCAT_BASELINE)

DEGENERATE_AREA = 1e-12


# ------------------------------------------------------------------ anchors

@dataclass(frozen=True)
class SurfaceAnchor:
    triangle_index: int
    barycentric: tuple[float, float, float]
    normal_offset: float = 0.0


@dataclass
class AnchorSet:
    """Struct-of-arrays storage for N surface anchors."""

    triangle_index: np.ndarray  # N int64
    barycentric: np.ndarray  # N x 3
    normal_offset: np.ndarray  # N

    def __post_init__(self):
        self.triangle_index = np.asarray(self.triangle_index, dtype=np.int64)
        self.barycentric = np.asarray(self.barycentric, dtype=np.float64).reshape(-1, 3)
        self.normal_offset = np.asarray(self.normal_offset, dtype=np.float64).reshape(-1)
        n = len(self.triangle_index)
        if len(self.barycentric) != n or len(self.normal_offset) != n:
            raise DimensionError("anchor arrays disagree in length")

    def __len__(self) -> int:
        return len(self.triangle_index)

    def __getitem__(self, i: int) -> SurfaceAnchor:
        return SurfaceAnchor(int(self.triangle_index[i]), tuple(self.barycentric[i]), float(self.normal_offset[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_list(cls, anchors) -> "AnchorSet":
        anchors = list(anchors)
        return cls([a.triangle_index for a in anchors], [a.barycentric for a in anchors],
                   [a.normal_offset for a in anchors])

    def validate(self, n_triangles: int) -> None:
        if len(self) and (self.triangle_index.min() < 0 or self.triangle_index.max() >= n_triangles):
            raise ConfigError("anchor triangle index out of range")
        b = self.barycentric
        if np.any(b < 0) or np.any(b > 1) or np.any(np.abs(b.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("anchor barycentric coordinates must be in [0,1] and sum to 1")


def _uv_barycentric(p: np.ndarray, a, b, c):
    v0, v1 = b - a, c - a
    v2 = p - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    den = d00 * d11 - d01 * d01
    d20, d21 = v2 @ v0, v2 @ v1
    l1 = (d11 * d20 - d01 * d21) / den
    l2 = (d00 * d21 - d01 * d20) / den
    return np.stack([1.0 - l1 - l2, l1, l2], axis=1)


def init_anchors_uv(mesh, n_target: int, normal_offset: float = 0.0) -> AnchorSet:
    """Anchor Gaussians on a regular sqrt(N) x sqrt(N) grid in UV space.

    Samples outside every UV triangle are dropped; a sample on a shared edge
    goes to the lowest triangle index.
    """
    uv = np.asarray(mesh.uv, dtype=np.float64)
    tris = np.asarray(mesh.triangles, dtype=np.int64)
    if len(tris) == 0 or len(uv) == 0:
        raise ConfigError("mesh has an empty UV atlas")
    tri_uv = uv[tris]
    e1, e2 = tri_uv[:, 1] - tri_uv[:, 0], tri_uv[:, 2] - tri_uv[:, 0]
    area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    if not np.any(area > 0):
        raise ConfigError("mesh has an empty UV atlas")
    g = int(math.isqrt(max(int(n_target), 0)))
    if g == 0:
        return AnchorSet(np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    ticks = (np.arange(g) + 0.5) / g
    vv, uu = np.meshgrid(ticks, ticks, indexing="ij")
    samples = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
    owner = np.full(len(samples), -1, dtype=np.int64)
    bary = np.zeros((len(samples), 3))
    tol = 1e-12
    for t in range(len(tris)):
        if area[t] <= 0:
            continue
        lo, hi = tri_uv[t].min(axis=0) - tol, tri_uv[t].max(axis=0) + tol
        cand = np.nonzero((owner < 0) & np.all(samples >= lo, axis=1) & np.all(samples <= hi, axis=1))[0]
        if len(cand) == 0:
            continue
        lam = _uv_barycentric(samples[cand], *tri_uv[t])
        inside = np.all(lam >= -tol, axis=1)
        hit = cand[inside]
        lam = np.clip(lam[inside], 0.0, None)
        owner[hit] = t
        bary[hit] = lam / lam.sum(axis=1, keepdims=True)
    keep = owner >= 0
    return AnchorSet(owner[keep], bary[keep], np.full(int(keep.sum()), normal_offset))


def triangle_frames(vertices: np.ndarray, triangles: np.ndarray):
    """Per-triangle rotation [e1 e2 n] (as columns) and area."""
    v = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)]
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    nrm = np.cross(e1, e2)
    dbl_area = np.linalg.norm(nrm, axis=1)
    area = 0.5 * dbl_area
    ok = area >= DEGENERATE_AREA
    e1_len = np.linalg.norm(e1, axis=1)
    t1 = e1 / np.where(ok, e1_len, 1.0)[:, None]
    n = nrm / np.where(ok, dbl_area, 1.0)[:, None]
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2), area


@dataclass
class AnchorFrames:
    """Driven positions and tangent frames of every anchor for one mesh state."""

    mu_mesh: np.ndarray  # N x 3
    rot_tri: np.ndarray  # N x 3 x 3
    quat_delta: np.ndarray  # N x 4, rotation from canonical to driven triangle frame


class MeshAnchoring:
    """Maps a deformed mesh to per-anchor frames.

    Anchors on a triangle whose area collapses below ``DEGENERATE_AREA`` keep
    their last valid frame; ``degenerate_count`` counts such events.
    """

    def __init__(self, anchors: AnchorSet, canonical_vertices: np.ndarray, triangles: np.ndarray):
        self.anchors = anchors
        self.triangles = np.asarray(triangles, dtype=np.int64)
        anchors.validate(len(self.triangles))
        self.degenerate_count = 0
        rot, area = triangle_frames(canonical_vertices, self.triangles)
        if np.any(area[anchors.triangle_index] < DEGENERATE_AREA):
            raise ConfigError("an anchor sits on a degenerate canonical triangle")
        self.canonical_rot = rot[anchors.triangle_index]
        self.canonical_quat = rotmat_to_quat(self.canonical_rot)
        self.canonical = self._frames(canonical_vertices, rot)
        self._last = self.canonical

    def _frames(self, vertices, rot_all) -> AnchorFrames:
        a = self.anchors
        tri_v = np.asarray(vertices, dtype=np.float64)[self.triangles[a.triangle_index]]
        rot = rot_all[a.triangle_index]
        mu = np.einsum("nk,nkd->nd", a.barycentric, tri_v) + a.normal_offset[:, None] * rot[:, :, 2]
        q = quat_multiply(rotmat_to_quat(rot), self.canonical_quat * np.array([1.0, -1.0, -1.0, -1.0]))
        return AnchorFrames(mu, rot, q)

    def frames(self, vertices: np.ndarray, update: bool = True) -> AnchorFrames:
        """``update=False`` leaves the fallback state untouched (safe for concurrent evaluation)."""
        rot_all, area = triangle_frames(vertices, self.triangles)
        ok = area[self.anchors.triangle_index] >= DEGENERATE_AREA
        out = self._frames(vertices, rot_all)
        if not ok.all():
            out.mu_mesh[~ok] = self._last.mu_mesh[~ok]
            out.rot_tri[~ok] = self._last.rot_tri[~ok]
            out.quat_delta[~ok] = self._last.quat_delta[~ok]
            if update:
                self.degenerate_count += int((~ok).sum())
        if update:
            self._last = out
        return out


# ------------------------------------------------------------------ encodings

def positional_encoding(x, n_freqs: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)] per coordinate."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = x[:, :, None] * freqs  # N x 3 x L
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=3).reshape(x.shape[0], x.shape[1], 2 * n_freqs)
    return np.concatenate([x[:, :, None], sc], axis=2).reshape(x.shape[0], -1)


def box_normalize(points: np.ndarray) -> np.ndarray:
    """Map points into [-1, 1]^3 by their bounding box (one uniform scale, centered)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return points.copy()
    lo, hi = points.min(axis=0), points.max(axis=0)
    half = 0.5 * float((hi - lo).max())
    return (points - 0.5 * (lo + hi)) / (half if half > 0 else 1.0)


def pe_width(n_freqs: int) -> int:
    return 3 * (1 + 2 * n_freqs)


def tokenize_expression(psi, n_tokens: int) -> np.ndarray:
    """Chunk the expression code into ``n_tokens`` consecutive rows."""
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if n_tokens <= 0 or len(psi) % n_tokens:
        raise ConfigError(f"expression dimension {len(psi)} is not divisible by token count {n_tokens}")
    return psi.reshape(n_tokens, len(psi) // n_tokens)


# ------------------------------------------------------------------ fusion network

@dataclass
class FusionConfig:
    mode: str = CROSS_ATTENTION
    psi_dim: int = 16
    n_tokens: int = 4
    d_k: int = 32
    d_v: int = 32
    pe_freqs: int = 6
    hidden: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown conditioning mode {self.mode!r}; expected one of {MODES}")
        if self.psi_dim % self.n_tokens:
            raise ConfigError(f"psi_dim {self.psi_dim} is not divisible by n_tokens {self.n_tokens}")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def d_tok(self) -> int:
        return self.psi_dim // self.n_tokens

    @property
    def d_pe(self) -> int:
        return pe_width(self.pe_freqs)

    @property
    def mlp_in(self) -> int:
        return self.d_pe + (self.d_v if self.mode == CROSS_ATTENTION else self.psi_dim)


OFFSET_WIDTH = 3 + 4 + 3


@dataclass
class FusionParams:
    config: FusionConfig
    w_q: ad.Parameter | None
    w_k: ad.Parameter | None
    w_v: ad.Parameter | None
    layers: list[tuple[ad.Parameter, ad.Parameter]] = field(default_factory=list)

    @classmethod
    def init(cls, config: FusionConfig, rng: np.random.Generator) -> "FusionParams":
        def glorot(fan_in, fan_out, name):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            return ad.Parameter(rng.uniform(-lim, lim, (fan_in, fan_out)), name)

        w_q = w_k = w_v = None
        if config.mode == CROSS_ATTENTION:
            w_q = glorot(config.d_pe, config.d_k, "fusion.w_q")
            w_k = glorot(config.d_tok, config.d_k, "fusion.w_k")
            w_v = glorot(config.d_tok, config.d_v, "fusion.w_v")
        widths = [config.mlp_in, *config.hidden]
        layers = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            w = ad.Parameter(rng.normal(0.0, math.sqrt(2.0 / fi), (fi, fo)), f"mlp.{i}.weight")
            layers.append((w, ad.Parameter(np.zeros(fo), f"mlp.{i}.bias")))
        i = len(layers)
        layers.append((ad.Parameter(np.zeros((widths[-1], OFFSET_WIDTH)), f"mlp.{i}.weight"),
                       ad.Parameter(np.zeros(OFFSET_WIDTH), f"mlp.{i}.bias")))
        return cls(config, w_q, w_k, w_v, layers)

    def parameters(self) -> dict[str, ad.Parameter]:
        out = {}
        for p in (self.w_q, self.w_k, self.w_v):
            if p is not None:
                out[p.name] = p
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out


def attention_weights(pe, tokens, params: FusionParams) -> ad.Tensor:
    """Softmax(q K^T / sqrt(d_k)) for every Gaussian, N x L_tok."""
    pe, tokens = ad.as_tensor(pe), ad.as_tensor(tokens)
    if params.w_q is None:
        raise ConfigError("attention weights requested in concat_baseline mode")
    if pe.shape[1] != params.w_q.shape[0] or tokens.shape[1] != params.w_k.shape[0]:
        raise DimensionError(f"attention: pe {pe.shape} / tokens {tokens.shape} do not fit "
                             f"W_Q {params.w_q.shape} / W_K {params.w_k.shape}")
    q = pe @ params.w_q
    k = tokens @ params.w_k
    scores = ad.scale(q @ k.T, 1.0 / math.sqrt(params.w_k.shape[1]))
    return ad.softmax(scores, axis=1)


def cross_attention(pe, tokens, params: FusionParams) -> ad.Tensor:
    """Context features c_psi (N x d_v): each encoded position queries the expression tokens."""
    tokens = ad.as_tensor(tokens)
    weights = attention_weights(pe, tokens, params)
    return weights @ (tokens @ params.w_v)


def mlp(x: ad.Tensor, layers) -> ad.Tensor:
    n = x.shape[0]
    for i, (w, b) in enumerate(layers):
        x = x @ w + ad.repeat_rows(b, n)
        if i < len(layers) - 1:
            x = ad.relu(x)
    return x


def predict_offsets(cond, pe, params: FusionParams):
    """(d_mu, d_rot, d_log_scale) from concat(conditioning, positional encoding)."""
    cond, pe = ad.as_tensor(cond), ad.as_tensor(pe)
    out = mlp(ad.concat([cond, pe], axis=1), params.layers)
    return out[:, 0:3], out[:, 3:7], out[:, 7:10]


def fusion_offsets(pe: np.ndarray, psi: np.ndarray, params: FusionParams):
    """Run the configured conditioning path end to end."""
    cfg = params.config
    psi = np.asarray(psi, dtype=np.float64).reshape(-1)
    if len(psi) != cfg.psi_dim:
        raise DimensionError(f"expression code has length {len(psi)}, expected {cfg.psi_dim}")
    pe_t = ad.Tensor(pe)
    if cfg.mode == CROSS_ATTENTION:
        cond = cross_attention(pe_t, ad.Tensor(tokenize_expression(psi, cfg.n_tokens)), params)
    else:
        cond = ad.Tensor(np.tile(psi, (len(pe), 1)))
    return predict_offsets(cond, pe_t, params)


# ------------------------------------------------------------------ posing

@dataclass
class PosedGaussians:
    mu: ad.Tensor  # N x 3
    rotation: ad.Tensor  # N x 4, unit
    log_scale: ad.Tensor  # N x 3


def compose_pose(frames: AnchorFrames, rotation, log_scale, d_mu, d_rot, d_log_scale) -> PosedGaussians:
    """mu = mu_M + R_tri d_mu;  r = normalize(q_tri * (r + d_r));  s = s + d_s (log domain)."""
    rotation, log_scale = ad.as_tensor(rotation), ad.as_tensor(log_scale)
    mu = ad.add(ad.Tensor(frames.mu_mesh), ad.bmv(frames.rot_tri, ad.as_tensor(d_mu)))
    rot = ad.normalize_rows(ad.bmv(quat_left_matrix(frames.quat_delta), ad.add(rotation, d_rot)))
    return PosedGaussians(mu, rot, ad.add(log_scale, d_log_scale))


def pose_gaussians(rotation, log_scale, anchoring: MeshAnchoring, vertices_deformed, offsets,
                   update: bool = True) -> PosedGaussians:
    frames = anchoring.frames(vertices_deformed, update)
    return compose_pose(frames, rotation, log_scale, *offsets)
