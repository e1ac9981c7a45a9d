"""Model assembly, the training loop, evaluation and the conditioning ablation."""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .config import RunConfig
from .deformation import (
    CONCAT_BASELINE, CROSS_ATTENTION, MODES, AnchorSet, box_normalize, FusionConfig, FusionParams, MeshAnchoring,
    fusion_offsets, pose_gaussians, positional_encoding,
)
from .errors import ConfigError, NumericError
from .geometry import NEAR_PLANE, SH_C0, GaussianField, quat_left_matrix
from .losses import AdamState, adam_step, total_loss
from .metrics import image_metrics
from .render import render, splat
from .scene import BlendshapeMesh, Dataset, Frame, build_dataset, deform_mesh, make_head_scene, surface_init

BACKGROUND = (0.0, 0.0, 0.0)
METRICS_HEADER = ("iter", "split", "L1", "PSNR", "SSIM", "L1_masked", "loss")
MODE_ALIASES = {"concat": CONCAT_BASELINE, "cross": CROSS_ATTENTION}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"unknown conditioning mode {mode!r}; expected one of {sorted(MODES)}")
    return mode


def worker_count() -> int:
    """Threads for evaluation; ``CAG_THREADS`` caps it (0 or unset = one per CPU)."""
    raw = os.environ.get("CAG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CAG_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError(f"CAG_THREADS must be >= 0, got {n}")
    return n or (os.cpu_count() or 1)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


class AvatarModel:
    """Mesh-anchored Gaussians plus the expression-conditioned offset network."""

    def __init__(self, mesh: BlendshapeMesh, cfg: RunConfig, mode: str, rng: np.random.Generator,
                 subset: np.ndarray | None = None):
        """``subset`` optionally keeps only these indices of the UV-grid anchors."""
        self.mesh = mesh
        self.config = cfg
        self.mode = canonical_mode(mode)
        anchors, anchoring, rot, log_scale = surface_init(mesh, cfg.model.n_gaussians)
        if subset is not None:
            subset = np.asarray(subset, dtype=np.int64)
            anchors = AnchorSet(anchors.triangle_index[subset], anchors.barycentric[subset],
                                anchors.normal_offset[subset])
            anchoring = MeshAnchoring(anchors, mesh.vertices_rest, mesh.triangles)
            rot, log_scale = rot[subset], log_scale[subset]
        if len(anchors) == 0:
            raise ConfigError("model.n_gaussians is too small: no anchor landed on the UV atlas")
        self.anchors = anchors
        self.anchoring = anchoring
        n = len(anchors)
        self.mu_canonical = anchoring.canonical.mu_mesh.copy()
        self.pe = positional_encoding(box_normalize(self.mu_canonical), cfg.model.pe_freqs)
        bands = 1 if cfg.model.sh_degree == 0 else 4
        self.rotation = ad.Parameter(rot, "gaussian.rotation")
        self.log_scale = ad.Parameter(log_scale, "gaussian.log_scale")
        self.opacity_logit = ad.Parameter(np.full(n, _logit(cfg.model.init_opacity)), "gaussian.opacity_logit")
        self.sh = ad.Parameter(np.zeros((n, bands, 3)), "gaussian.sh")
        self.fusion = FusionParams.init(fusion_config(cfg, self.mode), rng)

    @property
    def count(self) -> int:
        return len(self.anchors)

    def parameters(self) -> dict[str, ad.Parameter]:
        out = {p.name: p for p in (self.rotation, self.log_scale, self.opacity_logit, self.sh)}
        out.update(self.fusion.parameters())
        return out

    def learning_rate(self, name: str) -> float:
        o = self.config.optim
        return {"gaussian.rotation": o.lr_rotation, "gaussian.log_scale": o.lr_scale,
                "gaussian.opacity_logit": o.lr_opacity, "gaussian.sh": o.lr_sh}.get(name, o.lr_fusion)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def posed(self, psi, update: bool = True):
        verts = deform_mesh(self.mesh, psi)
        offsets = fusion_offsets(self.pe, psi, self.fusion)
        return pose_gaussians(self.rotation, self.log_scale, self.anchoring, verts, offsets, update)

    def render_tensor(self, psi, cam, background=BACKGROUND) -> ad.Tensor:
        p = self.posed(psi)
        return splat(p.mu, p.rotation, p.log_scale, self.opacity_logit, self.sh, cam, background)

    def render_image(self, psi, cam, background=BACKGROUND) -> np.ndarray:
        """Forward render without touching the anchoring fallback state."""
        p = self.posed(psi, update=False)
        field_ = GaussianField(p.mu.data, p.rotation.data, p.log_scale.data, self.opacity_logit.data, self.sh.data)
        return render(field_, cam, background).rgb

    def anchored_field(self, psi) -> GaussianField:
        """The mesh-anchored field with no learned offsets, assembled directly in numpy."""
        frames = self.anchoring.frames(deform_mesh(self.mesh, psi), update=False)
        q = np.einsum("nij,nj->ni", quat_left_matrix(frames.quat_delta), self.rotation.data)
        q = q / np.sqrt((q * q).sum(axis=1, keepdims=True))
        return GaussianField(frames.mu_mesh, q, self.log_scale.data.copy(), self.opacity_logit.data, self.sh.data)

    def init_colors(self, frame: Frame) -> None:
        """Set the SH base color of each Gaussian to the pixel its anchor projects to in ``frame``."""
        cam = frame.camera
        mu = self.anchored_field(frame.psi).means
        t = mu @ cam.rotation.T + cam.translation
        z = np.maximum(t[:, 2], NEAR_PLANE)
        x = np.clip(np.rint(cam.fx * t[:, 0] / z + cam.cx), 0, cam.width - 1).astype(np.int64)
        y = np.clip(np.rint(cam.fy * t[:, 1] / z + cam.cy), 0, cam.height - 1).astype(np.int64)
        color = np.clip(frame.image[y, x], 0.02, 0.98)
        self.sh.data[:, 0, :] = (color - 0.5) / SH_C0

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        if missing or extra:
            raise ckpt_io.CheckpointError(
                f"checkpoint tensors do not match the model: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if tensors[name].shape != p.data.shape:
                raise ckpt_io.CheckpointError(f"tensor {name!r}: checkpoint shape {tensors[name].shape}, "
                                              f"model shape {p.data.shape}")
            p.data[...] = tensors[name]


def fusion_config(cfg: RunConfig, mode: str) -> FusionConfig:
    s, m = cfg.scene, cfg.model
    return FusionConfig(mode=mode, psi_dim=s.psi_dim, n_tokens=s.n_tokens, d_k=m.d_k, d_v=m.d_v,
                        pe_freqs=m.pe_freqs, hidden=tuple(m.mlp_widths))


def model_rng(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.scene.seed, 0xF05])


@dataclass
class TrainState:
    config: RunConfig
    mode: str
    iteration: int
    model: AvatarModel
    adam: AdamState
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @classmethod
    def initial(cls, cfg: RunConfig, mode: str, mesh: BlendshapeMesh | None = None,
                color_frame: Frame | None = None) -> "TrainState":
        mode = canonical_mode(mode)
        mesh = mesh or make_head_scene(cfg.scene.seed, cfg.scene)
        rng = model_rng(cfg)
        model = AvatarModel(mesh, cfg, mode, rng)
        if color_frame is not None and cfg.model.init_color_from_data:
            model.init_colors(color_frame)
        o = cfg.optim
        adam = AdamState.for_params(model.parameters(), model.learning_rate, o.beta1, o.beta2, o.eps)
        return cls(cfg, mode, 0, model, adam, rng)

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        meta = {"iteration": self.iteration, "mode": self.mode, "config": self.config.to_dict(),
                "history": self.history, "losses": self.losses, "n_gaussians": self.model.count}
        adam = AdamState(dict(self.adam.lr), self.adam.beta1, self.adam.beta2, self.adam.eps, self.adam.step,
                         {k: v.copy() for k, v in self.adam.m.items()}, {k: v.copy() for k, v in self.adam.v.items()})
        return ckpt_io.Checkpoint(self.model.tensors(), adam, self.rng.bit_generator.state, meta)

    @classmethod
    def from_checkpoint(cls, ck: ckpt_io.Checkpoint, mesh: BlendshapeMesh | None = None) -> "TrainState":
        meta = ck.meta
        try:
            cfg = RunConfig.from_dict(meta["config"])
            mode, iteration = meta["mode"], int(meta["iteration"])
        except KeyError as exc:
            raise ckpt_io.CheckpointError(f"checkpoint metadata lacks {exc}") from exc
        state = cls.initial(cfg, mode, mesh)
        state.model.load_tensors(ck.tensors)
        if set(ck.adam.m) != set(state.model.parameters()):
            raise ckpt_io.CheckpointError("optimizer state does not match the model parameters")
        state.adam = ck.adam
        state.rng.bit_generator.state = ck.rng_state
        state.iteration = iteration
        state.history = list(meta.get("history", []))
        state.losses = [float(x) for x in meta.get("losses", [])]
        return state


def load_state(path, mesh: BlendshapeMesh | None = None) -> TrainState:
    return TrainState.from_checkpoint(ckpt_io.load(path), mesh)


# ------------------------------------------------------------------ evaluation

def _frame_result(model: AvatarModel, frame: Frame, iteration: int):
    img = model.render_image(frame.psi, frame.camera)
    m = image_metrics(img, frame.image)
    diff = np.abs(img - frame.image)
    masked = float((diff * frame.mask[:, :, None]).sum())
    loss = total_loss(frame.image, img, frame.mask, iteration, model.config.loss).item()
    return m, masked, float(frame.mask.sum()) * diff.shape[2], loss


def evaluate(model: AvatarModel, frames: list[Frame], iteration: int = 0, threads: int | None = None) -> dict:
    """Mean L1 / PSNR / SSIM / loss over ``frames``; L1_masked pools all rigid-mask pixels."""
    if not frames:
        raise ConfigError("evaluation needs at least one test frame")
    threads = threads or worker_count()
    if threads > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(frames))) as pool:
            results = list(pool.map(lambda f: _frame_result(model, f, iteration), frames))
    else:
        results = [_frame_result(model, f, iteration) for f in frames]
    out = {k: float(np.mean([r[0][k] for r in results])) for k in ("L1", "PSNR", "SSIM")}
    masked_sum = sum(r[1] for r in results)
    masked_n = sum(r[2] for r in results)
    out["L1_masked"] = masked_sum / masked_n if masked_n else 0.0
    out["loss"] = float(np.mean([r[3] for r in results]))
    return out


def format_metrics_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for row in history:
        w.writerow([row["iter"], row["split"]] + [repr(float(row[k])) for k in METRICS_HEADER[2:]])
    return buf.getvalue()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def checkpoint_name(iteration: int) -> str:
    return f"ckpt_{iteration:06d}.cags"


# ------------------------------------------------------------------ training

def _train_row(state: TrainState, it: int, img: np.ndarray, frame: Frame, loss: float) -> dict:
    m = image_metrics(img, frame.image, frame.mask)
    return {"iter": it, "split": "train", **m, "loss": loss}


def train(dataset: Dataset, cfg: RunConfig, mode: str = CROSS_ATTENTION, state: TrainState | None = None,
          out_dir=None, log=None) -> TrainState:
    """Run ``cfg.optim.iterations`` steps (continuing ``state`` if given).

    Step ``i`` fits training frame ``i mod n_train``. With ``out_dir``,
    checkpoints and ``metrics.csv`` are written there.
    """
    train_frames, test_frames = dataset.train, dataset.test
    if not train_frames:
        raise ConfigError("dataset has no training frames")
    state = state or TrainState.initial(cfg, mode, dataset.mesh, train_frames[0])
    cfg = state.config
    model = state.model
    params = model.parameters()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    total = cfg.optim.iterations
    every = cfg.optim.eval_every
    ck_every = cfg.io.checkpoint_every

    def save(tag_iter: int, name: str | None = None):
        if out is not None:
            ckpt_io.save(out / (name or checkpoint_name(tag_iter)), state.to_checkpoint())

    def record_test():
        if test_frames:
            row = {"iter": state.iteration, "split": "test", **evaluate(model, test_frames, state.iteration)}
            state.history.append(row)
            if log:
                log(f"iter {row['iter']:6d}  test PSNR {row['PSNR']:.3f}  L1 {row['L1']:.5f}  "
                    f"L1_masked {row['L1_masked']:.5f}")
        if out is not None:
            _atomic_write_text(out / "metrics.csv", format_metrics_csv(state.history))

    if state.iteration == 0 and not state.history:
        record_test()
        save(0)
    t0 = time.perf_counter()
    while state.iteration < total:
        it = state.iteration
        frame = train_frames[it % len(train_frames)]
        model.zero_grad()
        image = model.render_tensor(frame.psi, frame.camera)
        loss = total_loss(frame.image, image, frame.mask, it, cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            save(it, "abort.cags")
            raise NumericError(f"non-finite loss {value} at iteration {it} (training frame {frame.index})")
        ad.backward(loss)
        try:
            adam_step(params, {k: p.grad for k, p in params.items()}, state.adam)
        except NumericError as exc:
            save(it, "abort.cags")
            raise NumericError(f"{exc} at iteration {it} (training frame {frame.index})") from exc
        state.losses.append(value)
        state.iteration = it + 1
        if state.iteration % every == 0 or state.iteration == total:
            state.history.append(_train_row(state, state.iteration, image.data, frame, value))
            record_test()
            if log:
                log(f"iter {state.iteration:6d}  train loss {value:.6f}  ({time.perf_counter() - t0:.1f}s)")
        if ck_every and state.iteration % ck_every == 0 and state.iteration != total:
            save(state.iteration)
    if total > 0 and state.iteration == total:
        save(state.iteration)
    return state


def prepare_output_dir(path, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ ablation

ABLATION_FIELDS = ("mode", "L1", "PSNR", "SSIM", "L1_masked")


def ablate(dataset: Dataset, cfg: RunConfig, out_dir=None, log=None) -> list[dict]:
    """Train both conditioning modes on the same data and budget; one row per mode."""
    rows = []
    for mode in (CROSS_ATTENTION, CONCAT_BASELINE):
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / mode
            sub.mkdir(parents=True, exist_ok=True)
        state = train(dataset, cfg, mode, out_dir=sub, log=log)
        m = evaluate(state.model, dataset.test or dataset.train, state.iteration)
        rows.append({"mode": mode, **{k: m[k] for k in ABLATION_FIELDS[1:]}})
    return rows


def format_ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for r in rows:
        w.writerow([r["mode"]] + [repr(float(r[k])) for k in ABLATION_FIELDS[1:]])
    return buf.getvalue()


def dataset_for(cfg: RunConfig) -> Dataset:
    return build_dataset(cfg.scene)
