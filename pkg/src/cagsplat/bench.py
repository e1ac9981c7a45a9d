"""Rasterizer throughput measurement."""
from __future__ import annotations

import csv
import io
import time

import numpy as np

from .geometry import Camera, GaussianField, SH_C0, project_gaussians, project_gaussians_vjp
from .render import available_backends, rasterize, render_backward

BENCH_FIELDS = ("n_gaussians", "phase", "backend", "resolution", "mean_ms", "std_ms", "runs")
DEFAULT_SIZES = (1_000, 10_000, 100_000)


def bench_camera(size: int) -> Camera:
    f = 1.2 * size
    return Camera.look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], f, f, size, size)


def random_field(n: int, seed: int = 0, visible: bool = True) -> GaussianField:
    """``n`` Gaussians filling the benchmark camera's view (or all behind it when ``visible`` is False)."""
    rng = np.random.default_rng([seed, n])
    means = np.column_stack([rng.uniform(-1.4, 1.4, n), rng.uniform(-1.4, 1.4, n), rng.uniform(-1.0, 1.0, n)])
    if not visible:
        means[:, 2] += 10.0  # the camera looks down -z from z = 4
    rot = rng.normal(size=(n, 4))
    log_scale = np.log(rng.uniform(0.004, 0.02, (n, 3)))
    logit = rng.uniform(-1.0, 3.0, n)
    sh = ((rng.uniform(0.1, 0.9, (n, 3)) - 0.5) / SH_C0)[:, None, :]
    return GaussianField(means, rot, log_scale, logit, sh)


def _time(fn, warmup: int, runs: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(runs)
    for i in range(runs):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1e3


def bench_one(n: int, size: int = 256, backend: str | None = None, warmup: int = 3, runs: int = 20,
              seed: int = 0, visible: bool = True) -> list[dict]:
    field_ = random_field(n, seed, visible)
    cam = bench_camera(size)
    grad = np.random.default_rng(seed).uniform(-1.0, 1.0, (size, size, 3))

    def forward():
        proj = project_gaussians(field_.means, field_.rotation, field_.log_scale, field_.opacity_logit, field_.sh, cam)
        return proj, rasterize(proj, size, size, backend=backend)

    def forward_backward():
        proj, buf = forward()
        fg = render_backward(grad, buf.state)
        project_gaussians_vjp(proj, fg.mean2d, fg.conic, fg.color, fg.opacity)

    name = backend or forward()[1].state.backend
    rows = []
    for phase, fn in (("forward", forward), ("forward_backward", forward_backward)):
        t = _time(fn, warmup, runs)
        rows.append({"n_gaussians": n, "phase": phase, "backend": name, "resolution": size,
                     "mean_ms": float(t.mean()), "std_ms": float(t.std()), "runs": runs})
    return rows


def run_bench(sizes=DEFAULT_SIZES, resolution: int = 256, backends=None, warmup: int = 3, runs: int = 20,
              seed: int = 0, visible: bool = True, log=None) -> list[dict]:
    backends = backends or [None]
    rows = []
    for backend in backends:
        for n in sizes:
            for row in bench_one(n, resolution, backend, warmup, runs, seed, visible):
                rows.append(row)
                if log:
                    log(f"{row['backend']:>9s} N={n:>7d} {row['phase']:>16s}: "
                        f"{row['mean_ms']:9.2f} +- {row['std_ms']:.2f} ms")
    return rows


def format_bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{r[k]:.4f}" if isinstance(r[k], float) else r[k]) for k in BENCH_FIELDS})
    return buf.getvalue()


def resolve_backends(choice: str | None) -> list[str | None]:
    if choice in (None, "", "auto"):
        return [None]
    if choice == "all":
        return available_backends()
    return [b.strip() for b in choice.split(",")]
