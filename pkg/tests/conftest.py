import numpy as np
import pytest
from hypothesis import settings

from cagsplat import autodiff as ad
from cagsplat.geometry import Camera

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _verify_precision():
    ad.set_precision("verify")
    yield
    ad.set_precision("verify")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every entry of x (mutated in place and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    return 0.0 if scale == 0 else float(np.abs(a - b).max() / scale)


def front_camera(size: int = 32, focal: float = 40.0) -> Camera:
    return Camera.look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], focal, focal, size, size)


def random_gaussians(rng, n: int, bands: int = 1, log_scale=(-2.5, -1.2)):
    means = rng.uniform(-1.0, 1.0, (n, 3))
    q = rng.normal(size=(n, 4))
    ls = rng.uniform(*log_scale, (n, 3))
    op = rng.normal(size=n)
    sh = rng.normal(0.0, 0.5, (n, bands, 3))
    return means, q, ls, op, sh


def tiny_config(**overrides):
    """A run small enough for unit tests: 16x16 frames, 64 Gaussians, a few steps."""
    from cagsplat.config import RunConfig

    base = dict(scene__resolution=16, scene__mesh_lat=6, scene__mesh_lon=8, scene__n_frames=6,
                scene__oracle_gaussians=100, model__n_gaussians=64, model__mlp_widths=(16,),
                optim__iterations=4, optim__eval_every=2, io__checkpoint_every=2)
    base.update(overrides)
    return RunConfig().replace(**base)


ACCEPTANCE_LINES: list[str] = []


def acceptance(name: str, passed: bool, detail: str) -> None:
    """Print and remember one acceptance verdict, then fail the test if it did not hold."""
    line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
