import os
import subprocess
import sys

import numpy as np

from cagsplat.bench import BENCH_FIELDS, bench_one, format_bench_csv, random_field, resolve_backends
from cagsplat.render import available_backends


def test_random_field_deterministic_and_empty_variant():
    a, b = random_field(50, seed=3), random_field(50, seed=3)
    np.testing.assert_array_equal(a.means, b.means)
    hidden = random_field(50, seed=3, visible=False)
    assert np.all(hidden.means[:, 2] > 4.0)  # behind the camera at z = 4


def test_bench_rows():
    rows = bench_one(20, size=32, warmup=0, runs=2)
    assert [r["phase"] for r in rows] == ["forward", "forward_backward"]
    assert all(r["mean_ms"] > 0 and r["runs"] == 2 for r in rows)
    assert format_bench_csv(rows).splitlines()[0] == ",".join(BENCH_FIELDS)


def test_resolve_backends():
    assert resolve_backends("auto") == [None]
    assert resolve_backends("all") == available_backends()
    assert resolve_backends("python") == ["python"]


def test_backend_selected_at_import():
    code = "from cagsplat.render import get_backend; print(get_backend())"
    env = dict(os.environ, CAGSPLAT_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("CAGSPLAT_BACKEND")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("compiled" if "compiled" in available_backends() else "python")


def test_backend_comparison_script():
    script = os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_backends.py")
    out = subprocess.run([sys.executable, script, "--sizes", "30", "--resolution", "32", "--runs", "1",
                          "--warmup", "0"], capture_output=True, text=True, check=True)
    lines = out.stdout.splitlines()
    assert lines[0] == ",".join(BENCH_FIELDS)
    assert len([ln for ln in lines[1:] if not ln.startswith("#")]) == 2 * len(available_backends())
