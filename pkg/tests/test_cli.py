import numpy as np

from cagsplat.checkpoint import VERSION
from cagsplat.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_IO, EXIT_OK, build_parser, main
from cagsplat.config import RunConfig, iter_keys
from cagsplat.imageio import read_png

TINY = ["scene.resolution=16", "scene.mesh_lat=6", "scene.mesh_lon=8", "scene.n_frames=6",
        "scene.oracle_gaussians=100", "model.n_gaussians=64", "model.mlp_widths=16", "optim.eval_every=2",
        "io.checkpoint_every=2"]


def tiny_sets(*extra):
    out = []
    for item in TINY + list(extra):
        out += ["--set", item]
    return out


def test_help_lists_every_key():
    text = build_parser().format_help()
    for key, value, note in iter_keys(RunConfig()):
        assert f"{key} = {value!r}" in text
        assert note in text
    assert "CAG_THREADS" in text


def test_gen_and_dump(tmp_path, capsys):
    out = tmp_path / "gen"
    argv = ["gen", "-o", str(out), "--dump"] + tiny_sets("scene.n_frames=10")
    assert main(argv) == EXIT_OK
    assert len(list(out.glob("frame_*.png"))) == 10
    assert len(list(out.glob("mask_*.png"))) == 10
    recipe = (out / "recipe.toml").read_text()
    assert main(argv) == EXIT_IO  # refuses a non-empty directory
    assert "not empty" in capsys.readouterr().err
    assert main(argv + ["--force"]) == EXIT_OK
    assert (out / "recipe.toml").read_text() == recipe


def test_config_errors(tmp_path, capsys):
    assert main(["gen", "-o", str(tmp_path / "a"), "--set", "scene.bogus=1"]) == EXIT_CONFIG
    assert "scene.bogus" in capsys.readouterr().err
    assert main(["gen", "-o", str(tmp_path / "b"), "--set", "noequals"]) == EXIT_CONFIG
    assert main(["train", "--recipe", str(tmp_path / "missing.toml"), "-o", str(tmp_path / "c")]) == EXIT_IO


def test_train_render_resume(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "-o", str(run), "--iterations", "4"] + tiny_sets()) == EXIT_OK
    assert (run / "metrics.csv").exists() and (run / "ckpt_000004.cags").exists()

    zero = tmp_path / "zero"
    assert main(["train", "-o", str(zero), "--iterations", "0"] + tiny_sets()) == EXIT_OK
    assert sorted(p.name for p in zero.glob("*.cags")) == ["ckpt_000000.cags"]

    res = tmp_path / "resumed"
    assert main(["train", "--resume", str(run / "ckpt_000002.cags"), "-o", str(res)]) == EXIT_OK
    assert (res / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()
    assert (res / "ckpt_000004.cags").read_bytes() == (run / "ckpt_000004.cags").read_bytes()

    img = tmp_path / "img"
    assert main(["render", str(run / "ckpt_000004.cags"), "-o", str(img), "--psi", "test"]) == EXIT_OK
    assert len(list(img.glob("render_*.png"))) == 2
    assert read_png(img / "render_0000.png").shape == (16, 16, 3)
    orbit = tmp_path / "orbit"
    assert main(["render", str(run / "ckpt_000004.cags"), "-o", str(orbit), "--orbit", "15",
                 "--format", "ppm"]) == EXIT_OK
    assert (orbit / "render_0000.ppm").exists()
    codes = tmp_path / "codes.txt"
    np.savetxt(codes, np.full((3, 16), 2.0))  # far outside the training range
    assert main(["render", str(run / "ckpt_000004.cags"), "-o", str(tmp_path / "ood"), "--psi",
                 str(codes)]) == EXIT_OK
    np.savetxt(codes, np.zeros((1, 5)))
    assert main(["render", str(run / "ckpt_000004.cags"), "-o", str(tmp_path / "bad"), "--psi",
                 str(codes)]) == EXIT_CONFIG

    raw = bytearray((run / "ckpt_000004.cags").read_bytes())
    raw[4:8] = (VERSION + 1).to_bytes(4, "little")
    (tmp_path / "future.cags").write_bytes(bytes(raw))
    capsys.readouterr()
    assert main(["render", str(tmp_path / "future.cags"), "-o", str(tmp_path / "f")]) == EXIT_IO
    err = capsys.readouterr().err
    assert f"version {VERSION + 1}" in err and f"version {VERSION}" in err


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--gaussians", "6", "--size", "12", "--coords", "4"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 8
    assert main(["gradcheck", "--gaussians", "6", "--size", "12", "--coords", "4", "--tolerance", "0"]) == EXIT_FAIL


def test_bench_schema(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    argv = ["bench", "--sizes", "10,20,40", "--resolution", "32", "--runs", "2", "--warmup", "0",
            "--csv", str(csv_path)]
    assert main(argv) == EXIT_OK
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "n_gaussians,phase,backend,resolution,mean_ms,std_ms,runs"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [(r[0], r[1]) for r in rows] == [(n, p) for n in ("10", "20", "40")
                                            for p in ("forward", "forward_backward")]


def test_ablate_command(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "-o", str(out), "--seeds", "0,1", "--iterations", "2"] + tiny_sets()) == EXIT_OK
    assert (out / "ablation_seed_0.csv").exists() and (out / "ablation_seed_1.csv").exists()
