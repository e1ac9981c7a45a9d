"""Command-line entry point: ``cagsplat {gen,train,render,ablate,gradcheck,bench}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, dump_config, iter_keys, load_config, set_key
from .errors import CheckpointError, ConfigError, NumericError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
RECIPE_NAME = "recipe.toml"


def _config_epilog() -> str:
    lines = ["configuration keys (file: `section.key = value`, override: --set section.key=value):"]
    for key, value, note in iter_keys(RunConfig()):
        lines.append(f"  {key} = {value!r}" + (f"  -- {note}" if note else ""))
    lines.append("")
    lines.append("exit codes: 0 ok, 1 check failed, 2 config error, 3 I/O error, 4 numeric failure")
    lines.append("CAG_THREADS caps evaluation threads (0 = one per CPU)")
    return "\n".join(lines)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="shortcut for --set scene.seed=N")
    p.add_argument("-o", "--output", help="output directory (default: io.output_dir)")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cagsplat", description="Expression-driven Gaussian head avatars.",
                                     epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen", help="write a dataset recipe (and optionally dump frames)", epilog=_config_epilog(),
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--dump", action="store_true", help="render every frame and its rigid mask to PNG")

    p = sub.add_parser("train", help="train one conditioning mode", epilog=_config_epilog(), formatter_class=fmt)
    _common(p)
    p.add_argument("--recipe", help="dataset recipe written by `gen` (overrides --config)")
    p.add_argument("--mode", default="cross_attention", help="cross_attention | concat")
    p.add_argument("--iterations", type=int, help="shortcut for --set optim.iterations=N")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("render", help="render a checkpoint for given expression codes / camera")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--psi", default="zero",
                   help="zero | train | test | path to a .npy or text file with one code per row")
    p.add_argument("--orbit", type=float, default=0.0, help="camera azimuth in degrees")
    p.add_argument("--elevation", type=float, default=0.0, help="camera elevation in degrees")
    p.add_argument("--format", choices=("png", "ppm"), default="png")
    p.add_argument("--limit", type=int, help="render at most this many codes")

    p = sub.add_parser("ablate", help="train both conditioning modes and compare", epilog=_config_epilog(),
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--seeds", default=None, help="comma-separated scene seeds (default: the config seed)")
    p.add_argument("--iterations", type=int, help="shortcut for --set optim.iterations=N")

    p = sub.add_parser("gradcheck", help="finite-difference check of all parameter classes")
    p.add_argument("--gaussians", type=int, default=10)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=4096,
                   help="max coordinates per parameter class (classes this small are checked in full)")

    p = sub.add_parser("bench", help="time forward and forward+backward rendering")
    p.add_argument("--sizes", default="1000,10000,100000")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--backend", default="auto", help="auto | all | compiled | python")
    p.add_argument("--empty", action="store_true", help="place every Gaussian behind the camera")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write the report here as well as to stdout")
    return parser


def resolve_config(args) -> RunConfig:
    path = getattr(args, "recipe", None) or args.config
    if getattr(args, "recipe", None) and not Path(args.recipe).is_file():
        raise FileNotFoundError(f"recipe file {args.recipe} does not exist")
    cfg = load_config(path) if path else RunConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_key(cfg, key.strip(), value.strip())
    if args.seed is not None:
        set_key(cfg, "scene.seed", args.seed)
    if getattr(args, "iterations", None) is not None:
        set_key(cfg, "optim.iterations", args.iterations)
    if args.output:
        set_key(cfg, "io.output_dir", args.output)
    return cfg.validate()


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen(args) -> int:
    from .imageio import write_png
    from .scene import build_dataset
    from .training import prepare_output_dir

    cfg = resolve_config(args)
    out = prepare_output_dir(cfg.io.output_dir, args.force)
    (out / RECIPE_NAME).write_text(dump_config(cfg), encoding="utf-8")
    _say(f"wrote {out / RECIPE_NAME}")
    if args.dump:
        ds = build_dataset(cfg.scene)
        for f in ds.frames:
            write_png(out / f"frame_{f.index:04d}.png", f.image)
            write_png(out / f"mask_{f.index:04d}.png", f.mask)
        _say(f"dumped {len(ds.frames)} frames and masks")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import dataset_for, load_state, prepare_output_dir, train

    if args.resume:
        state = load_state(args.resume)
        cfg = state.config
        if args.iterations is not None:
            set_key(cfg, "optim.iterations", args.iterations)
        out = Path(args.output or cfg.io.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        ds = dataset_for(cfg)
        train(ds, cfg, state.mode, state=state, out_dir=out, log=_say)
        return EXIT_OK
    cfg = resolve_config(args)
    out = prepare_output_dir(cfg.io.output_dir, args.force)
    (out / RECIPE_NAME).write_text(dump_config(cfg), encoding="utf-8")
    ds = dataset_for(cfg)
    state = train(ds, cfg, args.mode, out_dir=out, log=_say)
    if state.history:
        last = state.history[-1]
        _say(f"done: iter {last['iter']} PSNR {last['PSNR']:.3f} L1 {last['L1']:.5f}")
    return EXIT_OK


def load_codes(source: str, cfg: RunConfig):
    from .scene import build_dataset

    if source == "zero":
        return [np.zeros(cfg.scene.psi_dim)]
    if source in ("train", "test"):
        ds = build_dataset(cfg.scene)
        return [f.psi for f in (ds.train if source == "train" else ds.test)]
    path = Path(source)
    if not path.is_file():
        raise FileNotFoundError(f"expression code file {source} does not exist")
    codes = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=2)
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[1] != cfg.scene.psi_dim:
        raise ConfigError(f"expression codes have {codes.shape[1]} entries, the model expects {cfg.scene.psi_dim}")
    return list(codes)


def cmd_render(args) -> int:
    from .imageio import write_image
    from .scene import default_camera
    from .training import load_state, prepare_output_dir

    state = load_state(args.checkpoint)
    cfg = state.config
    out = prepare_output_dir(args.output, args.force)
    cam = default_camera(cfg.scene, args.orbit, args.elevation)
    codes = load_codes(args.psi, cfg)
    if args.limit is not None:
        codes = codes[: args.limit]
    for i, psi in enumerate(codes):
        write_image(out / f"render_{i:04d}.{args.format}", state.model.render_image(psi, cam))
    _say(f"rendered {len(codes)} image(s) to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training import dataset_for, ablate, format_ablation_csv, prepare_output_dir

    cfg = resolve_config(args)
    out = prepare_output_dir(cfg.io.output_dir, args.force)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.scene.seed]
    for seed in seeds:
        run_cfg = cfg.replace(scene__seed=seed)
        rows = ablate(dataset_for(run_cfg), run_cfg, out_dir=out / f"seed_{seed}", log=_say)
        text = format_ablation_csv(rows)
        (out / f"ablation_seed_{seed}.csv").write_text(text, encoding="utf-8")
        _say(f"seed {seed}\n{text}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradcheck

    ad.set_precision("verify")
    report = gradcheck(args.gaussians, args.size, args.tolerance, args.step, args.seed, args.coords)
    for e in report:
        _say(f"{e.name:10s} max_rel_err={e.max_rel_error:.3e} coords={e.n_coords:3d} "
             f"{'PASS' if e.passed else 'FAIL'}")
    return EXIT_OK if all(e.passed for e in report) else EXIT_FAIL


def cmd_bench(args) -> int:
    from .bench import format_bench_csv, resolve_backends, run_bench

    sizes = [int(float(s)) for s in args.sizes.split(",")]
    rows = run_bench(sizes, args.resolution, resolve_backends(args.backend), args.warmup, args.runs,
                     args.seed, not args.empty, log=lambda m: print(m, file=sys.stderr, flush=True))
    text = format_bench_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
