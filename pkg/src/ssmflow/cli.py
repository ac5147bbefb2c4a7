"""Command-line interface.

Subcommands: `gen` (synthetic scenes), `train` (toy training to a
checkpoint plus a loss log), `eval` (per-iteration metrics CSV), and
`bench` (scan-kernel timing with a correctness cross-check).

Settings resolve in precedence order: built-in defaults, then `--config`
file (`key = value` lines, unknown keys are hard errors), then repeatable
`--set key=value` flags, then dedicated flags like `--steps`. Every run
writes its fully resolved settings next to its outputs. Exit codes:
0 success, 2 I/O or configuration, 3 training divergence, 4 checkpoint
mismatch, 5 benchmark correctness failure.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    SceneFormatError,
    TrainingDivergedError,
)
from .pipeline import (
    NetworkConfig,
    init_model,
    load_checkpoint,
    predict_trajectory,
    save_checkpoint,
    train_loop,
    validate_config,
)
from .pointcloud import evaluate
from .scenes import TRANSFORM_FAMILIES, SceneSpec, generate_scene, load_scene, save_scene
from .ssm import (
    causal_conv_apply,
    materialize_kernel,
    random_time_invariant_ssm,
    scan_parallel,
    scan_sequential,
)
from .update import UPDATE_OPERATORS

BENCH_TOLERANCE = 1e-9

DEFAULTS = {
    # network
    "levels": 2,
    "iterations": 2,
    "point_counts": (128, 32),
    "channels": 32,
    "motion_channels": 32,
    "k": 16,
    "update_operator": "isu-fio",
    "n_blocks": 2,
    "state_size": 8,
    "scan_impl": "parallel",
    "seed": 0,
    # training
    "steps": 100,
    "base_lr": 1e-3,
    "min_lr": 1e-5,
    "weight_decay": 1e-4,
    # scene generation
    "scenes": 4,
    "objects": 2,
    "points_per_object": 64,
    "transform": "random",
    "max_rotation_deg": 30.0,
    "max_translation": 0.5,
    "noise": 0.0,
    "occlusion": 0.0,
    # benchmark
    "lengths": (256, 1024, 4096),
    "states": (8,),
    "repeats": 3,
}

_INT_KEYS = {
    "levels", "iterations", "channels", "motion_channels", "k", "n_blocks",
    "state_size", "seed", "steps", "scenes", "objects", "points_per_object",
    "repeats",
}
_FLOAT_KEYS = {
    "base_lr", "min_lr", "weight_decay", "max_rotation_deg",
    "max_translation", "noise", "occlusion",
}
_STR_KEYS = {"update_operator", "scan_impl", "transform"}
_INT_TUPLE_KEYS = {"point_counts", "lengths", "states"}


class BenchCheckError(ArithmeticError):
    """Benchmark implementations disagreed beyond the cross-check bound."""


def parse_value(key: str, text: str):
    try:
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        if key in _STR_KEYS:
            return text
        if key in _INT_TUPLE_KEYS:
            return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from None
    raise ConfigError(f"unknown config key {key!r}")


def render_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_file(path) -> dict:
    """`key = value` lines; blank lines and `#` comment lines are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="ascii")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.strip()
        if not body or body.startswith("#"):
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        out[key] = parse_value(key, value.strip())
    return out


def resolve_settings(args) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    for item in getattr(args, "set", []) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key = key.strip()
        settings[key] = parse_value(key, value.strip())
    direct = {
        "seed": "seed", "steps": "steps", "update": "update_operator",
        "iters": "iterations", "objects": "objects",
        "points_per_object": "points_per_object", "transform": "transform",
        "noise": "noise", "occlusion": "occlusion", "scenes": "scenes",
        "repeats": "repeats",
    }
    for flag, key in direct.items():
        value = getattr(args, flag, None)
        if value is not None:
            settings[key] = value
    for flag in ("lengths", "states"):
        value = getattr(args, flag, None)
        if value is not None:
            settings[flag] = parse_value(flag, value)
    return settings


def write_resolved(settings: dict, out_dir: Path, command: str) -> Path:
    # .cfg keeps resolved settings out of the *.txt scene glob
    path = out_dir / f"{command}_config.cfg"
    lines = [f"{key} = {render_value(settings[key])}" for key in sorted(settings)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def network_config(settings: dict) -> NetworkConfig:
    return NetworkConfig(
        levels=settings["levels"],
        iterations=settings["iterations"],
        point_counts=tuple(settings["point_counts"]),
        channels=settings["channels"],
        motion_channels=settings["motion_channels"],
        k=settings["k"],
        update_operator=settings["update_operator"],
        n_blocks=settings["n_blocks"],
        state_size=settings["state_size"],
        scan_impl=settings["scan_impl"],
        seed=settings["seed"],
    )


def scene_spec(settings: dict) -> SceneSpec:
    return SceneSpec(
        n_objects=settings["objects"],
        points_per_object=settings["points_per_object"],
        transform=settings["transform"],
        max_rotation_deg=settings["max_rotation_deg"],
        max_translation=settings["max_translation"],
        noise=settings["noise"],
        occlusion=settings["occlusion"],
    )


def load_scene_dir(path: Path) -> list[tuple[str, object]]:
    if not path.is_dir():
        raise ConfigError(f"scene directory {path} does not exist")
    files = sorted(path.glob("*.txt"))
    if not files:
        raise ConfigError(f"no scene files (*.txt) in {path}")
    return [(f.stem, load_scene(f)) for f in files]


def cmd_gen(settings: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    spec = scene_spec(settings)
    for i in range(settings["scenes"]):
        scene = generate_scene(spec, seed=settings["seed"] + i)
        save_scene(out / f"scene_{i:03d}.txt", scene)
    write_resolved(settings, out, "gen")
    print(f"wrote {settings['scenes']} scenes to {out}")
    return 0


def cmd_train(settings: dict, scenes_dir: Path, out: Path) -> int:
    scenes = [scene for _, scene in load_scene_dir(scenes_dir)]
    config = network_config(settings)
    validate_config(config)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(config)
    steps = settings["steps"]
    rows = train_loop(
        model, scenes, config, steps,
        base_lr=settings["base_lr"], min_lr=settings["min_lr"],
        weight_decay=settings["weight_decay"],
        log_every=max(1, steps // 10) if steps else 0,
    )
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model)
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            writer.writerow([step, repr(lr), repr(loss)])
    write_resolved(settings, out, "train")
    print(f"checkpoint {ckpt}")
    return 0


def cmd_eval(settings: dict, ckpt: Path, scenes_dir: Path, out: Path) -> int:
    scenes = load_scene_dir(scenes_dir)
    config = network_config(settings)
    validate_config(config)
    model = init_model(config)
    load_checkpoint(ckpt, model)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for scene_id, scene in scenes:
        # one run per scene; the iteration column reads the flow after each
        # refinement pass of that run
        flows, gt = predict_trajectory(model, scene, config)
        for n_iters, sf in enumerate(flows, start=1):
            report = evaluate(sf, gt)
            rows.append([
                scene_id, n_iters, repr(report.epe3d), repr(report.acc3ds),
                repr(report.acc3dr), repr(report.outliers),
            ])
    path = out / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "iteration", "epe3d", "acc3ds", "acc3dr", "outliers"])
        writer.writerows(rows)
    write_resolved(settings, out, "eval")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def _bench_impls(ssm, x):
    return (
        ("sequential", lambda: scan_sequential(ssm, x)),
        ("parallel", lambda: scan_parallel(ssm, x)),
        ("kernel-conv", lambda: causal_conv_apply(materialize_kernel(ssm, x.shape[0]), x)),
    )


def cmd_bench(settings: dict, out: Path) -> int:
    repeats = settings["repeats"]
    if repeats < 3:
        raise ConfigError(f"bench needs repeats >= 3, got {repeats}")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for length in settings["lengths"]:
        for state_size in settings["states"]:
            rng = np.random.default_rng([settings["seed"], length, state_size])
            ssm = random_time_invariant_ssm(rng, channels=1, state_size=state_size)
            x = Tensor(rng.standard_normal((length, 1)))
            impls = _bench_impls(ssm, x)
            outputs = [fn().data for _, fn in impls]
            diff = max(
                float(np.abs(a - b).max())
                for i, a in enumerate(outputs)
                for b in outputs[i + 1:]
            )
            print(f"L={length} S={state_size} cross-check max abs diff {diff:.3e}")
            if not diff < BENCH_TOLERANCE:
                raise BenchCheckError(
                    f"implementations disagree at L={length} S={state_size}:"
                    f" max abs diff {diff:.3e} >= {BENCH_TOLERANCE}"
                )
            for name, fn in impls:
                times = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    fn()
                    times.append(time.perf_counter() - start)
                ns = statistics.median(times) / length * 1e9
                rows.append([name, length, state_size, repr(ns)])
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel", "L", "S", "ns_per_element"])
        writer.writerows(rows)
    write_resolved(settings, out, "bench")
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssmflow",
        description="Synthetic scene flow: data generation, training, "
        "evaluation, and scan benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="settings file (key = value lines)")
        sp.add_argument("--seed", type=int, help="master random seed")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        sp.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one setting (repeatable)",
        )

    gen = sub.add_parser("gen", help="write synthetic rigid-motion scenes")
    common(gen)
    gen.add_argument("--scenes", type=int, help="number of scene files")
    gen.add_argument("--objects", type=int, help="objects per scene")
    gen.add_argument("--points-per-object", dest="points_per_object", type=int)
    gen.add_argument("--transform", choices=TRANSFORM_FAMILIES)
    gen.add_argument("--noise", type=float, help="target-frame jitter stddev")
    gen.add_argument("--occlusion", type=float, help="fraction of target points dropped")

    train = sub.add_parser("train", help="train on a scene directory")
    common(train)
    train.add_argument("--scenes-dir", type=Path, required=True)
    train.add_argument("--steps", type=int, help="optimizer steps")
    train.add_argument("--update", choices=UPDATE_OPERATORS, help="update operator")

    ev = sub.add_parser("eval", help="per-iteration metrics for a checkpoint")
    common(ev)
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--scenes-dir", type=Path, required=True)
    ev.add_argument("--iters", type=int, help="report iterations 1..N")

    bench = sub.add_parser("bench", help="time the scan implementations")
    common(bench)
    bench.add_argument("--lengths", help="comma-separated sequence lengths")
    bench.add_argument("--states", help="comma-separated state sizes")
    bench.add_argument("--repeats", type=int, help="timing repeats (>= 3)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = resolve_settings(args)
        if args.command == "gen":
            return cmd_gen(settings, args.out)
        if args.command == "train":
            return cmd_train(settings, args.scenes_dir, args.out)
        if args.command == "eval":
            return cmd_eval(settings, args.ckpt, args.scenes_dir, args.out)
        return cmd_bench(settings, args.out)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except BenchCheckError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except (ConfigError, SceneFormatError, DimensionError, DomainError,
            ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
