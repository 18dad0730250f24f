"""Command-line entry point: simulate, train, eval, plan, attn-export.

Every subcommand reads a flat ``key = value`` config, writes its outputs
atomically into the output directory (``--out``, else ``$PARTICLE_WORLD_OUT``,
else the working directory) and appends one JSON line to ``manifest.jsonl``
there, whether it succeeds or not.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import export_attention
from .checkpoint import Checkpoint, encode_checkpoint, load_checkpoint
from .config import dataclass_from_kv, parse_kv_file
from .episodes import (
    Dataset,
    atomic_write_bytes,
    encode_dataset,
    episode_from_scenes,
    file_digest,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .errors import FormatError, InvalidActionError, InvalidInputError, PlanningFailedError, TrainingDivergedError
from .model import ModelConfig, init_params
from .planner import PlanConfig, box_target, closed_loop_control
from .simulator import TASKS, create_scene, default_task_spec
from .training import TrainConfig, evaluate, loss_curve_csv, train

OUT_ENV = "PARTICLE_WORLD_OUT"
MANIFEST = "manifest.jsonl"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2  # malformed config or invalid input
EXIT_IO = 3  # missing or unreadable files, bad file formats
EXIT_DIVERGED = 4
EXIT_PLAN_FAILED = 5
EXIT_MISMATCH = 6  # checkpoint and dataset disagree


class CompatibilityError(InvalidInputError):
    pass


class _Run:
    """Collects what the manifest records about one invocation."""

    def __init__(self, command: str, out_dir: Path, config_path, values: dict, seed):
        self.command = command
        self.out_dir = out_dir
        self.record = {
            "subcommand": command,
            "config_path": str(config_path),
            "config": dict(values),
            "seed": seed,
            "inputs": {},
            "outputs": {},
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        self.t0 = time.perf_counter()

    def input(self, name: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"{name} not found: {path}")
        self.record["inputs"][name] = {"path": str(path), "sha256": file_digest(path)}
        return path

    def output(self, name: str, path: Path, payload: bytes) -> None:
        atomic_write_bytes(path, payload)
        self.record["outputs"][name] = {"path": str(path), "sha256": hashlib.sha256(payload).hexdigest()}

    def finish(self, status: str, code: int, message: str = "") -> None:
        self.record.update(status=status, exit_code=code, wall_seconds=round(time.perf_counter() - self.t0, 6))
        if message:
            self.record["message"] = message
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / MANIFEST, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(self.record, sort_keys=True) + "\n")


def _get(values: dict, key: str, default=None, kind=str):
    if key not in values:
        if default is None:
            raise InvalidInputError(f"config is missing required key {key!r}")
        return default
    try:
        return kind(values[key])
    except ValueError as exc:
        raise InvalidInputError(f"config key {key!r}: cannot parse {values[key]!r}") from exc


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() or p.exists() else base / p


def _horizons(text: str) -> list[int]:
    try:
        hs = [int(h) for h in str(text).split(",") if h.strip()]
    except ValueError as exc:
        raise InvalidInputError(f"horizons must be comma-separated integers, got {text!r}") from exc
    if not hs or min(hs) < 1:
        raise InvalidInputError("horizons must be >= 1")
    return hs


def _layout(data: Dataset) -> dict:
    ep = data.episodes[0]
    return {"task": data.spec.task, "codes": [int(c) for c in ep.codes]}


# subcommands


def cmd_simulate(run: _Run, values: dict, seed: int) -> None:
    task = _get(values, "task")
    if task not in TASKS:
        raise InvalidInputError(f"unknown task id {task!r}; expected one of {', '.join(TASKS)}")
    episodes = _get(values, "episodes", 10, int)
    horizon = _get(values, "horizon", 30, int)
    spec = default_task_spec(task)
    data = generate_dataset(spec, episodes, horizon, seed)
    path = run.out_dir / _get(values, "dataset", f"{task}.pwe")
    run.out_dir.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(data, path)
    run.record["outputs"]["dataset"] = {"path": str(path), "sha256": digest}
    print(f"wrote {episodes} episodes of {task} to {path} (sha256 {digest[:12]})")


def _train_configs(values: dict, seed: int) -> tuple[ModelConfig, TrainConfig]:
    model_cfg = dataclass_from_kv(ModelConfig, values)
    train_cfg = dataclasses.replace(dataclass_from_kv(TrainConfig, values), seed=seed)
    return model_cfg, train_cfg


def cmd_train(run: _Run, values: dict, seed: int, base: Path) -> None:
    data_path = run.input("dataset", _resolve(_get(values, "dataset"), base))
    data = load_dataset(data_path)
    train_set, _ = data.split(_get(values, "split_seed", seed, int), _get(values, "train_fraction", 0.9, float))
    model_cfg, train_cfg = _train_configs(values, seed)
    resume = None
    if "resume" in values:
        resume = load_checkpoint(run.input("resume", _resolve(values["resume"], base)))
    if train_cfg.epochs == 0 and resume is None:
        params = init_params(model_cfg, seed=train_cfg.seed)
        ckpt = Checkpoint(params, {"epochs_done": 0, "train_config": dataclasses.asdict(train_cfg)})
        curve = "epoch,mean_loss\n"
    else:
        result = train(train_set, model_cfg, train_cfg, resume=resume)
        ckpt = result.checkpoint(train_cfg)
        curve = loss_curve_csv(result)
    ckpt.metadata["layout"] = _layout(data)
    ckpt.metadata["model_config"] = dataclasses.asdict(model_cfg)
    name = _get(values, "checkpoint", "model.pwc")
    run.out_dir.mkdir(parents=True, exist_ok=True)
    run.output("checkpoint", run.out_dir / name, encode_checkpoint(ckpt))
    run.output("loss_curve", run.out_dir / _get(values, "loss_curve", "loss_curve.csv"), curve.encode())
    print(f"trained {ckpt.metadata.get('epochs_done', 0)} epochs; checkpoint {run.out_dir / name}")


def _check_compatible(ckpt: Checkpoint, data: Dataset) -> None:
    have = _layout(data)
    want = ckpt.metadata.get("layout")
    if want is not None and want != have:
        raise CompatibilityError(
            "checkpoint and dataset disagree: checkpoint was trained on "
            f"task={want['task']} with {len(want['codes'])} particles {want['codes']}, "
            f"dataset has task={have['task']} with {len(have['codes'])} particles {have['codes']}"
        )


def cmd_eval(run: _Run, values: dict, seed: int, base: Path, oracle: bool, horizons: str | None) -> None:
    data = load_dataset(run.input("dataset", _resolve(_get(values, "dataset"), base)))
    hs = _horizons(horizons if horizons is not None else _get(values, "horizons", "1,5"))
    predictor = "oracle" if oracle else _get(values, "predictor", "model")
    if predictor == "model":
        ckpt = load_checkpoint(run.input("checkpoint", _resolve(_get(values, "checkpoint"), base)))
        _check_compatible(ckpt, data)
        predictor = ckpt.params
    split = _get(values, "split", "heldout")
    if split == "heldout":
        _, data = data.split(_get(values, "split_seed", seed, int), _get(values, "train_fraction", 0.9, float))
    elif split != "all":
        raise InvalidInputError(f"split must be 'heldout' or 'all', got {split!r}")
    report = evaluate(predictor, data, hs)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    path = run.out_dir / _get(values, "metrics", "metrics.csv")
    run.output("metrics", path, report.to_csv().encode())
    for h in hs:
        print(f"h={h}: " + ", ".join(f"{m}={report.value(h, m):.6g}" for m in ("mse", "cd", "cd_hd")))


def _read_points(path: Path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: target must be comma-separated x,y,z rows") from exc
    if pts.shape[1] != 3 or not np.all(np.isfinite(pts)):
        raise FormatError(f"{path}: target must be finite x,y,z rows")
    return pts


def cmd_plan(run: _Run, values: dict, seed: int, base: Path) -> None:
    task = _get(values, "task", "box_push")
    scene = create_scene(default_task_spec(task), _get(values, "scene_seed", seed, int))
    model = _get(values, "model", "checkpoint")
    if model == "checkpoint":
        model = load_checkpoint(run.input("checkpoint", _resolve(_get(values, "checkpoint"), base))).params
    elif model not in ("simulator", "persistence"):
        raise InvalidInputError(f"model must be checkpoint, simulator or persistence, got {model!r}")
    target_key = _get(values, "target", "box_shift")
    if target_key == "initial":
        target = scene.obj.copy()
    elif target_key == "box_shift":
        target = box_target(scene, _get(values, "shift", 0.08, float), _get(values, "turn", 0.3, float))
    else:
        target = _read_points(run.input("target", _resolve(target_key, base)))
    plan_keys = {k: v for k, v in values.items() if k in {f.name for f in dataclasses.fields(PlanConfig)}}
    cfg = dataclass_from_kv(PlanConfig, plan_keys)
    steps = _get(values, "max_steps", 30, int)
    run.out_dir.mkdir(parents=True, exist_ok=True)
    trajectory = run.out_dir / _get(values, "trajectory", "trajectory.pwe")
    try:
        result = closed_loop_control(scene, model, target, cfg, steps, seed)
    except PlanningFailedError as exc:
        # the partial run up to the failure is the best attempt
        scenes = exc.best.scenes if hasattr(exc.best, "scenes") else [scene]
        run.output("trajectory", trajectory, _episode_bytes(task, scenes))
        raise
    run.output("trajectory", trajectory, _episode_bytes(task, result.scenes))
    run.output("plan_log", run.out_dir / _get(values, "plan_log", "plan_log.csv"), result.log_csv().encode())
    run.record["final_goal_cost"] = result.final_cost
    run.record["normalized"] = result.normalized
    print(f"{len(result.actions)} control steps, goal cost {result.goal_costs[0]:.4f} -> {result.final_cost:.4f}")


def _episode_bytes(task: str, scenes) -> bytes:
    return encode_dataset(Dataset(default_task_spec(task), [episode_from_scenes(scenes)]))


def cmd_attn_export(run: _Run, values: dict, base: Path) -> None:
    ckpt = load_checkpoint(run.input("checkpoint", _resolve(_get(values, "checkpoint"), base)))
    data = load_dataset(run.input("dataset", _resolve(_get(values, "dataset"), base)))
    _check_compatible(ckpt, data)
    e = _get(values, "episode", 0, int)
    t = _get(values, "frame", 0, int)
    if not 0 <= e < len(data.episodes):
        raise InvalidInputError(f"episode {e} out of range (dataset has {len(data.episodes)})")
    ep = data.episodes[e]
    if not 0 <= t < ep.horizon:
        raise InvalidInputError(f"frame {t} out of range (episode has {ep.horizon} frames)")
    files = export_attention(ep.frame(t), ckpt.params, run.out_dir, _get(values, "prefix", "attn"))
    for f in files:
        run.record["outputs"][f.name] = {"path": str(f), "sha256": file_digest(f)}
    print(f"wrote {len(files)} files to {run.out_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="particle-world", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "generate an episode dataset"),
        ("train", "train a model on a dataset"),
        ("eval", "score a checkpoint (or baseline) on held-out episodes"),
        ("plan", "closed-loop MPPI control in the simulator"),
        ("attn-export", "export block-ordered attention heatmaps"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or .)")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="score the simulator itself")
            p.add_argument("--horizons", default=None, help='comma-separated, e.g. "1,5"')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out or os.environ.get(OUT_ENV) or ".")
    values: dict = {}
    seed = args.seed
    run = None
    try:
        config_path = Path(args.config)
        values = parse_kv_file(config_path)
        if seed is None:
            seed = _get(values, "seed", 0, int)
        run = _Run(args.command, out_dir, config_path, values, seed)
        base = config_path.parent
        if args.command == "simulate":
            cmd_simulate(run, values, seed)
        elif args.command == "train":
            cmd_train(run, values, seed, base)
        elif args.command == "eval":
            cmd_eval(run, values, seed, base, args.oracle, args.horizons)
        elif args.command == "plan":
            cmd_plan(run, values, seed, base)
        else:
            cmd_attn_export(run, values, base)
    except CompatibilityError as exc:
        return _fail(run, args, out_dir, values, seed, EXIT_MISMATCH, exc)
    except TrainingDivergedError as exc:
        return _fail(run, args, out_dir, values, seed, EXIT_DIVERGED, exc)
    except PlanningFailedError as exc:
        return _fail(run, args, out_dir, values, seed, EXIT_PLAN_FAILED, exc)
    except (FileNotFoundError, FormatError, OSError) as exc:
        return _fail(run, args, out_dir, values, seed, EXIT_IO, exc)
    except (InvalidInputError, InvalidActionError, ValueError) as exc:
        return _fail(run, args, out_dir, values, seed, EXIT_USAGE, exc)
    run.finish("ok", EXIT_OK)
    return EXIT_OK


def _fail(run, args, out_dir, values, seed, code: int, exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    if run is None:
        run = _Run(args.command, out_dir, args.config, values, seed)
    try:
        run.finish("error", code, str(exc))
    except OSError as write_exc:
        print(f"error: cannot append manifest: {write_exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
