"""k-step autoregressive training with the hybrid loss, and the evaluation harness."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, OptimizerState
from .episodes import Dataset, Episode
from .errors import InvalidInputError, TrainingDivergedError
from .metrics import LossConfig, chamfer_distance, hausdorff_distance, hybrid_components, tracked_mse
from .model import ModelConfig, ModelParams, init_params, rollout_tensors


@dataclass(frozen=True)
class TrainConfig:
    rollout_steps: int = 5
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    epochs: int = 20
    iterations_per_epoch: int = 10
    alpha: float = 0.5
    # temperatures scaled to centimetre particle spacing (metric defaults assume ~1 m scenes)
    beta_max: float = 1000.0
    tau_min: float = 0.002
    object_motion_feedback: bool = False
    # "constant" or "cosine" (decays to min_lr_fraction * learning_rate at the last iteration)
    lr_schedule: str = "constant"
    min_lr_fraction: float = 0.05
    # rotate each sample about the vertical axis by a random angle (planar-isotropic scenes only)
    augment_rotation: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rollout_steps < 1:
            raise InvalidInputError("rollout_steps (k) must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if not self.clip_norm > 0:
            raise InvalidInputError("clip_norm must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidInputError("optimizer moments need 0 <= beta < 1 and eps > 0")
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise InvalidInputError("epochs must be >= 0 and iterations_per_epoch >= 1")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidInputError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 <= self.min_lr_fraction <= 1:
            raise InvalidInputError("min_lr_fraction must lie in [0, 1]")
        self.loss_config()  # validates alpha and temperatures

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.beta_max, self.tau_min)

    def lr_at(self, iteration: int) -> float:
        """Step size for a 0-based global iteration index."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        total = max(self.epochs * self.iterations_per_epoch - 1, 1)
        frac = min(iteration / total, 1.0)
        lo = self.min_lr_fraction
        return self.learning_rate * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))


# optimizer


def adam_init(params: ModelParams) -> OptimizerState:
    return OptimizerState(
        0,
        {k: np.zeros_like(a) for k, a in params.arrays.items()},
        {k: np.zeros_like(a) for k, a in params.arrays.items()},
    )


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(params: ModelParams, grads: dict, state: OptimizerState, cfg: TrainConfig,
              lr: float | None = None) -> None:
    """In-place Adam update with bias correction."""
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1**t
    c2 = 1 - cfg.beta2**t
    for name, w in params.arrays.items():
        g = grads[name]
        if cfg.weight_decay:
            g = g + cfg.weight_decay * w
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# batches


@dataclass
class Batch:
    positions: np.ndarray  # (B, P, 3) start frames
    motion: np.ndarray  # (B, P, 3)
    ee_trajectory: np.ndarray  # (B, k, M, 3) commanded effector poses
    targets: np.ndarray  # (B, k, N, 3) ground-truth object positions
    starts: list  # (episode index, frame index)


def make_batch(dataset: Dataset, starts: Sequence[tuple[int, int]], k: int) -> Batch:
    eps = [dataset.episodes[e] for e, _ in starts]
    is_ee = eps[0].is_ee
    pos = np.stack([ep.positions[t] for ep, (_, t) in zip(eps, starts)])
    mot = np.stack([ep.motions[t] for ep, (_, t) in zip(eps, starts)])
    future = np.stack([ep.positions[t + 1 : t + 1 + k] for ep, (_, t) in zip(eps, starts)])
    return Batch(pos, mot, future[:, :, is_ee], future[:, :, ~is_ee], list(starts))


def rotate_batch(batch: Batch, angles: np.ndarray) -> Batch:
    """Rotate every sample of ``batch`` about the z axis through the origin."""
    c, s = np.cos(angles), np.sin(angles)
    rot = np.zeros((len(angles), 3, 3))
    rot[:, 0, 0], rot[:, 0, 1], rot[:, 1, 0], rot[:, 1, 1] = c, -s, s, c
    rot[:, 2, 2] = 1.0
    spin = lambda a: np.einsum("bij,b...j->b...i", rot, a)
    return Batch(spin(batch.positions), spin(batch.motion), spin(batch.ee_trajectory), spin(batch.targets),
                 batch.starts)


def sample_starts(dataset: Dataset, k: int, batch_size: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Start frames from distinct episodes (all episodes when there are fewer than the batch)."""
    n = len(dataset.episodes)
    chosen = rng.choice(n, size=min(batch_size, n), replace=False)
    return [(int(e), int(rng.integers(0, dataset.episodes[e].horizon - k))) for e in chosen]


def _check_dataset(dataset: Dataset, k: int) -> None:
    if not dataset.episodes:
        raise InvalidInputError("dataset has no episodes")
    short = [i for i, ep in enumerate(dataset.episodes) if ep.horizon < k + 1]
    if short:
        raise InvalidInputError(
            f"episodes {short[:5]} have fewer than k+1={k + 1} frames (rollout depth k={k})"
        )
    codes = dataset.episodes[0].codes
    if any(not np.array_equal(ep.codes, codes) for ep in dataset.episodes):
        raise InvalidInputError("all episodes must share one particle layout")


def rollout_loss(tensors, model_cfg: ModelConfig, batch: Batch, materials, is_ee, cfg: TrainConfig):
    """Hybrid loss summed over the k rollout steps and averaged over the batch.

    Returns ``(loss, cd_sum, hd_sum)``; effector rows never enter the loss.
    """
    k = batch.ee_trajectory.shape[1]
    preds = rollout_tensors(
        tensors,
        model_cfg,
        batch.positions,
        batch.motion,
        materials,
        is_ee,
        batch.ee_trajectory,
        k,
        cfg.object_motion_feedback,
    )
    obj = np.flatnonzero(~is_ee)
    loss_cfg = cfg.loss_config()
    total = cd_sum = hd_sum = None
    for j, x in enumerate(preds):
        loss, cd, hd = hybrid_components(x[:, obj], batch.targets[:, j], loss_cfg)
        loss, cd, hd = loss.mean(), cd.mean(), hd.mean()
        total = loss if total is None else total + loss
        cd_sum = cd if cd_sum is None else cd_sum + cd
        hd_sum = hd if hd_sum is None else hd_sum + hd
    return total, cd_sum, hd_sum


@dataclass
class TrainResult:
    params: ModelParams
    optimizer: OptimizerState
    epoch_losses: list[float]  # mean training loss per epoch
    iteration_losses: list[float]
    epochs_done: int
    seconds: float = 0.0

    def checkpoint(self, train_cfg: TrainConfig, extra: dict | None = None) -> Checkpoint:
        meta = {
            "epochs_done": self.epochs_done,
            "epoch_losses": self.epoch_losses,
            "iteration_losses": self.iteration_losses,
            "train_config": asdict(train_cfg),
        }
        meta.update(extra or {})
        return Checkpoint(self.params.copy(), meta, self.optimizer.copy())


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    log: Callable[[int, float], None] | None = None,
    until: int | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs in total, continuing ``resume`` when given.

    ``until`` stops early after that many epochs (the schedule still spans
    ``cfg.epochs``), which is how an interrupted run is produced.

    Iteration ``i`` draws its batch from ``default_rng([seed, i])``, so a run
    resumed from any epoch boundary matches an unbroken run exactly.
    """
    k = cfg.rollout_steps
    _check_dataset(dataset, k)
    first = dataset.episodes[0]
    is_ee, materials = first.is_ee, first.materials
    if resume is not None:
        params = resume.params.copy()
        if params.config != model_cfg:
            raise InvalidInputError(f"checkpoint model config {params.config} differs from {model_cfg}")
        opt = resume.optimizer.copy() if resume.optimizer is not None else adam_init(params)
        epoch_losses = list(resume.metadata.get("epoch_losses", []))
        iteration_losses = list(resume.metadata.get("iteration_losses", []))
        start_epoch = int(resume.metadata.get("epochs_done", 0))
    else:
        params = init_params(model_cfg, seed=cfg.seed)
        opt = adam_init(params)
        epoch_losses, iteration_losses, start_epoch = [], [], 0
    stop = cfg.epochs if until is None else min(int(until), cfg.epochs)
    t0 = time.perf_counter()
    for epoch in range(start_epoch, stop):
        losses = []
        for it in range(cfg.iterations_per_epoch):
            iteration = epoch * cfg.iterations_per_epoch + it
            rng = np.random.default_rng([cfg.seed, iteration])
            batch = make_batch(dataset, sample_starts(dataset, k, cfg.batch_size, rng), k)
            if cfg.augment_rotation:
                batch = rotate_batch(batch, rng.uniform(0.0, 2 * np.pi, len(batch.starts)))
            tensors = params.tensors(requires_grad=True)
            loss, _, _ = rollout_loss(tensors, model_cfg, batch, materials, is_ee, cfg)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(iteration, value)
            grads = ad.backward(loss, tensors)
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(iteration, value)
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, opt, cfg, cfg.lr_at(iteration))
            losses.append(value)
            iteration_losses.append(value)
            if log is not None:
                log(iteration, value)
        epoch_losses.append(float(np.mean(losses)))
    return TrainResult(params, opt, epoch_losses, iteration_losses, max(stop, start_epoch),
                       time.perf_counter() - t0)


def loss_curve_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, v in enumerate(result.epoch_losses):
        w.writerow([i, repr(v)])
    return buf.getvalue()


# evaluation

METRICS = ("mse", "cd", "cd_hd")


@dataclass
class MetricsReport:
    """Means and standard deviations over evaluation episodes, per horizon and metric."""

    task: str
    predictor: str
    horizons: list[int]
    mean: dict = field(default_factory=dict)  # (horizon, metric) -> float
    std: dict = field(default_factory=dict)
    episodes: int = 0

    def __post_init__(self):
        for key, value in list(self.mean.items()) + list(self.std.items()):
            if not (math.isfinite(value) and value >= 0):
                raise InvalidInputError(f"metric {key} is {value}; entries must be finite and >= 0")

    def value(self, horizon: int, metric: str) -> float:
        return self.mean[(horizon, metric)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "predictor", "horizon", "metric", "mean", "std", "episodes"])
        for h in self.horizons:
            for m in METRICS:
                w.writerow([self.task, self.predictor, h, m, repr(self.mean[(h, m)]),
                            repr(self.std[(h, m)]), self.episodes])
        return buf.getvalue()

    def equals(self, other: "MetricsReport") -> bool:
        return (self.task, self.predictor, self.horizons, self.mean, self.std) == (
            other.task, other.predictor, other.horizons, other.mean, other.std)


def persistence_predictor(ep: Episode, t: int, h: int) -> np.ndarray:
    """Frozen-object baseline: the objects stay where they were at frame ``t``."""
    return ep.positions[t][~ep.is_ee]


def oracle_predictor(ep: Episode, t: int, h: int) -> np.ndarray:
    """The recorded simulator state itself."""
    return ep.positions[t + h][~ep.is_ee]


def model_predictions(params: ModelParams, ep: Episode, starts: Sequence[int], h: int,
                      object_motion_feedback: bool = False) -> np.ndarray:
    """Object positions after ``h`` model steps from each start, ``(len(starts), N, 3)``."""
    starts = list(starts)
    is_ee = ep.is_ee
    pos = ep.positions[starts]
    mot = ep.motions[starts]
    ee = np.stack([ep.positions[t + 1 : t + 1 + h][:, is_ee] for t in starts])
    with ad.no_grad():
        preds = rollout_tensors(params.tensors(), params.config, pos, mot, ep.materials, is_ee, ee, h,
                                object_motion_feedback)
    return preds[-1].data[:, ~is_ee]


def evaluate(
    predictor,
    dataset: Dataset,
    horizons: Sequence[int] = (1, 5),
    start_frames: dict[int, Sequence[int]] | None = None,
    object_motion_feedback: bool = False,
) -> MetricsReport:
    """Score a predictor on every usable start frame of every episode.

    ``predictor`` is a :class:`ModelParams`, ``"persistence"`` or ``"oracle"``.
    ``start_frames`` optionally restricts the starts per episode index.
    Per-episode averages are summarised by their mean and population std.
    """
    horizons = [int(h) for h in horizons]
    if not horizons or min(horizons) < 1:
        raise InvalidInputError("horizons must be >= 1")
    if isinstance(predictor, ModelParams):
        name = "model"
    elif predictor in ("persistence", "oracle"):
        name = predictor
    else:
        raise InvalidInputError(f"unknown predictor {predictor!r}")
    per_episode = {(h, m): [] for h in horizons for m in METRICS}
    for e, ep in enumerate(dataset.episodes):
        for h in horizons:
            if start_frames is not None:
                starts = [t for t in start_frames.get(e, []) if t + h < ep.horizon]
            else:
                starts = list(range(ep.horizon - h))
            if not starts:
                continue
            gt = ep.positions[[t + h for t in starts]][:, ~ep.is_ee]
            if name == "model":
                pred = model_predictions(predictor, ep, starts, h, object_motion_feedback)
            else:
                fn = persistence_predictor if name == "persistence" else oracle_predictor
                pred = np.stack([fn(ep, t, h) for t in starts])
            cd = chamfer_distance(pred, gt)
            per_episode[(h, "mse")].append(float(np.mean(tracked_mse(pred, gt))))
            per_episode[(h, "cd")].append(float(np.mean(cd)))
            per_episode[(h, "cd_hd")].append(float(np.mean(cd + hausdorff_distance(pred, gt))))
    mean, std = {}, {}
    used = 0
    for key, values in per_episode.items():
        if not values:
            raise InvalidInputError(f"no episode is long enough for horizon {key[0]}")
        mean[key] = float(np.mean(values))
        std[key] = float(np.std(values))
        used = max(used, len(values))
    return MetricsReport(dataset.spec.task, name, horizons, mean, std, used)


def ablate_hybrid(
    train_data: Dataset,
    eval_data: Dataset,
    model_cfg: ModelConfig,
    configs: tuple[TrainConfig, TrainConfig],
    horizons: Sequence[int] = (1, 5),
) -> tuple[MetricsReport, MetricsReport]:
    """Train two configs that differ only in ``alpha`` and evaluate both on ``eval_data``.

    Both runs share the seed, so they see the same initialisation and batches.
    """
    a, b = configs
    if replace(a, alpha=b.alpha) != b:
        raise InvalidInputError("ablation configs must differ only in alpha")
    reports = []
    for cfg in configs:
        result = train(train_data, model_cfg, cfg)
        reports.append(evaluate(result.params, eval_data, horizons, object_motion_feedback=cfg.object_motion_feedback))
    return reports[0], reports[1]
