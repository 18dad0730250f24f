"""MPPI control with a particle dynamics model and a normalised CD+HD goal cost."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .episodes import Episode, episode_from_scenes
from .errors import InvalidActionError, InvalidInputError, PlanningFailedError
from .metrics import chamfer_distance, hausdorff_distance, validate_points
from .model import ModelParams, ParticleSet, rollout_tensors
from .simulator import SceneState, TaskSpec, _apply_box_pose, step


@dataclass(frozen=True)
class PlanConfig:
    horizon: int = 10
    num_samples: int = 64
    noise_std: float = 0.01
    temperature: float = 0.1
    iterations: int = 1
    terminal_weight: float = 2.0
    collision_penalty: float = 10.0
    infeasible_penalty: float = 10.0
    # per-dimension action bounds (length = action dim); None derives them from the task
    action_low: tuple | None = None
    action_high: tuple | None = None
    goal_threshold: float = 0.05

    def __post_init__(self):
        if self.horizon < 1 or self.num_samples < 1 or self.iterations < 1:
            raise InvalidInputError("horizon, num_samples and iterations must be >= 1")
        if not self.temperature > 0:
            raise InvalidInputError("temperature must be positive")
        if not self.noise_std >= 0:
            raise InvalidInputError("noise_std must be >= 0")
        if (self.action_low is None) != (self.action_high is None):
            raise InvalidInputError("give both action_low and action_high or neither")
        if self.action_low is not None and np.any(np.asarray(self.action_low) > np.asarray(self.action_high)):
            raise InvalidInputError("action_low must not exceed action_high")

    def bounds(self, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
        if self.action_low is not None:
            low, high = np.asarray(self.action_low, float), np.asarray(self.action_high, float)
            if low.shape != (spec.action_dim,):
                raise InvalidInputError(f"action bounds need {spec.action_dim} entries")
            return low, high
        return default_action_bounds(spec)


def default_action_bounds(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis box whose corners respect the simulator speed limit.

    Pushers stay in the plane; grippers may move in z.
    """
    planar = spec.effector in ("pusher", "flat_pusher")
    per_tool = np.array([1.0, 1.0, 0.0]) * (spec.max_step / math.sqrt(2)) if planar else np.full(
        3, spec.max_step / math.sqrt(3)
    )
    high = np.tile(per_tool, spec.num_tools)
    return -high, high


@dataclass
class CostSpec:
    """Goal point set plus the normaliser fixed at control start."""

    target: np.ndarray
    goal_weight: float = 1.0
    normalizer: float | None = None

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=float)
        validate_points(self.target, "target")
        if self.target.ndim != 2:
            raise InvalidInputError("target must be a single (N, 3) point set")

    @property
    def normalized(self) -> bool:
        return self.normalizer is not None and self.normalizer > 0

    def anchored(self, initial_obj: np.ndarray) -> "CostSpec":
        """Copy with the normaliser set to CD+HD of ``initial_obj`` against the target."""
        return replace(self, normalizer=float(_cd_hd(np.asarray(initial_obj, float), self.target)))


def _cd_hd(pred: np.ndarray, target: np.ndarray):
    if pred.ndim > target.ndim:
        target = np.broadcast_to(target, pred.shape[:-2] + target.shape)
    return chamfer_distance(pred, target) + hausdorff_distance(pred, target)


def goal_cost(pred_obj, spec: CostSpec):
    """Weighted (CD + exact HD) to the target, divided by the control-start value.

    A zero (or unset) normaliser falls back to the raw distance;
    ``spec.normalized`` reports which applies. Accepts batches ``(..., N, 3)``.
    """
    pred_obj = np.asarray(pred_obj, dtype=float)
    validate_points(pred_obj, "pred_obj")
    raw = _cd_hd(pred_obj, spec.target)
    scale = spec.normalizer if spec.normalized else 1.0
    return spec.goal_weight * raw / scale


# dynamics back-ends used for sampling


class ModelDynamics:
    """Batched rollouts of the learned model from a particle observation."""

    def __init__(self, params: ModelParams, object_motion_feedback: bool = False):
        self.params = params
        self.feedback = object_motion_feedback

    def rollout(self, obs: ParticleSet, ee_poses: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Object positions ``(K, H, N, 3)`` for effector poses ``(K, H, M, 3)``."""
        k = len(ee_poses)
        pos = np.broadcast_to(obs.positions, (k,) + obs.positions.shape)
        mot = np.broadcast_to(obs.motion, (k,) + obs.motion.shape)
        with ad.no_grad():
            preds = rollout_tensors(self.params.tensors(), self.params.config, pos, mot, obs.materials,
                                    obs.is_ee, ee_poses, ee_poses.shape[1], self.feedback)
        return np.stack([x.data[:, ~obs.is_ee] for x in preds], axis=1)


class PersistenceDynamics:
    """Frozen-object model: objects never move."""

    def rollout(self, obs: ParticleSet, ee_poses: np.ndarray, actions: np.ndarray) -> np.ndarray:
        k, h = ee_poses.shape[:2]
        return np.broadcast_to(obs.object_positions, (k, h) + obs.object_positions.shape).copy()


class SimulatorDynamics:
    """Ground-truth model: replays every sample in the simulator."""

    def __init__(self):
        self.scene: SceneState | None = None

    def rollout(self, obs: ParticleSet, ee_poses: np.ndarray, actions: np.ndarray) -> np.ndarray:
        if self.scene is None:
            raise InvalidInputError("simulator dynamics need the current scene")
        out = np.empty(actions.shape[:2] + self.scene.obj.shape)
        for i, seq in enumerate(actions):
            s = self.scene
            for j, a in enumerate(seq):
                s = step(s, a)
                out[i, j] = s.obj
        return out


def _as_dynamics(model):
    if isinstance(model, ModelParams):
        return ModelDynamics(model)
    if model == "persistence":
        return PersistenceDynamics()
    if model == "simulator":
        return SimulatorDynamics()
    if hasattr(model, "rollout"):
        return model
    raise InvalidInputError(f"unsupported dynamics {model!r}")


def effector_poses(obs: ParticleSet, ee_tool: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Effector point poses after each action, ``(K, H, M, 3)``; tools move rigidly."""
    k, h, dim = actions.shape
    per_tool = actions.reshape(k, h, dim // 3, 3)
    steps = np.cumsum(per_tool[:, :, ee_tool], axis=1)
    return obs.effector_positions[None, None] + steps


@dataclass
class PlanResult:
    actions: np.ndarray  # (H, action_dim), within bounds
    sample_costs: list[np.ndarray]  # per iteration, (K,)
    weighted_costs: list[float]  # exp-weighted mean cost per iteration
    uniform_costs: list[float]  # plain mean cost per iteration
    best_cost: float = math.inf
    feasible: bool = True


def _score(dyn, obs, ee_tool, samples, spec: CostSpec, cfg: PlanConfig, task: TaskSpec):
    poses = effector_poses(obs, ee_tool, samples)
    objs = dyn.rollout(obs, poses, samples)
    per_step = goal_cost(objs, spec)  # (K, H)
    cost = per_step.sum(axis=1) + cfg.terminal_weight * per_step[:, -1]
    scale = spec.goal_weight
    (x0, x1), (y0, y1), (z0, z1) = task.bounds
    xy = poses[..., :2]
    outside = (
        (xy[..., 0] < x0) | (xy[..., 0] > x1) | (xy[..., 1] < y0) | (xy[..., 1] > y1) | (poses[..., 2] > z1)
    ).any(axis=2)
    below = (poses[..., 2] < z0).any(axis=2)
    penalty = cfg.infeasible_penalty * scale * outside.sum(axis=1) + cfg.collision_penalty * scale * below.sum(axis=1)
    return cost + penalty, (penalty > 0)


def mppi_plan(
    model,
    obs: ParticleSet,
    spec: CostSpec,
    cfg: PlanConfig,
    task: TaskSpec,
    ee_tool: np.ndarray,
    seed=0,
    nominal: np.ndarray | None = None,
) -> PlanResult:
    """One MPPI solve from observation ``obs``.

    ``model`` is :class:`ModelParams`, ``"persistence"``, ``"simulator"`` (with
    the scene set on a :class:`SimulatorDynamics`) or any object with a
    ``rollout`` method. ``nominal`` is the warm start, ``(H, action_dim)``.
    """
    obs.validate()
    dyn = _as_dynamics(model)
    low, high = cfg.bounds(task)
    dim = task.action_dim
    if nominal is None:
        nominal = np.zeros((cfg.horizon, dim))
    nominal = np.asarray(nominal, dtype=float)
    if nominal.shape != (cfg.horizon, dim):
        raise InvalidInputError(f"nominal plan must be {(cfg.horizon, dim)}, got {nominal.shape}")
    rng = np.random.default_rng(seed)
    result = PlanResult(np.clip(nominal, low, high), [], [], [])
    best, best_cost, any_feasible = result.actions, math.inf, False
    for _ in range(cfg.iterations):
        noise = rng.normal(0.0, cfg.noise_std, size=(cfg.num_samples, cfg.horizon, dim))
        samples = np.clip(result.actions[None] + noise, low, high)
        costs, infeasible = _score(dyn, obs, ee_tool, samples, spec, cfg, task)
        if not np.all(np.isfinite(costs)):
            raise PlanningFailedError("non-finite sample cost", best=best)
        w = np.exp(-(costs - costs.min()) / cfg.temperature)
        w /= w.sum()
        result.sample_costs.append(costs)
        result.weighted_costs.append(float(w @ costs))
        result.uniform_costs.append(float(costs.mean()))
        k = int(np.argmin(costs))
        if costs[k] < best_cost:
            best, best_cost = samples[k], float(costs[k])
        any_feasible |= bool((~infeasible).any())
        # offsets from the best sample keep identical samples exact
        result.actions = np.clip(samples[k] + np.tensordot(w, samples - samples[k], axes=1), low, high)
    result.best_cost = best_cost
    if not any_feasible:
        raise PlanningFailedError("every sampled action sequence violated a constraint", best=best)
    return result


def approach_plan(scene: SceneState, horizon: int, low: np.ndarray, high: np.ndarray, speed: float = 0.7) -> np.ndarray:
    """Initial nominal: every tool heads for the object centroid in the plane.

    The goal cost is flat until a tool touches the object, so a zero
    nominal leaves the sampler wandering; this only seeds the first solve.
    """
    centre = scene.obj[:, :2].mean(axis=0)
    per_tool = np.zeros((scene.spec.num_tools, 3))
    for i, tool in enumerate(scene.tools):
        d = centre - tool[:2]
        norm = np.linalg.norm(d)
        if norm > 0:
            per_tool[i, :2] = d / norm * speed * scene.spec.max_step
    return np.clip(np.tile(per_tool.reshape(-1), (horizon, 1)), low, high)


def shift_plan(actions: np.ndarray) -> np.ndarray:
    """Warm start for the next replan: drop the executed action, repeat the last one."""
    return np.concatenate([actions[1:], actions[-1:]], axis=0)


@dataclass
class ControlResult:
    scenes: list[SceneState]
    actions: list[np.ndarray]
    goal_costs: list[float]  # goal term of every observed state, starting at control start
    plans: list[PlanResult] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)  # steps whose action the simulator refused
    normalized: bool = True
    success: bool = False

    @property
    def final_cost(self) -> float:
        return self.goal_costs[-1]

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        dim = len(self.actions[0]) if self.actions else 0
        w.writerow(["step", "goal_cost", "sample_cost_min", "sample_cost_mean", "weighted_cost", "rejected"]
                   + [f"action_{i}" for i in range(dim)])
        for s, cost in enumerate(self.goal_costs):
            row = [s, repr(cost)]
            if s < len(self.plans):
                c = self.plans[s].sample_costs[-1]
                row += [repr(float(c.min())), repr(float(c.mean())), repr(self.plans[s].weighted_costs[-1]),
                        int(s in self.rejected)]
                row += [repr(float(v)) for v in self.actions[s]]
            w.writerow(row)
        return buf.getvalue()


def closed_loop_control(
    scene: SceneState,
    model,
    target: np.ndarray,
    cfg: PlanConfig = PlanConfig(),
    max_steps: int = 30,
    seed: int = 0,
    goal_weight: float = 1.0,
    approach: bool = True,
) -> ControlResult:
    """Replan with MPPI, execute the first action in the simulator, observe, repeat.

    Stops after ``max_steps`` actions or once the goal term drops below
    ``cfg.goal_threshold``. A refused action halves the bounds for a replan.
    With ``approach`` the first nominal drives the tools at the object
    (see :func:`approach_plan`); otherwise it is zero.
    """
    spec = CostSpec(target, goal_weight).anchored(scene.obj)
    dyn = _as_dynamics(model)
    task = scene.spec
    result = ControlResult([scene], [], [float(goal_cost(scene.obj, spec))], normalized=spec.normalized)
    nominal = None
    plan_cfg = cfg
    for s in range(max_steps):
        if result.goal_costs[-1] < cfg.goal_threshold:
            break
        if isinstance(dyn, SimulatorDynamics):
            dyn.scene = scene
        for attempt in range(4):
            if nominal is None and approach:
                nominal = approach_plan(scene, plan_cfg.horizon, *plan_cfg.bounds(task))
            try:
                plan = mppi_plan(dyn, scene.particle_set(), spec, plan_cfg, task, scene.ee_tool,
                                 seed=[seed, s, attempt], nominal=nominal)
            except PlanningFailedError as exc:
                raise PlanningFailedError(f"control step {s}: {exc}", best=result) from exc
            try:
                scene = step(scene, plan.actions[0])
                break
            except InvalidActionError:
                result.rejected.append(s)
                low, high = plan_cfg.bounds(task)
                plan_cfg = replace(plan_cfg, action_low=tuple(low / 2), action_high=tuple(high / 2))
                nominal = None
        else:
            raise PlanningFailedError(f"simulator refused every replanned action at step {s}", best=result)
        result.plans.append(plan)
        result.actions.append(plan.actions[0])
        result.scenes.append(scene)
        result.goal_costs.append(float(goal_cost(scene.obj, spec)))
        nominal = shift_plan(plan.actions)
    result.success = result.goal_costs[-1] < cfg.goal_threshold
    return result


def box_target(scene: SceneState, shift: float = 0.08, turn: float = 0.3) -> np.ndarray:
    """Box particles after moving the box ``shift`` metres away from the pusher and turning it."""
    if scene.box_pose is None:
        raise InvalidInputError("box_target needs a box_push scene")
    moved = scene.copy()
    x, y, theta = scene.box_pose
    away = np.array([x, y]) - scene.tools[0, :2]
    away /= np.linalg.norm(away)
    moved.box_pose = np.array([x + shift * away[0], y + shift * away[1], theta + turn])
    _apply_box_pose(moved)
    return moved.obj.copy()


def trajectory_episode(result: ControlResult) -> Episode:
    """Controlled trajectory in the episode format, for replay."""
    return episode_from_scenes(result.scenes)


__all__ = [
    "PlanConfig",
    "CostSpec",
    "PlanResult",
    "ControlResult",
    "goal_cost",
    "mppi_plan",
    "closed_loop_control",
    "shift_plan",
    "approach_plan",
    "box_target",
    "default_action_bounds",
    "effector_poses",
    "trajectory_episode",
    "ModelDynamics",
    "PersistenceDynamics",
    "SimulatorDynamics",
]
