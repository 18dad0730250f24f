"""Deterministic quasi-static multi-material particle simulator.

Desk-scale stand-ins for the benchmark tasks: a pushed rigid box, a pushed
rope, a pile of disks under a flat pusher, a cloth dragged by one corner,
disks on a cloth lifted by a gripper, and a rope held by two grippers that
sweeps disks.

Dynamics are position based and carry no velocity. A step first resolves
the objects against the effector pose at the start of the step and then
moves the effector kinematically, so the recorded frame ``t`` shows the
effector command ``x_ee[t] - x_ee[t-1]`` whose consequence on the objects
appears in frame ``t + 1``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import InvalidActionError, InvalidInputError
from .model import ParticleSet, material_onehot

RIGID, GRANULAR, ROPE, CLOTH = 0, 1, 2, 3
EE_CODE = 255

TASKS = ("box_push", "rope", "granular", "cloth", "cloth_gather", "rope_sweep")
EFFECTOR_POINTS = 8
SOLVER_ITERATIONS = 8

# per-material particle radii (m); particle centres stay at z >= radius
GRANULAR_RADIUS = 0.015
ROPE_RADIUS = 0.008
CLOTH_RADIUS = 0.002
BOX_SIZE = (0.12, 0.08, 0.04)
GRAVITY_STEP = 0.006
OVERLAP_SLOP = 1e-9
CONTACT_TOL = 1e-12  # ignore contacts shallower than rounding noise


@dataclass(frozen=True)
class TaskSpec:
    """Static description of one task scene."""

    task: str
    counts: dict = field(default_factory=dict)
    bounds: tuple = ((0.0, 0.7), (0.0, 0.55), (0.0, 0.4))
    friction: float = 0.3
    dt: float = 0.1
    max_speed: float = 0.15
    effector: str = "pusher"
    effector_radius: float = 0.02
    rest_length: float = 0.02
    cloth_spacing: float = 0.04
    granular_radius: float = GRANULAR_RADIUS

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidInputError(f"unknown task id {self.task!r}; expected one of {TASKS}")
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        if not self.max_speed > 0:
            raise InvalidInputError("max_speed must be positive")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise InvalidInputError(f"degenerate workspace bounds {self.bounds}")
        for name, n in self.counts.items():
            if int(n) < 1:
                raise InvalidInputError(f"particle count for {name} must be >= 1")

    @property
    def num_tools(self) -> int:
        return 2 if self.effector == "dual_gripper" else 1

    @property
    def max_step(self) -> float:
        return self.max_speed * self.dt

    @property
    def action_dim(self) -> int:
        return 3 * self.num_tools

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "counts": dict(self.counts),
            "bounds": [list(b) for b in self.bounds],
            "friction": self.friction,
            "dt": self.dt,
            "max_speed": self.max_speed,
            "effector": self.effector,
            "effector_radius": self.effector_radius,
            "rest_length": self.rest_length,
            "cloth_spacing": self.cloth_spacing,
            "granular_radius": self.granular_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        d["bounds"] = tuple(tuple(b) for b in d.get("bounds", cls.bounds))
        d["counts"] = {k: int(v) for k, v in d.get("counts", {}).items()}
        return cls(**d)


_DEFAULTS = {
    "box_push": dict(counts={"rigid": 32}, effector="pusher", effector_radius=0.02),
    "rope": dict(counts={"rope": 32}, effector="pusher", effector_radius=0.02, rest_length=0.015),
    "granular": dict(counts={"granular": 32}, effector="flat_pusher", effector_radius=0.06),
    "cloth": dict(counts={"cloth": 36}, effector="gripper", effector_radius=0.01),
    "cloth_gather": dict(
        counts={"cloth": 36, "granular": 12},
        effector="gripper",
        effector_radius=0.01,
        granular_radius=0.012,
    ),
    "rope_sweep": dict(
        counts={"rope": 20, "granular": 20}, effector="dual_gripper", effector_radius=0.01
    ),
}


def default_task_spec(task: str, **overrides) -> TaskSpec:
    if task not in _DEFAULTS:
        raise InvalidInputError(f"unknown task id {task!r}; expected one of {TASKS}")
    kwargs = dict(_DEFAULTS[task])
    kwargs.update(overrides)
    return TaskSpec(task=task, **kwargs)


@dataclass
class SceneState:
    """Observable particles plus the hidden state each material needs."""

    spec: TaskSpec
    obj: np.ndarray  # (N, 3)
    codes: np.ndarray  # (N,) material codes
    tools: np.ndarray  # (num_tools, 3) tool centres
    ee_offsets: np.ndarray  # (M, 3) effector points relative to their tool
    ee_tool: np.ndarray  # (M,) owning tool of each effector point
    last_delta: np.ndarray  # (num_tools, 3) most recent tool motion
    box_pose: np.ndarray | None = None  # (x, y, theta)
    box_local: np.ndarray | None = None  # (n_box, 3) body-frame points
    rope_idx: np.ndarray | None = None
    rope_rest: np.ndarray | None = None
    cloth_idx: np.ndarray | None = None
    cloth_shape: tuple | None = None
    springs: np.ndarray | None = None  # (S, 2) particle index pairs
    spring_rest: np.ndarray | None = None
    spring_colours: list | None = None
    pinned: np.ndarray | None = None  # (num_tools,) object index held by each tool, -1 none
    granular_idx: np.ndarray | None = None
    step_count: int = 0

    @property
    def ee_positions(self) -> np.ndarray:
        return self.tools[self.ee_tool] + self.ee_offsets

    @property
    def ee_motion(self) -> np.ndarray:
        return self.last_delta[self.ee_tool]

    def particle_set(self) -> ParticleSet:
        n, m = len(self.obj), len(self.ee_offsets)
        positions = np.concatenate([self.obj, self.ee_positions])
        motion = np.zeros((n + m, 3))
        motion[n:] = self.ee_motion
        codes = np.concatenate([self.codes, np.full(m, EE_CODE)])
        is_ee = np.zeros(n + m, dtype=bool)
        is_ee[n:] = True
        return ParticleSet(positions, material_onehot(codes), motion, is_ee)

    def material_codes(self) -> np.ndarray:
        return np.concatenate(
            [self.codes, np.full(len(self.ee_offsets), EE_CODE)]
        ).astype(np.uint8)

    def copy(self) -> "SceneState":
        return copy.deepcopy(self)


# geometry helpers


def farthest_point_sampling(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Indices of ``count`` points chosen greedily to maximise spread."""
    if count > len(points):
        raise InvalidInputError(f"cannot sample {count} points from {len(points)}")
    chosen = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _effector_geometry(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Effector point offsets (M, 3) relative to the tool centre and tool ids."""
    m = EFFECTOR_POINTS
    r = spec.effector_radius
    if spec.effector == "pusher":
        ang = np.arange(m) * (2 * np.pi / m)
        offsets = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(m)], axis=1)
        return offsets, np.zeros(m, dtype=int)
    if spec.effector == "flat_pusher":
        ys = np.linspace(-r, r, m)
        offsets = np.stack([np.zeros(m), ys, np.zeros(m)], axis=1)
        return offsets, np.zeros(m, dtype=int)
    if spec.effector == "gripper":
        zs = np.repeat(np.arange(m // 2) * 0.01, 2)
        xs = np.tile([-r, r], m // 2)
        offsets = np.stack([xs, np.zeros(m), zs], axis=1)
        return offsets, np.zeros(m, dtype=int)
    if spec.effector == "dual_gripper":
        half = m // 2
        ang = np.arange(half) * (2 * np.pi / half)
        ring = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(half)], axis=1)
        return np.concatenate([ring, ring]), np.repeat([0, 1], half)
    raise InvalidInputError(f"unknown effector kind {spec.effector!r}")


def _random_disks(rng, count, radius, center, extent, z, existing=None, tries=4000):
    """Rejection-sample non-overlapping disks inside an axis-aligned patch."""
    # centres live in the patch, so each disk claims at least its own area of it
    # (hexagonal packing density bounds what can ever fit)
    if count * np.pi * radius**2 > 0.9069 * 4 * (extent[0] + radius) * (extent[1] + radius):
        raise InvalidInputError(
            f"{count} disks of radius {radius} cannot fit in a {2 * extent[0]:.3f} x {2 * extent[1]:.3f} m patch"
        )
    placed = [] if existing is None else list(existing)
    out = []
    for _ in range(count):
        for _attempt in range(tries):
            p = center + rng.uniform(-1.0, 1.0, size=2) * extent
            if all(np.hypot(*(p - q[:2])) >= 2 * radius + 1e-6 for q in placed):
                break
        else:
            raise InvalidInputError(
                f"cannot place {count} disks of radius {radius} in a {2 * extent[0]:.3f} x "
                f"{2 * extent[1]:.3f} m patch"
            )
        pt = np.array([p[0], p[1], z])
        placed.append(pt)
        out.append(pt)
    return np.array(out)


def _rope_curve(rng, links, rest, bounds, start=None, heading=None, bend=0.25, tries=200):
    """A random smooth planar polyline with exact segment lengths inside ``bounds``."""
    (x0, x1), (y0, y1) = bounds[0], bounds[1]
    margin = 0.03
    for attempt in range(tries):
        # later attempts coil more tightly so long ropes still fit
        curl = bend * (1.0 + 3.0 * attempt / tries)
        p = np.array(start) if start is not None else rng.uniform([x0 + 0.1, y0 + 0.1], [x1 - 0.1, y1 - 0.1])
        h = heading if heading is not None else rng.uniform(0, 2 * np.pi)
        pts = [p]
        for _k in range(links):
            h += rng.normal(0.0, curl)
            p = p + rest * np.array([np.cos(h), np.sin(h)])
            pts.append(p)
        pts = np.array(pts)
        if (
            pts[:, 0].min() >= x0 + margin
            and pts[:, 0].max() <= x1 - margin
            and pts[:, 1].min() >= y0 + margin
            and pts[:, 1].max() <= y1 - margin
        ):
            return pts
    raise InvalidInputError(
        f"a rope of {links} links x {rest} m does not fit in the workspace {bounds[:2]}"
    )


# scene construction


def create_scene(spec: TaskSpec, seed: int = 0) -> SceneState:
    """Build a reproducible initial scene for ``spec``."""
    rng = np.random.default_rng(seed)
    builder = _BUILDERS[spec.task]
    return builder(spec, rng)


def _base(spec, obj, codes, tools, **hidden) -> SceneState:
    offsets, tool_ids = _effector_geometry(spec)
    return SceneState(
        spec=spec,
        obj=np.asarray(obj, dtype=float),
        codes=np.asarray(codes, dtype=np.uint8),
        tools=np.asarray(tools, dtype=float).reshape(spec.num_tools, 3),
        ee_offsets=offsets,
        ee_tool=tool_ids,
        last_delta=np.zeros((spec.num_tools, 3)),
        **hidden,
    )


def _box_dense(size, spacing=0.01):
    axes = [np.linspace(-s / 2, s / 2, int(round(s / spacing)) + 1) for s in size]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid[:, 2] += size[2] / 2
    return grid


def _build_box_push(spec, rng):
    n = spec.counts.get("rigid", 32)
    dense = _box_dense(BOX_SIZE)
    if n > len(dense):
        raise InvalidInputError(f"box supports at most {len(dense)} particles, asked for {n}")
    local = dense[farthest_point_sampling(dense, n, start=int(rng.integers(len(dense))))]
    (x0, x1), (y0, y1) = spec.bounds[0], spec.bounds[1]
    cx = rng.uniform(x0 + 0.25, x1 - 0.25)
    cy = rng.uniform(y0 + 0.2, y1 - 0.2)
    theta = rng.uniform(-np.pi, np.pi)
    pose = np.array([cx, cy, theta])
    angle = rng.uniform(0, 2 * np.pi)
    reach = np.hypot(BOX_SIZE[0], BOX_SIZE[1]) / 2 + spec.effector_radius + 0.02
    tool = np.array([cx + reach * np.cos(angle), cy + reach * np.sin(angle), spec.effector_radius])
    scene = _base(
        spec, np.zeros((n, 3)), np.full(n, RIGID), tool, box_pose=pose, box_local=local
    )
    _apply_box_pose(scene)
    return scene


def _apply_box_pose(scene):
    x, y, theta = scene.box_pose
    xy = scene.box_local[:, :2] @ _rot(theta).T + np.array([x, y])
    scene.obj = np.column_stack([xy, scene.box_local[:, 2]])


def _build_rope(spec, rng):
    n = spec.counts.get("rope", 32)
    pts = _rope_curve(rng, n - 1, spec.rest_length, spec.bounds)
    obj = np.column_stack([pts, np.full(n, ROPE_RADIUS)])
    rest = np.linalg.norm(np.diff(obj, axis=0), axis=1)
    # pusher starts beside a random rope particle
    k = int(rng.integers(n))
    angle = rng.uniform(0, 2 * np.pi)
    reach = spec.effector_radius + ROPE_RADIUS + 0.04
    tool = np.array([obj[k, 0] + reach * np.cos(angle), obj[k, 1] + reach * np.sin(angle), spec.effector_radius])
    return _base(
        spec, obj, np.full(n, ROPE), tool, rope_idx=np.arange(n), rope_rest=rest, pinned=np.array([-1])
    )


def _build_granular(spec, rng):
    n = spec.counts.get("granular", 32)
    r = spec.granular_radius
    (x0, x1), (y0, y1) = spec.bounds[0], spec.bounds[1]
    center = np.array([rng.uniform(x0 + 0.3, x1 - 0.2), rng.uniform(y0 + 0.2, y1 - 0.2)])
    side = np.sqrt(n) * 2.6 * r / 2
    if center[0] - side < x0 or center[0] + side > x1 or center[1] - side < y0 or center[1] + side > y1:
        raise InvalidInputError(f"{n} disks of radius {r} do not fit in the workspace {spec.bounds[:2]}")
    obj = _random_disks(rng, n, r, center, np.array([side, side]), r)
    tool = np.array([center[0] - side - spec.effector_radius * 0.5 - 0.05, center[1], 0.02])
    return _base(spec, obj, np.full(n, GRANULAR), tool, granular_idx=np.arange(n))


def _cloth_grid(spec, n, center):
    side = int(round(np.sqrt(n)))
    if side * side != n:
        raise InvalidInputError(f"cloth particle count must be a square, got {n}")
    h = spec.cloth_spacing
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    xy = np.stack([ii.ravel(), jj.ravel()], axis=1) * h
    xy = xy - xy.mean(axis=0) + center
    obj = np.column_stack([xy, np.full(n, CLOTH_RADIUS)])
    springs = []
    for i in range(side):
        for j in range(side):
            for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2)):
                a, b = i + di, j + dj
                if 0 <= a < side and 0 <= b < side:
                    springs.append((i * side + j, a * side + b))
    springs = np.array(springs)
    rest = np.linalg.norm(obj[springs[:, 0]] - obj[springs[:, 1]], axis=1)
    return obj, (side, side), springs, rest, _colour_edges(springs, n)


def _colour_edges(edges: np.ndarray, n: int) -> list[np.ndarray]:
    """Greedy edge colouring: springs of one colour share no particle."""
    colours: list[list[int]] = []
    used: list[set] = []
    for k, (a, b) in enumerate(edges):
        for c, members in enumerate(used):
            if a not in members and b not in members:
                colours[c].append(k)
                members.update((a, b))
                break
        else:
            colours.append([k])
            used.append({a, b})
    return [np.array(c) for c in colours]


def _build_cloth(spec, rng):
    n = spec.counts.get("cloth", 36)
    (x0, x1), (y0, y1) = spec.bounds[0], spec.bounds[1]
    center = np.array([rng.uniform(x0 + 0.25, x1 - 0.25), rng.uniform(y0 + 0.2, y1 - 0.2)])
    obj, shape, springs, rest, colours = _cloth_grid(spec, n, center)
    side = shape[0]
    corners = [0, side - 1, side * (side - 1), side * side - 1]
    grasp = corners[int(rng.integers(4))]
    return _base(
        spec,
        obj,
        np.full(n, CLOTH),
        obj[grasp],
        cloth_idx=np.arange(n),
        cloth_shape=shape,
        springs=springs,
        spring_rest=rest,
        spring_colours=colours,
        pinned=np.array([grasp]),
    )


def _build_cloth_gather(spec, rng):
    nc = spec.counts.get("cloth", 36)
    ng = spec.counts.get("granular", 12)
    (x0, x1), (y0, y1) = spec.bounds[0], spec.bounds[1]
    center = np.array([rng.uniform(x0 + 0.25, x1 - 0.25), rng.uniform(y0 + 0.2, y1 - 0.2)])
    cloth, shape, springs, rest, colours = _cloth_grid(spec, nc, center)
    side = shape[0]
    r = spec.granular_radius
    half = (side - 1) * spec.cloth_spacing / 2 - r
    disks = _random_disks(rng, ng, r, center, np.array([half, half]), CLOTH_RADIUS + r)
    edge = [i * side + j for i in range(side) for j in range(side) if i in (0, side - 1) or j in (0, side - 1)]
    grasp = edge[int(rng.integers(len(edge)))]
    obj = np.concatenate([cloth, disks])
    codes = np.concatenate([np.full(nc, CLOTH), np.full(ng, GRANULAR)])
    return _base(
        spec,
        obj,
        codes,
        cloth[grasp],
        cloth_idx=np.arange(nc),
        cloth_shape=shape,
        springs=springs,
        spring_rest=rest,
        spring_colours=colours,
        pinned=np.array([grasp]),
        granular_idx=np.arange(nc, nc + ng),
    )


def _build_rope_sweep(spec, rng):
    nr = spec.counts.get("rope", 20)
    ng = spec.counts.get("granular", 20)
    links = nr - 1
    length = links * spec.rest_length
    chord = 0.85 * length
    # circular arc of the given length spanning the chord
    half_angle = brentq(lambda a: np.sin(a) / a - chord / length, 1e-6, np.pi - 1e-6)
    radius = length / (2 * half_angle)
    (x0, x1), (y0, y1) = spec.bounds[0], spec.bounds[1]
    cx = rng.uniform(x0 + 0.12, x0 + 0.2)
    cy = rng.uniform(y0 + chord / 2 + 0.03, y1 - chord / 2 - 0.03)
    angles = np.linspace(-half_angle, half_angle, nr)
    # arc bulges toward +x, the sweep direction
    xs = cx + radius * (np.cos(angles) - np.cos(half_angle))
    ys = cy + radius * np.sin(angles)
    rope = np.column_stack([xs, ys, np.full(nr, ROPE_RADIUS)])
    rest = np.linalg.norm(np.diff(rope, axis=0), axis=1)
    r = spec.granular_radius
    front = np.array([cx + radius * (1 - np.cos(half_angle)) + 0.05 + 0.08, cy])
    disks = _random_disks(rng, ng, r, front, np.array([0.07, chord / 2 - 0.02]), r)
    obj = np.concatenate([rope, disks])
    codes = np.concatenate([np.full(nr, ROPE), np.full(ng, GRANULAR)])
    tools = np.stack([rope[0], rope[-1]])
    return _base(
        spec,
        obj,
        codes,
        tools,
        rope_idx=np.arange(nr),
        rope_rest=rest,
        pinned=np.array([0, nr - 1]),
        granular_idx=np.arange(nr, nr + ng),
    )


_BUILDERS = {
    "box_push": _build_box_push,
    "rope": _build_rope,
    "granular": _build_granular,
    "cloth": _build_cloth,
    "cloth_gather": _build_cloth_gather,
    "rope_sweep": _build_rope_sweep,
}


# constraint solvers


def _resolve_box(scene: SceneState) -> None:
    spec = scene.spec
    hx, hy = BOX_SIZE[0] / 2, BOX_SIZE[1] / 2
    radius_sq = (hx**2 + hy**2) / 3.0
    c = scene.tools[0, :2]
    push = scene.last_delta[0, :2]
    for _ in range(SOLVER_ITERATIONS):
        contact = _box_contact(scene.box_pose, c, spec.effector_radius, hx, hy)
        if contact is None:
            break
        point, normal, depth = contact
        force = normal.copy()
        vn = push @ normal
        tangent_vel = push - vn * normal
        tn = np.linalg.norm(tangent_vel)
        if vn > 1e-12 and tn > 1e-12:
            # friction cone: tangential drag up to mu times the normal push
            force = force + (tangent_vel / tn) * min(spec.friction, tn / vn)
        arm = point - scene.box_pose[:2]
        denom = force @ normal + _cross2(arm, force) * _cross2(arm, normal) / radius_sq
        scale = depth / denom
        scene.box_pose[:2] += scale * force
        scene.box_pose[2] += scale * _cross2(arm, force) / radius_sq
    contact = _box_contact(scene.box_pose, c, spec.effector_radius, hx, hy)
    if contact is not None:
        _, normal, depth = contact
        scene.box_pose[:2] += depth * normal
    _apply_box_pose(scene)


def _box_contact(pose, center, radius, hx, hy):
    """Contact point, normal (pusher into box) and depth, or None without overlap."""
    rot = _rot(pose[2])
    local = rot.T @ (center - pose[:2])
    q = np.clip(local, [-hx, -hy], [hx, hy])
    gap = local - q
    dist = np.hypot(*gap)
    if dist > 0:
        if dist >= radius:
            return None
        n_local = -gap / dist
        depth = radius - dist
    else:
        # pusher centre inside the footprint: exit through the nearest face
        faces = np.array([hx - local[0], hx + local[0], hy - local[1], hy + local[1]])
        k = int(np.argmin(faces))
        n_local = [np.array([-1.0, 0]), np.array([1.0, 0]), np.array([0, -1.0]), np.array([0, 1.0])][k]
        q = local.copy()
        q[k // 2] = [hx, -hx, hy, -hy][k]
        depth = radius + faces[k]
    return pose[:2] + rot @ q, rot @ n_local, depth


def _push_out_of_circle(points: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Planar projection of points out of a disk; returns per-point displacement norms."""
    d = points[:, :2] - center
    dist = np.hypot(d[:, 0], d[:, 1])
    inside = dist < radius - CONTACT_TOL
    moved = np.zeros(len(points))
    if inside.any():
        safe = np.where(dist[inside] > 0, dist[inside], 1.0)
        direction = np.where((dist[inside] > 0)[:, None], d[inside] / safe[:, None], np.array([1.0, 0.0]))
        target = center + direction * radius
        moved[inside] = radius - dist[inside]
        points[inside, :2] = target
    return moved


def _follow_the_leader(pts: np.ndarray, rest: np.ndarray, anchor: int) -> None:
    """Enforce exact segment lengths outward from ``anchor`` (in place, planar)."""
    for i in range(anchor + 1, len(pts)):
        _place(pts, i, i - 1, rest[i - 1])
    for i in range(anchor - 1, -1, -1):
        _place(pts, i, i + 1, rest[i])


def _place(pts, i, j, length):
    d = pts[i, :2] - pts[j, :2]
    norm = np.hypot(*d)
    if norm == 0:
        d, norm = np.array([1.0, 0.0]), 1.0
    pts[i, :2] = pts[j, :2] + d * (length / norm)


def _distance_sweep(pts: np.ndarray, rest: np.ndarray, fixed: np.ndarray) -> None:
    """One Gauss-Seidel pass over rope segment constraints."""
    for i in range(len(rest)):
        a, b = i, i + 1
        d = pts[b, :2] - pts[a, :2]
        norm = np.hypot(*d)
        if norm == 0:
            continue
        err = norm - rest[i]
        wa = 0.0 if fixed[a] else 1.0
        wb = 0.0 if fixed[b] else 1.0
        if wa + wb == 0:
            continue
        corr = d / norm * err / (wa + wb)
        pts[a, :2] += wa * corr
        pts[b, :2] -= wb * corr


def _resolve_rope_push(scene: SceneState) -> None:
    spec = scene.spec
    rope = scene.obj[scene.rope_idx]
    reach = spec.effector_radius + ROPE_RADIUS
    center = scene.tools[0, :2]
    first = _push_out_of_circle(rope, center, reach)
    if not first.any():
        return
    anchor = int(np.argmax(first))
    pushed = first > 0
    for _ in range(SOLVER_ITERATIONS):
        _distance_sweep(rope, scene.rope_rest, pushed)
        _push_out_of_circle(rope, center, reach)
    _follow_the_leader(rope, scene.rope_rest, anchor)
    scene.obj[scene.rope_idx] = rope


def _fabrik(pts: np.ndarray, rest: np.ndarray, start: np.ndarray, end: np.ndarray, max_iter: int = 200) -> None:
    """Two-ended inextensible chain solve; the final pass leaves exact lengths.

    Sweeps repeat until the free end sits on its target (or stops moving when
    the target is out of reach).
    """
    n = len(pts)
    prev_gap = np.inf
    for _ in range(max_iter):
        pts[-1, :2] = end
        for i in range(n - 2, -1, -1):
            _place(pts, i, i + 1, rest[i])
        pts[0, :2] = start
        for i in range(1, n):
            _place(pts, i, i - 1, rest[i - 1])
        gap = np.hypot(*(pts[-1, :2] - end))
        if gap < 1e-12 or prev_gap - gap < 1e-13:
            break
        prev_gap = gap


def _segment_closest(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    ab = b - a
    denom = ab @ ab
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
    return a + t[:, None] * ab


def _push_out_of_capsule(points: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float, fallback: np.ndarray) -> bool:
    """Project planar points out of a 2-D capsule; return whether anything moved."""
    closest = _segment_closest(points[:, :2], a, b)
    d = points[:, :2] - closest
    dist = np.hypot(d[:, 0], d[:, 1])
    inside = dist < radius - CONTACT_TOL
    if not inside.any():
        return False
    safe = np.where(dist[inside] > 0, dist[inside], 1.0)
    direction = np.where((dist[inside] > 0)[:, None], d[inside] / safe[:, None], fallback)
    points[inside, :2] = closest[inside] + direction * radius
    return True


def _push_out_of_polyline(points: np.ndarray, verts: np.ndarray, radius: float, fallback: np.ndarray) -> bool:
    """Push planar points out of a chain of capsules, nearest segment first."""
    a, b = verts[:-1], verts[1:]
    moved = False
    for _ in range(len(a)):
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-300)
        rel = points[:, None, :2] - a[None]
        t = np.clip((rel * ab[None]).sum(axis=2) / denom, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        diff = points[:, None, :2] - closest
        dist = np.hypot(diff[..., 0], diff[..., 1])
        seg = np.argmin(dist, axis=1)
        rows = np.arange(len(points))
        dmin = dist[rows, seg]
        inside = dmin < radius - CONTACT_TOL
        if not inside.any():
            return moved
        moved = True
        d = diff[rows, seg][inside]
        dm = dmin[inside]
        safe = np.where(dm > 0, dm, 1.0)
        direction = np.where((dm > 0)[:, None], d / safe[:, None], fallback)
        points[inside, :2] = closest[rows, seg][inside] + direction * radius
    return moved


def _separate_disks(points: np.ndarray, radius: float, planar: bool, max_iter: int = 400) -> None:
    """Jacobi projection until no pair of disks (or spheres) overlaps."""
    n = len(points)
    if n < 2:
        return
    cols = slice(0, 2) if planar else slice(0, 3)
    iu = np.triu_indices(n, 1)
    target = 2 * radius
    for _ in range(max_iter):
        p = points[:, cols]
        diff = p[iu[0]] - p[iu[1]]
        dist = np.linalg.norm(diff, axis=1)
        overlap = dist < target
        if not overlap.any():
            return
        i, j = iu[0][overlap], iu[1][overlap]
        d = dist[overlap]
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[:, None], diff[overlap] / safe[:, None], _tie_direction(diff.shape[1]))
        corr = unit * ((target + OVERLAP_SLOP - d) / 2)[:, None]
        delta = np.zeros_like(p)
        np.add.at(delta, i, corr)
        np.add.at(delta, j, -corr)
        counts = np.bincount(np.concatenate([i, j]), minlength=n).astype(float)
        # averaging keeps many-neighbour particles from overshooting
        delta /= np.maximum(counts, 1.0)[:, None]
        points[:, cols] += delta
    # residual pass: sequential pairwise projection on plain floats
    pts = points[:, cols].tolist()
    pairs = list(zip(iu[0].tolist(), iu[1].tolist()))
    for _ in range(max_iter):
        worst = 0.0
        for a, b in pairs:
            pa, pb = pts[a], pts[b]
            d = [u - v for u, v in zip(pa, pb)]
            dist = math.sqrt(sum(c * c for c in d))
            if dist < target:
                unit = [c / dist for c in d] if dist > 0 else _tie_direction(len(d)).tolist()
                half = (target + OVERLAP_SLOP - dist) / 2
                pts[a] = [u + half * c for u, c in zip(pa, unit)]
                pts[b] = [v - half * c for v, c in zip(pb, unit)]
                worst = max(worst, target - dist)
        if worst == 0.0:
            break
    points[:, cols] = pts


def _tie_direction(dim):
    v = np.zeros(dim)
    v[0] = 1.0
    return v


def _resolve_granular_push(scene: SceneState) -> None:
    spec = scene.spec
    idx = scene.granular_idx
    disks = scene.obj[idx]
    c = scene.tools[0, :2]
    a = c + np.array([0.0, -spec.effector_radius])
    b = c + np.array([0.0, spec.effector_radius])
    thickness = 0.01
    push = scene.last_delta[0, :2]
    fallback = push / np.linalg.norm(push) if np.linalg.norm(push) > 0 else np.array([1.0, 0.0])
    reach = thickness + spec.granular_radius
    if not _push_out_of_capsule(disks, a, b, reach, fallback):
        return
    for _ in range(SOLVER_ITERATIONS):
        _separate_disks(disks, spec.granular_radius, planar=True, max_iter=1)
        _push_out_of_capsule(disks, a, b, reach, fallback)
    _separate_disks(disks, spec.granular_radius, planar=True)
    scene.obj[idx] = disks


def _cloth_solve(scene: SceneState, cloth: np.ndarray, pins: dict) -> None:
    """Quasi-static cloth: gravity sag, stretch-limiting springs, pins and floor.

    Every stage is a Euclidean projection onto a convex set (or a rigid
    shift), so with the pins held still the per-step displacement can only
    shrink.
    """
    s = scene.springs
    rest = scene.spring_rest
    cloth[:, 2] -= GRAVITY_STEP
    np.maximum(cloth[:, 2], CLOTH_RADIUS, out=cloth[:, 2])
    for _ in range(SOLVER_ITERATIONS):
        for colour in scene.spring_colours:
            a, b = s[colour, 0], s[colour, 1]
            d = cloth[b] - cloth[a]
            length = np.linalg.norm(d, axis=1)
            over = length > rest[colour]
            if not over.any():
                continue
            corr = d[over] * ((length[over] - rest[colour][over]) / (2 * length[over]))[:, None]
            cloth[a[over]] += corr
            cloth[b[over]] -= corr
        for k, target in pins.items():
            cloth[k] = target
        np.maximum(cloth[:, 2], CLOTH_RADIUS, out=cloth[:, 2])


def _resolve_cloth(scene: SceneState) -> None:
    idx = scene.cloth_idx
    cloth = scene.obj[idx]
    grasp = int(scene.pinned[0])
    _cloth_solve(scene, cloth, {grasp: scene.tools[0].copy()})
    scene.obj[idx] = cloth
    if scene.granular_idx is not None:
        _resolve_granular_on_cloth(scene)


def _cloth_surface(cloth: np.ndarray, xy: np.ndarray, spacing: float, radius: float):
    """Support height for a disk centred over ``xy`` and the local cloth slope.

    A Gaussian-weighted plane fit keeps the surface continuous as the cloth
    moves; past the cloth edge the support falls off along a 45 degree ramp,
    so a disk slips off gradually. Returns None once the ramp reaches the floor.
    """
    d = np.hypot(*(cloth[:, :2] - xy).T)
    w = np.exp(-0.5 * (d / (0.5 * spacing)) ** 2) + 1e-300
    design = np.column_stack([cloth[:, 0] - xy[0], cloth[:, 1] - xy[1], np.ones(len(cloth))])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], cloth[:, 2] * sw, rcond=None)
    height = min(coef[2], cloth[:, 2].max())
    top = height + CLOTH_RADIUS + radius - max(0.0, d.min() - 0.5 * spacing)
    if top <= radius:
        return None
    return top, coef[:2]


def _resolve_granular_on_cloth(scene: SceneState) -> None:
    """Disks rest on the cloth surface and slide down slopes steeper than friction."""
    spec = scene.spec
    r = spec.granular_radius
    cloth = scene.obj[scene.cloth_idx]
    disks = scene.obj[scene.granular_idx]
    start = disks.copy()
    for k in range(len(disks)):
        budget = spec.max_step
        surface = _cloth_surface(cloth, disks[k, :2], spec.cloth_spacing, r)
        while surface is not None and budget > 1e-12:
            grade = np.hypot(*surface[1])
            # slide length grows with the slope excess, so barely-steep spots creep
            slide = min(0.5 * (grade - spec.friction) * spec.cloth_spacing, budget)
            if slide < 1e-9:
                break
            disks[k, :2] -= surface[1] / grade * slide
            budget -= slide
            surface = _cloth_surface(cloth, disks[k, :2], spec.cloth_spacing, r)
        disks[k, 2] = r if surface is None else surface[0]
    if np.abs(disks - start).max() > 0:
        _separate_disks(disks, r, planar=True)
    scene.obj[scene.granular_idx] = disks


def _resolve_rope_sweep(scene: SceneState) -> None:
    spec = scene.spec
    ridx = scene.rope_idx
    rope = scene.obj[ridx]
    start, end = scene.tools[0, :2], scene.tools[1, :2]
    if not (np.array_equal(rope[0, :2], start) and np.hypot(*(rope[-1, :2] - end)) < 1e-12):
        _fabrik(rope, scene.rope_rest, start, end)
    scene.obj[ridx] = rope
    disks = scene.obj[scene.granular_idx]
    r = spec.granular_radius
    reach = ROPE_RADIUS + r
    push = scene.last_delta.mean(axis=0)[:2]
    fallback = push / np.linalg.norm(push) if np.linalg.norm(push) > 0 else np.array([1.0, 0.0])
    touched = False
    # contact and disk separation alternate until no disk is inside the rope
    for _ in range(100):
        hit = _push_out_of_polyline(disks, rope[:, :2], reach, fallback)
        touched |= hit
        if not hit:
            break
        _separate_disks(disks, r, planar=True, max_iter=1)
    if touched:
        _separate_disks(disks, r, planar=True)
    scene.obj[scene.granular_idx] = disks


_RESOLVERS = {
    "box_push": _resolve_box,
    "rope": _resolve_rope_push,
    "granular": _resolve_granular_push,
    "cloth": _resolve_cloth,
    "cloth_gather": _resolve_cloth,
    "rope_sweep": _resolve_rope_sweep,
}


def tool_delta(scene: SceneState, ee_motion) -> np.ndarray:
    """Convert an action to per-tool deltas ``(num_tools, 3)``.

    Accepts per-tool deltas (flat or shaped) or per-effector-point motion
    ``(M, 3)``, which must move each tool's points rigidly.
    """
    spec = scene.spec
    a = np.asarray(ee_motion, dtype=float)
    if a.size == spec.action_dim:
        return a.reshape(spec.num_tools, 3)
    if a.shape == scene.ee_offsets.shape:
        out = np.zeros((spec.num_tools, 3))
        for t in range(spec.num_tools):
            rows = a[scene.ee_tool == t]
            if np.abs(rows - rows[0]).max() > 1e-12:
                raise InvalidActionError("effector points of one tool must move rigidly")
            out[t] = rows[0]
        return out
    raise InvalidActionError(
        f"action must have {spec.action_dim} entries or shape {scene.ee_offsets.shape}, got {a.shape}"
    )


def step(scene: SceneState, ee_motion) -> SceneState:
    """Advance one timestep and return the new scene (the input is not modified)."""
    spec = scene.spec
    delta = tool_delta(scene, ee_motion)
    speed = np.linalg.norm(delta, axis=1)
    if np.any(speed > spec.max_step * (1 + 1e-9)):
        raise InvalidActionError(
            f"effector step {speed.max():.4f} m exceeds max speed x dt = {spec.max_step:.4f} m"
        )
    nxt = scene.copy()
    _RESOLVERS[spec.task](nxt)
    np.maximum(nxt.obj[:, 2], 0.0, out=nxt.obj[:, 2])
    nxt.tools = nxt.tools + delta
    nxt.last_delta = delta
    nxt.step_count += 1
    return nxt


# invariants used by tests and by callers that want to assert them


def rope_stretch(scene: SceneState) -> float:
    """Largest relative deviation of a rope segment from its rest length."""
    if scene.rope_idx is None:
        return 0.0
    rope = scene.obj[scene.rope_idx]
    lengths = np.linalg.norm(np.diff(rope, axis=0), axis=1)
    return float(np.max(np.abs(lengths - scene.rope_rest) / scene.rope_rest))


def total_rest_length(scene: SceneState) -> float:
    return float(scene.rope_rest.sum()) if scene.rope_rest is not None else 0.0


def max_disk_overlap(scene: SceneState) -> float:
    if scene.granular_idx is None or len(scene.granular_idx) < 2:
        return 0.0
    disks = scene.obj[scene.granular_idx]
    p = disks[:, :2]
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    iu = np.triu_indices(len(p), 1)
    return float(max(0.0, (2 * scene.spec.granular_radius - d[iu]).max()))
