"""Random-interaction episodes and the binary episode/dataset file format.

File layout (all integers and floats little-endian)::

    magic    8 bytes  b"PWEPISD\\0"
    version  u32
    spec     u32 length + UTF-8 JSON echo of the TaskSpec
    count    u32 number of episodes
    per episode:
        T, N, M           3 x u32
        material codes    N + M bytes (0 rigid, 1 granular, 2 rope, 3 cloth, 255 effector)
        T frames of       (N+M) x 3 positions then (N+M) x 3 motions, float64
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import FormatError, InvalidInputError
from .model import ParticleSet, material_onehot
from .simulator import EE_CODE, SceneState, TaskSpec, create_scene, step

MAGIC = b"PWEPISD\0"
VERSION = 1


@dataclass
class Episode:
    """Time-indexed particle frames of one interaction."""

    positions: np.ndarray  # (T, N+M, 3)
    motions: np.ndarray  # (T, N+M, 3)
    codes: np.ndarray  # (N+M,) uint8

    @property
    def horizon(self) -> int:
        return len(self.positions)

    @property
    def is_ee(self) -> np.ndarray:
        return self.codes == EE_CODE

    @property
    def num_objects(self) -> int:
        return int((~self.is_ee).sum())

    @property
    def num_effector(self) -> int:
        return int(self.is_ee.sum())

    @property
    def materials(self) -> np.ndarray:
        return material_onehot(np.where(self.is_ee, -1, self.codes.astype(int)))

    def frame(self, t: int) -> ParticleSet:
        if not 0 <= t < self.horizon:
            raise InvalidInputError(f"frame {t} out of range for horizon {self.horizon}")
        return ParticleSet(
            self.positions[t].copy(), self.materials, self.motions[t].copy(), self.is_ee.copy()
        )

    def frames(self) -> Iterator[ParticleSet]:
        for t in range(self.horizon):
            yield self.frame(t)

    def equals(self, other: "Episode") -> bool:
        return (
            np.array_equal(self.codes, other.codes)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.motions, other.motions)
        )


@dataclass
class Dataset:
    spec: TaskSpec
    episodes: list[Episode]

    def __len__(self) -> int:
        return len(self.episodes)

    def split(self, seed: int, train_fraction: float = 0.9) -> tuple["Dataset", "Dataset"]:
        """Seeded split by episode; both parts are non-empty when there are >= 2 episodes."""
        order = np.random.default_rng(seed).permutation(len(self.episodes))
        n_train = int(round(train_fraction * len(order)))
        if len(order) >= 2:
            n_train = min(max(n_train, 1), len(order) - 1)
        train = [self.episodes[i] for i in sorted(order[:n_train])]
        test = [self.episodes[i] for i in sorted(order[n_train:])]
        return Dataset(self.spec, train), Dataset(self.spec, test)


def episode_from_scenes(scenes: list[SceneState]) -> Episode:
    positions = np.stack([s.particle_set().positions for s in scenes])
    is_ee = scenes[0].particle_set().is_ee
    motions = np.zeros_like(positions)
    # effector motion recomputed from the stored poses so it matches them exactly
    motions[1:, is_ee] = positions[1:, is_ee] - positions[:-1, is_ee]
    return Episode(positions, motions, scenes[0].material_codes())


# random effector policies


def _limit(v: np.ndarray, cap: float) -> np.ndarray:
    n = np.linalg.norm(v)
    return v * (cap / n) if n > cap else v


def _keep_inside(tool: np.ndarray, v: np.ndarray, spec: TaskSpec, margin: float = 0.02) -> np.ndarray:
    nxt = tool + v
    for axis, (lo, hi) in enumerate(spec.bounds):
        if nxt[axis] < lo + margin and v[axis] < 0 or nxt[axis] > hi - margin and v[axis] > 0:
            v[axis] = 0.0
    return v


class _Policy:
    """Smooth random effector motion aimed at task-relevant points."""

    def __init__(self, scene: SceneState, rng: np.random.Generator):
        self.spec = scene.spec
        self.rng = rng
        self.vel = np.zeros((self.spec.num_tools, 3))
        self.cap = 0.97 * self.spec.max_step
        self.speed = rng.uniform(0.5, 0.95) * self.cap
        self.offset = rng.normal(0.0, 0.025, size=2)
        self.t = 0

    def aim(self, scene: SceneState) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, scene: SceneState) -> np.ndarray:
        if self.t % 10 == 0 and self.t:
            self.offset = self.rng.normal(0.0, 0.025, size=2)
            self.speed = self.rng.uniform(0.5, 0.95) * self.cap
        self.t += 1
        desired = self.aim(scene)
        out = np.zeros_like(self.vel)
        for k in range(self.spec.num_tools):
            v = 0.6 * self.vel[k] + 0.4 * desired[k] + self.rng.normal(0.0, 0.1 * self.cap, 3) * self.noise_mask
            v = _limit(v, self.cap)
            out[k] = _keep_inside(scene.tools[k], v, self.spec)
        self.vel = out
        return out

    noise_mask = np.array([1.0, 1.0, 0.0])

    def toward(self, tool: np.ndarray, target_xy: np.ndarray) -> np.ndarray:
        d = np.zeros(3)
        d[:2] = target_xy - tool[:2]
        n = np.linalg.norm(d)
        return d / n * self.speed if n > 1e-9 else d


class _PushPolicy(_Policy):
    def aim(self, scene):
        target = scene.obj[:, :2].mean(axis=0) + self.offset
        if scene.spec.task == "rope":
            if self.t % 10 == 1:
                self.k = int(self.rng.integers(len(scene.obj)))
            target = scene.obj[getattr(self, "k", 0), :2] + self.offset
        return [self.toward(scene.tools[0], target)]


class _LiftPolicy(_Policy):
    noise_mask = np.array([1.0, 1.0, 0.3])

    def __init__(self, scene, rng):
        super().__init__(scene, rng)
        self.height = rng.uniform(0.05, 0.12)
        self.heading = rng.uniform(0, 2 * np.pi)
        self.drift = 0.35 if scene.spec.task == "cloth_gather" else 0.8

    def aim(self, scene):
        tool = scene.tools[0]
        d = np.zeros(3)
        if tool[2] < self.height:
            d[2] = self.speed
        self.heading += self.rng.normal(0.0, 0.3)
        d[:2] = self.drift * self.speed * np.array([np.cos(self.heading), np.sin(self.heading)])
        if tool[2] < 0.5 * self.height:
            d[:2] *= 0.2
        return [d]


class _SweepPolicy(_Policy):
    def __init__(self, scene, rng):
        super().__init__(scene, rng)
        self.length = float(scene.rope_rest.sum())
        self.heading = rng.uniform(-0.6, 0.6)

    def aim(self, scene):
        self.heading += self.rng.normal(0.0, 0.1)
        common = np.zeros(3)
        common[:2] = self.speed * np.array([np.cos(self.heading), np.sin(self.heading)])
        a, b = scene.tools[0], scene.tools[1]
        sep = b[:2] - a[:2]
        dist = np.linalg.norm(sep)
        rel = np.zeros(3)
        rel[:2] = self.rng.normal(0.0, 0.15 * self.speed, 2)
        # keep the grippers between half and 95 % of the rope length apart
        if dist > 0.92 * self.length:
            rel[:2] -= sep / dist * 0.3 * self.speed
        elif dist < 0.55 * self.length:
            rel[:2] += sep / dist * 0.3 * self.speed
        return [common - rel, common + rel]


_POLICIES: dict[str, Callable] = {
    "box_push": _PushPolicy,
    "rope": _PushPolicy,
    "granular": _PushPolicy,
    "cloth": _LiftPolicy,
    "cloth_gather": _LiftPolicy,
    "rope_sweep": _SweepPolicy,
}


def make_policy(scene: SceneState, rng: np.random.Generator):
    """The task's random smooth effector policy: a callable ``scene -> action``."""
    return _POLICIES[scene.spec.task](scene, rng)


def generate_episode(spec: TaskSpec, horizon: int, seed: int) -> Episode:
    """Roll the simulator under a random smooth effector trajectory.

    ``horizon`` counts frames, so ``horizon - 1`` transitions are recorded.
    """
    if horizon < 2:
        raise InvalidInputError("horizon must be >= 2")
    rng = np.random.default_rng([seed, 1])
    scene = create_scene(spec, seed)
    policy = make_policy(scene, rng)
    scenes = [scene]
    for _ in range(horizon - 1):
        scene = step(scene, policy(scene))
        scenes.append(scene)
    return episode_from_scenes(scenes)


def generate_dataset(spec: TaskSpec, episodes: int, horizon: int, seed: int, path=None) -> Dataset:
    """Generate ``episodes`` episodes; write them to ``path`` when given."""
    if episodes < 1:
        raise InvalidInputError("episodes must be >= 1")
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=episodes)
    data = Dataset(spec, [generate_episode(spec, horizon, int(s)) for s in seeds])
    if path is not None:
        save_dataset(data, path)
    return data


# file format


def encode_dataset(data: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    spec_json = json.dumps(data.spec.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(spec_json)))
    buf.write(spec_json)
    buf.write(struct.pack("<I", len(data.episodes)))
    for ep in data.episodes:
        t, p = ep.positions.shape[:2]
        buf.write(struct.pack("<III", t, ep.num_objects, ep.num_effector))
        buf.write(np.asarray(ep.codes, dtype=np.uint8).tobytes())
        for k in range(t):
            buf.write(ep.positions[k].astype("<f8").tobytes())
            buf.write(ep.motions[k].astype("<f8").tobytes())
    return buf.getvalue()


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(data: Dataset, path) -> str:
    """Write ``data``; returns the SHA-256 digest of the file contents."""
    payload = encode_dataset(data)
    atomic_write_bytes(path, payload)
    return hashlib.sha256(payload).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read(fh, n: int, path) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise FormatError(f"{path}: truncated file")
    return chunk


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise FileNotFoundError(f"cannot open dataset {path}: {exc.strerror}") from exc
    with fh:
        if _read(fh, len(MAGIC), path) != MAGIC:
            raise FormatError(f"{path}: not an episode file (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, path))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (n_spec,) = struct.unpack("<I", _read(fh, 4, path))
        try:
            spec = TaskSpec.from_dict(json.loads(_read(fh, n_spec, path)))
        except (ValueError, TypeError, InvalidInputError) as exc:
            raise FormatError(f"{path}: corrupt task spec header ({exc})") from exc
        (count,) = struct.unpack("<I", _read(fh, 4, path))
        episodes = []
        for _ in range(count):
            t, n, m = struct.unpack("<III", _read(fh, 12, path))
            p = n + m
            codes = np.frombuffer(_read(fh, p, path), dtype=np.uint8).copy()
            positions = np.empty((t, p, 3))
            motions = np.empty((t, p, 3))
            for k in range(t):
                positions[k] = np.frombuffer(_read(fh, p * 24, path), dtype="<f8").reshape(p, 3)
                motions[k] = np.frombuffer(_read(fh, p * 24, path), dtype="<f8").reshape(p, 3)
            episodes.append(Episode(positions, motions, codes))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} episodes")
    return Dataset(spec, episodes)
