"""Attention-based particle dynamics model.

Each particle is described by its position, a one-hot material code and the
externally applied motion. A shared MLP projects these features to
embeddings, a stack of pre-norm transformer encoder layers lets every
particle attend to every other one (no positional encoding), and a shared
MLP decoder maps each updated embedding to a displacement that is added to
the current position. End-effector rows are then overwritten with the
commanded effector pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import InvalidInputError

MATERIALS = ("rigid", "granular", "rope", "cloth")
NUM_MATERIALS = len(MATERIALS)
FEATURE_DIM = 3 + NUM_MATERIALS + 3


@dataclass
class ParticleSet:
    """Positions, materials and applied motion of ``N`` object + ``M`` effector particles."""

    positions: np.ndarray
    materials: np.ndarray
    motion: np.ndarray
    is_ee: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.materials = np.asarray(self.materials, dtype=np.float64)
        self.motion = np.asarray(self.motion, dtype=np.float64)
        self.is_ee = np.asarray(self.is_ee, dtype=bool)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def num_objects(self) -> int:
        return int((~self.is_ee).sum())

    @property
    def num_effector(self) -> int:
        return int(self.is_ee.sum())

    @property
    def object_positions(self) -> np.ndarray:
        return self.positions[~self.is_ee]

    @property
    def effector_positions(self) -> np.ndarray:
        return self.positions[self.is_ee]

    def validate(self, need_both: bool = True) -> "ParticleSet":
        """Check shapes and the material/effector conventions.

        ``need_both=False`` drops the object-and-effector requirement, for
        inspection-only uses such as attention export.
        """
        n = self.count
        if self.positions.shape != (n, 3) or self.motion.shape != (n, 3):
            raise ShapeError(f"positions/motion must be ({n}, 3)")
        if self.materials.shape != (n, NUM_MATERIALS) or self.is_ee.shape != (n,):
            raise ShapeError(f"materials must be ({n}, {NUM_MATERIALS}) and is_ee ({n},)")
        if n < 1 or (need_both and (self.num_objects < 1 or self.num_effector < 1)):
            raise InvalidInputError("need at least one object and one effector particle")
        if np.any(self.motion[~self.is_ee] != 0.0):
            raise InvalidInputError("object particles must carry zero motion")
        zero_rows = ~self.materials.any(axis=1)
        if not np.array_equal(zero_rows, self.is_ee):
            raise InvalidInputError("material rows must be all-zero exactly on effector particles")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.motion))):
            raise InvalidInputError("non-finite coordinates")
        return self

    def permuted(self, order: Sequence[int]) -> "ParticleSet":
        order = np.asarray(order)
        return ParticleSet(
            self.positions[order], self.materials[order], self.motion[order], self.is_ee[order]
        )

    def copy(self) -> "ParticleSet":
        return ParticleSet(
            self.positions.copy(), self.materials.copy(), self.motion.copy(), self.is_ee.copy()
        )


def material_onehot(codes: Sequence[int]) -> np.ndarray:
    """One-hot rows for material codes; codes outside ``0..3`` (the effector) give zero rows."""
    codes = np.asarray(codes)
    out = np.zeros((len(codes), NUM_MATERIALS))
    valid = (codes >= 0) & (codes < NUM_MATERIALS)
    out[np.nonzero(valid)[0], codes[valid]] = 1.0
    return out


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    ff_hidden: int = 128
    decoder_hidden: int = 64
    # feature normalisation: positions are centred in x-y on the scene mean and
    # divided by length_scale; motions and predicted displacements use motion_scale
    length_scale: float = 0.05
    motion_scale: float = 0.015
    center_xy: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "num_layers", "num_heads", "ff_hidden", "decoder_hidden"):
            if int(getattr(self, name)) < 1:
                raise InvalidInputError(f"{name} must be a positive integer")
        if not (self.length_scale > 0 and self.motion_scale > 0):
            raise InvalidInputError("length_scale and motion_scale must be positive")
        if self.embed_dim % self.num_heads:
            raise InvalidInputError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff, dh = cfg.embed_dim, cfg.ff_hidden, cfg.decoder_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "proj.w1": (FEATURE_DIM, d),
        "proj.b1": (d,),
        "proj.w2": (d, d),
        "proj.b2": (d,),
    }
    for layer in range(cfg.num_layers):
        pre = f"layer{layer}."
        shapes.update(
            {
                pre + "ln1.gain": (d,),
                pre + "ln1.bias": (d,),
                pre + "attn.wq": (d, d),
                pre + "attn.bq": (d,),
                pre + "attn.wk": (d, d),
                pre + "attn.bk": (d,),
                pre + "attn.wv": (d, d),
                pre + "attn.bv": (d,),
                pre + "attn.wo": (d, d),
                pre + "attn.bo": (d,),
                pre + "ln2.gain": (d,),
                pre + "ln2.bias": (d,),
                pre + "ff.w1": (d, ff),
                pre + "ff.b1": (ff,),
                pre + "ff.w2": (ff, d),
                pre + "ff.b2": (d,),
            }
        )
    shapes.update(
        {"dec.w1": (d, dh), "dec.b1": (dh,), "dec.w2": (dh, 3), "dec.b2": (3,)}
    )
    return shapes


@dataclass
class ModelParams:
    """All learnable arrays of the network, keyed by block name."""

    config: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ShapeError(f"parameter blocks mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} has non-finite entries")
            self.arrays[name] = arr
        # keep a canonical block order
        self.arrays = {name: self.arrays[name] for name in expected}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        if requires_grad:
            return {k: ad.parameter(v, name=k) for k, v in self.arrays.items()}
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def equals(self, other: "ModelParams") -> bool:
        return self.config == other.config and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def init_params(cfg: ModelConfig, seed: int = 0, zero_decoder: bool = True) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains.

    With ``zero_decoder`` the last decoder layer starts at zero, so the initial
    model is the identity map on object positions.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    if zero_decoder:
        arrays["dec.w2"] = np.zeros_like(arrays["dec.w2"])
        arrays["dec.b2"] = np.zeros_like(arrays["dec.b2"])
    return ModelParams(cfg, arrays)


def _as_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.tensors()
    return {k: ad.tensor(v) for k, v in params.items()}


def _config_of(params, cfg: ModelConfig | None) -> ModelConfig:
    if cfg is not None:
        return cfg
    if isinstance(params, ModelParams):
        return params.config
    raise InvalidInputError("a ModelConfig is required when params is a plain mapping")


# network pieces; arrays may carry a leading batch axis


_XY = np.array([1.0, 1.0, 0.0])


def particle_features(positions, materials, motion, cfg: ModelConfig | None = None) -> Tensor:
    """Concatenate ``[position, material, motion]`` per particle.

    With ``cfg`` the position and motion columns are normalised as the
    config describes; without it they are used raw.
    """
    positions, motion = ad.tensor(positions), ad.tensor(motion)
    materials = np.asarray(materials, dtype=np.float64)
    if materials.ndim < positions.ndim:
        materials = np.broadcast_to(materials, positions.shape[:-1] + (NUM_MATERIALS,))
    if positions.shape[-1] != 3 or motion.shape != positions.shape:
        raise ShapeError(f"positions {positions.shape} and motion {motion.shape} must be (..., P, 3)")
    if materials.shape != positions.shape[:-1] + (NUM_MATERIALS,):
        raise ShapeError(f"materials {materials.shape} do not match positions {positions.shape}")
    if cfg is not None:
        if cfg.center_xy:
            centre = positions.mean(axis=-2, keepdims=True) * _XY
            positions = positions - centre
        positions = positions * (1.0 / cfg.length_scale)
        motion = motion * (1.0 / cfg.motion_scale)
    return ad.concat([positions, Tensor(materials), motion], axis=-1)


def project(features, p: dict[str, Tensor]) -> Tensor:
    features = ad.tensor(features)
    if features.shape[-1] != FEATURE_DIM:
        raise ShapeError(f"features must have width {FEATURE_DIM}, got {features.shape[-1]}")
    hidden = ad.gelu(features @ p["proj.w1"] + p["proj.b1"])
    return hidden @ p["proj.w2"] + p["proj.b2"]


def attention_layer(z: Tensor, p: dict[str, Tensor], layer: int, num_heads: int):
    """One pre-norm encoder layer; returns the new embeddings and attention weights."""
    pre = f"layer{layer}."
    *lead, count, width = z.shape
    head_dim = width // num_heads
    h = ad.layer_norm(z, p[pre + "ln1.gain"], p[pre + "ln1.bias"])

    def heads(x: Tensor) -> Tensor:
        x = x.reshape(tuple(lead) + (count, num_heads, head_dim))
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(*axes)

    q = heads(h @ p[pre + "attn.wq"] + p[pre + "attn.bq"])
    k = heads(h @ p[pre + "attn.wk"] + p[pre + "attn.bk"])
    v = heads(h @ p[pre + "attn.wv"] + p[pre + "attn.bv"])
    scores = (q @ k.T) * (1.0 / np.sqrt(head_dim))
    weights = ad.softmax(scores, axis=-1)
    mixed = weights @ v
    nd = mixed.ndim
    mixed = mixed.transpose(*(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)))
    mixed = mixed.reshape(tuple(lead) + (count, width))
    z = z + (mixed @ p[pre + "attn.wo"] + p[pre + "attn.bo"])

    h2 = ad.layer_norm(z, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
    ff = ad.gelu(h2 @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    return z + ff, weights.data


def decode(z, p: dict[str, Tensor]) -> Tensor:
    z = ad.tensor(z)
    if z.shape[-1] != p["dec.w1"].shape[0]:
        raise ShapeError(f"embeddings must have width {p['dec.w1'].shape[0]}, got {z.shape[-1]}")
    return ad.gelu(z @ p["dec.w1"] + p["dec.b1"]) @ p["dec.w2"] + p["dec.b2"]


def embed_particles(state: ParticleSet, params, cfg: ModelConfig | None = None) -> np.ndarray:
    """Per-particle embeddings ``f_proj([x, m, u])`` as an ``(N+M, d)`` array.

    Features are normalised by the config of ``params`` (or ``cfg``); a plain
    mapping without ``cfg`` sees raw features.
    """
    if cfg is None and isinstance(params, ModelParams):
        cfg = params.config
    p = _as_tensors(params)
    with ad.no_grad():
        feats = particle_features(state.positions, state.materials, state.motion, cfg)
        return project(feats, p).data


def dynamics_transition(z, params, capture_attention: bool = False, cfg: ModelConfig | None = None):
    """Apply every encoder layer to the full embedding set.

    Returns ``(z_next, attention)`` where ``attention`` has shape
    ``(L, ..., heads, P, P)`` when captured and is ``None`` otherwise.
    """
    cfg = _config_of(params, cfg)
    p = _as_tensors(params)
    z = ad.tensor(z)
    if z.ndim < 2 or z.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"embeddings must be (..., P, {cfg.embed_dim}), got {z.shape}")
    maps = []
    for layer in range(cfg.num_layers):
        z, weights = attention_layer(z, p, layer, cfg.num_heads)
        maps.append(weights)
    attention = np.stack(maps) if capture_attention else None
    if isinstance(params, ModelParams):
        return z.data, attention
    return z, attention


def predict_displacements(z_next, params, cfg: ModelConfig | None = None) -> np.ndarray:
    """Shared decoder applied row-wise: ``(P, d) -> (P, 3)``, in metres when a config is known."""
    if cfg is None and isinstance(params, ModelParams):
        cfg = params.config
    p = _as_tensors(params)
    with ad.no_grad():
        out = decode(z_next, p).data
    return out * cfg.motion_scale if cfg is not None else out


def step_tensors(p: dict[str, Tensor], cfg: ModelConfig, positions, materials, motion, capture: bool = False):
    """One model step on (possibly batched) arrays; returns ``(displacement, attention)``."""
    z = project(particle_features(positions, materials, motion, cfg), p)
    maps = []
    for layer in range(cfg.num_layers):
        z, weights = attention_layer(z, p, layer, cfg.num_heads)
        if capture:
            maps.append(weights)
    return decode(z, p) * cfg.motion_scale, (np.stack(maps) if capture else None)


def rollout_tensors(
    p: dict[str, Tensor],
    cfg: ModelConfig,
    positions,
    motion,
    materials: np.ndarray,
    is_ee: np.ndarray,
    ee_trajectory: np.ndarray,
    steps: int,
    object_motion_feedback: bool = False,
) -> list[Tensor]:
    """Autoregressive rollout on batched tensors.

    ``positions``/``motion`` are ``(..., P, 3)``; ``ee_trajectory`` holds the
    commanded effector poses for the next ``steps`` frames, ``(..., steps, M, 3)``.
    Returns the predicted positions for each step.
    """
    is_ee = np.asarray(is_ee, dtype=bool)
    ee_trajectory = np.asarray(ee_trajectory, dtype=np.float64)
    mask = is_ee[:, None]
    x = ad.tensor(positions)
    u = ad.tensor(motion)
    ee_prev = x.data[..., is_ee, :]
    out = []
    for j in range(steps):
        delta, _ = step_tensors(p, cfg, x, materials, u)
        ee_next = ee_trajectory[..., j, :, :]
        ee_full = np.zeros(x.shape)
        ee_full[..., is_ee, :] = ee_next
        x = ad.where(mask, ee_full, x + delta)
        ee_motion = np.zeros(x.shape)
        ee_motion[..., is_ee, :] = ee_next - ee_prev
        if object_motion_feedback:
            u = ad.where(mask, ee_motion, delta)
        else:
            u = Tensor(ee_motion)
        ee_prev = ee_next
        out.append(x)
    return out


def forward(state: ParticleSet, params: ModelParams, ee_next: np.ndarray | None = None) -> ParticleSet:
    """Predict the next particle set.

    ``ee_next`` is the commanded effector pose for the next frame, ``(M, 3)``;
    when omitted the current effector motion is assumed to continue.
    """
    if ee_next is None:
        ee_next = state.positions[state.is_ee] + state.motion[state.is_ee]
    return rollout(state, np.asarray(ee_next)[None], params, 1)[0]


def rollout(
    initial: ParticleSet,
    ee_trajectory: np.ndarray,
    params: ModelParams,
    steps: int,
    object_motion_feedback: bool = False,
) -> list[ParticleSet]:
    """Feed predictions back as inputs for ``steps`` frames."""
    state = initial.validate()
    ee_trajectory = np.asarray(ee_trajectory, dtype=np.float64)
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    if ee_trajectory.ndim != 3 or len(ee_trajectory) < steps:
        raise InvalidInputError(
            f"effector trajectory must provide at least {steps} poses, got shape {ee_trajectory.shape}"
        )
    if ee_trajectory.shape[1:] != (state.num_effector, 3):
        raise ShapeError(f"effector poses must be ({state.num_effector}, 3)")
    with ad.no_grad():
        preds = rollout_tensors(
            params.tensors(),
            params.config,
            state.positions,
            state.motion,
            state.materials,
            state.is_ee,
            ee_trajectory[:steps],
            steps,
            object_motion_feedback,
        )
    result = []
    prev_ee = state.positions[state.is_ee]
    for j, x in enumerate(preds):
        motion = np.zeros_like(x.data)
        motion[state.is_ee] = ee_trajectory[j] - prev_ee
        prev_ee = ee_trajectory[j]
        result.append(ParticleSet(x.data.copy(), state.materials.copy(), motion, state.is_ee.copy()))
    return result


def attention_maps(state: ParticleSet, params: ModelParams) -> np.ndarray:
    """Attention weights of every layer and head, ``(L, heads, P, P)``."""
    with ad.no_grad():
        _, maps = step_tensors(
            params.tensors(), params.config, state.positions, state.materials, state.motion, capture=True
        )
    return maps

