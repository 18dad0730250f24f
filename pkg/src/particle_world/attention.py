"""Block-ordered attention heatmaps as CSV matrices and 8-bit PGM images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .episodes import atomic_write_bytes
from .errors import FormatError, InvalidInputError
from .model import ModelParams, ParticleSet, attention_maps


def block_order(state: ParticleSet) -> np.ndarray:
    """Row order grouping particles by material (rigid, granular, rope, cloth), effector last.

    Within a block the original order is kept.
    """
    key = np.where(state.is_ee, state.materials.shape[1], np.argmax(state.materials, axis=1))
    return np.argsort(key, kind="stable")


def ordered_attention(state: ParticleSet, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Attention maps ``(L, heads, P, P)`` with rows and columns in block order."""
    state.validate(need_both=False)
    order = block_order(state)
    maps = attention_maps(state, params)
    return maps[:, :, order][:, :, :, order], order


def attention_mass(maps: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> float:
    """Mean over ``rows`` (and all layers/heads) of the attention summed over ``cols``."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    if not rows.size or not cols.size:
        raise InvalidInputError("row and column groups must be non-empty")
    return float(maps[..., rows, :][..., cols].sum(axis=-1).mean())


MATERIAL_NAMES = ("rigid", "granular", "rope", "cloth")


def material_rows(state: ParticleSet, material: str) -> np.ndarray:
    """Indices of particles of ``material`` (one of MATERIAL_NAMES or ``"effector"``)."""
    if material == "effector":
        return np.flatnonzero(state.is_ee)
    if material not in MATERIAL_NAMES:
        raise InvalidInputError(f"unknown material {material!r}")
    k = MATERIAL_NAMES.index(material)
    return np.flatnonzero(~state.is_ee & (state.materials[:, k] > 0))


def first_contact_frame(episode, a: str, b: str, gap: float) -> int | None:
    """First frame where some ``a`` particle comes within ``gap`` of some ``b`` particle."""
    frame0 = episode.frame(0)
    ia, ib = material_rows(frame0, a), material_rows(frame0, b)
    if not ia.size or not ib.size:
        raise InvalidInputError(f"episode has no {a} or no {b} particles")
    for t in range(episode.horizon):
        p = episode.positions[t]
        d = np.linalg.norm(p[ia][:, None] - p[ib][None], axis=-1)
        if d.min() <= gap:
            return t
    return None


def material_mass(state: ParticleSet, params: ModelParams, rows: str, cols: str) -> float:
    """Mean attention from ``rows`` particles to ``cols`` particles over all layers and heads."""
    return attention_mass(attention_maps(state, params), material_rows(state, rows), material_rows(state, cols))


def to_pgm(matrix: np.ndarray) -> bytes:
    """Binary (P5) graymap with pixel = round(255 * value), values clipped to [0, 1]."""
    h, w = matrix.shape
    pixels = np.rint(255.0 * np.clip(matrix, 0.0, 1.0)).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise FormatError("expected an 8-bit P5 graymap")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1 :]
    if len(body) != w * h:
        raise FormatError(f"PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def to_csv(matrix: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in matrix)


def read_csv(text: str) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in text.splitlines() if line.strip()])


def export_attention(state: ParticleSet, params: ModelParams, out_dir, prefix: str = "attn") -> list[Path]:
    """Write ``<prefix>_L{layer}_H{head}.csv`` and ``.pgm`` for every layer and head.

    Also writes ``<prefix>_order.csv`` mapping exported rows to original particle indices.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps, order = ordered_attention(state, params)
    written = []
    for layer in range(maps.shape[0]):
        for head in range(maps.shape[1]):
            stem = out_dir / f"{prefix}_L{layer}_H{head}"
            m = maps[layer, head]
            atomic_write_bytes(stem.with_suffix(".csv"), to_csv(m).encode())
            atomic_write_bytes(stem.with_suffix(".pgm"), to_pgm(m))
            written += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    labels = np.where(state.is_ee, "effector", np.array(["rigid", "granular", "rope", "cloth"])[
        np.argmax(state.materials, axis=1)])
    rows = "row,particle,material\n" + "".join(f"{r},{i},{labels[i]}\n" for r, i in enumerate(order))
    path = out_dir / f"{prefix}_order.csv"
    atomic_write_bytes(path, rows.encode())
    written.append(path)
    return written
