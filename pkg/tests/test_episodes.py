import struct

import numpy as np
import pytest

from particle_world.episodes import (
    Dataset,
    encode_dataset,
    file_digest,
    generate_dataset,
    generate_episode,
    load_dataset,
    save_dataset,
)
from particle_world.errors import FormatError, InvalidInputError
from particle_world.simulator import TASKS, default_task_spec


def test_two_frames_give_one_transition():
    ep = generate_episode(default_task_spec("rope"), 2, seed=0)
    assert ep.horizon == 2
    assert ep.positions.shape == (2, ep.num_objects + ep.num_effector, 3)


def test_horizon_must_allow_a_transition():
    with pytest.raises(InvalidInputError):
        generate_episode(default_task_spec("rope"), 1, seed=0)
    with pytest.raises(InvalidInputError):
        generate_dataset(default_task_spec("rope"), 0, 5, seed=0)


@pytest.mark.parametrize("task", TASKS)
def test_motion_fields(task):
    ep = generate_episode(default_task_spec(task), 12, seed=4)
    assert not ep.motions[:, ~ep.is_ee].any()
    ee = ep.positions[:, ep.is_ee]
    np.testing.assert_array_equal(ep.motions[1:, ep.is_ee], ee[1:] - ee[:-1])
    assert not ep.motions[0].any()
    for frame in ep.frames():
        frame.validate()


def test_episodes_are_deterministic():
    spec = default_task_spec("granular")
    assert generate_episode(spec, 8, 11).equals(generate_episode(spec, 8, 11))
    assert not generate_episode(spec, 8, 11).equals(generate_episode(spec, 8, 12))


def test_header_reports_counts(tmp_path):
    spec = default_task_spec("box_push")
    data = generate_dataset(spec, 3, 10, seed=0, path=tmp_path / "d.pwe")
    raw = (tmp_path / "d.pwe").read_bytes()
    (n_spec,) = struct.unpack_from("<I", raw, 12)
    (count,) = struct.unpack_from("<I", raw, 16 + n_spec)
    t, n, m = struct.unpack_from("<III", raw, 20 + n_spec)
    assert (count, t, n, m) == (3, 10, 32, 8)
    assert len(data) == 3


def test_round_trip_is_bitwise(tmp_path):
    spec = default_task_spec("cloth_gather")
    data = generate_dataset(spec, 2, 6, seed=1)
    digest = save_dataset(data, tmp_path / "a.pwe")
    back = load_dataset(tmp_path / "a.pwe")
    assert back.spec == spec
    assert all(a.equals(b) for a, b in zip(data.episodes, back.episodes))
    assert encode_dataset(back) == (tmp_path / "a.pwe").read_bytes()
    assert file_digest(tmp_path / "a.pwe") == digest


def test_digest_is_stable_across_runs(tmp_path):
    spec = default_task_spec("rope")
    d1 = save_dataset(generate_dataset(spec, 2, 5, seed=9), tmp_path / "1.pwe")
    d2 = save_dataset(generate_dataset(spec, 2, 5, seed=9), tmp_path / "2.pwe")
    assert d1 == d2


def test_corrupt_files_are_reported(tmp_path):
    spec = default_task_spec("rope")
    path = tmp_path / "x.pwe"
    save_dataset(generate_dataset(spec, 1, 4, seed=0), path)
    raw = path.read_bytes()
    (tmp_path / "magic.pwe").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.pwe").write_bytes(raw[:-5])
    (tmp_path / "long.pwe").write_bytes(raw + b"\0")
    for name in ("magic", "short", "long"):
        with pytest.raises(FormatError, match=name):
            load_dataset(tmp_path / f"{name}.pwe")
    with pytest.raises(FileNotFoundError, match="missing"):
        load_dataset(tmp_path / "missing.pwe")


def test_split_is_seeded_and_disjoint():
    spec = default_task_spec("rope")
    data = Dataset(spec, [generate_episode(spec, 3, s) for s in range(10)])
    tr, te = data.split(5)
    tr2, te2 = data.split(5)
    assert (len(tr), len(te)) == (9, 1)
    assert [id(e) for e in te.episodes] == [id(e) for e in te2.episodes]
    assert not set(map(id, tr.episodes)) & set(map(id, te.episodes))
    small_tr, small_te = Dataset(spec, data.episodes[:2]).split(0, 0.99)
    assert len(small_tr) == 1 and len(small_te) == 1


def test_corrupt_spec_header_is_a_format_error(tmp_path):
    path = tmp_path / "s.pwe"
    save_dataset(generate_dataset(default_task_spec("rope"), 1, 3, seed=0), path)
    raw = bytearray(path.read_bytes())
    raw[16] = ord("!")  # first byte of the JSON header
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="spec"):
        load_dataset(path)
