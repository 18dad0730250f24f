import math

import numpy as np
import pytest

import oracles
from particle_world import autodiff as ad
from particle_world.errors import InvalidInputError
from particle_world.autodiff import ShapeError
from particle_world.metrics import LossConfig, hybrid_loss
from particle_world.model import (
    FEATURE_DIM,
    ModelConfig,
    ModelParams,
    ParticleSet,
    attention_maps,
    dynamics_transition,
    embed_particles,
    forward,
    init_params,
    material_onehot,
    particle_features,
    predict_displacements,
    rollout,
    rollout_tensors,
)

SMALL = ModelConfig(embed_dim=8, num_layers=2, num_heads=2, ff_hidden=12, decoder_hidden=6)


def random_params(cfg=SMALL, seed=0, scale=0.5):
    """Fully random parameters (including decoder, biases and norm gains)."""
    params = init_params(cfg, seed=seed, zero_decoder=False)
    rng = np.random.default_rng(seed + 100)
    for name, arr in params.arrays.items():
        arr[...] = rng.normal(0.0, scale, size=arr.shape) + (1.0 if name.endswith("gain") else 0.0)
    return params


def random_scene(rng, n=5, m=2, spread=0.1):
    codes = list(rng.integers(0, 4, size=n)) + [-1] * m
    motion = np.zeros((n + m, 3))
    motion[n:] = rng.normal(0, 0.01, size=(m, 3))
    return ParticleSet(rng.normal(0, spread, size=(n + m, 3)), material_onehot(codes), motion, np.arange(n + m) >= n)


def lists(a):
    return [list(map(float, row)) for row in np.asarray(a)]


# scalar oracle of the whole network


def oracle_features(state, cfg):
    pos = state.positions.copy()
    if cfg.center_xy:
        mx = sum(p[0] for p in pos) / len(pos)
        my = sum(p[1] for p in pos) / len(pos)
        pos = [[p[0] - mx, p[1] - my, p[2]] for p in pos]
    rows = []
    for i in range(state.count):
        rows.append(
            [v / cfg.length_scale for v in pos[i]]
            + list(map(float, state.materials[i]))
            + [v / cfg.motion_scale for v in state.motion[i]]
        )
    return rows


def oracle_mlp(x, w1, b1, w2, b2):
    hidden = [oracles.gelu(h + b) for h, b in zip(oracles.matvec(lists(w1), x), b1)]
    return [o + b for o, b in zip(oracles.matvec(lists(w2), hidden), b2)]


def oracle_layer(z, a, layer, heads):
    pre = f"layer{layer}."
    d = len(z[0])
    hd = d // heads
    h = [oracles.layer_norm(row, a[pre + "ln1.gain"], a[pre + "ln1.bias"]) for row in z]
    lin = lambda x, w, b: [v + bb for v, bb in zip(oracles.matvec(lists(a[pre + w]), x), a[pre + b])]
    q = [lin(r, "attn.wq", "attn.bq") for r in h]
    k = [lin(r, "attn.wk", "attn.bk") for r in h]
    v = [lin(r, "attn.wv", "attn.bv") for r in h]
    maps = []
    mixed = [[0.0] * d for _ in z]
    for head in range(heads):
        sl = slice(head * hd, (head + 1) * hd)
        att = []
        for i in range(len(z)):
            scores = [sum(x * y for x, y in zip(q[i][sl], k[j][sl])) / math.sqrt(hd) for j in range(len(z))]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            w = [x / sum(e) for x in e]
            att.append(w)
            for c in range(hd):
                mixed[i][head * hd + c] = sum(w[j] * v[j][head * hd + c] for j in range(len(z)))
        maps.append(att)
    out = []
    for i in range(len(z)):
        proj = lin(mixed[i], "attn.wo", "attn.bo")
        zi = [x + y for x, y in zip(z[i], proj)]
        h2 = oracles.layer_norm(zi, a[pre + "ln2.gain"], a[pre + "ln2.bias"])
        ff = oracle_mlp(h2, a[pre + "ff.w1"], a[pre + "ff.b1"], a[pre + "ff.w2"], a[pre + "ff.b2"])
        out.append([x + y for x, y in zip(zi, ff)])
    return out, maps


def oracle_forward(state, params, ee_next):
    cfg, a = params.config, params.arrays
    z = [oracle_mlp(f, a["proj.w1"], a["proj.b1"], a["proj.w2"], a["proj.b2"]) for f in oracle_features(state, cfg)]
    for layer in range(cfg.num_layers):
        z, _ = oracle_layer(z, a, layer, cfg.num_heads)
    out = []
    ee = iter(ee_next)
    for i, row in enumerate(z):
        if state.is_ee[i]:
            out.append(list(next(ee)))
        else:
            d = oracle_mlp(row, a["dec.w1"], a["dec.b1"], a["dec.w2"], a["dec.b2"])
            out.append([p + cfg.motion_scale * x for p, x in zip(state.positions[i], d)])
    return np.array(out)


# embedding


def test_identical_particles_get_identical_embeddings():
    rng = np.random.default_rng(0)
    s = random_scene(rng)
    s.positions[1] = s.positions[0]
    s.materials[1] = s.materials[0]
    z = embed_particles(s, random_params())
    np.testing.assert_array_equal(z[0], z[1])


def test_zero_weights_give_zero_embeddings():
    params = random_params()
    for k in ("proj.w1", "proj.b1", "proj.w2", "proj.b2"):
        params.arrays[k][...] = 0.0
    z = embed_particles(random_scene(np.random.default_rng(1)), params)
    assert not z.any()


def test_embedding_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    s, params = random_scene(rng, n=4, m=2), random_params()
    a = params.arrays
    expected = [oracle_mlp(f, a["proj.w1"], a["proj.b1"], a["proj.w2"], a["proj.b2"]) for f in oracle_features(s, SMALL)]
    np.testing.assert_allclose(embed_particles(s, params), expected, rtol=1e-12, atol=1e-12)


def test_raw_features_without_config():
    s = random_scene(np.random.default_rng(3))
    f = particle_features(s.positions, s.materials, s.motion).data
    assert f.shape == (s.count, FEATURE_DIM)
    np.testing.assert_array_equal(f[:, :3], s.positions)
    np.testing.assert_array_equal(f[:, 7:], s.motion)


# attention


def test_single_particle_attends_to_itself_with_weight_one():
    params = random_params()
    z, maps = dynamics_transition(np.random.default_rng(4).normal(size=(1, 8)), params, capture_attention=True)
    assert maps.shape == (2, 2, 1, 1)
    np.testing.assert_array_equal(maps, 1.0)


def test_two_particle_hand_computed_attention():
    cfg = ModelConfig(embed_dim=2, num_layers=1, num_heads=1, ff_hidden=1, decoder_hidden=1)
    params = init_params(cfg)
    a = params.arrays
    for k, v in a.items():
        v[...] = 0.0
    a["layer0.ln1.gain"][...] = 1.0
    a["layer0.ln2.gain"][...] = 1.0
    a["layer0.attn.wq"][...] = np.eye(2)
    a["layer0.attn.wk"][...] = np.eye(2)
    a["layer0.attn.wv"][...] = np.eye(2)
    a["layer0.attn.wo"][...] = np.eye(2)
    z = np.array([[1.0, 0.0], [0.0, 2.0]])
    # layer norm: row 0 has variance 0.25, row 1 variance 1
    n0 = 0.5 / math.sqrt(0.25 + 1e-5)
    n1 = 1.0 / math.sqrt(1.0 + 1e-5)
    h = np.array([[n0, -n0], [-n1, n1]])
    scale = 1.0 / math.sqrt(2)
    scores = np.array([[2 * n0 * n0, -2 * n0 * n1], [-2 * n0 * n1, 2 * n1 * n1]]) * scale
    expected_map = np.array([[math.exp(s) for s in row] for row in scores])
    expected_map /= expected_map.sum(axis=1, keepdims=True)
    mixed = expected_map @ h
    out, maps = dynamics_transition(z, params, capture_attention=True)
    np.testing.assert_allclose(maps[0, 0], expected_map, rtol=1e-12)
    # zero feed-forward weights: the residual adds only the attention output
    np.testing.assert_allclose(out, z + mixed, rtol=1e-12)


def test_transition_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    params = random_params()
    z = rng.normal(size=(5, 8))
    expected = [list(r) for r in z]
    maps = []
    for layer in range(SMALL.num_layers):
        expected, m = oracle_layer(expected, params.arrays, layer, SMALL.num_heads)
        maps.append(m)
    out, att = dynamics_transition(z, params, capture_attention=True)
    np.testing.assert_allclose(out, expected, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(att, maps, rtol=1e-10, atol=1e-14)


def test_attention_rows_are_stochastic():
    s = random_scene(np.random.default_rng(6), n=9, m=3)
    maps = attention_maps(s, random_params())
    np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-12)
    assert (maps >= 0).all()


def test_transition_rejects_wrong_width():
    with pytest.raises(ShapeError):
        dynamics_transition(np.zeros((3, 5)), random_params())


# decoder


def test_decoder_is_shared_and_zero_decoder_gives_zero():
    params = random_params()
    z = np.random.default_rng(7).normal(size=(3, 8))
    z[2] = z[0]
    d = predict_displacements(z, params)
    np.testing.assert_array_equal(d[0], d[2])
    params.arrays["dec.w2"][...] = 0.0
    params.arrays["dec.b2"][...] = 0.0
    assert not predict_displacements(z, params).any()


def test_decoder_matches_scalar_oracle():
    params = random_params()
    a = params.arrays
    z = np.random.default_rng(8).normal(size=(4, 8))
    expected = [
        [SMALL.motion_scale * v for v in oracle_mlp(r, a["dec.w1"], a["dec.b1"], a["dec.w2"], a["dec.b2"])]
        for r in lists(z)
    ]
    np.testing.assert_allclose(predict_displacements(z, params), expected, rtol=1e-12, atol=1e-15)


# forward and rollout


def test_zero_decoder_keeps_objects_still_and_effector_follows_command():
    rng = np.random.default_rng(9)
    s = random_scene(rng)
    params = init_params(SMALL, seed=1)  # decoder output layer starts at zero
    ee_next = s.effector_positions + 0.01
    nxt = forward(s, params, ee_next)
    np.testing.assert_array_equal(nxt.object_positions, s.object_positions)
    np.testing.assert_array_equal(nxt.effector_positions, ee_next)


def test_effector_rows_ignore_the_decoder():
    rng = np.random.default_rng(10)
    s, params = random_scene(rng), random_params()
    ee_next = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(forward(s, params, ee_next).effector_positions, ee_next)


def test_forward_matches_full_scalar_oracle():
    rng = np.random.default_rng(11)
    s, params = random_scene(rng, n=4, m=2), random_params(seed=3)
    ee_next = s.effector_positions + rng.normal(0, 0.01, size=(2, 3))
    np.testing.assert_allclose(forward(s, params, ee_next).positions, oracle_forward(s, params, ee_next),
                               rtol=1e-10, atol=1e-13)


def test_forward_is_embed_transition_decode_composition():
    rng = np.random.default_rng(12)
    s, params = random_scene(rng), random_params()
    ee_next = s.effector_positions + s.motion[s.is_ee]
    z = embed_particles(s, params)
    z_next, _ = dynamics_transition(z, params)
    delta = predict_displacements(z_next, params)
    expected = s.positions + delta
    expected[s.is_ee] = ee_next
    np.testing.assert_allclose(forward(s, params).positions, expected, rtol=1e-13, atol=1e-15)


def test_rollout_k1_equals_forward_and_feeds_back():
    rng = np.random.default_rng(13)
    s, params = random_scene(rng), random_params()
    traj = s.effector_positions + np.cumsum(rng.normal(0, 0.01, size=(3, 2, 3)), axis=0)
    one = rollout(s, traj, params, 1)[0]
    np.testing.assert_array_equal(one.positions, forward(s, params, traj[0]).positions)
    three = rollout(s, traj, params, 3)
    manual = s
    for j in range(3):
        manual = forward(manual, params, traj[j])
        np.testing.assert_allclose(three[j].positions, manual.positions, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(three[1].motion[s.is_ee], traj[1] - traj[0])


def test_identity_dynamics_rollout_tracks_commands():
    rng = np.random.default_rng(14)
    s = random_scene(rng)
    params = init_params(SMALL, seed=2)
    traj = s.effector_positions + np.cumsum(np.full((5, 2, 3), 0.01), axis=0)
    for j, frame in enumerate(rollout(s, traj, params, 5)):
        np.testing.assert_array_equal(frame.object_positions, s.object_positions)
        np.testing.assert_array_equal(frame.effector_positions, traj[j])


def test_rollout_validates_its_inputs():
    rng = np.random.default_rng(15)
    s, params = random_scene(rng), random_params()
    with pytest.raises(InvalidInputError):
        rollout(s, np.zeros((1, 2, 3)), params, 2)
    with pytest.raises(InvalidInputError):
        rollout(s, np.zeros((1, 2, 3)), params, 0)
    bad = s.copy()
    bad.motion[0] = 1.0
    with pytest.raises(InvalidInputError):
        forward(bad, params)
    bad = s.copy()
    bad.materials[0] = 0.0
    with pytest.raises(InvalidInputError):
        forward(bad, params)


def test_permutation_equivariance():
    rng = np.random.default_rng(16)
    params = random_params(seed=4)
    for _ in range(10):
        s = random_scene(rng, n=6, m=3)
        sigma = rng.permutation(s.count)
        ee_next = s.effector_positions + 0.01
        out = forward(s, params, ee_next)
        ps = s.permuted(sigma)
        out_p = forward(ps, params, ps.effector_positions + 0.01)
        np.testing.assert_allclose(out_p.positions, out.positions[sigma], rtol=0, atol=1e-12)


def test_full_model_and_hybrid_loss_gradient():
    rng = np.random.default_rng(17)
    s = random_scene(rng, n=9, m=3)
    params = random_params(seed=5, scale=0.3)
    target = s.object_positions + rng.normal(0, 0.02, size=(9, 3))
    cfg = LossConfig(0.5, 50.0, 0.02)
    names = list(params.arrays)
    traj = (s.effector_positions + s.motion[s.is_ee])[None, None]

    def loss(*arrays):
        p = dict(zip(names, arrays))
        x = rollout_tensors(p, SMALL, s.positions[None], s.motion[None], s.materials, s.is_ee, traj, 1)[0]
        return hybrid_loss(x[:, ~s.is_ee], target[None], cfg).sum()

    err = ad.finite_difference_check(loss, [params.arrays[n] for n in names], max_coords=400,
                                     rng=np.random.default_rng(0))
    assert err < 1e-4


def test_config_and_param_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(InvalidInputError):
        ModelConfig(num_layers=0)
    with pytest.raises(InvalidInputError):
        ModelConfig(length_scale=0.0)
    arrays = dict(init_params(SMALL).arrays)
    arrays.pop("dec.b2")
    with pytest.raises(ShapeError):
        ModelParams(SMALL, arrays)


def test_init_is_deterministic():
    assert init_params(SMALL, seed=3).equals(init_params(SMALL, seed=3))
    assert not init_params(SMALL, seed=3).equals(init_params(SMALL, seed=4))
