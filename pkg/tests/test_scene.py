import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabert.geo import Trajectory
from mabert.scene import (
    Normalizer,
    Scene,
    agent_mask,
    assemble_scenes,
    batch,
    build_masks,
    positional_encoding,
    read_scenes,
    slot_agent,
    slot_step,
    write_scenes,
)


def make_scene(rng, n=3, t=8, f=3, ref=(127.0, 37.0)):
    valid_len = rng.integers(1, t + 1, size=n)
    valid_len[0] = t
    data = rng.normal(size=(n, t, f))
    data[np.arange(t)[None, :] >= valid_len[:, None]] = 0.0
    eta = np.where(rng.random(n) < 0.5, rng.uniform(10, 500, n), np.nan)
    return Scene(0.0, 10.0, data, valid_len, [f"F{i}" for i in range(n)], rng.integers(0, 5, n), eta, ref)


def brute_mask(n, t):
    out = np.zeros((n * t, n * t), dtype=np.int8)
    for i in range(n * t):
        for j in range(n * t):
            out[i, j] = 1 if i % n == j % n else 0
    return out


# -- masks ------------------------------------------------------------------


@pytest.mark.parametrize("n", range(1, 6))
@pytest.mark.parametrize("t", range(1, 7))
def test_agent_mask_matches_per_index_construction(n, t):
    np.testing.assert_array_equal(agent_mask(n, t), brute_mask(n, t))


def test_agent_mask_block_pattern():
    # 2 agents, 3 steps: every 2x2 time block is the identity
    m = agent_mask(2, 3)
    for a in range(3):
        for b in range(3):
            np.testing.assert_array_equal(m[2 * a : 2 * a + 2, 2 * b : 2 * b + 2], np.eye(2))


def test_slot_indexing_is_time_major():
    np.testing.assert_array_equal(slot_agent(3, 2), [0, 1, 2, 0, 1, 2])
    np.testing.assert_array_equal(slot_step(3, 2), [0, 0, 0, 1, 1, 1])


def test_pad_mask_flags_invalid_slots():
    data = np.zeros((2, 3, 3))
    data[0] = 1.0
    data[1, 0] = 1.0
    sc = Scene(0.0, 10.0, data, np.array([3, 1]), ["a", "b"])
    masks = build_masks(sc)
    # slots: (t0,a0) (t0,a1) (t1,a0) (t1,a1) (t2,a0) (t2,a1)
    np.testing.assert_array_equal(masks.pad_mask, [0, 0, 0, 1, 0, 1])
    assert masks.agent_mask.shape == (6, 6)


# -- scene validation -------------------------------------------------------


def test_scene_rejects_nonzero_padding():
    data = np.ones((1, 4, 3))
    with pytest.raises(ValueError, match="padded"):
        Scene(0.0, 10.0, data, np.array([2]), ["a"])


@pytest.mark.parametrize("vl", [0, 5])
def test_scene_rejects_bad_valid_len(vl):
    with pytest.raises(ValueError, match="valid_len"):
        Scene(0.0, 10.0, np.zeros((1, 4, 3)), np.array([vl]), ["a"])


def test_scene_rejects_length_mismatch():
    with pytest.raises(ValueError, match="length N"):
        Scene(0.0, 10.0, np.zeros((2, 4, 3)), np.array([4, 4]), ["a"])


# -- positional encoding ----------------------------------------------------


def test_positional_encoding_values():
    pe = positional_encoding(4, 4)
    t = np.arange(4.0)
    np.testing.assert_allclose(pe[:, 0], np.sin(t))
    np.testing.assert_allclose(pe[:, 1], np.cos(t))
    np.testing.assert_allclose(pe[:, 2], np.sin(t / 100.0))
    np.testing.assert_allclose(pe[:, 3], np.cos(t / 100.0))


def test_positional_encoding_odd_dim_rejected():
    with pytest.raises(ValueError):
        positional_encoding(5, 3)


@given(st.integers(0, 59), st.integers(1, 32).map(lambda k: 2 * k))
def test_positional_encoding_pairs_on_unit_circle(t, d):
    pe = positional_encoding(60, d)[t]
    np.testing.assert_allclose(pe[0::2] ** 2 + pe[1::2] ** 2, 1.0, atol=1e-12)


# -- normalizer -------------------------------------------------------------


def test_normalizer_round_trip_and_padding():
    rng = np.random.default_rng(1)
    scenes = [make_scene(rng) for _ in range(4)]
    norm = Normalizer.fit(scenes)
    for sc in scenes:
        z = norm.normalize(sc)
        assert np.all(z.data[~sc.valid_mask()] == 0.0)
        back = norm.denormalize(z)
        np.testing.assert_allclose(back.data, sc.data, atol=1e-12)


def test_normalizer_standardizes_training_data():
    rng = np.random.default_rng(2)
    scenes = [make_scene(rng) for _ in range(5)]
    norm = Normalizer.fit(scenes)
    z = np.concatenate([norm.normalize(s).data[s.valid_mask()] for s in scenes])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


def test_normalizer_is_airport_relative():
    rng = np.random.default_rng(3)
    a = make_scene(rng, ref=(127.0, 37.0))
    norm = Normalizer.fit([a])
    shifted = a.data.copy()
    shifted[..., 0] += 2.0
    shifted[..., 1] -= 1.5
    shifted[~a.valid_mask()] = 0.0
    b = Scene(0.0, 10.0, shifted, a.valid_len, a.agent_ids, a.start_step, a.eta_s, (129.0, 35.5))
    np.testing.assert_allclose(norm.normalize(b).data, norm.normalize(a).data, atol=1e-9)


def test_normalizer_rejects_constant_feature():
    with pytest.raises(ValueError, match="std"):
        Normalizer((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


# -- windowing --------------------------------------------------------------


def traj(fid, t0, k, dt=10.0, t_end=None):
    pts = np.column_stack([np.arange(k), np.arange(k) * 2.0, np.full(k, 5000.0)]).astype(float)
    return Trajectory(fid, float(t0), dt, pts, (127.0, 37.0))


def test_assemble_scenes_windows_and_alignment():
    trs = [traj("A", 0, 10), traj("B", 30, 50), traj("C", 650, 5)]
    scenes = assemble_scenes(trs, t_max=60, dt=10.0)
    assert len(scenes) == 2
    s0, s1 = scenes
    assert s0.agent_ids == ["A", "B"] and s0.window_start == 0.0
    np.testing.assert_array_equal(s0.start_step, [0, 3])
    np.testing.assert_array_equal(s0.valid_len, [10, 50])
    assert s0.T == 53
    np.testing.assert_array_equal(s0.data[1, :50, 0], np.arange(50))
    assert s1.window_start == 600.0
    np.testing.assert_array_equal(s1.start_step, [5])
    # A and B terminate inside the first window; C ends inside the second
    assert np.all(np.isnan(s0.eta_s)) and np.all(np.isnan(s1.eta_s))


def test_assemble_scenes_eta_label_for_airborne_agents():
    # runs from step 0 to step 79: still airborne at the last step (59) of window 0
    scenes = assemble_scenes([traj("A", 0, 80)], t_max=60, dt=10.0)
    assert len(scenes) == 2
    assert scenes[0].eta_s[0] == pytest.approx(200.0)  # 790 - 590
    assert np.isnan(scenes[1].eta_s[0])
    np.testing.assert_array_equal(scenes[1].valid_len, [20])


def test_assemble_scenes_rejects_mixed_dt():
    with pytest.raises(ValueError, match="dt"):
        assemble_scenes([traj("A", 0, 5, dt=5.0)], t_max=60, dt=10.0)


def test_assemble_scenes_empty():
    assert assemble_scenes([]) == []


# -- batching ---------------------------------------------------------------


def test_batch_pads_to_common_shape():
    rng = np.random.default_rng(4)
    a, b = make_scene(rng, n=2, t=5), make_scene(rng, n=4, t=3)
    bt = batch([a, b])
    assert bt.shape == (2, 4, 5, 3)
    assert bt.present.tolist() == [[True, True, False, False], [True] * 4]
    np.testing.assert_array_equal(bt.valid[0, :2], a.valid_mask())
    assert not bt.valid[0, 2:].any() and not bt.valid[1, :, 3:].any()
    keep = bt.key_keep()
    assert keep.shape == (2, 20)
    # time-major: slot t*N+n
    for t in range(5):
        for n in range(4):
            assert keep[0, t * 4 + n] == bt.valid[0, n, t]


def test_batch_of_nothing():
    with pytest.raises(ValueError):
        batch([])


# -- container --------------------------------------------------------------


def test_scene_container_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    scenes = [make_scene(rng, n=k + 1, t=6) for k in range(3)]
    p = tmp_path / "s.bin"
    write_scenes(p, scenes)
    back = read_scenes(p)
    assert len(back) == 3
    for a, b in zip(scenes, back):
        np.testing.assert_allclose(b.data, a.data.astype(np.float32))
        np.testing.assert_array_equal(b.valid_len, a.valid_len)
        np.testing.assert_array_equal(b.start_step, a.start_step)
        np.testing.assert_allclose(b.eta_s, a.eta_s.astype(np.float32))
        assert b.agent_ids == a.agent_ids and b.airport_ref == a.airport_ref
    # writing what was read reproduces the bytes
    p2 = tmp_path / "s2.bin"
    write_scenes(p2, back)
    assert p2.read_bytes() == p.read_bytes()


def test_scene_container_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="not a scene container"):
        read_scenes(p)
    rng = np.random.default_rng(6)
    write_scenes(p, [make_scene(rng)])
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(ValueError, match="truncated"):
        read_scenes(p)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_batch_single_scene_is_identity(n, t, seed):
    sc = make_scene(np.random.default_rng(seed), n=n, t=t)
    bt = batch([sc])
    np.testing.assert_array_equal(bt.x[0], sc.data)
    np.testing.assert_array_equal(bt.valid[0], sc.valid_mask())
