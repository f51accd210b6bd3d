import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqtrack import data, geometry
from eqtrack import registration as reg
from eqtrack.autodiff import Tensor, ops
from _fd import directional_error
from _oracles import CandidatePool, instance, iterative_procrustes


def test_spatial_mean_delta():
    f = np.zeros((1, 6, 6, 6))
    f[0, 2, 3, 4] = 5.0
    ps = reg.spatial_mean(f)
    assert np.allclose(ps.points.data, [[2, 3, 4]])
    assert ps.masses.data[0] == 5.0


def test_spatial_mean_two_deltas_and_uniform():
    f = np.zeros((2, 4, 4, 4))
    f[0, 0, 0, 0] = f[0, 2, 0, 0] = 1.0
    f[1] = 1.0
    ps = reg.spatial_mean(f)
    assert np.allclose(ps.points.data, [[1, 0, 0], [1.5, 1.5, 1.5]])


def test_spatial_mean_world_coordinates_and_empty():
    f = np.zeros((2, 5, 5, 5))
    f[0, 4, 0, 2] = 1.0
    ps = reg.spatial_mean(f, voxel_size=(2.0, 1.0, 0.5), origin=(-1.0, 3.0, 0.0))
    assert np.allclose(ps.points.data[0], [7.0, 3.0, 1.0])
    assert list(ps.empty) == [False, True]
    assert np.all(np.isfinite(ps.points.data))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3))
def test_spatial_mean_tracks_translation(seed, dx, dy, dz):
    rng = np.random.default_rng(seed)
    f = np.zeros((3, 12, 12, 12))
    f[:, 4:8, 4:8, 4:8] = rng.uniform(0, 1, (3, 4, 4, 4))
    g = np.roll(f, (dx, dy, dz), axis=(1, 2, 3))
    pa, pb = reg.spatial_mean(f), reg.spatial_mean(g)
    assert np.allclose(pb.points.data - pa.points.data, [dx, dy, dz], atol=1e-12)


def test_channel_weight_examples():
    assert np.allclose(reg.channel_weights([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]).data, 1 / 3)
    assert np.allclose(reg.channel_weights([2.0, 1.0], [1.0, 2.0]).data, [0.5, 0.5])
    w = reg.channel_weights([1.0, 0.0, 2.0], [1.0, 3.0, 2.0])
    assert w.data[1] == 0.0 and math.isclose(w.data.sum(), 1.0)


def test_channel_weights_all_empty_warns():
    with pytest.warns(reg.EmptyChannelsWarning):
        w = reg.channel_weights(np.zeros(4), np.ones(4))
    assert np.allclose(w.data, 0.25)


def test_channel_weights_reject_negative():
    with pytest.raises(ValueError):
        reg.channel_weights([1.0, -1.0], [1.0, 1.0])


def test_solve_identity():
    a = np.random.default_rng(0).standard_normal((6, 3))
    sol = reg.solve_rigid_weighted(a, a, np.ones(6))
    assert np.allclose(sol.rotation.data, np.eye(3), atol=1e-12)
    assert np.allclose(sol.translation.data, 0, atol=1e-12)
    assert sol.residual.data < 1e-20


def test_solve_known_transform():
    a = np.random.default_rng(1).standard_normal((8, 3))
    rz = geometry.axis_angle_to_matrix([0, 0, 1], math.pi / 2)
    b = a @ rz.T + [1.0, 2.0, 3.0]
    sol = reg.solve_rigid_weighted(a, b, np.random.default_rng(2).uniform(0.1, 1, 8))
    assert np.abs(sol.rotation.data - rz).max() < 1e-9
    assert np.abs(sol.translation.data - [1, 2, 3]).max() < 1e-9


def test_solve_fixes_reflection():
    a = np.random.default_rng(3).standard_normal((10, 3))
    b = a * [1.0, 1.0, -1.0]
    sol = reg.solve_rigid_weighted(a, b, np.ones(10))
    assert geometry.is_rotation(sol.rotation.data)
    assert sol.reflection_fixed


def test_solve_degenerate_inputs():
    a = np.zeros((5, 3))
    a[:, 0] = np.arange(5)
    with pytest.raises(reg.DegenerateConfiguration):
        reg.solve_rigid_weighted(a, a, np.ones(5))
    b = np.random.default_rng(0).standard_normal((5, 3))
    with pytest.raises(reg.DegenerateConfiguration):
        reg.solve_rigid_weighted(b, b, [1.0, 1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        reg.solve_rigid_weighted(b, b, -np.ones(5))


def test_solve_matches_oracles():
    rng = np.random.default_rng(7)
    pool = CandidatePool(20000, rng)
    for _ in range(20):
        a, b, w = instance(rng)
        sol = reg.solve_rigid_weighted(a, b, w)
        f = reg.objective(a, b, w, sol.rotation.data, sol.translation.data)
        f_iter, r_iter, _ = iterative_procrustes(a, b, w, rng=rng)
        assert abs(f - f_iter) < 1e-8
        assert f <= pool.min_objective(a, b, w, sol.rotation.data, rng)


def test_solver_gradient_matches_fd():
    r_true = geometry.random_rotation(4)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((6, 3))
        b = a @ geometry.random_rotation(rng).T + rng.standard_normal((6, 3)) * 0.1
        w = rng.uniform(0.2, 1, 6)

        def f(a, b, w):
            sol = reg.solve_rigid_weighted(a, b, w)
            return ops.add(reg.loss_geodesic(sol.rotation, Tensor(r_true)), ops.sum(sol.translation))

        assert directional_error(f, [a, b, w], rng) < 1e-3


def test_track_identical_images(subject16, tiny_net):
    net, params = tiny_net
    t, diag = reg.track(subject16.volume, subject16.volume, net, params)
    assert geometry.rotation_angle(t.rotation) < 1e-6
    assert np.linalg.norm(t.translation) / 3.0 < 1e-6
    assert {"weights", "singular_values", "condition", "residual_mm2"} <= set(diag)


def test_track_grid_rotation_random_model(subject16, desk_net):
    net, params = desk_net
    r = geometry.octahedral_rotations()[7]
    moved = subject16.volume.with_data(geometry.rotate_grid(subject16.volume.data, r))
    t, _ = reg.track(subject16.volume, moved, net, params)
    assert math.degrees(geometry.rotation_error_geodesic(t.rotation, r)) < 0.5


def test_track_requires_same_grid(subject16, tiny_net):
    net, params = tiny_net
    other = data.Volume(subject16.volume.data)
    with pytest.raises(ValueError):
        reg.track(subject16.volume, other, net, params)


def test_loss_l2_examples():
    rz = geometry.axis_angle_to_matrix([0, 0, 1], math.pi)
    assert reg.loss_l2(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3)).item() == 0.0
    assert math.isclose(reg.loss_l2(np.eye(3), np.zeros(3), rz, np.zeros(3)).item(), 2 * math.sqrt(2), rel_tol=1e-12)
    r1, r2 = geometry.random_rotation(1), geometry.random_rotation(2)
    t1, t2 = np.array([1.0, 2, 3]), np.array([0.0, -1, 2])
    expect = np.linalg.norm(t1 - t2) + np.linalg.norm(r1 - r2)
    assert math.isclose(reg.loss_l2(r1, t1, r2, t2).item(), expect, rel_tol=1e-12)


def test_loss_geodesic_examples():
    r = geometry.random_rotation(5)
    assert reg.loss_geodesic(r, r).item() < 1e-3  # clamped arccos floor
    rz = geometry.axis_angle_to_matrix([0, 0, 1], math.pi / 2)
    assert math.isclose(reg.loss_geodesic(np.eye(3), rz).item(), math.pi / 2, rel_tol=1e-9)


def test_loss_6d_examples_and_continuity():
    rz = geometry.axis_angle_to_matrix([0, 0, 1], math.pi / 2)
    assert reg.loss_6d(rz, rz).item() == 0.0
    assert math.isclose(reg.loss_6d(np.eye(3), rz).item(), 2.0, rel_tol=1e-12)
    eps = 1e-4
    for theta in np.linspace(math.pi - 0.01, math.pi, 5):
        a = geometry.axis_angle_to_matrix([1, 1, 0], theta)
        b = geometry.axis_angle_to_matrix([1, 1, 0], theta + eps)
        assert reg.loss_6d(a, b).item() < 2 * eps


def test_loss_image_examples(subject16):
    vol = subject16.volume
    assert reg.loss_image(np.eye(3), np.zeros(3), vol, vol).item() == 0.0
    t = geometry.pose_sample(3, 20, 4)
    moved = data.warp_volume(vol, t)
    val = reg.loss_image(t.rotation, t.translation, vol, moved).item()
    assert val < 1e-3 * np.var(moved.data)
    assert val < reg.loss_image(np.eye(3), np.zeros(3), vol, moved).item()


def test_combined_loss_kinds():
    r, t = geometry.random_rotation(1), np.array([1.0, 0, 0])
    assert reg.combined_loss("l2", r, t, r, np.zeros(3)).item() == 1.0
    assert math.isclose(reg.combined_loss("6d", r, t, r, np.zeros(3)).item(), 1.0)
    with pytest.raises(ValueError):
        reg.combined_loss("l1", r, t, r, t)


def test_no_warnings_on_regular_track(subject16, tiny_net):
    net, params = tiny_net
    moved, _ = subject16.posed(geometry.pose_sample(1))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        reg.track(subject16.volume, moved, net, params)
