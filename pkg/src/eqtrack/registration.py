"""Closed-form registration head: spatial means, channel weights, weighted Kabsch, losses."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .geometry import RigidTransform

EMPTY_MASS = 1e-12
DEGENERATE_SV = 1e-9


class DegenerateConfiguration(ValueError):
    """The weighted point sets do not determine a rotation."""


class EmptyChannelsWarning(RuntimeWarning):
    pass


def _t(x):
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class WeightedPointSet:
    """K spatial means in mm with their channel masses and empty flags."""

    points: Tensor
    masses: Tensor
    empty: np.ndarray


def spatial_mean(channels, voxel_size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Mass-normalized centroids of non-negative channels (K, D, H, W) in world mm.

    Empty channels (mass below 1e-12) get a placeholder point and ``empty = True``.
    """
    f = _t(channels)
    if f.ndim == 3:
        f = ops.reshape(f, (1,) + f.shape)
    k, *shape = f.shape
    axes = [Tensor._wrap((np.arange(n) * v + o).reshape(n, 1))
            for n, v, o in zip(shape, voxel_size, origin)]
    mass = ops.sum(f, axis=(1, 2, 3))
    empty = mass.data < EMPTY_MASS
    safe = ops.add(mass, Tensor._wrap(empty.astype(np.float64)))
    marg = [ops.sum(f, axis=(2, 3)), ops.sum(f, axis=(1, 3)), ops.sum(f, axis=(1, 2))]
    moments = ops.concatenate([ops.matmul(m, a) for m, a in zip(marg, axes)], axis=1)
    points = ops.div(moments, ops.reshape(safe, (k, 1)))
    return WeightedPointSet(points, mass, empty)


def point_set(channels, vol):
    """spatial_mean on the grid of ``vol``."""
    return spatial_mean(channels, vol.voxel_size, vol.origin)


def channel_weights(masses_a, masses_b, empty_a=None, empty_b=None):
    """Per-side normalized masses, multiplied, renormalized to sum one."""
    ma, mb = _t(masses_a), _t(masses_b)
    ea = ma.data < EMPTY_MASS if empty_a is None else np.asarray(empty_a)
    eb = mb.data < EMPTY_MASS if empty_b is None else np.asarray(empty_b)
    if np.any(ma.data < 0) or np.any(mb.data < 0):
        raise ValueError("channel masses must be non-negative")
    live = ~(ea | eb)
    k = ma.shape[0]
    if not live.any():
        warnings.warn("all channels empty; using uniform weights", EmptyChannelsWarning, stacklevel=2)
        return Tensor._wrap(np.full(k, 1.0 / k))
    keep_a = Tensor._wrap((~ea).astype(np.float64))
    keep_b = Tensor._wrap((~eb).astype(np.float64))
    ma, mb = ops.mul(ma, keep_a), ops.mul(mb, keep_b)
    wa = ops.div(ma, ops.sum(ma))
    wb = ops.div(mb, ops.sum(mb))
    w = ops.mul(wa, wb)
    return ops.div(w, ops.sum(w))


@dataclass
class RigidSolution:
    rotation: Tensor
    translation: Tensor
    residual: Tensor
    singular_values: np.ndarray
    centroid_a: np.ndarray
    centroid_b: np.ndarray
    reflection_fixed: bool

    def transform(self):
        return RigidTransform(self.rotation.data, self.translation.data, check=False)


def solve_rigid_weighted(points_a, points_b, weights):
    """Weighted least-squares rigid motion mapping ``points_a`` onto ``points_b``.

    Minimizes sum_k w_k |b_k - (R a_k + t)|^2 with R = V diag(1, 1, d) U^T from
    the SVD of the weighted cross-covariance, and t = c_b - R c_a.
    """
    a, b, w = _t(points_a), _t(points_b), _t(weights)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3 or w.shape != (a.shape[0],):
        raise ValueError(f"point sets {a.shape}, {b.shape} and weights {w.shape} do not match")
    if np.any(w.data < 0):
        raise ValueError("weights must be non-negative")
    if np.count_nonzero(w.data) < 3:
        raise DegenerateConfiguration("need at least three points with nonzero weight")
    w = ops.div(w, ops.sum(w))
    wc = ops.reshape(w, (1, -1))
    ca = ops.matmul(wc, a)
    cb = ops.matmul(wc, b)
    a0 = ops.sub(a, ca)
    b0 = ops.sub(b, cb)
    h = ops.matmul(ops.transpose(ops.mul(a0, ops.reshape(w, (-1, 1)))), b0)
    u, s, v = ops.svd3(h)
    if s.data[1] < DEGENERATE_SV and s.data[2] < DEGENERATE_SV:
        raise DegenerateConfiguration(
            f"cross-covariance singular values {s.data.tolist()} leave the rotation unidentified")
    d = 1.0 if np.linalg.det(v.data @ u.data.T) >= 0 else -1.0
    fix = Tensor._wrap(np.diag([1.0, 1.0, d]))
    r = ops.matmul(ops.matmul(v, fix), ops.transpose(u))
    ca_col = ops.reshape(ca, (3, 1))
    t = ops.sub(ops.reshape(cb, (3,)), ops.reshape(ops.matmul(r, ca_col), (3,)))
    diff = ops.sub(b, ops.add(ops.matmul(a, ops.transpose(r)), t))
    residual = ops.sum(ops.mul(ops.sum(ops.mul(diff, diff), axis=1), w))
    return RigidSolution(r, t, residual, s.data.copy(), ca.data.ravel().copy(), cb.data.ravel().copy(), d < 0)


def objective(points_a, points_b, weights, rotation, translation):
    """Weighted squared residual of a candidate transform (plain numpy)."""
    a, b, w = (np.asarray(x, dtype=np.float64) for x in (points_a, points_b, weights))
    w = w / w.sum()
    diff = b - (a @ np.asarray(rotation).T + translation)
    return float(np.sum(w * np.sum(diff * diff, axis=1)))


def register_point_sets(pa, pb):
    """Channel weights plus closed-form solve for two WeightedPointSets."""
    w = channel_weights(pa.masses, pb.masses, pa.empty, pb.empty)
    return solve_rigid_weighted(pa.points, pb.points, w), w


def track(image_a, image_b, net, params):
    """Estimate T with image_b = T o image_a; returns (RigidTransform, diagnostics)."""
    if not image_a.same_grid(image_b):
        raise ValueError("images must share one grid")
    fa = net.forward(image_a.data, params)
    fb = net.forward(image_b.data, params)
    pa, pb = point_set(fa, image_a), point_set(fb, image_b)
    sol, w = register_point_sets(pa, pb)
    return sol.transform(), diagnostics(pa, pb, w, sol)


def diagnostics(pa, pb, w, sol):
    s = sol.singular_values
    return {
        "masses_a": pa.masses.data.tolist(),
        "masses_b": pb.masses.data.tolist(),
        "weights": np.asarray(w.data).tolist(),
        "empty_channels": int(np.count_nonzero(pa.empty | pb.empty)),
        "residual_mm2": float(sol.residual.data),
        "singular_values": s.tolist(),
        "condition": {"s1_over_s0": float(s[1] / s[0]) if s[0] > 0 else 0.0,
                      "s2_over_s0": float(s[2] / s[0]) if s[0] > 0 else 0.0,
                      "reflection_fixed": bool(sol.reflection_fixed)},
        "centroid_a_mm": sol.centroid_a.tolist(),
        "centroid_b_mm": sol.centroid_b.tolist(),
        "translation_centroid_difference_mm": (sol.centroid_b - sol.centroid_a).tolist(),
        "translation_global_mm": sol.translation.data.tolist(),
    }


# -- losses --------------------------------------------------------------------

def loss_l2(r_est, t_est, r_true, t_true):
    """|t_est - t_true|_2 + |R_est - R_true|_F."""
    dt = ops.sub(_t(t_est), _t(t_true))
    dr = ops.sub(_t(r_est), _t(r_true))
    return ops.add(ops.norm(dt), ops.norm(ops.reshape(dr, (9,))))


def loss_geodesic(r_est, r_true):
    """arccos((tr(R_est^T R_true) - 1) / 2) with a clamped arccos."""
    tr = ops.sum(ops.mul(_t(r_est), _t(r_true)))
    return ops.arccos(ops.mul(ops.sub(tr, 1.0), 0.5))


def loss_6d(r_est, r_true):
    """Distance between the first two columns of each rotation, each column normalized."""
    def cols(r):
        c = ops.getitem(_t(r), (slice(None), slice(0, 2)))
        return ops.div(c, ops.reshape(ops.norm(c, axis=0), (1, 2)))

    return ops.norm(ops.reshape(ops.sub(cols(r_est), cols(r_true)), (6,)))


def loss_image(r_est, t_est, image_a, image_b):
    """Mean squared difference between image_a warped by (R, t) and image_b."""
    r, t = _t(r_est), _t(t_est)
    grid = image_b.world_grid().reshape(-1, 3)
    vs = np.array(image_a.voxel_size)
    org = np.array(image_a.origin)
    # source point R^T (x - t), expressed as index coordinates of image_a
    src = ops.matmul(ops.sub(Tensor._wrap(grid), ops.reshape(t, (1, 3))), r)
    idx = ops.div(ops.sub(src, Tensor._wrap(org.reshape(1, 3))), Tensor._wrap(vs.reshape(1, 3)))
    warped = ops.sample_trilinear(image_a.data, idx)
    diff = ops.sub(warped, Tensor._wrap(image_b.data.reshape(-1)))
    return ops.mul(ops.sum(ops.mul(diff, diff)), 1.0 / diff.size)


def combined_loss(kind, r_est, t_est, r_true=None, t_true=None, image_a=None, image_b=None):
    """Training objective; rotation-only losses get the translation l2 term added."""
    if kind == "l2":
        return loss_l2(r_est, t_est, r_true, t_true)
    if kind == "image":
        return loss_image(r_est, t_est, image_a, image_b)
    trans = ops.norm(ops.sub(_t(t_est), _t(t_true)))
    if kind == "geo":
        return ops.add(loss_geodesic(r_est, r_true), trans)
    if kind == "6d":
        return ops.add(loss_6d(r_est, r_true), trans)
    raise ValueError(f"unknown loss {kind!r}")
