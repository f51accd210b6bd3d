"""Equivariance checks for a filter bank: exact grid rotations, shifts, and resampled rotations."""

from __future__ import annotations

import numpy as np

from . import data, geometry

OCTAHEDRAL_TOL = 1e-5
CONTINUOUS_TOL = 0.05


def _rel_max(a, b):
    scale = np.abs(b).max()
    if scale == 0:
        return float(np.abs(a).max() > 0)
    return float(np.abs(a - b).max() / scale)


def _transform_fields(arr, layout, r):
    rho = geometry.field_representation(layout, r)
    rot = geometry.rotate_grid(arr, r)
    return np.einsum("ab,b...->a...", rho, rot)


def shift_zero(arr, shift):
    """Integer shift of the last three axes with zero fill."""
    out = np.zeros_like(arr)
    src = [slice(None)] * (arr.ndim - 3)
    dst = list(src)
    for s, n in zip(shift, arr.shape[-3:]):
        if s >= 0:
            src.append(slice(0, n - s))
            dst.append(slice(s, n))
        else:
            src.append(slice(-s, n))
            dst.append(slice(0, n + s))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def interior(shape, margin):
    return tuple(slice(margin, n - margin) for n in shape)


def octahedral_suite(net, params, image, rotations=None, shifts=((1, -2, 1),), tol=OCTAHEDRAL_TOL):
    """Per-layer relative errors of F(g I) against g F(I).

    Grid rotations act about the grid center and are compared on the whole
    grid. Shifts are compared on the interior, beyond the receptive field of
    the zero-padded boundary.
    """
    img = np.asarray(image, dtype=np.float64)
    rotations = geometry.octahedral_rotations()[1:] if rotations is None else rotations
    layouts = [spec.out_type.layout for spec in net.config.layers]
    base = [t.data for t in net.forward(img, params, return_all=True)]
    rows = []
    for i, r in enumerate(rotations):
        outs = net.forward(geometry.rotate_grid(img, r), params, return_all=True)
        errs = [_rel_max(o.data, _transform_fields(b, lay, r)) for o, b, lay in zip(outs, base, layouts)]
        rows.append({"kind": "rotation", "index": i, "layer_errors": errs, "max_error": max(errs)})
    reach = sum(spec.kernel // 2 for spec in net.config.layers)
    for s in shifts:
        outs = net.forward(shift_zero(img, s), params, return_all=True)
        margin = reach + max(abs(v) for v in s)
        if 2 * margin >= min(img.shape):
            raise ValueError(f"grid {img.shape} too small for shift {tuple(s)} with receptive reach {reach}")
        region = (slice(None),) + interior(img.shape, margin)
        errs = [_rel_max(o.data[region], shift_zero(b, s)[region]) for o, b in zip(outs, base)]
        rows.append({"kind": "shift", "shift": list(s), "layer_errors": errs, "max_error": max(errs)})
    worst = max(r["max_error"] for r in rows) if rows else 0.0
    return {"suite": "octahedral", "tolerance": tol, "max_error": worst, "passed": bool(worst < tol), "cases": rows}


def continuous_suite(net, params, volume, n_rotations=3, seed=0, tol=CONTINUOUS_TOL):
    """Relative L2 error of F(warp(I, R)) against warp(F(I), R) for random rotations.

    Errors are measured inside the ball inscribed in the grid, where the
    rotated grid samples stay in bounds.
    """
    rng = np.random.default_rng(seed)
    base = net.forward(volume.data, params).data
    n = np.array(volume.shape)
    idx = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), axis=-1)
    inside = np.linalg.norm(idx - (n - 1) / 2, axis=-1) <= (n.min() - 1) / 2 - 1
    rows = []
    for i in range(n_rotations):
        r = geometry.random_rotation(rng)
        t = geometry.RigidTransform(r, np.zeros(3), check=False)
        out = net.forward(data.warp_volume(volume, t).data, params).data
        ref = np.stack([data.warp_volume(volume.with_data(c), t).data for c in base])
        a, b = out[:, inside], ref[:, inside]
        err = float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
        rows.append({"angle_deg": float(np.degrees(geometry.rotation_angle(r))), "error": err})
    worst = max(r["error"] for r in rows)
    return {"suite": "continuous", "tolerance": tol, "max_error": worst, "passed": bool(worst < tol), "cases": rows}
