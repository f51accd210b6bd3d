"""Rigid transforms, rotation metrics, and real Wigner matrices.

World coordinates are millimeters. A transform acts as ``T(x) = R x + t``.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from functools import lru_cache

import numpy as np

ORTHO_TOL = 1e-9


class GimbalLockWarning(RuntimeWarning):
    pass


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def is_rotation(r, tol=ORTHO_TOL):
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.abs(r.T @ r - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


class RigidTransform:
    """Rotation matrix plus translation in mm."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, check=True):
        r = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {t.shape}")
        if check and not is_rotation(r):
            raise ValueError("rotation is not orthogonal with determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        self.rotation = r
        self.translation = t

    @classmethod
    def identity(cls):
        return cls()

    def apply(self, points):
        """Map points of shape (..., 3)."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self.compose(other)(x) == self(other(x))``."""
        return compose(self, other)

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation, check=False)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def angle(self):
        """Rotation angle in radians."""
        return rotation_angle(self.rotation)

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation_mm": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["rotation"], d["translation_mm"])
        except KeyError as exc:
            raise ValueError(f"transform record missing key {exc}") from None

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self):
        deg = math.degrees(self.angle)
        return f"RigidTransform(angle={deg:.3f} deg, translation_mm={self.translation.round(4).tolist()})"


def compose(a, b):
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation, check=False)


# -- rotation constructors ---------------------------------------------------

def quaternion_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(r):
    """Unit quaternion (w, x, y, z) with w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    cands = np.array([1 + tr, 1 + 2 * r[0, 0] - tr, 1 + 2 * r[1, 1] - tr, 1 + 2 * r[2, 2] - tr])
    i = int(np.argmax(cands))
    s = math.sqrt(cands[i]) * 2
    if i == 0:
        q = [s / 4, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif i == 1:
        q = [(r[2, 1] - r[1, 2]) / s, s / 4, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif i == 2:
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, s / 4, (r[1, 2] + r[2, 1]) / s]
    else:
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, s / 4]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_to_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("rotation axis has zero length")
    x, y, z = axis / n
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def random_rotation(seed=None):
    """Uniform rotation on SO(3) from a normalized Gaussian quaternion."""
    rng = _rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def pose_sample(seed=None, max_angle_deg=30.0, max_shift_mm=6.0):
    """Random rigid pose: uniform axis, angle uniform in [0, max], shift uniform in a cube."""
    rng = _rng(seed)
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    angle = math.radians(max_angle_deg) * rng.uniform()
    shift = rng.uniform(-max_shift_mm, max_shift_mm, size=3)
    return RigidTransform(axis_angle_to_matrix(axis, angle), shift, check=False)


# -- metrics -------------------------------------------------------------------

def rotation_angle(r):
    """Angle of a rotation in [0, pi], stable near 0 and pi."""
    r = np.asarray(r, dtype=np.float64)
    s = 0.5 * math.sqrt((r[2, 1] - r[1, 2]) ** 2 + (r[0, 2] - r[2, 0]) ** 2 + (r[1, 0] - r[0, 1]) ** 2)
    c = 0.5 * (np.trace(r) - 1.0)
    return math.atan2(s, c)


def rotation_error_geodesic(r_est, r_true):
    """Geodesic distance in radians, the angle of ``r_est.T @ r_true``."""
    return rotation_angle(np.asarray(r_est).T @ np.asarray(r_true))


def euler_zyx(r):
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) in radians with R = Rz Ry Rx."""
    r = np.asarray(r, dtype=np.float64)
    pitch = -math.asin(max(-1.0, min(1.0, r[2, 0])))
    if abs(abs(pitch) - math.pi / 2) < 1e-6:
        warnings.warn("pitch within 1e-6 rad of 90 degrees; Euler angles are ill-defined",
                      GimbalLockWarning, stacklevel=2)
    yaw = math.atan2(r[1, 0], r[0, 0])
    roll = math.atan2(r[2, 1], r[2, 2])
    return yaw, pitch, roll


def euler_zyx_to_matrix(yaw, pitch, roll):
    cz, sz = math.cos(yaw), math.sin(yaw)
    cy, sy = math.cos(pitch), math.sin(pitch)
    cx, sx = math.cos(roll), math.sin(roll)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz @ ry @ rx


def euler_mae(r_est, r_true):
    """Mean absolute Z-Y-X Euler angle difference in degrees, wrapped to [-180, 180]."""
    a = np.array(euler_zyx(r_est))
    b = np.array(euler_zyx(r_true))
    d = np.degrees(a - b)
    d = (d + 180.0) % 360.0 - 180.0
    return float(np.mean(np.abs(d)))


# -- octahedral group ----------------------------------------------------------

@lru_cache(maxsize=None)
def _octahedral():
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            m = np.zeros((3, 3))
            for i in range(3):
                m[i, perm[i]] = signs[i]
            if np.linalg.det(m) > 0:
                m.setflags(write=False)
                mats.append(m)
    return tuple(mats)


def octahedral_rotations():
    """The 24 rotations that map a cubic grid onto itself; identity first."""
    return list(_octahedral())


def rotate_grid(arr, r):
    """Rotate the last three axes of ``arr`` about the grid center by a signed permutation.

    Returns ``out`` with ``out[..., y] = arr[..., r.T @ y]`` in centered index
    coordinates, with no interpolation.
    """
    r = np.asarray(r)
    perm = [int(np.flatnonzero(r[i])[0]) for i in range(3)]
    signs = [r[i, perm[i]] for i in range(3)]
    if sorted(perm) != [0, 1, 2] or any(abs(s) != 1 for s in signs):
        raise ValueError("rotate_grid needs a signed permutation matrix")
    lead = arr.ndim - 3
    out = np.transpose(arr, list(range(lead)) + [lead + p for p in perm])
    flip = tuple(lead + i for i in range(3) if signs[i] < 0)
    if flip:
        out = np.flip(out, axis=flip)
    return np.ascontiguousarray(out)


# -- real Wigner matrices ------------------------------------------------------

@lru_cache(maxsize=None)
def _harmonic_projector(l):
    """Matrix C with Y_l(u) = C vec(u x ... x u) on unit vectors, rows traceless symmetric."""
    from .harmonics import real_sph_harm

    rng = np.random.default_rng(1234 + l)
    u = rng.standard_normal((8 * 3 ** l + 32, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    feats = np.ones((len(u), 1))
    for _ in range(l):
        feats = (feats[:, :, None] * u[:, None, :]).reshape(len(u), -1)
    y = real_sph_harm(l, u)
    coef, *_ = np.linalg.lstsq(feats, y, rcond=1e-10)
    c = coef.T
    c.setflags(write=False)
    return c, np.linalg.pinv(c)


def wigner_d_real(l, r):
    """Real orthogonal representation of ``r`` acting on order-``l`` harmonic coefficients.

    Satisfies Y_l(r u) = D Y_l(u), with components ordered m = -l..l.
    """
    if not 0 <= l <= 4:
        raise ValueError(f"order must be in 0..4, got {l}")
    r = np.asarray(r, dtype=np.float64)
    if not is_rotation(r):
        raise ValueError("wigner_d_real needs a rotation matrix")
    if l == 0:
        return np.ones((1, 1))
    c, c_pinv = _harmonic_projector(l)
    rk = r
    for _ in range(l - 1):
        rk = np.kron(rk, r)
    return c @ rk @ c_pinv


def field_representation(layout, r):
    """Block-diagonal matrix acting on a channel stack laid out as (order, multiplicity) blocks."""
    blocks = []
    for l, mult in layout:
        d = wigner_d_real(l, r)
        blocks.extend([d] * mult)
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i:i + k, i:i + k] = b
        i += k
    return out
