"""Volumes, file IO, rigid warping, synthetic phantoms, masks, and overlap metrics."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .autodiff.ops import _trilinear

DEFAULT_VOXEL_MM = 3.0


class DegenerateRangeWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class Volume:
    """Scalar grid with voxel size and origin in mm; world = voxel_size * index + origin."""

    data: np.ndarray
    voxel_size: tuple = (DEFAULT_VOXEL_MM,) * 3
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 8:
            raise ValueError(f"volume must be 3-D with extents >= 8, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains NaN or Inf")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise ValueError(f"voxel size must be three positive values, got {self.voxel_size}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def centered(cls, data, voxel_size=DEFAULT_VOXEL_MM):
        """Volume whose world origin sits at the grid center."""
        data = np.asarray(data)
        vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
        origin = -0.5 * (np.array(data.shape) - 1) * vs
        return cls(data, tuple(vs), tuple(origin))

    @property
    def shape(self):
        return self.data.shape

    def same_grid(self, other):
        return (self.shape == other.shape and self.voxel_size == other.voxel_size
                and self.origin == other.origin)

    def with_data(self, data):
        return Volume(data, self.voxel_size, self.origin)

    def axes_mm(self):
        """World coordinate of each index along the three axes."""
        return [np.arange(n) * v + o for n, v, o in zip(self.shape, self.voxel_size, self.origin)]

    def world_grid(self):
        return np.stack(np.meshgrid(*self.axes_mm(), indexing="ij"), axis=-1)

    def to_index(self, points):
        return (np.asarray(points) - np.array(self.origin)) / np.array(self.voxel_size)


# -- file format -------------------------------------------------------------

def _header_path(path):
    path = os.fspath(path)
    return path if path.endswith(".json") else path + ".json"


def save_volume(path, vol):
    """Write ``path.json`` header plus ``path.raw`` little-endian float32 payload."""
    header = _header_path(path)
    raw = header[:-5] + ".raw"
    payload = vol.data.astype("<f4")
    if not np.array_equal(payload.astype(np.float64), vol.data):
        warnings.warn(f"{raw}: values rounded to float32 on save", RuntimeWarning, stacklevel=2)
    meta = {"dims": list(vol.shape), "voxel_size_mm": list(vol.voxel_size),
            "origin_mm": list(vol.origin), "dtype": "f32le", "data": os.path.basename(raw)}
    with open(header, "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    with open(raw, "wb") as fh:
        fh.write(np.ascontiguousarray(payload).tobytes())
    return header


def load_volume(path):
    header = _header_path(path)
    with open(header) as fh:
        meta = json.load(fh)
    if meta.get("dtype") != "f32le":
        raise ValueError(f"{header}: unsupported dtype {meta.get('dtype')!r}")
    raw = os.path.join(os.path.dirname(header), meta.get("data", os.path.basename(header[:-5] + ".raw")))
    dims = tuple(int(d) for d in meta["dims"])
    arr = np.fromfile(raw, dtype="<f4")
    if arr.size != int(np.prod(dims)):
        raise ValueError(f"{raw}: expected {np.prod(dims)} values, found {arr.size}")
    return Volume(arr.reshape(dims).astype(np.float64), tuple(meta["voxel_size_mm"]), tuple(meta["origin_mm"]))


def to_float32(vol):
    """Round the volume so that it survives the float32 file format exactly."""
    return vol.with_data(vol.data.astype(np.float32).astype(np.float64))


# -- warping -----------------------------------------------------------------

def warp_volume(vol, t):
    """Resample so the output at x equals the input at T^-1(x); trilinear, zero outside."""
    if np.array_equal(t.rotation, np.eye(3)) and not np.any(t.translation):
        return vol.with_data(vol.data.copy())
    pts = t.inverse().apply(vol.world_grid().reshape(-1, 3))
    vals, _ = _trilinear(vol.data, vol.to_index(pts))
    return vol.with_data(vals.reshape(vol.shape))


def warp_mask(mask, t):
    """Warp a binary mask with trilinear weights and a 0.5 threshold."""
    return warp_volume(mask, t).data >= 0.5


# -- normalization and masks -------------------------------------------------

def percentile_range(data, low=1.0, high=99.0):
    """Percentiles taken as actual sample values, which makes normalization idempotent."""
    lo = np.percentile(data, low, method="lower")
    hi = np.percentile(data, high, method="higher")
    return float(lo), float(hi)


def apply_range(vol, lo, hi):
    if hi <= lo:
        warnings.warn("degenerate intensity range; returning zeros", DegenerateRangeWarning, stacklevel=2)
        return vol.with_data(np.zeros(vol.shape))
    return vol.with_data((np.clip(vol.data, lo, hi) - lo) / (hi - lo))


def percentile_normalize(vol, low=1.0, high=99.0):
    """Clamp to the [low, high] percentiles and rescale to [0, 1]."""
    return apply_range(vol, *percentile_range(vol.data, low, high))


def ball(radius):
    g = np.arange(-radius, radius + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= radius * radius


def make_mask(vol, threshold=0.05, dilate=4):
    """Support above ``threshold`` of the maximum, dilated by a ball of ``dilate`` voxels."""
    m = vol.data > threshold * vol.data.max() if vol.data.max() > 0 else np.zeros(vol.shape, bool)
    if dilate:
        m = ndimage.binary_dilation(m, structure=ball(dilate))
    return m


def dice(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# -- phantoms ----------------------------------------------------------------

@dataclass(frozen=True)
class Phantom:
    """Analytic object made of oriented Gaussian blobs or soft ellipsoids (world mm)."""

    kind: str
    centers: np.ndarray      # (n, 3)
    axes: np.ndarray         # (n, 3, 3) rows are principal directions
    radii: np.ndarray        # (n, 3)
    amplitudes: np.ndarray   # (n,)

    def moved(self, t):
        """The same object after the rigid motion ``t``."""
        return Phantom(self.kind, t.apply(self.centers), self.axes @ t.rotation.T, self.radii, self.amplitudes)

    def render(self, shape, voxel_size=DEFAULT_VOXEL_MM, chunk=8):
        vol = Volume.centered(np.zeros(shape), voxel_size)
        xs = vol.axes_mm()
        out = np.zeros(shape)
        for z0 in range(0, shape[0], chunk):
            pts = np.stack(np.meshgrid(xs[0][z0:z0 + chunk], xs[1], xs[2], indexing="ij"), axis=-1)
            acc = np.zeros(pts.shape[:3])
            for c, ax, r, a in zip(self.centers, self.axes, self.radii, self.amplitudes):
                q = np.sum(((pts - c) @ ax.T / r) ** 2, axis=-1)
                if self.kind == "blobs":
                    acc += a * np.exp(-0.5 * q)
                else:
                    acc += a / (1.0 + np.exp((np.sqrt(q) - 1.0) * 8.0))
            out[z0:z0 + chunk] = acc
        return vol.with_data(out)


def _draw_phantom(rng, size, voxel_size, kind):
    n = int(rng.integers(5, 16))
    extent = 0.5 * (size - 1) * voxel_size
    ball_r = 0.45 * extent
    centers = []
    while len(centers) < n:
        p = rng.uniform(-ball_r, ball_r, 3)
        if np.linalg.norm(p) <= ball_r:
            centers.append(p)
    axes = np.stack([geometry.random_rotation(rng) for _ in range(n)])
    lo, hi = (0.14, 0.3) if kind == "blobs" else (0.15, 0.35)
    radii = rng.uniform(lo, hi, (n, 3)) * extent
    amps = rng.uniform(0.5, 1.0, n)
    return Phantom(kind, np.array(centers), axes, radii, amps)


def max_octahedral_correlation(data):
    """Largest normalized correlation between the volume and its 23 non-trivial grid rotations."""
    a = data - data.mean()
    na = np.sqrt(np.sum(a * a))
    best = -1.0
    for r in geometry.octahedral_rotations()[1:]:
        b = geometry.rotate_grid(a, r)
        best = max(best, float(np.sum(a * b) / (na * na)))
    return best


@dataclass(frozen=True)
class Subject:
    """A phantom with its reference render, mask, and intensity mapping."""

    phantom: Phantom
    volume: Volume
    mask: np.ndarray
    intensity_range: tuple
    voxel_size: float

    def posed(self, t):
        """Analytic render under pose ``t`` and the reference mask warped by ``t``."""
        raw = self.phantom.moved(t).render(self.volume.shape, self.voxel_size)
        vol = to_float32(apply_range(raw, *self.intensity_range))
        mask_vol = self.volume.with_data(self.mask.astype(np.float64))
        return vol, warp_mask(mask_vol, t)


def make_subject(seed, size, kind="blobs", voxel_size=DEFAULT_VOXEL_MM, max_tries=50):
    if size < 16:
        raise ValueError(f"phantom size must be >= 16, got {size}")
    if kind not in ("blobs", "ellipsoids"):
        raise ValueError(f"unknown phantom kind {kind!r}")
    rng = np.random.default_rng(seed)
    shape = (size,) * 3
    for _ in range(max_tries):
        ph = _draw_phantom(rng, size, voxel_size, kind)
        raw = ph.render(shape, voxel_size)
        if max_octahedral_correlation(raw.data) < 0.99:
            break
    else:
        raise RuntimeError(f"no asymmetric phantom after {max_tries} draws")
    lo, hi = percentile_range(raw.data)
    vol = to_float32(apply_range(raw, lo, hi))
    return Subject(ph, vol, make_mask(vol), (lo, hi), float(voxel_size))


def make_phantom(seed, size, kind="blobs", voxel_size=DEFAULT_VOXEL_MM):
    """Normalized phantom volume and its dilated mask."""
    subj = make_subject(seed, size, kind, voxel_size)
    return subj.volume, subj.mask


pose_sample = geometry.pose_sample


def translation_voxels(t_mm, voxel_size):
    return float(np.linalg.norm(np.asarray(t_mm) / np.asarray(voxel_size)))


def relative_l2(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
