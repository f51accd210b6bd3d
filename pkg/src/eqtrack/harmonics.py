"""Real spherical harmonics, Clebsch-Gordan intertwiners, and steerable kernel bases.

Real harmonics use the component order m = -l..l with sine terms for m < 0
and cosine terms for m > 0, and no Condon-Shortley phase, so the order-1
components are proportional to (y, z, x).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

MAX_ORDER = 4
SHELL_SIGMA = 0.6
NULL_TOL = 1e-12


def real_sph_harm(l, directions):
    """Orthonormal real harmonics of order ``l`` at unit vectors.

    ``directions`` has shape (3,) or (N, 3); returns (2l+1,) or (N, 2l+1).
    """
    if not 0 <= l <= MAX_ORDER:
        raise ValueError(f"order must be in 0..{MAX_ORDER}, got {l}")
    u = np.asarray(directions, dtype=np.float64)
    single = u.ndim == 1
    u = np.atleast_2d(u)
    n = np.linalg.norm(u, axis=1)
    if np.any(n < 1e-12):
        raise ValueError("direction has zero length")
    if np.any(np.abs(n - 1.0) > 1e-9):
        raise ValueError("directions must be unit vectors")
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    out = np.empty((len(u), 2 * l + 1))
    base = legendre.Legendre.basis(l)
    xy = x + 1j * y
    for m in range(l + 1):
        norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
        pm = base.deriv(m)(z) if m else base(z)
        if m == 0:
            out[:, l] = norm * pm
        else:
            w = xy ** m
            out[:, l + m] = math.sqrt(2) * norm * pm * w.real
            out[:, l - m] = math.sqrt(2) * norm * pm * w.imag
    return out[0] if single else out


def radial_profile(shell, radius, sigma=SHELL_SIGMA):
    """Gaussian shell centered at ``shell`` voxels."""
    r = np.asarray(radius, dtype=np.float64)
    return np.exp(-((r - shell) ** 2) / (2.0 * sigma * sigma))


# -- Clebsch-Gordan ------------------------------------------------------------

def cg_complex(j1, m1, j2, m2, j, m):
    """<j1 m1 j2 m2 | j m> for integer orders (Condon-Shortley convention)."""
    if m1 + m2 != m or not abs(j1 - j2) <= j <= j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m) > j:
        return 0.0
    f = math.factorial
    pre = (2 * j + 1) * f(j + j1 - j2) * f(j - j1 + j2) * f(j1 + j2 - j) / f(j1 + j2 + j + 1)
    pre *= f(j + m) * f(j - m) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2)
    total = 0.0
    for k in range(0, j1 + j2 - j + 1):
        dens = (k, j1 + j2 - j - k, j1 - m1 - k, j2 + m2 - k, j - j2 + m1 + k, j - j1 - m2 + k)
        if min(dens) < 0:
            continue
        d = 1
        for a in dens:
            d *= f(a)
        total += (-1) ** k / d
    return math.sqrt(pre) * total


@lru_cache(maxsize=None)
def _complex_to_real(l):
    """Unitary U with Y_real = U Y_complex (complex harmonics carry the Condon-Shortley phase)."""
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=np.complex128)
    s = 1 / math.sqrt(2)
    u[l, l] = 1.0
    for m in range(1, l + 1):
        u[l + m, l + m] = (-1) ** m * s
        u[l + m, l - m] = s
        u[l - m, l + m] = (-1) ** m * s / 1j
        u[l - m, l - m] = -s / 1j
    return u


def _selection_ok(l_in, l_out, j):
    return abs(l_in - l_out) <= j <= l_in + l_out


@lru_cache(maxsize=None)
def _cg_real_cached(l_in, l_out, j):
    c = np.zeros((2 * l_out + 1, 2 * l_in + 1, 2 * j + 1))
    for mo in range(-l_out, l_out + 1):
        for mi in range(-l_in, l_in + 1):
            for n in range(-j, j + 1):
                c[mo + l_out, mi + l_in, n + j] = cg_complex(j, n, l_in, mi, l_out, mo)
    uo, ui, uj = _complex_to_real(l_out), _complex_to_real(l_in), _complex_to_real(j)
    t = np.einsum("oa,abc,ib,nc->oin", uo, c, ui.conj(), uj.conj())
    re, im = np.abs(t.real).max(), np.abs(t.imag).max()
    t = t.real if re >= im else t.imag
    t = t / np.linalg.norm(t)
    t.setflags(write=False)
    return t, min(re, im)


def cg_real(l_in, l_out, j):
    """Real intertwiner T[o, i, n] from order-J (x) order-l_in to order-l_out, unit Frobenius norm.

    Satisfies sum_n D_J[n, n'] T[:, :, n] = D_out T[:, :, n'] D_in^T.
    """
    if not _selection_ok(l_in, l_out, j):
        raise ValueError(f"selection rule violated: J={j} for l_in={l_in}, l_out={l_out}")
    return _cg_real_cached(l_in, l_out, j)[0]


def cg_real_residual(l_in, l_out, j):
    """Largest discarded imaginary-or-real component before normalization."""
    if not _selection_ok(l_in, l_out, j):
        raise ValueError(f"selection rule violated: J={j} for l_in={l_in}, l_out={l_out}")
    return _cg_real_cached(l_in, l_out, j)[1]


# -- kernel basis --------------------------------------------------------------

@dataclass(frozen=True)
class KernelBasis:
    """One sampled basis kernel of type l_in -> l_out."""

    l_in: int
    l_out: int
    j: int
    shell: int
    samples: np.ndarray  # (2 l_out + 1, 2 l_in + 1, k, k, k)


def kernel_offsets(k):
    r = k // 2
    g = np.arange(k, dtype=np.float64) - r
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)


def build_kernel_basis(l_in, l_out, k):
    """Steerable basis kernels kappa(v) = phi_shell(|v|) sum_n Y_J,n(v/|v|) T[:, :, n]."""
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel width must be odd and positive, got {k}")
    r = k // 2
    v = kernel_offsets(k).reshape(-1, 3)
    rad = np.linalg.norm(v, axis=1)
    inside = rad <= r + 0.5
    center = rad == 0
    dirs = np.where(center[:, None], np.array([0.0, 0.0, 1.0]), v / np.where(center, 1.0, rad)[:, None])
    out = []
    for j in range(abs(l_in - l_out), min(l_in + l_out, MAX_ORDER) + 1):
        t = cg_real(l_in, l_out, j)
        y = real_sph_harm(j, dirs)
        if j > 0:
            y[center] = 0.0
        ang = np.einsum("pn,oin->oip", y, t)
        for s in range(r + 1):
            kern = ang * np.where(inside, radial_profile(s, rad), 0.0)
            if np.abs(kern).max() < NULL_TOL:
                continue
            kern = kern / np.linalg.norm(kern)
            kern = kern.reshape(2 * l_out + 1, 2 * l_in + 1, k, k, k)
            kern.setflags(write=False)
            out.append(KernelBasis(l_in, l_out, j, s, kern))
    return out


def basis_hash(bases):
    """sha256 over the exact bytes of a list of basis kernels."""
    h = hashlib.sha256()
    for b in bases:
        h.update(f"{b.l_in},{b.l_out},{b.j},{b.shell},{b.samples.shape}".encode())
        h.update(np.ascontiguousarray(b.samples).tobytes())
    return h.hexdigest()
