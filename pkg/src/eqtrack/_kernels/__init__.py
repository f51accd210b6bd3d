"""Hot convolution kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``EQTRACK_BACKEND=numpy``
to force the fallback. All functions take channels-first float64 arrays and
implement zero-padded "same" cross-correlation with odd kernel width::

    out[o, x] = sum_{c, d} w[o, c, d] * x[c, x + d - k // 2]

Kernel offsets whose weights are all zero are skipped in the forward pass.
The kernel gradient accepts an explicit support mask and is zero outside it.
"""

import os

import numpy as np

from . import _reference

try:
    from . import _native
except ImportError:  # pragma: no cover - depends on the build
    _native = None

__all__ = ["BACKEND", "available_backends", "conv3d", "conv3d_input_grad", "conv3d_kernel_grad"]


def _roundup(n, m):
    return -(-n // m) * m


def _native_conv3d(x, w, taps):
    ci, D, H, W = x.shape
    co, k = w.shape[0], w.shape[2]
    r = k // 2
    ob = min(_native.OUT_BLOCKS, key=lambda b: (_roundup(co, b), -b))
    cop = _roundup(co, ob)
    wr = _roundup(W, _native.X_BLOCK)
    xp = np.zeros((D + 2 * r, H + 2 * r, ci, wr + 2 * r))
    xp[r:r + D, r:r + H, :, r:r + W] = x.transpose(1, 2, 0, 3)
    wp = np.zeros((cop, ci, k, k, k))
    wp[:co] = w
    wpk = np.ascontiguousarray(wp.reshape(cop // ob, ob, ci, k, k, k).transpose(0, 3, 4, 5, 2, 1))
    out = np.zeros((D, H, cop, wr))
    _native.forward(xp, wpk, out, taps)
    return np.ascontiguousarray(out[:, :, :co, :W].transpose(2, 0, 1, 3))


def _native_kernel_grad(x, g, k, taps):
    ci, D, H, W = x.shape
    co = g.shape[0]
    r = k // 2
    cb, ib = _native.GRAD_CO_BLOCK, _native.GRAD_CI_BLOCK
    cop, cip = _roundup(co, cb), _roundup(ci, ib)
    xp = np.zeros((cip, D + 2 * r, H + 2 * r, W + 2 * r))
    xp[:ci, r:r + D, r:r + H, r:r + W] = x
    xp = np.ascontiguousarray(xp.reshape(cip // ib, ib, *xp.shape[1:]).transpose(0, 2, 3, 4, 1))
    gl = np.zeros((cop, D, H, W))
    gl[:co] = g
    gl = np.ascontiguousarray(gl.reshape(cop // cb, cb, D, H, W).transpose(0, 2, 3, 4, 1))
    dw = np.zeros((cop // cb, k, k, k, cip, cb))
    _native.kernel_grad(xp, gl, dw, taps)
    dw = dw.transpose(0, 5, 4, 1, 2, 3).reshape(cop, cip, k, k, k)
    return np.ascontiguousarray(dw[:co, :ci])


_IMPLS = {"numpy": (_reference.conv3d, _reference.conv3d_kernel_grad)}
if _native is not None:
    _IMPLS["native"] = (_native_conv3d, _native_kernel_grad)


def available_backends():
    return sorted(_IMPLS)


def _select():
    wanted = os.environ.get("EQTRACK_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in _IMPLS:
            raise ImportError(f"EQTRACK_BACKEND={wanted!r} unavailable; have {available_backends()}")
        return wanted
    return "native" if "native" in _IMPLS else "numpy"


BACKEND = _select()


def _check(x, w):
    if x.ndim != 4 or w.ndim != 5:
        raise ValueError(f"conv3d expects x[C,D,H,W] and w[O,C,k,k,k], got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"kernel expects {w.shape[1]} input channels, input has {x.shape[0]}")
    k = w.shape[2]
    if w.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd width, got {w.shape[2:]}")


def _support(k, support):
    if support is None:
        return np.ones((k, k, k), dtype=np.uint8)
    s = np.ascontiguousarray(support, dtype=np.uint8)
    if s.shape != (k, k, k):
        raise ValueError(f"support mask must have shape {(k, k, k)}, got {s.shape}")
    return s


def conv3d(x, w, backend=None):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    _check(x, w)
    taps = np.ascontiguousarray(np.any(w != 0, axis=(0, 1)), dtype=np.uint8)
    return _IMPLS[backend or BACKEND][0](x, w, taps)


def conv3d_input_grad(g, w, backend=None):
    """Adjoint of :func:`conv3d` with respect to its input."""
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return conv3d(g, wt, backend=backend)


def conv3d_kernel_grad(x, g, k, support=None, backend=None):
    """Adjoint of :func:`conv3d` with respect to its kernel, restricted to ``support``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if x.ndim != 4 or g.ndim != 4 or x.shape[1:] != g.shape[1:]:
        raise ValueError(f"input {x.shape} and output gradient {g.shape} do not match")
    return _IMPLS[backend or BACKEND][1](x, g, k, _support(k, support))
