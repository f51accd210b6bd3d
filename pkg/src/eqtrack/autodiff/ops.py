"""Differentiable primitives.

Each op computes its forward value with numpy and, when a tape is active and
an input requires gradients, records a vector-Jacobian product closure.
"""

from __future__ import annotations

import warnings

import numpy as np

from .. import _kernels
from .tensor import Tensor, as_tensor, current_tape

ARCCOS_CLAMP = 1e-7
SVD_GAP = 1e-8
NORM_EPS = 1e-12


class DegenerateSVDWarning(RuntimeWarning):
    """Two singular values coincide; the SVD gradient was regularized."""


def _emit(op, inputs, out_arrays, vjp):
    outs = tuple(Tensor._wrap(a) for a in out_arrays)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, outs, vjp)
    return outs


def _emit1(op, inputs, out, vjp):
    return _emit(op, inputs, (out,), vjp)[0]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit1("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit1("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit1("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _emit1("div", (a, b), out, vjp)


def neg(a):
    a = as_tensor(a)
    return _emit1("neg", (a,), -a.data, lambda g: (-g,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _emit1("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _emit1("sqrt", (a,), out, lambda g: (g / (2.0 * out),))


def arccos(a):
    """arccos with the input clamped to [-1 + 1e-7, 1 - 1e-7] in both passes."""
    a = as_tensor(a)
    c = np.clip(a.data, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    return _emit1("arccos", (a,), np.arccos(c), lambda g: (-g / np.sqrt(1.0 - c * c),))


def norm(a, axis=None, keepdims=False):
    """Euclidean norm; the gradient at the origin is taken as zero."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (g * np.where(n > 0, a.data / safe, 0.0),)

    out = n if keepdims else (n.reshape(()) if axis is None else np.squeeze(n, axis=axis))
    return _emit1("norm", (a,), out, vjp)


# -- shape and reduction ---------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _emit1("sum", (a,), out, vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _emit1("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit1("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit1("getitem", (a,), a.data[idx], vjp)


def stack(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit1("stack", tensors, out, vjp)


def concatenate(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit1("concatenate", tensors, out, vjp)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D; reshape vectors explicitly")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _emit1("matmul", (a, b), a.data @ b.data, vjp)


def einsum(subscripts, *operands):
    """Explicit-output einsum (``"ij,jk->ik"``) without repeated indices per operand."""
    operands = tuple(as_tensor(t) for t in operands)
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError("einsum subscripts do not match operand count")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in einsum operand {s!r}")
    out = np.einsum(subscripts, *(t.data for t in operands), optimize=True)

    def vjp(g):
        grads = []
        for i, (s, t) in enumerate(zip(in_subs, operands)):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [(in_subs[j], operands[j].data) for j in range(len(operands)) if j != i]
            seen = set(out_subs).union(*[set(o) for o, _ in others])
            kept = "".join(c for c in s if c in seen)
            spec = ",".join([out_subs] + [o for o, _ in others]) + "->" + kept
            gi = np.einsum(spec, g, *(d for _, d in others), optimize=True)
            if kept != s:
                shape = [t.shape[s.index(c)] if c in kept else 1 for c in s]
                order = [kept.index(c) for c in s if c in kept]
                gi = np.broadcast_to(np.transpose(gi, order).reshape(shape), t.shape)
            grads.append(gi)
        return tuple(grads)

    return _emit1("einsum", operands, out, vjp)


# -- convolution -----------------------------------------------------------

def conv3d(x, w, support=None):
    """Zero-padded "same" cross-correlation, x[C_in,D,H,W] with w[C_out,C_in,k,k,k].

    ``support`` is an optional (k, k, k) mask for kernels that are structurally
    zero elsewhere; the kernel gradient is then reported only on the support.
    """
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[2] if w.ndim == 5 else 0
    if support is not None:
        support = np.asarray(support, dtype=bool)
        if support.shape != (k, k, k):
            raise ValueError(f"support mask must have shape {(k, k, k)}")
        if np.any(w.data[:, :, ~support]):
            raise ValueError("kernel has nonzero entries outside its declared support")
    out = _kernels.conv3d(x.data, w.data)

    def vjp(g):
        gx = _kernels.conv3d_input_grad(g, w.data) if x.requires_grad else None
        gw = _kernels.conv3d_kernel_grad(x.data, g, k, support) if w.requires_grad else None
        return (gx, gw)

    return _emit1("conv3d", (x, w), out, vjp)


# -- linear algebra --------------------------------------------------------

def svd3(m):
    """SVD of a 3x3 matrix: returns (U, S, V) with m = U diag(S) V^T, S descending."""
    m = as_tensor(m)
    if m.shape != (3, 3):
        raise ValueError(f"svd3 expects a 3x3 matrix, got {m.shape}")
    u, s, vt = np.linalg.svd(m.data)
    v = vt.T

    def vjp(gu, gs, gv):
        s2 = s * s
        d = s2[None, :] - s2[:, None]
        close = np.abs(s[None, :] - s[:, None]) < SVD_GAP
        np.fill_diagonal(close, False)
        if close.any():
            warnings.warn("singular values coincide within 1e-8; SVD gradient regularized",
                          DegenerateSVDWarning, stacklevel=2)
            sign = np.where(d >= 0, 1.0, -1.0)
            d = np.where(close, sign * np.maximum(np.abs(d), SVD_GAP), d)
        np.fill_diagonal(d, 1.0)
        f = 1.0 / d
        np.fill_diagonal(f, 0.0)
        j = f * (u.T @ gu - gu.T @ u)
        kk = f * (v.T @ gv - gv.T @ v)
        sm = np.diag(s)
        inner = j @ sm + np.diag(gs) + sm @ kk
        return (u @ inner @ v.T,)

    return _emit("svd3", (m,), (u, s, v), vjp)


# -- fused field nonlinearity ----------------------------------------------

def field_nonlinearity(x, layout, bias):
    """Scalar ReLU on order-0 fields, norm-ReLU on higher orders.

    ``layout`` is a sequence of (order, multiplicity) blocks in channel order;
    ``bias`` holds one value per field of order >= 1, in the same order. For a
    field v the norm-ReLU is v * relu(|v| + b) / max(|v|, 1e-12).
    """
    x, bias = as_tensor(x), as_tensor(bias)
    spatial = x.shape[1:]
    out = np.empty(x.shape)
    saved = []
    c0 = 0
    b0 = 0
    for l, mult in layout:
        dim = 2 * l + 1
        c1 = c0 + mult * dim
        block = x.data[c0:c1]
        if l == 0:
            mask = block > 0
            out[c0:c1] = np.where(mask, block, 0.0)
            saved.append((l, c0, c1, mask))
        else:
            v = block.reshape((mult, dim) + spatial)
            b = bias.data[b0:b0 + mult].reshape((mult,) + (1,) * len(spatial))
            n = np.sqrt(np.sum(v * v, axis=1))
            ng = np.maximum(n, NORM_EPS)
            pre = n + b
            act = pre > 0
            scale = np.where(act, pre, 0.0) / ng
            out[c0:c1] = (v * scale[:, None]).reshape(block.shape)
            saved.append((l, c0, c1, (b0, mult, ng, act, scale, n > NORM_EPS)))
            b0 += mult
        c0 = c1
    if c0 != x.shape[0]:
        raise ValueError(f"layout covers {c0} channels, input has {x.shape[0]}")

    def vjp(g):
        gx = np.empty(x.shape)
        gb = np.zeros(bias.shape)
        for l, c0, c1, info in saved:
            if l == 0:
                gx[c0:c1] = g[c0:c1] * info
                continue
            b0, mult, ng, act, scale, live = info
            dim = 2 * l + 1
            v = x.data[c0:c1].reshape((mult, dim) + spatial)
            gv = g[c0:c1].reshape(v.shape)
            gs = np.sum(gv * v, axis=1)
            ds_dn = (act * ng - np.where(live, scale * ng, 0.0)) / (ng * ng)
            gn = gs * ds_dn
            gx[c0:c1] = (gv * scale[:, None] + v * (gn / ng)[:, None]).reshape((c1 - c0,) + spatial)
            gb[b0:b0 + mult] = np.sum((gs * act / ng).reshape(mult, -1), axis=1)
        return (gx, gb)

    return _emit1("field_nonlinearity", (x, bias), out, vjp)


# -- resampling ------------------------------------------------------------

def sample_trilinear(volume, coords):
    """Trilinear lookup of a fixed volume at fractional index coordinates.

    ``coords`` is (N, 3) in index units; samples outside the grid see zeros.
    Differentiable with respect to ``coords`` only.
    """
    vol = np.asarray(volume.data if isinstance(volume, Tensor) else volume, dtype=np.float64)
    coords = as_tensor(coords)
    values, grad = _trilinear(vol, coords.data, need_grad=coords.requires_grad)

    def vjp(g):
        return (g[:, None] * grad,)

    return _emit1("sample_trilinear", (coords,), values, vjp)


def _trilinear(vol, pts, need_grad=False):
    shape = np.array(vol.shape)
    base = np.floor(pts)
    frac = pts - base
    base = base.astype(np.int64)
    values = np.zeros(len(pts))
    grad = np.zeros((len(pts), 3)) if need_grad else None
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + offs
        inside = np.all((idx >= 0) & (idx < shape), axis=1)
        vals = np.zeros(len(pts))
        ii = idx[inside]
        vals[inside] = vol[ii[:, 0], ii[:, 1], ii[:, 2]]
        w = np.where(offs == 1, frac, 1.0 - frac)
        values += vals * (w[:, 0] * w[:, 1] * w[:, 2])
        if need_grad:
            sgn = np.where(offs == 1, 1.0, -1.0)
            grad[:, 0] += vals * sgn[0] * w[:, 1] * w[:, 2]
            grad[:, 1] += vals * w[:, 0] * sgn[1] * w[:, 2]
            grad[:, 2] += vals * w[:, 0] * w[:, 1] * sgn[2]
    return values, grad
