"""Pure-numpy conv3d kernels (slab-wise im2col + GEMM)."""

import numpy as np

_SLAB_BYTES = 64 * 2**20


def _slab_depth(ci, nt, H, W):
    per_plane = ci * nt * H * W * 8
    return max(1, _SLAB_BYTES // per_plane)


def _im2col(xp, z0, sz, offs, H, W):
    ci = xp.shape[0]
    col = np.empty((ci, len(offs), sz, H, W))
    for t, (a, b, c) in enumerate(offs):
        col[:, t] = xp[:, z0 + a:z0 + a + sz, b:b + H, c:c + W]
    return col.reshape(ci * len(offs), sz * H * W)


def conv3d(x, w, taps):
    ci, D, H, W = x.shape
    co, k = w.shape[0], w.shape[2]
    r = k // 2
    offs = np.argwhere(taps)
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    wf = np.ascontiguousarray(w.reshape(co, ci, k**3)[:, :, taps.ravel().astype(bool)].reshape(co, -1))
    out = np.zeros((co, D, H, W))
    if not len(offs):
        return out
    step = _slab_depth(ci, len(offs), H, W)
    for z0 in range(0, D, step):
        sz = min(step, D - z0)
        out[:, z0:z0 + sz] = (wf @ _im2col(xp, z0, sz, offs, H, W)).reshape(co, sz, H, W)
    return out


def conv3d_kernel_grad(x, g, k, taps):
    ci, D, H, W = x.shape
    co = g.shape[0]
    r = k // 2
    offs = np.argwhere(taps)
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    dw = np.zeros((co, ci, len(offs)))
    if len(offs):
        step = _slab_depth(ci, len(offs), H, W)
        for z0 in range(0, D, step):
            sz = min(step, D - z0)
            gs = np.ascontiguousarray(g[:, z0:z0 + sz]).reshape(co, -1)
            dw += (gs @ _im2col(xp, z0, sz, offs, H, W).T).reshape(co, ci, len(offs))
    full = np.zeros((co, ci, k**3))
    full[:, :, taps.ravel().astype(bool)] = dw
    return full.reshape(co, ci, k, k, k)
