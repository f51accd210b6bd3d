# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled conv3d kernels. Callers hand over packed, padded buffers."""

cdef extern from "conv3d_impl.h":
    int EQ_CB
    int EQ_CIB
    int EQ_VL
    void eq_conv3d_forward_16(const double *inp, const double *wpk, double *out,
                              int D, int H, int Wr, int Hp, int Wp,
                              const unsigned char *taps, int ci, int cop, int k) nogil
    void eq_conv3d_forward_28(const double *inp, const double *wpk, double *out,
                              int D, int H, int Wr, int Hp, int Wp,
                              const unsigned char *taps, int ci, int cop, int k) nogil
    void eq_conv3d_kernel_grad(const double *inp, const double *g, double *dw,
                               int D, int H, int W, int Dp, int Hp, int Wp,
                               const unsigned char *taps, int cip, int cop, int k) nogil

OUT_BLOCKS = (16, 28)
X_BLOCK = EQ_VL
GRAD_CO_BLOCK = EQ_CB
GRAD_CI_BLOCK = EQ_CIB


def forward(const double[:, :, :, ::1] inp, const double[:, :, :, :, :, ::1] wpk,
            double[:, :, :, ::1] out, const unsigned char[:, :, ::1] taps):
    """inp (Dp, Hp, ci, Wp), wpk (cop/OB, k, k, k, ci, OB), out (D, H, cop, Wr), taps (k, k, k)."""
    cdef int D = out.shape[0], H = out.shape[1], cop = out.shape[2], Wr = out.shape[3]
    cdef int Hp = inp.shape[1], ci = inp.shape[2], Wp = inp.shape[3]
    cdef int k = wpk.shape[1], ob = wpk.shape[5]
    if taps.shape[0] != k or taps.shape[1] != k or taps.shape[2] != k:
        raise ValueError("tap mask must be (k, k, k)")
    if wpk.shape[4] != ci or wpk.shape[0] * ob != cop:
        raise ValueError("packed kernel does not match buffers")
    if inp.shape[0] < D + k - 1 or Hp < H + k - 1 or Wp < Wr + k - 1 or Wr % EQ_VL:
        raise ValueError("input buffer too small for output")
    if ob == 16:
        with nogil:
            eq_conv3d_forward_16(&inp[0, 0, 0, 0], &wpk[0, 0, 0, 0, 0, 0], &out[0, 0, 0, 0],
                                 D, H, Wr, Hp, Wp, &taps[0, 0, 0], ci, cop, k)
    elif ob == 28:
        with nogil:
            eq_conv3d_forward_28(&inp[0, 0, 0, 0], &wpk[0, 0, 0, 0, 0, 0], &out[0, 0, 0, 0],
                                 D, H, Wr, Hp, Wp, &taps[0, 0, 0], ci, cop, k)
    else:
        raise ValueError(f"unsupported output block {ob}")


def kernel_grad(const double[:, :, :, :, ::1] inp, const double[:, :, :, :, ::1] g,
                double[:, :, :, :, :, ::1] dw, const unsigned char[:, :, ::1] taps):
    """inp (cip/CIB, Dp, Hp, Wp, CIB), g (cop/CB, D, H, W, CB), dw (cop/CB, k, k, k, cip, CB), taps (k, k, k)."""
    cdef int D = g.shape[1], H = g.shape[2], W = g.shape[3]
    cdef int Dp = inp.shape[1], Hp = inp.shape[2], Wp = inp.shape[3]
    cdef int cip = inp.shape[0] * inp.shape[4], cop = g.shape[0] * g.shape[4]
    cdef int k = dw.shape[1]
    if taps.shape[0] != k or taps.shape[1] != k or taps.shape[2] != k:
        raise ValueError("tap mask must be (k, k, k)")
    if inp.shape[4] != EQ_CIB or g.shape[4] != EQ_CB or dw.shape[5] != EQ_CB:
        raise ValueError("buffers must be blocked by GRAD_CI_BLOCK and GRAD_CO_BLOCK")
    if dw.shape[4] != cip or dw.shape[0] != g.shape[0]:
        raise ValueError("packed gradient does not match buffers")
    if Dp < D + k - 1 or Hp < H + k - 1 or Wp < W + k - 1:
        raise ValueError("input buffer too small for gradient")
    with nogil:
        eq_conv3d_kernel_grad(&inp[0, 0, 0, 0, 0], &g[0, 0, 0, 0, 0], &dw[0, 0, 0, 0, 0, 0],
                              D, H, W, Dp, Hp, Wp, &taps[0, 0, 0], cip, cop, k)
