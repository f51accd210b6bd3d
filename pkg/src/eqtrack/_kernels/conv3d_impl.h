/*
 * Register-blocked direct 3D cross-correlation kernels (float64).
 *
 * Every output element is produced by the same instruction sequence no
 * matter where it sits on the grid, so results are bit-identical under
 * integer shifts of the input. Reductions run in a fixed order.
 */
#ifndef EQTRACK_CONV3D_IMPL_H
#define EQTRACK_CONV3D_IMPL_H

#include <stddef.h>

#define EQ_VL 8
#ifndef EQ_NCV
#define EQ_NCV 2
#endif
#define EQ_CB (EQ_VL * EQ_NCV)
#ifndef EQ_CIB
#define EQ_CIB 12
#endif

typedef double eq_v8d __attribute__((vector_size(64)));

typedef double eq_v8du __attribute__((vector_size(64), aligned(8), may_alias));

static inline eq_v8d eq_load(const double *p)
{
    return *(const eq_v8du *)p;
}

static inline void eq_store(double *p, eq_v8d v)
{
    *(eq_v8du *)p = v;
}

static inline eq_v8d eq_splat(double a)
{
    eq_v8d v = {a, a, a, a, a, a, a, a};
    return v;
}

/*
 * out[z, y, o, x] += sum_{d, c} in[z + dz, y + dy, c, x + dx] * w[d, c, o]
 *   in   (Dp, Hp, ci, Wp)             zero-padded, Wp >= Wr + k - 1
 *   wpk  (cop / OB, k, k, k, ci, OB)  packed kernel
 *   out  (D, H, cop, Wr)              Wr % 8 == 0
 *   taps (k, k, k)                    nonzero where the kernel may be nonzero
 * Output channels are register-blocked OB at a time against one vector of
 * 8 consecutive voxels; weights are broadcast.
 */
#define EQ_DEFINE_FORWARD(OB)                                                           \
static void eq_conv3d_forward_##OB(const double *in, const double *wpk, double *out,    \
                                   int D, int H, int Wr, int Hp, int Wp,                \
                                   const unsigned char *taps,                           \
                                   int ci, int cop, int k)                              \
{                                                                                       \
    const int nob = cop / OB;                                                           \
    const size_t kk = (size_t)k * k;                                                    \
    const size_t row = (size_t)ci * Wp;                                                 \
    for (int ob = 0; ob < nob; ++ob) {                                                  \
        for (int dz = 0; dz < k; ++dz) {                                                \
            const double *wslab = wpk + ((size_t)ob * k * kk + (size_t)dz * kk) * ci * OB; \
            for (int z = 0; z < D; ++z) {                                               \
                for (int y = 0; y < H; ++y) {                                           \
                    for (int x0 = 0; x0 < Wr; x0 += EQ_VL) {                            \
                        double *o = out + (((size_t)z * H + y) * cop + (size_t)ob * OB) * Wr + x0; \
                        eq_v8d acc[OB];                                                 \
                        for (int j = 0; j < OB; ++j)                                    \
                            acc[j] = eq_load(o + (size_t)j * Wr);                       \
                        for (int dy = 0; dy < k; ++dy) {                                \
                            const double *irow = in + ((size_t)(z + dz) * Hp + (y + dy)) * row + x0; \
                            const unsigned char *trow = taps + ((size_t)dz * k + dy) * k; \
                            for (int dx = 0; dx < k; ++dx) {                            \
                                if (!trow[dx])                                          \
                                    continue;                                           \
                                const double *wp = wslab + ((size_t)dy * k + dx) * ci * OB; \
                                for (int c = 0; c < ci; ++c) {                          \
                                    const eq_v8d iv = eq_load(irow + (size_t)c * Wp + dx); \
                                    const double *wc = wp + (size_t)c * OB;             \
                                    _Pragma("GCC unroll 32")                            \
                                    for (int j = 0; j < OB; ++j)                        \
                                        acc[j] += eq_splat(wc[j]) * iv;                 \
                                }                                                       \
                            }                                                           \
                        }                                                               \
                        for (int j = 0; j < OB; ++j)                                    \
                            eq_store(o + (size_t)j * Wr, acc[j]);                       \
                    }                                                                   \
                }                                                                       \
            }                                                                           \
        }                                                                               \
    }                                                                                   \
}

EQ_DEFINE_FORWARD(16)
EQ_DEFINE_FORWARD(28)

/*
 * dw[d, c, o] += sum_x in[x + d, c] * g[x, o]
 *   in  (cip / CIB, Dp, Hp, Wp, CIB)  zero-padded, ci-blocked
 *   g   (cop / CB, D, H, W, CB)       co-blocked
 *   dw  (cop / CB, k, k, k, cip, CB)  co-blocked, CB = 8 * NCV
 *   taps (k, k, k)                    offsets outside the support are skipped
 * A (co block, ci block, z) step reads one g plane and k input planes, which
 * stay in L2 while every tap sweeps the plane.
 */
static void eq_conv3d_kernel_grad(const double *in, const double *g, double *dw,
                                  int D, int H, int W, int Dp, int Hp, int Wp,
                                  const unsigned char *taps, int cip, int cop, int k)
{
    const int ncb = cop / EQ_CB, ncib = cip / EQ_CIB;
    const size_t kk = (size_t)k * k;
    for (int cb = 0; cb < ncb; ++cb) {
        for (int ib = 0; ib < ncib; ++ib) {
            const double *gb = g + (size_t)cb * D * H * W * EQ_CB;
            const double *inb = in + (size_t)ib * Dp * Hp * Wp * EQ_CIB;
            for (int z = 0; z < D; ++z) {
                for (int dz = 0; dz < k; ++dz) {
                    for (int dy = 0; dy < k; ++dy) {
                        for (int dx = 0; dx < k; ++dx) {
                            const size_t off = (size_t)dz * kk + (size_t)dy * k + dx;
                            if (!taps[off])
                                continue;
                            double *dp = dw + (((size_t)cb * k * kk + off) * cip + (size_t)ib * EQ_CIB) * EQ_CB;
                            for (int y = 0; y < H; ++y) {
                                /* accumulators live across one row only, so they stay in registers */
                                eq_v8d acc[EQ_CIB * EQ_NCV];
                                for (int j = 0; j < EQ_CIB; ++j)
                                    for (int n = 0; n < EQ_NCV; ++n)
                                        acc[j * EQ_NCV + n] = eq_load(dp + (size_t)j * EQ_CB + n * EQ_VL);
                                const double *gp = gb + ((size_t)z * H + y) * W * EQ_CB;
                                const double *ip = inb + (((size_t)(z + dz) * Hp + (y + dy)) * Wp + dx) * EQ_CIB;
                                for (int x = 0; x < W; ++x) {
                                    eq_v8d gv[EQ_NCV];
                                    _Pragma("GCC unroll 8") for (int n = 0; n < EQ_NCV; ++n)
                                        gv[n] = eq_load(gp + (size_t)x * EQ_CB + n * EQ_VL);
                                    const double *ipx = ip + (size_t)x * EQ_CIB;
                                    _Pragma("GCC unroll 64") for (int m = 0; m < EQ_CIB * EQ_NCV; ++m)
                                        acc[m] += eq_splat(ipx[m / EQ_NCV]) * gv[m % EQ_NCV];
                                }
                                for (int j = 0; j < EQ_CIB; ++j)
                                    for (int n = 0; n < EQ_NCV; ++n)
                                        eq_store(dp + (size_t)j * EQ_CB + n * EQ_VL, acc[j * EQ_NCV + n]);
                            }
                        }
                    }
                }
            }
        }
    }
}

#endif
