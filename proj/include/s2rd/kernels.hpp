#ifndef S2RD_KERNELS_HPP
#define S2RD_KERNELS_HPP

#include <cmath>
#include <cstdint>

// Dense kernels backing the tensor engine, parallelized with OpenMP. Parallel
// loops only ever split across independent output elements and each element is
// accumulated sequentially, so results do not depend on the thread count.
// kernels_ref.hpp carries an independently written serial implementation of
// the same contracts; tests compare the two and tools/bench_kernels times them.

namespace s2rd::kernels {

inline std::int64_t conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// y[M,N] = a op b with optional transposes; a is MxK (KxM if ta), b is KxN
// (NxK if tb). accumulate adds into y instead of overwriting. Rows of y are
// owned by one thread each; per-element accumulation order is fixed.
template <typename T>
void matmul(const T* a, const T* b, T* y, int M, int K, int N, bool ta, bool tb,
            bool accumulate) {
    if (!tb) {
        // k-outer saxpy form: b rows stream contiguously
#pragma omp parallel for schedule(static)
        for (int i = 0; i < M; ++i) {
            T* yr = y + static_cast<std::int64_t>(i) * N;
            if (!accumulate)
                for (int j = 0; j < N; ++j) yr[j] = T(0);
            for (int k = 0; k < K; ++k) {
                const T av = ta ? a[static_cast<std::int64_t>(k) * M + i]
                               : a[static_cast<std::int64_t>(i) * K + k];
                const T* br = b + static_cast<std::int64_t>(k) * N;
                for (int j = 0; j < N; ++j) yr[j] += av * br[j];
            }
        }
        return;
    }
#pragma omp parallel for schedule(static)
    for (int i = 0; i < M; ++i) {
        T* yr = y + static_cast<std::int64_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* bp = b + static_cast<std::int64_t>(j) * K;  // contiguous over k
            T acc = T(0);
            if (!ta) {
                const T* ap = a + static_cast<std::int64_t>(i) * K;
                for (int k = 0; k < K; ++k) acc += ap[k] * bp[k];
            } else {
                for (int k = 0; k < K; ++k) acc += a[static_cast<std::int64_t>(k) * M + i] * bp[k];
            }
            if (accumulate)
                yr[j] += acc;
            else
                yr[j] = acc;
        }
    }
}

namespace detail {

// valid ox range for a given kernel column: 0 <= ox*stride - pad + kx < W
inline void ox_range(int W, int kx, int stride, int pad, int OW, int* lo, int* hi) {
    int l = 0;
    const int num = pad - kx;
    if (num > 0) l = (num + stride - 1) / stride;
    int h = (W - 1 - kx + pad) / stride;
    if (h > OW - 1) h = OW - 1;
    *lo = l;
    *hi = h;  // inclusive; empty when hi < lo
}

}  // namespace detail

// Row-accumulation form: for each (c,ky,kx) the kernel tap is swept along the
// output row, which vectorizes; each output element still receives its terms
// in the fixed (c,ky,kx) order.
template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int N, int C, int H, int W,
                int OC, int KH, int KW, int stride, int pad, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < OC; ++oc) {
            const T* xn = x + static_cast<std::int64_t>(n) * C * H * W;
            const T* woc = w + static_cast<std::int64_t>(oc) * C * KH * KW;
            T* yp = y + (static_cast<std::int64_t>(n) * OC + oc) * OH * OW;
            const T b0 = bias ? bias[oc] : T(0);
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) yp[i] = b0;
            for (int c = 0; c < C; ++c) {
                const T* xc = xn + static_cast<std::int64_t>(c) * H * W;
                const T* wc = woc + static_cast<std::int64_t>(c) * KH * KW;
                for (int ky = 0; ky < KH; ++ky) {
                    for (int kx = 0; kx < KW; ++kx) {
                        const T wv = wc[ky * KW + kx];
                        int lo, hi;
                        detail::ox_range(W, kx, stride, pad, OW, &lo, &hi);
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            const T* xr = xc + static_cast<std::int64_t>(iy) * W + kx - pad;
                            T* yr = yp + static_cast<std::int64_t>(oy) * OW;
                            if (stride == 1) {
                                for (int ox = lo; ox <= hi; ++ox) yr[ox] += wv * xr[ox];
                            } else {
                                for (int ox = lo; ox <= hi; ++ox)
                                    yr[ox] += wv * xr[static_cast<std::int64_t>(ox) * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Input gradient scattered back along rows; each (n,c) plane is owned by one
// thread so writes never race.
template <typename T>
void conv2d_bwd_input(const T* gy, const T* w, T* gx, int N, int C, int H, int W, int OC,
                      int KH, int KW, int stride, int pad, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* gyn = gy + static_cast<std::int64_t>(n) * OC * OH * OW;
            T* gxp = gx + (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int oc = 0; oc < OC; ++oc) {
                const T* gyc = gyn + static_cast<std::int64_t>(oc) * OH * OW;
                const T* woc = w + (static_cast<std::int64_t>(oc) * C + c) * KH * KW;
                for (int ky = 0; ky < KH; ++ky) {
                    for (int kx = 0; kx < KW; ++kx) {
                        const T wv = woc[ky * KW + kx];
                        int lo, hi;
                        detail::ox_range(W, kx, stride, pad, OW, &lo, &hi);
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            T* gxr = gxp + static_cast<std::int64_t>(iy) * W + kx - pad;
                            const T* gyr = gyc + static_cast<std::int64_t>(oy) * OW;
                            if (stride == 1) {
                                for (int ox = lo; ox <= hi; ++ox) gxr[ox] += wv * gyr[ox];
                            } else {
                                for (int ox = lo; ox <= hi; ++ox)
                                    gxr[static_cast<std::int64_t>(ox) * stride] += wv * gyr[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_bwd_weight(const T* gy, const T* x, T* gw, int N, int C, int H, int W, int OC,
                       int KH, int KW, int stride, int pad, int OH, int OW) {
    const std::int64_t planes = static_cast<std::int64_t>(OC) * C;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < planes; ++p) {
        const int oc = static_cast<int>(p / C);
        const int c = static_cast<int>(p % C);
        T* gwp = gw + p * KH * KW;
        for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
                int lo, hi;
                detail::ox_range(W, kx, stride, pad, OW, &lo, &hi);
                T acc = T(0);
                for (int n = 0; n < N; ++n) {
                    const T* gyn = gy + (static_cast<std::int64_t>(n) * OC + oc) * OH * OW;
                    const T* xn = x + (static_cast<std::int64_t>(n) * C + c) * H * W;
                    for (int oy = 0; oy < OH; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        const T* xr = xn + static_cast<std::int64_t>(iy) * W + kx - pad;
                        const T* gyr = gyn + static_cast<std::int64_t>(oy) * OW;
                        if (stride == 1) {
                            for (int ox = lo; ox <= hi; ++ox) acc += gyr[ox] * xr[ox];
                        } else {
                            for (int ox = lo; ox <= hi; ++ox)
                                acc += gyr[ox] * xr[static_cast<std::int64_t>(ox) * stride];
                        }
                    }
                }
                gwp[ky * KW + kx] += acc;
            }
        }
    }
}

template <typename T>
void conv2d_bwd_bias(const T* gy, T* gb, int N, int OC, std::int64_t OHW) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < OC; ++oc) {
        T acc = T(0);
        for (int n = 0; n < N; ++n) {
            const T* gp = gy + (static_cast<std::int64_t>(n) * OC + oc) * OHW;
            for (std::int64_t i = 0; i < OHW; ++i) acc += gp[i];
        }
        gb[oc] += acc;
    }
}

// Softmax along an axis of length n; outer*inner independent lanes.
template <typename T>
void softmax_fwd(const T* x, T* y, std::int64_t outer, int n, std::int64_t inner) {
    const std::int64_t rows = outer * inner;
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = (r / inner) * n * inner + (r % inner);
        T mx = x[base];
        for (int i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
        T sum = T(0);
        for (int i = 0; i < n; ++i) {
            const T e = std::exp(x[base + i * inner] - mx);
            y[base + i * inner] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int i = 0; i < n; ++i) y[base + i * inner] *= inv;
    }
}

template <typename T>
void softmax_bwd(const T* y, const T* gy, T* gx, std::int64_t outer, int n, std::int64_t inner) {
    const std::int64_t rows = outer * inner;
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = (r / inner) * n * inner + (r % inner);
        T dot = T(0);
        for (int i = 0; i < n; ++i) dot += y[base + i * inner] * gy[base + i * inner];
        for (int i = 0; i < n; ++i) {
            const std::int64_t k = base + i * inner;
            gx[k] += y[k] * (gy[k] - dot);
        }
    }
}

// GroupNorm over NCHW; per-(n,group) mean/rstd are saved for the backward pass.
template <typename T>
void group_norm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                    int N, int C, int HW, int groups, T eps) {
    const int cpg = C / groups;
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * HW;
            const std::int64_t m = static_cast<std::int64_t>(cpg) * HW;
            T mu = T(0);
            for (std::int64_t i = 0; i < m; ++i) mu += x[base + i];
            mu /= static_cast<T>(m);
            T var = T(0);
            for (std::int64_t i = 0; i < m; ++i) {
                const T d = x[base + i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(m);
            const T rs = T(1) / std::sqrt(var + eps);
            mean[static_cast<std::int64_t>(n) * groups + g] = mu;
            rstd[static_cast<std::int64_t>(n) * groups + g] = rs;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const T ga = gamma ? gamma[c] : T(1);
                const T be = beta ? beta[c] : T(0);
                const T* xp = x + base + static_cast<std::int64_t>(cc) * HW;
                T* yp = y + base + static_cast<std::int64_t>(cc) * HW;
                for (int i = 0; i < HW; ++i) yp[i] = (xp[i] - mu) * rs * ga + be;
            }
        }
    }
}

template <typename T>
void group_norm_bwd_input(const T* x, const T* gamma, const T* gy, const T* mean,
                          const T* rstd, T* gx, int N, int C, int HW, int groups) {
    const int cpg = C / groups;
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * HW;
            const std::int64_t m = static_cast<std::int64_t>(cpg) * HW;
            const T mu = mean[static_cast<std::int64_t>(n) * groups + g];
            const T rs = rstd[static_cast<std::int64_t>(n) * groups + g];
            T dnorm_mean = T(0), dnorm_norm_mean = T(0);
            for (int cc = 0; cc < cpg; ++cc) {
                const T ga = gamma ? gamma[g * cpg + cc] : T(1);
                const T* xp = x + base + static_cast<std::int64_t>(cc) * HW;
                const T* gp = gy + base + static_cast<std::int64_t>(cc) * HW;
                for (int i = 0; i < HW; ++i) {
                    const T norm = (xp[i] - mu) * rs;
                    const T dn = ga * gp[i];
                    dnorm_mean += dn;
                    dnorm_norm_mean += dn * norm;
                }
            }
            dnorm_mean /= static_cast<T>(m);
            dnorm_norm_mean /= static_cast<T>(m);
            for (int cc = 0; cc < cpg; ++cc) {
                const T ga = gamma ? gamma[g * cpg + cc] : T(1);
                const T* xp = x + base + static_cast<std::int64_t>(cc) * HW;
                const T* gp = gy + base + static_cast<std::int64_t>(cc) * HW;
                T* dx = gx + base + static_cast<std::int64_t>(cc) * HW;
                for (int i = 0; i < HW; ++i) {
                    const T norm = (xp[i] - mu) * rs;
                    const T dn = ga * gp[i];
                    dx[i] += (dn - dnorm_mean - norm * dnorm_norm_mean) * rs;
                }
            }
        }
    }
}

// Per-channel gamma/beta gradients; parallel over channels, sequential over
// batch and space inside each channel.
template <typename T>
void group_norm_bwd_params(const T* x, const T* gy, const T* mean, const T* rstd,
                           T* ggamma, T* gbeta, int N, int C, int HW, int groups) {
    const int cpg = C / groups;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const int g = c / cpg;
        T dg = T(0), db = T(0);
        for (int n = 0; n < N; ++n) {
            const T mu = mean[static_cast<std::int64_t>(n) * groups + g];
            const T rs = rstd[static_cast<std::int64_t>(n) * groups + g];
            const T* xp = x + (static_cast<std::int64_t>(n) * C + c) * HW;
            const T* gp = gy + (static_cast<std::int64_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
                dg += (xp[i] - mu) * rs * gp[i];
                db += gp[i];
            }
        }
        ggamma[c] += dg;
        gbeta[c] += db;
    }
}

// LayerNorm over the last axis of row-major [rows, n].
template <typename T>
void layer_norm_fwd(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                    std::int64_t rows, int n, T eps) {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xp = x + r * n;
        T* yp = y + r * n;
        T mu = T(0);
        for (int i = 0; i < n; ++i) mu += xp[i];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int i = 0; i < n; ++i) {
            const T d = xp[i] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T rs = T(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        for (int i = 0; i < n; ++i) yp[i] = (xp[i] - mu) * rs * gamma[i] + beta[i];
    }
}

template <typename T>
void layer_norm_bwd_input(const T* x, const T* gamma, const T* gy, const T* mean,
                          const T* rstd, T* gx, std::int64_t rows, int n) {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xp = x + r * n;
        const T* gp = gy + r * n;
        T* dx = gx + r * n;
        const T mu = mean[r], rs = rstd[r];
        T dnorm_mean = T(0), dnorm_norm_mean = T(0);
        for (int i = 0; i < n; ++i) {
            const T norm = (xp[i] - mu) * rs;
            const T dn = gamma[i] * gp[i];
            dnorm_mean += dn;
            dnorm_norm_mean += dn * norm;
        }
        dnorm_mean /= static_cast<T>(n);
        dnorm_norm_mean /= static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
            const T norm = (xp[i] - mu) * rs;
            const T dn = gamma[i] * gp[i];
            dx[i] += (dn - dnorm_mean - norm * dnorm_norm_mean) * rs;
        }
    }
}

template <typename T>
void layer_norm_bwd_params(const T* x, const T* gy, const T* mean, const T* rstd,
                           T* ggamma, T* gbeta, std::int64_t rows, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        T dg = T(0), db = T(0);
        for (std::int64_t r = 0; r < rows; ++r) {
            dg += (x[r * n + i] - mean[r]) * rstd[r] * gy[r * n + i];
            db += gy[r * n + i];
        }
        ggamma[i] += dg;
        gbeta[i] += db;
    }
}

template <typename T>
void upsample2x_fwd(const T* x, T* y, int N, int C, int H, int W) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* xp = x + (static_cast<std::int64_t>(n) * C + c) * H * W;
            T* yp = y + (static_cast<std::int64_t>(n) * C + c) * H * W * 4;
            for (int iy = 0; iy < 2 * H; ++iy)
                for (int ix = 0; ix < 2 * W; ++ix)
                    yp[static_cast<std::int64_t>(iy) * 2 * W + ix] =
                        xp[static_cast<std::int64_t>(iy / 2) * W + ix / 2];
        }
    }
}

template <typename T>
void upsample2x_bwd(const T* gy, T* gx, int N, int C, int H, int W) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* gp = gy + (static_cast<std::int64_t>(n) * C + c) * H * W * 4;
            T* dx = gx + (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int iy = 0; iy < H; ++iy)
                for (int ix = 0; ix < W; ++ix)
                    dx[static_cast<std::int64_t>(iy) * W + ix] +=
                        gp[static_cast<std::int64_t>(2 * iy) * 2 * W + 2 * ix] +
                        gp[static_cast<std::int64_t>(2 * iy) * 2 * W + 2 * ix + 1] +
                        gp[static_cast<std::int64_t>(2 * iy + 1) * 2 * W + 2 * ix] +
                        gp[static_cast<std::int64_t>(2 * iy + 1) * 2 * W + 2 * ix + 1];
        }
    }
}

}  // namespace s2rd::kernels

#endif
