#ifndef S2RD_KERNELS_REF_HPP
#define S2RD_KERNELS_REF_HPP

#include <cmath>
#include <cstdint>
#include <vector>

// Serial reference implementations of the kernel contracts, written straight
// from the definitions (scatter-style backward passes, no gather tricks).
// Tests compare kernels.hpp against these and tools/bench_kernels times both.

namespace s2rd::kernels::ref {

template <typename T>
void matmul(const T* a, const T* b, T* y, int M, int K, int N, bool ta, bool tb,
            bool accumulate) {
    if (!accumulate)
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(M) * N; ++i) y[i] = T(0);
    for (int i = 0; i < M; ++i)
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < N; ++j) {
                const T av = ta ? a[static_cast<std::int64_t>(k) * M + i]
                                : a[static_cast<std::int64_t>(i) * K + k];
                const T bv = tb ? b[static_cast<std::int64_t>(j) * K + k]
                                : b[static_cast<std::int64_t>(k) * N + j];
                y[static_cast<std::int64_t>(i) * N + j] += av * bv;
            }
}

template <typename T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int N, int C, int H, int W,
                int OC, int KH, int KW, int stride, int pad, int OH, int OW) {
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(N) * OC * OH * OW; ++i)
        y[i] = bias ? bias[(i / (static_cast<std::int64_t>(OH) * OW)) % OC] : T(0);
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < OC; ++oc)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                y[((static_cast<std::int64_t>(n) * OC + oc) * OH + oy) * OW + ox] +=
                                    x[((static_cast<std::int64_t>(n) * C + c) * H + iy) * W + ix] *
                                    w[((static_cast<std::int64_t>(oc) * C + c) * KH + ky) * KW + kx];
                            }
}

// Scatter form: walk the forward loop nest and push gradients to the inputs
// that produced each output.
template <typename T>
void conv2d_bwd_input(const T* gy, const T* w, T* gx, int N, int C, int H, int W, int OC,
                      int KH, int KW, int stride, int pad, int OH, int OW) {
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < OC; ++oc)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    const T g = gy[((static_cast<std::int64_t>(n) * OC + oc) * OH + oy) * OW + ox];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                gx[((static_cast<std::int64_t>(n) * C + c) * H + iy) * W + ix] +=
                                    g *
                                    w[((static_cast<std::int64_t>(oc) * C + c) * KH + ky) * KW + kx];
                            }
                }
}

template <typename T>
void conv2d_bwd_weight(const T* gy, const T* x, T* gw, int N, int C, int H, int W, int OC,
                       int KH, int KW, int stride, int pad, int OH, int OW) {
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < OC; ++oc)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) {
                    const T g = gy[((static_cast<std::int64_t>(n) * OC + oc) * OH + oy) * OW + ox];
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < KH; ++ky)
                            for (int kx = 0; kx < KW; ++kx) {
                                const int iy = oy * stride - pad + ky;
                                const int ix = ox * stride - pad + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                gw[((static_cast<std::int64_t>(oc) * C + c) * KH + ky) * KW + kx] +=
                                    g *
                                    x[((static_cast<std::int64_t>(n) * C + c) * H + iy) * W + ix];
                            }
                }
}

template <typename T>
void softmax_fwd(const T* x, T* y, std::int64_t outer, int n, std::int64_t inner) {
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = x[base];
            for (int i = 1; i < n; ++i) mx = std::max(mx, x[base + i * inner]);
            T sum = T(0);
            for (int i = 0; i < n; ++i) sum += std::exp(x[base + i * inner] - mx);
            for (int i = 0; i < n; ++i) y[base + i * inner] = std::exp(x[base + i * inner] - mx) / sum;
        }
}

template <typename T>
void group_norm_fwd(const T* x, const T* gamma, const T* beta, T* y, int N, int C, int HW,
                    int groups, T eps) {
    const int cpg = C / groups;
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + g * cpg) * HW;
            const std::int64_t m = static_cast<std::int64_t>(cpg) * HW;
            T mu = T(0);
            for (std::int64_t i = 0; i < m; ++i) mu += x[base + i];
            mu /= static_cast<T>(m);
            T var = T(0);
            for (std::int64_t i = 0; i < m; ++i) var += (x[base + i] - mu) * (x[base + i] - mu);
            var /= static_cast<T>(m);
            const T rs = T(1) / std::sqrt(var + eps);
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                for (int i = 0; i < HW; ++i) {
                    const std::int64_t k = base + static_cast<std::int64_t>(cc) * HW + i;
                    y[k] = (x[k] - mu) * rs * (gamma ? gamma[c] : T(1)) + (beta ? beta[c] : T(0));
                }
            }
        }
}

template <typename T>
void upsample2x_fwd(const T* x, T* y, int N, int C, int H, int W) {
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int iy = 0; iy < 2 * H; ++iy)
                for (int ix = 0; ix < 2 * W; ++ix)
                    y[((static_cast<std::int64_t>(n) * C + c) * 2 * H + iy) * 2 * W + ix] =
                        x[((static_cast<std::int64_t>(n) * C + c) * H + iy / 2) * W + ix / 2];
}

}  // namespace s2rd::kernels::ref

#endif
