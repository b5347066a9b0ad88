#ifndef S2RD_TENSOR_HPP
#define S2RD_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "s2rd/common.hpp"
#include "s2rd/kernels.hpp"
#include "s2rd/rng.hpp"

// Reverse-mode tensor engine. Tensors are handles to tape nodes; ops record a
// backward closure when gradients are enabled and any input requires them.
// Values are immutable after construction except gradient buffers and leaf
// updates applied by the optimizer between steps.

namespace s2rd {

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // allocated on first use
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backfn;

    std::int64_t numel() const { return static_cast<std::int64_t>(val.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(val.size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

    static TensorT zeros(const Shape& s) { return full(s, T(0)); }

    static TensorT full(const Shape& s, T v) {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = s;
        n->val.assign(shape_numel(s), v);
        return TensorT(n);
    }

    static TensorT from_data(const Shape& s, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(s) != static_cast<std::int64_t>(data.size()))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(s));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = s;
        n->val = std::move(data);
        n->requires_grad = requires_grad;
        return TensorT(n);
    }

    static TensorT randn(const Shape& s, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = s;
        n->val.resize(shape_numel(s));
        for (auto& v : n->val) v = static_cast<T>(rng.normal()) * stddev;
        n->requires_grad = requires_grad;
        return TensorT(n);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t numel() const { return n_->numel(); }

    const std::vector<T>& data() const { return n_->val; }
    std::vector<T>& data_mut() { return n_->val; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool on) { n_->requires_grad = on; }
    void zero_grad() { n_->grad.assign(n_->val.size(), T(0)); }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor with " + std::to_string(numel()) + " elements");
        return n_->val[0];
    }

    std::shared_ptr<TensorNode<T>> node() const { return n_; }

private:
    std::shared_ptr<TensorNode<T>> n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename T>
void check_finite(const TensorNode<T>& n, const char* op) {
    if (!debug_validation_enabled()) return;
    for (const T& v : n.val)
        if (!std::isfinite(v))
            throw TrainingError(std::string("non-finite value out of op ") + op);
}

template <typename T>
TensorT<T> make_result(Shape shape, std::vector<T> val,
                       std::vector<std::shared_ptr<TensorNode<T>>> parents,
                       std::function<void(TensorNode<T>&)> backfn, const char* op) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backfn = std::move(backfn);
    }
    check_finite(*n, op);
    return TensorT<T>(n);
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) bn->grad[i] += self.grad[i];
            }
        },
        "add");
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) bn->grad[i] -= self.grad[i];
            }
        },
        "sub");
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "mul");
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i)
                    an->grad[i] += self.grad[i] * bn->val[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i)
                    bn->grad[i] += self.grad[i] * an->val[i];
            }
        },
        "mul");
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "div");
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i];
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an, bn},
        [an, bn](TensorNode<T>& self) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i)
                    an->grad[i] += self.grad[i] / bn->val[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i)
                    bn->grad[i] -= self.grad[i] * an->val[i] / (bn->val[i] * bn->val[i]);
            }
        },
        "div");
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] * c;
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an, c](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i] * c;
        },
        "scale");
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = pa[i] + c;
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) an->grad[i] += self.grad[i];
        },
        "add_scalar");
}

template <typename T>
TensorT<T> silu(const TensorT<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-pa[i]));
        out[i] = pa[i] * s;
    }
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) {
                const T x = an->val[i];
                const T s = T(1) / (T(1) + std::exp(-x));
                an->grad[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
            }
        },
        "silu");
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = T(1) / (T(1) + std::exp(-pa[i]));
    auto an = a.node();
    auto rn = detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) {
                const T y = self.val[i];
                an->grad[i] += self.grad[i] * y * (T(1) - y);
            }
        },
        "sigmoid");
    return rn;
}

template <typename T>
TensorT<T> tanh_act(const TensorT<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = std::tanh(pa[i]);
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) {
                const T y = self.val[i];
                an->grad[i] += self.grad[i] * (T(1) - y * y);
            }
        },
        "tanh");
}

template <typename T>
TensorT<T> sqrt_elem(const TensorT<T>& a) {
    const std::int64_t n = a.numel();
    std::vector<T> out(n);
    const T* pa = a.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) out[i] = std::sqrt(pa[i]);
    auto an = a.node();
    return detail::make_result<T>(
        a.shape(), std::move(out), {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i)
                an->grad[i] += self.grad[i] * T(0.5) / self.val[i];
        },
        "sqrt");
}

// ---------------------------------------------------------------------------
// reductions (sequential row-major accumulation, deterministic by contract)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    T acc = T(0);
    for (const T& v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_result<T>(
        Shape{1}, std::vector<T>{acc}, {an},
        [an](TensorNode<T>& self) {
            an->ensure_grad();
            const T g = self.grad[0];
            for (auto& gv : an->grad) gv += g;
        },
        "sum");
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
    T acc = T(0);
    for (const T& v : a.data()) acc += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    auto an = a.node();
    return detail::make_result<T>(
        Shape{1}, std::vector<T>{acc * inv}, {an},
        [an, inv](TensorNode<T>& self) {
            an->ensure_grad();
            const T g = self.grad[0] * inv;
            for (auto& gv : an->grad) gv += g;
        },
        "mean");
}

template <typename T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
    return mean_all(mul(sub(a, b), sub(a, b)));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b, bool ta = false, bool tb = false) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
    const int M = ta ? a.dim(1) : a.dim(0);
    const int K = ta ? a.dim(0) : a.dim(1);
    const int Kb = tb ? b.dim(1) : b.dim(0);
    const int N = tb ? b.dim(0) : b.dim(1);
    if (K != Kb)
        throw ShapeError("matmul inner dims " + std::to_string(K) + " vs " + std::to_string(Kb));
    std::vector<T> out(static_cast<std::int64_t>(M) * N);
    kernels::matmul(a.data().data(), b.data().data(), out.data(), M, K, N, ta, tb, false);
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        Shape{M, N}, std::move(out), {an, bn},
        [an, bn, M, K, N, ta, tb](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                // dA = dY.B^T (layout-adjusted for ta/tb)
                if (!ta)
                    kernels::matmul(g, bn->val.data(), an->grad.data(), M, N, K, false, !tb, true);
                else
                    kernels::matmul(bn->val.data(), g, an->grad.data(), K, N, M, tb, true, true);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                if (!tb)
                    kernels::matmul(an->val.data(), g, bn->grad.data(), K, M, N, !ta, false, true);
                else
                    kernels::matmul(g, an->val.data(), bn->grad.data(), N, M, K, true, ta, true);
            }
        },
        "matmul");
}

// Batched matmul over the leading dim: a [B,M,K], b [B,K,N] ([B,N,K] if tb).
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool tb = false) {
    if (a.rank() != 3 || b.rank() != 3) throw ShapeError("bmm expects rank-3 tensors");
    if (a.dim(0) != b.dim(0)) throw ShapeError("bmm batch dims differ");
    const int B = a.dim(0), M = a.dim(1), K = a.dim(2);
    const int Kb = tb ? b.dim(2) : b.dim(1);
    const int N = tb ? b.dim(1) : b.dim(2);
    if (K != Kb) throw ShapeError("bmm inner dims differ");
    std::vector<T> out(static_cast<std::int64_t>(B) * M * N);
    for (int i = 0; i < B; ++i)
        kernels::matmul(a.data().data() + static_cast<std::int64_t>(i) * M * K,
                        b.data().data() + static_cast<std::int64_t>(i) * K * N,
                        out.data() + static_cast<std::int64_t>(i) * M * N, M, K, N, false, tb,
                        false);
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        Shape{B, M, N}, std::move(out), {an, bn},
        [an, bn, B, M, K, N, tb](TensorNode<T>& self) {
            for (int i = 0; i < B; ++i) {
                const T* g = self.grad.data() + static_cast<std::int64_t>(i) * M * N;
                const T* av = an->val.data() + static_cast<std::int64_t>(i) * M * K;
                const T* bv = bn->val.data() + static_cast<std::int64_t>(i) * K * N;
                if (an->requires_grad) {
                    an->ensure_grad();
                    kernels::matmul(g, bv, an->grad.data() + static_cast<std::int64_t>(i) * M * K,
                                    M, N, K, false, !tb, true);
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    T* gb = bn->grad.data() + static_cast<std::int64_t>(i) * K * N;
                    if (!tb)
                        kernels::matmul(av, g, gb, K, M, N, true, false, true);
                    else
                        kernels::matmul(g, av, gb, N, M, K, true, false, true);
                }
            }
        },
        "bmm");
}

// y = x.W^T + b for x of rank 2 [R,K] or rank 3 [B,M,K]; W is [N,K].
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = TensorT<T>()) {
    if (x.rank() != 2 && x.rank() != 3) throw ShapeError("linear expects rank-2/3 input");
    if (w.rank() != 2) throw ShapeError("linear weight must be rank 2");
    const int K = x.dim(x.rank() - 1);
    if (w.dim(1) != K)
        throw ShapeError("linear: input width " + std::to_string(K) + " vs weight in-dim " +
                         std::to_string(w.dim(1)));
    const int N = w.dim(0);
    const std::int64_t R = x.numel() / K;
    if (b.defined() && (b.rank() != 1 || b.dim(0) != N)) throw ShapeError("linear bias shape");
    std::vector<T> out(R * N);
    kernels::matmul(x.data().data(), w.data().data(), out.data(), static_cast<int>(R), K, N,
                    false, true, false);
    if (b.defined()) {
        const T* pb = b.data().data();
#pragma omp parallel for schedule(static)
        for (std::int64_t r = 0; r < R; ++r)
            for (int j = 0; j < N; ++j) out[r * N + j] += pb[j];
    }
    Shape os = x.shape();
    os.back() = N;
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode<T>>> parents = {xn, wn};
    if (bn) parents.push_back(bn);
    return detail::make_result<T>(
        std::move(os), std::move(out), std::move(parents),
        [xn, wn, bn, R, K, N](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::matmul(g, wn->val.data(), xn->grad.data(), static_cast<int>(R), N, K,
                                false, false, true);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                kernels::matmul(g, xn->val.data(), wn->grad.data(), N, static_cast<int>(R), K,
                                true, false, true);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (int j = 0; j < N; ++j) {
                    T acc = T(0);
                    for (std::int64_t r = 0; r < R; ++r) acc += g[r * N + j];
                    bn->grad[j] += acc;
                }
            }
        },
        "linear");
}

// ---------------------------------------------------------------------------
// convolution and friends
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d expects NCHW input, OIHW kernel");
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OC = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (w.dim(1) != C)
        throw ShapeError("conv2d channel mismatch: input " + std::to_string(C) + " vs kernel " +
                         std::to_string(w.dim(1)));
    const int OH = static_cast<int>(kernels::conv_out_dim(H, KH, stride, pad));
    const int OW = static_cast<int>(kernels::conv_out_dim(W, KW, stride, pad));
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d output would be empty");
    if (b.defined() && (b.rank() != 1 || b.dim(0) != OC)) throw ShapeError("conv2d bias shape");
    std::vector<T> out(static_cast<std::int64_t>(N) * OC * OH * OW);
    kernels::conv2d_fwd(x.data().data(), w.data().data(),
                        b.defined() ? b.data().data() : nullptr, out.data(), N, C, H, W, OC, KH,
                        KW, stride, pad, OH, OW);
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode<T>>> parents = {xn, wn};
    if (bn) parents.push_back(bn);
    return detail::make_result<T>(
        Shape{N, OC, OH, OW}, std::move(out), std::move(parents),
        [xn, wn, bn, N, C, H, W, OC, KH, KW, stride, pad, OH, OW](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::conv2d_bwd_input(g, wn->val.data(), xn->grad.data(), N, C, H, W, OC, KH,
                                          KW, stride, pad, OH, OW);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                kernels::conv2d_bwd_weight(g, xn->val.data(), wn->grad.data(), N, C, H, W, OC,
                                           KH, KW, stride, pad, OH, OW);
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                kernels::conv2d_bwd_bias(g, bn->grad.data(), N, OC,
                                         static_cast<std::int64_t>(OH) * OW);
            }
        },
        "conv2d");
}

template <typename T>
TensorT<T> upsample_nearest2x(const TensorT<T>& x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2x expects NCHW");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<T> out(static_cast<std::int64_t>(N) * C * H * W * 4);
    kernels::upsample2x_fwd(x.data().data(), out.data(), N, C, H, W);
    auto xn = x.node();
    return detail::make_result<T>(
        Shape{N, C, 2 * H, 2 * W}, std::move(out), {xn},
        [xn, N, C, H, W](TensorNode<T>& self) {
            xn->ensure_grad();
            kernels::upsample2x_bwd(self.grad.data(), xn->grad.data(), N, C, H, W);
        },
        "upsample_nearest2x");
}

template <typename T>
TensorT<T> group_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      int groups, T eps = T(1e-5)) {
    if (x.rank() != 4) throw ShapeError("group_norm expects NCHW");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm affine shape");
    std::vector<T> out(x.numel());
    auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * groups);
    auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * groups);
    kernels::group_norm_fwd(x.data().data(), gamma.data().data(), beta.data().data(), out.data(),
                            mean->data(), rstd->data(), N, C, HW, groups, eps);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, mean, rstd, N, C, HW, groups](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::group_norm_bwd_input(xn->val.data(), gn->val.data(), g, mean->data(),
                                              rstd->data(), xn->grad.data(), N, C, HW, groups);
            }
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                kernels::group_norm_bwd_params(xn->val.data(), g, mean->data(), rstd->data(),
                                               gn->grad.data(), bn->grad.data(), N, C, HW,
                                               groups);
            }
        },
        "group_norm");
}

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
    if (x.rank() < 1) throw ShapeError("layer_norm expects rank >= 1");
    const int n = x.dim(x.rank() - 1);
    if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layer_norm affine shape");
    const std::int64_t rows = x.numel() / n;
    std::vector<T> out(x.numel());
    auto mean = std::make_shared<std::vector<T>>(rows);
    auto rstd = std::make_shared<std::vector<T>>(rows);
    kernels::layer_norm_fwd(x.data().data(), gamma.data().data(), beta.data().data(), out.data(),
                            mean->data(), rstd->data(), rows, n, eps);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, mean, rstd, rows, n](TensorNode<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::layer_norm_bwd_input(xn->val.data(), gn->val.data(), g, mean->data(),
                                              rstd->data(), xn->grad.data(), rows, n);
            }
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                kernels::layer_norm_bwd_params(xn->val.data(), g, mean->data(), rstd->data(),
                                               gn->grad.data(), bn->grad.data(), rows, n);
            }
        },
        "layer_norm");
}

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(x.rank()));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const int n = x.dim(axis);
    std::vector<T> out(x.numel());
    kernels::softmax_fwd(x.data().data(), out.data(), outer, n, inner);
    auto xn = x.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn},
        [xn, outer, n, inner](TensorNode<T>& self) {
            xn->ensure_grad();
            kernels::softmax_bwd(self.val.data(), self.grad.data(), xn->grad.data(), outer, n,
                                 inner);
        },
        "softmax");
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& s) {
    if (shape_numel(s) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(s));
    auto xn = x.node();
    return detail::make_result<T>(
        s, std::vector<T>(x.data()), {xn},
        [xn](TensorNode<T>& self) {
            xn->ensure_grad();
            for (std::int64_t i = 0; i < self.numel(); ++i) xn->grad[i] += self.grad[i];
        },
        "reshape");
}

template <typename T>
TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, int axis) {
    if (a.rank() != b.rank()) throw ShapeError("concat rank mismatch");
    if (axis < 0 || axis >= a.rank()) throw ShapeError("concat axis out of range");
    for (int i = 0; i < a.rank(); ++i)
        if (i != axis && a.dim(i) != b.dim(i))
            throw ShapeError("concat shapes " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const std::int64_t na = a.dim(axis) * inner, nb = b.dim(axis) * inner;
    std::vector<T> out(a.numel() + b.numel());
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(a.data().data() + o * na, na, out.data() + o * (na + nb));
        std::copy_n(b.data().data() + o * nb, nb, out.data() + o * (na + nb) + na);
    }
    Shape os = a.shape();
    os[axis] += b.dim(axis);
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        std::move(os), std::move(out), {an, bn},
        [an, bn, outer, na, nb](TensorNode<T>& self) {
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* g = self.grad.data() + o * (na + nb);
                if (an->requires_grad) {
                    an->ensure_grad();
                    for (std::int64_t i = 0; i < na; ++i) an->grad[o * na + i] += g[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::int64_t i = 0; i < nb; ++i) bn->grad[o * nb + i] += g[na + i];
                }
            }
        },
        "concat");
}

// [N,C,H,W] -> [N, H*W, C] token rows for attention.
template <typename T>
TensorT<T> rows_from_nchw(const TensorT<T>& x) {
    if (x.rank() != 4) throw ShapeError("rows_from_nchw expects NCHW");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < HW; ++i)
                out[(static_cast<std::int64_t>(n) * HW + i) * C + c] =
                    px[(static_cast<std::int64_t>(n) * C + c) * HW + i];
    auto xn = x.node();
    return detail::make_result<T>(
        Shape{N, HW, C}, std::move(out), {xn},
        [xn, N, C, HW](TensorNode<T>& self) {
            xn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < HW; ++i)
                        xn->grad[(static_cast<std::int64_t>(n) * C + c) * HW + i] +=
                            self.grad[(static_cast<std::int64_t>(n) * HW + i) * C + c];
        },
        "rows_from_nchw");
}

template <typename T>
TensorT<T> rows_to_nchw(const TensorT<T>& x, int H, int W) {
    if (x.rank() != 3) throw ShapeError("rows_to_nchw expects [N,HW,C]");
    if (x.dim(1) != H * W) throw ShapeError("rows_to_nchw spatial size mismatch");
    const int N = x.dim(0), HW = x.dim(1), C = x.dim(2);
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < HW; ++i)
                out[(static_cast<std::int64_t>(n) * C + c) * HW + i] =
                    px[(static_cast<std::int64_t>(n) * HW + i) * C + c];
    auto xn = x.node();
    return detail::make_result<T>(
        Shape{N, C, H, W}, std::move(out), {xn},
        [xn, N, C, HW](TensorNode<T>& self) {
            xn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < HW; ++i)
                        xn->grad[(static_cast<std::int64_t>(n) * HW + i) * C + c] +=
                            self.grad[(static_cast<std::int64_t>(n) * C + c) * HW + i];
        },
        "rows_to_nchw");
}

// Non-overlapping patches: [N,C,H,W] -> [N, (H/ps)*(W/ps), ps*ps*C].
template <typename T>
TensorT<T> extract_patches(const TensorT<T>& x, int ps) {
    if (x.rank() != 4) throw ShapeError("extract_patches expects NCHW");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % ps != 0 || W % ps != 0) throw ShapeError("extract_patches: size not divisible");
    const int GY = H / ps, GX = W / ps, P = GY * GX, D = ps * ps * C;
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    auto src_index = [=](int n, int p, int d) {
        const int c = d / (ps * ps);
        const int py = (d / ps) % ps;
        const int pxi = d % ps;
        const int gy = p / GX, gx = p % GX;
        return ((static_cast<std::int64_t>(n) * C + c) * H + gy * ps + py) * W + gx * ps + pxi;
    };
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n)
        for (int p = 0; p < P; ++p)
            for (int d = 0; d < D; ++d)
                out[(static_cast<std::int64_t>(n) * P + p) * D + d] = px[src_index(n, p, d)];
    auto xn = x.node();
    return detail::make_result<T>(
        Shape{N, P, D}, std::move(out), {xn},
        [xn, N, P, D, src_index](TensorNode<T>& self) {
            xn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int p = 0; p < P; ++p)
                    for (int d = 0; d < D; ++d)
                        xn->grad[src_index(n, p, d)] +=
                            self.grad[(static_cast<std::int64_t>(n) * P + p) * D + d];
        },
        "extract_patches");
}

// x [N,C,H,W] + v [N,C] broadcast over space (timestep embedding injection).
template <typename T>
TensorT<T> add_spatial(const TensorT<T>& x, const TensorT<T>& v) {
    if (x.rank() != 4 || v.rank() != 2) throw ShapeError("add_spatial shapes");
    if (x.dim(0) != v.dim(0) || x.dim(1) != v.dim(1))
        throw ShapeError("add_spatial: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    const T* pv = v.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = px[i] + pv[i / HW];
    auto xn = x.node(), vn = v.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, vn},
        [xn, vn, N, C, HW](TensorNode<T>& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) xn->grad[i] += self.grad[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
                    T acc = T(0);
                    for (int i = 0; i < HW; ++i) acc += self.grad[nc * HW + i];
                    vn->grad[nc] += acc;
                }
            }
        },
        "add_spatial");
}

// x [B, rest...] + p [rest...] broadcast over the leading dim.
template <typename T>
TensorT<T> add_bcast0(const TensorT<T>& x, const TensorT<T>& p) {
    if (x.rank() != p.rank() + 1) throw ShapeError("add_bcast0 rank");
    for (int i = 1; i < x.rank(); ++i)
        if (x.dim(i) != p.dim(i - 1)) throw ShapeError("add_bcast0 shape");
    const std::int64_t B = x.dim(0), R = p.numel();
    std::vector<T> out(x.numel());
    const T* px = x.data().data();
    const T* pp = p.data().data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = px[i] + pp[i % R];
    auto xn = x.node(), pn = p.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {xn, pn},
        [xn, pn, B, R](TensorNode<T>& self) {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t i = 0; i < self.numel(); ++i) xn->grad[i] += self.grad[i];
            }
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (std::int64_t r = 0; r < R; ++r) {
                    T acc = T(0);
                    for (std::int64_t b = 0; b < B; ++b) acc += self.grad[b * R + r];
                    pn->grad[r] += acc;
                }
            }
        },
        "add_bcast0");
}

// Row gather from an embedding table [V,d]; ids laid out as rows_shape.
template <typename T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int>& ids, Shape rows_shape) {
    if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
    const int V = table.dim(0), d = table.dim(1);
    if (shape_numel(rows_shape) != static_cast<std::int64_t>(ids.size()))
        throw ShapeError("embedding ids/shape mismatch");
    for (int id : ids)
        if (id < 0 || id >= V)
            throw UsageError("embedding id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(V));
    std::vector<T> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.data().data() + static_cast<std::int64_t>(ids[i]) * d, d,
                    out.data() + static_cast<std::int64_t>(i) * d);
    Shape os = std::move(rows_shape);
    os.push_back(d);
    auto tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return detail::make_result<T>(
        std::move(os), std::move(out), {tn},
        [tn, ids_copy, d](TensorNode<T>& self) {
            tn->ensure_grad();
            for (size_t i = 0; i < ids_copy->size(); ++i) {
                T* dst = tn->grad.data() + static_cast<std::int64_t>((*ids_copy)[i]) * d;
                const T* src = self.grad.data() + static_cast<std::int64_t>(i) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        },
        "embedding");
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1) throw UsageError("backward requires a scalar loss");
    auto root = loss.node();
    if (!root->requires_grad) return;

    // Reverse topological order over the recorded graph.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior grads are scratch per call; only leaf grads accumulate across
    // repeated backward calls.
    for (TensorNode<T>* node : order)
        if (node->backfn) node->grad.assign(node->val.size(), T(0));

    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* node = *it;
        if (node->backfn) node->backfn(*node);
    }
}

}  // namespace s2rd

#endif
