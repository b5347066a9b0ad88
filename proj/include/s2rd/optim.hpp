#ifndef S2RD_OPTIM_HPP
#define S2RD_OPTIM_HPP

#include <cmath>
#include <string>
#include <vector>

#include "s2rd/tensor.hpp"

namespace s2rd {

// Adam with optional per-parameter element masks (used by fine-tuning to
// restrict embedding-table updates to the trigger row). Updates are
// elementwise and order-independent, so the parallel loop is deterministic.
class Adam {
public:
    struct Options {
        float lr = 1e-3f;
        float beta1 = 0.9f;
        float beta2 = 0.999f;
        float eps = 1e-8f;
    };

    Adam() = default;
    explicit Adam(Options opt) : opt_(opt) {}

    void add_param(const Tensor& p) { add_param(p, {}); }

    void add_param(const Tensor& p, std::vector<char> mask) {
        if (!mask.empty() && static_cast<std::int64_t>(mask.size()) != p.numel())
            throw UsageError("adam mask size mismatch");
        Slot s;
        s.param = p;
        s.m.assign(p.numel(), 0.0f);
        s.v.assign(p.numel(), 0.0f);
        s.mask = std::move(mask);
        slots_.push_back(std::move(s));
    }

    void add_params(const std::vector<Tensor>& ps) {
        for (const auto& p : ps) add_param(p);
    }

    void set_lr(float lr) { opt_.lr = lr; }
    float lr() const { return opt_.lr; }

    void zero_grad() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    // Global-norm gradient clipping; returns the pre-clip norm.
    float clip_grad_norm(float max_norm) {
        double total = 0.0;
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            for (float g : s.param.node()->grad) total += static_cast<double>(g) * g;
        }
        const float norm = static_cast<float>(std::sqrt(total));
        if (norm > max_norm && norm > 0.0f) {
            const float f = max_norm / norm;
            for (auto& s : slots_) {
                if (!s.param.has_grad()) continue;
                for (float& g : s.param.node()->grad) g *= f;
            }
        }
        return norm;
    }

    void step() {
        ++t_;
        const float bc1 = 1.0f - std::pow(opt_.beta1, static_cast<float>(t_));
        const float bc2 = 1.0f - std::pow(opt_.beta2, static_cast<float>(t_));
        for (auto& s : slots_) {
            if (!s.param.has_grad()) continue;
            auto& w = s.param.data_mut();
            const auto& g = s.param.node()->grad;
            const std::int64_t n = s.param.numel();
#pragma omp parallel for schedule(static)
            for (std::int64_t i = 0; i < n; ++i) {
                if (!s.mask.empty() && !s.mask[i]) continue;
                s.m[i] = opt_.beta1 * s.m[i] + (1.0f - opt_.beta1) * g[i];
                s.v[i] = opt_.beta2 * s.v[i] + (1.0f - opt_.beta2) * g[i] * g[i];
                const float mhat = s.m[i] / bc1;
                const float vhat = s.v[i] / bc2;
                w[i] -= opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps);
            }
        }
    }

    size_t param_count() const { return slots_.size(); }

private:
    struct Slot {
        Tensor param;
        std::vector<float> m, v;
        std::vector<char> mask;  // empty = update everything
    };

    Options opt_;
    std::vector<Slot> slots_;
    std::int64_t t_ = 0;
};

}  // namespace s2rd

#endif
