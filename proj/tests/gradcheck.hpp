#ifndef S2RD_TESTS_GRADCHECK_HPP
#define S2RD_TESTS_GRADCHECK_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "s2rd/tensor.hpp"

// Central finite-difference gradient oracle, run in 64-bit mode. Independent
// of the recorded backward pass: it only re-evaluates the forward function.

namespace s2rd::testing {

struct GradCheckResult {
    bool ok = true;
    double worst_err = 0.0;
    std::string where;
};

// fn maps the given leaves to a scalar; every leaf must have requires_grad set.
inline GradCheckResult gradcheck(
    const std::function<TensorT<double>(const std::vector<TensorT<double>>&)>& fn,
    std::vector<TensorT<double>> inputs, double h = 1e-3, double tol = 1e-4) {
    GradCheckResult res;

    for (auto& in : inputs) in.zero_grad();
    auto loss = fn(inputs);
    backward(loss);

    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        if (!in.requires_grad()) continue;
        for (std::int64_t i = 0; i < in.numel(); ++i) {
            const double orig = in.data()[i];
            in.data_mut()[i] = orig + h;
            const double fp = fn(inputs).item();
            in.data_mut()[i] = orig - h;
            const double fm = fn(inputs).item();
            in.data_mut()[i] = orig;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = in.has_grad() ? in.grad()[i] : 0.0;
            const double err = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            if (err > res.worst_err) {
                res.worst_err = err;
                res.where = "input " + std::to_string(k) + " elem " + std::to_string(i);
            }
            if (err > tol) res.ok = false;
        }
    }
    return res;
}

}  // namespace s2rd::testing

#endif
