#pragma once

#include <cmath>
#include <cstddef>
#include <functional>

#include "tensor/autodiff.hpp"
#include "tensor/tensor.hpp"

namespace testing {

using stldm::Rng;
using stldm::Tensor;
using stldm::ad::Var;

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline Tensor normal(stldm::Shape shape, Rng& rng, double stddev = 1.0) {
    return stldm::random_normal(shape, stddev, rng);
}

// Central differences with step h on every element of x.
inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-4) {
    Tensor g(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + h;
        const double up = f(probe);
        probe[i] = keep - h;
        const double down = f(probe);
        probe[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// ||a - b|| / max(||a||, ||b||), with a floor so all-zero pairs compare equal.
inline double relative_error(const Tensor& a, const Tensor& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
    return std::sqrt(diff) / scale;
}

// Analytic vs numeric gradient of a scalar graph built from one input.
inline double gradient_check(const std::function<Var(const Var&)>& objective, const Tensor& x) {
    const Tensor analytic = stldm::ad::gradient(objective, x);
    const Tensor numeric = numeric_gradient(
        [&](const Tensor& p) { return objective(stldm::ad::constant(p))->value.item(); }, x);
    return relative_error(analytic, numeric);
}

}  // namespace testing
