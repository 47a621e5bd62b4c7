#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor/autodiff.hpp"
#include "tensor/tensor.hpp"

namespace stldm {

// Trainable tensor plus its AdamW state. All four tensors share one shape.
struct Parameter {
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;
    std::size_t step = 0;
    bool trainable = true;

    Parameter() = default;
    explicit Parameter(Tensor initial);

    void zero_grad();
};

struct AdamWOptions {
    double lr = 0.00024;
    double beta1 = 0.85;
    double beta2 = 0.91;
    double weight_decay = 0.003;
    double eps = 1e-8;
};

// Decoupled weight decay with bias-corrected moments.
void adamw_step(Parameter& p, const AdamWOptions& options);

using NamedParameters = std::vector<std::pair<std::string, Parameter*>>;

// Maps parameters onto graph leaves for one forward pass. With gradient
// tracking off (or a frozen parameter) the leaf is a constant.
class Binder {
public:
    explicit Binder(bool track_gradients = false) : track_(track_gradients) {}

    ad::Var operator()(Parameter& p);
    bool tracking() const noexcept { return track_; }

    // Adds every bound leaf gradient into its Parameter::grad.
    void flush_gradients();

private:
    bool track_;
    std::unordered_map<Parameter*, ad::Var> bound_;
    std::vector<Parameter*> order_;
};

// uniform(+-1/sqrt(fan_in)) weights, zero bias; y = x W + b.
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng);

    ad::Var forward(Binder& bind, const ad::Var& x);
    std::size_t in_features() const { return weight.value.rows(); }
    std::size_t out_features() const { return weight.value.cols(); }
    void collect(NamedParameters& out, const std::string& prefix);

    Parameter weight;
    Parameter bias;
};

class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t width);

    ad::Var forward(Binder& bind, const ad::Var& x);
    void collect(NamedParameters& out, const std::string& prefix);

    Parameter gamma;
    Parameter beta;
};

// Pre-norm two-layer GELU feed-forward with residual: x + W2 gelu(W1 LN(x)).
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(std::size_t width, std::size_t hidden, Rng& rng);

    ad::Var forward(Binder& bind, const ad::Var& x);
    void collect(NamedParameters& out, const std::string& prefix);

    LayerNorm norm;
    Linear up;
    Linear down;
};

}  // namespace stldm
