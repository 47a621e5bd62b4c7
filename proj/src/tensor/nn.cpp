#include "tensor/nn.hpp"

#include <cmath>

#include "common/error.hpp"

namespace stldm {

Parameter::Parameter(Tensor initial)
    : value(std::move(initial)),
      grad(value.shape()),
      first_moment(value.shape()),
      second_moment(value.shape()) {}

void Parameter::zero_grad() { grad.fill(0.0); }

void adamw_step(Parameter& p, const AdamWOptions& options) {
    if (!(options.lr > 0.0)) fail(ErrorKind::Config, "AdamW learning rate must be positive, got " + std::to_string(options.lr));
    if (p.grad.shape() != p.value.shape()) fail(ErrorKind::Shape, "AdamW: gradient shape differs from value shape");
    p.step += 1;
    const double t = static_cast<double>(p.step);
    const double correction1 = 1.0 - std::pow(options.beta1, t);
    const double correction2 = 1.0 - std::pow(options.beta2, t);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        double& m = p.first_moment[i];
        double& v = p.second_moment[i];
        m = options.beta1 * m + (1.0 - options.beta1) * g;
        v = options.beta2 * v + (1.0 - options.beta2) * g * g;
        const double m_hat = m / correction1;
        const double v_hat = v / correction2;
        double& w = p.value[i];
        w -= options.lr * (m_hat / (std::sqrt(v_hat) + options.eps) + options.weight_decay * w);
    }
}

ad::Var Binder::operator()(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return it->second;
    ad::Var leaf = (track_ && p.trainable) ? ad::variable(p.value) : ad::constant(p.value);
    bound_.emplace(&p, leaf);
    order_.push_back(&p);
    return leaf;
}

void Binder::flush_gradients() {
    for (Parameter* p : order_) {
        const ad::Var& leaf = bound_.at(p);
        if (leaf->grad.empty()) continue;
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += leaf->grad[i];
        leaf->grad = Tensor();
    }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Parameter(random_uniform({in, out}, -bound, bound, rng));
    bias = Parameter(Tensor({out}));
}

ad::Var Linear::forward(Binder& bind, const ad::Var& x) {
    return ad::add_bias(ad::matmul(x, bind(weight)), bind(bias));
}

void Linear::collect(NamedParameters& out, const std::string& prefix) {
    out.emplace_back(prefix + ".weight", &weight);
    out.emplace_back(prefix + ".bias", &bias);
}

LayerNorm::LayerNorm(std::size_t width) : gamma(Tensor({width}, 1.0)), beta(Tensor({width})) {}

ad::Var LayerNorm::forward(Binder& bind, const ad::Var& x) {
    return ad::layer_norm_rows(x, bind(gamma), bind(beta));
}

void LayerNorm::collect(NamedParameters& out, const std::string& prefix) {
    out.emplace_back(prefix + ".gamma", &gamma);
    out.emplace_back(prefix + ".beta", &beta);
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden, Rng& rng)
    : norm(width), up(width, hidden, rng), down(hidden, width, rng) {}

ad::Var FeedForward::forward(Binder& bind, const ad::Var& x) {
    return ad::add(x, down.forward(bind, ad::gelu(up.forward(bind, norm.forward(bind, x)))));
}

void FeedForward::collect(NamedParameters& out, const std::string& prefix) {
    norm.collect(out, prefix + ".norm");
    up.collect(out, prefix + ".up");
    down.collect(out, prefix + ".down");
}

}  // namespace stldm
