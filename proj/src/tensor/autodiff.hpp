#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "tensor/tensor.hpp"

// Tape-free reverse-mode differentiation over the kernel set used by the
// model. Each op records its parents and a closure that pushes the output
// gradient back to them; nodes that do not depend on a trainable leaf carry
// neither, so inference builds no graph.
namespace stldm::ad {

class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool differentiable = true;
    const char* op = "leaf";
    std::vector<Var> parents;
    std::function<void(Node&)> backward;

    // Adds g into grad, allocating it on first use.
    void accumulate(const Tensor& g);
    Tensor& grad_buffer();
    const Shape& shape() const noexcept { return value.shape(); }
};

Var constant(Tensor value);
Var variable(Tensor value);

// Builds a node whose backward closure is kept only when some parent needs it.
Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

// Reverse sweep from a single-element root. Throws UnsupportedOp when a
// gradient reaches a non-differentiable node.
void backward(const Var& root);

// d objective / d wrt, evaluated at wrt.
Tensor gradient(const std::function<Var(const Var&)>& objective, const Tensor& wrt);

// Linear algebra
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// Broadcasting helpers for [rows x cols] matrices
Var add_bias(const Var& x, const Var& bias);      // bias: [cols]
Var mul_rows(const Var& x, const Var& factors);   // factors: [rows] or [rows x 1]

// Reductions and normalisations
Var sum(const Var& a);
Var mean(const Var& a);
Var softmax_rows(const Var& a);
Var softmax_cols(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var divide_by_max(const Var& a);

// Structural
Var reshape(const Var& a, Shape shape);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
// out[i] = index[i] < 0 ? 0 : a[index[i]] on flat storage.
Var gather(const Var& a, std::vector<std::ptrdiff_t> index, Shape out_shape);

// Fused multi-head scaled dot-product attention. Rows of q (and of k/v) are
// split into `groups` equal contiguous blocks that attend only within the
// block; columns split into `heads` equal slices.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t groups, double scale);

// Bilinear sampling of an [H*W x C] grid at fractional (row, col) points
// [N x 2]; integral neighbours outside the grid contribute zero.
Var bilinear_sample(const Var& grid, std::size_t height, std::size_t width, const Var& points);

// Mean over non-overlapping factor x factor blocks of an [H*W x C] grid.
Var avg_pool_grid(const Var& grid, std::size_t height, std::size_t width, std::size_t factor);

// Losses (scalar outputs)
Var bce_mean(const Var& prediction, const Tensor& target);
Var mse_mean(const Var& prediction, const Tensor& target);

// Hard step at `threshold`; not differentiable.
Var threshold(const Var& a, double threshold);

}  // namespace stldm::ad
