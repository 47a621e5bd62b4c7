#include "tensor/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "common/error.hpp"

namespace stldm::ad {

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
        return;
    }
    double* dst = grad.data();
    const double* src = g.data();
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
}

Tensor& Node::grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = "constant";
    return node;
}

Var variable(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->op = "variable";
    return node;
}

Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    const bool needs = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
        node->differentiable = static_cast<bool>(node->backward);
    }
    return node;
}

void backward(const Var& root) {
    if (root->value.size() != 1) {
        fail(ErrorKind::Shape, "backward root must be a single element, got " + shape_to_string(root->shape()));
    }
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad = Tensor(root->shape(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->grad.empty() || node->parents.empty()) continue;
        if (!node->differentiable) {
            fail(ErrorKind::UnsupportedOp, std::string("gradient requested through non-differentiable op '") +
                                               node->op + "'");
        }
        node->backward(*node);
    }
}

Tensor gradient(const std::function<Var(const Var&)>& objective, const Tensor& wrt) {
    Var x = variable(wrt);
    Var out = objective(x);
    backward(out);
    if (x->grad.empty()) return Tensor(wrt.shape());
    return x->grad;
}

namespace {

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void require_matrix(const Var& v, const char* what) {
    if (v->value.rank() != 2) {
        fail(ErrorKind::Shape, std::string(what) + " expects a matrix, got " + shape_to_string(v->shape()));
    }
}

void require_same(const Var& a, const Var& b, const char* what) {
    if (a->shape() != b->shape()) {
        fail(ErrorKind::Shape, std::string(what) + ": shape mismatch " + shape_to_string(a->shape()) + " vs " +
                                   shape_to_string(b->shape()));
    }
}

template <typename F, typename D>
Var unary(const char* op, const Var& a, F f, D dfdx) {
    Tensor out(a->shape());
    const Tensor& x = a->value;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return make_node(op, std::move(out), {a}, [dfdx](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor g(p.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * dfdx(p.value[i], self.value[i]);
        p.accumulate(g);
    });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    return make_node("matmul", stldm::matmul(a->value, b->value), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) pa.accumulate(stldm::matmul_nt(self.grad, pb.value));
        if (pb.requires_grad) pb.accumulate(stldm::matmul_tn(pa.value, self.grad));
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    return make_node("matmul_nt", stldm::matmul_nt(a->value, b->value), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) pa.accumulate(stldm::matmul(self.grad, pb.value));
        if (pb.requires_grad) pb.accumulate(stldm::matmul_tn(self.grad, pa.value));
    });
}

Var transpose(const Var& a) {
    require_matrix(a, "transpose");
    return make_node("transpose", stldm::transpose(a->value), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(stldm::transpose(self.grad));
    });
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    return make_node("add", stldm::add(a->value, b->value), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i) {
            Node& p = parent(self, i);
            if (p.requires_grad) p.accumulate(self.grad);
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    return make_node("sub", stldm::sub(a->value, b->value), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) pa.accumulate(self.grad);
        if (pb.requires_grad) pb.accumulate(stldm::scaled(self.grad, -1.0));
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    return make_node("mul", stldm::hadamard(a->value, b->value), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) pa.accumulate(stldm::hadamard(self.grad, pb.value));
        if (pb.requires_grad) pb.accumulate(stldm::hadamard(self.grad, pa.value));
    });
}

Var div(const Var& a, const Var& b) {
    require_same(a, b, "div");
    Tensor out(a->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] / b->value[i];
    return make_node("div", std::move(out), {a, b}, [](Node& self) {
        Node& pa = parent(self, 0);
        Node& pb = parent(self, 1);
        if (pa.requires_grad) {
            Tensor g(pa.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] / pb.value[i];
            pa.accumulate(g);
        }
        if (pb.requires_grad) {
            Tensor g(pb.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i] * self.value[i] / pb.value[i];
            pb.accumulate(g);
        }
    });
}

Var scale(const Var& a, double s) {
    return make_node("scale", stldm::scaled(a->value, s), {a}, [s](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(stldm::scaled(self.grad, s));
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (auto& v : out.values()) v += s;
    return make_node("add_scalar", std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(self.grad);
    });
}

Var square(const Var& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var tanh(const Var& a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
    return unary(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x); });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var add_bias(const Var& x, const Var& bias) {
    require_matrix(x, "add_bias");
    const std::size_t rows = x->value.rows(), cols = x->value.cols();
    if (bias->value.size() != cols) {
        fail(ErrorKind::Shape, "add_bias: bias " + shape_to_string(bias->shape()) + " for input " +
                                   shape_to_string(x->shape()));
    }
    Tensor out = x->value;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) += bias->value[c];
    return make_node("add_bias", std::move(out), {x, bias}, [rows, cols](Node& self) {
        Node& px = parent(self, 0);
        Node& pb = parent(self, 1);
        if (px.requires_grad) px.accumulate(self.grad);
        if (pb.requires_grad) {
            Tensor g(pb.shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[c] += self.grad.at(r, c);
            pb.accumulate(g);
        }
    });
}

Var mul_rows(const Var& x, const Var& factors) {
    require_matrix(x, "mul_rows");
    const std::size_t rows = x->value.rows(), cols = x->value.cols();
    if (factors->value.size() != rows) {
        fail(ErrorKind::Shape, "mul_rows: factors " + shape_to_string(factors->shape()) + " for input " +
                                   shape_to_string(x->shape()));
    }
    Tensor out = x->value;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.at(r, c) *= factors->value[r];
    return make_node("mul_rows", std::move(out), {x, factors}, [rows, cols](Node& self) {
        Node& px = parent(self, 0);
        Node& pf = parent(self, 1);
        if (px.requires_grad) {
            Tensor g(px.shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g.at(r, c) = self.grad.at(r, c) * pf.value[r];
            px.accumulate(g);
        }
        if (pf.requires_grad) {
            Tensor g(pf.shape());
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) g[r] += self.grad.at(r, c) * px.value.at(r, c);
            pf.accumulate(g);
        }
    });
}

Var sum(const Var& a) {
    return make_node("sum", Tensor::scalar(stldm::sum(a->value)), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(Tensor(p.shape(), self.grad[0]));
    });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a->value.size());
    return make_node("mean", Tensor::scalar(stldm::sum(a->value) / n), {a}, [n](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(Tensor(p.shape(), self.grad[0] / n));
    });
}

Var softmax_rows(const Var& a) {
    require_matrix(a, "softmax_rows");
    return make_node("softmax_rows", stldm::softmax_rows(a->value), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        const std::size_t rows = self.value.rows(), cols = self.value.cols();
        Tensor g(p.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += self.grad.at(r, c) * self.value.at(r, c);
            for (std::size_t c = 0; c < cols; ++c) g.at(r, c) = self.value.at(r, c) * (self.grad.at(r, c) - dot);
        }
        p.accumulate(g);
    });
}

Var softmax_cols(const Var& a) { return transpose(softmax_rows(transpose(a))); }

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_matrix(x, "layer_norm_rows");
    const std::size_t rows = x->value.rows(), cols = x->value.cols();
    if (gamma->value.size() != cols || beta->value.size() != cols) {
        fail(ErrorKind::Shape, "layer_norm_rows: affine parameters do not match " + shape_to_string(x->shape()));
    }
    Tensor normed({rows, cols});
    std::vector<double> inv_std(rows);
    Tensor out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += x->value.at(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x->value.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            normed.at(r, c) = (x->value.at(r, c) - mu) * inv_std[r];
            out.at(r, c) = normed.at(r, c) * gamma->value[c] + beta->value[c];
        }
    }
    return make_node("layer_norm_rows", std::move(out), {x, gamma, beta},
                     [rows, cols, normed = std::move(normed), inv_std = std::move(inv_std)](Node& self) {
                         Node& px = parent(self, 0);
                         Node& pg = parent(self, 1);
                         Node& pb = parent(self, 2);
                         if (pg.requires_grad || pb.requires_grad) {
                             Tensor dg(pg.shape()), db(pb.shape());
                             for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < cols; ++c) {
                                     dg[c] += self.grad.at(r, c) * normed.at(r, c);
                                     db[c] += self.grad.at(r, c);
                                 }
                             if (pg.requires_grad) pg.accumulate(dg);
                             if (pb.requires_grad) pb.accumulate(db);
                         }
                         if (!px.requires_grad) return;
                         Tensor g(px.shape());
                         const double n = static_cast<double>(cols);
                         for (std::size_t r = 0; r < rows; ++r) {
                             double mean_d = 0.0, mean_dn = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) {
                                 const double d = self.grad.at(r, c) * pg.value[c];
                                 mean_d += d;
                                 mean_dn += d * normed.at(r, c);
                             }
                             mean_d /= n;
                             mean_dn /= n;
                             for (std::size_t c = 0; c < cols; ++c) {
                                 const double d = self.grad.at(r, c) * pg.value[c];
                                 g.at(r, c) = inv_std[r] * (d - mean_d - normed.at(r, c) * mean_dn);
                             }
                         }
                         px.accumulate(g);
                     });
}

Var divide_by_max(const Var& a) {
    const Tensor& x = a->value;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (x[i] > x[arg]) arg = i;
    const double peak = x[arg];
    if (!(peak > 0.0)) fail(ErrorKind::Numeric, "divide_by_max requires a positive maximum");
    Tensor out = x;
    for (auto& v : out.storage()) v /= peak;  // true division keeps the peak at exactly 1
    return make_node("divide_by_max", std::move(out), {a}, [arg, peak](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor g = stldm::scaled(self.grad, 1.0 / peak);
        double dot = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += self.grad[i] * p.value[i];
        g[arg] -= dot / (peak * peak);
        p.accumulate(g);
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a->value.reshaped(std::move(shape));
    return make_node("reshape", std::move(out), {a}, [](Node& self) {
        Node& p = parent(self, 0);
        if (p.requires_grad) p.accumulate(self.grad.reshaped(p.shape()));
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) fail(ErrorKind::Shape, "concat_rows of nothing");
    const std::size_t cols = parts.front()->value.cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        require_matrix(p, "concat_rows");
        if (p->value.cols() != cols) fail(ErrorKind::Shape, "concat_rows: column counts differ");
        rows += p->value.rows();
    }
    Tensor out({rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p->value.values().begin(), p->value.values().end(), out.data() + offset);
        offset += p->value.size();
    }
    return make_node("concat_rows", std::move(out), parts, [](Node& self) {
        std::size_t offset = 0;
        for (auto& pv : self.parents) {
            Node& p = *pv;
            if (p.requires_grad) {
                Tensor g(p.shape());
                std::copy(self.grad.data() + offset, self.grad.data() + offset + g.size(), g.data());
                p.accumulate(g);
            }
            offset += p.value.size();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) fail(ErrorKind::Shape, "concat_cols of nothing");
    const std::size_t rows = parts.front()->value.rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        require_matrix(p, "concat_cols");
        if (p->value.rows() != rows) fail(ErrorKind::Shape, "concat_cols: row counts differ");
        cols += p->value.cols();
    }
    Tensor out({rows, cols});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p->value.cols();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pc; ++c) out.at(r, offset + c) = p->value.at(r, c);
        offset += pc;
    }
    return make_node("concat_cols", std::move(out), parts, [rows](Node& self) {
        std::size_t offset = 0;
        for (auto& pv : self.parents) {
            Node& p = *pv;
            const std::size_t pc = p.value.cols();
            if (p.requires_grad) {
                Tensor g(p.shape());
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < pc; ++c) g.at(r, c) = self.grad.at(r, offset + c);
                p.accumulate(g);
            }
            offset += pc;
        }
    });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_rows");
    if (begin >= end || end > a->value.rows()) fail(ErrorKind::Shape, "slice_rows out of range");
    const std::size_t cols = a->value.cols();
    Tensor out({end - begin, cols});
    std::copy(a->value.data() + begin * cols, a->value.data() + end * cols, out.data());
    return make_node("slice_rows", std::move(out), {a}, [begin, cols](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
    });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_cols");
    if (begin >= end || end > a->value.cols()) fail(ErrorKind::Shape, "slice_cols out of range");
    const std::size_t rows = a->value.rows(), width = end - begin;
    Tensor out({rows, width});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < width; ++c) out.at(r, c) = a->value.at(r, begin + c);
    return make_node("slice_cols", std::move(out), {a}, [rows, width, begin](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c) g.at(r, begin + c) += self.grad.at(r, c);
    });
}

Var gather(const Var& a, std::vector<std::ptrdiff_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) fail(ErrorKind::Shape, "gather: index length does not match shape");
    const auto limit = static_cast<std::ptrdiff_t>(a->value.size());
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= limit) fail(ErrorKind::Shape, "gather: index out of range");
        out[i] = index[i] < 0 ? 0.0 : a->value[static_cast<std::size_t>(index[i])];
    }
    return make_node("gather", std::move(out), {a}, [index = std::move(index)](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i)
            if (index[i] >= 0) g[static_cast<std::size_t>(index[i])] += self.grad[i];
    });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t groups, double scale_factor) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    const std::size_t nq = q->value.rows(), nk = k->value.rows(), width = q->value.cols();
    const std::size_t vwidth = v->value.cols();
    if (k->value.cols() != width || v->value.rows() != nk) fail(ErrorKind::Shape, "attention: q/k/v shapes disagree");
    if (heads == 0 || width % heads != 0 || vwidth % heads != 0) {
        fail(ErrorKind::Config, "attention: heads " + std::to_string(heads) + " do not divide width " +
                                    std::to_string(width));
    }
    if (groups == 0 || nq % groups != 0 || nk % groups != 0) {
        fail(ErrorKind::Shape, "attention: groups do not divide row counts");
    }
    const std::size_t gq = nq / groups, gk = nk / groups, dh = width / heads, dv = vwidth / heads;

    auto probs = std::make_shared<std::vector<double>>(groups * heads * gq * gk);
    Tensor out({nq, vwidth});
    const Tensor& Q = q->value;
    const Tensor& K = k->value;
    const Tensor& V = v->value;
    std::vector<double> row(gk);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* P = probs->data() + (g * heads + h) * gq * gk;
            for (std::size_t i = 0; i < gq; ++i) {
                const double* qi = Q.data() + (g * gq + i) * width + h * dh;
                double peak = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < gk; ++j) {
                    const double* kj = K.data() + (g * gk + j) * width + h * dh;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    row[j] = acc * scale_factor;
                    peak = std::max(peak, row[j]);
                }
                double total = 0.0;
                for (std::size_t j = 0; j < gk; ++j) {
                    row[j] = std::exp(row[j] - peak);
                    total += row[j];
                }
                double* oi = out.data() + (g * gq + i) * vwidth + h * dv;
                for (std::size_t j = 0; j < gk; ++j) {
                    const double p = row[j] / total;
                    P[i * gk + j] = p;
                    const double* vj = V.data() + (g * gk + j) * vwidth + h * dv;
                    for (std::size_t c = 0; c < dv; ++c) oi[c] += p * vj[c];
                }
            }
        }
    }

    return make_node("attention", std::move(out), {q, k, v},
                     [=](Node& self) {
                         Node& pq = parent(self, 0);
                         Node& pk = parent(self, 1);
                         Node& pv = parent(self, 2);
                         Tensor dq(pq.shape()), dk(pk.shape()), dvt(pv.shape());
                         const Tensor& Qv = pq.value;
                         const Tensor& Kv = pk.value;
                         const Tensor& Vv = pv.value;
                         std::vector<double> dp(gk);
                         for (std::size_t g = 0; g < groups; ++g) {
                             for (std::size_t h = 0; h < heads; ++h) {
                                 const double* P = probs->data() + (g * heads + h) * gq * gk;
                                 for (std::size_t i = 0; i < gq; ++i) {
                                     const double* doi = self.grad.data() + (g * gq + i) * vwidth + h * dv;
                                     double dot = 0.0;
                                     for (std::size_t j = 0; j < gk; ++j) {
                                         const double* vj = Vv.data() + (g * gk + j) * vwidth + h * dv;
                                         double acc = 0.0;
                                         for (std::size_t c = 0; c < dv; ++c) acc += doi[c] * vj[c];
                                         dp[j] = acc;
                                         dot += acc * P[i * gk + j];
                                         double* dvj = dvt.data() + (g * gk + j) * vwidth + h * dv;
                                         for (std::size_t c = 0; c < dv; ++c) dvj[c] += P[i * gk + j] * doi[c];
                                     }
                                     const double* qi = Qv.data() + (g * gq + i) * width + h * dh;
                                     double* dqi = dq.data() + (g * gq + i) * width + h * dh;
                                     for (std::size_t j = 0; j < gk; ++j) {
                                         const double ds = P[i * gk + j] * (dp[j] - dot) * scale_factor;
                                         if (ds == 0.0) continue;
                                         const double* kj = Kv.data() + (g * gk + j) * width + h * dh;
                                         double* dkj = dk.data() + (g * gk + j) * width + h * dh;
                                         for (std::size_t c = 0; c < dh; ++c) {
                                             dqi[c] += ds * kj[c];
                                             dkj[c] += ds * qi[c];
                                         }
                                     }
                                 }
                             }
                         }
                         if (pq.requires_grad) pq.accumulate(dq);
                         if (pk.requires_grad) pk.accumulate(dk);
                         if (pv.requires_grad) pv.accumulate(dvt);
                     });
}

Var bilinear_sample(const Var& grid, std::size_t height, std::size_t width, const Var& points) {
    require_matrix(grid, "bilinear_sample");
    require_matrix(points, "bilinear_sample");
    if (grid->value.rows() != height * width) fail(ErrorKind::Shape, "bilinear_sample: grid rows != height*width");
    if (points->value.cols() != 2) fail(ErrorKind::Shape, "bilinear_sample: points must be [N x 2]");
    const std::size_t channels = grid->value.cols(), n = points->value.rows();

    struct Corner {
        std::ptrdiff_t cell;  // -1 when outside the grid
        double wy, wx;        // separable weights
        double sy, sx;        // d weight / d coordinate
    };
    auto corners = std::make_shared<std::vector<Corner>>(n * 4);
    Tensor out({n, channels});
    for (std::size_t i = 0; i < n; ++i) {
        const double py = points->value.at(i, 0), px = points->value.at(i, 1);
        const double y0 = std::floor(py), x0 = std::floor(px);
        const double fy = py - y0, fx = px - x0;
        for (std::size_t c = 0; c < 4; ++c) {
            const double qy = y0 + static_cast<double>(c / 2), qx = x0 + static_cast<double>(c % 2);
            Corner corner;
            corner.wy = (c / 2) ? fy : 1.0 - fy;
            corner.wx = (c % 2) ? fx : 1.0 - fx;
            corner.sy = (c / 2) ? 1.0 : -1.0;
            corner.sx = (c % 2) ? 1.0 : -1.0;
            const bool inside = qy >= 0 && qx >= 0 && qy < static_cast<double>(height) && qx < static_cast<double>(width);
            corner.cell = inside ? static_cast<std::ptrdiff_t>(qy) * static_cast<std::ptrdiff_t>(width) +
                                       static_cast<std::ptrdiff_t>(qx)
                                 : -1;
            (*corners)[i * 4 + c] = corner;
            if (corner.cell < 0) continue;
            const double w = corner.wy * corner.wx;
            const double* src = grid->value.data() + static_cast<std::size_t>(corner.cell) * channels;
            double* dst = out.data() + i * channels;
            for (std::size_t ch = 0; ch < channels; ++ch) dst[ch] += w * src[ch];
        }
    }
    return make_node("bilinear_sample", std::move(out), {grid, points}, [=](Node& self) {
        Node& pg = parent(self, 0);
        Node& pp = parent(self, 1);
        Tensor dgrid = pg.requires_grad ? Tensor(pg.shape()) : Tensor();
        Tensor dpts = pp.requires_grad ? Tensor(pp.shape()) : Tensor();
        for (std::size_t i = 0; i < n; ++i) {
            const double* go = self.grad.data() + i * channels;
            for (std::size_t c = 0; c < 4; ++c) {
                const Corner& corner = (*corners)[i * 4 + c];
                if (corner.cell < 0) continue;
                const std::size_t base = static_cast<std::size_t>(corner.cell) * channels;
                if (pg.requires_grad) {
                    const double w = corner.wy * corner.wx;
                    for (std::size_t ch = 0; ch < channels; ++ch) dgrid[base + ch] += w * go[ch];
                }
                if (pp.requires_grad) {
                    double dot = 0.0;
                    for (std::size_t ch = 0; ch < channels; ++ch) dot += go[ch] * pg.value[base + ch];
                    dpts.at(i, 0) += dot * corner.sy * corner.wx;
                    dpts.at(i, 1) += dot * corner.wy * corner.sx;
                }
            }
        }
        if (pg.requires_grad) pg.accumulate(dgrid);
        if (pp.requires_grad) pp.accumulate(dpts);
    });
}

Var avg_pool_grid(const Var& grid, std::size_t height, std::size_t width, std::size_t factor) {
    require_matrix(grid, "avg_pool_grid");
    if (factor == 0 || height % factor || width % factor) {
        fail(ErrorKind::Shape, "avg_pool_grid: factor " + std::to_string(factor) + " does not divide " +
                                   std::to_string(height) + "x" + std::to_string(width));
    }
    if (grid->value.rows() != height * width) fail(ErrorKind::Shape, "avg_pool_grid: grid rows != height*width");
    const std::size_t channels = grid->value.cols();
    const std::size_t oh = height / factor, ow = width / factor;
    const double inv = 1.0 / static_cast<double>(factor * factor);
    Tensor out({oh * ow, channels});
    for (std::size_t r = 0; r < height; ++r)
        for (std::size_t c = 0; c < width; ++c) {
            const double* src = grid->value.data() + (r * width + c) * channels;
            double* dst = out.data() + ((r / factor) * ow + c / factor) * channels;
            for (std::size_t ch = 0; ch < channels; ++ch) dst[ch] += inv * src[ch];
        }
    return make_node("avg_pool_grid", std::move(out), {grid}, [=](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor g(p.shape());
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t c = 0; c < width; ++c) {
                const double* src = self.grad.data() + ((r / factor) * ow + c / factor) * channels;
                double* dst = g.data() + (r * width + c) * channels;
                for (std::size_t ch = 0; ch < channels; ++ch) dst[ch] = inv * src[ch];
            }
        p.accumulate(g);
    });
}

Var bce_mean(const Var& prediction, const Tensor& target) {
    if (prediction->value.size() != target.size()) fail(ErrorKind::Shape, "bce_mean: size mismatch");
    constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
    const double n = static_cast<double>(target.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double p = std::clamp(prediction->value[i], lo, hi);
        loss -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    return make_node("bce_mean", Tensor::scalar(loss / n), {prediction}, [target, n](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor g(p.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = p.value[i];
            if (v <= lo || v >= hi) continue;
            g[i] = self.grad[0] * (v - target[i]) / (v * (1.0 - v)) / n;
        }
        p.accumulate(g);
    });
}

Var mse_mean(const Var& prediction, const Tensor& target) {
    if (prediction->value.size() != target.size()) fail(ErrorKind::Shape, "mse_mean: size mismatch");
    const double n = static_cast<double>(target.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double d = prediction->value[i] - target[i];
        loss += d * d;
    }
    return make_node("mse_mean", Tensor::scalar(loss / n), {prediction}, [target, n](Node& self) {
        Node& p = parent(self, 0);
        if (!p.requires_grad) return;
        Tensor g(p.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[0] * 2.0 * (p.value[i] - target[i]) / n;
        p.accumulate(g);
    });
}

Var threshold(const Var& a, double level) {
    Tensor out(a->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] > level ? 1.0 : 0.0;
    return make_node("threshold", std::move(out), {a}, nullptr);
}

}  // namespace stldm::ad
