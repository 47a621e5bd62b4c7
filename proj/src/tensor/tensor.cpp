#include "tensor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "common/error.hpp"

namespace stldm {

std::string shape_to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {

void check_shape(const Shape& shape) {
    if (shape.empty()) fail(ErrorKind::Shape, "tensor shape must have at least one dimension");
    for (auto d : shape) {
        if (d == 0) fail(ErrorKind::Shape, "tensor dimensions must be positive, got " + shape_to_string(shape));
    }
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        fail(ErrorKind::Shape, std::string(what) + " expects a matrix, got " + shape_to_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Shape, std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) +
                                   " vs " + shape_to_string(b.shape()));
    }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
        fail(ErrorKind::Shape, "data length " + std::to_string(data_.size()) + " does not match shape " +
                                   shape_to_string(shape_));
    }
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

double Tensor::item() const {
    if (data_.size() != 1) fail(ErrorKind::Shape, "item() on tensor of shape " + shape_to_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        fail(ErrorKind::Shape, "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t Rng::below(std::size_t n) {
    if (n == 0) return 0;
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Tensor random_uniform(const Shape& shape, double lo, double hi, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_normal(const Shape& shape, double stddev, Rng& rng) {
    Tensor t(shape);
    for (auto& v : t.values()) v = stddev * rng.normal();
    return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        fail(ErrorKind::Dimension, "matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                                       shape_to_string(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        fail(ErrorKind::Dimension, "matmul_nt inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                                       shape_to_string(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out.at(i, j) = acc;
        }
    }
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        fail(ErrorKind::Dimension, "matmul_tn inner dimensions differ: " + shape_to_string(a.shape()) + "^T x " +
                                       shape_to_string(b.shape()));
    }
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = pa + p * m;
        const double* brow = pb + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor softmax_rows(const Tensor& a) {
    require_matrix(a, "softmax_rows");
    Tensor out(a.shape());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* in = a.data() + i * n;
        double* o = out.data() + i * n;
        const double peak = *std::max_element(in, in + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - peak);
            total += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= total;
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scaled(const Tensor& a, double s) {
    Tensor out = a;
    for (auto& v : out.values()) v *= s;
    return out;
}

double sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.values()) total += v;
    return total;
}

double max_value(const Tensor& a) { return *std::max_element(a.values().begin(), a.values().end()); }

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

bool all_finite(const Tensor& a) {
    return std::all_of(a.values().begin(), a.values().end(), [](double v) { return std::isfinite(v); });
}

void require_finite(const Tensor& a, const std::string& what) {
    if (!all_finite(a)) fail(ErrorKind::Numeric, "non-finite values in " + what);
}

Tensor sinusoidal_positional_encoding(std::size_t length, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) {
        fail(ErrorKind::Config, "positional encoding dim must be even and positive, got " + std::to_string(dim));
    }
    Tensor out({length, dim});
    for (std::size_t pos = 0; pos < length; ++pos) {
        for (std::size_t i = 0; i < dim / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            const double phase = static_cast<double>(pos) * freq;
            out.at(pos, 2 * i) = std::sin(phase);
            out.at(pos, 2 * i + 1) = std::cos(phase);
        }
    }
    return out;
}

}  // namespace stldm
