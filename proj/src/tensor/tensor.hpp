#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace stldm {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Every dimension is positive.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Matrix view helpers; valid for rank-2 tensors.
    std::size_t rows() const { return shape_.at(0); }
    std::size_t cols() const { return shape_.size() > 1 ? shape_[1] : 1; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::vector<double>& storage() noexcept { return data_; }
    const std::vector<double>& storage() const noexcept { return data_; }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    double item() const;

    Tensor reshaped(Shape shape) const;
    void fill(double value);

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

// Seeded generator used for every initialization and sampling decision.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform();                         // [0, 1)
    double uniform(double lo, double hi);
    double normal();                          // standard normal, Box-Muller
    std::size_t below(std::size_t n);         // uniform integer in [0, n)

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Derive an independent stream seed from a base seed and a tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag);

Tensor random_uniform(const Shape& shape, double lo, double hi, Rng& rng);
Tensor random_normal(const Shape& shape, double stddev, Rng& rng);

// Dense kernels. All shapes are checked; mismatches throw Dimension/Shape errors.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // [k,m]^T x [k,n]
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
double sum(const Tensor& a);
double max_value(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);
void require_finite(const Tensor& a, const std::string& what);

// Interleaved sin/cos over geometric frequencies (base 10000).
Tensor sinusoidal_positional_encoding(std::size_t length, std::size_t dim);

}  // namespace stldm
