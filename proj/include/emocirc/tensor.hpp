#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "emocirc/errors.hpp"

namespace emc {

// Dense row-major matrix of doubles. The whole engine runs in float64:
// the gradient-vs-finite-difference checks need the headroom and the toy
// scale makes the cost irrelevant.
struct Tensor2 {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor2() = default;
    Tensor2(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {
        if (r < 0 || c < 0) throw ShapeError("Tensor2: negative dimension");
    }

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    std::span<double> row_span(int r) { return {row(r), static_cast<size_t>(cols)}; }
    std::span<const double> row_span(int r) const { return {row(r), static_cast<size_t>(cols)}; }

    size_t size() const { return data.size(); }
    bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

    static Tensor2 identity(int n);
};

// All reductions use a fixed left-to-right order over the inner dimension so
// results are bit-identical across runs and thread counts.
Tensor2 matmul(const Tensor2& a, const Tensor2& b);

// Serial reference kept for testing and benchmarking against the OpenMP path.
Tensor2 matmul_serial(const Tensor2& a, const Tensor2& b);

// a * b^T without materializing the transpose (attention scores kernel).
Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b);
Tensor2 matmul_nt_serial(const Tensor2& a, const Tensor2& b);

// Row-wise softmax with the max subtracted before exponentiation. Each output
// row sums to 1 within 1e-12.
Tensor2 softmax_rows(const Tensor2& x);
Tensor2 softmax_rows_serial(const Tensor2& x);

// Softmax over the first `active` entries of a row; the rest are set to 0.
// This is the causal-attention kernel (active = query position + 1).
void softmax_row_prefix(std::span<double> row, int active);

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);

// u.v / (|u||v|). Throws DegenerateVectorError on zero-norm input.
double cosine_sim(std::span<const double> u, std::span<const double> v);

// tanh-approximation GELU and its derivative.
double gelu(double x);
double gelu_deriv(double x);

// Row-wise layer norm: y = (x - mean) / sqrt(var + eps) * gain + bias.
// gain/bias may be empty spans, meaning gain 1 and bias 0.
inline constexpr double kLayerNormEps = 1e-12;
void layernorm_row(std::span<const double> x, std::span<const double> gain,
                   std::span<const double> bias, std::span<double> out);
Tensor2 layernorm_rows(const Tensor2& x, std::span<const double> gain,
                       std::span<const double> bias);

bool all_finite(const Tensor2& t);
bool all_finite(std::span<const double> v);

// FNV-1a over raw little-endian bytes; used for input fingerprints.
std::uint64_t fnv1a64(const void* bytes, size_t n);

} // namespace emc
