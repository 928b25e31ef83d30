#include "emocirc/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>

namespace emc {

Tensor2 Tensor2::identity(int n) {
    Tensor2 t(n, n);
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

static void check_matmul_shapes(const Tensor2& a, const Tensor2& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) +
                         " vs " + std::to_string(b.rows) + ")");
    }
}

// One output row per iteration; the k-loop order is identical in the serial
// and parallel paths, so both produce bit-identical results.
static inline void matmul_row(const Tensor2& a, const Tensor2& b, Tensor2& c, int i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int k = 0; k < a.cols; ++k) {
        const double av = arow[k];
        if (av == 0.0) continue;
        const double* brow = b.row(k);
        for (int j = 0; j < b.cols; ++j) crow[j] += av * brow[j];
    }
}

Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
    check_matmul_shapes(a, b);
    Tensor2 c(a.rows, b.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) matmul_row(a, b, c, i);
    return c;
}

Tensor2 matmul_serial(const Tensor2& a, const Tensor2& b) {
    check_matmul_shapes(a, b);
    Tensor2 c(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i) matmul_row(a, b, c, i);
    return c;
}

static inline void matmul_nt_row(const Tensor2& a, const Tensor2& b, Tensor2& c, int i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < b.rows; ++j) {
        const double* brow = b.row(j);
        double s = 0.0;
        for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
        crow[j] = s;
    }
}

Tensor2 matmul_nt(const Tensor2& a, const Tensor2& b) {
    if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
    Tensor2 c(a.rows, b.rows);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < a.rows; ++i) matmul_nt_row(a, b, c, i);
    return c;
}

Tensor2 matmul_nt_serial(const Tensor2& a, const Tensor2& b) {
    if (a.cols != b.cols) throw ShapeError("matmul_nt: inner dimensions differ");
    Tensor2 c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) matmul_nt_row(a, b, c, i);
    return c;
}

void softmax_row_prefix(std::span<double> row, int active) {
    if (active <= 0) return;
    double mx = row[0];
    for (int j = 1; j < active; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < active; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (int j = 0; j < active; ++j) row[j] /= sum;
    for (size_t j = active; j < row.size(); ++j) row[j] = 0.0;
}

Tensor2 softmax_rows(const Tensor2& x) {
    Tensor2 y = x;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < y.rows; ++i) softmax_row_prefix(y.row_span(i), y.cols);
    return y;
}

Tensor2 softmax_rows_serial(const Tensor2& x) {
    Tensor2 y = x;
    for (int i = 0; i < y.rows; ++i) softmax_row_prefix(y.row_span(i), y.cols);
    return y;
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
    return s;
}

double norm(std::span<const double> u) { return std::sqrt(dot(u, u)); }

double cosine_sim(std::span<const double> u, std::span<const double> v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu == 0.0 || nv == 0.0) throw DegenerateVectorError("cosine_sim: zero-norm input");
    double c = dot(u, v) / (nu * nv);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

double gelu(double x) {
    const double inner = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(inner));
}

double gelu_deriv(double x) {
    const double inner = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(inner);
    const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
}

void layernorm_row(std::span<const double> x, std::span<const double> gain,
                   std::span<const double> bias, std::span<double> out) {
    const size_t n = x.size();
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (size_t i = 0; i < n; ++i) {
        double y = (x[i] - mean) * inv;
        if (!gain.empty()) y *= gain[i];
        if (!bias.empty()) y += bias[i];
        out[i] = y;
    }
}

Tensor2 layernorm_rows(const Tensor2& x, std::span<const double> gain,
                       std::span<const double> bias) {
    Tensor2 y(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) layernorm_row(x.row_span(i), gain, bias, y.row_span(i));
    return y;
}

bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

bool all_finite(const Tensor2& t) { return all_finite(std::span<const double>(t.data)); }

std::uint64_t fnv1a64(const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace emc
