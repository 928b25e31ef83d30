#include "emocirc/tape.hpp"

#include <cmath>
#include <cstring>

namespace emc {

const AdjointTape::Node& AdjointTape::node_at(int n) const {
    if (n < 0 || static_cast<size_t>(n) >= nodes_.size())
        throw IndexError("tape: handle " + std::to_string(n) + " not on tape");
    return nodes_[static_cast<size_t>(n)];
}

int AdjointTape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int AdjointTape::leaf(Tensor2 v) {
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    return push(std::move(n));
}

int AdjointTape::matmul(int a, int b) {
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a, b};
    n.value = emc::matmul(node_at(a).value, node_at(b).value);
    return push(std::move(n));
}

int AdjointTape::matmul_nt(int a, int b) {
    Node n;
    n.op = Op::MatMulNT;
    n.inputs = {a, b};
    n.value = emc::matmul_nt(node_at(a).value, node_at(b).value);
    return push(std::move(n));
}

int AdjointTape::add(int a, int b) {
    const Tensor2& va = node_at(a).value;
    const Tensor2& vb = node_at(b).value;
    if (!va.same_shape(vb)) throw ShapeError("tape add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.inputs = {a, b};
    n.value = va;
    for (size_t i = 0; i < n.value.size(); ++i) n.value.data[i] += vb.data[i];
    return push(std::move(n));
}

int AdjointTape::sub(int a, int b) {
    const Tensor2& va = node_at(a).value;
    const Tensor2& vb = node_at(b).value;
    if (!va.same_shape(vb)) throw ShapeError("tape sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.inputs = {a, b};
    n.value = va;
    for (size_t i = 0; i < n.value.size(); ++i) n.value.data[i] -= vb.data[i];
    return push(std::move(n));
}

int AdjointTape::scale(int a, double c) {
    Node n;
    n.op = Op::Scale;
    n.inputs = {a};
    n.scalar = c;
    n.value = node_at(a).value;
    for (double& x : n.value.data) x *= c;
    return push(std::move(n));
}

int AdjointTape::slice_cols(int a, int col0, int width) {
    const Tensor2& v = node_at(a).value;
    if (col0 < 0 || width < 0 || col0 + width > v.cols)
        throw IndexError("tape slice_cols: out of range");
    Node n;
    n.op = Op::SliceCols;
    n.inputs = {a};
    n.i0 = col0;
    n.i1 = width;
    n.value = Tensor2(v.rows, width);
    for (int i = 0; i < v.rows; ++i)
        std::memcpy(n.value.row(i), v.row(i) + col0, sizeof(double) * width);
    return push(std::move(n));
}

int AdjointTape::concat_cols(const std::vector<int>& parts) {
    if (parts.empty()) throw ShapeError("tape concat_cols: no parts");
    int rows = node_at(parts[0]).value.rows;
    int cols = 0;
    for (int p : parts) {
        const Tensor2& v = node_at(p).value;
        if (v.rows != rows) throw ShapeError("tape concat_cols: row mismatch");
        cols += v.cols;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.inputs = parts;
    n.value = Tensor2(rows, cols);
    int at = 0;
    for (int p : parts) {
        const Tensor2& v = node_at(p).value;
        for (int i = 0; i < rows; ++i)
            std::memcpy(n.value.row(i) + at, v.row(i), sizeof(double) * v.cols);
        at += v.cols;
    }
    return push(std::move(n));
}

int AdjointTape::causal_softmax(int a) {
    Node n;
    n.op = Op::CausalSoftmax;
    n.inputs = {a};
    n.value = node_at(a).value;
    for (int i = 0; i < n.value.rows; ++i)
        softmax_row_prefix(n.value.row_span(i), std::min(i + 1, n.value.cols));
    return push(std::move(n));
}

int AdjointTape::gelu_op(int a) {
    Node n;
    n.op = Op::Gelu;
    n.inputs = {a};
    n.value = node_at(a).value;
    for (double& x : n.value.data) x = gelu(x);
    return push(std::move(n));
}

int AdjointTape::layernorm(int a, std::vector<double> gain, std::vector<double> bias) {
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {a};
    n.value = layernorm_rows(node_at(a).value, gain, bias);
    n.gain = std::move(gain);
    n.bias = std::move(bias);
    return push(std::move(n));
}

int AdjointTape::pick_row(int a, int r) {
    const Tensor2& v = node_at(a).value;
    if (r < 0 || r >= v.rows) throw IndexError("tape pick_row: out of range");
    Node n;
    n.op = Op::PickRow;
    n.inputs = {a};
    n.i0 = r;
    n.value = Tensor2(1, v.cols);
    std::memcpy(n.value.row(0), v.row(r), sizeof(double) * v.cols);
    return push(std::move(n));
}

int AdjointTape::cosine(int a, int b) {
    const Tensor2& va = node_at(a).value;
    const Tensor2& vb = node_at(b).value;
    if (va.rows != 1 || vb.rows != 1 || va.cols != vb.cols)
        throw ShapeError("tape cosine: expects two 1 x n inputs of equal length");
    Node n;
    n.op = Op::Cosine;
    n.inputs = {a, b};
    n.value = Tensor2(1, 1);
    n.value.at(0, 0) = cosine_sim(va.row_span(0), vb.row_span(0));
    return push(std::move(n));
}

const Tensor2& AdjointTape::grad(int n) const {
    const Node& node = node_at(n);
    if (!node.has_grad) {
        static thread_local Tensor2 zeros;
        zeros = Tensor2(node.value.rows, node.value.cols);
        return zeros;
    }
    return node.grad;
}

void AdjointTape::accumulate(Tensor2& dst, const Tensor2& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

void AdjointTape::backward(int seed) {
    const Node& sn = node_at(seed);
    if (sn.value.rows != 1 || sn.value.cols != 1)
        throw IndexError("tape backward: seed is not a scalar node");
    for (auto& n : nodes_) {
        n.grad = Tensor2(n.value.rows, n.value.cols);
        n.has_grad = false;
    }
    nodes_[static_cast<size_t>(seed)].grad.at(0, 0) = 1.0;
    nodes_[static_cast<size_t>(seed)].has_grad = true;

    for (int idx = static_cast<int>(nodes_.size()) - 1; idx >= 0; --idx) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        if (!n.has_grad) continue;
        switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            Node& b = nodes_[static_cast<size_t>(n.inputs[1])];
            // dA[i,k] += sum_j dC[i,j] * B[k,j]
            for (int i = 0; i < a.value.rows; ++i)
                for (int k = 0; k < a.value.cols; ++k) {
                    double s = 0.0;
                    for (int j = 0; j < b.value.cols; ++j)
                        s += n.grad.at(i, j) * b.value.at(k, j);
                    a.grad.at(i, k) += s;
                }
            // dB[k,j] += sum_i A[i,k] * dC[i,j]
            for (int k = 0; k < b.value.rows; ++k)
                for (int j = 0; j < b.value.cols; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < a.value.rows; ++i)
                        s += a.value.at(i, k) * n.grad.at(i, j);
                    b.grad.at(k, j) += s;
                }
            a.has_grad = b.has_grad = true;
            break;
        }
        case Op::MatMulNT: {
            // C = A * B^T
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            Node& b = nodes_[static_cast<size_t>(n.inputs[1])];
            // dA[i,k] += sum_j dC[i,j] * B[j,k]
            for (int i = 0; i < a.value.rows; ++i)
                for (int k = 0; k < a.value.cols; ++k) {
                    double s = 0.0;
                    for (int j = 0; j < b.value.rows; ++j)
                        s += n.grad.at(i, j) * b.value.at(j, k);
                    a.grad.at(i, k) += s;
                }
            // dB[j,k] += sum_i dC[i,j] * A[i,k]
            for (int j = 0; j < b.value.rows; ++j)
                for (int k = 0; k < b.value.cols; ++k) {
                    double s = 0.0;
                    for (int i = 0; i < a.value.rows; ++i)
                        s += n.grad.at(i, j) * a.value.at(i, k);
                    b.grad.at(j, k) += s;
                }
            a.has_grad = b.has_grad = true;
            break;
        }
        case Op::Add: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            Node& b = nodes_[static_cast<size_t>(n.inputs[1])];
            accumulate(a.grad, n.grad);
            accumulate(b.grad, n.grad);
            a.has_grad = b.has_grad = true;
            break;
        }
        case Op::Sub: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            Node& b = nodes_[static_cast<size_t>(n.inputs[1])];
            accumulate(a.grad, n.grad);
            for (size_t i = 0; i < b.grad.size(); ++i) b.grad.data[i] -= n.grad.data[i];
            a.has_grad = b.has_grad = true;
            break;
        }
        case Op::Scale: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            for (size_t i = 0; i < a.grad.size(); ++i) a.grad.data[i] += n.scalar * n.grad.data[i];
            a.has_grad = true;
            break;
        }
        case Op::SliceCols: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            for (int i = 0; i < n.value.rows; ++i)
                for (int j = 0; j < n.i1; ++j) a.grad.at(i, n.i0 + j) += n.grad.at(i, j);
            a.has_grad = true;
            break;
        }
        case Op::ConcatCols: {
            int at = 0;
            for (int p : n.inputs) {
                Node& a = nodes_[static_cast<size_t>(p)];
                for (int i = 0; i < a.value.rows; ++i)
                    for (int j = 0; j < a.value.cols; ++j) a.grad.at(i, j) += n.grad.at(i, at + j);
                at += a.value.cols;
                a.has_grad = true;
            }
            break;
        }
        case Op::CausalSoftmax: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            for (int i = 0; i < n.value.rows; ++i) {
                const int active = std::min(i + 1, n.value.cols);
                double inner = 0.0;
                for (int j = 0; j < active; ++j) inner += n.value.at(i, j) * n.grad.at(i, j);
                for (int j = 0; j < active; ++j)
                    a.grad.at(i, j) += n.value.at(i, j) * (n.grad.at(i, j) - inner);
            }
            a.has_grad = true;
            break;
        }
        case Op::Gelu: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            for (size_t i = 0; i < a.grad.size(); ++i)
                a.grad.data[i] += n.grad.data[i] * gelu_deriv(a.value.data[i]);
            a.has_grad = true;
            break;
        }
        case Op::LayerNorm: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            const int cols = a.value.cols;
            std::vector<double> dyg(static_cast<size_t>(cols));
            std::vector<double> hhat(static_cast<size_t>(cols));
            for (int i = 0; i < a.value.rows; ++i) {
                double mean = 0.0;
                for (int j = 0; j < cols; ++j) mean += a.value.at(i, j);
                mean /= cols;
                double var = 0.0;
                for (int j = 0; j < cols; ++j) {
                    const double d = a.value.at(i, j) - mean;
                    var += d * d;
                }
                var /= cols;
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < cols; ++j) {
                    hhat[static_cast<size_t>(j)] = (a.value.at(i, j) - mean) * inv;
                    double g = n.grad.at(i, j);
                    if (!n.gain.empty()) g *= n.gain[static_cast<size_t>(j)];
                    dyg[static_cast<size_t>(j)] = g;
                    m1 += g;
                    m2 += g * hhat[static_cast<size_t>(j)];
                }
                m1 /= cols;
                m2 /= cols;
                for (int j = 0; j < cols; ++j)
                    a.grad.at(i, j) +=
                        (dyg[static_cast<size_t>(j)] - m1 - hhat[static_cast<size_t>(j)] * m2) * inv;
            }
            a.has_grad = true;
            break;
        }
        case Op::PickRow: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            for (int j = 0; j < n.value.cols; ++j) a.grad.at(n.i0, j) += n.grad.at(0, j);
            a.has_grad = true;
            break;
        }
        case Op::Cosine: {
            Node& a = nodes_[static_cast<size_t>(n.inputs[0])];
            Node& b = nodes_[static_cast<size_t>(n.inputs[1])];
            const double g = n.grad.at(0, 0);
            const double nu = norm(a.value.row_span(0));
            const double nv = norm(b.value.row_span(0));
            const double c = n.value.at(0, 0);
            for (int j = 0; j < a.value.cols; ++j) {
                const double u = a.value.at(0, j);
                const double v = b.value.at(0, j);
                a.grad.at(0, j) += g * (v / (nu * nv) - c * u / (nu * nu));
                b.grad.at(0, j) += g * (u / (nu * nv) - c * v / (nv * nv));
            }
            a.has_grad = b.has_grad = true;
            break;
        }
        }
    }
}

Tensor2 AdjointTape::execute(const Node& n) const {
    switch (n.op) {
    case Op::Leaf:
        return n.value;
    case Op::MatMul:
        return emc::matmul(node_at(n.inputs[0]).value, node_at(n.inputs[1]).value);
    case Op::MatMulNT:
        return emc::matmul_nt(node_at(n.inputs[0]).value, node_at(n.inputs[1]).value);
    case Op::Add: {
        Tensor2 v = node_at(n.inputs[0]).value;
        const Tensor2& b = node_at(n.inputs[1]).value;
        for (size_t i = 0; i < v.size(); ++i) v.data[i] += b.data[i];
        return v;
    }
    case Op::Sub: {
        Tensor2 v = node_at(n.inputs[0]).value;
        const Tensor2& b = node_at(n.inputs[1]).value;
        for (size_t i = 0; i < v.size(); ++i) v.data[i] -= b.data[i];
        return v;
    }
    case Op::Scale: {
        Tensor2 v = node_at(n.inputs[0]).value;
        for (double& x : v.data) x *= n.scalar;
        return v;
    }
    case Op::SliceCols: {
        const Tensor2& a = node_at(n.inputs[0]).value;
        Tensor2 v(a.rows, n.i1);
        for (int i = 0; i < a.rows; ++i)
            std::memcpy(v.row(i), a.row(i) + n.i0, sizeof(double) * n.i1);
        return v;
    }
    case Op::ConcatCols: {
        int rows = node_at(n.inputs[0]).value.rows;
        Tensor2 v(rows, n.value.cols);
        int at = 0;
        for (int p : n.inputs) {
            const Tensor2& a = node_at(p).value;
            for (int i = 0; i < rows; ++i)
                std::memcpy(v.row(i) + at, a.row(i), sizeof(double) * a.cols);
            at += a.cols;
        }
        return v;
    }
    case Op::CausalSoftmax: {
        Tensor2 v = node_at(n.inputs[0]).value;
        for (int i = 0; i < v.rows; ++i)
            softmax_row_prefix(v.row_span(i), std::min(i + 1, v.cols));
        return v;
    }
    case Op::Gelu: {
        Tensor2 v = node_at(n.inputs[0]).value;
        for (double& x : v.data) x = gelu(x);
        return v;
    }
    case Op::LayerNorm:
        return layernorm_rows(node_at(n.inputs[0]).value, n.gain, n.bias);
    case Op::PickRow: {
        const Tensor2& a = node_at(n.inputs[0]).value;
        Tensor2 v(1, a.cols);
        std::memcpy(v.row(0), a.row(n.i0), sizeof(double) * a.cols);
        return v;
    }
    case Op::Cosine: {
        Tensor2 v(1, 1);
        v.at(0, 0) = cosine_sim(node_at(n.inputs[0]).value.row_span(0),
                                node_at(n.inputs[1]).value.row_span(0));
        return v;
    }
    }
    throw InternalError("tape: unknown op");
}

bool AdjointTape::replay_matches() const {
    for (const Node& n : nodes_) {
        if (n.op == Op::Leaf) continue;
        Tensor2 v = execute(n);
        if (!v.same_shape(n.value)) return false;
        if (std::memcmp(v.data.data(), n.value.data.data(), v.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

} // namespace emc
