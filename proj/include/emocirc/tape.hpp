#pragma once

#include <vector>

#include "emocirc/tensor.hpp"

namespace emc {

// Reverse-mode differentiation over an ordered record of primitive ops.
// The tape holds only the ops one metric computation needs (callers build a
// fresh tape per pass and drop it afterwards); the backward sweep visits the
// record in strict reverse order exactly once and accumulates adjoints into
// per-node gradient slots.
class AdjointTape {
public:
    enum class Op {
        Leaf,
        MatMul,
        MatMulNT, // a * b^T
        Add,
        Sub,
        Scale,
        SliceCols,
        ConcatCols,
        CausalSoftmax,
        Gelu,
        LayerNorm,
        PickRow,
        Cosine,
    };

    struct Node {
        Op op = Op::Leaf;
        std::vector<int> inputs;
        Tensor2 value;
        Tensor2 grad;        // same shape as value once backward ran
        bool has_grad = false;
        // op payload
        double scalar = 0.0;            // Scale
        int i0 = 0, i1 = 0;             // SliceCols: col0,width; PickRow: row
        std::vector<double> gain, bias; // LayerNorm affine constants
    };

    int leaf(Tensor2 v);
    int constant(Tensor2 v) { return leaf(std::move(v)); }

    int matmul(int a, int b);
    int matmul_nt(int a, int b);
    int add(int a, int b);
    int sub(int a, int b);
    int scale(int a, double c);
    int slice_cols(int a, int col0, int width);
    int concat_cols(const std::vector<int>& parts);
    // Row i is softmaxed over columns [0, i+1); the rest become 0.
    int causal_softmax(int a);
    int gelu_op(int a);
    int layernorm(int a, std::vector<double> gain, std::vector<double> bias);
    int pick_row(int a, int r);
    // Both inputs 1 x n; output is a 1 x 1 scalar.
    int cosine(int a, int b);

    const Tensor2& value(int n) const { return node_at(n).value; }
    // Gradient of the seed scalar with respect to node n; zeros if the seed
    // does not depend on n.
    const Tensor2& grad(int n) const;

    // Seeds d(seed)/d(seed) = 1 and sweeps the record backwards. The seed
    // must be a 1 x 1 node recorded on this tape.
    void backward(int seed);

    // Re-executes every recorded op from its stored inputs and checks the
    // stored outputs are reproduced bit-exactly.
    bool replay_matches() const;

    size_t node_count() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;

    const Node& node_at(int n) const;
    int push(Node n);
    Tensor2 execute(const Node& n) const;
    static void accumulate(Tensor2& dst, const Tensor2& src);
};

} // namespace emc
