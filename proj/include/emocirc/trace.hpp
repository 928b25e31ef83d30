#pragma once

#include <string>
#include <variant>
#include <vector>

#include "emocirc/model.hpp"

namespace emc {

// What to record during a pass. Requesting nothing yields an empty trace
// and leaves the pass outputs untouched. Layer/position ranges narrow the
// residual, head-output, and neuron families; score matrices are captured
// whole per (layer, head) within the layer range.
struct CaptureFilter {
    bool residual = false;
    bool head_output = false;
    bool scores = false;
    bool neurons = false;
    int layer_lo = 0;
    int layer_hi = -1; // inclusive; -1 means last layer
    int pos_lo = 0;
    int pos_hi = -1;   // inclusive; -1 means last position

    static CaptureFilter none() { return {}; }
    static CaptureFilter full() {
        CaptureFilter f;
        f.residual = f.head_output = f.scores = f.neurons = true;
        return f;
    }
    bool layer_in(int l) const { return l >= layer_lo && (layer_hi < 0 || l <= layer_hi); }
    bool pos_in(int p) const { return p >= pos_lo && (pos_hi < 0 || p <= pos_hi); }
    bool anything() const { return residual || head_output || scores || neurons; }
};

// Recorded activations of one forward pass. Residuals are recorded at the
// post-block point (after the MLP add); head outputs are the pre-W_O
// per-head slices; scores are the pre-softmax attention scores as used by
// the pass (post any intervention scaling). Immutable once the pass ends.
struct ActivationTrace {
    int seq_len = 0;
    std::uint64_t input_fingerprint = 0;
    CaptureFilter filter;

    Tensor2 embedding;                          // layer-0 input residual (with residual family)
    std::vector<Tensor2> residual;              // [layer] seq x d_model
    std::vector<std::vector<Tensor2>> head_out; // [layer][head] seq x d_head
    std::vector<std::vector<Tensor2>> scores;   // [layer][head] seq x seq
    std::vector<Tensor2> neurons;               // [layer] seq x d_mlp

    bool has_residual(int layer) const;
    bool has_head(int layer, int head) const;
    bool has_scores(int layer, int head) const;
    bool has_neurons(int layer) const;
    bool has_pos(int pos) const { return filter.pos_in(pos); }

    // Post-softmax attention probabilities derived from the recorded scores
    // (causal prefix softmax per row).
    Tensor2 attention_probs(int layer, int head) const;
};

// One cell group to overwrite from a donor trace.
struct ResidualAt {
    int layer = 0;
    std::vector<int> positions;
};
struct HeadOutputAt {
    int layer = 0;
    int head = 0;
    std::vector<int> positions;
};
struct NeuronAt {
    int layer = 0;
    int neuron = 0;
    std::vector<int> positions;
};
struct TokenGroupAt {
    TokenRole role = TokenRole::Visual;
    int layer_lo = 0;
    int layer_hi = 0; // inclusive
};
using PatchTarget = std::variant<ResidualAt, HeadOutputAt, NeuronAt, TokenGroupAt>;

struct PatchSpec {
    std::vector<PatchTarget> targets;

    bool empty() const { return targets.empty(); }
    // Bounds- and overlap-checks against a config and input roles. TokenGroup
    // entries expand to the equivalent per-position residual patches.
    void validate(const ModelConfig& cfg, const InputSequence& input) const;
};

std::pair<Tensor2, ActivationTrace> run_with_capture(const ModelBundle& bundle,
                                                     const InputSequence& input,
                                                     const CaptureFilter& filter);

// Re-runs `input` overwriting every cell named by `spec` with the donor's
// recorded value at the moment it is produced. The donor must cover every
// named cell and match the input length.
std::pair<Tensor2, ActivationTrace> run_with_patches(const ModelBundle& bundle,
                                                     const InputSequence& input,
                                                     const ActivationTrace& donor,
                                                     const PatchSpec& spec,
                                                     const CaptureFilter& filter);

// Builds the hook that applies `spec` from `donor`; composable with other
// hooks (decode-time ablations reuse it).
StepHooks make_patch_hooks(const ModelBundle& bundle, const InputSequence& input,
                           const ActivationTrace& donor, const PatchSpec& spec);

// Chains two hook sets; `first` runs before `second` at every site.
StepHooks chain_hooks(StepHooks first, StepHooks second);

// Logit(y_plus) - Logit(y_minus) read from one logits row.
double logit_difference(std::span<const double> logits, int y_plus, int y_minus);

// Normalized causal effect of patching `component` from the x_plus run into
// the x_minus run, measured by logit difference at the Last position.
double causal_effect(const ModelBundle& bundle, const InputSequence& x_plus,
                     const InputSequence& x_minus, const PatchSpec& component, int y_plus,
                     int y_minus);

// Debug export of a trace; same container conventions as the weight file.
void save_trace(const ActivationTrace& trace, const std::string& path);
ActivationTrace load_trace(const std::string& path);

} // namespace emc
