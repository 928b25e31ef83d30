#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "emocirc/rng.hpp"
#include "emocirc/tensor.hpp"

namespace emc {

enum class TokenRole { Visual, Query, Last };

// Architecture of the toy multimodal decoder. Layers group into three
// phases by the two boundaries: [0, adapt_end], (adapt_end, aggregate_end],
// (aggregate_end, n_layers).
struct ModelConfig {
    int n_layers = 12;
    int n_heads = 4;
    int d_model = 64;
    int d_mlp = 256;
    int vocab_size = 512;
    int n_visual = 16;
    int max_seq = 128;
    int adapt_end = 3;
    int aggregate_end = 7;

    int d_head() const { return d_model / n_heads; }
    void validate() const;
    std::string to_canonical_json() const;
    static ModelConfig from_json_text(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
    Tensor2 wq, wk, wv, wo;      // d_model x d_model; head h owns cols [h*d_head, (h+1)*d_head)
    Tensor2 w_up;                // d_model x d_mlp
    Tensor2 w_down;              // d_mlp x d_model
    std::vector<double> ln1_gain, ln1_bias;
    std::vector<double> ln2_gain, ln2_bias;
};

struct ModelWeights {
    Tensor2 embed;               // vocab_size x d_model
    Tensor2 pos;                 // max_seq x d_model, added to text positions only
    Tensor2 unembed;             // d_model x vocab_size
    std::vector<LayerWeights> layers;
    std::vector<double> lnf_gain, lnf_bias;
};

struct ModelBundle {
    ModelConfig config;
    ModelWeights weights;
};

// Visual embeddings enter the residual stream directly as the prefix
// (there is no vision tower); text tokens follow.
struct InputSequence {
    Tensor2 visual;              // n_visual x d_model
    std::vector<int> tokens;     // at least one; the final one is the Last position

    int length() const { return visual.rows + static_cast<int>(tokens.size()); }
    int last_pos() const { return length() - 1; }
    TokenRole role_of(int pos) const {
        if (pos < visual.rows) return TokenRole::Visual;
        return pos == last_pos() ? TokenRole::Last : TokenRole::Query;
    }
    void validate(const ModelConfig& cfg) const;
    std::uint64_t fingerprint() const;
};

// Mutation/observation points inside a pass. `step` is 0 during prefill and
// the decode step index afterwards; `row0` is the absolute position of the
// first row in the tensor handed to the hook. Hooks run at the moment the
// value is produced, before any downstream consumer reads it.
struct StepHooks {
    // Per-head key rows (pre-cache), nrows x d_head.
    std::function<void(int layer, int head, int step, int row0, Tensor2& keys)> on_key;
    // Pre-softmax scores, nrows x nkeys, before causal masking.
    std::function<void(int layer, int head, int step, int row0, Tensor2& scores)> on_scores;
    // Post-softmax attention probabilities, nrows x nkeys.
    std::function<void(int layer, int head, int step, int row0, Tensor2& probs)> on_probs;
    // Per-head output (pre-W_O), nrows x d_head.
    std::function<void(int layer, int head, int step, int row0, Tensor2& head_out)> on_head_out;
    // Attention module output (post-W_O, before the residual add), observer.
    std::function<void(int layer, int step, int row0, const Tensor2& attn_out)> on_attn_out;
    // Post-nonlinearity MLP neuron activations, nrows x d_mlp.
    std::function<void(int layer, int step, int row0, Tensor2& acts)> on_neuron_acts;
    // Post-block residual, nrows x d_model.
    std::function<void(int layer, int step, int row0, Tensor2& residual)> on_residual;
};

ModelBundle init_random(const ModelConfig& config, std::uint64_t seed);
std::int64_t parameter_count(const ModelConfig& config);

// Full pass over the input. Returns logits for every position.
Tensor2 forward_full(const ModelBundle& bundle, const InputSequence& input,
                     const StepHooks& hooks = {});

// Prefill that stops after the attention module of `stop_layer`, returning
// its post-W_O output rows (seq x d_model, before the residual add). Used by
// the restoration-metric evaluations, which never read past that point.
Tensor2 forward_until_attn(const ModelBundle& bundle, const InputSequence& input, int stop_layer,
                           const StepHooks& hooks = {});

// Incremental decoding against a KV cache. Prefill once, then one step per
// generated token. Hook semantics match forward_full with step > 0 rows.
class DecodeSession {
public:
    DecodeSession(const ModelBundle& bundle, const InputSequence& input, StepHooks hooks = {});

    // Logits of the most recently processed row.
    const std::vector<double>& last_logits() const { return last_logits_; }
    // Processes `token` at the next position; returns its logits row.
    const std::vector<double>& step(int token);
    int positions() const { return next_pos_; }

private:
    const ModelBundle& bundle_;
    StepHooks hooks_;
    std::vector<std::vector<Tensor2>> cache_k_, cache_v_; // [layer][head]
    std::vector<double> last_logits_;
    int next_pos_ = 0;
    int step_index_ = 0;

    void run_rows(Tensor2 rows, int row0, int step);
};

// Lowest token id wins ties.
int argmax_token(std::span<const double> logits);

// Greedy decoding; hooks stay active during prefill and every decode step.
std::vector<int> greedy_decode(const ModelBundle& bundle, const InputSequence& input,
                               int max_new, const StepHooks& hooks = {});

void save_weights(const ModelBundle& bundle, const std::string& path);
ModelBundle load_weights(const std::string& path);

} // namespace emc
