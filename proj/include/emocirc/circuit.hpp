#pragma once

#include <map>

#include "emocirc/eval.hpp"
#include "emocirc/steering.hpp"
#include "emocirc/tape.hpp"

namespace emc {

enum class RankTarget { CriticalLayer, FinalLayer };

struct HeadScore {
    int layer = 0;
    int head = 0;
    double r_mean = 0.0;
    int pairs_used = 0;
    int pairs_skipped = 0;
    bool valid = false; // false when every pair was degenerate for this head
    std::string emotion;
    RankTarget target = RankTarget::CriticalLayer;
};

struct NeuronScore {
    int layer = 0;      // l'' < parent layer
    int neuron = 0;
    double g = 0.0;     // mean attribution over the pairs used
    int parent_layer = 0;
    int parent_head = 0;
    int source_token = 0;
};

enum class AttributionVariant { Exact, Truncated };

struct SaliencyFlows {
    double v_to_q = 0.0;
    double q_to_l = 0.0;
    double v_to_l = 0.0;
};

// Per (layer, head): attention probability x d(metric)/d(probability),
// plus the role-aggregated flow scalars per layer.
struct SaliencyMap {
    int critical_layer = 0;
    std::vector<std::vector<Tensor2>> cells; // [layer 0..critical][head], seq x seq
    std::vector<SaliencyFlows> flows;        // per layer
};

struct LensEntry {
    int token = 0;
    double prob = 0.0;
};

struct LensRow {
    std::vector<LensEntry> topk;
    double entropy = 0.0;
};

struct VisualLensCell {
    double entropy = 0.0;
    double emotion_mass = 0.0; // probability mass on the emotion lexicon tokens
};

// ---- metric plumbing ----

// Emotional Intention: cosine similarity of an attention output with the
// steering direction.
double emotional_intention(std::span<const double> attn_out, std::span<const double> steering);

// I(O_attn at `layer`, Last position) on one input, with hooks active.
double attn_metric(const ModelBundle& bundle, const InputSequence& input, int layer,
                   std::span<const double> steering, const StepHooks& hooks = {});

// Clean-run metric values of a contrastive pair at the critical layer.
struct MetricContext {
    double i_plus = 0.0;
    double i_minus = 0.0;
    double denom() const { return i_plus - i_minus; }
};
MetricContext make_metric_context(const ModelBundle& bundle, const InputSequence& x_plus,
                                  const InputSequence& x_minus, int critical_layer,
                                  std::span<const double> steering);

// ---- discovery operations ----

// Patches head (layer', head)'s output at every position from the X+ trace
// while running X-, and reports the normalized recovery of the metric.
double latent_restoration(const ModelBundle& bundle, const InputSequence& x_plus,
                          const InputSequence& x_minus, int layer_p, int head,
                          int critical_layer, std::span<const double> steering);

// Mean restoration per upstream head over the pairs, sorted descending.
// Degenerate-contrast pairs are skipped and counted, never clamped.
std::vector<HeadScore> rank_heads(const ModelBundle& bundle,
                                  const std::vector<ContrastivePair>& pairs, int critical_layer,
                                  const SteeringSet& steering, RankTarget target);

// argmax over key positions of the post-softmax attention probability at
// `query_pos`; ties break to the lowest position.
int source_token(const ActivationTrace& trace, int layer, int head, int query_pos);

// Taped record of the X- pass up to the critical layer's attention output
// and the cosine metric, with gradient handles for keys, attention
// probabilities and MLP activations.
struct TapedMetric {
    AdjointTape tape;
    int metric_node = -1;
    double metric = 0.0;
    std::vector<std::vector<int>> key_nodes;  // [layer][head], layers 0..critical
    std::vector<std::vector<int>> prob_nodes; // [layer][head], layers 0..critical
    std::vector<int> act_nodes;               // [layer], layers 0..critical-1
};
TapedMetric build_taped_metric(const ModelBundle& bundle, const InputSequence& input,
                               int critical_layer, std::span<const double> steering);

// Exact reverse-mode gradient of the restoration metric with respect to the
// key vector of head (layer_p, head) at position t_star, differentiated
// through every layer from layer_p to the critical layer and normalized by
// the pair contrast.
std::vector<double> grad_r_wrt_key(const ModelBundle& bundle, const InputSequence& x_minus,
                                   const MetricContext& ctx, int layer_p, int head, int t_star,
                                   int critical_layer, std::span<const double> steering);

// Paper-literal attribution chain: DeltaA_u * (W_down,u . (grad_k W_K,h^T)).
double attribution_score(const ModelBundle& bundle, const ActivationTrace& trace_plus,
                         const ActivationTrace& trace_minus, int layer_u, int neuron,
                         int layer_p, int head, int t_star, std::span<const double> grad_k);

// Per ranked head: pick t* from the positive trace, run one backward pass
// per pair, score every upstream neuron and keep the top k by |G|.
std::vector<std::vector<NeuronScore>> trace_neurons(const ModelBundle& bundle,
                                                    const std::vector<ContrastivePair>& pairs,
                                                    const std::vector<HeadScore>& heads,
                                                    int k_neuron, int critical_layer,
                                                    const SteeringSet& steering,
                                                    AttributionVariant variant);

SaliencyMap saliency(const ModelBundle& bundle, const ContrastivePair& pair, int critical_layer,
                     std::span<const double> steering);

// softmax(unembed^T . LN_final(v)) with its entropy and top-k tokens. When
// `full` is given it receives the whole distribution.
LensRow logit_lens_vector(const ModelBundle& bundle, std::span<const double> v, int k,
                          std::vector<double>* full = nullptr);
std::vector<LensRow> logit_lens_steering(const ModelBundle& bundle, const SteeringSet& steering,
                                         int k);
// Per (layer, visual position): entropy and emotion-lexicon mass of the
// residual projected through the lens. Needs a residual capture.
std::vector<std::vector<VisualLensCell>> visual_token_lens(const ModelBundle& bundle,
                                                           const ActivationTrace& trace,
                                                           const Lexicon& lexicon);

// Patches the residual of every `role` position across [layer_lo, layer_hi]
// from X+ onto X- during prefill, decodes greedily, and reports the mean
// hit-rate change against the unpatched X- baseline. `baselines` may carry
// precomputed per-pair baseline hit rates (same order as pairs).
double phase_patch(const ModelBundle& bundle, const std::vector<ContrastivePair>& pairs,
                   TokenRole role, int layer_lo, int layer_hi, const HookedHitRateFn& evaluator,
                   const std::vector<double>* baselines = nullptr);

enum class KnockoutMode { Zero, Recover };

// Zero mode replaces the listed heads' outputs with zeros at every position
// of every step; recover mode patches them from the donor trace (donor
// positions, i.e. prefill).
std::vector<int> knockout(const ModelBundle& bundle, const InputSequence& input,
                          const std::vector<std::pair<int, int>>& heads, KnockoutMode mode,
                          int max_new, const ActivationTrace* donor = nullptr,
                          const StepHooks& extra = {});

// Exact head-identity overlap counts among the per-emotion top-k sets, one
// count per non-empty emotion subset (each head lands in exactly the cell
// of the maximal subset containing it).
struct IntersectionReport {
    std::vector<std::string> emotions;
    std::map<std::uint32_t, int> subset_counts; // bitmask over `emotions` -> head count
};
IntersectionReport head_intersection(
    const std::vector<std::pair<std::string, std::vector<HeadScore>>>& rankings_per_emotion,
    int k);

// Fraction of decoded continuations containing at least one target token.
double keyword_frequency_probe(const ModelBundle& bundle,
                               const std::vector<InputSequence>& inputs,
                               const std::vector<int>& target_tokens, int max_new,
                               const StepHooks& hooks = {});

} // namespace emc
