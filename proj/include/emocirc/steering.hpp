#pragma once

#include <functional>
#include <string>
#include <vector>

#include "emocirc/trace.hpp"

namespace emc {

// Emotional/neutral input pair sharing the same text; only the visual
// matrices differ.
struct ContrastivePair {
    int id = 0;
    std::string emotion;
    InputSequence positive;
    InputSequence negative;

    void validate(const ModelConfig& cfg) const;
};

// Per-layer residual differences at the Last input position.
struct PairDirection {
    int pair_id = 0;
    std::string emotion;
    Tensor2 per_layer; // n_layers x d_model
};

struct SteeringSet {
    std::string emotion;
    double tau = 0.0;
    std::vector<int> valid_ids; // ascending pair ids of the valid set U
    Tensor2 vectors;            // n_layers x d_model, S_l rows

    std::span<const double> layer(int l) const { return vectors.row_span(l); }
};

// H(X, y): hit rate of a greedy continuation of `input` against emotion `y`.
// The harness supplies this (it owns the lexicon, wheels and decode length).
using HitRateFn = std::function<double(const InputSequence& input, const std::string& emotion)>;

// s_{i,l} = h+(l, N) - h-(l, N) at the post-block residual point.
PairDirection extract_pair_direction(const ModelBundle& bundle, const ContrastivePair& pair);

// Keeps pairs with H(X+, y) > tau and averages their directions in
// ascending pair-id order. Throws NoValidPairsError when the set is empty.
SteeringSet aggregate_steering(const ModelBundle& bundle,
                               const std::vector<ContrastivePair>& pairs,
                               const std::string& emotion, double tau,
                               const HitRateFn& evaluator);

// Hook adding alpha * S_layer to the post-block residual of `layer` at the
// given absolute positions (empty = every position, prefill and decode).
StepHooks make_injection_hooks(const SteeringSet& steering, int layer, double alpha,
                               std::vector<int> positions = {});

std::vector<int> inject_steering(const ModelBundle& bundle, const InputSequence& input,
                                 const SteeringSet& steering, int layer, double alpha,
                                 int max_new, std::vector<int> positions = {});

struct LayerScanResult {
    double baseline_hit = 0.0;
    bool ratio_defined = false;          // false when the baseline hit rate is 0
    std::vector<double> hit_with;        // per layer, post-intervention mean hit rate
    std::vector<double> change;          // per layer C_l in percent (when defined)
    std::vector<int> layers_by_change;   // layer ids sorted by descending effect
};

struct ProbeInput {
    InputSequence input;
    std::string emotion;
};

// Evaluator variant that decodes with the supplied hooks active.
using HookedHitRateFn =
    std::function<double(const InputSequence& input, const std::string& emotion,
                         const StepHooks& hooks)>;

LayerScanResult layer_scan(const ModelBundle& bundle, const SteeringSet& steering,
                           const std::vector<ProbeInput>& probes, double alpha,
                           const HookedHitRateFn& evaluator);

// Rows are the per-pair directions at one layer, with emotion labels in the
// header; external tooling does the projection.
void export_directions(const std::vector<PairDirection>& directions, int layer,
                       const std::string& path);
std::pair<Tensor2, std::vector<std::string>> load_directions(const std::string& path);

void save_steering(const SteeringSet& s, const std::string& path);
SteeringSet load_steering(const std::string& path);

} // namespace emc
