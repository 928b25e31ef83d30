#pragma once

#include <set>
#include <string>
#include <vector>

#include "emocirc/circuit.hpp"

namespace emc {

// Declarative description of the intervention: which heads get the
// flow-aware attention scaling (VEE), which MLP neurons get amplified (ENA),
// and the phase split layer l_emo separating the two VEE conditions.
struct InterventionSpec {
    std::set<std::pair<int, int>> c_head;   // (layer, head)
    std::set<std::pair<int, int>> c_neuron; // (layer, neuron)
    double beta = 1.0;                      // enhancement coefficient, >= 1
    double gamma = 1.0;                     // excitation coefficient, >= 1
    int l_emo = 0;
    bool vee = false;
    bool ena = false;
    // Non-paper ablation: add ln(beta) to the masked cells instead of
    // multiplying. Off by default.
    bool additive_vee = false;

    void validate(const ModelConfig& cfg) const;
};

// Union of the per-emotion top-k head and neuron sets.
std::pair<std::set<std::pair<int, int>>, std::set<std::pair<int, int>>> aggregate_critical_sets(
    const std::vector<std::pair<std::string, std::vector<HeadScore>>>& head_rankings,
    const std::vector<std::pair<std::string, std::vector<NeuronScore>>>& neuron_rankings,
    int k_head, int k_neuron);

// The VEE multiplier matrix for one (step, layer, head): n_query_rows x
// n_keys, beta exactly where P_up or P_down holds and 1 elsewhere. During
// prefill (step 0) the query rows are the whole sequence; during decode the
// single current row. `roles` describes the key positions (generated
// positions are Query-role for masking purposes; only Visual matters).
Tensor2 vee_mask(const InterventionSpec& spec, int step, int layer, int head,
                 const std::vector<TokenRole>& roles, int n_query_rows, int row0, int n_keys);

// Elementwise product onto pre-softmax scores.
void apply_vee(Tensor2& scores, const Tensor2& mask);

// Multiplies listed neurons of this layer by gamma, every position.
void apply_ena(Tensor2& acts, const InterventionSpec& spec, int layer);

struct ProvenanceRecord {
    int step = 0;
    int layer = 0;
    std::string site;   // "vee" or "ena"
    int index = 0;      // head or neuron
    double multiplier = 0.0;
    int cells = 0;      // scaled cells (vee) or positions (ena)
};

struct VeenaResult {
    std::vector<int> tokens;
    std::vector<ProvenanceRecord> provenance;
};

// Hook bundle applying the spec; provenance entries are appended to `log`
// when given.
StepHooks make_veena_hooks(const ModelBundle& bundle, const InputSequence& input,
                           const InterventionSpec& spec,
                           std::vector<ProvenanceRecord>* log = nullptr);

VeenaResult run_veena(const ModelBundle& bundle, const InputSequence& input,
                      const InterventionSpec& spec, int max_new);

void save_intervention(const InterventionSpec& spec, const std::string& path);
InterventionSpec load_intervention(const std::string& path);
void save_provenance(const std::vector<ProvenanceRecord>& log, const std::string& path);

} // namespace emc
