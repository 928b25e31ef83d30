#pragma once

#include <string>
#include <vector>

#include "emocirc/eval.hpp"
#include "emocirc/steering.hpp"
#include "emocirc/veena.hpp"

namespace emc {

// One hand-wired pathway: a visual feature direction f whose presence makes
// the trigger neuron fire, a routed direction the neuron writes back into
// the residual, a copy head keyed on that routed direction which writes the
// emotion direction e into every text position attending the feature slot,
// and unembedding columns of the emotion keywords aligned with e.
struct PlantSpec {
    std::string emotion;
    std::vector<double> f;      // trigger feature direction, unit norm
    double strength = 6.0;      // feature magnitude added at the visual slot
    int l_trig = 2;
    int u_trig = 0;
    int l_copy = 4;
    int h_copy = 0;
    std::vector<double> e;      // writer (emotion) direction, unit norm
    std::vector<double> routed; // residual direction the trigger re-emits, unit norm
    std::vector<int> keyword_tokens;
};

// Shared scaffolding around the per-emotion plants: the text marker the copy
// heads' queries read, two uniform-attention amplifier heads that harvest
// the written e directions and re-emit them (one just above the copy layer,
// one at the final layer), and all wiring gains. The mid amplifier is what
// makes steering injection most effective exactly at the copy layer: an
// injected direction sits at every position, so the uniform harvest picks up
// more of it than the recorded organic signal that lives only on text rows.
struct PlantLayout {
    std::vector<PlantSpec> plants;
    std::vector<double> marker;                 // m, unit norm, added to every token embedding
    int visual_slot = 3;
    int l_amp = 5, h_amp = 0;                   // mid amplifier
    int l_amp2 = -1, h_amp2 = 0;                // final-layer amplifier (-1 = last layer)

    double background_scale = 0.25;             // shrink on random block weights
    double marker_gain = 2.0;
    double up_gain = 1.0;                       // trigger read
    double down_gain = 2.0;                     // trigger write
    double key_gain = 0.7, query_gain = 0.7;    // copy head QK
    double value_gain = 0.7, out_gain = 0.6;    // copy head VO
    double amp_value_gain = 1.0, amp_out_gain = 0.9;
    double amp2_value_gain = 0.25, amp2_out_gain = 0.25;
    double unembed_gain = 1.2;                  // keyword column alignment with e
    double filler_gain = 1.0;                   // filler-token column alignment with m
    double keyword_marker_gain = 0.72;          // keyword column alignment with m
    double sigma_lo = 0.6, sigma_hi = 1.6;      // per-pair background magnitude range
    int text_len = 10;
    std::vector<int> filler_tokens;

    static PlantLayout default_layout(const ModelConfig& cfg, const Lexicon& lexicon,
                                      std::uint64_t seed);
};

struct BuildReport {
    int attempts = 0;
    double trigger_ratio = 0.0;   // mean positive activation over mean |negative|
    double copy_attention = 0.0;  // mean attention from the query anchor to the slot
    double pos_keyword_rate = 0.0;
    double neg_keyword_rate = 0.0;
};

// Wires the plants into a small-random background model and verifies the
// three construction gates on probe pairs, retrying with scaled gains (at
// most 8 attempts, attempt count recorded). The returned layout carries the
// gains that passed.
std::pair<ModelBundle, BuildReport> build_planted_model(const ModelConfig& cfg,
                                                        PlantLayout& layout, std::uint64_t seed);

struct DatasetRecord {
    int id = 0;
    std::string emotion;
    std::string split; // "extract" or "analysis"
    std::vector<int> text;
    int visual_pos = 0; // blob indices
    int visual_neg = 0;
};

struct Dataset {
    std::vector<DatasetRecord> records;
    std::vector<Tensor2> blobs;

    ContrastivePair pair(const DatasetRecord& rec) const;
    std::vector<ContrastivePair> pairs_for(const std::string& emotion,
                                           const std::string& split) const;
    std::vector<ContrastivePair> all_pairs(const std::string& split) const;
    // Within each record the positive and negative sides must differ only in
    // the visual matrices.
    void validate_contract() const;

    void save(const std::string& jsonl_path, const std::string& blob_path) const;
    static Dataset load(const std::string& jsonl_path, const std::string& blob_path);
};

// n_pairs records per emotion per split ("extract" and "analysis"). Neutral
// visual embeddings are seeded Gaussians with per-pair magnitude; the
// positive side adds strength * f at the designated slot.
Dataset gen_dataset(std::uint64_t seed, int n_pairs, const PlantLayout& layout,
                    const ModelConfig& cfg);

struct RunConfig {
    ModelConfig model;
    std::uint64_t model_seed = 7;
    std::uint64_t data_seed = 11;
    double tau = 0.5;
    double alpha = 0.1;
    double beta = 2.0;
    double gamma = 1.5;
    int l_emo = -1;              // -1: use model.aggregate_end
    int k_head = 10;
    int k_neuron = 30;
    int n_pairs = 250;           // per emotion per split
    int decode_len = 8;
    int scan_probes = 120;       // analysis probes used per emotion in the layer scan
    int rank_pairs = 40;         // analysis pairs used per emotion when ranking heads
    int attribution_pairs = 6;   // pairs per head for neuron tracing
    int phase_pairs = 60;        // pairs per emotion for the phase grid
    bool truncated_attribution = false;
    std::string out_dir = "out";

    int effective_l_emo() const { return l_emo < 0 ? model.aggregate_end : l_emo; }
    static RunConfig load(const std::string& path);
    void save(const std::string& path) const;
};

// The harness-side evaluator: greedy continuation, lexicon extraction, hit
// rate against the wheels.
HookedHitRateFn make_hit_evaluator(const ModelBundle& bundle, const Lexicon& lexicon,
                                   const std::vector<EmotionWheel>& wheels, int decode_len);

} // namespace emc
