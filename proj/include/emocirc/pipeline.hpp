#pragma once

#include "emocirc/harness.hpp"

namespace emc {

// Writes canonical JSON (sorted keys, fixed float formatting) with a
// schema_version field; every report goes through here.
void emit_report(Json report, const std::string& path);

// End-to-end orchestration over a run directory. Stages communicate through
// files, so each CLI subcommand can run one stage against an existing
// directory. All outputs are deterministic functions of the config.
class Pipeline {
public:
    explicit Pipeline(RunConfig cfg);

    void gen_data();
    void plant_model();
    void extract_steering();
    void scan_layers();
    void locate_heads();
    void trace_neurons_stage();
    void saliency_stage();
    void logit_lens_stage();
    void phase_patch_stage();
    void knockout_stage();
    void veena_stage();
    void evaluate_stage();
    void full();

    const RunConfig& config() const { return cfg_; }

    // Lazy artifact accessors (load from the run directory when needed).
    const ModelBundle& model();
    const Dataset& dataset();
    const Lexicon& lexicon();
    const std::vector<EmotionWheel>& wheels();
    const PlantLayout& layout();
    SteeringSet& steering(const std::string& emotion);
    int critical_layer();
    std::vector<std::pair<std::string, std::vector<HeadScore>>> load_head_rankings(
        RankTarget target);
    std::vector<std::pair<std::string, std::vector<NeuronScore>>> load_neuron_rankings();

    std::string path(const std::string& rel) const;

private:
    RunConfig cfg_;
    std::optional<ModelBundle> model_;
    std::optional<Dataset> dataset_;
    std::optional<Lexicon> lexicon_;
    std::optional<std::vector<EmotionWheel>> wheels_;
    std::optional<PlantLayout> layout_;
    std::map<std::string, SteeringSet> steering_;
    int critical_layer_ = -1;

    void ensure_dirs();
};

} // namespace emc
