#include "emocirc/veena.hpp"

#include <cmath>

#include "json.hpp"

#include "emocirc/binio.hpp"

namespace emc {

void InterventionSpec::validate(const ModelConfig& cfg) const {
    for (const auto& [l, h] : c_head)
        if (l < 0 || l >= cfg.n_layers || h < 0 || h >= cfg.n_heads)
            throw IndexError("intervention: head out of range");
    for (const auto& [l, u] : c_neuron)
        if (l < 0 || l >= cfg.n_layers || u < 0 || u >= cfg.d_mlp)
            throw IndexError("intervention: neuron out of range");
    if (beta < 1.0 || gamma < 1.0)
        throw DataError("intervention: beta and gamma must be >= 1");
    if (l_emo < -1 || l_emo >= cfg.n_layers)
        throw IndexError("intervention: l_emo out of range (-1 allowed as sentinel)");
}

std::pair<std::set<std::pair<int, int>>, std::set<std::pair<int, int>>> aggregate_critical_sets(
    const std::vector<std::pair<std::string, std::vector<HeadScore>>>& head_rankings,
    const std::vector<std::pair<std::string, std::vector<NeuronScore>>>& neuron_rankings,
    int k_head, int k_neuron) {
    std::set<std::pair<int, int>> heads, neurons;
    for (const auto& [emotion, ranking] : head_rankings) {
        int taken = 0;
        for (const HeadScore& hs : ranking) {
            if (!hs.valid) continue;
            if (taken++ >= k_head) break;
            heads.insert({hs.layer, hs.head});
        }
    }
    for (const auto& [emotion, ranking] : neuron_rankings) {
        int taken = 0;
        for (const NeuronScore& ns : ranking) {
            if (taken++ >= k_neuron) break;
            neurons.insert({ns.layer, ns.neuron});
        }
    }
    return {heads, neurons};
}

Tensor2 vee_mask(const InterventionSpec& spec, int step, int layer, int head,
                 const std::vector<TokenRole>& roles, int n_query_rows, int row0, int n_keys) {
    Tensor2 mask(n_query_rows, n_keys);
    for (double& x : mask.data) x = 1.0;
    if (!spec.vee || !spec.c_head.count({layer, head})) return mask;

    const bool p_up_phase = step == 0 && layer <= spec.l_emo;
    const bool p_down_phase = step > 0 && layer > spec.l_emo;
    if (!p_up_phase && !p_down_phase) return mask;

    for (int i = 0; i < n_query_rows; ++i) {
        const int qpos = row0 + i;
        bool row_active = false;
        if (p_up_phase) {
            row_active = qpos < static_cast<int>(roles.size()) &&
                         roles[static_cast<size_t>(qpos)] == TokenRole::Query;
        } else {
            // Decode: the single computed row is the current generated position.
            row_active = true;
        }
        if (!row_active) continue;
        for (int kpos = 0; kpos <= std::min(qpos, n_keys - 1); ++kpos)
            if (kpos < static_cast<int>(roles.size()) &&
                roles[static_cast<size_t>(kpos)] == TokenRole::Visual)
                mask.at(i, kpos) = spec.beta;
    }
    return mask;
}

void apply_vee(Tensor2& scores, const Tensor2& mask) {
    if (!scores.same_shape(mask)) throw ShapeError("apply_vee: shape mismatch");
    for (size_t i = 0; i < scores.size(); ++i) scores.data[i] *= mask.data[i];
}

void apply_ena(Tensor2& acts, const InterventionSpec& spec, int layer) {
    if (!spec.ena) return;
    for (const auto& [l, u] : spec.c_neuron) {
        if (l != layer) continue;
        for (int i = 0; i < acts.rows; ++i) acts.at(i, u) *= spec.gamma;
    }
}

StepHooks make_veena_hooks(const ModelBundle& bundle, const InputSequence& input,
                           const InterventionSpec& spec,
                           std::vector<ProvenanceRecord>* log) {
    spec.validate(bundle.config);
    auto roles = std::make_shared<std::vector<TokenRole>>();
    roles->reserve(static_cast<size_t>(input.length()));
    for (int p = 0; p < input.length(); ++p) roles->push_back(input.role_of(p));
    auto spec_copy = std::make_shared<InterventionSpec>(spec);

    StepHooks hooks;
    if (spec.vee) {
        hooks.on_scores = [spec_copy, roles, log](int layer, int head, int step, int row0,
                                                  Tensor2& scores) {
            if (!spec_copy->c_head.count({layer, head})) return;
            Tensor2 mask = vee_mask(*spec_copy, step, layer, head, *roles, scores.rows, row0,
                                    scores.cols);
            int scaled = 0;
            if (spec_copy->additive_vee) {
                const double shift = std::log(spec_copy->beta);
                for (size_t i = 0; i < scores.size(); ++i)
                    if (mask.data[i] != 1.0) {
                        scores.data[i] += shift;
                        ++scaled;
                    }
            } else {
                for (size_t i = 0; i < scores.size(); ++i)
                    if (mask.data[i] != 1.0) ++scaled;
                apply_vee(scores, mask);
            }
            if (log && scaled > 0)
                log->push_back({step, layer, "vee", head, spec_copy->beta, scaled});
        };
    }
    if (spec.ena) {
        hooks.on_neuron_acts = [spec_copy, log](int layer, int step, int /*row0*/, Tensor2& acts) {
            bool any = false;
            for (const auto& [l, u] : spec_copy->c_neuron) {
                if (l != layer) continue;
                any = true;
                if (log)
                    log->push_back({step, layer, "ena", u, spec_copy->gamma, acts.rows});
            }
            if (any) apply_ena(acts, *spec_copy, layer);
        };
    }
    return hooks;
}

VeenaResult run_veena(const ModelBundle& bundle, const InputSequence& input,
                      const InterventionSpec& spec, int max_new) {
    VeenaResult res;
    StepHooks hooks = make_veena_hooks(bundle, input, spec, &res.provenance);
    res.tokens = greedy_decode(bundle, input, max_new, hooks);
    return res;
}

void save_intervention(const InterventionSpec& spec, const std::string& path) {
    Json j = Json::object();
    j["schema_version"] = 1;
    Json ch = Json::array();
    for (const auto& [l, h] : spec.c_head) {
        Json pair = Json::array();
        pair.push_back(l);
        pair.push_back(h);
        ch.push_back(std::move(pair));
    }
    j["c_head"] = std::move(ch);
    Json cn = Json::array();
    for (const auto& [l, u] : spec.c_neuron) {
        Json pair = Json::array();
        pair.push_back(l);
        pair.push_back(u);
        cn.push_back(std::move(pair));
    }
    j["c_neuron"] = std::move(cn);
    j["beta"] = spec.beta;
    j["gamma"] = spec.gamma;
    j["l_emo"] = spec.l_emo;
    j["vee"] = spec.vee;
    j["ena"] = spec.ena;
    j["additive_vee"] = spec.additive_vee;
    write_text_file(path, j.dump() + "\n");
}

InterventionSpec load_intervention(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("intervention file parse error: ") + e.what());
    }
    InterventionSpec spec;
    for (const auto& p : j.at("c_head")) spec.c_head.insert({p.at(0).get<int>(), p.at(1).get<int>()});
    for (const auto& p : j.at("c_neuron"))
        spec.c_neuron.insert({p.at(0).get<int>(), p.at(1).get<int>()});
    spec.beta = j.at("beta").get<double>();
    spec.gamma = j.at("gamma").get<double>();
    spec.l_emo = j.at("l_emo").get<int>();
    spec.vee = j.at("vee").get<bool>();
    spec.ena = j.at("ena").get<bool>();
    if (j.contains("additive_vee")) spec.additive_vee = j.at("additive_vee").get<bool>();
    return spec;
}

void save_provenance(const std::vector<ProvenanceRecord>& log, const std::string& path) {
    std::string out;
    for (const ProvenanceRecord& r : log) {
        Json j = Json::object();
        j["step"] = r.step;
        j["layer"] = r.layer;
        j["site"] = r.site;
        j["index"] = r.index;
        j["multiplier"] = r.multiplier;
        j["cells"] = r.cells;
        out += j.dump();
        out += "\n";
    }
    write_text_file(path, out);
}

} // namespace emc
