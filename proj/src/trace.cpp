#include "emocirc/trace.hpp"

#include <algorithm>
#include <cstring>
#include <map>
#include <set>

#include "json.hpp"

#include "emocirc/binio.hpp"

namespace emc {

bool ActivationTrace::has_residual(int layer) const {
    return filter.residual && filter.layer_in(layer) && layer >= 0 &&
           static_cast<size_t>(layer) < residual.size();
}

bool ActivationTrace::has_head(int layer, int head) const {
    return filter.head_output && filter.layer_in(layer) && layer >= 0 &&
           static_cast<size_t>(layer) < head_out.size() && head >= 0 &&
           static_cast<size_t>(head) < head_out[static_cast<size_t>(layer)].size();
}

bool ActivationTrace::has_scores(int layer, int head) const {
    return filter.scores && filter.layer_in(layer) && layer >= 0 &&
           static_cast<size_t>(layer) < scores.size() && head >= 0 &&
           static_cast<size_t>(head) < scores[static_cast<size_t>(layer)].size();
}

bool ActivationTrace::has_neurons(int layer) const {
    return filter.neurons && filter.layer_in(layer) && layer >= 0 &&
           static_cast<size_t>(layer) < neurons.size();
}

Tensor2 ActivationTrace::attention_probs(int layer, int head) const {
    if (!has_scores(layer, head))
        throw IncompleteDonorError("trace: scores not captured for layer " + std::to_string(layer) +
                                   " head " + std::to_string(head));
    Tensor2 p = scores[static_cast<size_t>(layer)][static_cast<size_t>(head)];
    for (int i = 0; i < p.rows; ++i) softmax_row_prefix(p.row_span(i), std::min(i + 1, p.cols));
    return p;
}

namespace {

struct ExpandedPatches {
    // layer -> positions (residual); (layer,head) -> positions; layer -> (neuron, positions)
    std::map<int, std::vector<int>> residual;
    std::map<std::pair<int, int>, std::vector<int>> head;
    std::map<int, std::vector<std::pair<int, std::vector<int>>>> neuron;
};

ExpandedPatches expand_spec(const PatchSpec& spec, const ModelConfig& cfg,
                            const InputSequence& input) {
    ExpandedPatches out;
    std::set<std::tuple<int, int, int, int>> seen; // family, layer, pos, index
    auto mark = [&](int family, int layer, int pos, int index) {
        if (!seen.insert({family, layer, pos, index}).second)
            throw PatchSpecError("patch spec: overlapping targets at layer " + std::to_string(layer) +
                                 " pos " + std::to_string(pos));
    };
    const int T = input.length();
    auto check_layer = [&](int l) {
        if (l < 0 || l >= cfg.n_layers) throw PatchSpecError("patch spec: layer out of range");
    };
    auto check_pos = [&](int p) {
        if (p < 0 || p >= T) throw PatchSpecError("patch spec: position out of range");
    };
    for (const PatchTarget& t : spec.targets) {
        if (const auto* r = std::get_if<ResidualAt>(&t)) {
            check_layer(r->layer);
            for (int p : r->positions) {
                check_pos(p);
                mark(0, r->layer, p, 0);
                out.residual[r->layer].push_back(p);
            }
        } else if (const auto* h = std::get_if<HeadOutputAt>(&t)) {
            check_layer(h->layer);
            if (h->head < 0 || h->head >= cfg.n_heads)
                throw PatchSpecError("patch spec: head out of range");
            for (int p : h->positions) {
                check_pos(p);
                mark(1, h->layer, p, h->head);
                out.head[{h->layer, h->head}].push_back(p);
            }
        } else if (const auto* u = std::get_if<NeuronAt>(&t)) {
            check_layer(u->layer);
            if (u->neuron < 0 || u->neuron >= cfg.d_mlp)
                throw PatchSpecError("patch spec: neuron out of range");
            for (int p : u->positions) {
                check_pos(p);
                mark(2, u->layer, p, u->neuron);
            }
            out.neuron[u->layer].push_back({u->neuron, u->positions});
        } else if (const auto* g = std::get_if<TokenGroupAt>(&t)) {
            check_layer(g->layer_lo);
            check_layer(g->layer_hi);
            if (g->layer_lo > g->layer_hi) throw PatchSpecError("patch spec: empty layer range");
            for (int l = g->layer_lo; l <= g->layer_hi; ++l)
                for (int p = 0; p < T; ++p)
                    if (input.role_of(p) == g->role) {
                        mark(0, l, p, 0);
                        out.residual[l].push_back(p);
                    }
        }
    }
    for (auto& [l, ps] : out.residual) std::sort(ps.begin(), ps.end());
    for (auto& [lh, ps] : out.head) std::sort(ps.begin(), ps.end());
    return out;
}

void check_donor(const ExpandedPatches& ex, const ActivationTrace& donor, int input_len) {
    if (donor.seq_len != input_len)
        throw IncompleteDonorError("patch: donor length " + std::to_string(donor.seq_len) +
                                   " differs from input length " + std::to_string(input_len));
    auto need_pos = [&](int p, const char* what) {
        if (!donor.has_pos(p))
            throw IncompleteDonorError(std::string("patch: donor missing position ") +
                                       std::to_string(p) + " for " + what);
    };
    for (const auto& [l, ps] : ex.residual) {
        if (!donor.has_residual(l))
            throw IncompleteDonorError("patch: donor missing residual at layer " + std::to_string(l));
        for (int p : ps) need_pos(p, "residual");
    }
    for (const auto& [lh, ps] : ex.head) {
        if (!donor.has_head(lh.first, lh.second))
            throw IncompleteDonorError("patch: donor missing head output at layer " +
                                       std::to_string(lh.first));
        for (int p : ps) need_pos(p, "head output");
    }
    for (const auto& [l, items] : ex.neuron) {
        if (!donor.has_neurons(l))
            throw IncompleteDonorError("patch: donor missing neuron activations at layer " +
                                       std::to_string(l));
        for (const auto& [u, ps] : items)
            for (int p : ps) need_pos(p, "neuron");
    }
}

} // namespace

void PatchSpec::validate(const ModelConfig& cfg, const InputSequence& input) const {
    (void)expand_spec(*this, cfg, input);
}

StepHooks make_patch_hooks(const ModelBundle& bundle, const InputSequence& input,
                           const ActivationTrace& donor, const PatchSpec& spec) {
    auto ex = std::make_shared<ExpandedPatches>(expand_spec(spec, bundle.config, input));
    check_donor(*ex, donor, input.length());
    StepHooks hooks;
    const ActivationTrace* d = &donor;
    if (!ex->residual.empty()) {
        hooks.on_residual = [ex, d](int layer, int /*step*/, int row0, Tensor2& residual) {
            auto it = ex->residual.find(layer);
            if (it == ex->residual.end()) return;
            const Tensor2& src = d->residual[static_cast<size_t>(layer)];
            for (int p : it->second) {
                const int local = p - row0;
                if (local < 0 || local >= residual.rows) continue;
                std::memcpy(residual.row(local), src.row(p),
                            sizeof(double) * static_cast<size_t>(residual.cols));
            }
        };
    }
    if (!ex->head.empty()) {
        hooks.on_head_out = [ex, d](int layer, int head, int /*step*/, int row0, Tensor2& head_out) {
            auto it = ex->head.find({layer, head});
            if (it == ex->head.end()) return;
            const Tensor2& src = d->head_out[static_cast<size_t>(layer)][static_cast<size_t>(head)];
            for (int p : it->second) {
                const int local = p - row0;
                if (local < 0 || local >= head_out.rows) continue;
                std::memcpy(head_out.row(local), src.row(p),
                            sizeof(double) * static_cast<size_t>(head_out.cols));
            }
        };
    }
    if (!ex->neuron.empty()) {
        hooks.on_neuron_acts = [ex, d](int layer, int /*step*/, int row0, Tensor2& acts) {
            auto it = ex->neuron.find(layer);
            if (it == ex->neuron.end()) return;
            const Tensor2& src = d->neurons[static_cast<size_t>(layer)];
            for (const auto& [u, ps] : it->second)
                for (int p : ps) {
                    const int local = p - row0;
                    if (local < 0 || local >= acts.rows) continue;
                    acts.at(local, u) = src.at(p, u);
                }
        };
    }
    return hooks;
}

StepHooks chain_hooks(StepHooks first, StepHooks second) {
    StepHooks out;
    auto seq2 = [](auto f, auto s) {
        if (!f) return s;
        if (!s) return f;
        return decltype(f)([f, s](auto&&... args) {
            f(args...);
            s(args...);
        });
    };
    out.on_scores = seq2(first.on_scores, second.on_scores);
    out.on_head_out = seq2(first.on_head_out, second.on_head_out);
    out.on_attn_out = seq2(first.on_attn_out, second.on_attn_out);
    out.on_neuron_acts = seq2(first.on_neuron_acts, second.on_neuron_acts);
    out.on_residual = seq2(first.on_residual, second.on_residual);
    return out;
}

namespace {

struct CaptureSink {
    ActivationTrace trace;
    const ModelConfig* cfg = nullptr;

    void init(const ModelBundle& bundle, const InputSequence& input, const CaptureFilter& filter) {
        cfg = &bundle.config;
        trace.filter = filter;
        trace.seq_len = input.length();
        trace.input_fingerprint = input.fingerprint();
        const int L = cfg->n_layers;
        if (filter.residual) {
            trace.residual.assign(static_cast<size_t>(L), Tensor2());
            trace.embedding = Tensor2(trace.seq_len, cfg->d_model);
        }
        if (filter.head_output)
            trace.head_out.assign(static_cast<size_t>(L),
                                  std::vector<Tensor2>(static_cast<size_t>(cfg->n_heads)));
        if (filter.scores)
            trace.scores.assign(static_cast<size_t>(L),
                                std::vector<Tensor2>(static_cast<size_t>(cfg->n_heads)));
        if (filter.neurons) trace.neurons.assign(static_cast<size_t>(L), Tensor2());
    }

    void store_rows(Tensor2& dst, const Tensor2& src, int row0, int full_rows) {
        if (dst.rows == 0) dst = Tensor2(full_rows, src.cols);
        for (int i = 0; i < src.rows; ++i) {
            const int p = row0 + i;
            if (p < full_rows && trace.filter.pos_in(p))
                std::memcpy(dst.row(p), src.row(i), sizeof(double) * static_cast<size_t>(src.cols));
        }
    }
};

void verify_finite(const ActivationTrace& t) {
    auto check = [](const Tensor2& m, const char* what) {
        if (!all_finite(m)) throw NumericError(std::string("trace: non-finite values in ") + what);
    };
    check(t.embedding, "embedding");
    for (const auto& m : t.residual) check(m, "residual");
    for (const auto& per : t.head_out)
        for (const auto& m : per) check(m, "head output");
    for (const auto& per : t.scores)
        for (const auto& m : per) check(m, "scores");
    for (const auto& m : t.neurons) check(m, "neurons");
}

} // namespace

static std::pair<Tensor2, ActivationTrace> run_capture_impl(const ModelBundle& bundle,
                                                            const InputSequence& input,
                                                            const CaptureFilter& filter,
                                                            const StepHooks& mutators) {
    input.validate(bundle.config);
    auto sink = std::make_shared<CaptureSink>();
    sink->init(bundle, input, filter);
    const int T = input.length();

    StepHooks capture;
    if (filter.residual) {
        capture.on_residual = [sink, T](int layer, int step, int row0, Tensor2& residual) {
            if (step != 0 || !sink->trace.filter.layer_in(layer)) return;
            sink->store_rows(sink->trace.residual[static_cast<size_t>(layer)], residual, row0, T);
        };
    }
    if (filter.head_output) {
        capture.on_head_out = [sink, T](int layer, int head, int step, int row0, Tensor2& head_out) {
            if (step != 0 || !sink->trace.filter.layer_in(layer)) return;
            sink->store_rows(sink->trace.head_out[static_cast<size_t>(layer)][static_cast<size_t>(head)],
                             head_out, row0, T);
        };
    }
    if (filter.scores) {
        capture.on_scores = [sink, T](int layer, int head, int step, int row0, Tensor2& scores) {
            if (step != 0 || !sink->trace.filter.layer_in(layer)) return;
            Tensor2& dst = sink->trace.scores[static_cast<size_t>(layer)][static_cast<size_t>(head)];
            if (dst.rows == 0) dst = Tensor2(T, T);
            for (int i = 0; i < scores.rows && row0 + i < T; ++i)
                std::memcpy(dst.row(row0 + i), scores.row(i),
                            sizeof(double) * static_cast<size_t>(std::min(scores.cols, T)));
        };
    }
    if (filter.neurons) {
        capture.on_neuron_acts = [sink, T](int layer, int step, int row0, Tensor2& acts) {
            if (step != 0 || !sink->trace.filter.layer_in(layer)) return;
            sink->store_rows(sink->trace.neurons[static_cast<size_t>(layer)], acts, row0, T);
        };
    }

    // Mutators run first so captures record the values the pass actually used;
    // score capture runs before masking because the hook sees pre-softmax scores.
    Tensor2 logits = forward_full(bundle, input, chain_hooks(mutators, capture));

    if (filter.residual) {
        // Layer-0 input residual: visual embeddings verbatim, then text rows.
        Tensor2 emb(input.length(), bundle.config.d_model);
        for (int p = 0; p < input.visual.rows; ++p)
            std::memcpy(emb.row(p), input.visual.row(p),
                        sizeof(double) * static_cast<size_t>(bundle.config.d_model));
        for (size_t i = 0; i < input.tokens.size(); ++i) {
            const int p = input.visual.rows + static_cast<int>(i);
            const double* e = bundle.weights.embed.row(input.tokens[i]);
            const double* q = bundle.weights.pos.row(p);
            double* dst = emb.row(p);
            for (int j = 0; j < bundle.config.d_model; ++j) dst[j] = e[j] + q[j];
        }
        sink->trace.embedding = std::move(emb);
    }
    verify_finite(sink->trace);
    if (!all_finite(logits)) throw NumericError("forward: non-finite logits");
    return {std::move(logits), std::move(sink->trace)};
}

std::pair<Tensor2, ActivationTrace> run_with_capture(const ModelBundle& bundle,
                                                     const InputSequence& input,
                                                     const CaptureFilter& filter) {
    return run_capture_impl(bundle, input, filter, {});
}

std::pair<Tensor2, ActivationTrace> run_with_patches(const ModelBundle& bundle,
                                                     const InputSequence& input,
                                                     const ActivationTrace& donor,
                                                     const PatchSpec& spec,
                                                     const CaptureFilter& filter) {
    StepHooks patch = make_patch_hooks(bundle, input, donor, spec);
    return run_capture_impl(bundle, input, filter, patch);
}

double logit_difference(std::span<const double> logits, int y_plus, int y_minus) {
    if (y_plus < 0 || y_minus < 0 || static_cast<size_t>(y_plus) >= logits.size() ||
        static_cast<size_t>(y_minus) >= logits.size())
        throw IndexError("logit_difference: token id out of range");
    return logits[static_cast<size_t>(y_plus)] - logits[static_cast<size_t>(y_minus)];
}

namespace {

CaptureFilter donor_filter_for(const PatchSpec& spec) {
    CaptureFilter f;
    for (const PatchTarget& t : spec.targets) {
        if (std::holds_alternative<ResidualAt>(t) || std::holds_alternative<TokenGroupAt>(t))
            f.residual = true;
        else if (std::holds_alternative<HeadOutputAt>(t))
            f.head_output = true;
        else
            f.neurons = true;
    }
    return f;
}

double last_row_logit_diff(const Tensor2& logits, int y_plus, int y_minus) {
    return logit_difference(
        std::span<const double>(logits.row(logits.rows - 1), static_cast<size_t>(logits.cols)),
        y_plus, y_minus);
}

} // namespace

double causal_effect(const ModelBundle& bundle, const InputSequence& x_plus,
                     const InputSequence& x_minus, const PatchSpec& component, int y_plus,
                     int y_minus) {
    if (x_plus.length() != x_minus.length())
        throw DataError("causal_effect: contrastive inputs differ in length");
    auto [logits_plus, donor] = run_with_capture(bundle, x_plus, donor_filter_for(component));
    Tensor2 logits_minus = forward_full(bundle, x_minus);
    const double f_plus = last_row_logit_diff(logits_plus, y_plus, y_minus);
    const double f_minus = last_row_logit_diff(logits_minus, y_plus, y_minus);
    const double denom = f_plus - f_minus;
    if (std::abs(denom) < 1e-9)
        throw DegenerateContrastError("causal_effect: |F(X+) - F(X-)| < 1e-9");
    auto [logits_patch, _] = run_with_patches(bundle, x_minus, donor, component, CaptureFilter::none());
    const double f_patch = last_row_logit_diff(logits_patch, y_plus, y_minus);
    return (f_patch - f_minus) / denom;
}

void save_trace(const ActivationTrace& trace, const std::string& path) {
    ByteWriter w;
    w.raw("EMT1", 4);
    Json hdr = Json::object();
    hdr["schema_version"] = 1;
    hdr["seq_len"] = trace.seq_len;
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(trace.input_fingerprint));
    hdr["fingerprint"] = std::string(fp);
    hdr["residual"] = trace.filter.residual;
    hdr["head_output"] = trace.filter.head_output;
    hdr["scores"] = trace.filter.scores;
    hdr["neurons"] = trace.filter.neurons;
    hdr["layer_lo"] = trace.filter.layer_lo;
    hdr["layer_hi"] = trace.filter.layer_hi;
    hdr["pos_lo"] = trace.filter.pos_lo;
    hdr["pos_hi"] = trace.filter.pos_hi;
    hdr["n_layers"] = static_cast<std::int64_t>(std::max(
        {trace.residual.size(), trace.head_out.size(), trace.scores.size(), trace.neurons.size()}));
    hdr["n_heads"] = static_cast<std::int64_t>(trace.head_out.empty() && trace.scores.empty()
                                                   ? 0
                                                   : (trace.head_out.empty()
                                                          ? trace.scores[0].size()
                                                          : trace.head_out[0].size()));
    w.str(hdr.dump());
    auto put_all = [&](const std::vector<Tensor2>& v) {
        for (const auto& m : v) w.matrix(m);
    };
    if (trace.filter.residual) {
        w.matrix(trace.embedding);
        put_all(trace.residual);
    }
    if (trace.filter.head_output)
        for (const auto& per : trace.head_out) put_all(per);
    if (trace.filter.scores)
        for (const auto& per : trace.scores) put_all(per);
    if (trace.filter.neurons) put_all(trace.neurons);
    w.finish_crc();
    w.save(path);
}

ActivationTrace load_trace(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    r.check_crc("trace file");
    r.expect_magic("EMT1");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("trace header parse error: ") + e.what());
    }
    ActivationTrace t;
    t.seq_len = hdr.at("seq_len").get<int>();
    t.input_fingerprint = std::stoull(hdr.at("fingerprint").get<std::string>(), nullptr, 16);
    t.filter.residual = hdr.at("residual").get<bool>();
    t.filter.head_output = hdr.at("head_output").get<bool>();
    t.filter.scores = hdr.at("scores").get<bool>();
    t.filter.neurons = hdr.at("neurons").get<bool>();
    t.filter.layer_lo = hdr.at("layer_lo").get<int>();
    t.filter.layer_hi = hdr.at("layer_hi").get<int>();
    t.filter.pos_lo = hdr.at("pos_lo").get<int>();
    t.filter.pos_hi = hdr.at("pos_hi").get<int>();
    const size_t L = hdr.at("n_layers").get<size_t>();
    const size_t H = hdr.at("n_heads").get<size_t>();
    if (t.filter.residual) {
        t.embedding = r.matrix();
        t.residual.resize(L);
        for (auto& m : t.residual) m = r.matrix();
    }
    if (t.filter.head_output) {
        t.head_out.assign(L, std::vector<Tensor2>(H));
        for (auto& per : t.head_out)
            for (auto& m : per) m = r.matrix();
    }
    if (t.filter.scores) {
        t.scores.assign(L, std::vector<Tensor2>(H));
        for (auto& per : t.scores)
            for (auto& m : per) m = r.matrix();
    }
    if (t.filter.neurons) {
        t.neurons.resize(L);
        for (auto& m : t.neurons) m = r.matrix();
    }
    if (!r.at_end()) throw FormatError("trace file: trailing bytes");
    return t;
}

} // namespace emc
