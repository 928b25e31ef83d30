#include "emocirc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "json.hpp"

#include "emocirc/binio.hpp"
#include "emocirc/circuit.hpp"

namespace emc {

namespace {

// Orthonormal direction set from a seeded stream (Gram-Schmidt).
std::vector<std::vector<double>> orthonormal_set(Rng& rng, int count, int dim) {
    if (count > dim) throw DataError("orthonormal_set: more directions than dimensions");
    std::vector<std::vector<double>> out;
    while (static_cast<int>(out.size()) < count) {
        std::vector<double> v(static_cast<size_t>(dim));
        for (double& x : v) x = rng.gaussian();
        for (const auto& u : out) {
            const double d = dot(u, v);
            for (size_t i = 0; i < v.size(); ++i) v[i] -= d * u[static_cast<size_t>(i)];
        }
        const double n = norm(v);
        if (n < 1e-6) continue;
        for (double& x : v) x /= n;
        out.push_back(std::move(v));
    }
    return out;
}

void set_col(Tensor2& m, int col, std::span<const double> v, double scale) {
    for (int i = 0; i < m.rows; ++i) m.at(i, col) = v[static_cast<size_t>(i)] * scale;
}

void add_col(Tensor2& m, int col, std::span<const double> v, double scale) {
    for (int i = 0; i < m.rows; ++i) m.at(i, col) += v[static_cast<size_t>(i)] * scale;
}

// Writes outer(col_vec, row_vec) * scale into the d_model x d_head slice of
// an attention projection owned by `head`.
void set_head_slice(Tensor2& m, int head, int d_head, std::span<const double> col_vec,
                    std::span<const double> row_vec, double scale) {
    for (int i = 0; i < m.rows; ++i)
        for (int d = 0; d < d_head; ++d)
            m.at(i, head * d_head + d) =
                scale * col_vec[static_cast<size_t>(i)] * row_vec[static_cast<size_t>(d)];
}

// Same for the d_head x d_model row block of W_O.
void set_wo_rows(Tensor2& wo, int head, int d_head, std::span<const double> ch,
                 std::span<const double> out_dir, double scale) {
    for (int d = 0; d < d_head; ++d)
        for (int j = 0; j < wo.cols; ++j)
            wo.at(head * d_head + d, j) =
                scale * ch[static_cast<size_t>(d)] * out_dir[static_cast<size_t>(j)];
}

void accumulate_wo_rows(Tensor2& wo, int head, int d_head, std::span<const double> ch,
                        std::span<const double> out_dir, double scale) {
    for (int d = 0; d < d_head; ++d)
        for (int j = 0; j < wo.cols; ++j)
            wo.at(head * d_head + d, j) +=
                scale * ch[static_cast<size_t>(d)] * out_dir[static_cast<size_t>(j)];
}

} // namespace

PlantLayout PlantLayout::default_layout(const ModelConfig& cfg, const Lexicon& lexicon,
                                        std::uint64_t seed) {
    cfg.validate();
    PlantLayout layout;
    Rng rng(seed ^ 0xA5C0FFEE1234ULL);
    const auto& emotions = core_emotions();
    const int n = static_cast<int>(emotions.size());

    // One f/r/e triple per emotion plus the shared marker, all orthonormal.
    auto dirs = orthonormal_set(rng, 3 * n + 1, cfg.d_model);
    layout.marker = dirs[static_cast<size_t>(3 * n)];

    // Phase placement: trigger in the adapt phase, copy at the first
    // aggregate layer, amplifier right above it, second amplifier last.
    const int l_trig = std::max(1, cfg.adapt_end - 1);
    const int l_copy = cfg.adapt_end + 1;
    layout.l_amp = l_copy + 1;
    layout.h_amp = 0;
    layout.l_amp2 = cfg.n_layers - 1;
    layout.h_amp2 = 0;
    layout.visual_slot = std::min(3, cfg.n_visual - 1);

    for (int i = 0; i < n; ++i) {
        PlantSpec p;
        p.emotion = emotions[static_cast<size_t>(i)];
        p.f = dirs[static_cast<size_t>(3 * i)];
        p.routed = dirs[static_cast<size_t>(3 * i + 1)];
        p.e = dirs[static_cast<size_t>(3 * i + 2)];
        p.l_trig = l_trig;
        p.u_trig = 8 * (i + 1); // spread trigger neurons out
        p.l_copy = l_copy;
        p.h_copy = i % cfg.n_heads;
        p.keyword_tokens = lexicon.token_ids(p.emotion);
        layout.plants.push_back(std::move(p));
    }

    // Filler pool: a block of ordinary tokens the neutral text is drawn
    // from; they also get the marker-aligned unembedding boost that keeps
    // neutral decodes on non-emotional vocabulary.
    int lex_lo = lexicon.token_to_keyword.begin()->first;
    int lex_hi = lexicon.token_to_keyword.rbegin()->first;
    for (int t = lex_hi + 20; t < lex_hi + 80 && t < cfg.vocab_size; ++t)
        layout.filler_tokens.push_back(t);
    if (static_cast<int>(layout.filler_tokens.size()) < 8)
        throw DataError("default_layout: vocabulary too small for a filler pool");
    (void)lex_lo;
    return layout;
}

namespace {

ContrastivePair make_pair(Rng& rng, const PlantLayout& layout, const ModelConfig& cfg,
                          const PlantSpec& plant, int id) {
    ContrastivePair pair;
    pair.id = id;
    pair.emotion = plant.emotion;
    // Per-pair background magnitude; the trigger's effective drive is the
    // ratio of the planted feature to this, so varying it spreads pairs
    // across the hit threshold.
    const double sigma = rng.uniform(layout.sigma_lo, layout.sigma_hi);
    Tensor2 neutral(cfg.n_visual, cfg.d_model);
    rng.fill_gaussian(neutral, sigma);
    std::vector<int> text(static_cast<size_t>(layout.text_len));
    for (int& t : text)
        t = layout.filler_tokens[static_cast<size_t>(
            rng.below(layout.filler_tokens.size()))];
    Tensor2 pos = neutral;
    for (int j = 0; j < cfg.d_model; ++j)
        pos.at(layout.visual_slot, j) += plant.strength * plant.f[static_cast<size_t>(j)];
    pair.positive.visual = std::move(pos);
    pair.positive.tokens = text;
    pair.negative.visual = std::move(neutral);
    pair.negative.tokens = std::move(text);
    return pair;
}

void wire_plants(ModelBundle& bundle, const PlantLayout& layout) {
    const ModelConfig& cfg = bundle.config;
    const int dh = cfg.d_head();
    ModelWeights& w = bundle.weights;

    for (auto& lw : w.layers) {
        for (double& x : lw.wq.data) x *= layout.background_scale;
        for (double& x : lw.wk.data) x *= layout.background_scale;
        for (double& x : lw.wv.data) x *= layout.background_scale;
        for (double& x : lw.wo.data) x *= layout.background_scale;
        for (double& x : lw.w_up.data) x *= layout.background_scale;
        for (double& x : lw.w_down.data) x *= layout.background_scale;
    }

    // Every token carries the text marker the planted queries read.
    for (int t = 0; t < cfg.vocab_size; ++t)
        for (int j = 0; j < cfg.d_model; ++j)
            w.embed.at(t, j) += layout.marker_gain * layout.marker[static_cast<size_t>(j)];

    // Channel vectors inside each head's d_head space.
    std::vector<double> ch_k(static_cast<size_t>(dh), 0.0);
    ch_k[0] = 1.0;
    std::vector<double> ch_v(static_cast<size_t>(dh), 0.0);
    ch_v[1] = 1.0;

    for (size_t i = 0; i < layout.plants.size(); ++i) {
        const PlantSpec& p = layout.plants[i];
        LayerWeights& trig = w.layers[static_cast<size_t>(p.l_trig)];
        set_col(trig.w_up, p.u_trig, p.f, layout.up_gain);
        for (int j = 0; j < cfg.d_model; ++j)
            trig.w_down.at(p.u_trig, j) = layout.down_gain * p.routed[static_cast<size_t>(j)];

        LayerWeights& copy = w.layers[static_cast<size_t>(p.l_copy)];
        set_head_slice(copy.wq, p.h_copy, dh, layout.marker, ch_k, layout.query_gain);
        set_head_slice(copy.wk, p.h_copy, dh, p.routed, ch_k, layout.key_gain);
        set_head_slice(copy.wv, p.h_copy, dh, p.routed, ch_v, layout.value_gain);
        set_wo_rows(copy.wo, p.h_copy, dh, ch_v, p.e, layout.out_gain);
    }

    // Uniform-attention amplifiers: zero QK (scores 0 -> uniform over the
    // causal window), values harvest every plant's e into its own channel,
    // W_O re-emits them.
    auto wire_amp = [&](int layer, int head, double vgain, double ogain) {
        LayerWeights& amp = w.layers[static_cast<size_t>(layer)];
        std::vector<double> zero(static_cast<size_t>(cfg.d_model), 0.0);
        std::vector<double> zch(static_cast<size_t>(dh), 0.0);
        set_head_slice(amp.wq, head, dh, zero, zch, 0.0);
        set_head_slice(amp.wk, head, dh, zero, zch, 0.0);
        set_head_slice(amp.wv, head, dh, zero, zch, 0.0);
        set_wo_rows(amp.wo, head, dh, zch, zero, 0.0);
        for (size_t i = 0; i < layout.plants.size(); ++i) {
            std::vector<double> ch(static_cast<size_t>(dh), 0.0);
            ch[i % static_cast<size_t>(dh)] = 1.0;
            const PlantSpec& p = layout.plants[i];
            for (int r = 0; r < cfg.d_model; ++r)
                for (int d = 0; d < dh; ++d)
                    amp.wv.at(r, head * dh + d) +=
                        vgain * p.e[static_cast<size_t>(r)] * ch[static_cast<size_t>(d)];
            accumulate_wo_rows(amp.wo, head, dh, ch, p.e, ogain);
        }
    };
    wire_amp(layout.l_amp, layout.h_amp, layout.amp_value_gain, layout.amp_out_gain);
    const int l_amp2 = layout.l_amp2 < 0 ? cfg.n_layers - 1 : layout.l_amp2;
    wire_amp(l_amp2, layout.h_amp2, layout.amp2_value_gain, layout.amp2_out_gain);

    // Unembedding: keyword columns read their emotion direction (plus a mild
    // marker pull so neutral decodes occasionally emit keywords); filler
    // columns read the marker strongly, making them the neutral default.
    for (const PlantSpec& p : layout.plants)
        for (int t : p.keyword_tokens) {
            add_col(w.unembed, t, p.e, layout.unembed_gain);
            add_col(w.unembed, t, layout.marker, layout.keyword_marker_gain);
        }
    for (int t : layout.filler_tokens) add_col(w.unembed, t, layout.marker, layout.filler_gain);
}

struct GateMeasurement {
    double trigger_ratio = 1e9;
    double copy_attention = 1.0;
    double pos_keyword_rate = 1.0;
    double neg_keyword_rate = 0.0;
};

GateMeasurement measure_gates(const ModelBundle& bundle, const PlantLayout& layout,
                              std::uint64_t probe_seed, int probes_per_emotion, int decode_len) {
    const ModelConfig& cfg = bundle.config;
    GateMeasurement g;
    int pos_hits = 0, neg_hits = 0, total = 0;
    std::set<int> all_lexicon;
    for (const PlantSpec& p : layout.plants)
        for (int t : p.keyword_tokens) all_lexicon.insert(t);

    for (const PlantSpec& plant : layout.plants) {
        Rng rng(probe_seed ^ fnv1a64(plant.emotion.data(), plant.emotion.size()));
        double act_pos = 0.0, act_neg = 0.0, attn = 0.0;
        std::set<int> targets(plant.keyword_tokens.begin(), plant.keyword_tokens.end());
        for (int i = 0; i < probes_per_emotion; ++i) {
            ContrastivePair pair = make_pair(rng, layout, cfg, plant, i);
            CaptureFilter f;
            f.neurons = true;
            f.scores = true;
            f.layer_hi = plant.l_copy;
            auto [lp, tp] = run_with_capture(bundle, pair.positive, f);
            (void)lp;
            CaptureFilter fn;
            fn.neurons = true;
            fn.layer_lo = fn.layer_hi = plant.l_trig;
            auto [ln, tn] = run_with_capture(bundle, pair.negative, fn);
            (void)ln;
            act_pos += tp.neurons[static_cast<size_t>(plant.l_trig)].at(layout.visual_slot,
                                                                        plant.u_trig);
            act_neg += std::abs(
                tn.neurons[static_cast<size_t>(plant.l_trig)].at(layout.visual_slot, plant.u_trig));
            // Attention of the last Query-role anchor onto the feature slot.
            const int anchor = pair.positive.last_pos() - 1;
            Tensor2 probs = tp.attention_probs(plant.l_copy, plant.h_copy);
            attn += probs.at(anchor, layout.visual_slot);

            std::vector<int> dec_pos = greedy_decode(bundle, pair.positive, decode_len);
            std::vector<int> dec_neg = greedy_decode(bundle, pair.negative, decode_len);
            bool hit_pos = false, hit_neg = false;
            for (int t : dec_pos)
                if (targets.count(t)) hit_pos = true;
            for (int t : dec_neg)
                if (all_lexicon.count(t)) hit_neg = true;
            pos_hits += hit_pos ? 1 : 0;
            neg_hits += hit_neg ? 1 : 0;
            ++total;
        }
        act_pos /= probes_per_emotion;
        act_neg /= probes_per_emotion;
        attn /= probes_per_emotion;
        g.trigger_ratio = std::min(g.trigger_ratio, act_pos / std::max(act_neg, 1e-9));
        g.copy_attention = std::min(g.copy_attention, attn);
    }
    g.pos_keyword_rate = static_cast<double>(pos_hits) / total;
    g.neg_keyword_rate = static_cast<double>(neg_hits) / total;
    return g;
}

} // namespace

std::pair<ModelBundle, BuildReport> build_planted_model(const ModelConfig& cfg,
                                                        PlantLayout& layout,
                                                        std::uint64_t seed) {
    cfg.validate();
    if (layout.plants.empty()) throw DataError("build_planted_model: no plants");
    for (const PlantSpec& p : layout.plants) {
        if (p.l_trig >= p.l_copy)
            throw DataError("build_planted_model: trigger layer must precede the copy layer");
        if (p.l_copy >= layout.l_amp)
            throw DataError("build_planted_model: copy layer must precede the amplifier");
        if (static_cast<int>(p.f.size()) != cfg.d_model ||
            static_cast<int>(p.e.size()) != cfg.d_model ||
            static_cast<int>(p.routed.size()) != cfg.d_model)
            throw ShapeError("build_planted_model: direction dimension mismatch");
        if (p.u_trig < 0 || p.u_trig >= cfg.d_mlp || p.h_copy < 0 || p.h_copy >= cfg.n_heads)
            throw IndexError("build_planted_model: plant indices out of range");
    }

    BuildReport report;
    for (int attempt = 1; attempt <= 8; ++attempt) {
        report.attempts = attempt;
        ModelBundle bundle = init_random(cfg, seed);
        wire_plants(bundle, layout);
        GateMeasurement g = measure_gates(bundle, layout, seed ^ 0xBEEFCAFEULL, 24, 8);
        report.trigger_ratio = g.trigger_ratio;
        report.copy_attention = g.copy_attention;
        report.pos_keyword_rate = g.pos_keyword_rate;
        report.neg_keyword_rate = g.neg_keyword_rate;

        const bool gate1 = g.trigger_ratio >= 5.0;
        const bool gate2 = g.copy_attention >= 0.5;
        const bool gate3_pos = g.pos_keyword_rate >= 0.8;
        const bool gate3_neg = g.neg_keyword_rate <= 0.2;
        if (gate1 && gate2 && gate3_pos && gate3_neg) return {std::move(bundle), report};

        if (!gate1) {
            layout.up_gain *= 1.3;
            layout.down_gain *= 1.15;
        }
        if (!gate2) {
            layout.key_gain *= 1.2;
            layout.query_gain *= 1.2;
        }
        if (!gate3_pos) {
            layout.unembed_gain *= 1.4;
            layout.out_gain *= 1.15;
            layout.amp_out_gain *= 1.1;
        }
        if (!gate3_neg) layout.keyword_marker_gain *= 0.8;
    }
    std::ostringstream msg;
    msg << "build_planted_model: gates not met after 8 attempts (trigger_ratio="
        << report.trigger_ratio << " copy_attention=" << report.copy_attention
        << " pos_rate=" << report.pos_keyword_rate << " neg_rate=" << report.neg_keyword_rate
        << ")";
    throw DataError(msg.str());
}

ContrastivePair Dataset::pair(const DatasetRecord& rec) const {
    ContrastivePair p;
    p.id = rec.id;
    p.emotion = rec.emotion;
    p.positive.visual = blobs[static_cast<size_t>(rec.visual_pos)];
    p.positive.tokens = rec.text;
    p.negative.visual = blobs[static_cast<size_t>(rec.visual_neg)];
    p.negative.tokens = rec.text;
    return p;
}

std::vector<ContrastivePair> Dataset::pairs_for(const std::string& emotion,
                                                const std::string& split) const {
    std::vector<ContrastivePair> out;
    for (const DatasetRecord& r : records)
        if (r.emotion == emotion && r.split == split) out.push_back(pair(r));
    return out;
}

std::vector<ContrastivePair> Dataset::all_pairs(const std::string& split) const {
    std::vector<ContrastivePair> out;
    for (const DatasetRecord& r : records)
        if (r.split == split) out.push_back(pair(r));
    return out;
}

void Dataset::validate_contract() const {
    for (const DatasetRecord& r : records) {
        if (r.visual_pos < 0 || r.visual_neg < 0 ||
            static_cast<size_t>(r.visual_pos) >= blobs.size() ||
            static_cast<size_t>(r.visual_neg) >= blobs.size())
            throw DataError("dataset: blob index out of range");
        const Tensor2& a = blobs[static_cast<size_t>(r.visual_pos)];
        const Tensor2& b = blobs[static_cast<size_t>(r.visual_neg)];
        if (!a.same_shape(b))
            throw DataError("dataset: pos/neg visual shapes differ for record " +
                            std::to_string(r.id));
        if (r.text.empty()) throw DataError("dataset: empty text");
    }
}

void Dataset::save(const std::string& jsonl_path, const std::string& blob_path) const {
    std::string out;
    for (const DatasetRecord& r : records) {
        Json j = Json::object();
        j["id"] = r.id;
        j["emotion"] = r.emotion;
        j["split"] = r.split;
        Json text = Json::array();
        for (int t : r.text) text.push_back(t);
        j["text"] = std::move(text);
        j["visual_pos"] = r.visual_pos;
        j["visual_neg"] = r.visual_neg;
        out += j.dump();
        out += "\n";
    }
    write_text_file(jsonl_path, out);
    ByteWriter w;
    w.raw("EMB1", 4);
    w.u32(static_cast<std::uint32_t>(blobs.size()));
    for (const Tensor2& b : blobs) w.matrix(b);
    w.finish_crc();
    w.save(blob_path);
}

Dataset Dataset::load(const std::string& jsonl_path, const std::string& blob_path) {
    Dataset ds;
    std::istringstream lines(read_text_file(jsonl_path));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("dataset record parse error: ") + e.what());
        }
        DatasetRecord r;
        r.id = j.at("id").get<int>();
        r.emotion = j.at("emotion").get<std::string>();
        r.split = j.at("split").get<std::string>();
        for (const auto& t : j.at("text")) r.text.push_back(t.get<int>());
        r.visual_pos = j.at("visual_pos").get<int>();
        r.visual_neg = j.at("visual_neg").get<int>();
        ds.records.push_back(std::move(r));
    }
    ByteReader r = ByteReader::load(blob_path);
    r.check_crc("dataset blob");
    r.expect_magic("EMB1");
    const std::uint32_t count = r.u32();
    ds.blobs.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) ds.blobs.push_back(r.matrix());
    ds.validate_contract();
    return ds;
}

Dataset gen_dataset(std::uint64_t seed, int n_pairs, const PlantLayout& layout,
                    const ModelConfig& cfg) {
    if (n_pairs <= 0) throw DataError("gen_dataset: n_pairs must be positive");
    Dataset ds;
    Rng rng(seed);
    int id = 0;
    for (const char* split : {"extract", "analysis"}) {
        for (const PlantSpec& plant : layout.plants) {
            for (int i = 0; i < n_pairs; ++i) {
                ContrastivePair pair = make_pair(rng, layout, cfg, plant, id);
                DatasetRecord rec;
                rec.id = id++;
                rec.emotion = plant.emotion;
                rec.split = split;
                rec.text = pair.positive.tokens;
                rec.visual_pos = static_cast<int>(ds.blobs.size());
                ds.blobs.push_back(pair.positive.visual);
                rec.visual_neg = static_cast<int>(ds.blobs.size());
                ds.blobs.push_back(pair.negative.visual);
                ds.records.push_back(std::move(rec));
            }
        }
    }
    ds.validate_contract();
    return ds;
}

RunConfig RunConfig::load(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("run config parse error: ") + e.what());
    }
    RunConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json_text(j.at("model").dump());
    auto get_u64 = [&](const char* key, std::uint64_t& slot) {
        if (j.contains(key)) slot = j.at(key).get<std::uint64_t>();
    };
    auto get_d = [&](const char* key, double& slot) {
        if (j.contains(key)) slot = j.at(key).get<double>();
    };
    auto get_i = [&](const char* key, int& slot) {
        if (j.contains(key)) slot = j.at(key).get<int>();
    };
    get_u64("model_seed", c.model_seed);
    get_u64("data_seed", c.data_seed);
    get_d("tau", c.tau);
    get_d("alpha", c.alpha);
    get_d("beta", c.beta);
    get_d("gamma", c.gamma);
    get_i("l_emo", c.l_emo);
    get_i("k_head", c.k_head);
    get_i("k_neuron", c.k_neuron);
    get_i("n_pairs", c.n_pairs);
    get_i("decode_len", c.decode_len);
    get_i("scan_probes", c.scan_probes);
    get_i("rank_pairs", c.rank_pairs);
    get_i("attribution_pairs", c.attribution_pairs);
    get_i("phase_pairs", c.phase_pairs);
    if (j.contains("truncated_attribution"))
        c.truncated_attribution = j.at("truncated_attribution").get<bool>();
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    return c;
}

void RunConfig::save(const std::string& path) const {
    Json j = Json::object();
    Json m = Json::object();
    m["n_layers"] = model.n_layers;
    m["n_heads"] = model.n_heads;
    m["d_model"] = model.d_model;
    m["d_mlp"] = model.d_mlp;
    m["vocab_size"] = model.vocab_size;
    m["n_visual"] = model.n_visual;
    m["max_seq"] = model.max_seq;
    m["adapt_end"] = model.adapt_end;
    m["aggregate_end"] = model.aggregate_end;
    j["model"] = std::move(m);
    j["model_seed"] = static_cast<std::int64_t>(model_seed);
    j["data_seed"] = static_cast<std::int64_t>(data_seed);
    j["tau"] = tau;
    j["alpha"] = alpha;
    j["beta"] = beta;
    j["gamma"] = gamma;
    j["l_emo"] = l_emo;
    j["k_head"] = k_head;
    j["k_neuron"] = k_neuron;
    j["n_pairs"] = n_pairs;
    j["decode_len"] = decode_len;
    j["scan_probes"] = scan_probes;
    j["rank_pairs"] = rank_pairs;
    j["attribution_pairs"] = attribution_pairs;
    j["phase_pairs"] = phase_pairs;
    j["truncated_attribution"] = truncated_attribution;
    j["out_dir"] = out_dir;
    write_text_file(path, j.dump() + "\n");
}

HookedHitRateFn make_hit_evaluator(const ModelBundle& bundle, const Lexicon& lexicon,
                                   const std::vector<EmotionWheel>& wheels, int decode_len) {
    return [&bundle, lexicon, wheels, decode_len](const InputSequence& input,
                                                  const std::string& emotion,
                                                  const StepHooks& hooks) {
        std::vector<int> decoded = greedy_decode(bundle, input, decode_len, hooks);
        return hit_rate(extract_keywords(decoded, lexicon), emotion, wheels);
    };
}

} // namespace emc
