#include "emocirc/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "json.hpp"

#include "emocirc/binio.hpp"
#include "emocirc/circuit.hpp"

namespace emc {

namespace fs = std::filesystem;

void emit_report(Json report, const std::string& path) {
    if (report.is_object()) {
        Json& v = report["schema_version"];
        (void)v;
        report["schema_version"] = 1;
    }
    write_text_file(path, report.dump() + "\n");
}

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.model.validate();
    ensure_dirs();
}

std::string Pipeline::path(const std::string& rel) const {
    return (fs::path(cfg_.out_dir) / rel).string();
}

void Pipeline::ensure_dirs() {
    for (const char* d : {"", "data", "model", "steering", "heads", "neurons", "veena", "eval",
                          "reports"})
        fs::create_directories(fs::path(cfg_.out_dir) / d);
}

const Lexicon& Pipeline::lexicon() {
    if (!lexicon_) {
        const std::string p = path("data/lexicon.json");
        if (fs::exists(p)) {
            lexicon_ = load_lexicon(p);
        } else {
            lexicon_ = default_lexicon();
        }
    }
    return *lexicon_;
}

const std::vector<EmotionWheel>& Pipeline::wheels() {
    if (!wheels_) {
        const std::string p1 = path("data/wheel_w1.json");
        const std::string p2 = path("data/wheel_w2.json");
        if (fs::exists(p1) && fs::exists(p2)) {
            wheels_ = std::vector<EmotionWheel>{load_wheel(p1), load_wheel(p2)};
        } else {
            wheels_ = default_wheels();
        }
    }
    return *wheels_;
}

const PlantLayout& Pipeline::layout() {
    if (!layout_)
        layout_ = PlantLayout::default_layout(cfg_.model, lexicon(), cfg_.data_seed);
    return *layout_;
}

const ModelBundle& Pipeline::model() {
    if (!model_) {
        const std::string p = path("model/model.emc");
        if (!fs::exists(p)) plant_model();
        if (!model_) model_ = load_weights(p);
    }
    return *model_;
}

const Dataset& Pipeline::dataset() {
    if (!dataset_) {
        const std::string jl = path("data/dataset.jsonl");
        const std::string bl = path("data/blobs.emb");
        if (!fs::exists(jl)) gen_data();
        if (!dataset_) dataset_ = Dataset::load(jl, bl);
    }
    return *dataset_;
}

SteeringSet& Pipeline::steering(const std::string& emotion) {
    auto it = steering_.find(emotion);
    if (it != steering_.end()) return it->second;
    const std::string p = path("steering/" + emotion + ".ems");
    if (!fs::exists(p)) extract_steering();
    auto [it2, inserted] = steering_.try_emplace(emotion, load_steering(p));
    (void)inserted;
    return it2->second;
}

int Pipeline::critical_layer() {
    if (critical_layer_ >= 0) return critical_layer_;
    const std::string p = path("reports/layer_scan.json");
    if (!fs::exists(p)) scan_layers();
    nlohmann::json j = nlohmann::json::parse(read_text_file(p));
    critical_layer_ = j.at("critical_layer").get<int>();
    return critical_layer_;
}

void Pipeline::gen_data() {
    save_lexicon(lexicon(), path("data/lexicon.json"));
    const auto& ws = wheels();
    save_wheel(ws[0], path("data/wheel_w1.json"));
    save_wheel(ws[1], path("data/wheel_w2.json"));
    Dataset ds = emc::gen_dataset(cfg_.data_seed, cfg_.n_pairs, layout(), cfg_.model);
    ds.save(path("data/dataset.jsonl"), path("data/blobs.emb"));
    dataset_ = std::move(ds);

    Json rep = Json::object();
    rep["n_pairs_per_emotion_per_split"] = cfg_.n_pairs;
    rep["records"] = static_cast<std::int64_t>(dataset_->records.size());
    rep["data_seed"] = static_cast<std::int64_t>(cfg_.data_seed);
    emit_report(std::move(rep), path("data/report.json"));
}

void Pipeline::plant_model() {
    PlantLayout lay = layout();
    auto [bundle, report] = build_planted_model(cfg_.model, lay, cfg_.model_seed);
    layout_ = lay; // calibrated gains
    save_weights(bundle, path("model/model.emc"));
    model_ = std::move(bundle);

    Json rep = Json::object();
    rep["attempts"] = report.attempts;
    rep["trigger_ratio"] = report.trigger_ratio;
    rep["copy_attention"] = report.copy_attention;
    rep["pos_keyword_rate"] = report.pos_keyword_rate;
    rep["neg_keyword_rate"] = report.neg_keyword_rate;
    rep["model_seed"] = static_cast<std::int64_t>(cfg_.model_seed);
    Json plants = Json::array();
    for (const PlantSpec& p : lay.plants) {
        Json pj = Json::object();
        pj["emotion"] = p.emotion;
        pj["l_trig"] = p.l_trig;
        pj["u_trig"] = p.u_trig;
        pj["l_copy"] = p.l_copy;
        pj["h_copy"] = p.h_copy;
        plants.push_back(std::move(pj));
    }
    rep["plants"] = std::move(plants);
    emit_report(std::move(rep), path("model/build_report.json"));
}

void Pipeline::extract_steering() {
    const ModelBundle& m = model();
    HookedHitRateFn hooked = make_hit_evaluator(m, lexicon(), wheels(), cfg_.decode_len);
    HitRateFn evaluator = [hooked](const InputSequence& in, const std::string& emo) {
        return hooked(in, emo, StepHooks{});
    };
    Json rep = Json::object();
    Json per = Json::object();
    for (const PlantSpec& p : layout().plants) {
        auto pairs = dataset().pairs_for(p.emotion, "extract");
        SteeringSet s = aggregate_steering(m, pairs, p.emotion, cfg_.tau, evaluator);
        save_steering(s, path("steering/" + p.emotion + ".ems"));

        std::vector<PairDirection> dirs;
        for (const auto& pr : pairs) dirs.push_back(extract_pair_direction(m, pr));
        export_directions(dirs, layout().l_amp - 1,
                          path("steering/" + p.emotion + "_directions.emd"));

        Json pj = Json::object();
        pj["n_valid"] = static_cast<std::int64_t>(s.valid_ids.size());
        pj["n_pairs"] = static_cast<std::int64_t>(pairs.size());
        per[p.emotion] = std::move(pj);
        steering_.insert_or_assign(p.emotion, std::move(s));
    }
    rep["tau"] = cfg_.tau;
    rep["per_emotion"] = std::move(per);
    emit_report(std::move(rep), path("steering/report.json"));
}

void Pipeline::scan_layers() {
    const ModelBundle& m = model();
    HookedHitRateFn evaluator = make_hit_evaluator(m, lexicon(), wheels(), cfg_.decode_len);

    Json rep = Json::object();
    Json per = Json::object();
    std::vector<int> peaks;
    for (const PlantSpec& p : layout().plants) {
        auto pairs = dataset().pairs_for(p.emotion, "analysis");
        std::vector<ProbeInput> probes;
        for (size_t i = 0; i < pairs.size() && static_cast<int>(i) < cfg_.scan_probes; ++i)
            probes.push_back({pairs[i].negative, p.emotion});
        LayerScanResult res = layer_scan(m, steering(p.emotion), probes, cfg_.alpha, evaluator);

        Json pj = Json::object();
        pj["baseline_hit"] = res.baseline_hit;
        pj["ratio_defined"] = res.ratio_defined;
        Json layers = Json::array();
        for (size_t l = 0; l < res.hit_with.size(); ++l) {
            Json lj = Json::object();
            lj["layer"] = static_cast<std::int64_t>(l);
            lj["hit"] = res.hit_with[l];
            if (res.ratio_defined) lj["change_pct"] = res.change[l];
            layers.push_back(std::move(lj));
        }
        pj["layers"] = std::move(layers);
        Json order = Json::array();
        for (int l : res.layers_by_change) order.push_back(l);
        pj["layers_by_change"] = std::move(order);
        const int peak = res.layers_by_change.empty() ? 0 : res.layers_by_change[0];
        pj["peak_layer"] = peak;
        peaks.push_back(peak);
        per[p.emotion] = std::move(pj);
    }
    rep["per_emotion"] = std::move(per);

    // Modal peak across emotions (ties to the lowest layer); the ranking
    // metric reads the attention output one layer above the peak residual.
    std::map<int, int> counts;
    for (int p : peaks) ++counts[p];
    int modal = peaks.empty() ? 0 : peaks[0];
    int best = -1;
    for (const auto& [layer, c] : counts)
        if (c > best) {
            best = c;
            modal = layer;
        }
    const int critical = std::min(modal + 1, cfg_.model.n_layers - 1);
    rep["peak_layer"] = modal;
    rep["critical_layer"] = critical;
    rep["alpha"] = cfg_.alpha;
    emit_report(std::move(rep), path("reports/layer_scan.json"));
    critical_layer_ = critical;
}

namespace {

Json head_ranking_json(const std::vector<HeadScore>& ranking) {
    Json arr = Json::array();
    for (const HeadScore& hs : ranking) {
        Json j = Json::object();
        j["layer"] = hs.layer;
        j["head"] = hs.head;
        j["r_mean"] = hs.r_mean;
        j["pairs_used"] = hs.pairs_used;
        j["pairs_skipped"] = hs.pairs_skipped;
        j["valid"] = hs.valid;
        arr.push_back(std::move(j));
    }
    return arr;
}

std::vector<HeadScore> head_ranking_from_json(const nlohmann::json& arr) {
    std::vector<HeadScore> out;
    for (const auto& j : arr) {
        HeadScore hs;
        hs.layer = j.at("layer").get<int>();
        hs.head = j.at("head").get<int>();
        hs.r_mean = j.at("r_mean").get<double>();
        hs.pairs_used = j.at("pairs_used").get<int>();
        hs.pairs_skipped = j.at("pairs_skipped").get<int>();
        hs.valid = j.at("valid").get<bool>();
        out.push_back(hs);
    }
    return out;
}

} // namespace

void Pipeline::locate_heads() {
    const ModelBundle& m = model();
    const int critical = critical_layer();

    for (RankTarget target : {RankTarget::CriticalLayer, RankTarget::FinalLayer}) {
        Json rep = Json::object();
        Json per = Json::object();
        std::vector<std::pair<std::string, std::vector<HeadScore>>> all;
        for (const PlantSpec& p : layout().plants) {
            auto pairs = dataset().pairs_for(p.emotion, "analysis");
            if (static_cast<int>(pairs.size()) > cfg_.rank_pairs)
                pairs.resize(static_cast<size_t>(cfg_.rank_pairs));
            auto ranking = rank_heads(m, pairs, critical, steering(p.emotion), target);
            per[p.emotion] = head_ranking_json(ranking);
            all.push_back({p.emotion, std::move(ranking)});
        }
        rep["critical_layer"] = critical;
        rep["target"] = target == RankTarget::CriticalLayer ? "critical" : "final";
        rep["per_emotion"] = std::move(per);
        const std::string name = target == RankTarget::CriticalLayer ? "ranking_critical.json"
                                                                     : "ranking_final.json";
        emit_report(std::move(rep), path("heads/" + name));

        IntersectionReport inter = head_intersection(all, cfg_.k_head);
        Json ij = Json::object();
        Json emotions = Json::array();
        for (const auto& e : inter.emotions) emotions.push_back(e);
        ij["emotions"] = std::move(emotions);
        Json cells = Json::array();
        for (const auto& [mask, count] : inter.subset_counts) {
            Json c = Json::object();
            c["mask"] = static_cast<std::int64_t>(mask);
            Json members = Json::array();
            for (size_t e = 0; e < inter.emotions.size(); ++e)
                if (mask & (1u << e)) members.push_back(inter.emotions[e]);
            c["subset"] = std::move(members);
            c["count"] = count;
            cells.push_back(std::move(c));
        }
        ij["cells"] = std::move(cells);
        ij["k"] = cfg_.k_head;
        const std::string iname = target == RankTarget::CriticalLayer
                                      ? "intersection_critical.json"
                                      : "intersection_final.json";
        emit_report(std::move(ij), path("heads/" + iname));
    }
}

std::vector<std::pair<std::string, std::vector<HeadScore>>> Pipeline::load_head_rankings(
    RankTarget target) {
    const std::string name =
        target == RankTarget::CriticalLayer ? "ranking_critical.json" : "ranking_final.json";
    const std::string p = path("heads/" + name);
    if (!fs::exists(p)) locate_heads();
    nlohmann::json j = nlohmann::json::parse(read_text_file(p));
    std::vector<std::pair<std::string, std::vector<HeadScore>>> out;
    for (const PlantSpec& plant : layout().plants)
        out.push_back({plant.emotion,
                       head_ranking_from_json(j.at("per_emotion").at(plant.emotion))});
    return out;
}

void Pipeline::trace_neurons_stage() {
    const ModelBundle& m = model();
    const int critical = critical_layer();
    auto rankings = load_head_rankings(RankTarget::CriticalLayer);
    const AttributionVariant variant = cfg_.truncated_attribution ? AttributionVariant::Truncated
                                                                  : AttributionVariant::Exact;

    Json rep = Json::object();
    Json per = Json::object();
    for (const auto& [emotion, ranking] : rankings) {
        std::vector<HeadScore> heads;
        for (const HeadScore& hs : ranking) {
            if (!hs.valid) continue;
            if (static_cast<int>(heads.size()) >= cfg_.k_head) break;
            heads.push_back(hs);
        }
        auto pairs = dataset().pairs_for(emotion, "analysis");
        if (static_cast<int>(pairs.size()) > cfg_.attribution_pairs)
            pairs.resize(static_cast<size_t>(cfg_.attribution_pairs));
        auto scored = trace_neurons(m, pairs, heads, cfg_.k_neuron, critical, steering(emotion),
                                    variant);
        Json heads_json = Json::array();
        for (size_t hi = 0; hi < heads.size(); ++hi) {
            Json hj = Json::object();
            hj["layer"] = heads[hi].layer;
            hj["head"] = heads[hi].head;
            Json neurons = Json::array();
            for (const NeuronScore& ns : scored[hi]) {
                Json nj = Json::object();
                nj["layer"] = ns.layer;
                nj["neuron"] = ns.neuron;
                nj["g"] = ns.g;
                nj["source_token"] = ns.source_token;
                neurons.push_back(std::move(nj));
            }
            hj["neurons"] = std::move(neurons);
            heads_json.push_back(std::move(hj));
        }
        per[emotion] = std::move(heads_json);
    }
    rep["per_emotion"] = std::move(per);
    rep["variant"] = cfg_.truncated_attribution ? "truncated" : "exact";
    rep["k_neuron"] = cfg_.k_neuron;
    rep["critical_layer"] = critical;
    emit_report(std::move(rep), path("neurons/ranking.json"));
}

std::vector<std::pair<std::string, std::vector<NeuronScore>>> Pipeline::load_neuron_rankings() {
    const std::string p = path("neurons/ranking.json");
    if (!fs::exists(p)) trace_neurons_stage();
    nlohmann::json j = nlohmann::json::parse(read_text_file(p));
    std::vector<std::pair<std::string, std::vector<NeuronScore>>> out;
    for (const PlantSpec& plant : layout().plants) {
        std::vector<NeuronScore> scores;
        for (const auto& hj : j.at("per_emotion").at(plant.emotion)) {
            for (const auto& nj : hj.at("neurons")) {
                NeuronScore ns;
                ns.layer = nj.at("layer").get<int>();
                ns.neuron = nj.at("neuron").get<int>();
                ns.g = nj.at("g").get<double>();
                ns.parent_layer = hj.at("layer").get<int>();
                ns.parent_head = hj.at("head").get<int>();
                scores.push_back(ns);
            }
        }
        // Union ranking per emotion sorted by |G|.
        std::stable_sort(scores.begin(), scores.end(), [](const NeuronScore& a, const NeuronScore& b) {
            return std::abs(a.g) > std::abs(b.g);
        });
        out.push_back({plant.emotion, std::move(scores)});
    }
    return out;
}

void Pipeline::saliency_stage() {
    const ModelBundle& m = model();
    const int critical = critical_layer();
    Json rep = Json::object();
    Json per = Json::object();
    for (const PlantSpec& p : layout().plants) {
        auto pairs = dataset().pairs_for(p.emotion, "analysis");
        const int n = std::min<int>(8, static_cast<int>(pairs.size()));
        std::vector<SaliencyFlows> mean_flows(static_cast<size_t>(critical) + 1);
        for (int i = 0; i < n; ++i) {
            SaliencyMap map = saliency(m, pairs[static_cast<size_t>(i)], critical,
                                       steering(p.emotion).layer(critical));
            for (size_t l = 0; l < map.flows.size(); ++l) {
                mean_flows[l].v_to_q += map.flows[l].v_to_q / n;
                mean_flows[l].q_to_l += map.flows[l].q_to_l / n;
                mean_flows[l].v_to_l += map.flows[l].v_to_l / n;
            }
        }
        double mx = 0.0;
        for (const auto& f : mean_flows)
            mx = std::max({mx, std::abs(f.v_to_q), std::abs(f.q_to_l), std::abs(f.v_to_l)});
        Json layers = Json::array();
        for (size_t l = 0; l < mean_flows.size(); ++l) {
            Json lj = Json::object();
            lj["layer"] = static_cast<std::int64_t>(l);
            lj["v_to_q"] = mean_flows[l].v_to_q;
            lj["q_to_l"] = mean_flows[l].q_to_l;
            lj["v_to_l"] = mean_flows[l].v_to_l;
            if (mx > 0.0) {
                lj["v_to_q_norm"] = mean_flows[l].v_to_q / mx;
                lj["q_to_l_norm"] = mean_flows[l].q_to_l / mx;
                lj["v_to_l_norm"] = mean_flows[l].v_to_l / mx;
            }
            layers.push_back(std::move(lj));
        }
        per[p.emotion] = std::move(layers);
    }
    rep["per_emotion"] = std::move(per);
    rep["critical_layer"] = critical;
    rep["normalization"] = "raw sums plus per-emotion max-normalized values";
    emit_report(std::move(rep), path("reports/saliency.json"));
}

void Pipeline::logit_lens_stage() {
    const ModelBundle& m = model();
    Json rep = Json::object();
    Json per = Json::object();
    for (const PlantSpec& p : layout().plants) {
        std::set<int> kw(p.keyword_tokens.begin(), p.keyword_tokens.end());
        auto rows = logit_lens_steering(m, steering(p.emotion), 5);
        Json layers = Json::array();
        for (size_t l = 0; l < rows.size(); ++l) {
            std::vector<double> full;
            logit_lens_vector(m, steering(p.emotion).layer(static_cast<int>(l)), 1, &full);
            double mass = 0.0;
            for (int t : p.keyword_tokens) mass += full[static_cast<size_t>(t)];
            Json lj = Json::object();
            lj["layer"] = static_cast<std::int64_t>(l);
            lj["entropy"] = rows[l].entropy;
            lj["keyword_mass"] = mass;
            Json topk = Json::array();
            for (const LensEntry& e : rows[l].topk) {
                Json ej = Json::object();
                ej["token"] = e.token;
                ej["prob"] = e.prob;
                ej["is_keyword"] = kw.count(e.token) != 0;
                topk.push_back(std::move(ej));
            }
            lj["topk"] = std::move(topk);
            layers.push_back(std::move(lj));
        }
        per[p.emotion] = std::move(layers);
    }
    rep["per_emotion"] = std::move(per);

    // Visual-token lens on one analysis pair per emotion.
    Json vis = Json::object();
    for (const PlantSpec& p : layout().plants) {
        auto pairs = dataset().pairs_for(p.emotion, "analysis");
        if (pairs.empty()) continue;
        CaptureFilter f;
        f.residual = true;
        auto [logits, trace] = run_with_capture(m, pairs[0].positive, f);
        (void)logits;
        auto cells = visual_token_lens(m, trace, lexicon());
        Json layers = Json::array();
        for (size_t l = 0; l < cells.size(); ++l) {
            double ent = 0.0, mass = 0.0;
            for (const VisualLensCell& c : cells[l]) {
                ent += c.entropy / cells[l].size();
                mass += c.emotion_mass / cells[l].size();
            }
            Json lj = Json::object();
            lj["layer"] = static_cast<std::int64_t>(l);
            lj["mean_entropy"] = ent;
            lj["mean_emotion_mass"] = mass;
            layers.push_back(std::move(lj));
        }
        vis[p.emotion] = std::move(layers);
    }
    rep["visual_tokens"] = std::move(vis);
    emit_report(std::move(rep), path("reports/logit_lens.json"));
}

void Pipeline::phase_patch_stage() {
    const ModelBundle& m = model();
    HookedHitRateFn evaluator = make_hit_evaluator(m, lexicon(), wheels(), cfg_.decode_len);

    std::vector<ContrastivePair> pairs;
    for (const PlantSpec& p : layout().plants) {
        auto ep = dataset().pairs_for(p.emotion, "analysis");
        for (size_t i = 0; i < ep.size() && static_cast<int>(i) < cfg_.phase_pairs; ++i)
            pairs.push_back(ep[i]);
    }
    std::vector<double> baselines(pairs.size(), 0.0);
    const int P = static_cast<int>(pairs.size());
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < P; ++i)
        baselines[static_cast<size_t>(i)] =
            evaluator(pairs[static_cast<size_t>(i)].negative, pairs[static_cast<size_t>(i)].emotion,
                      StepHooks{});

    struct Phase {
        const char* name;
        int lo, hi;
    };
    const ModelConfig& mc = cfg_.model;
    const Phase phases[3] = {{"adapt", 0, mc.adapt_end},
                             {"aggregate", mc.adapt_end + 1, mc.aggregate_end},
                             {"execute", mc.aggregate_end + 1, mc.n_layers - 1}};
    const std::pair<const char*, TokenRole> roles[3] = {{"V", TokenRole::Visual},
                                                        {"Q", TokenRole::Query},
                                                        {"L", TokenRole::Last}};

    Json rep = Json::object();
    Json grid = Json::array();
    for (const Phase& ph : phases) {
        for (const auto& [rname, role] : roles) {
            const double delta = phase_patch(m, pairs, role, ph.lo, ph.hi, evaluator, &baselines);
            Json cell = Json::object();
            cell["phase"] = ph.name;
            cell["layer_lo"] = ph.lo;
            cell["layer_hi"] = ph.hi;
            cell["role"] = rname;
            cell["delta"] = delta;
            grid.push_back(std::move(cell));
        }
    }
    rep["grid"] = std::move(grid);
    rep["pairs"] = static_cast<std::int64_t>(pairs.size());
    emit_report(std::move(rep), path("reports/phase_patch.json"));
}

void Pipeline::knockout_stage() {
    const ModelBundle& m = model();
    HookedHitRateFn evaluator = make_hit_evaluator(m, lexicon(), wheels(), cfg_.decode_len);
    auto rankings = load_head_rankings(RankTarget::CriticalLayer);
    const Lexicon& lex = lexicon();
    const auto& ws = wheels();

    Json rep = Json::object();
    Json per = Json::object();
    for (const auto& [emotion, ranking] : rankings) {
        if (ranking.empty() || !ranking[0].valid) continue;
        const std::pair<int, int> top_head = {ranking[0].layer, ranking[0].head};
        auto pairs = dataset().pairs_for(emotion, "analysis");
        if (static_cast<int>(pairs.size()) > cfg_.rank_pairs)
            pairs.resize(static_cast<size_t>(cfg_.rank_pairs));
        const int N = static_cast<int>(pairs.size());
        std::vector<double> base_pos(pairs.size()), base_neg(pairs.size()), ko(pairs.size()),
            rec(pairs.size());
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < N; ++i) {
            const ContrastivePair& pr = pairs[static_cast<size_t>(i)];
            base_pos[static_cast<size_t>(i)] = evaluator(pr.positive, emotion, StepHooks{});
            base_neg[static_cast<size_t>(i)] = evaluator(pr.negative, emotion, StepHooks{});
            auto dec_ko =
                knockout(m, pr.positive, {top_head}, KnockoutMode::Zero, cfg_.decode_len);
            ko[static_cast<size_t>(i)] = hit_rate(extract_keywords(dec_ko, lex), emotion, ws);
            CaptureFilter f;
            f.head_output = true;
            f.layer_lo = f.layer_hi = top_head.first;
            auto [lg, donor] = run_with_capture(m, pr.positive, f);
            (void)lg;
            auto dec_rec = knockout(m, pr.negative, {top_head}, KnockoutMode::Recover,
                                    cfg_.decode_len, &donor);
            rec[static_cast<size_t>(i)] = hit_rate(extract_keywords(dec_rec, lex), emotion, ws);
        }
        auto mean = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return v.empty() ? 0.0 : s / static_cast<double>(v.size());
        };
        Json ej = Json::object();
        ej["head_layer"] = top_head.first;
        ej["head"] = top_head.second;
        ej["baseline_emotional"] = mean(base_pos);
        ej["baseline_neutral"] = mean(base_neg);
        ej["knockout_hit"] = mean(ko);
        ej["recovery_hit"] = mean(rec);
        per[emotion] = std::move(ej);
    }
    rep["per_emotion"] = std::move(per);
    emit_report(std::move(rep), path("reports/knockout.json"));
}

void Pipeline::veena_stage() {
    const ModelBundle& m = model();
    auto heads_critical = load_head_rankings(RankTarget::CriticalLayer);
    auto heads_final = load_head_rankings(RankTarget::FinalLayer);
    auto neuron_rankings = load_neuron_rankings();

    // Both up- and downstream head sets feed the union.
    std::vector<std::pair<std::string, std::vector<HeadScore>>> all_heads = heads_critical;
    all_heads.insert(all_heads.end(), heads_final.begin(), heads_final.end());
    auto [c_head, c_neuron] =
        aggregate_critical_sets(all_heads, neuron_rankings, cfg_.k_head, cfg_.k_neuron);

    InterventionSpec spec;
    spec.c_head = std::move(c_head);
    spec.c_neuron = std::move(c_neuron);
    spec.beta = cfg_.beta;
    spec.gamma = cfg_.gamma;
    spec.l_emo = cfg_.effective_l_emo();
    spec.vee = true;
    spec.ena = true;
    spec.validate(cfg_.model);
    save_intervention(spec, path("veena/intervention.json"));

    // Provenance of one representative decode.
    auto pairs = dataset().pairs_for(layout().plants[0].emotion, "analysis");
    if (!pairs.empty()) {
        VeenaResult res = run_veena(m, pairs[0].positive, spec, cfg_.decode_len);
        save_provenance(res.provenance, path("veena/provenance.jsonl"));
    }

    Json rep = Json::object();
    rep["c_head_size"] = static_cast<std::int64_t>(spec.c_head.size());
    rep["c_neuron_size"] = static_cast<std::int64_t>(spec.c_neuron.size());
    rep["beta"] = spec.beta;
    rep["gamma"] = spec.gamma;
    rep["l_emo"] = spec.l_emo;
    emit_report(std::move(rep), path("veena/report.json"));
}

void Pipeline::evaluate_stage() {
    const ModelBundle& m = model();
    const Lexicon& lex = lexicon();
    const auto& ws = wheels();
    const std::string spec_path = path("veena/intervention.json");
    if (!fs::exists(spec_path)) veena_stage();
    InterventionSpec spec = load_intervention(spec_path);
    StepHooks veena_hooks = make_veena_hooks(m, InputSequence{}, spec); // roles rebuilt per input below

    Json rep = Json::object();
    Json per = Json::object();
    double base_sum = 0.0, veena_sum = 0.0;
    double fs_base_sum = 0.0, fs_veena_sum = 0.0;
    int count = 0;
    std::vector<Polarity> pol_pred_base, pol_pred_veena, pol_true_base, pol_true_veena;
    for (const PlantSpec& p : layout().plants) {
        auto pairs = dataset().pairs_for(p.emotion, "analysis");
        const int N = static_cast<int>(pairs.size());
        std::vector<double> base(pairs.size()), with(pairs.size());
        std::vector<double> fsb(pairs.size()), fsv(pairs.size());
        std::vector<int> pol_base(pairs.size(), -1), pol_veena(pairs.size(), -1);
#pragma omp parallel for schedule(dynamic)
        for (int i = 0; i < N; ++i) {
            const ContrastivePair& pr = pairs[static_cast<size_t>(i)];
            std::vector<int> dec = greedy_decode(m, pr.positive, cfg_.decode_len);
            StepHooks hooks = make_veena_hooks(m, pr.positive, spec);
            std::vector<int> dec_v = greedy_decode(m, pr.positive, cfg_.decode_len, hooks);
            auto kw = extract_keywords(dec, lex);
            auto kw_v = extract_keywords(dec_v, lex);
            base[static_cast<size_t>(i)] = hit_rate(kw, p.emotion, ws);
            with[static_cast<size_t>(i)] = hit_rate(kw_v, p.emotion, ws);
            const std::set<std::string> truth = {p.emotion};
            fsb[static_cast<size_t>(i)] = fs_score(kw, truth, ws).fs;
            fsv[static_cast<size_t>(i)] = fs_score(kw_v, truth, ws).fs;
            auto first_polarity = [&](const std::set<std::string>& kws) {
                for (const auto& word : kws) {
                    if (ws[0].maps(word))
                        return static_cast<int>(polarity_of_core(ws[0].core(word)));
                }
                return -1;
            };
            pol_base[static_cast<size_t>(i)] = first_polarity(kw);
            pol_veena[static_cast<size_t>(i)] = first_polarity(kw_v);
        }
        double b = 0.0, v = 0.0, fb = 0.0, fv = 0.0;
        for (int i = 0; i < N; ++i) {
            b += base[static_cast<size_t>(i)];
            v += with[static_cast<size_t>(i)];
            fb += fsb[static_cast<size_t>(i)];
            fv += fsv[static_cast<size_t>(i)];
            const Polarity truth_pol = polarity_of_core(p.emotion);
            if (pol_base[static_cast<size_t>(i)] >= 0) {
                pol_pred_base.push_back(static_cast<Polarity>(pol_base[static_cast<size_t>(i)]));
                pol_true_base.push_back(truth_pol);
            }
            if (pol_veena[static_cast<size_t>(i)] >= 0) {
                pol_pred_veena.push_back(static_cast<Polarity>(pol_veena[static_cast<size_t>(i)]));
                pol_true_veena.push_back(truth_pol);
            }
        }
        Json ej = Json::object();
        ej["baseline_hit"] = b / N;
        ej["veena_hit"] = v / N;
        ej["baseline_fs"] = fb / N;
        ej["veena_fs"] = fv / N;
        if (b > 0.0) ej["change_pct"] = change_ratio(b / N, v / N);
        per[p.emotion] = std::move(ej);
        base_sum += b;
        veena_sum += v;
        fs_base_sum += fb;
        fs_veena_sum += fv;
        count += N;
    }
    rep["per_emotion"] = std::move(per);
    rep["baseline_hit"] = base_sum / count;
    rep["veena_hit"] = veena_sum / count;
    rep["baseline_fs"] = fs_base_sum / count;
    rep["veena_fs"] = fs_veena_sum / count;
    rep["hit_delta"] = (veena_sum - base_sum) / count;
    if (!pol_pred_base.empty()) {
        WafResult w = waf(pol_pred_base, pol_true_base);
        rep["baseline_waf"] = w.waf;
        rep["baseline_waf_accuracy"] = w.accuracy;
        rep["baseline_waf_coverage"] =
            static_cast<double>(pol_pred_base.size()) / static_cast<double>(count);
    }
    if (!pol_pred_veena.empty()) {
        WafResult w = waf(pol_pred_veena, pol_true_veena);
        rep["veena_waf"] = w.waf;
        rep["veena_waf_accuracy"] = w.accuracy;
        rep["veena_waf_coverage"] =
            static_cast<double>(pol_pred_veena.size()) / static_cast<double>(count);
    }
    emit_report(std::move(rep), path("eval/report.json"));
}

void Pipeline::full() {
    gen_data();
    plant_model();
    extract_steering();
    scan_layers();
    locate_heads();
    trace_neurons_stage();
    saliency_stage();
    logit_lens_stage();
    phase_patch_stage();
    knockout_stage();
    veena_stage();
    evaluate_stage();

    Json rep = Json::object();
    rep["stages"] = Json::array();
    for (const char* s : {"gen-data", "plant-model", "extract-steering", "scan-layers",
                          "locate-heads", "trace-neurons", "saliency", "logit-lens", "phase-patch",
                          "knockout", "run-veena", "evaluate"})
        rep["stages"].push_back(s);
    rep["model_seed"] = static_cast<std::int64_t>(cfg_.model_seed);
    rep["data_seed"] = static_cast<std::int64_t>(cfg_.data_seed);
    emit_report(std::move(rep), path("reports/summary.json"));
}

} // namespace emc
