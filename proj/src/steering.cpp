#include "emocirc/steering.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

#include "json.hpp"

#include "emocirc/binio.hpp"
#include "emocirc/eval.hpp"

namespace emc {

void ContrastivePair::validate(const ModelConfig& cfg) const {
    positive.validate(cfg);
    negative.validate(cfg);
    if (positive.tokens != negative.tokens)
        throw DataError("pair " + std::to_string(id) + ": text tokens differ between X+ and X-");
    if (positive.length() != negative.length())
        throw DataError("pair " + std::to_string(id) + ": lengths differ");
}

PairDirection extract_pair_direction(const ModelBundle& bundle, const ContrastivePair& pair) {
    pair.validate(bundle.config);
    const int last = pair.positive.last_pos();
    CaptureFilter f;
    f.residual = true;
    f.pos_lo = f.pos_hi = last;
    auto [lp, tp] = run_with_capture(bundle, pair.positive, f);
    auto [ln, tn] = run_with_capture(bundle, pair.negative, f);
    PairDirection d;
    d.pair_id = pair.id;
    d.emotion = pair.emotion;
    d.per_layer = Tensor2(bundle.config.n_layers, bundle.config.d_model);
    for (int l = 0; l < bundle.config.n_layers; ++l) {
        const double* hp = tp.residual[static_cast<size_t>(l)].row(last);
        const double* hn = tn.residual[static_cast<size_t>(l)].row(last);
        double* out = d.per_layer.row(l);
        for (int j = 0; j < bundle.config.d_model; ++j) out[j] = hp[j] - hn[j];
    }
    return d;
}

SteeringSet aggregate_steering(const ModelBundle& bundle,
                               const std::vector<ContrastivePair>& pairs,
                               const std::string& emotion, double tau,
                               const HitRateFn& evaluator) {
    if (pairs.empty()) throw DataError("aggregate_steering: no pairs");

    std::vector<size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return pairs[a].id < pairs[b].id; });

    std::vector<double> hits(pairs.size(), 0.0);
    std::vector<PairDirection> dirs(pairs.size());
    const int n = static_cast<int>(pairs.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const ContrastivePair& p = pairs[order[static_cast<size_t>(i)]];
        hits[static_cast<size_t>(i)] = evaluator(p.positive, p.emotion);
        dirs[static_cast<size_t>(i)] = extract_pair_direction(bundle, p);
    }

    SteeringSet s;
    s.emotion = emotion;
    s.tau = tau;
    s.vectors = Tensor2(bundle.config.n_layers, bundle.config.d_model);
    // Deterministic fold in ascending pair-id order regardless of thread count.
    for (int i = 0; i < n; ++i) {
        if (hits[static_cast<size_t>(i)] > tau) {
            s.valid_ids.push_back(pairs[order[static_cast<size_t>(i)]].id);
            for (size_t j = 0; j < s.vectors.size(); ++j)
                s.vectors.data[j] += dirs[static_cast<size_t>(i)].per_layer.data[j];
        }
    }
    if (s.valid_ids.empty()) {
        std::string detail = "aggregate_steering: no pair exceeded tau=" + std::to_string(tau) +
                             " for " + emotion + "; per-pair hit rates:";
        for (int i = 0; i < n; ++i)
            detail += " " + std::to_string(pairs[order[static_cast<size_t>(i)]].id) + ":" +
                      std::to_string(hits[static_cast<size_t>(i)]);
        throw NoValidPairsError(detail);
    }
    const double inv = 1.0 / static_cast<double>(s.valid_ids.size());
    for (double& x : s.vectors.data) x *= inv;
    return s;
}

StepHooks make_injection_hooks(const SteeringSet& steering, int layer, double alpha,
                               std::vector<int> positions) {
    if (layer < 0 || layer >= steering.vectors.rows)
        throw IndexError("inject_steering: layer out of range");
    std::vector<double> delta(steering.layer(layer).begin(), steering.layer(layer).end());
    for (double& x : delta) x *= alpha;
    StepHooks hooks;
    hooks.on_residual = [delta = std::move(delta), layer,
                         positions = std::move(positions)](int l, int /*step*/, int row0,
                                                           Tensor2& residual) {
        if (l != layer) return;
        auto add_row = [&](int local) {
            double* r = residual.row(local);
            for (size_t j = 0; j < delta.size(); ++j) r[j] += delta[j];
        };
        if (positions.empty()) {
            for (int i = 0; i < residual.rows; ++i) add_row(i);
        } else {
            for (int p : positions) {
                const int local = p - row0;
                if (local >= 0 && local < residual.rows) add_row(local);
            }
        }
    };
    return hooks;
}

std::vector<int> inject_steering(const ModelBundle& bundle, const InputSequence& input,
                                 const SteeringSet& steering, int layer, double alpha,
                                 int max_new, std::vector<int> positions) {
    return greedy_decode(bundle, input, max_new,
                         make_injection_hooks(steering, layer, alpha, std::move(positions)));
}

LayerScanResult layer_scan(const ModelBundle& bundle, const SteeringSet& steering,
                           const std::vector<ProbeInput>& probes, double alpha,
                           const HookedHitRateFn& evaluator) {
    if (probes.empty()) throw DataError("layer_scan: no probes");
    const int L = bundle.config.n_layers;
    const int P = static_cast<int>(probes.size());

    LayerScanResult res;
    res.hit_with.assign(static_cast<size_t>(L), 0.0);

    std::vector<double> base(probes.size(), 0.0);
    // Layer x probe grid; each decode is independent, so the sweep is flat
    // parallel with results landing in fixed slots.
    std::vector<double> grid(static_cast<size_t>(L) * probes.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int w = -P; w < L * P; ++w) {
        if (w < 0) {
            const int p = w + P;
            base[static_cast<size_t>(p)] =
                evaluator(probes[static_cast<size_t>(p)].input,
                          probes[static_cast<size_t>(p)].emotion, StepHooks{});
        } else {
            const int l = w / P;
            const int p = w % P;
            StepHooks hooks = make_injection_hooks(steering, l, alpha);
            grid[static_cast<size_t>(w)] = evaluator(probes[static_cast<size_t>(p)].input,
                                                     probes[static_cast<size_t>(p)].emotion, hooks);
        }
    }

    double hsum = 0.0;
    for (double h : base) hsum += h;
    res.baseline_hit = hsum / P;
    for (int l = 0; l < L; ++l) {
        double s = 0.0;
        for (int p = 0; p < P; ++p) s += grid[static_cast<size_t>(l) * probes.size() + p];
        res.hit_with[static_cast<size_t>(l)] = s / P;
    }
    res.ratio_defined = res.baseline_hit > 0.0;
    if (res.ratio_defined) {
        res.change.resize(static_cast<size_t>(L));
        for (int l = 0; l < L; ++l)
            res.change[static_cast<size_t>(l)] =
                change_ratio(res.baseline_hit, res.hit_with[static_cast<size_t>(l)]);
    }
    res.layers_by_change.resize(static_cast<size_t>(L));
    std::iota(res.layers_by_change.begin(), res.layers_by_change.end(), 0);
    std::stable_sort(res.layers_by_change.begin(), res.layers_by_change.end(), [&](int a, int b) {
        return res.hit_with[static_cast<size_t>(a)] > res.hit_with[static_cast<size_t>(b)];
    });
    return res;
}

void export_directions(const std::vector<PairDirection>& directions, int layer,
                       const std::string& path) {
    if (directions.empty()) throw DataError("export_directions: empty list");
    const int d = directions[0].per_layer.cols;
    Tensor2 m(static_cast<int>(directions.size()), d);
    Json hdr = Json::object();
    hdr["schema_version"] = 1;
    hdr["layer"] = layer;
    Json ids = Json::array();
    Json emotions = Json::array();
    for (size_t i = 0; i < directions.size(); ++i) {
        const PairDirection& pd = directions[i];
        if (layer < 0 || layer >= pd.per_layer.rows)
            throw IndexError("export_directions: layer out of range");
        std::memcpy(m.row(static_cast<int>(i)), pd.per_layer.row(layer),
                    sizeof(double) * static_cast<size_t>(d));
        ids.push_back(pd.pair_id);
        emotions.push_back(pd.emotion);
    }
    hdr["pair_ids"] = std::move(ids);
    hdr["emotions"] = std::move(emotions);
    ByteWriter w;
    w.raw("EMD1", 4);
    w.str(hdr.dump());
    w.matrix(m);
    w.finish_crc();
    w.save(path);
}

std::pair<Tensor2, std::vector<std::string>> load_directions(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    r.check_crc("directions file");
    r.expect_magic("EMD1");
    nlohmann::json hdr = nlohmann::json::parse(r.str());
    std::vector<std::string> emotions;
    for (const auto& e : hdr.at("emotions")) emotions.push_back(e.get<std::string>());
    Tensor2 m = r.matrix();
    return {std::move(m), std::move(emotions)};
}

void save_steering(const SteeringSet& s, const std::string& path) {
    Json hdr = Json::object();
    hdr["schema_version"] = 1;
    hdr["emotion"] = s.emotion;
    hdr["tau"] = s.tau;
    hdr["n_valid"] = static_cast<std::int64_t>(s.valid_ids.size());
    Json ids = Json::array();
    for (int id : s.valid_ids) ids.push_back(id);
    hdr["pair_ids"] = std::move(ids);
    hdr["position"] = "post_block";
    ByteWriter w;
    w.raw("EMS1", 4);
    w.str(hdr.dump());
    w.matrix(s.vectors);
    w.finish_crc();
    w.save(path);
}

SteeringSet load_steering(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    r.check_crc("steering file");
    r.expect_magic("EMS1");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("steering header parse error: ") + e.what());
    }
    SteeringSet s;
    s.emotion = hdr.at("emotion").get<std::string>();
    s.tau = hdr.at("tau").get<double>();
    for (const auto& id : hdr.at("pair_ids")) s.valid_ids.push_back(id.get<int>());
    s.vectors = r.matrix();
    return s;
}

} // namespace emc
