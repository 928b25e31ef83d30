#include "emocirc/circuit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <set>

namespace emc {

namespace {
constexpr double kContrastFloor = 1e-9;
}

double emotional_intention(std::span<const double> attn_out, std::span<const double> steering) {
    return cosine_sim(attn_out, steering);
}

double attn_metric(const ModelBundle& bundle, const InputSequence& input, int layer,
                   std::span<const double> steering, const StepHooks& hooks) {
    Tensor2 attn = forward_until_attn(bundle, input, layer, hooks);
    return emotional_intention(attn.row_span(input.last_pos()), steering);
}

MetricContext make_metric_context(const ModelBundle& bundle, const InputSequence& x_plus,
                                  const InputSequence& x_minus, int critical_layer,
                                  std::span<const double> steering) {
    MetricContext ctx;
    ctx.i_plus = attn_metric(bundle, x_plus, critical_layer, steering);
    ctx.i_minus = attn_metric(bundle, x_minus, critical_layer, steering);
    return ctx;
}

namespace {

CaptureFilter head_donor_filter(int layer_lo, int layer_hi) {
    CaptureFilter f;
    f.head_output = true;
    f.layer_lo = layer_lo;
    f.layer_hi = layer_hi;
    return f;
}

PatchSpec all_position_head_patch(int layer, int head, int seq_len) {
    PatchSpec spec;
    HeadOutputAt t;
    t.layer = layer;
    t.head = head;
    t.positions.resize(static_cast<size_t>(seq_len));
    std::iota(t.positions.begin(), t.positions.end(), 0);
    spec.targets.push_back(t);
    return spec;
}

} // namespace

double latent_restoration(const ModelBundle& bundle, const InputSequence& x_plus,
                          const InputSequence& x_minus, int layer_p, int head,
                          int critical_layer, std::span<const double> steering) {
    if (layer_p >= critical_layer)
        throw IndexError("latent_restoration: head layer must be upstream of the critical layer");
    MetricContext ctx = make_metric_context(bundle, x_plus, x_minus, critical_layer, steering);
    if (std::abs(ctx.denom()) < kContrastFloor)
        throw DegenerateContrastError("latent_restoration: |I(O+) - I(O-)| < 1e-9");
    auto [logits, donor] =
        run_with_capture(bundle, x_plus, head_donor_filter(layer_p, layer_p));
    (void)logits;
    PatchSpec spec = all_position_head_patch(layer_p, head, x_minus.length());
    StepHooks patch = make_patch_hooks(bundle, x_minus, donor, spec);
    const double i_patch = attn_metric(bundle, x_minus, critical_layer, steering, patch);
    return (i_patch - ctx.i_minus) / ctx.denom();
}

std::vector<HeadScore> rank_heads(const ModelBundle& bundle,
                                  const std::vector<ContrastivePair>& pairs, int critical_layer,
                                  const SteeringSet& steering, RankTarget target) {
    if (pairs.empty()) throw DataError("rank_heads: no pairs");
    const int metric_layer =
        target == RankTarget::CriticalLayer ? critical_layer : bundle.config.n_layers - 1;
    if (metric_layer <= 0 || metric_layer >= bundle.config.n_layers)
        throw IndexError("rank_heads: metric layer out of range");
    const std::span<const double> s = steering.layer(metric_layer);
    const int H = bundle.config.n_heads;
    const int n_candidates = metric_layer * H; // heads at layers 0..metric_layer-1
    const int P = static_cast<int>(pairs.size());

    // R value per (pair, candidate); NaN marks a degenerate pair.
    std::vector<double> grid(static_cast<size_t>(P) * n_candidates,
                             std::numeric_limits<double>::quiet_NaN());
#pragma omp parallel for schedule(dynamic)
    for (int p = 0; p < P; ++p) {
        const ContrastivePair& pair = pairs[static_cast<size_t>(p)];
        MetricContext ctx =
            make_metric_context(bundle, pair.positive, pair.negative, metric_layer, s);
        if (std::abs(ctx.denom()) < kContrastFloor) continue;
        auto [logits, donor] =
            run_with_capture(bundle, pair.positive, head_donor_filter(0, metric_layer - 1));
        (void)logits;
        for (int c = 0; c < n_candidates; ++c) {
            const int lp = c / H;
            const int h = c % H;
            PatchSpec spec = all_position_head_patch(lp, h, pair.negative.length());
            StepHooks patch = make_patch_hooks(bundle, pair.negative, donor, spec);
            const double i_patch = attn_metric(bundle, pair.negative, metric_layer, s, patch);
            grid[static_cast<size_t>(p) * n_candidates + c] =
                (i_patch - ctx.i_minus) / ctx.denom();
        }
    }

    std::vector<HeadScore> scores(static_cast<size_t>(n_candidates));
    for (int c = 0; c < n_candidates; ++c) {
        HeadScore& hs = scores[static_cast<size_t>(c)];
        hs.layer = c / H;
        hs.head = c % H;
        hs.target = target;
        double sum = 0.0;
        int used = 0;
        for (int p = 0; p < P; ++p) {
            const double r = grid[static_cast<size_t>(p) * n_candidates + c];
            if (std::isnan(r)) continue;
            sum += r;
            ++used;
        }
        hs.pairs_used = used;
        hs.pairs_skipped = P - used;
        hs.valid = used > 0;
        hs.r_mean = used > 0 ? sum / used : 0.0;
    }
    std::stable_sort(scores.begin(), scores.end(), [](const HeadScore& a, const HeadScore& b) {
        if (a.valid != b.valid) return a.valid;
        if (a.r_mean != b.r_mean) return a.r_mean > b.r_mean;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.head < b.head;
    });
    return scores;
}

int source_token(const ActivationTrace& trace, int layer, int head, int query_pos) {
    if (query_pos < 0 || query_pos >= trace.seq_len)
        throw IndexError("source_token: query position out of range");
    Tensor2 probs = trace.attention_probs(layer, head);
    const double* row = probs.row(query_pos);
    int best = 0;
    for (int j = 1; j <= query_pos; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

TapedMetric build_taped_metric(const ModelBundle& bundle, const InputSequence& input,
                               int critical_layer, std::span<const double> steering) {
    input.validate(bundle.config);
    if (critical_layer < 0 || critical_layer >= bundle.config.n_layers)
        throw IndexError("build_taped_metric: critical layer out of range");
    const ModelConfig& cfg = bundle.config;
    const int dh = cfg.d_head();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const int T = input.length();

    TapedMetric tm;
    AdjointTape& tape = tm.tape;
    tm.key_nodes.assign(static_cast<size_t>(critical_layer) + 1,
                        std::vector<int>(static_cast<size_t>(cfg.n_heads), -1));
    tm.prob_nodes.assign(static_cast<size_t>(critical_layer) + 1,
                         std::vector<int>(static_cast<size_t>(cfg.n_heads), -1));
    tm.act_nodes.assign(static_cast<size_t>(critical_layer), -1);

    // Rebuild the prefill embedding exactly as the engine does.
    Tensor2 emb(T, cfg.d_model);
    for (int p = 0; p < input.visual.rows; ++p)
        std::memcpy(emb.row(p), input.visual.row(p), sizeof(double) * static_cast<size_t>(cfg.d_model));
    for (size_t i = 0; i < input.tokens.size(); ++i) {
        const int p = input.visual.rows + static_cast<int>(i);
        const double* e = bundle.weights.embed.row(input.tokens[i]);
        const double* q = bundle.weights.pos.row(p);
        for (int j = 0; j < cfg.d_model; ++j) emb.at(p, j) = e[j] + q[j];
    }
    int x = tape.leaf(std::move(emb));

    for (int l = 0; l <= critical_layer; ++l) {
        const LayerWeights& lw = bundle.weights.layers[static_cast<size_t>(l)];
        int x1 = tape.layernorm(x, lw.ln1_gain, lw.ln1_bias);
        int wq = tape.constant(lw.wq);
        int wk = tape.constant(lw.wk);
        int wv = tape.constant(lw.wv);
        int q = tape.matmul(x1, wq);
        int k = tape.matmul(x1, wk);
        int v = tape.matmul(x1, wv);
        std::vector<int> head_outs;
        for (int h = 0; h < cfg.n_heads; ++h) {
            int qh = tape.slice_cols(q, h * dh, dh);
            int kh = tape.slice_cols(k, h * dh, dh);
            int vh = tape.slice_cols(v, h * dh, dh);
            tm.key_nodes[static_cast<size_t>(l)][static_cast<size_t>(h)] = kh;
            int scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
            int probs = tape.causal_softmax(scores);
            tm.prob_nodes[static_cast<size_t>(l)][static_cast<size_t>(h)] = probs;
            head_outs.push_back(tape.matmul(probs, vh));
        }
        int wo = tape.constant(lw.wo);
        int attn_out = tape.matmul(tape.concat_cols(head_outs), wo);
        if (l == critical_layer) {
            Tensor2 s(1, static_cast<int>(steering.size()));
            std::copy(steering.begin(), steering.end(), s.data.begin());
            int s_node = tape.constant(std::move(s));
            tm.metric_node = tape.cosine(tape.pick_row(attn_out, input.last_pos()), s_node);
            tm.metric = tape.value(tm.metric_node).at(0, 0);
            return tm;
        }
        x = tape.add(x, attn_out);
        int x2 = tape.layernorm(x, lw.ln2_gain, lw.ln2_bias);
        int up = tape.constant(lw.w_up);
        int acts = tape.gelu_op(tape.matmul(x2, up));
        tm.act_nodes[static_cast<size_t>(l)] = acts;
        int down = tape.constant(lw.w_down);
        x = tape.add(x, tape.matmul(acts, down));
    }
    throw InternalError("build_taped_metric: unreachable");
}

std::vector<double> grad_r_wrt_key(const ModelBundle& bundle, const InputSequence& x_minus,
                                   const MetricContext& ctx, int layer_p, int head, int t_star,
                                   int critical_layer, std::span<const double> steering) {
    if (std::abs(ctx.denom()) < kContrastFloor)
        throw DegenerateContrastError("grad_r_wrt_key: |I(O+) - I(O-)| < 1e-9");
    if (layer_p > critical_layer)
        throw IndexError("grad_r_wrt_key: head layer beyond the critical layer");
    TapedMetric tm = build_taped_metric(bundle, x_minus, critical_layer, steering);
    tm.tape.backward(tm.metric_node);
    const Tensor2& g = tm.tape.grad(tm.key_nodes[static_cast<size_t>(layer_p)][static_cast<size_t>(head)]);
    if (t_star < 0 || t_star >= g.rows) throw IndexError("grad_r_wrt_key: t* out of range");
    std::vector<double> out(g.row(t_star), g.row(t_star) + g.cols);
    const double inv = 1.0 / ctx.denom();
    for (double& v : out) v *= inv;
    return out;
}

double attribution_score(const ModelBundle& bundle, const ActivationTrace& trace_plus,
                         const ActivationTrace& trace_minus, int layer_u, int neuron,
                         int layer_p, int head, int t_star, std::span<const double> grad_k) {
    if (layer_u >= layer_p)
        throw IndexError("attribution_score: neuron layer must be upstream of the head layer");
    if (!trace_plus.has_neurons(layer_u) || !trace_minus.has_neurons(layer_u))
        throw IncompleteDonorError("attribution_score: traces lack neuron activations");
    if (!trace_plus.has_pos(t_star) || !trace_minus.has_pos(t_star))
        throw IncompleteDonorError("attribution_score: traces lack position t*");
    const ModelConfig& cfg = bundle.config;
    const int dh = cfg.d_head();
    if (static_cast<int>(grad_k.size()) != dh)
        throw ShapeError("attribution_score: grad_k length != d_head");

    const double delta_a =
        trace_plus.neurons[static_cast<size_t>(layer_u)].at(t_star, neuron) -
        trace_minus.neurons[static_cast<size_t>(layer_u)].at(t_star, neuron);

    // grad through the key projection: g_res = grad_k . W_K,h^T (the head's
    // d_head-wide column slice of W_K), then the neuron's W_down row.
    const Tensor2& wk = bundle.weights.layers[static_cast<size_t>(layer_p)].wk;
    const Tensor2& wdown = bundle.weights.layers[static_cast<size_t>(layer_u)].w_down;
    double g = 0.0;
    for (int j = 0; j < cfg.d_model; ++j) {
        double gres = 0.0;
        for (int d = 0; d < dh; ++d) gres += grad_k[static_cast<size_t>(d)] * wk.at(j, head * dh + d);
        g += wdown.at(neuron, j) * gres;
    }
    return delta_a * g;
}

std::vector<std::vector<NeuronScore>> trace_neurons(const ModelBundle& bundle,
                                                    const std::vector<ContrastivePair>& pairs,
                                                    const std::vector<HeadScore>& heads,
                                                    int k_neuron, int critical_layer,
                                                    const SteeringSet& steering,
                                                    AttributionVariant variant) {
    std::vector<std::vector<NeuronScore>> out(heads.size());
    if (k_neuron <= 0 || heads.empty() || pairs.empty()) return out;
    const ModelConfig& cfg = bundle.config;
    const std::span<const double> s = steering.layer(critical_layer);
    const int dh = cfg.d_head();
    const int P = static_cast<int>(pairs.size());

    // Accumulated G and the bookkeeping per head.
    struct HeadAccum {
        std::vector<double> g;   // [layer_u * d_mlp + u], layers < head layer
        int used_pairs = 0;
        int t_star_first = -1;
    };
    std::vector<HeadAccum> accum(heads.size());
    for (size_t hi = 0; hi < heads.size(); ++hi)
        accum[hi].g.assign(static_cast<size_t>(heads[hi].layer) * cfg.d_mlp, 0.0);

    for (int p = 0; p < P; ++p) {
        const ContrastivePair& pair = pairs[static_cast<size_t>(p)];
        MetricContext ctx =
            make_metric_context(bundle, pair.positive, pair.negative, critical_layer, s);
        if (std::abs(ctx.denom()) < kContrastFloor) continue;
        CaptureFilter f;
        f.scores = true;
        f.neurons = true;
        f.layer_hi = critical_layer;
        auto [lp, trace_plus] = run_with_capture(bundle, pair.positive, f);
        (void)lp;
        CaptureFilter fn;
        fn.neurons = true;
        fn.layer_hi = critical_layer;
        auto [ln, trace_minus] = run_with_capture(bundle, pair.negative, fn);
        (void)ln;

        TapedMetric tm = build_taped_metric(bundle, pair.negative, critical_layer, s);
        tm.tape.backward(tm.metric_node);
        const double inv_denom = 1.0 / ctx.denom();

        for (size_t hi = 0; hi < heads.size(); ++hi) {
            const HeadScore& hs = heads[hi];
            if (hs.layer > critical_layer) continue;
            const int t_star =
                source_token(trace_plus, hs.layer, hs.head, pair.positive.last_pos());
            if (accum[hi].t_star_first < 0) accum[hi].t_star_first = t_star;
            ++accum[hi].used_pairs;

            if (variant == AttributionVariant::Exact) {
                for (int lu = 0; lu < hs.layer; ++lu) {
                    const Tensor2& ag = tm.tape.grad(tm.act_nodes[static_cast<size_t>(lu)]);
                    const Tensor2& ap = trace_plus.neurons[static_cast<size_t>(lu)];
                    const Tensor2& am = trace_minus.neurons[static_cast<size_t>(lu)];
                    for (int u = 0; u < cfg.d_mlp; ++u) {
                        const double delta = ap.at(t_star, u) - am.at(t_star, u);
                        accum[hi].g[static_cast<size_t>(lu) * cfg.d_mlp + u] +=
                            delta * ag.at(t_star, u) * inv_denom;
                    }
                }
            } else {
                const Tensor2& kg =
                    tm.tape.grad(tm.key_nodes[static_cast<size_t>(hs.layer)][static_cast<size_t>(hs.head)]);
                std::vector<double> grad_k(kg.row(t_star), kg.row(t_star) + dh);
                for (double& v : grad_k) v *= inv_denom;
                const Tensor2& wk = bundle.weights.layers[static_cast<size_t>(hs.layer)].wk;
                // g_res = grad_k . W_K,h^T once, reused across neurons.
                std::vector<double> gres(static_cast<size_t>(cfg.d_model), 0.0);
                for (int j = 0; j < cfg.d_model; ++j)
                    for (int d = 0; d < dh; ++d)
                        gres[static_cast<size_t>(j)] +=
                            grad_k[static_cast<size_t>(d)] * wk.at(j, hs.head * dh + d);
                for (int lu = 0; lu < hs.layer; ++lu) {
                    const Tensor2& wdown = bundle.weights.layers[static_cast<size_t>(lu)].w_down;
                    const Tensor2& ap = trace_plus.neurons[static_cast<size_t>(lu)];
                    const Tensor2& am = trace_minus.neurons[static_cast<size_t>(lu)];
                    for (int u = 0; u < cfg.d_mlp; ++u) {
                        const double delta = ap.at(t_star, u) - am.at(t_star, u);
                        double chain = 0.0;
                        for (int j = 0; j < cfg.d_model; ++j)
                            chain += wdown.at(u, j) * gres[static_cast<size_t>(j)];
                        accum[hi].g[static_cast<size_t>(lu) * cfg.d_mlp + u] += delta * chain;
                    }
                }
            }
        }
    }

    for (size_t hi = 0; hi < heads.size(); ++hi) {
        const HeadScore& hs = heads[hi];
        HeadAccum& acc = accum[hi];
        if (acc.used_pairs == 0) continue;
        const double inv = 1.0 / acc.used_pairs;
        std::vector<int> order(acc.g.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            const double ga = std::abs(acc.g[static_cast<size_t>(a)]);
            const double gb = std::abs(acc.g[static_cast<size_t>(b)]);
            if (ga != gb) return ga > gb;
            return a < b;
        });
        const int keep = std::min<int>(k_neuron, static_cast<int>(order.size()));
        for (int i = 0; i < keep; ++i) {
            NeuronScore ns;
            ns.layer = order[static_cast<size_t>(i)] / cfg.d_mlp;
            ns.neuron = order[static_cast<size_t>(i)] % cfg.d_mlp;
            ns.g = acc.g[static_cast<size_t>(order[static_cast<size_t>(i)])] * inv;
            ns.parent_layer = hs.layer;
            ns.parent_head = hs.head;
            ns.source_token = acc.t_star_first;
            out[hi].push_back(ns);
        }
    }
    return out;
}

SaliencyMap saliency(const ModelBundle& bundle, const ContrastivePair& pair, int critical_layer,
                     std::span<const double> steering) {
    pair.validate(bundle.config);
    TapedMetric tm = build_taped_metric(bundle, pair.negative, critical_layer, steering);
    tm.tape.backward(tm.metric_node);

    const ModelConfig& cfg = bundle.config;
    const InputSequence& input = pair.negative;
    SaliencyMap map;
    map.critical_layer = critical_layer;
    map.cells.assign(static_cast<size_t>(critical_layer) + 1,
                     std::vector<Tensor2>(static_cast<size_t>(cfg.n_heads)));
    map.flows.assign(static_cast<size_t>(critical_layer) + 1, SaliencyFlows{});
    const int last = input.last_pos();
    for (int l = 0; l <= critical_layer; ++l) {
        SaliencyFlows& fl = map.flows[static_cast<size_t>(l)];
        for (int h = 0; h < cfg.n_heads; ++h) {
            const int node = tm.prob_nodes[static_cast<size_t>(l)][static_cast<size_t>(h)];
            const Tensor2& p = tm.tape.value(node);
            const Tensor2& g = tm.tape.grad(node);
            Tensor2 cell(p.rows, p.cols);
            for (size_t i = 0; i < cell.size(); ++i) cell.data[i] = p.data[i] * g.data[i];
            for (int qp = 0; qp < cell.rows; ++qp) {
                const TokenRole qr = input.role_of(qp);
                for (int kp = 0; kp <= std::min(qp, cell.cols - 1); ++kp) {
                    const TokenRole kr = input.role_of(kp);
                    const double v = cell.at(qp, kp);
                    if (qr == TokenRole::Query && kr == TokenRole::Visual) fl.v_to_q += v;
                    if (qp == last && kr == TokenRole::Query) fl.q_to_l += v;
                    if (qp == last && kr == TokenRole::Visual) fl.v_to_l += v;
                }
            }
            map.cells[static_cast<size_t>(l)][static_cast<size_t>(h)] = std::move(cell);
        }
    }
    return map;
}

LensRow logit_lens_vector(const ModelBundle& bundle, std::span<const double> v, int k,
                          std::vector<double>* full) {
    const ModelConfig& cfg = bundle.config;
    if (static_cast<int>(v.size()) != cfg.d_model)
        throw ShapeError("logit_lens: vector length != d_model");
    Tensor2 row(1, cfg.d_model);
    layernorm_row(v, bundle.weights.lnf_gain, bundle.weights.lnf_bias, row.row_span(0));
    Tensor2 logits = matmul(row, bundle.weights.unembed);
    softmax_row_prefix(logits.row_span(0), logits.cols);
    if (full) full->assign(logits.row(0), logits.row(0) + logits.cols);

    LensRow out;
    out.entropy = 0.0;
    for (int t = 0; t < logits.cols; ++t) {
        const double p = logits.at(0, t);
        if (p > 0.0) out.entropy -= p * std::log(p);
    }
    std::vector<int> order(static_cast<size_t>(logits.cols));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const double pa = logits.at(0, a);
        const double pb = logits.at(0, b);
        if (pa != pb) return pa > pb;
        return a < b;
    });
    const int keep = std::min<int>(k, logits.cols);
    for (int i = 0; i < keep; ++i)
        out.topk.push_back({order[static_cast<size_t>(i)], logits.at(0, order[static_cast<size_t>(i)])});
    return out;
}

std::vector<LensRow> logit_lens_steering(const ModelBundle& bundle, const SteeringSet& steering,
                                         int k) {
    std::vector<LensRow> rows;
    for (int l = 0; l < steering.vectors.rows; ++l)
        rows.push_back(logit_lens_vector(bundle, steering.layer(l), k));
    return rows;
}

std::vector<std::vector<VisualLensCell>> visual_token_lens(const ModelBundle& bundle,
                                                           const ActivationTrace& trace,
                                                           const Lexicon& lexicon) {
    std::vector<int> lex_tokens;
    for (const auto& [tok, kw] : lexicon.token_to_keyword) lex_tokens.push_back(tok);
    const int n_vis = bundle.config.n_visual;
    std::vector<std::vector<VisualLensCell>> out;
    for (size_t l = 0; l < trace.residual.size(); ++l) {
        if (!trace.has_residual(static_cast<int>(l))) continue;
        std::vector<VisualLensCell> row;
        for (int p = 0; p < n_vis; ++p) {
            std::vector<double> probs;
            LensRow lens = logit_lens_vector(bundle, trace.residual[l].row_span(p), 1, &probs);
            VisualLensCell cell;
            cell.entropy = lens.entropy;
            for (int t : lex_tokens) cell.emotion_mass += probs[static_cast<size_t>(t)];
            row.push_back(cell);
        }
        out.push_back(std::move(row));
    }
    return out;
}

double phase_patch(const ModelBundle& bundle, const std::vector<ContrastivePair>& pairs,
                   TokenRole role, int layer_lo, int layer_hi, const HookedHitRateFn& evaluator,
                   const std::vector<double>* baselines) {
    if (pairs.empty()) throw DataError("phase_patch: no pairs");
    if (layer_lo > layer_hi) return 0.0;
    const int P = static_cast<int>(pairs.size());
    std::vector<double> deltas(pairs.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (int p = 0; p < P; ++p) {
        const ContrastivePair& pair = pairs[static_cast<size_t>(p)];
        CaptureFilter f;
        f.residual = true;
        f.layer_lo = layer_lo;
        f.layer_hi = layer_hi;
        auto [logits, donor] = run_with_capture(bundle, pair.positive, f);
        (void)logits;
        PatchSpec spec;
        TokenGroupAt g;
        g.role = role;
        g.layer_lo = layer_lo;
        g.layer_hi = layer_hi;
        spec.targets.push_back(g);
        StepHooks patch = make_patch_hooks(bundle, pair.negative, donor, spec);
        const double patched = evaluator(pair.negative, pair.emotion, patch);
        const double base = baselines ? (*baselines)[static_cast<size_t>(p)]
                                      : evaluator(pair.negative, pair.emotion, StepHooks{});
        deltas[static_cast<size_t>(p)] = patched - base;
    }
    double sum = 0.0;
    for (double d : deltas) sum += d;
    return sum / P;
}

std::vector<int> knockout(const ModelBundle& bundle, const InputSequence& input,
                          const std::vector<std::pair<int, int>>& heads, KnockoutMode mode,
                          int max_new, const ActivationTrace* donor, const StepHooks& extra) {
    for (const auto& [l, h] : heads)
        if (l < 0 || l >= bundle.config.n_layers || h < 0 || h >= bundle.config.n_heads)
            throw IndexError("knockout: head out of range");
    StepHooks hooks;
    if (mode == KnockoutMode::Zero) {
        std::set<std::pair<int, int>> set(heads.begin(), heads.end());
        hooks.on_head_out = [set](int layer, int head, int /*step*/, int /*row0*/, Tensor2& out) {
            if (set.count({layer, head}))
                std::fill(out.data.begin(), out.data.end(), 0.0);
        };
    } else {
        if (!donor) throw DataError("knockout: recover mode needs a donor trace");
        PatchSpec spec;
        for (const auto& [l, h] : heads) {
            HeadOutputAt t;
            t.layer = l;
            t.head = h;
            t.positions.resize(static_cast<size_t>(donor->seq_len));
            std::iota(t.positions.begin(), t.positions.end(), 0);
            spec.targets.push_back(t);
        }
        hooks = make_patch_hooks(bundle, input, *donor, spec);
    }
    return greedy_decode(bundle, input, max_new, chain_hooks(hooks, extra));
}

IntersectionReport head_intersection(
    const std::vector<std::pair<std::string, std::vector<HeadScore>>>& rankings_per_emotion,
    int k) {
    if (rankings_per_emotion.size() < 2)
        throw DataError("head_intersection: needs at least two emotions");
    if (rankings_per_emotion.size() > 32)
        throw DataError("head_intersection: too many emotions");
    IntersectionReport rep;
    std::map<std::pair<int, int>, std::uint32_t> membership;
    for (size_t e = 0; e < rankings_per_emotion.size(); ++e) {
        rep.emotions.push_back(rankings_per_emotion[e].first);
        int taken = 0;
        for (const HeadScore& hs : rankings_per_emotion[e].second) {
            if (!hs.valid) continue;
            if (taken++ >= k) break;
            membership[{hs.layer, hs.head}] |= (1u << e);
        }
    }
    for (const auto& [head, mask] : membership) ++rep.subset_counts[mask];
    return rep;
}

double keyword_frequency_probe(const ModelBundle& bundle,
                               const std::vector<InputSequence>& inputs,
                               const std::vector<int>& target_tokens, int max_new,
                               const StepHooks& hooks) {
    if (inputs.empty()) throw DataError("keyword_frequency_probe: no inputs");
    for (int t : target_tokens)
        if (t < 0 || t >= bundle.config.vocab_size)
            throw IndexError("keyword_frequency_probe: target token out of range");
    std::set<int> targets(target_tokens.begin(), target_tokens.end());
    const int N = static_cast<int>(inputs.size());
    std::vector<int> hit(inputs.size(), 0);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < N; ++i) {
        std::vector<int> decoded = greedy_decode(bundle, inputs[static_cast<size_t>(i)], max_new, hooks);
        for (int t : decoded)
            if (targets.count(t)) {
                hit[static_cast<size_t>(i)] = 1;
                break;
            }
    }
    double sum = 0.0;
    for (int h : hit) sum += h;
    return sum / N;
}

} // namespace emc
