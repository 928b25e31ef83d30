#include "emocirc/model.hpp"

#include <cmath>
#include <cstring>

#include "json.hpp"

#include "emocirc/binio.hpp"

namespace emc {

void ModelConfig::validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_mlp <= 0 || vocab_size <= 0 ||
        n_visual <= 0 || max_seq <= 0)
        throw DataError("config: dimensions must be positive");
    if (d_model % n_heads != 0)
        throw DataError("config: d_model must be divisible by n_heads");
    if (!(0 <= adapt_end && adapt_end < aggregate_end && aggregate_end < n_layers))
        throw DataError("config: phase boundaries must satisfy 0 <= adapt_end < aggregate_end < n_layers");
    if (n_visual >= max_seq)
        throw DataError("config: n_visual must leave room for text");
}

std::string ModelConfig::to_canonical_json() const {
    Json j = Json::object();
    j["adapt_end"] = adapt_end;
    j["aggregate_end"] = aggregate_end;
    j["d_mlp"] = d_mlp;
    j["d_model"] = d_model;
    j["max_seq"] = max_seq;
    j["n_heads"] = n_heads;
    j["n_layers"] = n_layers;
    j["n_visual"] = n_visual;
    j["vocab_size"] = vocab_size;
    return j.dump();
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("config JSON parse error: ") + e.what());
    }
    ModelConfig c;
    auto get = [&](const char* key, int& slot) {
        if (j.contains(key)) slot = j.at(key).get<int>();
    };
    get("n_layers", c.n_layers);
    get("n_heads", c.n_heads);
    get("d_model", c.d_model);
    get("d_mlp", c.d_mlp);
    get("vocab_size", c.vocab_size);
    get("n_visual", c.n_visual);
    get("max_seq", c.max_seq);
    get("adapt_end", c.adapt_end);
    get("aggregate_end", c.aggregate_end);
    c.validate();
    return c;
}

void InputSequence::validate(const ModelConfig& cfg) const {
    if (visual.rows != cfg.n_visual || visual.cols != cfg.d_model)
        throw ShapeError("input: visual prefix must be n_visual x d_model");
    if (tokens.empty()) throw DataError("input: needs at least one text token");
    if (length() > cfg.max_seq) throw DataError("input: sequence too long");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw IndexError("input: token id out of range");
}

std::uint64_t InputSequence::fingerprint() const {
    std::uint64_t h = fnv1a64(visual.data.data(), visual.data.size() * sizeof(double));
    h ^= fnv1a64(&visual.rows, sizeof(visual.rows));
    if (!tokens.empty()) h = h * 0x100000001b3ULL ^ fnv1a64(tokens.data(), tokens.size() * sizeof(int));
    return h;
}

std::int64_t parameter_count(const ModelConfig& c) {
    const std::int64_t d = c.d_model;
    std::int64_t per_layer = 4 * d * d + 2 * d * static_cast<std::int64_t>(c.d_mlp) + 4 * d;
    return static_cast<std::int64_t>(c.vocab_size) * d      // embed
           + static_cast<std::int64_t>(c.max_seq) * d       // positional
           + d * static_cast<std::int64_t>(c.vocab_size)    // unembed
           + c.n_layers * per_layer                         // blocks
           + 2 * d;                                         // final layer norm
}

ModelBundle init_random(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    Rng rng(seed);
    ModelBundle b;
    b.config = config;
    ModelWeights& w = b.weights;
    w.embed = Tensor2(config.vocab_size, config.d_model);
    rng.fill_gaussian(w.embed, scale);
    w.pos = Tensor2(config.max_seq, config.d_model);
    rng.fill_gaussian(w.pos, scale);
    w.unembed = Tensor2(config.d_model, config.vocab_size);
    rng.fill_gaussian(w.unembed, scale);
    w.layers.resize(static_cast<size_t>(config.n_layers));
    for (auto& lw : w.layers) {
        lw.wq = Tensor2(config.d_model, config.d_model);
        lw.wk = Tensor2(config.d_model, config.d_model);
        lw.wv = Tensor2(config.d_model, config.d_model);
        lw.wo = Tensor2(config.d_model, config.d_model);
        lw.w_up = Tensor2(config.d_model, config.d_mlp);
        lw.w_down = Tensor2(config.d_mlp, config.d_model);
        rng.fill_gaussian(lw.wq, scale);
        rng.fill_gaussian(lw.wk, scale);
        rng.fill_gaussian(lw.wv, scale);
        rng.fill_gaussian(lw.wo, scale);
        rng.fill_gaussian(lw.w_up, scale);
        rng.fill_gaussian(lw.w_down, scale);
        lw.ln1_gain.assign(static_cast<size_t>(config.d_model), 1.0);
        lw.ln1_bias.assign(static_cast<size_t>(config.d_model), 0.0);
        lw.ln2_gain.assign(static_cast<size_t>(config.d_model), 1.0);
        lw.ln2_bias.assign(static_cast<size_t>(config.d_model), 0.0);
    }
    w.lnf_gain.assign(static_cast<size_t>(config.d_model), 1.0);
    w.lnf_bias.assign(static_cast<size_t>(config.d_model), 0.0);
    return b;
}

namespace {

Tensor2 col_block(const Tensor2& m, int c0, int w) {
    Tensor2 out(m.rows, w);
    for (int i = 0; i < m.rows; ++i)
        std::memcpy(out.row(i), m.row(i) + c0, sizeof(double) * static_cast<size_t>(w));
    return out;
}

void append_rows(Tensor2& dst, const Tensor2& src) {
    if (dst.rows == 0) {
        dst = src;
        return;
    }
    if (dst.cols != src.cols) throw ShapeError("append_rows: column mismatch");
    dst.data.insert(dst.data.end(), src.data.begin(), src.data.end());
    dst.rows += src.rows;
}

Tensor2 build_prefill_embedding(const ModelBundle& bundle, const InputSequence& input) {
    const ModelConfig& cfg = bundle.config;
    const int T = input.length();
    Tensor2 emb(T, cfg.d_model);
    for (int p = 0; p < input.visual.rows; ++p)
        std::memcpy(emb.row(p), input.visual.row(p), sizeof(double) * static_cast<size_t>(cfg.d_model));
    for (size_t i = 0; i < input.tokens.size(); ++i) {
        const int p = input.visual.rows + static_cast<int>(i);
        const double* e = bundle.weights.embed.row(input.tokens[i]);
        const double* q = bundle.weights.pos.row(p);
        double* dst = emb.row(p);
        for (int j = 0; j < cfg.d_model; ++j) dst[j] = e[j] + q[j];
    }
    return emb;
}

Tensor2 build_step_embedding(const ModelBundle& bundle, int token, int pos) {
    const ModelConfig& cfg = bundle.config;
    if (token < 0 || token >= cfg.vocab_size) throw IndexError("decode: token id out of range");
    if (pos >= cfg.max_seq) throw DataError("decode: sequence too long");
    Tensor2 emb(1, cfg.d_model);
    const double* e = bundle.weights.embed.row(token);
    const double* q = bundle.weights.pos.row(pos);
    for (int j = 0; j < cfg.d_model; ++j) emb.at(0, j) = e[j] + q[j];
    return emb;
}

// Processes a batch of new rows (all of prefill, or one decode row) against
// the cache. Appends this batch's keys/values before attending so rows see
// themselves; causality comes from per-row softmax prefixes. With
// stop_attn_layer >= 0 the pass ends after that layer's attention module and
// *attn_stop_out receives its output instead of logits being produced.
Tensor2 engine_rows(const ModelBundle& bundle, Tensor2 x, int row0, int step,
                    std::vector<std::vector<Tensor2>>& cache_k,
                    std::vector<std::vector<Tensor2>>& cache_v, const StepHooks& hooks,
                    int stop_attn_layer = -1, Tensor2* attn_stop_out = nullptr) {
    const ModelConfig& cfg = bundle.config;
    const int dh = cfg.d_head();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const int nrows = x.rows;

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = bundle.weights.layers[static_cast<size_t>(l)];
        Tensor2 x1 = layernorm_rows(x, lw.ln1_gain, lw.ln1_bias);
        Tensor2 q = matmul(x1, lw.wq);
        Tensor2 k = matmul(x1, lw.wk);
        Tensor2 v = matmul(x1, lw.wv);
        for (int h = 0; h < cfg.n_heads; ++h) {
            Tensor2 kh = col_block(k, h * dh, dh);
            if (hooks.on_key) hooks.on_key(l, h, step, row0, kh);
            append_rows(cache_k[static_cast<size_t>(l)][static_cast<size_t>(h)], kh);
            append_rows(cache_v[static_cast<size_t>(l)][static_cast<size_t>(h)], col_block(v, h * dh, dh));
        }
        Tensor2 attn_concat(nrows, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Tensor2& kc = cache_k[static_cast<size_t>(l)][static_cast<size_t>(h)];
            const Tensor2& vc = cache_v[static_cast<size_t>(l)][static_cast<size_t>(h)];
            Tensor2 scores = matmul_nt(col_block(q, h * dh, dh), kc);
            for (double& s : scores.data) s *= inv_sqrt;
            if (hooks.on_scores) hooks.on_scores(l, h, step, row0, scores);
            for (int i = 0; i < nrows; ++i)
                softmax_row_prefix(scores.row_span(i), std::min(row0 + i + 1, scores.cols));
            if (hooks.on_probs) hooks.on_probs(l, h, step, row0, scores);
            Tensor2 head_out = matmul(scores, vc);
            if (hooks.on_head_out) hooks.on_head_out(l, h, step, row0, head_out);
            for (int i = 0; i < nrows; ++i)
                std::memcpy(attn_concat.row(i) + h * dh, head_out.row(i),
                            sizeof(double) * static_cast<size_t>(dh));
        }
        Tensor2 attn_out = matmul(attn_concat, lw.wo);
        if (hooks.on_attn_out) hooks.on_attn_out(l, step, row0, attn_out);
        if (l == stop_attn_layer) {
            if (attn_stop_out) *attn_stop_out = std::move(attn_out);
            return Tensor2();
        }
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

        Tensor2 x2 = layernorm_rows(x, lw.ln2_gain, lw.ln2_bias);
        Tensor2 acts = matmul(x2, lw.w_up);
        for (double& a : acts.data) a = gelu(a);
        if (hooks.on_neuron_acts) hooks.on_neuron_acts(l, step, row0, acts);
        Tensor2 mlp_out = matmul(acts, lw.w_down);
        for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp_out.data[i];
        if (hooks.on_residual) hooks.on_residual(l, step, row0, x);
    }
    Tensor2 xf = layernorm_rows(x, bundle.weights.lnf_gain, bundle.weights.lnf_bias);
    return matmul(xf, bundle.weights.unembed);
}

void make_cache(const ModelConfig& cfg, std::vector<std::vector<Tensor2>>& ck,
                std::vector<std::vector<Tensor2>>& cv) {
    ck.assign(static_cast<size_t>(cfg.n_layers), std::vector<Tensor2>(static_cast<size_t>(cfg.n_heads)));
    cv.assign(static_cast<size_t>(cfg.n_layers), std::vector<Tensor2>(static_cast<size_t>(cfg.n_heads)));
}

} // namespace

Tensor2 forward_full(const ModelBundle& bundle, const InputSequence& input, const StepHooks& hooks) {
    input.validate(bundle.config);
    std::vector<std::vector<Tensor2>> ck, cv;
    make_cache(bundle.config, ck, cv);
    return engine_rows(bundle, build_prefill_embedding(bundle, input), 0, 0, ck, cv, hooks);
}

Tensor2 forward_until_attn(const ModelBundle& bundle, const InputSequence& input, int stop_layer,
                           const StepHooks& hooks) {
    input.validate(bundle.config);
    if (stop_layer < 0 || stop_layer >= bundle.config.n_layers)
        throw IndexError("forward_until_attn: layer out of range");
    std::vector<std::vector<Tensor2>> ck, cv;
    make_cache(bundle.config, ck, cv);
    Tensor2 attn;
    engine_rows(bundle, build_prefill_embedding(bundle, input), 0, 0, ck, cv, hooks, stop_layer,
                &attn);
    return attn;
}

DecodeSession::DecodeSession(const ModelBundle& bundle, const InputSequence& input, StepHooks hooks)
    : bundle_(bundle), hooks_(std::move(hooks)) {
    input.validate(bundle.config);
    make_cache(bundle.config, cache_k_, cache_v_);
    Tensor2 logits =
        engine_rows(bundle_, build_prefill_embedding(bundle_, input), 0, 0, cache_k_, cache_v_, hooks_);
    next_pos_ = input.length();
    last_logits_.assign(logits.row(logits.rows - 1), logits.row(logits.rows - 1) + logits.cols);
}

const std::vector<double>& DecodeSession::step(int token) {
    ++step_index_;
    Tensor2 logits = engine_rows(bundle_, build_step_embedding(bundle_, token, next_pos_), next_pos_,
                                 step_index_, cache_k_, cache_v_, hooks_);
    ++next_pos_;
    last_logits_.assign(logits.row(0), logits.row(0) + logits.cols);
    return last_logits_;
}

int argmax_token(std::span<const double> logits) {
    int best = 0;
    for (size_t j = 1; j < logits.size(); ++j)
        if (logits[j] > logits[best]) best = static_cast<int>(j);
    return best;
}

std::vector<int> greedy_decode(const ModelBundle& bundle, const InputSequence& input, int max_new,
                               const StepHooks& hooks) {
    if (max_new < 1) throw DataError("greedy_decode: max_new must be >= 1");
    if (input.length() + max_new > bundle.config.max_seq)
        throw DataError("greedy_decode: sequence too long");
    DecodeSession session(bundle, input, hooks);
    std::vector<int> out;
    out.reserve(static_cast<size_t>(max_new));
    out.push_back(argmax_token(session.last_logits()));
    for (int i = 1; i < max_new; ++i) out.push_back(argmax_token(session.step(out.back())));
    return out;
}

namespace {

void write_vec(ByteWriter& w, const std::vector<double>& v) {
    Tensor2 t(1, static_cast<int>(v.size()));
    t.data = v;
    w.matrix(t);
}

std::vector<double> read_vec(ByteReader& r, int expect) {
    Tensor2 t = r.matrix();
    if (t.rows != 1 || t.cols != expect) throw FormatError("weight file: vector dimension mismatch");
    return t.data;
}

void check_dims(const Tensor2& t, int rows, int cols) {
    if (t.rows != rows || t.cols != cols) throw FormatError("weight file: matrix dimension mismatch");
}

} // namespace

void save_weights(const ModelBundle& bundle, const std::string& path) {
    ByteWriter w;
    w.raw("EMC1", 4);
    w.str(bundle.config.to_canonical_json());
    w.matrix(bundle.weights.embed);
    w.matrix(bundle.weights.pos);
    w.matrix(bundle.weights.unembed);
    for (const auto& lw : bundle.weights.layers) {
        w.matrix(lw.wq);
        w.matrix(lw.wk);
        w.matrix(lw.wv);
        w.matrix(lw.wo);
        w.matrix(lw.w_up);
        w.matrix(lw.w_down);
        write_vec(w, lw.ln1_gain);
        write_vec(w, lw.ln1_bias);
        write_vec(w, lw.ln2_gain);
        write_vec(w, lw.ln2_bias);
    }
    write_vec(w, bundle.weights.lnf_gain);
    write_vec(w, bundle.weights.lnf_bias);
    w.finish_crc();
    w.save(path);
}

ModelBundle load_weights(const std::string& path) {
    ByteReader r = ByteReader::load(path);
    r.check_crc("weight file");
    r.expect_magic("EMC1");
    ModelBundle b;
    b.config = ModelConfig::from_json_text(r.str());
    const ModelConfig& c = b.config;
    ModelWeights& w = b.weights;
    w.embed = r.matrix();
    check_dims(w.embed, c.vocab_size, c.d_model);
    w.pos = r.matrix();
    check_dims(w.pos, c.max_seq, c.d_model);
    w.unembed = r.matrix();
    check_dims(w.unembed, c.d_model, c.vocab_size);
    w.layers.resize(static_cast<size_t>(c.n_layers));
    for (auto& lw : w.layers) {
        lw.wq = r.matrix();
        check_dims(lw.wq, c.d_model, c.d_model);
        lw.wk = r.matrix();
        check_dims(lw.wk, c.d_model, c.d_model);
        lw.wv = r.matrix();
        check_dims(lw.wv, c.d_model, c.d_model);
        lw.wo = r.matrix();
        check_dims(lw.wo, c.d_model, c.d_model);
        lw.w_up = r.matrix();
        check_dims(lw.w_up, c.d_model, c.d_mlp);
        lw.w_down = r.matrix();
        check_dims(lw.w_down, c.d_mlp, c.d_model);
        lw.ln1_gain = read_vec(r, c.d_model);
        lw.ln1_bias = read_vec(r, c.d_model);
        lw.ln2_gain = read_vec(r, c.d_model);
        lw.ln2_bias = read_vec(r, c.d_model);
    }
    w.lnf_gain = read_vec(r, c.d_model);
    w.lnf_bias = read_vec(r, c.d_model);
    if (!r.at_end()) throw FormatError("weight file: trailing bytes");
    return b;
}

} // namespace emc
