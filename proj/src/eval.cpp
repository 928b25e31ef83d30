#include "emocirc/eval.hpp"

#include <algorithm>

#include "json.hpp"

#include "emocirc/binio.hpp"

namespace emc {

const std::string& EmotionWheel::core(const std::string& keyword) const {
    auto it = mapping.find(keyword);
    if (it == mapping.end()) throw DataError("wheel " + id + ": keyword not mapped: " + keyword);
    return it->second;
}

int Lexicon::token_of(const std::string& keyword) const {
    for (const auto& [tok, kw] : token_to_keyword)
        if (kw == keyword) return tok;
    throw DataError("lexicon: keyword has no token: " + keyword);
}

const std::vector<std::string>& Lexicon::keywords_of(const std::string& emotion) const {
    auto it = groups.find(emotion);
    if (it == groups.end()) throw DataError("lexicon: unknown emotion group: " + emotion);
    return it->second;
}

std::vector<int> Lexicon::token_ids(const std::string& emotion) const {
    std::vector<int> ids;
    for (const auto& kw : keywords_of(emotion)) ids.push_back(token_of(kw));
    return ids;
}

std::set<std::string> extract_keywords(const std::vector<int>& decoded, const Lexicon& lexicon) {
    std::set<std::string> out;
    for (int tok : decoded) {
        auto it = lexicon.token_to_keyword.find(tok);
        if (it != lexicon.token_to_keyword.end()) out.insert(it->second);
    }
    return out;
}

double hit_rate(const std::set<std::string>& keywords, const std::string& label,
                const std::vector<EmotionWheel>& wheels) {
    if (wheels.empty()) throw DataError("hit_rate: no wheels");
    int hits = 0;
    for (const EmotionWheel& w : wheels) {
        if (!w.maps(label))
            throw DataError("hit_rate: label '" + label + "' not covered by wheel " + w.id);
        const std::string& want = w.core(label);
        bool hit = false;
        for (const std::string& kw : keywords) {
            if (w.maps(kw) && w.core(kw) == want) {
                hit = true;
                break;
            }
        }
        if (hit) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(wheels.size());
}

FsResult fs_score(const std::set<std::string>& predicted, const std::set<std::string>& truth,
                  const std::vector<EmotionWheel>& wheels) {
    if (wheels.empty()) throw DataError("fs_score: no wheels");
    FsResult r;
    double sum = 0.0;
    for (const EmotionWheel& w : wheels) {
        std::set<std::string> gp, gt;
        for (const auto& kw : predicted)
            if (w.maps(kw)) gp.insert(w.core(kw));
        for (const auto& kw : truth)
            if (w.maps(kw)) gt.insert(w.core(kw));
        int inter = 0;
        for (const auto& c : gp)
            if (gt.count(c)) ++inter;
        WheelPR pr;
        pr.wheel_id = w.id;
        pr.precision = gp.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(gp.size());
        pr.recall = gt.empty() ? 0.0 : static_cast<double>(inter) / static_cast<double>(gt.size());
        pr.f1 = (pr.precision + pr.recall) == 0.0
                    ? 0.0
                    : 2.0 * pr.precision * pr.recall / (pr.precision + pr.recall);
        sum += pr.f1;
        r.per_wheel.push_back(pr);
    }
    r.fs = sum / static_cast<double>(wheels.size());
    return r;
}

WafResult waf(const std::vector<Polarity>& predictions, const std::vector<Polarity>& labels) {
    if (predictions.size() != labels.size()) throw DataError("waf: length mismatch");
    if (labels.empty()) throw DataError("waf: empty input");
    // Confusion counts indexed [label][prediction], 0 = positive, 1 = negative.
    double m[2][2] = {{0, 0}, {0, 0}};
    double correct = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        const int li = labels[i] == Polarity::Positive ? 0 : 1;
        const int pi = predictions[i] == Polarity::Positive ? 0 : 1;
        m[li][pi] += 1.0;
        if (li == pi) correct += 1.0;
    }
    const double total = static_cast<double>(labels.size());
    double weighted = 0.0;
    for (int c = 0; c < 2; ++c) {
        const double support = m[c][0] + m[c][1];
        const double tp = m[c][c];
        const double fp = m[1 - c][c];
        const double fn = m[c][1 - c];
        const double prec = (tp + fp) == 0.0 ? 0.0 : tp / (tp + fp);
        const double rec = (tp + fn) == 0.0 ? 0.0 : tp / (tp + fn);
        const double f1 = (prec + rec) == 0.0 ? 0.0 : 2.0 * prec * rec / (prec + rec);
        weighted += f1 * (support / total);
    }
    return {weighted, correct / total};
}

double change_ratio(double h_base, double h_new) {
    if (h_base <= 0.0) throw UndefinedRatioError("change_ratio: baseline hit rate is not positive");
    return (h_new - h_base) / h_base * 100.0;
}

namespace {

const std::vector<std::pair<std::string, std::vector<std::string>>>& keyword_table() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> table = {
        {"happy",
         {"happy", "joyful", "cheerful", "delighted", "content", "pleased", "elated", "upbeat"}},
        {"sad",
         {"sad", "gloomy", "sorrowful", "mournful", "downcast", "tearful", "dejected", "blue"}},
        {"angry",
         {"angry", "furious", "irate", "enraged", "hostile", "annoyed", "livid", "seething"}},
        {"fear",
         {"fear", "afraid", "scared", "terrified", "anxious", "panicked", "nervous", "uneasy"}},
    };
    return table;
}

// Nuances wheel "w2" does not map; a response carrying only one of these
// scores a half hit under the default two-wheel pack.
const std::set<std::string>& w2_dropped() {
    static const std::set<std::string> dropped = {"upbeat", "blue", "seething", "uneasy"};
    return dropped;
}

} // namespace

const std::vector<std::string>& core_emotions() {
    static const std::vector<std::string> cores = {"happy", "sad", "angry", "fear"};
    return cores;
}

Polarity polarity_of_core(const std::string& core) {
    if (core == "happy") return Polarity::Positive;
    if (core == "sad" || core == "angry" || core == "fear") return Polarity::Negative;
    throw DataError("polarity_of_core: unknown core " + core);
}

std::vector<EmotionWheel> default_wheels() {
    EmotionWheel w1, w2;
    w1.id = "w1";
    w2.id = "w2";
    for (const auto& [core, kws] : keyword_table())
        for (const auto& kw : kws) {
            w1.mapping[kw] = core;
            if (!w2_dropped().count(kw)) w2.mapping[kw] = core;
        }
    return {w1, w2};
}

Lexicon default_lexicon(int token_base) {
    Lexicon lex;
    int tok = token_base;
    for (const auto& [core, kws] : keyword_table()) {
        lex.groups[core] = kws;
        for (const auto& kw : kws) lex.token_to_keyword[tok++] = kw;
    }
    return lex;
}

void save_wheel(const EmotionWheel& wheel, const std::string& path) {
    Json j = Json::object();
    j["wheel_id"] = wheel.id;
    Json m = Json::object();
    for (const auto& [kw, core] : wheel.mapping) m[kw] = core;
    j["mapping"] = std::move(m);
    write_text_file(path, j.dump() + "\n");
}

EmotionWheel load_wheel(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("wheel file parse error: ") + e.what());
    }
    EmotionWheel w;
    w.id = j.at("wheel_id").get<std::string>();
    for (const auto& [kw, core] : j.at("mapping").items())
        w.mapping[kw] = core.get<std::string>();
    return w;
}

void save_lexicon(const Lexicon& lexicon, const std::string& path) {
    Json j = Json::object();
    Json toks = Json::object();
    for (const auto& [tok, kw] : lexicon.token_to_keyword) toks[std::to_string(tok)] = kw;
    j["tokens"] = std::move(toks);
    Json groups = Json::object();
    for (const auto& [emotion, kws] : lexicon.groups) {
        Json arr = Json::array();
        for (const auto& kw : kws) arr.push_back(kw);
        groups[emotion] = std::move(arr);
    }
    j["groups"] = std::move(groups);
    write_text_file(path, j.dump() + "\n");
}

Lexicon load_lexicon(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("lexicon file parse error: ") + e.what());
    }
    Lexicon lex;
    for (const auto& [tok, kw] : j.at("tokens").items())
        lex.token_to_keyword[std::stoi(tok)] = kw.get<std::string>();
    for (const auto& [emotion, kws] : j.at("groups").items()) {
        std::vector<std::string> v;
        for (const auto& kw : kws) v.push_back(kw.get<std::string>());
        lex.groups[emotion] = std::move(v);
    }
    return lex;
}

} // namespace emc
