#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "emocirc/errors.hpp"

namespace emc {

// Hierarchical keyword -> core-emotion mapping. Keywords missing from a
// wheel are simply not mappable under it (they drop out of that wheel's
// image).
struct EmotionWheel {
    std::string id;
    std::map<std::string, std::string> mapping;

    bool maps(const std::string& keyword) const { return mapping.count(keyword) != 0; }
    const std::string& core(const std::string& keyword) const;
};

// Token-level keyword table for the toy vocabulary, replacing the paper's
// LLM-as-Judge extraction with a deterministic scan.
struct Lexicon {
    std::map<int, std::string> token_to_keyword;               // injective
    std::map<std::string, std::vector<std::string>> groups;    // emotion -> keywords

    int token_of(const std::string& keyword) const;
    const std::vector<std::string>& keywords_of(const std::string& emotion) const;
    std::vector<int> token_ids(const std::string& emotion) const;
};

enum class Polarity { Positive, Negative };

// Keywords whose token ids appear in the decoded sequence, deduplicated.
std::set<std::string> extract_keywords(const std::vector<int>& decoded, const Lexicon& lexicon);

// Mean over wheels of the indicator that the mapped label core lies in the
// mapped image of Y. The label must be mappable under every wheel.
double hit_rate(const std::set<std::string>& keywords, const std::string& label,
                const std::vector<EmotionWheel>& wheels);

struct WheelPR {
    std::string wheel_id;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct FsResult {
    double fs = 0.0;
    std::vector<WheelPR> per_wheel;
};

FsResult fs_score(const std::set<std::string>& predicted, const std::set<std::string>& truth,
                  const std::vector<EmotionWheel>& wheels);

struct WafResult {
    double waf = 0.0;
    double accuracy = 0.0;
};

// Support-weighted mean of per-class F1 over {positive, negative}.
WafResult waf(const std::vector<Polarity>& predictions, const std::vector<Polarity>& labels);

// (h_new - h_base) / h_base * 100. h_base must be positive.
double change_ratio(double h_base, double h_new);

// Default evaluation pack: two wheels over the four basic emotions with
// eight surface keywords each (wheel "w2" drops a few nuances, so partial
// hits are representable). Keyword token ids start at `token_base`.
std::vector<EmotionWheel> default_wheels();
Lexicon default_lexicon(int token_base = 100);
const std::vector<std::string>& core_emotions();
Polarity polarity_of_core(const std::string& core);

void save_wheel(const EmotionWheel& wheel, const std::string& path);
EmotionWheel load_wheel(const std::string& path);
void save_lexicon(const Lexicon& lexicon, const std::string& path);
Lexicon load_lexicon(const std::string& path);

} // namespace emc
