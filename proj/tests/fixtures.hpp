#pragma once

// Small shared instances for the unit and acceptance tests.

#include <string>
#include <vector>

#include "sfgen/lm.hpp"
#include "sfgen/scorer.hpp"
#include "sfgen/seqmdp.hpp"

namespace sfgen::fixtures {

inline constexpr TokenId kA = 3;
inline constexpr TokenId kB = 4;

/// {<s>, </s>, <unk>, a, b}
inline Vocab ab_vocab() {
    Vocab v;
    v.add("a");
    v.add("b");
    return v;
}

/// a 0.5, b 0.3, EOS 0.2 everywhere; BOS and UNK never chosen.
inline TableLM toy_lm() {
    ProbVector d(5);
    d << 0.0, 0.2, 0.0, 0.5, 0.3;
    return TableLM(5, d);
}

inline LexiconScorer lexicon(const Vocab& v, std::vector<std::string> patterns) {
    return LexiconScorer(SubjectSpec{"test", std::move(patterns), ""}, v);
}

/// Bigram model fitted on a short a/b corpus; smoothing reaches every id.
inline NGramLM small_bigram(double alpha = 0.1) {
    const std::vector<std::vector<std::string>> docs = {{"a", "a", "b"}, {"a", "b"}, {"b", "a", "a"}, {"a"},
                                                        {"b", "b", "a"}, {"a", "a"}, {"a", "b", "a"}};
    const auto vocab = build_vocab(docs, 1);
    std::vector<std::vector<TokenId>> ids;
    for (const auto& d : docs) {
        std::vector<TokenId> v;
        for (const auto& s : d) v.push_back(vocab.id(s));
        ids.push_back(std::move(v));
    }
    return fit_ngram(ids, 2, alpha, {0.2, 0.8}, vocab.size());
}

/// Every terminal state reachable from `root` with positive probability.
inline std::vector<SeqState> reachable_terminals(const Policy& policy, const SeqState& root, std::size_t max_len) {
    std::vector<SeqState> out;
    std::vector<SeqState> stack{root};
    while (!stack.empty()) {
        auto s = std::move(stack.back());
        stack.pop_back();
        if (s.terminal()) {
            out.push_back(std::move(s));
            continue;
        }
        const auto p = policy.next_dist(s);
        for (Eigen::Index a = 0; a < p.size(); ++a) {
            if (p[a] > 0.0) stack.push_back(step(s, static_cast<TokenId>(a), max_len, policy.vocab_size()));
        }
    }
    return out;
}

/// Probability of a full path from BOS under `policy`, by direct product.
inline double path_probability(const Policy& policy, const SeqState& terminal) {
    const auto toks = terminal.tokens();
    double p = 1.0;
    for (std::size_t i = 1; i < toks.size(); ++i) {
        const SeqState prefix(std::vector<TokenId>(toks.begin(), toks.begin() + static_cast<std::ptrdiff_t>(i)), false);
        p *= policy.next_dist(prefix)[toks[i]];
    }
    return p;
}

}  // namespace sfgen::fixtures
