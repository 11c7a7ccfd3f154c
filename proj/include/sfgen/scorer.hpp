#pragma once

// Subject scorers decide whether a finished sequence is undesired. They are
// written as small incremental automata so the exact enumerator can merge
// prefixes that share a scorer state.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include "sfgen/errors.hpp"
#include "sfgen/seqmdp.hpp"

namespace sfgen {

class Scorer {
public:
    using State = std::vector<std::int64_t>;

    virtual ~Scorer() = default;
    virtual State initial() const = 0;
    virtual void advance(State& state, TokenId token) const = 0;
    virtual bool undesired(const State& state) const = 0;
    /// Graded attribute score in [0, 1]; positive iff undesired.
    virtual double score(const State& state) const = 0;

    State run(std::span<const TokenId> tokens) const {
        auto s = initial();
        for (auto t : tokens) advance(s, t);
        return s;
    }
};

/// A control subject: a name plus lexicon patterns. Each pattern is a
/// whitespace-separated list of elements; an element is a literal surface or
/// `re:<regex>` matched against a whole token surface.
struct SubjectSpec {
    std::string name;
    std::vector<std::string> patterns;
    std::string description;
};

/// Lexicon file: one pattern per line, `#` comments and blank lines ignored.
inline SubjectSpec read_lexicon(const std::string& name, const std::string& path) {
    SubjectSpec spec{name, {}, ""};
    for (const auto& line : read_lines(path)) {
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        spec.patterns.push_back(line.substr(first));
    }
    if (spec.patterns.empty()) throw ConfigError("lexicon '" + path + "' has no patterns");
    return spec;
}

/// Flags a sequence when any pattern occurs as a contiguous token run.
///
/// State layout: one matched flag per pattern, followed by the trailing
/// window (longest pattern minus one) of tokens seen so far.
class LexiconScorer final : public Scorer {
public:
    LexiconScorer(const SubjectSpec& spec, const Vocab& vocab, TokenizeMode mode = TokenizeMode::kWhitespace) {
        if (spec.patterns.empty()) throw ConfigError("subject '" + spec.name + "' has no patterns");
        for (const auto& pat : spec.patterns) {
            std::vector<std::vector<bool>> elems;
            const auto parts = split_surfaces(pat, mode == TokenizeMode::kWhitespace ? TokenizeMode::kWhitespace : TokenizeMode::kChar);
            if (parts.empty()) throw ConfigError("empty pattern in subject '" + spec.name + "'");
            for (const auto& part : parts) {
                std::vector<bool> accept(vocab.size(), false);
                if (mode == TokenizeMode::kWhitespace && part.rfind("re:", 0) == 0) {
                    const std::regex re(part.substr(3));
                    for (std::size_t id = 3; id < vocab.size(); ++id) {
                        accept[id] = std::regex_match(vocab.surface(static_cast<TokenId>(id)), re);
                    }
                } else if (auto id = vocab.find(part)) {
                    // Surfaces missing from the vocabulary can never match.
                    accept[static_cast<std::size_t>(*id)] = true;
                }
                elems.push_back(std::move(accept));
            }
            window_ = std::max(window_, elems.size() - 1);
            patterns_.push_back(std::move(elems));
        }
    }

    State initial() const override { return State(patterns_.size(), 0); }

    void advance(State& s, TokenId token) const override {
        const auto np = patterns_.size();
        const auto seen = s.size() - np;
        for (std::size_t p = 0; p < np; ++p) {
            if (s[p]) continue;
            const auto& elems = patterns_[p];
            const auto need = elems.size() - 1;
            if (need > seen) continue;
            if (!accepts(elems.back(), token)) continue;
            bool ok = true;
            for (std::size_t j = 0; j < need && ok; ++j) {
                ok = accepts(elems[need - 1 - j], static_cast<TokenId>(s[s.size() - 1 - j]));
            }
            if (ok) s[p] = 1;
        }
        if (window_ == 0) return;
        if (seen == window_) s.erase(s.begin() + static_cast<std::ptrdiff_t>(np));
        s.push_back(token);
    }

    bool undesired(const State& s) const override {
        return std::any_of(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(patterns_.size()), [](auto f) { return f != 0; });
    }

    /// Fraction of patterns matched.
    double score(const State& s) const override {
        const auto hits = std::count_if(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(patterns_.size()),
                                        [](auto f) { return f != 0; });
        return static_cast<double>(hits) / static_cast<double>(patterns_.size());
    }

private:
    static bool accepts(const std::vector<bool>& accept, TokenId t) {
        return t >= 0 && static_cast<std::size_t>(t) < accept.size() && accept[static_cast<std::size_t>(t)];
    }

    std::vector<std::vector<std::vector<bool>>> patterns_;
    std::size_t window_ = 0;
};

/// Flags sequences with at least `threshold` tokens after the leading BOS
/// (EOS counts). Input sequences start with BOS; any later BOS is an
/// ordinary token.
class LengthScorer final : public Scorer {
public:
    explicit LengthScorer(std::size_t threshold) : threshold_(static_cast<std::int64_t>(threshold)) {
        if (threshold == 0) throw ConfigError("length threshold must be positive");
    }
    State initial() const override { return {-1}; }
    void advance(State& s, TokenId) const override {
        if (s[0] < threshold_) ++s[0];
    }
    bool undesired(const State& s) const override { return s[0] >= threshold_; }
    double score(const State& s) const override { return undesired(s) ? 1.0 : 0.0; }

private:
    std::int64_t threshold_;
};

/// -1 for an undesired terminal, 0 otherwise.
inline int score_terminal(const Scorer& scorer, const SeqState& state) {
    if (!state.terminal()) throw ContractViolation("score_terminal on a non-terminal state");
    return scorer.undesired(scorer.run(state.tokens())) ? -1 : 0;
}

inline double attribute_score(const Scorer& scorer, std::span<const TokenId> tokens) {
    return scorer.score(scorer.run(tokens));
}

}  // namespace sfgen
