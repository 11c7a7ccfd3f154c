#pragma once

// Base policies: the next-token distribution contract, an interpolated
// add-alpha n-gram model, an explicit rule table for exact fixtures, top-k
// sampling and perplexity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/checkpoint.hpp"
#include "sfgen/errors.hpp"
#include "sfgen/random.hpp"
#include "sfgen/seqmdp.hpp"

namespace sfgen {

using ProbVector = Eigen::VectorXd;

inline bool is_distribution(const ProbVector& p, double tol = 1e-9) {
    if (p.size() == 0) return false;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if (!(p[i] >= 0.0) || !std::isfinite(p[i])) return false;
    }
    return std::abs(p.sum() - 1.0) <= tol;
}

/// Anything that assigns a next-token distribution to non-terminal states.
class Policy {
public:
    virtual ~Policy() = default;
    virtual std::size_t vocab_size() const = 0;
    virtual ProbVector next_dist(const SeqState& state) const = 0;

    /// A key that, together with the state length, fully determines
    /// next_dist. nullopt means the whole prefix matters.
    virtual std::optional<std::vector<std::int64_t>> memo_key(const SeqState&) const { return std::nullopt; }
};

class LanguageModel : public Policy {
public:
    /// Number of trailing tokens next_dist depends on.
    virtual std::size_t context_span() const = 0;

    std::optional<std::vector<std::int64_t>> memo_key(const SeqState& state) const override {
        const auto toks = state.tokens();
        const auto n = std::min(context_span(), toks.size());
        return std::vector<std::int64_t>(toks.end() - static_cast<std::ptrdiff_t>(n), toks.end());
    }
};

// ---------------------------------------------------------------------------
// TableLM

struct TableRule {
    /// The rule fires when the state ends with this token sequence.
    std::vector<TokenId> suffix;
    ProbVector dist;
};

/// Explicit conditional distributions. First matching rule wins; the
/// default applies when nothing matches.
class TableLM final : public LanguageModel {
public:
    TableLM(std::size_t vocab_size, ProbVector default_dist, std::vector<TableRule> rules = {})
        : vocab_size_(vocab_size), default_(std::move(default_dist)), rules_(std::move(rules)) {
        check(default_);
        for (const auto& r : rules_) {
            check(r.dist);
            span_ = std::max(span_, r.suffix.size());
        }
    }

    std::size_t vocab_size() const override { return vocab_size_; }
    std::size_t context_span() const override { return span_; }

    ProbVector next_dist(const SeqState& state) const override {
        if (state.terminal()) throw ContractViolation("next_dist on a terminal state");
        const auto toks = state.tokens();
        for (const auto& r : rules_) {
            if (r.suffix.size() > toks.size()) continue;
            if (std::equal(r.suffix.begin(), r.suffix.end(), toks.end() - static_cast<std::ptrdiff_t>(r.suffix.size()))) {
                return r.dist;
            }
        }
        return default_;
    }

private:
    void check(const ProbVector& p) const {
        if (static_cast<std::size_t>(p.size()) != vocab_size_ || !is_distribution(p)) {
            throw InputError("TableLM rule distribution must be a valid length-V distribution");
        }
    }

    std::size_t vocab_size_;
    ProbVector default_;
    std::vector<TableRule> rules_;
    std::size_t span_ = 0;
};

// ---------------------------------------------------------------------------
// NGramLM

struct NGramCounts {
    std::uint64_t total = 0;
    std::map<TokenId, std::uint64_t> next;
    bool operator==(const NGramCounts&) const = default;
};

/// Interpolated add-alpha n-gram model, frozen after fitting. Each order k
/// conditions on the last k-1 tokens (or the whole prefix when shorter) and
/// smooths over the full vocabulary.
class NGramLM final : public LanguageModel {
public:
    using Table = std::map<std::vector<TokenId>, NGramCounts>;

    NGramLM(std::size_t vocab_size, double alpha, std::vector<double> weights, std::vector<Table> tables)
        : vocab_size_(vocab_size), alpha_(alpha), weights_(std::move(weights)), tables_(std::move(tables)) {}

    std::size_t vocab_size() const override { return vocab_size_; }
    std::size_t context_span() const override { return tables_.size() - 1; }
    std::size_t order() const { return tables_.size(); }
    double alpha() const { return alpha_; }
    const std::vector<double>& weights() const { return weights_; }
    const std::vector<Table>& tables() const { return tables_; }

    ProbVector next_dist(const SeqState& state) const override {
        if (state.terminal()) throw ContractViolation("next_dist on a terminal state");
        const auto V = static_cast<double>(vocab_size_);
        ProbVector p = ProbVector::Zero(static_cast<Eigen::Index>(vocab_size_));
        const auto toks = state.tokens();
        for (std::size_t k = 0; k < tables_.size(); ++k) {
            if (weights_[k] == 0.0) continue;
            const auto n = std::min(k, toks.size());
            std::vector<TokenId> ctx(toks.end() - static_cast<std::ptrdiff_t>(n), toks.end());
            const auto it = tables_[k].find(ctx);
            const double total = it == tables_[k].end() ? 0.0 : static_cast<double>(it->second.total);
            const double denom = total + alpha_ * V;
            p.array() += weights_[k] * alpha_ / denom;
            if (it != tables_[k].end()) {
                for (const auto& [tok, c] : it->second.next) p[tok] += weights_[k] * static_cast<double>(c) / denom;
            }
        }
        return p;
    }

    bool operator==(const NGramLM& o) const {
        return vocab_size_ == o.vocab_size_ && alpha_ == o.alpha_ && weights_ == o.weights_ && tables_ == o.tables_;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint ck;
        ck.put_u64s("lm.meta", std::vector<std::uint64_t>{order(), vocab_size_});
        ck.put_f64s("lm.alpha", std::vector<double>{alpha_});
        ck.put_f64s("lm.weights", weights_);
        for (std::size_t k = 0; k < tables_.size(); ++k) {
            // per context: ctx_len, ctx..., total, n_entries, (token, count)...
            std::vector<std::uint64_t> flat;
            for (const auto& [ctx, counts] : tables_[k]) {
                flat.push_back(ctx.size());
                for (auto t : ctx) flat.push_back(static_cast<std::uint64_t>(t));
                flat.push_back(counts.total);
                flat.push_back(counts.next.size());
                for (const auto& [t, c] : counts.next) {
                    flat.push_back(static_cast<std::uint64_t>(t));
                    flat.push_back(c);
                }
            }
            ck.put_u64s("lm.counts." + std::to_string(k + 1), flat);
        }
        return ck;
    }

    static NGramLM from_checkpoint(const Checkpoint& ck) {
        const auto meta = ck.u64s("lm.meta");
        if (meta.size() != 2) throw InputError("lm.meta must hold (order, V)");
        const auto ord = meta[0];
        std::vector<Table> tables(ord);
        for (std::size_t k = 0; k < ord; ++k) {
            const auto flat = ck.u64s("lm.counts." + std::to_string(k + 1));
            std::size_t i = 0;
            auto next = [&]() {
                if (i >= flat.size()) throw InputError("truncated n-gram count table");
                return flat[i++];
            };
            while (i < flat.size()) {
                std::vector<TokenId> ctx(next());
                for (auto& t : ctx) t = static_cast<TokenId>(next());
                NGramCounts c;
                c.total = next();
                const auto n = next();
                for (std::uint64_t j = 0; j < n; ++j) {
                    const auto t = static_cast<TokenId>(next());
                    c.next[t] = next();
                }
                tables[k].emplace(std::move(ctx), std::move(c));
            }
        }
        return NGramLM(meta[1], ck.f64s("lm.alpha").at(0), ck.f64s("lm.weights"), std::move(tables));
    }

private:
    std::size_t vocab_size_;
    double alpha_;
    std::vector<double> weights_;
    std::vector<Table> tables_;
};

/// Counts every document as BOS + doc + EOS. `weights[k]` is the
/// interpolation weight of order k+1.
inline NGramLM fit_ngram(const std::vector<std::vector<TokenId>>& corpus, std::size_t order, double alpha,
                         std::vector<double> weights, std::size_t vocab_size) {
    if (order < 1 || order > 3) throw ConfigError("n-gram order must be 1, 2 or 3");
    if (!(alpha > 0.0)) throw ConfigError("add-alpha constant must be positive");
    if (weights.size() != order) throw ConfigError("need one interpolation weight per order");
    double wsum = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0)) throw ConfigError("interpolation weights must be non-negative");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) throw ConfigError("interpolation weights must sum to 1");
    if (corpus.empty()) throw InputError("cannot fit an n-gram model on an empty corpus");

    std::vector<NGramLM::Table> tables(order);
    for (const auto& doc : corpus) {
        std::vector<TokenId> seq;
        seq.reserve(doc.size() + 2);
        seq.push_back(Vocab::kBos);
        seq.insert(seq.end(), doc.begin(), doc.end());
        seq.push_back(Vocab::kEos);
        for (auto t : seq) {
            if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw InputError("corpus token outside vocabulary");
        }
        for (std::size_t i = 1; i < seq.size(); ++i) {
            for (std::size_t k = 0; k < order; ++k) {
                const auto n = std::min(k, i);
                std::vector<TokenId> ctx(seq.begin() + static_cast<std::ptrdiff_t>(i - n), seq.begin() + static_cast<std::ptrdiff_t>(i));
                auto& c = tables[k][ctx];
                ++c.total;
                ++c.next[seq[i]];
            }
        }
    }
    return NGramLM(vocab_size, alpha, std::move(weights), std::move(tables));
}

// ---------------------------------------------------------------------------
// Sampling and scoring

/// Indices of the k largest entries, ties broken towards the lower id.
inline std::vector<TokenId> top_k_indices(const ProbVector& dist, std::size_t k) {
    std::vector<TokenId> idx(static_cast<std::size_t>(dist.size()));
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](TokenId a, TokenId b) { return dist[a] > dist[b] || (dist[a] == dist[b] && a < b); });
    idx.resize(k);
    return idx;
}

inline TokenId sample_topk(const ProbVector& dist, std::size_t k, Rng& rng) {
    expects(k >= 1, "top-k requires k >= 1");
    const auto idx = top_k_indices(dist, k);
    double mass = 0.0;
    for (auto i : idx) mass += dist[i];
    if (!(mass > 0.0)) throw InputError("cannot sample from an all-zero distribution");
    const double u = uniform01(rng) * mass;
    double acc = 0.0;
    TokenId last_positive = idx.front();
    for (auto i : idx) {
        if (dist[i] <= 0.0) continue;
        acc += dist[i];
        last_positive = i;
        if (u < acc) return i;
    }
    return last_positive;
}

/// Log-probability of `continuation` (EOS appended when `append_eos`)
/// following `prefix`; -inf on any zero-probability token.
inline double continuation_log_prob(const LanguageModel& lm, const SeqState& prefix,
                                    std::span<const TokenId> continuation, bool append_eos, std::size_t* count = nullptr) {
    std::vector<TokenId> toks(prefix.tokens().begin(), prefix.tokens().end());
    double lp = 0.0;
    std::size_t n = 0;
    auto score = [&](TokenId t) {
        const auto p = lm.next_dist(SeqState(toks, false))[t];
        lp += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
        toks.push_back(t);
        ++n;
    };
    for (auto t : continuation) {
        if (t == Vocab::kEos) break;
        score(t);
    }
    if (append_eos || (!continuation.empty() && continuation.back() == Vocab::kEos)) score(Vocab::kEos);
    if (count) *count = n;
    return lp;
}

/// exp of the mean negative log-probability per token, EOS included; +inf
/// when any token has zero probability.
inline double perplexity(const LanguageModel& lm, const std::vector<std::vector<TokenId>>& corpus) {
    double lp = 0.0;
    std::size_t n = 0;
    for (const auto& doc : corpus) {
        std::size_t c = 0;
        lp += continuation_log_prob(lm, SeqState::prompt(), doc, true, &c);
        n += c;
    }
    if (n == 0) throw InputError("perplexity of an empty corpus");
    return std::exp(-lp / static_cast<double>(n));
}

}  // namespace sfgen
