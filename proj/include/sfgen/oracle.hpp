#pragma once

// Exact quantities on small instances by enumerating the generation tree.
//
// With gamma = 1 and a -1 reward only on entering an undesired terminal,
// Q_D(s, a) is minus the probability that s + a ends undesired when the
// policy is followed afterwards. Nodes are merged whenever they agree on the
// policy's memo key, the scorer automaton state and the remaining depth,
// which turns the tree into a DAG without changing any value.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/errors.hpp"
#include "sfgen/lm.hpp"
#include "sfgen/rectify.hpp"
#include "sfgen/scorer.hpp"
#include "sfgen/seqmdp.hpp"
#include "sfgen/sfnet.hpp"

namespace sfgen {

inline constexpr std::uint64_t kDefaultEnumerationBudget = 10'000'000;

/// Throws BudgetError unless V^depth <= budget.
inline void check_enumeration_budget(std::size_t vocab, std::size_t depth, std::uint64_t budget) {
    long double paths = 1.0L;
    for (std::size_t i = 0; i < depth; ++i) {
        paths *= static_cast<long double>(vocab);
        if (paths > static_cast<long double>(budget)) {
            throw BudgetError("exhaustive enumeration needs " + std::to_string(vocab) + "^" + std::to_string(depth) +
                              " paths, over the budget of " + std::to_string(budget));
        }
    }
}

/// Memoised probability of ending in an undesired terminal under `policy`.
/// Not thread-safe: the memo is mutated by queries.
class DeadEndOracle {
public:
    DeadEndOracle(const Policy& policy, const Scorer& scorer, std::size_t max_len,
                  std::uint64_t budget = kDefaultEnumerationBudget)
        : policy_(&policy), scorer_(&scorer), max_len_(max_len), budget_(budget) {}

    /// P(undesired terminal | start at `state`, follow the policy).
    double undesired_probability(const SeqState& state) {
        const auto ss = scorer_->run(state.tokens());
        if (state.terminal()) return scorer_->undesired(ss) ? 1.0 : 0.0;
        check_enumeration_budget(policy_->vocab_size(), max_len_ - state.length(), budget_);
        return prob(state, ss);
    }

    /// Q_D(s, .) over every action.
    QVector q(const SeqState& state) {
        if (state.terminal()) throw ContractViolation("Q of a terminal state");
        check_enumeration_budget(policy_->vocab_size(), max_len_ - state.length(), budget_);
        const auto V = policy_->vocab_size();
        const auto ss = scorer_->run(state.tokens());
        QVector out(static_cast<Eigen::Index>(V));
        for (std::size_t a = 0; a < V; ++a) {
            const auto next = step(state, static_cast<TokenId>(a), max_len_, V);
            auto ns = ss;
            scorer_->advance(ns, static_cast<TokenId>(a));
            out[static_cast<Eigen::Index>(a)] = -(next.terminal() ? (scorer_->undesired(ns) ? 1.0 : 0.0) : prob(next, ns));
        }
        return out;
    }

    std::size_t nodes_visited() const { return nodes_; }
    std::size_t memo_size() const { return memo_.size(); }

private:
    double prob(const SeqState& state, const Scorer::State& ss) {
        auto key = policy_->memo_key(state).value_or(
            std::vector<std::int64_t>(state.tokens().begin(), state.tokens().end()));
        key.push_back(-2);
        key.insert(key.end(), ss.begin(), ss.end());
        key.push_back(-3);
        key.push_back(static_cast<std::int64_t>(max_len_ - state.length()));
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;
        ++nodes_;
        const auto V = policy_->vocab_size();
        const ProbVector pi = policy_->next_dist(state);
        double total = 0.0;
        for (std::size_t a = 0; a < V; ++a) {
            const double p = pi[static_cast<Eigen::Index>(a)];
            if (p == 0.0) continue;
            const auto next = step(state, static_cast<TokenId>(a), max_len_, V);
            auto ns = ss;
            scorer_->advance(ns, static_cast<TokenId>(a));
            total += p * (next.terminal() ? (scorer_->undesired(ns) ? 1.0 : 0.0) : prob(next, ns));
        }
        memo_.emplace(std::move(key), total);
        return total;
    }

    const Policy* policy_;
    const Scorer* scorer_;
    std::size_t max_len_;
    std::uint64_t budget_;
    std::map<std::vector<std::int64_t>, double> memo_;
    std::size_t nodes_ = 0;
};

inline QVector exact_q_dead_end(const Policy& lm, const Scorer& scorer, const SeqState& state, std::size_t max_len,
                                std::uint64_t budget = kDefaultEnumerationBudget) {
    DeadEndOracle oracle(lm, scorer, max_len, budget);
    return oracle.q(state);
}

inline double exact_undesired_rate(const Policy& policy, const Scorer& scorer, const SeqState& prompt,
                                   std::size_t max_len, std::uint64_t budget = kDefaultEnumerationBudget) {
    DeadEndOracle oracle(policy, scorer, max_len, budget);
    return oracle.undesired_probability(prompt);
}

using FeatureFn = std::function<Eigen::VectorXd(const SeqState&)>;

namespace detail {

/// Sum over terminal descendants T of `state` of P(T) * f(T). Plain tree
/// walk: arbitrary f depends on the whole prefix.
inline Eigen::VectorXd expected_terminal(const Policy& policy, const FeatureFn& f, std::size_t dim,
                                         const SeqState& state, std::size_t max_len) {
    if (state.terminal()) return f(state);
    const auto V = policy.vocab_size();
    const ProbVector pi = policy.next_dist(state);
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
    for (std::size_t a = 0; a < V; ++a) {
        const double p = pi[static_cast<Eigen::Index>(a)];
        if (p == 0.0) continue;
        acc += p * expected_terminal(policy, f, dim, step(state, static_cast<TokenId>(a), max_len, V), max_len);
    }
    return acc;
}

}  // namespace detail

/// Row a = E[phi(T) | state + a, follow the policy].
inline PsiMatrix exact_psi(const Policy& policy, const FeatureFn& phi_fn, std::size_t dim, const SeqState& state,
                           std::size_t max_len, std::uint64_t budget = kDefaultEnumerationBudget) {
    if (state.terminal()) throw ContractViolation("psi of a terminal state");
    const auto V = policy.vocab_size();
    check_enumeration_budget(V, max_len - state.length(), budget);
    PsiMatrix out(static_cast<Eigen::Index>(V), static_cast<Eigen::Index>(dim));
    for (std::size_t a = 0; a < V; ++a) {
        out.row(static_cast<Eigen::Index>(a)) =
            detail::expected_terminal(policy, phi_fn, dim, step(state, static_cast<TokenId>(a), max_len, V), max_len);
    }
    return out;
}

/// Total probability of reaching any terminal; 1 up to rounding.
inline double terminal_mass(const Policy& policy, const SeqState& state, std::size_t max_len,
                            std::uint64_t budget = kDefaultEnumerationBudget) {
    check_enumeration_budget(policy.vocab_size(), max_len - state.length(), budget);
    const FeatureFn one = [](const SeqState&) { return Eigen::VectorXd::Ones(1); };
    return detail::expected_terminal(policy, one, 1, state, max_len)[0];
}

/// Every non-terminal state reachable from `root` through actions of
/// positive probability, in depth-first order.
inline std::vector<SeqState> reachable_states(const Policy& policy, const SeqState& root, std::size_t max_len,
                                              std::uint64_t budget = kDefaultEnumerationBudget) {
    check_enumeration_budget(policy.vocab_size(), max_len - root.length(), budget);
    std::vector<SeqState> out;
    std::vector<SeqState> stack{root};
    while (!stack.empty()) {
        auto s = std::move(stack.back());
        stack.pop_back();
        if (s.terminal()) continue;
        const ProbVector pi = policy.next_dist(s);
        for (auto a = static_cast<Eigen::Index>(pi.size()); a-- > 0;) {
            if (pi[a] > 0.0) stack.push_back(step(s, static_cast<TokenId>(a), max_len, policy.vocab_size()));
        }
        out.push_back(std::move(s));
    }
    return out;
}

/// Exact dead-end Q for each active subject, from its scorer. Keeps one
/// memoised oracle per subject; not thread-safe.
class ExactQSource final : public QSource {
public:
    ExactQSource(const LanguageModel& lm, std::map<std::string, const Scorer*> scorers, std::size_t max_len,
                 std::uint64_t budget = kDefaultEnumerationBudget)
        : lm_(&lm), scorers_(std::move(scorers)), max_len_(max_len), budget_(budget) {}

    std::vector<QVector> subject_q(const SeqState& state, const SubjectBank& bank, OpCounter* ops) const override {
        std::vector<QVector> out;
        for (const auto& name : bank.active()) {
            out.push_back(oracle(name).q(state));
            if (ops) ++ops->q_matvecs;
        }
        return out;
    }

    std::optional<std::vector<std::int64_t>> memo_key(const SeqState& s, const SubjectBank& bank) const override {
        std::vector<std::int64_t> key;
        for (const auto& name : bank.active()) {
            const auto st = scorer(name).run(s.tokens());
            key.push_back(-4);
            key.insert(key.end(), st.begin(), st.end());
        }
        return key;
    }

private:
    const Scorer& scorer(const std::string& name) const {
        auto it = scorers_.find(name);
        if (it == scorers_.end()) throw ConfigError("no scorer for subject '" + name + "'");
        return *it->second;
    }

    DeadEndOracle& oracle(const std::string& name) const {
        auto it = oracles_.find(name);
        if (it == oracles_.end()) {
            it = oracles_.emplace(name, std::make_unique<DeadEndOracle>(*lm_, scorer(name), max_len_, budget_)).first;
        }
        return *it->second;
    }

    const LanguageModel* lm_;
    std::map<std::string, const Scorer*> scorers_;
    std::size_t max_len_;
    std::uint64_t budget_;
    mutable std::map<std::string, std::unique_ptr<DeadEndOracle>> oracles_;
};

}  // namespace sfgen
