#pragma once

// Fused-subject rectified decoding.
//
// Each active subject j contributes Q_j(s, .) = psi(s) w_j. The per-subject
// vectors are fused (elementwise min or mean), clamped to [-1, 0], and every
// token's probability is capped at 1 + Q(s, a). The capped distribution is
// renormalised by water-filling: p(a) = min(c * base(a), cap(a)) for the
// scalar c >= 1 that makes the total 1, so no cap is ever exceeded.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/errors.hpp"
#include "sfgen/lm.hpp"
#include "sfgen/random.hpp"
#include "sfgen/seqmdp.hpp"
#include "sfgen/sfnet.hpp"

namespace sfgen {

enum class Fusion { kMin, kMean };

inline Fusion parse_fusion(std::string_view s) {
    if (s == "min") return Fusion::kMin;
    if (s == "mean") return Fusion::kMean;
    throw ConfigError("unknown fusion mode '" + std::string(s) + "'");
}

/// Named reward vectors plus the active subset. Banks are values: every
/// update returns a new snapshot, so a generation in flight keeps the bank
/// it started with.
class SubjectBank {
public:
    SubjectBank() = default;
    explicit SubjectBank(Fusion fusion) : fusion_(fusion) {}

    [[nodiscard]] SubjectBank with_subject(const std::string& name, Eigen::VectorXd w) const {
        if (!subjects_.empty() && subjects_.begin()->second.size() != w.size()) {
            throw ConfigError("subject '" + name + "' has a different feature dimension");
        }
        SubjectBank b = *this;
        b.subjects_[name] = std::move(w);
        return b;
    }

    [[nodiscard]] SubjectBank without_subject(const std::string& name) const {
        SubjectBank b = *this;
        if (b.subjects_.erase(name) == 0) throw ConfigError("unknown subject '" + name + "'");
        std::erase(b.active_, name);
        return b;
    }

    [[nodiscard]] SubjectBank with_active(const std::vector<std::string>& names) const {
        SubjectBank b = *this;
        b.active_.clear();
        for (const auto& n : names) {
            if (!subjects_.count(n)) throw ConfigError("unknown subject '" + n + "'");
            if (std::find(b.active_.begin(), b.active_.end(), n) == b.active_.end()) b.active_.push_back(n);
        }
        return b;
    }

    [[nodiscard]] SubjectBank with_fusion(Fusion f) const {
        SubjectBank b = *this;
        b.fusion_ = f;
        return b;
    }

    Fusion fusion() const { return fusion_; }
    const std::vector<std::string>& active() const { return active_; }
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : subjects_) out.push_back(k);
        return out;
    }
    bool has(const std::string& name) const { return subjects_.count(name) != 0; }

    const Eigen::VectorXd& weights(const std::string& name) const {
        auto it = subjects_.find(name);
        if (it == subjects_.end()) throw ConfigError("unknown subject '" + name + "'");
        return it->second;
    }

    bool operator==(const SubjectBank& o) const {
        if (fusion_ != o.fusion_ || active_ != o.active_ || subjects_.size() != o.subjects_.size()) return false;
        for (auto a = subjects_.begin(), b = o.subjects_.begin(); a != subjects_.end(); ++a, ++b) {
            if (a->first != b->first || a->second.size() != b->second.size() || a->second != b->second) return false;
        }
        return true;
    }

private:
    std::map<std::string, Eigen::VectorXd> subjects_;
    std::vector<std::string> active_;
    Fusion fusion_ = Fusion::kMin;
};

inline SubjectBank set_active_subjects(const SubjectBank& bank, const std::vector<std::string>& names) {
    return bank.with_active(names);
}

struct RectifierCfg {
    std::size_t top_k = 50;
    /// Mass floor given to unsupported tokens when the supported ones cannot
    /// absorb the whole unit of probability under their caps.
    double epsilon = 1e-9;
    bool clamp_q = true;
    double bisection_tol = 1e-10;
    std::size_t max_len = 32;
};

/// No cap-respecting distribution exists (the caps sum to less than one).
/// `fallback` is the caps normalised to sum to one.
struct DeadEndEverywhere : Error {
    DeadEndEverywhere(const std::string& what, ProbVector fb) : Error(what), fallback(std::move(fb)) {}
    ProbVector fallback;
};

inline QVector fuse_q(std::span<const QVector> qs, Fusion mode, OpCounter* ops = nullptr) {
    if (qs.empty()) throw ContractViolation("fuse_q needs at least one Q vector");
    const auto n = qs.front().size();
    QVector acc = mode == Fusion::kMin ? QVector::Constant(n, std::numeric_limits<double>::infinity()) : QVector::Zero(n);
    for (const auto& q : qs) {
        expects(q.size() == n, "fuse_q: Q vectors differ in length");
        if (mode == Fusion::kMin) acc = acc.cwiseMin(q);
        else acc += q;
        if (ops) ++ops->fuse_reduces;
    }
    if (mode == Fusion::kMean) acc /= static_cast<double>(qs.size());
    return acc;
}

/// Per-token caps 1 + Q, with Q clamped to [-1, 0] when enabled.
inline Eigen::VectorXd rectification_caps(const QVector& q, bool clamp) {
    if (clamp) return (1.0 + q.array().max(-1.0).min(0.0)).matrix();
    return (1.0 + q.array()).matrix();
}

namespace detail {

/// Solves sum_a min(c * base_a, cap_a) = 1 for c on [lo, hi] by bisection,
/// then recomputes c in closed form on the capped/uncapped split found.
inline ProbVector water_fill(const ProbVector& base, const Eigen::VectorXd& caps, double tol) {
    auto total = [&](double c) { return (c * base.array()).min(caps.array()).sum(); };
    double lo = 1.0;
    double hi = 1.0;
    for (Eigen::Index a = 0; a < base.size(); ++a) {
        if (base[a] > 0.0) hi = std::max(hi, caps[a] / base[a]);
    }
    if (total(lo) >= 1.0) {
        // No cap binds (or only binds at equality).
        return (lo * base.array()).min(caps.array()).matrix();
    }
    while (hi - lo > tol * std::max(1.0, lo)) {
        const double mid = 0.5 * (lo + hi);
        if (total(mid) < 1.0) lo = mid;
        else hi = mid;
    }
    double capped_mass = 0.0;
    double free_mass = 0.0;
    for (Eigen::Index a = 0; a < base.size(); ++a) {
        if (hi * base[a] >= caps[a]) capped_mass += caps[a];
        else free_mass += base[a];
    }
    double c = hi;
    if (free_mass > 0.0) {
        const double exact = (1.0 - capped_mass) / free_mass;
        if (exact >= lo - tol && exact <= hi + tol) c = exact;
    }
    return (c * base.array()).min(caps.array()).matrix();
}

}  // namespace detail

/// Caps every token at 1 + Q and water-fills the remainder. Throws
/// DeadEndEverywhere when the caps sum to less than one.
inline ProbVector rectify_dist(const ProbVector& base, const QVector& q, const RectifierCfg& cfg) {
    expects(base.size() == q.size(), "rectify_dist: base and Q differ in length");
    const Eigen::VectorXd caps = rectification_caps(q, cfg.clamp_q);
    const double cap_total = caps.sum();
    if (cap_total < 1.0) {
        ProbVector fb = cap_total > 0.0 ? ProbVector(caps / cap_total)
                                        : ProbVector::Constant(caps.size(), 1.0 / static_cast<double>(caps.size()));
        throw DeadEndEverywhere("every token is capped; caps sum to " + std::to_string(cap_total), std::move(fb));
    }
    double supported = 0.0;
    for (Eigen::Index a = 0; a < base.size(); ++a) {
        if (base[a] > 0.0) supported += caps[a];
    }
    if (supported >= 1.0) return detail::water_fill(base, caps, cfg.bisection_tol);
    // The base support cannot absorb the unit mass: give every token a small
    // floor so the remainder spreads over the unsupported tokens' caps.
    ProbVector floored = (base.array() + cfg.epsilon).matrix();
    floored /= floored.sum();
    return detail::water_fill(floored, caps, cfg.bisection_tol);
}

// ---------------------------------------------------------------------------
// Q providers

/// Supplies one Q vector per active subject for a state.
class QSource {
public:
    virtual ~QSource() = default;
    virtual std::vector<QVector> subject_q(const SeqState& state, const SubjectBank& bank, OpCounter* ops) const = 0;
    /// Key that, with the state length, determines subject_q. nullopt when
    /// the whole prefix matters.
    virtual std::optional<std::vector<std::int64_t>> memo_key(const SeqState&, const SubjectBank&) const {
        return std::nullopt;
    }
};

/// Q_j = psi(s) w_j: one psi forward per step, one product per subject.
class SuccessorQSource final : public QSource {
public:
    explicit SuccessorQSource(const PsiNet& net) : net_(&net) {}

    std::vector<QVector> subject_q(const SeqState& state, const SubjectBank& bank, OpCounter* ops) const override {
        std::vector<QVector> out;
        if (bank.active().empty()) return out;
        const PsiMatrix psi = psi_forward(*net_, state, ops);
        for (const auto& name : bank.active()) out.push_back(q_values(psi, bank.weights(name), ops));
        return out;
    }

private:
    const PsiNet* net_;
};

/// Observes every decoding step: base distribution, fused Q (before
/// clamping) and the distribution actually sampled from.
using StepObserver = std::function<void(const SeqState&, const ProbVector& base, const QVector& fused,
                                        const ProbVector& rectified, bool fallback)>;

struct StepDistribution {
    ProbVector dist;
    bool fallback = false;
};

/// One rectified decoding step. With no active subjects the base
/// distribution is returned untouched.
inline StepDistribution rectified_step(const LanguageModel& lm, const QSource& qsource, const SubjectBank& bank,
                                       const SeqState& state, const RectifierCfg& cfg, OpCounter* ops = nullptr,
                                       const StepObserver* observer = nullptr) {
    if (ops) ++ops->base_dists;
    ProbVector base = lm.next_dist(state);
    if (bank.active().empty()) return {std::move(base), false};
    const auto qs = qsource.subject_q(state, bank, ops);
    const QVector fused = fuse_q(qs, bank.fusion(), ops);
    if (ops) ++ops->rectify_calls;
    StepDistribution out;
    try {
        out.dist = rectify_dist(base, fused, cfg);
    } catch (const DeadEndEverywhere& e) {
        out.dist = e.fallback;
        out.fallback = true;
    }
    if (observer && *observer) (*observer)(state, base, fused, out.dist, out.fallback);
    return out;
}

/// Decodes until a terminal state: base distribution, fused subject Q,
/// rectification, then top-k sampling.
inline Trajectory generate(const LanguageModel& lm, const QSource& qsource, const SubjectBank& bank,
                           const SeqState& prompt, const RectifierCfg& cfg, Rng& rng, OpCounter* ops = nullptr,
                           const StepObserver& observer = {}) {
    if (prompt.terminal()) throw ContractViolation("generate from a terminal prompt");
    Trajectory traj;
    traj.states.push_back(prompt);
    while (!traj.states.back().terminal()) {
        if (ops) ++ops->steps;
        auto sd = rectified_step(lm, qsource, bank, traj.states.back(), cfg, ops, &observer);
        if (sd.fallback) ++traj.fallback_steps;
        const auto a = sample_topk(sd.dist, cfg.top_k, rng);
        traj.actions.push_back(a);
        traj.states.push_back(step(traj.states.back(), a, cfg.max_len, lm.vocab_size()));
    }
    return traj;
}

inline Trajectory generate(const LanguageModel& lm, const PsiNet& psi, const SubjectBank& bank, const SeqState& prompt,
                           const RectifierCfg& cfg, Rng& rng, OpCounter* ops = nullptr, const StepObserver& observer = {}) {
    return generate(lm, SuccessorQSource(psi), bank, prompt, cfg, rng, ops, observer);
}

/// Plain top-k decoding from the base model.
inline Trajectory generate_base(const LanguageModel& lm, const SeqState& prompt, std::size_t top_k, std::size_t max_len,
                                Rng& rng) {
    Trajectory traj;
    traj.states.push_back(prompt);
    while (!traj.states.back().terminal()) {
        const auto a = sample_topk(lm.next_dist(traj.states.back()), top_k, rng);
        traj.actions.push_back(a);
        traj.states.push_back(step(traj.states.back(), a, max_len, lm.vocab_size()));
    }
    return traj;
}

/// The full decoding chain as a Policy, so the exact enumerator can walk it.
class RectifiedPolicy final : public Policy {
public:
    RectifiedPolicy(const LanguageModel& lm, const QSource& qsource, SubjectBank bank, RectifierCfg cfg)
        : lm_(&lm), q_(&qsource), bank_(std::move(bank)), cfg_(cfg) {}

    std::size_t vocab_size() const override { return lm_->vocab_size(); }
    ProbVector next_dist(const SeqState& s) const override { return rectified_step(*lm_, *q_, bank_, s, cfg_).dist; }

    std::optional<std::vector<std::int64_t>> memo_key(const SeqState& s) const override {
        auto k = lm_->memo_key(s);
        if (!k) return std::nullopt;
        if (bank_.active().empty()) return k;
        auto qk = q_->memo_key(s, bank_);
        if (!qk) return std::nullopt;
        k->push_back(-1);
        k->insert(k->end(), qk->begin(), qk->end());
        return k;
    }

private:
    const LanguageModel* lm_;
    const QSource* q_;
    SubjectBank bank_;
    RectifierCfg cfg_;
};

}  // namespace sfgen
