#pragma once

// Successor-feature network psi(s) in R^{V x d}.
//
// Row a of psi(s) estimates E_pi[ phi(s_T) | s, a ] (gamma = 1, features only
// at the terminal transition), so Q(s, a) = psi(s)[a]^T w for any subject w.
// The output head is factorised as hidden^T * M1 * M2 with M1 (h x E) and
// M2 (E x V*d), giving h*E + E*V*d head parameters instead of h*V*d.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "sfgen/checkpoint.hpp"
#include "sfgen/errors.hpp"
#include "sfgen/featnet.hpp"
#include "sfgen/lm.hpp"
#include "sfgen/optim.hpp"
#include "sfgen/random.hpp"
#include "sfgen/seqmdp.hpp"

namespace sfgen {

using PsiMatrix = Eigen::MatrixXd;  // V x d
using QVector = Eigen::VectorXd;

/// Per-step operation tally for instrumented decoding runs.
struct OpCounter {
    std::size_t steps = 0;
    std::size_t base_dists = 0;
    std::size_t psi_forwards = 0;
    /// One V x d by d product per call.
    std::size_t q_matvecs = 0;
    /// One elementwise fold of a QVector into the fused vector per call.
    std::size_t fuse_reduces = 0;
    std::size_t rectify_calls = 0;
};

constexpr std::uint64_t head_param_count(std::uint64_t h, std::uint64_t e, std::uint64_t v, std::uint64_t d) {
    return h * e + e * v * d;
}

constexpr std::uint64_t dense_head_param_count(std::uint64_t h, std::uint64_t v, std::uint64_t d) {
    return h * v * d;
}

struct PsiNet {
    StateEncoder encoder;
    Eigen::MatrixXd w_enc;  // h x m
    Eigen::VectorXd b_enc;  // h
    Eigen::MatrixXd head1;  // h x E
    Eigen::MatrixXd head2;  // E x (V*d)
    std::size_t vocab = 0;
    std::size_t d = 0;

    static PsiNet random(const StateEncoder& encoder, std::size_t vocab, std::size_t d, std::size_t hidden,
                         std::size_t embed, Rng& rng) {
        PsiNet net;
        net.encoder = encoder;
        net.vocab = vocab;
        net.d = d;
        const auto h = static_cast<Eigen::Index>(hidden);
        const auto e = static_cast<Eigen::Index>(embed);
        net.w_enc = Eigen::MatrixXd::NullaryExpr(h, static_cast<Eigen::Index>(encoder.dim), [&]() { return standard_normal(rng); });
        net.b_enc = Eigen::VectorXd::Zero(h);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(hidden));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(embed));
        net.head1 = Eigen::MatrixXd::NullaryExpr(h, e, [&]() { return s1 * standard_normal(rng); });
        net.head2 = Eigen::MatrixXd::NullaryExpr(e, static_cast<Eigen::Index>(vocab * d), [&]() { return s2 * standard_normal(rng); });
        return net;
    }

    std::size_t hidden_dim() const { return static_cast<std::size_t>(w_enc.rows()); }
    std::size_t embed_dim() const { return static_cast<std::size_t>(head1.cols()); }
    std::uint64_t head_params() const { return static_cast<std::uint64_t>(head1.size() + head2.size()); }

    Eigen::VectorXd hidden(const Eigen::VectorXd& encoded) const {
        return tanh_of(w_enc * encoded + b_enc);
    }

    bool operator==(const PsiNet& o) const {
        auto same = [](const auto& a, const auto& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
        };
        return encoder == o.encoder && vocab == o.vocab && d == o.d && same(w_enc, o.w_enc) && same(b_enc, o.b_enc) &&
               same(head1, o.head1) && same(head2, o.head2);
    }
};

/// Reshapes the flat V*d head output (action-major) into V x d.
inline PsiMatrix psi_from_hidden(const PsiNet& net, const Eigen::VectorXd& hidden) {
    const Eigen::VectorXd flat = net.head2.transpose() * (net.head1.transpose() * hidden);
    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    return Eigen::Map<const RowMajor>(flat.data(), static_cast<Eigen::Index>(net.vocab), static_cast<Eigen::Index>(net.d));
}

inline PsiMatrix psi_forward(const PsiNet& net, const SeqState& state, OpCounter* ops = nullptr) {
    if (state.terminal()) throw ContractViolation("psi_forward on a terminal state");
    if (ops) ++ops->psi_forwards;
    return psi_from_hidden(net, net.hidden(net.encoder.encode(state)));
}

/// Q = Psi w.
inline QVector q_values(const PsiMatrix& psi, const Eigen::VectorXd& w, OpCounter* ops = nullptr) {
    expects(psi.cols() == w.size(), "q_values: psi has " + std::to_string(psi.cols()) + " feature columns, w has " +
                                        std::to_string(w.size()));
    if (ops) ++ops->q_matvecs;
    return psi * w;
}

/// Target network update: target <- (1 - tau) target + tau online.
inline void polyak_update(PsiNet& target, const PsiNet& online, double tau) {
    target.w_enc = (1.0 - tau) * target.w_enc + tau * online.w_enc;
    target.b_enc = (1.0 - tau) * target.b_enc + tau * online.b_enc;
    target.head1 = (1.0 - tau) * target.head1 + tau * online.head1;
    target.head2 = (1.0 - tau) * target.head2 + tau * online.head2;
}

// ---------------------------------------------------------------------------
// Regression loss

struct PsiGrads {
    Eigen::MatrixXd w_enc;
    Eigen::VectorXd b_enc;
    Eigen::MatrixXd head1;
    Eigen::MatrixXd head2;
};

/// Weighted mean over the batch of || psi(s_i)[a_i] - y_i ||^2 and its
/// gradient. `x` is m x n encoded states, `targets` is d x n; empty
/// `weights` means all ones.
inline double psi_loss(const PsiNet& net, const Eigen::MatrixXd& x, std::span<const TokenId> actions,
                       const Eigen::MatrixXd& targets, PsiGrads* grads, std::span<const double> weights = {}) {
    const auto n = x.cols();
    auto weight = [&](Eigen::Index i) { return weights.empty() ? 1.0 : weights[static_cast<std::size_t>(i)]; };
    double wsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) wsum += weight(i);
    const auto d = static_cast<Eigen::Index>(net.d);
    // Encoded states are mostly zeros.
    const Eigen::SparseMatrix<double> xs = x.sparseView();
    const Eigen::MatrixXd hid = tanh_of((net.w_enc * xs).colwise() + net.b_enc);
    const Eigen::MatrixXd z = net.head1.transpose() * hid;     // E x n
    const Eigen::MatrixXd flat = net.head2.transpose() * z;   // V*d x n
    // gflat holds each sample's output gradient in its action's segment.
    Eigen::MatrixXd gflat;
    if (grads) gflat = Eigen::MatrixXd::Zero(flat.rows(), n);
    double loss = 0.0;
    const double scale = 1.0 / wsum;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index off = static_cast<Eigen::Index>(actions[static_cast<std::size_t>(i)]) * d;
        double sq = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const double e = flat(off + j, i) - targets(j, i);
            sq += e * e;
            if (grads) gflat(off + j, i) = 2.0 * scale * weight(i) * e;
        }
        loss += weight(i) * sq;
    }
    if (grads) {
        grads->head2 = z * gflat.transpose();
        const Eigen::MatrixXd dz = net.head2 * gflat;  // E x n
        grads->head1 = hid * dz.transpose();
        const Eigen::MatrixXd d_pre = (net.head1 * dz).cwiseProduct((1.0 - hid.array().square()).matrix());
        grads->w_enc = d_pre * xs.transpose();
        grads->b_enc = d_pre.rowwise().sum();
    }
    return loss * scale;
}

// ---------------------------------------------------------------------------
// Training data

/// Samples one trajectory from `policy`. With `explore`, a uniform-length
/// roll-in of uniformly chosen non-EOS supported tokens is followed by one
/// uniformly chosen supported action (an exploring start); everything from
/// that action on follows the policy.
inline Trajectory sample_trajectory(const Policy& policy, const SeqState& prompt, std::size_t max_len, Rng& rng,
                                    bool explore) {
    if (prompt.terminal()) throw ContractViolation("cannot sample from a terminal prompt");
    const auto V = policy.vocab_size();
    Trajectory traj;
    traj.states.push_back(prompt);
    auto push = [&](TokenId a) {
        traj.actions.push_back(a);
        traj.states.push_back(step(traj.states.back(), a, max_len, V));
    };
    auto support = [&](const ProbVector& p, bool with_eos) {
        std::vector<TokenId> s;
        for (Eigen::Index a = 0; a < p.size(); ++a) {
            if (p[a] > 0.0 && (with_eos || a != Vocab::kEos)) s.push_back(static_cast<TokenId>(a));
        }
        return s;
    };
    if (explore) {
        const auto room = max_len - prompt.length();
        const auto rollin = uniform_index(rng, room);
        for (std::size_t i = 0; i < rollin; ++i) {
            const auto s = support(policy.next_dist(traj.states.back()), false);
            if (s.empty()) break;
            push(s[uniform_index(rng, s.size())]);
        }
        traj.on_policy_from = traj.actions.size();
        const auto s = support(policy.next_dist(traj.states.back()), true);
        push(s[uniform_index(rng, s.size())]);
    }
    while (!traj.states.back().terminal()) {
        push(sample_topk(policy.next_dist(traj.states.back()), V, rng));
    }
    return traj;
}

inline std::vector<Trajectory> sample_trajectories(const Policy& policy, const std::vector<SeqState>& prompts,
                                                   std::size_t max_len, std::size_t count, double explore_share,
                                                   std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Trajectory> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& prompt = prompts[i % prompts.size()];
        const bool explore = uniform01(rng) < explore_share;
        out.push_back(sample_trajectory(policy, prompt, max_len, rng, explore));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training

enum class SfAlgorithm { kMonteCarlo, kSarsa };

struct SFTrainerCfg {
    double gamma = 1.0;
    double tau = 0.1;
    double lr = 1e-2;
    std::size_t epochs = 20;
    std::size_t batch = 32;
    std::size_t warmup = 0;
    std::uint64_t seed = 0;
    SfAlgorithm algorithm = SfAlgorithm::kMonteCarlo;
    double weight_decay = 0.0;
};

struct SfTrainResult {
    PsiNet net;
    std::vector<double> epoch_loss;
};

namespace detail {

inline void check_sf_cfg(const SFTrainerCfg& cfg) {
    if (!(cfg.gamma >= 0.0 && cfg.gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("batch and epochs must be positive");
}

inline void check_trajectories(const std::vector<Trajectory>& trajs) {
    if (trajs.empty()) throw InputError("no training trajectories");
    for (const auto& t : trajs) {
        if (t.states.empty() || t.states.size() != t.actions.size() + 1 || !t.states.back().terminal()) {
            throw InputError("training trajectory is not terminated");
        }
    }
}

inline void register_psi(AdamW& opt, PsiNet& net) {
    opt.add(net.w_enc, true);
    opt.add(net.b_enc, false);
    opt.add(net.head1, true);
    opt.add(net.head2, true);
}

inline std::vector<const double*> psi_grad_ptrs(const PsiGrads& g) {
    return {g.w_enc.data(), g.b_enc.data(), g.head1.data(), g.head2.data()};
}

/// Index of (state, action) in a sample table, inserting if new.
class PairIndex {
public:
    std::pair<std::size_t, bool> find_or_add(const SeqState& state, TokenId action) {
        std::vector<TokenId> key(state.tokens().begin(), state.tokens().end());
        key.push_back(action);
        auto [it, fresh] = index_.emplace(std::move(key), index_.size());
        return {it->second, fresh};
    }

private:
    std::map<std::vector<TokenId>, std::size_t> index_;
};

inline void shuffle(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
}

}  // namespace detail

/// Monte Carlo regression of psi(s_t)[a_t] toward phi(s_T) for every
/// on-policy pair. Exact only for gamma = 1.
inline SfTrainResult mc_train(PsiNet net, const std::vector<Trajectory>& trajectories, const FeatureModel& features,
                              const SFTrainerCfg& cfg) {
    detail::check_sf_cfg(cfg);
    if (cfg.gamma != 1.0) throw ConfigError("Monte Carlo regression toward phi(s_T) requires gamma = 1");
    detail::check_trajectories(trajectories);
    if (features.dim() != net.d) throw ConfigError("feature dimension does not match the psi head");

    // Duplicate (state, action) pairs are merged into one sample weighted by
    // its count and regressed toward the mean target; the gradient is the same
    // as for the unmerged set.
    std::vector<Eigen::VectorXd> xs;
    std::vector<TokenId> acts;
    std::vector<Eigen::VectorXd> ys;
    std::vector<double> counts;
    detail::PairIndex index;
    for (const auto& t : trajectories) {
        const Eigen::VectorXd target = features(t.terminal_state());
        for (std::size_t i = t.on_policy_from; i < t.actions.size(); ++i) {
            const auto [k, fresh] = index.find_or_add(t.states[i], t.actions[i]);
            if (fresh) {
                xs.push_back(net.encoder.encode(t.states[i]));
                acts.push_back(t.actions[i]);
                ys.push_back(target);
                counts.push_back(1.0);
            } else {
                counts[k] += 1.0;
                ys[k] += (target - ys[k]) / counts[k];
            }
        }
    }
    if (xs.empty()) throw InputError("no on-policy pairs in the training trajectories");
    const auto n = xs.size();
    Rng rng(cfg.seed);
    AdamW opt({.weight_decay = cfg.weight_decay});
    detail::register_psi(opt, net);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const std::size_t total = per_epoch * cfg.epochs;
    SfTrainResult result;
    PsiGrads g;
    std::size_t stepno = 0;
    Eigen::MatrixXd xb, yb;
    std::vector<TokenId> ab;
    std::vector<double> wb;
    const double weight_total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        detail::shuffle(order, rng);
        double sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const auto len = std::min(cfg.batch, n - start);
            xb.resize(static_cast<Eigen::Index>(net.encoder.dim), static_cast<Eigen::Index>(len));
            yb.resize(static_cast<Eigen::Index>(net.d), static_cast<Eigen::Index>(len));
            ab.resize(len);
            wb.resize(len);
            double wsum = 0.0;
            for (std::size_t b = 0; b < len; ++b) {
                const auto k = order[start + b];
                xb.col(static_cast<Eigen::Index>(b)) = xs[k];
                yb.col(static_cast<Eigen::Index>(b)) = ys[k];
                ab[b] = acts[k];
                wb[b] = counts[k];
                wsum += counts[k];
            }
            sum += psi_loss(net, xb, ab, yb, &g, wb) * wsum;
            opt.step(detail::psi_grad_ptrs(g), linear_schedule(cfg.lr, stepno++, cfg.warmup, total));
        }
        result.epoch_loss.push_back(sum / weight_total);
    }
    result.net = std::move(net);
    return result;
}

/// Expected-SARSA on the terminal-split Bellman equation:
///   y = phi(s')                                    if s' is terminal
///   y = gamma * sum_a' pi(a'|s') psi_target(s')[a']  otherwise,
/// with a polyak-averaged target network updated after every optimisation
/// step once warm-up is over.
inline SfTrainResult sarsa_train(PsiNet net, const std::vector<Trajectory>& trajectories, const FeatureModel& features,
                                 const LanguageModel& lm, const SFTrainerCfg& cfg) {
    detail::check_sf_cfg(cfg);
    if (!(cfg.tau > 0.0 && cfg.tau <= 1.0)) throw ConfigError("polyak coefficient tau must lie in (0, 1]");
    detail::check_trajectories(trajectories);
    if (features.dim() != net.d) throw ConfigError("feature dimension does not match the psi head");
    if (lm.vocab_size() != net.vocab) throw ConfigError("language model and psi head disagree on V");

    struct Sample {
        Eigen::VectorXd x;
        TokenId action;
        bool terminal;
        Eigen::VectorXd next;  // encoded s' or phi(s') when terminal
        Eigen::VectorXd pi;    // pi(.|s') when non-terminal
        double count = 1.0;
    };
    // s' is determined by (s, a), so duplicate transitions merge exactly.
    std::vector<Sample> samples;
    detail::PairIndex index;
    for (const auto& t : trajectories) {
        for (std::size_t i = 0; i < t.actions.size(); ++i) {
            const auto [k, fresh] = index.find_or_add(t.states[i], t.actions[i]);
            if (!fresh) {
                samples[k].count += 1.0;
                continue;
            }
            const auto& nxt = t.states[i + 1];
            Sample s{net.encoder.encode(t.states[i]), t.actions[i], nxt.terminal(), {}, {}, 1.0};
            if (nxt.terminal()) {
                s.next = features(nxt);
            } else {
                s.next = net.encoder.encode(nxt);
                s.pi = lm.next_dist(nxt);
            }
            samples.push_back(std::move(s));
        }
    }
    const auto n = samples.size();
    const auto d = static_cast<Eigen::Index>(net.d);
    Rng rng(cfg.seed);
    PsiNet target = net;
    AdamW opt({.weight_decay = cfg.weight_decay});
    detail::register_psi(opt, net);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const std::size_t total = per_epoch * cfg.epochs;
    SfTrainResult result;
    PsiGrads g;
    std::size_t stepno = 0;
    Eigen::MatrixXd xb, yb;
    std::vector<TokenId> ab;
    std::vector<double> wb;
    std::vector<std::size_t> boot;  // batch slots that bootstrap
    Eigen::MatrixXd nb;
    double weight_total = 0.0;
    for (const auto& s : samples) weight_total += s.count;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        detail::shuffle(order, rng);
        double sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const auto len = std::min(cfg.batch, n - start);
            xb.resize(static_cast<Eigen::Index>(net.encoder.dim), static_cast<Eigen::Index>(len));
            yb.resize(d, static_cast<Eigen::Index>(len));
            ab.resize(len);
            wb.resize(len);
            boot.clear();
            double wsum = 0.0;
            for (std::size_t b = 0; b < len; ++b) {
                const auto& s = samples[order[start + b]];
                xb.col(static_cast<Eigen::Index>(b)) = s.x;
                ab[b] = s.action;
                wb[b] = s.count;
                wsum += s.count;
                if (s.terminal) {
                    yb.col(static_cast<Eigen::Index>(b)) = s.next;
                } else {
                    boot.push_back(b);
                }
            }
            if (!boot.empty()) {
                nb.resize(static_cast<Eigen::Index>(net.encoder.dim), static_cast<Eigen::Index>(boot.size()));
                for (std::size_t j = 0; j < boot.size(); ++j) nb.col(static_cast<Eigen::Index>(j)) = samples[order[start + boot[j]]].next;
                const Eigen::SparseMatrix<double> nbs = nb.sparseView();
                const Eigen::MatrixXd th = tanh_of((target.w_enc * nbs).colwise() + target.b_enc);
                const Eigen::MatrixXd flat = target.head2.transpose() * (target.head1.transpose() * th);
                for (std::size_t j = 0; j < boot.size(); ++j) {
                    const auto& pi = samples[order[start + boot[j]]].pi;
                    Eigen::VectorXd y = Eigen::VectorXd::Zero(d);
                    for (Eigen::Index a = 0; a < pi.size(); ++a) {
                        if (pi[a] != 0.0) y += pi[a] * flat.col(static_cast<Eigen::Index>(j)).segment(a * d, d);
                    }
                    yb.col(static_cast<Eigen::Index>(boot[j])) = cfg.gamma * y;
                }
            }
            sum += psi_loss(net, xb, ab, yb, &g, wb) * wsum;
            opt.step(detail::psi_grad_ptrs(g), linear_schedule(cfg.lr, stepno, cfg.warmup, total));
            if (stepno >= cfg.warmup) polyak_update(target, net, cfg.tau);
            ++stepno;
        }
        result.epoch_loss.push_back(sum / weight_total);
    }
    result.net = std::move(net);
    return result;
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_psi(Checkpoint& ck, const PsiNet& net, const SFTrainerCfg& cfg) {
    ck.put_u64s("psi.meta", std::vector<std::uint64_t>{
                                net.hidden_dim(), net.embed_dim(), net.vocab, net.d, std::bit_cast<std::uint64_t>(cfg.gamma),
                                std::bit_cast<std::uint64_t>(cfg.tau), cfg.seed, net.encoder.dim,
                                static_cast<std::uint64_t>(net.encoder.order), net.encoder.seed,
                                net.encoder.mark_last ? 1u : 0u});
    // psi.enc holds the hidden layer: weights then bias.
    Eigen::MatrixXd enc(net.w_enc.rows(), net.w_enc.cols() + 1);
    enc << net.w_enc, net.b_enc;
    ck.put_matrix("psi.enc", enc);
    ck.put_matrix("psi.head1", net.head1);
    ck.put_matrix("psi.head2", net.head2);
}

inline PsiNet load_psi(const Checkpoint& ck) {
    const auto meta = ck.u64s("psi.meta");
    if (meta.size() != 11) throw InputError("psi.meta must hold 11 fields");
    PsiNet net;
    const auto h = static_cast<Eigen::Index>(meta[0]);
    const auto e = static_cast<Eigen::Index>(meta[1]);
    net.vocab = meta[2];
    net.d = meta[3];
    net.encoder = StateEncoder{static_cast<int>(meta[8]), meta[7], meta[9], meta[10] != 0};
    const auto m = static_cast<Eigen::Index>(meta[7]);
    const Eigen::MatrixXd enc = ck.matrix("psi.enc", h, m + 1);
    net.w_enc = enc.leftCols(m);
    net.b_enc = enc.col(m);
    net.head1 = ck.matrix("psi.head1", h, e);
    net.head2 = ck.matrix("psi.head2", e, static_cast<Eigen::Index>(net.vocab * net.d));
    return net;
}

}  // namespace sfgen
