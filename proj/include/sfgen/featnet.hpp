#pragma once

// State features phi(s') and per-subject reward vectors w_j.
//
// A hashed n-gram encoder feeds a one-hidden-layer network whose linear head
// (with bias) produces phi in R^d. phi and the reward matrix W (d x k) are
// trained jointly on labelled terminal states by minimising
//
//     sum_j sum_i | phi(s_i)^T w_j - r_ij |^2 ,
//
// and new subjects are fitted afterwards by closed-form ridge regression on
// the frozen features.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/checkpoint.hpp"
#include "sfgen/errors.hpp"
#include "sfgen/optim.hpp"
#include "sfgen/random.hpp"
#include "sfgen/seqmdp.hpp"

namespace sfgen {

/// Hashed n-gram counts divided by sequence length, plus (optionally) one
/// unnormalised indicator for the final token.
struct StateEncoder {
    int order = 2;
    std::size_t dim = 64;
    std::uint64_t seed = 0;
    bool mark_last = true;

    std::size_t bucket(std::uint64_t tag, std::span<const TokenId> gram) const {
        std::uint64_t h = mix64(seed ^ mix64(tag));
        for (auto t : gram) h = mix64(h ^ static_cast<std::uint64_t>(t + 1));
        return static_cast<std::size_t>(h % dim);
    }

    Eigen::VectorXd encode(const SeqState& state) const {
        if (order < 1 || order > 2) throw ConfigError("encoder order must be 1 or 2");
        Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
        const auto toks = state.tokens();
        if (toks.empty()) return x;
        const double inv = 1.0 / static_cast<double>(toks.size());
        for (std::size_t n = 1; n <= static_cast<std::size_t>(order); ++n) {
            for (std::size_t i = 0; i + n <= toks.size(); ++i) x[bucket(n, toks.subspan(i, n))] += inv;
        }
        if (mark_last) x[bucket(0xfeed, toks.subspan(toks.size() - 1, 1))] += 1.0;
        return x;
    }

    bool operator==(const StateEncoder&) const = default;
};

/// Elementwise tanh through the vectorised exp; std::tanh is scalar.
template <typename Derived>
Eigen::Matrix<double, Derived::RowsAtCompileTime, Derived::ColsAtCompileTime> tanh_of(const Eigen::MatrixBase<Derived>& x) {
    return (1.0 - 2.0 / ((2.0 * x.derived().array()).exp() + 1.0)).matrix();
}

struct PhiNet {
    Eigen::MatrixXd w_in;   // hidden x m
    Eigen::VectorXd b_in;   // hidden
    Eigen::MatrixXd w_out;  // d x hidden
    Eigen::VectorXd b_out;  // d

    static PhiNet random(std::size_t input_dim, std::size_t hidden, std::size_t d, Rng& rng) {
        PhiNet net;
        const auto m = static_cast<Eigen::Index>(input_dim);
        const auto h = static_cast<Eigen::Index>(hidden);
        const auto dd = static_cast<Eigen::Index>(d);
        net.w_in = Eigen::MatrixXd::NullaryExpr(h, m, [&]() { return standard_normal(rng); });
        net.b_in = Eigen::VectorXd::Zero(h);
        const double s = 1.0 / std::sqrt(static_cast<double>(hidden));
        net.w_out = Eigen::MatrixXd::NullaryExpr(dd, h, [&]() { return s * standard_normal(rng); });
        net.b_out = Eigen::VectorXd::Zero(dd);
        return net;
    }

    std::size_t input_dim() const { return static_cast<std::size_t>(w_in.cols()); }
    std::size_t hidden_dim() const { return static_cast<std::size_t>(w_in.rows()); }
    std::size_t feature_dim() const { return static_cast<std::size_t>(w_out.rows()); }

    bool operator==(const PhiNet& o) const {
        auto same = [](const auto& a, const auto& b) {
            return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
        };
        return same(w_in, o.w_in) && same(b_in, o.b_in) && same(w_out, o.w_out) && same(b_out, o.b_out);
    }
};

inline Eigen::VectorXd phi(const PhiNet& net, const Eigen::VectorXd& encoded) {
    expects(static_cast<std::size_t>(encoded.size()) == net.input_dim() && net.b_in.size() == net.w_in.rows() &&
                net.w_out.cols() == net.w_in.rows() && net.b_out.size() == net.w_out.rows(),
            "phi: dimension mismatch");
    return net.w_out * tanh_of(net.w_in * encoded + net.b_in) + net.b_out;
}

/// phi as a function of states: encoder plus network.
struct FeatureModel {
    StateEncoder encoder;
    PhiNet net;

    Eigen::VectorXd operator()(const SeqState& s) const { return phi(net, encoder.encode(s)); }
    std::size_t dim() const { return net.feature_dim(); }
};

/// Column j is the reward vector of subject `names[j]`.
struct RewardMatrix {
    Eigen::MatrixXd w;  // d x k
    std::vector<std::string> names;

    std::size_t tasks() const { return static_cast<std::size_t>(w.cols()); }
    Eigen::VectorXd column(std::size_t j) const { return w.col(static_cast<Eigen::Index>(j)); }
};

inline constexpr double kUnlabeled = std::numeric_limits<double>::quiet_NaN();

/// Terminal states with per-task labels in {-1, 0}; NaN marks "not
/// labelled for this task".
struct TerminalDataset {
    std::vector<SeqState> states;
    std::vector<std::string> tasks;
    Eigen::MatrixXd labels;  // n x k

    std::size_t size() const { return states.size(); }

    std::size_t task_count(std::size_t j) const {
        std::size_t c = 0;
        for (Eigen::Index i = 0; i < labels.rows(); ++i) c += std::isnan(labels(i, static_cast<Eigen::Index>(j))) ? 0 : 1;
        return c;
    }

    void validate() const {
        if (static_cast<std::size_t>(labels.rows()) != states.size() ||
            static_cast<std::size_t>(labels.cols()) != tasks.size()) {
            throw InputError("label matrix shape does not match the dataset");
        }
        for (const auto& s : states) {
            if (!s.terminal()) throw InputError("terminal dataset contains a non-terminal state");
        }
        for (Eigen::Index i = 0; i < labels.size(); ++i) {
            const double v = labels.data()[i];
            if (!std::isnan(v) && v != -1.0 && v != 0.0) throw InputError("labels must be -1 or 0");
        }
    }
};

// ---------------------------------------------------------------------------
// Joint training

struct MultitaskGrads {
    Eigen::MatrixXd w_in;
    Eigen::VectorXd b_in;
    Eigen::MatrixXd w_out;
    Eigen::VectorXd b_out;
    Eigen::MatrixXd reward;
};

/// Mean squared error over the labelled (example, task) entries of a batch,
/// and its gradient with respect to every trainable tensor.
///
/// `x` is m x n (encoded states as columns); `r` is n x k with NaN holes.
inline double multitask_loss(const PhiNet& net, const Eigen::MatrixXd& reward, const Eigen::MatrixXd& x,
                             const Eigen::MatrixXd& r, MultitaskGrads* grads) {
    const Eigen::MatrixXd pre = (net.w_in * x).colwise() + net.b_in;
    const Eigen::MatrixXd hid = tanh_of(pre);
    const Eigen::MatrixXd feat = (net.w_out * hid).colwise() + net.b_out;  // d x n
    const Eigen::MatrixXd pred = reward.transpose() * feat;                  // k x n
    Eigen::MatrixXd err = Eigen::MatrixXd::Zero(pred.rows(), pred.cols());
    double count = 0.0;
    for (Eigen::Index i = 0; i < pred.cols(); ++i) {
        for (Eigen::Index j = 0; j < pred.rows(); ++j) {
            const double y = r(i, j);
            if (std::isnan(y)) continue;
            err(j, i) = pred(j, i) - y;
            count += 1.0;
        }
    }
    if (count == 0.0) {
        if (grads) {
            grads->w_in = Eigen::MatrixXd::Zero(net.w_in.rows(), net.w_in.cols());
            grads->b_in = Eigen::VectorXd::Zero(net.b_in.size());
            grads->w_out = Eigen::MatrixXd::Zero(net.w_out.rows(), net.w_out.cols());
            grads->b_out = Eigen::VectorXd::Zero(net.b_out.size());
            grads->reward = Eigen::MatrixXd::Zero(reward.rows(), reward.cols());
        }
        return 0.0;
    }
    const double loss = err.squaredNorm() / count;
    if (grads) {
        const Eigen::MatrixXd d_pred = (2.0 / count) * err;
        grads->reward = feat * d_pred.transpose();
        const Eigen::MatrixXd d_feat = reward * d_pred;
        grads->w_out = d_feat * hid.transpose();
        grads->b_out = d_feat.rowwise().sum();
        const Eigen::MatrixXd d_pre = (net.w_out.transpose() * d_feat).cwiseProduct((1.0 - hid.array().square()).matrix());
        grads->w_in = d_pre * x.transpose();
        grads->b_in = d_pre.rowwise().sum();
    }
    return loss;
}

struct MultitaskCfg {
    std::size_t hidden = 16;
    std::size_t d = 8;
    double lr = 1e-2;
    std::size_t epochs = 200;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    /// When false the supplied initial PhiNet is held fixed and only W moves.
    bool train_phi = true;
    std::optional<PhiNet> init_phi;
};

struct MultitaskResult {
    FeatureModel features;
    RewardMatrix reward;
    std::vector<double> epoch_loss;
    /// Share of labelled training predictions outside [-1.5, 0.5].
    double out_of_range_fraction = 0.0;
    bool range_warning = false;
};

inline MultitaskResult train_multitask(const TerminalDataset& data, const StateEncoder& encoder, const MultitaskCfg& cfg) {
    data.validate();
    if (data.tasks.empty()) throw ConfigError("multitask training needs at least one task");
    for (std::size_t j = 0; j < data.tasks.size(); ++j) {
        if (data.task_count(j) == 0) throw ConfigError("task '" + data.tasks[j] + "' has no labelled examples");
    }
    if (cfg.batch == 0 || cfg.epochs == 0) throw ConfigError("batch and epochs must be positive");

    Rng rng(cfg.seed);
    PhiNet net = cfg.init_phi ? *cfg.init_phi : PhiNet::random(encoder.dim, cfg.hidden, cfg.d, rng);
    if (net.input_dim() != encoder.dim) throw ConfigError("initial PhiNet does not match the encoder");
    const auto d = static_cast<Eigen::Index>(net.feature_dim());
    const auto k = static_cast<Eigen::Index>(data.tasks.size());
    Eigen::MatrixXd reward = Eigen::MatrixXd::NullaryExpr(d, k, [&]() { return 0.1 * standard_normal(rng); });

    const auto n = data.size();
    Eigen::MatrixXd x(static_cast<Eigen::Index>(encoder.dim), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) x.col(static_cast<Eigen::Index>(i)) = encoder.encode(data.states[i]);

    AdamW opt({.weight_decay = cfg.weight_decay});
    if (cfg.train_phi) {
        opt.add(net.w_in, true);
        opt.add(net.b_in, false);
        opt.add(net.w_out, true);
        opt.add(net.b_out, false);
    }
    opt.add(reward, true);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    MultitaskResult result;
    MultitaskGrads g;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
        double sum = 0.0;
        double batches = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const auto len = std::min(cfg.batch, n - start);
            Eigen::MatrixXd xb(x.rows(), static_cast<Eigen::Index>(len));
            Eigen::MatrixXd rb(static_cast<Eigen::Index>(len), k);
            for (std::size_t b = 0; b < len; ++b) {
                xb.col(static_cast<Eigen::Index>(b)) = x.col(static_cast<Eigen::Index>(order[start + b]));
                rb.row(static_cast<Eigen::Index>(b)) = data.labels.row(static_cast<Eigen::Index>(order[start + b]));
            }
            sum += multitask_loss(net, reward, xb, rb, &g);
            batches += 1.0;
            if (cfg.train_phi) {
                opt.step({g.w_in.data(), g.b_in.data(), g.w_out.data(), g.b_out.data(), g.reward.data()}, cfg.lr);
            } else {
                opt.step({g.reward.data()}, cfg.lr);
            }
        }
        result.epoch_loss.push_back(sum / batches);
    }

    // Only terminal predictions need to be accurate; flag gross drift.
    const FeatureModel fm{encoder, net};
    std::size_t outside = 0;
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd pred = reward.transpose() * fm(data.states[i]);
        for (Eigen::Index j = 0; j < k; ++j) {
            if (std::isnan(data.labels(static_cast<Eigen::Index>(i), j))) continue;
            ++total;
            if (pred[j] < -1.5 || pred[j] > 0.5) ++outside;
        }
    }
    result.out_of_range_fraction = total ? static_cast<double>(outside) / static_cast<double>(total) : 0.0;
    result.range_warning = result.out_of_range_fraction >= 0.05;
    result.features = fm;
    result.reward = RewardMatrix{reward, data.tasks};
    return result;
}

// ---------------------------------------------------------------------------
// Post-hoc subjects

/// Ridge solution w = (Phi^T Phi + ridge I)^-1 Phi^T r over the labelled rows
/// of a single-task dataset. Leaves the feature model untouched.
inline Eigen::VectorXd fit_new_subject(const FeatureModel& features, const TerminalDataset& data, double ridge) {
    data.validate();
    if (data.tasks.size() != 1) throw ContractViolation("fit_new_subject expects a single-task dataset");
    if (!(ridge >= 0.0)) throw ConfigError("ridge must be non-negative");
    const auto d = static_cast<Eigen::Index>(features.dim());
    Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double y = data.labels(static_cast<Eigen::Index>(i), 0);
        if (std::isnan(y)) continue;
        const Eigen::VectorXd f = features(data.states[i]);
        gram.noalias() += f * f.transpose();
        rhs += y * f;
    }
    gram.diagonal().array() += ridge;
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double top = eig.eigenvalues().maxCoeff();
    if (!(eig.eigenvalues().minCoeff() > 1e-12 * std::max(1.0, top))) {
        throw NumericalError("normal matrix is singular; use ridge > 0");
    }
    return gram.ldlt().solve(rhs);
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_features(Checkpoint& ck, const FeatureModel& fm, const RewardMatrix& reward) {
    ck.put_u64s("phi.meta", std::vector<std::uint64_t>{fm.encoder.dim, fm.net.hidden_dim(), fm.net.feature_dim(),
                                                        static_cast<std::uint64_t>(fm.encoder.order), fm.encoder.seed,
                                                        fm.encoder.mark_last ? 1u : 0u, reward.tasks()});
    ck.put_matrix("phi.w_in", fm.net.w_in);
    ck.put_matrix("phi.b_in", fm.net.b_in);
    ck.put_matrix("phi.w_out", fm.net.w_out);
    ck.put_matrix("phi.b_out", fm.net.b_out);
    ck.put_matrix("reward.w", reward.w);
    std::string names;
    for (const auto& n : reward.names) names += n + '\n';
    ck.put_bytes("reward.names", names);
}

inline std::pair<FeatureModel, RewardMatrix> load_features(const Checkpoint& ck) {
    const auto meta = ck.u64s("phi.meta");
    if (meta.size() != 7) throw InputError("phi.meta must hold 7 fields");
    const auto m = static_cast<Eigen::Index>(meta[0]);
    const auto h = static_cast<Eigen::Index>(meta[1]);
    const auto d = static_cast<Eigen::Index>(meta[2]);
    FeatureModel fm;
    fm.encoder = StateEncoder{static_cast<int>(meta[3]), meta[0], meta[4], meta[5] != 0};
    fm.net.w_in = ck.matrix("phi.w_in", h, m);
    fm.net.b_in = ck.matrix("phi.b_in", h, 1);
    fm.net.w_out = ck.matrix("phi.w_out", d, h);
    fm.net.b_out = ck.matrix("phi.b_out", d, 1);
    RewardMatrix reward;
    reward.w = ck.matrix("reward.w", d, static_cast<Eigen::Index>(meta[6]));
    std::istringstream names(ck.bytes("reward.names"));
    for (std::string line; std::getline(names, line);) reward.names.push_back(line);
    if (reward.names.size() != meta[6]) throw InputError("reward.names does not match the task count");
    return {fm, reward};
}

}  // namespace sfgen
