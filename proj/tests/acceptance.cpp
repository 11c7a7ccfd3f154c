// Acceptance suite: one PASS/FAIL line per criterion.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "linsolve.hpp"
#include "sfgen/featnet.hpp"
#include "sfgen/harness.hpp"
#include "sfgen/metrics.hpp"
#include "sfgen/oracle.hpp"
#include "sfgen/rectify.hpp"
#include "sfgen/sfnet.hpp"

using namespace sfgen;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

SubjectBank exact_bank(const std::vector<std::string>& names, Fusion fusion = Fusion::kMin) {
    SubjectBank b(fusion);
    for (const auto& n : names) b = b.with_subject(n, Eigen::VectorXd::Zero(1));
    return b.with_active(names);
}

// ---------------------------------------------------------------------------
// 1. Security invariant under randomised configurations

Outcome security_invariant() {
    Stopwatch sw;
    Rng master(2025);
    std::size_t steps = 0, checked = 0, violations = 0, fallbacks = 0, trials = 0;
    double worst_excess = -1.0, worst_sum = 0.0;
    while (checked < 10000) {
        ++trials;
        const std::size_t V = 4 + uniform_index(master, 5);
        std::vector<std::vector<TokenId>> corpus;
        for (int i = 0; i < 20; ++i) {
            std::vector<TokenId> doc;
            const auto len = 1 + uniform_index(master, 5);
            for (std::size_t j = 0; j < len; ++j) doc.push_back(static_cast<TokenId>(3 + uniform_index(master, V - 3)));
            corpus.push_back(std::move(doc));
        }
        const auto lm = fit_ngram(corpus, 2, 0.05 + 0.45 * uniform01(master), {0.3, 0.7}, V);
        const std::size_t d = 2 + uniform_index(master, 4);
        Rng net_rng(master());
        const auto net = PsiNet::random(StateEncoder{2, 32, master(), true}, V, d, 8, 3, net_rng);
        const std::size_t k = 1 + uniform_index(master, 3);
        SubjectBank bank(uniform01(master) < 0.5 ? Fusion::kMin : Fusion::kMean);
        std::vector<std::string> names;
        for (std::size_t j = 0; j < k; ++j) {
            names.push_back("s" + std::to_string(j));
            bank = bank.with_subject(names.back(), Eigen::VectorXd::NullaryExpr(static_cast<Eigen::Index>(d), [&]() {
                return 0.7 * standard_normal(master);
            }));
        }
        bank = bank.with_active(names);
        RectifierCfg cfg;
        cfg.top_k = 1 + uniform_index(master, V);
        cfg.max_len = 4 + uniform_index(master, 7);
        const StepObserver check = [&](const SeqState&, const ProbVector&, const QVector& fused, const ProbVector& out,
                                       bool fallback) {
            worst_sum = std::max(worst_sum, std::abs(out.sum() - 1.0));
            if (std::abs(out.sum() - 1.0) > 1e-9) ++violations;
            if (fallback) {
                ++fallbacks;
                return;
            }
            ++checked;
            const Eigen::VectorXd caps = rectification_caps(fused, true);
            const double excess = (out - caps).maxCoeff();
            worst_excess = std::max(worst_excess, excess);
            if (excess > 1e-9) ++violations;
        };
        Rng gen_rng(master());
        for (int g = 0; g < 20; ++g) {
            OpCounter ops;
            generate(lm, net, bank, SeqState::prompt(), cfg, gen_rng, &ops, check);
            steps += ops.steps;
        }
    }
    const double secs = sw.seconds();
    return {violations == 0 && checked >= 10000 && secs < 30.0,
            std::to_string(checked) + " capped steps (" + std::to_string(steps) + " total) over " + std::to_string(trials) + " configs, " +
                std::to_string(violations) + " violations, max(p - cap) " + fmt("%.2e", worst_excess) +
                ", max|sum - 1| " + fmt("%.2e", worst_sum) + ", " + std::to_string(fallbacks) +
                " all-capped steps took the fallback, " + fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------
// 2 and 3. Learned psi against the oracle, MC against SARSA

struct SfInstance {
    std::string name;
    std::unique_ptr<LanguageModel> lm;
    std::unique_ptr<Scorer> scorer;
    std::size_t L = 6;
    FeatureModel features;
    Eigen::VectorXd w;
    std::vector<Trajectory> trajectories;
    PsiNet init;
    SFTrainerCfg sf;
    PsiNet mc;
    double mc_seconds = 0.0;
};

/// Every terminal reachable from BOS through `actions`.
TerminalDataset labelled_terminals(const Scorer& scorer, const std::vector<TokenId>& actions, std::size_t L, std::size_t V) {
    TerminalDataset ds;
    ds.tasks = {"b"};
    std::vector<SeqState> stack{SeqState::prompt()};
    while (!stack.empty()) {
        auto s = stack.back();
        stack.pop_back();
        if (s.terminal()) {
            ds.states.push_back(s);
            continue;
        }
        for (auto a : actions) stack.push_back(step(s, a, L, V));
    }
    ds.labels.resize(static_cast<Eigen::Index>(ds.states.size()), 1);
    for (std::size_t i = 0; i < ds.states.size(); ++i) ds.labels(static_cast<Eigen::Index>(i), 0) = score_terminal(scorer, ds.states[i]);
    return ds;
}

SfInstance toy_instance() {
    SfInstance in;
    in.name = "toy table";
    in.lm = std::make_unique<TableLM>(fixtures::toy_lm());
    in.scorer = std::make_unique<LexiconScorer>(fixtures::lexicon(fixtures::ab_vocab(), {"b"}));
    const auto ds = labelled_terminals(*in.scorer, {1, 3, 4}, in.L, 5);
    MultitaskCfg mc;
    mc.hidden = 8;
    mc.epochs = 300;
    mc.batch = 16;
    mc.seed = 1;
    mc.weight_decay = 0.1;
    in.features = train_multitask(ds, StateEncoder{2, 64, 7, true}, mc).features;
    in.w = fit_new_subject(in.features, ds, 1e-6);
    in.trajectories = sample_trajectories(*in.lm, {SeqState::prompt()}, in.L, 100000, 0.5, 3);
    Rng rng(5);
    in.init = PsiNet::random(StateEncoder{2, 256, 11, true}, 5, 8, 64, 16, rng);
    in.sf.epochs = 5000;
    in.sf.batch = 32;
    in.sf.seed = 2;
    return in;
}

SfInstance bigram_instance() {
    SfInstance in;
    in.name = "bigram";
    in.lm = std::make_unique<NGramLM>(fixtures::small_bigram(0.1));
    in.scorer = std::make_unique<LexiconScorer>(fixtures::lexicon(fixtures::ab_vocab(), {"b"}));
    const auto ds = labelled_terminals(*in.scorer, {0, 1, 2, 3, 4}, in.L, 5);
    MultitaskCfg mc;
    mc.hidden = 8;
    mc.epochs = 500;
    mc.batch = 32;
    mc.seed = 1;
    mc.weight_decay = 0.01;
    const auto res = train_multitask(ds, StateEncoder{2, 64, 7, true}, mc);
    in.features = res.features;
    in.w = res.reward.w.col(0);
    in.trajectories = sample_trajectories(*in.lm, {SeqState::prompt()}, in.L, 100000, 0.5, 3);
    Rng rng(5);
    in.init = PsiNet::random(StateEncoder{2, 256, 11, true}, 5, 8, 64, 16, rng);
    in.sf.epochs = 1500;
    in.sf.batch = 32;
    in.sf.seed = 2;
    return in;
}

std::vector<SfInstance>& sf_instances() {
    static std::vector<SfInstance> all;
    return all;
}

/// Visits every reachable non-terminal s and action a with pi(a|s) > 0.
void for_each_pair(const SfInstance& in, const std::function<void(const SeqState&, TokenId)>& fn) {
    for (const auto& s : reachable_states(*in.lm, SeqState::prompt(), in.L)) {
        const auto pi = in.lm->next_dist(s);
        for (Eigen::Index a = 0; a < pi.size(); ++a) {
            if (pi[a] > 0.0) fn(s, static_cast<TokenId>(a));
        }
    }
}

Outcome oracle_q_equivalence() {
    auto& all = sf_instances();
    all.push_back(toy_instance());
    all.push_back(bigram_instance());
    bool pass = true;
    std::string detail;
    for (auto& in : all) {
        Stopwatch sw;
        in.mc = mc_train(in.init, in.trajectories, in.features, in.sf).net;
        in.mc_seconds = sw.seconds();
        DeadEndOracle oracle(*in.lm, *in.scorer, in.L);
        double err = 0.0, worst = 0.0;
        std::size_t n = 0;
        for_each_pair(in, [&](const SeqState& s, TokenId a) {
            const double learned = psi_forward(in.mc, s).row(a).dot(in.w);
            const double e = std::abs(learned - oracle.q(s)[a]);
            err += e;
            worst = std::max(worst, e);
            ++n;
        });
        const double mae = err / static_cast<double>(n);
        pass &= mae <= 0.05 && in.mc_seconds < 60.0;
        detail += (detail.empty() ? "" : "; ") + in.name + ": MAE " + fmt("%.4f", mae) + " over " + std::to_string(n) +
                  " pairs (max " + fmt("%.3f", worst) + "), " + fmt("%.1f", in.mc_seconds) + " s";
    }
    return {pass, detail};
}

Outcome mc_sarsa_agreement() {
    auto& all = sf_instances();
    if (all.size() != 2) return {false, "psi instances from criterion 2 are missing"};
    bool pass = true;
    std::string detail;
    for (auto& in : all) {
        Stopwatch sw;
        auto cfg = in.sf;
        cfg.algorithm = SfAlgorithm::kSarsa;
        const auto sarsa = sarsa_train(in.init, in.trajectories, in.features, *in.lm, cfg).net;
        double worst = 0.0;
        for_each_pair(in, [&](const SeqState& s, TokenId a) {
            worst = std::max(worst, (psi_forward(in.mc, s).row(a) - psi_forward(sarsa, s).row(a)).cwiseAbs().maxCoeff());
        });
        pass &= worst <= 0.05;
        detail += (detail.empty() ? "" : "; ") + in.name + ": max elementwise |psi_mc - psi_sarsa| " + fmt("%.4f", worst) +
                  " (tau " + fmt("%.2f", cfg.tau) + ", " + fmt("%.1f", sw.seconds()) + " s)";
    }
    return {pass, detail};
}

// ---------------------------------------------------------------------------
// 4. Exact-Q rectification on the contains-b toy

Outcome exact_rectification() {
    const auto lm = fixtures::toy_lm();
    const auto has_b = fixtures::lexicon(fixtures::ab_vocab(), {"b"});
    bool pass = true;
    double min_base = 1.0, max_rect = 0.0;
    // max_len counts the leading BOS, so 3..8 means two to seven generated tokens.
    for (std::size_t L = 3; L <= 8; ++L) {
        const double base = exact_undesired_rate(lm, has_b, SeqState::prompt(), L);
        const ExactQSource src(lm, {{"b", &has_b}}, L);
        RectifierCfg cfg;
        cfg.max_len = L;
        const RectifiedPolicy policy(lm, src, exact_bank({"b"}), cfg);
        const double rect = exact_undesired_rate(policy, has_b, SeqState::prompt(), L);
        min_base = std::min(min_base, base);
        max_rect = std::max(max_rect, rect);
        pass &= rect == 0.0 && base >= 0.45 - 1e-12;
    }
    return {pass, "max_len 3..8: rectified rate max " + fmt("%.3g", max_rect) + " (enumerated), base rate min " +
                      fmt("%.4f", min_base)};
}

// ---------------------------------------------------------------------------
// 5. Multi-subject min-fusion

Outcome multi_subject_fusion() {
    const auto lm = fixtures::toy_lm();
    const auto vocab = fixtures::ab_vocab();
    const auto has_b = fixtures::lexicon(vocab, {"b"});
    const auto aaa = fixtures::lexicon(vocab, {"a a a"});
    const LengthScorer long4(4);
    const std::size_t L = 6;
    const std::map<std::string, const Scorer*> scorers{{"b", &has_b}, {"aaa", &aaa}, {"long", &long4}};
    const ExactQSource src(lm, scorers, L);
    RectifierCfg cfg;
    cfg.max_len = L;
    auto rate = [&](const std::vector<std::string>& active, const std::string& subject) {
        const RectifiedPolicy policy(lm, src, exact_bank(active), cfg);
        return exact_undesired_rate(policy, *scorers.at(subject), SeqState::prompt(), L);
    };
    std::map<std::string, double> single, base;
    for (const auto& [name, sc] : scorers) {
        single[name] = rate({name}, name);
        base[name] = exact_undesired_rate(lm, *sc, SeqState::prompt(), L);
    }
    bool pass = true;
    double worst_gap = -1.0;
    const std::vector<std::vector<std::string>> sets{{"b", "aaa"}, {"b", "long"}, {"aaa", "long"}, {"b", "aaa", "long"}};
    for (const auto& set : sets) {
        for (const auto& name : set) {
            const double gap = rate(set, name) - single[name];
            worst_gap = std::max(worst_gap, gap);
            pass &= gap <= 0.01;
        }
    }
    // Mean fusion lets through tokens that one subject forbids outright.
    const std::vector<QVector> qs{(QVector(3) << -1.0, 0.0, 0.0).finished(), (QVector(3) << 0.0, -1.0, 0.0).finished()};
    const ProbVector toy_base = (ProbVector(3) << 0.45, 0.45, 0.1).finished();
    const auto mean_out = rectify_dist(toy_base, fuse_q(qs, Fusion::kMean), RectifierCfg{});
    const auto min_out = rectify_dist(toy_base, fuse_q(qs, Fusion::kMin), RectifierCfg{});
    bool mean_violates = false, min_violates = false;
    for (const auto& q : qs) {
        const Eigen::VectorXd caps = rectification_caps(q, true);
        mean_violates |= ((mean_out - caps).array() > 1e-9).any();
        min_violates |= ((min_out - caps).array() > 1e-9).any();
    }
    pass &= mean_violates && !min_violates;
    std::string rates;
    for (const auto& [name, r] : single) rates += " " + name + " " + fmt("%.3f", base[name]) + "->" + fmt("%.3f", r);
    return {pass, "max fused-minus-single rate " + fmt("%.2e", worst_gap) + " over 2- and 3-subject sets; single-subject base->rectified:" +
                      rates + "; mean fusion breaks a per-subject cap: " + (mean_violates ? "yes" : "no") +
                      ", min fusion: " + (min_violates ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 6. Linear reward regression

Outcome linear_reward_regression() {
    const std::size_t L = 5, V = 9;
    std::vector<SeqState> terms, stack{SeqState::prompt()};
    while (!stack.empty()) {
        auto s = stack.back();
        stack.pop_back();
        if (s.terminal()) {
            terms.push_back(s);
            continue;
        }
        stack.push_back(step(s, 1, L, V));
        for (TokenId a = 3; a < static_cast<TokenId>(V); ++a) stack.push_back(step(s, a, L, V));
    }
    // Planted model: labels threshold phi*(s)^T w* at its median, keeping
    // only states at least half a standard deviation from the threshold.
    double worst_mse = 0.0;
    FeatureModel trained;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const StateEncoder enc{2, 64, seed, true};
        Rng rng(100 + seed);
        const FeatureModel star{enc, PhiNet::random(64, 8, 4, rng)};
        const Eigen::VectorXd w_star = Eigen::VectorXd::NullaryExpr(4, [&]() { return standard_normal(rng); });
        std::vector<double> z;
        for (const auto& s : terms) z.push_back(star(s).dot(w_star));
        auto sorted = z;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
        const double thr = sorted[sorted.size() / 2];
        const auto ms = mean_std(z);
        TerminalDataset train, held;
        train.tasks = held.tasks = {"planted"};
        std::vector<double> lt, lh;
        std::size_t kept = 0;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            if (std::abs(z[i] - thr) < 0.5 * ms.stdev) continue;
            const double label = z[i] < thr ? -1.0 : 0.0;
            if (kept++ % 5 == 4) {
                held.states.push_back(terms[i]);
                lh.push_back(label);
            } else {
                train.states.push_back(terms[i]);
                lt.push_back(label);
            }
        }
        train.labels = Eigen::Map<const Eigen::VectorXd>(lt.data(), static_cast<Eigen::Index>(lt.size()));
        held.labels = Eigen::Map<const Eigen::VectorXd>(lh.data(), static_cast<Eigen::Index>(lh.size()));
        MultitaskCfg cfg;
        cfg.hidden = 32;
        cfg.epochs = 300;
        cfg.seed = seed;
        const auto res = train_multitask(train, enc, cfg);
        double mse = 0.0;
        for (std::size_t i = 0; i < held.size(); ++i) {
            const double e = res.features(held.states[i]).dot(res.reward.w.col(0)) - lh[i];
            mse += e * e;
        }
        worst_mse = std::max(worst_mse, mse / static_cast<double>(held.size()));
        trained = res.features;
    }

    // Post-hoc subject against a hand normal-equations solve.
    Rng rng(17);
    TerminalDataset ds;
    ds.tasks = {"new"};
    std::vector<double> labels;
    for (std::size_t i = 0; i < 20; ++i) {
        ds.states.push_back(terms[uniform_index(rng, terms.size())]);
        labels.push_back(uniform01(rng) < 0.5 ? -1.0 : 0.0);
    }
    ds.labels = Eigen::Map<const Eigen::VectorXd>(labels.data(), 20);
    const double ridge = 1e-3;
    const auto d = static_cast<Eigen::Index>(trained.dim());
    Eigen::MatrixXd phi_rows(20, d);
    for (Eigen::Index i = 0; i < 20; ++i) phi_rows.row(i) = trained(ds.states[static_cast<std::size_t>(i)]).transpose();
    const Eigen::VectorXd direct = linsolve::solve_by_elimination(
        phi_rows.transpose() * phi_rows + ridge * Eigen::MatrixXd::Identity(d, d), phi_rows.transpose() * ds.labels.col(0));

    // Adding the subject must leave every network byte untouched.
    Rng psi_rng(3);
    const auto psi = PsiNet::random(StateEncoder{2, 32, 5, true}, V, trained.dim(), 8, 4, psi_rng);
    auto snapshot = [&]() {
        Checkpoint ck;
        save_features(ck, trained, RewardMatrix{Eigen::MatrixXd::Zero(d, 1), {"planted"}});
        save_psi(ck, psi, SFTrainerCfg{});
        return ck.serialize();
    };
    const auto before = snapshot();
    const auto w_new = fit_new_subject(trained, ds, ridge);
    const double gap = (w_new - direct).cwiseAbs().maxCoeff();
    const auto bank = SubjectBank().with_subject("new", w_new).with_active({"new"});
    const TableLM uniform(V, (ProbVector(V) << 0, 1, 0, 1, 1, 1, 1, 1, 1).finished() / 7.0);
    RectifierCfg rc;
    rc.max_len = L;
    Rng gen_rng(1);
    for (int i = 0; i < 20; ++i) generate(uniform, psi, bank, SeqState::prompt(), rc, gen_rng);
    const bool untouched = snapshot() == before;

    return {worst_mse <= 1e-2 && gap <= 1e-8 && untouched,
            "planted held-out MSE (worst of 3 seeds) " + fmt("%.4f", worst_mse) + ", |w_fit - w_normal_eq| " +
                fmt("%.2e", gap) + ", networks unchanged after adding a subject: " + (untouched ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 7. Gradient checks

Outcome gradient_checks() {
    Rng rng(21);
    auto phi_net = PhiNet::random(12, 6, 4, rng);
    phi_net.b_in = Eigen::VectorXd::NullaryExpr(6, [&]() { return 0.2 * standard_normal(rng); });
    phi_net.b_out = Eigen::VectorXd::NullaryExpr(4, [&]() { return 0.2 * standard_normal(rng); });
    Eigen::MatrixXd reward = Eigen::MatrixXd::NullaryExpr(4, 3, [&]() { return standard_normal(rng); });
    const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(12, 7, [&]() { return uniform01(rng); });
    Eigen::MatrixXd r(7, 3);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = uniform01(rng) < 0.5 ? -1.0 : 0.0;
    r(2, 1) = kUnlabeled;
    MultitaskGrads g;
    multitask_loss(phi_net, reward, x, r, &g);
    auto phi_loss = [&]() { return multitask_loss(phi_net, reward, x, r, nullptr); };

    Rng prng(5);
    auto psi = PsiNet::random(StateEncoder{2, 16, 5, true}, 6, 4, 8, 2, prng);
    psi.b_enc = Eigen::VectorXd::NullaryExpr(8, [&]() { return 0.3 * standard_normal(prng); });
    const Eigen::MatrixXd xs = Eigen::MatrixXd::NullaryExpr(16, 6, [&]() { return uniform01(prng) < 0.4 ? uniform01(prng) : 0.0; });
    const std::vector<TokenId> acts{0, 3, 5, 3, 1, 2};
    const Eigen::MatrixXd ys = Eigen::MatrixXd::NullaryExpr(4, 6, [&]() { return standard_normal(prng); });
    const std::vector<double> wts{1.0, 3.0, 0.5, 2.0, 1.0, 4.0};
    PsiGrads pg;
    psi_loss(psi, xs, acts, ys, &pg, wts);
    auto sf_loss = [&]() { return psi_loss(psi, xs, acts, ys, nullptr, wts); };

    Rng probe(8);
    const std::vector<std::pair<std::string, double>> errs{
        {"phi.w_in", gradcheck::probe(phi_net.w_in, g.w_in, phi_loss, probe)},
        {"phi.b_in", gradcheck::probe(phi_net.b_in, g.b_in, phi_loss, probe)},
        {"phi.w_out", gradcheck::probe(phi_net.w_out, g.w_out, phi_loss, probe)},
        {"phi.b_out", gradcheck::probe(phi_net.b_out, g.b_out, phi_loss, probe)},
        {"reward", gradcheck::probe(reward, g.reward, phi_loss, probe)},
        {"psi.w_enc", gradcheck::probe(psi.w_enc, pg.w_enc, sf_loss, probe)},
        {"psi.b_enc", gradcheck::probe(psi.b_enc, pg.b_enc, sf_loss, probe)},
        {"psi.head1", gradcheck::probe(psi.head1, pg.head1, sf_loss, probe)},
        {"psi.head2", gradcheck::probe(psi.head2, pg.head2, sf_loss, probe)},
    };
    double worst = 0.0;
    std::string which;
    for (const auto& [name, e] : errs) {
        if (e >= worst) {
            worst = e;
            which = name;
        }
    }
    return {worst <= 1e-4, std::to_string(errs.size()) + " tensors x 10 probes, max relative error " + fmt("%.2e", worst) +
                               " (" + which + ")"};
}

// ---------------------------------------------------------------------------
// 8. Head factorisation

Outcome factorisation() {
    const auto fact = head_param_count(768, 32, 50257, 64);
    const auto dense = dense_head_param_count(768, 50257, 64);
    Rng rng(3);
    auto net = PsiNet::random(StateEncoder{2, 16, 3, true}, 6, 4, 8, 2, rng);
    net.b_enc = Eigen::VectorXd::NullaryExpr(8, [&]() { return 0.3 * standard_normal(rng); });
    double worst = 0.0;
    Rng srng(4);
    for (int i = 0; i < 50; ++i) {
        std::vector<TokenId> body;
        const auto len = uniform_index(srng, 6);
        for (std::size_t j = 0; j < len; ++j) body.push_back(static_cast<TokenId>(uniform_index(srng, 6)));
        const auto s = SeqState::prompt(body);
        const Eigen::VectorXd flat = (net.head1 * net.head2).transpose() * net.hidden(net.encoder.encode(s));
        const auto psi = psi_forward(net, s);
        for (Eigen::Index a = 0; a < 6; ++a) {
            for (Eigen::Index j = 0; j < 4; ++j) worst = std::max(worst, std::abs(psi(a, j) - flat[a * 4 + j]));
        }
    }
    const bool counts = fact == 102'950'912ULL && dense == 2'470'232'064ULL && net.head_params() == head_param_count(8, 2, 6, 4);
    return {counts && worst <= 1e-9, "h=768 E=32 V=50257 d=64: factorised " + std::to_string(fact) + ", dense " +
                                         std::to_string(dense) + "; factorised vs dense forward max diff " +
                                         fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 9. Metric fixtures

Outcome metric_fixtures() {
    using T = std::vector<std::string>;
    const double d2 = dist_n(std::vector<T>{{"a", "b", "a", "b"}}, 2);
    const double em = expected_max_attribute({{0.1, 0.9, 0.4}}).mean;
    const TableLM uniform(4, ProbVector::Constant(4, 0.25));
    const double ppl = perplexity(uniform, {{2, 3, 2}, {3}, {}});
    const bool pass = std::abs(d2 - 2.0 / 3.0) <= 1e-12 && std::abs(em - 0.9) <= 1e-12 && std::abs(ppl - 4.0) <= 1e-12;
    return {pass, "dist-2 " + fmt("%.15f", d2) + ", expected-max " + fmt("%.15f", em) + ", uniform perplexity " +
                      fmt("%.15f", ppl)};
}

// ---------------------------------------------------------------------------
// 10. End-to-end determinism

std::map<std::string, std::string> directory_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::stringstream ss;
        ss << in.rdbuf();
        out[fs::relative(e.path(), dir).string()] = ss.str();
    }
    return out;
}

Outcome pipeline_determinism() {
    const auto conf = std::string(SFGEN_SOURCE_DIR) + "/configs/toy.conf";
    const auto root = fs::temp_directory_path() / "sfgen_acceptance_pipeline";
    fs::remove_all(root);
    double slowest = 0.0;
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* name : {"first", "second"}) {
        Stopwatch sw;
        const RunContext ctx{Config::load(conf), root / name, nullptr};
        run_pipeline(ctx);
        slowest = std::max(slowest, sw.seconds());
        runs.push_back(directory_bytes(root / name));
    }
    std::size_t differing = 0;
    for (const auto& [file, bytes] : runs[0]) differing += !runs[1].count(file) || runs[1].at(file) != bytes;
    differing += runs[1].size() > runs[0].size() ? runs[1].size() - runs[0].size() : 0;
    const bool complete = runs[0].count("metrics.csv") && runs[0].count("summary.csv") && runs[0].count("generations.tsv");
    return {differing == 0 && complete && runs[0].size() >= 8 && slowest < 300.0,
            std::to_string(runs[0].size()) + " artifacts, " + std::to_string(differing) + " differ between runs; slowest run " +
                fmt("%.1f", slowest) + " s"};
}

// ---------------------------------------------------------------------------
// 11. Runtime subject toggling

Outcome subject_toggling() {
    const auto lm = fixtures::small_bigram();
    Rng rng(3);
    const auto psi = PsiNet::random(StateEncoder{2, 32, 1, true}, lm.vocab_size(), 4, 16, 4, rng);
    SubjectBank bank;
    for (const char* n : {"p", "q", "r"}) {
        bank = bank.with_subject(n, Eigen::VectorXd::NullaryExpr(4, [&]() { return 0.3 * standard_normal(rng); }));
    }
    auto bytes = [&]() {
        Checkpoint ck;
        save_psi(ck, psi, SFTrainerCfg{});
        return ck.serialize();
    };
    const auto before = bytes();
    RectifierCfg cfg;
    cfg.max_len = 8;
    const std::vector<std::vector<std::string>> schedule{{}, {"p"}, {"p", "q"}, {"p", "q", "r"}, {"q"}, {"r", "p"}, {}};
    bool exact = true;
    std::size_t total_steps = 0;
    Rng gen(9);
    for (const auto& active : schedule) {
        const auto current = set_active_subjects(bank, active);
        const std::size_t k = active.size();
        for (int i = 0; i < 30; ++i) {
            OpCounter ops;
            generate(lm, psi, current, SeqState::prompt(), cfg, gen, &ops);
            total_steps += ops.steps;
            exact &= ops.q_matvecs == k * ops.steps && ops.fuse_reduces == k * ops.steps &&
                     ops.psi_forwards == (k ? ops.steps : 0) && ops.rectify_calls == (k ? ops.steps : 0) &&
                     ops.base_dists == ops.steps;
        }
    }
    const bool untouched = bytes() == before;
    return {exact && untouched, std::to_string(schedule.size()) + " toggles, " + std::to_string(total_steps) +
                                    " steps: per step one base distribution, one psi forward when any subject is active, "
                                    "and exactly k products plus k reduces for k active subjects: " +
                                    (exact ? "yes" : "no") + "; psi bytes unchanged: " + (untouched ? "yes" : "no")};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"security invariant", security_invariant},
        {"oracle Q equivalence", oracle_q_equivalence},
        {"MC/SARSA agreement", mc_sarsa_agreement},
        {"exact-Q rectification", exact_rectification},
        {"multi-subject min-fusion", multi_subject_fusion},
        {"linear reward regression", linear_reward_regression},
        {"gradient checks", gradient_checks},
        {"factorisation arithmetic", factorisation},
        {"metric fixtures", metric_fixtures},
        {"end-to-end determinism", pipeline_determinism},
        {"runtime subject toggling", subject_toggling},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " [" << i + 1 << "] " << criteria[i].first << ": " << o.detail << std::endl;
    }
    std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
