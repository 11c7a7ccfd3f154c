#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "linsolve.hpp"
#include "sfgen/featnet.hpp"

using namespace sfgen;
using fixtures::kA;
using fixtures::kB;

namespace {

TerminalDataset single_task(std::vector<SeqState> states, const std::vector<double>& labels) {
    TerminalDataset ds;
    ds.tasks = {"t"};
    ds.states = std::move(states);
    ds.labels = Eigen::Map<const Eigen::VectorXd>(labels.data(), static_cast<Eigen::Index>(labels.size()));
    return ds;
}

/// Every terminal over {a, b, c} (ids 3..5) with cap L.
std::vector<SeqState> all_abc_terminals(std::size_t L) {
    std::vector<SeqState> out, stack{SeqState::prompt()};
    while (!stack.empty()) {
        auto s = stack.back();
        stack.pop_back();
        if (s.terminal()) {
            out.push_back(s);
            continue;
        }
        for (TokenId a : {1, 3, 4, 5}) stack.push_back(step(s, a, L, 6));
    }
    return out;
}

bool contains(const SeqState& s, TokenId t) {
    return std::find(s.tokens().begin(), s.tokens().end(), t) != s.tokens().end();
}

}  // namespace

TEST(Encoder, EmptyStateIsZero) {
    const StateEncoder enc{2, 32, 1, true};
    EXPECT_EQ(enc.encode(SeqState()), Eigen::VectorXd::Zero(32));
}

TEST(Encoder, DeterministicAndFixedWidth) {
    const StateEncoder enc{2, 17, 5, true};
    const SeqState s({0, kA}, false);
    EXPECT_EQ(enc.encode(s), enc.encode(s));
    EXPECT_EQ(enc.encode(SeqState({0, kA, kB, kB, kA, 1}, true)).size(), 17);
}

TEST(Encoder, BigramsAreOrderSensitive) {
    const StateEncoder enc{2, 64, 3, false};
    const SeqState ab({kA, kB}, false), ba({kB, kA}, false);
    const auto xab = enc.encode(ab), xba = enc.encode(ba);
    // The unigram parts agree, so any difference comes from the bigrams.
    const std::vector<TokenId> g_ab{kA, kB}, g_ba{kB, kA};
    ASSERT_NE(enc.bucket(2, g_ab), enc.bucket(2, g_ba)) << "hash collision for this seed";
    EXPECT_GT((xab - xba).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Encoder, CountsDividedByLength) {
    const StateEncoder enc{1, 64, 9, false};
    EXPECT_NEAR(enc.encode(SeqState({0, kA, kA, kB}, false)).sum(), 1.0, 1e-15);
    const std::vector<TokenId> ga{kA};
    EXPECT_EQ(enc.encode(SeqState({kA, kA}, false))[static_cast<Eigen::Index>(enc.bucket(1, ga))], 1.0);
}

TEST(Encoder, MarkLastAddsUnitIndicator) {
    const StateEncoder plain{1, 64, 9, false}, marked{1, 64, 9, true};
    const SeqState s({0, kA, kB}, false);
    EXPECT_NEAR(marked.encode(s).sum() - plain.encode(s).sum(), 1.0, 1e-15);
}

TEST(Phi, ZeroWeightsGiveOutputBias) {
    PhiNet net;
    net.w_in = Eigen::MatrixXd::Zero(3, 4);
    net.b_in = Eigen::VectorXd::Zero(3);
    net.w_out = Eigen::MatrixXd::Zero(2, 3);
    net.b_out = Eigen::Vector2d(0.25, -1.5);
    EXPECT_EQ(phi(net, Eigen::VectorXd::Random(4)), net.b_out);
}

TEST(Phi, ZeroOutputHeadIgnoresHiddenPath) {
    Rng rng(4);
    auto net = PhiNet::random(4, 4, 4, rng);
    net.w_in.setZero();
    net.b_in = Eigen::VectorXd::Constant(4, 0.7);
    net.w_out.setZero();
    net.b_out = Eigen::Vector4d(1, 2, 3, 4);
    EXPECT_EQ(phi(net, Eigen::VectorXd::Random(4)), net.b_out);
}

TEST(Phi, DimensionMismatch) {
    Rng rng(4);
    const auto net = PhiNet::random(4, 3, 2, rng);
    EXPECT_THROW(phi(net, Eigen::VectorXd::Zero(5)), ContractViolation);
}

TEST(Phi, JacobianMatchesFiniteDifferences) {
    Rng rng(11);
    auto net = PhiNet::random(6, 5, 3, rng);
    net.b_in = Eigen::VectorXd::NullaryExpr(5, [&]() { return 0.3 * standard_normal(rng); });
    const Eigen::VectorXd x = Eigen::VectorXd::NullaryExpr(6, [&]() { return standard_normal(rng); });
    const Eigen::VectorXd hid = (net.w_in * x + net.b_in).array().tanh().matrix();
    const Eigen::MatrixXd jac = net.w_out * (1.0 - hid.array().square()).matrix().asDiagonal() * net.w_in;
    double worst = 0.0;
    for (Eigen::Index j = 0; j < 6; ++j) {
        Eigen::VectorXd up = x, down = x;
        up[j] += 1e-5;
        down[j] -= 1e-5;
        const Eigen::VectorXd num = (phi(net, up) - phi(net, down)) / 2e-5;
        for (Eigen::Index i = 0; i < 3; ++i) worst = std::max(worst, gradcheck::relative_error(jac(i, j), num[i]));
    }
    EXPECT_LE(worst, 1e-4);
}

TEST(MultitaskLoss, GradientsMatchFiniteDifferences) {
    Rng rng(21);
    auto net = PhiNet::random(12, 6, 4, rng);
    net.b_in = Eigen::VectorXd::NullaryExpr(6, [&]() { return 0.2 * standard_normal(rng); });
    net.b_out = Eigen::VectorXd::NullaryExpr(4, [&]() { return 0.2 * standard_normal(rng); });
    Eigen::MatrixXd reward = Eigen::MatrixXd::NullaryExpr(4, 3, [&]() { return standard_normal(rng); });
    const Eigen::MatrixXd x = Eigen::MatrixXd::NullaryExpr(12, 7, [&]() { return uniform01(rng); });
    Eigen::MatrixXd r(7, 3);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = uniform01(rng) < 0.5 ? -1.0 : 0.0;
    r(2, 1) = kUnlabeled;
    r(5, 0) = kUnlabeled;
    MultitaskGrads g;
    multitask_loss(net, reward, x, r, &g);
    auto loss = [&]() { return multitask_loss(net, reward, x, r, nullptr); };
    Rng probe_rng(5);
    EXPECT_LE(gradcheck::probe(net.w_in, g.w_in, loss, probe_rng), 1e-4);
    EXPECT_LE(gradcheck::probe(net.b_in, g.b_in, loss, probe_rng), 1e-4);
    EXPECT_LE(gradcheck::probe(net.w_out, g.w_out, loss, probe_rng), 1e-4);
    EXPECT_LE(gradcheck::probe(net.b_out, g.b_out, loss, probe_rng), 1e-4);
    EXPECT_LE(gradcheck::probe(reward, g.reward, loss, probe_rng), 1e-4);
}

TEST(MultitaskLoss, IgnoresUnlabelledEntries) {
    Rng rng(2);
    const auto net = PhiNet::random(4, 3, 2, rng);
    const Eigen::MatrixXd reward = Eigen::MatrixXd::Ones(2, 2);
    const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(4, 1);
    Eigen::MatrixXd r(1, 2);
    r << -1.0, kUnlabeled;
    const Eigen::VectorXd f = phi(net, x.col(0));
    EXPECT_NEAR(multitask_loss(net, reward, x, r, nullptr), std::pow(f.sum() + 1.0, 2), 1e-12);
}

TEST(TrainMultitask, ConstantFeatureLearnsMinusOne) {
    PhiNet fixed;
    fixed.w_in = Eigen::MatrixXd::Zero(1, 8);
    fixed.b_in = Eigen::VectorXd::Zero(1);
    fixed.w_out = Eigen::MatrixXd::Zero(1, 1);
    fixed.b_out = Eigen::VectorXd::Ones(1);
    MultitaskCfg cfg;
    cfg.d = 1;
    cfg.epochs = 400;
    cfg.batch = 4;
    cfg.train_phi = false;
    cfg.init_phi = fixed;
    std::vector<SeqState> states;
    for (TokenId t : {3, 4, 5, 6, 7, 8, 9, 10}) states.push_back(SeqState({0, t, 1}, true));
    const auto res = train_multitask(single_task(states, std::vector<double>(8, -1.0)), StateEncoder{1, 8, 0, true}, cfg);
    EXPECT_NEAR(res.reward.w(0, 0), -1.0, 1e-3);
    EXPECT_EQ(res.features.net, fixed);
}

TEST(TrainMultitask, OrthogonalTasksGeneraliseOverSeeds) {
    // Task 0 flags "b", task 1 flags "c"; the two depend on disjoint tokens.
    const auto terms = all_abc_terminals(5);
    TerminalDataset train, held;
    train.tasks = held.tasks = {"has_b", "has_c"};
    std::vector<std::vector<double>> tr, he;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        const std::vector<double> lab{contains(terms[i], 4) ? -1.0 : 0.0, contains(terms[i], 5) ? -1.0 : 0.0};
        if (i % 4 == 3) {
            held.states.push_back(terms[i]);
            he.push_back(lab);
        } else {
            train.states.push_back(terms[i]);
            tr.push_back(lab);
        }
    }
    auto to_matrix = [](const std::vector<std::vector<double>>& rows) {
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), 2);
        for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) << rows[i][0], rows[i][1];
        return m;
    };
    train.labels = to_matrix(tr);
    held.labels = to_matrix(he);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        MultitaskCfg cfg;
        cfg.hidden = 32;
        cfg.d = 8;
        cfg.epochs = 1500;
        cfg.batch = 16;
        cfg.weight_decay = 0.01;
        cfg.seed = seed;
        const auto res = train_multitask(train, StateEncoder{1, 256, seed, true}, cfg);
        double worst = 0.0;
        for (std::size_t i = 0; i < held.size(); ++i) {
            const Eigen::VectorXd pred = res.reward.w.transpose() * res.features(held.states[i]);
            worst = std::max(worst, (pred - held.labels.row(static_cast<Eigen::Index>(i)).transpose()).cwiseAbs().maxCoeff());
        }
        EXPECT_LE(worst, 0.1) << "seed " << seed;
        EXPECT_LT(res.epoch_loss.back(), res.epoch_loss.front());
        EXPECT_FALSE(res.range_warning);
    }
}

TEST(TrainMultitask, DeterministicPerSeed) {
    const auto terms = all_abc_terminals(4);
    std::vector<double> lab;
    for (const auto& s : terms) lab.push_back(contains(s, 4) ? -1.0 : 0.0);
    const auto ds = single_task(terms, lab);
    MultitaskCfg cfg;
    cfg.epochs = 20;
    cfg.seed = 8;
    const auto a = train_multitask(ds, StateEncoder{2, 32, 1, true}, cfg);
    const auto b = train_multitask(ds, StateEncoder{2, 32, 1, true}, cfg);
    EXPECT_EQ(a.features.net, b.features.net);
    EXPECT_EQ(a.reward.w, b.reward.w);
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(TrainMultitask, Errors) {
    const std::vector<SeqState> states{SeqState({0, 3, 1}, true)};
    TerminalDataset ds = single_task(states, {kUnlabeled});
    EXPECT_THROW(train_multitask(ds, StateEncoder{}, MultitaskCfg{}), ConfigError);
    ds.labels(0, 0) = 0.5;
    EXPECT_THROW(train_multitask(ds, StateEncoder{}, MultitaskCfg{}), InputError);
    const TerminalDataset open = single_task({SeqState::prompt()}, {0.0});
    EXPECT_THROW(train_multitask(open, StateEncoder{}, MultitaskCfg{}), InputError);
}

TEST(FitNewSubject, OrthonormalDesign) {
    // Pick W_out so that the two states map exactly onto e1 and e2.
    const StateEncoder enc{1, 16, 2, true};
    const SeqState s1({0, kA, 1}, true), s2({0, kB, kB, 1}, true);
    Rng rng(3);
    FeatureModel fm{enc, PhiNet::random(16, 2, 2, rng)};
    Eigen::Matrix2d h;
    h.col(0) = (fm.net.w_in * enc.encode(s1)).array().tanh().matrix();
    h.col(1) = (fm.net.w_in * enc.encode(s2)).array().tanh().matrix();
    fm.net.w_out = h.inverse();
    ASSERT_LT((fm(s1) - Eigen::Vector2d(1, 0)).norm(), 1e-12);
    const auto w = fit_new_subject(fm, single_task({s1, s2}, {-1.0, 0.0}), 0.0);
    EXPECT_NEAR(w[0], -1.0, 1e-10);
    EXPECT_NEAR(w[1], 0.0, 1e-10);
}

TEST(FitNewSubject, HugeRidgeShrinksToZero) {
    Rng rng(6);
    const FeatureModel fm{StateEncoder{2, 32, 1, true}, PhiNet::random(32, 8, 4, rng)};
    const auto terms = all_abc_terminals(4);
    std::vector<double> lab;
    for (const auto& s : terms) lab.push_back(contains(s, 4) ? -1.0 : 0.0);
    EXPECT_LT(fit_new_subject(fm, single_task(terms, lab), 1e12).norm(), 1e-9);
}

TEST(FitNewSubject, MatchesIndependentNormalEquations) {
    Rng rng(17);
    const FeatureModel fm{StateEncoder{2, 32, 4, true}, PhiNet::random(32, 8, 4, rng)};
    auto terms = all_abc_terminals(5);
    terms.resize(20);
    std::vector<double> lab;
    for (std::size_t i = 0; i < terms.size(); ++i) lab.push_back(uniform01(rng) < 0.5 ? -1.0 : 0.0);
    const double ridge = 1e-3;
    Eigen::MatrixXd phi_rows(20, 4);
    for (Eigen::Index i = 0; i < 20; ++i) phi_rows.row(i) = fm(terms[static_cast<std::size_t>(i)]).transpose();
    const Eigen::VectorXd r = Eigen::Map<const Eigen::VectorXd>(lab.data(), 20);
    const Eigen::VectorXd direct = linsolve::solve_by_elimination(
        phi_rows.transpose() * phi_rows + ridge * Eigen::MatrixXd::Identity(4, 4), phi_rows.transpose() * r);
    const auto before = fm.net;
    const auto w = fit_new_subject(fm, single_task(terms, lab), ridge);
    EXPECT_LE((w - direct).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_EQ(fm.net, before);
}

TEST(FitNewSubject, SingularWithoutRidge) {
    PhiNet net;
    net.w_in = Eigen::MatrixXd::Zero(1, 8);
    net.b_in = Eigen::VectorXd::Zero(1);
    net.w_out = Eigen::MatrixXd::Zero(2, 1);
    net.b_out = Eigen::Vector2d(1.0, 1.0);
    const FeatureModel fm{StateEncoder{1, 8, 0, true}, net};
    const auto ds = single_task({SeqState({0, 3, 1}, true), SeqState({0, 4, 1}, true)}, {-1.0, 0.0});
    EXPECT_THROW(fit_new_subject(fm, ds, 0.0), NumericalError);
    EXPECT_NO_THROW(fit_new_subject(fm, ds, 1e-3));
}

TEST(FeaturesCheckpoint, RoundTrip) {
    Rng rng(1);
    const FeatureModel fm{StateEncoder{2, 16, 99, false}, PhiNet::random(16, 4, 3, rng)};
    const RewardMatrix reward{Eigen::MatrixXd::Random(3, 2), {"x", "y"}};
    Checkpoint ck;
    save_features(ck, fm, reward);
    const auto [fm2, r2] = load_features(Checkpoint::parse(ck.serialize()));
    EXPECT_EQ(fm2.encoder, fm.encoder);
    EXPECT_EQ(fm2.net, fm.net);
    EXPECT_EQ(r2.w, reward.w);
    EXPECT_EQ(r2.names, reward.names);
}
