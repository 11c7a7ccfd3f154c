#pragma once

// Experiment orchestration: configuration, pipeline stages and artifacts.
//
// Every stage reads the config plus earlier artifacts from the output
// directory and writes its own:
//
//   train-lm        vocab.tsv, lm.sfg
//   train-features  features.sfg
//   train-sf        psi.sfg
//   fit-subject     subjects.sfg
//   generate        generations.tsv
//   evaluate        metrics.csv, metrics_base.csv, summary.csv
//   oracle-check    oracle_<subject>.csv

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "sfgen/checkpoint.hpp"
#include "sfgen/errors.hpp"
#include "sfgen/featnet.hpp"
#include "sfgen/lm.hpp"
#include "sfgen/metrics.hpp"
#include "sfgen/oracle.hpp"
#include "sfgen/random.hpp"
#include "sfgen/rectify.hpp"
#include "sfgen/scorer.hpp"
#include "sfgen/seqmdp.hpp"
#include "sfgen/sfnet.hpp"

namespace sfgen {

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline constexpr std::array<std::string_view, 49> kConfigKeys = {
    "seed",
    "out",
    "data.corpus",
    "data.tokenize",
    "data.min_count",
    "data.max_len",
    "data.prompts",
    "data.labels",
    "lm.order",
    "lm.alpha",
    "lm.weights",
    "features.subjects",
    "features.lm_samples",
    "features.explore",
    "features.hidden",
    "features.d",
    "features.encoder_dim",
    "features.encoder_order",
    "features.lr",
    "features.epochs",
    "features.batch",
    "features.weight_decay",
    "fit.subjects",
    "fit.ridge",
    "fit.lm_samples",
    "fit.explore",
    "sf.algorithm",
    "sf.gamma",
    "sf.tau",
    "sf.lr",
    "sf.epochs",
    "sf.batch",
    "sf.warmup",
    "sf.weight_decay",
    "sf.trajectories",
    "sf.explore",
    "sf.hidden",
    "sf.embed",
    "sf.encoder_dim",
    "decode.top_k",
    "decode.active",
    "decode.fusion",
    "decode.n_gen",
    "decode.epsilon",
    "decode.clamp",
    "eval.subjects",
    "oracle.subjects",
    "oracle.budget",
    "oracle.max_rows",
};

// subject.<name>.<field>
inline constexpr std::array<std::string_view, 3> kSubjectFields = {"lexicon", "min_length", "description"};

}  // namespace detail

/// Flat `key = value` configuration. `#` starts a comment line; keys are
/// dotted; unknown keys are rejected. Relative paths resolve against the
/// directory of the config file.
class Config {
public:
    Config() = default;

    static Config parse(std::string_view text, std::string base_dir = ".") {
        Config c;
        c.base_dir_ = std::move(base_dir);
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
            }
            const auto key = detail::trim(std::string_view(t).substr(0, eq));
            const auto value = detail::trim(std::string_view(t).substr(eq + 1));
            check_key(key);
            if (c.values_.count(key)) throw ConfigError("config key '" + key + "' set twice");
            c.values_[key] = value;
        }
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        auto dir = std::filesystem::path(path).parent_path().string();
        return parse(ss.str(), dir.empty() ? "." : dir);
    }

    static void check_key(const std::string& key) {
        for (auto k : detail::kConfigKeys) {
            if (key == k) return;
        }
        if (key.rfind("subject.", 0) == 0) {
            const auto dot = key.rfind('.');
            const auto name = key.substr(8, dot - 8);
            const auto field = key.substr(dot + 1);
            if (dot > 8 && !name.empty() && name.find('.') == std::string::npos) {
                for (auto f : detail::kSubjectFields) {
                    if (field == f) return;
                }
            }
        }
        throw ConfigError("unknown config key '" + key + "'");
    }

    void set(const std::string& key, const std::string& value) {
        check_key(key);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& base_dir() const { return base_dir_; }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    const std::string& require(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
        if (!has(key)) return fallback;
        const auto& v = values_.at(key);
        std::uint64_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size()) {
            throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
        }
        return out;
    }

    std::size_t size(const std::string& key, std::size_t fallback) const {
        return static_cast<std::size_t>(u64(key, fallback));
    }

    double real(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        return parse_real(key, values_.at(key));
    }

    bool flag(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const auto& v = values_.at(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(key + ": expected true or false, got '" + v + "'");
    }

    /// Comma-separated list; blank entries dropped.
    std::vector<std::string> list(const std::string& key) const {
        std::vector<std::string> out;
        if (!has(key)) return out;
        std::stringstream ss(values_.at(key));
        for (std::string item; std::getline(ss, item, ',');) {
            auto t = detail::trim(item);
            if (!t.empty()) out.push_back(std::move(t));
        }
        return out;
    }

    std::vector<double> reals(const std::string& key) const {
        std::vector<double> out;
        for (const auto& item : list(key)) out.push_back(parse_real(key, item));
        return out;
    }

    /// Resolved path of an input file; ConfigError naming the key when the
    /// file does not exist.
    std::string path(const std::string& key) const {
        const auto& v = require(key);
        auto p = std::filesystem::path(v);
        if (p.is_relative()) p = std::filesystem::path(base_dir_) / p;
        if (!std::filesystem::is_regular_file(p)) {
            throw ConfigError(key + ": file '" + p.string() + "' does not exist");
        }
        return p.string();
    }

    /// Names mentioned in subject.<name>.* keys, sorted.
    std::vector<std::string> subject_names() const {
        std::set<std::string> names;
        for (const auto& [k, _] : values_) {
            if (k.rfind("subject.", 0) == 0) names.insert(k.substr(8, k.rfind('.') - 8));
        }
        return {names.begin(), names.end()};
    }

private:
    static double parse_real(const std::string& key, const std::string& v) {
        double out = 0.0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
            throw ConfigError(key + ": expected a number, got '" + v + "'");
        }
        return out;
    }

    std::map<std::string, std::string> values_;
    std::string base_dir_ = ".";
};

// ---------------------------------------------------------------------------
// Stages

enum class Stage { kTrainLm, kTrainFeatures, kTrainSf, kFitSubject, kGenerate, kEvaluate, kOracleCheck };

inline constexpr std::array<Stage, 7> kPipeline = {Stage::kTrainLm,    Stage::kTrainFeatures, Stage::kTrainSf,
                                                   Stage::kFitSubject, Stage::kGenerate,      Stage::kEvaluate,
                                                   Stage::kOracleCheck};

inline std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::kTrainLm: return "train-lm";
        case Stage::kTrainFeatures: return "train-features";
        case Stage::kTrainSf: return "train-sf";
        case Stage::kFitSubject: return "fit-subject";
        case Stage::kGenerate: return "generate";
        case Stage::kEvaluate: return "evaluate";
        case Stage::kOracleCheck: return "oracle-check";
    }
    return "?";
}

inline Stage parse_stage(std::string_view s) {
    for (auto st : kPipeline) {
        if (stage_name(st) == s) return st;
    }
    throw ConfigError("unknown stage '" + std::string(s) + "'");
}

/// Everything a stage needs besides the config.
struct RunContext {
    Config config;
    std::filesystem::path out_dir;
    std::ostream* log = nullptr;

    std::uint64_t seed() const { return config.u64("seed", 0); }
    std::filesystem::path artifact(const std::string& name) const { return out_dir / name; }

    template <typename... Args>
    void note(const Args&... parts) const {
        if (!log) return;
        ((*log) << ... << parts) << '\n';
    }
};

/// Output directory: `out_override` when given, else the `out` key relative
/// to the config file, else `out` next to the config.
inline std::filesystem::path resolve_out_dir(const Config& cfg, const std::string& out_override) {
    if (!out_override.empty()) return out_override;
    auto p = std::filesystem::path(cfg.str("out", "out"));
    if (p.is_relative()) p = std::filesystem::path(cfg.base_dir()) / p;
    return p;
}

namespace detail {

// Seed streams, one per consumer.
enum : std::uint64_t {
    kStreamFeatureSamples = 1,
    kStreamPhiInit = 2,
    kStreamEncoder = 3,
    kStreamTrajectories = 4,
    kStreamPsiInit = 5,
    kStreamPsiTrain = 6,
    kStreamGenerate = 7,
    kStreamFitSamples = 8,
};

inline void require_artifact(const RunContext& ctx, Stage current, const std::string& file, Stage producer) {
    if (!std::filesystem::is_regular_file(ctx.artifact(file))) {
        throw ConfigError("stage '" + std::string(stage_name(current)) + "' needs " + file + " from stage '" +
                          std::string(stage_name(producer)) + "'; run that stage first (out dir " +
                          ctx.out_dir.string() + ")");
    }
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + p.string() + "'");
    out << bytes;
}

inline TokenizeMode tokenize_mode(const Config& cfg) { return parse_tokenize_mode(cfg.str("data.tokenize", "whitespace")); }

inline std::size_t max_len(const Config& cfg) {
    const auto L = cfg.size("data.max_len", 6);
    if (L < 2) throw ConfigError("data.max_len must be at least 2");
    return L;
}

inline Vocab load_vocab(const RunContext& ctx) {
    std::ifstream in(ctx.artifact("vocab.tsv"));
    return Vocab::read(in);
}

inline NGramLM load_lm(const RunContext& ctx) { return NGramLM::from_checkpoint(Checkpoint::load(ctx.artifact("lm.sfg").string())); }

inline std::vector<std::string> corpus_lines(const Config& cfg) { return read_lines(cfg.path("data.corpus")); }

/// Prompt bodies; a missing prompts file means one empty prompt.
inline std::vector<SeqState> prompts(const Config& cfg, const Vocab& vocab) {
    std::vector<SeqState> out;
    const auto L = max_len(cfg);
    if (!cfg.has("data.prompts")) {
        out.push_back(SeqState::prompt());
        return out;
    }
    for (const auto& line : read_lines(cfg.path("data.prompts"))) {
        const auto ids = tokenize(line, tokenize_mode(cfg), vocab);
        if (ids.size() + 1 >= L) throw ConfigError("data.prompts: prompt '" + line + "' leaves no room under max_len");
        out.push_back(SeqState::prompt(ids));
    }
    if (out.empty()) throw ConfigError("data.prompts: no prompts");
    return out;
}

inline std::string state_text(const SeqState& s, const Vocab& vocab) {
    std::string out;
    for (auto t : s.tokens()) {
        if (!out.empty()) out += ' ';
        out += vocab.surface(t);
    }
    return out;
}

}  // namespace detail

/// Scorer for a configured subject: `subject.<name>.lexicon` (pattern
/// file) or `subject.<name>.min_length` (length threshold).
inline std::unique_ptr<Scorer> make_scorer(const Config& cfg, const std::string& name, const Vocab& vocab) {
    const auto base = "subject." + name + ".";
    if (cfg.has(base + "lexicon")) {
        auto spec = read_lexicon(name, cfg.path(base + "lexicon"));
        spec.description = cfg.str(base + "description", "");
        return std::make_unique<LexiconScorer>(spec, vocab, detail::tokenize_mode(cfg));
    }
    if (cfg.has(base + "min_length")) return std::make_unique<LengthScorer>(cfg.size(base + "min_length", 0));
    throw ConfigError("subject '" + name + "' has no scorer; set " + base + "lexicon or " + base + "min_length");
}

/// Subject-label file: `<doc-id>\t<subject>\t<label>` with doc-id the
/// 1-based corpus line number and label -1 or 0.
inline std::map<std::pair<std::size_t, std::string>, int> read_subject_labels(const std::string& path) {
    std::map<std::pair<std::size_t, std::string>, int> out;
    std::size_t lineno = 0;
    for (const auto& line : read_lines(path)) {
        ++lineno;
        if (detail::trim(line).empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string id, subject, label;
        if (!std::getline(ss, id, '\t') || !std::getline(ss, subject, '\t') || !std::getline(ss, label)) {
            throw InputError(path + ":" + std::to_string(lineno) + ": expected <doc-id>\\t<subject>\\t<label>");
        }
        std::size_t doc = 0;
        auto [p, ec] = std::from_chars(id.data(), id.data() + id.size(), doc);
        if (ec != std::errc() || p != id.data() + id.size() || doc == 0) {
            throw InputError(path + ":" + std::to_string(lineno) + ": bad doc id '" + id + "'");
        }
        label = detail::trim(label);
        if (label != "-1" && label != "0") throw InputError(path + ":" + std::to_string(lineno) + ": label must be -1 or 0");
        out[{doc, detail::trim(subject)}] = label == "-1" ? -1 : 0;
    }
    return out;
}

/// Terminal states for reward regression: every corpus document (clipped to
/// the length cap) plus `samples` continuations drawn from the base model,
/// an `explore` share of them after a uniformly random roll-in.
/// Labels come from the label file when it has an entry, else from the
/// subject's scorer, else stay unlabelled.
inline TerminalDataset labelled_dataset(const RunContext& ctx, const Vocab& vocab, const NGramLM& lm,
                                        const std::vector<std::string>& subjects, std::size_t samples,
                                        double explore, std::uint64_t stream) {
    const auto& cfg = ctx.config;
    const auto L = detail::max_len(cfg);
    TerminalDataset ds;
    ds.tasks = subjects;
    std::vector<std::size_t> doc_ids;  // 0 for sampled states
    std::size_t lineno = 0;
    for (const auto& line : detail::corpus_lines(cfg)) {
        ++lineno;
        auto ids = tokenize(line, detail::tokenize_mode(cfg), vocab);
        if (ids.empty()) continue;
        if (ids.size() > L - 1) ids.resize(L - 1);
        std::vector<TokenId> toks{Vocab::kBos};
        toks.insert(toks.end(), ids.begin(), ids.end());
        if (toks.size() < L) toks.push_back(Vocab::kEos);
        ds.states.push_back(SeqState::with_cap(std::move(toks), L));
        doc_ids.push_back(lineno);
    }
    const auto prompt_states = detail::prompts(cfg, vocab);
    if (!(explore >= 0.0 && explore <= 1.0)) throw ConfigError("explore share must lie in [0, 1]");
    for (const auto& t : sample_trajectories(lm, prompt_states, L, samples, explore, derive_seed(ctx.seed(), stream))) {
        ds.states.push_back(t.terminal_state());
        doc_ids.push_back(0);
    }

    std::map<std::pair<std::size_t, std::string>, int> file_labels;
    if (cfg.has("data.labels")) file_labels = read_subject_labels(cfg.path("data.labels"));
    const auto n = static_cast<Eigen::Index>(ds.states.size());
    ds.labels = Eigen::MatrixXd::Constant(n, static_cast<Eigen::Index>(subjects.size()), kUnlabeled);
    for (std::size_t j = 0; j < subjects.size(); ++j) {
        const auto& name = subjects[j];
        const auto prefix = "subject." + name + ".";
        std::unique_ptr<Scorer> scorer;
        if (cfg.has(prefix + "lexicon") || cfg.has(prefix + "min_length")) scorer = make_scorer(cfg, name, vocab);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto doc = doc_ids[static_cast<std::size_t>(i)];
            if (doc != 0) {
                auto it = file_labels.find({doc, name});
                if (it != file_labels.end()) {
                    ds.labels(i, static_cast<Eigen::Index>(j)) = it->second;
                    continue;
                }
            }
            if (scorer) ds.labels(i, static_cast<Eigen::Index>(j)) = score_terminal(*scorer, ds.states[static_cast<std::size_t>(i)]);
        }
    }
    return ds;
}

/// Bank of every known subject: jointly trained reward columns, then
/// post-hoc fits (which replace a trained column of the same name).
inline SubjectBank load_bank(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    const auto [fm, reward] = load_features(Checkpoint::load(ctx.artifact("features.sfg").string()));
    SubjectBank bank(parse_fusion(cfg.str("decode.fusion", "min")));
    for (std::size_t j = 0; j < reward.tasks(); ++j) bank = bank.with_subject(reward.names[j], reward.column(j));
    if (std::filesystem::is_regular_file(ctx.artifact("subjects.sfg"))) {
        const auto ck = Checkpoint::load(ctx.artifact("subjects.sfg").string());
        const auto meta = ck.u64s("bank.meta");
        if (meta.size() != 2) throw InputError("bank.meta must hold (d, count)");
        std::vector<std::string> names;
        std::istringstream ns(ck.bytes("bank.names"));
        for (std::string line; std::getline(ns, line);) names.push_back(line);
        if (names.size() != meta[1]) throw InputError("bank.names does not match bank.meta");
        if (meta[1] > 0) {
            const auto w = ck.matrix("bank.w", static_cast<Eigen::Index>(meta[0]), static_cast<Eigen::Index>(meta[1]));
            for (std::size_t j = 0; j < names.size(); ++j) bank = bank.with_subject(names[j], w.col(static_cast<Eigen::Index>(j)));
        }
    }
    auto active = cfg.list("decode.active");
    if (active.empty()) active = bank.names();
    return bank.with_active(active);
}

inline RectifierCfg rectifier_cfg(const Config& cfg) {
    RectifierCfg r;
    r.top_k = cfg.size("decode.top_k", 50);
    if (r.top_k < 1) throw ConfigError("decode.top_k must be at least 1");
    r.epsilon = cfg.real("decode.epsilon", 1e-9);
    r.clamp_q = cfg.flag("decode.clamp", true);
    r.max_len = detail::max_len(cfg);
    return r;
}

inline void stage_train_lm(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    const auto mode = detail::tokenize_mode(cfg);
    std::vector<std::vector<std::string>> docs;
    for (const auto& line : detail::corpus_lines(cfg)) {
        auto s = split_surfaces(line, mode);
        if (!s.empty()) docs.push_back(std::move(s));
    }
    if (docs.empty()) throw InputError("data.corpus: corpus is empty");
    const auto vocab = build_vocab(docs, cfg.size("data.min_count", 1));
    std::vector<std::vector<TokenId>> ids;
    for (const auto& d : docs) {
        std::vector<TokenId> v;
        for (const auto& s : d) v.push_back(vocab.id(s));
        ids.push_back(std::move(v));
    }
    const auto order = cfg.size("lm.order", 2);
    auto weights = cfg.reals("lm.weights");
    if (weights.empty() && order >= 1 && order <= 3) weights.assign(order, 1.0 / static_cast<double>(order));
    const auto lm = fit_ngram(ids, order, cfg.real("lm.alpha", 0.1), weights, vocab.size());
    std::ostringstream vs;
    vocab.write(vs);
    detail::write_file(ctx.artifact("vocab.tsv"), vs.str());
    lm.to_checkpoint().save(ctx.artifact("lm.sfg").string());
    ctx.note("train-lm: V=", vocab.size(), " documents=", docs.size(), " order=", order,
             " corpus perplexity=", format_real(perplexity(lm, ids)));
}

inline void stage_train_features(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_artifact(ctx, Stage::kTrainFeatures, "lm.sfg", Stage::kTrainLm);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto subjects = cfg.list("features.subjects");
    if (subjects.empty()) throw ConfigError("features.subjects: list at least one subject");
    const auto ds = labelled_dataset(ctx, vocab, lm, subjects, cfg.size("features.lm_samples", 2000),
                                     cfg.real("features.explore", 0.5), detail::kStreamFeatureSamples);
    StateEncoder enc;
    enc.order = static_cast<int>(cfg.size("features.encoder_order", 2));
    enc.dim = cfg.size("features.encoder_dim", 64);
    enc.seed = derive_seed(ctx.seed(), detail::kStreamEncoder);
    MultitaskCfg mc;
    mc.hidden = cfg.size("features.hidden", 8);
    mc.d = cfg.size("features.d", 8);
    mc.lr = cfg.real("features.lr", 1e-2);
    mc.epochs = cfg.size("features.epochs", 300);
    mc.batch = cfg.size("features.batch", 32);
    mc.weight_decay = cfg.real("features.weight_decay", 0.01);
    mc.seed = derive_seed(ctx.seed(), detail::kStreamPhiInit);
    ctx.note("train-features: seed=", ctx.seed(), " terminals=", ds.size(), " subjects=", subjects.size());
    const auto res = train_multitask(ds, enc, mc);
    Checkpoint ck;
    save_features(ck, res.features, res.reward);
    ck.save(ctx.artifact("features.sfg").string());
    ctx.note("train-features: loss ", format_real(res.epoch_loss.front()), " -> ", format_real(res.epoch_loss.back()));
    if (res.range_warning) {
        ctx.note("warning: ", format_real(100.0 * res.out_of_range_fraction),
                 "% of training reward predictions fall outside [-1.5, 0.5]");
    }
}

inline void stage_train_sf(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_artifact(ctx, Stage::kTrainSf, "lm.sfg", Stage::kTrainLm);
    detail::require_artifact(ctx, Stage::kTrainSf, "features.sfg", Stage::kTrainFeatures);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto [fm, reward] = load_features(Checkpoint::load(ctx.artifact("features.sfg").string()));
    const auto L = detail::max_len(cfg);

    SFTrainerCfg sc;
    const auto algo = cfg.str("sf.algorithm", "mc");
    if (algo == "mc") sc.algorithm = SfAlgorithm::kMonteCarlo;
    else if (algo == "sarsa") sc.algorithm = SfAlgorithm::kSarsa;
    else throw ConfigError("sf.algorithm: expected mc or sarsa, got '" + algo + "'");
    sc.gamma = cfg.real("sf.gamma", 1.0);
    sc.tau = cfg.real("sf.tau", 0.1);
    sc.lr = cfg.real("sf.lr", 1e-2);
    sc.epochs = cfg.size("sf.epochs", 300);
    sc.batch = cfg.size("sf.batch", 32);
    sc.warmup = cfg.size("sf.warmup", 0);
    sc.weight_decay = cfg.real("sf.weight_decay", 0.0);
    sc.seed = derive_seed(ctx.seed(), detail::kStreamPsiTrain);
    const double explore = cfg.real("sf.explore", 0.5);
    if (!(explore >= 0.0 && explore <= 1.0)) throw ConfigError("sf.explore must lie in [0, 1]");

    const auto trajs = sample_trajectories(lm, detail::prompts(cfg, vocab), L, cfg.size("sf.trajectories", 20000), explore,
                                           derive_seed(ctx.seed(), detail::kStreamTrajectories));
    StateEncoder enc{2, cfg.size("sf.encoder_dim", 256), derive_seed(ctx.seed(), detail::kStreamEncoder) ^ 1u, true};
    Rng init_rng(derive_seed(ctx.seed(), detail::kStreamPsiInit));
    auto init = PsiNet::random(enc, vocab.size(), fm.dim(), cfg.size("sf.hidden", 64), cfg.size("sf.embed", 16), init_rng);
    ctx.note("train-sf: seed=", ctx.seed(), " algorithm=", algo, " trajectories=", trajs.size(), " head params=",
             init.head_params());
    const auto res = sc.algorithm == SfAlgorithm::kMonteCarlo ? mc_train(std::move(init), trajs, fm, sc)
                                                              : sarsa_train(std::move(init), trajs, fm, lm, sc);
    Checkpoint ck;
    save_psi(ck, res.net, sc);
    ck.save(ctx.artifact("psi.sfg").string());
    ctx.note("train-sf: loss ", format_real(res.epoch_loss.front()), " -> ", format_real(res.epoch_loss.back()));
}

inline void stage_fit_subject(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_artifact(ctx, Stage::kFitSubject, "lm.sfg", Stage::kTrainLm);
    detail::require_artifact(ctx, Stage::kFitSubject, "features.sfg", Stage::kTrainFeatures);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto [fm, reward] = load_features(Checkpoint::load(ctx.artifact("features.sfg").string()));
    const auto names = cfg.list("fit.subjects");
    const double ridge = cfg.real("fit.ridge", 1e-3);
    Eigen::MatrixXd w(static_cast<Eigen::Index>(fm.dim()), static_cast<Eigen::Index>(names.size()));
    std::string name_bytes;
    for (std::size_t j = 0; j < names.size(); ++j) {
        const auto ds = labelled_dataset(ctx, vocab, lm, {names[j]}, cfg.size("fit.lm_samples", 2000),
                                         cfg.real("fit.explore", 0.5), detail::kStreamFitSamples);
        if (ds.task_count(0) == 0) throw ConfigError("fit.subjects: subject '" + names[j] + "' has no labelled examples");
        w.col(static_cast<Eigen::Index>(j)) = fit_new_subject(fm, ds, ridge);
        name_bytes += names[j] + '\n';
        ctx.note("fit-subject: ", names[j], " examples=", ds.task_count(0));
    }
    Checkpoint ck;
    ck.put_u64s("bank.meta", std::vector<std::uint64_t>{fm.dim(), names.size()});
    ck.put_bytes("bank.names", name_bytes);
    ck.put_matrix("bank.w", w);
    ck.save(ctx.artifact("subjects.sfg").string());
}

namespace detail {

struct Generation {
    std::size_t prompt = 0;
    std::vector<TokenId> tokens;  // full terminal sequence
    std::size_t prompt_len = 0;
    std::size_t fallback_steps = 0;

    std::vector<TokenId> continuation() const { return {tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len), tokens.end()}; }
};

inline std::uint64_t prompt_seed(std::uint64_t seed, std::size_t prompt_id) {
    return derive_seed(derive_seed(seed, kStreamGenerate), prompt_id);
}

inline void require_generation_inputs(const RunContext& ctx, Stage st) {
    require_artifact(ctx, st, "lm.sfg", Stage::kTrainLm);
    require_artifact(ctx, st, "features.sfg", Stage::kTrainFeatures);
    require_artifact(ctx, st, "psi.sfg", Stage::kTrainSf);
    if (!ctx.config.list("fit.subjects").empty()) require_artifact(ctx, st, "subjects.sfg", Stage::kFitSubject);
}

}  // namespace detail

inline void stage_generate(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_generation_inputs(ctx, Stage::kGenerate);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto psi = load_psi(Checkpoint::load(ctx.artifact("psi.sfg").string()));
    const auto bank = load_bank(ctx);
    const auto rcfg = rectifier_cfg(cfg);
    const auto n_gen = cfg.size("decode.n_gen", 25);
    if (n_gen == 0) throw ConfigError("decode.n_gen must be positive");
    const auto prompts = detail::prompts(cfg, vocab);
    std::ostringstream out;
    out << "prompt_id\tsample\tfallback_steps\tids\ttext\n";
    std::size_t fallbacks = 0;
    const SuccessorQSource qsource(psi);
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        Rng rng(detail::prompt_seed(ctx.seed(), p));
        for (std::size_t i = 0; i < n_gen; ++i) {
            const auto traj = generate(lm, qsource, bank, prompts[p], rcfg, rng);
            fallbacks += traj.fallback_steps;
            out << p << '\t' << i << '\t' << traj.fallback_steps << '\t';
            const auto toks = traj.terminal_state().tokens();
            for (std::size_t t = 0; t < toks.size(); ++t) out << (t ? " " : "") << toks[t];
            std::vector<TokenId> shown(traj.continuation().begin(), traj.continuation().end());
            std::erase(shown, Vocab::kEos);
            out << '\t' << detokenize(shown, vocab, detail::tokenize_mode(cfg)) << '\n';
        }
    }
    detail::write_file(ctx.artifact("generations.tsv"), out.str());
    std::string active;
    for (const auto& a : bank.active()) active += (active.empty() ? "" : ",") + a;
    ctx.note("generate: seed=", ctx.seed(), " prompts=", prompts.size(), " n_gen=", n_gen, " active=", active,
             " fallback steps=", fallbacks);
    if (fallbacks > 0) ctx.note("warning: ", fallbacks, " decoding steps had every token capped; used the cap-proportional fallback");
}

namespace detail {

inline std::vector<Generation> read_generations(const RunContext& ctx, const std::vector<SeqState>& prompts) {
    std::vector<Generation> out;
    const auto lines = read_lines(ctx.artifact("generations.tsv").string());
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::stringstream ss(lines[i]);
        std::string pid, sample, fb, ids;
        if (!std::getline(ss, pid, '\t') || !std::getline(ss, sample, '\t') || !std::getline(ss, fb, '\t') ||
            !std::getline(ss, ids, '\t')) {
            throw InputError("generations.tsv line " + std::to_string(i + 1) + " is malformed");
        }
        Generation g;
        g.prompt = std::stoull(pid);
        g.fallback_steps = std::stoull(fb);
        std::stringstream is(ids);
        for (long long t; is >> t;) g.tokens.push_back(static_cast<TokenId>(t));
        if (g.prompt >= prompts.size()) throw InputError("generations.tsv refers to an unknown prompt");
        g.prompt_len = prompts[g.prompt].length();
        out.push_back(std::move(g));
    }
    return out;
}

struct Condition {
    std::vector<MetricsRow> rows;
    std::vector<std::string> summary;
};

/// Per-prompt and overall rows for one set of generations.
inline Condition evaluate_condition(const std::string& label, const std::vector<std::vector<Generation>>& groups,
                                    const std::vector<std::string>& subjects,
                                    const std::vector<std::unique_ptr<Scorer>>& scorers, const NGramLM& lm,
                                    const std::vector<SeqState>& prompts) {
    Condition c;
    std::vector<double> d2, d3, ppls;
    for (std::size_t p = 0; p < groups.size(); ++p) {
        std::vector<std::vector<TokenId>> texts;
        double lp = 0.0;
        std::size_t n = 0;
        for (const auto& g : groups[p]) {
            auto cont = g.continuation();
            std::size_t cnt = 0;
            lp += continuation_log_prob(lm, prompts[p], cont, false, &cnt);
            n += cnt;
            std::erase(cont, Vocab::kEos);
            texts.push_back(std::move(cont));
        }
        d2.push_back(dist_n(texts, 2));
        d3.push_back(dist_n(texts, 3));
        ppls.push_back(n ? std::exp(-lp / static_cast<double>(n)) : 1.0);
    }
    for (std::size_t j = 0; j < subjects.size(); ++j) {
        std::vector<std::vector<double>> scores(groups.size());
        std::vector<double> rates;
        std::vector<double> means;
        for (std::size_t p = 0; p < groups.size(); ++p) {
            double undesired = 0.0;
            for (const auto& g : groups[p]) {
                const auto st = scorers[j]->run(g.tokens);
                scores[p].push_back(scorers[j]->score(st));
                undesired += scorers[j]->undesired(st) ? 1.0 : 0.0;
            }
            const double N = static_cast<double>(groups[p].size());
            MetricsRow r;
            r.prompt_id = std::to_string(p);
            r.subject = subjects[j];
            r.exp_max = expected_max_attribute({scores[p]}).mean;
            r.mean_score = mean_std(scores[p]).mean;
            r.dist2 = d2[p];
            r.dist3 = d3[p];
            r.ppl = ppls[p];
            r.undesired_rate = undesired / N;
            r.n_gen = groups[p].size();
            rates.push_back(r.undesired_rate);
            means.push_back(r.mean_score);
            c.rows.push_back(r);
        }
        const auto em = expected_max_attribute(scores);
        MetricsRow all;
        all.prompt_id = "all";
        all.subject = subjects[j];
        all.exp_max = em.mean;
        all.mean_score = mean_std(means).mean;
        all.dist2 = mean_std(d2).mean;
        all.dist3 = mean_std(d3).mean;
        all.ppl = mean_std(ppls).mean;
        all.undesired_rate = mean_std(rates).mean;
        all.n_gen = groups.front().size();
        c.rows.push_back(all);
        c.summary.push_back(label + "," + csv_field(subjects[j]) + "," + format_real(em.mean) + "," + format_real(em.stdev) +
                            "," + format_real(all.mean_score) + "," + format_real(all.dist2) + "," +
                            format_real(all.dist3) + "," + format_real(all.ppl) + "," + format_real(all.undesired_rate) +
                            "," + std::to_string(all.n_gen));
    }
    return c;
}

}  // namespace detail

inline void stage_evaluate(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_generation_inputs(ctx, Stage::kEvaluate);
    detail::require_artifact(ctx, Stage::kEvaluate, "generations.tsv", Stage::kGenerate);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto bank = load_bank(ctx);
    const auto prompts = detail::prompts(cfg, vocab);
    auto subjects = cfg.list("eval.subjects");
    if (subjects.empty()) subjects = bank.active();
    std::vector<std::unique_ptr<Scorer>> scorers;
    for (const auto& s : subjects) scorers.push_back(make_scorer(cfg, s, vocab));

    std::vector<std::vector<detail::Generation>> rectified(prompts.size());
    for (auto& g : detail::read_generations(ctx, prompts)) rectified[g.prompt].push_back(std::move(g));
    const auto n_gen = rectified.front().size();
    for (const auto& g : rectified) {
        if (g.empty() || g.size() != n_gen) throw InputError("generations.tsv: prompts differ in generation count");
    }
    // Base-model generations with the same per-prompt seeds.
    const auto rcfg = rectifier_cfg(cfg);
    std::vector<std::vector<detail::Generation>> base(prompts.size());
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        Rng rng(detail::prompt_seed(ctx.seed(), p));
        for (std::size_t i = 0; i < n_gen; ++i) {
            const auto traj = generate_base(lm, prompts[p], rcfg.top_k, rcfg.max_len, rng);
            const auto toks = traj.terminal_state().tokens();
            base[p].push_back({p, {toks.begin(), toks.end()}, prompts[p].length(), 0});
        }
    }
    const auto rect = detail::evaluate_condition("rectified", rectified, subjects, scorers, lm, prompts);
    const auto plain = detail::evaluate_condition("base", base, subjects, scorers, lm, prompts);
    std::ostringstream m, mb, s;
    write_metrics_csv(m, rect.rows);
    write_metrics_csv(mb, plain.rows);
    s << "condition,subject,exp_max,exp_max_std,mean_score,dist2,dist3,ppl,undesired_rate,n_gen\n";
    for (const auto& line : plain.summary) s << line << '\n';
    for (const auto& line : rect.summary) s << line << '\n';
    detail::write_file(ctx.artifact("metrics.csv"), m.str());
    detail::write_file(ctx.artifact("metrics_base.csv"), mb.str());
    detail::write_file(ctx.artifact("summary.csv"), s.str());
    for (std::size_t j = 0; j < subjects.size(); ++j) {
        // The overall row of subject j is the last row of its block.
        const auto idx = (j + 1) * (prompts.size() + 1) - 1;
        ctx.note("evaluate: ", subjects[j], " undesired rate ", format_real(rect.rows[idx].undesired_rate), " (base ",
                 format_real(plain.rows[idx].undesired_rate), "), exp-max ", format_real(rect.rows[idx].exp_max),
                 " (base ", format_real(plain.rows[idx].exp_max), ")");
    }
}

/// Exact versus learned dead-end Q over every reachable (state, action)
/// with positive base probability.
struct OracleRow {
    std::string state;
    std::string action;
    double exact_q = 0.0;
    double learned_q = 0.0;
};

inline void stage_oracle_check(const RunContext& ctx) {
    const auto& cfg = ctx.config;
    detail::require_generation_inputs(ctx, Stage::kOracleCheck);
    const auto vocab = detail::load_vocab(ctx);
    const auto lm = detail::load_lm(ctx);
    const auto psi = load_psi(Checkpoint::load(ctx.artifact("psi.sfg").string()));
    const auto bank = load_bank(ctx);
    const auto prompts = detail::prompts(cfg, vocab);
    const auto L = detail::max_len(cfg);
    const auto budget = cfg.u64("oracle.budget", kDefaultEnumerationBudget);
    auto subjects = cfg.list("oracle.subjects");
    if (subjects.empty()) subjects = bank.active();

    // Distinct reachable states over all prompts, in discovery order.
    std::vector<SeqState> states;
    std::set<std::vector<TokenId>> seen;
    for (const auto& p : prompts) {
        for (auto& s : reachable_states(lm, p, L, budget)) {
            if (seen.insert({s.tokens().begin(), s.tokens().end()}).second) states.push_back(std::move(s));
        }
    }
    std::vector<PsiMatrix> psis;
    psis.reserve(states.size());
    for (const auto& s : states) psis.push_back(psi_forward(psi, s));

    for (const auto& name : subjects) {
        const auto scorer = make_scorer(cfg, name, vocab);
        const auto& w = bank.weights(name);
        DeadEndOracle oracle(lm, *scorer, L, budget);
        std::ostringstream out;
        out << "state,action,exact_q,learned_q,abs_err\n";
        double sum = 0.0, worst = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < states.size(); ++i) {
            const auto q = oracle.q(states[i]);
            const auto learned = q_values(psis[i], w);
            const auto pi = lm.next_dist(states[i]);
            const auto text = csv_field(detail::state_text(states[i], vocab));
            for (Eigen::Index a = 0; a < q.size(); ++a) {
                if (pi[a] <= 0.0) continue;
                const double err = std::abs(learned[a] - q[a]);
                sum += err;
                worst = std::max(worst, err);
                ++n;
                out << text << ',' << csv_field(vocab.surface(static_cast<TokenId>(a))) << ',' << format_real(q[a]) << ','
                    << format_real(learned[a]) << ',' << format_real(err) << '\n';
            }
        }
        detail::write_file(ctx.artifact("oracle_" + name + ".csv"), out.str());
        ctx.note("oracle-check: ", name, " pairs=", n, " mean abs err=", format_real(n ? sum / static_cast<double>(n) : 0.0),
                 " max abs err=", format_real(worst));
    }
}

inline void run_stage(Stage st, const RunContext& ctx) {
    std::filesystem::create_directories(ctx.out_dir);
    switch (st) {
        case Stage::kTrainLm: stage_train_lm(ctx); break;
        case Stage::kTrainFeatures: stage_train_features(ctx); break;
        case Stage::kTrainSf: stage_train_sf(ctx); break;
        case Stage::kFitSubject: stage_fit_subject(ctx); break;
        case Stage::kGenerate: stage_generate(ctx); break;
        case Stage::kEvaluate: stage_evaluate(ctx); break;
        case Stage::kOracleCheck: stage_oracle_check(ctx); break;
    }
}

inline void run_pipeline(const RunContext& ctx) {
    for (auto st : kPipeline) run_stage(st, ctx);
}

}  // namespace sfgen
