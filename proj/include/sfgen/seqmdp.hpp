#pragma once

// Deterministic sequence MDP: vocabulary, tokenization, prefix states and the
// append transition. A state is the token prefix itself, so s' = s + a and
// the transition kernel is a unit mass.

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sfgen/errors.hpp"

namespace sfgen {

using TokenId = std::int32_t;

enum class TokenizeMode { kWhitespace, kChar };

inline TokenizeMode parse_tokenize_mode(std::string_view s) {
    if (s == "whitespace") return TokenizeMode::kWhitespace;
    if (s == "char") return TokenizeMode::kChar;
    throw ConfigError("unknown tokenize mode '" + std::string(s) + "'");
}

/// Splits a line into surface tokens. Char mode yields one token per UTF-8
/// code point (carriage returns and newlines dropped); invalid lead bytes are
/// passed through as single-byte tokens.
inline std::vector<std::string> split_surfaces(std::string_view line, TokenizeMode mode) {
    std::vector<std::string> out;
    if (mode == TokenizeMode::kWhitespace) {
        std::size_t i = 0;
        while (i < line.size()) {
            while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
            std::size_t j = i;
            while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
            if (j > i) out.emplace_back(line.substr(i, j - i));
            i = j;
        }
        return out;
    }
    std::size_t i = 0;
    while (i < line.size()) {
        const auto lead = static_cast<unsigned char>(line[i]);
        std::size_t len = 1;
        if ((lead & 0xE0) == 0xC0) len = 2;
        else if ((lead & 0xF0) == 0xE0) len = 3;
        else if ((lead & 0xF8) == 0xF0) len = 4;
        if (i + len > line.size()) len = 1;
        if (lead != '\n' && lead != '\r') out.emplace_back(line.substr(i, len));
        i += len;
    }
    return out;
}

class Vocab {
public:
    static constexpr TokenId kBos = 0;
    static constexpr TokenId kEos = 1;
    static constexpr TokenId kUnk = 2;
    static constexpr std::string_view kBosSurface = "<s>";
    static constexpr std::string_view kEosSurface = "</s>";
    static constexpr std::string_view kUnkSurface = "<unk>";

    Vocab() {
        add(std::string(kBosSurface));
        add(std::string(kEosSurface));
        add(std::string(kUnkSurface));
    }

    /// Rebuilds a vocabulary from surfaces in id order; ids 0..2 must be the
    /// reserved surfaces.
    static Vocab from_surfaces(const std::vector<std::string>& surfaces) {
        if (surfaces.size() < 3 || surfaces[0] != kBosSurface || surfaces[1] != kEosSurface ||
            surfaces[2] != kUnkSurface) {
            throw InputError("vocab must start with the reserved tokens <s>, </s>, <unk>");
        }
        Vocab v;
        for (std::size_t i = 3; i < surfaces.size(); ++i) {
            if (v.find(surfaces[i])) throw InputError("duplicate vocab surface '" + surfaces[i] + "'");
            v.add(surfaces[i]);
        }
        return v;
    }

    std::size_t size() const { return surfaces_.size(); }
    bool contains(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < size(); }

    std::optional<TokenId> find(std::string_view surface) const {
        auto it = index_.find(std::string(surface));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    /// Content-token lookup; anything unseen (including the reserved
    /// surfaces spelled out in text) maps to UNK.
    TokenId id(std::string_view surface) const {
        auto found = find(surface);
        if (!found || *found == kBos || *found == kEos) return kUnk;
        return *found;
    }

    const std::string& surface(TokenId id) const {
        if (!contains(id)) throw InputError("token id " + std::to_string(id) + " out of range");
        return surfaces_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& surfaces() const { return surfaces_; }

    TokenId add(std::string surface) {
        if (auto found = find(surface)) return *found;
        const auto id = static_cast<TokenId>(surfaces_.size());
        index_.emplace(surface, id);
        surfaces_.push_back(std::move(surface));
        return id;
    }

    bool operator==(const Vocab& other) const { return surfaces_ == other.surfaces_; }

    /// `<id>\t<surface>` per line, ids ascending.
    void write(std::ostream& os) const {
        for (std::size_t i = 0; i < surfaces_.size(); ++i) os << i << '\t' << surfaces_[i] << '\n';
    }

    static Vocab read(std::istream& is) {
        std::vector<std::string> surfaces;
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw InputError("vocab line without tab: " + line);
            const auto id = std::stoull(line.substr(0, tab));
            if (id != surfaces.size()) throw InputError("vocab ids must be dense and ascending");
            surfaces.push_back(line.substr(tab + 1));
        }
        return from_surfaces(surfaces);
    }

private:
    std::vector<std::string> surfaces_;
    std::unordered_map<std::string, TokenId> index_;
};

/// Assigns ids in order of first occurrence to every surface whose corpus
/// frequency reaches `min_count`.
inline Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t min_count) {
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> order;
    for (const auto& doc : corpus) {
        for (const auto& tok : doc) {
            auto [it, inserted] = counts.try_emplace(tok, 0);
            if (inserted) order.push_back(tok);
            ++it->second;
        }
    }
    if (order.empty()) throw InputError("cannot build a vocabulary from an empty corpus");
    Vocab vocab;
    for (const auto& tok : order) {
        if (tok == Vocab::kBosSurface || tok == Vocab::kEosSurface || tok == Vocab::kUnkSurface) continue;
        if (counts[tok] >= min_count) vocab.add(tok);
    }
    return vocab;
}

inline std::vector<TokenId> tokenize(std::string_view line, TokenizeMode mode, const Vocab& vocab) {
    std::vector<TokenId> ids;
    for (const auto& s : split_surfaces(line, mode)) ids.push_back(vocab.id(s));
    return ids;
}

inline std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab, TokenizeMode mode) {
    std::string out;
    for (auto id : ids) {
        if (mode == TokenizeMode::kWhitespace && !out.empty()) out += ' ';
        out += vocab.surface(id);
    }
    return out;
}

/// An immutable token prefix. `terminal` is fixed at construction by the
/// step rule (EOS or length cap).
class SeqState {
public:
    SeqState() = default;
    SeqState(std::vector<TokenId> tokens, bool terminal) : tokens_(std::move(tokens)), terminal_(terminal) {}

    /// BOS followed by `body`; never terminal.
    static SeqState prompt(std::span<const TokenId> body = {}) {
        std::vector<TokenId> t;
        t.reserve(body.size() + 1);
        t.push_back(Vocab::kBos);
        t.insert(t.end(), body.begin(), body.end());
        return SeqState(std::move(t), false);
    }

    /// Applies the terminal rule to an arbitrary token sequence.
    static SeqState with_cap(std::vector<TokenId> tokens, std::size_t max_len) {
        const bool term = (!tokens.empty() && tokens.back() == Vocab::kEos) || tokens.size() >= max_len;
        return SeqState(std::move(tokens), term);
    }

    std::span<const TokenId> tokens() const { return tokens_; }
    std::size_t length() const { return tokens_.size(); }
    bool terminal() const { return terminal_; }
    bool empty() const { return tokens_.empty(); }
    TokenId back() const { return tokens_.back(); }

    bool operator==(const SeqState&) const = default;

private:
    std::vector<TokenId> tokens_;
    bool terminal_ = false;
};

inline SeqState step(const SeqState& state, TokenId action, std::size_t max_len, std::size_t vocab_size) {
    if (state.terminal()) throw ContractViolation("step from a terminal state");
    if (action < 0 || static_cast<std::size_t>(action) >= vocab_size) {
        throw InputError("invalid token id " + std::to_string(action));
    }
    if (state.length() >= max_len) throw ContractViolation("state already at the length cap");
    std::vector<TokenId> next(state.tokens().begin(), state.tokens().end());
    next.push_back(action);
    const bool term = action == Vocab::kEos || next.size() == max_len;
    return SeqState(std::move(next), term);
}

/// States s_0..s_T with actions a_0..a_{T-1}; s_T is terminal.
struct Trajectory {
    std::vector<SeqState> states;
    std::vector<TokenId> actions;
    /// Per-subject terminal labels in {-1, 0}, once scored.
    std::optional<std::vector<int>> labels;
    /// Index of the first pair whose continuation follows the base policy.
    /// Pairs before it belong to an exploratory roll-in.
    std::size_t on_policy_from = 0;
    /// Steps where no cap-respecting distribution existed.
    std::size_t fallback_steps = 0;

    const SeqState& terminal_state() const { return states.back(); }
    std::span<const TokenId> continuation() const {
        return states.back().tokens().subspan(states.front().length());
    }
};

/// Checks the structural invariants and that replaying the actions through
/// `step` reproduces the stored states.
inline void validate_trajectory(const Trajectory& traj, std::size_t max_len, std::size_t vocab_size) {
    if (traj.states.empty() || traj.states.size() != traj.actions.size() + 1) {
        throw InputError("trajectory must hold one more state than actions");
    }
    if (!traj.states.back().terminal()) throw InputError("trajectory does not end in a terminal state");
    for (std::size_t t = 0; t < traj.actions.size(); ++t) {
        if (traj.states[t].terminal()) throw InputError("terminal state inside a trajectory");
        if (!(step(traj.states[t], traj.actions[t], max_len, vocab_size) == traj.states[t + 1])) {
            throw InputError("trajectory states do not follow the step rule");
        }
    }
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

}  // namespace sfgen
