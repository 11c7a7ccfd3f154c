#pragma once

// Generation metrics and the metrics CSV.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "sfgen/errors.hpp"

namespace sfgen {

/// Distinct n-grams over total n-grams across a group of texts. Texts
/// shorter than n contribute nothing; a group with no n-grams scores 0.
template <typename Token>
double dist_n(const std::vector<std::vector<Token>>& texts, std::size_t n) {
    if (n < 1) throw ConfigError("dist-n needs n >= 1");
    std::set<std::vector<Token>> distinct;
    std::size_t total = 0;
    for (const auto& t : texts) {
        if (t.size() < n) continue;
        for (std::size_t i = 0; i + n <= t.size(); ++i) {
            distinct.emplace(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n));
            ++total;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(distinct.size()) / static_cast<double>(total);
}

struct MeanStd {
    double mean = 0.0;
    double stdev = 0.0;  // population convention
};

inline MeanStd mean_std(const std::vector<double>& xs) {
    if (xs.empty()) throw InputError("mean of an empty list");
    MeanStd r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.stdev = std::sqrt(ss / static_cast<double>(xs.size()));
    return r;
}

/// Mean over prompts of the maximum score among that prompt's
/// generations, with the spread of those maxima across prompts.
inline MeanStd expected_max_attribute(const std::vector<std::vector<double>>& scores) {
    if (scores.empty()) throw InputError("expected-max needs at least one prompt");
    std::vector<double> maxima;
    for (const auto& group : scores) {
        if (group.empty()) throw InputError("expected-max: a prompt has no generations");
        if (group.size() != scores.front().size()) throw InputError("expected-max: prompts differ in generation count");
        maxima.push_back(*std::max_element(group.begin(), group.end()));
    }
    return mean_std(maxima);
}

struct MetricsRow {
    std::string prompt_id;
    std::string subject;
    double exp_max = 0.0;
    double mean_score = 0.0;
    double dist2 = 0.0;
    double dist3 = 0.0;
    double ppl = 1.0;
    double undesired_rate = 0.0;
    std::size_t n_gen = 0;

    void validate() const {
        auto unit = [&](double v, const char* what) {
            if (!(v >= 0.0 && v <= 1.0)) throw ContractViolation(std::string("metrics row: ") + what + " outside [0, 1]");
        };
        unit(exp_max, "exp_max");
        unit(mean_score, "mean_score");
        unit(dist2, "dist2");
        unit(dist3, "dist3");
        unit(undesired_rate, "undesired_rate");
        if (!(ppl >= 1.0 - 1e-12)) throw ContractViolation("metrics row: ppl below 1");
        if (n_gen == 0) throw ContractViolation("metrics row: n_gen is zero");
    }
};

inline constexpr const char* kMetricsHeader = "prompt_id,subject,exp_max,mean_score,dist2,dist3,ppl,undesired_rate,n_gen";

/// Fixed-precision rendering so reruns are byte-identical.
inline std::string format_real(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

/// RFC 4180 quoting when the field needs it.
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) {
        r.validate();
        os << csv_field(r.prompt_id) << ',' << csv_field(r.subject) << ',' << format_real(r.exp_max) << ','
           << format_real(r.mean_score) << ',' << format_real(r.dist2) << ',' << format_real(r.dist3) << ','
           << format_real(r.ppl) << ',' << format_real(r.undesired_rate) << ',' << r.n_gen << '\n';
    }
}

}  // namespace sfgen
