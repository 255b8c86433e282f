#pragma once

// Model-free evaluation of a pricing policy against observed wins and losses.
//
//   PIR = #{wins:   rec > actual} / #wins
//   PDR = #{losses: rec < actual} / #losses
//   BR  = sum_{wins, rec < actual} (actual - rec) / sum_{wins} actual
//   MAE = mean |rec - label|   (|rec - actual| when no labels are present)
//
// Comparisons use the primary (first) product unless per-product mode is on.
// Empty denominators yield an undefined value, never zero.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/choice_models.hpp"
#include "c3po/constraints.hpp"
#include "c3po/error.hpp"

namespace c3po {

struct EvalRecord {
    PriceVector actual_price;
    PriceVector recommended_price;
    std::optional<PriceVector> label;
    bool won = false;
    double actual_revenue = 0.0;
};

struct MetricsOptions {
    bool per_product = false;
    bool extended_br = false;  // experimental: also charges avoidable losses
};

struct MetricsReport {
    std::optional<double> pdr;
    std::optional<double> pir;
    std::optional<double> br;
    double mae = 0.0;
    std::optional<double> kpi;
    std::size_t n_wins = 0;
    std::size_t n_losses = 0;
    bool extended_br = false;
};

inline constexpr double kStrongRecallThreshold = 0.55;

inline bool is_strong(const MetricsReport &r) {
    return r.pdr && r.pir && *r.pdr > kStrongRecallThreshold && *r.pir > kStrongRecallThreshold;
}

inline MetricsReport compute_metrics(const std::vector<EvalRecord> &records, const MetricsOptions &opt = {}) {
    if (records.empty()) throw Error(ErrorKind::EmptyInput, "compute_metrics needs at least one record");

    std::size_t win_cmp = 0, win_up = 0, loss_cmp = 0, loss_down = 0;
    double missed = 0.0, won_revenue = 0.0, avoidable = 0.0;
    double abs_err = 0.0;
    std::size_t n_err = 0;
    MetricsReport rep;
    rep.extended_br = opt.extended_br;

    for (const auto &r : records) {
        if (r.actual_price.empty() || r.actual_price.size() != r.recommended_price.size()) {
            throw Error(ErrorKind::Shape, "actual and recommended prices must be non-empty and equally sized");
        }
        const PriceVector &ref = r.label ? *r.label : r.actual_price;
        for (std::size_t k = 0; k < r.recommended_price.size(); ++k) {
            abs_err += std::abs(r.recommended_price[k] - ref[k]);
            ++n_err;
        }
        (r.won ? rep.n_wins : rep.n_losses) += 1;

        const std::size_t n_cmp = opt.per_product ? r.actual_price.size() : 1;
        for (std::size_t k = 0; k < n_cmp; ++k) {
            const double a = r.actual_price[k];
            const double rec = r.recommended_price[k];
            if (r.won) {
                ++win_cmp;
                if (rec > a) ++win_up;
                if (rec < a) missed += a - rec;
                won_revenue += a;
            } else {
                ++loss_cmp;
                if (rec < a) ++loss_down;
                if (rec >= a) avoidable += r.actual_revenue;
            }
        }
    }

    rep.mae = abs_err / static_cast<double>(n_err);
    if (win_cmp > 0) rep.pir = static_cast<double>(win_up) / static_cast<double>(win_cmp);
    if (loss_cmp > 0) rep.pdr = static_cast<double>(loss_down) / static_cast<double>(loss_cmp);
    if (won_revenue > 0.0) rep.br = (missed + (opt.extended_br ? avoidable : 0.0)) / won_revenue;
    if (rep.pdr && rep.pir) rep.kpi = std::min(*rep.pdr, *rep.pir);
    return rep;
}

/// Mean purchase probability (1 - q_outside) at the recommended prices.
inline double estimated_win_rate(const std::vector<PriceVector> &prices, const std::vector<ChoiceModelSpec> &specs) {
    if (prices.empty()) throw Error(ErrorKind::EmptyInput, "estimated_win_rate needs at least one price vector");
    if (specs.size() != 1 && specs.size() != prices.size()) {
        throw Error(ErrorKind::Shape, "need one spec or one spec per price vector");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < prices.size(); ++i) {
        s += 1.0 - choice_probs(specs.size() == 1 ? specs[0] : specs[i], prices[i]).outside;
    }
    return s / static_cast<double>(prices.size());
}

inline double estimated_win_rate(const std::vector<PriceVector> &prices, const ChoiceModelSpec &spec) {
    return estimated_win_rate(prices, std::vector<ChoiceModelSpec>{spec});
}

namespace detail {

inline nlohmann::json optional_json(const std::optional<double> &v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::string fmt_fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string fmt_optional(const std::optional<double> &v, int digits) {
    return v ? fmt_fixed(*v, digits) : std::string("n/a");
}

}  // namespace detail

inline nlohmann::json to_json(const MetricsReport &r) {
    nlohmann::json j = {{"pdr", detail::optional_json(r.pdr)},
                        {"pir", detail::optional_json(r.pir)},
                        {"br", detail::optional_json(r.br)},
                        {"mae", r.mae},
                        {"kpi", detail::optional_json(r.kpi)},
                        {"n_wins", r.n_wins},
                        {"n_losses", r.n_losses},
                        {"strong", is_strong(r)}};
    nlohmann::json undefined = nlohmann::json::array();
    if (!r.pdr) undefined.push_back("pdr");
    if (!r.pir) undefined.push_back("pir");
    if (!r.br) undefined.push_back("br");
    j["undefined"] = undefined;
    j["meta"] = {{"br_definition", r.extended_br ? "normalized missed upsell + avoidable losses (experimental)"
                                                 : "normalized missed upsell (stand-in definition)"}};
    return j;
}

struct MetricsRow {
    std::string name;
    MetricsReport report;
};

/// Plain-text table with columns MAE, PDR, PIR, BR.
inline std::string metrics_table(const std::vector<MetricsRow> &rows) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s\n", "Data set", "MAE", "PDR", "PIR", "BR");
    os << line;
    for (const auto &row : rows) {
        std::snprintf(line, sizeof line, "%-16s %8s %8s %8s %8s\n", row.name.c_str(),
                      detail::fmt_fixed(row.report.mae, 4).c_str(), detail::fmt_optional(row.report.pdr, 2).c_str(),
                      detail::fmt_optional(row.report.pir, 2).c_str(), detail::fmt_optional(row.report.br, 2).c_str());
        os << line;
    }
    return os.str();
}

/// Constraint-violation table: Abs Mean +- Std, Abs Max, % Mean +- Std.
inline std::string violation_table(const ViolationReport &r) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof line, "%-8s %-20s %-10s %-20s\n", "Type", "Abs Mean ± Std", "Abs Max", "% Mean ± Std");
    os << line;
    auto emit = [&](const char *name, const ViolationStats &s) {
        const std::string abs = detail::fmt_fixed(s.abs_mean, 2) + " ± " + detail::fmt_fixed(s.abs_std, 2);
        const std::string pct = detail::fmt_fixed(s.pct_mean, 1) + " ± " + detail::fmt_fixed(s.pct_std, 1) + "%";
        std::snprintf(line, sizeof line, "%-8s %-20s %-10s %-20s\n", name, abs.c_str(),
                      detail::fmt_fixed(s.abs_max, 2).c_str(), pct.c_str());
        os << line;
    };
    emit("Box", r.box);
    emit("Order", r.order);
    emit("AvgPrc", r.avg);
    return os.str();
}

}  // namespace c3po
