#pragma once

// Business constraints on price vectors: per-product box bounds, an ordering
// chain with minimum gaps, and one average-price constraint.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/choice_models.hpp"
#include "c3po/error.hpp"

namespace c3po {

enum class AvgSense { AtLeast, AtMost, Equal };

inline std::string sense_name(AvgSense s) {
    switch (s) {
        case AvgSense::AtLeast: return "AtLeast";
        case AvgSense::AtMost: return "AtMost";
        case AvgSense::Equal: return "Equal";
    }
    return "?";
}

inline AvgSense sense_from_name(const std::string &name) {
    for (AvgSense s : {AvgSense::AtLeast, AvgSense::AtMost, AvgSense::Equal}) {
        if (sense_name(s) == name) return s;
    }
    throw Error(ErrorKind::InvalidSpec, "unknown average-price sense '" + name + "'");
}

/// p[perm[k]] >= p[perm[k-1]] + gaps[k-1] for k = 1..K-1 (0-based).
struct Ordering {
    std::vector<std::size_t> perm;
    std::vector<double> gaps;
};

struct AvgPriceConstraint {
    double target = 0.0;
    AvgSense sense = AvgSense::AtLeast;
};

struct PenaltyWeights {
    double box = 1.0;
    double order = 1.0;
    double avg = 1.0;
};

struct ConstraintSet {
    std::vector<double> lower;
    std::vector<double> upper;
    std::optional<Ordering> ordering;
    std::optional<AvgPriceConstraint> avg_price;
    PenaltyWeights weights;

    std::size_t size() const { return lower.size(); }

    static ConstraintSet box_only(std::size_t K, double lo, double hi) {
        ConstraintSet cs;
        cs.lower.assign(K, lo);
        cs.upper.assign(K, hi);
        return cs;
    }
};

inline constexpr double kAvgTolerance = 1e-9;

/// Empty string when feasible, otherwise the reason.
inline std::string infeasibility_reason(const ConstraintSet &cs) {
    const std::size_t K = cs.size();
    if (K == 0) return "empty constraint set";
    if (cs.upper.size() != K) return "lower/upper size mismatch";
    for (std::size_t k = 0; k < K; ++k) {
        if (!(cs.lower[k] <= cs.upper[k])) return "lower > upper at product " + std::to_string(k);
    }
    if (cs.ordering) {
        const auto &o = *cs.ordering;
        if (o.perm.size() != K || o.gaps.size() + 1 != K) return "ordering must have K indices and K-1 gaps";
        std::vector<bool> seen(K, false);
        for (std::size_t i : o.perm) {
            if (i >= K || seen[i]) return "ordering is not a permutation";
            seen[i] = true;
        }
        for (double g : o.gaps) {
            if (!(g >= 0.0)) return "ordering gaps must be >= 0";
        }
        // Smallest chain reachable inside the box.
        double floor = cs.lower[o.perm[0]];
        for (std::size_t k = 1; k < K; ++k) {
            floor = std::max(cs.lower[o.perm[k]], floor + o.gaps[k - 1]);
            if (floor > cs.upper[o.perm[k]]) return "ordering chain does not fit in the box";
        }
    }
    if (cs.avg_price) {
        const double lo = std::accumulate(cs.lower.begin(), cs.lower.end(), 0.0) / static_cast<double>(K);
        const double hi = std::accumulate(cs.upper.begin(), cs.upper.end(), 0.0) / static_cast<double>(K);
        const auto &a = *cs.avg_price;
        if (a.sense != AvgSense::AtMost && a.target > hi) return "average-price floor above the box";
        if (a.sense != AvgSense::AtLeast && a.target < lo) return "average-price cap below the box";
    }
    return {};
}

inline bool is_feasible(const ConstraintSet &cs) { return infeasibility_reason(cs).empty(); }

inline void require_feasible(const ConstraintSet &cs) {
    const auto why = infeasibility_reason(cs);
    if (!why.empty()) throw Error(ErrorKind::Infeasible, "infeasible constraint set: " + why);
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// log(exp(g) - 1), stable for small and large g.
inline double inverse_softplus(double g) {
    if (g > 30.0) return g + std::log1p(-std::exp(-g));
    return std::log(std::expm1(g));
}

inline PriceVector softplus_chain(const std::vector<double> &z, const Ordering &ord) {
    const std::size_t K = z.size();
    if (ord.perm.size() != K || ord.gaps.size() + 1 != K) {
        throw Error(ErrorKind::Shape, "ordering must have K indices and K-1 gaps");
    }
    PriceVector p(K);
    p[ord.perm[0]] = z[0];
    for (std::size_t k = 1; k < K; ++k) {
        const double floor = p[ord.perm[k - 1]] + ord.gaps[k - 1];
        // softplus(z) can vanish against |floor| in rounding; keep the order strict anyway
        p[ord.perm[k]] = std::max(floor + softplus(z[k]), std::nextafter(floor, HUGE_VAL));
    }
    return p;
}

inline constexpr double kMinChainGap = 1e-12;

inline std::vector<double> inverse_softplus_chain(const PriceVector &p, const Ordering &ord) {
    const std::size_t K = p.size();
    if (ord.perm.size() != K || ord.gaps.size() + 1 != K) {
        throw Error(ErrorKind::Shape, "ordering must have K indices and K-1 gaps");
    }
    std::vector<double> z(K);
    z[0] = p[ord.perm[0]];
    for (std::size_t k = 1; k < K; ++k) {
        const double g = p[ord.perm[k]] - p[ord.perm[k - 1]] - ord.gaps[k - 1];
        if (!(g > 0.0)) {
            throw Error(ErrorKind::NotInvertible,
                        "ordering chain violated at position " + std::to_string(k) + " (slack " + std::to_string(g) + ")");
        }
        z[k] = inverse_softplus(std::max(g, kMinChainGap));
    }
    return z;
}

namespace detail {

inline void clamp_box(PriceVector &p, const ConstraintSet &cs) {
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = std::clamp(p[k], cs.lower[k], cs.upper[k]);
}

inline void lift_chain(PriceVector &p, const ConstraintSet &cs) {
    if (!cs.ordering) return;
    const auto &o = *cs.ordering;
    for (std::size_t k = 1; k < p.size(); ++k) {
        const std::size_t cur = o.perm[k];
        const double need = p[o.perm[k - 1]] + o.gaps[k - 1];
        if (p[cur] < need) p[cur] = std::min(need, cs.upper[cur]);
    }
}

// Positive: mean must rise by this much; negative: mean must fall.
inline double avg_shortfall(const PriceVector &p, const AvgPriceConstraint &a) {
    const double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
    switch (a.sense) {
        case AvgSense::AtLeast: return std::max(0.0, a.target - mean);
        case AvgSense::AtMost: return std::min(0.0, a.target - mean);
        case AvgSense::Equal: return a.target - mean;
    }
    return 0.0;
}

// Move every price the same fraction t of its headroom (toward the upper
// bounds to raise the mean, the lower bounds to cut it), re-lift, and
// bisect t. lift_chain is monotone so the mean is monotone in t.
inline void redistribute_average(PriceVector &p, const ConstraintSet &cs) {
    if (!cs.avg_price) return;
    const double shortfall = avg_shortfall(p, *cs.avg_price);
    if (std::abs(shortfall) <= kAvgTolerance) return;
    const bool raise = shortfall > 0.0;
    const PriceVector q = p;
    auto at = [&](double t) {
        PriceVector r(q.size());
        for (std::size_t k = 0; k < q.size(); ++k) {
            const double bound = raise ? cs.upper[k] : cs.lower[k];
            r[k] = t >= 1.0 ? bound : q[k] + t * (bound - q[k]);
        }
        clamp_box(r, cs);
        lift_chain(r, cs);
        return r;
    };
    auto gap = [&](const PriceVector &r) {
        // signed, so overshooting an AtLeast/AtMost target also counts
        const double d = cs.avg_price->target - std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
        return raise ? d : -d;  // > 0 means t is still too small
    };
    double lo = 0.0, hi = 1.0;
    PriceVector best = at(hi);
    if (gap(best) > 0.0) {  // target out of reach; go as far as the box allows
        p = best;
        return;
    }
    for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        PriceVector r = at(mid);
        if (gap(r) > 0.0) {
            lo = mid;
        } else {
            hi = mid;
            best = std::move(r);
        }
        if (-gap(best) <= kAvgTolerance) break;
    }
    p = best;
}

}  // namespace detail

/// Box clamp, ordering lift, then headroom-proportional average repair.
/// The output is a fixed point: a second call returns it unchanged.
inline PriceVector clamp_redistribute(PriceVector p, const ConstraintSet &cs) {
    require_feasible(cs);
    if (p.size() != cs.size()) throw Error(ErrorKind::Shape, "price vector and constraint set differ in size");
    detail::clamp_box(p, cs);
    detail::lift_chain(p, cs);
    detail::redistribute_average(p, cs);
    return p;
}

struct ViolationStats {
    double abs_mean = 0.0;
    double abs_std = 0.0;
    double abs_max = 0.0;
    double pct_mean = 0.0;  // percent of the constraint scale
    double pct_std = 0.0;
    std::size_t count = 0;  // number of constraint evaluations
};

struct ViolationReport {
    ViolationStats box;
    ViolationStats order;
    ViolationStats avg;
};

namespace detail {

struct StatsAccumulator {
    std::vector<double> abs;
    std::vector<double> pct;

    void add(double violation, double scale) {
        abs.push_back(violation);
        pct.push_back(100.0 * violation / (scale > 0.0 ? scale : 1.0));
    }

    ViolationStats finish() const {
        ViolationStats s;
        s.count = abs.size();
        if (abs.empty()) return s;
        auto mean_std = [](const std::vector<double> &v, double &mean, double &sd) {
            mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - mean) * (x - mean);
            sd = std::sqrt(ss / static_cast<double>(v.size()));
        };
        mean_std(abs, s.abs_mean, s.abs_std);
        mean_std(pct, s.pct_mean, s.pct_std);
        s.abs_max = *std::max_element(abs.begin(), abs.end());
        return s;
    }
};

inline double box_violation(double p, double lo, double hi) { return std::max(0.0, lo - p) + std::max(0.0, p - hi); }

}  // namespace detail

inline ViolationReport violation_report(const std::vector<PriceVector> &batch, const ConstraintSet &cs) {
    if (batch.empty()) throw Error(ErrorKind::EmptyInput, "violation report needs at least one price vector");
    detail::StatsAccumulator box, order, avg;
    for (const auto &p : batch) {
        if (p.size() != cs.size()) throw Error(ErrorKind::Shape, "price vector and constraint set differ in size");
        for (std::size_t k = 0; k < p.size(); ++k) {
            box.add(detail::box_violation(p[k], cs.lower[k], cs.upper[k]), cs.upper[k] - cs.lower[k]);
        }
        if (cs.ordering) {
            const auto &o = *cs.ordering;
            for (std::size_t k = 1; k < p.size(); ++k) {
                const double v = std::max(0.0, p[o.perm[k - 1]] + o.gaps[k - 1] - p[o.perm[k]]);
                order.add(v, o.gaps[k - 1] + 1.0);
            }
        }
        if (cs.avg_price) {
            avg.add(std::abs(detail::avg_shortfall(p, *cs.avg_price)), std::abs(cs.avg_price->target));
        }
    }
    return {box.finish(), order.finish(), avg.finish()};
}

/// Total violation summed over every constraint of one vector.
inline double total_violation(const PriceVector &p, const ConstraintSet &cs) {
    const auto r = violation_report({p}, cs);
    return r.box.abs_mean * static_cast<double>(r.box.count) + r.order.abs_mean * static_cast<double>(r.order.count) +
           r.avg.abs_mean * static_cast<double>(r.avg.count);
}

inline double soft_penalty(const PriceVector &p, const ConstraintSet &cs) {
    double box = 0.0, order = 0.0, avg = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) box += detail::box_violation(p[k], cs.lower[k], cs.upper[k]);
    if (cs.ordering) {
        const auto &o = *cs.ordering;
        for (std::size_t k = 1; k < p.size(); ++k) {
            order += std::max(0.0, p[o.perm[k - 1]] + o.gaps[k - 1] - p[o.perm[k]]);
        }
    }
    if (cs.avg_price) avg = std::abs(detail::avg_shortfall(p, *cs.avg_price));
    return cs.weights.box * box + cs.weights.order * order + cs.weights.avg * avg;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ConstraintSet &cs) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["box"] = {{"lower", cs.lower}, {"upper", cs.upper}};
    if (cs.ordering) j["ordering"] = {{"perm", cs.ordering->perm}, {"gaps", cs.ordering->gaps}};
    if (cs.avg_price) j["avg_price"] = {{"target", cs.avg_price->target}, {"sense", sense_name(cs.avg_price->sense)}};
    j["weights"] = {{"box", cs.weights.box}, {"order", cs.weights.order}, {"avg", cs.weights.avg}};
    return j;
}

inline ConstraintSet constraints_from_json(const nlohmann::json &j) {
    if (j.value("schema_version", 1) != 1) throw Error(ErrorKind::SchemaVersion, "unsupported ConstraintSet schema_version");
    try {
        ConstraintSet cs;
        cs.lower = j.at("box").at("lower").get<std::vector<double>>();
        cs.upper = j.at("box").at("upper").get<std::vector<double>>();
        if (j.contains("ordering")) {
            cs.ordering = Ordering{j["ordering"].at("perm").get<std::vector<std::size_t>>(),
                                   j["ordering"].at("gaps").get<std::vector<double>>()};
        }
        if (j.contains("avg_price")) {
            cs.avg_price = AvgPriceConstraint{j["avg_price"].at("target").get<double>(),
                                              sense_from_name(j["avg_price"].at("sense").get<std::string>())};
        }
        if (j.contains("weights")) {
            cs.weights.box = j["weights"].value("box", 1.0);
            cs.weights.order = j["weights"].value("order", 1.0);
            cs.weights.avg = j["weights"].value("avg", 1.0);
        }
        return cs;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::InvalidSpec, std::string("malformed ConstraintSet JSON: ") + e.what());
    }
}

inline nlohmann::json stats_json(const ViolationStats &s) {
    return {{"abs_mean", s.abs_mean}, {"abs_std", s.abs_std}, {"abs_max", s.abs_max},
            {"pct_mean", s.pct_mean}, {"pct_std", s.pct_std}, {"count", s.count}};
}

inline nlohmann::json to_json(const ViolationReport &r) {
    return {{"Box", stats_json(r.box)}, {"Order", stats_json(r.order)}, {"AvgPrc", stats_json(r.avg)}};
}

}  // namespace c3po
