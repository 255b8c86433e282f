#pragma once

// Revenue-maximising price labels and optimality diagnostics.
//
// Logit families use the aggregate-revenue fixed point: every candidate price
// is p_k = R + 1/beta_k for a scalar R, and R is iterated to R = ER(R). This
// is exact for MNL and a heuristic for nested logit. Other families fall back
// to a bounded multi-start Nelder-Mead search.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/choice_models.hpp"
#include "c3po/error.hpp"
#include "c3po/nelder_mead.hpp"
#include "c3po/rng.hpp"

namespace c3po {

enum class SolveMethod { FixedPoint, Bisection, NelderMead };

inline std::string method_name(SolveMethod m) {
    switch (m) {
        case SolveMethod::FixedPoint: return "fixed_point";
        case SolveMethod::Bisection: return "bisection";
        case SolveMethod::NelderMead: return "nelder_mead";
    }
    return "?";
}

inline SolveMethod method_from_name(const std::string &name) {
    for (SolveMethod m : {SolveMethod::FixedPoint, SolveMethod::Bisection, SolveMethod::NelderMead}) {
        if (method_name(m) == name) return m;
    }
    throw Error(ErrorKind::InvalidSpec, "unknown solve method '" + name + "'");
}

struct PriceLabel {
    PriceVector price;
    double revenue = 0.0;
    std::vector<double> q_in;
    double q_out = 0.0;
    SolveMethod method = SolveMethod::FixedPoint;
};

using CostVector = std::vector<double>;

struct Box {
    std::vector<double> lower;
    std::vector<double> upper;

    static Box uniform(std::size_t K, double lo, double hi) {
        return {std::vector<double>(K, lo), std::vector<double>(K, hi)};
    }
};

struct FixedPointOptions {
    double tol = 1e-10;
    int maxit = 10000;
    double damping = 0.5;
};

inline PriceLabel make_label(const ChoiceModelSpec &spec, PriceVector p, SolveMethod method) {
    auto q = choice_probs(spec, p);
    PriceLabel label;
    label.revenue = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) label.revenue += p[k] * q.inside[k];
    label.price = std::move(p);
    label.q_in = std::move(q.inside);
    label.q_out = q.outside;
    label.method = method;
    return label;
}

inline PriceLabel solve_logit_fixed_point(const ChoiceModelSpec &spec, const FixedPointOptions &opt = {}) {
    if (spec.family != Family::MNL && spec.family != Family::NestedLogit) {
        throw Error(ErrorKind::UnsupportedFamily,
                    "fixed-point pricing supports MNL and NestedLogit, not " + family_name(spec.family));
    }
    validate(spec);
    const std::size_t K = spec.K;

    auto prices_at = [&](double R) {
        PriceVector p(K);
        for (std::size_t k = 0; k < K; ++k) p[k] = R + 1.0 / spec.beta_at(k);
        return p;
    };
    auto revenue_at = [&](double R) { return expected_revenue(spec, prices_at(R)); };

    double mean_inv_beta = 0.0;
    for (std::size_t k = 0; k < K; ++k) mean_inv_beta += 1.0 / spec.beta_at(k);
    double R = std::max(1e-6, mean_inv_beta / static_cast<double>(K));

    bool converged = false;
    for (int it = 0; it < opt.maxit; ++it) {
        const double next = (1.0 - opt.damping) * R + opt.damping * revenue_at(R);
        if (std::abs(next - R) <= opt.tol * std::max(1.0, std::abs(R))) {
            R = next;
            converged = true;
            break;
        }
        R = next;
    }

    SolveMethod method = SolveMethod::FixedPoint;
    if (!converged) {
        method = SolveMethod::Bisection;
        auto F = [&](double x) { return revenue_at(x) - x; };
        double a = 0.0;
        double b = std::max(10.0, R * 4.0 + 10.0);
        double fa = F(a);
        double fb = F(b);
        for (int tries = 0; fa * fb > 0 && tries < 60; ++tries) {
            b = b * 2.0 + 10.0;
            fb = F(b);
        }
        if (fa * fb > 0) throw Error(ErrorKind::FailedToBracket, "failed to bracket R* in the logit fixed point");
        for (int it = 0; it < 200; ++it) {
            const double mid = 0.5 * (a + b);
            const double fm = F(mid);
            if (std::abs(fm) < 1e-12 || std::abs(b - a) < 1e-12) {
                R = mid;
                break;
            }
            if (fa * fm < 0) {
                b = mid;
                fb = fm;
            } else {
                a = mid;
                fa = fm;
            }
        }
    }
    return make_label(spec, prices_at(R), method);
}

inline void check_bounds(const ChoiceModelSpec &spec, const Box &bounds) {
    if (bounds.lower.size() != spec.K || bounds.upper.size() != spec.K) {
        throw Error(ErrorKind::InvalidBounds, "bounds must have K entries");
    }
    for (std::size_t k = 0; k < spec.K; ++k) {
        if (!std::isfinite(bounds.lower[k]) || !std::isfinite(bounds.upper[k])) {
            throw Error(ErrorKind::InvalidBounds, "bounds must be finite");
        }
        if (bounds.lower[k] > bounds.upper[k]) {
            throw Error(ErrorKind::InvalidBounds, "lower bound exceeds upper bound at product " + std::to_string(k));
        }
        if (spec.family == Family::IsoElastic && bounds.lower[k] <= 0.0) {
            throw Error(ErrorKind::InvalidBounds, "iso-elastic search needs strictly positive lower bounds");
        }
    }
}

struct NonlinearOptions {
    int n_starts = 8;
    std::uint64_t seed = 0x5eed;
    NelderMeadOptions nm;
};

/// Bounded multi-start Nelder-Mead maximisation of expected revenue. The
/// first start is the box center; `start`, when given, is the second.
inline PriceLabel solve_nonlinear(const ChoiceModelSpec &spec, const Box &bounds,
                                  const std::optional<PriceVector> &start = std::nullopt,
                                  const NonlinearOptions &opt = {}) {
    validate(spec);
    check_bounds(spec, bounds);
    const std::size_t K = spec.K;

    auto clip = [&](PriceVector p) {
        for (std::size_t k = 0; k < K; ++k) p[k] = std::clamp(p[k], bounds.lower[k], bounds.upper[k]);
        return p;
    };
    auto objective = [&](const std::vector<double> &x) { return -expected_revenue(spec, clip(x)); };

    std::vector<PriceVector> starts;
    PriceVector center(K);
    for (std::size_t k = 0; k < K; ++k) center[k] = 0.5 * (bounds.lower[k] + bounds.upper[k]);
    starts.push_back(center);
    if (start) {
        if (start->size() != K) throw Error(ErrorKind::InvalidBounds, "start point must have K entries");
        starts.push_back(clip(*start));
    }
    Rng rng(opt.seed);
    while (starts.size() < static_cast<std::size_t>(std::max(opt.n_starts, 1))) {
        PriceVector s(K);
        for (std::size_t k = 0; k < K; ++k) s[k] = uniform(rng, bounds.lower[k], bounds.upper[k]);
        starts.push_back(std::move(s));
    }

    std::vector<double> step(K);
    for (std::size_t k = 0; k < K; ++k) step[k] = std::max(0.1 * (bounds.upper[k] - bounds.lower[k]), 1e-6);

    PriceVector best = starts.front();
    double best_rev = -objective(best);
    auto consider = [&](const PriceVector &p) {
        const double r = expected_revenue(spec, p);
        if (r > best_rev) {
            best_rev = r;
            best = p;
        }
    };
    for (const auto &s : starts) {
        consider(s);
        const auto res = nelder_mead(objective, s, step, opt.nm);
        consider(clip(res.x));
    }
    // Simplex search stalls near kinks (iso-elastic saturation); finish with
    // a coordinate pattern search on shrinking steps.
    for (double h = 1e-2; h >= 1e-9; h *= 0.1) {
        for (bool moved = true; moved;) {
            moved = false;
            for (std::size_t k = 0; k < K; ++k) {
                for (double d : {-h, h}) {
                    PriceVector p = best;
                    p[k] = std::clamp(p[k] + d, bounds.lower[k], bounds.upper[k]);
                    const double before = best_rev;
                    consider(p);
                    moved = moved || best_rev > before;
                }
            }
        }
    }
    return make_label(spec, best, SolveMethod::NelderMead);
}

/// Gradient of expected profit: q_k + sum_j (p_j - c_j) dq_j/dp_k.
inline std::vector<double> foc_residual(const ChoiceModelSpec &spec, const PriceVector &p, const CostVector &c = {}) {
    const std::size_t K = spec.K;
    const CostVector cost = c.empty() ? CostVector(K, 0.0) : c;
    const auto mode = spec.family == Family::MNL ? ElasticityMode::Analytic : ElasticityMode::FiniteDifference;
    const auto J = demand_jacobian(spec, p, mode);
    const auto q = choice_probs(spec, p).inside;
    std::vector<double> r(K);
    for (std::size_t k = 0; k < K; ++k) {
        r[k] = q[k];
        for (std::size_t j = 0; j < K; ++j) r[k] += (p[j] - cost[j]) * J[j][k];
    }
    return r;
}

inline double max_abs(const std::vector<double> &v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

enum class LernerForm { Auto, MnlMarkup, General };

/// MnlMarkup: p_k - 1/(beta_k (1 - q_k)).
/// General:   E_kk + p_k / (p_k - c_k).
/// Auto picks MnlMarkup for zero-cost MNL and General otherwise.
inline std::vector<double> lerner_gap(const ChoiceModelSpec &spec, const PriceVector &p, const CostVector &c = {},
                                      LernerForm form = LernerForm::Auto) {
    const std::size_t K = spec.K;
    const CostVector cost = c.empty() ? CostVector(K, 0.0) : c;
    if (form == LernerForm::Auto) {
        const bool zero_cost = std::all_of(cost.begin(), cost.end(), [](double x) { return x == 0.0; });
        form = (spec.family == Family::MNL && zero_cost) ? LernerForm::MnlMarkup : LernerForm::General;
    }
    std::vector<double> gap(K);
    if (form == LernerForm::MnlMarkup) {
        if (spec.family != Family::MNL) throw Error(ErrorKind::UnsupportedFamily, "markup form requires MNL");
        const auto q = choice_probs(spec, p).inside;
        for (std::size_t k = 0; k < K; ++k) gap[k] = p[k] - 1.0 / (spec.beta_at(k) * (1.0 - q[k]));
        return gap;
    }
    const auto E = elasticity_matrix(spec, p,
                                     spec.family == Family::MNL ? ElasticityMode::Analytic
                                                                : ElasticityMode::FiniteDifference)
                       .E;
    for (std::size_t k = 0; k < K; ++k) {
        if (p[k] == cost[k]) throw Error(ErrorKind::DivisionByZero, "price equals cost at product " + std::to_string(k));
        gap[k] = E[k][k] + p[k] / (p[k] - cost[k]);
    }
    return gap;
}

/// p_k - 1/beta_k - R with R = sum_j p_j q_j; zero at any zero-cost MNL optimum.
inline std::vector<double> revenue_markup_gap(const ChoiceModelSpec &spec, const PriceVector &p) {
    if (spec.family != Family::MNL) throw Error(ErrorKind::UnsupportedFamily, "markup gap requires MNL");
    const double R = expected_revenue(spec, p);
    std::vector<double> gap(spec.K);
    for (std::size_t k = 0; k < spec.K; ++k) gap[k] = p[k] - 1.0 / spec.beta_at(k) - R;
    return gap;
}

/// s_k = (p_k - c_k) q_k / R.
inline std::vector<double> profit_weighted_shares(const ChoiceModelSpec &spec, const PriceVector &p,
                                                  const CostVector &c = {}) {
    const std::size_t K = spec.K;
    const CostVector cost = c.empty() ? CostVector(K, 0.0) : c;
    const auto q = choice_probs(spec, p).inside;
    double R = 0.0;
    for (std::size_t k = 0; k < K; ++k) R += p[k] * q[k];
    if (R == 0.0) throw Error(ErrorKind::DivisionByZero, "zero revenue");
    std::vector<double> s(K);
    for (std::size_t k = 0; k < K; ++k) s[k] = (p[k] - cost[k]) * q[k] / R;
    return s;
}

struct LabelOptions {
    double lower = 0.0;
    double upper = 5.0;
    double iso_lower = 0.01;
    double nl_refine_threshold = 1e-4;
    NonlinearOptions nonlinear;
};


namespace detail {

// Per-product optima that ignore the coupling through the outside share:
// a/(2b) for linear demand, the saturation kink a^(-1/e) for iso-elastic.
// Demand is flat zero over much of the box for these families, so a start
// inside the active region matters.
inline std::optional<PriceVector> warm_start(const ChoiceModelSpec &spec) {
    PriceVector p(spec.K);
    switch (spec.family) {
        case Family::Linear:
            for (std::size_t k = 0; k < spec.K; ++k) p[k] = spec.lin_a[k] / (2.0 * spec.lin_b[k]);
            return p;
        case Family::IsoElastic:
            for (std::size_t k = 0; k < spec.K; ++k) p[k] = std::pow(spec.iso_a[k], -1.0 / spec.iso_e[k]);
            return p;
        default:
            return std::nullopt;
    }
}

}  // namespace detail

/// Picks the solver that suits the family and returns the best label found.
inline PriceLabel label_prices(const ChoiceModelSpec &spec, const LabelOptions &opt = {}) {
    validate(spec);
    const double lo = spec.family == Family::IsoElastic ? std::max(opt.lower, opt.iso_lower) : opt.lower;
    switch (spec.family) {
        case Family::MNL:
            return solve_logit_fixed_point(spec);
        case Family::NestedLogit: {
            auto label = solve_logit_fixed_point(spec);
            if (max_abs(foc_residual(spec, label.price)) <= opt.nl_refine_threshold) return label;
            double hi = opt.upper;
            for (double x : label.price) hi = std::max(hi, 2.0 * x);
            auto refined = solve_nonlinear(spec, Box::uniform(spec.K, lo, hi), label.price, opt.nonlinear);
            return refined.revenue > label.revenue ? refined : label;
        }
        default:
            return solve_nonlinear(spec, Box::uniform(spec.K, lo, opt.upper), detail::warm_start(spec), opt.nonlinear);
    }
}

inline nlohmann::json to_json(const PriceLabel &label) {
    return {{"price", label.price},
            {"revenue", label.revenue},
            {"q_in", label.q_in},
            {"q_out", label.q_out},
            {"method", method_name(label.method)}};
}

inline PriceLabel label_from_json(const nlohmann::json &j) {
    try {
        PriceLabel label;
        label.price = j.at("price").get<PriceVector>();
        label.revenue = j.at("revenue").get<double>();
        label.q_in = j.at("q_in").get<std::vector<double>>();
        label.q_out = j.at("q_out").get<double>();
        label.method = method_from_name(j.at("method").get<std::string>());
        return label;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::InvalidSpec, std::string("malformed PriceLabel JSON: ") + e.what());
    }
}

}  // namespace c3po
