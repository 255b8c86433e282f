#pragma once

// Demand families used to simulate purchase behaviour: multinomial logit,
// nested logit, finite-mixture logit, iso-elastic and linear demand. All
// functions are pure in (spec, prices); randomness only enters through an
// explicit Rng argument.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/error.hpp"
#include "c3po/rng.hpp"

namespace c3po {

using PriceVector = std::vector<double>;
using Matrix = std::vector<std::vector<double>>;

inline constexpr int kSpecSchemaVersion = 1;

enum class Family { MNL, NestedLogit, MixedMNL, IsoElastic, Linear };

inline std::string family_name(Family f) {
    switch (f) {
        case Family::MNL: return "MNL";
        case Family::NestedLogit: return "NestedLogit";
        case Family::MixedMNL: return "MixedMNL";
        case Family::IsoElastic: return "IsoElastic";
        case Family::Linear: return "Linear";
    }
    return "?";
}

inline Family family_from_name(const std::string &name) {
    for (Family f : {Family::MNL, Family::NestedLogit, Family::MixedMNL, Family::IsoElastic,
                     Family::Linear}) {
        if (family_name(f) == name) return f;
    }
    throw Error(ErrorKind::InvalidSpec, "unknown choice-model family '" + name + "'");
}

inline bool is_logit(Family f) {
    return f == Family::MNL || f == Family::NestedLogit || f == Family::MixedMNL;
}

struct MixtureComponent {
    double weight = 0.0;
    std::vector<double> alpha;
    std::vector<double> beta;  // size 1 (shared) or K
};

/// One demand environment. Logit utilities are alpha_k - beta_k * p_k with
/// beta_k > 0; the outside option has utility 0.
struct ChoiceModelSpec {
    Family family = Family::MNL;
    std::size_t K = 0;
    std::vector<double> alpha;
    std::vector<double> beta;  // size 1 (shared) or K

    std::vector<int> nest_assignments;
    double lambda = 1.0;
    std::map<int, double> tau_nest;

    std::vector<MixtureComponent> mixture;

    std::vector<double> iso_a;  // a_k > 0
    std::vector<double> iso_e;  // e_k < 0

    std::vector<double> lin_a;
    std::vector<double> lin_b;  // b_k > 0

    double beta_at(std::size_t k) const { return beta.size() == 1 ? beta[0] : beta[k]; }
};

struct ChoiceProbabilities {
    std::vector<double> inside;
    double outside = 0.0;
};

struct ElasticityMatrix {
    Matrix E;  // E[j][k] = (p_k / q_j) dq_j/dp_k
};

enum class ElasticityMode { Analytic, FiniteDifference };

namespace detail {

inline void require(bool ok, const std::string &msg) {
    if (!ok) throw Error(ErrorKind::InvalidSpec, msg);
}

inline void check_beta(const std::vector<double> &beta, std::size_t K, const std::string &what) {
    require(beta.size() == 1 || beta.size() == K, what + ": beta must have size 1 or K");
    for (double b : beta) require(std::isfinite(b) && b > 0.0, what + ": beta must be > 0");
}

inline double beta_of(const std::vector<double> &beta, std::size_t k) {
    return beta.size() == 1 ? beta[0] : beta[k];
}

// Softmax against an outside option with utility zero.
inline ChoiceProbabilities mnl_probs(const std::vector<double> &alpha, const std::vector<double> &beta,
                                     const PriceVector &p) {
    const std::size_t K = p.size();
    std::vector<double> u(K);
    double m = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        u[k] = alpha[k] - beta_of(beta, k) * p[k];
        m = std::max(m, u[k]);
    }
    ChoiceProbabilities out;
    out.inside.resize(K);
    double denom = std::exp(-m);
    for (std::size_t k = 0; k < K; ++k) {
        out.inside[k] = std::exp(u[k] - m);
        denom += out.inside[k];
    }
    for (double &q : out.inside) q /= denom;
    out.outside = std::exp(-m) / denom;
    return out;
}

inline double log_sum_exp(const std::vector<double> &v) {
    double m = -INFINITY;
    for (double x : v) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

inline ChoiceProbabilities nested_logit_probs(const ChoiceModelSpec &spec, const PriceVector &p) {
    const std::size_t K = spec.K;
    const double lam = spec.lambda;
    std::vector<double> alpha_eff = spec.alpha;
    for (const auto &[nest, tau] : spec.tau_nest) {
        for (std::size_t k = 0; k < K; ++k) {
            if (spec.nest_assignments[k] == nest) alpha_eff[k] *= (1.0 + tau);
        }
    }
    std::vector<double> u(K);
    for (std::size_t k = 0; k < K; ++k) u[k] = alpha_eff[k] - spec.beta_at(k) * p[k];

    std::vector<int> nests = spec.nest_assignments;
    std::sort(nests.begin(), nests.end());
    nests.erase(std::unique(nests.begin(), nests.end()), nests.end());

    // log S_m = logsumexp(u/lam) over the nest; nest weight S_m^lam.
    std::vector<double> log_s(nests.size());
    std::vector<double> log_weights{0.0};  // outside option
    for (std::size_t m = 0; m < nests.size(); ++m) {
        std::vector<double> scaled;
        for (std::size_t k = 0; k < K; ++k) {
            if (spec.nest_assignments[k] == nests[m]) scaled.push_back(u[k] / lam);
        }
        log_s[m] = log_sum_exp(scaled);
        log_weights.push_back(lam * log_s[m]);
    }
    const double log_denom = log_sum_exp(log_weights);

    ChoiceProbabilities out;
    out.inside.assign(K, 0.0);
    for (std::size_t m = 0; m < nests.size(); ++m) {
        const double log_nest_share = lam * log_s[m] - log_denom;
        for (std::size_t k = 0; k < K; ++k) {
            if (spec.nest_assignments[k] == nests[m]) {
                out.inside[k] = std::exp(log_nest_share + u[k] / lam - log_s[m]);
            }
        }
    }
    out.outside = std::exp(-log_denom);
    return out;
}

// Independent per-product demands; the outside option takes the residual
// mass and inside demands are rescaled when they sum past one.
inline ChoiceProbabilities residual_outside(std::vector<double> q) {
    const double total = std::accumulate(q.begin(), q.end(), 0.0);
    if (total > 1.0) {
        for (double &x : q) x /= total;
    }
    ChoiceProbabilities out;
    out.outside = std::max(0.0, 1.0 - std::accumulate(q.begin(), q.end(), 0.0));
    out.inside = std::move(q);
    return out;
}

}  // namespace detail

inline void validate(const ChoiceModelSpec &spec) {
    using detail::require;
    const std::size_t K = spec.K;
    require(K >= 1, "K must be >= 1");
    switch (spec.family) {
        case Family::MNL:
            require(spec.alpha.size() == K, "alpha must have K entries");
            detail::check_beta(spec.beta, K, "MNL");
            break;
        case Family::NestedLogit:
            require(spec.alpha.size() == K, "alpha must have K entries");
            detail::check_beta(spec.beta, K, "NestedLogit");
            require(spec.nest_assignments.size() == K, "nest_assignments must have K entries");
            require(spec.lambda > 0.0 && spec.lambda <= 1.0, "lambda must lie in (0, 1]");
            break;
        case Family::MixedMNL: {
            require(!spec.mixture.empty(), "MixedMNL requires a non-empty mixture");
            double total = 0.0;
            for (const auto &c : spec.mixture) {
                require(c.weight >= 0.0, "mixture weights must be non-negative");
                require(c.alpha.size() == K, "mixture alpha must have K entries");
                detail::check_beta(c.beta, K, "MixedMNL component");
                total += c.weight;
            }
            require(std::abs(total - 1.0) <= 1e-9, "mixture weights must sum to 1");
            break;
        }
        case Family::IsoElastic:
            require(spec.iso_a.size() == K && spec.iso_e.size() == K, "iso_coeffs must have K entries");
            for (std::size_t k = 0; k < K; ++k) {
                require(spec.iso_a[k] > 0.0, "iso a_k must be > 0");
                require(spec.iso_e[k] < 0.0, "iso e_k must be < 0");
            }
            break;
        case Family::Linear:
            require(spec.lin_a.size() == K && spec.lin_b.size() == K, "linear_coeffs must have K entries");
            for (double b : spec.lin_b) require(b > 0.0, "linear b_k must be > 0");
            break;
    }
}

inline ChoiceProbabilities choice_probs(const ChoiceModelSpec &spec, const PriceVector &p) {
    if (p.size() != spec.K) {
        throw Error(ErrorKind::InvalidSpec, "price vector has " + std::to_string(p.size()) +
                                                " entries, spec has K=" + std::to_string(spec.K));
    }
    for (double x : p) {
        if (!std::isfinite(x)) throw Error(ErrorKind::Domain, "non-finite price");
    }
    switch (spec.family) {
        case Family::MNL:
            return detail::mnl_probs(spec.alpha, spec.beta, p);
        case Family::NestedLogit:
            return detail::nested_logit_probs(spec, p);
        case Family::MixedMNL: {
            if (spec.mixture.empty()) throw Error(ErrorKind::InvalidSpec, "empty mixture");
            ChoiceProbabilities out;
            out.inside.assign(spec.K, 0.0);
            for (const auto &c : spec.mixture) {
                const auto part = detail::mnl_probs(c.alpha, c.beta, p);
                for (std::size_t k = 0; k < spec.K; ++k) out.inside[k] += c.weight * part.inside[k];
                out.outside += c.weight * part.outside;
            }
            return out;
        }
        case Family::IsoElastic: {
            std::vector<double> q(spec.K);
            for (std::size_t k = 0; k < spec.K; ++k) {
                if (p[k] <= 0.0) {
                    throw Error(ErrorKind::Domain, "iso-elastic demand needs strictly positive prices");
                }
                q[k] = std::clamp(spec.iso_a[k] * std::pow(p[k], spec.iso_e[k]), 0.0, 1.0);
            }
            return detail::residual_outside(std::move(q));
        }
        case Family::Linear: {
            std::vector<double> q(spec.K);
            for (std::size_t k = 0; k < spec.K; ++k) {
                q[k] = std::clamp(spec.lin_a[k] - spec.lin_b[k] * p[k], 0.0, 1.0);
            }
            return detail::residual_outside(std::move(q));
        }
    }
    throw Error(ErrorKind::UnsupportedFamily, "unhandled family");
}

inline double expected_revenue(const ChoiceModelSpec &spec, const PriceVector &p) {
    const auto q = choice_probs(spec, p);
    double r = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) r += p[k] * q.inside[k];
    return r;
}

inline double fd_step(double price) { return std::max(1e-5, 1e-5 * std::abs(price)); }

/// Demand Jacobian J[j][k] = dq_j / dp_k.
inline Matrix demand_jacobian(const ChoiceModelSpec &spec, const PriceVector &p, ElasticityMode mode) {
    const std::size_t K = spec.K;
    Matrix J(K, std::vector<double>(K, 0.0));
    if (mode == ElasticityMode::Analytic) {
        if (spec.family != Family::MNL) {
            throw Error(ErrorKind::UnsupportedMode,
                        "analytic derivatives are only available for MNL, not " + family_name(spec.family));
        }
        const auto q = choice_probs(spec, p).inside;
        for (std::size_t j = 0; j < K; ++j) {
            for (std::size_t k = 0; k < K; ++k) {
                const double b = spec.beta_at(k);
                J[j][k] = (j == k) ? -b * q[k] * (1.0 - q[k]) : b * q[j] * q[k];
            }
        }
        return J;
    }
    for (std::size_t k = 0; k < K; ++k) {
        const double h = fd_step(p[k]);
        PriceVector up = p, down = p;
        up[k] += h;
        down[k] -= h;
        const auto qu = choice_probs(spec, up).inside;
        const auto qd = choice_probs(spec, down).inside;
        for (std::size_t j = 0; j < K; ++j) J[j][k] = (qu[j] - qd[j]) / (2.0 * h);
    }
    return J;
}

inline ElasticityMatrix elasticity_matrix(const ChoiceModelSpec &spec, const PriceVector &p,
                                          ElasticityMode mode) {
    const auto J = demand_jacobian(spec, p, mode);
    const auto q = choice_probs(spec, p).inside;
    ElasticityMatrix out{Matrix(spec.K, std::vector<double>(spec.K, 0.0))};
    for (std::size_t j = 0; j < spec.K; ++j) {
        if (q[j] == 0.0) {
            throw Error(ErrorKind::SingularDemand,
                        "zero demand share for product " + std::to_string(j) + "; elasticity undefined");
        }
        for (std::size_t k = 0; k < spec.K; ++k) out.E[j][k] = p[k] / q[j] * J[j][k];
    }
    return out;
}

/// Mean of the diagonal of the elasticity matrix (finite differences).
inline double mean_own_elasticity(const ChoiceModelSpec &spec, const PriceVector &p) {
    const auto E = elasticity_matrix(spec, p, ElasticityMode::FiniteDifference).E;
    double s = 0.0;
    for (std::size_t k = 0; k < spec.K; ++k) s += E[k][k];
    return s / static_cast<double>(spec.K);
}

/// Categorical draw over (outside, inside_1..inside_K); 0 is no purchase.
inline std::size_t simulate_choice(const ChoiceProbabilities &q, Rng &rng) {
    const double u = uniform(rng, 0.0, 1.0);
    double acc = q.outside;
    if (u < acc) return 0;
    for (std::size_t k = 0; k < q.inside.size(); ++k) {
        acc += q.inside[k];
        if (u < acc) return k + 1;
    }
    // Rounding slack: fall back to the last alternative with positive mass.
    for (std::size_t k = q.inside.size(); k > 0; --k) {
        if (q.inside[k - 1] > 0.0) return k;
    }
    return 0;
}

inline std::size_t simulate_choice(const ChoiceModelSpec &spec, const PriceVector &p, Rng &rng) {
    return simulate_choice(choice_probs(spec, p), rng);
}

/// Builds an internal spec from a negative-beta parameterisation
/// (utility alpha + beta * p, beta < 0).
inline ChoiceModelSpec spec_from_negative_beta(std::vector<double> alpha, const std::vector<double> &beta_neg,
                                               std::vector<int> nest_assignments, double lambda,
                                               std::map<int, double> tau_nest = {}) {
    for (double b : beta_neg) {
        if (!(b < 0.0)) throw Error(ErrorKind::InvalidSpec, "all beta_i must be negative");
    }
    ChoiceModelSpec spec;
    spec.family = Family::NestedLogit;
    spec.K = alpha.size();
    spec.alpha = std::move(alpha);
    for (double b : beta_neg) spec.beta.push_back(-b);
    spec.nest_assignments = std::move(nest_assignments);
    spec.lambda = lambda;
    spec.tau_nest = std::move(tau_nest);
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline nlohmann::json beta_to_json(const std::vector<double> &beta) {
    if (beta.size() == 1) return beta[0];
    return beta;
}

inline std::vector<double> beta_from_json(const nlohmann::json &j) {
    if (j.is_number()) return {j.get<double>()};
    return j.get<std::vector<double>>();
}

}  // namespace detail

inline nlohmann::json to_json(const ChoiceModelSpec &spec) {
    nlohmann::json j;
    j["schema_version"] = kSpecSchemaVersion;
    j["family"] = family_name(spec.family);
    j["K"] = spec.K;
    switch (spec.family) {
        case Family::MNL:
            j["alpha"] = spec.alpha;
            j["beta"] = detail::beta_to_json(spec.beta);
            break;
        case Family::NestedLogit: {
            j["alpha"] = spec.alpha;
            j["beta"] = detail::beta_to_json(spec.beta);
            j["nest_assignments"] = spec.nest_assignments;
            j["lambda"] = spec.lambda;
            nlohmann::json tau = nlohmann::json::object();
            for (const auto &[m, t] : spec.tau_nest) tau[std::to_string(m)] = t;
            j["tau_nest"] = tau;
            break;
        }
        case Family::MixedMNL: {
            nlohmann::json comps = nlohmann::json::array();
            for (const auto &c : spec.mixture) {
                comps.push_back({{"weight", c.weight}, {"alpha", c.alpha}, {"beta", detail::beta_to_json(c.beta)}});
            }
            j["mixture"] = comps;
            break;
        }
        case Family::IsoElastic:
            j["iso_coeffs"] = {{"a", spec.iso_a}, {"e", spec.iso_e}};
            break;
        case Family::Linear:
            j["linear_coeffs"] = {{"a", spec.lin_a}, {"b", spec.lin_b}};
            break;
    }
    return j;
}

inline ChoiceModelSpec spec_from_json(const nlohmann::json &j) {
    const int version = j.value("schema_version", kSpecSchemaVersion);
    if (version != kSpecSchemaVersion) {
        throw Error(ErrorKind::SchemaVersion, "unsupported ChoiceModelSpec schema_version " +
                                                  std::to_string(version));
    }
    try {
        ChoiceModelSpec spec;
        spec.family = family_from_name(j.at("family").get<std::string>());
        spec.K = j.at("K").get<std::size_t>();
        if (j.contains("alpha")) spec.alpha = j["alpha"].get<std::vector<double>>();
        if (j.contains("beta")) spec.beta = detail::beta_from_json(j["beta"]);
        if (j.contains("nest_assignments")) spec.nest_assignments = j["nest_assignments"].get<std::vector<int>>();
        if (j.contains("lambda")) spec.lambda = j["lambda"].get<double>();
        if (j.contains("tau_nest")) {
            for (const auto &[key, value] : j["tau_nest"].items()) spec.tau_nest[std::stoi(key)] = value.get<double>();
        }
        if (j.contains("mixture")) {
            for (const auto &c : j["mixture"]) {
                spec.mixture.push_back({c.at("weight").get<double>(), c.at("alpha").get<std::vector<double>>(),
                                        detail::beta_from_json(c.at("beta"))});
            }
        }
        if (j.contains("iso_coeffs")) {
            spec.iso_a = j["iso_coeffs"].at("a").get<std::vector<double>>();
            spec.iso_e = j["iso_coeffs"].at("e").get<std::vector<double>>();
        }
        if (j.contains("linear_coeffs")) {
            spec.lin_a = j["linear_coeffs"].at("a").get<std::vector<double>>();
            spec.lin_b = j["linear_coeffs"].at("b").get<std::vector<double>>();
        }
        validate(spec);
        return spec;
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::InvalidSpec, std::string("malformed ChoiceModelSpec JSON: ") + e.what());
    }
}

}  // namespace c3po
