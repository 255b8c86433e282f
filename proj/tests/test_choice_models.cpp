#include <gtest/gtest.h>

#include <cmath>

#include "c3po/choice_models.hpp"

using namespace c3po;

namespace {

ChoiceModelSpec mnl(std::vector<double> alpha, double beta) {
    ChoiceModelSpec s;
    s.family = Family::MNL;
    s.K = alpha.size();
    s.alpha = std::move(alpha);
    s.beta = {beta};
    return s;
}

ChoiceModelSpec random_mnl(Rng &rng, std::size_t K) {
    ChoiceModelSpec s;
    s.K = K;
    for (std::size_t k = 0; k < K; ++k) {
        s.alpha.push_back(uniform(rng, -1.0, 2.0));
        s.beta.push_back(uniform(rng, 0.5, 3.0));
    }
    return s;
}

// Independent MNL reference: plain exponentials, no log-sum-exp tricks.
std::vector<double> naive_mnl(const ChoiceModelSpec &s, const PriceVector &p) {
    double denom = 1.0;
    std::vector<double> e(s.K);
    for (std::size_t k = 0; k < s.K; ++k) {
        e[k] = std::exp(s.alpha[k] - s.beta_at(k) * p[k]);
        denom += e[k];
    }
    for (double &x : e) x /= denom;
    return e;
}

ChoiceModelSpec sample_nl(Rng &rng, std::size_t K) {
    ChoiceModelSpec s = random_mnl(rng, K);
    s.family = Family::NestedLogit;
    s.lambda = uniform(rng, 0.3, 1.0);
    for (std::size_t k = 0; k < K; ++k) s.nest_assignments.push_back(static_cast<int>(k % 2));
    return s;
}

}  // namespace

TEST(ChoiceProbs, SymmetricTwoWayAtZeroPrice) {
    const auto q = choice_probs(mnl({0.0}, 1.0), {0.0});
    EXPECT_DOUBLE_EQ(q.inside[0], 0.5);
    EXPECT_DOUBLE_EQ(q.outside, 0.5);
}

TEST(ChoiceProbs, EqualUtilitiesSplitEvenly) {
    const auto q = choice_probs(mnl({1.0, 1.0}, 1.0), {1.0, 1.0});
    EXPECT_NEAR(q.inside[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(q.inside[1], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(q.outside, 1.0 / 3.0, 1e-15);
}

TEST(ChoiceProbs, MnlMatchesNaiveFormula) {
    Rng rng(11);
    for (int t = 0; t < 200; ++t) {
        const auto s = random_mnl(rng, 1 + t % 6);
        PriceVector p;
        for (std::size_t k = 0; k < s.K; ++k) p.push_back(uniform(rng, 0.0, 3.0));
        const auto q = choice_probs(s, p);
        const auto ref = naive_mnl(s, p);
        for (std::size_t k = 0; k < s.K; ++k) EXPECT_NEAR(q.inside[k], ref[k], 1e-14);
    }
}

TEST(ChoiceProbs, NestedLogitSingleNestUnitLambdaIsMnl) {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        auto base = random_mnl(rng, 1 + t % 6);
        auto nl = base;
        nl.family = Family::NestedLogit;
        nl.lambda = 1.0;
        nl.nest_assignments.assign(nl.K, 0);
        PriceVector p;
        for (std::size_t k = 0; k < base.K; ++k) p.push_back(uniform(rng, -1.0, 4.0));
        const auto a = choice_probs(base, p);
        const auto b = choice_probs(nl, p);
        for (std::size_t k = 0; k < base.K; ++k) EXPECT_NEAR(a.inside[k], b.inside[k], 1e-12);
        EXPECT_NEAR(a.outside, b.outside, 1e-12);
    }
}

TEST(ChoiceProbs, NestedLogitTwoNestHandComputed) {
    // Two nests {0,1} and {2}, lambda 0.5: nest inclusive values computed by hand.
    ChoiceModelSpec s;
    s.family = Family::NestedLogit;
    s.K = 3;
    s.alpha = {1.0, 0.5, 0.2};
    s.beta = {1.0};
    s.nest_assignments = {0, 0, 1};
    s.lambda = 0.5;
    const PriceVector p = {1.0, 1.0, 0.5};
    const double u0 = 0.0, u1 = -0.5, u2 = -0.3;
    const double S0 = std::exp(u0 / 0.5) + std::exp(u1 / 0.5);
    const double S1 = std::exp(u2 / 0.5);
    const double D = 1.0 + std::pow(S0, 0.5) + std::pow(S1, 0.5);
    const auto q = choice_probs(s, p);
    EXPECT_NEAR(q.inside[0], std::exp(u0 / 0.5) / S0 * std::pow(S0, 0.5) / D, 1e-14);
    EXPECT_NEAR(q.inside[1], std::exp(u1 / 0.5) / S0 * std::pow(S0, 0.5) / D, 1e-14);
    EXPECT_NEAR(q.inside[2], std::pow(S1, 0.5) / D, 1e-14);
    EXPECT_NEAR(q.outside, 1.0 / D, 1e-14);
}

TEST(ChoiceProbs, LogitFamiliesSumToOne) {
    Rng rng(5);
    for (int t = 0; t < 300; ++t) {
        const std::size_t K = 1 + t % 6;
        ChoiceModelSpec s;
        switch (t % 3) {
            case 0: s = random_mnl(rng, K); break;
            case 1: s = sample_nl(rng, K); break;
            default: {
                s.family = Family::MixedMNL;
                s.K = K;
                double w = 0.0;
                for (int c = 0; c < 3; ++c) {
                    auto comp = random_mnl(rng, K);
                    s.mixture.push_back({c == 2 ? 1.0 - w : 0.3, comp.alpha, comp.beta});
                    w += 0.3;
                }
            }
        }
        PriceVector p;
        for (std::size_t k = 0; k < K; ++k) p.push_back(uniform(rng, -2.0, 5.0));
        const auto q = choice_probs(s, p);
        double total = q.outside;
        for (double x : q.inside) {
            EXPECT_GE(x, 0.0);
            EXPECT_LE(x, 1.0);
            total += x;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(ChoiceProbs, LogitOwnPriceMonotone) {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        auto s = t % 2 ? random_mnl(rng, 3) : sample_nl(rng, 3);
        PriceVector p{uniform(rng, 0, 3), uniform(rng, 0, 3), uniform(rng, 0, 3)};
        const std::size_t k = static_cast<std::size_t>(t) % 3;
        auto p2 = p;
        p2[k] += uniform(rng, 0.01, 1.0);
        EXPECT_LE(choice_probs(s, p2).inside[k], choice_probs(s, p).inside[k]);
    }
}

TEST(ChoiceProbs, IsoElasticRejectsNonPositivePrice) {
    ChoiceModelSpec s;
    s.family = Family::IsoElastic;
    s.K = 1;
    s.iso_a = {0.5};
    s.iso_e = {-2.0};
    try {
        choice_probs(s, {0.0});
        FAIL() << "expected a domain error";
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::Domain);
    }
}

TEST(ChoiceProbs, IsoElasticRescalesExcessDemand) {
    ChoiceModelSpec s;
    s.family = Family::IsoElastic;
    s.K = 2;
    s.iso_a = {0.9, 0.9};
    s.iso_e = {-1.0, -1.0};
    const auto q = choice_probs(s, {0.5, 0.5});  // raw 1.0 + 1.0 after clamp
    EXPECT_NEAR(q.inside[0] + q.inside[1], 1.0, 1e-12);
    EXPECT_NEAR(q.outside, 0.0, 1e-12);
}

TEST(ChoiceProbs, LinearDemandClampsAndLeavesResidual) {
    ChoiceModelSpec s;
    s.family = Family::Linear;
    s.K = 2;
    s.lin_a = {0.4, 0.3};
    s.lin_b = {0.2, 0.5};
    const auto q = choice_probs(s, {1.0, 1.0});
    EXPECT_NEAR(q.inside[0], 0.2, 1e-15);
    EXPECT_NEAR(q.inside[1], 0.0, 1e-15);
    EXPECT_NEAR(q.outside, 0.8, 1e-15);
}

TEST(ChoiceProbs, EmptyMixtureIsInvalid) {
    ChoiceModelSpec s;
    s.family = Family::MixedMNL;
    s.K = 2;
    try {
        choice_probs(s, {1.0, 1.0});
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidSpec);
    }
}

TEST(ExpectedRevenue, Examples) {
    EXPECT_DOUBLE_EQ(expected_revenue(mnl({0.0}, 1.0), {0.0}), 0.0);
    EXPECT_NEAR(expected_revenue(mnl({1.0, 1.0}, 1.0), {1.0, 1.0}), 2.0 / 3.0, 1e-15);
    const double p = 1.2785;
    EXPECT_NEAR(expected_revenue(mnl({0.0}, 1.0), {p}), p * std::exp(-p) / (1.0 + std::exp(-p)), 1e-15);
    EXPECT_NEAR(expected_revenue(mnl({0.0}, 1.0), {p}), 0.2785, 1e-4);
}

TEST(Elasticity, MnlAnalyticMatchesFiniteDifference) {
    Rng rng(21);
    for (int t = 0; t < 100; ++t) {
        const auto s = random_mnl(rng, 1 + t % 6);
        PriceVector p;
        for (std::size_t k = 0; k < s.K; ++k) p.push_back(uniform(rng, 0.1, 3.0));
        const auto A = elasticity_matrix(s, p, ElasticityMode::Analytic).E;
        const auto F = elasticity_matrix(s, p, ElasticityMode::FiniteDifference).E;
        const auto q = choice_probs(s, p);
        for (std::size_t j = 0; j < s.K; ++j) {
            for (std::size_t k = 0; k < s.K; ++k) {
                EXPECT_NEAR(A[j][k], F[j][k], 1e-4);
                // closed form: own -beta p (1-q), cross +beta p_k q_k
                const double cf = j == k ? -s.beta_at(k) * p[k] * (1.0 - q.inside[k]) : s.beta_at(k) * p[k] * q.inside[k];
                EXPECT_NEAR(A[j][k], cf, 1e-12);
                if (j != k) {
                    EXPECT_GT(A[j][k], 0.0);
                }
            }
        }
    }
}

TEST(Elasticity, UnitElasticAtSingleProductOptimum) {
    // p = 1 + exp(-p) is the zero-cost optimum for alpha 0, beta 1.
    double lo = 1.0, hi = 2.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (mid - 1.0 - std::exp(-mid) < 0.0 ? lo : hi) = mid;
    }
    const auto E = elasticity_matrix(mnl({0.0}, 1.0), {0.5 * (lo + hi)}, ElasticityMode::Analytic).E;
    EXPECT_NEAR(E[0][0], -1.0, 1e-12);
    const auto E4 = elasticity_matrix(mnl({0.0}, 1.0), {1.2785}, ElasticityMode::Analytic).E;
    EXPECT_NEAR(E4[0][0], -1.0, 1e-3);
}

TEST(Elasticity, AnalyticUnsupportedOutsideMnl) {
    Rng rng(1);
    const auto s = sample_nl(rng, 2);
    try {
        elasticity_matrix(s, {1.0, 1.0}, ElasticityMode::Analytic);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::UnsupportedMode);
    }
}

TEST(Elasticity, ZeroShareIsSingular) {
    ChoiceModelSpec s;
    s.family = Family::Linear;
    s.K = 1;
    s.lin_a = {0.5};
    s.lin_b = {0.5};
    try {
        elasticity_matrix(s, {2.0}, ElasticityMode::FiniteDifference);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::SingularDemand);
    }
}

TEST(Elasticity, IsoElasticOwnElasticityEqualsExponent) {
    ChoiceModelSpec s;
    s.family = Family::IsoElastic;
    s.K = 1;
    s.iso_a = {0.2};
    s.iso_e = {-1.7};
    const auto E = elasticity_matrix(s, {1.3}, ElasticityMode::FiniteDifference).E;
    EXPECT_NEAR(E[0][0], -1.7, 1e-3);
}

TEST(Elasticity, OwnDiagonalNonPositiveAcrossFamilies) {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        auto s = sample_nl(rng, 4);
        PriceVector p{uniform(rng, 0.2, 2), uniform(rng, 0.2, 2), uniform(rng, 0.2, 2), uniform(rng, 0.2, 2)};
        const auto E = elasticity_matrix(s, p, ElasticityMode::FiniteDifference).E;
        for (std::size_t k = 0; k < 4; ++k) EXPECT_LE(E[k][k], 0.0);
    }
}

TEST(SimulateChoice, DegenerateOutside) {
    Rng rng(1);
    ChoiceProbabilities q{{0.0, 0.0}, 1.0};
    for (int i = 0; i < 1000; ++i) EXPECT_EQ(simulate_choice(q, rng), 0u);
}

TEST(SimulateChoice, SeedDeterminism) {
    const auto s = mnl({0.3, -0.2}, 1.1);
    Rng a(99), b(99);
    for (int i = 0; i < 500; ++i) EXPECT_EQ(simulate_choice(s, {1.0, 0.7}, a), simulate_choice(s, {1.0, 0.7}, b));
}

TEST(SimulateChoice, EmpiricalFrequencies) {
    Rng rng(2024);
    ChoiceProbabilities q{{1.0 / 3.0, 1.0 / 3.0}, 1.0 / 3.0};
    std::array<int, 3> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[simulate_choice(q, rng)];
    for (int c : counts) EXPECT_NEAR(c / static_cast<double>(n), 1.0 / 3.0, 0.01);
}

TEST(SpecJson, RoundTripsEveryFamily) {
    Rng rng(6);
    std::vector<ChoiceModelSpec> specs{random_mnl(rng, 3), sample_nl(rng, 4)};
    ChoiceModelSpec nl = specs[1];
    nl.tau_nest = {{0, 0.2}, {1, -0.1}};
    specs.push_back(nl);
    ChoiceModelSpec mm;
    mm.family = Family::MixedMNL;
    mm.K = 2;
    mm.mixture = {{0.25, {0.1, 0.2}, {1.0}}, {0.75, {0.3, -0.1}, {0.5, 2.0}}};
    specs.push_back(mm);
    ChoiceModelSpec iso;
    iso.family = Family::IsoElastic;
    iso.K = 2;
    iso.iso_a = {0.1, 0.2};
    iso.iso_e = {-2.0, -1.5};
    specs.push_back(iso);
    ChoiceModelSpec lin;
    lin.family = Family::Linear;
    lin.K = 1;
    lin.lin_a = {0.4};
    lin.lin_b = {0.3};
    specs.push_back(lin);
    for (const auto &s : specs) {
        const auto j = to_json(s);
        EXPECT_EQ(j.at("schema_version"), 1);
        const auto back = spec_from_json(nlohmann::json::parse(j.dump()));
        EXPECT_EQ(to_json(back), j);
        const PriceVector p(s.K, 0.9);
        EXPECT_EQ(expected_revenue(back, p), expected_revenue(s, p));
    }
}

TEST(SpecJson, RejectsUnknownSchemaVersion) {
    auto j = to_json(mnl({0.0}, 1.0));
    j["schema_version"] = 99;
    try {
        spec_from_json(j);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::SchemaVersion);
    }
}

TEST(SpecValidation, RejectsBadParameters) {
    auto bad_beta = mnl({0.0}, -1.0);
    EXPECT_THROW(validate(bad_beta), Error);
    ChoiceModelSpec nl;
    nl.family = Family::NestedLogit;
    nl.K = 1;
    nl.alpha = {0.0};
    nl.beta = {1.0};
    nl.nest_assignments = {0};
    nl.lambda = 1.5;
    EXPECT_THROW(validate(nl), Error);
    ChoiceModelSpec iso;
    iso.family = Family::IsoElastic;
    iso.K = 1;
    iso.iso_a = {0.5};
    iso.iso_e = {0.5};
    EXPECT_THROW(validate(iso), Error);
}

TEST(SpecConversion, NegativeBetaConvention) {
    const auto s = spec_from_negative_beta({0.5, 0.1}, {-1.5, -0.7}, {0, 1}, 0.6);
    EXPECT_EQ(s.family, Family::NestedLogit);
    EXPECT_DOUBLE_EQ(s.beta_at(0), 1.5);
    EXPECT_DOUBLE_EQ(s.beta_at(1), 0.7);
    EXPECT_THROW(spec_from_negative_beta({0.5}, {0.2}, {0}, 1.0), Error);
}
