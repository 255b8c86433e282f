#include <gtest/gtest.h>

#include <algorithm>

#include "c3po/metrics.hpp"
#include "c3po/rng.hpp"

using namespace c3po;

namespace {

EvalRecord rec(double actual, double recommended, bool won, double revenue = 0.0) {
    return {{actual}, {recommended}, std::nullopt, won, revenue};
}

std::vector<EvalRecord> hand_example() {
    return {rec(1.0, 1.2, true), rec(1.0, 0.8, true), rec(1.0, 0.9, false), rec(1.0, 1.1, false)};
}

ChoiceModelSpec unit_mnl() {
    ChoiceModelSpec s;
    s.K = 1;
    s.alpha = {0.0};
    s.beta = {1.0};
    return s;
}

}  // namespace

TEST(Metrics, HandCountedExample) {
    const auto r = compute_metrics(hand_example());
    ASSERT_TRUE(r.pir && r.pdr && r.br);
    EXPECT_EQ(*r.pir, 0.5);
    EXPECT_EQ(*r.pdr, 0.5);
    EXPECT_NEAR(*r.br, 0.1, 1e-15);
    EXPECT_EQ(*r.kpi, 0.5);
    EXPECT_EQ(r.n_wins, 2u);
    EXPECT_EQ(r.n_losses, 2u);
    EXPECT_NEAR(r.mae, 0.15, 1e-15);
}

TEST(Metrics, IdenticalRecommendationsScoreZero) {
    const std::vector<EvalRecord> rs{rec(1.0, 1.0, true), rec(2.0, 2.0, false)};
    const auto r = compute_metrics(rs);
    EXPECT_EQ(*r.pir, 0.0);
    EXPECT_EQ(*r.pdr, 0.0);
    EXPECT_EQ(*r.br, 0.0);
    EXPECT_EQ(r.mae, 0.0);
}

TEST(Metrics, StrongThreshold) {
    MetricsReport r;
    r.pdr = 0.56;
    r.pir = 0.60;
    EXPECT_TRUE(is_strong(r));
    r.pir = 0.55;
    EXPECT_FALSE(is_strong(r));
    r.pir.reset();
    EXPECT_FALSE(is_strong(r));
}

TEST(Metrics, EmptyInputThrows) {
    try {
        compute_metrics({});
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::EmptyInput);
    }
}

TEST(Metrics, AllWinsLeavesPdrUndefined) {
    const auto r = compute_metrics({rec(1.0, 1.1, true), rec(1.0, 0.9, true)});
    EXPECT_FALSE(r.pdr.has_value());
    EXPECT_TRUE(r.pir.has_value());
    EXPECT_FALSE(r.kpi.has_value());
    const auto j = to_json(r);
    EXPECT_TRUE(j.at("pdr").is_null());
    EXPECT_EQ(j.at("undefined"), nlohmann::json::array({"pdr"}));
    const auto losses = compute_metrics({rec(1.0, 1.1, false)});
    EXPECT_FALSE(losses.pir.has_value());
    EXPECT_FALSE(losses.br.has_value());
}

TEST(Metrics, LabelsDriveMae) {
    EvalRecord r = rec(1.0, 1.3, true);
    r.label = PriceVector{1.5};
    EXPECT_NEAR(compute_metrics({r}).mae, 0.2, 1e-15);
}

TEST(Metrics, PrimaryProductUnlessPerProduct) {
    EvalRecord r{{1.0, 1.0}, {1.2, 0.8}, std::nullopt, true, 0.0};
    EXPECT_EQ(*compute_metrics({r}).pir, 1.0);
    MetricsOptions opt;
    opt.per_product = true;
    EXPECT_EQ(*compute_metrics({r}, opt).pir, 0.5);
}

TEST(Metrics, ExtendedBrChargesAvoidableLosses) {
    auto rs = hand_example();
    rs[3].actual_revenue = 0.3;  // lost at 1.0 while recommending 1.1
    MetricsOptions opt;
    opt.extended_br = true;
    EXPECT_NEAR(*compute_metrics(rs, opt).br, (0.2 + 0.3) / 2.0, 1e-15);
    EXPECT_NEAR(*compute_metrics(rs).br, 0.1, 1e-15);
}

TEST(Metrics, RangesScaleAndPermutationInvariance) {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        std::vector<EvalRecord> rs;
        for (int i = 0; i < 30; ++i) {
            const double actual = uniform(rng, 0.5, 2.0), recommended = uniform(rng, 0.5, 2.0);
            const bool won = i < 2 || rng() % 2 == 0;  // BR needs some won revenue
            EvalRecord r = rec(actual, recommended, won, uniform(rng, 0.1, 1.0));
            r.label = PriceVector{uniform(rng, 0.5, 2.0)};
            rs.push_back(r);
        }
        for (bool won : {true, false}) {  // ties
            EvalRecord r = rec(1.0, 1.0, won, 0.5);
            r.label = PriceVector{1.0};
            rs.push_back(r);
        }
        const auto base = compute_metrics(rs);
        EXPECT_GE(*base.pir, 0.0);
        EXPECT_LE(*base.pir, 1.0);
        EXPECT_GE(*base.pdr, 0.0);
        EXPECT_LE(*base.pdr, 1.0);
        EXPECT_GE(*base.br, 0.0);
        EXPECT_GE(base.mae, 0.0);

        const double lam = uniform(rng, 0.1, 10.0);
        auto scaled = rs;
        for (auto &r : scaled) {
            r.actual_price[0] *= lam;
            r.recommended_price[0] *= lam;
            (*r.label)[0] *= lam;
        }
        const auto s = compute_metrics(scaled);
        EXPECT_EQ(*s.pir, *base.pir);
        EXPECT_EQ(*s.pdr, *base.pdr);
        EXPECT_NEAR(*s.br, *base.br, 1e-12);
        EXPECT_NEAR(s.mae, lam * base.mae, 1e-12);

        auto shuffled = rs;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const auto p = compute_metrics(shuffled);
        EXPECT_EQ(*p.pir, *base.pir);
        EXPECT_EQ(*p.pdr, *base.pdr);
        EXPECT_NEAR(*p.br, *base.br, 1e-12);
        EXPECT_NEAR(p.mae, base.mae, 1e-12);
    }
}

TEST(WinRate, Limits) {
    EXPECT_DOUBLE_EQ(estimated_win_rate({{0.0}}, unit_mnl()), 0.5);
    EXPECT_NEAR(estimated_win_rate({{50.0}}, unit_mnl()), 0.0, 1e-6);
}

TEST(WinRate, MatchesMonteCarlo) {
    ChoiceModelSpec s;
    s.K = 2;
    s.alpha = {0.5, 0.2};
    s.beta = {1.3};
    const PriceVector p{0.9, 1.4};
    Rng rng(99);
    int bought = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) bought += simulate_choice(s, p, rng) != 0;
    EXPECT_NEAR(estimated_win_rate({p}, s), bought / static_cast<double>(n), 0.01);
}

TEST(Tables, MetricsColumnOrder) {
    const auto table = metrics_table({{"sim", compute_metrics(hand_example())}});
    const auto header = table.substr(0, table.find('\n'));
    const auto mae = header.find("MAE"), pdr = header.find("PDR"), pir = header.find("PIR"), br = header.find("BR");
    EXPECT_LT(mae, pdr);
    EXPECT_LT(pdr, pir);
    EXPECT_LT(pir, br);
    EXPECT_NE(table.find("0.50"), std::string::npos);
}

TEST(Tables, ViolationColumns) {
    const auto cs = ConstraintSet::box_only(2, 0.0, 1.0);
    const auto table = violation_table(violation_report({{1.2, 0.5}}, cs));
    EXPECT_NE(table.find("Abs Mean ± Std"), std::string::npos);
    EXPECT_NE(table.find("Abs Max"), std::string::npos);
    EXPECT_NE(table.find("% Mean ± Std"), std::string::npos);
    EXPECT_NE(table.find("0.10 ± 0.10"), std::string::npos);
}

TEST(MetricsJson, MarksStandInBr) {
    const auto j = to_json(compute_metrics(hand_example()));
    EXPECT_EQ(j.at("pir"), 0.5);
    EXPECT_NE(j.at("meta").at("br_definition").get<std::string>().find("stand-in"), std::string::npos);
}
