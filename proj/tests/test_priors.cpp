#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>

#include "c3po/priors.hpp"

using namespace c3po;

TEST(Priors, TableValuesVerbatim) {
    const std::vector<std::tuple<std::string, double, double>> expected{
        {"Water (basic consumption)", -0.1, -0.1}, {"Electricity (short-run)", -0.3, -0.1},
        {"Gasoline (short-run)", -0.3, -0.2},      {"Milk", -0.5, -0.5},
        {"Gasoline (long-run)", -0.8, -0.6},       {"Electricity (long-run)", -0.7, -0.7},
        {"Restaurant meals", -2.3, -2.3},          {"Air travel (long-run)", -2.0, -2.0},
        {"Luxury goods", -3.0, -1.5},              {"Automobiles (long-run)", -1.5, -1.2}};
    for (const auto &[name, lo, hi] : expected) {
        const auto p = lookup(name);
        EXPECT_EQ(p.low, lo) << name;
        EXPECT_EQ(p.high, hi) << name;
        EXPECT_EQ(p.source, PriorSource::TextbookTable);
    }
    EXPECT_EQ(StaticPriorTable::bundled().entries().size(), expected.size());
}

TEST(Priors, NormalizedKeys) {
    EXPECT_EQ(lookup("  mILK ").low, -0.5);
    EXPECT_EQ(lookup("restaurant meals").low, -2.3);
}

TEST(Priors, MissFallsBackToTrainingRange) {
    const auto p = lookup("unknown gadget");
    EXPECT_EQ(p.low, -3.0);
    EXPECT_EQ(p.high, -1.0);
    EXPECT_EQ(p.source, PriorSource::Default);
    EXPECT_EQ(to_json(p).at("source"), "Default");
}

TEST(Priors, Classification) {
    EXPECT_EQ(classify(-2.5, -1.5), ElasticityClass::Elastic);
    EXPECT_EQ(classify(-0.6, -0.2), ElasticityClass::Inelastic);
    EXPECT_EQ(classify(-1.5, -0.5), ElasticityClass::Mixed);
    EXPECT_EQ(classify(lookup("Milk")), ElasticityClass::Inelastic);
    EXPECT_EQ(classify(lookup("Luxury goods")), ElasticityClass::Elastic);
}

TEST(Priors, UserFileOverrides) {
    const std::string path = ::testing::TempDir() + "priors_override.json";
    {
        std::ofstream os(path);
        os << R"({"schema_version": 1, "priors": [{"category": "Yogurt", "low": -1.5, "high": -0.5}]})";
    }
    const auto table = StaticPriorTable::from_file(path);
    const auto p = lookup(table, "yogurt");
    EXPECT_EQ(p.low, -1.5);
    EXPECT_EQ(p.source, PriorSource::UserSupplied);
    EXPECT_EQ(lookup(table, "Milk").source, PriorSource::Default);
    std::remove(path.c_str());
}

TEST(Priors, RejectsInvalidRanges) {
    const auto bad = nlohmann::json::parse(R"({"priors": [{"category": "x", "low": -0.2, "high": 0.3}]})");
    EXPECT_THROW(StaticPriorTable::from_json(bad, PriorSource::UserSupplied), Error);
    const auto flipped = nlohmann::json::parse(R"({"priors": [{"category": "x", "low": -0.2, "high": -0.9}]})");
    EXPECT_THROW(StaticPriorTable::from_json(flipped, PriorSource::UserSupplied), Error);
    EXPECT_THROW(StaticPriorTable::from_file("/nonexistent/priors.json"), Error);
}

TEST(Priors, CustomProvider) {
    struct Fixed : PriorProvider {
        std::optional<ElasticityPrior> find(const std::string &) const override {
            return ElasticityPrior{"any", -4.0, -2.0, PriorSource::UserSupplied};
        }
    } provider;
    EXPECT_EQ(lookup(provider, "whatever").low, -4.0);
}
