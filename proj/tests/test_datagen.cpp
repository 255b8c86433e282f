#include <gtest/gtest.h>

#include <array>
#include <set>
#include <sstream>

#include "c3po/datagen.hpp"

using namespace c3po;

namespace {

std::string csv_of(const ChoiceDataset &ds) {
    std::ostringstream os;
    write_csv(ds, os);
    return os.str();
}

const ChoiceDataset &cached(Family f) {
    static std::map<Family, ChoiceDataset> cache;
    auto it = cache.find(f);
    if (it == cache.end()) {
        DatasetOptions opt;
        opt.family = f;
        it = cache.emplace(f, build_dataset(1000 + static_cast<int>(f), opt)).first;
    }
    return it->second;
}

}  // namespace

TEST(Segments, EnumerateAllBinaryVectors) {
    std::set<SegmentAttributes> seen;
    for (std::size_t i = 0; i < kNumSegments; ++i) {
        const auto z = segment_attributes(i);
        for (int v : z) EXPECT_TRUE(v == 0 || v == 1);
        seen.insert(z);
    }
    EXPECT_EQ(seen.size(), 128u);
}

TEST(Schema, RowWidthLaw) {
    EXPECT_EQ(row_width(3), 210u);
    for (std::size_t K = 2; K <= 6; ++K) {
        EXPECT_EQ(row_width(K), 7 + 50 * (K + 1) + K);
        EXPECT_EQ(csv_header(K).size(), row_width(K));
    }
}

TEST(SampleSpec, FamilyMixOverTenThousandDraws) {
    Rng rng(77);
    std::array<int, 5> counts{};
    for (int i = 0; i < 10000; ++i) {
        const auto s = sample_spec(rng);
        ++counts[static_cast<std::size_t>(s.family)];
    }
    for (std::size_t f = 0; f < 5; ++f) EXPECT_NEAR(counts[f] / 10000.0, kFamilyMix[f], 0.02) << f;
}

TEST(SampleSpec, AcceptedSpecsHonorElasticityRange) {
    Rng rng(78);
    for (int i = 0; i < 500; ++i) {
        const auto s = sample_spec(rng);
        EXPECT_GE(s.K, 2u);
        EXPECT_LE(s.K, 6u);
        const double e = mean_own_elasticity(s, PriceVector(s.K, 1.0));
        EXPECT_GT(e, -3.0);
        EXPECT_LT(e, -1.0);
    }
}

TEST(SampleSpec, SeedDeterminism) {
    Rng a(5), b(5);
    for (int i = 0; i < 20; ++i) EXPECT_EQ(to_json(sample_spec(a)), to_json(sample_spec(b)));
}

TEST(SampleSpec, ImpossibleRangeExhaustsBudget) {
    Rng rng(1);
    SampleOptions opt;
    opt.elasticity_low = -100.0;
    opt.elasticity_high = -90.0;
    opt.rejection_budget = 50;
    try {
        sample_spec(rng, Family::MNL, opt);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::SamplingFailure);
    }
}

TEST(WhatIf, CountRangeAndMean) {
    Rng rng(9);
    double pre_clip_sum = 0.0;
    std::size_t n = 0;
    for (int t = 0; t < 200; ++t) {
        const auto w = sample_whatif_prices(rng, 4);
        ASSERT_EQ(w.size(), 50u);
        for (const auto &p : w) {
            ASSERT_EQ(p.size(), 4u);
            for (double x : p) {
                EXPECT_GE(x, 0.0);
                EXPECT_LE(x, 2.0);
            }
        }
    }
    // The pre-clip draws are N(1,1); clipping to [0,2] is symmetric about 1.
    Rng r2(10);
    for (int i = 0; i < 100000; ++i, ++n) pre_clip_sum += normal(r2, 1.0, 1.0);
    EXPECT_NEAR(pre_clip_sum / n, 1.0, 0.02);
    Rng a(3), b(3);
    EXPECT_EQ(sample_whatif_prices(a, 2), sample_whatif_prices(b, 2));
}

TEST(BuildDataset, ShapeAndRanges) {
    for (Family f : kFamilies) {
        const auto &ds = cached(f);
        EXPECT_EQ(ds.meta.family, f);
        EXPECT_EQ(ds.rows.size(), 128u);
        const std::size_t K = ds.meta.K;
        for (const auto &row : ds.rows) {
            ASSERT_EQ(row.whatif.size(), 50u);
            ASSERT_EQ(row.label.size(), K);
            for (const auto &w : row.whatif) {
                ASSERT_EQ(w.price.size(), K);
                for (double x : w.price) {
                    EXPECT_GE(x, 0.0);
                    EXPECT_LE(x, 2.0);
                }
                EXPECT_NEAR(w.revenue, whatif_revenue(row.spec, w.price), 1e-12);
            }
            EXPECT_TRUE(elasticity_in_range(row.spec, SampleOptions{}));
        }
        const auto header = csv_of(ds).substr(0, csv_of(ds).find('\n'));
        EXPECT_EQ(static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1, row_width(K));
    }
}

TEST(BuildDataset, LabelsAreStationaryWhereDemandIsSmooth) {
    for (Family f : {Family::MNL, Family::NestedLogit, Family::MixedMNL, Family::Linear}) {
        const auto &ds = cached(f);
        const double tol = f == Family::MNL ? 1e-4 : 1e-2;
        for (const auto &row : ds.rows) {
            bool interior = true;
            for (double p : row.label) interior = interior && p > 1e-6 && p < 5.0 - 1e-6;
            if (!interior) continue;
            EXPECT_LT(max_abs(foc_residual(row.spec, row.label)), tol) << family_name(f);
        }
    }
}

TEST(BuildDataset, IsoElasticLabelsAreLocalMaxima) {
    // Iso-elastic optima sit on the saturation kink of demand, where the
    // first-order condition is undefined; check local optimality directly.
    const auto &ds = cached(Family::IsoElastic);
    const LabelOptions lo;
    for (const auto &row : ds.rows) {
        const double r0 = expected_revenue(row.spec, row.label);
        for (std::size_t k = 0; k < row.label.size(); ++k) {
            for (double d : {-1e-3, 1e-3}) {
                auto p = row.label;
                p[k] = std::clamp(p[k] + d, lo.iso_lower, lo.upper);
                EXPECT_LE(expected_revenue(row.spec, p), r0 + 1e-9);
            }
        }
    }
}

TEST(BuildDataset, ElasticityTargetsMatchSpec) {
    const auto &ds = cached(Family::MNL);
    for (const auto &row : ds.rows) {
        const auto E = elasticity_matrix(row.spec, row.label, ElasticityMode::Analytic).E;
        for (std::size_t k = 0; k < ds.meta.K; ++k) EXPECT_NEAR(row.elasticity_target[k], E[k][k], 1e-4);
    }
}

TEST(BuildDataset, ByteIdenticalCsvForFixedSeed) {
    DatasetOptions opt;
    opt.family = Family::MNL;
    EXPECT_EQ(csv_of(build_dataset(42, opt)), csv_of(build_dataset(42, opt)));
    EXPECT_NE(csv_of(build_dataset(42, opt)), csv_of(build_dataset(43, opt)));
}

TEST(BuildDataset, WorkerCountDoesNotChangeOutput) {
    DatasetOptions opt;
    opt.family = Family::Linear;
    const auto a = build_datasets(5, 3, opt, 1);
    const auto b = build_datasets(5, 3, opt, 3);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(csv_of(a[i]), csv_of(b[i]));
}

TEST(Csv, RoundTripWithMeta) {
    const auto &ds = cached(Family::NestedLogit);
    std::istringstream is(csv_of(ds));
    auto back = read_csv(is);
    attach_meta(back, nlohmann::json::parse(meta_to_json(ds).dump()));
    EXPECT_EQ(csv_of(back), csv_of(ds));
    EXPECT_EQ(back.meta.K, ds.meta.K);
    EXPECT_EQ(back.meta.family, ds.meta.family);
    for (std::size_t i = 0; i < ds.rows.size(); ++i) {
        EXPECT_EQ(to_json(back.rows[i].spec), to_json(ds.rows[i].spec));
        EXPECT_EQ(back.rows[i].elasticity_target, ds.rows[i].elasticity_target);
    }
}

TEST(Csv, RejectsBadWidth) {
    std::istringstream is("a,b,c\n1,2,3\n");
    EXPECT_THROW(read_csv(is), Error);
}

TEST(Holdout, DefaultRatios) {
    const auto full = holdout_split(13000);
    EXPECT_EQ(full.train, 12000u);
    EXPECT_EQ(full.icl, 13u);
    EXPECT_EQ(full.eval, 987u);
    const auto desk = holdout_split(100);
    EXPECT_EQ(desk.train + desk.icl + desk.eval, 100u);
    EXPECT_GE(desk.icl, 1u);
    EXPECT_EQ(desk.train, 92u);
}

TEST(Normalize, Examples) {
    EXPECT_EQ(normalize_prices({3.0}, 3.0)[0], 0.0);
    EXPECT_EQ(normalize_prices({6.0}, 3.0)[0], 1.0);
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const double b = uniform(rng, 0.1, 10.0);
        const PriceVector p{uniform(rng, 0, 20), uniform(rng, 0, 20)};
        const auto back = denormalize_prices(normalize_prices(p, b), b);
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(back[k], p[k], 1e-12 * std::max(1.0, p[k]));
    }
    try {
        normalize_prices({1.0}, 0.0);
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::InvalidBaseline);
    }
}

TEST(IclScaling, DividesByIclMax) {
    ChoiceDataset icl;
    DatasetRow r;
    r.z = segment_attributes(3);
    r.whatif.push_back({{2.0, 1.0}, 0.8});
    r.label = {1.5, 1.0};
    icl.rows.push_back(r);
    ChoiceDataset data = icl;
    data.rows[0].whatif[0] = {{1.0, 0.5}, 0.4};
    const auto scaled = scale_by_icl_max(data, icl);
    EXPECT_DOUBLE_EQ(scaled.rows[0].whatif[0].price[0], 0.5);
    EXPECT_DOUBLE_EQ(scaled.rows[0].whatif[0].revenue, 0.5);
    // already scaled data with max 1 is left as is
    const auto again = scale_by_icl_max(scale_by_icl_max(icl, icl), scale_by_icl_max(icl, icl));
    EXPECT_EQ(csv_of(again), csv_of(scale_by_icl_max(icl, icl)));
}

TEST(IclScaling, ZeroColumnIsGuarded) {
    ChoiceDataset icl;
    DatasetRow r;
    r.z = segment_attributes(0);
    r.whatif.push_back({{0.0}, 0.0});
    r.label = {0.0};
    icl.rows.push_back(r);
    ChoiceDataset data = icl;
    data.rows[0].whatif[0] = {{0.7}, 0.3};
    const auto s = icl_scales(icl);
    EXPECT_EQ(s.price, 1.0);
    EXPECT_EQ(s.revenue, 1.0);
    EXPECT_EQ(s.warnings.size(), 3u);
    const auto scaled = scale_by_icl_max(data, icl);
    EXPECT_EQ(scaled.rows[0].whatif[0].price[0], 0.7);
    EXPECT_EQ(scaled.rows[0].whatif[0].revenue, 0.3);
}
