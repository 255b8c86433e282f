#pragma once

// Simulated training corpus. Each dataset holds one demand environment,
// 128 customer segments (all 7-bit attribute vectors), and per segment 50
// what-if (price, expected revenue) pairs plus the optimal price label.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/choice_models.hpp"
#include "c3po/error.hpp"
#include "c3po/price_opt.hpp"
#include "c3po/rng.hpp"

namespace c3po {

inline constexpr std::size_t kNumAttributes = 7;
inline constexpr std::size_t kNumSegments = std::size_t{1} << kNumAttributes;
inline constexpr std::size_t kNumWhatIf = 50;
inline constexpr int kDatasetSchemaVersion = 1;

using SegmentAttributes = std::array<int, kNumAttributes>;

inline SegmentAttributes segment_attributes(std::size_t index) {
    SegmentAttributes z{};
    for (std::size_t l = 0; l < kNumAttributes; ++l) z[l] = static_cast<int>((index >> l) & 1U);
    return z;
}

inline constexpr std::size_t row_width(std::size_t K) { return kNumAttributes + kNumWhatIf * (K + 1) + K; }

/// Family shares, ordered MNL, NestedLogit, MixedMNL, IsoElastic, Linear.
inline constexpr std::array<double, 5> kFamilyMix = {0.16, 0.16, 0.27, 0.27, 0.14};
inline constexpr std::array<Family, 5> kFamilies = {Family::MNL, Family::NestedLogit, Family::MixedMNL,
                                                    Family::IsoElastic, Family::Linear};

struct SampleOptions {
    double elasticity_low = -3.0;
    double elasticity_high = -1.0;
    int k_min = 2;
    int k_max = 6;
    int rejection_budget = 1000;
    double whatif_mean = 1.0;
};

inline Family sample_family(Rng &rng) {
    std::discrete_distribution<int> pick(kFamilyMix.begin(), kFamilyMix.end());
    return kFamilies[static_cast<std::size_t>(pick(rng))];
}

namespace detail {

inline std::vector<double> uniform_vec(Rng &rng, std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (double &x : v) x = uniform(rng, lo, hi);
    return v;
}

inline ChoiceModelSpec draw_parameters(Rng &rng, Family family, std::size_t K) {
    ChoiceModelSpec s;
    s.family = family;
    s.K = K;
    switch (family) {
        case Family::MNL:
            s.alpha = uniform_vec(rng, K, -1.0, 2.0);
            s.beta = {uniform(rng, 0.5, 3.0)};
            break;
        case Family::NestedLogit: {
            s.alpha = uniform_vec(rng, K, -1.0, 2.0);
            s.beta = {uniform(rng, 0.5, 3.0)};
            s.lambda = uniform(rng, 0.3, 1.0);
            const std::size_t nests = std::min<std::size_t>(2, K);
            s.nest_assignments.resize(K);
            for (std::size_t k = 0; k < K; ++k) s.nest_assignments[k] = static_cast<int>(k % nests);
            std::shuffle(s.nest_assignments.begin(), s.nest_assignments.end(), rng);
            break;
        }
        case Family::MixedMNL: {
            std::gamma_distribution<double> gamma(1.0, 1.0);
            double total = 0.0;
            for (int c = 0; c < 3; ++c) {
                MixtureComponent comp;
                comp.weight = gamma(rng) + 1e-3;
                total += comp.weight;
                comp.alpha = uniform_vec(rng, K, -1.0, 2.0);
                comp.beta = {uniform(rng, 0.5, 3.0)};
                s.mixture.push_back(std::move(comp));
            }
            for (auto &comp : s.mixture) comp.weight /= total;
            break;
        }
        case Family::IsoElastic:
            s.iso_a = uniform_vec(rng, K, 0.05, 0.9 / static_cast<double>(K));
            s.iso_e = uniform_vec(rng, K, -3.5, -0.5);
            break;
        case Family::Linear: {
            s.lin_a = uniform_vec(rng, K, 0.3 / static_cast<double>(K), 0.9 / static_cast<double>(K));
            s.lin_b.resize(K);
            for (std::size_t k = 0; k < K; ++k) s.lin_b[k] = s.lin_a[k] * uniform(rng, 0.3, 0.9);
            break;
        }
    }
    return s;
}

}  // namespace detail

inline bool elasticity_in_range(const ChoiceModelSpec &spec, const SampleOptions &opt) {
    try {
        const double e = mean_own_elasticity(spec, PriceVector(spec.K, opt.whatif_mean));
        return e > opt.elasticity_low && e < opt.elasticity_high;
    } catch (const Error &) {
        return false;
    }
}

/// Draws K and parameters, rejecting until the mean own elasticity at the
/// what-if mean price lies strictly inside the configured range.
inline ChoiceModelSpec sample_spec(Rng &rng, std::optional<Family> family = std::nullopt,
                                   const SampleOptions &opt = {}) {
    const Family f = family ? *family : sample_family(rng);
    const auto K = static_cast<std::size_t>(uniform_int(rng, opt.k_min, opt.k_max));
    for (int attempt = 0; attempt < opt.rejection_budget; ++attempt) {
        auto spec = detail::draw_parameters(rng, f, K);
        validate(spec);
        if (elasticity_in_range(spec, opt)) return spec;
    }
    throw Error(ErrorKind::SamplingFailure, "rejection budget exhausted while sampling a " + family_name(f) + " spec");
}

inline std::vector<PriceVector> sample_whatif_prices(Rng &rng, std::size_t K) {
    std::vector<PriceVector> out(kNumWhatIf, PriceVector(K));
    for (auto &p : out) {
        for (double &x : p) x = std::clamp(normal(rng, 1.0, 1.0), 0.0, 2.0);
    }
    return out;
}

/// Per-dataset map from segment attributes to parameter shifts: additive
/// offsets on utility intercepts, multiplicative factors on price sensitivity.
struct SegmentMap {
    std::vector<std::array<double, kNumAttributes>> alpha_weights;  // K x L
    std::array<double, kNumAttributes> beta_weights{};

    static SegmentMap draw(Rng &rng, std::size_t K) {
        SegmentMap m;
        m.alpha_weights.resize(K);
        for (auto &row : m.alpha_weights) {
            for (double &w : row) w = normal(rng, 0.0, 0.1);
        }
        for (double &w : m.beta_weights) w = normal(rng, 0.0, 0.05);
        return m;
    }

    ChoiceModelSpec apply(const ChoiceModelSpec &base, const SegmentAttributes &z, double strength) const {
        const std::size_t K = base.K;
        std::vector<double> offset(K, 0.0);
        double log_factor = 0.0;
        for (std::size_t l = 0; l < kNumAttributes; ++l) {
            for (std::size_t k = 0; k < K; ++k) offset[k] += strength * alpha_weights[k][l] * z[l];
            log_factor += strength * beta_weights[l] * z[l];
        }
        const double factor = std::exp(log_factor);
        ChoiceModelSpec s = base;
        auto shift_logit = [&](std::vector<double> &alpha, std::vector<double> &beta) {
            for (std::size_t k = 0; k < K; ++k) alpha[k] += offset[k];
            for (double &b : beta) b *= factor;
        };
        switch (s.family) {
            case Family::MNL:
            case Family::NestedLogit:
                shift_logit(s.alpha, s.beta);
                break;
            case Family::MixedMNL:
                for (auto &c : s.mixture) shift_logit(c.alpha, c.beta);
                break;
            case Family::IsoElastic:
                for (std::size_t k = 0; k < K; ++k) {
                    s.iso_a[k] *= std::exp(0.5 * offset[k]);
                    s.iso_e[k] *= factor;
                }
                break;
            case Family::Linear:
                for (std::size_t k = 0; k < K; ++k) {
                    s.lin_a[k] = std::max(0.05 / static_cast<double>(K), s.lin_a[k] * std::exp(0.5 * offset[k]));
                    s.lin_b[k] *= factor;
                }
                break;
        }
        return s;
    }
};

struct WhatIfPair {
    PriceVector price;
    double revenue = 0.0;
};

struct DatasetRow {
    SegmentAttributes z{};
    std::vector<WhatIfPair> whatif;
    PriceVector label;
    // Not part of the CSV row; kept in the sidecar metadata.
    ChoiceModelSpec spec;
    std::vector<double> elasticity_target;  // own elasticities at the label price
};

struct DatasetMeta {
    Family family = Family::MNL;
    std::size_t K = 0;
    std::uint64_t seed = 0;
    double elasticity_low = -3.0;
    double elasticity_high = -1.0;
    std::string baseline_id = "none";
    int regenerations = 0;
    ChoiceModelSpec base_spec;
};

struct ChoiceDataset {
    DatasetMeta meta;
    std::vector<DatasetRow> rows;
};

struct DatasetOptions {
    SampleOptions sample;
    LabelOptions label;
    std::optional<Family> family;
    int max_regenerations = 10;
};

inline std::vector<double> own_elasticities(const ChoiceModelSpec &spec, const PriceVector &p) {
    std::vector<double> e(spec.K, 0.0);
    try {
        const auto E = elasticity_matrix(spec, p, ElasticityMode::FiniteDifference).E;
        for (std::size_t k = 0; k < spec.K; ++k) e[k] = E[k][k];
    } catch (const Error &) {
        // zero demand at the label: leave zeros
    }
    return e;
}

/// Expected revenue at a what-if price. Iso-elastic demand is undefined at
/// p = 0, so zero prices are evaluated at the right limit p -> 0+.
inline double whatif_revenue(const ChoiceModelSpec &spec, const PriceVector &p) {
    if (spec.family != Family::IsoElastic) return expected_revenue(spec, p);
    PriceVector q = p;
    for (double &x : q) x = std::max(x, 1e-300);
    const auto probs = choice_probs(spec, q);
    double r = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) r += p[k] * probs.inside[k];
    return r;
}

namespace detail {

inline ChoiceDataset build_dataset_once(std::uint64_t seed, const DatasetOptions &opt) {
    Rng rng(seed);
    ChoiceDataset ds;
    ds.meta.seed = seed;
    ds.meta.elasticity_low = opt.sample.elasticity_low;
    ds.meta.elasticity_high = opt.sample.elasticity_high;
    ds.meta.base_spec = sample_spec(rng, opt.family, opt.sample);
    ds.meta.family = ds.meta.base_spec.family;
    ds.meta.K = ds.meta.base_spec.K;
    const auto map = SegmentMap::draw(rng, ds.meta.K);

    ds.rows.reserve(kNumSegments);
    for (std::size_t seg = 0; seg < kNumSegments; ++seg) {
        DatasetRow row;
        row.z = segment_attributes(seg);
        double strength = 1.0;
        row.spec = map.apply(ds.meta.base_spec, row.z, strength);
        while (!elasticity_in_range(row.spec, opt.sample) && strength > 1.0 / 64.0) {
            strength *= 0.5;
            row.spec = map.apply(ds.meta.base_spec, row.z, strength);
        }
        if (!elasticity_in_range(row.spec, opt.sample)) row.spec = ds.meta.base_spec;

        for (auto &p : sample_whatif_prices(rng, ds.meta.K)) {
            const double r = whatif_revenue(row.spec, p);
            row.whatif.push_back({std::move(p), r});
        }
        auto label = label_prices(row.spec, opt.label);
        for (double x : label.price) {
            if (!std::isfinite(x)) throw Error(ErrorKind::Domain, "non-finite label price");
        }
        row.label = std::move(label.price);
        row.elasticity_target = own_elasticities(row.spec, row.label);
        ds.rows.push_back(std::move(row));
    }
    return ds;
}

}  // namespace detail

inline ChoiceDataset build_dataset(std::uint64_t seed, const DatasetOptions &opt = {}) {
    for (int attempt = 0; attempt <= opt.max_regenerations; ++attempt) {
        const std::uint64_t sub = attempt == 0 ? seed : derive_seed(seed, 0x10000 + static_cast<std::uint64_t>(attempt));
        try {
            auto ds = detail::build_dataset_once(sub, opt);
            ds.meta.seed = seed;
            ds.meta.regenerations = attempt;
            return ds;
        } catch (const Error &e) {
            std::clog << "c3po: dataset seed " << seed << " attempt " << attempt << " failed (" << e.what()
                      << "); regenerating\n";
        }
    }
    throw Error(ErrorKind::SamplingFailure, "dataset generation failed after regeneration budget");
}

/// Builds n datasets with sub-seeds derived from (seed, index). Output is
/// independent of the worker count.
inline std::vector<ChoiceDataset> build_datasets(std::uint64_t seed, std::size_t n, const DatasetOptions &opt = {},
                                                 unsigned workers = 1) {
    std::vector<ChoiceDataset> out(n);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) out[i] = build_dataset(derive_seed(seed, i), opt);
    };
    if (workers <= 1) {
        work();
        return out;
    }
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto &t : pool) t.join();
    return out;
}

struct HoldoutSplit {
    std::size_t train = 0;
    std::size_t icl = 0;
    std::size_t eval = 0;
};

/// 12,000 train / 13 ICL / remainder eval out of 13,000, scaled to n.
inline HoldoutSplit holdout_split(std::size_t n) {
    HoldoutSplit s;
    if (n == 0) return s;
    s.icl = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * 13.0 / 13000.0)));
    s.train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * 12000.0 / 13000.0));
    if (s.train + s.icl > n) s.train = n - s.icl;
    s.eval = n - s.train - s.icl;
    return s;
}

inline PriceVector normalize_prices(const PriceVector &p, double baseline) {
    if (!(baseline > 0.0)) throw Error(ErrorKind::InvalidBaseline, "baseline price must be > 0");
    PriceVector out(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = p[k] / baseline - 1.0;
    return out;
}

inline PriceVector denormalize_prices(const PriceVector &p, double baseline) {
    if (!(baseline > 0.0)) throw Error(ErrorKind::InvalidBaseline, "baseline price must be > 0");
    PriceVector out(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) out[k] = (p[k] + 1.0) * baseline;
    return out;
}

struct IclScales {
    double feature = 1.0;
    double price = 1.0;
    double revenue = 1.0;
    std::vector<std::string> warnings;
};

inline IclScales icl_scales(const ChoiceDataset &icl) {
    double fmax = 0.0, pmax = 0.0, rmax = 0.0;
    for (const auto &row : icl.rows) {
        for (int v : row.z) fmax = std::max(fmax, static_cast<double>(v));
        for (const auto &w : row.whatif) {
            for (double x : w.price) pmax = std::max(pmax, x);
            rmax = std::max(rmax, w.revenue);
        }
        for (double x : row.label) pmax = std::max(pmax, x);
    }
    IclScales s;
    auto pick = [&](double m, double &dst, const char *name) {
        if (m > 0.0) {
            dst = m;
        } else {
            s.warnings.push_back(std::string("ICL max of ") + name + " is 0; leaving that column unscaled");
        }
    };
    pick(fmax, s.feature, "features");
    pick(pmax, s.price, "prices");
    pick(rmax, s.revenue, "revenues");
    return s;
}

/// Scaled copy of `data`. Attribute values are carried as doubles by the
/// network; the integer attributes here are rescaled only when their ICL max
/// differs from 1, in which case values are rounded.
inline ChoiceDataset scale_by_icl_max(const ChoiceDataset &data, const ChoiceDataset &icl) {
    const auto s = icl_scales(icl);
    for (const auto &w : s.warnings) std::clog << "c3po: " << w << '\n';
    ChoiceDataset out = data;
    for (auto &row : out.rows) {
        for (int &v : row.z) v = static_cast<int>(std::lround(v / s.feature));
        for (auto &w : row.whatif) {
            for (double &x : w.price) x /= s.price;
            w.revenue /= s.revenue;
        }
        for (double &x : row.label) x /= s.price;
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV + sidecar metadata

namespace detail {

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_csv(const std::string &line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace detail

inline std::vector<std::string> csv_header(std::size_t K) {
    std::vector<std::string> h;
    for (std::size_t l = 1; l <= kNumAttributes; ++l) h.push_back("z_" + std::to_string(l));
    for (std::size_t w = 1; w <= kNumWhatIf; ++w) {
        char prefix[16];
        std::snprintf(prefix, sizeof prefix, "w%02zu_", w);
        for (std::size_t k = 1; k <= K; ++k) h.push_back(prefix + std::string("p_") + std::to_string(k));
        h.push_back(prefix + std::string("r"));
    }
    for (std::size_t k = 1; k <= K; ++k) h.push_back("y_" + std::to_string(k));
    return h;
}

inline void write_csv(const ChoiceDataset &ds, std::ostream &os) {
    const auto header = csv_header(ds.meta.K);
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << '\n';
    for (const auto &row : ds.rows) {
        std::string line;
        for (std::size_t l = 0; l < kNumAttributes; ++l) line += (l ? "," : "") + std::to_string(row.z[l]);
        for (const auto &w : row.whatif) {
            for (double x : w.price) line += "," + detail::num(x);
            line += "," + detail::num(w.revenue);
        }
        for (double x : row.label) line += "," + detail::num(x);
        os << line << '\n';
    }
}

/// Reads rows back; K is recovered from the column count. Specs and
/// elasticity targets come from the metadata, not the CSV.
inline ChoiceDataset read_csv(std::istream &is) {
    std::string line;
    if (!std::getline(is, line)) throw Error(ErrorKind::EmptyInput, "dataset CSV is empty");
    const auto header = detail::split_csv(line);
    const std::size_t width = header.size();
    if (width < row_width(1) || (width - kNumAttributes - kNumWhatIf) % (kNumWhatIf + 1) != 0) {
        throw Error(ErrorKind::Shape, "dataset CSV has " + std::to_string(width) + " columns, which fits no K");
    }
    const std::size_t K = (width - kNumAttributes - kNumWhatIf) / (kNumWhatIf + 1);
    ChoiceDataset ds;
    ds.meta.K = K;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = detail::split_csv(line);
        if (cells.size() != width) {
            throw Error(ErrorKind::Shape, "row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                                              " columns, expected " + std::to_string(width));
        }
        DatasetRow row;
        std::size_t c = 0;
        try {
            for (std::size_t l = 0; l < kNumAttributes; ++l) row.z[l] = std::stoi(cells[c++]);
            for (std::size_t w = 0; w < kNumWhatIf; ++w) {
                WhatIfPair pair;
                for (std::size_t k = 0; k < K; ++k) pair.price.push_back(std::stod(cells[c++]));
                pair.revenue = std::stod(cells[c++]);
                row.whatif.push_back(std::move(pair));
            }
            for (std::size_t k = 0; k < K; ++k) row.label.push_back(std::stod(cells[c++]));
        } catch (const std::exception &) {
            throw Error(ErrorKind::InvalidSpec, "unparseable value on CSV row " + std::to_string(line_no));
        }
        ds.rows.push_back(std::move(row));
    }
    return ds;
}

inline nlohmann::json meta_to_json(const ChoiceDataset &ds) {
    nlohmann::json specs = nlohmann::json::array();
    nlohmann::json targets = nlohmann::json::array();
    for (const auto &row : ds.rows) {
        specs.push_back(to_json(row.spec));
        targets.push_back(row.elasticity_target);
    }
    return {{"schema_version", kDatasetSchemaVersion},
            {"family", family_name(ds.meta.family)},
            {"K", ds.meta.K},
            {"seed", ds.meta.seed},
            {"elasticity_range", {ds.meta.elasticity_low, ds.meta.elasticity_high}},
            {"normalization_baseline", ds.meta.baseline_id},
            {"regenerations", ds.meta.regenerations},
            {"n_rows", ds.rows.size()},
            {"columns", row_width(ds.meta.K)},
            {"base_spec", to_json(ds.meta.base_spec)},
            {"segment_specs", specs},
            {"elasticity_targets", targets}};
}

/// Restores metadata, per-row specs and elasticity targets onto rows read from CSV.
inline void attach_meta(ChoiceDataset &ds, const nlohmann::json &j) {
    if (j.value("schema_version", 0) != kDatasetSchemaVersion) {
        throw Error(ErrorKind::SchemaVersion, "unsupported dataset metadata schema_version");
    }
    try {
        ds.meta.family = family_from_name(j.at("family").get<std::string>());
        ds.meta.K = j.at("K").get<std::size_t>();
        ds.meta.seed = j.at("seed").get<std::uint64_t>();
        ds.meta.elasticity_low = j.at("elasticity_range").at(0).get<double>();
        ds.meta.elasticity_high = j.at("elasticity_range").at(1).get<double>();
        ds.meta.baseline_id = j.value("normalization_baseline", "none");
        ds.meta.regenerations = j.value("regenerations", 0);
        ds.meta.base_spec = spec_from_json(j.at("base_spec"));
        const auto &specs = j.at("segment_specs");
        const auto &targets = j.at("elasticity_targets");
        if (specs.size() != ds.rows.size() || targets.size() != ds.rows.size()) {
            throw Error(ErrorKind::Shape, "metadata row count does not match the CSV");
        }
        for (std::size_t i = 0; i < ds.rows.size(); ++i) {
            ds.rows[i].spec = spec_from_json(specs[i]);
            ds.rows[i].elasticity_target = targets[i].get<std::vector<double>>();
        }
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::InvalidSpec, std::string("malformed dataset metadata: ") + e.what());
    }
}

}  // namespace c3po
