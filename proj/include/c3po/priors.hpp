#pragma once

// Elasticity priors: plausible own-price elasticity ranges per product
// category. The built-in provider is a static textbook table; callers can
// override it with a JSON file or plug in their own provider.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/error.hpp"

namespace c3po {

enum class PriorSource { TextbookTable, UserSupplied, Default };

inline std::string source_name(PriorSource s) {
    switch (s) {
        case PriorSource::TextbookTable: return "TextbookTable";
        case PriorSource::UserSupplied: return "UserSupplied";
        case PriorSource::Default: return "Default";
    }
    return "?";
}

struct ElasticityPrior {
    std::string category;
    double low = -3.0;
    double high = -1.0;
    PriorSource source = PriorSource::Default;
};

inline constexpr double kDefaultPriorLow = -3.0;
inline constexpr double kDefaultPriorHigh = -1.0;

enum class ElasticityClass { Elastic, Inelastic, Mixed };

inline std::string class_name(ElasticityClass c) {
    switch (c) {
        case ElasticityClass::Elastic: return "Elastic";
        case ElasticityClass::Inelastic: return "Inelastic";
        case ElasticityClass::Mixed: return "Mixed";
    }
    return "?";
}

inline ElasticityClass classify(double low, double high) {
    if (high <= -1.0) return ElasticityClass::Elastic;
    if (low >= -1.0) return ElasticityClass::Inelastic;
    return ElasticityClass::Mixed;
}

inline ElasticityClass classify(const ElasticityPrior &p) { return classify(p.low, p.high); }

inline std::string normalize_category(std::string key) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    key.erase(key.begin(), std::find_if(key.begin(), key.end(), not_space));
    key.erase(std::find_if(key.rbegin(), key.rend(), not_space).base(), key.end());
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    return key;
}

/// Bundled table: category -> [low, high]; point estimates are degenerate ranges.
inline constexpr const char *kBundledPriorsJson = R"json({
  "schema_version": 1,
  "priors": [
    {"category": "Water (basic consumption)", "low": -0.1, "high": -0.1},
    {"category": "Electricity (short-run)",   "low": -0.3, "high": -0.1},
    {"category": "Gasoline (short-run)",      "low": -0.3, "high": -0.2},
    {"category": "Milk",                      "low": -0.5, "high": -0.5},
    {"category": "Gasoline (long-run)",       "low": -0.8, "high": -0.6},
    {"category": "Electricity (long-run)",    "low": -0.7, "high": -0.7},
    {"category": "Restaurant meals",          "low": -2.3, "high": -2.3},
    {"category": "Air travel (long-run)",     "low": -2.0, "high": -2.0},
    {"category": "Luxury goods",              "low": -3.0, "high": -1.5},
    {"category": "Automobiles (long-run)",    "low": -1.5, "high": -1.2}
  ]
})json";

class PriorProvider {
   public:
    virtual ~PriorProvider() = default;
    virtual std::optional<ElasticityPrior> find(const std::string &category) const = 0;
};

class StaticPriorTable : public PriorProvider {
   public:
    static StaticPriorTable bundled() { return from_json(nlohmann::json::parse(kBundledPriorsJson), PriorSource::TextbookTable); }

    static StaticPriorTable from_file(const std::string &path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::Io, "cannot open priors file '" + path + "'");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception &e) {
            throw Error(ErrorKind::InvalidSpec, std::string("malformed priors file: ") + e.what());
        }
        return from_json(j, PriorSource::UserSupplied);
    }

    static StaticPriorTable from_json(const nlohmann::json &j, PriorSource source) {
        if (j.value("schema_version", 1) != 1) throw Error(ErrorKind::SchemaVersion, "unsupported priors schema_version");
        StaticPriorTable t;
        try {
            for (const auto &e : j.at("priors")) {
                ElasticityPrior p{e.at("category").get<std::string>(), e.at("low").get<double>(),
                                  e.at("high").get<double>(), source};
                if (!(p.low <= p.high && p.high < 0.0)) {
                    throw Error(ErrorKind::InvalidSpec, "prior range for '" + p.category + "' must satisfy low <= high < 0");
                }
                t.entries_[normalize_category(p.category)] = p;
            }
        } catch (const nlohmann::json::exception &e) {
            throw Error(ErrorKind::InvalidSpec, std::string("malformed priors table: ") + e.what());
        }
        return t;
    }

    std::optional<ElasticityPrior> find(const std::string &category) const override {
        const auto it = entries_.find(normalize_category(category));
        if (it == entries_.end()) return std::nullopt;
        return it->second;
    }

    std::vector<ElasticityPrior> entries() const {
        std::vector<ElasticityPrior> out;
        for (const auto &[_, p] : entries_) out.push_back(p);
        return out;
    }

   private:
    std::map<std::string, ElasticityPrior> entries_;
};

/// Total lookup: a miss returns the training range (-3, -1) flagged Default.
inline ElasticityPrior lookup(const PriorProvider &provider, const std::string &category) {
    if (auto hit = provider.find(category)) return *hit;
    return {category, kDefaultPriorLow, kDefaultPriorHigh, PriorSource::Default};
}

inline ElasticityPrior lookup(const std::string &category) {
    static const StaticPriorTable table = StaticPriorTable::bundled();
    return lookup(table, category);
}

inline nlohmann::json to_json(const ElasticityPrior &p) {
    return {{"category", p.category},
            {"range", {p.low, p.high}},
            {"source", source_name(p.source)},
            {"class", class_name(classify(p))}};
}

}  // namespace c3po
