// c3po_cli: data generation, labelling, training, prediction and evaluation.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "c3po/c3po_net.hpp"
#include "c3po/constraints.hpp"
#include "c3po/datagen.hpp"
#include "c3po/metrics.hpp"
#include "c3po/price_opt.hpp"
#include "c3po/priors.hpp"

namespace fs = std::filesystem;
using namespace c3po;
using nlohmann::json;

namespace {

constexpr const char *kToolVersion = "0.1.0";

std::string out_dir_default() {
    const char *env = std::getenv("C3PO_OUT_DIR");
    return env && *env ? env : ".";
}

// Relative output names land in $C3PO_OUT_DIR when it is set.
std::string out_path(const std::string &given, const std::string &fallback) {
    if (!given.empty()) return given;
    return (fs::path(out_dir_default()) / fallback).string();
}

std::ifstream open_in(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::Io, "cannot open " + path);
    return is;
}

std::ofstream open_out(const std::string &path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cannot write " + path);
    return os;
}

json read_json(const std::string &path) {
    auto is = open_in(path);
    try {
        return json::parse(is);
    } catch (const json::parse_error &e) {
        throw Error(ErrorKind::InvalidSpec, path + ": " + e.what());
    }
}

void write_text(const std::string &path, const std::string &text) {
    auto os = open_out(path);
    os << text;
}

std::string num(double v) { return detail::num(v); }

// A spec file holds one spec object, an array of specs, or {"specs": [...]}.
std::vector<json> json_list(const json &j, const char *key) {
    if (j.is_array()) return {j.begin(), j.end()};
    if (j.is_object() && j.contains(key)) return {j.at(key).begin(), j.at(key).end()};
    return {j};
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

Table read_table(const std::string &path) {
    auto is = open_in(path);
    Table t;
    std::string line;
    if (!std::getline(is, line)) throw Error(ErrorKind::EmptyInput, path + " is empty");
    t.header = detail::split_csv(line);
    std::size_t n = 1;
    while (std::getline(is, line)) {
        ++n;
        if (line.empty()) continue;
        const auto cells = detail::split_csv(line);
        if (cells.size() != t.header.size()) {
            throw Error(ErrorKind::Shape, path + ": row " + std::to_string(n) + " has " +
                                              std::to_string(cells.size()) + " columns, expected " +
                                              std::to_string(t.header.size()));
        }
        std::vector<double> row;
        for (const auto &c : cells) {
            try {
                row.push_back(std::stod(c));
            } catch (const std::exception &) {
                throw Error(ErrorKind::InvalidSpec, path + ": unparseable value '" + c + "' on row " + std::to_string(n));
            }
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

std::vector<std::size_t> columns_with_prefix(const Table &t, const std::string &prefix) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < t.header.size(); ++i) {
        if (t.header[i].rfind(prefix, 0) == 0) idx.push_back(i);
    }
    return idx;
}

std::size_t column(const Table &t, const std::string &name, const std::string &path) {
    const auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) throw Error(ErrorKind::Shape, path + ": missing column " + name);
    return static_cast<std::size_t>(it - t.header.begin());
}

PriceVector pick(const std::vector<double> &row, const std::vector<std::size_t> &cols) {
    PriceVector p;
    for (auto c : cols) p.push_back(row[c]);
    return p;
}

std::string price_header(const std::string &prefix, std::size_t K) {
    std::string h;
    for (std::size_t k = 1; k <= K; ++k) h += "," + prefix + std::to_string(k);
    return h;
}

std::string meta_path_for(const fs::path &csv) {
    auto p = csv;
    p.replace_extension(".meta.json");
    return p.string();
}

ChoiceDataset load_dataset(const std::string &path) {
    auto is = open_in(path);
    auto ds = read_csv(is);
    const auto meta = meta_path_for(path);
    if (fs::exists(meta)) attach_meta(ds, read_json(meta));
    return ds;
}

bool is_dataset_csv(const fs::path &p) {
    const auto name = p.filename().string();
    const auto ends = [&](const std::string &s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return name.rfind("dataset_", 0) == 0 && ends(".csv") && !ends(".truth.csv");
}

std::vector<ChoiceDataset> load_dataset_dir(const std::string &dir) {
    if (!fs::is_directory(dir)) throw Error(ErrorKind::Io, "not a directory: " + dir);
    std::vector<fs::path> files;
    for (const auto &e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_dataset_csv(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error(ErrorKind::EmptyInput, "no dataset_*.csv files in " + dir);
    std::vector<ChoiceDataset> out;
    for (const auto &f : files) out.push_back(load_dataset(f.string()));
    return out;
}

// Realised outcome for the first what-if price of every row: one simulated
// customer draw under the row's own demand model.
std::string truth_csv(const ChoiceDataset &ds) {
    const std::size_t K = ds.meta.K;
    std::string s = "row" + price_header("a_", K) + ",won,actual_revenue" + price_header("y_", K) + "\n";
    Rng rng(derive_seed(ds.meta.seed, 0x7A11));
    for (std::size_t i = 0; i < ds.rows.size(); ++i) {
        const auto &row = ds.rows[i];
        PriceVector a = row.whatif.front().price;
        PriceVector eval = a;
        if (row.spec.family == Family::IsoElastic) {
            for (double &x : eval) x = std::max(x, 1e-300);
        }
        const auto choice = simulate_choice(row.spec, eval, rng);
        const double rev = choice == 0 ? 0.0 : a[choice - 1];
        s += std::to_string(i);
        for (double x : a) s += "," + num(x);
        s += "," + std::to_string(choice != 0 ? 1 : 0) + "," + num(rev);
        for (double x : row.label) s += "," + num(x);
        s += "\n";
    }
    return s;
}

json manifest(const std::string &command, int argc, char **argv, const json &seeds) {
    std::vector<std::string> args(argv, argv + argc);
    return {{"tool", "c3po_cli"},
            {"tool_version", kToolVersion},
            {"command", command},
            {"argv", args},
            {"seeds", seeds},
            {"libraries",
             {{"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
              {"CLI11", CLI11_VERSION},
              {"compiler", __VERSION__}}},
            {"schema_versions",
             {{"spec", kSpecSchemaVersion}, {"dataset", kDatasetSchemaVersion}, {"checkpoint", kCheckpointVersion}}}};
}

void fail(const std::string &kind, const std::string &message) {
    std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Choice-model pricing toolkit: simulate data, label optimal prices, train and evaluate the pricing net"};
    app.require_subcommand(1);
    std::string manifest_path;
    app.add_option("--manifest", manifest_path, "write a replay manifest (versions, argv, seeds) to this path");

    // gen-data
    auto *gen = app.add_subcommand("gen-data", "generate simulated choice datasets");
    std::uint64_t gen_seed = 0;
    std::size_t gen_n = 1;
    std::string gen_out, gen_family;
    unsigned gen_workers = 1;
    bool gen_truth = false;
    gen->add_option("--seed", gen_seed, "master seed")->required();
    gen->add_option("--n-datasets", gen_n, "number of datasets")->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output directory (default $C3PO_OUT_DIR or .)");
    gen->add_option("--family", gen_family, "force one family: MNL, NestedLogit, MixedMNL, IsoElastic, Linear");
    gen->add_option("--workers", gen_workers, "worker threads; output does not depend on it");
    gen->add_flag("--with-truth", gen_truth, "also write simulated outcomes for eval (dataset_XXXX.truth.csv)");

    // label
    auto *lab = app.add_subcommand("label", "optimal price labels for spec JSON");
    std::string lab_spec, lab_out;
    double lab_upper = 5.0;
    lab->add_option("--spec", lab_spec, "spec JSON (object, array, or {\"specs\": [...]})")->required();
    lab->add_option("--out", lab_out, "labels JSON (default $C3PO_OUT_DIR/labels.json)");
    lab->add_option("--upper", lab_upper, "upper price bound for non-logit solvers");

    // train
    auto *tr = app.add_subcommand("train", "train the pricing net on a dataset directory");
    std::string tr_data, tr_out, tr_log;
    std::uint64_t tr_seed = 0;
    std::size_t tr_steps = 0, tr_epochs = 0;
    double tr_lr = 0.0;
    bool tr_paper = false;
    AblationFlags tr_abl;
    tr->add_option("--data", tr_data, "directory with dataset_*.csv (+ .meta.json)")->required();
    tr->add_option("--out", tr_out, "checkpoint path (default $C3PO_OUT_DIR/model.ckpt)");
    tr->add_option("--seed", tr_seed, "initialisation and batching seed");
    tr->add_option("--steps-per-dataset", tr_steps, "optimizer steps per dataset");
    tr->add_option("--epochs", tr_epochs, "passes over the dataset list");
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_flag("--paper-scale", tr_paper, "full-size architecture instead of the desk-scale one");
    tr->add_option("--loss-log", tr_log, "write per-step loss terms as CSV");
    tr->add_flag("--icl-off", tr_abl.icl_off, "ICL-OFF: no context rows");
    tr->add_flag("--imitation-only", tr_abl.imitation_only, "IMITATION-ONLY: price and constraint losses only");
    tr->add_flag("--prior-off", tr_abl.prior_off, "PRIOR-OFF: drop the prior channel and hinge loss");
    tr->add_flag("--simple-icl", tr_abl.simple_icl, "SIMPLE-ICL: cap context at 100 rows");
    tr->add_flag("--constraint-on", tr_abl.constraint_on, "CONSTRAINT-ON: project predictions at inference");

    // predict
    auto *pr = app.add_subcommand("predict", "predict prices for the query rows of a dataset");
    std::string pr_ckpt, pr_data, pr_out, pr_cons;
    double pr_frac = -1.0;
    std::uint64_t pr_split_seed = 0;
    bool pr_project = false;
    pr->add_option("--checkpoint", pr_ckpt, "checkpoint from train")->required();
    pr->add_option("--data", pr_data, "dataset CSV")->required();
    pr->add_option("--out", pr_out, "predictions CSV (default $C3PO_OUT_DIR/predictions.csv)");
    pr->add_option("--context-fraction", pr_frac, "share of rows used as labelled context (default: from checkpoint)");
    pr->add_option("--split-seed", pr_split_seed, "seed of the context/query split");
    pr->add_option("--constraints", pr_cons, "ConstraintSet JSON");
    pr->add_flag("--constraint-on", pr_project, "project predictions onto --constraints");

    // eval
    auto *ev = app.add_subcommand("eval", "score predictions against simulated outcomes");
    std::string ev_pred, ev_truth, ev_format = "json", ev_cons, ev_name = "model", ev_out;
    MetricsOptions ev_opt;
    ev->add_option("--predictions", ev_pred, "predictions CSV (row,p_1..p_K)")->required();
    ev->add_option("--truth", ev_truth, "truth CSV from gen-data --with-truth")->required();
    ev->add_option("--format", ev_format, "json, csv or table")->check(CLI::IsMember({"json", "csv", "table"}));
    ev->add_option("--name", ev_name, "row label in table/csv output");
    ev->add_flag("--per-product", ev_opt.per_product, "score every product instead of the primary one");
    ev->add_flag("--extended-br", ev_opt.extended_br, "experimental BR that also charges avoidable losses");
    ev->add_option("--constraints", ev_cons, "also report violations of this ConstraintSet");
    ev->add_option("--out", ev_out, "write here instead of stdout");

    // project
    auto *pj = app.add_subcommand("project", "clamp and redistribute prices onto a constraint set");
    std::string pj_prices, pj_cons, pj_out, pj_report;
    pj->add_option("--prices", pj_prices, "prices CSV (optional row column, then p_ columns)")->required();
    pj->add_option("--constraints", pj_cons, "ConstraintSet JSON")->required();
    pj->add_option("--out", pj_out, "projected prices CSV (default $C3PO_OUT_DIR/projected.csv)");
    pj->add_option("--report", pj_report, "violation report JSON (default stdout)");

    // foc-check
    auto *fc = app.add_subcommand("foc-check", "first-order-condition residual of labels");
    std::string fc_spec, fc_labels;
    fc->add_option("--spec", fc_spec, "spec JSON used for label")->required();
    fc->add_option("--labels", fc_labels, "labels JSON from label")->required();

    // prior
    auto *pri = app.add_subcommand("prior", "elasticity prior for a product category");
    std::string pri_cat, pri_file;
    pri->add_option("--category", pri_cat, "category name")->required();
    pri->add_option("--priors-file", pri_file, "user priors JSON replacing the bundled table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ExtrasError &e) {
        fail("unknown-flag", e.what());
        return 2;
    } catch (const CLI::RequiredError &e) {
        fail("missing-flag", e.what());
        return 2;
    } catch (const CLI::ParseError &e) {
        fail("usage", e.what());
        return 2;
    }

    try {
        std::string command;
        json seeds = json::object();

        if (*gen) {
            command = "gen-data";
            DatasetOptions opt;
            if (!gen_family.empty()) opt.family = family_from_name(gen_family);
            const auto dir = gen_out.empty() ? out_dir_default() : gen_out;
            fs::create_directories(dir);
            const auto all = build_datasets(gen_seed, gen_n, opt, std::max(1u, gen_workers));
            for (std::size_t i = 0; i < all.size(); ++i) {
                char stem[32];
                std::snprintf(stem, sizeof stem, "dataset_%04zu", i);
                const auto base = fs::path(dir) / stem;
                std::ostringstream csv;
                write_csv(all[i], csv);
                write_text(base.string() + ".csv", csv.str());
                write_text(base.string() + ".meta.json", meta_to_json(all[i]).dump(2) + "\n");
                if (gen_truth) write_text(base.string() + ".truth.csv", truth_csv(all[i]));
            }
            seeds = {{"seed", gen_seed}, {"n_datasets", gen_n}};
            std::cout << json{{"datasets", all.size()}, {"out", dir}}.dump() << '\n';
        } else if (*lab) {
            command = "label";
            LabelOptions lo;
            lo.upper = lab_upper;
            const auto input = read_json(lab_spec);
            json labels = json::array();
            for (const auto &sj : json_list(input, "specs")) labels.push_back(to_json(label_prices(spec_from_json(sj), lo)));
            const json out = input.is_object() && !input.contains("specs") ? labels.at(0) : labels;
            write_text(out_path(lab_out, "labels.json"), out.dump(2) + "\n");
        } else if (*tr) {
            command = "train";
            auto cfg = tr_paper ? C3POConfig::paper_scale() : C3POConfig::desk_scale();
            cfg.seed = tr_seed;
            if (tr_steps) cfg.steps_per_dataset = tr_steps;
            if (tr_epochs) cfg.epochs = tr_epochs;
            if (tr_lr > 0.0) cfg.lr = tr_lr;
            cfg.ablations = tr_abl;
            const auto datasets = load_dataset_dir(tr_data);
            PolicyState state(cfg);
            std::string log = "step,dataset,total,price,revenue,reward,elasticity,anchor,prior,constraint\n";
            std::size_t step = 0;
            train(state, datasets, [&](std::size_t d, const LossTerms &t) {
                log += std::to_string(step++) + "," + std::to_string(d);
                for (double v : {t.total, t.price, t.revenue, t.reward, t.elasticity, t.anchor, t.prior, t.constraint})
                    log += "," + num(v);
                log += "\n";
            });
            save_checkpoint(state, out_path(tr_out, "model.ckpt"));
            if (!tr_log.empty()) write_text(tr_log, log);
            seeds = {{"seed", tr_seed}};
            std::cout << json{{"steps", state.step}, {"parameters", state.net.parameter_count()}}.dump() << '\n';
        } else if (*pr) {
            command = "predict";
            const auto state = load_checkpoint(pr_ckpt);
            const auto ds = load_dataset(pr_data);
            const double frac = pr_frac >= 0.0 ? pr_frac : state.net.config().context_fraction;
            const auto [ctx, queries] = eval_split(ds, frac, pr_split_seed);
            std::optional<ConstraintSet> cs;
            if (!pr_cons.empty()) cs = constraints_from_json(read_json(pr_cons));
            auto prices = predict(state.net, ctx, queries, ds.meta.K, ds.meta.elasticity_low, ds.meta.elasticity_high,
                                  cs ? &*cs : nullptr);
            if (pr_project) {
                if (!cs) throw Error(ErrorKind::InvalidSpec, "--constraint-on needs --constraints");
                for (auto &p : prices) p = clamp_redistribute(p, *cs);
            }
            std::string out = "row" + price_header("p_", ds.meta.K) + "\n";
            for (std::size_t i = 0; i < queries.size(); ++i) {
                out += std::to_string(static_cast<std::size_t>(queries[i] - ds.rows.data()));
                for (double x : prices[i]) out += "," + num(x);
                out += "\n";
            }
            write_text(out_path(pr_out, "predictions.csv"), out);
            seeds = {{"split_seed", pr_split_seed}};
        } else if (*ev) {
            command = "eval";
            const auto pred = read_table(ev_pred);
            const auto truth = read_table(ev_truth);
            const auto p_cols = columns_with_prefix(pred, "p_");
            const auto a_cols = columns_with_prefix(truth, "a_");
            const auto y_cols = columns_with_prefix(truth, "y_");
            if (p_cols.empty() || p_cols.size() != a_cols.size()) {
                throw Error(ErrorKind::Shape, "prediction and truth product counts differ");
            }
            const auto pred_row = column(pred, "row", ev_pred), truth_row = column(truth, "row", ev_truth);
            const auto won = column(truth, "won", ev_truth), rev = column(truth, "actual_revenue", ev_truth);
            std::map<long long, const std::vector<double> *> by_row;
            for (const auto &r : truth.rows) by_row[std::llround(r[truth_row])] = &r;
            std::vector<EvalRecord> records;
            std::vector<PriceVector> recommended;
            for (const auto &r : pred.rows) {
                const auto it = by_row.find(std::llround(r[pred_row]));
                if (it == by_row.end()) throw Error(ErrorKind::Shape, "prediction row has no truth row");
                const auto &t = *it->second;
                EvalRecord e;
                e.actual_price = pick(t, a_cols);
                e.recommended_price = pick(r, p_cols);
                if (!y_cols.empty()) e.label = pick(t, y_cols);
                e.won = t[won] != 0.0;
                e.actual_revenue = t[rev];
                recommended.push_back(e.recommended_price);
                records.push_back(std::move(e));
            }
            const auto report = compute_metrics(records, ev_opt);
            std::optional<ViolationReport> viol;
            if (!ev_cons.empty()) viol = violation_report(recommended, constraints_from_json(read_json(ev_cons)));
            std::string text;
            if (ev_format == "json") {
                auto j = to_json(report);
                j["n_records"] = records.size();
                j["strong"] = is_strong(report);
                if (viol) j["violations"] = to_json(*viol);
                text = j.dump(2) + "\n";
            } else if (ev_format == "table") {
                text = metrics_table({{ev_name, report}});
                if (viol) text += "\n" + violation_table(*viol);
            } else {
                const auto opt_num = [](const std::optional<double> &v) { return v ? num(*v) : std::string(); };
                text = "name,MAE,PDR,PIR,BR\n" + ev_name + "," + num(report.mae) + "," + opt_num(report.pdr) + "," +
                       opt_num(report.pir) + "," + opt_num(report.br) + "\n";
            }
            if (ev_out.empty()) {
                std::cout << text;
            } else {
                write_text(ev_out, text);
            }
        } else if (*pj) {
            command = "project";
            const auto t = read_table(pj_prices);
            const auto cs = constraints_from_json(read_json(pj_cons));
            auto p_cols = columns_with_prefix(t, "p_");
            if (p_cols.empty()) {
                for (std::size_t i = 0; i < t.header.size(); ++i) {
                    if (t.header[i] != "row") p_cols.push_back(i);
                }
            }
            const bool has_row = std::find(t.header.begin(), t.header.end(), "row") != t.header.end();
            std::vector<PriceVector> before, after;
            std::string out = (has_row ? "row" : "") + price_header("p_", p_cols.size()).substr(has_row ? 0 : 1) + "\n";
            for (std::size_t i = 0; i < t.rows.size(); ++i) {
                before.push_back(pick(t.rows[i], p_cols));
                after.push_back(clamp_redistribute(before.back(), cs));
                std::string line = has_row ? std::to_string(std::llround(t.rows[i][column(t, "row", pj_prices)])) : "";
                for (std::size_t k = 0; k < after.back().size(); ++k) line += (k || has_row ? "," : "") + num(after.back()[k]);
                out += line + "\n";
            }
            write_text(out_path(pj_out, "projected.csv"), out);
            const json report{{"before", to_json(violation_report(before, cs))},
                              {"after", to_json(violation_report(after, cs))}};
            if (pj_report.empty()) {
                std::cout << report.dump(2) << '\n';
            } else {
                write_text(pj_report, report.dump(2) + "\n");
            }
        } else if (*fc) {
            command = "foc-check";
            const auto specs = json_list(read_json(fc_spec), "specs");
            const auto labels = json_list(read_json(fc_labels), "labels");
            if (specs.size() != labels.size()) throw Error(ErrorKind::Shape, "spec and label counts differ");
            double worst = 0.0;
            for (std::size_t i = 0; i < specs.size(); ++i) {
                worst = std::max(worst, max_abs(foc_residual(spec_from_json(specs[i]), label_from_json(labels[i]).price)));
            }
            std::cout << json{{"n", specs.size()}, {"max_residual", worst}}.dump() << '\n';
        } else if (*pri) {
            command = "prior";
            const auto table = pri_file.empty() ? StaticPriorTable::bundled() : StaticPriorTable::from_file(pri_file);
            const auto p = lookup(table, pri_cat);
            auto j = to_json(p);
            j["class"] = class_name(classify(p));
            std::cout << j.dump() << '\n';
        }

        if (!manifest_path.empty()) write_text(manifest_path, manifest(command, argc, argv, seeds).dump(2) + "\n");
        return 0;
    } catch (const Error &e) {
        fail(std::string(to_string(e.kind())), e.what());
    } catch (const fs::filesystem_error &e) {
        fail("io", e.what());
    } catch (const json::exception &e) {
        fail("invalid-spec", e.what());
    } catch (const std::exception &e) {
        fail("internal", e.what());
    }
    return 1;
}
