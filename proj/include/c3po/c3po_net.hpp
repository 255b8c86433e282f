#pragma once

// Desk-scale triple-head pricing network.
//
// Stage 1 encodes each data row on its own: one token per customer attribute,
// one per what-if (price, revenue) pair and an optional elasticity-prior
// token go through a bidirectional transformer and are mean-pooled.
// Stage 2 mixes rows: a set-attention block where every row sees the labelled
// context rows (no positional encoding), then a causally masked in-context
// block. Context rows are placed in a canonical order so that predictions do
// not depend on the order in which examples are supplied.
// Stage 3 has three heads on the query encodings: prices, revenue at a given
// price, and own-price elasticity at a given price.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3po/autodiff.hpp"
#include "c3po/constraints.hpp"
#include "c3po/datagen.hpp"
#include "c3po/error.hpp"
#include "c3po/rng.hpp"

namespace c3po {

struct LossWeights {
    double price = 1.0;
    double revenue = 0.25;
    double reward = 0.25;
    double elasticity = 0.25;
    double anchor = 0.25;
    double prior = 0.75;
    double constraint = 2.0;
};

struct AblationFlags {
    bool icl_off = false;
    bool imitation_only = false;
    bool prior_off = false;
    bool simple_icl = false;
    bool constraint_on = false;
};

struct C3POConfig {
    std::size_t d_model = 32;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t intra_layers = 2;
    std::size_t cross_layers = 2;
    std::size_t icl_layers = 3;
    std::size_t head_hidden = 264;
    std::size_t max_products = 6;

    double context_fraction = 0.30;
    std::size_t batch = 128;
    std::size_t whatif_per_row = 50;
    std::size_t steps_per_dataset = 10;
    std::size_t epochs = 1;  // passes over the dataset list
    std::size_t full_icl_cap = 1600;
    std::size_t simple_icl_cap = 100;

    LossWeights weights;
    double anchor_target = -1.0;
    double price_upper = 5.0;

    double lr = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;

    std::uint64_t seed = 0;
    AblationFlags ablations;

    static C3POConfig paper_scale() { return {}; }

    static C3POConfig desk_scale() {
        C3POConfig c;
        c.d_model = 16;
        c.n_heads = 2;
        c.ffn_mult = 2;
        c.intra_layers = 1;
        c.cross_layers = 1;
        c.icl_layers = 1;
        c.head_hidden = 32;
        c.whatif_per_row = 10;
        c.lr = 1e-3;
        // Few datasets: cycle through them one step at a time so consecutive
        // updates never come from the same price level.
        c.steps_per_dataset = 1;
        c.epochs = 100;
        return c;
    }

    std::size_t icl_cap() const { return ablations.simple_icl ? simple_icl_cap : full_icl_cap; }
};

namespace net {

using ad::Tensor;

struct Linear {
    Tensor W;
    Tensor b;
    Tensor operator()(const Tensor &x) const { return b.defined() ? ad::add(ad::matmul(x, W), b) : ad::matmul(x, W); }
};

struct Norm {
    Tensor gain;
    Tensor bias;
    Tensor operator()(const Tensor &x) const { return ad::layer_norm(x, gain, bias); }
};

struct Block {
    Norm ln1, ln2;
    Linear q, k, v, o, ff1, ff2;
};

struct Mlp {
    Linear l1, l2, l3;
    Tensor operator()(const Tensor &x) const { return l3(ad::relu(l2(ad::relu(l1(x))))); }

    Mlp frozen() const {
        auto f = [](const Linear &l) { return Linear{ad::detach(l.W), ad::detach(l.b)}; };
        return {f(l1), f(l2), f(l3)};
    }
};

}  // namespace net

/// Query rows and labelled context rows for one forward pass. All rows share
/// the same product count K.
struct Batch {
    std::vector<const DatasetRow *> context;
    std::vector<const DatasetRow *> queries;
    std::size_t K = 0;
    double prior_low = -3.0;
    double prior_high = -1.0;
};

/// Strict weak order on rows used to place context examples canonically.
inline bool canonical_less(const DatasetRow *a, const DatasetRow *b) {
    if (a->z != b->z) return a->z < b->z;
    for (std::size_t w = 0; w < std::min(a->whatif.size(), b->whatif.size()); ++w) {
        if (a->whatif[w].price != b->whatif[w].price) return a->whatif[w].price < b->whatif[w].price;
        if (a->whatif[w].revenue != b->whatif[w].revenue) return a->whatif[w].revenue < b->whatif[w].revenue;
    }
    return a->label < b->label;
}

struct FrozenHeads {
    net::Mlp revenue;
    net::Mlp elasticity;
};

struct ForwardOutput {
    ad::Tensor price;     // Q x K
    ad::Tensor encoding;  // Q x d
};

struct LossTerms {
    double price = 0.0;
    double revenue = 0.0;
    double reward = 0.0;
    double elasticity = 0.0;
    double anchor = 0.0;
    double prior = 0.0;
    double constraint = 0.0;
    double total = 0.0;
};

class C3PONet {
   public:
    explicit C3PONet(const C3POConfig &cfg) : cfg_(cfg) {
        if (cfg.d_model % cfg.n_heads != 0) throw Error(ErrorKind::Shape, "d_model must be divisible by n_heads");
        Rng rng(derive_seed(cfg.seed, 0xC3));
        const std::size_t d = cfg.d_model, P = cfg.max_products, H = cfg.head_hidden;
        feat_embed_ = {weight(rng, "embed.feature", 2 * kNumAttributes, d), {}};
        whatif_embed_ = linear(rng, "embed.whatif", 2 * P + 1, d);
        prior_embed_ = {weight(rng, "embed.prior", 3, d), {}};
        label_embed_ = linear(rng, "embed.label", 2 * P, d);
        query_embed_ = add_param("embed.query", 1, d, std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < cfg.intra_layers; ++i) intra_.push_back(block(rng, "intra." + std::to_string(i)));
        for (std::size_t i = 0; i < cfg.cross_layers; ++i) cross_.push_back(block(rng, "cross." + std::to_string(i)));
        for (std::size_t i = 0; i < cfg.icl_layers; ++i) icl_.push_back(block(rng, "icl." + std::to_string(i)));
        final_norm_ = norm("final_norm", d);
        price_head_ = mlp(rng, "head.price", d, H, P);
        revenue_head_ = mlp(rng, "head.revenue", d + 2 * P, H, 1);
        elasticity_head_ = mlp(rng, "head.elasticity", d + 2 * P, H, P);
        // Elasticities start near -1; prices start at the context label mean (see forward).
        std::fill(elasticity_head_.l3.b.value().begin(), elasticity_head_.l3.b.value().end(), -1.0);
    }

    const C3POConfig &config() const { return cfg_; }
    C3POConfig &config() { return cfg_; }

    const std::vector<std::pair<std::string, ad::Tensor>> &parameters() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto &[_, t] : params_) n += t.size();
        return n;
    }

    const net::Mlp &revenue_head() const { return revenue_head_; }
    const net::Mlp &elasticity_head() const { return elasticity_head_; }

    FrozenHeads freeze_heads() const { return {revenue_head_.frozen(), elasticity_head_.frozen()}; }

    ForwardOutput forward(const Batch &batch) const {
        const std::size_t K = batch.K;
        if (K == 0 || K > cfg_.max_products) {
            throw Error(ErrorKind::Capacity, "product count " + std::to_string(K) + " exceeds model capacity " +
                                                 std::to_string(cfg_.max_products));
        }
        if (batch.queries.empty()) throw Error(ErrorKind::EmptyInput, "forward pass needs at least one query row");

        std::vector<const DatasetRow *> context = cfg_.ablations.icl_off ? std::vector<const DatasetRow *>{} : batch.context;
        std::sort(context.begin(), context.end(), canonical_less);
        if (context.size() > cfg_.icl_cap()) context.resize(cfg_.icl_cap());
        const std::size_t n_ctx = context.size();

        std::vector<const DatasetRow *> rows = context;
        rows.insert(rows.end(), batch.queries.begin(), batch.queries.end());
        for (const auto *r : rows) {
            if (r->label.size() != K || r->whatif.empty() || r->whatif[0].price.size() != K) {
                throw Error(ErrorKind::Shape, "batch rows must all have K = " + std::to_string(K) + " products");
            }
        }

        ad::Tensor h = encode_rows(rows, batch);
        h = ad::add(h, label_part(context, batch.queries.size()));
        for (const auto &b : cross_) h = apply_block(b, h, rows.size(), ad::MaskKind::ContextSet, n_ctx);
        for (const auto &b : icl_) h = apply_block(b, h, rows.size(), ad::MaskKind::Icl, n_ctx);
        h = final_norm_(h);

        ForwardOutput out;
        out.encoding = ad::slice_rows(h, n_ctx, rows.size());
        // The head predicts an offset from the mean context label, a
        // parameter-free skip path; without context the offset is the price.
        out.price = ad::slice_cols(price_head_(out.encoding), 0, K);
        if (n_ctx) {
            std::vector<double> base(K, 0.0);
            for (const auto *r : context) {
                for (std::size_t k = 0; k < K; ++k) base[k] += r->label[k] / static_cast<double>(n_ctx);
            }
            out.price = ad::add(out.price, ad::constant(1, K, std::move(base)));
        }
        return out;
    }

    /// Revenue predicted for each (encoding row, price row) pair.
    ad::Tensor revenue_at(const ad::Tensor &encoding, const ad::Tensor &prices, const net::Mlp *head = nullptr) const {
        return (head ? *head : revenue_head_)(head_input(encoding, prices));
    }

    /// Own-price elasticities (first K columns) at the given prices.
    ad::Tensor elasticity_at(const ad::Tensor &encoding, const ad::Tensor &prices, const net::Mlp *head = nullptr) const {
        return ad::slice_cols((head ? *head : elasticity_head_)(head_input(encoding, prices)), 0, prices.cols());
    }

   private:
    ad::Tensor add_param(const std::string &name, std::size_t rows, std::size_t cols, std::vector<double> values) {
        auto t = ad::parameter(rows, cols, std::move(values));
        params_.emplace_back(name, t);
        return t;
    }

    ad::Tensor weight(Rng &rng, const std::string &name, std::size_t in, std::size_t out) {
        std::vector<double> w(in * out);
        const double sd = 1.0 / std::sqrt(static_cast<double>(in));
        for (double &x : w) x = normal(rng, 0.0, sd);
        return add_param(name, in, out, std::move(w));
    }

    net::Linear linear(Rng &rng, const std::string &name, std::size_t in, std::size_t out) {
        auto W = weight(rng, name + ".W", in, out);
        auto b = add_param(name + ".b", 1, out, std::vector<double>(out, 0.0));
        return {W, b};
    }

    net::Norm norm(const std::string &name, std::size_t d) {
        return {add_param(name + ".gain", 1, d, std::vector<double>(d, 1.0)),
                add_param(name + ".bias", 1, d, std::vector<double>(d, 0.0))};
    }

    net::Block block(Rng &rng, const std::string &name) {
        const std::size_t d = cfg_.d_model, f = cfg_.d_model * cfg_.ffn_mult;
        net::Block b;
        b.ln1 = norm(name + ".ln1", d);
        b.q = linear(rng, name + ".q", d, d);
        b.k = linear(rng, name + ".k", d, d);
        b.v = linear(rng, name + ".v", d, d);
        b.o = linear(rng, name + ".o", d, d);
        b.ln2 = norm(name + ".ln2", d);
        b.ff1 = linear(rng, name + ".ff1", d, f);
        b.ff2 = linear(rng, name + ".ff2", f, d);
        return b;
    }

    net::Mlp mlp(Rng &rng, const std::string &name, std::size_t in, std::size_t hidden, std::size_t out) {
        return {linear(rng, name + ".l1", in, hidden), linear(rng, name + ".l2", hidden, hidden),
                linear(rng, name + ".l3", hidden, out)};
    }

    ad::Tensor apply_block(const net::Block &b, const ad::Tensor &x, std::size_t block_rows, ad::MaskKind mask,
                           std::size_t n_ctx) const {
        const auto a = b.ln1(x);
        const auto att = ad::causal_masked_attention(b.q(a), b.k(a), b.v(a), cfg_.n_heads, block_rows, mask, n_ctx);
        const auto x1 = ad::add(x, b.o(att));
        return ad::add(x1, b.ff2(ad::relu(b.ff1(b.ln2(x1)))));
    }

    std::size_t tokens_per_row() const { return kNumAttributes + kNumWhatIf + (cfg_.ablations.prior_off ? 0 : 1); }

    ad::Tensor encode_rows(const std::vector<const DatasetRow *> &rows, const Batch &batch) const {
        const std::size_t R = rows.size(), L = kNumAttributes, W = kNumWhatIf, P = cfg_.max_products, K = batch.K;
        const std::size_t T = tokens_per_row();

        std::vector<double> feat(R * L * 2 * L, 0.0);
        std::vector<double> wi(R * W * (2 * P + 1), 0.0);
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t l = 0; l < L; ++l) {
                const std::size_t row = r * L + l;
                feat[row * 2 * L + l] = rows[r]->z[l];
                feat[row * 2 * L + L + l] = 1.0;
            }
            for (std::size_t w = 0; w < W; ++w) {
                const std::size_t row = r * W + w;
                double *dst = &wi[row * (2 * P + 1)];
                for (std::size_t k = 0; k < K; ++k) {
                    dst[k] = rows[r]->whatif[w].price[k];
                    dst[P + k] = 1.0;
                }
                dst[2 * P] = rows[r]->whatif[w].revenue;
            }
        }
        std::vector<ad::Tensor> parts{feat_embed_(ad::constant(R * L, 2 * L, std::move(feat))),
                                      whatif_embed_(ad::constant(R * W, 2 * P + 1, std::move(wi)))};
        if (!cfg_.ablations.prior_off) {
            std::vector<double> pr(R * 3);
            for (std::size_t r = 0; r < R; ++r) {
                pr[r * 3] = batch.prior_low;
                pr[r * 3 + 1] = batch.prior_high;
                pr[r * 3 + 2] = 1.0;
            }
            parts.push_back(prior_embed_(ad::constant(R, 3, std::move(pr))));
        }
        // Interleave so that each row's tokens are contiguous.
        std::vector<std::size_t> idx;
        idx.reserve(R * T);
        for (std::size_t r = 0; r < R; ++r) {
            for (std::size_t l = 0; l < L; ++l) idx.push_back(r * L + l);
            for (std::size_t w = 0; w < W; ++w) idx.push_back(R * L + r * W + w);
            if (!cfg_.ablations.prior_off) idx.push_back(R * (L + W) + r);
        }
        ad::Tensor x = ad::gather_rows(ad::concat_rows(parts), idx);
        for (const auto &b : intra_) x = apply_block(b, x, T, ad::MaskKind::None, 0);
        return ad::block_mean(x, T);
    }

    ad::Tensor label_part(const std::vector<const DatasetRow *> &context, std::size_t n_queries) const {
        const std::size_t P = cfg_.max_products, d = cfg_.d_model;
        std::vector<ad::Tensor> parts;
        if (!context.empty()) {
            std::vector<double> y(context.size() * 2 * P, 0.0);
            for (std::size_t r = 0; r < context.size(); ++r) {
                for (std::size_t k = 0; k < context[r]->label.size(); ++k) {
                    y[r * 2 * P + k] = context[r]->label[k];
                    y[r * 2 * P + P + k] = 1.0;
                }
            }
            parts.push_back(label_embed_(ad::constant(context.size(), 2 * P, std::move(y))));
        }
        parts.push_back(ad::add(ad::zeros(n_queries, d), query_embed_));
        return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
    }

    ad::Tensor head_input(const ad::Tensor &encoding, const ad::Tensor &prices) const {
        const std::size_t n = prices.rows(), K = prices.cols(), P = cfg_.max_products;
        if (encoding.rows() != n) throw Error(ErrorKind::Shape, "encoding and price rows differ");
        std::vector<ad::Tensor> parts{encoding, prices};
        if (K < P) parts.push_back(ad::zeros(n, P - K));
        std::vector<double> mask(n * P, 0.0);
        for (std::size_t i = 0; i < n; ++i) std::fill_n(&mask[i * P], K, 1.0);
        parts.push_back(ad::constant(n, P, std::move(mask)));
        return ad::concat_cols(parts);
    }

    C3POConfig cfg_;
    std::vector<std::pair<std::string, ad::Tensor>> params_;
    net::Linear feat_embed_, whatif_embed_, prior_embed_, label_embed_;
    ad::Tensor query_embed_;
    std::vector<net::Block> intra_, cross_, icl_;
    net::Norm final_norm_;
    net::Mlp price_head_, revenue_head_, elasticity_head_;
};

/// Differentiable hinge penalty of a (rows x K) price matrix, averaged over rows.
inline ad::Tensor soft_penalty(const ad::Tensor &prices, const ConstraintSet &cs) {
    const std::size_t n = prices.rows(), K = prices.cols();
    if (cs.size() != K) throw Error(ErrorKind::Shape, "constraint set size differs from price width");
    const auto lo = ad::constant(1, K, cs.lower);
    const auto hi = ad::constant(1, K, cs.upper);
    ad::Tensor box = ad::sum(ad::add(ad::relu(ad::scale(ad::sub(prices, lo), -1.0)), ad::relu(ad::sub(prices, hi))));
    ad::Tensor total = ad::scale(box, cs.weights.box);
    if (cs.ordering) {
        const auto &o = *cs.ordering;
        for (std::size_t k = 1; k < K; ++k) {
            const auto prev = ad::slice_cols(prices, o.perm[k - 1], o.perm[k - 1] + 1);
            const auto cur = ad::slice_cols(prices, o.perm[k], o.perm[k] + 1);
            const auto v = ad::sum(ad::relu(ad::add_scalar(ad::sub(prev, cur), o.gaps[k - 1])));
            total = ad::add(total, ad::scale(v, cs.weights.order));
        }
    }
    if (cs.avg_price) {
        const auto avg = ad::matmul(prices, ad::constant(K, 1, std::vector<double>(K, 1.0 / static_cast<double>(K))));
        const double t = cs.avg_price->target;
        ad::Tensor v;
        switch (cs.avg_price->sense) {
            case AvgSense::AtLeast: v = ad::relu(ad::add_scalar(ad::scale(avg, -1.0), t)); break;
            case AvgSense::AtMost: v = ad::relu(ad::add_scalar(avg, -t)); break;
            case AvgSense::Equal: v = ad::abs(ad::add_scalar(avg, -t)); break;
        }
        total = ad::add(total, ad::scale(ad::sum(v), cs.weights.avg));
    }
    return ad::scale(total, 1.0 / static_cast<double>(n));
}

/// Loss for one batch. `frozen` supplies the revenue and elasticity heads
/// used by the reward, anchor and prior terms; these receive no gradient.
struct BatchLoss {
    ad::Tensor total;
    LossTerms terms;
    ForwardOutput out;
};

inline BatchLoss batch_loss(const C3PONet &model, const Batch &batch, const FrozenHeads &frozen,
                            const ConstraintSet &cs) {
    const auto &cfg = model.config();
    const auto &w = cfg.weights;
    const bool imitation_only = cfg.ablations.imitation_only;
    const std::size_t Q = batch.queries.size(), K = batch.K;

    BatchLoss res;
    res.out = model.forward(batch);
    const auto &price = res.out.price;
    const auto &enc = res.out.encoding;

    std::vector<double> labels(Q * K);
    for (std::size_t i = 0; i < Q; ++i) std::copy_n(batch.queries[i]->label.begin(), K, &labels[i * K]);
    const auto label_t = ad::constant(Q, K, labels);

    std::vector<std::pair<double, ad::Tensor>> parts;
    const auto price_loss = ad::smooth_l1(price, label_t);
    res.terms.price = price_loss.item();
    parts.emplace_back(w.price, price_loss);

    const auto penalty = soft_penalty(price, cs);
    res.terms.constraint = penalty.item();
    parts.emplace_back(w.constraint, penalty);

    if (!imitation_only) {
        // Revenue head fit on what-if pairs.
        const std::size_t W = std::min(cfg.whatif_per_row, kNumWhatIf);
        std::vector<std::size_t> rep;
        std::vector<double> wp, wr;
        for (std::size_t i = 0; i < Q; ++i) {
            for (std::size_t j = 0; j < W; ++j) {
                rep.push_back(i);
                const auto &pair = batch.queries[i]->whatif[j];
                wp.insert(wp.end(), pair.price.begin(), pair.price.end());
                wr.push_back(pair.revenue);
            }
        }
        const auto rev_pred = model.revenue_at(ad::gather_rows(enc, rep), ad::constant(rep.size(), K, wp));
        const auto rev_loss = ad::smooth_l1(rev_pred, ad::constant(rep.size(), 1, wr));
        res.terms.revenue = rev_loss.item();
        parts.emplace_back(w.revenue, rev_loss);

        // Reward: frozen revenue head evaluated at the predicted price.
        const auto reward = ad::mean(model.revenue_at(enc, price, &frozen.revenue));
        res.terms.reward = reward.item();
        parts.emplace_back(-w.reward, reward);

        // Elasticity head fit at the label price.
        std::vector<double> targets(Q * K);
        for (std::size_t i = 0; i < Q; ++i) {
            const auto &t = batch.queries[i]->elasticity_target;
            for (std::size_t k = 0; k < K; ++k) targets[i * K + k] = k < t.size() ? t[k] : 0.0;
        }
        const auto el_loss = ad::smooth_l1(model.elasticity_at(enc, label_t), ad::constant(Q, K, targets));
        res.terms.elasticity = el_loss.item();
        parts.emplace_back(w.elasticity, el_loss);

        // Anchor and prior on the frozen elasticity head at the predicted price.
        const auto e_hat = model.elasticity_at(enc, price, &frozen.elasticity);
        const auto anchor = ad::mean(ad::abs(ad::add_scalar(e_hat, -cfg.anchor_target)));
        res.terms.anchor = anchor.item();
        parts.emplace_back(w.anchor, anchor);

        if (!cfg.ablations.prior_off) {
            const auto below = ad::relu(ad::add_scalar(ad::scale(e_hat, -1.0), batch.prior_low));
            const auto above = ad::relu(ad::add_scalar(e_hat, -batch.prior_high));
            const auto prior = ad::mean(ad::add(below, above));
            res.terms.prior = prior.item();
            parts.emplace_back(w.prior, prior);
        }
    }

    ad::Tensor total;
    for (const auto &[weight, t] : parts) {
        if (weight == 0.0) continue;
        const auto term = ad::scale(t, weight);
        total = total.defined() ? ad::add(total, term) : term;
    }
    if (!total.defined()) total = ad::zeros(1, 1);
    res.total = total;
    res.terms.total = total.item();
    return res;
}

/// Decoupled-weight-decay Adam. Parameters outside the last backward graph
/// are left untouched.
class AdamW {
   public:
    AdamW() = default;
    explicit AdamW(const C3PONet &model) {
        for (const auto &[_, t] : model.parameters()) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
            t_.push_back(0);
        }
    }

    void step(const C3PONet &model, const std::vector<ad::Node *> &reached) {
        const auto &cfg = model.config();
        const auto &params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto node = params[i].second.node();
            if (std::find(reached.begin(), reached.end(), node.get()) == reached.end()) continue;
            ++t_[i];
            const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t_[i]));
            const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t_[i]));
            for (std::size_t j = 0; j < node->value.size(); ++j) {
                const double g = node->grad[j];
                m_[i][j] = cfg.adam_beta1 * m_[i][j] + (1.0 - cfg.adam_beta1) * g;
                v_[i][j] = cfg.adam_beta2 * v_[i][j] + (1.0 - cfg.adam_beta2) * g * g;
                node->value[j] -= cfg.lr * cfg.weight_decay * node->value[j];
                node->value[j] -= cfg.lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg.adam_eps);
            }
        }
    }

   private:
    std::vector<std::vector<double>> m_, v_;
    std::vector<std::uint64_t> t_;
};

inline void zero_grad(const C3PONet &model) {
    for (const auto &[_, t] : model.parameters()) std::fill(t.node()->grad.begin(), t.node()->grad.end(), 0.0);
}

/// Leaf parameters reachable from `loss` through nodes that require grad.
inline std::vector<ad::Node *> reachable_parameters(const ad::Tensor &loss) {
    std::vector<ad::Node *> leaves, stack{loss.node().get()};
    std::vector<const ad::Node *> seen{loss.node().get()};
    while (!stack.empty()) {
        ad::Node *n = stack.back();
        stack.pop_back();
        if (n->op == ad::Op::Leaf && n->requires_grad) leaves.push_back(n);
        for (const auto &p : n->parents) {
            if (!p->requires_grad || std::find(seen.begin(), seen.end(), p.get()) != seen.end()) continue;
            seen.push_back(p.get());
            stack.push_back(p.get());
        }
    }
    return leaves;
}

struct PolicyState {
    C3PONet net;
    AdamW optimizer;
    std::uint64_t step = 0;
    Rng rng;

    explicit PolicyState(const C3POConfig &cfg) : net(cfg), optimizer(net), rng(derive_seed(cfg.seed, 0xB47C)) {}
};

/// Raised when a loss turns non-finite; carries the parameters from before the
/// offending step.
class DivergenceError : public Error {
   public:
    DivergenceError(const std::string &msg, std::vector<std::vector<double>> snapshot, std::uint64_t step)
        : Error(ErrorKind::Divergence, msg), snapshot_(std::move(snapshot)), step_(step) {}
    const std::vector<std::vector<double>> &snapshot() const { return snapshot_; }
    std::uint64_t step() const { return step_; }

   private:
    std::vector<std::vector<double>> snapshot_;
    std::uint64_t step_;
};

/// Box [0, price_upper], expressed on the batch's price scale.
inline ConstraintSet training_constraints(std::size_t K, const C3POConfig &cfg, double price_scale = 1.0) {
    return ConstraintSet::box_only(K, 0.0, cfg.price_upper / price_scale);
}

/// Copy of a batch with prices and revenues divided by the maxima seen in its
/// labelled context, so datasets with very different price levels share one
/// scale. Predictions come back multiplied by `price_scale`. Without usable
/// context the rows are left as they are.
struct ScaledBatch {
    std::vector<DatasetRow> rows;  // context first, then queries
    Batch batch;
    double price_scale = 1.0;
};

inline ScaledBatch scale_to_context(const Batch &b) {
    ScaledBatch s;
    s.batch = b;
    if (b.context.empty()) return s;
    ChoiceDataset icl;
    for (const auto *r : b.context) icl.rows.push_back(*r);
    const auto scales = icl_scales(icl);
    if (scales.price == 1.0 && scales.revenue == 1.0) return s;
    s.price_scale = scales.price;
    s.rows = std::move(icl.rows);
    for (const auto *r : b.queries) s.rows.push_back(*r);
    for (auto &row : s.rows) {
        for (auto &w : row.whatif) {
            for (double &x : w.price) x /= scales.price;
            w.revenue /= scales.revenue;
        }
        for (double &x : row.label) x /= scales.price;
    }
    const std::size_t n_ctx = b.context.size();
    for (std::size_t i = 0; i < s.rows.size(); ++i) {
        (i < n_ctx ? s.batch.context[i] : s.batch.queries[i - n_ctx]) = &s.rows[i];
    }
    return s;
}

/// Random context/query split of a dataset for one training step.
inline Batch sample_batch(const ChoiceDataset &ds, const C3POConfig &cfg, Rng &rng) {
    std::vector<const DatasetRow *> rows;
    for (const auto &r : ds.rows) rows.push_back(&r);
    std::shuffle(rows.begin(), rows.end(), rng);
    if (rows.size() > cfg.batch) rows.resize(cfg.batch);
    auto n_ctx = static_cast<std::size_t>(std::llround(cfg.context_fraction * static_cast<double>(rows.size())));
    n_ctx = std::min({n_ctx, cfg.icl_cap(), rows.size() - 1});
    Batch b;
    b.K = ds.meta.K;
    b.prior_low = ds.meta.elasticity_low;
    b.prior_high = ds.meta.elasticity_high;
    b.context.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_ctx));
    b.queries.assign(rows.begin() + static_cast<std::ptrdiff_t>(n_ctx), rows.end());
    return b;
}

inline std::vector<std::vector<double>> snapshot_parameters(const C3PONet &net) {
    std::vector<std::vector<double>> s;
    for (const auto &[_, t] : net.parameters()) s.push_back(t.value());
    return s;
}

inline void restore_parameters(C3PONet &net, const std::vector<std::vector<double>> &s) {
    const auto &params = net.parameters();
    if (s.size() != params.size()) throw Error(ErrorKind::Shape, "parameter snapshot does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (s[i].size() != params[i].second.size()) throw Error(ErrorKind::Shape, "parameter snapshot size mismatch");
        params[i].second.node()->value = s[i];
    }
}

/// One optimisation step on a batch.
inline LossTerms train_step(PolicyState &state, const Batch &batch) {
    const auto frozen = state.net.freeze_heads();
    const auto scaled = scale_to_context(batch);
    const auto cs = training_constraints(batch.K, state.net.config(), scaled.price_scale);
    auto loss = batch_loss(state.net, scaled.batch, frozen, cs);
    if (!std::isfinite(loss.terms.total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(state.step), snapshot_parameters(state.net),
                              state.step);
    }
    zero_grad(state.net);
    ad::backward(loss.total);
    state.optimizer.step(state.net, reachable_parameters(loss.total));
    ++state.step;
    return loss.terms;
}

struct TrainLog {
    std::vector<LossTerms> steps;
    std::vector<double> dataset_mean_loss;
};

/// Trains sequentially, `steps_per_dataset` steps on each dataset in turn,
/// `epochs` times over the list. dataset_mean_loss[d] averages every step
/// taken on dataset d.
inline TrainLog train(PolicyState &state, const std::vector<ChoiceDataset> &datasets,
                      const std::function<void(std::size_t, const LossTerms &)> &on_step = {}) {
    TrainLog log;
    const auto &cfg = state.net.config();
    std::vector<double> acc(datasets.size(), 0.0);
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        for (std::size_t d = 0; d < datasets.size(); ++d) {
            for (std::size_t s = 0; s < cfg.steps_per_dataset; ++s) {
                const auto batch = sample_batch(datasets[d], cfg, state.rng);
                const auto terms = train_step(state, batch);
                log.steps.push_back(terms);
                acc[d] += terms.total;
                if (on_step) on_step(d, terms);
            }
        }
    }
    const auto n = static_cast<double>(cfg.epochs * cfg.steps_per_dataset);
    for (double a : acc) log.dataset_mean_loss.push_back(n > 0 ? a / n : 0.0);
    return log;
}

inline std::vector<double> moving_average(const std::vector<double> &v, std::size_t window) {
    std::vector<double> out;
    if (window == 0 || v.size() < window) return out;
    double s = std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(window), 0.0);
    out.push_back(s / static_cast<double>(window));
    for (std::size_t i = window; i < v.size(); ++i) {
        s += v[i] - v[i - window];
        out.push_back(s / static_cast<double>(window));
    }
    return out;
}

/// Predicts prices for `queries` given labelled `context` rows. Queries never
/// attend to each other, so chunking does not change the result.
inline std::vector<PriceVector> predict(const C3PONet &net, const std::vector<const DatasetRow *> &context,
                                        const std::vector<const DatasetRow *> &queries, std::size_t K,
                                        double prior_low = -3.0, double prior_high = -1.0,
                                        const ConstraintSet *constraints = nullptr, std::size_t chunk = 64) {
    std::vector<PriceVector> out;
    for (std::size_t start = 0; start < queries.size(); start += chunk) {
        Batch b;
        b.K = K;
        b.prior_low = prior_low;
        b.prior_high = prior_high;
        b.context = context;
        b.queries.assign(queries.begin() + static_cast<std::ptrdiff_t>(start),
                         queries.begin() + static_cast<std::ptrdiff_t>(std::min(queries.size(), start + chunk)));
        const auto scaled = scale_to_context(b);
        const auto fwd = net.forward(scaled.batch);
        for (std::size_t i = 0; i < b.queries.size(); ++i) {
            PriceVector p(fwd.price.value().begin() + static_cast<std::ptrdiff_t>(i * K),
                          fwd.price.value().begin() + static_cast<std::ptrdiff_t>((i + 1) * K));
            for (double &x : p) x *= scaled.price_scale;
            if (net.config().ablations.constraint_on && constraints) p = clamp_redistribute(p, *constraints);
            out.push_back(std::move(p));
        }
    }
    return out;
}

/// Deterministic context/query split of a whole dataset for evaluation: the
/// first `context_fraction` of a seeded shuffle are context.
inline std::pair<std::vector<const DatasetRow *>, std::vector<const DatasetRow *>> eval_split(const ChoiceDataset &ds,
                                                                                           double context_fraction,
                                                                                           std::uint64_t seed) {
    std::vector<const DatasetRow *> rows;
    for (const auto &r : ds.rows) rows.push_back(&r);
    Rng rng(seed);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_ctx = static_cast<std::size_t>(std::llround(context_fraction * static_cast<double>(rows.size())));
    return {{rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_ctx)},
            {rows.begin() + static_cast<std::ptrdiff_t>(n_ctx), rows.end()}};
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    std::string worst_parameter;
    bool passed = false;
};

/// Compares backprop gradients of the full batch loss against central
/// differences on up to `n_samples` randomly chosen scalar parameters.
inline GradCheckReport grad_check(C3PONet &net, const Batch &batch, std::uint64_t seed, std::size_t n_samples = 200,
                                  double h = 1e-6, double tol = 1e-3) {
    const auto frozen = net.freeze_heads();
    const auto cs = training_constraints(batch.K, net.config());
    zero_grad(net);
    const auto loss = batch_loss(net, batch, frozen, cs);
    ad::backward(loss.total);

    const auto &params = net.parameters();
    std::vector<std::pair<std::size_t, std::size_t>> all;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].second.size(); ++j) all.emplace_back(i, j);
    }
    Rng rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    if (all.size() > n_samples) all.resize(n_samples);

    GradCheckReport rep;
    for (const auto &[i, j] : all) {
        auto node = params[i].second.node();
        const double analytic = node->grad[j];
        const double orig = node->value[j];
        node->value[j] = orig + h;
        const double up = batch_loss(net, batch, frozen, cs).terms.total;
        node->value[j] = orig - h;
        const double down = batch_loss(net, batch, frozen, cs).terms.total;
        node->value[j] = orig;
        const double numeric = (up - down) / (2.0 * h);
        const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
        ++rep.checked;
        if (rel > rep.max_rel_error) {
            rep.max_rel_error = rel;
            rep.worst_parameter = params[i].first + "[" + std::to_string(j) + "]";
        }
    }
    zero_grad(net);
    rep.passed = rep.max_rel_error < tol;
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints: "C3POCKPT", u32 version, u64 header length, JSON header,
// then every parameter value as little-endian float64 in header order.

inline constexpr char kCheckpointMagic[8] = {'C', '3', 'P', 'O', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const C3POConfig &c) {
    const auto &w = c.weights;
    const auto &a = c.ablations;
    return {{"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"ffn_mult", c.ffn_mult},
            {"intra_layers", c.intra_layers},
            {"cross_layers", c.cross_layers},
            {"icl_layers", c.icl_layers},
            {"head_hidden", c.head_hidden},
            {"max_products", c.max_products},
            {"context_fraction", c.context_fraction},
            {"batch", c.batch},
            {"whatif_per_row", c.whatif_per_row},
            {"steps_per_dataset", c.steps_per_dataset},
            {"epochs", c.epochs},
            {"full_icl_cap", c.full_icl_cap},
            {"simple_icl_cap", c.simple_icl_cap},
            {"weights",
             {{"price", w.price},
              {"revenue", w.revenue},
              {"reward", w.reward},
              {"elasticity", w.elasticity},
              {"anchor", w.anchor},
              {"prior", w.prior},
              {"constraint", w.constraint}}},
            {"anchor_target", c.anchor_target},
            {"price_upper", c.price_upper},
            {"lr", c.lr},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"ablations",
             {{"icl_off", a.icl_off},
              {"imitation_only", a.imitation_only},
              {"prior_off", a.prior_off},
              {"simple_icl", a.simple_icl},
              {"constraint_on", a.constraint_on}}}};
}

inline C3POConfig config_from_json(const nlohmann::json &j) {
    C3POConfig c;
    try {
        c.d_model = j.at("d_model");
        c.n_heads = j.at("n_heads");
        c.ffn_mult = j.at("ffn_mult");
        c.intra_layers = j.at("intra_layers");
        c.cross_layers = j.at("cross_layers");
        c.icl_layers = j.at("icl_layers");
        c.head_hidden = j.at("head_hidden");
        c.max_products = j.at("max_products");
        c.context_fraction = j.at("context_fraction");
        c.batch = j.at("batch");
        c.whatif_per_row = j.at("whatif_per_row");
        c.steps_per_dataset = j.at("steps_per_dataset");
        c.epochs = j.at("epochs");
        c.full_icl_cap = j.at("full_icl_cap");
        c.simple_icl_cap = j.at("simple_icl_cap");
        const auto &w = j.at("weights");
        c.weights = {w.at("price"), w.at("revenue"), w.at("reward"), w.at("elasticity"),
                     w.at("anchor"), w.at("prior"),   w.at("constraint")};
        c.anchor_target = j.at("anchor_target");
        c.price_upper = j.at("price_upper");
        c.lr = j.at("lr");
        c.adam_beta1 = j.at("adam_beta1");
        c.adam_beta2 = j.at("adam_beta2");
        c.adam_eps = j.at("adam_eps");
        c.weight_decay = j.at("weight_decay");
        c.seed = j.at("seed");
        const auto &a = j.at("ablations");
        c.ablations = {a.at("icl_off"), a.at("imitation_only"), a.at("prior_off"), a.at("simple_icl"),
                       a.at("constraint_on")};
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::InvalidSpec, std::string("malformed model config: ") + e.what());
    }
    return c;
}

namespace detail {

template <typename T>
void write_le(std::ostream &os, T v) {
    std::array<unsigned char, sizeof(T)> b{};
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char *>(b.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream &is) {
    std::array<unsigned char, sizeof(T)> b{};
    if (!is.read(reinterpret_cast<char *>(b.data()), sizeof(T))) throw Error(ErrorKind::Io, "truncated checkpoint");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const PolicyState &state, std::ostream &os) {
    nlohmann::json header;
    header["config"] = config_to_json(state.net.config());
    header["step"] = state.step;
    std::ostringstream rng_state;
    rng_state << state.rng;
    header["rng_state"] = rng_state.str();
    nlohmann::json shapes = nlohmann::json::array();
    std::size_t n_values = 0;
    for (const auto &[name, t] : state.net.parameters()) {
        shapes.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
        n_values += t.size();
    }
    header["params"] = shapes;
    header["n_values"] = n_values;
    const std::string text = header.dump();

    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto &[_, t] : state.net.parameters()) {
        for (double v : t.value()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw Error(ErrorKind::Io, "failed writing checkpoint");
}

inline PolicyState load_checkpoint(std::istream &is) {
    char magic[sizeof kCheckpointMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
        throw Error(ErrorKind::Io, "not a C3PO checkpoint (bad magic)");
    }
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) {
        throw Error(ErrorKind::SchemaVersion, "unsupported checkpoint version " + std::to_string(version));
    }
    const auto len = detail::read_le<std::uint64_t>(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw Error(ErrorKind::Io, "truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        throw Error(ErrorKind::Io, std::string("corrupt checkpoint header: ") + e.what());
    }
    PolicyState state(config_from_json(header.at("config")));
    state.step = header.at("step").get<std::uint64_t>();
    std::istringstream rng_state(header.at("rng_state").get<std::string>());
    rng_state >> state.rng;
    const auto &shapes = header.at("params");
    const auto &params = state.net.parameters();
    if (shapes.size() != params.size()) throw Error(ErrorKind::Shape, "checkpoint parameter list does not match config");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (shapes[i].at("name") != params[i].first || shapes[i].at("rows") != params[i].second.rows() ||
            shapes[i].at("cols") != params[i].second.cols()) {
            throw Error(ErrorKind::Shape, "checkpoint parameter " + params[i].first + " has a different shape");
        }
        for (double &v : params[i].second.node()->value) v = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
    }
    return state;
}

inline void save_checkpoint(const PolicyState &state, const std::string &path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error(ErrorKind::Io, "cannot open '" + path + "' for writing");
    save_checkpoint(state, os);
}

inline PolicyState load_checkpoint(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorKind::Io, "cannot open checkpoint '" + path + "'");
    return load_checkpoint(is);
}

}  // namespace c3po
