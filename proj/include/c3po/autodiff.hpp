#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices of doubles. Every operation builds a node holding its value and a
// backward rule; `backward(loss)` walks the graph in reverse topological order
// and accumulates gradients into every node that requires them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "c3po/error.hpp"

namespace c3po::ad {

enum class Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Softplus,
    Softmax,
    LayerNorm,
    SmoothL1,
    Sum,
    BlockMean,
    ConcatCols,
    ConcatRows,
    SliceCols,
    GatherRows,
    Attention,
};

struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    Op op = Op::Leaf;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward;

    std::size_t size() const { return rows * cols; }
};

namespace debug {

/// Ops whose backward rule is skipped. Only for sensitivity tests of the
/// gradient checker.
inline std::set<Op> &disabled_backward() {
    static std::set<Op> ops;
    return ops;
}

}  // namespace debug

class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double> &value() { return node_->value; }
    const std::vector<double> &value() const { return node_->value; }
    std::vector<double> &grad() { return node_->grad; }
    const std::vector<double> &grad() const { return node_->grad; }

    double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double item() const { return node_->value.at(0); }

    const std::shared_ptr<Node> &node() const { return node_; }
    bool defined() const { return node_ != nullptr; }

    std::string shape_str() const { return "(" + std::to_string(rows()) + "x" + std::to_string(cols()) + ")"; }

   private:
    std::shared_ptr<Node> node_;
};

inline Tensor make_tensor(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
    if (values.size() != rows * cols) {
        throw Error(ErrorKind::Shape, "tensor data has " + std::to_string(values.size()) + " values for shape (" +
                                          std::to_string(rows) + "x" + std::to_string(cols) + ")");
    }
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(rows * cols, 0.0);
    return Tensor(std::move(n));
}

inline Tensor constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return make_tensor(rows, cols, std::move(values), false);
}

inline Tensor zeros(std::size_t rows, std::size_t cols) { return constant(rows, cols, std::vector<double>(rows * cols)); }

inline Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return make_tensor(rows, cols, std::move(values), true);
}

/// Same values, no gradient path.
inline Tensor detach(const Tensor &t) { return constant(t.rows(), t.cols(), t.value()); }

namespace detail {

inline Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> values, Op op,
                          std::vector<Tensor> inputs, std::function<void(Node &)> backward) {
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    n->op = op;
    for (const auto &t : inputs) {
        n->requires_grad = n->requires_grad || t.requires_grad();
        n->parents.push_back(t.node());
    }
    if (n->requires_grad) {
        n->grad.assign(rows * cols, 0.0);
        n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
}

inline void shape_error(const char *op, const Tensor &a, const Tensor &b) {
    throw Error(ErrorKind::Shape, std::string(op) + ": incompatible shapes " + a.shape_str() + " and " + b.shape_str());
}

// Broadcast mode of b against a: 0 same shape, 1 row vector (1 x cols).
inline int broadcast_mode(const char *op, const Tensor &a, const Tensor &b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return 0;
    if (b.rows() == 1 && b.cols() == a.cols()) return 1;
    shape_error(op, a, b);
    return -1;
}

}  // namespace detail

inline Tensor matmul(const Tensor &a, const Tensor &b) {
    if (a.cols() != b.rows()) detail::shape_error("matmul", a, b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto &A = a.value();
    const auto &B = b.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            const double *brow = &B[p * n];
            double *orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result(m, n, std::move(out), Op::MatMul, {a, b}, [an, bn, m, k, n](Node &self) {
        const auto &G = self.grad;
        if (an->requires_grad) {
            // dA = G B^T
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * bn->value[p * n + j];
                    an->grad[i * k + p] += s;
                }
            }
        }
        if (bn->requires_grad) {
            // dB = A^T G
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = an->value[i * k + p];
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < n; ++j) bn->grad[p * n + j] += av * G[i * n + j];
                }
            }
        }
    });
}

namespace detail {

inline Tensor add_sub(const Tensor &a, const Tensor &b, double sign, Op op, const char *name) {
    const int mode = broadcast_mode(name, a, b);
    const std::size_t R = a.rows(), C = a.cols();
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < R; ++i) {
        for (std::size_t j = 0; j < C; ++j) out[i * C + j] += sign * b.value()[mode == 0 ? i * C + j : j];
    }
    auto an = a.node(), bn = b.node();
    return make_result(R, C, std::move(out), op, {a, b}, [an, bn, R, C, mode, sign](Node &self) {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < R * C; ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < R; ++i) {
                for (std::size_t j = 0; j < C; ++j) bn->grad[mode == 0 ? i * C + j : j] += sign * self.grad[i * C + j];
            }
        }
    });
}

}  // namespace detail

/// a + b; b may be a (1 x cols) row broadcast over the rows of a.
inline Tensor add(const Tensor &a, const Tensor &b) { return detail::add_sub(a, b, 1.0, Op::Add, "add"); }
inline Tensor sub(const Tensor &a, const Tensor &b) { return detail::add_sub(a, b, -1.0, Op::Sub, "sub"); }

/// Elementwise product; b may be a broadcast row.
inline Tensor mul(const Tensor &a, const Tensor &b) {
    const int mode = detail::broadcast_mode("mul", a, b);
    const std::size_t R = a.rows(), C = a.cols();
    std::vector<double> out(R * C);
    for (std::size_t i = 0; i < R; ++i) {
        for (std::size_t j = 0; j < C; ++j) out[i * C + j] = a.value()[i * C + j] * b.value()[mode == 0 ? i * C + j : j];
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result(R, C, std::move(out), Op::Mul, {a, b}, [an, bn, R, C, mode](Node &self) {
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = 0; j < C; ++j) {
                const std::size_t ia = i * C + j;
                const std::size_t ib = mode == 0 ? ia : j;
                if (an->requires_grad) an->grad[ia] += self.grad[ia] * bn->value[ib];
                if (bn->requires_grad) bn->grad[ib] += self.grad[ia] * an->value[ia];
            }
        }
    });
}

inline Tensor scale(const Tensor &a, double s) {
    std::vector<double> out(a.value());
    for (double &x : out) x *= s;
    auto an = a.node();
    return detail::make_result(a.rows(), a.cols(), std::move(out), Op::Scale, {a}, [an, s](Node &self) {
        for (std::size_t i = 0; i < self.size(); ++i) an->grad[i] += s * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor &a, double s) {
    std::vector<double> out(a.value());
    for (double &x : out) x += s;
    auto an = a.node();
    return detail::make_result(a.rows(), a.cols(), std::move(out), Op::AddScalar, {a}, [an](Node &self) {
        for (std::size_t i = 0; i < self.size(); ++i) an->grad[i] += self.grad[i];
    });
}

inline Tensor relu(const Tensor &a) {
    std::vector<double> out(a.value());
    for (double &x : out) x = std::max(x, 0.0);
    auto an = a.node();
    return detail::make_result(a.rows(), a.cols(), std::move(out), Op::Relu, {a}, [an](Node &self) {
        for (std::size_t i = 0; i < self.size(); ++i) {
            if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
        }
    });
}

inline Tensor softplus(const Tensor &a) {
    std::vector<double> out(a.value());
    for (double &x : out) x = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    auto an = a.node();
    return detail::make_result(a.rows(), a.cols(), std::move(out), Op::Softplus, {a}, [an](Node &self) {
        for (std::size_t i = 0; i < self.size(); ++i) {
            const double x = an->value[i];
            const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
            an->grad[i] += self.grad[i] * sig;
        }
    });
}

/// |a| = relu(a) + relu(-a).
inline Tensor abs(const Tensor &a) { return add(relu(a), relu(scale(a, -1.0))); }

/// Row-wise softmax.
inline Tensor softmax(const Tensor &a) {
    const std::size_t R = a.rows(), C = a.cols();
    std::vector<double> out(R * C);
    for (std::size_t i = 0; i < R; ++i) {
        const double *row = &a.value()[i * C];
        const double m = *std::max_element(row, row + C);
        double s = 0.0;
        for (std::size_t j = 0; j < C; ++j) s += (out[i * C + j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < C; ++j) out[i * C + j] /= s;
    }
    auto an = a.node();
    return detail::make_result(R, C, std::move(out), Op::Softmax, {a}, [an, R, C](Node &self) {
        for (std::size_t i = 0; i < R; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < C; ++j) dot += self.grad[i * C + j] * self.value[i * C + j];
            for (std::size_t j = 0; j < C; ++j) {
                an->grad[i * C + j] += self.value[i * C + j] * (self.grad[i * C + j] - dot);
            }
        }
    });
}

/// Row-wise layer normalisation with learned gain and bias (both 1 x cols).
inline Tensor layer_norm(const Tensor &a, const Tensor &gain, const Tensor &bias, double eps = 1e-5) {
    const std::size_t R = a.rows(), C = a.cols();
    if (gain.rows() != 1 || gain.cols() != C) detail::shape_error("layer_norm gain", a, gain);
    if (bias.rows() != 1 || bias.cols() != C) detail::shape_error("layer_norm bias", a, bias);
    std::vector<double> xhat(R * C), inv_std(R), out(R * C);
    for (std::size_t i = 0; i < R; ++i) {
        const double *row = &a.value()[i * C];
        double mean = 0.0;
        for (std::size_t j = 0; j < C; ++j) mean += row[j];
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t j = 0; j < C; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(C);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < C; ++j) {
            xhat[i * C + j] = (row[j] - mean) * inv_std[i];
            out[i * C + j] = xhat[i * C + j] * gain.value()[j] + bias.value()[j];
        }
    }
    auto an = a.node(), gn = gain.node(), bn = bias.node();
    return detail::make_result(
        R, C, std::move(out), Op::LayerNorm, {a, gain, bias},
        [an, gn, bn, R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node &self) {
            for (std::size_t i = 0; i < R; ++i) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t j = 0; j < C; ++j) {
                    const double g = self.grad[i * C + j];
                    if (gn->requires_grad) gn->grad[j] += g * xhat[i * C + j];
                    if (bn->requires_grad) bn->grad[j] += g;
                    const double gx = g * gn->value[j];
                    sum_g += gx;
                    sum_gx += gx * xhat[i * C + j];
                }
                if (!an->requires_grad) continue;
                const double n = static_cast<double>(C);
                for (std::size_t j = 0; j < C; ++j) {
                    const double gx = self.grad[i * C + j] * gn->value[j];
                    an->grad[i * C + j] += inv_std[i] * (gx - sum_g / n - xhat[i * C + j] * sum_gx / n);
                }
            }
        });
}

/// Mean smooth-L1 (Huber with threshold `beta`) between same-shaped tensors.
/// The target receives no gradient.
inline Tensor smooth_l1(const Tensor &pred, const Tensor &target, double beta = 1.0) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) detail::shape_error("smooth_l1", pred, target);
    const std::size_t n = pred.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = std::abs(pred.value()[i] - target.value()[i]);
        loss += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
    loss /= static_cast<double>(n);
    auto pn = pred.node(), tn = target.node();
    return detail::make_result(1, 1, {loss}, Op::SmoothL1, {pred}, [pn, tn, n, beta](Node &self) {
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = pn->value[i] - tn->value[i];
            pn->grad[i] += g * (std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0));
        }
    });
}

inline Tensor sum(const Tensor &a) {
    double s = 0.0;
    for (double x : a.value()) s += x;
    auto an = a.node();
    return detail::make_result(1, 1, {s}, Op::Sum, {a}, [an](Node &self) {
        for (double &g : an->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor &a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Averages consecutive blocks of `block` rows: (B*block x C) -> (B x C).
inline Tensor block_mean(const Tensor &a, std::size_t block) {
    if (block == 0 || a.rows() % block != 0) {
        throw Error(ErrorKind::Shape, "block_mean: " + std::to_string(a.rows()) + " rows not divisible by block " +
                                          std::to_string(block));
    }
    const std::size_t B = a.rows() / block, C = a.cols();
    std::vector<double> out(B * C, 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t j = 0; j < C; ++j) out[(r / block) * C + j] += a.value()[r * C + j] / static_cast<double>(block);
    }
    auto an = a.node();
    return detail::make_result(B, C, std::move(out), Op::BlockMean, {a}, [an, block, C](Node &self) {
        for (std::size_t r = 0; r < an->rows; ++r) {
            for (std::size_t j = 0; j < C; ++j) an->grad[r * C + j] += self.grad[(r / block) * C + j] / static_cast<double>(block);
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor> &parts) {
    if (parts.empty()) throw Error(ErrorKind::Shape, "concat_cols of nothing");
    const std::size_t R = parts[0].rows();
    std::size_t C = 0;
    for (const auto &p : parts) {
        if (p.rows() != R) detail::shape_error("concat_cols", parts[0], p);
        C += p.cols();
    }
    std::vector<double> out(R * C);
    std::size_t off = 0;
    for (const auto &p : parts) {
        for (std::size_t i = 0; i < R; ++i) {
            std::copy_n(&p.value()[i * p.cols()], p.cols(), &out[i * C + off]);
        }
        off += p.cols();
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto &p : parts) nodes.push_back(p.node());
    return detail::make_result(R, C, std::move(out), Op::ConcatCols, parts, [nodes, R, C](Node &self) {
        std::size_t o = 0;
        for (const auto &n : nodes) {
            if (n->requires_grad) {
                for (std::size_t i = 0; i < R; ++i) {
                    for (std::size_t j = 0; j < n->cols; ++j) n->grad[i * n->cols + j] += self.grad[i * C + o + j];
                }
            }
            o += n->cols;
        }
    });
}

inline Tensor concat_rows(const std::vector<Tensor> &parts) {
    if (parts.empty()) throw Error(ErrorKind::Shape, "concat_rows of nothing");
    const std::size_t C = parts[0].cols();
    std::size_t R = 0;
    for (const auto &p : parts) {
        if (p.cols() != C) detail::shape_error("concat_rows", parts[0], p);
        R += p.rows();
    }
    std::vector<double> out;
    out.reserve(R * C);
    for (const auto &p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto &p : parts) nodes.push_back(p.node());
    return detail::make_result(R, C, std::move(out), Op::ConcatRows, parts, [nodes](Node &self) {
        std::size_t o = 0;
        for (const auto &n : nodes) {
            if (n->requires_grad) {
                for (std::size_t i = 0; i < n->size(); ++i) n->grad[i] += self.grad[o + i];
            }
            o += n->size();
        }
    });
}

/// Columns [c0, c1).
inline Tensor slice_cols(const Tensor &a, std::size_t c0, std::size_t c1) {
    if (c0 > c1 || c1 > a.cols()) {
        throw Error(ErrorKind::Shape, "slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + a.shape_str());
    }
    const std::size_t R = a.rows(), C = a.cols(), W = c1 - c0;
    std::vector<double> out(R * W);
    for (std::size_t i = 0; i < R; ++i) std::copy_n(&a.value()[i * C + c0], W, &out[i * W]);
    auto an = a.node();
    return detail::make_result(R, W, std::move(out), Op::SliceCols, {a}, [an, R, C, W, c0](Node &self) {
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = 0; j < W; ++j) an->grad[i * C + c0 + j] += self.grad[i * W + j];
        }
    });
}

/// Output row r is input row idx[r]; indices may repeat.
inline Tensor gather_rows(const Tensor &a, const std::vector<std::size_t> &idx) {
    const std::size_t C = a.cols();
    std::vector<double> out(idx.size() * C);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows()) throw Error(ErrorKind::Shape, "gather_rows index out of range for " + a.shape_str());
        std::copy_n(&a.value()[idx[r] * C], C, &out[r * C]);
    }
    auto an = a.node();
    return detail::make_result(idx.size(), C, std::move(out), Op::GatherRows, {a}, [an, idx, C](Node &self) {
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < C; ++j) an->grad[idx[r] * C + j] += self.grad[r * C + j];
        }
    });
}

inline Tensor slice_rows(const Tensor &a, std::size_t r0, std::size_t r1) {
    std::vector<std::size_t> idx;
    for (std::size_t r = r0; r < r1; ++r) idx.push_back(r);
    return gather_rows(a, idx);
}

enum class MaskKind {
    None,        // full attention inside the block
    Causal,      // key j visible to query i iff j <= i
    ContextSet,  // key j visible iff j < n_context or j == i
    Icl,         // causal among the first n_context rows; later rows see the context and themselves
};

inline bool mask_allows(MaskKind kind, std::size_t i, std::size_t j, std::size_t n_context) {
    switch (kind) {
        case MaskKind::None: return true;
        case MaskKind::Causal: return j <= i;
        case MaskKind::ContextSet: return j < n_context || j == i;
        case MaskKind::Icl: return i < n_context ? j <= i : (j < n_context || j == i);
    }
    return false;
}

/// Multi-head scaled dot-product attention applied independently to
/// consecutive blocks of `block` rows. Q, K, V are (N x d) with N a multiple
/// of `block` and d a multiple of `heads`; head h uses columns
/// [h*d/heads, (h+1)*d/heads).
inline Tensor causal_masked_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t heads,
                                      std::size_t block, MaskKind mask, std::size_t n_context = 0) {
    if (q.rows() != k.rows() || q.rows() != v.rows()) detail::shape_error("attention", q, k);
    if (q.cols() != k.cols() || q.cols() != v.cols()) detail::shape_error("attention", q, v);
    const std::size_t N = q.rows(), d = q.cols();
    if (heads == 0 || d % heads != 0) throw Error(ErrorKind::Shape, "attention: width not divisible by head count");
    if (block == 0 || N % block != 0) throw Error(ErrorKind::Shape, "attention: rows not divisible by block size");
    const std::size_t dh = d / heads, nb = N / block;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));

    // probs[(b*heads + h)*block*block + i*block + j]
    std::vector<double> probs(nb * heads * block * block, 0.0);
    std::vector<double> out(N * d, 0.0);
    const auto &Q = q.value();
    const auto &K = k.value();
    const auto &V = v.value();
    std::vector<double> scores(block);
    for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double *P = &probs[(b * heads + h) * block * block];
            for (std::size_t i = 0; i < block; ++i) {
                const std::size_t qi = (b * block + i) * d + h * dh;
                double m = -INFINITY;
                for (std::size_t j = 0; j < block; ++j) {
                    if (!mask_allows(mask, i, j, n_context)) continue;
                    const std::size_t kj = (b * block + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += Q[qi + t] * K[kj + t];
                    scores[j] = s * inv;
                    m = std::max(m, scores[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < block; ++j) {
                    if (!mask_allows(mask, i, j, n_context)) continue;
                    P[i * block + j] = std::exp(scores[j] - m);
                    z += P[i * block + j];
                }
                for (std::size_t j = 0; j < block; ++j) {
                    if (!mask_allows(mask, i, j, n_context)) continue;
                    P[i * block + j] /= z;
                    const double pij = P[i * block + j];
                    const std::size_t vj = (b * block + j) * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) out[qi + t] += pij * V[vj + t];
                }
            }
        }
    }

    auto qn = q.node(), kn = k.node(), vn = v.node();
    return detail::make_result(
        N, d, std::move(out), Op::Attention, {q, k, v},
        [qn, kn, vn, heads, block, mask, n_context, nb, d, dh, inv, probs = std::move(probs)](Node &self) {
            const auto &G = self.grad;
            std::vector<double> dP(block), dS(block);
            for (std::size_t b = 0; b < nb; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double *P = &probs[(b * heads + h) * block * block];
                    for (std::size_t i = 0; i < block; ++i) {
                        const std::size_t gi = (b * block + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < block; ++j) {
                            if (!mask_allows(mask, i, j, n_context)) continue;
                            const std::size_t vj = (b * block + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) s += G[gi + t] * vn->value[vj + t];
                            dP[j] = s;
                            dot += s * P[i * block + j];
                            if (vn->requires_grad) {
                                for (std::size_t t = 0; t < dh; ++t) vn->grad[vj + t] += P[i * block + j] * G[gi + t];
                            }
                        }
                        for (std::size_t j = 0; j < block; ++j) {
                            if (!mask_allows(mask, i, j, n_context)) continue;
                            dS[j] = P[i * block + j] * (dP[j] - dot) * inv;
                            const std::size_t kj = (b * block + j) * d + h * dh;
                            for (std::size_t t = 0; t < dh; ++t) {
                                if (qn->requires_grad) qn->grad[gi + t] += dS[j] * kn->value[kj + t];
                                if (kn->requires_grad) kn->grad[kj + t] += dS[j] * qn->value[gi + t];
                            }
                        }
                    }
                }
            }
        });
}

/// Reverse-mode sweep from a scalar.
inline void backward(const Tensor &loss) {
    if (loss.size() != 1) throw Error(ErrorKind::Shape, "backward needs a scalar loss, got " + loss.shape_str());
    if (!loss.requires_grad()) return;

    std::vector<Node *> order;
    std::unordered_set<Node *> seen;
    std::vector<std::pair<Node *, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            Node *p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad[0] += 1.0;
    const auto &disabled = debug::disabled_backward();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node *n = *it;
        if (n->backward && !disabled.count(n->op)) n->backward(*n);
    }
}

}  // namespace c3po::ad
