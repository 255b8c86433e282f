#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "c3po/autodiff.hpp"
#include "c3po/rng.hpp"

using namespace c3po;
using namespace c3po::ad;

namespace {

Tensor rand_param(Rng &rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(r * c);
    for (double &x : v) x = uniform(rng, lo, hi);
    return parameter(r, c, v);
}

// Values bounded away from 0 so relu/abs kinks are not crossed by the probe.
Tensor rand_off_zero(Rng &rng, std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double &x : v) x = (rng() % 2 ? 1.0 : -1.0) * uniform(rng, 0.1, 1.0);
    return parameter(r, c, v);
}

// Contract a non-scalar output with fixed random weights to get a scalar.
Tensor contract(const Tensor &out, std::uint64_t seed) {
    if (out.size() == 1) return out;
    Rng rng(seed);
    std::vector<double> w(out.size());
    for (double &x : w) x = uniform(rng, -1.0, 1.0);
    return sum(mul(out, constant(out.rows(), out.cols(), w)));
}

double max_rel_error(const std::vector<Tensor> &inputs, const std::function<Tensor()> &f, double h = 1e-4) {
    for (const auto &t : inputs) std::fill(t.node()->grad.begin(), t.node()->grad.end(), 0.0);
    const Tensor loss = contract(f(), 1234);
    backward(loss);
    double worst = 0.0;
    for (const auto &t : inputs) {
        auto &val = t.node()->value;
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double orig = val[i];
            val[i] = orig + h;
            const double up = contract(f(), 1234).item();
            val[i] = orig - h;
            const double down = contract(f(), 1234).item();
            val[i] = orig;
            const double num = (up - down) / (2.0 * h);
            const double ana = t.node()->grad[i];
            worst = std::max(worst, std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-6}));
        }
    }
    return worst;
}

constexpr double kPrimitiveTol = 1e-4;

}  // namespace

TEST(AutodiffGrad, MatMul) {
    Rng rng(1);
    auto a = rand_param(rng, 3, 4), b = rand_param(rng, 4, 2);
    EXPECT_LT(max_rel_error({a, b}, [&] { return matmul(a, b); }), kPrimitiveTol);
}

TEST(AutodiffGrad, AddSubMulWithBroadcast) {
    Rng rng(2);
    auto a = rand_param(rng, 3, 4), b = rand_param(rng, 3, 4), row = rand_param(rng, 1, 4);
    EXPECT_LT(max_rel_error({a, b}, [&] { return add(a, b); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, row}, [&] { return add(a, row); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, b}, [&] { return sub(a, b); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, row}, [&] { return sub(a, row); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, b}, [&] { return mul(a, b); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, row}, [&] { return mul(a, row); }), kPrimitiveTol);
}

TEST(AutodiffGrad, ElementwiseOps) {
    Rng rng(3);
    auto a = rand_off_zero(rng, 4, 3);
    EXPECT_LT(max_rel_error({a}, [&] { return scale(a, -2.5); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return add_scalar(a, 0.7); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return relu(a); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return softplus(a); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return abs(a); }), kPrimitiveTol);
}

TEST(AutodiffGrad, Softmax) {
    Rng rng(4);
    auto a = rand_param(rng, 3, 5, -2.0, 2.0);
    EXPECT_LT(max_rel_error({a}, [&] { return softmax(a); }), kPrimitiveTol);
}

TEST(AutodiffGrad, LayerNorm) {
    Rng rng(5);
    auto a = rand_param(rng, 4, 6), g = rand_param(rng, 1, 6, 0.5, 1.5), b = rand_param(rng, 1, 6);
    EXPECT_LT(max_rel_error({a, g, b}, [&] { return layer_norm(a, g, b); }), kPrimitiveTol);
}

TEST(AutodiffGrad, SmoothL1BothRegimes) {
    Rng rng(6);
    std::vector<double> tv(12), pv(12);
    for (std::size_t i = 0; i < 12; ++i) {
        tv[i] = uniform(rng, -1, 1);
        // half the residuals inside the quadratic zone, half in the linear zone
        const double d = (i % 2 ? 1.0 : -1.0) * (i < 6 ? uniform(rng, 0.05, 0.9) : uniform(rng, 1.1, 3.0));
        pv[i] = tv[i] + d;
    }
    auto p = parameter(3, 4, pv);
    const auto t = constant(3, 4, tv);
    EXPECT_LT(max_rel_error({p}, [&] { return smooth_l1(p, t); }), kPrimitiveTol);
}

TEST(AutodiffGrad, Reductions) {
    Rng rng(7);
    auto a = rand_param(rng, 6, 3);
    EXPECT_LT(max_rel_error({a}, [&] { return sum(a); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return mean(a); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a}, [&] { return block_mean(a, 3); }), kPrimitiveTol);
}

TEST(AutodiffGrad, ShapeOps) {
    Rng rng(8);
    auto a = rand_param(rng, 3, 2), b = rand_param(rng, 3, 4), c = rand_param(rng, 2, 2);
    EXPECT_LT(max_rel_error({a, b}, [&] { return concat_cols({a, b}); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({a, c}, [&] { return concat_rows({a, c}); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({b}, [&] { return slice_cols(b, 1, 3); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({b}, [&] { return slice_rows(b, 1, 3); }), kPrimitiveTol);
    EXPECT_LT(max_rel_error({b}, [&] { return gather_rows(b, {2, 0, 2, 1}); }), kPrimitiveTol);
}

TEST(AutodiffGrad, AttentionEveryMask) {
    Rng rng(9);
    auto q = rand_param(rng, 8, 4), k = rand_param(rng, 8, 4), v = rand_param(rng, 8, 4);
    for (auto mask : {MaskKind::None, MaskKind::Causal, MaskKind::ContextSet, MaskKind::Icl}) {
        EXPECT_LT(max_rel_error({q, k, v}, [&] { return causal_masked_attention(q, k, v, 2, 4, mask, 2); }),
                  kPrimitiveTol);
    }
}

TEST(AutodiffGrad, ComposedExpression) {
    Rng rng(10);
    auto x = rand_param(rng, 4, 3), W = rand_param(rng, 3, 3), g = rand_param(rng, 1, 3, 0.5, 1.5),
         b = rand_param(rng, 1, 3);
    auto f = [&] { return softmax(layer_norm(add(matmul(x, W), b), g, b)); };
    EXPECT_LT(max_rel_error({x, W, g, b}, f), kPrimitiveTol);
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
    Rng rng(11);
    const auto s = softmax(rand_param(rng, 10, 7, -30.0, 30.0));
    for (std::size_t i = 0; i < 10; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 7; ++j) total += s.at(i, j);
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(Autodiff, CausalOutputIgnoresFutureTokens) {
    Rng rng(12);
    const std::size_t T = 6, d = 4;
    auto q = rand_param(rng, T, d), k = rand_param(rng, T, d), v = rand_param(rng, T, d);
    const auto base = causal_masked_attention(q, k, v, 2, T, MaskKind::Causal);
    for (std::size_t t = 0; t + 1 < T; ++t) {
        auto q2 = q.value(), k2 = k.value(), v2 = v.value();
        for (std::size_t r = t + 1; r < T; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                q2[r * d + c] += uniform(rng, -5, 5);
                k2[r * d + c] += uniform(rng, -5, 5);
                v2[r * d + c] += uniform(rng, -5, 5);
            }
        }
        const auto out = causal_masked_attention(constant(T, d, q2), constant(T, d, k2), constant(T, d, v2), 2, T,
                                                 MaskKind::Causal);
        for (std::size_t r = 0; r <= t; ++r) {
            for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c));
        }
    }
}

TEST(Autodiff, IclMaskIsolatesQueries) {
    // Query rows see the context and themselves only; context rows never see queries.
    Rng rng(13);
    const std::size_t N = 7, d = 4, n_ctx = 3;
    auto q = rand_param(rng, N, d), k = rand_param(rng, N, d), v = rand_param(rng, N, d);
    for (auto mask : {MaskKind::Icl, MaskKind::ContextSet}) {
        const auto base = causal_masked_attention(q, k, v, 2, N, mask, n_ctx);
        auto k2 = k.value(), v2 = v.value();
        for (std::size_t c = 0; c < d; ++c) {
            k2[5 * d + c] += 3.0;
            v2[5 * d + c] -= 2.0;
        }
        const auto out = causal_masked_attention(q, constant(N, d, k2), constant(N, d, v2), 2, N, mask, n_ctx);
        for (std::size_t r = 0; r < N; ++r) {
            if (r == 5) continue;
            for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out.at(r, c), base.at(r, c));
        }
    }
}

TEST(Autodiff, BlocksAreIndependent) {
    Rng rng(14);
    auto q = rand_param(rng, 6, 2), k = rand_param(rng, 6, 2), v = rand_param(rng, 6, 2);
    const auto base = causal_masked_attention(q, k, v, 1, 3, MaskKind::None);
    auto v2 = v.value();
    v2[3 * 2] += 10.0;  // row 3 opens the second block
    const auto out = causal_masked_attention(q, k, constant(6, 2, v2), 1, 3, MaskKind::None);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(out.at(r, 0), base.at(r, 0));
}

TEST(Autodiff, ShapeErrorsNameBothShapes) {
    try {
        matmul(zeros(2, 3), zeros(4, 5));
        FAIL();
    } catch (const Error &e) {
        EXPECT_EQ(e.kind(), ErrorKind::Shape);
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2x3)"), std::string::npos);
        EXPECT_NE(msg.find("(4x5)"), std::string::npos);
    }
    EXPECT_THROW(add(zeros(2, 3), zeros(3, 2)), Error);
}

TEST(Autodiff, GradientShapeMatchesValue) {
    Rng rng(15);
    auto a = rand_param(rng, 3, 5);
    const auto loss = sum(relu(a));
    backward(loss);
    EXPECT_EQ(a.grad().size(), a.value().size());
}

TEST(Autodiff, DisabledBackwardRuleIsDetected) {
    Rng rng(16);
    auto a = rand_param(rng, 3, 4), b = rand_param(rng, 4, 2);
    debug::disabled_backward().insert(Op::MatMul);
    const double err = max_rel_error({a, b}, [&] { return matmul(a, b); });
    debug::disabled_backward().clear();
    EXPECT_GT(err, 0.5);
}
