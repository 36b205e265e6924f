#include "slopegrasp/autodiff.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace slopegrasp;
using namespace slopegrasp::ad;

namespace {

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

double eval_scalar(const Graph& g, NodeId root, const Bindings& b) { return evaluate(g, root, b)(0, 0); }

// f(x) = x0 * x1 and sin(x0) + x1^2, with hand-written derivatives.
class ProductSine final : public RowFunction {
public:
    int input_dim() const override { return 2; }
    int output_dim() const override { return 2; }
    void value(const double* in, double* out) const override {
        out[0] = in[0] * in[1];
        out[1] = std::sin(in[0]) + in[1] * in[1];
    }
    void jacobian(const double* in, Mat& jac) const override {
        jac.resize(2, 2);
        jac << in[1], in[0], std::cos(in[0]), 2.0 * in[1];
    }
    void weighted_hessian_vector(const double* in, const double* w, const double* v, double* out) const override {
        // H0 = [[0,1],[1,0]], H1 = [[-sin x0, 0],[0, 2]]
        out[0] = w[0] * v[1] + w[1] * (-std::sin(in[0]) * v[0]);
        out[1] = w[0] * v[0] + w[1] * 2.0 * v[1];
    }
};

}  // namespace

TEST(AutodiffEvaluate, SquareAtThree) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    Bindings b;
    b.bind(x, scalar(3.0));
    EXPECT_DOUBLE_EQ(eval_scalar(g, g.mul(x, x), b), 9.0);
}

TEST(AutodiffEvaluate, EluAtMinusOne) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    Bindings b;
    b.bind(x, scalar(-1.0));
    EXPECT_NEAR(eval_scalar(g, g.elu(x), b), std::exp(-1.0) - 1.0, 1e-15);
    EXPECT_NEAR(eval_scalar(g, g.elu(x), b), -0.6321, 1e-4);
}

TEST(AutodiffEvaluate, PositionalEncodingSumAtZero) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    Bindings b;
    b.bind(x, scalar(0.0));
    EXPECT_DOUBLE_EQ(eval_scalar(g, g.sum(positional_encoding(g, x, 1)), b), 1.0);
}

TEST(AutodiffEvaluate, UnboundLeafNamesTheNode) {
    Graph g;
    const NodeId x = g.leaf("pose_x", 1, 1);
    const NodeId y = g.sum(x);
    try {
        evaluate(g, y, Bindings{});
        FAIL() << "expected GraphError";
    } catch (const GraphError& e) {
        EXPECT_NE(std::string(e.what()).find("unbound leaf"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("pose_x"), std::string::npos);
    }
}

TEST(AutodiffEvaluate, ShapeMismatchRejected) {
    Graph g;
    const NodeId x = g.leaf("x", 2, 3);
    const NodeId y = g.leaf("y", 3, 2);
    EXPECT_THROW(g.add(x, y), GraphError);
    EXPECT_THROW(g.matmul(x, x), GraphError);
    Bindings b;
    b.bind(x, Mat::Zero(3, 3));
    EXPECT_THROW(evaluate(g, g.sum(x), b), GraphError);
}

TEST(AutodiffEvaluate, RepeatedEvaluationIsBitIdentical) {
    std::mt19937_64 rng(3);
    Graph g;
    const NodeId x = g.leaf("x", 4, 5);
    const NodeId w = g.leaf("w", 3, 5);
    const NodeId y = g.sum(g.elu(g.matmul(x, w, false, true)));
    Bindings b;
    b.bind(x, testutil::random_mat(4, 5, rng));
    b.bind(w, testutil::random_mat(3, 5, rng));
    const double a = eval_scalar(g, y, b);
    for (int i = 0; i < 5; ++i) EXPECT_EQ(eval_scalar(g, y, b), a);
}

TEST(AutodiffGradient, ThetaXSquared) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const NodeId th = g.leaf("theta", 1, 1);
    const NodeId f = g.mul(th, g.mul(x, x));
    const auto dx = gradient(g, {f, {x}, true});
    Bindings b;
    b.bind(x, scalar(2.0));
    b.bind(th, scalar(3.0));
    EXPECT_DOUBLE_EQ(eval_scalar(g, dx[0], b), 12.0);
    const auto dtheta_dx = gradient(g, {dx[0], {th}, false});
    EXPECT_DOUBLE_EQ(eval_scalar(g, dtheta_dx[0], b), 4.0);
}

TEST(AutodiffGradient, EluDerivativeContinuousAtZero) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const auto d = gradient(g, {g.elu(x), {x}, false});
    Bindings b;
    for (double v : {0.0, 1e-12, -1e-12}) {
        b.bind(x, scalar(v));
        EXPECT_NEAR(eval_scalar(g, d[0], b), 1.0, 1e-11) << "x = " << v;
    }
}

TEST(AutodiffGradient, NonScalarOutputRejected) {
    Graph g;
    const NodeId x = g.leaf("x", 2, 1);
    EXPECT_THROW(gradient(g, {x, {x}, false}), GraphError);
}

TEST(AutodiffGradient, DepthThreeRejected) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const NodeId f = g.mul(x, g.mul(x, g.mul(x, x)));
    const auto d1 = gradient(g, {f, {x}, true});
    const auto d2 = gradient(g, {d1[0], {x}, true});
    Bindings b;
    b.bind(x, scalar(2.0));
    EXPECT_DOUBLE_EQ(eval_scalar(g, d2[0], b), 48.0);  // 12 x^2
    EXPECT_THROW(gradient(g, {d2[0], {x}, false}), GraphError);
}

TEST(AutodiffGradient, NonDifferentiableGradientCannotBeDifferentiatedAgain) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const auto d1 = gradient(g, {g.mul(x, g.mul(x, x)), {x}, false});
    EXPECT_THROW(gradient(g, {d1[0], {x}, false}), GraphError);
}

TEST(AutodiffGradient, UnrelatedLeafGetsZeros) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const NodeId y = g.leaf("y", 2, 3);
    const auto d = gradient(g, {g.mul(x, x), {y}, false});
    Bindings b;
    b.bind(x, scalar(1.0));
    b.bind(y, Mat::Ones(2, 3));
    EXPECT_TRUE(evaluate(g, d[0], b).isZero());
}

// Every primitive against an independent central difference at 100 random points in [-3, 3].
TEST(AutodiffGradient, PrimitivesMatchCentralDifferences) {
    std::mt19937_64 rng(11);
    using Builder = std::function<NodeId(Graph&, NodeId, NodeId)>;
    struct Case {
        const char* name;
        Builder build;
        bool positive;  // domain shifted into [0.1, 3.1]
    };
    const std::vector<Case> cases{
        {"add", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(g.add(x, y), x)); }, false},
        {"sub", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(g.sub(x, y), x)); }, false},
        {"mul", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(x, y)); }, false},
        {"div", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.div(x, y)); }, true},
        {"matmul", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.elu(g.matmul(x, y, false, true))); }, false},
        {"matmul_tx", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.sin(g.matmul(x, y, true, false))); }, false},
        {"sum", [](Graph& g, NodeId x, NodeId) { return g.mul(g.sum(x), g.sum(x)); }, false},
        {"mean", [](Graph& g, NodeId x, NodeId) { return g.mul(g.mean(x), g.mean(x)); }, false},
        {"elu", [](Graph& g, NodeId x, NodeId) { return g.sum(g.elu(x)); }, false},
        {"relu", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(g.relu(x), y)); }, false},
        {"sin", [](Graph& g, NodeId x, NodeId) { return g.sum(g.sin(x)); }, false},
        {"cos", [](Graph& g, NodeId x, NodeId) { return g.sum(g.cos(x)); }, false},
        {"exp", [](Graph& g, NodeId x, NodeId) { return g.sum(g.exp(x)); }, false},
        {"log", [](Graph& g, NodeId x, NodeId) { return g.sum(g.log(x)); }, true},
        {"sqrt", [](Graph& g, NodeId x, NodeId) { return g.sum(g.sqrt(x)); }, true},
        {"dot", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.sin(dot(g, x, y))); }, false},
        {"l2_norm", [](Graph& g, NodeId x, NodeId) { return g.sum(l2_norm(g, x)); }, false},
        {"cosine", [](Graph& g, NodeId x, NodeId y) { return g.sum(cosine_similarity(g, x, y)); }, false},
        {"logsumexp", [](Graph& g, NodeId x, NodeId) { return g.logsumexp(x); }, false},
        {"row_col_sum", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(g.row_sum(x), g.row_sum(y))); }, false},
        {"reshape", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.mul(g.reshape(x, 3, 2), g.reshape(y, 3, 2))); },
         false},
        {"slice_concat",
         [](Graph& g, NodeId x, NodeId y) {
             return g.sum(g.sin(g.concat_cols(g.slice_cols(x, 1, 2), g.slice_cols(y, 0, 1))));
         },
         false},
        {"add_row", [](Graph& g, NodeId x, NodeId y) { return g.sum(g.exp(g.scale(g.add_row(x, g.slice_cols(g.reshape(y, 1, 6), 0, 3)), 0.3))); },
         false},
    };
    for (const auto& c : cases) {
        double worst = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            Graph g;
            const NodeId x = g.leaf("x", 2, 3);
            const NodeId y = g.leaf("y", 2, 3);
            const NodeId f = c.build(g, x, y);
            Mat xv = testutil::random_mat(2, 3, rng, -3.0, 3.0);
            Mat yv = testutil::random_mat(2, 3, rng, -3.0, 3.0);
            if (c.positive) {
                xv = xv.array() + 3.1;
                yv = yv.array() + 3.1;
            }
            if (std::string(c.name) == "relu" && (xv.array().abs() < 1e-3).any()) continue;
            Bindings b;
            b.bind(x, xv);
            b.bind(y, yv);
            const auto grads = gradient(g, {f, {x, y}, false});
            for (int k = 0; k < 2; ++k) {
                const NodeId wrt = k == 0 ? x : y;
                const Mat analytic = evaluate(g, grads[static_cast<std::size_t>(k)], b);
                const Mat numeric = testutil::central_gradient(
                    [&](const Mat& v) {
                        Bindings p = b;
                        p.bind(wrt, v);
                        return eval_scalar(g, f, p);
                    },
                    k == 0 ? xv : yv, 1e-6);
                worst = std::max(worst, testutil::max_relative_error(analytic, numeric, 1e-6));
            }
        }
        EXPECT_LT(worst, 1e-5) << c.name;
    }
}

TEST(AutodiffFiniteDifference, QuadraticForm) {
    std::mt19937_64 rng(5);
    Graph g;
    const NodeId x = g.leaf("x", 4, 1);
    const Mat a = testutil::random_mat(4, 4, rng);
    const NodeId q = g.sum(g.mul(x, g.matmul(g.constant(a), x)));
    Bindings b;
    b.bind(x, testutil::random_mat(4, 1, rng));
    const NodeId wrt[] = {x};
    EXPECT_LT(finite_difference_check(g, q, wrt, b, 1e-5), 1e-6);
}

TEST(AutodiffFiniteDifference, RejectsNonPositiveStep) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 1);
    const NodeId wrt[] = {x};
    Bindings b;
    b.bind(x, scalar(1.0));
    EXPECT_THROW(finite_difference_check(g, g.mul(x, x), wrt, b, 0.0), ConfigError);
}

TEST(AutodiffFiniteDifference, SkipsDegenerateComponents) {
    Graph g;
    const NodeId x = g.leaf("x", 2, 1);
    const NodeId y = g.leaf("y", 1, 1);
    const NodeId f = g.mul(y, y);
    Bindings b;
    b.bind(x, Mat::Zero(2, 1));
    b.bind(y, scalar(0.0));
    const NodeId wrt[] = {x, y};
    EXPECT_EQ(finite_difference_check(g, f, wrt, b, 1e-5), 0.0);
}

// Gradient of a gradient against finite differences of the analytic first gradient.
TEST(AutodiffFiniteDifference, SecondOrderThroughEluNetwork) {
    std::mt19937_64 rng(9);
    Graph g;
    const NodeId p = g.leaf("p", 3, 4);
    const NodeId w1 = g.leaf("w1", 6, 4);
    const NodeId w2 = g.leaf("w2", 1, 6);
    const NodeId h = g.elu(g.matmul(p, w1, false, true));
    const NodeId psi = g.sum(g.matmul(h, w2, false, true));
    const auto dp = gradient(g, {psi, {p}, true});
    const Mat target = testutil::random_mat(3, 4, rng);
    const NodeId s = g.sum(cosine_similarity(g, dp[0], g.constant(target)));
    Bindings b;
    b.bind(p, testutil::random_mat(3, 4, rng));
    b.bind(w1, testutil::random_mat(6, 4, rng));
    b.bind(w2, testutil::random_mat(1, 6, rng));
    const NodeId wrt[] = {w1, w2};
    EXPECT_LT(finite_difference_check(g, s, wrt, b, 1e-6), 1e-3);

    // Same check with the first gradient evaluated by an external oracle.
    const auto dtheta = gradient(g, {s, {w1}, false});
    const Mat analytic = evaluate(g, dtheta[0], b);
    const Mat numeric = testutil::central_gradient(
        [&](const Mat& w) {
            Bindings q = b;
            q.bind(w1, w);
            return eval_scalar(g, s, q);
        },
        *b.find(w1), 1e-6);
    EXPECT_LT(testutil::max_relative_error(analytic, numeric, 1e-6 * analytic.cwiseAbs().maxCoeff()), 1e-3);
}

TEST(AutodiffMap, ValueVjpAndHvpMatchHandDerivatives) {
    std::mt19937_64 rng(21);
    auto fn = std::make_shared<const ProductSine>();
    Graph g;
    const NodeId x = g.leaf("x", 5, 2);
    const NodeId th = g.leaf("theta", 5, 2);
    const NodeId y = g.map(fn, x);
    const NodeId f = g.sum(g.mul(y, th));
    const auto dx = gradient(g, {f, {x}, true});
    const NodeId s = g.sum(g.mul(dx[0], dx[0]));
    Bindings b;
    b.bind(x, testutil::random_mat(5, 2, rng));
    b.bind(th, testutil::random_mat(5, 2, rng));
    const NodeId wrt1[] = {x, th};
    EXPECT_LT(finite_difference_check(g, f, wrt1, b, 1e-6), 1e-7);
    EXPECT_LT(finite_difference_check(g, s, wrt1, b, 1e-6), 1e-6);
}

TEST(AutodiffHelpers, CosineSimilarityGuardsZeroNorm) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 3);
    const NodeId y = g.leaf("y", 1, 3);
    Bindings b;
    b.bind(x, Mat::Zero(1, 3));
    b.bind(y, Mat::Ones(1, 3));
    const double c = eval_scalar(g, cosine_similarity(g, x, y), b);
    EXPECT_TRUE(std::isfinite(c));
    EXPECT_EQ(c, 0.0);
    const auto d = gradient(g, {g.sum(cosine_similarity(g, x, y)), {x, y}, false});
    EXPECT_TRUE(all_finite(evaluate(g, d[0], b)));
}

TEST(AutodiffHelpers, LogSumExpStableForLargeInputs) {
    Graph g;
    const NodeId x = g.leaf("x", 1, 3);
    Bindings b;
    Mat v(1, 3);
    v << 1000.0, 1000.0, 1000.0;
    b.bind(x, v);
    EXPECT_NEAR(eval_scalar(g, g.logsumexp(x), b), 1000.0 + std::log(3.0), 1e-9);
}
