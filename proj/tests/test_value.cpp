#include "slopegrasp/envs.hpp"
#include "slopegrasp/value.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace slopegrasp;

namespace {

ValueModelConfig small_config(Representation rep = Representation::Quat, nn::Activation act = nn::Activation::Elu) {
    ValueModelConfig c;
    c.representation = rep;
    c.activation = act;
    c.aggregation_widths = {16};
    c.value_widths = {16, 16};
    return c;
}

ValueModel small_model(std::uint64_t seed, Representation rep = Representation::Quat,
                       nn::Activation act = nn::Activation::Elu) {
    return ValueModel(small_config(rep, act), std::make_shared<const SceneField>(), seed);
}

Scene test_scene(std::uint64_t seed = 11) {
    Rng rng(seed);
    return generate_scene(TaskSpec::simple(), rng);
}

/// Pose near the object so support poses see non-trivial geometry.
Pose near_pose(const Scene& s, Representation rep, Rng& rng) {
    const auto& b = s.primitives.front();
    const Vec3 p = b.center + Vec3(uniform(rng, -0.05, 0.05), uniform(rng, -0.05, 0.05), uniform(rng, 0.0, 0.08));
    return make_pose(p, rotation_from_quat(uniform_quaternion(rng)), rep);
}

double psi_flat(const ValueFunction& fn, const Scene& s, const Vec& x) {
    return evaluate_batch(fn, s, x.transpose(), false).values[0];
}

Vec richardson_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    return (4.0 * testutil::central_gradient(f, x, 0.5 * h) - testutil::central_gradient(f, x, h)) / 3.0;
}

double normwise_error(const Vec& a, const Vec& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-12});
}

}  // namespace

TEST(ValueModel, DeterministicInitialization) {
    const Scene s = test_scene();
    Rng rng(1);
    const Pose p = near_pose(s, Representation::Quat, rng);
    EXPECT_EQ(psi(small_model(5), p, s), psi(small_model(5), p, s));
    EXPECT_NE(psi(small_model(5), p, s), psi(small_model(6), p, s));
}

TEST(ValueModel, PoseGradientMatchesFiniteDifferences) {
    const Scene s = test_scene();
    for (Representation rep : {Representation::Quat, Representation::SixD}) {
        const ValueModel m = small_model(3, rep);
        Rng rng(2);
        for (int i = 0; i < 30; ++i) {
            const Pose p = near_pose(s, rep, rng);
            const Vec g = pose_gradient(m, p, s);
            const Vec n = richardson_gradient([&](const Vec& x) { return psi_flat(m, s, x); }, to_vector(p), 2e-6);
            EXPECT_LT(normwise_error(g, n), 1e-4) << to_string(rep) << " probe " << i;
        }
    }
}

TEST(ValueModel, SceneChangesValue) {
    const Scene s = test_scene();
    Scene moved = s;
    moved.primitives.front().center += Vec3(0.03, 0.0, 0.0);
    const ValueModel m = small_model(4);
    Rng rng(3);
    const Pose p = near_pose(s, Representation::Quat, rng);
    EXPECT_GT(std::abs(psi(m, p, s) - psi(m, p, moved)), 1e-9);
}

TEST(ValueModel, RepresentationMismatchRaises) {
    const Scene s = test_scene();
    const ValueModel m = small_model(1, Representation::Quat);
    EXPECT_THROW(psi(m, Pose(Pose6D{}), s), ConfigError);
    EXPECT_THROW(evaluate_batch(m, s, Mat::Zero(1, 9), false), ConfigError);
}

TEST(ValueModel, UnfrozenLearnedFieldRejected) {
    auto field = std::make_shared<const SceneField>(SceneField::learned({}, {}, 1));
    EXPECT_THROW(ValueModel(small_config(), field, 1), ConfigError);
}

TEST(ValueModel, BatchMatchesSingleAndPermutes) {
    const Scene s = test_scene();
    const ValueModel m = small_model(8);
    Rng rng(4);
    std::vector<Pose> poses;
    for (int i = 0; i < 7; ++i) poses.push_back(near_pose(s, Representation::Quat, rng));
    const Vec batch = multi_candidate_values(m, poses, s);
    ASSERT_EQ(batch.size(), 7);
    for (int i = 0; i < 7; ++i) EXPECT_NEAR(batch[i], psi(m, poses[static_cast<std::size_t>(i)], s), 1e-12);
    std::vector<Pose> reversed(poses.rbegin(), poses.rend());
    const Vec rb = multi_candidate_values(m, reversed, s);
    for (int i = 0; i < 7; ++i) EXPECT_NEAR(rb[6 - i], batch[i], 1e-12);
}

TEST(ValueModel, ParameterGradientMatchesFiniteDifferences) {
    const Scene s = test_scene();
    ValueModel m = small_model(9);
    Rng rng(5);
    Mat poses(4, pose_dim(Representation::Quat));
    for (int i = 0; i < 4; ++i) poses.row(i) = to_vector(near_pose(s, Representation::Quat, rng)).transpose();

    PsiGraph ctx;
    const ad::NodeId leaf = ctx.pose_leaf(poses);
    const ad::NodeId total = ctx.graph.sum(m.build(ctx, leaf, s));
    const auto grads = ad::gradient(ctx.graph, {total, ctx.params, false});
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    const auto analytic = eval.values(grads);

    auto params = m.parameters();
    ASSERT_EQ(params.size(), analytic.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        Mat* tensor = params[k].second;
        const Mat numeric = testutil::central_gradient(
            std::function<double(const Mat&)>([&](const Mat& x) {
                const Mat saved = *tensor;
                *tensor = x;
                const double v = evaluate_batch(m, s, poses, false).values.sum();
                *tensor = saved;
                return v;
            }),
            *tensor, 1e-6);
        EXPECT_LT((analytic[k] - numeric).cwiseAbs().maxCoeff() /
                      std::max({analytic[k].cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-9}),
                  1e-5)
            << params[k].first;
    }
}

// Mixed partials d/dtheta (w . dpsi/dp) against differences of the analytic pose gradient.
TEST(ValueModel, MixedPartialsMatchFiniteDifferences) {
    const Scene s = test_scene();
    ValueModel m = small_model(10);
    Rng rng(6);
    Mat poses(3, pose_dim(Representation::Quat)), weights(3, pose_dim(Representation::Quat));
    for (int i = 0; i < 3; ++i) {
        poses.row(i) = to_vector(near_pose(s, Representation::Quat, rng)).transpose();
        for (int j = 0; j < weights.cols(); ++j) weights(i, j) = gaussian(rng, 1.0);
    }
    PsiGraph ctx;
    const ad::NodeId leaf = ctx.pose_leaf(poses);
    const ad::NodeId g = pose_gradient(ctx, m, leaf, s, true);
    const ad::NodeId directional = ctx.graph.sum(ctx.graph.mul(g, ctx.graph.constant(weights)));
    const auto mixed = ad::gradient(ctx.graph, {directional, ctx.params, false});
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    const auto analytic = eval.values(mixed);

    auto directional_value = [&]() {
        return evaluate_batch(m, s, poses, true).gradients.cwiseProduct(weights).sum();
    };
    auto params = m.parameters();
    Rng pick(7);
    for (std::size_t k = 0; k < params.size(); ++k) {
        ASSERT_TRUE(analytic[k].allFinite());
        Mat& tensor = *params[k].second;
        for (int trial = 0; trial < 4; ++trial) {
            const auto idx = static_cast<Eigen::Index>(uniform(pick, 0, static_cast<double>(tensor.size())));
            const double saved = tensor.data()[idx];
            const double h = 1e-5;
            tensor.data()[idx] = saved + h;
            const double up = directional_value();
            tensor.data()[idx] = saved - h;
            const double down = directional_value();
            tensor.data()[idx] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic[k].data()[idx];
            EXPECT_NEAR(a, numeric, 1e-4 * std::max({std::abs(a), std::abs(numeric), 1e-2})) << params[k].first;
        }
    }
}

TEST(ValueModel, EluIsC1AcrossActivationBoundaries) {
    const Scene s = test_scene();
    const ProbeReport elu = probe_activation_boundaries(small_model(12), s, 20, 16, 3);
    EXPECT_EQ(elu.boundaries, 20);
    EXPECT_LT(elu.max_relative_jump, 1e-6);
    EXPECT_TRUE(elu.mixed_partials_finite);
    const ProbeReport relu =
        probe_activation_boundaries(small_model(12, Representation::Quat, nn::Activation::Relu), s, 20, 0, 3);
    EXPECT_EQ(relu.boundaries, 20);
    EXPECT_GT(relu.max_relative_jump, 1e-2);
}

TEST(ValueHeads, AttractorValueAndGradient) {
    const Scene s = test_scene();
    const Vec3 goal(0.1, -0.05, 0.2);
    const AttractorHead head = AttractorHead::position(Representation::Quat, goal);
    const Pose p = PoseQ{Vec3(0.3, 0.1, 0.0), quat_from_axis_angle(Vec3::UnitX(), 0.7)};
    const Vec3 diff = Vec3(0.3, 0.1, 0.0) - goal;
    EXPECT_NEAR(psi(head, p, s), -diff.squaredNorm(), 1e-15);
    const Vec g = pose_gradient(head, p, s);
    EXPECT_LT((g.head<3>() - (-2.0 * diff)).norm(), 1e-15);
    EXPECT_TRUE(g.tail(4).isZero());
}

TEST(ValueHeads, LinearGradientIsCoefficients) {
    const Scene s = test_scene();
    Vec c(9);
    c << 1, -2, 3, 0.5, 0, 0, 0, 0, -1;
    const LinearHead head(Representation::SixD, c);
    const Pose p = Pose6D{};
    EXPECT_EQ(pose_gradient(head, p, s), c);
    EXPECT_NEAR(psi(head, p, s), c.dot(to_vector(p)), 1e-15);
}
