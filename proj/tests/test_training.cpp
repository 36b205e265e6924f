#include "slopegrasp/envs.hpp"
#include "slopegrasp/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace slopegrasp;

namespace {

FieldParams tiny_field() {
    FieldParams fp;
    fp.point_encoding.frequencies = 1;
    fp.direction_encoding.frequencies = 1;
    return fp;
}

ValueModel tiny_model(std::uint64_t seed, nn::Activation act = nn::Activation::Elu,
                      std::shared_ptr<const SceneField> field = nullptr) {
    ValueModelConfig c;
    c.activation = act;
    c.aggregation_widths = {8};
    c.value_widths = {8};
    if (!field) field = std::make_shared<const SceneField>(tiny_field());
    return ValueModel(c, field, seed);
}

Scene one_box() {
    Scene s;
    s.primitives = {{Vec3(0.0, 0.0, 0.025), Vec3(0.02, 0.03, 0.025), 0.3, "red"}};
    return s;
}

double eval_node(PsiGraph& ctx, ad::NodeId n) {
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    return eval.value(n)(0, 0);
}

std::vector<DemoRecord> small_dataset(int n, std::uint64_t seed) {
    return generate_demos(TaskSpec::simple(), n, seed);
}

}  // namespace

TEST(TrainingSampling, NegativesInsideWorkspaceAndDeterministic) {
    const Workspace ws;
    Rng a(3), b(3);
    const auto na = sample_negatives(Representation::SixD, ws, 200, a);
    const auto nb = sample_negatives(Representation::SixD, ws, 200, b);
    ASSERT_EQ(na.size(), 200u);
    for (std::size_t i = 0; i < na.size(); ++i) {
        EXPECT_TRUE(ws.contains(position(na[i])));
        EXPECT_TRUE(is_valid(na[i]));
        EXPECT_EQ(to_vector(na[i]), to_vector(nb[i]));
    }
    EXPECT_THROW(sample_negatives(Representation::Quat, ws, 0, a), ConfigError);
}

TEST(TrainingSampling, ProximalZeroRadiusAndValidity) {
    LossConfig cfg;
    cfg.sigma_pos = 1e-300;
    cfg.sigma_rot = 1e-300;
    const Pose pt = PoseQ{Vec3(0.1, 0.2, 0.3), quat_from_axis_angle(Vec3(1, 2, 3).normalized(), 0.4)};
    Rng rng(4);
    for (const auto& p : sample_proximal(pt, cfg, rng)) {
        EXPECT_LE((to_vector(p) - to_vector(pt)).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_TRUE(is_valid(p));
    }
}

TEST(TrainingSampling, ProximalPositionStdMonteCarlo) {
    LossConfig cfg;
    cfg.proximal = 10000;
    const Pose pt = PoseQ{Vec3(0.1, -0.1, 0.2), Vec4(1, 0, 0, 0)};
    Rng rng(5);
    const auto samples = sample_proximal(pt, cfg, rng);
    for (int k = 0; k < 3; ++k) {
        double sum = 0.0, sq = 0.0;
        for (const auto& p : samples) {
            const double d = position(p)[k] - position(pt)[k];
            sum += d;
            sq += d * d;
        }
        const double n = static_cast<double>(samples.size());
        const double stddev = std::sqrt(sq / n - (sum / n) * (sum / n));
        EXPECT_NEAR(stddev, cfg.sigma_pos, 0.05 * cfg.sigma_pos);
    }
    for (const auto& p : samples) EXPECT_TRUE(is_valid(p));
}

TEST(TrainingLoss, ValueLossEqualLogits) {
    for (int n : {1, 15, 255}) EXPECT_NEAR(value_loss_from_logits(Vec::Zero(n + 1)), std::log(n + 1.0), 1e-12);
    EXPECT_NEAR(value_loss_from_logits(Vec::Zero(256)), 5.5452, 1e-4);
    Vec big(3);
    big << 800.0, 0.0, -5.0;
    EXPECT_NEAR(value_loss_from_logits(big), 0.0, 1e-12);
    Vec huge(2);
    huge << 1e6, 1e6;
    EXPECT_NEAR(value_loss_from_logits(huge), std::log(2.0), 1e-9);
}

TEST(TrainingLoss, ValueLossGraphEqualLogits) {
    // A constant head gives identical logits for every pose.
    const LinearHead zero(Representation::Quat, Vec::Zero(7));
    const Scene s = one_box();
    for (int n : {1, 15, 255}) {
        Rng rng(static_cast<std::uint64_t>(n));
        PsiGraph ctx;
        const Pose grasp = PoseQ{};
        const auto negs = sample_negatives(grasp, s.workspace, n, rng);
        EXPECT_NEAR(eval_node(ctx, value_loss(ctx, zero, s, grasp, negs)), std::log(n + 1.0), 1e-6);
    }
}

TEST(TrainingLoss, AuxParallelGradientGivesMinusPR) {
    // Attractor at p_next: grad psi(p_r) = 2 (p_next - p_r), parallel to the displacement.
    const Scene s = one_box();
    const Pose pnext = PoseQ{Vec3(0.05, 0.02, 0.1), quat_from_axis_angle(Vec3::UnitY(), 0.3)};
    const AttractorHead head(Representation::Quat, to_vector(pnext), Vec::Ones(7));
    LossConfig cfg;
    cfg.proximal = 8;
    Rng rng(6);
    const auto prox = sample_proximal(pnext, cfg, rng);
    bool all_moved = true;
    for (const auto& p : prox) all_moved = all_moved && (position(p) - position(pnext)).norm() > 1e-6;
    ASSERT_TRUE(all_moved);
    PsiGraph ctx;
    EXPECT_NEAR(eval_node(ctx, aux_loss(ctx, head, s, pnext, prox)), -2.0 * 8.0, 1e-9);
}

TEST(TrainingLoss, AuxOrthogonalGradientIsZero) {
    const Scene s = one_box();
    const Pose pr = PoseQ{};
    const Pose pnext = PoseQ{Vec3(0.1, 0.0, 0.0), Vec4(std::cos(0.1), 0.0, 0.0, std::sin(0.1))};
    Vec c(7);
    c << 0, 1, 0, 0, 1, 0, 0;  // orthogonal to (0.1, 0, 0) and to (cos 0.1 - 1, 0, 0, sin 0.1)
    const LinearHead head(Representation::Quat, c);
    PsiGraph ctx;
    EXPECT_NEAR(eval_node(ctx, aux_loss(ctx, head, s, pnext, {pr})), 0.0, 1e-12);
}

TEST(TrainingLoss, AuxZeroDisplacementIsZero) {
    const Scene s = one_box();
    const Pose p = PoseQ{Vec3(0.1, 0.1, 0.1), quat_from_axis_angle(Vec3::UnitX(), 0.2)};
    const ValueModel m = tiny_model(1);
    PsiGraph ctx;
    const double v = eval_node(ctx, aux_loss(ctx, m, s, p, {p, p, p}));
    EXPECT_EQ(v, 0.0);
}

TEST(TrainingLoss, RangesOnRandomModel) {
    const ValueModel m = tiny_model(2);
    const Scene s = one_box();
    Rng rng(7);
    LossConfig cfg;
    for (int trial = 0; trial < 10; ++trial) {
        const Pose pt = retract(Pose(PoseQ{Vec3(uniform(rng, -0.1, 0.1), uniform(rng, -0.1, 0.1), 0.1), uniform_quaternion(rng)}));
        const Pose pn = retract(Pose(PoseQ{position(pt) + Vec3(0, 0, -0.02), uniform_quaternion(rng)}));
        const auto prox = sample_proximal(pt, cfg, rng);
        const auto negs = sample_negatives(pt, s.workspace, 16, rng);
        PsiGraph ctx;
        const double aux = eval_node(ctx, aux_loss(ctx, m, s, pn, prox));
        EXPECT_LE(std::abs(aux), 2.0 * cfg.proximal + 1e-9);
        PsiGraph ctx2;
        EXPECT_GE(eval_node(ctx2, value_loss(ctx2, m, s, pt, negs)), 0.0);
    }
}

TEST(TrainingLoss, TotalLossCombinations) {
    const ValueModel m = tiny_model(3);
    const Scene s = one_box();
    Rng rng(8);
    const Pose grasp = PoseQ{Vec3(0, 0, 0.03), Vec4(0, 1, 0, 0)};
    const Pose pn = PoseQ{Vec3(0, 0, 0.06), Vec4(0, 1, 0, 0)};
    LossConfig cfg;
    const auto negs = sample_negatives(grasp, s.workspace, 8, rng);
    const auto prox = sample_proximal(pn, cfg, rng);
    auto total = [&](const LossConfig& c, bool aux) {
        PsiGraph ctx;
        const LossTerms t = total_loss(ctx, m, s, grasp, negs, pn, prox, c, aux);
        ad::Evaluation eval(ctx.graph, ctx.bindings);
        return std::pair{eval.value(t.total)(0, 0), eval.value(t.value)(0, 0)};
    };
    const auto [off_total, off_value] = total(cfg, false);
    EXPECT_EQ(off_total, off_value);
    LossConfig zero = cfg;
    zero.aux_weight = 0.0;
    const auto [z_total, z_value] = total(zero, true);
    EXPECT_NEAR(z_total, z_value, 1e-15);
    const auto [on_total, on_value] = total(cfg, true);
    EXPECT_TRUE(std::isfinite(on_total));
    EXPECT_NE(on_total, on_value);
}

// Includes the aux term, whose theta-gradient runs through the nested pose gradient.
TEST(TrainingLoss, ThetaGradientMatchesFiniteDifferences) {
    ValueModel m = tiny_model(4);
    const Scene s = one_box();
    Rng rng(9);
    LossConfig cfg;
    cfg.negatives = 6;
    cfg.proximal = 4;
    const Pose grasp = PoseQ{Vec3(0.0, 0.0, 0.03), quat_from_axis_angle(Vec3::UnitX(), std::numbers::pi)};
    const Pose pt = PoseQ{Vec3(0.01, 0.0, 0.09), quat_from_axis_angle(Vec3::UnitX(), 2.8)};
    const Pose pn = PoseQ{Vec3(0.005, 0.0, 0.07), quat_from_axis_angle(Vec3::UnitX(), 3.0)};
    const auto negs = sample_negatives(grasp, s.workspace, cfg.negatives, rng);
    const auto prox = sample_proximal(pt, cfg, rng);

    auto loss_value = [&]() {
        PsiGraph ctx;
        const LossTerms t = total_loss(ctx, m, s, grasp, negs, pn, prox, cfg, true);
        return eval_node(ctx, t.total);
    };
    PsiGraph ctx;
    const LossTerms t = total_loss(ctx, m, s, grasp, negs, pn, prox, cfg, true);
    const auto grads = ad::gradient(ctx.graph, {t.total, ctx.params, false});
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    const auto analytic = eval.values(grads);

    auto params = m.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        Mat& tensor = *params[k].second;
        const Mat numeric = testutil::central_gradient(
            std::function<double(const Mat&)>([&](const Mat& x) {
                const Mat saved = tensor;
                tensor = x;
                const double v = loss_value();
                tensor = saved;
                return v;
            }),
            tensor, 1e-6);
        // Absolute floor above the difference-quotient roundoff, which is ~1e-9 here.
        const double scale = std::max({analytic[k].cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-6});
        EXPECT_LT((analytic[k] - numeric).cwiseAbs().maxCoeff() / scale, 1e-3) << params[k].first;
    }
    // Shifting every logit leaves the softmax loss unchanged, and the aux term ignores the output bias.
    EXPECT_LT(std::abs(analytic.back()(0, 0)), 1e-12);
    EXPECT_EQ(params.back().first, "value.head.b");
}

TEST(TrainingLoop, ConfigValidation) {
    TrainConfig cfg;
    cfg.epochs = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    LossConfig loss;
    loss.proximal = 0;
    EXPECT_THROW(loss.validate(), ConfigError);
}

TEST(TrainingLoop, AuxWithReluRejected) {
    ValueModel m = tiny_model(5, nn::Activation::Relu);
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(m, small_dataset(2, 1), {}, cfg, {}), ConfigError);
    cfg.aux_enabled = false;
    EXPECT_NO_THROW(train(m, small_dataset(2, 1), {}, cfg, {}));
}

TEST(TrainingLoop, BitIdenticalCurvesAndWeights) {
    const auto data = small_dataset(6, 2);
    const auto held = small_dataset(2, 3);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 17;
    LossConfig loss;
    loss.negatives = 8;
    loss.proximal = 2;
    ValueModel a = tiny_model(6), b = tiny_model(6);
    const auto ra = train(a, data, held, cfg, loss);
    const auto rb = train(b, data, held, cfg, loss);
    ASSERT_EQ(ra.curve.size(), 3u);
    for (std::size_t e = 0; e < ra.curve.size(); ++e) {
        EXPECT_EQ(ra.curve[e].value_loss, rb.curve[e].value_loss);
        EXPECT_EQ(ra.curve[e].aux_loss, rb.curve[e].aux_loss);
        EXPECT_EQ(ra.curve[e].alignment, rb.curve[e].alignment);
    }
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(*pa[k].second, *pb[k].second);
    const ValueModel fresh = tiny_model(6);
    EXPECT_NE(*fresh.parameters().front().second, *pa.front().second);
}

TEST(TrainingLoop, FrozenFieldUnchanged) {
    auto field = std::make_shared<SceneField>(SceneField::learned(tiny_field(), {}, 3));
    std::vector<Scene> scenes{one_box()};
    PretrainConfig pc;
    pc.steps = 5;
    pretrain_learned_field(*field, scenes, pc);
    std::vector<Mat> before;
    field->network().visit("", [&](const std::string&, const Mat& m) { before.push_back(m); });
    before.push_back(field->readout().weights);

    ValueModel m = tiny_model(7, nn::Activation::Elu, field);
    TrainConfig cfg;
    cfg.epochs = 2;
    LossConfig loss;
    loss.negatives = 4;
    loss.proximal = 2;
    train(m, small_dataset(3, 4), {}, cfg, loss);

    std::vector<Mat> after;
    field->network().visit("", [&](const std::string&, const Mat& x) { after.push_back(x); });
    after.push_back(field->readout().weights);
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t k = 0; k < before.size(); ++k)
        EXPECT_EQ(std::memcmp(before[k].data(), after[k].data(), sizeof(double) * before[k].size()), 0);
}

TEST(TrainingData, JsonLinesRoundTrip) {
    const auto demos = small_dataset(3, 9);
    const std::string dir = testutil::temp_dir("dataset");
    write_dataset(demos, dir + "/d.jsonl");
    const auto back = read_dataset(dir + "/d.jsonl");
    ASSERT_EQ(back.size(), demos.size());
    for (std::size_t i = 0; i < demos.size(); ++i) {
        EXPECT_EQ(demo_to_json_line(back[i]), demo_to_json_line(demos[i]));
        EXPECT_EQ(back[i].seed, demos[i].seed);
        EXPECT_EQ(back[i].trajectory.size(), demos[i].trajectory.size());
    }
    std::ofstream(dir + "/bad.jsonl") << demo_to_json_line(demos[0]) << "\n{\"format\": \"other\"}\n";
    try {
        read_dataset(dir + "/bad.jsonl");
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("bad.jsonl:2"), std::string::npos);
    }
}

TEST(TrainingData, SaveLoadModel) {
    const ValueModel a = tiny_model(10);
    const std::string dir = testutil::temp_dir("model");
    save_model(a, dir + "/w.sgwt");
    ValueModel b = tiny_model(11);
    load_model(b, dir + "/w.sgwt");
    const auto pa = a.parameters();
    const auto pb = std::as_const(b).parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(*pa[k].second, *pb[k].second);
    ValueModel relu = tiny_model(10, nn::Activation::Relu);
    EXPECT_THROW(load_model(relu, dir + "/w.sgwt"), nn::WeightFileError);
}
