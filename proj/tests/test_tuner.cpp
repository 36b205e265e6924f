#include "slopegrasp/envs.hpp"
#include "slopegrasp/tuner.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace slopegrasp;

namespace {

/// E[max(0, X - best)] for X ~ N(mu, sigma^2) by trapezoid quadrature over +-12 sigma.
double ei_quadrature(double mu, double sigma, double best) {
    const int n = 200000;
    const double lo = mu - 12 * sigma, hi = mu + 12 * sigma, h = (hi - lo) / n;
    double acc = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double f = std::max(0.0, x - best) * std::exp(-0.5 * (x - mu) * (x - mu) / (sigma * sigma)) /
                         (sigma * std::sqrt(2 * std::numbers::pi));
        acc += (i == 0 || i == n) ? 0.5 * f : f;
    }
    return acc * h;
}

}  // namespace

TEST(TunerSpace, ValidationAndUnitMapping) {
    HyperSpace bad;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.dims = {{"lr_pos", 1.0, 1.0}};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad.dims = {{"lr_pos", 0.0, 1.0, true}};
    EXPECT_THROW(bad.validate(), ConfigError);

    const HyperSpace s = HyperSpace::schedule(true, 8, 64);
    ASSERT_EQ(s.size(), 5u);
    const auto mid = s.from_unit(Vec::Constant(5, 0.5));
    EXPECT_NEAR(mid[0], std::sqrt(1e-3 * 1e-1), 1e-15);  // log-scale midpoint is the geometric mean
    EXPECT_NEAR(mid[2], 0.9, 1e-15);
    EXPECT_EQ(mid[4], 36.0);
    const Vec back = s.to_unit(mid);
    EXPECT_NEAR(back[0], 0.5, 1e-12);
}

TEST(TunerSuggest, EmptyHistoryGivesPointInBounds) {
    const HyperSpace s = HyperSpace::schedule(true);
    for (int i = 0; i < 100; ++i) {
        Rng rng(static_cast<std::uint64_t>(i));
        const auto p = suggest({}, s, rng);
        ASSERT_EQ(p.size(), s.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
            EXPECT_GE(p[k], s.dims[k].lo);
            EXPECT_LE(p[k], s.dims[k].hi);
        }
        EXPECT_EQ(p[4], std::round(p[4]));
    }
}

TEST(TunerGp, InterpolatesWithoutNoise) {
    std::mt19937_64 gen(3);
    const Mat x = testutil::random_mat(12, 3, gen, 0.0, 1.0);
    Vec y(12);
    for (int i = 0; i < 12; ++i) y[i] = std::sin(3 * x(i, 0)) + x(i, 1) * x(i, 2);
    GaussianProcess gp(0.3, 0.0);
    gp.fit(x, y);
    for (int i = 0; i < 12; ++i) {
        const auto [mu, sd] = gp.predict(x.row(i).transpose());
        EXPECT_NEAR(mu, y[i], 1e-6);
        EXPECT_LT(sd, 1e-3);
    }
    const auto [far_mu, far_sd] = gp.predict(Vec::Constant(3, 5.0));
    EXPECT_NEAR(far_mu, y.mean(), 1e-9);  // reverts to the prior mean far from the data
    EXPECT_GT(far_sd, 0.9 * std::sqrt((y.array() - y.mean()).square().mean()));
}

TEST(TunerGp, NoisyMeanNearObservations) {
    std::mt19937_64 gen(4);
    const Mat x = testutil::random_mat(10, 2, gen, 0.0, 1.0);
    Vec y(10);
    for (int i = 0; i < 10; ++i) y[i] = x(i, 0) - x(i, 1);
    GaussianProcess gp(0.3, 1e-3);
    gp.fit(x, y);
    const double spread = y.maxCoeff() - y.minCoeff();
    for (int i = 0; i < 10; ++i) EXPECT_NEAR(gp.predict(x.row(i).transpose()).first, y[i], 0.01 * spread);
}

TEST(TunerEi, MatchesQuadratureAndIsNonNegative) {
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        const double mu = uniform(rng, -1, 1), sigma = uniform(rng, 0.01, 1), best = uniform(rng, -1, 1);
        EXPECT_NEAR(expected_improvement(mu, sigma, best), ei_quadrature(mu, sigma, best), 1e-7);
    }
    for (int i = 0; i < 1000; ++i)
        EXPECT_GE(expected_improvement(uniform(rng, -5, 5), uniform(rng, 0, 2), uniform(rng, -5, 5)), 0.0);
    EXPECT_EQ(expected_improvement(0.3, 0.0, 0.5), 0.0);
    EXPECT_NEAR(expected_improvement(0.7, 0.0, 0.5), 0.2, 1e-15);
}

TEST(TunerEi, VanishesAtObservedBest) {
    std::mt19937_64 gen(6);
    const Mat x = testutil::random_mat(8, 2, gen, 0.0, 1.0);
    Vec y(8);
    for (int i = 0; i < 8; ++i) y[i] = -(x.row(i).array() - 0.4).square().sum();
    GaussianProcess gp(0.3, 0.0);
    gp.fit(x, y);
    Eigen::Index arg;
    const double best = y.maxCoeff(&arg);
    const auto [mu, sd] = gp.predict(x.row(arg).transpose());
    EXPECT_LT(expected_improvement(mu, sd, best), 1e-6);
}

TEST(TunerTune, BudgetOneIsSingleRandomTrial) {
    const HyperSpace s = HyperSpace::schedule(false);
    const TuneResult r = tune(s, [](const std::vector<double>&, int) { return 0.25; }, 1, 9);
    ASSERT_EQ(r.history.size(), 1u);
    Rng rng(derive_seed(9, 0x74756e65, 0));
    EXPECT_EQ(r.best.point, suggest({}, s, rng));
    EXPECT_EQ(r.best.objective, 0.25);
    EXPECT_THROW(tune(s, [](const std::vector<double>&, int) { return 0.0; }, 0, 9), ConfigError);
}

TEST(TunerTune, NestedBudgetsArePrefixes) {
    const HyperSpace s = HyperSpace::schedule(true);
    const Vec opt = Vec::Constant(5, 0.3);
    const TrialObjective f = [&](const std::vector<double>& p, int) { return synthetic_objective(s, opt, p); };
    TunerConfig cfg;
    cfg.acquisition_candidates = 128;
    const TuneResult a = tune(s, f, 15, 4, cfg), b = tune(s, f, 25, 4, cfg);
    for (std::size_t t = 0; t < a.history.size(); ++t) {
        EXPECT_EQ(a.history[t].point, b.history[t].point);
        EXPECT_EQ(a.history[t].objective, b.history[t].objective);
    }
    EXPECT_GE(b.best.objective, a.best.objective);
}

TEST(TunerTune, SyntheticOptimumWithinFivePercent) {
    const HyperSpace s = HyperSpace::schedule(true);
    const Vec opt = (Vec(5) << 0.7, 0.2, 0.55, 0.9, 0.35).finished();
    const TrialObjective f = [&](const std::vector<double>& p, int) { return synthetic_objective(s, opt, p); };
    EXPECT_NEAR(synthetic_objective(s, opt, s.from_unit(opt)), 1.0, 1e-3);  // rounding of the step dimension
    const TuneResult r = tune(s, f, 100, 12);
    EXPECT_GE(r.best.objective, 0.95);
    const TuneResult again = tune(s, f, 100, 12);
    EXPECT_EQ(again.best.point, r.best.point);
}

TEST(TunerTrial, OracleObjectiveIsOneAndRangeChecked) {
    TaskSpec task = TaskSpec::simple();
    task.seed = 7;
    EvalConfig ec;
    ec.episodes = 20;
    ec.repeats = 1;
    const TrialRecord rec =
        run_trial({0.01, 0.05, 1.0, 1.0}, 0, [&](const std::vector<double>&, int) { return run_eval(oracle_policy(), task, ec).mean; });
    EXPECT_EQ(rec.objective, 1.0);
    EXPECT_GE(rec.seconds, 0.0);
    EXPECT_THROW(run_trial({}, 0, [](const std::vector<double>&, int) { return 1.5; }), ConfigError);
}

TEST(TunerOutput, ApplyPointAndHistoryCsv) {
    const HyperSpace s = HyperSpace::schedule(true);
    OptSchedule base;
    base.mode = OptMode::Synchronous;
    const OptSchedule applied = apply_point(base, s, {0.02, 0.1, 0.95, 0.85, 40.0});
    EXPECT_EQ(applied.lr_pos, 0.02);
    EXPECT_EQ(applied.lr_rot, 0.1);
    EXPECT_EQ(applied.decay_pos, 0.95);
    EXPECT_EQ(applied.decay_rot, 0.85);
    EXPECT_EQ(applied.steps, 40);
    HyperSpace odd;
    odd.dims = {{"momentum", 0.0, 1.0}};
    EXPECT_THROW(apply_point(base, odd, {0.5}), ConfigError);

    const std::string dir = testutil::temp_dir("tuner");
    std::vector<TrialRecord> hist{{0, {0.02, 0.1, 0.95, 0.85, 40.0}, 0.5, 0.1}, {1, {0.03, 0.2, 0.9, 0.8, 12.0}, 0.7, 0.1}};
    write_history_csv(hist, s, base, dir + "/h.csv");
    std::ifstream is(dir + "/h.csv");
    std::string header, row;
    std::getline(is, header);
    EXPECT_EQ(header, "trial,lr_pos,lr_rot,decay_pos,decay_rot,steps,success_rate");
    std::getline(is, row);
    EXPECT_EQ(row, "0,0.02,0.1,0.95,0.85,40,0.5");
}
