#pragma once

// Sequential model-based tuning of the pose-optimization schedule: random
// initial trials, then a Gaussian-process surrogate with expected improvement.

#include "slopegrasp/core.hpp"
#include "slopegrasp/policy.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace slopegrasp {

struct HyperDim {
    std::string name;
    double lo = 0.0;
    double hi = 1.0;
    bool log_scale = false;
    bool integer = false;
};

struct HyperSpace {
    std::vector<HyperDim> dims;

    void validate() const {
        require(!dims.empty(), "hyperspace: no dimensions");
        for (const auto& d : dims) {
            require(d.lo < d.hi, "hyperspace: " + d.name + " lower bound must be below upper bound");
            if (d.log_scale) require(d.lo > 0.0, "hyperspace: " + d.name + " log-scale bounds must be positive");
        }
    }

    std::size_t size() const { return dims.size(); }

    /// lr_pos, lr_rot (log), decay_pos, decay_rot; with_steps adds an integer step count.
    static HyperSpace schedule(bool with_steps, int steps_lo = 8, int steps_hi = 64) {
        HyperSpace s;
        s.dims = {{"lr_pos", 1e-3, 1e-1, true, false},
                  {"lr_rot", 1e-3, 5e-1, true, false},
                  {"decay_pos", 0.8, 1.0, false, false},
                  {"decay_rot", 0.8, 1.0, false, false}};
        if (with_steps) s.dims.push_back({"steps", static_cast<double>(steps_lo), static_cast<double>(steps_hi), false, true});
        return s;
    }

    /// Unit-cube coordinates to values (integers rounded).
    std::vector<double> from_unit(const Vec& u) const {
        std::vector<double> out(dims.size());
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const auto& d = dims[i];
            const double t = std::clamp(u[static_cast<Eigen::Index>(i)], 0.0, 1.0);
            double v = d.log_scale ? std::exp(std::log(d.lo) + t * (std::log(d.hi) - std::log(d.lo)))
                                   : d.lo + t * (d.hi - d.lo);
            if (d.integer) v = std::round(v);
            out[i] = std::clamp(v, d.lo, d.hi);
        }
        return out;
    }

    Vec to_unit(const std::vector<double>& v) const {
        Vec u(static_cast<Eigen::Index>(dims.size()));
        for (std::size_t i = 0; i < dims.size(); ++i) {
            const auto& d = dims[i];
            u[static_cast<Eigen::Index>(i)] = d.log_scale ? (std::log(v[i]) - std::log(d.lo)) / (std::log(d.hi) - std::log(d.lo))
                                                          : (v[i] - d.lo) / (d.hi - d.lo);
        }
        return u;
    }

    int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < dims.size(); ++i)
            if (dims[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

struct TrialRecord {
    int index = 0;
    std::vector<double> point;
    double objective = 0.0;
    double seconds = 0.0;
};

struct TunerConfig {
    int initial_random = 10;
    int acquisition_candidates = 1024;
    double length_scale = 0.3;
    double noise = 1e-3;

    void validate() const {
        require(initial_random >= 1 && acquisition_candidates >= 1, "tuner: counts must be >= 1");
        require(length_scale > 0.0 && noise >= 0.0, "tuner: length scale must be > 0 and noise >= 0");
    }
};

/// GP regression with an RBF kernel on unit coordinates. Targets are
/// standardized; the kernel has unit signal variance in those units.
class GaussianProcess {
public:
    GaussianProcess(double length_scale, double noise) : ell_(length_scale), noise_(noise) {}

    void fit(const Mat& x, const Vec& y) {
        require(x.rows() == y.size() && x.rows() >= 1, "gp: need matching, non-empty training data");
        x_ = x;
        mean_ = y.mean();
        const double var = y.size() > 1 ? (y.array() - mean_).square().sum() / static_cast<double>(y.size()) : 0.0;
        scale_ = var > 1e-12 ? std::sqrt(var) : 1.0;
        const Vec ys = (y.array() - mean_) / scale_;
        Mat k(x.rows(), x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.rows(); ++j) k(i, j) = kernel(x.row(i), x.row(j));
        k.diagonal().array() += std::max(noise_, 1e-10);
        chol_.compute(k);
        if (chol_.info() != Eigen::Success) throw NumericError("gp: kernel matrix is not positive definite");
        alpha_ = chol_.solve(ys);
    }

    /// Posterior mean and standard deviation in target units.
    std::pair<double, double> predict(const Vec& x) const {
        Vec ks(x_.rows());
        for (Eigen::Index i = 0; i < x_.rows(); ++i) ks[i] = kernel(x_.row(i), x.transpose());
        const double mu = ks.dot(alpha_);
        const double var = std::max(0.0, 1.0 - ks.dot(chol_.solve(ks)));
        return {mean_ + scale_ * mu, scale_ * std::sqrt(var)};
    }

private:
    double kernel(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b) const {
        return std::exp(-(a - b).squaredNorm() / (2.0 * ell_ * ell_));
    }

    double ell_;
    double noise_;
    Mat x_;
    double mean_ = 0.0;
    double scale_ = 1.0;
    Eigen::LLT<Eigen::MatrixXd> chol_;
    Vec alpha_;
};

inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// Expected improvement over `best` for a maximization problem.
inline double expected_improvement(double mu, double sigma, double best) {
    if (sigma < 1e-12) return std::max(0.0, mu - best);
    const double z = (mu - best) / sigma;
    return std::max(0.0, (mu - best) * normal_cdf(z) + sigma * normal_pdf(z));
}

/// Next configuration to try. `rng` should be a per-trial stream.
inline std::vector<double> suggest(const std::vector<TrialRecord>& history, const HyperSpace& space, Rng& rng,
                                   const TunerConfig& cfg = {}) {
    space.validate();
    cfg.validate();
    const auto d = static_cast<Eigen::Index>(space.size());
    auto random_unit = [&] {
        Vec u(d);
        for (Eigen::Index i = 0; i < d; ++i) u[i] = uniform(rng, 0.0, 1.0);
        return u;
    };
    if (static_cast<int>(history.size()) < cfg.initial_random) return space.from_unit(random_unit());

    Mat x(static_cast<Eigen::Index>(history.size()), d);
    Vec y(static_cast<Eigen::Index>(history.size()));
    for (std::size_t i = 0; i < history.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = space.to_unit(history[i].point).transpose();
        y[static_cast<Eigen::Index>(i)] = history[i].objective;
    }
    GaussianProcess gp(cfg.length_scale, cfg.noise);
    gp.fit(x, y);
    const double best = y.maxCoeff();
    Vec best_u = random_unit();
    double best_ei = -1.0;
    for (int c = 0; c < cfg.acquisition_candidates; ++c) {
        const Vec u = c == 0 ? best_u : random_unit();
        const auto [mu, sigma] = gp.predict(u);
        const double ei = expected_improvement(mu, sigma, best);
        if (ei > best_ei) {
            best_ei = ei;
            best_u = u;
        }
    }
    return space.from_unit(best_u);
}

using TrialObjective = std::function<double(const std::vector<double>&, int)>;

struct TuneResult {
    TrialRecord best;
    std::vector<TrialRecord> history;
};

inline TrialRecord run_trial(const std::vector<double>& point, int index, const TrialObjective& objective) {
    const auto start = std::chrono::steady_clock::now();
    TrialRecord rec;
    rec.index = index;
    rec.point = point;
    rec.objective = objective(point, index);
    require(rec.objective >= 0.0 && rec.objective <= 1.0, "tuner: objective must lie in [0, 1]");
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

/// Trial t draws from stream (seed, t), so a shorter budget is a prefix of a longer one.
inline TuneResult tune(const HyperSpace& space, const TrialObjective& objective, int budget, std::uint64_t seed,
                       const TunerConfig& cfg = {},
                       const std::function<void(const TrialRecord&)>& on_trial = {}) {
    require(budget >= 1, "tune: budget must be >= 1");
    space.validate();
    TuneResult result;
    for (int t = 0; t < budget; ++t) {
        Rng rng(derive_seed(seed, 0x74756e65, static_cast<std::uint64_t>(t)));
        const auto point = suggest(result.history, space, rng, cfg);
        result.history.push_back(run_trial(point, t, objective));
        if (on_trial) on_trial(result.history.back());
        if (t == 0 || result.history.back().objective > result.best.objective) result.best = result.history.back();
    }
    return result;
}

/// Applies a tuned point to a schedule (dimensions matched by name).
inline OptSchedule apply_point(OptSchedule sched, const HyperSpace& space, const std::vector<double>& point) {
    for (std::size_t i = 0; i < space.size(); ++i) {
        const auto& n = space.dims[i].name;
        const double v = point[i];
        if (n == "lr_pos") sched.lr_pos = v;
        else if (n == "lr_rot") sched.lr_rot = v;
        else if (n == "decay_pos") sched.decay_pos = v;
        else if (n == "decay_rot") sched.decay_rot = v;
        else if (n == "steps") sched.steps = static_cast<int>(std::lround(v));
        else throw ConfigError("tuner: unknown dimension " + n);
    }
    return sched;
}

/// f(u) = 1 - |u - u*|^2 / D on unit coordinates; maximum 1 at u*.
inline double synthetic_objective(const HyperSpace& space, const Vec& optimum_unit, const std::vector<double>& point) {
    const Vec u = space.to_unit(point);
    return 1.0 - (u - optimum_unit).squaredNorm() / static_cast<double>(u.size());
}

inline void write_history_csv(const std::vector<TrialRecord>& history, const HyperSpace& space,
                              const OptSchedule& base, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << "trial,lr_pos,lr_rot,decay_pos,decay_rot,steps,success_rate\n";
    os.precision(10);
    for (const auto& t : history) {
        const OptSchedule s = apply_point(base, space, t.point);
        os << t.index << ',' << s.lr_pos << ',' << s.lr_rot << ',' << s.decay_pos << ',' << s.decay_rot << ','
           << s.total_steps() << ',' << t.objective << '\n';
    }
}

}  // namespace slopegrasp
