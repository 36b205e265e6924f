#pragma once

// Implicit grasp policy: random candidates, Adam ascent on psi with a
// retraction after every step, optional downward filter, argmax selection.

#include "slopegrasp/nn.hpp"
#include "slopegrasp/pose.hpp"
#include "slopegrasp/scene.hpp"
#include "slopegrasp/value.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace slopegrasp {

enum class OptMode { Sequential, Synchronous };

inline std::string to_string(OptMode m) { return m == OptMode::Sequential ? "sequential" : "synchronous"; }

inline OptMode parse_opt_mode(const std::string& s) {
    if (s == "sequential") return OptMode::Sequential;
    if (s == "synchronous") return OptMode::Synchronous;
    throw ConfigError("unknown optimization mode '" + s + "' (expected sequential or synchronous)");
}

struct OptSchedule {
    OptMode mode = OptMode::Sequential;
    int steps_pos = 16;
    int steps_rot = 16;
    int steps = 32;  // synchronous mode
    double lr_pos = 0.01;
    double lr_rot = 0.05;
    double decay_pos = 1.0;
    double decay_rot = 1.0;
    double beta1 = 0.7;
    int candidates = 64;
    bool downward_filter = false;
    double cone_half_angle = std::numbers::pi / 4.0;
    std::uint64_t seed = 0;
    int threads = 1;

    void validate() const {
        if (mode == OptMode::Sequential) require(steps_pos >= 1 && steps_rot >= 1, "schedule: steps must be >= 1");
        else require(steps >= 1, "schedule: steps must be >= 1");
        require(lr_pos > 0.0 && lr_rot > 0.0, "schedule: learning rates must be > 0");
        require(decay_pos > 0.0 && decay_pos <= 1.0 && decay_rot > 0.0 && decay_rot <= 1.0,
                "schedule: decays must be in (0, 1]");
        require(beta1 >= 0.0 && beta1 < 1.0, "schedule: beta1 must be in [0, 1)");
        require(candidates >= 1, "schedule: candidate count must be >= 1");
        require(cone_half_angle > 0.0, "schedule: cone half-angle must be > 0");
        require(threads >= 1, "schedule: threads must be >= 1");
    }

    int total_steps() const { return mode == OptMode::Sequential ? steps_pos + steps_rot : steps; }
};

struct InferenceResult {
    std::vector<Pose> candidates;
    Vec values;
    Pose best;
    double best_value = -std::numeric_limits<double>::infinity();
    Mat traces;  // (steps + 1) x candidates, psi before the first and after every step
    bool empty = false;
    int dropped = 0;

    void select_best() {
        empty = candidates.empty();
        if (empty) {
            best_value = -std::numeric_limits<double>::infinity();
            return;
        }
        Eigen::Index arg = 0;
        values.maxCoeff(&arg);
        best = candidates[static_cast<std::size_t>(arg)];
        best_value = values[arg];
    }
};

inline std::vector<Pose> random_candidates(const Workspace& ws, int k, Representation rep, Rng& rng) {
    require(k >= 1, "random_candidates: K must be >= 1");
    ws.validate();
    std::vector<Pose> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) out.push_back(retract(random_pose(ws, rep, rng)));
    return out;
}

/// Called after every step with the step index (1-based) and the retracted
/// candidate matrix. Used by tests to check manifold invariants.
using StepObserver = std::function<void(int, const Mat&)>;

namespace detail {

/// Ascent on one chunk of candidates; rows of `poses` are updated in place.
inline void ascend(const ValueFunction& fn, const Scene& scene, Mat& poses, const OptSchedule& sched,
                   std::uint64_t reseed_stream, Mat& traces, std::vector<char>& alive, const StepObserver& observe,
                   std::vector<std::string>& warnings) {
    const Eigen::Index k = poses.rows();
    const Eigen::Index d = poses.cols();
    const Representation rep = fn.representation();
    nn::AdamState adam_pos({sched.lr_pos, sched.beta1, 0.999, 1e-8, sched.decay_pos}, {{k, 3}});
    nn::AdamState adam_rot({sched.lr_rot, sched.beta1, 0.999, 1e-8, sched.decay_rot}, {{k, d - 3}});
    std::vector<char> reseeded(static_cast<std::size_t>(k), 0);
    Rng rng(reseed_stream);
    const int total = sched.total_steps();
    traces.resize(total + 1, k);

    PsiBatch batch = evaluate_batch(fn, scene, poses, true);
    traces.row(0) = batch.values.transpose();
    for (int step = 1; step <= total; ++step) {
        const bool move_pos = sched.mode == OptMode::Synchronous || step <= sched.steps_pos;
        const bool move_rot = sched.mode == OptMode::Synchronous || step > sched.steps_pos;
        if (move_pos) {
            Mat p = poses.leftCols(3);
            Mat g = -batch.gradients.leftCols(3);
            Mat* ptr = &p;
            adam_pos.step({&ptr, 1}, {&g, 1});
            poses.leftCols(3) = p;
        }
        if (move_rot) {
            Mat o = poses.rightCols(d - 3);
            Mat g = -batch.gradients.rightCols(d - 3);
            Mat* ptr = &o;
            adam_rot.step({&ptr, 1}, {&g, 1});
            poses.rightCols(d - 3) = o;
        }
        for (Eigen::Index i = 0; i < k; ++i) {
            if (!alive[static_cast<std::size_t>(i)]) continue;
            try {
                poses.row(i) = to_vector(retract(from_vector(poses.row(i).data(), rep))).transpose();
            } catch (const DegenerateOrientation& e) {
                if (!reseeded[static_cast<std::size_t>(i)]) {
                    reseeded[static_cast<std::size_t>(i)] = 1;
                    poses.row(i) = to_vector(random_pose(scene.workspace, rep, rng)).transpose();
                    warnings.push_back("candidate re-seeded after degenerate retraction: " + std::string(e.what()));
                } else {
                    alive[static_cast<std::size_t>(i)] = 0;
                    poses.row(i) = to_vector(random_pose(scene.workspace, rep, rng)).transpose();
                    warnings.push_back("candidate dropped after repeated degenerate retraction");
                }
            }
        }
        if (observe) observe(step, poses);
        batch = evaluate_batch(fn, scene, poses, step < total);
        traces.row(step) = batch.values.transpose();
    }
}

}  // namespace detail

inline InferenceResult optimize_candidates(const ValueFunction& fn, const Scene& scene,
                                           const std::vector<Pose>& candidates, const OptSchedule& sched,
                                           const StepObserver& observe = {}) {
    sched.validate();
    require(!candidates.empty(), "optimize_candidates: no candidates");
    for (const auto& c : candidates) {
        check_representation(fn, c);
        require(is_valid(c, 1e-9), "optimize_candidates: candidate is not a valid pose");
    }
    const Mat all = to_matrix(candidates);
    const auto k = static_cast<std::size_t>(all.rows());
    const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(sched.threads), k);
    std::vector<Mat> chunk_poses(chunks), chunk_traces(chunks);
    std::vector<std::vector<char>> chunk_alive(chunks);
    std::vector<std::vector<std::string>> chunk_warnings(chunks);
    std::vector<std::size_t> begin(chunks + 1);
    for (std::size_t c = 0; c <= chunks; ++c) begin[c] = c * k / chunks;
    parallel_for(chunks, sched.threads, [&](std::size_t c) {
        const auto rows = static_cast<Eigen::Index>(begin[c + 1] - begin[c]);
        chunk_poses[c] = all.middleRows(static_cast<Eigen::Index>(begin[c]), rows);
        chunk_alive[c].assign(static_cast<std::size_t>(rows), 1);
        StepObserver chunk_observer;
        if (observe && chunks == 1) chunk_observer = observe;
        detail::ascend(fn, scene, chunk_poses[c], sched, derive_seed(sched.seed, 0x7265, c), chunk_traces[c],
                       chunk_alive[c], chunk_observer, chunk_warnings[c]);
    });
    if (observe && chunks > 1) {
        // Observers see the final state only when chunks run concurrently.
        Mat joined(static_cast<Eigen::Index>(k), all.cols());
        for (std::size_t c = 0; c < chunks; ++c)
            joined.middleRows(static_cast<Eigen::Index>(begin[c]), chunk_poses[c].rows()) = chunk_poses[c];
        observe(sched.total_steps(), joined);
    }

    InferenceResult result;
    result.traces.resize(sched.total_steps() + 1, static_cast<Eigen::Index>(k));
    std::vector<double> values;
    for (std::size_t c = 0; c < chunks; ++c) {
        result.traces.middleCols(static_cast<Eigen::Index>(begin[c]), chunk_traces[c].cols()) = chunk_traces[c];
        for (const auto& w : chunk_warnings[c]) std::cerr << "warning: " << w << '\n';
        for (Eigen::Index i = 0; i < chunk_poses[c].rows(); ++i) {
            if (!chunk_alive[c][static_cast<std::size_t>(i)]) {
                ++result.dropped;
                continue;
            }
            result.candidates.push_back(from_vector(chunk_poses[c].row(i).data(), fn.representation()));
            values.push_back(chunk_traces[c](chunk_traces[c].rows() - 1, i));
        }
    }
    result.values = Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
    result.select_best();
    return result;
}

/// Approach axis (gripper -z) in world coordinates.
inline Vec3 approach_axis(const Pose& p) { return -rotation(p).col(2); }

inline double approach_angle(const Pose& p) {
    return std::acos(std::clamp(approach_axis(p).dot(Vec3(0, 0, -1)), -1.0, 1.0));
}

inline InferenceResult filter_downward(const InferenceResult& in, double cone_half_angle) {
    InferenceResult out;
    out.traces = in.traces;
    out.dropped = in.dropped;
    std::vector<double> values;
    for (std::size_t i = 0; i < in.candidates.size(); ++i)
        if (approach_angle(in.candidates[i]) <= cone_half_angle) {
            out.candidates.push_back(in.candidates[i]);
            values.push_back(in.values[static_cast<Eigen::Index>(i)]);
        }
    out.values = Eigen::Map<const Vec>(values.data(), static_cast<Eigen::Index>(values.size()));
    out.select_best();
    return out;
}

inline InferenceResult infer(const ValueFunction& fn, const Scene& scene, const OptSchedule& sched,
                             const StepObserver& observe = {}) {
    sched.validate();
    Rng rng(derive_seed(sched.seed, 0x6361));
    const auto candidates = random_candidates(scene.workspace, sched.candidates, fn.representation(), rng);
    InferenceResult r = optimize_candidates(fn, scene, candidates, sched, observe);
    if (sched.downward_filter) r = filter_downward(r, sched.cone_half_angle);
    return r;
}

inline void write_trace_csv(const InferenceResult& r, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << "step,candidate,value\n";
    os.precision(17);
    for (Eigen::Index s = 0; s < r.traces.rows(); ++s)
        for (Eigen::Index c = 0; c < r.traces.cols(); ++c) os << s << ',' << c << ',' << r.traces(s, c) << '\n';
}

}  // namespace slopegrasp
