#pragma once

// Synthetic tabletop tasks, the oracle demonstrator, the analytic grasp judge
// and the success-rate harness.

#include "slopegrasp/policy.hpp"
#include "slopegrasp/pose.hpp"
#include "slopegrasp/scene.hpp"
#include "slopegrasp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace slopegrasp {

enum class TaskKind { Simple, Clutter };

inline std::string to_string(TaskKind k) { return k == TaskKind::Simple ? "simple" : "clutter"; }

inline TaskKind parse_task_kind(const std::string& s) {
    if (s == "simple") return TaskKind::Simple;
    if (s == "clutter") return TaskKind::Clutter;
    throw ConfigError("unknown task '" + s + "' (expected simple or clutter)");
}

struct TaskSpec {
    TaskKind kind = TaskKind::Simple;
    int min_objects = 1;
    int max_objects = 5;
    Vec3 min_half_extents{0.015, 0.015, 0.02};
    Vec3 max_half_extents{0.05, 0.05, 0.06};
    Workspace workspace;
    double clearance = 0.16;        // simple: minimum horizontal center distance (m)
    double packing_gap = 0.005;     // clutter: minimum footprint separation (m)
    double clutter_radius = 0.12;   // clutter: centers within this square half-size (m)
    double border = 0.07;           // simple: centers kept this far from the workspace sides (m)
    std::uint64_t seed = 0;
    int max_tries = 1000;

    static TaskSpec simple() { return TaskSpec{}; }
    static TaskSpec clutter() {
        TaskSpec t;
        t.kind = TaskKind::Clutter;
        t.min_objects = 3;
        t.max_objects = 5;
        return t;
    }

    void validate() const {
        workspace.validate();
        require(min_objects >= 1 && min_objects <= max_objects, "task: object count range invalid");
        require((min_half_extents.array() > 0.0).all() && (min_half_extents.array() <= max_half_extents.array()).all(),
                "task: size range invalid");
        require(clearance >= 0.0 && packing_gap >= 0.0 && clutter_radius > 0.0 && border >= 0.0,
                "task: placement parameters must be non-negative");
        require(max_tries >= 1, "task: max_tries must be >= 1");
        if (kind == TaskKind::Simple)
            require(clearance > 0.0, "task: simple scenes keep objects at a distance (clearance > 0)");
    }
};

struct GraspJudgeConfig {
    double max_opening = 0.140;
    double position_tolerance = 0.02;
    double angle_tolerance = 0.26;
    double approach_cone = 0.35;
    double finger_length = 0.06;

    void validate() const {
        require(max_opening > 0.0 && position_tolerance > 0.0 && angle_tolerance > 0.0 && approach_cone > 0.0 &&
                    finger_length > 0.0,
                "judge: all tolerances must be positive");
    }
};

enum class FailureReason { None, Miss, TooWide, Collision, FilteredEmpty };

inline std::string to_string(FailureReason r) {
    switch (r) {
        case FailureReason::None: return "none";
        case FailureReason::Miss: return "miss";
        case FailureReason::TooWide: return "too-wide";
        case FailureReason::Collision: return "collision";
        case FailureReason::FilteredEmpty: return "filtered-empty";
    }
    return "?";
}

struct EpisodeResult {
    bool success = false;
    std::optional<Pose> pose;
    FailureReason reason = FailureReason::None;
    int object = -1;
};

// ---------------------------------------------------------------------------
// Geometry helpers

/// Separating-axis test for two yawed rectangles, inflated by gap.
inline bool footprints_overlap(const ScenePrimitive& a, const ScenePrimitive& b, double gap) {
    const auto ca = footprint(a), cb = footprint(b);
    const std::array<Eigen::Vector2d, 4> axes{
        Eigen::Vector2d(std::cos(a.yaw), std::sin(a.yaw)), Eigen::Vector2d(-std::sin(a.yaw), std::cos(a.yaw)),
        Eigen::Vector2d(std::cos(b.yaw), std::sin(b.yaw)), Eigen::Vector2d(-std::sin(b.yaw), std::cos(b.yaw))};
    for (const auto& ax : axes) {
        double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300;
        for (const auto& c : ca) {
            amin = std::min(amin, c.dot(ax));
            amax = std::max(amax, c.dot(ax));
        }
        for (const auto& c : cb) {
            bmin = std::min(bmin, c.dot(ax));
            bmax = std::max(bmax, c.dot(ax));
        }
        if (amax + gap < bmin || bmax + gap < amin) return false;
    }
    return true;
}

/// Whether segment [a, b] meets the box (slab test in the box frame).
inline bool segment_hits_box(const Vec3& a, const Vec3& b, const ScenePrimitive& box) {
    const double c = std::cos(box.yaw), s = std::sin(box.yaw);
    auto local = [&](const Vec3& p) {
        const Vec3 d = p - box.center;
        return Vec3(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
    };
    const Vec3 la = local(a), lb = local(b), dir = lb - la;
    double t0 = 0.0, t1 = 1.0;
    for (int i = 0; i < 3; ++i) {
        const double h = box.half_extents[i];
        if (std::abs(dir[i]) < 1e-15) {
            if (la[i] < -h || la[i] > h) return false;
            continue;
        }
        double u = (-h - la[i]) / dir[i], v = (h - la[i]) / dir[i];
        if (u > v) std::swap(u, v);
        t0 = std::max(t0, u);
        t1 = std::min(t1, v);
        if (t0 > t1) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Scene generation

inline Scene generate_scene(const TaskSpec& spec, Rng& rng) {
    spec.validate();
    const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
    static const char* colors[] = {"red", "green", "blue", "yellow", "orange", "purple"};
    int tries = 0;
    while (true) {
        Scene scene;
        scene.workspace = spec.workspace;
        bool restart = false;
        while (static_cast<int>(scene.primitives.size()) < count && !restart) {
            if (++tries > spec.max_tries)
                throw Error("generate_scene: placement cap of " + std::to_string(spec.max_tries) + " tries exceeded");
            ScenePrimitive b;
            for (int i = 0; i < 3; ++i) b.half_extents[i] = uniform(rng, spec.min_half_extents[i], spec.max_half_extents[i]);
            b.yaw = uniform(rng, -std::numbers::pi / 2, std::numbers::pi / 2);
            b.color = colors[std::uniform_int_distribution<int>(0, 5)(rng)];
            if (spec.kind == TaskKind::Simple) {
                for (int i = 0; i < 2; ++i)
                    b.center[i] = uniform(rng, spec.workspace.lo[i] + spec.border, spec.workspace.hi[i] - spec.border);
            } else {
                for (int i = 0; i < 2; ++i) b.center[i] = uniform(rng, -spec.clutter_radius, spec.clutter_radius);
            }
            b.center.z() = spec.workspace.lo.z() + b.half_extents.z();
            bool ok = true;
            for (const auto& o : scene.primitives) {
                if (spec.kind == TaskKind::Simple)
                    ok = ok && (b.center.head<2>() - o.center.head<2>()).norm() >= spec.clearance;
                else
                    ok = ok && !footprints_overlap(b, o, spec.packing_gap);
            }
            if (ok) scene.primitives.push_back(b);
            else if (tries % 50 == 0) restart = true;
        }
        if (!restart) {
            scene.validate();
            return scene;
        }
    }
}

// ---------------------------------------------------------------------------
// Judge

/// Closing axis (gripper x) in world coordinates.
inline Vec3 closing_axis(const Pose& p) { return rotation(p).col(0); }

inline EpisodeResult judge_grasp(const Pose& pose, const Scene& scene, const GraspJudgeConfig& cfg,
                                 const std::vector<char>* present = nullptr) {
    cfg.validate();
    EpisodeResult r;
    r.pose = pose;
    auto fail = [&](FailureReason why) {
        r.success = false;
        r.reason = why;
        return r;
    };
    if (approach_angle(pose) > cfg.approach_cone) return fail(FailureReason::Miss);
    const Vec3 tcp = position(pose);
    auto is_present = [&](std::size_t i) { return !present || (*present)[i]; };

    int target = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
        if (!is_present(i)) continue;
        const auto& b = scene.primitives[i];
        const double z = std::clamp(tcp.z(), b.center.z() - b.half_extents.z(), b.center.z() + b.half_extents.z());
        const double dist = (tcp - Vec3(b.center.x(), b.center.y(), z)).norm();
        if (dist <= cfg.position_tolerance && dist < best) {
            best = dist;
            target = static_cast<int>(i);
        }
    }
    if (target < 0) return fail(FailureReason::Miss);
    r.object = target;
    const auto& box = scene.primitives[static_cast<std::size_t>(target)];

    const Vec3 c = closing_axis(pose);
    const Eigen::Vector2d ch(c.x(), c.y());
    if (ch.norm() < 1e-9) return fail(FailureReason::Miss);
    const double psi = std::atan2(ch.y(), ch.x());
    auto mod_pi = [](double a) {
        a = std::fmod(a, std::numbers::pi);
        if (a < 0) a += std::numbers::pi;
        return std::min(a, std::numbers::pi - a);
    };
    const double dx = mod_pi(psi - box.yaw), dy = mod_pi(psi - box.yaw - std::numbers::pi / 2);
    if (std::min(dx, dy) > cfg.angle_tolerance) return fail(FailureReason::Miss);

    const Eigen::Vector2d u = ch.normalized();
    const Eigen::Vector2d ax(std::cos(box.yaw), std::sin(box.yaw)), ay(-std::sin(box.yaw), std::cos(box.yaw));
    const double span = 2.0 * (std::abs(u.dot(ax)) * box.half_extents.x() + std::abs(u.dot(ay)) * box.half_extents.y());
    if (span >= cfg.max_opening) return fail(FailureReason::TooWide);

    const Mat3 rot = rotation(pose);
    const Vec3 up = rot.col(2);
    for (double side : {1.0, -1.0}) {
        const Vec3 tip = tcp + side * 0.5 * cfg.max_opening * rot.col(0);
        const Vec3 root = tip + cfg.finger_length * up;
        for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
            if (static_cast<int>(i) == target || !is_present(i)) continue;
            if (segment_hits_box(tip, root, scene.primitives[i])) return fail(FailureReason::Collision);
        }
    }
    r.success = true;
    r.reason = FailureReason::None;
    return r;
}

// ---------------------------------------------------------------------------
// Oracle

inline constexpr int kDemoWaypoints = 20;
inline constexpr double kHoverHeight = 0.15;

/// Fixed start orientation of every demonstration: approach tilted 30 degrees about world x.
inline Vec4 canonical_start_orientation() { return quat_from_axis_angle(Vec3::UnitX(), std::numbers::pi / 6.0); }

/// Top-down grasp at the box center with the closing axis across the
/// shorter horizontal extent; yaw folded into (-pi/2, pi/2].
inline PoseQ oracle_grasp(const ScenePrimitive& box) {
    double psi = box.half_extents.x() <= box.half_extents.y() ? box.yaw : box.yaw + std::numbers::pi / 2;
    psi = std::remainder(psi, std::numbers::pi);
    if (psi <= -std::numbers::pi / 2) psi += std::numbers::pi;
    return PoseQ{box.center, canonicalize(quat_from_axis_angle(Vec3::UnitZ(), psi))};
}

inline Vec4 slerp(const Vec4& a, Vec4 b, double t) {
    double d = a.dot(b);
    if (d < 0.0) {
        b = -b;
        d = -d;
    }
    if (d > 1.0 - 1e-12) return canonicalize((a + t * (b - a)).normalized());
    const double theta = std::acos(std::clamp(d, -1.0, 1.0));
    return canonicalize(((std::sin((1 - t) * theta) * a + std::sin(t * theta) * b) / std::sin(theta)).normalized());
}

/// Hover (grasp + 0.15 m in z) descending linearly to the grasp, orientation
/// slerped from the canonical start. The last waypoint is the grasp pose.
inline std::vector<PoseQ> oracle_trajectory(const PoseQ& grasp, int waypoints = kDemoWaypoints) {
    require(waypoints >= 2, "oracle: need at least two waypoints");
    const Vec3 hover = grasp.position + Vec3(0, 0, kHoverHeight);
    const Vec4 start = canonical_start_orientation();
    std::vector<PoseQ> traj;
    for (int t = 0; t < waypoints; ++t) {
        const double s = static_cast<double>(t) / (waypoints - 1);
        traj.push_back(PoseQ{hover + s * (grasp.position - hover), slerp(start, grasp.orientation, s)});
    }
    traj.back() = grasp;
    return traj;
}

inline DemoRecord oracle_demo(const Scene& scene, Rng& rng, const GraspJudgeConfig& judge = {},
                              std::uint64_t seed = 0) {
    std::vector<int> graspable;
    for (std::size_t i = 0; i < scene.primitives.size(); ++i)
        if (judge_grasp(oracle_grasp(scene.primitives[i]), scene, judge).success) graspable.push_back(static_cast<int>(i));
    if (graspable.empty()) throw Error("oracle: no graspable object in scene");
    const int pick = graspable[static_cast<std::size_t>(
        std::uniform_int_distribution<int>(0, static_cast<int>(graspable.size()) - 1)(rng))];
    DemoRecord d;
    d.scene = scene;
    d.grasp = oracle_grasp(scene.primitives[static_cast<std::size_t>(pick)]);
    d.trajectory = oracle_trajectory(d.grasp);
    d.seed = seed;
    return d;
}

/// Scenes and oracle demos for a dataset; record i uses stream (seed, i).
inline std::vector<DemoRecord> generate_demos(const TaskSpec& task, int count, std::uint64_t seed,
                                              const GraspJudgeConfig& judge = {}) {
    require(count >= 1, "demo generation: count must be >= 1");
    std::vector<DemoRecord> out;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t s = derive_seed(seed, 0x64656d6f, static_cast<std::uint64_t>(i));
        Rng rng(s);
        const Scene scene = generate_scene(task, rng);
        out.push_back(oracle_demo(scene, rng, judge, s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// A policy maps a scene (with the objects still present) and a seed to a
/// pose, or nothing when every candidate was filtered out.
using Policy = std::function<std::optional<Pose>(const Scene&, std::uint64_t)>;

inline Policy model_policy(const ValueFunction& fn, OptSchedule sched) {
    sched.validate();
    sched.threads = 1;
    return [&fn, sched](const Scene& scene, std::uint64_t seed) -> std::optional<Pose> {
        OptSchedule s = sched;
        s.seed = seed;
        const InferenceResult r = infer(fn, scene, s);
        if (r.empty) return std::nullopt;
        return r.best;
    };
}

/// Grasps the first present graspable object the way the oracle would.
inline Policy oracle_policy(const GraspJudgeConfig& judge = {}) {
    return [judge](const Scene& scene, std::uint64_t) -> std::optional<Pose> {
        for (const auto& b : scene.primitives) {
            const PoseQ g = oracle_grasp(b);
            if (judge_grasp(g, scene, judge).success) return Pose(g);
        }
        return Pose(oracle_grasp(scene.primitives.front()));
    };
}

struct EvalConfig {
    int episodes = 100;
    int repeats = 6;
    int clutter_attempts = 10;
    std::uint64_t seed = 0;
    int threads = 1;
    GraspJudgeConfig judge;

    void validate() const {
        require(episodes >= 1, "eval: episodes must be >= 1");
        require(repeats >= 1, "eval: repeats must be >= 1");
        require(clutter_attempts >= 1, "eval: clutter attempts must be >= 1");
        require(threads >= 1, "eval: threads must be >= 1");
        judge.validate();
    }
};

struct EvalReport {
    std::string task;
    std::string policy;
    std::vector<double> success_rates;  // per repeat
    double mean = 0.0;
    double std = 0.0;
    std::vector<int> failures;  // counts indexed by FailureReason
};

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

/// Scene for episode e is fixed by (task.seed, e); the policy seed varies by repeat.
/// Simple: one grasp per scene. Clutter: up to clutter_attempts grasps, a
/// successful grasp removes its object; the episode scores removed / total.
inline EvalReport run_eval(const Policy& policy, const TaskSpec& task, const EvalConfig& cfg,
                           const std::string& policy_name = "policy") {
    cfg.validate();
    task.validate();
    EvalReport report;
    report.task = to_string(task.kind);
    report.policy = policy_name;
    report.failures.assign(5, 0);
    std::vector<Scene> scenes(static_cast<std::size_t>(cfg.episodes));
    for (int e = 0; e < cfg.episodes; ++e) {
        Rng rng(derive_seed(task.seed, 0x7363656e, static_cast<std::uint64_t>(e)));
        scenes[static_cast<std::size_t>(e)] = generate_scene(task, rng);
    }
    for (int rep = 0; rep < cfg.repeats; ++rep) {
        std::vector<double> scores(scenes.size(), 0.0);
        std::vector<std::array<int, 5>> fails(scenes.size(), std::array<int, 5>{});
        parallel_for(scenes.size(), cfg.threads, [&](std::size_t e) {
            const Scene& full = scenes[e];
            const std::uint64_t base = derive_seed(cfg.seed, static_cast<std::uint64_t>(rep) + 1, e);
            if (task.kind == TaskKind::Simple) {
                const auto pose = policy(full, base);
                EpisodeResult r;
                if (!pose) r.reason = FailureReason::FilteredEmpty;
                else r = judge_grasp(*pose, full, cfg.judge);
                scores[e] = r.success ? 1.0 : 0.0;
                fails[e][static_cast<int>(r.reason)]++;
                return;
            }
            std::vector<char> present(full.primitives.size(), 1);
            int removed = 0;
            for (int a = 0; a < cfg.clutter_attempts && removed < static_cast<int>(full.primitives.size()); ++a) {
                Scene visible;
                visible.workspace = full.workspace;
                for (std::size_t i = 0; i < full.primitives.size(); ++i)
                    if (present[i]) visible.primitives.push_back(full.primitives[i]);
                const auto pose = policy(visible, derive_seed(base, static_cast<std::uint64_t>(a)));
                EpisodeResult r;
                if (!pose) r.reason = FailureReason::FilteredEmpty;
                else r = judge_grasp(*pose, full, cfg.judge, &present);
                fails[e][static_cast<int>(r.reason)]++;
                if (r.success) {
                    present[static_cast<std::size_t>(r.object)] = 0;
                    ++removed;
                }
            }
            scores[e] = static_cast<double>(removed) / static_cast<double>(full.primitives.size());
        });
        report.success_rates.push_back(std::accumulate(scores.begin(), scores.end(), 0.0) /
                                       static_cast<double>(scores.size()));
        for (const auto& f : fails)
            for (int k = 0; k < 5; ++k) report.failures[static_cast<std::size_t>(k)] += f[static_cast<std::size_t>(k)];
    }
    report.mean = std::accumulate(report.success_rates.begin(), report.success_rates.end(), 0.0) /
                  static_cast<double>(report.success_rates.size());
    report.std = sample_std(report.success_rates);
    return report;
}

inline constexpr const char* kReportHeader = "task,policy,repeat,success_rate,std";

inline void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    os << kReportHeader << '\n';
    os.precision(10);
    for (const auto& r : reports) {
        for (std::size_t i = 0; i < r.success_rates.size(); ++i)
            os << r.task << ',' << r.policy << ',' << i << ',' << r.success_rates[i] << ",\n";
        os << r.task << ',' << r.policy << ",mean," << r.mean << ',' << r.std << '\n';
    }
}

}  // namespace slopegrasp
