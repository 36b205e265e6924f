#pragma once

// Contrastive value loss, slope (auxiliary) loss, sampling, the training loop
// and the line-delimited demonstration dataset.

#include "slopegrasp/autodiff.hpp"
#include "slopegrasp/nn.hpp"
#include "slopegrasp/pose.hpp"
#include "slopegrasp/scene.hpp"
#include "slopegrasp/value.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace slopegrasp {

struct DemoRecord {
    Scene scene;
    std::vector<PoseQ> trajectory;
    PoseQ grasp;
    std::uint64_t seed = 0;

    void validate() const {
        scene.validate();
        require(!trajectory.empty(), "demo: trajectory is empty");
        const PoseQ& last = trajectory.back();
        require((last.position - grasp.position).norm() <= 1e-9 &&
                    (last.orientation - grasp.orientation).norm() <= 1e-9,
                "demo: last waypoint differs from the grasp pose");
    }
};

struct LossConfig {
    int negatives = 64;
    int proximal = 8;
    double sigma_pos = 0.02;
    double sigma_rot = 0.1;
    int stride = 2;
    double value_weight = 1.0;
    double aux_weight = 1.0;
    double orientation_weight = 1.0;

    void validate() const {
        require(negatives >= 1, "loss: N must be >= 1");
        require(proximal >= 1, "loss: R must be >= 1");
        require(sigma_pos > 0.0 && sigma_rot > 0.0, "loss: proximity radii must be > 0");
        require(stride >= 1, "loss: stride must be >= 1");
        require(value_weight >= 0.0 && aux_weight >= 0.0 && orientation_weight >= 0.0,
                "loss: weights must be non-negative");
    }
};

struct TrainConfig {
    int epochs = 400;
    int batch_size = 16;
    std::uint64_t seed = 0;
    nn::AdamConfig adam{};
    bool aux_enabled = true;
    Representation representation = Representation::Quat;
    int threads = 1;
    int alignment_every = 1;  // epochs between held-out alignment measurements; 0 disables
    // Test-only: skip the activation check for aux training.
    bool unguarded = false;

    void validate() const {
        require(epochs >= 1, "train: epochs must be >= 1");
        require(batch_size >= 1, "train: batch size must be >= 1");
        require(threads >= 1, "train: threads must be >= 1");
        require(alignment_every >= 0, "train: alignment_every must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Sampling

inline std::vector<Pose> sample_negatives(Representation rep, const Workspace& ws, int n, Rng& rng) {
    require(n >= 1, "sample_negatives: N must be >= 1");
    ws.validate();
    std::vector<Pose> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Vec3 t;
        for (int k = 0; k < 3; ++k) t[k] = uniform(rng, ws.lo[k], ws.hi[k]);
        out.push_back(convert(PoseQ{t, uniform_quaternion(rng)}, rep));
    }
    return out;
}

inline std::vector<Pose> sample_negatives(const Pose& grasp, const Workspace& ws, int n, Rng& rng) {
    return sample_negatives(representation(grasp), ws, n, rng);
}

/// Gaussian position jitter and a random-axis rotation of angle |N(0, sigma_rot)|.
inline std::vector<Pose> sample_proximal(const Pose& pt, const LossConfig& cfg, Rng& rng) {
    require(is_valid(pt, 1e-6), "sample_proximal: pose is not valid");
    std::vector<Pose> out;
    out.reserve(static_cast<std::size_t>(cfg.proximal));
    const Mat3 r = rotation(pt);
    for (int i = 0; i < cfg.proximal; ++i) {
        Vec3 t = position(pt);
        for (int k = 0; k < 3; ++k) t[k] += gaussian(rng, cfg.sigma_pos);
        Vec3 axis(gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0));
        if (axis.norm() < 1e-12) axis = Vec3::UnitZ();
        const double angle = std::abs(gaussian(rng, cfg.sigma_rot));
        const Mat3 perturbed = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix() * r;
        out.push_back(retract(make_pose(t, perturbed, representation(pt))));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

/// LSE(logits) - logits[0].
inline double value_loss_from_logits(const Vec& logits) {
    require(logits.size() >= 2, "value_loss: need the positive and at least one negative");
    const double m = logits.maxCoeff();
    return m + std::log((logits.array() - m).exp().sum()) - logits[0];
}

/// -log(exp(psi(grasp)) / sum over grasp and negatives of exp(psi)).
inline ad::NodeId value_loss(PsiGraph& ctx, const ValueFunction& fn, const Scene& scene, const Pose& grasp,
                             const std::vector<Pose>& negatives) {
    require(!negatives.empty(), "value_loss: negatives must be non-empty");
    std::vector<Pose> all{grasp};
    all.insert(all.end(), negatives.begin(), negatives.end());
    for (const auto& p : all) check_representation(fn, p);
    ad::Graph& g = ctx.graph;
    const ad::NodeId poses = g.constant(to_matrix(all));
    const ad::NodeId logits = fn.build(ctx, poses, scene);
    Mat onehot = Mat::Zero(static_cast<Eigen::Index>(all.size()), 1);
    onehot(0, 0) = 1.0;
    const ad::NodeId positive = g.sum(g.mul(logits, g.constant(onehot)));
    return g.sub(g.logsumexp(logits), positive);
}

/// Representation differences p_next - p_r, one row per proximal pose.
inline Mat displacement_rows(const Pose& p_next, const std::vector<Pose>& proximal) {
    Mat d(static_cast<Eigen::Index>(proximal.size()), pose_dim(representation(p_next)));
    for (std::size_t i = 0; i < proximal.size(); ++i)
        d.row(static_cast<Eigen::Index>(i)) = ominus(p_next, proximal[i]).values.transpose();
    return d;
}

/// sum over proximal poses of -part_cosine(p_next - p_r, grad psi(p_r)), with
/// the pose gradient kept differentiable so the loss can be differentiated in theta.
inline ad::NodeId aux_loss(PsiGraph& ctx, const ValueFunction& fn, const Scene& scene, const Pose& p_next,
                           const std::vector<Pose>& proximal, double orientation_weight = 1.0) {
    require(!proximal.empty(), "aux_loss: proximal set must be non-empty");
    check_representation(fn, p_next);
    for (const auto& p : proximal) check_representation(fn, p);
    ad::Graph& g = ctx.graph;
    const ad::NodeId poses = ctx.pose_leaf(to_matrix(proximal), "proximal");
    const ad::NodeId grad = pose_gradient(ctx, fn, poses, scene, true);
    const ad::NodeId delta = g.constant(displacement_rows(p_next, proximal));
    ad::NodeId total;
    const auto parts = pose_parts(fn.representation());
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const ad::NodeId c = g.sum(ad::cosine_similarity(g, g.slice_cols(grad, parts[k].start, parts[k].length),
                                                         g.slice_cols(delta, parts[k].start, parts[k].length)));
        const ad::NodeId term = k == 0 ? c : g.scale(c, orientation_weight);
        total = total.valid() ? g.add(total, term) : term;
    }
    return g.neg(total);
}

struct LossTerms {
    ad::NodeId value;
    ad::NodeId aux;  // invalid when the auxiliary term is disabled
    ad::NodeId total;
};

inline LossTerms total_loss(PsiGraph& ctx, const ValueFunction& fn, const Scene& scene, const Pose& grasp,
                            const std::vector<Pose>& negatives, const Pose& p_next, const std::vector<Pose>& proximal,
                            const LossConfig& cfg, bool aux_enabled) {
    LossTerms t;
    ad::Graph& g = ctx.graph;
    t.value = value_loss(ctx, fn, scene, grasp, negatives);
    t.total = cfg.value_weight == 1.0 ? t.value : g.scale(t.value, cfg.value_weight);
    if (aux_enabled) {
        t.aux = aux_loss(ctx, fn, scene, p_next, proximal, cfg.orientation_weight);
        t.total = g.add(t.total, g.scale(t.aux, cfg.aux_weight));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
    int epoch = 0;
    double value_loss = 0.0;
    double aux_loss = 0.0;
    double alignment = std::numeric_limits<double>::quiet_NaN();
    double seconds = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
};

/// Mean over held-out demos and waypoint pairs (t, t + stride) of
/// part_cosine(p_{t+stride} - p_t, grad psi(p_t)).
inline double heldout_alignment(const ValueFunction& fn, const std::vector<DemoRecord>& demos, int stride,
                                double orientation_weight = 1.0, int threads = 1) {
    require(stride >= 1, "alignment: stride must be >= 1");
    std::vector<double> sums(demos.size(), 0.0);
    std::vector<int> counts(demos.size(), 0);
    parallel_for(demos.size(), threads, [&](std::size_t d) {
        const auto& demo = demos[d];
        const int pairs = static_cast<int>(demo.trajectory.size()) - stride;
        if (pairs <= 0) return;
        std::vector<Pose> at;
        for (int t = 0; t < pairs; ++t) at.push_back(convert(demo.trajectory[t], fn.representation()));
        const PsiBatch batch = evaluate_batch(fn, demo.scene, to_matrix(at), true);
        for (int t = 0; t < pairs; ++t) {
            const Pose next = convert(demo.trajectory[t + stride], fn.representation());
            sums[d] += part_cosine(ominus(next, at[t]), batch.gradients.row(t).transpose(), orientation_weight);
        }
        counts[d] = pairs;
    });
    const int n = std::accumulate(counts.begin(), counts.end(), 0);
    require(n > 0, "alignment: no waypoint pairs");
    return std::accumulate(sums.begin(), sums.end(), 0.0) / n;
}

/// Per-demo contribution for one step: losses and the gradient w.r.t. theta.
struct DemoStep {
    double value_loss = 0.0;
    double aux_loss = 0.0;
    std::vector<Mat> grads;
};

inline DemoStep demo_step(const ValueModel& model, const DemoRecord& demo, const LossConfig& loss, bool aux_enabled,
                          std::uint64_t seed) {
    Rng rng(seed);
    const Representation rep = model.representation();
    const int T = static_cast<int>(demo.trajectory.size());
    const int last_start = std::max(0, T - 1 - loss.stride);
    const int t = std::uniform_int_distribution<int>(0, last_start)(rng);
    const Pose pt = convert(demo.trajectory[static_cast<std::size_t>(t)], rep);
    const Pose pnext = convert(demo.trajectory[static_cast<std::size_t>(std::min(T - 1, t + loss.stride))], rep);
    const Pose grasp = convert(demo.grasp, rep);
    const auto negatives = sample_negatives(rep, demo.scene.workspace, loss.negatives, rng);
    std::vector<Pose> proximal;
    if (aux_enabled) proximal = sample_proximal(pt, loss, rng);

    PsiGraph ctx;
    const LossTerms terms = total_loss(ctx, model, demo.scene, grasp, negatives, pnext, proximal, loss, aux_enabled);
    const auto grads = ad::gradient(ctx.graph, {terms.total, ctx.params, false});
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    std::vector<ad::NodeId> roots{terms.value};
    if (aux_enabled) roots.push_back(terms.aux);
    roots.insert(roots.end(), grads.begin(), grads.end());
    std::vector<Mat> values = eval.values(roots);
    DemoStep out;
    out.value_loss = values[0](0, 0);
    std::size_t k = 1;
    if (aux_enabled) out.aux_loss = values[k++](0, 0);
    if (!std::isfinite(out.value_loss) || !std::isfinite(out.aux_loss))
        throw NumericError("training loss is not finite (value " + std::to_string(out.value_loss) + ", aux " +
                           std::to_string(out.aux_loss) + ", demo seed " + std::to_string(demo.seed) +
                           ", waypoint " + std::to_string(t) + ")");
    out.grads.assign(std::make_move_iterator(values.begin() + static_cast<std::ptrdiff_t>(k)),
                     std::make_move_iterator(values.end()));
    return out;
}

using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainResult train(ValueModel& model, const std::vector<DemoRecord>& dataset,
                         const std::vector<DemoRecord>& heldout, const TrainConfig& cfg, const LossConfig& loss,
                         const EpochCallback& on_epoch = {}) {
    cfg.validate();
    loss.validate();
    require(!dataset.empty(), "train: dataset is empty");
    require(model.representation() == cfg.representation, "train: model representation differs from config");
    if (cfg.aux_enabled && !cfg.unguarded && model.config().activation != nn::Activation::Elu)
        throw ConfigError("train: the auxiliary loss requires ELU activations (got " +
                          nn::to_string(model.config().activation) + ")");

    auto params = model.parameters();
    std::vector<Mat*> tensors;
    std::vector<ad::Shape> shapes;
    for (auto& [name, m] : params) {
        tensors.push_back(m);
        shapes.push_back({m->rows(), m->cols()});
    }
    nn::AdamState adam(cfg.adam, shapes);

    TrainResult result;
    std::vector<std::size_t> order(dataset.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(cfg.seed, 0x5348, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochStats stats;
        stats.epoch = epoch;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            std::vector<DemoStep> steps(b1 - b0);
            parallel_for(steps.size(), cfg.threads, [&](std::size_t i) {
                const std::size_t d = order[b0 + i];
                steps[i] = demo_step(model, dataset[d], loss, cfg.aux_enabled,
                                     derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) + 1, d));
            });
            std::vector<Mat> grads = std::move(steps.front().grads);
            for (std::size_t i = 1; i < steps.size(); ++i)
                for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += steps[i].grads[k];
            const double inv = 1.0 / static_cast<double>(steps.size());
            for (auto& gk : grads) gk *= inv;
            for (const auto& s : steps) {
                stats.value_loss += s.value_loss;
                stats.aux_loss += s.aux_loss;
            }
            adam.step(tensors, grads);
        }
        stats.value_loss /= static_cast<double>(dataset.size());
        stats.aux_loss /= static_cast<double>(dataset.size());
        const bool measure = !heldout.empty() && cfg.alignment_every > 0 &&
                             ((epoch + 1) % cfg.alignment_every == 0 || epoch + 1 == cfg.epochs);
        if (measure) stats.alignment = heldout_alignment(model, heldout, loss.stride, loss.orientation_weight, cfg.threads);
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.curve.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Weights of a value model

inline void save_model(const ValueModel& model, const std::string& path) {
    nn::WeightFile file;
    file.activation = model.config().activation;
    file.seed = model.seed();
    for (const auto& [name, m] : model.parameters()) file.tensors.push_back({name, *m});
    nn::save_weights(file, path);
}

inline void load_model(ValueModel& model, const std::string& path) {
    const nn::WeightFile file = nn::load_weights(path);
    if (file.activation != model.config().activation)
        throw nn::WeightFileError(nn::WeightFileError::Kind::Shape,
                                  "weight file activation " + nn::to_string(file.activation) + " differs from model " +
                                      nn::to_string(model.config().activation));
    nn::assign_weights(file, model.parameters());
}

// ---------------------------------------------------------------------------
// Dataset: one JSON object per line.
//
//   {"format": "slopegrasp-demo", "version": 1, "seed": u64,
//    "workspace": {"lo": [x,y,z], "hi": [x,y,z]},
//    "primitives": [{"center": [..], "half_extents": [..], "yaw": r, "color": s}, ...],
//    "trajectory": [[x,y,z,qw,qx,qy,qz], ...],
//    "grasp": [x,y,z,qw,qx,qy,qz]}

inline constexpr int kDatasetVersion = 1;

namespace detail {
inline nlohmann::json vec_json(const Eigen::Ref<const Vec>& v) {
    auto a = nlohmann::json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}
inline Vec json_vec(const nlohmann::json& j, Eigen::Index n, const std::string& what) {
    if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n)
        throw ConfigError("dataset: '" + what + "' must be an array of " + std::to_string(n) + " numbers");
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = j[static_cast<std::size_t>(i)].get<double>();
    return v;
}
inline nlohmann::json pose_json(const PoseQ& p) {
    Vec v(7);
    v << p.position, p.orientation;
    return vec_json(v);
}
inline PoseQ json_pose(const nlohmann::json& j, const std::string& what) {
    const Vec v = json_vec(j, 7, what);
    return PoseQ{v.head<3>(), v.tail<4>()};
}
}  // namespace detail

inline nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json j;
    j["workspace"] = {{"lo", detail::vec_json(s.workspace.lo)}, {"hi", detail::vec_json(s.workspace.hi)}};
    auto prims = nlohmann::json::array();
    for (const auto& p : s.primitives)
        prims.push_back({{"center", detail::vec_json(p.center)},
                         {"half_extents", detail::vec_json(p.half_extents)},
                         {"yaw", p.yaw},
                         {"color", p.color}});
    j["primitives"] = prims;
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.workspace.lo = detail::json_vec(j.at("workspace").at("lo"), 3, "workspace.lo");
    s.workspace.hi = detail::json_vec(j.at("workspace").at("hi"), 3, "workspace.hi");
    for (const auto& p : j.at("primitives"))
        s.primitives.push_back({detail::json_vec(p.at("center"), 3, "center"),
                                detail::json_vec(p.at("half_extents"), 3, "half_extents"), p.at("yaw").get<double>(),
                                p.value("color", std::string("gray"))});
    return s;
}

inline std::string demo_to_json_line(const DemoRecord& d) {
    nlohmann::json j = scene_to_json(d.scene);
    j["format"] = "slopegrasp-demo";
    j["version"] = kDatasetVersion;
    j["seed"] = d.seed;
    auto traj = nlohmann::json::array();
    for (const auto& p : d.trajectory) traj.push_back(detail::pose_json(p));
    j["trajectory"] = traj;
    j["grasp"] = detail::pose_json(d.grasp);
    return j.dump();
}

inline DemoRecord demo_from_json_line(const std::string& line) {
    const auto j = nlohmann::json::parse(line);
    if (j.value("format", std::string()) != "slopegrasp-demo")
        throw ConfigError("dataset: record is not a slopegrasp demo");
    if (j.value("version", -1) != kDatasetVersion)
        throw ConfigError("dataset: unsupported record version " + std::to_string(j.value("version", -1)));
    DemoRecord d;
    d.scene = scene_from_json(j);
    d.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("trajectory")) d.trajectory.push_back(detail::json_pose(p, "trajectory"));
    d.grasp = detail::json_pose(j.at("grasp"), "grasp");
    d.validate();
    return d;
}

inline void write_dataset(const std::vector<DemoRecord>& demos, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("cannot write dataset " + path);
    for (const auto& d : demos) os << demo_to_json_line(d) << '\n';
    if (!os) throw Error("write failed for " + path);
}

inline std::vector<DemoRecord> read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot read dataset " + path);
    std::vector<DemoRecord> demos;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            demos.push_back(demo_from_json_line(line));
        } catch (const std::exception& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return demos;
}

}  // namespace slopegrasp
