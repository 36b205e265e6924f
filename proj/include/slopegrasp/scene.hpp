#pragma once

// Synthetic tabletop scenes and the frozen, pose-differentiable scene field.
//
// The analytic field evaluates, at a support point with a unit direction:
//   d     smooth signed distance to the scene (smooth-min over boxes)
//   occ   sigmoid(-d / occupancy_scale)
//   align direction . grad d
// followed by positional encodings of the point and of the direction. All of
// it is written over a generic scalar so dual numbers supply derivatives.

#include "slopegrasp/core.hpp"
#include "slopegrasp/dual.hpp"
#include "slopegrasp/nn.hpp"
#include "slopegrasp/pose.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace slopegrasp {

struct ScenePrimitive {
    Vec3 center = Vec3::Zero();
    Vec3 half_extents = Vec3::Constant(0.02);
    double yaw = 0.0;
    std::string color = "gray";
};

struct Workspace {
    Vec3 lo{-0.25, -0.25, 0.0};
    Vec3 hi{0.25, 0.25, 0.25};

    void validate() const {
        require(lo.allFinite() && hi.allFinite() && (lo.array() < hi.array()).all(),
                "workspace: lower bounds must be below upper bounds");
    }
    bool contains(const Vec3& p, double slack = 0.0) const {
        return (p.array() >= lo.array() - slack).all() && (p.array() <= hi.array() + slack).all();
    }
};

/// Position uniform in the workspace, orientation uniform.
inline Pose random_pose(const Workspace& ws, Representation rep, Rng& rng) {
    Vec3 t;
    for (int k = 0; k < 3; ++k) t[k] = uniform(rng, ws.lo[k], ws.hi[k]);
    return convert(PoseQ{t, uniform_quaternion(rng)}, rep);
}

struct Scene {
    std::vector<ScenePrimitive> primitives;
    Workspace workspace;

    void validate() const {
        workspace.validate();
        require(!primitives.empty(), "scene: at least one primitive is required");
        for (const auto& p : primitives) {
            require((p.half_extents.array() > 0.0).all(), "scene: half-extents must be positive");
            require(workspace.contains(p.center, 1e-12), "scene: primitive center outside the workspace");
        }
    }
};

/// Horizontal corners of a primitive's footprint.
inline std::array<Eigen::Vector2d, 4> footprint(const ScenePrimitive& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const Eigen::Vector2d ax(c, s), ay(-s, c), ctr(b.center.x(), b.center.y());
    const double hx = b.half_extents.x(), hy = b.half_extents.y();
    return {ctr + hx * ax + hy * ay, ctr - hx * ax + hy * ay, ctr - hx * ax - hy * ay, ctr + hx * ax - hy * ay};
}

/// Exact (non-smooth) signed distance to one box; used by oracles and the judge.
inline double exact_box_distance(const Vec3& p, const ScenePrimitive& b) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const Vec3 d = p - b.center;
    const Vec3 local(c * d.x() + s * d.y(), -s * d.x() + c * d.y(), d.z());
    const Vec3 q = local.cwiseAbs() - b.half_extents;
    return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
}

// ---------------------------------------------------------------------------
// Smooth primitives

template <class T>
T softplus(const T& x, double beta) {
    using std::exp;
    using std::log1p;
    if (value_of(x) > 0.0) return x + log1p(exp(-beta * x)) / beta;
    return log1p(exp(beta * x)) / beta;
}

template <class T>
T sigmoid(const T& x) {
    using std::exp;
    if (value_of(x) >= 0.0) return 1.0 / (1.0 + exp(-x));
    const T e = exp(x);
    return e / (1.0 + e);
}

/// -tau * ln sum exp(-v_i / tau), shifted by the minimum for stability.
template <class T>
T smooth_min(std::span<const T> values, double tau) {
    using std::exp;
    using std::log;
    require(tau > 0.0, "smooth_min: tau must be positive");
    require(!values.empty(), "smooth_min: no values");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < values.size(); ++i)
        if (value_of(values[i]) < value_of(values[arg])) arg = i;
    const T m = values[arg];
    T acc(0.0);
    for (const T& v : values) acc += exp((m - v) / tau);
    return m - tau * log(acc);
}

inline double smooth_min(const std::vector<double>& values, double tau) {
    return smooth_min<double>(std::span<const double>(values), tau);
}

/// Smooth max (1/beta) ln sum exp(beta q_i).
template <class T, std::size_t N>
T smooth_max(const std::array<T, N>& q, double beta) {
    using std::exp;
    using std::log;
    std::size_t arg = 0;
    for (std::size_t i = 1; i < N; ++i)
        if (value_of(q[i]) > value_of(q[arg])) arg = i;
    T acc(0.0);
    for (const T& v : q) acc += exp(beta * (v - q[arg]));
    return q[arg] + log(acc) / beta;
}

struct FieldParams {
    double tau = 0.02;               // smooth-min temperature across primitives (m)
    double beta = 100.0;             // corner smoothing sharpness (1/m)
    double occupancy_scale = 0.005;  // sigmoid width for occupancy (m)
    PosEncConfig point_encoding{6};
    PosEncConfig direction_encoding{4};

    void validate() const {
        require(tau > 0.0 && beta > 0.0 && occupancy_scale > 0.0, "scene field: tau, beta, occupancy scale must be > 0");
        require(point_encoding.frequencies >= 1 && direction_encoding.frequencies >= 1,
                "scene field: encoding frequency counts must be >= 1");
    }
};

/// Box signed distance with |x| replaced by sqrt(x^2 + 1/beta^2) and the
/// max/clamp operations replaced by softplus and log-sum-exp at sharpness beta.
template <class T>
T box_distance(const std::array<T, 3>& p, const ScenePrimitive& b, double beta) {
    using std::sqrt;
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const T dx = p[0] - b.center.x(), dy = p[1] - b.center.y(), dz = p[2] - b.center.z();
    const std::array<T, 3> local{c * dx + s * dy, -s * dx + c * dy, dz};
    const double delta2 = 1.0 / (beta * beta);
    std::array<T, 3> q;
    for (int i = 0; i < 3; ++i) q[i] = sqrt(local[i] * local[i] + delta2) - b.half_extents[i];
    T outside(0.0);
    for (int i = 0; i < 3; ++i) {
        const T sp = softplus(q[i], beta);
        outside += sp * sp;
    }
    return sqrt(outside) - softplus(T(-1.0) * smooth_max(q, beta), beta);
}

template <class T>
T scene_distance(const std::array<T, 3>& p, const Scene& scene, const FieldParams& params) {
    std::vector<T> d;
    d.reserve(scene.primitives.size());
    for (const auto& b : scene.primitives) d.push_back(box_distance(p, b, params.beta));
    return smooth_min(std::span<const T>(d), params.tau);
}

/// Smooth distance and its spatial gradient.
template <class T>
T scene_distance_and_gradient(const std::array<T, 3>& p, const Scene& scene, const FieldParams& params,
                              std::array<T, 3>& grad) {
    using D = Dual<T, 3>;
    const std::array<D, 3> pd{D::variable(p[0], 0), D::variable(p[1], 1), D::variable(p[2], 2)};
    const D d = scene_distance(pd, scene, params);
    grad = d.eps;
    return d.val;
}

/// Top-down observation at (x, y): smooth 2D footprint distance, its gradient,
/// the height of the scene there, and the point's height above it.
inline constexpr int kObservationDim = 5;

template <class T>
void observe(const std::array<T, 3>& p, const Scene& scene, const FieldParams& params, T* out) {
    using std::sqrt;
    using D = Dual<T, 2>;
    const D x = D::variable(p[0], 0), y = D::variable(p[1], 1);
    std::vector<D> dist;
    T weight_sum(0.0), height(0.0);
    for (const auto& b : scene.primitives) {
        const double c = std::cos(b.yaw), s = std::sin(b.yaw);
        const D dx = x - b.center.x(), dy = y - b.center.y();
        const D lx = c * dx + s * dy, ly = -s * dx + c * dy;
        const double delta2 = 1.0 / (params.beta * params.beta);
        const std::array<D, 2> q{sqrt(lx * lx + delta2) - b.half_extents.x(),
                                 sqrt(ly * ly + delta2) - b.half_extents.y()};
        const D so = softplus(q[0], params.beta), s1 = softplus(q[1], params.beta);
        const D d2 = sqrt(so * so + s1 * s1) - softplus(D(-1.0) * smooth_max(q, params.beta), params.beta);
        dist.push_back(d2);
        const T w = sigmoid(T(-1.0) * d2.val / params.occupancy_scale);
        weight_sum += w;
        height += w * (b.center.z() + b.half_extents.z());
    }
    const D d = smooth_min(std::span<const D>(dist), params.tau);
    const T h = height / (weight_sum + 1e-3);
    out[0] = d.val;
    out[1] = d.eps[0];
    out[2] = d.eps[1];
    out[3] = h;
    out[4] = p[2] - h;
}

// ---------------------------------------------------------------------------
// Learned field

struct LearnedFieldConfig {
    int width = 8;
    int blocks = 6;
    int taps = 4;  // number of trailing blocks whose activations form the features

    void validate() const {
        require(width >= 1 && blocks >= 1, "learned field: width and block count must be >= 1");
        require(taps >= 1 && taps <= blocks, "learned field: taps must be in [1, blocks]");
    }
};

namespace detail {
template <class T>
void dense_apply(const nn::DenseLayer& layer, const T* x, T* y) {
    using std::exp;
    const auto out = layer.out_dim(), in = layer.in_dim();
    for (Eigen::Index o = 0; o < out; ++o) {
        T acc(layer.bias(0, o));
        const double* w = layer.weights.row(o).data();
        for (Eigen::Index i = 0; i < in; ++i) acc += w[i] * x[i];
        switch (layer.activation) {
            case nn::Activation::Elu:
                if (!(value_of(acc) > 0.0)) acc = exp(acc) - 1.0;
                break;
            case nn::Activation::Relu:
                if (!(value_of(acc) > 0.0)) acc = T(0.0);
                break;
            case nn::Activation::Identity: break;
        }
        y[o] = acc;
    }
}
}  // namespace detail

class SceneField {
public:
    enum class Mode { Analytic, Learned };

    explicit SceneField(FieldParams params = {}) : params_(params) { params_.validate(); }

    static SceneField learned(FieldParams params, LearnedFieldConfig cfg, std::uint64_t seed) {
        cfg.validate();
        SceneField f(params);
        f.mode_ = Mode::Learned;
        f.learned_cfg_ = cfg;
        std::vector<int> sizes{f.learned_input_dim()};
        for (int i = 0; i < cfg.blocks; ++i) sizes.push_back(cfg.width);
        f.net_ = nn::init_model(sizes, nn::Activation::Elu, seed);
        Rng rng(derive_seed(seed, 0x7265));
        f.readout_ = nn::init_dense(static_cast<Eigen::Index>(cfg.taps) * cfg.width, 3, nn::Activation::Identity, rng);
        return f;
    }

    Mode mode() const { return mode_; }
    const FieldParams& params() const { return params_; }
    const LearnedFieldConfig& learned_config() const { return learned_cfg_; }

    int geometric_dim() const { return 3; }
    int encoding_dim() const {
        return 6 * (params_.point_encoding.frequencies + params_.direction_encoding.frequencies);
    }
    int learned_input_dim() const { return encoding_dim() + kObservationDim; }

    int feature_dim() const {
        return mode_ == Mode::Analytic ? geometric_dim() + encoding_dim() : learned_cfg_.taps * learned_cfg_.width;
    }

    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    const nn::Network& network() const { return net_; }
    const nn::DenseLayer& readout() const { return readout_; }
    nn::Network& mutable_network() {
        if (frozen_) throw ConfigError("scene field is frozen; weight updates are rejected");
        return net_;
    }
    nn::DenseLayer& mutable_readout() {
        if (frozen_) throw ConfigError("scene field is frozen; weight updates are rejected");
        return readout_;
    }

    /// Analytic geometric targets [d, occ, align].
    template <class T>
    void geometry(const T* point, const T* direction, const Scene& scene, T* out) const {
        const std::array<T, 3> p{point[0], point[1], point[2]};
        std::array<T, 3> grad;
        const T d = scene_distance_and_gradient(p, scene, params_, grad);
        out[0] = d;
        out[1] = sigmoid(T(-1.0) * d / params_.occupancy_scale);
        out[2] = direction[0] * grad[0] + direction[1] * grad[1] + direction[2] * grad[2];
    }

    /// Input vector of the learned network: encodings then observation.
    template <class T>
    void learned_input(const T* point, const T* direction, const Scene& scene, T* out) const {
        encodings(point, direction, out);
        observe(std::array<T, 3>{point[0], point[1], point[2]}, scene, params_, out + encoding_dim());
    }

    /// Writes feature_dim() values for the support pose (point, direction).
    template <class T>
    void features(const T* point, const T* direction, const Scene& scene, T* out) const {
        if (mode_ == Mode::Analytic) {
            geometry(point, direction, scene, out);
            encodings(point, direction, out + geometric_dim());
            return;
        }
        std::vector<T> x(static_cast<std::size_t>(learned_input_dim()));
        learned_input(point, direction, scene, x.data());
        taps(x.data(), out);
    }

    /// Activations of the last `taps` blocks, concatenated, for a learned-field input.
    template <class T>
    void taps(const T* input, T* out) const {
        const int w = learned_cfg_.width;
        std::vector<T> h(input, input + learned_input_dim()), a(w), b(w);
        const int first_tap = learned_cfg_.blocks - learned_cfg_.taps;
        for (int k = 0; k < learned_cfg_.blocks; ++k) {
            const auto& blk = net_.blocks[static_cast<std::size_t>(k)];
            detail::dense_apply(blk.layer1, h.data(), a.data());
            detail::dense_apply(blk.layer2, a.data(), b.data());
            std::vector<T> next(static_cast<std::size_t>(w));
            for (int o = 0; o < w; ++o) {
                T skip(0.0);
                if (blk.shortcut) {
                    for (Eigen::Index i = 0; i < blk.shortcut->cols(); ++i)
                        skip += (*blk.shortcut)(o, i) * h[static_cast<std::size_t>(i)];
                } else {
                    skip = h[static_cast<std::size_t>(o)];
                }
                next[static_cast<std::size_t>(o)] = b[static_cast<std::size_t>(o)] + skip;
            }
            h = std::move(next);
            if (k >= first_tap)
                std::copy(h.begin(), h.end(), out + static_cast<std::ptrdiff_t>(k - first_tap) * w);
        }
    }

    Vec field_features(const SupportPose& sp, const Scene& scene) const {
        Vec out(feature_dim());
        features(sp.point.data(), sp.direction.data(), scene, out.data());
        return out;
    }

private:
    template <class T>
    void encodings(const T* point, const T* direction, T* out) const {
        positional_encode(point, 3, params_.point_encoding.frequencies, out);
        positional_encode(direction, 3, params_.direction_encoding.frequencies,
                          out + 6 * params_.point_encoding.frequencies);
    }

    Mode mode_ = Mode::Analytic;
    FieldParams params_;
    LearnedFieldConfig learned_cfg_;
    nn::Network net_;
    nn::DenseLayer readout_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Learned field pretraining

struct PretrainConfig {
    int steps = 5000;
    int batch = 64;
    int probes_per_scene = 64;
    double holdout_fraction = 0.2;
    double learning_rate = 3e-3;
    std::uint64_t seed = 0;
};

struct PretrainReport {
    double initial_mse = 0.0;
    double final_mse = 0.0;
    int steps = 0;
};

struct FieldProbe {
    std::size_t scene;
    Vec input;   // learned-field input
    Vec target;  // [d, occ, align]
};

inline std::vector<FieldProbe> sample_field_probes(const SceneField& field, const std::vector<Scene>& scenes,
                                                   std::size_t first, std::size_t last, int per_scene, Rng& rng) {
    std::vector<FieldProbe> probes;
    for (std::size_t s = first; s < last; ++s) {
        const Scene& scene = scenes[s];
        for (int k = 0; k < per_scene; ++k) {
            Vec3 p;
            if (k % 2 == 0) {
                const auto& b = scene.primitives[static_cast<std::size_t>(
                    std::uniform_int_distribution<int>(0, static_cast<int>(scene.primitives.size()) - 1)(rng))];
                for (int i = 0; i < 3; ++i)
                    p[i] = b.center[i] + uniform(rng, -b.half_extents[i] - 0.05, b.half_extents[i] + 0.05);
            } else {
                for (int i = 0; i < 3; ++i) p[i] = uniform(rng, scene.workspace.lo[i], scene.workspace.hi[i]);
            }
            Vec3 u(gaussian(rng, 1.0), gaussian(rng, 1.0), gaussian(rng, 1.0));
            u.normalize();
            FieldProbe probe{s, Vec(field.learned_input_dim()), Vec(3)};
            field.learned_input(p.data(), u.data(), scene, probe.input.data());
            field.geometry(p.data(), u.data(), scene, probe.target.data());
            probes.push_back(std::move(probe));
        }
    }
    return probes;
}

/// Regresses the analytic [d, occ, align] from the learned taps through a
/// linear readout, then freezes the field.
inline PretrainReport pretrain_learned_field(SceneField& field, const std::vector<Scene>& scenes,
                                             const PretrainConfig& cfg) {
    require(field.mode() == SceneField::Mode::Learned, "pretrain: field is not in learned mode");
    require(!field.frozen(), "pretrain: field is frozen");
    require(!scenes.empty(), "pretrain: no scenes");
    require(cfg.steps >= 0 && cfg.batch >= 1 && cfg.probes_per_scene >= 1, "pretrain: invalid configuration");
    Rng rng(cfg.seed);
    const auto split = std::max<std::size_t>(
        1, std::min(scenes.size() - (scenes.size() > 1 ? 1 : 0),
                    static_cast<std::size_t>(std::lround(scenes.size() * (1.0 - cfg.holdout_fraction)))));
    const auto train = sample_field_probes(field, scenes, 0, split, cfg.probes_per_scene, rng);
    const auto held =
        sample_field_probes(field, scenes, scenes.size() > 1 ? split : 0, scenes.size(), cfg.probes_per_scene, rng);

    auto stack = [](const std::vector<FieldProbe>& probes, const std::vector<std::size_t>& idx, Mat& x, Mat& y) {
        x.resize(static_cast<Eigen::Index>(idx.size()), probes.front().input.size());
        y.resize(static_cast<Eigen::Index>(idx.size()), 3);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            x.row(static_cast<Eigen::Index>(r)) = probes[idx[r]].input.transpose();
            y.row(static_cast<Eigen::Index>(r)) = probes[idx[r]].target.transpose();
        }
    };

    nn::Network& net = field.mutable_network();
    nn::DenseLayer& readout = field.mutable_readout();
    std::vector<Mat*> params;
    std::vector<ad::Shape> shapes;
    net.visit("field", [&](const std::string&, Mat& m) {
        params.push_back(&m);
        shapes.push_back({m.rows(), m.cols()});
    });
    params.push_back(&readout.weights);
    params.push_back(&readout.bias);
    shapes.push_back({readout.weights.rows(), readout.weights.cols()});
    shapes.push_back({readout.bias.rows(), readout.bias.cols()});
    nn::AdamState adam({cfg.learning_rate}, shapes);

    const int first_tap = field.learned_config().blocks - field.learned_config().taps;
    auto build = [&](ad::Graph& g, ad::Bindings& b, const Mat& x, const Mat& y, std::vector<ad::NodeId>& leaves) {
        const ad::NodeId xin = g.constant(x);
        std::vector<ad::NodeId> tensors;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const ad::NodeId leaf = g.leaf("field." + std::to_string(i), params[i]->rows(), params[i]->cols());
            b.bind(leaf, *params[i]);
            tensors.push_back(leaf);
        }
        leaves = tensors;
        std::size_t k = 0;
        ad::NodeId h = xin, features;
        for (int blk = 0; blk < static_cast<int>(net.blocks.size()); ++blk) {
            const auto& block = net.blocks[static_cast<std::size_t>(blk)];
            const ad::NodeId w1 = tensors[k++], b1 = tensors[k++], w2 = tensors[k++], b2 = tensors[k++];
            std::optional<ad::NodeId> proj;
            if (block.shortcut) proj = tensors[k++];
            h = nn::forward_block(g, block, w1, b1, w2, b2, proj, h);
            if (blk >= first_tap) features = features.valid() ? g.concat_cols(features, h) : h;
        }
        const ad::NodeId pred = g.add_row(g.matmul(features, tensors[k], false, true), tensors[k + 1]);
        const ad::NodeId diff = g.sub(pred, g.constant(y));
        return g.mean(g.mul(diff, diff));
    };

    auto mse = [&](const std::vector<FieldProbe>& probes) {
        std::vector<std::size_t> idx(probes.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Mat x, y;
        stack(probes, idx, x, y);
        ad::Graph g;
        ad::Bindings b;
        std::vector<ad::NodeId> leaves;
        const ad::NodeId loss = build(g, b, x, y, leaves);
        return ad::evaluate(g, loss, b)(0, 0);
    };

    PretrainReport report;
    report.initial_mse = mse(held);
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::size_t> idx;
        for (int i = 0; i < cfg.batch; ++i) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            idx.push_back(order[cursor++]);
        }
        Mat x, y;
        stack(train, idx, x, y);
        ad::Graph g;
        ad::Bindings b;
        std::vector<ad::NodeId> leaves;
        const ad::NodeId loss = build(g, b, x, y, leaves);
        const auto grads = ad::gradient(g, {loss, leaves, false});
        ad::Evaluation eval(g, b);
        std::vector<ad::NodeId> roots{loss};
        roots.insert(roots.end(), grads.begin(), grads.end());
        auto values = eval.values(roots);
        if (!std::isfinite(values[0](0, 0)))
            throw NumericError("pretrain: loss is not finite at step " + std::to_string(step));
        adam.step(params, std::span<const Mat>(values).subspan(1));
    }
    report.steps = cfg.steps;
    report.final_mse = mse(held);
    field.freeze();
    return report;
}

}  // namespace slopegrasp
