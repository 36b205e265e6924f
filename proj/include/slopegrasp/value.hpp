#pragma once

// The grasp value function: pose -> support poses -> scene features ->
// per-support aggregation network -> concatenation -> value network -> scalar.

#include "slopegrasp/autodiff.hpp"
#include "slopegrasp/nn.hpp"
#include "slopegrasp/pose.hpp"
#include "slopegrasp/scene.hpp"

#include <memory>
#include <string>
#include <vector>

namespace slopegrasp {

/// Row function from a flat pose to the concatenated features of its support
/// poses. Rotations are normalized inside, so the map is defined off the
/// manifold as well; first and second derivatives come from dual numbers.
class PoseFeatureMap final : public ad::RowFunction {
public:
    PoseFeatureMap(std::shared_ptr<const SceneField> field, std::shared_ptr<const Scene> scene, PPDConfig ppd,
                   Representation rep)
        : field_(std::move(field)), scene_(std::move(scene)), ppd_(std::move(ppd)), rep_(rep) {}

    int supports() const { return static_cast<int>(ppd_.entries.size()); }
    int features_per_support() const { return field_->feature_dim(); }
    int input_dim() const override { return pose_dim(rep_); }
    int output_dim() const override { return supports() * features_per_support(); }
    std::string name() const override { return "pose_features"; }

    template <class T>
    void eval(const T* in, T* out) const {
        const std::array<T, 9> r = rotation_from_rep(in + 3, rep_);
        const int f = features_per_support();
        for (std::size_t s = 0; s < ppd_.entries.size(); ++s) {
            const auto& e = ppd_.entries[s];
            std::array<T, 3> point, dir;
            for (int k = 0; k < 3; ++k) {
                point[k] = r[3 * k] * e.offset[0] + r[3 * k + 1] * e.offset[1] + r[3 * k + 2] * e.offset[2] + in[k];
                dir[k] = r[3 * k] * e.direction[0] + r[3 * k + 1] * e.direction[1] + r[3 * k + 2] * e.direction[2];
            }
            field_->features(point.data(), dir.data(), *scene_, out + static_cast<std::ptrdiff_t>(s) * f);
        }
    }

    void value(const double* in, double* out) const override { eval(in, out); }

    void jacobian(const double* in, Mat& jac) const override {
        using D = Dual<double, 9>;
        const int n = input_dim();
        std::array<D, 9> x;
        for (int i = 0; i < n; ++i) x[i] = D::variable(in[i], i);
        std::vector<D> y(static_cast<std::size_t>(output_dim()));
        eval(x.data(), y.data());
        jac.resize(output_dim(), n);
        for (int o = 0; o < output_dim(); ++o)
            for (int i = 0; i < n; ++i) jac(o, i) = y[static_cast<std::size_t>(o)].eps[i];
    }

    void weighted_hessian_vector(const double* in, const double* w, const double* v, double* out) const override {
        using I = Dual<double, 1>;
        using D = Dual<I, 9>;
        const int n = input_dim();
        std::array<D, 9> x;
        for (int i = 0; i < n; ++i) {
            x[i].val = I(in[i], {v[i]});
            x[i].eps[i] = I(1.0);
        }
        std::vector<D> y(static_cast<std::size_t>(output_dim()));
        eval(x.data(), y.data());
        for (int i = 0; i < n; ++i) {
            double acc = 0.0;
            for (int o = 0; o < output_dim(); ++o) acc += w[o] * y[static_cast<std::size_t>(o)].eps[i].eps[0];
            out[i] = acc;
        }
    }

private:
    std::shared_ptr<const SceneField> field_;
    std::shared_ptr<const Scene> scene_;
    PPDConfig ppd_;
    Representation rep_;
};

/// Graph under construction for one or more psi evaluations. Model
/// parameters are bound once per graph and recorded in `params`.
struct PsiGraph {
    ad::Graph graph;
    ad::Bindings bindings;
    std::vector<ad::NodeId> params;
    bool params_bound = false;

    ad::NodeId pose_leaf(const Mat& poses, const std::string& name = "poses") {
        const ad::NodeId leaf = graph.leaf(name, poses.rows(), poses.cols());
        bindings.bind(leaf, poses);
        return leaf;
    }
};

class ValueFunction {
public:
    virtual ~ValueFunction() = default;
    virtual Representation representation() const = 0;
    /// psi for every row of `poses` (B x pose_dim), as a B x 1 node.
    virtual ad::NodeId build(PsiGraph& ctx, ad::NodeId poses, const Scene& scene) const = 0;
};

struct ValueModelConfig {
    Representation representation = Representation::Quat;
    PPDConfig ppd = PPDConfig::gripper();
    nn::Activation activation = nn::Activation::Elu;
    std::vector<int> aggregation_widths{64, 64};
    std::vector<int> value_widths{64, 64, 64};

    void validate() const {
        ppd.validate();
        require(!aggregation_widths.empty() && !value_widths.empty(), "value model: network widths must be non-empty");
        for (int w : aggregation_widths) require(w >= 1, "value model: widths must be positive");
        for (int w : value_widths) require(w >= 1, "value model: widths must be positive");
    }
};

class ValueModel final : public ValueFunction {
public:
    ValueModel(ValueModelConfig cfg, std::shared_ptr<const SceneField> phi, std::uint64_t seed)
        : cfg_(std::move(cfg)), phi_(std::move(phi)), seed_(seed) {
        cfg_.validate();
        require(phi_ != nullptr, "value model: scene field is required");
        require(phi_->mode() == SceneField::Mode::Analytic || phi_->frozen(),
                "value model: a learned scene field must be frozen");
        std::vector<int> agg{phi_->feature_dim()};
        agg.insert(agg.end(), cfg_.aggregation_widths.begin(), cfg_.aggregation_widths.end());
        std::vector<int> val{supports() * cfg_.aggregation_widths.back()};
        val.insert(val.end(), cfg_.value_widths.begin(), cfg_.value_widths.end());
        aggregation_ = nn::init_model(agg, cfg_.activation, derive_seed(seed, 1));
        value_ = nn::init_model(val, cfg_.activation, derive_seed(seed, 2), true);
    }

    Representation representation() const override { return cfg_.representation; }
    const ValueModelConfig& config() const { return cfg_; }
    const SceneField& field() const { return *phi_; }
    std::shared_ptr<const SceneField> field_ptr() const { return phi_; }
    std::uint64_t seed() const { return seed_; }
    int supports() const { return static_cast<int>(cfg_.ppd.entries.size()); }

    const nn::Network& aggregation() const { return aggregation_; }
    const nn::Network& value_network() const { return value_; }
    nn::Network& aggregation() { return aggregation_; }
    nn::Network& value_network() { return value_; }

    /// Trainable tensors in a fixed order: aggregation then value network.
    std::vector<std::pair<std::string, Mat*>> parameters() {
        std::vector<std::pair<std::string, Mat*>> out;
        aggregation_.visit("aggregation", [&](const std::string& n, Mat& m) { out.emplace_back(n, &m); });
        value_.visit("value", [&](const std::string& n, Mat& m) { out.emplace_back(n, &m); });
        return out;
    }
    std::vector<std::pair<std::string, const Mat*>> parameters() const {
        std::vector<std::pair<std::string, const Mat*>> out;
        aggregation_.visit("aggregation", [&](const std::string& n, const Mat& m) { out.emplace_back(n, &m); });
        value_.visit("value", [&](const std::string& n, const Mat& m) { out.emplace_back(n, &m); });
        return out;
    }

    std::shared_ptr<PoseFeatureMap> feature_map(const Scene& scene) const {
        return std::make_shared<PoseFeatureMap>(phi_, std::make_shared<const Scene>(scene), cfg_.ppd,
                                                cfg_.representation);
    }

    ad::NodeId build(PsiGraph& ctx, ad::NodeId poses, const Scene& scene) const override {
        ad::Graph& g = ctx.graph;
        if (g.shape(poses).cols != pose_dim(cfg_.representation))
            throw ConfigError("psi: pose representation mismatch (expected " + to_string(cfg_.representation) +
                              " with " + std::to_string(pose_dim(cfg_.representation)) + " entries, got " +
                              std::to_string(g.shape(poses).cols) + ")");
        if (!ctx.params_bound) {
            ctx.params = nn::bind_network(g, ctx.bindings, aggregation_, "aggregation").tensors;
            const auto v = nn::bind_network(g, ctx.bindings, value_, "value").tensors;
            ctx.params.insert(ctx.params.end(), v.begin(), v.end());
            ctx.params_bound = true;
        }
        std::size_t count = 0;
        aggregation_.visit("", [&](const std::string&, const Mat&) { ++count; });
        const nn::NetworkNodes agg{{ctx.params.begin(), ctx.params.begin() + static_cast<std::ptrdiff_t>(count)}};
        const nn::NetworkNodes val{{ctx.params.begin() + static_cast<std::ptrdiff_t>(count), ctx.params.end()}};

        const Eigen::Index batch = g.shape(poses).rows;
        const ad::NodeId features = g.map(feature_map(scene), poses);
        const ad::NodeId per_support = g.reshape(features, batch * supports(), phi_->feature_dim());
        const ad::NodeId aggregated = nn::forward(g, aggregation_, agg, per_support);
        const ad::NodeId joined = g.reshape(aggregated, batch, supports() * cfg_.aggregation_widths.back());
        return nn::forward(g, value_, val, joined);
    }

private:
    ValueModelConfig cfg_;
    std::shared_ptr<const SceneField> phi_;
    std::uint64_t seed_;
    nn::Network aggregation_;
    nn::Network value_;
};

// ---------------------------------------------------------------------------
// Analytic heads

/// psi(p) = -sum_i w_i (p_i - t_i)^2 over the flat representation.
class AttractorHead final : public ValueFunction {
public:
    AttractorHead(Representation rep, Vec target, Vec weights)
        : rep_(rep), target_(std::move(target)), weights_(std::move(weights)) {
        require(target_.size() == pose_dim(rep_) && weights_.size() == pose_dim(rep_),
                "attractor head: target and weights must match the pose dimension");
    }

    /// -|pos - goal|^2, independent of orientation.
    static AttractorHead position(Representation rep, const Vec3& goal) {
        Vec t = Vec::Zero(pose_dim(rep)), w = Vec::Zero(pose_dim(rep));
        t.head<3>() = goal;
        w.head<3>().setOnes();
        return AttractorHead(rep, t, w);
    }

    Representation representation() const override { return rep_; }

    ad::NodeId build(PsiGraph& ctx, ad::NodeId poses, const Scene&) const override {
        ad::Graph& g = ctx.graph;
        require(g.shape(poses).cols == pose_dim(rep_), "attractor head: pose representation mismatch");
        const Eigen::Index b = g.shape(poses).rows;
        const ad::NodeId diff = g.sub(poses, g.constant(target_.transpose().replicate(b, 1)));
        const ad::NodeId weighted = g.mul(g.mul(diff, diff), g.constant(weights_.transpose().replicate(b, 1)));
        return g.neg(g.row_sum(weighted));
    }

private:
    Representation rep_;
    Vec target_;
    Vec weights_;
};

/// psi(p) = c . p
class LinearHead final : public ValueFunction {
public:
    LinearHead(Representation rep, Vec coefficients) : rep_(rep), c_(std::move(coefficients)) {
        require(c_.size() == pose_dim(rep_), "linear head: coefficient size mismatch");
    }
    Representation representation() const override { return rep_; }
    ad::NodeId build(PsiGraph& ctx, ad::NodeId poses, const Scene&) const override {
        ad::Graph& g = ctx.graph;
        require(g.shape(poses).cols == pose_dim(rep_), "linear head: pose representation mismatch");
        return g.matmul(poses, g.constant(Mat(c_)));
    }

private:
    Representation rep_;
    Vec c_;
};

// ---------------------------------------------------------------------------
// Evaluation helpers

inline void check_representation(const ValueFunction& fn, const Pose& p) {
    if (representation(p) != fn.representation())
        throw ConfigError("psi: pose is " + to_string(representation(p)) + ", model expects " +
                          to_string(fn.representation()));
}

/// Gradient of psi w.r.t. each row of `poses`, as a node of the same shape.
inline ad::NodeId pose_gradient(PsiGraph& ctx, const ValueFunction& fn, ad::NodeId poses, const Scene& scene,
                                bool differentiable) {
    const ad::NodeId values = fn.build(ctx, poses, scene);
    return ad::gradient(ctx.graph, {ctx.graph.sum(values), {poses}, differentiable}).front();
}

struct PsiBatch {
    Vec values;
    Mat gradients;  // empty unless requested
};

inline PsiBatch evaluate_batch(const ValueFunction& fn, const Scene& scene, const Mat& poses, bool with_gradient) {
    require(poses.rows() >= 1, "evaluate_batch: no poses");
    PsiGraph ctx;
    const ad::NodeId leaf = ctx.pose_leaf(poses);
    const ad::NodeId values = fn.build(ctx, leaf, scene);
    ad::Evaluation eval(ctx.graph, ctx.bindings);
    PsiBatch out;
    if (with_gradient) {
        const ad::NodeId grad = ad::gradient(ctx.graph, {ctx.graph.sum(values), {leaf}, false}).front();
        const std::vector<ad::NodeId> roots{values, grad};
        auto v = eval.values(roots);
        out.values = Eigen::Map<const Vec>(v[0].data(), v[0].size());
        out.gradients = std::move(v[1]);
    } else {
        const Mat& v = eval.value(values);
        out.values = Eigen::Map<const Vec>(v.data(), v.size());
    }
    return out;
}

inline double psi(const ValueFunction& fn, const Pose& p, const Scene& scene) {
    check_representation(fn, p);
    return evaluate_batch(fn, scene, to_vector(p).transpose(), false).values[0];
}

inline Vec pose_gradient(const ValueFunction& fn, const Pose& p, const Scene& scene) {
    check_representation(fn, p);
    return evaluate_batch(fn, scene, to_vector(p).transpose(), true).gradients.row(0).transpose();
}

inline Vec multi_candidate_values(const ValueFunction& fn, const std::vector<Pose>& candidates, const Scene& scene) {
    for (const auto& c : candidates) check_representation(fn, c);
    return evaluate_batch(fn, scene, to_matrix(candidates), false).values;
}

// ---------------------------------------------------------------------------
// Activation-boundary probe
//
// Locates poses where a first-layer aggregation unit switches sign and
// compares symmetric difference quotients of the analytic pose gradient at
// two step sizes, both along the pose and along that unit's bias. For a C1
// network the quotients agree (ratio ~ 1); a jump in the first derivative
// makes the quotient grow like 1/h. Mixed partials from the graph are also
// checked for finiteness at random probes.

struct ProbeReport {
    int boundaries = 0;
    double max_pose_growth = 0.0;
    double max_theta_growth = 0.0;
    double max_relative_jump = 0.0;
    bool mixed_partials_finite = true;
    int finite_probes = 0;
};

inline ProbeReport probe_activation_boundaries(const ValueModel& model, const Scene& scene, int boundaries,
                                               int finite_probes, std::uint64_t seed) {
    Rng rng(seed);
    ProbeReport report;
    const Representation rep = model.representation();
    const auto fmap = model.feature_map(scene);
    const auto& first = model.aggregation().blocks.front().layer1;
    const int s_count = model.supports(), f_dim = model.field().feature_dim();

    auto preacts = [&](const Vec& p) {
        Vec feats(fmap->output_dim());
        fmap->value(p.data(), feats.data());
        const Mat f = Eigen::Map<const Mat>(feats.data(), s_count, f_dim);
        Mat z = f * first.weights.transpose();
        z.rowwise() += first.bias.row(0);
        return z;
    };
    auto grad = [&](const ValueModel& m, const Vec& p) {
        return Vec(evaluate_batch(m, scene, p.transpose(), true).gradients.row(0).transpose());
    };

    int attempts = 0;
    while (report.boundaries < boundaries && attempts < 50 * std::max(1, boundaries)) {
        ++attempts;
        const Vec p0 = to_vector(random_pose(scene.workspace, rep, rng));
        Vec u = Vec::Zero(p0.size());
        for (int i = 0; i < 3; ++i) u[i] = gaussian(rng, 1.0);
        u.head<3>().normalize();
        constexpr int kScan = 40;
        constexpr double kRange = 0.02;
        Mat prev = preacts(p0 - kRange * u);
        double s_prev = -kRange;
        int hit_row = -1, hit_col = -1;
        double lo = 0.0, hi = 0.0;
        for (int i = 1; i <= kScan && hit_row < 0; ++i) {
            const double s = -kRange + 2.0 * kRange * i / kScan;
            const Mat cur = preacts(p0 + s * u);
            for (Eigen::Index r = 0; r < cur.rows() && hit_row < 0; ++r)
                for (Eigen::Index c = 0; c < cur.cols(); ++c)
                    if ((prev(r, c) > 0.0) != (cur(r, c) > 0.0)) {
                        hit_row = static_cast<int>(r);
                        hit_col = static_cast<int>(c);
                        lo = s_prev;
                        hi = s;
                        break;
                    }
            prev = cur;
            s_prev = s;
        }
        if (hit_row < 0) continue;
        const bool lo_positive = preacts(p0 + lo * u)(hit_row, hit_col) > 0.0;
        for (int it = 0; it < 200 && hi - lo > 1e-15; ++it) {
            const double mid = 0.5 * (lo + hi);
            if ((preacts(p0 + mid * u)(hit_row, hit_col) > 0.0) == lo_positive) lo = mid;
            else hi = mid;
        }
        const Vec p = p0 + 0.5 * (lo + hi) * u;

        auto pose_quotient = [&](double h) { return (grad(model, p + h * u) - grad(model, p - h * u)).norm() / (2 * h); };
        auto theta_quotient = [&](double h) {
            ValueModel up = model, down = model;
            up.aggregation().blocks.front().layer1.bias(0, hit_col) += h;
            down.aggregation().blocks.front().layer1.bias(0, hit_col) -= h;
            return (grad(up, p) - grad(down, p)).norm() / (2 * h);
        };
        constexpr double kCoarse = 1e-6, kFine = 1e-9;
        const double floor = 1e-9;
        const double pose_growth = pose_quotient(kFine) / std::max(pose_quotient(kCoarse), floor);
        const double theta_growth = theta_quotient(kFine) / std::max(theta_quotient(kCoarse), floor);
        const Vec g_plus = grad(model, p + kFine * u), g_minus = grad(model, p - kFine * u);
        const double jump = (g_plus - g_minus).norm() / std::max({g_plus.norm(), g_minus.norm(), 1e-12});
        report.max_pose_growth = std::max(report.max_pose_growth, pose_growth);
        report.max_theta_growth = std::max(report.max_theta_growth, theta_growth);
        report.max_relative_jump = std::max(report.max_relative_jump, jump);
        ++report.boundaries;
    }

    if (finite_probes > 0) {
        Mat poses(finite_probes, pose_dim(rep)), weights(finite_probes, pose_dim(rep));
        for (int i = 0; i < finite_probes; ++i) {
            poses.row(i) = to_vector(random_pose(scene.workspace, rep, rng)).transpose();
            for (int j = 0; j < pose_dim(rep); ++j) weights(i, j) = gaussian(rng, 1.0);
        }
        PsiGraph ctx;
        const ad::NodeId leaf = ctx.pose_leaf(poses);
        const ad::NodeId g = pose_gradient(ctx, model, leaf, scene, true);
        const ad::NodeId directional = ctx.graph.sum(ctx.graph.mul(g, ctx.graph.constant(weights)));
        const auto mixed = ad::gradient(ctx.graph, {directional, ctx.params, false});
        ad::Evaluation eval(ctx.graph, ctx.bindings);
        std::vector<ad::NodeId> roots{g};
        roots.insert(roots.end(), mixed.begin(), mixed.end());
        for (const Mat& m : eval.values(roots)) report.mixed_partials_finite = report.mixed_partials_finite && m.allFinite();
        report.finite_probes = finite_probes;
    }
    return report;
}

}  // namespace slopegrasp
