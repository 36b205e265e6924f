#pragma once

// Dense layers, residual blocks, the Adam optimizer and the weight file.

#include "slopegrasp/autodiff.hpp"
#include "slopegrasp/core.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace slopegrasp::nn {

enum class Activation : std::uint8_t { Elu = 0, Relu = 1, Identity = 2 };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::Elu: return "elu";
        case Activation::Relu: return "relu";
        case Activation::Identity: return "identity";
    }
    return "?";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "elu") return Activation::Elu;
    if (s == "relu") return Activation::Relu;
    if (s == "identity") return Activation::Identity;
    throw ConfigError("unknown activation '" + s + "' (expected elu, relu or identity)");
}

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::Elu: return x > 0.0 ? x : std::expm1(x);
        case Activation::Relu: return x > 0.0 ? x : 0.0;
        case Activation::Identity: return x;
    }
    return x;
}

inline ad::NodeId activate(ad::Graph& g, Activation a, ad::NodeId x) {
    switch (a) {
        case Activation::Elu: return g.elu(x);
        case Activation::Relu: return g.relu(x);
        case Activation::Identity: return x;
    }
    return x;
}

struct DenseLayer {
    Mat weights;  // out x in
    Mat bias;     // 1 x out
    Activation activation = Activation::Elu;

    Eigen::Index in_dim() const { return weights.cols(); }
    Eigen::Index out_dim() const { return weights.rows(); }

    Vec forward(const Vec& x) const {
        if (x.size() != in_dim())
            throw ConfigError("dense layer expects " + std::to_string(in_dim()) + " inputs, got " +
                              std::to_string(x.size()));
        Vec z = weights * x + bias.row(0).transpose();
        return z.unaryExpr([this](double v) { return activate(activation, v); });
    }
};

/// activation(layer2(activation(layer1(x)))) + shortcut(x). layer2's own
/// activation tag is the inner activation; the shortcut is a projection
/// exactly when input and output widths differ.
struct ResNetBlock {
    DenseLayer layer1;
    DenseLayer layer2;
    std::optional<Mat> shortcut;  // out x in

    Eigen::Index in_dim() const { return layer1.in_dim(); }
    Eigen::Index out_dim() const { return layer2.out_dim(); }

    void validate() const {
        if (layer1.out_dim() != layer2.in_dim()) throw ConfigError("resnet block: inner widths differ");
        const bool needs_projection = in_dim() != out_dim();
        if (needs_projection != shortcut.has_value())
            throw ConfigError("resnet block: shortcut must be present iff input and output widths differ");
        if (shortcut && (shortcut->rows() != out_dim() || shortcut->cols() != in_dim()))
            throw ConfigError("resnet block: projection shape mismatch");
    }

    Vec forward(const Vec& x) const {
        validate();
        const Vec h = layer2.forward(layer1.forward(x));
        return shortcut ? Vec(h + *shortcut * x) : Vec(h + x);
    }
};

/// Sequence of residual blocks with an optional identity-activated head.
struct Network {
    std::vector<ResNetBlock> blocks;
    std::optional<DenseLayer> head;

    Eigen::Index in_dim() const { return blocks.front().in_dim(); }
    Eigen::Index out_dim() const { return head ? head->out_dim() : blocks.back().out_dim(); }

    Vec forward(const Vec& x) const {
        Vec h = x;
        for (const auto& b : blocks) h = b.forward(h);
        if (head) h = head->forward(h);
        return h;
    }

    /// Every tensor in a fixed order, with stable names.
    template <class Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = prefix + ".block" + std::to_string(i);
            fn(p + ".l1.w", blocks[i].layer1.weights);
            fn(p + ".l1.b", blocks[i].layer1.bias);
            fn(p + ".l2.w", blocks[i].layer2.weights);
            fn(p + ".l2.b", blocks[i].layer2.bias);
            if (blocks[i].shortcut) fn(p + ".proj", *blocks[i].shortcut);
        }
        if (head) {
            fn(prefix + ".head.w", head->weights);
            fn(prefix + ".head.b", head->bias);
        }
    }
    template <class Fn>
    void visit(const std::string& prefix, Fn&& fn) const {
        const_cast<Network*>(this)->visit(prefix, [&](const std::string& n, Mat& m) { fn(n, std::as_const(m)); });
    }
};

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Mat glorot(Eigen::Index out, Eigen::Index in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Mat w(out, in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = uniform(rng, -bound, bound);
    return w;
}

inline DenseLayer init_dense(Eigen::Index in, Eigen::Index out, Activation a, Rng& rng) {
    return DenseLayer{glorot(out, in, rng), Mat::Zero(1, out), a};
}

inline ResNetBlock init_block(Eigen::Index in, Eigen::Index out, Activation a, Rng& rng) {
    ResNetBlock b;
    b.layer1 = init_dense(in, out, a, rng);
    b.layer2 = init_dense(out, out, a, rng);
    if (in != out) b.shortcut = glorot(out, in, rng);
    return b;
}

/// sizes = {input, block1_out, block2_out, ...}; with scalar_head an
/// identity-activated dense layer maps the last width to one output.
inline Network init_model(std::span<const int> sizes, Activation activation, std::uint64_t seed,
                          bool scalar_head = false) {
    if (sizes.size() < 2) throw ConfigError("init_model: need an input size and at least one block");
    for (int s : sizes)
        if (s <= 0) throw ConfigError("init_model: layer sizes must be positive");
    Rng rng(seed);
    Network net;
    for (std::size_t i = 1; i < sizes.size(); ++i) net.blocks.push_back(init_block(sizes[i - 1], sizes[i], activation, rng));
    if (scalar_head) net.head = init_dense(sizes.back(), 1, Activation::Identity, rng);
    return net;
}

/// Graph leaves for a network's tensors, in Network::visit order.
struct NetworkNodes {
    std::vector<ad::NodeId> tensors;
};

inline NetworkNodes bind_network(ad::Graph& g, ad::Bindings& bindings, const Network& net, const std::string& prefix) {
    NetworkNodes nodes;
    net.visit(prefix, [&](const std::string& name, const Mat& m) {
        const ad::NodeId leaf = g.leaf(name, m.rows(), m.cols());
        bindings.bind(leaf, m);
        nodes.tensors.push_back(leaf);
    });
    return nodes;
}

/// Row-batched forward pass: x is (batch x in).
inline ad::NodeId forward(ad::Graph& g, const Network& net, const NetworkNodes& nodes, ad::NodeId x) {
    std::size_t k = 0;
    auto dense = [&](const DenseLayer& layer, ad::NodeId in) {
        const ad::NodeId w = nodes.tensors.at(k++);
        const ad::NodeId b = nodes.tensors.at(k++);
        return activate(g, layer.activation, g.add_row(g.matmul(in, w, false, true), b));
    };
    ad::NodeId h = x;
    for (const auto& block : net.blocks) {
        const ad::NodeId inner = dense(block.layer2, dense(block.layer1, h));
        const ad::NodeId skip = block.shortcut ? g.matmul(h, nodes.tensors.at(k++), false, true) : h;
        h = g.add(inner, skip);
    }
    if (net.head) h = dense(*net.head, h);
    return h;
}

inline ad::NodeId forward_block(ad::Graph& g, const ResNetBlock& block, ad::NodeId w1, ad::NodeId b1, ad::NodeId w2,
                                ad::NodeId b2, std::optional<ad::NodeId> proj, ad::NodeId x) {
    const ad::NodeId h1 = activate(g, block.layer1.activation, g.add_row(g.matmul(x, w1, false, true), b1));
    const ad::NodeId h2 = activate(g, block.layer2.activation, g.add_row(g.matmul(h1, w2, false, true), b2));
    return g.add(h2, proj ? g.matmul(x, *proj, false, true) : x);
}

inline Vec forward_block(const ResNetBlock& block, const Vec& x) { return block.forward(x); }

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double decay = 1.0;  // learning rate multiplier applied after every step
};

class AdamState {
public:
    AdamState() = default;
    AdamState(AdamConfig config, const std::vector<ad::Shape>& shapes) : config_(config), lr_(config.learning_rate) {
        require(config.learning_rate > 0.0, "adam: learning rate must be positive");
        require(config.decay > 0.0 && config.decay <= 1.0, "adam: decay must be in (0, 1]");
        for (const auto& s : shapes) {
            m_.push_back(Mat::Zero(s.rows, s.cols));
            v_.push_back(Mat::Zero(s.rows, s.cols));
        }
    }

    long steps() const { return steps_; }
    double learning_rate() const { return lr_; }
    const AdamConfig& config() const { return config_; }
    const std::vector<Mat>& first_moments() const { return m_; }
    const std::vector<Mat>& second_moments() const { return v_; }

    /// Descends along grads. Throws NumericError if a gradient is not finite.
    void step(std::span<Mat* const> params, std::span<const Mat> grads) {
        if (params.size() != m_.size() || grads.size() != m_.size())
            throw ConfigError("adam: expected " + std::to_string(m_.size()) + " tensors");
        for (std::size_t k = 0; k < grads.size(); ++k) {
            if (grads[k].rows() != m_[k].rows() || grads[k].cols() != m_[k].cols() ||
                params[k]->rows() != m_[k].rows() || params[k]->cols() != m_[k].cols())
                throw ConfigError("adam: shape mismatch in tensor " + std::to_string(k));
            if (!grads[k].allFinite()) {
                Eigen::Index bad = 0;
                while (std::isfinite(grads[k].data()[bad])) ++bad;
                throw NumericError("adam: non-finite gradient in tensor " + std::to_string(k) + " entry " +
                                   std::to_string(bad) + " at step " + std::to_string(steps_ + 1));
            }
        }
        ++steps_;
        const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
        for (std::size_t k = 0; k < grads.size(); ++k) {
            m_[k] = config_.beta1 * m_[k] + (1.0 - config_.beta1) * grads[k];
            v_[k] = config_.beta2 * v_[k] + (1.0 - config_.beta2) * grads[k].cwiseAbs2();
            params[k]->array() -=
                lr_ * (m_[k].array() / c1) / ((v_[k].array() / c2).sqrt() + config_.epsilon);
        }
        lr_ *= config_.decay;
    }

private:
    AdamConfig config_;
    double lr_ = 0.0;
    long steps_ = 0;
    std::vector<Mat> m_;
    std::vector<Mat> v_;
};

inline void adam_step(AdamState& state, std::span<Mat* const> params, std::span<const Mat> grads) {
    state.step(params, grads);
}

// ---------------------------------------------------------------------------
// Weight file
//
// Little-endian binary:
//   "SGWT" | u32 format_version | u8 activation | u64 seed | u32 tensor_count
//   per tensor: u32 name_len | name | u64 rows | u64 cols | rows*cols f64 (row-major)

inline constexpr std::uint32_t kWeightFormatVersion = 1;

class WeightFileError : public Error {
public:
    enum class Kind { Io, Version, Shape, Corrupt };
    WeightFileError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct NamedTensor {
    std::string name;
    Mat value;
};

struct WeightFile {
    std::uint32_t format_version = kWeightFormatVersion;
    Activation activation = Activation::Elu;
    std::uint64_t seed = 0;
    std::vector<NamedTensor> tensors;
};

namespace detail {
template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw WeightFileError(WeightFileError::Kind::Corrupt, "weight file truncated");
    return v;
}
}  // namespace detail

inline void save_weights(const WeightFile& file, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw WeightFileError(WeightFileError::Kind::Io, "cannot write " + path);
    os.write("SGWT", 4);
    detail::put(os, file.format_version);
    detail::put(os, static_cast<std::uint8_t>(file.activation));
    detail::put(os, file.seed);
    detail::put(os, static_cast<std::uint32_t>(file.tensors.size()));
    for (const auto& t : file.tensors) {
        detail::put(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::put(os, static_cast<std::uint64_t>(t.value.rows()));
        detail::put(os, static_cast<std::uint64_t>(t.value.cols()));
        os.write(reinterpret_cast<const char*>(t.value.data()),
                 static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    if (!os) throw WeightFileError(WeightFileError::Kind::Io, "write failed for " + path);
}

inline WeightFile load_weights(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw WeightFileError(WeightFileError::Kind::Io, "cannot read " + path);
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "SGWT", 4) != 0)
        throw WeightFileError(WeightFileError::Kind::Corrupt, path + " is not a weight file");
    WeightFile file;
    file.format_version = detail::get<std::uint32_t>(is);
    if (file.format_version != kWeightFormatVersion)
        throw WeightFileError(WeightFileError::Kind::Version,
                              "weight file version " + std::to_string(file.format_version) + ", expected " +
                                  std::to_string(kWeightFormatVersion));
    const auto act = detail::get<std::uint8_t>(is);
    if (act > 2) throw WeightFileError(WeightFileError::Kind::Corrupt, "bad activation tag");
    file.activation = static_cast<Activation>(act);
    file.seed = detail::get<std::uint64_t>(is);
    const auto count = detail::get<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        const auto len = detail::get<std::uint32_t>(is);
        if (len > 4096) throw WeightFileError(WeightFileError::Kind::Corrupt, "tensor name too long");
        t.name.resize(len);
        is.read(t.name.data(), len);
        const auto rows = detail::get<std::uint64_t>(is);
        const auto cols = detail::get<std::uint64_t>(is);
        if (rows > (1u << 24) || cols > (1u << 24))
            throw WeightFileError(WeightFileError::Kind::Corrupt, "implausible tensor shape for " + t.name);
        t.value.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        is.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
        if (!is) throw WeightFileError(WeightFileError::Kind::Corrupt, "weight file truncated in " + t.name);
        file.tensors.push_back(std::move(t));
    }
    is.peek();
    if (!is.eof()) throw WeightFileError(WeightFileError::Kind::Corrupt, "trailing bytes in " + path);
    return file;
}

/// Copies tensors from `file` into `targets`, requiring names and shapes to match.
inline void assign_weights(const WeightFile& file, const std::vector<std::pair<std::string, Mat*>>& targets) {
    if (file.tensors.size() != targets.size())
        throw WeightFileError(WeightFileError::Kind::Shape, "weight file has " + std::to_string(file.tensors.size()) +
                                                                " tensors, model has " + std::to_string(targets.size()));
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& t = file.tensors[i];
        const Mat& dst = *targets[i].second;
        if (t.name != targets[i].first || t.value.rows() != dst.rows() || t.value.cols() != dst.cols())
            throw WeightFileError(WeightFileError::Kind::Shape,
                                  "tensor " + std::to_string(i) + ": file has " + t.name + " " +
                                      std::to_string(t.value.rows()) + "x" + std::to_string(t.value.cols()) +
                                      ", model expects " + targets[i].first + " " + std::to_string(dst.rows()) +
                                      "x" + std::to_string(dst.cols()));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) *targets[i].second = file.tensors[i].value;
}

}  // namespace slopegrasp::nn
