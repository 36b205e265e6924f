#pragma once

// Symbolic reverse-mode differentiation over dense row-major arrays.
//
// A Graph is an append-only list of nodes; a node only references earlier
// nodes, so index order is a topological order. gradient() walks the graph
// backwards and emits the adjoint computation as new nodes of the same
// graph. Those nodes can be evaluated, or (when the request is marked
// differentiable) differentiated once more, which is what a loss containing
// d(psi)/d(pose) needs when it is itself differentiated w.r.t. the weights.
//
// Depth bookkeeping: primal nodes have depth 0, nodes emitted by a gradient
// of a depth-d output have depth d+1. Gradients of depth-2 outputs are
// rejected. Non-differentiable gradient results are sealed at depth 2.

#include "slopegrasp/core.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace slopegrasp::ad {

class GraphError : public Error {
public:
    using Error::Error;
};

struct NodeId {
    std::uint32_t index = std::numeric_limits<std::uint32_t>::max();

    bool valid() const { return index != std::numeric_limits<std::uint32_t>::max(); }
    friend bool operator==(NodeId a, NodeId b) { return a.index == b.index; }
};

struct Shape {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }
    bool scalar() const { return rows == 1 && cols == 1; }
    friend bool operator==(Shape a, Shape b) { return a.rows == b.rows && a.cols == b.cols; }
};

inline std::string to_string(Shape s) {
    return std::to_string(s.rows) + "x" + std::to_string(s.cols);
}

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    AddRow,
    MatMul,
    Sum,
    Mean,
    RowSum,
    ColSum,
    BroadcastScalar,
    BroadcastCols,
    BroadcastRows,
    Elu,
    EluGrad,
    EluGrad2,
    Relu,
    Step,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    LogSumExp,
    Reshape,
    SliceCols,
    PadCols,
    ConcatCols,
    Map,
    MapVJP,
    MapJVP,
    MapHVP,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::AddRow: return "add_row";
        case Op::MatMul: return "matmul";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::RowSum: return "row_sum";
        case Op::ColSum: return "col_sum";
        case Op::BroadcastScalar: return "broadcast_scalar";
        case Op::BroadcastCols: return "broadcast_cols";
        case Op::BroadcastRows: return "broadcast_rows";
        case Op::Elu: return "elu";
        case Op::EluGrad: return "elu_grad";
        case Op::EluGrad2: return "elu_grad2";
        case Op::Relu: return "relu";
        case Op::Step: return "step";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::LogSumExp: return "logsumexp";
        case Op::Reshape: return "reshape";
        case Op::SliceCols: return "slice_cols";
        case Op::PadCols: return "pad_cols";
        case Op::ConcatCols: return "concat_cols";
        case Op::Map: return "map";
        case Op::MapVJP: return "map_vjp";
        case Op::MapJVP: return "map_jvp";
        case Op::MapHVP: return "map_hvp";
    }
    return "?";
}

/// A function applied independently to every row of its input. Used to embed
/// externally differentiated computations (the frozen scene field) in a graph.
class RowFunction {
public:
    virtual ~RowFunction() = default;
    virtual int input_dim() const = 0;
    virtual int output_dim() const = 0;
    virtual void value(const double* in, double* out) const = 0;
    /// Jacobian of one row, output_dim x input_dim.
    virtual void jacobian(const double* in, Mat& jac) const = 0;
    /// sum_k w_k * Hessian(f_k)(in) * v, written to out (input_dim).
    virtual void weighted_hessian_vector(const double* in, const double* w, const double* v,
                                         double* out) const = 0;
    virtual std::string name() const { return "row_function"; }
};

struct Node {
    Op op = Op::Constant;
    Shape shape;
    int depth = 0;
    std::array<NodeId, 3> in{};
    int arity = 0;
    double scalar = 0.0;
    Eigen::Index a = 0;
    Eigen::Index b = 0;
    bool ta = false;
    bool tb = false;
    std::shared_ptr<const Mat> constant;
    std::shared_ptr<const RowFunction> fn;
    std::string name;
};

inline constexpr int kMaxDepth = 2;

class Graph;

struct GradientRequest {
    NodeId output;
    std::vector<NodeId> wrt;
    bool differentiable = false;
};

std::vector<NodeId> gradient(Graph& g, const GradientRequest& req);

class Graph {
public:
    NodeId leaf(std::string name, Eigen::Index rows, Eigen::Index cols) {
        Node n;
        n.op = Op::Leaf;
        n.shape = {rows, cols};
        n.name = std::move(name);
        return push(std::move(n));
    }

    NodeId constant(Mat value) {
        Node n;
        n.op = Op::Constant;
        n.shape = {value.rows(), value.cols()};
        n.constant = std::make_shared<const Mat>(std::move(value));
        return push(std::move(n));
    }

    NodeId scalar_constant(double v) { return constant(Mat::Constant(1, 1, v)); }
    NodeId zeros(Shape s) { return constant(Mat::Zero(s.rows, s.cols)); }

    NodeId add(NodeId x, NodeId y) { return binary_same(Op::Add, x, y); }
    NodeId sub(NodeId x, NodeId y) { return binary_same(Op::Sub, x, y); }
    NodeId mul(NodeId x, NodeId y) { return binary_same(Op::Mul, x, y); }
    NodeId div(NodeId x, NodeId y) { return binary_same(Op::Div, x, y); }

    NodeId scale(NodeId x, double s) {
        Node n = unary(Op::Scale, x);
        n.scalar = s;
        return push(std::move(n));
    }
    NodeId neg(NodeId x) { return scale(x, -1.0); }

    NodeId add_scalar(NodeId x, double s) {
        Node n = unary(Op::AddScalar, x);
        n.scalar = s;
        return push(std::move(n));
    }

    /// matrix (n x m) + row vector (1 x m), broadcast over rows.
    NodeId add_row(NodeId m, NodeId row) {
        const Shape sm = shape(m), sr = shape(row);
        if (sr.rows != 1 || sr.cols != sm.cols)
            fail("add_row", "row " + to_string(sr) + " does not broadcast onto " + to_string(sm));
        Node n = binary(Op::AddRow, m, row);
        n.shape = sm;
        return push(std::move(n));
    }

    /// op(x) * op(y) with op = transpose when the flag is set.
    NodeId matmul(NodeId x, NodeId y, bool transpose_x = false, bool transpose_y = false) {
        const Shape sx = shape(x), sy = shape(y);
        const Eigen::Index r = transpose_x ? sx.cols : sx.rows;
        const Eigen::Index k1 = transpose_x ? sx.rows : sx.cols;
        const Eigen::Index k2 = transpose_y ? sy.cols : sy.rows;
        const Eigen::Index c = transpose_y ? sy.rows : sy.cols;
        if (k1 != k2)
            fail("matmul", "inner dimensions differ: " + to_string(sx) + (transpose_x ? "^T" : "") +
                               " * " + to_string(sy) + (transpose_y ? "^T" : ""));
        Node n = binary(Op::MatMul, x, y);
        n.ta = transpose_x;
        n.tb = transpose_y;
        n.shape = {r, c};
        return push(std::move(n));
    }

    NodeId sum(NodeId x) { return reduce(Op::Sum, x, {1, 1}); }
    NodeId mean(NodeId x) { return reduce(Op::Mean, x, {1, 1}); }
    NodeId row_sum(NodeId x) { return reduce(Op::RowSum, x, {shape(x).rows, 1}); }
    NodeId col_sum(NodeId x) { return reduce(Op::ColSum, x, {1, shape(x).cols}); }

    NodeId broadcast_scalar(NodeId s, Shape to) {
        if (!shape(s).scalar()) fail("broadcast_scalar", "input is " + to_string(shape(s)));
        Node n = unary(Op::BroadcastScalar, s);
        n.shape = to;
        return push(std::move(n));
    }
    NodeId broadcast_cols(NodeId column, Eigen::Index cols) {
        if (shape(column).cols != 1) fail("broadcast_cols", "input is " + to_string(shape(column)));
        Node n = unary(Op::BroadcastCols, column);
        n.shape = {shape(column).rows, cols};
        return push(std::move(n));
    }
    NodeId broadcast_rows(NodeId row, Eigen::Index rows) {
        if (shape(row).rows != 1) fail("broadcast_rows", "input is " + to_string(shape(row)));
        Node n = unary(Op::BroadcastRows, row);
        n.shape = {rows, shape(row).cols};
        return push(std::move(n));
    }

    NodeId elu(NodeId x) { return push(unary(Op::Elu, x)); }
    NodeId relu(NodeId x) { return push(unary(Op::Relu, x)); }
    NodeId sin(NodeId x) { return push(unary(Op::Sin, x)); }
    NodeId cos(NodeId x) { return push(unary(Op::Cos, x)); }
    NodeId exp(NodeId x) { return push(unary(Op::Exp, x)); }
    NodeId log(NodeId x) { return push(unary(Op::Log, x)); }
    NodeId sqrt(NodeId x) { return push(unary(Op::Sqrt, x)); }

    /// log(sum(exp(x))) over every entry, evaluated with max subtraction.
    NodeId logsumexp(NodeId x) { return reduce(Op::LogSumExp, x, {1, 1}); }

    NodeId reshape(NodeId x, Eigen::Index rows, Eigen::Index cols) {
        if (rows * cols != shape(x).size())
            fail("reshape", to_string(shape(x)) + " cannot become " + std::to_string(rows) + "x" +
                                std::to_string(cols));
        Node n = unary(Op::Reshape, x);
        n.shape = {rows, cols};
        return push(std::move(n));
    }

    NodeId slice_cols(NodeId x, Eigen::Index start, Eigen::Index count) {
        if (start < 0 || count < 1 || start + count > shape(x).cols)
            fail("slice_cols", "columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                   ") outside " + to_string(shape(x)));
        Node n = unary(Op::SliceCols, x);
        n.a = start;
        n.b = count;
        n.shape = {shape(x).rows, count};
        return push(std::move(n));
    }

    NodeId pad_cols(NodeId x, Eigen::Index total, Eigen::Index start) {
        if (start < 0 || start + shape(x).cols > total)
            fail("pad_cols", to_string(shape(x)) + " does not fit at column " + std::to_string(start));
        Node n = unary(Op::PadCols, x);
        n.a = start;
        n.b = total;
        n.shape = {shape(x).rows, total};
        return push(std::move(n));
    }

    NodeId concat_cols(NodeId x, NodeId y) {
        if (shape(x).rows != shape(y).rows)
            fail("concat_cols", to_string(shape(x)) + " vs " + to_string(shape(y)));
        Node n = binary(Op::ConcatCols, x, y);
        n.shape = {shape(x).rows, shape(x).cols + shape(y).cols};
        return push(std::move(n));
    }

    /// Applies fn to each row of x.
    NodeId map(std::shared_ptr<const RowFunction> fn, NodeId x) {
        if (shape(x).cols != fn->input_dim())
            fail("map", fn->name() + " expects " + std::to_string(fn->input_dim()) + " columns, got " +
                            to_string(shape(x)));
        Node n = unary(Op::Map, x);
        n.shape = {shape(x).rows, fn->output_dim()};
        n.fn = std::move(fn);
        return push(std::move(n));
    }

    // Derivative primitives; normally only emitted by gradient().
    NodeId elu_grad(NodeId x) { return push(unary(Op::EluGrad, x)); }
    NodeId elu_grad2(NodeId x) { return push(unary(Op::EluGrad2, x)); }
    NodeId step(NodeId x) { return push(unary(Op::Step, x)); }

    /// Rows of J(x)^T a for a Map node's function.
    NodeId map_vjp(std::shared_ptr<const RowFunction> fn, NodeId x, NodeId a) {
        if (shape(a).rows != shape(x).rows || shape(a).cols != fn->output_dim())
            fail("map_vjp", "adjoint " + to_string(shape(a)));
        const Shape s{shape(x).rows, fn->input_dim()};
        return push_map_family(Op::MapVJP, std::move(fn), {x, a, {}}, 2, s);
    }
    /// Rows of J(x) v.
    NodeId map_jvp(std::shared_ptr<const RowFunction> fn, NodeId x, NodeId v) {
        if (!(shape(v) == shape(x))) fail("map_jvp", "tangent " + to_string(shape(v)));
        const Shape s{shape(x).rows, fn->output_dim()};
        return push_map_family(Op::MapJVP, std::move(fn), {x, v, {}}, 2, s);
    }
    /// Rows of sum_k a_k H_k(x) v.
    NodeId map_hvp(std::shared_ptr<const RowFunction> fn, NodeId x, NodeId a, NodeId v) {
        if (!(shape(v) == shape(x))) fail("map_hvp", "tangent " + to_string(shape(v)));
        const Shape s{shape(x).rows, fn->input_dim()};
        return push_map_family(Op::MapHVP, std::move(fn), {x, a, v}, 3, s);
    }

    const Node& node(NodeId id) const {
        if (!id.valid() || id.index >= nodes_.size())
            throw GraphError("invalid node reference #" + std::to_string(id.index));
        return nodes_[id.index];
    }
    Shape shape(NodeId id) const { return node(id).shape; }
    std::size_t size() const { return nodes_.size(); }

    std::string describe(NodeId id) const {
        const Node& n = node(id);
        std::string s = "#" + std::to_string(id.index) + " (" + op_name(n.op);
        if (!n.name.empty()) s += " '" + n.name + "'";
        return s + ", " + to_string(n.shape) + ")";
    }

private:
    friend std::vector<NodeId> gradient(Graph& g, const GradientRequest& req);

    [[noreturn]] void fail(const std::string& op, const std::string& what) const {
        throw GraphError("shape mismatch building " + op + " node #" + std::to_string(nodes_.size()) +
                         ": " + what);
    }

    Node unary(Op op, NodeId x) {
        Node n;
        n.op = op;
        n.in[0] = x;
        n.arity = 1;
        n.shape = shape(x);
        return n;
    }

    Node binary(Op op, NodeId x, NodeId y) {
        Node n;
        n.op = op;
        n.in[0] = x;
        n.in[1] = y;
        n.arity = 2;
        n.shape = shape(x);
        return n;
    }

    NodeId binary_same(Op op, NodeId x, NodeId y) {
        if (!(shape(x) == shape(y)))
            fail(op_name(op), describe(x) + " vs " + describe(y));
        return push(binary(op, x, y));
    }

    NodeId reduce(Op op, NodeId x, Shape to) {
        Node n = unary(op, x);
        n.shape = to;
        return push(std::move(n));
    }

    NodeId push_map_family(Op op, std::shared_ptr<const RowFunction> fn, std::array<NodeId, 3> in, int arity,
                           Shape s) {
        Node n;
        n.op = op;
        n.in = in;
        n.arity = arity;
        n.shape = s;
        n.fn = std::move(fn);
        return push(std::move(n));
    }

    NodeId push(Node n) {
        int depth = depth_floor_;
        for (int i = 0; i < n.arity; ++i) depth = std::max(depth, node(n.in[i]).depth);
        n.depth = depth;
        nodes_.push_back(std::move(n));
        return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
    int depth_floor_ = 0;
};

/// Values for leaf nodes.
class Bindings {
public:
    void bind(NodeId leaf, Mat value) { values_[leaf.index] = std::move(value); }
    const Mat* find(NodeId leaf) const {
        auto it = values_.find(leaf.index);
        return it == values_.end() ? nullptr : &it->second;
    }
    Mat& at(NodeId leaf) {
        auto it = values_.find(leaf.index);
        if (it == values_.end()) throw GraphError("leaf #" + std::to_string(leaf.index) + " is not bound");
        return it->second;
    }

private:
    std::unordered_map<std::uint32_t, Mat> values_;
};

/// Memoized evaluation of a graph under fixed bindings. Values of every node
/// computed on the way are kept, so evaluating a loss and then its gradient
/// nodes shares the forward pass.
class Evaluation {
public:
    Evaluation(const Graph& g, const Bindings& bindings) : g_(g), bindings_(bindings) {}

    const Mat& value(NodeId root) {
        compute({&root, 1});
        return *memo_[root.index];
    }

    std::vector<Mat> values(std::span<const NodeId> roots) {
        compute(roots);
        std::vector<Mat> out;
        out.reserve(roots.size());
        for (NodeId r : roots) out.push_back(*memo_[r.index]);
        return out;
    }

private:
    void compute(std::span<const NodeId> roots) {
        if (memo_.size() < g_.size()) memo_.resize(g_.size());
        std::vector<std::uint32_t> stack;
        std::vector<char> needed(g_.size(), 0);
        std::uint32_t lo = std::numeric_limits<std::uint32_t>::max(), hi = 0;
        for (NodeId r : roots) {
            g_.node(r);
            stack.push_back(r.index);
        }
        while (!stack.empty()) {
            const std::uint32_t i = stack.back();
            stack.pop_back();
            if (needed[i] || memo_[i]) continue;
            needed[i] = 1;
            lo = std::min(lo, i);
            hi = std::max(hi, i);
            const Node& n = g_.node(NodeId{i});
            for (int k = 0; k < n.arity; ++k) stack.push_back(n.in[k].index);
        }
        if (lo > hi) return;
        for (std::uint32_t i = lo; i <= hi; ++i)
            if (needed[i]) memo_[i] = eval_node(NodeId{i});
    }

    const Mat& in(const Node& n, int k) const { return *memo_[n.in[k].index]; }

    const std::vector<Mat>& jacobians(const Node& n) {
        const auto key = std::make_pair(n.in[0].index, static_cast<const void*>(n.fn.get()));
        auto it = jac_cache_.find(key);
        if (it != jac_cache_.end()) return it->second;
        const Mat& x = in(n, 0);
        std::vector<Mat> jacs(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            jacs[r].resize(n.fn->output_dim(), n.fn->input_dim());
            n.fn->jacobian(x.row(r).data(), jacs[r]);
        }
        return jac_cache_.emplace(key, std::move(jacs)).first->second;
    }

    Mat eval_node(NodeId id) {
        const Node& n = g_.node(id);
        switch (n.op) {
            case Op::Leaf: {
                const Mat* v = bindings_.find(id);
                if (!v) throw GraphError("unbound leaf " + g_.describe(id));
                if (v->rows() != n.shape.rows || v->cols() != n.shape.cols)
                    throw GraphError("shape mismatch binding leaf " + g_.describe(id) + ": got " +
                                     std::to_string(v->rows()) + "x" + std::to_string(v->cols()));
                return *v;
            }
            case Op::Constant: return *n.constant;
            case Op::Add: return in(n, 0) + in(n, 1);
            case Op::Sub: return in(n, 0) - in(n, 1);
            case Op::Mul: return in(n, 0).cwiseProduct(in(n, 1));
            case Op::Div: return in(n, 0).cwiseQuotient(in(n, 1));
            case Op::Scale: return in(n, 0) * n.scalar;
            case Op::AddScalar: return (in(n, 0).array() + n.scalar).matrix();
            case Op::AddRow: return in(n, 0).rowwise() + in(n, 1).row(0);
            case Op::MatMul: {
                const Mat& x = in(n, 0);
                const Mat& y = in(n, 1);
                Mat r(n.shape.rows, n.shape.cols);
                if (!n.ta && !n.tb) r.noalias() = x * y;
                else if (!n.ta && n.tb) r.noalias() = x * y.transpose();
                else if (n.ta && !n.tb) r.noalias() = x.transpose() * y;
                else r.noalias() = x.transpose() * y.transpose();
                return r;
            }
            case Op::Sum: return Mat::Constant(1, 1, in(n, 0).sum());
            case Op::Mean: return Mat::Constant(1, 1, in(n, 0).mean());
            case Op::RowSum: return in(n, 0).rowwise().sum();
            case Op::ColSum: return in(n, 0).colwise().sum();
            case Op::BroadcastScalar: return Mat::Constant(n.shape.rows, n.shape.cols, in(n, 0)(0, 0));
            case Op::BroadcastCols: return in(n, 0).replicate(1, n.shape.cols);
            case Op::BroadcastRows: return in(n, 0).replicate(n.shape.rows, 1);
            case Op::Elu:
                return in(n, 0).unaryExpr([](double x) { return x > 0.0 ? x : std::expm1(x); });
            case Op::EluGrad:
                return in(n, 0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : std::exp(x); });
            case Op::EluGrad2:
                return in(n, 0).unaryExpr([](double x) { return x > 0.0 ? 0.0 : std::exp(x); });
            case Op::Relu: return in(n, 0).cwiseMax(0.0);
            case Op::Step: return in(n, 0).unaryExpr([](double x) { return x > 0.0 ? 1.0 : 0.0; });
            case Op::Sin: return in(n, 0).array().sin().matrix();
            case Op::Cos: return in(n, 0).array().cos().matrix();
            case Op::Exp: return in(n, 0).array().exp().matrix();
            case Op::Log: return in(n, 0).array().log().matrix();
            case Op::Sqrt: return in(n, 0).array().sqrt().matrix();
            case Op::LogSumExp: {
                const Mat& x = in(n, 0);
                const double m = x.maxCoeff();
                if (!std::isfinite(m)) return Mat::Constant(1, 1, m);
                return Mat::Constant(1, 1, m + std::log((x.array() - m).exp().sum()));
            }
            case Op::Reshape: {
                const Mat& x = in(n, 0);
                return Eigen::Map<const Mat>(x.data(), n.shape.rows, n.shape.cols);
            }
            case Op::SliceCols: return in(n, 0).middleCols(n.a, n.b);
            case Op::PadCols: {
                Mat r = Mat::Zero(n.shape.rows, n.shape.cols);
                r.middleCols(n.a, in(n, 0).cols()) = in(n, 0);
                return r;
            }
            case Op::ConcatCols: {
                Mat r(n.shape.rows, n.shape.cols);
                r << in(n, 0), in(n, 1);
                return r;
            }
            case Op::Map: {
                const Mat& x = in(n, 0);
                Mat r(n.shape.rows, n.shape.cols);
                for (Eigen::Index i = 0; i < x.rows(); ++i) n.fn->value(x.row(i).data(), r.row(i).data());
                return r;
            }
            case Op::MapVJP: {
                const auto& jacs = jacobians(n);
                const Mat& adj = in(n, 1);
                Mat r(n.shape.rows, n.shape.cols);
                for (Eigen::Index i = 0; i < r.rows(); ++i)
                    r.row(i).noalias() = adj.row(i) * jacs[i];
                return r;
            }
            case Op::MapJVP: {
                const auto& jacs = jacobians(n);
                const Mat& v = in(n, 1);
                Mat r(n.shape.rows, n.shape.cols);
                for (Eigen::Index i = 0; i < r.rows(); ++i)
                    r.row(i).noalias() = v.row(i) * jacs[i].transpose();
                return r;
            }
            case Op::MapHVP: {
                const Mat& x = in(n, 0);
                const Mat& w = in(n, 1);
                const Mat& v = in(n, 2);
                Mat r(n.shape.rows, n.shape.cols);
                for (Eigen::Index i = 0; i < r.rows(); ++i)
                    n.fn->weighted_hessian_vector(x.row(i).data(), w.row(i).data(), v.row(i).data(),
                                                  r.row(i).data());
                return r;
            }
        }
        throw GraphError("unknown op at " + g_.describe(id));
    }

    const Graph& g_;
    const Bindings& bindings_;
    std::vector<std::optional<Mat>> memo_;
    std::map<std::pair<std::uint32_t, const void*>, std::vector<Mat>> jac_cache_;
};

inline Mat evaluate(const Graph& g, NodeId root, const Bindings& bindings) {
    Evaluation e(g, bindings);
    return e.value(root);
}

namespace detail {

// Emits the adjoint contributions of node `id` given its adjoint `adj`.
// `emit(k, contribution)` receives the contribution for input slot k.
template <class Emit>
void backward(Graph& g, NodeId id, NodeId adj, const std::vector<char>& wants, Emit&& emit) {
    const Node n = g.node(id);  // copy: g grows while we emit
    auto want = [&](int k) { return wants[n.in[k].index] != 0; };
    switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
        case Op::Step:
            return;
        case Op::Add:
            if (want(0)) emit(0, adj);
            if (want(1)) emit(1, adj);
            return;
        case Op::Sub:
            if (want(0)) emit(0, adj);
            if (want(1)) emit(1, g.neg(adj));
            return;
        case Op::Mul:
            if (want(0)) emit(0, g.mul(adj, n.in[1]));
            if (want(1)) emit(1, g.mul(adj, n.in[0]));
            return;
        case Op::Div:
            if (want(0)) emit(0, g.div(adj, n.in[1]));
            if (want(1)) emit(1, g.neg(g.div(g.mul(adj, id), n.in[1])));
            return;
        case Op::Scale:
            emit(0, g.scale(adj, n.scalar));
            return;
        case Op::AddScalar:
            emit(0, adj);
            return;
        case Op::AddRow:
            if (want(0)) emit(0, adj);
            if (want(1)) emit(1, g.col_sum(adj));
            return;
        case Op::MatMul: {
            const NodeId x = n.in[0], y = n.in[1];
            if (!n.ta && !n.tb) {
                if (want(0)) emit(0, g.matmul(adj, y, false, true));
                if (want(1)) emit(1, g.matmul(x, adj, true, false));
            } else if (!n.ta && n.tb) {
                if (want(0)) emit(0, g.matmul(adj, y, false, false));
                if (want(1)) emit(1, g.matmul(adj, x, true, false));
            } else if (n.ta && !n.tb) {
                if (want(0)) emit(0, g.matmul(y, adj, false, true));
                if (want(1)) emit(1, g.matmul(x, adj, false, false));
            } else {
                if (want(0)) emit(0, g.matmul(y, adj, true, true));
                if (want(1)) emit(1, g.matmul(adj, x, true, true));
            }
            return;
        }
        case Op::Sum:
            emit(0, g.broadcast_scalar(adj, g.shape(n.in[0])));
            return;
        case Op::Mean:
            emit(0, g.scale(g.broadcast_scalar(adj, g.shape(n.in[0])),
                            1.0 / static_cast<double>(g.shape(n.in[0]).size())));
            return;
        case Op::RowSum:
            emit(0, g.broadcast_cols(adj, g.shape(n.in[0]).cols));
            return;
        case Op::ColSum:
            emit(0, g.broadcast_rows(adj, g.shape(n.in[0]).rows));
            return;
        case Op::BroadcastScalar:
            emit(0, g.sum(adj));
            return;
        case Op::BroadcastCols:
            emit(0, g.row_sum(adj));
            return;
        case Op::BroadcastRows:
            emit(0, g.col_sum(adj));
            return;
        case Op::Elu:
            emit(0, g.mul(adj, g.elu_grad(n.in[0])));
            return;
        case Op::EluGrad:
            emit(0, g.mul(adj, g.elu_grad2(n.in[0])));
            return;
        case Op::Relu:
            emit(0, g.mul(adj, g.step(n.in[0])));
            return;
        case Op::Sin:
            emit(0, g.mul(adj, g.cos(n.in[0])));
            return;
        case Op::Cos:
            emit(0, g.neg(g.mul(adj, g.sin(n.in[0]))));
            return;
        case Op::Exp:
            emit(0, g.mul(adj, id));
            return;
        case Op::Log:
            emit(0, g.div(adj, n.in[0]));
            return;
        case Op::Sqrt:
            emit(0, g.div(adj, g.scale(id, 2.0)));
            return;
        case Op::LogSumExp: {
            const Shape s = g.shape(n.in[0]);
            const NodeId softmax = g.exp(g.sub(n.in[0], g.broadcast_scalar(id, s)));
            emit(0, g.mul(g.broadcast_scalar(adj, s), softmax));
            return;
        }
        case Op::Reshape: {
            const Shape s = g.shape(n.in[0]);
            emit(0, g.reshape(adj, s.rows, s.cols));
            return;
        }
        case Op::SliceCols:
            emit(0, g.pad_cols(adj, g.shape(n.in[0]).cols, n.a));
            return;
        case Op::PadCols:
            emit(0, g.slice_cols(adj, n.a, g.shape(n.in[0]).cols));
            return;
        case Op::ConcatCols: {
            const Eigen::Index c0 = g.shape(n.in[0]).cols, c1 = g.shape(n.in[1]).cols;
            if (want(0)) emit(0, g.slice_cols(adj, 0, c0));
            if (want(1)) emit(1, g.slice_cols(adj, c0, c1));
            return;
        }
        case Op::Map:
            emit(0, g.map_vjp(n.fn, n.in[0], adj));
            return;
        case Op::MapVJP:
            // out_i = J(x_i)^T a_i
            if (want(1)) emit(1, g.map_jvp(n.fn, n.in[0], adj));
            if (want(0)) emit(0, g.map_hvp(n.fn, n.in[0], n.in[1], adj));
            return;
        case Op::EluGrad2:
        case Op::MapJVP:
        case Op::MapHVP:
            break;
    }
    throw GraphError(std::string("no derivative rule for ") + op_name(n.op) + " at " + g.describe(id));
}

}  // namespace detail

inline std::vector<NodeId> gradient(Graph& g, const GradientRequest& req) {
    const Node& out = g.node(req.output);
    if (!out.shape.scalar())
        throw GraphError("gradient output must be scalar, got " + g.describe(req.output));
    const int depth = out.depth + 1;
    if (depth > kMaxDepth)
        throw GraphError("gradient depth " + std::to_string(depth) + " requested for " + g.describe(req.output) +
                         "; at most " + std::to_string(kMaxDepth) + " nested gradients are supported");

    const std::uint32_t top = req.output.index;
    std::vector<char> depends(top + 1, 0);
    for (NodeId w : req.wrt) {
        g.node(w);
        if (w.index <= top) depends[w.index] = 1;
    }
    for (std::uint32_t i = 0; i <= top; ++i) {
        if (depends[i]) continue;
        const Node& n = g.node(NodeId{i});
        for (int k = 0; k < n.arity; ++k)
            if (depends[n.in[k].index]) {
                depends[i] = 1;
                break;
            }
    }
    std::vector<char> on_path(top + 1, 0);
    on_path[top] = depends[top];
    for (std::uint32_t i = top + 1; i-- > 0;) {
        if (!on_path[i]) continue;
        const Node& n = g.node(NodeId{i});
        for (int k = 0; k < n.arity; ++k)
            if (depends[n.in[k].index]) on_path[n.in[k].index] = 1;
    }

    struct FloorGuard {
        Graph& g;
        int saved;
        ~FloorGuard() { g.depth_floor_ = saved; }
    } guard{g, g.depth_floor_};
    g.depth_floor_ = req.differentiable ? depth : kMaxDepth;

    std::vector<NodeId> adjoint(top + 1);
    if (on_path[top]) adjoint[top] = g.scalar_constant(1.0);
    for (std::uint32_t i = top + 1; i-- > 0;) {
        if (!on_path[i] || !adjoint[i].valid()) continue;
        const NodeId id{i};
        const Node& n = g.node(id);
        std::array<NodeId, 3> inputs = n.in;
        detail::backward(g, id, adjoint[i], on_path, [&](int k, NodeId contribution) {
            NodeId& slot = adjoint[inputs[k].index];
            slot = slot.valid() ? g.add(slot, contribution) : contribution;
        });
    }

    std::vector<NodeId> result;
    result.reserve(req.wrt.size());
    for (NodeId w : req.wrt) {
        if (w.index <= top && adjoint[w.index].valid()) result.push_back(adjoint[w.index]);
        else result.push_back(g.zeros(g.shape(w)));
    }
    return result;
}

/// Compares the analytic gradient of `root` w.r.t. the leaves `wrt` with
/// central differences of step h and returns the worst relative error.
/// Components where both values are below 1e-12 are skipped; denominators
/// are floored at 1e-6 times the largest analytic component.
inline double finite_difference_check(Graph& g, NodeId root, std::span<const NodeId> wrt, const Bindings& bindings,
                                      double h) {
    require(h > 0.0, "finite_difference_check: step must be positive");
    for (NodeId w : wrt)
        if (g.node(w).op != Op::Leaf) throw GraphError("finite_difference_check: " + g.describe(w) + " is not a leaf");
    const auto grads = gradient(g, {root, {wrt.begin(), wrt.end()}, false});
    Evaluation eval(g, bindings);
    std::vector<Mat> analytic = eval.values(grads);

    double scale = 0.0;
    for (const Mat& a : analytic) scale = std::max(scale, a.cwiseAbs().maxCoeff());
    const double floor = 1e-6 * scale;

    Bindings probe = bindings;
    double worst = 0.0;
    for (std::size_t k = 0; k < wrt.size(); ++k) {
        Mat& x = probe.at(wrt[k]);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double saved = x.data()[i];
            x.data()[i] = saved + h;
            const double up = evaluate(g, root, probe)(0, 0);
            x.data()[i] = saved - h;
            const double down = evaluate(g, root, probe)(0, 0);
            x.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[k].data()[i];
            if (std::abs(a) < 1e-12 && std::abs(numeric) < 1e-12) continue;
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

// Composite helpers built from primitives. All work row-wise: an n x m input
// yields an n x 1 result.

inline NodeId dot(Graph& g, NodeId x, NodeId y) { return g.row_sum(g.mul(x, y)); }

inline NodeId l2_norm(Graph& g, NodeId x, double eps = 1e-12) {
    return g.sqrt(g.add_scalar(g.row_sum(g.mul(x, x)), eps * eps));
}

inline NodeId cosine_similarity(Graph& g, NodeId x, NodeId y, double eps = 1e-12) {
    return g.div(dot(g, x, y), g.mul(l2_norm(g, x, eps), l2_norm(g, y, eps)));
}

/// Per-column sin/cos features, matching pose::positional_encode ordering.
inline NodeId positional_encoding(Graph& g, NodeId x, int frequencies) {
    require(frequencies >= 1, "positional_encoding: frequency count must be >= 1");
    const Eigen::Index cols = g.shape(x).cols;
    NodeId out;
    for (Eigen::Index c = 0; c < cols; ++c) {
        const NodeId column = g.slice_cols(x, c, 1);
        for (int k = 0; k < frequencies; ++k) {
            const NodeId arg = g.scale(column, std::ldexp(M_PI, k));
            const NodeId pair = g.concat_cols(g.sin(arg), g.cos(arg));
            out = out.valid() ? g.concat_cols(out, pair) : pair;
        }
    }
    return out;
}

}  // namespace slopegrasp::ad
