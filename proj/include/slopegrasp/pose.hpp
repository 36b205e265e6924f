#pragma once

// Pose representations, retraction, the representation difference, partial
// pose decomposition and positional encoding.
//
// Gripper frame: the approach axis is local -z, fingers close along local x
// and extend up along local +z from the tool center point.

#include "slopegrasp/core.hpp"
#include "slopegrasp/dual.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace slopegrasp {

class DegenerateOrientation : public Error {
public:
    using Error::Error;
};

enum class Representation { Quat, SixD };

inline std::string to_string(Representation r) { return r == Representation::Quat ? "quat" : "6d"; }

inline Representation parse_representation(const std::string& s) {
    if (s == "quat") return Representation::Quat;
    if (s == "6d") return Representation::SixD;
    throw ConfigError("unknown pose representation '" + s + "' (expected quat or 6d)");
}

/// Length of the flat representation vector.
inline int pose_dim(Representation r) { return r == Representation::Quat ? 7 : 9; }

struct PartRange {
    int start;
    int length;
};

/// Position first, then orientation parts (one for quaternions, two columns for 6D).
inline std::vector<PartRange> pose_parts(Representation r) {
    if (r == Representation::Quat) return {{0, 3}, {3, 4}};
    return {{0, 3}, {3, 3}, {6, 3}};
}

inline int part_count(Representation r) { return r == Representation::Quat ? 2 : 3; }

struct PoseQ {
    Vec3 position = Vec3::Zero();
    Vec4 orientation{1.0, 0.0, 0.0, 0.0};  // w, x, y, z
};

struct Pose6D {
    Vec3 position = Vec3::Zero();
    Vec3 col1 = Vec3::UnitX();
    Vec3 col2 = Vec3::UnitY();
};

using Pose = std::variant<PoseQ, Pose6D>;

inline Representation representation(const Pose& p) {
    return std::holds_alternative<PoseQ>(p) ? Representation::Quat : Representation::SixD;
}

inline const Vec3& position(const Pose& p) {
    return std::visit([](const auto& v) -> const Vec3& { return v.position; }, p);
}

// ---------------------------------------------------------------------------
// Rotations

inline Mat3 rotation_from_quat(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

inline Vec4 canonicalize(Vec4 q) {
    bool flip = q[0] < 0.0;
    if (q[0] == 0.0) {
        for (int i = 1; i < 4; ++i)
            if (q[i] != 0.0) {
                flip = q[i] < 0.0;
                break;
            }
    }
    return flip ? Vec4(-q) : q;
}

inline Vec4 quat_from_matrix(const Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    return canonicalize(Vec4(q.w(), q.x(), q.y(), q.z()));
}

inline Vec4 quat_multiply(const Vec4& a, const Vec4& b) {
    return Vec4(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

inline Vec4 quat_from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized() * std::sin(0.5 * angle);
    return Vec4(std::cos(0.5 * angle), a.x(), a.y(), a.z());
}

inline Mat3 rotation(const Pose& p) {
    if (const auto* q = std::get_if<PoseQ>(&p)) return rotation_from_quat(q->orientation.normalized());
    const auto& s = std::get<Pose6D>(p);
    Mat3 r;
    r.col(0) = s.col1;
    r.col(1) = s.col2;
    r.col(2) = s.col1.cross(s.col2);
    return r;
}

inline Pose make_pose(const Vec3& t, const Mat3& r, Representation rep) {
    if (rep == Representation::Quat) return PoseQ{t, quat_from_matrix(r)};
    return Pose6D{t, r.col(0), r.col(1)};
}

inline Pose convert(const Pose& p, Representation rep) {
    if (representation(p) == rep) return p;
    return make_pose(position(p), rotation(p), rep);
}

/// Uniformly distributed rotation (Shoemake's subgroup algorithm).
inline Vec4 uniform_quaternion(Rng& rng) {
    const double u1 = uniform(rng, 0.0, 1.0), u2 = uniform(rng, 0.0, 1.0), u3 = uniform(rng, 0.0, 1.0);
    const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
    const double t1 = 2.0 * std::numbers::pi * u2, t2 = 2.0 * std::numbers::pi * u3;
    return canonicalize(Vec4(b * std::cos(t2), a * std::sin(t1), a * std::cos(t1), b * std::sin(t2)));
}

// ---------------------------------------------------------------------------
// Flat vectors

inline Vec to_vector(const Pose& p) {
    Vec v(pose_dim(representation(p)));
    if (const auto* q = std::get_if<PoseQ>(&p)) {
        v << q->position, q->orientation;
    } else {
        const auto& s = std::get<Pose6D>(p);
        v << s.position, s.col1, s.col2;
    }
    return v;
}

inline Pose from_vector(const double* v, Representation rep) {
    if (rep == Representation::Quat) return PoseQ{Vec3(v[0], v[1], v[2]), Vec4(v[3], v[4], v[5], v[6])};
    return Pose6D{Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5]), Vec3(v[6], v[7], v[8])};
}

inline Pose from_vector(const Vec& v, Representation rep) {
    require(v.size() == pose_dim(rep), "from_vector: expected " + std::to_string(pose_dim(rep)) + " entries");
    return from_vector(v.data(), rep);
}

/// One pose per row.
inline Mat to_matrix(const std::vector<Pose>& poses) {
    require(!poses.empty(), "to_matrix: no poses");
    const Representation rep = representation(poses.front());
    Mat m(static_cast<Eigen::Index>(poses.size()), pose_dim(rep));
    for (std::size_t i = 0; i < poses.size(); ++i) {
        require(representation(poses[i]) == rep, "to_matrix: mixed representations");
        m.row(static_cast<Eigen::Index>(i)) = to_vector(poses[i]).transpose();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Retraction and validity

inline PoseQ retract(const PoseQ& p) {
    const double n = p.orientation.norm();
    if (!(n > 1e-8) || !std::isfinite(n)) throw DegenerateOrientation("quaternion norm " + std::to_string(n));
    return PoseQ{p.position, canonicalize(p.orientation / n)};
}

inline Pose6D retract(const Pose6D& p) {
    const double n1 = p.col1.norm();
    if (!(n1 > 1e-8) || !std::isfinite(n1)) throw DegenerateOrientation("6d first column norm " + std::to_string(n1));
    const Vec3 c1 = p.col1 / n1;
    const Vec3 c2raw = p.col2 - c1.dot(p.col2) * c1;
    const double n2 = c2raw.norm();
    if (!(n2 > 1e-8) || !std::isfinite(n2))
        throw DegenerateOrientation("6d columns parallel (residual norm " + std::to_string(n2) + ")");
    return Pose6D{p.position, c1, c2raw / n2};
}

inline Pose retract(const Pose& p) {
    return std::visit([](const auto& v) -> Pose { return retract(v); }, p);
}

inline bool is_valid(const Pose& p, double tol = 1e-9) {
    if (!position(p).allFinite()) return false;
    if (const auto* q = std::get_if<PoseQ>(&p)) {
        const Vec4& o = q->orientation;
        return o.allFinite() && std::abs(o.norm() - 1.0) <= tol && canonicalize(o) == o;
    }
    const auto& s = std::get<Pose6D>(p);
    return s.col1.allFinite() && s.col2.allFinite() && std::abs(s.col1.norm() - 1.0) <= tol &&
           std::abs(s.col2.norm() - 1.0) <= tol && std::abs(s.col1.dot(s.col2)) <= tol;
}

// ---------------------------------------------------------------------------
// Representation difference and per-part cosine

/// Component-wise a - b over the flat representation; parts per pose_parts().
struct PoseDelta {
    Representation rep = Representation::Quat;
    Vec values;

    Eigen::VectorBlock<const Vec> part(int k) const {
        const auto r = pose_parts(rep).at(static_cast<std::size_t>(k));
        return values.segment(r.start, r.length);
    }
};

inline PoseDelta ominus(const Pose& a, const Pose& b) {
    if (representation(a) != representation(b)) throw ConfigError("ominus: mixed pose representations");
    Vec va = to_vector(a), vb = to_vector(b);
    if (representation(a) == Representation::Quat) {
        va.segment<4>(3) = canonicalize(va.segment<4>(3));
        vb.segment<4>(3) = canonicalize(vb.segment<4>(3));
    }
    return PoseDelta{representation(a), va - vb};
}

/// Sum over parts of cos(delta_part, grad_part). Orientation parts are
/// scaled by orientation_weight. A zero-norm part contributes 0.
inline double part_cosine(const Vec& delta, const Vec& grad, Representation rep, double orientation_weight = 1.0) {
    require(delta.size() == pose_dim(rep) && grad.size() == pose_dim(rep), "part_cosine: shape mismatch");
    constexpr double eps = 1e-12;
    double total = 0.0;
    const auto parts = pose_parts(rep);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Vec d = delta.segment(parts[k].start, parts[k].length);
        const Vec g = grad.segment(parts[k].start, parts[k].length);
        const double c =
            d.dot(g) / (std::sqrt(d.squaredNorm() + eps * eps) * std::sqrt(g.squaredNorm() + eps * eps));
        total += (k == 0 ? 1.0 : orientation_weight) * c;
    }
    return total;
}

inline double part_cosine(const PoseDelta& delta, const Vec& grad, double orientation_weight = 1.0) {
    return part_cosine(delta.values, grad, delta.rep, orientation_weight);
}

// ---------------------------------------------------------------------------
// Partial pose decomposition

struct SupportPose {
    Vec3 point;
    Vec3 direction;
};

struct PpdEntry {
    Vec3 offset;
    Vec3 direction;
};

struct PPDConfig {
    std::vector<PpdEntry> entries;

    void validate() const {
        require(!entries.empty(), "ppd: at least one support pose is required");
        for (const auto& e : entries)
            require(e.offset.allFinite() && std::abs(e.direction.norm() - 1.0) <= 1e-9,
                    "ppd: support directions must be unit vectors");
    }

    /// TCP center along the approach axis, plus two finger pairs at
    /// +-half_width with inward directions, the second pair raised by finger_rise.
    static PPDConfig gripper(double half_width = 0.07, double finger_rise = 0.03) {
        PPDConfig c;
        c.entries = {
            {Vec3(0, 0, 0), Vec3(0, 0, -1)},
            {Vec3(half_width, 0, 0), Vec3(-1, 0, 0)},
            {Vec3(-half_width, 0, 0), Vec3(1, 0, 0)},
            {Vec3(half_width, 0, finger_rise), Vec3(-1, 0, 0)},
            {Vec3(-half_width, 0, finger_rise), Vec3(1, 0, 0)},
        };
        return c;
    }

    std::string to_string() const {
        std::string s;
        for (const auto& e : entries) {
            if (!s.empty()) s += ';';
            for (int i = 0; i < 3; ++i) s += std::to_string(e.offset[i]) + ',';
            for (int i = 0; i < 3; ++i) s += std::to_string(e.direction[i]) + (i < 2 ? "," : "");
        }
        return s;
    }

    /// "ox,oy,oz,dx,dy,dz;..." with directions normalized.
    static PPDConfig parse(const std::string& text) {
        PPDConfig c;
        std::size_t start = 0;
        while (start <= text.size()) {
            const std::size_t end = std::min(text.find(';', start), text.size());
            const std::string item = text.substr(start, end - start);
            std::array<double, 6> v{};
            std::size_t pos = 0;
            for (int i = 0; i < 6; ++i) {
                std::size_t used = 0;
                try {
                    v[i] = std::stod(item.substr(pos), &used);
                } catch (const std::exception&) {
                    throw ConfigError("ppd: cannot parse entry '" + item + "'");
                }
                pos += used;
                if (i < 5) {
                    if (pos >= item.size() || item[pos] != ',') throw ConfigError("ppd: entry '" + item + "' needs 6 numbers");
                    ++pos;
                }
            }
            if (pos != item.size()) throw ConfigError("ppd: trailing characters in '" + item + "'");
            const Vec3 d(v[3], v[4], v[5]);
            require(d.norm() > 1e-12, "ppd: zero direction in '" + item + "'");
            c.entries.push_back({Vec3(v[0], v[1], v[2]), d.normalized()});
            start = end + 1;
        }
        c.validate();
        return c;
    }
};

inline std::vector<SupportPose> ppd_decompose(const Pose& p, const PPDConfig& cfg) {
    const Mat3 r = rotation(p);
    const Vec3& t = position(p);
    std::vector<SupportPose> out;
    out.reserve(cfg.entries.size());
    for (const auto& e : cfg.entries) out.push_back({r * e.offset + t, r * e.direction});
    return out;
}

/// Rotation matrix (row-major 3x3) from a flat representation, normalizing
/// inside: q / |q| for quaternions, Gram-Schmidt for 6D. Scalar-generic so the
/// scene field can differentiate through it.
template <class T>
std::array<T, 9> rotation_from_rep(const T* o, Representation rep) {
    using std::sqrt;
    std::array<T, 9> r;
    if (rep == Representation::Quat) {
        const T n = sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2] + o[3] * o[3]);
        const T w = o[0] / n, x = o[1] / n, y = o[2] / n, z = o[3] / n;
        r = {1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z),       2.0 * (x * z + w * y),
             2.0 * (x * y + w * z),       1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
             2.0 * (x * z - w * y),       2.0 * (y * z + w * x),       1.0 - 2.0 * (x * x + y * y)};
        return r;
    }
    const T n1 = sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
    const T a0 = o[0] / n1, a1 = o[1] / n1, a2 = o[2] / n1;
    const T d = a0 * o[3] + a1 * o[4] + a2 * o[5];
    const T u0 = o[3] - d * a0, u1 = o[4] - d * a1, u2 = o[5] - d * a2;
    const T n2 = sqrt(u0 * u0 + u1 * u1 + u2 * u2);
    const T b0 = u0 / n2, b1 = u1 / n2, b2 = u2 / n2;
    const T c0 = a1 * b2 - a2 * b1, c1 = a2 * b0 - a0 * b2, c2 = a0 * b1 - a1 * b0;
    r = {a0, b0, c0, a1, b1, c1, a2, b2, c2};
    return r;
}

// ---------------------------------------------------------------------------
// Positional encoding

struct PosEncConfig {
    int frequencies = 6;
};

/// Per dimension: sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(M-1) pi v), cos(2^(M-1) pi v).
template <class T>
void positional_encode(const T* v, int dims, int frequencies, T* out) {
    using std::cos;
    using std::sin;
    for (int d = 0; d < dims; ++d)
        for (int k = 0; k < frequencies; ++k) {
            const T arg = v[d] * std::ldexp(std::numbers::pi, k);
            *out++ = sin(arg);
            *out++ = cos(arg);
        }
}

inline Vec positional_encode(const Vec& v, PosEncConfig cfg) {
    require(cfg.frequencies >= 1, "positional_encode: M must be >= 1");
    Vec out(2 * cfg.frequencies * v.size());
    positional_encode(v.data(), static_cast<int>(v.size()), cfg.frequencies, out.data());
    return out;
}

}  // namespace slopegrasp
