#pragma once

// Forward-mode dual numbers with N tangent directions. Nesting
// (Dual<Dual<double, 1>, 1>) yields directional second derivatives; the scene
// field is written once as a template over its scalar type and differentiated
// through these.

#include <array>
#include <cmath>
#include <type_traits>

namespace slopegrasp {

template <class T, int N>
struct Dual {
    T val{};
    std::array<T, N> eps{};

    Dual() = default;
    Dual(double v) : val(v) {}  // NOLINT: implicit lift of constants
    Dual(T v, const std::array<T, N>& e) : val(std::move(v)), eps(e) {}

    static Dual variable(T v, int direction) {
        Dual d;
        d.val = std::move(v);
        d.eps[direction] = T(1.0);
        return d;
    }
};

template <class T>
struct is_dual : std::false_type {};
template <class T, int N>
struct is_dual<Dual<T, N>> : std::true_type {};

inline double value_of(double x) { return x; }
template <class T, int N>
double value_of(const Dual<T, N>& x) {
    return value_of(x.val);
}

// The chain rule helper: f(a) with f'(a) = slope.
template <class T, int N>
Dual<T, N> chain(const Dual<T, N>& a, T value, const T& slope) {
    Dual<T, N> r;
    r.val = std::move(value);
    for (int i = 0; i < N; ++i) r.eps[i] = slope * a.eps[i];
    return r;
}

template <class T, int N>
Dual<T, N> operator-(const Dual<T, N>& a) {
    Dual<T, N> r;
    r.val = -a.val;
    for (int i = 0; i < N; ++i) r.eps[i] = -a.eps[i];
    return r;
}

template <class T, int N>
Dual<T, N> operator+(const Dual<T, N>& a, const Dual<T, N>& b) {
    Dual<T, N> r;
    r.val = a.val + b.val;
    for (int i = 0; i < N; ++i) r.eps[i] = a.eps[i] + b.eps[i];
    return r;
}

template <class T, int N>
Dual<T, N> operator-(const Dual<T, N>& a, const Dual<T, N>& b) {
    Dual<T, N> r;
    r.val = a.val - b.val;
    for (int i = 0; i < N; ++i) r.eps[i] = a.eps[i] - b.eps[i];
    return r;
}

template <class T, int N>
Dual<T, N> operator*(const Dual<T, N>& a, const Dual<T, N>& b) {
    Dual<T, N> r;
    r.val = a.val * b.val;
    for (int i = 0; i < N; ++i) r.eps[i] = a.eps[i] * b.val + a.val * b.eps[i];
    return r;
}

template <class T, int N>
Dual<T, N> operator/(const Dual<T, N>& a, const Dual<T, N>& b) {
    Dual<T, N> r;
    const T inv = T(1.0) / b.val;
    r.val = a.val * inv;
    for (int i = 0; i < N; ++i) r.eps[i] = (a.eps[i] - r.val * b.eps[i]) * inv;
    return r;
}

template <class T, int N>
Dual<T, N> operator+(const Dual<T, N>& a, double s) {
    Dual<T, N> r = a;
    r.val = r.val + s;
    return r;
}
template <class T, int N>
Dual<T, N> operator+(double s, const Dual<T, N>& a) {
    return a + s;
}
template <class T, int N>
Dual<T, N> operator-(const Dual<T, N>& a, double s) {
    return a + (-s);
}
template <class T, int N>
Dual<T, N> operator-(double s, const Dual<T, N>& a) {
    return (-a) + s;
}
template <class T, int N>
Dual<T, N> operator*(const Dual<T, N>& a, double s) {
    Dual<T, N> r;
    r.val = a.val * s;
    for (int i = 0; i < N; ++i) r.eps[i] = a.eps[i] * s;
    return r;
}
template <class T, int N>
Dual<T, N> operator*(double s, const Dual<T, N>& a) {
    return a * s;
}
template <class T, int N>
Dual<T, N> operator/(const Dual<T, N>& a, double s) {
    return a * (1.0 / s);
}
template <class T, int N>
Dual<T, N> operator/(double s, const Dual<T, N>& a) {
    return Dual<T, N>(s) / a;
}

template <class T, int N>
Dual<T, N>& operator+=(Dual<T, N>& a, const Dual<T, N>& b) {
    return a = a + b;
}
template <class T, int N>
Dual<T, N>& operator-=(Dual<T, N>& a, const Dual<T, N>& b) {
    return a = a - b;
}
template <class T, int N>
Dual<T, N>& operator*=(Dual<T, N>& a, const Dual<T, N>& b) {
    return a = a * b;
}

template <class T, int N>
bool operator<(const Dual<T, N>& a, const Dual<T, N>& b) {
    return value_of(a) < value_of(b);
}
template <class T, int N>
bool operator>(const Dual<T, N>& a, const Dual<T, N>& b) {
    return value_of(a) > value_of(b);
}

// Math functions. `using std::sin` at the call site plus ADL picks these up.
template <class T, int N>
Dual<T, N> sin(const Dual<T, N>& a) {
    using std::cos;
    using std::sin;
    return chain(a, T(sin(a.val)), T(cos(a.val)));
}
template <class T, int N>
Dual<T, N> cos(const Dual<T, N>& a) {
    using std::cos;
    using std::sin;
    return chain(a, T(cos(a.val)), T(-sin(a.val)));
}
template <class T, int N>
Dual<T, N> exp(const Dual<T, N>& a) {
    using std::exp;
    T e = exp(a.val);
    return chain(a, e, e);
}
template <class T, int N>
Dual<T, N> log(const Dual<T, N>& a) {
    using std::log;
    return chain(a, T(log(a.val)), T(T(1.0) / a.val));
}
template <class T, int N>
Dual<T, N> log1p(const Dual<T, N>& a) {
    using std::log1p;
    return chain(a, T(log1p(a.val)), T(T(1.0) / (a.val + 1.0)));
}
template <class T, int N>
Dual<T, N> sqrt(const Dual<T, N>& a) {
    using std::sqrt;
    T s = sqrt(a.val);
    return chain(a, s, T(T(0.5) / s));
}

}  // namespace slopegrasp
