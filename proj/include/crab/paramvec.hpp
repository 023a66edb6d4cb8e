#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "crab/errors.hpp"

namespace crab {

// Flat 64-bit parameter / update vector. All model state, client updates and
// aggregated updates live in this representation.
using ParamVector = std::vector<double>;

inline void check_finite(const ParamVector& v, const char* where) {
    for (double x : v) {
        if (!std::isfinite(x)) throw ContractViolation(std::string("non-finite value in ") + where);
    }
}

inline void check_same_length(const ParamVector& a, const ParamVector& b, const char* where) {
    if (a.size() != b.size()) throw ContractViolation(std::string("length mismatch in ") + where);
}

inline void add_inplace(ParamVector& dst, const ParamVector& src) {
    check_same_length(dst, src, "add_inplace");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

inline void axpy_inplace(ParamVector& dst, double a, const ParamVector& x) {
    check_same_length(dst, x, "axpy_inplace");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * x[i];
}

inline void scale_inplace(ParamVector& v, double a) {
    for (double& x : v) x *= a;
}

inline ParamVector scaled(const ParamVector& v, double a) {
    ParamVector out(v);
    scale_inplace(out, a);
    return out;
}

inline ParamVector sub(const ParamVector& a, const ParamVector& b) {
    check_same_length(a, b, "sub");
    ParamVector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline double dot(const ParamVector& a, const ParamVector& b) {
    check_same_length(a, b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(const ParamVector& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double l2_distance(const ParamVector& a, const ParamVector& b) {
    check_same_length(a, b, "l2_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace crab
