#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ccis/core/errors.hpp"
#include "ccis/core/rng.hpp"

namespace ccis {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major array. Plain value type: all the non-differentiable parts of
// the project (dataset synthesis, schedules, metrics) work on these directly.
template <class S>
struct Array {
    Shape shape;
    std::vector<S> v;

    Array() = default;
    explicit Array(Shape sh) : shape(std::move(sh)), v(static_cast<size_t>(shape_numel(shape)), S(0)) {}
    Array(Shape sh, S fill) : shape(std::move(sh)), v(static_cast<size_t>(shape_numel(shape)), fill) {}
    Array(Shape sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != shape_numel(shape))
            throw ShapeError("array data size does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }
    bool empty() const { return v.empty(); }

    S* data() { return v.data(); }
    const S* data() const { return v.data(); }
    S& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    static Array zeros(Shape sh) { return Array(std::move(sh)); }
    static Array full(Shape sh, S val) { return Array(std::move(sh), val); }

    static Array randn(Shape sh, Rng& rng, double stddev = 1.0) {
        Array a(std::move(sh));
        for (auto& x : a.v) x = static_cast<S>(rng.normal() * stddev);
        return a;
    }

    static Array rand_uniform(Shape sh, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Array a(std::move(sh));
        for (auto& x : a.v) x = static_cast<S>(rng.uniform(lo, hi));
        return a;
    }

    template <class T>
    Array<T> cast() const {
        Array<T> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }

    Array reshaped(Shape sh) const {
        if (shape_numel(sh) != numel())
            throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(sh));
        Array out = *this;
        out.shape = std::move(sh);
        return out;
    }
};

template <class S>
bool same_shape(const Array<S>& a, const Array<S>& b) {
    return a.shape == b.shape;
}

template <class S>
double max_abs_diff(const Array<S>& a, const Array<S>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double d = std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
        if (d > m) m = d;
    }
    return m;
}

}  // namespace ccis
