#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "qnn/error.hpp"
#include "qnn/rng.hpp"

namespace qnn {

#ifdef QNN_REAL32
using real = float;
#else
using real = double;  // correctness tests assume float64 headroom
#endif

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

// Dense row-major n-d array of `real`. The universal value type: inputs,
// parameters, gradients, feature matrices all live here.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, real fill = real(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    static Tensor from(Shape shape, std::vector<real> data) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        return t;
    }

    static Tensor scalar(real v) { return from({1}, {v}); }

    static Tensor randn(const Shape& shape, Rng& rng, real stddev = real(1)) {
        Tensor t(shape);
        for (auto& v : t.data_) v = static_cast<real>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::span<real> span() { return {data_.data(), data_.size()}; }
    std::span<const real> span() const { return {data_.data(), data_.size()}; }

    real& operator[](std::size_t i) { return data_[i]; }
    real operator[](std::size_t i) const { return data_[i]; }

    real& at(std::size_t i) { return data_.at(i); }

    real& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    real operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    real& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    real operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        Tensor t = *this;
        t.shape_ = std::move(s);
        return t;
    }

    void fill(real v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<real> data_;
};

inline void check_finite(const Tensor& t, const std::string& who) {
    if (!t.all_finite()) throw NumericError("non-finite value in " + who);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const std::string& who) {
    if (!a.same_shape(b))
        throw ShapeError(who + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// ---- elementwise arithmetic ----

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor operator*(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline Tensor operator*(const Tensor& a, real s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

inline Tensor operator*(real s, const Tensor& a) { return a * s; }

inline real sum(const Tensor& t) {
    real acc = 0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += t[i];
    return acc;
}

inline real mean(const Tensor& t) { return t.size() ? sum(t) / static_cast<real>(t.size()) : 0; }

inline real max_abs(const Tensor& t) {
    real m = 0;
    for (std::size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
    return m;
}

inline real frobenius_sq(const Tensor& t) {
    real acc = 0;
    for (std::size_t i = 0; i < t.size(); ++i) acc += t[i] * t[i];
    return acc;
}

// ---- 2-d helpers ----

// c[i,j] = sum_k a[i,k] * b[k,j]; i-k-j loop order keeps both inner streams
// contiguous, which is what makes the desk-scale training runs feasible.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n}, 0);
    const real* pa = a.data();
    const real* pb = b.data();
    real* pc = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const real av = pa[i * k + kk];
            if (av == real(0)) continue;
            const real* brow = pb + kk * n;
            real* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: need rank-2, got " + shape_str(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor t({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t(j, i) = a(i, j);
    return t;
}

// a += b
inline void add_inplace(Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void axpy(Tensor& y, real alpha, const Tensor& x) {
    check_same_shape(y, x, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

}  // namespace qnn
