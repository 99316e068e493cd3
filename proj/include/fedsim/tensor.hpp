#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

namespace fedsim {

// Dense row-major double tensor. Small on purpose: the simulator runs in
// double precision end to end and every kernel works on flat spans.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        v.assign(count(shape), 0.0);
    }
    Tensor(std::vector<std::size_t> s, std::vector<double> data)
        : shape(std::move(s)), v(std::move(data)) {}

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t size() const { return v.size(); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape == b.shape && a.v == b.v;
    }
};

// A named parameter tensor; models and gradients are ordered lists of these.
struct NamedTensor {
    std::string name;
    Tensor t;
};

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace fedsim
