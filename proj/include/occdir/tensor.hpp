#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "occdir/common.hpp"

namespace occdir {

// Dense row-major f32 array. Plain value semantics: copies copy the buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel(shape), 0.0f) {}
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        check(data.size() == size_t(numel(shape)), "ShapeMismatch",
              "data length does not match shape");
    }

    static int64_t numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, Rng& rng, float stddev = 1.0f) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = rng.normal_f() * stddev;
        return t;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int size(int axis) const { return shape[size_t(axis)]; }

    float& operator[](int64_t i) { return data[size_t(i)]; }
    float operator[](int64_t i) const { return data[size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    // row-major strides
    std::vector<int64_t> strides() const {
        std::vector<int64_t> st(shape.size());
        int64_t acc = 1;
        for (int i = rank() - 1; i >= 0; --i) {
            st[size_t(i)] = acc;
            acc *= shape[size_t(i)];
        }
        return st;
    }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
}

}  // namespace occdir
