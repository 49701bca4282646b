#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace acdet {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SingularTransformError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

/// Dense row-major tensor of doubles. Rank is dynamic; most of the code
/// uses rank 1 (vectors), 2 (token/feature matrices) or 3 (C,H,W images).
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(Shape s, double fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != numel_of(shape))
            throw ConfigError("tensor data size does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    // 2-D accessors
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

    // 3-D accessor (channel, row, col)
    double& at3(int ch, int r, int c) {
        return data[(static_cast<size_t>(ch) * shape[1] + r) * shape[2] + c];
    }
    double at3(int ch, int r, int c) const {
        return data[(static_cast<size_t>(ch) * shape[1] + r) * shape[2] + c];
    }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
};

inline Tensor randn(Shape s, std::mt19937_64& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor t(std::move(s));
    std::normal_distribution<double> d(mean, stddev);
    for (auto& v : t.data) v = d(rng);
    return t;
}

inline Tensor rand_uniform(Shape s, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(s));
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data) v = d(rng);
    return t;
}

// splitmix64; used to derive independent rng streams from (seed, stream id)
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace acdet
