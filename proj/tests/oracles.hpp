#pragma once

// Independent reference computations shared by the unit and acceptance suites.
// Nothing here calls into the code paths the tests check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace oracle {

// Central finite difference of f() w.r.t. the scalar x (restored afterwards).
template <typename F>
double central_difference(F&& f, double& x, double h = 1e-5) {
    const double saved = x;
    x = saved + h;
    const double plus = f();
    x = saved - h;
    const double minus = f();
    x = saved;
    return (plus - minus) / (2.0 * h);
}

inline bool relative_close(double a, double b, double rel = 1e-4, double abs_floor = 1e-9) {
    return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + abs_floor;
}

inline double mean(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += v[i];
    return s / static_cast<double>(end - begin);
}

// Mean of the first and last tenth of a loss log.
struct Deciles {
    double first = 0.0;
    double last = 0.0;
};

inline Deciles loss_deciles(const std::vector<double>& losses) {
    const std::size_t n = losses.size();
    const std::size_t k = std::max<std::size_t>(1, n / 10);
    return {mean(losses, 0, k), mean(losses, n - k, n)};
}

// FNV-1a over the raw bits of a value sequence.
inline std::uint64_t checksum(std::span<const double> values) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double v : values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        h = (h ^ bits) * 1099511628211ULL;
    }
    return h;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

// Normalized 1-D Gaussian kernel weights, computed directly from exp().
inline std::vector<double> gaussian_kernel_1d(int size, double sigma) {
    std::vector<double> k(size);
    const int r = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    return k;
}

}  // namespace oracle
