#pragma once

#include <cstdint>
#include <random>

#include "facepaint/grid.hpp"

namespace facepaint {

// Seeded random stream. Every stochastic component takes one of these by
// reference so that a run is reproducible from its seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int lo, int hi_inclusive) {
        return std::uniform_int_distribution<int>(lo, hi_inclusive)(engine_);
    }

    Grid normal_grid(int h, int w, int c) {
        Grid g(h, w, c);
        for (double& v : g.values()) v = normal();
        return g;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace facepaint
