#include "facepaint/grid.hpp"

#include <cmath>
#include <numeric>

#include "facepaint/errors.hpp"

namespace facepaint {

Grid::Grid(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || channels < 0) {
        throw InvalidArgument("grid dimensions must be non-negative");
    }
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

std::string Grid::shape_string() const {
    return std::to_string(height_) + "x" + std::to_string(width_) + "x" + std::to_string(channels_);
}

bool Grid::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

double Grid::squared_norm() const {
    return std::inner_product(data_.begin(), data_.end(), data_.begin(), 0.0);
}

double Mask::mean() const {
    if (values.empty()) return 0.0;
    return std::accumulate(values.raw().begin(), values.raw().end(), 0.0) /
           static_cast<double>(values.size());
}

Mask make_mask(int height, int width, MaskKind kind, double fill) {
    return Mask{Grid(height, width, 1, fill), kind};
}

void require_same_shape(const Grid& a, const Grid& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeMismatch(std::string(what) + ": shape " + a.shape_string() + " vs " +
                            b.shape_string());
    }
}

}  // namespace facepaint
