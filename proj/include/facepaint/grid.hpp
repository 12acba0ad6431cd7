#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace facepaint {

// Dense H x W x C array, channel-last. Backs images, masks and latents.
class Grid {
public:
    Grid() = default;
    Grid(int height, int width, int channels, double fill = 0.0);

    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
    double at(int y, int x, int c) const { return data_[index(y, x, c)]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Grid& other) const {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    std::string shape_string() const;

    bool all_finite() const;
    double squared_norm() const;

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

// Latents are h x w x c at 1/factor of the image resolution.
using LatentGrid = Grid;
// Images are H x W x 3 with values in [0, 1].
using ImageGrid = Grid;

enum class MaskKind { binary, blurred, latent_downsampled };

struct Mask {
    Grid values;  // H x W x 1, entries in [0, 1]
    MaskKind kind = MaskKind::binary;

    int height() const { return values.height(); }
    int width() const { return values.width(); }
    double operator()(int y, int x) const { return values.at(y, x, 0); }
    double mean() const;
};

Mask make_mask(int height, int width, MaskKind kind, double fill = 0.0);

void require_same_shape(const Grid& a, const Grid& b, const char* what);

}  // namespace facepaint
