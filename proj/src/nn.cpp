#include "facepaint/nn.hpp"

#include <cmath>

#include "facepaint/errors.hpp"

namespace facepaint::nn {

namespace {

void check_conv(const Grid& input, std::span<const double> weight, int out_channels, int kernel) {
    if (kernel < 1 || kernel % 2 == 0) throw InvalidArgument("conv2d kernel must be odd");
    const std::size_t expected = static_cast<std::size_t>(out_channels) * input.channels() *
                                 kernel * kernel;
    if (weight.size() != expected) {
        throw ShapeMismatch("conv2d weight has " + std::to_string(weight.size()) +
                            " entries, expected " + std::to_string(expected));
    }
}

}  // namespace

Grid conv2d(const Grid& input, std::span<const double> weight, std::span<const double> bias,
            int out_channels, int kernel) {
    check_conv(input, weight, out_channels, kernel);
    const int h = input.height();
    const int w = input.width();
    const int cin = input.channels();
    const int r = kernel / 2;
    Grid out(h, w, out_channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int o = 0; o < out_channels; ++o) {
                double acc = bias.empty() ? 0.0 : bias[o];
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sy = y + ky - r;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sx = x + kx - r;
                        if (sx < 0 || sx >= w) continue;
                        const double* wrow = &weight[((static_cast<std::size_t>(o) * cin) * kernel + ky) * kernel + kx];
                        for (int i = 0; i < cin; ++i) {
                            acc += wrow[static_cast<std::size_t>(i) * kernel * kernel] * input.at(sy, sx, i);
                        }
                    }
                }
                out.at(y, x, o) = acc;
            }
        }
    }
    return out;
}

void conv2d_backward(const Grid& input, std::span<const double> weight, int out_channels,
                     int kernel, const Grid& d_output, Grid* d_input,
                     std::span<double> d_weight, std::span<double> d_bias) {
    check_conv(input, weight, out_channels, kernel);
    const int h = input.height();
    const int w = input.width();
    const int cin = input.channels();
    const int r = kernel / 2;
    if (d_input) *d_input = Grid(h, w, cin);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int o = 0; o < out_channels; ++o) {
                const double g = d_output.at(y, x, o);
                if (g == 0.0) continue;
                if (!d_bias.empty()) d_bias[o] += g;
                for (int ky = 0; ky < kernel; ++ky) {
                    const int sy = y + ky - r;
                    if (sy < 0 || sy >= h) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int sx = x + kx - r;
                        if (sx < 0 || sx >= w) continue;
                        for (int i = 0; i < cin; ++i) {
                            const std::size_t wi =
                                ((static_cast<std::size_t>(o) * cin + i) * kernel + ky) * kernel + kx;
                            if (!d_weight.empty()) d_weight[wi] += g * input.at(sy, sx, i);
                            if (d_input) d_input->at(sy, sx, i) += g * weight[wi];
                        }
                    }
                }
            }
        }
    }
}

Grid avg_pool(const Grid& input, int factor) {
    if (factor < 1 || input.height() % factor != 0 || input.width() % factor != 0) {
        throw ShapeMismatch("avg_pool: " + input.shape_string() + " not divisible by " +
                            std::to_string(factor));
    }
    const int oh = input.height() / factor;
    const int ow = input.width() / factor;
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    Grid out(oh, ow, input.channels());
    for (int y = 0; y < input.height(); ++y) {
        for (int x = 0; x < input.width(); ++x) {
            for (int c = 0; c < input.channels(); ++c) {
                out.at(y / factor, x / factor, c) += input.at(y, x, c);
            }
        }
    }
    for (double& v : out.values()) v *= inv;
    return out;
}

Grid avg_pool_backward(const Grid& d_output, int factor) {
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    Grid d_input(d_output.height() * factor, d_output.width() * factor, d_output.channels());
    for (int y = 0; y < d_input.height(); ++y) {
        for (int x = 0; x < d_input.width(); ++x) {
            for (int c = 0; c < d_input.channels(); ++c) {
                d_input.at(y, x, c) = d_output.at(y / factor, x / factor, c) * inv;
            }
        }
    }
    return d_input;
}

Grid tanh(const Grid& input) {
    Grid out = input;
    for (double& v : out.values()) v = std::tanh(v);
    return out;
}

Grid tanh_backward(const Grid& activated, const Grid& d_output) {
    Grid d = d_output;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - activated[i] * activated[i];
    return d;
}

std::vector<double> timestep_embedding(int t, int dim) {
    std::vector<double> emb(dim, 0.0);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        emb[i] = std::sin(t * freq);
        emb[i + half] = std::cos(t * freq);
    }
    return emb;
}

}  // namespace facepaint::nn
