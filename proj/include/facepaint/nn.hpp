#pragma once

#include <span>
#include <vector>

#include "facepaint/grid.hpp"

namespace facepaint::nn {

// Stride-1, zero-padded ("same") convolution. weight layout is
// [out][in][k][k], bias is [out].
Grid conv2d(const Grid& input, std::span<const double> weight, std::span<const double> bias,
            int out_channels, int kernel);

// Accumulates into d_weight / d_bias; writes d_input when non-null.
void conv2d_backward(const Grid& input, std::span<const double> weight, int out_channels,
                     int kernel, const Grid& d_output, Grid* d_input,
                     std::span<double> d_weight, std::span<double> d_bias);

// Non-overlapping factor x factor mean pooling.
Grid avg_pool(const Grid& input, int factor);
Grid avg_pool_backward(const Grid& d_output, int factor);

Grid tanh(const Grid& input);
// d_input = d_output * (1 - y^2) where y = tanh(x)
Grid tanh_backward(const Grid& activated, const Grid& d_output);

std::vector<double> timestep_embedding(int t, int dim);

}  // namespace facepaint::nn
