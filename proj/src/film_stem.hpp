#pragma once

// Shared first stage of the toy denoiser and its control-branch copy:
//   h = conv(z) * (1 + W_scale e) + W_shift e + W_time temb

#include <span>
#include <vector>

#include "facepaint/grid.hpp"
#include "facepaint/params.hpp"

namespace facepaint::detail {

struct FilmStemBlocks {
    std::size_t conv_w = 0;
    std::size_t conv_b = 0;
    std::size_t shift = 0;
    std::size_t scale = 0;
    std::size_t time = 0;
};

struct FilmStemCache {
    Grid conv;
    std::vector<double> scale;
};

FilmStemBlocks add_film_stem(ParamStore& store, const std::string& prefix, int in_channels,
                             int hidden, int embedding_dim, int time_dim);

Grid film_stem_forward(const ParamStore& params, const FilmStemBlocks& blocks, int hidden,
                       const Grid& z, std::span<const double> pooled,
                       std::span<const double> temb, FilmStemCache& cache);

void film_stem_backward(const ParamStore& params, const FilmStemBlocks& blocks, int hidden,
                        const Grid& z, std::span<const double> pooled,
                        std::span<const double> temb, const FilmStemCache& cache,
                        const Grid& d_h, std::vector<double>* d_params,
                        std::vector<double>* d_pooled);

}  // namespace facepaint::detail
