#include "film_stem.hpp"

#include "facepaint/nn.hpp"

namespace facepaint::detail {

namespace {
constexpr int kStemKernel = 3;
}

FilmStemBlocks add_film_stem(ParamStore& store, const std::string& prefix, int in_channels,
                             int hidden, int embedding_dim, int time_dim) {
    FilmStemBlocks b;
    b.conv_w = store.add(prefix + "conv_in.w", {hidden, in_channels, kStemKernel, kStemKernel});
    b.conv_b = store.add(prefix + "conv_in.b", {hidden});
    b.shift = store.add(prefix + "film.shift", {hidden, embedding_dim});
    b.scale = store.add(prefix + "film.scale", {hidden, embedding_dim});
    b.time = store.add(prefix + "time.proj", {hidden, time_dim});
    return b;
}

Grid film_stem_forward(const ParamStore& params, const FilmStemBlocks& blocks, int hidden,
                       const Grid& z, std::span<const double> pooled,
                       std::span<const double> temb, FilmStemCache& cache) {
    cache.conv = nn::conv2d(z, params.block(blocks.conv_w), params.block(blocks.conv_b), hidden,
                            kStemKernel);
    const auto w_shift = params.block(blocks.shift);
    const auto w_scale = params.block(blocks.scale);
    const auto w_time = params.block(blocks.time);
    const std::size_t dim = pooled.size();
    const std::size_t tdim = temb.size();

    cache.scale.assign(hidden, 0.0);
    std::vector<double> shift(hidden, 0.0);
    for (int k = 0; k < hidden; ++k) {
        for (std::size_t d = 0; d < dim; ++d) {
            cache.scale[k] += w_scale[k * dim + d] * pooled[d];
            shift[k] += w_shift[k * dim + d] * pooled[d];
        }
        for (std::size_t j = 0; j < tdim; ++j) shift[k] += w_time[k * tdim + j] * temb[j];
    }

    Grid h = cache.conv;
    for (int y = 0; y < h.height(); ++y) {
        for (int x = 0; x < h.width(); ++x) {
            for (int k = 0; k < hidden; ++k) {
                h.at(y, x, k) = h.at(y, x, k) * (1.0 + cache.scale[k]) + shift[k];
            }
        }
    }
    return h;
}

void film_stem_backward(const ParamStore& params, const FilmStemBlocks& blocks, int hidden,
                        const Grid& z, std::span<const double> pooled,
                        std::span<const double> temb, const FilmStemCache& cache,
                        const Grid& d_h, std::vector<double>* d_params,
                        std::vector<double>* d_pooled) {
    const std::size_t dim = pooled.size();
    const std::size_t tdim = temb.size();
    std::vector<double> d_scale(hidden, 0.0);
    std::vector<double> d_shift(hidden, 0.0);
    Grid d_conv(d_h.height(), d_h.width(), hidden);
    for (int y = 0; y < d_h.height(); ++y) {
        for (int x = 0; x < d_h.width(); ++x) {
            for (int k = 0; k < hidden; ++k) {
                const double g = d_h.at(y, x, k);
                d_shift[k] += g;
                d_scale[k] += g * cache.conv.at(y, x, k);
                d_conv.at(y, x, k) = g * (1.0 + cache.scale[k]);
            }
        }
    }

    if (d_pooled) {
        const auto w_shift = params.block(blocks.shift);
        const auto w_scale = params.block(blocks.scale);
        for (int k = 0; k < hidden; ++k) {
            for (std::size_t d = 0; d < dim; ++d) {
                (*d_pooled)[d] += d_scale[k] * w_scale[k * dim + d] + d_shift[k] * w_shift[k * dim + d];
            }
        }
    }

    if (d_params) {
        auto g_shift = params.slice(*d_params, blocks.shift);
        auto g_scale = params.slice(*d_params, blocks.scale);
        auto g_time = params.slice(*d_params, blocks.time);
        for (int k = 0; k < hidden; ++k) {
            for (std::size_t d = 0; d < dim; ++d) {
                g_shift[k * dim + d] += d_shift[k] * pooled[d];
                g_scale[k * dim + d] += d_scale[k] * pooled[d];
            }
            for (std::size_t j = 0; j < tdim; ++j) g_time[k * tdim + j] += d_shift[k] * temb[j];
        }
        nn::conv2d_backward(z, params.block(blocks.conv_w), hidden, kStemKernel, d_conv, nullptr,
                            params.slice(*d_params, blocks.conv_w),
                            params.slice(*d_params, blocks.conv_b));
    }
}

}  // namespace facepaint::detail
