#include "facepaint/backend.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <sstream>

#include "facepaint/errors.hpp"
#include "facepaint/nn.hpp"
#include "facepaint/rng.hpp"
#include "film_stem.hpp"

namespace facepaint {

namespace {

constexpr int kKernel = 3;

detail::FilmStemBlocks stem_blocks(const ParamStore& p) {
    return {p.find("conv_in.w"), p.find("conv_in.b"), p.find("film.shift"), p.find("film.scale"),
            p.find("time.proj")};
}

}  // namespace

std::vector<double> PromptEmbedding::pooled() const {
    std::vector<double> out(dim, 0.0);
    const int n = length();
    if (n == 0) return out;
    for (int i = 0; i < n; ++i) {
        const auto tok = token(i);
        for (int d = 0; d < dim; ++d) out[d] += tok[d];
    }
    for (double& v : out) v /= n;
    return out;
}

double prior_basis(int d, int y, int x, int h, int w) {
    const int fx = d % 4;
    const int fy = (d / 4) % 4;
    return std::cos(std::numbers::pi * fx * (x + 0.5) / w) *
           std::cos(std::numbers::pi * fy * (y + 0.5) / h);
}

// --- ToyPredictor ---------------------------------------------------------

ParamStore ToyPredictor::make_layout(const ToyPredictorConfig& c) {
    ParamStore store;
    detail::add_film_stem(store, "", c.latent_channels, c.hidden_channels, c.embedding_dim,
                          c.time_dim);
    const int k = c.hidden_channels;
    store.add("mid.w", {k, k, kKernel, kKernel});
    store.add("mid.b", {k});
    store.add("up.w", {k, k, kKernel, kKernel});
    store.add("up.b", {k});
    store.add("out.w", {c.latent_channels, k, kKernel, kKernel});
    store.add("out.b", {c.latent_channels});
    store.add("prior.w", {c.latent_channels, c.embedding_dim});
    return store;
}

ToyPredictor::ToyPredictor(ToyPredictorConfig config, NoiseSchedule schedule, std::uint64_t seed)
    : config_(config), schedule_(std::move(schedule)), params_(make_layout(config_)) {
    index_blocks();
    const double k9 = config_.hidden_channels * kKernel * kKernel;
    const double c9 = config_.latent_channels * kKernel * kKernel;
    const double dim = config_.embedding_dim;
    auto scale_for = [&](const std::string& name) -> double {
        if (name == "conv_in.w") return 1.0 / std::sqrt(c9);
        if (name == "film.shift") return 1.0 / std::sqrt(dim);
        if (name == "film.scale") return 0.5 / std::sqrt(dim);
        if (name == "time.proj") return 0.5 / std::sqrt(static_cast<double>(config_.time_dim));
        if (name == "mid.w" || name == "up.w") return 1.0 / std::sqrt(k9);
        if (name == "out.w") return 0.3 / std::sqrt(k9);
        if (name == "prior.w") return 1.0;
        return 0.0;  // biases
    };
    Rng rng(seed);
    for (std::size_t b = 0; b < params_.blocks().size(); ++b) {
        const double s = scale_for(params_.blocks()[b].name);
        for (double& v : params_.block(b)) v = s * rng.normal();
    }
}

ToyPredictor::ToyPredictor(ToyPredictorConfig config, NoiseSchedule schedule, ParamStore params)
    : config_(config), schedule_(std::move(schedule)), params_(std::move(params)) {
    const ParamStore layout = make_layout(config_);
    if (layout.size() != params_.size() || layout.blocks().size() != params_.blocks().size()) {
        throw ShapeMismatch("toy predictor parameters do not match configuration");
    }
    index_blocks();
}

void ToyPredictor::index_blocks() {
    conv_in_w_ = params_.find("conv_in.w");
    conv_in_b_ = params_.find("conv_in.b");
    film_shift_ = params_.find("film.shift");
    film_scale_ = params_.find("film.scale");
    time_proj_ = params_.find("time.proj");
    mid_w_ = params_.find("mid.w");
    mid_b_ = params_.find("mid.b");
    up_w_ = params_.find("up.w");
    up_b_ = params_.find("up.b");
    out_w_ = params_.find("out.w");
    out_b_ = params_.find("out.b");
    prior_w_ = params_.find("prior.w");
}

LatentGrid ToyPredictor::prior_mean(std::span<const double> pooled, int h, int w) const {
    const int c = config_.latent_channels;
    const int dim = config_.embedding_dim;
    const auto weight = params_.block(prior_w_);
    LatentGrid mu(h, w, c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int d = 0; d < dim; ++d) {
                const double phi_e = prior_basis(d, y, x, h, w) * pooled[d];
                for (int ch = 0; ch < c; ++ch) mu.at(y, x, ch) += weight[ch * dim + d] * phi_e;
            }
        }
    }
    return mu;
}

LatentGrid ToyPredictor::predict(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                                 const ControlResiduals* residuals) const {
    ToyPredictorTrace trace;
    return forward(z_t, prompt, t, residuals, trace);
}

LatentGrid ToyPredictor::forward(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                                 const ControlResiduals* residuals,
                                 ToyPredictorTrace& trace) const {
    const int k = config_.hidden_channels;
    if (z_t.channels() != config_.latent_channels) {
        throw ShapeMismatch("predictor expects " + std::to_string(config_.latent_channels) +
                            " latent channels, got " + z_t.shape_string());
    }
    if (prompt.dim != config_.embedding_dim || prompt.length() == 0) {
        throw ShapeMismatch("prompt embedding dimension " + std::to_string(prompt.dim) +
                            " does not match predictor (" +
                            std::to_string(config_.embedding_dim) + ")");
    }
    const double ab = schedule_.alpha_bar(t);

    trace.z = z_t;
    trace.t = t;
    trace.prompt_length = prompt.length();
    trace.pooled = prompt.pooled();
    trace.temb = nn::timestep_embedding(t, config_.time_dim);

    detail::FilmStemCache stem;
    const Grid h1 = detail::film_stem_forward(params_, stem_blocks(params_), k, z_t, trace.pooled,
                                              trace.temb, stem);
    trace.stem_conv = std::move(stem.conv);
    trace.scale = std::move(stem.scale);
    trace.a1 = nn::tanh(h1);

    Grid h2 = nn::conv2d(trace.a1, params_.block(mid_w_), params_.block(mid_b_), k, kKernel);
    if (residuals) {
        require_same_shape(h2, residuals->mid, "middle residual");
        for (std::size_t i = 0; i < h2.size(); ++i) h2[i] += residuals->mid[i];
    }
    trace.a2 = nn::tanh(h2);

    Grid h3 = nn::conv2d(trace.a2, params_.block(up_w_), params_.block(up_b_), k, kKernel);
    if (residuals) {
        require_same_shape(h3, residuals->up, "upsampling residual");
        for (std::size_t i = 0; i < h3.size(); ++i) h3[i] += residuals->up[i];
    }
    trace.a3 = nn::tanh(h3);

    LatentGrid eps = nn::conv2d(trace.a3, params_.block(out_w_), params_.block(out_b_),
                                config_.latent_channels, kKernel);

    const double a = std::sqrt(ab);
    const double b = std::sqrt(1.0 - ab);
    const double s2 = config_.prior_std * config_.prior_std;
    const double denom = a * a * s2 + b * b;
    trace.coef_z = b / denom;
    trace.coef_mu = a * b / denom;
    const LatentGrid mu = prior_mean(trace.pooled, z_t.height(), z_t.width());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        eps[i] += trace.coef_z * z_t[i] - trace.coef_mu * mu[i];
    }
    return eps;
}

ToyPredictorGrads ToyPredictor::backward(const ToyPredictorTrace& trace, const LatentGrid& d_eps,
                                         BackwardRequest request) const {
    const int k = config_.hidden_channels;
    const int c = config_.latent_channels;
    const int dim = config_.embedding_dim;
    ToyPredictorGrads g;
    if (request.params) g.params = params_.zeros_like();
    if (request.embedding) g.pooled.assign(dim, 0.0);

    std::vector<double> scratch;
    auto grad_slice = [&](std::size_t block) -> std::span<double> {
        if (!request.params) return {};
        return params_.slice(g.params, block);
    };

    Grid d_a3;
    nn::conv2d_backward(trace.a3, params_.block(out_w_), c, kKernel, d_eps, &d_a3,
                        grad_slice(out_w_), grad_slice(out_b_));
    const Grid d_h3 = nn::tanh_backward(trace.a3, d_a3);
    Grid d_a2;
    nn::conv2d_backward(trace.a2, params_.block(up_w_), k, kKernel, d_h3, &d_a2,
                        grad_slice(up_w_), grad_slice(up_b_));
    const Grid d_h2 = nn::tanh_backward(trace.a2, d_a2);
    if (request.residuals) {
        g.up = d_h3;
        g.mid = d_h2;
    }

    if (request.params || request.embedding) {
        Grid d_a1;
        nn::conv2d_backward(trace.a1, params_.block(mid_w_), k, kKernel, d_h2, &d_a1,
                            grad_slice(mid_w_), grad_slice(mid_b_));
        const Grid d_h1 = nn::tanh_backward(trace.a1, d_a1);
        detail::FilmStemCache stem{trace.stem_conv, trace.scale};
        detail::film_stem_backward(params_, stem_blocks(params_), k, trace.z, trace.pooled,
                                   trace.temb, stem, d_h1, request.params ? &g.params : nullptr,
                                   request.embedding ? &g.pooled : nullptr);

        // prior term: eps -= coef_mu * mu(e)
        const auto weight = params_.block(prior_w_);
        auto g_prior = grad_slice(prior_w_);
        const int h = d_eps.height();
        const int w = d_eps.width();
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int d = 0; d < dim; ++d) {
                    const double phi = prior_basis(d, y, x, h, w);
                    for (int ch = 0; ch < c; ++ch) {
                        const double d_mu = -trace.coef_mu * d_eps.at(y, x, ch);
                        if (request.params) g_prior[ch * dim + d] += d_mu * phi * trace.pooled[d];
                        if (request.embedding) g.pooled[d] += d_mu * weight[ch * dim + d] * phi;
                    }
                }
            }
        }
    }
    return g;
}

// --- ToyCodec --------------------------------------------------------------

ToyCodec::ToyCodec(int latent_channels, int factor) : channels_(latent_channels), factor_(factor) {
    if (latent_channels < 3) throw InvalidArgument("toy codec needs at least 3 latent channels");
    if (factor < 1) throw InvalidArgument("codec factor must be positive");
}

LatentGrid ToyCodec::encode(const ImageGrid& image) const {
    if (image.channels() != 3) throw ShapeMismatch("codec expects an RGB image");
    const Grid pooled = nn::avg_pool(image, factor_);
    LatentGrid z(pooled.height(), pooled.width(), channels_);
    for (int y = 0; y < z.height(); ++y) {
        for (int x = 0; x < z.width(); ++x) {
            double mean = 0.0;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = 2.0 * pooled.at(y, x, ch) - 1.0;
                z.at(y, x, ch) = v;
                mean += v / 3.0;
            }
            for (int ch = 3; ch < channels_; ++ch) z.at(y, x, ch) = mean;
        }
    }
    return z;
}

ImageGrid ToyCodec::decode(const LatentGrid& latent) const {
    if (latent.channels() != channels_) throw ShapeMismatch("codec latent channel mismatch");
    ImageGrid image(latent.height() * factor_, latent.width() * factor_, 3);
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            for (int ch = 0; ch < 3; ++ch) {
                const double v = 0.5 * (latent.at(y / factor_, x / factor_, ch) + 1.0);
                image.at(y, x, ch) = std::clamp(v, 0.0, 1.0);
            }
        }
    }
    return image;
}

// --- ToyTextEncoder --------------------------------------------------------

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
    std::uint64_t h = basis;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

ToyTextEncoder::ToyTextEncoder(int embedding_dim, std::uint64_t seed)
    : dim_(embedding_dim), seed_(seed) {
    if (embedding_dim < 1) throw InvalidArgument("embedding dimension must be positive");
}

std::vector<std::string> ToyTextEncoder::tokenize(std::string_view text) const {
    std::vector<std::string> tokens{std::string(kBegin)};
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        tokens.push_back(word);
    }
    tokens.emplace_back(kEnd);
    return tokens;
}

std::vector<double> ToyTextEncoder::word_embedding(std::string_view word) const {
    Rng rng(seed_ ^ fnv1a64(word));
    std::vector<double> v(dim_);
    for (double& x : v) x = rng.normal();
    return v;
}

PromptEmbedding ToyTextEncoder::embed_tokens(const std::vector<std::string>& tokens) const {
    PromptEmbedding out;
    out.dim = dim_;
    out.values.reserve(tokens.size() * dim_);
    for (const auto& tok : tokens) {
        const auto v = word_embedding(tok);
        out.values.insert(out.values.end(), v.begin(), v.end());
    }
    return out;
}

std::uint64_t toy_encoder_seed(std::uint64_t backend_seed) {
    return backend_seed ^ 0x9e3779b97f4a7c15ULL;
}

ToyBackend toy_backend(std::uint64_t seed, int latent_channels, const NoiseSchedule& schedule) {
    ToyPredictorConfig config;
    config.latent_channels = latent_channels;
    ToyBackend b;
    b.seed = seed;
    b.schedule = schedule;
    b.predictor = std::make_shared<const ToyPredictor>(config, schedule, seed);
    b.codec = std::make_shared<const ToyCodec>(latent_channels, 8);
    b.encoder = std::make_shared<const ToyTextEncoder>(config.embedding_dim,
                                                       toy_encoder_seed(seed));
    return b;
}

}  // namespace facepaint
