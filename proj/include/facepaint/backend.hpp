#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "facepaint/grid.hpp"
#include "facepaint/params.hpp"
#include "facepaint/schedule.hpp"

namespace facepaint {

// Sequence of per-token embedding vectors produced by a text encoder.
struct PromptEmbedding {
    int dim = 0;
    std::vector<double> values;  // length x dim, row-major

    int length() const { return dim == 0 ? 0 : static_cast<int>(values.size()) / dim; }
    std::span<const double> token(int i) const {
        return std::span<const double>(values).subspan(static_cast<std::size_t>(i) * dim, dim);
    }
    std::span<double> token(int i) {
        return std::span<double>(values).subspan(static_cast<std::size_t>(i) * dim, dim);
    }
    std::vector<double> pooled() const;

    friend bool operator==(const PromptEmbedding&, const PromptEmbedding&) = default;
};

// Features a control branch injects into the denoiser: one residual at the
// middle stage, one at the upsampling stage (both h x w x hidden).
struct ControlResiduals {
    Grid mid;
    Grid up;
};

class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;

    virtual LatentGrid predict(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                               const ControlResiduals* residuals = nullptr) const = 0;
    virtual std::size_t parameter_count() const = 0;
    virtual int latent_channels() const = 0;
    virtual int hidden_channels() const = 0;
    virtual int embedding_dim() const = 0;
};

class LatentCodec {
public:
    virtual ~LatentCodec() = default;

    virtual LatentGrid encode(const ImageGrid& image) const = 0;
    virtual ImageGrid decode(const LatentGrid& latent) const = 0;
    virtual int resolution_factor() const = 0;
    virtual int latent_channels() const = 0;
};

class TextEncoder {
public:
    virtual ~TextEncoder() = default;

    virtual std::vector<std::string> tokenize(std::string_view text) const = 0;
    virtual PromptEmbedding embed_tokens(const std::vector<std::string>& tokens) const = 0;
    virtual std::vector<double> word_embedding(std::string_view word) const = 0;
    virtual int embedding_dim() const = 0;

    PromptEmbedding embed(std::string_view text) const { return embed_tokens(tokenize(text)); }
};

// ---------------------------------------------------------------------------
// Toy backend: a small convolutional denoiser, block-average latent codec and a
// hashed-vocabulary text encoder. Everything is deterministic in the seed.

struct ToyPredictorConfig {
    int latent_channels = 4;
    int hidden_channels = 8;
    int embedding_dim = 16;
    int time_dim = 8;
    // Spread of the Gaussian prior the analytic part of the denoiser assumes.
    double prior_std = 0.3;
};

struct ToyPredictorTrace;

struct ToyPredictorGrads {
    std::vector<double> params;  // laid out like ToyPredictor::params()
    std::vector<double> pooled;  // d / d(mean prompt embedding)
    Grid mid;                    // d / d(residuals.mid)
    Grid up;                     // d / d(residuals.up)
};

struct BackwardRequest {
    bool params = true;
    bool embedding = false;
    bool residuals = false;
};

// eps(z, e, t) = b_t / (a_t^2 s^2 + b_t^2) * (z - a_t * mu(e)) + conv_net(z, e, t)
//
// The first term is the exact noise posterior mean for latents drawn from
// N(mu(e), s^2); mu(e) is a smooth spatial pattern linear in the pooled prompt
// embedding. The conv net is FiLM-conditioned on the prompt and timestep and
// exposes the middle / upsampling injection sites used by a control branch.
class ToyPredictor final : public NoisePredictor {
public:
    ToyPredictor(ToyPredictorConfig config, NoiseSchedule schedule, std::uint64_t seed);
    ToyPredictor(ToyPredictorConfig config, NoiseSchedule schedule, ParamStore params);

    LatentGrid predict(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                       const ControlResiduals* residuals = nullptr) const override;
    std::size_t parameter_count() const override { return params_.size(); }
    int latent_channels() const override { return config_.latent_channels; }
    int hidden_channels() const override { return config_.hidden_channels; }
    int embedding_dim() const override { return config_.embedding_dim; }

    LatentGrid forward(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                       const ControlResiduals* residuals, ToyPredictorTrace& trace) const;
    ToyPredictorGrads backward(const ToyPredictorTrace& trace, const LatentGrid& d_eps,
                               BackwardRequest request) const;

    const ToyPredictorConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    const ParamStore& params() const { return params_; }
    ParamStore& mutable_params() { return params_; }

    // Prior mean pattern mu(e) on an h x w latent grid.
    LatentGrid prior_mean(std::span<const double> pooled, int h, int w) const;

    static ParamStore make_layout(const ToyPredictorConfig& config);

private:
    void index_blocks();

    ToyPredictorConfig config_;
    NoiseSchedule schedule_;
    ParamStore params_;
    std::size_t conv_in_w_ = 0, conv_in_b_ = 0, film_shift_ = 0, film_scale_ = 0, time_proj_ = 0;
    std::size_t mid_w_ = 0, mid_b_ = 0, up_w_ = 0, up_b_ = 0, out_w_ = 0, out_b_ = 0, prior_w_ = 0;
};

struct ToyPredictorTrace {
    Grid z;
    int t = 0;
    int prompt_length = 0;
    std::vector<double> pooled;
    std::vector<double> temb;
    Grid stem_conv;  // conv_in(z) before FiLM
    std::vector<double> scale;
    Grid a1, a2, a3;
    double coef_z = 0.0;   // b / D
    double coef_mu = 0.0;  // a * b / D
};

// Spatial basis value used by the prior mean for embedding component d.
double prior_basis(int d, int y, int x, int h, int w);

// Block-average encoder / nearest-neighbour decoder. Lossy on purpose: detail
// inside each factor x factor block is lost in a round trip.
class ToyCodec final : public LatentCodec {
public:
    explicit ToyCodec(int latent_channels = 4, int factor = 8);

    LatentGrid encode(const ImageGrid& image) const override;
    ImageGrid decode(const LatentGrid& latent) const override;
    int resolution_factor() const override { return factor_; }
    int latent_channels() const override { return channels_; }

private:
    int channels_;
    int factor_;
};

// Whitespace tokenizer with begin/end markers; every word maps to a fixed
// Gaussian vector derived from (seed, word). No cross-token mixing, so a
// placeholder splice only changes its own slot.
class ToyTextEncoder final : public TextEncoder {
public:
    ToyTextEncoder(int embedding_dim, std::uint64_t seed);

    std::vector<std::string> tokenize(std::string_view text) const override;
    PromptEmbedding embed_tokens(const std::vector<std::string>& tokens) const override;
    std::vector<double> word_embedding(std::string_view word) const override;
    int embedding_dim() const override { return dim_; }

    static constexpr std::string_view kBegin = "<|startoftext|>";
    static constexpr std::string_view kEnd = "<|endoftext|>";

private:
    int dim_;
    std::uint64_t seed_;
};

struct ToyBackend {
    std::uint64_t seed = 0;
    NoiseSchedule schedule;
    std::shared_ptr<const ToyPredictor> predictor;
    std::shared_ptr<const ToyCodec> codec;
    std::shared_ptr<const ToyTextEncoder> encoder;
};

ToyBackend toy_backend(std::uint64_t seed, int latent_channels = 4,
                       const NoiseSchedule& schedule = make_schedule());

// Text-encoder seed derived from a backend seed.
std::uint64_t toy_encoder_seed(std::uint64_t backend_seed);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

}  // namespace facepaint
