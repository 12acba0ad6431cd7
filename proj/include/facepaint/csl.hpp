#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "facepaint/backend.hpp"
#include "facepaint/container.hpp"
#include "facepaint/optim.hpp"

namespace facepaint {

inline constexpr const char* kPlaceholder = "<*>";
inline constexpr const char* kDefaultTemplate = "a photo of a woman with <*> on face";

// Prompt text with exactly one placeholder slot.
class PromptTemplate {
public:
    PromptTemplate() : PromptTemplate(kDefaultTemplate) {}
    explicit PromptTemplate(std::string text, std::string placeholder = kPlaceholder);

    const std::string& text() const { return text_; }
    const std::string& placeholder() const { return placeholder_; }
    // Token index of the placeholder in the encoder's tokenization.
    int slot(const TextEncoder& encoder) const;
    // Template text with the placeholder replaced by `word`.
    std::string substitute(const std::string& word) const;

private:
    std::string text_;
    std::string placeholder_;
};

struct StyleMeta {
    int steps = 0;
    double learning_rate = 0.0;
    std::vector<std::string> reference_ids;
    std::uint64_t seed = 0;
    std::string optimizer = "sgd";
    std::string init_word;
    double final_loss = 0.0;
};

struct StyleToken {
    std::string placeholder = kPlaceholder;
    std::vector<double> embedding;
    StyleMeta meta;
};

// Tokenized template with the placeholder's embedding replaced by `embedding`.
PromptEmbedding embed_prompt(const PromptTemplate& tmpl, std::span<const double> embedding,
                             const TextEncoder& encoder);
PromptEmbedding embed_prompt(const PromptTemplate& tmpl, const StyleToken& token, const TextEncoder& encoder);

struct CslConfig {
    int steps = 5000;
    double learning_rate = 1e-5;
    int batch_size = 1;
    std::uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::sgd;
    std::string init_word = "makeup";
    int image_size = 512;  // references are center-cropped and resized to this
};

// Settings sized for the toy backend (500 steps, 64 px).
CslConfig toy_csl_config(std::uint64_t seed = 0);

struct CslSample {
    std::size_t reference = 0;
    int t = 0;
    LatentGrid noise;
};

// The sample stream learn_style consumes, reproduced for inspection.
std::vector<CslSample> draw_csl_samples(std::size_t reference_count, const ToyBackend& base, int latent_h,
                                        int latent_w, int count, std::uint64_t seed);

// Mean diffusion loss of `prompt` over the samples; grad_pooled receives
// d(loss)/d(pooled prompt embedding) when non-null.
double csl_loss(const ToyBackend& base, std::span<const LatentGrid> latents, const PromptEmbedding& prompt,
                std::span<const CslSample> samples, std::vector<double>* grad_pooled = nullptr);

// Same loss as a function of the placeholder embedding, with its gradient.
double csl_embedding_loss(const ToyBackend& base, std::span<const LatentGrid> latents, const PromptTemplate& tmpl,
                          std::span<const double> embedding, std::span<const CslSample> samples,
                          std::vector<double>* grad = nullptr);

struct CslResult {
    StyleToken token;
    std::vector<double> losses;  // per step, measured before that step's update
    std::vector<std::string> warnings;
};

using CslCallback = std::function<void(int step, double loss)>;

CslResult learn_style(std::span<const ImageGrid> references, std::span<const std::string> reference_ids,
                      const PromptTemplate& tmpl, const ToyBackend& base, const CslConfig& config,
                      const CslCallback& on_step = {});

// Decoded samples of the base model prompted with the template carrying `embedding`.
std::vector<ImageGrid> render_style_references(const ToyBackend& base, const PromptTemplate& tmpl,
                                               std::span<const double> embedding, int count, int size,
                                               std::uint64_t seed, int steps = 50);

Container token_container(const StyleToken& token);
StyleToken token_from_container(const Container& c, int expected_dim = 0);
void token_store(const StyleToken& token, const std::filesystem::path& path);
// expected_dim > 0 rejects tokens of another dimension with ShapeMismatch.
StyleToken token_load(const std::filesystem::path& path, int expected_dim = 0);

// Directory of tokens keyed by id: <dir>/<id>.token
class TokenLibrary {
public:
    explicit TokenLibrary(std::filesystem::path dir);
    void put(const std::string& id, const StyleToken& token) const;
    StyleToken get(const std::string& id, int expected_dim = 0) const;
    bool contains(const std::string& id) const;
    std::vector<std::string> ids() const;

private:
    std::filesystem::path path_for(const std::string& id) const;
    std::filesystem::path dir_;
};

}  // namespace facepaint
