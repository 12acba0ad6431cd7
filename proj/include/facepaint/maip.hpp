#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "facepaint/backend.hpp"
#include "facepaint/csl.hpp"
#include "facepaint/dataprep.hpp"
#include "facepaint/mafor.hpp"
#include "facepaint/rng.hpp"

namespace facepaint {

struct GenerationConfig {
    double guidance_scale = 7.5;
    int num_inference_steps = 50;
    std::uint64_t seed = 0;
    bool use_final_blend = true;  // paste generated pixels back only inside the face mask
    bool use_mask_merge = true;  // per-step latent replacement outside the face
    bool use_control = true;     // inject the control branch residuals
    bool use_style = true;       // off: the placeholder is replaced by the token's init word
    std::optional<BlurParams> blur;  // default_blur(image size) when unset
};

// Throws InvalidArgument for a negative or non-finite guidance scale or a step
// count outside [1, num_train_steps].
void validate(const GenerationConfig& config, const NoiseSchedule& schedule);

// Area-average pooling over factor x factor blocks.
Mask downsample_mask(const Mask& mask, int factor);

// (1 - g) * eps_uncond + g * eps_cond; exact at g = 0 and g = 1.
LatentGrid cfg_combine(const LatentGrid& eps_uncond, const LatentGrid& eps_cond, double g);

// Known latent diffused to timestep t with fresh noise from `rng`.
LatentGrid noised_condition(const LatentGrid& c, int t, const NoiseSchedule& schedule, Rng& rng);

// z_star * M + c_noised * (1 - M), M broadcast over channels.
LatentGrid masked_merge(const LatentGrid& z_star, const LatentGrid& c_noised, const Mask& latent_mask);

struct SamplerInputs {
    LatentGrid known;       // codec encoding of the naked face, merged in outside the face
    LatentGrid condition;   // control branch condition
    Mask latent_mask;       // face mask at latent resolution
    PromptEmbedding uncond_prompt;
    PromptEmbedding cond_prompt;
};

// Everything a single denoising step computed. References are valid only
// during the observer call.
struct StepRecord {
    int index = 0;
    int t = 0;
    int t_prev = 0;
    const LatentGrid& z_t;
    const LatentGrid& eps_uncond;
    const LatentGrid& eps_cond;
    const LatentGrid& eps;
    const LatentGrid& z_star;
    const LatentGrid& c_noised;
    const LatentGrid& z_next;
};

using StepObserver = std::function<void(const StepRecord&)>;

struct StepDiagnostics {
    int t = 0;
    int t_prev = 0;
    double z_norm = 0.0;
    double eps_uncond_norm = 0.0;
    double eps_cond_norm = 0.0;
    double eps_norm = 0.0;
};

// Runs the denoising loop from seeded noise. max_steps >= 0 stops early and
// returns the latent after that many steps. branch may be null when
// use_control is off.
LatentGrid run_sampler(const SamplerInputs& inputs, const ControlBranch* branch, const ToyBackend& base,
                       const GenerationConfig& config, const StepObserver& observer = {},
                       std::vector<StepDiagnostics>* diagnostics = nullptr, int max_steps = -1);

struct GenerationDiagnostics {
    GenerationConfig config;
    std::vector<StepDiagnostics> steps;
    double mask_mean = 0.0;
    double mask_support = 0.0;  // fraction of pixels with M > 0
    double latent_mask_mean = 0.0;
    int height = 0;
    int width = 0;
};

struct GenerationResult {
    ImageGrid final_image;
    ImageGrid gen;  // decoded latent before the final blend
    Mask mask;
    Mask latent_mask;
    GenerationDiagnostics diagnostics;
};

struct GenerationOptions {
    const FaceParser* parser = nullptr;  // ToyFaceParser when null
    PromptTemplate prompt_template;
    StepObserver on_step;
};

GenerationResult generate(const ImageGrid& naked, const StyleToken& token, const ControlBranch& branch,
                          const ToyBackend& base, const GenerationConfig& config,
                          const GenerationOptions& options = {});

// Builds the sampler inputs generate() uses (mask, known latent, condition, prompts).
SamplerInputs prepare_sampler_inputs(const ImageGrid& naked, const Mask& mask, const StyleToken& token,
                                     const ControlBranch& branch, const ToyBackend& base,
                                     const GenerationConfig& config, const PromptTemplate& tmpl = {});

// Face mask generate() uses: parsed, blurred and snapped to 8-bit levels.
Mask inference_mask(const ImageGrid& naked, const FaceParser& parser, const GenerationConfig& config);

nlohmann::json to_json(const GenerationConfig& config);
GenerationConfig generation_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GenerationDiagnostics& diagnostics);

}  // namespace facepaint
