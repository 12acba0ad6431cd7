#include "facepaint/maip.hpp"

#include <algorithm>
#include <cmath>

#include "facepaint/errors.hpp"
#include "facepaint/schedule.hpp"

namespace facepaint {

using nlohmann::json;

void validate(const GenerationConfig& config, const NoiseSchedule& schedule) {
    if (!std::isfinite(config.guidance_scale) || config.guidance_scale < 0.0) {
        throw InvalidArgument("guidance scale must be finite and >= 0");
    }
    if (config.num_inference_steps < 1 || config.num_inference_steps > schedule.num_train_steps) {
        throw InvalidArgument("inference steps must be in [1, " + std::to_string(schedule.num_train_steps) + "]");
    }
}

Mask downsample_mask(const Mask& mask, int factor) {
    if (factor < 1) throw InvalidArgument("downsample factor must be positive");
    if (mask.height() % factor != 0 || mask.width() % factor != 0) {
        throw ShapeMismatch("mask " + mask.values.shape_string() + " is not divisible by " + std::to_string(factor));
    }
    const int h = mask.height() / factor, w = mask.width() / factor;
    Mask out = make_mask(h, w, MaskKind::latent_downsampled);
    const double inv = 1.0 / (static_cast<double>(factor) * factor);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = 0; dy < factor; ++dy) {
                for (int dx = 0; dx < factor; ++dx) s += mask(y * factor + dy, x * factor + dx);
            }
            out.values.at(y, x, 0) = std::clamp(s * inv, 0.0, 1.0);
        }
    }
    return out;
}

LatentGrid cfg_combine(const LatentGrid& eps_uncond, const LatentGrid& eps_cond, double g) {
    require_same_shape(eps_uncond, eps_cond, "cfg_combine");
    LatentGrid out(eps_cond.height(), eps_cond.width(), eps_cond.channels());
    const double keep = 1.0 - g;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * eps_uncond[i] + g * eps_cond[i];
    return out;
}

LatentGrid noised_condition(const LatentGrid& c, int t, const NoiseSchedule& schedule, Rng& rng) {
    const LatentGrid eps = rng.normal_grid(c.height(), c.width(), c.channels());
    return forward_diffuse(c, eps, schedule.alpha_bar(t));
}

LatentGrid masked_merge(const LatentGrid& z_star, const LatentGrid& c_noised, const Mask& latent_mask) {
    require_same_shape(z_star, c_noised, "masked_merge");
    if (latent_mask.height() != z_star.height() || latent_mask.width() != z_star.width()) {
        throw ShapeMismatch("masked_merge: mask " + latent_mask.values.shape_string() + " vs latent " +
                            z_star.shape_string());
    }
    LatentGrid out(z_star.height(), z_star.width(), z_star.channels());
    for (int y = 0; y < z_star.height(); ++y) {
        for (int x = 0; x < z_star.width(); ++x) {
            const double m = latent_mask(y, x);
            for (int c = 0; c < z_star.channels(); ++c) {
                out.at(y, x, c) = z_star.at(y, x, c) * m + c_noised.at(y, x, c) * (1.0 - m);
            }
        }
    }
    return out;
}

LatentGrid run_sampler(const SamplerInputs& in, const ControlBranch* branch, const ToyBackend& base,
                       const GenerationConfig& config, const StepObserver& observer,
                       std::vector<StepDiagnostics>* diagnostics, int max_steps) {
    validate(config, base.schedule);
    if (config.use_control && branch == nullptr) throw InvalidArgument("control is on but no branch was given");
    require_same_shape(in.known, in.condition, "sampler condition");
    if (in.latent_mask.height() != in.known.height() || in.latent_mask.width() != in.known.width()) {
        throw ShapeMismatch("latent mask " + in.latent_mask.values.shape_string() + " vs latent " +
                            in.known.shape_string());
    }

    auto predict = [&](const LatentGrid& z, const PromptEmbedding& prompt, int t) {
        if (config.use_control) return controlled_eps(*branch, *base.predictor, z, prompt, t, in.condition);
        return base.predictor->predict(z, prompt, t);
    };

    const auto timesteps = inference_timesteps(base.schedule, config.num_inference_steps);
    const int steps = max_steps < 0 ? static_cast<int>(timesteps.size())
                                    : std::min(max_steps, static_cast<int>(timesteps.size()));
    // one stream: initial noise first, then one condition draw per step
    Rng rng(config.seed);
    LatentGrid z = rng.normal_grid(in.known.height(), in.known.width(), in.known.channels());
    for (int k = 0; k < steps; ++k) {
        const int t = timesteps[k];
        const int t_prev = k + 1 < static_cast<int>(timesteps.size()) ? timesteps[k + 1] : kCleanStep;
        const LatentGrid eps_uncond = predict(z, in.uncond_prompt, t);
        const LatentGrid eps_cond = predict(z, in.cond_prompt, t);
        const LatentGrid eps = cfg_combine(eps_uncond, eps_cond, config.guidance_scale);
        const LatentGrid z_star = reverse_step(z, eps, t, t_prev, base.schedule);
        const LatentGrid c_noised = noised_condition(in.known, t_prev, base.schedule, rng);
        LatentGrid z_next = config.use_mask_merge ? masked_merge(z_star, c_noised, in.latent_mask) : z_star;
        if (!z_next.all_finite()) {
            throw NonFiniteValue("latent became non-finite at step " + std::to_string(k) + " (t " +
                                 std::to_string(t) + ")");
        }
        if (diagnostics) {
            diagnostics->push_back({t, t_prev, std::sqrt(z.squared_norm()), std::sqrt(eps_uncond.squared_norm()),
                                    std::sqrt(eps_cond.squared_norm()), std::sqrt(eps.squared_norm())});
        }
        if (observer) observer({k, t, t_prev, z, eps_uncond, eps_cond, eps, z_star, c_noised, z_next});
        z = std::move(z_next);
    }
    return z;
}

Mask inference_mask(const ImageGrid& naked, const FaceParser& parser, const GenerationConfig& config) {
    const Mask binary = parse_face(parser, naked);
    const BlurParams blur = config.blur.value_or(default_blur(std::min(naked.height(), naked.width())));
    return soft_face_mask(binary, blur);
}

namespace {

void require_face_shape(const ImageGrid& naked, int factor) {
    if (naked.channels() != 3) throw ShapeMismatch("face image must have 3 channels");
    if (naked.height() % factor != 0 || naked.width() % factor != 0) {
        throw ShapeMismatch("face image " + naked.shape_string() + " is not a multiple of the codec factor " +
                            std::to_string(factor));
    }
}

}  // namespace

SamplerInputs prepare_sampler_inputs(const ImageGrid& naked, const Mask& mask, const StyleToken& token,
                                     const ControlBranch& branch, const ToyBackend& base,
                                     const GenerationConfig& config, const PromptTemplate& tmpl) {
    const int factor = base.codec->resolution_factor();
    require_face_shape(naked, factor);
    const auto& bc = branch.config();
    if (config.use_control &&
        (bc.factor != factor || bc.latent_channels != base.codec->latent_channels() ||
         bc.embedding_dim != base.encoder->embedding_dim())) {
        throw ShapeMismatch("control branch does not match the base model");
    }
    if (static_cast<int>(token.embedding.size()) != base.encoder->embedding_dim()) {
        throw ShapeMismatch("style token has dimension " + std::to_string(token.embedding.size()) +
                            ", encoder expects " + std::to_string(base.encoder->embedding_dim()));
    }

    SamplerInputs in;
    in.known = base.codec->encode(naked);
    in.condition = config.use_control ? branch.encode_condition(naked) : in.known;
    in.latent_mask = downsample_mask(mask, factor);
    in.uncond_prompt = base.encoder->embed("");
    if (config.use_style) {
        in.cond_prompt = embed_prompt(tmpl, token, *base.encoder);
    } else {
        const std::string word = token.meta.init_word.empty() ? "makeup" : token.meta.init_word;
        in.cond_prompt = base.encoder->embed(tmpl.substitute(word));
    }
    return in;
}

GenerationResult generate(const ImageGrid& naked, const StyleToken& token, const ControlBranch& branch,
                          const ToyBackend& base, const GenerationConfig& config,
                          const GenerationOptions& options) {
    validate(config, base.schedule);
    require_face_shape(naked, base.codec->resolution_factor());
    const ToyFaceParser default_parser;
    const FaceParser& parser = options.parser ? *options.parser : default_parser;

    GenerationResult r;
    r.mask = inference_mask(naked, parser, config);
    const SamplerInputs in =
        prepare_sampler_inputs(naked, r.mask, token, branch, base, config, options.prompt_template);
    r.latent_mask = in.latent_mask;

    const LatentGrid z0 = run_sampler(in, &branch, base, config, options.on_step, &r.diagnostics.steps);
    r.gen = base.codec->decode(z0);
    r.final_image = config.use_final_blend ? blend_naked(r.gen, naked, r.mask) : r.gen;

    auto& d = r.diagnostics;
    d.config = config;
    d.height = naked.height();
    d.width = naked.width();
    d.mask_mean = r.mask.mean();
    d.latent_mask_mean = r.latent_mask.mean();
    std::size_t support = 0;
    for (double m : r.mask.values.values()) support += m > 0.0;
    d.mask_support = static_cast<double>(support) / static_cast<double>(r.mask.values.size());
    return r;
}

json to_json(const GenerationConfig& c) {
    json j = {{"guidance_scale", c.guidance_scale},
              {"num_inference_steps", c.num_inference_steps},
              {"seed", c.seed},
              {"use_final_blend", c.use_final_blend},
              {"use_mask_merge", c.use_mask_merge},
              {"use_control", c.use_control},
              {"use_style", c.use_style}};
    if (c.blur) j["blur"] = {{"kernel_size", c.blur->kernel_size}, {"sigma", c.blur->sigma}};
    return j;
}

GenerationConfig generation_config_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("generation config must be a JSON object");
    GenerationConfig c;
    try {
        c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
        c.num_inference_steps = j.value("num_inference_steps", c.num_inference_steps);
        c.seed = j.value("seed", c.seed);
        c.use_final_blend = j.value("use_final_blend", c.use_final_blend);
        c.use_mask_merge = j.value("use_mask_merge", c.use_mask_merge);
        c.use_control = j.value("use_control", c.use_control);
        c.use_style = j.value("use_style", c.use_style);
        if (j.contains("blur")) c.blur = BlurParams{j.at("blur").at("kernel_size"), j.at("blur").at("sigma")};
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("bad generation config: ") + e.what());
    }
    return c;
}

json to_json(const GenerationDiagnostics& d) {
    json steps = json::array();
    for (const auto& s : d.steps) {
        steps.push_back({{"t", s.t},
                         {"t_prev", s.t_prev},
                         {"z_norm", s.z_norm},
                         {"eps_uncond_norm", s.eps_uncond_norm},
                         {"eps_cond_norm", s.eps_cond_norm},
                         {"eps_norm", s.eps_norm}});
    }
    return {{"config", to_json(d.config)},
            {"height", d.height},
            {"width", d.width},
            {"mask", {{"mean", d.mask_mean}, {"support", d.mask_support}, {"latent_mean", d.latent_mask_mean}}},
            {"steps", steps}};
}

}  // namespace facepaint
