#include "facepaint/csl.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <regex>
#include <sstream>

#include "facepaint/checkpoint.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/image_io.hpp"
#include "facepaint/rng.hpp"
#include "facepaint/schedule.hpp"

namespace facepaint {

namespace fs = std::filesystem;

PromptTemplate::PromptTemplate(std::string text, std::string placeholder)
    : text_(std::move(text)), placeholder_(std::move(placeholder)) {
    if (placeholder_.empty()) throw InvalidArgument("placeholder must not be empty");
    std::size_t count = 0;
    for (std::size_t pos = text_.find(placeholder_); pos != std::string::npos;
         pos = text_.find(placeholder_, pos + placeholder_.size())) {
        ++count;
    }
    if (count != 1) {
        throw InvalidArgument("prompt template must contain exactly one '" + placeholder_ + "', found " +
                              std::to_string(count));
    }
}

int PromptTemplate::slot(const TextEncoder& encoder) const {
    const auto tokens = encoder.tokenize(text_);
    int found = -1;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == placeholder_) {
            if (found >= 0) throw InvalidArgument("placeholder appears in more than one token");
            found = static_cast<int>(i);
        }
    }
    // e.g. "<*>," glued to punctuation never becomes its own token
    if (found < 0) throw InvalidArgument("placeholder '" + placeholder_ + "' is not a separate token");
    return found;
}

std::string PromptTemplate::substitute(const std::string& word) const {
    std::string out = text_;
    out.replace(out.find(placeholder_), placeholder_.size(), word);
    return out;
}

PromptEmbedding embed_prompt(const PromptTemplate& tmpl, std::span<const double> embedding,
                             const TextEncoder& encoder) {
    if (static_cast<int>(embedding.size()) != encoder.embedding_dim()) {
        throw ShapeMismatch("token embedding has dimension " + std::to_string(embedding.size()) +
                            ", encoder expects " + std::to_string(encoder.embedding_dim()));
    }
    const int slot = tmpl.slot(encoder);
    PromptEmbedding e = encoder.embed_tokens(encoder.tokenize(tmpl.text()));
    std::copy(embedding.begin(), embedding.end(), e.token(slot).begin());
    return e;
}

PromptEmbedding embed_prompt(const PromptTemplate& tmpl, const StyleToken& token, const TextEncoder& encoder) {
    return embed_prompt(tmpl, token.embedding, encoder);
}

CslConfig toy_csl_config(std::uint64_t seed) {
    CslConfig c;
    c.steps = 500;
    c.learning_rate = 2.0;
    c.seed = seed;
    c.image_size = 64;
    return c;
}

namespace {

// Timesteps follow a golden-ratio sequence with a random offset: uniform
// marginal, but any window of consecutive steps covers the schedule evenly.
class SampleStream {
public:
    SampleStream(std::uint64_t seed, std::size_t references, int steps)
        : rng_(seed), references_(static_cast<int>(references)), steps_(steps), phase_(rng_.uniform()) {}

    CslSample next(int h, int w, int c) {
        CslSample s;
        s.reference = static_cast<std::size_t>(rng_.uniform_int(0, references_ - 1));
        phase_ += 0.6180339887498949;
        phase_ -= std::floor(phase_);
        s.t = std::min(steps_ - 1, static_cast<int>(phase_ * steps_));
        s.noise = rng_.normal_grid(h, w, c);
        return s;
    }

private:
    Rng rng_;
    int references_;
    int steps_;
    double phase_;
};

}  // namespace

std::vector<CslSample> draw_csl_samples(std::size_t reference_count, const ToyBackend& base, int latent_h,
                                        int latent_w, int count, std::uint64_t seed) {
    if (reference_count == 0) throw InvalidArgument("no references to sample from");
    SampleStream stream(seed, reference_count, base.schedule.num_train_steps);
    std::vector<CslSample> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        out.push_back(stream.next(latent_h, latent_w, base.predictor->latent_channels()));
    }
    return out;
}

double csl_loss(const ToyBackend& base, std::span<const LatentGrid> latents, const PromptEmbedding& prompt,
                std::span<const CslSample> samples, std::vector<double>* grad_pooled) {
    if (samples.empty()) throw InvalidArgument("csl_loss needs at least one sample");
    if (grad_pooled) grad_pooled->assign(prompt.dim, 0.0);
    const double weight = 1.0 / static_cast<double>(samples.size());
    double total = 0.0;
    for (const auto& s : samples) {
        const LatentGrid z_t = forward_diffuse(latents[s.reference], s.t, s.noise, base.schedule);
        ToyPredictorTrace trace;
        const LatentGrid eps_hat = base.predictor->forward(z_t, prompt, s.t, nullptr, trace);
        const double n = static_cast<double>(eps_hat.size());
        LatentGrid d_eps(eps_hat.height(), eps_hat.width(), eps_hat.channels());
        double loss = 0.0;
        for (std::size_t i = 0; i < eps_hat.size(); ++i) {
            const double diff = eps_hat[i] - s.noise[i];
            loss += diff * diff / n;
            d_eps[i] = weight * 2.0 * diff / n;
        }
        if (!std::isfinite(loss)) {
            throw NonFiniteValue("non-finite style loss (reference " + std::to_string(s.reference) + ", t " +
                                 std::to_string(s.t) + ")");
        }
        total += loss * weight;
        if (grad_pooled) {
            const auto g = base.predictor->backward(trace, d_eps, {false, true, false});
            for (int d = 0; d < prompt.dim; ++d) (*grad_pooled)[d] += g.pooled[d];
        }
    }
    return total;
}

double csl_embedding_loss(const ToyBackend& base, std::span<const LatentGrid> latents, const PromptTemplate& tmpl,
                          std::span<const double> embedding, std::span<const CslSample> samples,
                          std::vector<double>* grad) {
    const PromptEmbedding prompt = embed_prompt(tmpl, embedding, *base.encoder);
    std::vector<double> g_pooled;
    const double loss = csl_loss(base, latents, prompt, samples, grad ? &g_pooled : nullptr);
    if (grad) {
        // the pooled embedding is the token mean, so the slot receives 1/length of it
        grad->resize(g_pooled.size());
        const double inv = 1.0 / prompt.length();
        for (std::size_t d = 0; d < g_pooled.size(); ++d) (*grad)[d] = g_pooled[d] * inv;
    }
    return loss;
}

CslResult learn_style(std::span<const ImageGrid> references, std::span<const std::string> reference_ids,
                      const PromptTemplate& tmpl, const ToyBackend& base, const CslConfig& config,
                      const CslCallback& on_step) {
    if (references.empty()) throw InvalidArgument("style learning needs at least one reference image");
    if (config.steps < 1 || config.batch_size < 1 || !(config.learning_rate > 0.0) || config.image_size < 1) {
        throw InvalidArgument("style learning settings must all be positive");
    }
    if (!reference_ids.empty() && reference_ids.size() != references.size()) {
        throw InvalidArgument("reference ids do not match the reference images");
    }
    CslResult result;
    if (references.size() < 3 || references.size() > 5) {
        result.warnings.push_back("got " + std::to_string(references.size()) +
                                  " reference images; 3 to 5 are recommended");
        spdlog::warn("{}", result.warnings.back());
    }

    std::vector<LatentGrid> latents;
    for (const auto& ref : references) latents.push_back(base.codec->encode(prepare_image(ref, config.image_size)));
    const LatentGrid& shape = latents.front();

    std::vector<double> v = base.encoder->word_embedding(config.init_word);
    Optimizer opt(config.optimizer, config.learning_rate);
    // drawn lazily from one stream so the sequence matches draw_csl_samples(seed)
    SampleStream stream(config.seed, latents.size(), base.schedule.num_train_steps);
    std::vector<CslSample> batch(config.batch_size);
    std::vector<double> grad;
    result.losses.reserve(config.steps);
    for (int step = 0; step < config.steps; ++step) {
        for (auto& s : batch) s = stream.next(shape.height(), shape.width(), shape.channels());
        double loss = 0.0;
        try {
            loss = csl_embedding_loss(base, latents, tmpl, v, batch, &grad);
        } catch (const NonFiniteValue& e) {
            throw NonFiniteValue(std::string(e.what()) + " at step " + std::to_string(step));
        }
        opt.step(v, grad);
        result.losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }

    result.token.placeholder = tmpl.placeholder();
    result.token.embedding = std::move(v);
    auto& meta = result.token.meta;
    meta.steps = config.steps;
    meta.learning_rate = config.learning_rate;
    meta.seed = config.seed;
    meta.optimizer = to_string(config.optimizer);
    meta.init_word = config.init_word;
    meta.final_loss = result.losses.back();
    for (std::size_t i = 0; i < references.size(); ++i) {
        meta.reference_ids.push_back(reference_ids.empty() ? "ref" + std::to_string(i) : reference_ids[i]);
    }
    return result;
}

std::vector<ImageGrid> render_style_references(const ToyBackend& base, const PromptTemplate& tmpl,
                                               std::span<const double> embedding, int count, int size,
                                               std::uint64_t seed, int steps) {
    const int factor = base.codec->resolution_factor();
    if (size % factor != 0) throw ShapeMismatch("image size must be a multiple of the codec factor");
    const PromptEmbedding prompt = embed_prompt(tmpl, embedding, *base.encoder);
    const auto timesteps = inference_timesteps(base.schedule, steps);
    Rng rng(seed);
    std::vector<ImageGrid> out;
    for (int i = 0; i < count; ++i) {
        LatentGrid z = rng.normal_grid(size / factor, size / factor, base.predictor->latent_channels());
        for (std::size_t k = 0; k < timesteps.size(); ++k) {
            const int t = timesteps[k];
            const int t_prev = k + 1 < timesteps.size() ? timesteps[k + 1] : kCleanStep;
            z = reverse_step(z, base.predictor->predict(z, prompt, t), t, t_prev, base.schedule);
        }
        out.push_back(quantize8(base.codec->decode(z)));
    }
    return out;
}

Container token_container(const StyleToken& token) {
    if (token.embedding.empty()) throw InvalidArgument("token has no embedding");
    for (double v : token.embedding) {
        if (!std::isfinite(v)) throw NonFiniteValue("token embedding is not finite");
    }
    Container c;
    c.set_string("kind", "token");
    c.set_string("placeholder", token.placeholder);
    c.set_int("dim", static_cast<std::int64_t>(token.embedding.size()));
    c.set_tensor("embedding", {static_cast<std::uint32_t>(token.embedding.size())}, token.embedding);
    c.set_int("meta/steps", token.meta.steps);
    put_scalar(c, "meta/learning_rate", token.meta.learning_rate);
    c.set_int("meta/seed", static_cast<std::int64_t>(token.meta.seed));
    c.set_string("meta/optimizer", token.meta.optimizer);
    c.set_string("meta/init_word", token.meta.init_word);
    put_scalar(c, "meta/final_loss", token.meta.final_loss);
    std::string ids;
    for (const auto& id : token.meta.reference_ids) ids += id + "\n";
    c.set_string("meta/reference_ids", ids);
    return c;
}

StyleToken token_from_container(const Container& c, int expected_dim) {
    require_kind(c, "token");
    StyleToken t;
    t.placeholder = c.string("placeholder");
    const auto dim = c.integer("dim");
    t.embedding = c.tensor("embedding").values;
    if (static_cast<std::int64_t>(t.embedding.size()) != dim) throw FormatError("token dimension field disagrees");
    if (expected_dim > 0 && dim != expected_dim) {
        throw ShapeMismatch("token has dimension " + std::to_string(dim) + ", expected " +
                            std::to_string(expected_dim));
    }
    t.meta.steps = static_cast<int>(c.integer("meta/steps"));
    t.meta.learning_rate = get_scalar(c, "meta/learning_rate");
    t.meta.seed = static_cast<std::uint64_t>(c.integer("meta/seed"));
    t.meta.optimizer = c.string("meta/optimizer");
    t.meta.init_word = c.string("meta/init_word");
    t.meta.final_loss = get_scalar(c, "meta/final_loss");
    std::istringstream ids(c.string("meta/reference_ids"));
    for (std::string line; std::getline(ids, line);) t.meta.reference_ids.push_back(line);
    return t;
}

void token_store(const StyleToken& token, const fs::path& path) { token_container(token).write(path); }

StyleToken token_load(const fs::path& path, int expected_dim) {
    return token_from_container(Container::read(path), expected_dim);
}

TokenLibrary::TokenLibrary(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create token directory " + dir_.string());
}

fs::path TokenLibrary::path_for(const std::string& id) const {
    static const std::regex valid("[A-Za-z0-9_-]{1,128}");
    if (!std::regex_match(id, valid)) throw InvalidArgument("invalid token id '" + id + "'");
    return dir_ / (id + ".token");
}

void TokenLibrary::put(const std::string& id, const StyleToken& token) const { token_store(token, path_for(id)); }

StyleToken TokenLibrary::get(const std::string& id, int expected_dim) const {
    const fs::path p = path_for(id);
    if (!fs::exists(p)) throw IoError("no token with id '" + id + "'");
    return token_load(p, expected_dim);
}

bool TokenLibrary::contains(const std::string& id) const { return fs::exists(path_for(id)); }

std::vector<std::string> TokenLibrary::ids() const {
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir_)) {
        if (e.path().extension() == ".token") out.push_back(e.path().stem().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace facepaint
