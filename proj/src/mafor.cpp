#include "facepaint/mafor.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "facepaint/checkpoint.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/nn.hpp"
#include "facepaint/rng.hpp"
#include "facepaint/schedule.hpp"
#include "film_stem.hpp"

namespace facepaint {

namespace {

constexpr int kKernel = 3;

detail::FilmStemBlocks branch_stem(const ParamStore& p) {
    return {p.find("ctrl.conv_in.w"), p.find("ctrl.conv_in.b"), p.find("ctrl.film.shift"),
            p.find("ctrl.film.scale"), p.find("ctrl.time.proj")};
}

int stage_count(int factor) {
    if (factor < 2 || !std::has_single_bit(static_cast<unsigned>(factor))) {
        throw InvalidArgument("condition factor must be a power of two >= 2, got " + std::to_string(factor));
    }
    return std::countr_zero(static_cast<unsigned>(factor));
}

ControlBranchConfig config_from_base(const ToyPredictor& base, bool zero_init, int factor) {
    ControlBranchConfig c;
    c.latent_channels = base.config().latent_channels;
    c.hidden_channels = base.config().hidden_channels;
    c.embedding_dim = base.config().embedding_dim;
    c.time_dim = base.config().time_dim;
    c.factor = factor;
    c.zero_init = zero_init;
    return c;
}

void add_into(Grid& acc, const Grid& g) {
    if (acc.empty()) {
        acc = g;
        return;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace

ParamStore ControlBranch::make_layout(const ControlBranchConfig& c) {
    ParamStore store;
    const int n = stage_count(c.factor);
    int in = 3;
    for (int s = 0; s < n; ++s) {
        const int out = s + 1 == n ? c.latent_channels : c.condition_channels;
        store.add("cond." + std::to_string(s) + ".w", {out, in, kKernel, kKernel});
        store.add("cond." + std::to_string(s) + ".b", {out});
        in = out;
    }
    detail::add_film_stem(store, "ctrl.", c.latent_channels, c.hidden_channels, c.embedding_dim, c.time_dim);
    store.add("hint.w", {c.hidden_channels, c.latent_channels, 1, 1});
    store.add("hint.b", {c.hidden_channels});
    store.add("ctrl.mid.w", {c.hidden_channels, c.hidden_channels, kKernel, kKernel});
    store.add("ctrl.mid.b", {c.hidden_channels});
    store.add("zero_mid.w", {c.hidden_channels, c.hidden_channels, 1, 1});
    store.add("zero_mid.b", {c.hidden_channels});
    store.add("zero_up.w", {c.hidden_channels, c.hidden_channels, 1, 1});
    store.add("zero_up.b", {c.hidden_channels});
    return store;
}

ControlBranch::ControlBranch(const ToyPredictor& base, std::uint64_t seed, bool zero_init, int factor)
    : config_(config_from_base(base, zero_init, factor)), params_(make_layout(config_)) {
    index_blocks();
    Rng rng(seed);
    const ParamStore& bp = base.params();
    for (std::size_t i = 0; i < params_.blocks().size(); ++i) {
        const auto& block = params_.blocks()[i];
        auto values = params_.block(i);
        if (block.name.starts_with("ctrl.")) {
            const auto src = bp.block(bp.find(block.name.substr(5)));
            std::copy(src.begin(), src.end(), values.begin());
        } else if (block.name.starts_with("cond.") && block.name.ends_with(".w")) {
            const double fan_in = block.shape[1] * kKernel * kKernel;
            for (double& v : values) v = rng.normal() / std::sqrt(fan_in);
        } else if (!zero_init && block.name.ends_with(".w")) {
            const double fan_in = block.shape[1];
            for (double& v : values) v = 0.1 * rng.normal() / std::sqrt(fan_in);
        }
    }
}

ControlBranch::ControlBranch(ControlBranchConfig config, ParamStore params)
    : config_(config), params_(std::move(params)) {
    const ParamStore layout = make_layout(config_);
    if (layout.size() != params_.size() || layout.blocks().size() != params_.blocks().size()) {
        throw ShapeMismatch("branch parameters do not match configuration");
    }
    index_blocks();
}

int ControlBranch::stages() const { return static_cast<int>(cond_w_.size()); }

void ControlBranch::index_blocks() {
    const int n = stage_count(config_.factor);
    cond_w_.clear();
    cond_b_.clear();
    for (int s = 0; s < n; ++s) {
        cond_w_.push_back(params_.find("cond." + std::to_string(s) + ".w"));
        cond_b_.push_back(params_.find("cond." + std::to_string(s) + ".b"));
    }
    hint_w_ = params_.find("hint.w");
    hint_b_ = params_.find("hint.b");
    mid_w_ = params_.find("ctrl.mid.w");
    mid_b_ = params_.find("ctrl.mid.b");
    zero_mid_w_ = params_.find("zero_mid.w");
    zero_mid_b_ = params_.find("zero_mid.b");
    zero_up_w_ = params_.find("zero_up.w");
    zero_up_b_ = params_.find("zero_up.b");
}

LatentGrid ControlBranch::encode_condition(const ImageGrid& naked, ConditionTrace* trace) const {
    if (naked.channels() != 3) throw ShapeMismatch("condition image must be RGB, got " + naked.shape_string());
    if (naked.height() % config_.factor != 0 || naked.width() % config_.factor != 0 || naked.empty()) {
        throw ShapeMismatch("condition image " + naked.shape_string() + " is not a multiple of factor " +
                            std::to_string(config_.factor));
    }
    Grid x = naked;
    for (double& v : x.values()) v = 2.0 * v - 1.0;
    if (trace) {
        trace->inputs.clear();
        trace->outputs.clear();
    }
    const int n = stages();
    for (int s = 0; s < n; ++s) {
        x = nn::avg_pool(x, 2);
        const int out = s + 1 == n ? config_.latent_channels : config_.condition_channels;
        Grid y = nn::conv2d(x, params_.block(cond_w_[s]), params_.block(cond_b_[s]), out, kKernel);
        if (s + 1 < n) y = nn::tanh(y);
        if (trace) {
            trace->inputs.push_back(x);
            trace->outputs.push_back(y);
        }
        x = std::move(y);
    }
    return x;
}

void ControlBranch::backward_condition(const ConditionTrace& trace, const LatentGrid& d_condition,
                                       std::vector<double>& grads) const {
    const int n = stages();
    Grid d = d_condition;
    for (int s = n - 1; s >= 0; --s) {
        const int out = s + 1 == n ? config_.latent_channels : config_.condition_channels;
        if (s + 1 < n) d = nn::tanh_backward(trace.outputs[s], d);
        Grid d_in;
        nn::conv2d_backward(trace.inputs[s], params_.block(cond_w_[s]), out, kKernel, d, s > 0 ? &d_in : nullptr,
                            params_.slice(grads, cond_w_[s]), params_.slice(grads, cond_b_[s]));
        if (s > 0) d = nn::avg_pool_backward(d_in, 2);
    }
}

ControlResiduals ControlBranch::forward(const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                                        const LatentGrid& condition, BranchTrace* trace) const {
    const int k = config_.hidden_channels;
    require_same_shape(z_t, condition, "branch condition vs latent");
    if (prompt.dim != config_.embedding_dim || prompt.length() == 0) {
        throw ShapeMismatch("prompt embedding does not match branch");
    }
    BranchTrace local;
    BranchTrace& tr = trace ? *trace : local;
    tr.z = z_t;
    tr.condition = condition;
    tr.pooled = prompt.pooled();
    tr.temb = nn::timestep_embedding(t, config_.time_dim);

    detail::FilmStemCache stem;
    Grid h1 = detail::film_stem_forward(params_, branch_stem(params_), k, z_t, tr.pooled, tr.temb, stem);
    const Grid hint = nn::conv2d(condition, params_.block(hint_w_), params_.block(hint_b_), k, 1);
    for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += hint[i];
    tr.stem_conv = std::move(stem.conv);
    tr.stem_scale = std::move(stem.scale);
    tr.b1 = nn::tanh(h1);
    tr.b2 = nn::tanh(nn::conv2d(tr.b1, params_.block(mid_w_), params_.block(mid_b_), k, kKernel));

    ControlResiduals r;
    r.mid = nn::conv2d(tr.b2, params_.block(zero_mid_w_), params_.block(zero_mid_b_), k, 1);
    r.up = nn::conv2d(tr.b1, params_.block(zero_up_w_), params_.block(zero_up_b_), k, 1);
    return r;
}

void ControlBranch::backward(const BranchTrace& tr, const ControlResiduals& d_res, std::vector<double>& grads,
                             LatentGrid* d_condition) const {
    const int k = config_.hidden_channels;
    if (grads.size() != params_.size()) grads.assign(params_.size(), 0.0);

    Grid d_b2, d_b1;
    nn::conv2d_backward(tr.b2, params_.block(zero_mid_w_), k, 1, d_res.mid, &d_b2,
                        params_.slice(grads, zero_mid_w_), params_.slice(grads, zero_mid_b_));
    nn::conv2d_backward(tr.b1, params_.block(zero_up_w_), k, 1, d_res.up, &d_b1,
                        params_.slice(grads, zero_up_w_), params_.slice(grads, zero_up_b_));
    const Grid d_h2 = nn::tanh_backward(tr.b2, d_b2);
    Grid d_b1_mid;
    nn::conv2d_backward(tr.b1, params_.block(mid_w_), k, kKernel, d_h2, &d_b1_mid,
                        params_.slice(grads, mid_w_), params_.slice(grads, mid_b_));
    add_into(d_b1, d_b1_mid);
    const Grid d_h1 = nn::tanh_backward(tr.b1, d_b1);

    detail::FilmStemCache stem{tr.stem_conv, tr.stem_scale};
    detail::film_stem_backward(params_, branch_stem(params_), k, tr.z, tr.pooled, tr.temb, stem, d_h1, &grads,
                               nullptr);
    Grid d_c;
    nn::conv2d_backward(tr.condition, params_.block(hint_w_), k, 1, d_h1, d_condition ? &d_c : nullptr,
                        params_.slice(grads, hint_w_), params_.slice(grads, hint_b_));
    if (d_condition) *d_condition = std::move(d_c);
}

LatentGrid controlled_eps(const ControlBranch& branch, const NoisePredictor& base, const LatentGrid& z_t,
                          const PromptEmbedding& prompt, int t, const LatentGrid& condition) {
    const ControlResiduals r = branch.forward(z_t, prompt, t, condition);
    return base.predict(z_t, prompt, t, &r);
}

LatentGrid branch_contribution(const ControlBranch& branch, const NoisePredictor& base,
                               const LatentGrid& z_t, const PromptEmbedding& prompt, int t,
                               const LatentGrid& condition) {
    LatentGrid out = controlled_eps(branch, base, z_t, prompt, t, condition);
    const LatentGrid plain = base.predict(z_t, prompt, t);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= plain[i];
    return out;
}

MaForTrainConfig toy_mafor_config(std::uint64_t seed) {
    MaForTrainConfig c;
    c.learning_rate = 1e-2;
    c.total_steps = 300;
    c.seed = seed;
    return c;
}

namespace {

void validate(const MaForTrainConfig& c) {
    if (!(c.learning_rate > 0.0) || c.grad_accum_steps < 1 || c.total_steps < 1 || c.batch_size < 1) {
        throw InvalidArgument("MaFor training settings must all be positive");
    }
}

struct PreparedPairs {
    std::vector<LatentGrid> z0;
    std::vector<const ImageGrid*> naked;
};

PreparedPairs prepare(std::span<const PseudoPair> pairs, const ToyBackend& base) {
    PreparedPairs p;
    for (const auto& pair : pairs) {
        p.z0.push_back(base.codec->encode(pair.makeup));
        p.naked.push_back(&pair.naked);
    }
    return p;
}

double sample_loss(const ControlBranch& branch, const ToyBackend& base, const PreparedPairs& data,
                   const PromptEmbedding& empty, const MaForSample& s, std::vector<double>* grads,
                   bool zero_condition, double weight) {
    const LatentGrid& z0 = data.z0[s.pair];
    const LatentGrid z_t = forward_diffuse(z0, s.t, s.noise, base.schedule);

    ConditionTrace ctrace;
    LatentGrid condition = branch.encode_condition(*data.naked[s.pair], grads && !zero_condition ? &ctrace : nullptr);
    if (zero_condition) condition = LatentGrid(condition.height(), condition.width(), condition.channels());
    require_same_shape(condition, z_t, "condition vs latent");

    BranchTrace btrace;
    const ControlResiduals res = branch.forward(z_t, empty, s.t, condition, grads ? &btrace : nullptr);
    ToyPredictorTrace ptrace;
    const LatentGrid eps_hat = base.predictor->forward(z_t, empty, s.t, &res, ptrace);

    double loss = 0.0;
    LatentGrid d_eps(eps_hat.height(), eps_hat.width(), eps_hat.channels());
    const double n = static_cast<double>(eps_hat.size());
    for (std::size_t i = 0; i < eps_hat.size(); ++i) {
        const double diff = eps_hat[i] - s.noise[i];
        loss += diff * diff / n;
        d_eps[i] = weight * 2.0 * diff / n;
    }
    if (!std::isfinite(loss)) {
        throw NonFiniteValue("non-finite MaFor loss (pair " + std::to_string(s.pair) + ", t " +
                             std::to_string(s.t) + ")");
    }
    if (grads) {
        const ToyPredictorGrads pg = base.predictor->backward(ptrace, d_eps, {false, false, true});
        LatentGrid d_condition;
        branch.backward(btrace, ControlResiduals{pg.mid, pg.up}, *grads, zero_condition ? nullptr : &d_condition);
        if (!zero_condition) branch.backward_condition(ctrace, d_condition, *grads);
    }
    return loss;
}

// Timesteps are stratified across the samples of one update: sample j of n is
// uniform on the j-th slice of [0, steps), so each t is still equally likely.
MaForSample draw_sample(Rng& rng, std::size_t pair_count, int steps, int h, int w, int c, int slot = 0,
                        int slots = 1) {
    MaForSample s;
    s.pair = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pair_count) - 1));
    const double u = (slot + rng.uniform()) / slots;
    s.t = std::min(steps - 1, static_cast<int>(u * steps));
    s.noise = rng.normal_grid(h, w, c);
    return s;
}

}  // namespace

std::vector<MaForSample> draw_mafor_samples(std::size_t pair_count, const ToyBackend& base, int latent_h,
                                            int latent_w, int count, std::uint64_t seed) {
    if (pair_count == 0) throw InvalidArgument("no pairs to sample from");
    Rng rng(seed);
    std::vector<MaForSample> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(draw_sample(rng, pair_count, base.schedule.num_train_steps, latent_h, latent_w,
                                  base.predictor->latent_channels()));
    }
    return out;
}

double mafor_loss(const ControlBranch& branch, const ToyBackend& base, std::span<const PseudoPair> pairs,
                  std::span<const MaForSample> samples, std::vector<double>* grads, bool zero_condition) {
    if (samples.empty()) throw InvalidArgument("mafor_loss needs at least one sample");
    const PreparedPairs data = prepare(pairs, base);
    const PromptEmbedding empty = base.encoder->embed("");
    if (grads && grads->size() != branch.params().size()) grads->assign(branch.params().size(), 0.0);
    const double weight = 1.0 / static_cast<double>(samples.size());
    double total = 0.0;
    for (const auto& s : samples) total += sample_loss(branch, base, data, empty, s, grads, zero_condition, weight);
    return total * weight;
}

MaForResult train_mafor(std::span<const PseudoPair> pairs, const ToyBackend& base, const MaForTrainConfig& config,
                        const StepCallback& on_step) {
    return train_mafor(pairs, base, config, ControlBranch(*base.predictor, config.seed ^ 0x5bd1e995ULL), on_step);
}

MaForResult train_mafor(std::span<const PseudoPair> pairs, const ToyBackend& base, const MaForTrainConfig& config,
                        ControlBranch branch, const StepCallback& on_step) {
    validate(config);
    if (pairs.empty()) throw InvalidArgument("MaFor training needs at least one pair");
    const PreparedPairs data = prepare(pairs, base);
    const PromptEmbedding empty = base.encoder->embed("");
    const LatentGrid& shape = data.z0.front();

    Rng rng(config.seed);
    Optimizer opt(config.optimizer, config.learning_rate);
    const int per_update = config.grad_accum_steps * config.batch_size;
    const double weight = 1.0 / per_update;

    MaForResult result{std::move(branch), {}};
    result.losses.reserve(config.total_steps);
    std::vector<double> grads;
    for (int step = 0; step < config.total_steps; ++step) {
        grads.assign(result.branch.params().size(), 0.0);
        double loss = 0.0;
        for (int micro = 0; micro < config.grad_accum_steps; ++micro) {
            for (int b = 0; b < config.batch_size; ++b) {
                const MaForSample s =
                    draw_sample(rng, pairs.size(), base.schedule.num_train_steps, shape.height(), shape.width(),
                                shape.channels(), micro * config.batch_size + b, per_update);
                try {
                    loss += weight * sample_loss(result.branch, base, data, empty, s, &grads, false, weight);
                } catch (const NonFiniteValue& e) {
                    throw NonFiniteValue(std::string(e.what()) + " at step " + std::to_string(step) +
                                         ", source '" + pairs[s.pair].source_id + "'");
                }
            }
        }
        opt.step(result.branch.mutable_params().flat(), grads);
        result.losses.push_back(loss);
        if (on_step) on_step(step, loss);
    }
    return result;
}

void put_branch(Container& c, const ControlBranch& branch) {
    const auto& cfg = branch.config();
    c.set_int("branch/config/latent_channels", cfg.latent_channels);
    c.set_int("branch/config/hidden_channels", cfg.hidden_channels);
    c.set_int("branch/config/embedding_dim", cfg.embedding_dim);
    c.set_int("branch/config/time_dim", cfg.time_dim);
    c.set_int("branch/config/condition_channels", cfg.condition_channels);
    c.set_int("branch/config/factor", cfg.factor);
    c.set_int("branch/config/zero_init", cfg.zero_init ? 1 : 0);
    put_params(c, "branch", branch.params());
}

ControlBranch get_branch(const Container& c) {
    ControlBranchConfig cfg;
    cfg.latent_channels = static_cast<int>(c.integer("branch/config/latent_channels"));
    cfg.hidden_channels = static_cast<int>(c.integer("branch/config/hidden_channels"));
    cfg.embedding_dim = static_cast<int>(c.integer("branch/config/embedding_dim"));
    cfg.time_dim = static_cast<int>(c.integer("branch/config/time_dim"));
    cfg.condition_channels = static_cast<int>(c.integer("branch/config/condition_channels"));
    cfg.factor = static_cast<int>(c.integer("branch/config/factor"));
    cfg.zero_init = c.integer("branch/config/zero_init") != 0;
    ParamStore params = ControlBranch::make_layout(cfg);
    get_params(c, "branch", params);
    return ControlBranch(cfg, std::move(params));
}

void save_branch(const ControlBranch& branch, const std::filesystem::path& path) {
    Container c;
    c.set_string("kind", "branch");
    put_branch(c, branch);
    c.write(path);
}

ControlBranch load_branch(const std::filesystem::path& path) {
    const Container c = Container::read(path);
    require_kind(c, "branch");
    return get_branch(c);
}

void write_loss_log(const std::filesystem::path& path, std::span<const double> losses) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < losses.size(); ++i) out << i << ',' << losses[i] << '\n';
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace facepaint
