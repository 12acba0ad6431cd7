#include "facepaint/checkpoint.hpp"

#include "facepaint/errors.hpp"

namespace facepaint {

void put_params(Container& c, const std::string& section, const ParamStore& params) {
    for (std::size_t i = 0; i < params.blocks().size(); ++i) {
        const auto& b = params.blocks()[i];
        std::vector<std::uint32_t> shape(b.shape.begin(), b.shape.end());
        const auto values = params.block(i);
        c.set_tensor(section + "/" + b.name, std::move(shape),
                     std::vector<double>(values.begin(), values.end()));
    }
}

void get_params(const Container& c, const std::string& section, ParamStore& layout) {
    for (std::size_t i = 0; i < layout.blocks().size(); ++i) {
        const auto& b = layout.blocks()[i];
        const auto& t = c.tensor(section + "/" + b.name);
        const std::vector<std::uint32_t> expected(b.shape.begin(), b.shape.end());
        if (t.shape != expected) {
            throw ShapeMismatch("parameter '" + section + "/" + b.name + "' has the wrong shape");
        }
        std::copy(t.values.begin(), t.values.end(), layout.block(i).begin());
    }
}

void put_scalar(Container& c, const std::string& name, double value) {
    c.set_tensor(name, {1}, {value});
}

double get_scalar(const Container& c, const std::string& name) {
    const auto& t = c.tensor(name);
    if (t.values.size() != 1) throw FormatError("entry '" + name + "' is not a scalar");
    return t.values[0];
}

void put_schedule(Container& c, const NoiseSchedule& s) {
    c.set_int("schedule/num_train_steps", s.num_train_steps);
    put_scalar(c, "schedule/beta_start", s.beta_start);
    put_scalar(c, "schedule/beta_end", s.beta_end);
}

NoiseSchedule get_schedule(const Container& c) {
    return make_schedule(static_cast<int>(c.integer("schedule/num_train_steps")),
                         get_scalar(c, "schedule/beta_start"), get_scalar(c, "schedule/beta_end"));
}

void require_kind(const Container& c, const std::string& kind) {
    if (!c.has("kind") || c.string("kind") != kind) {
        throw FormatError("container is not a " + kind);
    }
}

Container checkpoint_container(const ToyBackend& backend) {
    Container c;
    c.set_string("kind", "checkpoint");
    c.set_string("backend", "toy");
    c.set_int("seed", static_cast<std::int64_t>(backend.seed));
    put_schedule(c, backend.schedule);
    const auto& cfg = backend.predictor->config();
    c.set_int("predictor/config/latent_channels", cfg.latent_channels);
    c.set_int("predictor/config/hidden_channels", cfg.hidden_channels);
    c.set_int("predictor/config/embedding_dim", cfg.embedding_dim);
    c.set_int("predictor/config/time_dim", cfg.time_dim);
    put_scalar(c, "predictor/config/prior_std", cfg.prior_std);
    c.set_int("codec/factor", backend.codec->resolution_factor());
    put_params(c, "predictor", backend.predictor->params());
    return c;
}

ToyBackend backend_from_container(const Container& c) {
    require_kind(c, "checkpoint");
    if (c.string("backend") != "toy") throw FormatError("unsupported backend " + c.string("backend"));
    ToyPredictorConfig cfg;
    cfg.latent_channels = static_cast<int>(c.integer("predictor/config/latent_channels"));
    cfg.hidden_channels = static_cast<int>(c.integer("predictor/config/hidden_channels"));
    cfg.embedding_dim = static_cast<int>(c.integer("predictor/config/embedding_dim"));
    cfg.time_dim = static_cast<int>(c.integer("predictor/config/time_dim"));
    cfg.prior_std = get_scalar(c, "predictor/config/prior_std");

    ToyBackend b;
    b.seed = static_cast<std::uint64_t>(c.integer("seed"));
    b.schedule = get_schedule(c);
    ParamStore params = ToyPredictor::make_layout(cfg);
    get_params(c, "predictor", params);
    b.predictor = std::make_shared<const ToyPredictor>(cfg, b.schedule, std::move(params));
    b.codec = std::make_shared<const ToyCodec>(cfg.latent_channels,
                                               static_cast<int>(c.integer("codec/factor")));
    b.encoder = std::make_shared<const ToyTextEncoder>(cfg.embedding_dim,
                                                       toy_encoder_seed(b.seed));
    return b;
}

void save_checkpoint(const ToyBackend& backend, const std::filesystem::path& path) {
    checkpoint_container(backend).write(path);
}

ToyBackend load_checkpoint(const std::filesystem::path& path) {
    return backend_from_container(Container::read(path));
}

}  // namespace facepaint
