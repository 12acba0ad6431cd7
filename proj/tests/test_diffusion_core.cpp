#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "facepaint/backend.hpp"
#include "facepaint/checkpoint.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/rng.hpp"
#include "facepaint/schedule.hpp"
#include "oracles.hpp"

using namespace facepaint;

namespace {

Grid filled(int h, int w, int c, double v) { return Grid(h, w, c, v); }

double mse(const Grid& a, const Grid& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("make_schedule single and two step products") {
    const auto one = make_schedule(1, 0.1, 0.1);
    REQUIRE(one.alphas.size() == 1);
    CHECK(one.alphas[0] == doctest::Approx(0.9));
    CHECK(one.alpha_bars[0] == doctest::Approx(0.9));

    const auto two = make_schedule(2, 0.1, 0.1);
    CHECK(two.alpha_bars[0] == doctest::Approx(0.9));
    CHECK(two.alpha_bars[1] == doctest::Approx(0.9 * 0.9));
}

TEST_CASE("make_schedule rejects bad betas") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.1, 1.0), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, NAN, 0.2), InvalidArgument);
    CHECK_THROWS_AS(make_schedule(10, 0.1, INFINITY), InvalidArgument);
}

TEST_CASE("alpha_bars strictly decrease for random valid schedules") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const double lo = rng.uniform(1e-5, 0.2);
        const double hi = rng.uniform(lo, 0.2);
        const int n = rng.uniform_int(1, 1500);
        const auto s = make_schedule(n, lo, hi);
        CHECK(s.alpha_bars[0] <= 1.0);
        CHECK(s.alpha_bars[0] > 0.0);
        for (int t = 1; t < n; ++t) REQUIRE(s.alpha_bars[t] < s.alpha_bars[t - 1]);
        for (double b : s.betas) REQUIRE((b > 0.0 && b < 1.0));
    }
}

TEST_CASE("schedules whose alpha_bar underflows are rejected") {
    CHECK_THROWS_AS(make_schedule(1500, 0.9, 0.999), InvalidArgument);
}

TEST_CASE("forward_diffuse limits and scalar case") {
    Rng rng(1);
    const Grid z0 = rng.normal_grid(2, 3, 4);
    const Grid eps = rng.normal_grid(2, 3, 4);
    CHECK(forward_diffuse(z0, eps, 1.0) == z0);
    CHECK(forward_diffuse(z0, eps, 0.0) == eps);

    const Grid out = forward_diffuse(filled(2, 2, 1, 1.0), filled(2, 2, 1, 0.0), 0.81);
    for (double v : out.values()) CHECK(v == doctest::Approx(0.9).epsilon(1e-12));
}

TEST_CASE("forward_diffuse validates inputs") {
    const auto s = make_schedule(10, 0.01, 0.02);
    CHECK_THROWS_AS(forward_diffuse(Grid(2, 2, 1), 0, Grid(2, 2, 2), s), ShapeMismatch);
    CHECK_THROWS_AS(forward_diffuse(Grid(2, 2, 1), 10, Grid(2, 2, 1), s), InvalidArgument);
    CHECK_THROWS_AS(forward_diffuse(Grid(2, 2, 1), -1, Grid(2, 2, 1), s), InvalidArgument);
}

TEST_CASE("forward then algebraic inversion reproduces z0") {
    const auto s = make_schedule();
    Rng rng(3);
    for (int t : {0, 17, 500, 999}) {
        const Grid z0 = rng.normal_grid(4, 4, 4);
        const Grid eps = rng.normal_grid(4, 4, 4);
        const Grid back = predict_clean(forward_diffuse(z0, t, eps, s), eps, s.alpha_bar(t));
        for (std::size_t i = 0; i < z0.size(); ++i) CHECK(std::abs(back[i] - z0[i]) < 1e-6);
    }
}

TEST_CASE("reverse_step with the true noise lands on the same trajectory") {
    const auto s = make_schedule();
    Rng rng(4);
    for (int t : {1, 2, 250, 999}) {
        const Grid z0 = rng.normal_grid(3, 3, 4);
        const Grid eps = rng.normal_grid(3, 3, 4);
        const Grid zt = forward_diffuse(z0, t, eps, s);
        const Grid prev = reverse_step(zt, eps, t, s);
        const Grid expected = forward_diffuse(z0, t - 1, eps, s);
        for (std::size_t i = 0; i < prev.size(); ++i) CHECK(std::abs(prev[i] - expected[i]) < 1e-9);
    }
}

TEST_CASE("reverse_step is a no-op when alpha_bar does not change") {
    NoiseSchedule s;
    s.num_train_steps = 2;
    s.betas = {0.5, 1e-300};
    s.alphas = {0.5, 1.0};
    s.alpha_bars = {0.5, 0.5};
    Rng rng(5);
    const Grid zt = rng.normal_grid(2, 2, 3);
    const Grid eps = rng.normal_grid(2, 2, 3);
    const Grid out = reverse_step(zt, eps, 1, s);
    for (std::size_t i = 0; i < zt.size(); ++i) CHECK(out[i] == doctest::Approx(zt[i]).epsilon(1e-12));
}

TEST_CASE("reverse_step matches a scalar recomputation on a 2x2x1 case") {
    const auto s = make_schedule(100, 0.001, 0.05);
    Rng rng(6);
    const Grid zt = rng.normal_grid(2, 2, 1);
    const Grid eps = rng.normal_grid(2, 2, 1);
    const int t = 42;
    const Grid out = reverse_step(zt, eps, t, s);

    // alpha_bar recomputed from scratch as a running product of (1 - beta).
    double ab_t = 1.0, ab_prev = 1.0;
    for (int i = 0; i <= t; ++i) {
        const double beta = 0.001 + (0.05 - 0.001) * i / 99.0;
        ab_t *= 1.0 - beta;
        if (i == t - 1) ab_prev = ab_t;
    }
    for (std::size_t i = 0; i < 4; ++i) {
        const double x0 = (zt[i] - std::sqrt(1 - ab_t) * eps[i]) / std::sqrt(ab_t);
        const double expected = std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * eps[i];
        CHECK(out[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("reverse_step rejects t = 0 and non-finite predictions") {
    const auto s = make_schedule(10, 0.01, 0.02);
    CHECK_THROWS_AS(reverse_step(Grid(1, 1, 1), Grid(1, 1, 1), 0, s), InvalidArgument);
    Grid bad(1, 1, 1, NAN);
    CHECK_THROWS_AS(reverse_step(Grid(1, 1, 1), bad, 3, s), NonFiniteValue);
    CHECK_THROWS_AS(reverse_step(Grid(1, 1, 1), Grid(1, 1, 2), 3, s), ShapeMismatch);
}

TEST_CASE("reverse_step to the clean state returns the clean estimate") {
    const auto s = make_schedule();
    Rng rng(8);
    const Grid z0 = rng.normal_grid(2, 2, 4);
    const Grid eps = rng.normal_grid(2, 2, 4);
    const Grid zt = forward_diffuse(z0, 19, eps, s);
    const Grid out = reverse_step(zt, eps, 19, kCleanStep, s);
    for (std::size_t i = 0; i < z0.size(); ++i) CHECK(out[i] == doctest::Approx(z0[i]).epsilon(1e-9));
}

TEST_CASE("ddpm_step is reproducible from its seed") {
    const auto s = make_schedule();
    Rng a(11), b(11), data(12);
    const Grid zt = data.normal_grid(2, 2, 4);
    const Grid eps = data.normal_grid(2, 2, 4);
    const Grid x = ddpm_step(zt, eps, 500, 480, s, a);
    const Grid y = ddpm_step(zt, eps, 500, 480, s, b);
    CHECK(x == y);
    CHECK(x.all_finite());
}

TEST_CASE("inference timesteps are strided and descending") {
    const auto s = make_schedule();
    const auto ts = inference_timesteps(s, 50);
    REQUIRE(ts.size() == 50);
    CHECK(ts.front() == 999);
    CHECK(ts.back() == 19);
    for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
    CHECK(inference_timesteps(s, 1000).back() == 0);
    CHECK_THROWS_AS(inference_timesteps(s, 0), InvalidArgument);
    CHECK_THROWS_AS(inference_timesteps(s, 1001), InvalidArgument);
}

TEST_CASE("toy backend is deterministic in its seed") {
    const auto a = toy_backend(123);
    const auto b = toy_backend(123);
    const auto c = toy_backend(124);
    CHECK(a.predictor->params() == b.predictor->params());
    CHECK_FALSE(a.predictor->params() == c.predictor->params());
    CHECK(a.encoder->embed("a photo") == b.encoder->embed("a photo"));
}

TEST_CASE("toy predictor preserves latent shape and is pure") {
    const auto be = toy_backend(1);
    Rng rng(2);
    const Grid z = rng.normal_grid(8, 8, 4);
    const auto prompt = be.encoder->embed("a photo of a woman");
    const Grid e1 = be.predictor->predict(z, prompt, 500);
    const Grid e2 = be.predictor->predict(z, prompt, 500);
    CHECK(e1.height() == 8);
    CHECK(e1.width() == 8);
    CHECK(e1.channels() == 4);
    CHECK(e1 == e2);
    CHECK_THROWS_AS(be.predictor->predict(Grid(8, 8, 3), prompt, 500), ShapeMismatch);
}

TEST_CASE("toy predictor MSE gradient matches central differences") {
    const auto be = toy_backend(9);
    ToyPredictor model = *be.predictor;
    Rng rng(10);
    const Grid z = rng.normal_grid(4, 4, 4);
    const Grid target = rng.normal_grid(4, 4, 4);
    auto prompt = be.encoder->embed("a photo of a woman with <*> on face");
    const int t = 321;

    Grid d_eps;
    ToyPredictorTrace trace;
    const Grid eps = model.forward(z, prompt, t, nullptr, trace);
    d_eps = Grid(4, 4, 4);
    for (std::size_t i = 0; i < eps.size(); ++i) d_eps[i] = 2.0 * (eps[i] - target[i]) / eps.size();
    const auto grads = model.backward(trace, d_eps, {.params = true, .embedding = true});

    auto loss = [&] { return mse(model.predict(z, prompt, t), target); };
    auto flat = model.mutable_params().flat();
    int checked = 0;
    for (std::size_t i = 0; i < flat.size(); i += 7) {
        const double fd = oracle::central_difference(loss, flat[i]);
        CHECK_MESSAGE(oracle::relative_close(grads.params[i], fd), "param ", i);
        ++checked;
    }
    CHECK(checked > 50);

    // embedding gradient: pooled is the token mean, so d/d(token k) = pooled grad / length
    const int k = 3;
    for (int d = 0; d < prompt.dim; ++d) {
        const double fd = oracle::central_difference(loss, prompt.token(k)[d]);
        CHECK(oracle::relative_close(grads.pooled[d] / prompt.length(), fd));
    }
}

TEST_CASE("checkpoint round trip preserves predictor and schedule") {
    const auto dir = std::filesystem::temp_directory_path() / "facepaint_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "base.fpc";
    const auto be = toy_backend(77, 4, make_schedule(500, 0.001, 0.02));
    save_checkpoint(be, path);
    const auto loaded = load_checkpoint(path);
    CHECK(loaded.seed == 77);
    CHECK(loaded.schedule.alpha_bars == be.schedule.alpha_bars);
    CHECK(loaded.predictor->params() == be.predictor->params());

    Rng rng(1);
    const Grid z = rng.normal_grid(8, 8, 4);
    const auto p = be.encoder->embed("");
    CHECK(loaded.predictor->predict(z, p, 100) == be.predictor->predict(z, p, 100));

    // flip one payload byte
    auto bytes = checkpoint_container(be).to_bytes();
    bytes[bytes.size() / 2] ^= 0x5a;
    CHECK_THROWS_AS(Container::from_bytes(bytes), FormatError);

    // bump the schema version and re-seal the checksum
    auto versioned = checkpoint_container(be).to_bytes();
    versioned[4] = 99;
    const std::size_t body = versioned.size() - 8;
    const std::uint64_t sum = fnv1a64(std::string_view(reinterpret_cast<const char*>(versioned.data()), body));
    std::memcpy(versioned.data() + body, &sum, 8);
    CHECK_THROWS_AS(Container::from_bytes(versioned), VersionMismatch);

    std::filesystem::remove_all(dir);
}
