#include <cmath>
#include <thread>

#include "doctest.h"
#include "facepaint/errors.hpp"
#include "facepaint/maip.hpp"
#include "oracles.hpp"

using namespace facepaint;

namespace {

ControlBranch live_branch(const ToyBackend& be, std::uint64_t seed) {
    ControlBranch b(*be.predictor, seed, /*zero_init=*/false);
    Rng rng(seed + 1);
    for (double& v : b.mutable_params().flat()) v += 0.05 * rng.normal();
    return b;
}

StyleToken planted_token(const ToyBackend& be, std::uint64_t seed) {
    StyleToken t;
    Rng r(seed);
    t.embedding.resize(be.encoder->embedding_dim());
    for (auto& x : t.embedding) x = r.normal();
    t.meta.init_word = "makeup";
    return t;
}

// Mean |a - b| over pixels where select(mask value) holds; NaN if none.
template <typename Pred>
double region_mad(const ImageGrid& a, const ImageGrid& b, const Mask& m, Pred select) {
    double s = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < a.height(); ++y) {
        for (int x = 0; x < a.width(); ++x) {
            if (!select(m(y, x))) continue;
            for (int c = 0; c < a.channels(); ++c) s += std::abs(a.at(y, x, c) - b.at(y, x, c));
            n += a.channels();
        }
    }
    return n ? s / static_cast<double>(n) : std::nan("");
}

bool outside(double m) { return m == 0.0; }
bool inside(double m) { return m > 0.0; }

}  // namespace

TEST_CASE("downsample_mask averages blocks") {
    Mask ones = make_mask(16, 16, MaskKind::blurred, 1.0);
    const Mask d = downsample_mask(ones, 8);
    CHECK(d.kind == MaskKind::latent_downsampled);
    CHECK(d.height() == 2);
    for (double v : d.values.values()) CHECK(v == 1.0);

    Mask half = make_mask(8, 8, MaskKind::blurred);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 4; ++x) half.values.at(y, x, 0) = 1.0;
    }
    CHECK(downsample_mask(half, 8)(0, 0) == 0.5);

    Rng rng(3);
    Mask random = make_mask(64, 48, MaskKind::blurred);
    for (double& v : random.values.raw()) v = rng.uniform();
    const Mask r = downsample_mask(random, 8);
    CHECK(r.mean() == doctest::Approx(random.mean()).epsilon(1e-6));
    // block (1, 2) against a direct sum
    double s = 0.0;
    for (int y = 8; y < 16; ++y) {
        for (int x = 16; x < 24; ++x) s += random(y, x);
    }
    CHECK(r(1, 2) == doctest::Approx(s / 64.0).epsilon(1e-14));

    CHECK_THROWS_AS(downsample_mask(make_mask(12, 16, MaskKind::blurred), 8), ShapeMismatch);
}

TEST_CASE("cfg_combine is the guidance affine combination") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const LatentGrid u = rng.normal_grid(4, 4, 4);
        const LatentGrid c = rng.normal_grid(4, 4, 4);
        CHECK(cfg_combine(u, c, 0.0) == u);
        CHECK(cfg_combine(u, c, 1.0) == c);
        const double g = rng.uniform(0.0, 20.0);
        const LatentGrid a = cfg_combine(u, c, g);
        const LatentGrid b = cfg_combine(u, c, 2.0 - g);
        for (std::size_t i = 0; i < u.size(); ++i) {
            REQUIRE(std::abs(a[i] + b[i] - 2.0 * c[i]) <= 1e-6);
            REQUIRE(std::abs(a[i] - (u[i] + g * (c[i] - u[i]))) <= 1e-12 * (1.0 + std::abs(a[i])));
        }
    }
    const LatentGrid e = rng.normal_grid(2, 2, 4);
    const LatentGrid scaled = cfg_combine(LatentGrid(2, 2, 4), e, 7.5);
    for (std::size_t i = 0; i < e.size(); ++i) CHECK(scaled[i] == 7.5 * e[i]);
    CHECK_THROWS_AS(cfg_combine(LatentGrid(2, 2, 4), LatentGrid(2, 2, 3), 1.0), ShapeMismatch);
}

TEST_CASE("noised_condition follows the forward process") {
    const auto schedule = make_schedule();
    Rng rng(1);
    const LatentGrid c = rng.normal_grid(4, 4, 4);
    Rng r1(9);
    CHECK(noised_condition(c, kCleanStep, schedule, r1) == c);

    Rng a(11), b(11);
    CHECK(noised_condition(c, 400, schedule, a) == noised_condition(c, 400, schedule, b));

    for (int t : {20, 500, 999}) {
        Rng draws(t);
        const double ab = schedule.alpha_bar(t);
        double sum = 0.0, sq = 0.0;
        std::size_t n = 0;
        for (int k = 0; k < 4000; ++k) {
            const LatentGrid ct = noised_condition(c, t, schedule, draws);
            for (std::size_t i = 0; i < c.size(); ++i) {
                const double r = ct[i] - std::sqrt(ab) * c[i];
                sum += r;
                sq += r * r;
                ++n;
            }
        }
        const double mean = sum / n;
        const double var = sq / n - mean * mean;
        INFO("t ", t);
        CHECK(var == doctest::Approx(1.0 - ab).epsilon(0.05));
    }
}

TEST_CASE("masked_merge keeps the face and replaces the rest") {
    Rng rng(2);
    const LatentGrid z = rng.normal_grid(2, 2, 4);
    const LatentGrid c = rng.normal_grid(2, 2, 4);
    CHECK(masked_merge(z, c, make_mask(2, 2, MaskKind::latent_downsampled, 1.0)) == z);
    CHECK(masked_merge(z, c, make_mask(2, 2, MaskKind::latent_downsampled, 0.0)) == c);

    Mask m = make_mask(2, 2, MaskKind::latent_downsampled);
    m.values.at(0, 0, 0) = 0.25;
    m.values.at(0, 1, 0) = 0.0;
    m.values.at(1, 0, 0) = 1.0;
    m.values.at(1, 1, 0) = 0.7;
    const LatentGrid out = masked_merge(z, c, m);
    for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
            for (int k = 0; k < 4; ++k) {
                const double w = m(y, x);
                CHECK(out.at(y, x, k) == doctest::Approx(w * z.at(y, x, k) + (1 - w) * c.at(y, x, k)).epsilon(1e-15));
            }
        }
    }
    CHECK_THROWS_AS(masked_merge(z, rng.normal_grid(2, 3, 4), m), ShapeMismatch);
    CHECK_THROWS_AS(masked_merge(z, c, make_mask(4, 4, MaskKind::latent_downsampled)), ShapeMismatch);
}

TEST_CASE("generate honours both exactness constraints") {
    const auto be = toy_backend(7);
    const ControlBranch branch = live_branch(be, 3);
    const StyleToken token = planted_token(be, 4);
    const auto face = synth_faces(1, 12, 64).front();

    GenerationConfig config;
    config.num_inference_steps = 20;
    config.seed = 5;

    int steps_seen = 0;
    std::size_t merged_cells = 0;
    GenerationOptions options;
    std::vector<std::pair<LatentGrid, LatentGrid>> trajectory;
    options.on_step = [&](const StepRecord& s) {
        ++steps_seen;
        trajectory.emplace_back(s.z_next, s.c_noised);
    };
    const auto r = generate(face.naked, token, branch, be, config, options);
    CHECK(steps_seen == 20);
    REQUIRE(trajectory.size() == 20);

    for (const auto& [z_next, c_noised] : trajectory) {
        for (int y = 0; y < z_next.height(); ++y) {
            for (int x = 0; x < z_next.width(); ++x) {
                if (r.latent_mask(y, x) != 0.0) continue;
                ++merged_cells;
                for (int k = 0; k < z_next.channels(); ++k) REQUIRE(z_next.at(y, x, k) == c_noised.at(y, x, k));
            }
        }
    }
    CHECK(merged_cells > 0);

    std::size_t fixed = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 64; ++x) {
            if (r.mask(y, x) != 0.0) continue;
            ++fixed;
            for (int k = 0; k < 3; ++k) REQUIRE(r.final_image.at(y, x, k) == face.naked.at(y, x, k));
        }
    }
    CHECK(fixed > 0);
    CHECK(r.mask.kind == MaskKind::blurred);
    for (double v : r.mask.values.values()) REQUIRE(std::round(v * 255.0) == v * 255.0);
    // the last step lands on the clean known latent outside the face
    const LatentGrid known = be.codec->encode(face.naked);
    CHECK(trajectory.back().second == known);
}

TEST_CASE("generate is deterministic and step-prefix stable") {
    const auto be = toy_backend(2);
    const ControlBranch branch = live_branch(be, 8);
    const StyleToken token = planted_token(be, 9);
    const auto face = synth_faces(1, 3, 64).front();
    GenerationConfig config;
    config.num_inference_steps = 100;
    config.seed = 77;

    std::vector<LatentGrid> full;
    GenerationOptions options;
    options.on_step = [&](const StepRecord& s) { full.push_back(s.z_next); };
    const auto a = generate(face.naked, token, branch, be, config, options);
    const auto b = generate(face.naked, token, branch, be, config);
    CHECK(a.final_image == b.final_image);
    CHECK(a.gen == b.gen);
    CHECK(to_json(a.diagnostics).dump() == to_json(b.diagnostics).dump());

    const SamplerInputs in = prepare_sampler_inputs(face.naked, a.mask, token, branch, be, config);
    for (int k : {1, 17, 64, 100}) {
        CHECK(run_sampler(in, &branch, be, config, {}, nullptr, k) == full[k - 1]);
    }

    config.seed = 78;
    CHECK(generate(face.naked, token, branch, be, config).gen != a.gen);

    SUBCASE("concurrent calls do not interfere") {
        config.seed = 77;
        GenerationResult x, y;
        std::jthread t1([&] { x = generate(face.naked, token, branch, be, config); });
        std::jthread t2([&] { y = generate(face.naked, token, branch, be, config); });
        t1.join();
        t2.join();
        CHECK(x.final_image == a.final_image);
        CHECK(y.final_image == a.final_image);
    }
}

TEST_CASE("ablation switches change the output where expected") {
    const auto be = toy_backend(1);
    const ControlBranch branch = live_branch(be, 2);
    const StyleToken token = planted_token(be, 6);
    const auto face = synth_faces(1, 21, 64).front();
    GenerationConfig on;
    on.num_inference_steps = 30;
    on.seed = 4;
    const auto base_run = generate(face.naked, token, branch, be, on);
    const Mask& m = base_run.mask;

    GenerationConfig no_blend = on;
    no_blend.use_final_blend = false;
    const auto r_blend = generate(face.naked, token, branch, be, no_blend);
    const double mad_on = region_mad(base_run.final_image, face.naked, m, outside);
    const double mad_off = region_mad(r_blend.final_image, face.naked, m, outside);
    MESSAGE("outside-mask deviation: blend on ", mad_on, ", off ", mad_off);
    CHECK(mad_on == 0.0);
    CHECK(mad_off > mad_on);
    CHECK(r_blend.gen == base_run.gen);

    GenerationConfig no_merge = on;
    no_merge.use_mask_merge = false;
    const auto r_merge = generate(face.naked, token, branch, be, no_merge);
    const double gen_on = region_mad(base_run.gen, face.naked, m, outside);
    const double gen_off = region_mad(r_merge.gen, face.naked, m, outside);
    MESSAGE("outside-mask deviation of the decoded image: merge on ", gen_on, ", off ", gen_off);
    CHECK(gen_off > gen_on);

    GenerationConfig no_control = on;
    no_control.use_control = false;
    const auto r_control = generate(face.naked, token, branch, be, no_control);
    CHECK(region_mad(r_control.final_image, base_run.final_image, m, inside) > 0.0);
    CHECK(region_mad(r_control.final_image, face.naked, m, outside) == 0.0);

    GenerationConfig no_style = on;
    no_style.use_style = false;
    CHECK(region_mad(generate(face.naked, token, branch, be, no_style).final_image, base_run.final_image, m,
                     inside) > 0.0);

    GenerationConfig g0 = on, g12 = on;
    g0.guidance_scale = 0.0;
    g12.guidance_scale = 12.0;
    CHECK(region_mad(generate(face.naked, token, branch, be, g0).final_image,
                     generate(face.naked, token, branch, be, g12).final_image, m, inside) > 0.0);

    SUBCASE("a zero-initialised branch reproduces the uncontrolled run") {
        const ControlBranch zero(*be.predictor, 5);
        CHECK(generate(face.naked, token, zero, be, on).final_image == r_control.final_image);
    }
}

TEST_CASE("generate validates inputs and reports diagnostics") {
    const auto be = toy_backend(0);
    const ControlBranch branch(*be.predictor, 1);
    const StyleToken token = planted_token(be, 2);
    const auto face = synth_faces(1, 2, 64).front();
    GenerationConfig config;
    config.num_inference_steps = 10;

    CHECK_THROWS_AS(generate(synth_faceless(3, 64), token, branch, be, config), NoFaceDetected);
    CHECK_THROWS_AS(generate(ImageGrid(60, 64, 3, 0.5), token, branch, be, config), ShapeMismatch);
    StyleToken short_token = token;
    short_token.embedding.pop_back();
    CHECK_THROWS_AS(generate(face.naked, short_token, branch, be, config), ShapeMismatch);
    GenerationConfig bad = config;
    bad.guidance_scale = -1.0;
    CHECK_THROWS_AS(generate(face.naked, token, branch, be, bad), InvalidArgument);
    bad = config;
    bad.num_inference_steps = 0;
    CHECK_THROWS_AS(generate(face.naked, token, branch, be, bad), InvalidArgument);

    const auto r = generate(face.naked, token, branch, be, config);
    const auto j = to_json(r.diagnostics);
    REQUIRE(j["steps"].size() == 10);
    CHECK(j["steps"][0]["t"] == 999);
    CHECK(j["steps"][9]["t_prev"] == kCleanStep);
    CHECK(j["config"]["num_inference_steps"] == 10);
    CHECK(j["mask"]["mean"].get<double>() == doctest::Approx(r.mask.mean()));
    CHECK(j["mask"]["support"].get<double>() > 0.0);
    for (const auto& s : j["steps"]) CHECK(std::isfinite(s["z_norm"].get<double>()));

    const GenerationConfig round = generation_config_from_json(to_json(config));
    CHECK(to_json(round) == to_json(config));
    CHECK_THROWS_AS(generation_config_from_json(nlohmann::json{{"seed", "x"}}), InvalidArgument);
}
