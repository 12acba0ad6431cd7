#include <array>
#include <bit>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "facepaint/csl.hpp"
#include "facepaint/dataprep.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/image_io.hpp"
#include "facepaint/rng.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace facepaint;

namespace {

std::vector<LatentGrid> encode_all(const ToyBackend& be, const std::vector<ImageGrid>& images, int size) {
    std::vector<LatentGrid> out;
    for (const auto& im : images) out.push_back(be.codec->encode(prepare_image(im, size)));
    return out;
}

std::vector<double> planted(std::uint64_t seed, int dim) {
    Rng r(seed + 100);
    std::vector<double> u(dim);
    for (auto& x : u) x = r.normal();
    return u;
}

}  // namespace

TEST_CASE("prompt template requires exactly one placeholder") {
    CHECK_NOTHROW(PromptTemplate());
    CHECK_NOTHROW(PromptTemplate("<*> style"));
    CHECK_THROWS_AS(PromptTemplate("a photo of a woman"), InvalidArgument);
    CHECK_THROWS_AS(PromptTemplate("<*> and <*>"), InvalidArgument);
    CHECK_THROWS_AS(PromptTemplate("x", ""), InvalidArgument);

    const auto be = toy_backend(0);
    const PromptTemplate glued("a face with <*>, smiling");
    CHECK_THROWS_AS(glued.slot(*be.encoder), InvalidArgument);
    CHECK(PromptTemplate().substitute("makeup") == "a photo of a woman with makeup on face");
}

TEST_CASE("embed_prompt splices only the placeholder slot") {
    const auto be = toy_backend(1);
    const PromptTemplate tmpl;
    const auto tokens = be.encoder->tokenize(tmpl.text());
    int k = -1;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == "<*>") k = static_cast<int>(i);
    }
    REQUIRE(k >= 0);
    CHECK(tmpl.slot(*be.encoder) == k);

    const auto v = planted(3, be.encoder->embedding_dim());
    const PromptEmbedding plain = be.encoder->embed(tmpl.text());
    const PromptEmbedding spliced = embed_prompt(tmpl, v, *be.encoder);
    REQUIRE(spliced.length() == static_cast<int>(tokens.size()));
    REQUIRE(spliced.length() == plain.length());
    for (int i = 0; i < plain.length(); ++i) {
        const auto a = plain.token(i);
        const auto b = spliced.token(i);
        bool same = true;
        for (int d = 0; d < plain.dim; ++d) same = same && a[d] == b[d];
        if (i == k) {
            CHECK_FALSE(same);
            for (int d = 0; d < plain.dim; ++d) CHECK(b[d] == v[d]);
        } else {
            CHECK(same);
        }
    }

    SUBCASE("a real word's embedding reproduces the substituted prompt") {
        for (const char* word : {"makeup", "glitter", "face"}) {
            const PromptEmbedding via_token = embed_prompt(tmpl, be.encoder->word_embedding(word), *be.encoder);
            CHECK(via_token.values == be.encoder->embed(tmpl.substitute(word)).values);
        }
    }

    SUBCASE("dimension mismatch") {
        std::vector<double> short_v(be.encoder->embedding_dim() - 1, 0.0);
        CHECK_THROWS_AS(embed_prompt(tmpl, short_v, *be.encoder), ShapeMismatch);
    }
}

TEST_CASE("style sample stream has a uniform timestep marginal") {
    const auto be = toy_backend(0);
    const auto samples = draw_csl_samples(4, be, 2, 2, 5000, 9);
    std::array<int, 10> bins{};
    std::array<int, 4> refs{};
    for (const auto& s : samples) {
        REQUIRE(s.t >= 0);
        REQUIRE(s.t < be.schedule.num_train_steps);
        ++bins[s.t * 10 / be.schedule.num_train_steps];
        ++refs[s.reference];
    }
    for (int b : bins) CHECK(std::abs(b - 500) <= 25);
    for (int r : refs) CHECK(std::abs(r - 1250) <= 150);

    // every window of 50 consecutive samples reaches all tenths of the schedule
    for (std::size_t start = 0; start + 50 <= samples.size(); start += 50) {
        std::array<int, 10> w{};
        for (std::size_t i = start; i < start + 50; ++i) ++w[samples[i].t * 10 / be.schedule.num_train_steps];
        for (int b : w) REQUIRE(b > 0);
    }
    CHECK(draw_csl_samples(4, be, 2, 2, 20, 9)[7].t == samples[7].t);
    CHECK(draw_csl_samples(4, be, 2, 2, 20, 10)[7].noise != samples[7].noise);
}

TEST_CASE("embedding gradient matches central differences") {
    for (std::uint64_t seed : {2ULL, 5ULL}) {
        const auto be = toy_backend(seed);
        const PromptTemplate tmpl;
        const auto refs = synth_faces(3, seed, 32);
        std::vector<ImageGrid> images;
        for (const auto& f : refs) images.push_back(f.makeup);
        const auto latents = encode_all(be, images, 32);
        const auto samples = draw_csl_samples(latents.size(), be, 4, 4, 3, seed + 1);
        std::vector<double> v = planted(seed, be.encoder->embedding_dim());
        std::vector<double> grad;
        csl_embedding_loss(be, latents, tmpl, v, samples, &grad);
        REQUIRE(grad.size() == v.size());
        for (std::size_t d = 0; d < v.size(); ++d) {
            const double fd = oracle::central_difference(
                [&] { return csl_embedding_loss(be, latents, tmpl, v, samples); }, v[d]);
            INFO("seed ", seed, " dim ", d);
            CHECK(oracle::relative_close(grad[d], fd, 1e-4, 1e-10));
        }
    }
}

TEST_CASE("learn_style starts from the init word and leaves the base untouched") {
    const auto be = toy_backend(4);
    const PromptTemplate tmpl;
    std::vector<ImageGrid> images;
    for (const auto& f : synth_faces(4, 8, 64)) images.push_back(f.makeup);
    const auto latents = encode_all(be, images, 64);

    const auto params_before = oracle::checksum(be.predictor->params().flat());
    const auto probe = be.encoder->embed(tmpl.text());

    CslConfig cfg = toy_csl_config(6);
    cfg.steps = 20;
    std::vector<int> steps_seen;
    const auto result = learn_style(images, {}, tmpl, be, cfg, [&](int step, double) { steps_seen.push_back(step); });
    REQUIRE(result.losses.size() == 20);
    CHECK(steps_seen.size() == 20);
    CHECK(steps_seen.back() == 19);

    const auto first = draw_csl_samples(latents.size(), be, 8, 8, 1, cfg.seed);
    const double word_loss = csl_loss(be, latents, be.encoder->embed(tmpl.substitute("makeup")), first);
    CHECK(result.losses[0] == word_loss);

    CHECK(oracle::checksum(be.predictor->params().flat()) == params_before);
    CHECK(be.encoder->embed(tmpl.text()) == probe);
    CHECK(result.token.embedding != be.encoder->word_embedding("makeup"));
    for (double x : result.token.embedding) CHECK(std::isfinite(x));

    const auto& meta = result.token.meta;
    CHECK(meta.steps == 20);
    CHECK(meta.learning_rate == cfg.learning_rate);
    CHECK(meta.seed == 6);
    CHECK(meta.optimizer == "sgd");
    CHECK(meta.init_word == "makeup");
    CHECK(meta.final_loss == result.losses.back());
    CHECK(meta.reference_ids == std::vector<std::string>{"ref0", "ref1", "ref2", "ref3"});
    CHECK(result.warnings.empty());

    SUBCASE("same seed gives the same token") {
        const auto again = learn_style(images, {}, tmpl, be, cfg);
        CHECK(again.token.embedding == result.token.embedding);
        CHECK(again.losses == result.losses);
    }
}

TEST_CASE("learn_style validates its inputs") {
    const auto be = toy_backend(0);
    const PromptTemplate tmpl;
    std::vector<ImageGrid> none;
    CHECK_THROWS_AS(learn_style(none, {}, tmpl, be, toy_csl_config()), InvalidArgument);

    std::vector<ImageGrid> images;
    for (const auto& f : synth_faces(2, 1, 64)) images.push_back(f.makeup);
    CslConfig cfg = toy_csl_config();
    cfg.steps = 2;
    const auto few = learn_style(images, {}, tmpl, be, cfg);
    REQUIRE(few.warnings.size() == 1);
    CHECK(few.warnings[0].find("3 to 5") != std::string::npos);

    const std::vector<std::string> ids{"only-one"};
    CHECK_THROWS_AS(learn_style(images, ids, tmpl, be, cfg), InvalidArgument);

    cfg.learning_rate = 0.0;
    CHECK_THROWS_AS(learn_style(images, {}, tmpl, be, cfg), InvalidArgument);

    cfg = toy_csl_config();
    cfg.steps = 2;
    images[1].at(5, 5, 1) = std::nan("");
    CHECK_THROWS_AS(learn_style(images, {}, tmpl, be, cfg), NonFiniteValue);
}

TEST_CASE("toy style learning descends and recovers a planted token") {
    const PromptTemplate tmpl;
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
        const auto be = toy_backend(seed);
        const auto u = planted(seed, be.encoder->embedding_dim());
        const auto refs = render_style_references(be, tmpl, u, 4, 64, seed + 7);
        const auto result = learn_style(refs, {}, tmpl, be, toy_csl_config(seed));
        REQUIRE(result.losses.size() == 500);

        const auto d = oracle::loss_deciles(result.losses);
        const double cos_init = oracle::cosine(be.encoder->word_embedding("makeup"), u);
        const double cos_final = oracle::cosine(result.token.embedding, u);
        MESSAGE("seed ", seed, ": loss deciles ", d.first, " -> ", d.last, ", cosine ", cos_init, " -> ", cos_final);
        CHECK(d.last < d.first);
        CHECK(cos_final > cos_init);
    }
}

TEST_CASE("token files round trip and are keyed by id") {
    TempDir dir("tokens");
    const auto be = toy_backend(0);
    StyleToken token;
    token.embedding = planted(1, be.encoder->embedding_dim());
    token.embedding[3] = 0.1 + 0.2;  // a value with a long binary expansion
    token.meta.steps = 500;
    token.meta.learning_rate = 1e-5;
    token.meta.seed = 42;
    token.meta.init_word = "makeup";
    token.meta.reference_ids = {"a", "b", "c"};
    token.meta.final_loss = 0.123456789;

    token_store(token, dir / "x.token");
    const StyleToken loaded = token_load(dir / "x.token", be.encoder->embedding_dim());
    REQUIRE(loaded.embedding.size() == token.embedding.size());
    for (std::size_t i = 0; i < token.embedding.size(); ++i) {
        CHECK(std::bit_cast<std::uint64_t>(loaded.embedding[i]) == std::bit_cast<std::uint64_t>(token.embedding[i]));
    }
    CHECK(loaded.placeholder == "<*>");
    CHECK(loaded.meta.reference_ids == token.meta.reference_ids);
    CHECK(loaded.meta.learning_rate == 1e-5);
    CHECK(loaded.meta.seed == 42);
    CHECK(loaded.meta.final_loss == token.meta.final_loss);

    CHECK_THROWS_AS(token_load(dir / "x.token", be.encoder->embedding_dim() + 1), ShapeMismatch);

    {
        std::ofstream out(dir / "bad.token", std::ios::binary);
        out << "not a container at all";
    }
    CHECK_THROWS_AS(token_load(dir / "bad.token"), FormatError);

    token.embedding[0] = std::nan("");
    CHECK_THROWS_AS(token_store(token, dir / "nan.token"), NonFiniteValue);

    SUBCASE("library keeps tokens apart") {
        TokenLibrary lib(dir / "lib");
        StyleToken a, b;
        a.embedding = planted(10, 16);
        b.embedding = planted(11, 16);
        lib.put("style-a", a);
        lib.put("style_b", b);
        CHECK(lib.ids() == std::vector<std::string>{"style-a", "style_b"});
        CHECK(lib.get("style-a").embedding == a.embedding);
        CHECK(lib.get("style_b").embedding == b.embedding);
        CHECK(lib.contains("style-a"));
        CHECK_FALSE(lib.contains("style-c"));
        CHECK_THROWS_AS(lib.get("style-c"), IoError);
        CHECK_THROWS_AS(lib.put("../escape", a), InvalidArgument);
        CHECK_THROWS_AS(lib.get("style-a", 8), ShapeMismatch);
    }
}
