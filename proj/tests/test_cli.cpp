#include <cstdlib>
#include <fstream>

#include "cli_pipeline.hpp"
#include "doctest.h"
#include "facepaint/errors.hpp"
#include "facepaint/evalharness.hpp"
#include "facepaint/image_io.hpp"
#include "temp_dir.hpp"

using namespace facepaint;
using namespace facepaint::cli;
namespace fs = std::filesystem;

namespace {

void write_text_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

std::string slurp(const fs::path& p) {
    const auto b = read_file(p);
    return {b.begin(), b.end()};
}

IntegrityResult integrity_of(const fs::path& gen_dir, const fs::path& naked) {
    return identity_integrity(read_image(gen_dir / "final.png"), read_image(naked),
                              read_mask_png(gen_dir / "mask.png", MaskKind::blurred));
}

// Prepared pairs plus a short-trained branch and style token shared by generation tests.
struct GenFixture {
    TempDir dir{"cli-gen"};
    std::string failure;
    GenFixture() {
        const std::string r = dir.path().string() + "/";
        for (const auto& args : std::vector<std::vector<std::string>>{
                 {"synth-faces", "--count", "4", "--seed", "7", "--out", r + "faces"},
                 {"prepare-data", "--in", r + "faces", "--out", r + "pairs", "--image-size", "64"},
                 {"train-mafor", "--pairs", r + "pairs/manifest.jsonl", "--steps", "60", "--lr", "1e-2", "--out",
                  r + "branch"},
                 {"learn-style", "--refs", r + "faces", "--steps", "100", "--lr", "2", "--image-size", "64", "--out",
                  r + "style"}}) {
            const CliResult res = run_cli(args);
            if (res.code != 0) failure += args[0] + ": " + res.err;
        }
    }
    std::string path(const std::string& rel) const { return (dir / rel).string(); }
    std::vector<std::string> generate(const std::string& out, std::vector<std::string> extra = {}) const {
        std::vector<std::string> a{"generate", "--face", path("pairs/face_000/naked.png"), "--style",
                                   path("style/style.token"), "--branch", path("branch/branch.fpct"),
                                   "--seed", "11", "--steps", "30", "--out", path(out)};
        a.insert(a.end(), extra.begin(), extra.end());
        return a;
    }
};

}  // namespace

TEST_CASE("content hashes match git object ids") {
    CHECK(git_blob_id(std::span<const std::uint8_t>{}) == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    const std::string hello = "hello\n";
    CHECK(git_blob_id(std::span(reinterpret_cast<const std::uint8_t*>(hello.data()), hello.size())) ==
          "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("config files: parsing and precedence") {
    TempDir dir("cli-config");
    const fs::path cfg = dir / "run.cfg";
    write_text_file(cfg, "# toy faces\ncount = 3\n  seed=5\nsize = \"32\"\ntruth = true\n");
    const auto values = read_config_file(cfg);
    CHECK(values.at("count") == "3");
    CHECK(values.at("seed") == "5");
    CHECK(values.at("size") == "32");

    // flag beats file, file beats default
    const CliResult r = run_cli({"synth-faces", "--config", cfg.string(), "--count", "2", "--out", (dir / "o").string()});
    REQUIRE(r.code == 0);
    const RunManifest m = read_run_manifest(dir / "o" / kRunManifestName);
    CHECK(m.config.at("count") == "2");
    CHECK(m.config.at("seed") == "5");
    CHECK(m.config.at("size") == "32");
    CHECK(m.config.at("faceless") == "0");
    CHECK(m.config.at("truth") == "true");
    CHECK(m.seed == 5u);
    CHECK(fs::exists(dir / "o" / "face_001.png"));
    CHECK_FALSE(fs::exists(dir / "o" / "face_002.png"));
    CHECK(fs::exists(dir / "o" / "truth" / "face_000_mask.png"));
    CHECK(read_image(dir / "o" / "face_000.png").height() == 32);

    write_text_file(dir / "bad.cfg", "colour = red\n");
    CHECK(run_cli({"synth-faces", "--config", (dir / "bad.cfg").string(), "--out", (dir / "x").string()}).code ==
          kExitUsage);
    write_text_file(dir / "range.cfg", "count = -4\n");
    CHECK(run_cli({"synth-faces", "--config", (dir / "range.cfg").string(), "--out", (dir / "x").string()}).code ==
          kExitUsage);
    write_text_file(dir / "dup.cfg", "count = 1\ncount = 2\n");
    CHECK_THROWS_AS(read_config_file(dir / "dup.cfg"), FormatError);
    write_text_file(dir / "noeq.cfg", "count 1\n");
    CHECK_THROWS_AS(read_config_file(dir / "noeq.cfg"), FormatError);
    CHECK(run_cli({"synth-faces", "--config", (dir / "missing.cfg").string(), "--out", (dir / "x").string()}).code ==
          kExitInput);

    // required options may come from the file
    write_text_file(dir / "prep.cfg", "in = " + (dir / "o").string() + "\nimage-size = 32\n");
    const CliResult p = run_cli({"prepare-data", "--config", (dir / "prep.cfg").string(), "--out", (dir / "p").string()});
    CHECK(p.code == 0);
    CHECK(p.out.find("prepared 2 pairs") != std::string::npos);
}

TEST_CASE("exit codes") {
    TempDir dir("cli-exit");
    CHECK(run_cli({}).code == kExitUsage);
    CHECK(run_cli({"paint-everything"}).code == kExitUsage);
    CHECK(run_cli({"--help"}).code == kExitOk);
    CHECK(run_cli({"generate", "--out", (dir / "g").string()}).code == kExitUsage);
    CHECK(run_cli({"train-mafor", "--pairs", "x", "--lr", "-1", "--out", "y"}).code == kExitUsage);
    CHECK(run_cli({"--log-level", "chatty", "synth-faces", "--out", (dir / "s").string()}).code == kExitUsage);

    const CliResult missing = run_cli({"generate", "--face", (dir / "none.png").string(), "--style",
                                       (dir / "none.token").string(), "--out", (dir / "g").string()});
    CHECK(missing.code == kExitInput);
    CHECK(missing.err.find("input error") != std::string::npos);

    write_text_file(dir / "junk.token", "not a container");
    REQUIRE(run_cli({"synth-faces", "--count", "1", "--out", (dir / "f").string()}).code == 0);
    CHECK(run_cli({"generate", "--face", (dir / "f" / "face_000.png").string(), "--style",
                   (dir / "junk.token").string(), "--out", (dir / "g").string()})
              .code == kExitInput);

    const CliResult empty_pairs = run_cli({"train-mafor", "--pairs", (dir / "nothing.jsonl").string(), "--out",
                                           (dir / "b").string()});
    CHECK(empty_pairs.code == kExitInput);

#ifdef FACEPAINT_CLI_PATH
    const std::string bin = FACEPAINT_CLI_PATH;
    CHECK(WEXITSTATUS(std::system((bin + " --version > /dev/null").c_str())) == 0);
    CHECK(WEXITSTATUS(std::system((bin + " generate > /dev/null 2>&1").c_str())) == 1);
    CHECK(WEXITSTATUS(std::system((bin + " prepare-data --in " + (dir / "void").string() + " --out " +
                                   (dir / "v").string() + " > /dev/null 2>&1")
                                      .c_str())) == 2);
#endif
}

TEST_CASE("prepare-data") {
    TempDir dir("cli-prep");
    REQUIRE(run_cli({"synth-faces", "--count", "5", "--seed", "3", "--out", (dir / "faces").string()}).code == 0);
    const CliResult r = run_cli({"prepare-data", "--in", (dir / "faces").string(), "--out", (dir / "a").string(),
                                 "--image-size", "64", "--workers", "3"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("prepared 5 pairs, skipped 0") != std::string::npos);
    const RunManifest a = read_run_manifest(dir / "a" / kRunManifestName);
    CHECK(a.inputs.size() == 5);
    CHECK(a.outputs.size() == 1 + 5 * 3);

    // rerun: identical pair manifest and outputs
    REQUIRE(run_cli({"prepare-data", "--in", (dir / "faces").string(), "--out", (dir / "b").string(), "--image-size",
                     "64"})
                .code == 0);
    const RunManifest b = read_run_manifest(dir / "b" / kRunManifestName);
    REQUIRE(a.outputs.size() == b.outputs.size());
    for (std::size_t i = 0; i < a.outputs.size(); ++i) {
        CHECK(a.outputs[i].path == b.outputs[i].path);
        CHECK(a.outputs[i].hash == b.outputs[i].hash);
    }
    CHECK(slurp(dir / "a" / "manifest.jsonl") == slurp(dir / "b" / "manifest.jsonl"));

    // one faceless image: 5 pairs plus one skip record
    REQUIRE(run_cli({"synth-faces", "--count", "5", "--seed", "3", "--faceless", "1", "--out",
                     (dir / "mixed").string()})
                .code == 0);
    const CliResult m = run_cli({"prepare-data", "--in", (dir / "mixed").string(), "--out", (dir / "c").string(),
                                 "--image-size", "64"});
    REQUIRE(m.code == 0);
    CHECK(m.out.find("prepared 5 pairs, skipped 1") != std::string::npos);

    fs::create_directories(dir / "empty");
    const CliResult e = run_cli({"prepare-data", "--in", (dir / "empty").string(), "--out", (dir / "d").string()});
    CHECK(e.code == kExitInput);
    CHECK(e.err.find("no inputs") != std::string::npos);
}

TEST_CASE("generate: blend exactness and ablation directions") {
    const GenFixture fx;
    REQUIRE(fx.failure.empty());
    const fs::path naked = fx.path("pairs/face_000/naked.png");

    REQUIRE(run_cli(fx.generate("on")).code == 0);
    const IntegrityResult on = integrity_of(fx.path("on"), naked);
    CHECK(on.outside_mad == 0.0);
    CHECK(on.outside_pixels > 0);
    CHECK(on.inside_mad > 0.0);

    REQUIRE(run_cli(fx.generate("no_blend", {"--no-final-blend"})).code == 0);
    CHECK(integrity_of(fx.path("no_blend"), naked).outside_mad > on.outside_mad);
    // legacy spelling of the same switch
    REQUIRE(run_cli(fx.generate("no_blend_alias", {"--no-eq7"})).code == 0);
    CHECK(slurp(fx.path("no_blend_alias") + "/final.png") == slurp(fx.path("no_blend") + "/final.png"));

    REQUIRE(run_cli(fx.generate("g0", {"-g", "0"})).code == 0);
    REQUIRE(run_cli(fx.generate("g12", {"-g", "12"})).code == 0);
    const IntegrityResult g0_vs_g12 = identity_integrity(read_image(fx.path("g0") + "/final.png"),
                                                         read_image(fx.path("g12") + "/final.png"),
                                                         read_mask_png(fx.path("g0") + "/mask.png", MaskKind::blurred));
    CHECK(g0_vs_g12.inside_mad > 0.0);
    CHECK(g0_vs_g12.outside_mad == 0.0);

    REQUIRE(run_cli(fx.generate("no_control", {"--no-control"})).code == 0);
    const IntegrityResult control = identity_integrity(read_image(fx.path("on") + "/final.png"),
                                                       read_image(fx.path("no_control") + "/final.png"),
                                                       read_mask_png(fx.path("on") + "/mask.png", MaskKind::blurred));
    CHECK(control.inside_mad > 0.0);

    // same command twice: identical bytes
    REQUIRE(run_cli(fx.generate("again")).code == 0);
    for (const char* f : {"final.png", "gen.png", "mask.png", "diagnostics.json"}) {
        CHECK(slurp(fx.path("on") + "/" + f) == slurp(fx.path("again") + "/" + f));
    }
}

TEST_CASE("sweep writes one output per value and a contact sheet") {
    const GenFixture fx;
    REQUIRE(fx.failure.empty());
    const CliResult r = run_cli({"sweep", "--face", fx.path("pairs/face_001/naked.png"), "--style",
                                 fx.path("style/style.token"), "--branch", fx.path("branch/branch.fpct"), "--param",
                                 "guidance", "--values", "0,3,7,12,20", "--steps", "20", "--workers", "4", "--out",
                                 fx.path("sweep")});
    REQUIRE(r.code == 0);
    const RunManifest m = read_run_manifest(fx.dir / "sweep" / kRunManifestName);
    REQUIRE(m.extra["runs"].size() == 5);
    CHECK(m.extra["runs"][4]["config"]["guidance_scale"] == 20.0);

    const ImageGrid naked = read_image(fx.path("pairs/face_001/naked.png"));
    std::vector<ImageGrid> finals;
    for (const auto& run : m.extra["runs"]) {
        const fs::path d = fx.dir / "sweep" / run["dir"].get<std::string>();
        finals.push_back(read_image(d / "final.png"));
        const Mask mask = read_mask_png(d / "mask.png", MaskKind::blurred);
        CHECK(identity_integrity(finals.back(), naked, mask).outside_mad == 0.0);
    }
    CHECK(finals.size() == 5);
    const ImageGrid sheet = read_image(fx.dir / "sweep" / "contact_sheet.png");
    CHECK(sheet.height() == 64);
    CHECK(sheet.width() == 6 * 64 + 5 * 2);

    // concurrency does not change the bytes
    REQUIRE(run_cli({"replay", (fx.dir / "sweep" / kRunManifestName).string(), "--out", fx.path("sweep2")}).code == 0);

    CHECK(run_cli({"sweep", "--face", fx.path("pairs/face_001/naked.png"), "--style", fx.path("style/style.token"),
                   "--param", "steps", "--values", "10,many", "--out", fx.path("bad")})
              .code == kExitInput);
    CHECK(run_cli({"sweep", "--face", fx.path("pairs/face_001/naked.png"), "--style", fx.path("style/style.token"),
                   "--param", "colour", "--values", "1", "--out", fx.path("bad")})
              .code == kExitUsage);
}

TEST_CASE("run manifests round trip and reject other versions") {
    RunManifest m;
    m.command = "generate";
    m.config = {{"seed", "3"}, {"out", "/tmp/x"}};
    m.seed = 3;
    m.out_dir = "/tmp/x";
    m.inputs = {{"face", "/tmp/f.png", "abc"}};
    m.outputs = {{"final", "final.png", "def"}};
    const RunManifest back = run_manifest_from_json(to_json(m));
    CHECK(back.command == m.command);
    CHECK(back.config == m.config);
    CHECK(back.seed == m.seed);
    CHECK(back.inputs[0].hash == "abc");
    CHECK(back.outputs[0].path == "final.png");
    auto j = to_json(m);
    j["schema_version"] = 2;
    CHECK_THROWS_AS(run_manifest_from_json(j), VersionMismatch);
    j.erase("schema_version");
    CHECK_THROWS_AS(run_manifest_from_json(j), FormatError);
}

TEST_CASE("full toy pipeline replays byte-identically, twice") {
    TempDir dir("cli-pipeline");
    std::string failure;
    const auto manifests = run_toy_pipeline(dir.path(), &failure, 120, 200);
    REQUIRE_MESSAGE(!manifests.empty(), failure);
    CHECK(manifests.size() == 8);

    for (int round = 0; round < 2; ++round) {
        for (std::size_t i = 0; i < manifests.size(); ++i) {
            const fs::path out = dir / ("replay" + std::to_string(round) + "_" + std::to_string(i));
            const CliResult r = run_cli({"replay", manifests[i].string(), "--out", out.string()});
            CHECK_MESSAGE(r.code == 0, manifests[i].string() << ": " << r.err);
            CHECK(r.out.find("byte-identical") != std::string::npos);
        }
    }

    // a changed input is refused, a changed output is reported
    const RunManifest gen = read_run_manifest(manifests[5]);
    write_text_file(dir / "tampered.json", [&] {
        RunManifest t = gen;
        t.outputs[0].hash = std::string(40, '0');
        return to_json(t).dump();
    }());
    const CliResult diverged = run_cli({"replay", (dir / "tampered.json").string(), "--out", (dir / "t").string()});
    CHECK(diverged.code == kExitRuntime);
    CHECK(diverged.err.find("diverged") != std::string::npos);

    write_png(fs::path(gen.config.at("face")), ImageGrid(64, 64, 3, 0.5));
    CHECK(run_cli({"replay", manifests[5].string(), "--out", (dir / "u").string()}).code == kExitInput);
}
