#include "cli.hpp"

#include <openssl/evp.h>
#include <pthread.h>
#include <signal.h>
#include <unistd.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <ostream>
#include <thread>

#include "facepaint/csl.hpp"
#include "facepaint/dataprep.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/evalharness.hpp"
#include "facepaint/image_io.hpp"
#include "facepaint/mafor.hpp"
#include "facepaint/maip.hpp"
#include "facepaint/service.hpp"

namespace facepaint::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown by a command that already reported its failure.
struct ExitWith {
    int code;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string hex(const unsigned char* data, unsigned len) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    s.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        s += digits[data[i] >> 4];
        s += digits[data[i] & 15];
    }
    return s;
}

std::string text_of(const json& j) { return j.dump(2) + "\n"; }

void write_text(const fs::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string absolute_path(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

}  // namespace

std::string git_blob_id(std::span<const std::uint8_t> bytes) {
    const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned len = 0;
    const bool ok = ctx && EVP_DigestInit_ex(ctx.get(), EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx.get(), header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx.get(), digest, &len) == 1;
    if (!ok) throw Error("SHA-1 digest failed");
    return hex(digest, len);
}

std::string git_blob_id(const fs::path& file) { return git_blob_id(read_file(file)); }

json to_json(const RunManifest& m) {
    auto files = [](const std::vector<FileRecord>& records) {
        json a = json::array();
        for (const auto& r : records) a.push_back({{"role", r.role}, {"path", r.path}, {"hash", r.hash}});
        return a;
    };
    json j = {{"schema_version", kRunManifestVersion},
              {"command", m.command},
              {"config", m.config},
              {"seed", m.seed ? json(*m.seed) : json(nullptr)},
              {"out_dir", m.out_dir},
              {"inputs", files(m.inputs)},
              {"outputs", files(m.outputs)}};
    if (!m.extra.empty()) j["extra"] = m.extra;
    return j;
}

RunManifest run_manifest_from_json(const json& j) {
    try {
        const int version = j.at("schema_version");
        if (version != kRunManifestVersion) {
            throw VersionMismatch("run manifest version " + std::to_string(version) + ", expected " +
                                  std::to_string(kRunManifestVersion));
        }
        RunManifest m;
        m.command = j.at("command");
        m.config = j.at("config").get<std::map<std::string, std::string>>();
        if (!j.at("seed").is_null()) m.seed = j.at("seed").get<std::uint64_t>();
        m.out_dir = j.at("out_dir");
        for (const char* key : {"inputs", "outputs"}) {
            auto& dst = std::string(key) == "inputs" ? m.inputs : m.outputs;
            for (const auto& r : j.at(key)) dst.push_back({r.at("role"), r.at("path"), r.at("hash")});
        }
        m.extra = j.value("extra", json::object());
        return m;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed run manifest: ") + e.what());
    }
}

RunManifest read_run_manifest(const fs::path& path) {
    const auto bytes = read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw FormatError(path.string() + " is not JSON: " + e.what());
    }
    return run_manifest_from_json(j);
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path.string());
    std::map<std::string, std::string> values;
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw FormatError(path.string() + ":" + std::to_string(n) + ": expected key = value");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.rfind("--", 0) == 0) key = key.substr(2);
        if (key.empty()) throw FormatError(path.string() + ":" + std::to_string(n) + ": empty key");
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        if (!values.emplace(key, value).second) {
            throw FormatError(path.string() + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
        }
    }
    return values;
}

namespace {

enum class PathKind { file, dir, pairs };

struct PathSpec {
    std::string key;
    PathKind kind = PathKind::file;
};

struct Run {
    fs::path out;
    RunManifest manifest;
    std::ostream& log;
    std::ostream& err;

    void output(const std::string& role, const fs::path& relative) {
        manifest.outputs.push_back({role, relative.generic_string(), git_blob_id(out / relative)});
    }
};

struct Command {
    CLI::App* app = nullptr;
    std::vector<std::string> required;
    std::vector<PathSpec> inputs;
    bool writes_manifest = true;
    std::string config_file;
    std::function<void(Run&)> body;
};

void apply_config_file(CLI::App& sub, const std::map<std::string, std::string>& values) {
    for (const auto& [key, value] : values) {
        CLI::Option* opt = key == "config" || key == "help" ? nullptr : sub.get_option_no_throw("--" + key);
        if (!opt) throw UsageError("unknown key '" + key + "' in config file for " + sub.get_name());
        if (opt->count() > 0) continue;  // the command line wins
        if (opt->get_expected_min() == 0) {
            if (value == "false" || value == "0" || value == "no") continue;
            if (value != "true" && value != "1" && value != "yes") {
                throw UsageError("config key '" + key + "' is a flag; use true or false");
            }
            opt->add_result("true");
        } else {
            opt->add_result(value);
        }
        opt->run_callback();
    }
}

bool is_flag(const CLI::Option* opt) { return opt->get_expected_min() == 0; }

std::map<std::string, std::string> resolve_config(const CLI::App& sub) {
    std::map<std::string, std::string> config;
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "config") continue;
        std::string value;
        if (is_flag(opt)) {
            value = opt->count() > 0 ? "true" : "false";
        } else if (opt->count() > 0) {
            for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
        } else {
            value = opt->get_default_str();
        }
        config[name] = value;
    }
    return config;
}

void record_inputs(const Command& cmd, RunManifest& m) {
    for (const auto& spec : cmd.inputs) {
        const std::string& value = m.config.at(spec.key);
        if (value.empty()) continue;
        const fs::path p = value;
        switch (spec.kind) {
            case PathKind::file:
                m.inputs.push_back({spec.key, p.string(), git_blob_id(p)});
                break;
            case PathKind::dir:
                for (const auto& f : list_images(p)) m.inputs.push_back({spec.key, f.string(), git_blob_id(f)});
                break;
            case PathKind::pairs: {
                m.inputs.push_back({spec.key, p.string(), git_blob_id(p)});
                const PairManifest pm = read_manifest(p);
                for (const auto& e : pm.pairs) {
                    for (const auto& rel : {e.makeup_path, e.naked_path, e.mask_path}) {
                        const fs::path f = (p.parent_path() / rel).lexically_normal();
                        m.inputs.push_back({spec.key, f.string(), git_blob_id(f)});
                    }
                }
                break;
            }
        }
    }
}

void setup_logging(const std::string& level) {
    static std::once_flag once;
    std::call_once(once, [] { spdlog::set_default_logger(spdlog::stderr_color_mt("facepaint-cli")); });
    const auto lvl = spdlog::level::from_str(level);
    if (lvl == spdlog::level::off && level != "off") throw UsageError("unknown log level '" + level + "'");
    spdlog::set_level(lvl);
}

double decile_mean(std::span<const double> losses, bool last) {
    const std::size_t n = std::max<std::size_t>(1, losses.size() / 10);
    const auto begin = last ? losses.end() - static_cast<std::ptrdiff_t>(n) : losses.begin();
    double s = 0.0;
    for (auto it = begin; it != begin + static_cast<std::ptrdiff_t>(n); ++it) s += *it;
    return s / static_cast<double>(n);
}

void print_losses(std::ostream& out, std::span<const double> losses) {
    if (losses.empty()) return;
    out << "loss: first decile " << decile_mean(losses, false) << ", last decile " << decile_mean(losses, true)
        << "\n";
}

// ---- generation shared by generate and sweep ----

struct GenerateOptions {
    std::string face, style, branch;
    double guidance = 7.5;
    int steps = 50;
    std::uint64_t seed = 0;
    std::uint64_t backend_seed = 0;
    int image_size = 0;
    int blur_kernel = 0;
    double blur_sigma = 0.0;
    bool no_final_blend = false, no_mask_merge = false, no_control = false, no_style = false;
};

void add_generate_options(CLI::App* sub, GenerateOptions& o) {
    sub->add_option("--face", o.face, "naked face image (PNG/JPEG)");
    sub->add_option("--style", o.style, "style token file");
    sub->add_option("--branch", o.branch, "control branch checkpoint; zero-initialised branch when omitted");
    sub->add_option("-g,--guidance", o.guidance, "guidance scale")->check(CLI::Range(0.0, 1e6));
    sub->add_option("--steps", o.steps, "inference steps")->check(CLI::Range(1, 1000));
    sub->add_option("--seed", o.seed, "sampler seed");
    sub->add_option("--backend-seed", o.backend_seed, "toy backend seed");
    sub->add_option("--image-size", o.image_size, "resize the face to this square size first (0 keeps it)");
    sub->add_option("--blur-kernel", o.blur_kernel, "mask blur kernel (0 = default for the size)");
    sub->add_option("--blur-sigma", o.blur_sigma, "mask blur sigma (0 = default for the size)");
    sub->add_flag("--no-final-blend,--no-eq7", o.no_final_blend, "skip the final blend with the naked face");
    sub->add_flag("--no-mask-merge", o.no_mask_merge, "skip per-step masked latent merging");
    sub->add_flag("--no-control", o.no_control, "run without the control branch");
    sub->add_flag("--no-style", o.no_style, "replace the style token by its init word");
}

struct GenerationSetup {
    ImageGrid face;
    StyleToken token;
    ToyBackend backend;
    ControlBranch branch;
    GenerationConfig config;
};

GenerationSetup load_generation(const GenerateOptions& o) {
    ToyBackend backend = toy_backend(o.backend_seed);
    ImageGrid face = read_image(o.face);
    if (o.image_size > 0) face = quantize8(prepare_image(face, o.image_size));
    StyleToken token = token_load(o.style, backend.encoder->embedding_dim());
    ControlBranch branch = o.branch.empty() ? ControlBranch(*backend.predictor, o.backend_seed) : load_branch(o.branch);

    GenerationConfig c;
    c.guidance_scale = o.guidance;
    c.num_inference_steps = o.steps;
    c.seed = o.seed;
    c.use_final_blend = !o.no_final_blend;
    c.use_mask_merge = !o.no_mask_merge;
    c.use_control = !o.no_control;
    c.use_style = !o.no_style;
    if (o.blur_kernel > 0 || o.blur_sigma > 0.0) {
        BlurParams b = default_blur(std::min(face.height(), face.width()));
        if (o.blur_kernel > 0) b.kernel_size = o.blur_kernel;
        if (o.blur_sigma > 0.0) b.sigma = o.blur_sigma;
        c.blur = b;
    }
    return {std::move(face), std::move(token), std::move(backend), std::move(branch), c};
}

void write_generation(Run& run, const fs::path& rel, const GenerationResult& r, const ImageGrid& face) {
    fs::create_directories(run.out / rel);
    write_png(run.out / rel / "final.png", r.final_image);
    write_png(run.out / rel / "gen.png", r.gen);
    write_png(run.out / rel / "mask.png", r.mask.values);
    const IntegrityResult integrity = identity_integrity(r.final_image, face, r.mask);
    json d = to_json(r.diagnostics);
    d["integrity"] = {{"outside_mad", integrity.outside_mad},
                      {"inside_mad", integrity.inside_mad},
                      {"outside_pixels", integrity.outside_pixels},
                      {"inside_pixels", integrity.inside_pixels}};
    write_text(run.out / rel / "diagnostics.json", text_of(d));
    for (const char* name : {"final.png", "gen.png", "mask.png", "diagnostics.json"}) {
        run.output(fs::path(name).stem().string(), rel / name);
    }
}

ImageGrid contact_sheet(std::span<const ImageGrid> tiles, int gap = 2) {
    const int h = tiles[0].height(), w = tiles[0].width(), c = tiles[0].channels();
    const int n = static_cast<int>(tiles.size());
    ImageGrid sheet(h, n * w + (n - 1) * gap, c, 1.0);
    for (int i = 0; i < n; ++i) {
        if (tiles[i].height() != h || tiles[i].width() != w || tiles[i].channels() != c) {
            throw ShapeMismatch("contact sheet tiles differ in size");
        }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int k = 0; k < c; ++k) sheet.at(y, i * (w + gap) + x, k) = tiles[i].at(y, x, k);
    }
    return sheet;
}

GenerationConfig sweep_config(GenerationConfig base, const std::string& param, const std::string& value) {
    try {
        std::size_t used = 0;
        if (param == "guidance") {
            base.guidance_scale = std::stod(value, &used);
        } else if (param == "steps") {
            base.num_inference_steps = std::stoi(value, &used);
        } else {
            base.seed = std::stoull(value, &used);
        }
        if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::logic_error&) {
        throw InvalidArgument("sweep value '" + value + "' is not valid for " + param);
    }
    return base;
}

int exit_code_for(const std::exception_ptr& e, std::ostream& err) {
    try {
        std::rethrow_exception(e);
    } catch (const ExitWith& x) {
        return x.code;
    } catch (const CLI::ParseError& x) {
        err << "error: " << x.what() << "\n";
        return kExitUsage;
    } catch (const UsageError& x) {
        err << "error: " << x.what() << "\n";
        return kExitUsage;
    } catch (const InvalidArgument& x) {
        err << "input error: " << x.what() << "\n";
    } catch (const ShapeMismatch& x) {
        err << "input error: " << x.what() << "\n";
    } catch (const NoFaceDetected& x) {
        err << "input error: " << x.what() << "\n";
    } catch (const FormatError& x) {
        err << "input error: " << x.what() << "\n";
    } catch (const IoError& x) {
        err << "input error: " << x.what() << "\n";
    } catch (const std::exception& x) {
        err << "runtime error: " << x.what() << "\n";
        return kExitRuntime;
    } catch (...) {
        err << "runtime error: unknown failure\n";
        return kExitRuntime;
    }
    return kExitInput;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Character makeup generation: data prep, training, style learning, generation, evaluation"};
    app.name("facepaint");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.set_version_flag("--version", "facepaint 0.1.0");
    std::string log_level = "warn";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off");

    std::map<std::string, Command> commands;
    auto add_command = [&](const std::string& name, const std::string& help) -> Command& {
        Command& cmd = commands[name];
        cmd.app = app.add_subcommand(name, help);
        return cmd;
    };
    auto with_config = [](Command& cmd) {
        cmd.app->add_option("--config", cmd.config_file, "key = value file; flags override it");
    };
    std::string out_dir;
    auto with_out = [&](Command& cmd, const std::string& help) {
        cmd.app->add_option("--out", out_dir, help);
        cmd.required.push_back("out");
    };

    // prepare-data
    struct {
        std::string in;
        int image_size = 512, blur_kernel = 0, workers = 1;
        double blur_sigma = 0.0;
    } prep;
    {
        Command& cmd = add_command("prepare-data", "build pseudo pairs from unpaired makeup images");
        cmd.app->add_option("--in", prep.in, "directory of makeup images");
        with_out(cmd, "pair directory");
        cmd.app->add_option("--image-size", prep.image_size, "square working size")->check(CLI::Range(8, 8192));
        cmd.app->add_option("--blur-kernel", prep.blur_kernel, "mask blur kernel (0 = default for the size)");
        cmd.app->add_option("--blur-sigma", prep.blur_sigma, "mask blur sigma (0 = default for the size)");
        cmd.app->add_option("--workers", prep.workers, "parallel workers")->check(CLI::Range(1, 256));
        with_config(cmd);
        cmd.required.push_back("in");
        cmd.inputs = {{"in", PathKind::dir}};
        cmd.body = [&](Run& run) {
            if (list_images(prep.in).empty()) throw InvalidArgument("no inputs in " + prep.in);
            BuildConfig c;
            c.image_size = prep.image_size;
            c.workers = prep.workers;
            if (prep.blur_kernel > 0 || prep.blur_sigma > 0.0) {
                BlurParams b = default_blur(prep.image_size);
                if (prep.blur_kernel > 0) b.kernel_size = prep.blur_kernel;
                if (prep.blur_sigma > 0.0) b.sigma = prep.blur_sigma;
                c.blur = b;
            }
            const PairManifest m = build_pairs(prep.in, run.out, c, ToyFaceParser{}, ToyDemakeup{});
            run.output("manifest", kManifestName);
            for (const auto& e : m.pairs) {
                run.output("makeup", e.makeup_path);
                run.output("naked", e.naked_path);
                run.output("mask", e.mask_path);
            }
            run.log << "prepared " << m.pairs.size() << " pairs, skipped " << m.skipped.size() << " -> "
                    << (run.out / kManifestName).string() << "\n";
            for (const auto& s : m.skipped) run.log << "  skipped " << s.source_id << ": " << s.reason << "\n";
        };
    }

    // train-mafor
    struct {
        std::string pairs, init, optimizer = "adam";
        int steps = 15000, accum = 4, batch = 1;
        double lr = 1e-4;
        std::uint64_t seed = 0, backend_seed = 0;
    } mafor;
    {
        Command& cmd = add_command("train-mafor", "train the control branch on a pair manifest");
        cmd.app->add_option("--pairs", mafor.pairs, "pair manifest (manifest.jsonl)");
        with_out(cmd, "output directory for branch.fpct and loss.csv");
        cmd.app->add_option("--steps", mafor.steps, "optimizer steps")->check(CLI::Range(1, 10000000));
        cmd.app->add_option("--lr", mafor.lr, "learning rate")->check(CLI::PositiveNumber);
        cmd.app->add_option("--accum", mafor.accum, "gradient accumulation steps")->check(CLI::Range(1, 1024));
        cmd.app->add_option("--batch", mafor.batch, "batch size")->check(CLI::Range(1, 1024));
        cmd.app->add_option("--seed", mafor.seed, "training seed");
        cmd.app->add_option("--backend-seed", mafor.backend_seed, "toy backend seed");
        cmd.app->add_option("--optimizer", mafor.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
        cmd.app->add_option("--init", mafor.init, "branch checkpoint to continue from");
        with_config(cmd);
        cmd.required.push_back("pairs");
        cmd.inputs = {{"pairs", PathKind::pairs}, {"init", PathKind::file}};
        cmd.body = [&](Run& run) {
            const std::vector<PseudoPair> pairs = load_pairs(mafor.pairs);
            if (pairs.empty()) throw InvalidArgument("pair manifest " + mafor.pairs + " has no pairs");
            const ToyBackend backend = toy_backend(mafor.backend_seed);
            MaForTrainConfig c;
            c.learning_rate = mafor.lr;
            c.grad_accum_steps = mafor.accum;
            c.total_steps = mafor.steps;
            c.batch_size = mafor.batch;
            c.seed = mafor.seed;
            c.optimizer = parse_optimizer(mafor.optimizer);
            const MaForResult r = mafor.init.empty() ? train_mafor(pairs, backend, c)
                                                     : train_mafor(pairs, backend, c, load_branch(mafor.init));
            save_branch(r.branch, run.out / "branch.fpct");
            write_loss_log(run.out / "loss.csv", r.losses);
            run.output("branch", "branch.fpct");
            run.output("loss_log", "loss.csv");
            run.log << "trained control branch for " << r.losses.size() << " steps on " << pairs.size()
                    << " pairs\n";
            print_losses(run.log, r.losses);
        };
    }

    // learn-style
    struct {
        std::string refs, optimizer = "sgd", init_word = "makeup", template_text = kDefaultTemplate;
        int steps = 5000, batch = 1, image_size = 512;
        double lr = 1e-5;
        std::uint64_t seed = 0, backend_seed = 0;
    } style;
    {
        Command& cmd = add_command("learn-style", "learn a style token from reference images");
        cmd.app->add_option("--refs", style.refs, "directory of reference images");
        with_out(cmd, "output directory for style.token and loss.csv");
        cmd.app->add_option("--steps", style.steps, "optimizer steps")->check(CLI::Range(1, 10000000));
        cmd.app->add_option("--lr", style.lr, "learning rate")->check(CLI::PositiveNumber);
        cmd.app->add_option("--batch", style.batch, "batch size")->check(CLI::Range(1, 1024));
        cmd.app->add_option("--seed", style.seed, "training seed");
        cmd.app->add_option("--backend-seed", style.backend_seed, "toy backend seed");
        cmd.app->add_option("--optimizer", style.optimizer, "sgd or adam")->check(CLI::IsMember({"sgd", "adam"}));
        cmd.app->add_option("--init-word", style.init_word, "word whose embedding seeds the token");
        cmd.app->add_option("--template", style.template_text, "prompt template containing the placeholder");
        cmd.app->add_option("--image-size", style.image_size, "references are cropped and resized to this")
            ->check(CLI::Range(8, 8192));
        with_config(cmd);
        cmd.required.push_back("refs");
        cmd.inputs = {{"refs", PathKind::dir}};
        cmd.body = [&](Run& run) {
            const auto paths = list_images(style.refs);
            if (paths.empty()) throw InvalidArgument("no inputs in " + style.refs);
            std::vector<ImageGrid> images;
            std::vector<std::string> ids;
            for (const auto& p : paths) {
                images.push_back(read_image(p));
                ids.push_back(p.stem().string());
            }
            const PromptTemplate tmpl(style.template_text);
            const ToyBackend backend = toy_backend(style.backend_seed);
            CslConfig c;
            c.steps = style.steps;
            c.learning_rate = style.lr;
            c.batch_size = style.batch;
            c.seed = style.seed;
            c.optimizer = parse_optimizer(style.optimizer);
            c.init_word = style.init_word;
            c.image_size = style.image_size;
            const CslResult r = learn_style(images, ids, tmpl, backend, c);
            for (const auto& w : r.warnings) run.err << "warning: " << w << "\n";
            token_store(r.token, run.out / "style.token");
            write_loss_log(run.out / "loss.csv", r.losses);
            run.output("token", "style.token");
            run.output("loss_log", "loss.csv");
            run.log << "learned style token from " << images.size() << " references in " << r.losses.size()
                    << " steps\n";
            print_losses(run.log, r.losses);
        };
    }

    // generate
    GenerateOptions gen;
    {
        Command& cmd = add_command("generate", "paint a style onto a naked face");
        add_generate_options(cmd.app, gen);
        with_out(cmd, "output directory");
        with_config(cmd);
        cmd.required.insert(cmd.required.end(), {"face", "style"});
        cmd.inputs = {{"face", PathKind::file}, {"style", PathKind::file}, {"branch", PathKind::file}};
        cmd.body = [&](Run& run) {
            const GenerationSetup s = load_generation(gen);
            const GenerationResult r = generate(s.face, s.token, s.branch, s.backend, s.config);
            write_generation(run, "", r, s.face);
            run.manifest.extra["generation_config"] = to_json(s.config);
            const IntegrityResult integrity = identity_integrity(r.final_image, s.face, r.mask);
            run.log << "wrote " << (run.out / "final.png").string() << " (outside-mask MAD "
                    << integrity.outside_mad << ", inside-mask MAD " << integrity.inside_mad << ")\n";
        };
    }

    // sweep
    GenerateOptions sweep_gen;
    struct {
        std::string param = "guidance";
        std::vector<std::string> values;
        int workers = 1;
    } sweep;
    {
        Command& cmd = add_command("sweep", "generate over a list of parameter values with a shared seed");
        add_generate_options(cmd.app, sweep_gen);
        cmd.app->add_option("--param", sweep.param, "guidance, steps or seed")
            ->check(CLI::IsMember({"guidance", "steps", "seed"}));
        cmd.app->add_option("--values", sweep.values, "comma separated values")->delimiter(',');
        cmd.app->add_option("--workers", sweep.workers, "concurrent generations")->check(CLI::Range(1, 256));
        with_out(cmd, "output directory");
        with_config(cmd);
        cmd.required.insert(cmd.required.end(), {"face", "style", "values"});
        cmd.inputs = {{"face", PathKind::file}, {"style", PathKind::file}, {"branch", PathKind::file}};
        cmd.body = [&](Run& run) {
            const GenerationSetup s = load_generation(sweep_gen);
            const std::size_t n = sweep.values.size();
            std::vector<GenerationConfig> configs;
            for (const auto& v : sweep.values) configs.push_back(sweep_config(s.config, sweep.param, v));

            std::vector<std::optional<GenerationResult>> results(n);
            std::vector<std::exception_ptr> errors(n);
            std::atomic<std::size_t> next{0};
            {
                std::vector<std::jthread> pool;
                const int workers = std::min<int>(sweep.workers, static_cast<int>(n));
                for (int w = 0; w < workers; ++w) {
                    pool.emplace_back([&] {
                        for (std::size_t i = next++; i < n; i = next++) {
                            try {
                                results[i] = generate(s.face, s.token, s.branch, s.backend, configs[i]);
                            } catch (...) {
                                errors[i] = std::current_exception();
                            }
                        }
                    });
                }
            }
            for (const auto& e : errors)
                if (e) std::rethrow_exception(e);

            json runs = json::array();
            std::vector<ImageGrid> tiles{s.face};
            for (std::size_t i = 0; i < n; ++i) {
                char dir[64];
                std::snprintf(dir, sizeof dir, "%02zu_%s", i, sweep.param.c_str());
                const std::string rel = std::string(dir) + "-" + sweep.values[i];
                write_generation(run, rel, *results[i], s.face);
                tiles.push_back(quantize8(results[i]->final_image));
                runs.push_back({{"value", sweep.values[i]}, {"dir", rel}, {"config", to_json(configs[i])}});
            }
            write_png(run.out / "contact_sheet.png", contact_sheet(tiles));
            run.output("contact_sheet", "contact_sheet.png");
            write_text(run.out / "sweep.json", text_of({{"param", sweep.param}, {"runs", runs}}));
            run.output("sweep", "sweep.json");
            run.manifest.extra["param"] = sweep.param;
            run.manifest.extra["runs"] = runs;
            run.log << "swept " << sweep.param << " over " << n << " values -> "
                    << (run.out / "contact_sheet.png").string() << "\n";
        };
    }

    // evaluate
    struct {
        std::string generated, reference, embedder = "toy", method = "facepaint", style_name = "style";
        int workers = 1;
    } eval;
    {
        Command& cmd = add_command("evaluate", "score generated images against references");
        cmd.app->add_option("--generated", eval.generated, "directory of generated images");
        cmd.app->add_option("--reference", eval.reference, "directory of reference images");
        cmd.app->add_option("--embedder", eval.embedder, "feature embedder id");
        cmd.app->add_option("--method", eval.method, "method label in the report");
        cmd.app->add_option("--style-name", eval.style_name, "style label in the report");
        cmd.app->add_option("--workers", eval.workers, "parallel workers")->check(CLI::Range(1, 256));
        with_out(cmd, "output directory for the report and features");
        with_config(cmd);
        cmd.required.insert(cmd.required.end(), {"generated", "reference"});
        cmd.inputs = {{"generated", PathKind::dir}, {"reference", PathKind::dir}};
        cmd.body = [&](Run& run) {
            const auto gen_paths = list_images(eval.generated);
            const auto ref_paths = list_images(eval.reference);
            if (gen_paths.size() < 2 || ref_paths.size() < 2) {
                throw InvalidArgument("evaluation needs at least two generated and two reference images");
            }
            const auto embedder = make_embedder(eval.embedder);
            const FeatureSet g = embed_set(gen_paths, *embedder, eval.workers, eval.generated);
            const FeatureSet r = embed_set(ref_paths, *embedder, eval.workers, eval.reference);
            FrechetDiagnostics fd;
            const double fid = frechet_distance(g, r, &fd);
            const std::vector<ScoreRow> rows{{eval.method, eval.style_name, cosine_similarity_score(g, r), 0.0, fid}};
            write_features(g, run.out / "generated.fpfs");
            write_features(r, run.out / "reference.fpfs");
            write_text(run.out / "report.json", report_json(rows));
            write_text(run.out / "report.csv", report_csv(rows));
            for (const char* name : {"generated.fpfs", "reference.fpfs", "report.json", "report.csv"}) {
                run.output(fs::path(name).stem().string(), name);
            }
            run.manifest.extra["frechet"] = {{"mean_term", fd.mean_term},
                                             {"trace_term", fd.trace_term},
                                             {"clamped_eigenvalues", fd.clamped_eigenvalues}};
            run.log << report_table(rows);
        };
    }

    // synth-faces
    struct {
        int count = 5, size = 64, faceless = 0;
        std::uint64_t seed = 0;
        bool truth = false;
    } synth;
    {
        Command& cmd = add_command("synth-faces", "write synthetic toy faces with makeup patches");
        cmd.app->add_option("--count", synth.count, "number of faces")->check(CLI::Range(0, 100000));
        cmd.app->add_option("--seed", synth.seed, "generator seed");
        cmd.app->add_option("--size", synth.size, "square image size")->check(CLI::Range(16, 4096));
        cmd.app->add_option("--faceless", synth.faceless, "extra images without a face")->check(CLI::Range(0, 100000));
        cmd.app->add_flag("--truth", synth.truth, "also write ground-truth naked faces and masks under truth/");
        with_out(cmd, "output directory");
        with_config(cmd);
        cmd.body = [&](Run& run) {
            const auto faces = synth_faces(synth.count, synth.seed, synth.size);
            char name[64];
            for (std::size_t i = 0; i < faces.size(); ++i) {
                std::snprintf(name, sizeof name, "face_%03zu", i);
                const std::string base = name;
                write_png(run.out / (base + ".png"), faces[i].makeup);
                run.output("face", base + ".png");
                if (synth.truth) {
                    fs::create_directories(run.out / "truth");
                    write_png(run.out / "truth" / (base + "_naked.png"), faces[i].naked);
                    write_png(run.out / "truth" / (base + "_mask.png"), faces[i].mask.values);
                    run.output("naked", "truth/" + base + "_naked.png");
                    run.output("mask", "truth/" + base + "_mask.png");
                }
            }
            for (int i = 0; i < synth.faceless; ++i) {
                std::snprintf(name, sizeof name, "faceless_%03d.png", i);
                write_png(run.out / name, synth_faceless(synth.seed + 1000003ULL * static_cast<std::uint64_t>(i + 1),
                                                         synth.size));
                run.output("faceless", name);
            }
            run.log << "wrote " << faces.size() << " faces and " << synth.faceless << " faceless images to "
                    << run.out.string() << "\n";
        };
    }

    // serve
    struct {
        std::string host = "127.0.0.1", store, branch;
        int port = 8080, workers = 1, image_size = 64;
        std::uint64_t backend_seed = 0;
    } serve;
    {
        Command& cmd = add_command("serve", "run the HTTP job service");
        cmd.app->add_option("--host", serve.host, "bind address");
        cmd.app->add_option("--port", serve.port, "port")->check(CLI::Range(0, 65535));
        cmd.app->add_option("--store", serve.store, "artifact store directory (FACEPAINT_STORE)");
        cmd.app->add_option("--workers", serve.workers, "job workers (FACEPAINT_WORKERS)")->check(CLI::Range(1, 256));
        cmd.app->add_option("--backend-seed", serve.backend_seed, "toy backend seed (FACEPAINT_SEED)");
        cmd.app->add_option("--branch", serve.branch, "control branch checkpoint (FACEPAINT_BRANCH)");
        cmd.app->add_option("--image-size", serve.image_size, "working image size (FACEPAINT_IMAGE_SIZE)");
        with_config(cmd);
        cmd.writes_manifest = false;
        cmd.body = [&](Run& run) {
            CLI::App* sub = commands.at("serve").app;
            ServiceConfig c = service_config_from_env();
            auto given = [&](const char* name) { return sub->get_option("--" + std::string(name))->count() > 0; };
            if (given("store")) c.store_dir = serve.store;
            if (given("workers")) c.workers = serve.workers;
            if (given("backend-seed")) c.backend_seed = serve.backend_seed;
            if (given("branch")) c.branch_checkpoint = fs::path(serve.branch);
            if (given("image-size")) c.image_size = serve.image_size;

            // Signals are taken synchronously by a waiter thread; block them before any thread starts.
            sigset_t set, old;
            sigemptyset(&set);
            sigaddset(&set, SIGINT);
            sigaddset(&set, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &set, &old);
            struct Restore {
                sigset_t* old;
                ~Restore() { pthread_sigmask(SIG_SETMASK, old, nullptr); }
            } restore{&old};

            Service service(c);
            std::atomic<bool> done{false};
            std::jthread waiter([&] {
                int sig = 0;
                sigwait(&set, &sig);
                if (!done) service.stop();
            });
            run.log << "serving on http://" << serve.host << ":" << serve.port << " (store "
                    << c.store_dir.string() << ")" << std::endl;
            const bool ok = service.listen(serve.host, serve.port);
            done = true;
            if (!ok) {
                ::kill(::getpid(), SIGTERM);  // release the waiter
                waiter.join();
                throw IoError("cannot bind " + serve.host + ":" + std::to_string(serve.port));
            }
            waiter.join();
        };
    }

    // replay
    struct {
        std::string manifest;
    } replay;
    {
        Command& cmd = add_command("replay", "rerun a recorded run and check its outputs are byte-identical");
        cmd.app->add_option("manifest", replay.manifest, "run_manifest.json of the recorded run");
        with_out(cmd, "output directory for the rerun");
        cmd.required.push_back("manifest");
        cmd.writes_manifest = false;
        cmd.body = [&](Run& run) {
            const RunManifest m = read_run_manifest(replay.manifest);
            auto it = commands.find(m.command);
            if (it == commands.end() || !it->second.writes_manifest) {
                throw FormatError("run manifest names unknown command '" + m.command + "'");
            }
            for (const auto& in : m.inputs) {
                if (!fs::exists(in.path)) throw IoError("recorded input is missing: " + in.path);
                if (git_blob_id(fs::path(in.path)) != in.hash) {
                    throw InvalidArgument("recorded input changed since the run: " + in.path);
                }
            }
            std::vector<std::string> rerun{m.command};
            for (const auto& [key, value] : m.config) {
                if (key == "out") continue;
                const CLI::Option* opt = it->second.app->get_option_no_throw("--" + key);
                if (!opt) throw FormatError("run manifest has unknown option '" + key + "'");
                if (is_flag(opt)) {
                    if (value == "true") rerun.push_back("--" + key);
                } else if (!value.empty()) {
                    rerun.push_back("--" + key);
                    rerun.push_back(value);
                }
            }
            rerun.push_back("--out");
            rerun.push_back(run.out.string());
            const int rc = cli::run(rerun, run.log, run.err);
            if (rc != kExitOk) throw ExitWith{rc};

            const RunManifest again = read_run_manifest(run.out / kRunManifestName);
            std::size_t same = 0;
            std::vector<std::string> diverged;
            std::map<std::string, std::string> fresh;
            for (const auto& o : again.outputs) fresh[o.path] = o.hash;
            for (const auto& o : m.outputs) {
                auto f = fresh.find(o.path);
                if (f != fresh.end() && f->second == o.hash) {
                    ++same;
                } else {
                    diverged.push_back(o.path);
                }
            }
            if (again.outputs.size() != m.outputs.size() && diverged.empty()) diverged.push_back("(output list)");
            if (!diverged.empty()) {
                run.err << "replay diverged in " << diverged.size() << " output(s):\n";
                for (const auto& d : diverged) run.err << "  " << d << "\n";
                throw ExitWith{kExitRuntime};
            }
            run.log << "replay of " << m.command << " matches: " << same << " outputs byte-identical\n";
        };
    }

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        setup_logging(log_level);
        auto selected = std::find_if(commands.begin(), commands.end(),
                                     [](const auto& kv) { return kv.second.app->parsed(); });
        Command& cmd = selected->second;
        if (!cmd.config_file.empty()) apply_config_file(*cmd.app, read_config_file(cmd.config_file));

        Run run{fs::path{}, RunManifest{}, out, err};
        run.manifest.command = selected->first;
        run.manifest.config = resolve_config(*cmd.app);
        for (const auto& key : cmd.required) {
            if (run.manifest.config.at(key).empty()) throw UsageError("--" + key + " is required");
        }
        for (const auto& spec : cmd.inputs) {
            auto& value = run.manifest.config.at(spec.key);
            if (!value.empty()) value = absolute_path(value);
        }
        if (run.manifest.config.count("out")) {
            auto& value = run.manifest.config.at("out");
            value = absolute_path(value);
            run.out = value;
            run.manifest.out_dir = value;
            std::error_code ec;
            fs::create_directories(run.out, ec);
            if (ec) throw IoError("cannot create " + run.out.string() + ": " + ec.message());
        }
        if (run.manifest.config.count("seed")) run.manifest.seed = std::stoull(run.manifest.config.at("seed"));
        if (cmd.writes_manifest) record_inputs(cmd, run.manifest);

        cmd.body(run);

        if (cmd.writes_manifest) write_text(run.out / kRunManifestName, text_of(to_json(run.manifest)));
        return kExitOk;
    } catch (...) {
        return exit_code_for(std::current_exception(), err);
    }
}

}  // namespace facepaint::cli
