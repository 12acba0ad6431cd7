#include "facepaint/service.hpp"

#include <httplib.h>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "facepaint/csl.hpp"
#include "facepaint/errors.hpp"
#include "facepaint/evalharness.hpp"
#include "facepaint/image_io.hpp"
#include "facepaint/maip.hpp"

namespace facepaint {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

namespace {

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream s;
    s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
    return s.str();
}

ArtifactInfo info_from_json(const json& j) {
    ArtifactInfo a;
    a.id = j.at("id");
    a.kind = j.at("kind");
    a.content_type = j.at("content_type");
    a.size = j.at("size");
    a.created_at = j.at("created_at");
    a.meta = j.value("meta", json::object());
    return a;
}

}  // namespace

json to_json(const ArtifactInfo& a) {
    return {{"id", a.id}, {"kind", a.kind}, {"content_type", a.content_type},
            {"size", a.size}, {"created_at", a.created_at}, {"meta", a.meta}};
}

ArtifactStore::ArtifactStore(fs::path root) : root_(std::move(root)) {
    std::error_code ec;
    fs::create_directories(root_ / "blobs", ec);
    if (ec) throw IoError("cannot create artifact store at " + root_.string() + ": " + ec.message());
    std::ifstream in(root_ / "index.jsonl");
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (j.at("type") == "artifact") {
                ArtifactInfo a = info_from_json(j.at("artifact"));
                if (!fs::exists(blob_path(a.id))) throw FormatError("blob missing for " + a.id);
                if (!artifacts_.count(a.id)) order_.push_back(a.id);
                artifacts_[a.id] = std::move(a);
            } else {
                const std::string type = j.at("record_type"), id = j.at("id");
                if (!records_[type].count(id)) record_order_[type].push_back(id);
                records_[type][id] = j.at("value");
            }
        } catch (const json::exception& e) {
            throw FormatError("artifact index line " + std::to_string(number) + ": " + e.what());
        }
    }
}

fs::path ArtifactStore::blob_path(const std::string& id) const { return root_ / "blobs" / id; }

void ArtifactStore::append_index(const json& line) {
    std::ofstream out(root_ / "index.jsonl", std::ios::app);
    out << line.dump() << '\n';
    out.flush();
    if (!out) throw IoError("cannot append to the artifact index");
}

ArtifactInfo ArtifactStore::put(std::span<const std::uint8_t> bytes, const std::string& kind,
                                const std::string& content_type, json meta) {
    const std::string id = sha256_hex(bytes);
    std::lock_guard lock(mutex_);
    if (auto it = artifacts_.find(id); it != artifacts_.end()) return it->second;
    const fs::path tmp = blob_path(id + ".tmp");
    write_file(tmp, bytes);
    std::error_code ec;
    fs::rename(tmp, blob_path(id), ec);
    if (ec) throw IoError("cannot store blob " + id + ": " + ec.message());
    ArtifactInfo a{id, kind, content_type, bytes.size(), utc_now(), std::move(meta)};
    append_index({{"type", "artifact"}, {"artifact", to_json(a)}});
    artifacts_[id] = a;
    order_.push_back(id);
    return a;
}

std::optional<ArtifactInfo> ArtifactStore::info(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = artifacts_.find(id);
    if (it == artifacts_.end()) return std::nullopt;
    return it->second;
}

std::vector<std::uint8_t> ArtifactStore::read(const std::string& id) const {
    if (!info(id)) throw IoError("unknown artifact " + id);
    return read_file(blob_path(id));
}

std::vector<ArtifactInfo> ArtifactStore::list(const std::string& kind) const {
    std::lock_guard lock(mutex_);
    std::vector<ArtifactInfo> out;
    for (const auto& id : order_) {
        const auto& a = artifacts_.at(id);
        if (kind.empty() || a.kind == kind) out.push_back(a);
    }
    return out;
}

void ArtifactStore::put_record(const std::string& type, const std::string& id, const json& value) {
    std::lock_guard lock(mutex_);
    auto& table = records_[type];
    if (table.count(id)) return;
    append_index({{"type", "record"}, {"record_type", type}, {"id", id}, {"value", value}});
    table[id] = value;
    record_order_[type].push_back(id);
}

std::optional<json> ArtifactStore::record(const std::string& type, const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto t = records_.find(type);
    if (t == records_.end()) return std::nullopt;
    const auto it = t->second.find(id);
    if (it == t->second.end()) return std::nullopt;
    return it->second;
}

std::vector<json> ArtifactStore::records(const std::string& type) const {
    std::lock_guard lock(mutex_);
    std::vector<json> out;
    const auto order = record_order_.find(type);
    if (order == record_order_.end()) return out;
    for (const auto& id : order->second) out.push_back(records_.at(type).at(id));
    return out;
}

std::string to_string(JobKind kind) {
    switch (kind) {
        case JobKind::learn_style: return "learn_style";
        case JobKind::generate: return "generate";
        case JobKind::build_pairs: return "build_pairs";
        case JobKind::evaluate: return "evaluate";
    }
    return "unknown";
}

std::string to_string(JobStatus status) {
    switch (status) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::succeeded: return "succeeded";
        case JobStatus::failed: return "failed";
    }
    return "unknown";
}

json to_json(const Job& job) {
    json j = {{"schema_version", kApiSchemaVersion},
              {"id", job.id},
              {"kind", to_string(job.kind)},
              {"status", to_string(job.status)},
              {"params", job.params},
              {"created_at", job.created_at}};
    if (!job.started_at.empty()) j["started_at"] = job.started_at;
    if (!job.finished_at.empty()) j["finished_at"] = job.finished_at;
    if (job.status == JobStatus::succeeded) {
        j["result_refs"] = job.outcome.result_refs;
        j["result"] = job.outcome.result;
    }
    if (job.error) j["error"] = *job.error;
    return j;
}

JobQueue::JobQueue(int workers) {
    if (workers < 1) throw InvalidArgument("job queue needs at least one worker");
    for (int i = 0; i < workers; ++i) workers_.emplace_back([this](std::stop_token st) { work(st); });
}

JobQueue::~JobQueue() {
    for (auto& w : workers_) w.request_stop();
    cv_.notify_all();
    workers_.clear();
}

std::string JobQueue::submit(JobKind kind, json params, Task task, std::string resource) {
    std::string id;
    {
        std::lock_guard lock(mutex_);
        std::ostringstream s;
        s << "job-" << std::setw(6) << std::setfill('0') << next_id_++;
        id = s.str();
        Entry e;
        e.job.id = id;
        e.job.kind = kind;
        e.job.params = std::move(params);
        e.job.created_at = utc_now();
        e.task = std::move(task);
        e.resource = std::move(resource);
        jobs_.emplace(id, std::move(e));
        pending_.push_back(id);
    }
    cv_.notify_all();
    return id;
}

std::optional<Job> JobQueue::get(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second.job;
}

void JobQueue::wait_idle() {
    std::unique_lock lock(mutex_);
    idle_cv_.wait(lock, [&] { return pending_.empty() && running_ == 0; });
}

void JobQueue::work(std::stop_token stop) {
    while (true) {
        std::unique_lock lock(mutex_);
        std::string id;
        const bool ready = cv_.wait(lock, stop, [&] {
            for (auto it = pending_.begin(); it != pending_.end(); ++it) {
                const auto& res = jobs_.at(*it).resource;
                if (res.empty() || busy_[res] == 0) {
                    id = *it;
                    pending_.erase(it);
                    return true;
                }
            }
            return false;
        });
        if (!ready) return;
        Entry& e = jobs_.at(id);
        if (!e.resource.empty()) ++busy_[e.resource];
        ++running_;
        e.job.status = JobStatus::running;
        e.job.started_at = utc_now();
        Task task = std::move(e.task);
        lock.unlock();

        JobOutcome outcome;
        std::optional<std::string> error;
        try {
            outcome = task();
            if (outcome.result_refs.empty()) error = "job produced no results";
        } catch (const std::exception& ex) {
            error = ex.what();
        }

        lock.lock();
        Entry& done = jobs_.at(id);
        if (error) {
            done.job.status = JobStatus::failed;
            done.job.error = error;
            spdlog::warn("job {} failed: {}", id, *error);
        } else {
            done.job.status = JobStatus::succeeded;
            done.job.outcome = std::move(outcome);
        }
        done.job.finished_at = utc_now();
        if (!done.resource.empty()) --busy_[done.resource];
        --running_;
        const bool idle = pending_.empty() && running_ == 0;
        lock.unlock();
        cv_.notify_all();
        if (idle) idle_cv_.notify_all();
    }
}

ServiceConfig service_config_from_env(ServiceConfig c) {
    auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (!v || !*v) return std::nullopt;
        return std::string(v);
    };
    auto as_int = [](const std::string& name, const std::string& v) {
        try {
            std::size_t used = 0;
            const long long n = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return n;
        } catch (const std::exception&) {
            throw InvalidArgument(name + " must be an integer, got '" + v + "'");
        }
    };
    if (auto v = env("FACEPAINT_STORE")) c.store_dir = *v;
    if (auto v = env("FACEPAINT_WORKERS")) c.workers = static_cast<int>(as_int("FACEPAINT_WORKERS", *v));
    if (auto v = env("FACEPAINT_BACKEND")) c.backend = *v;
    if (auto v = env("FACEPAINT_SEED")) c.backend_seed = static_cast<std::uint64_t>(as_int("FACEPAINT_SEED", *v));
    if (auto v = env("FACEPAINT_BRANCH")) c.branch_checkpoint = fs::path(*v);
    if (auto v = env("FACEPAINT_IMAGE_SIZE")) c.image_size = static_cast<int>(as_int("FACEPAINT_IMAGE_SIZE", *v));
    return c;
}

namespace {

ToyBackend make_backend(const ServiceConfig& c) {
    if (c.backend != "toy") {
        throw InvalidArgument("backend '" + c.backend + "' is not available in this build; use 'toy'");
    }
    if (c.image_size < 8 || c.image_size % 8 != 0) throw InvalidArgument("image size must be a positive multiple of 8");
    return toy_backend(c.backend_seed);
}

ControlBranch make_branch(const ServiceConfig& c, const ToyBackend& be) {
    if (c.branch_checkpoint) return load_branch(*c.branch_checkpoint);
    return ControlBranch(*be.predictor, c.backend_seed);
}

// Error raised inside a handler, mapped to an HTTP status.
struct HttpError {
    int status;
    json body;
};

[[noreturn]] void fail(int status, const std::string& message, json extra = json::object()) {
    extra["error"] = message;
    throw HttpError{status, std::move(extra)};
}

void send_json(httplib::Response& res, int status, json body) {
    body["schema_version"] = kApiSchemaVersion;
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
        json j = json::parse(req.body);
        if (!j.is_object()) fail(400, "request body must be a JSON object");
        return j;
    } catch (const json::exception& e) {
        fail(400, std::string("malformed JSON: ") + e.what());
    }
}

template <typename T>
T field(const json& body, const std::string& name, T fallback) {
    if (!body.contains(name) || body.at(name).is_null()) return fallback;
    try {
        return body.at(name).get<T>();
    } catch (const json::exception&) {
        fail(400, "field '" + name + "' has the wrong type");
    }
}

std::string required_string(const json& body, const std::string& name) {
    if (!body.contains(name)) fail(400, "missing field '" + name + "'");
    return field<std::string>(body, name, "");
}

void check_range(const std::string& name, double v, double lo, double hi) {
    if (!(v >= lo && v <= hi)) {
        fail(422, name + " must be between " + json(lo).dump() + " and " + json(hi).dump(),
             {{"field", name}, {"min", lo}, {"max", hi}, {"value", v}});
    }
}

std::string image_content_type(std::span<const std::uint8_t> bytes) {
    if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P') return "image/png";
    return "image/jpeg";
}

template <typename F>
httplib::Server::Handler guarded(F f) {
    return [f](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const HttpError& e) {
            send_json(res, e.status, e.body);
        } catch (const std::exception& e) {
            spdlog::error("{} {}: {}", req.method, req.path, e.what());
            send_json(res, 500, {{"error", e.what()}});
        }
    };
}

}  // namespace

Service::Service(ServiceConfig config)
    : config_(std::move(config)),
      backend_(make_backend(config_)),
      branch_(make_branch(config_, backend_)),
      store_(config_.store_dir),
      jobs_(config_.workers) {}

Service::~Service() { stop(); }

void Service::register_routes(httplib::Server& server) {
    server.set_payload_max_length(config_.max_image_bytes * static_cast<std::size_t>(config_.max_references) + (1u << 20));

    // The studio UI may be served from another origin.
    server.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Expose-Headers", "ETag, X-Artifact-Kind");
    });
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    // Decodes and stores an uploaded image; returns its artifact.
    auto store_image = [this](const std::string& bytes_str, const std::string& name) {
        if (bytes_str.size() > config_.max_image_bytes) {
            fail(413, name + " exceeds " + std::to_string(config_.max_image_bytes) + " bytes",
                 {{"limit", config_.max_image_bytes}});
        }
        const std::vector<std::uint8_t> bytes(bytes_str.begin(), bytes_str.end());
        ImageGrid image;
        try {
            if (!looks_like_image(bytes)) fail(400, name + " is not a PNG or JPEG image");
            image = decode_image(bytes);
        } catch (const Error& e) {
            fail(400, name + " could not be decoded: " + e.what());
        }
        return store_.put(bytes, "image", image_content_type(bytes),
                          {{"width", image.width()}, {"height", image.height()}, {"name", name}});
    };

    server.Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
                   send_json(res, 200, {{"status", "ok"}, {"backend", config_.backend}});
               }));

    server.Post("/images", guarded([store_image](const httplib::Request& req, httplib::Response& res) {
                    std::string bytes = req.body;
                    std::string name = "image";
                    if (req.is_multipart_form_data()) {
                        if (req.files.empty()) fail(400, "no image in the upload");
                        bytes = req.files.begin()->second.content;
                        name = req.files.begin()->second.filename;
                    }
                    if (bytes.empty()) fail(400, "empty upload");
                    const ArtifactInfo a = store_image(bytes, name);
                    send_json(res, 201, {{"image_id", a.id}, {"width", a.meta["width"]}, {"height", a.meta["height"]}});
                }));

    server.Get(R"(/images/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const std::string id = req.matches[1];
                   const auto info = store_.info(id);
                   if (!info || info->kind != "image") fail(404, "unknown image " + id);
                   const auto bytes = store_.read(id);
                   res.set_header("Cache-Control", "public, max-age=31536000, immutable");
                   res.set_header("ETag", "\"" + id + "\"");
                   res.set_content(std::string(bytes.begin(), bytes.end()), info->content_type);
               }));

    server.Get(R"(/artifacts/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const std::string id = req.matches[1];
                   const auto info = store_.info(id);
                   if (!info) fail(404, "unknown artifact " + id);
                   const auto bytes = store_.read(id);
                   res.set_header("Cache-Control", "public, max-age=31536000, immutable");
                   res.set_header("ETag", "\"" + id + "\"");
                   res.set_header("X-Artifact-Kind", info->kind);
                   res.set_content(std::string(bytes.begin(), bytes.end()), info->content_type);
               }));

    server.Post("/references", guarded([this, store_image](const httplib::Request& req, httplib::Response& res) {
                    if (!req.is_multipart_form_data()) fail(400, "expected a multipart upload of images");
                    const int count = static_cast<int>(req.files.size());
                    if (count == 0) fail(400, "no reference images uploaded");
                    if (count > config_.max_references) {
                        fail(400, "at most " + std::to_string(config_.max_references) + " reference images",
                             {{"max", config_.max_references}});
                    }
                    std::vector<std::string> ids;
                    for (const auto& [field_name, file] : req.files) {
                        ids.push_back(store_image(file.content, file.filename.empty() ? field_name : file.filename).id);
                    }
                    std::string joined;
                    for (const auto& id : ids) joined += id + "\n";
                    const std::vector<std::uint8_t> key(joined.begin(), joined.end());
                    const std::string set_id = "refs-" + sha256_hex(key).substr(0, 24);
                    json record = {{"reference_set_id", set_id}, {"image_ids", ids}, {"count", count}};
                    if (count < 3 || count > 5) {
                        record["warning"] = "got " + std::to_string(count) + " reference images; 3 to 5 are recommended";
                    }
                    store_.put_record("reference_set", set_id, record);
                    send_json(res, 201, record);
                }));

    server.Get(R"(/references/([A-Za-z0-9-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const auto rec = store_.record("reference_set", req.matches[1]);
                   if (!rec) fail(404, "unknown reference set");
                   send_json(res, 200, *rec);
               }));

    server.Post("/styles", guarded([this](const httplib::Request& req, httplib::Response& res) {
                    const json body = parse_body(req);
                    const std::string set_id = required_string(body, "reference_set_id");
                    const auto set = store_.record("reference_set", set_id);
                    if (!set) fail(404, "unknown reference set " + set_id, {{"field", "reference_set_id"}});

                    const std::string text = field<std::string>(body, "template", kDefaultTemplate);
                    std::optional<PromptTemplate> tmpl;
                    try {
                        tmpl.emplace(text);
                        tmpl->slot(*backend_.encoder);
                    } catch (const InvalidArgument& e) {
                        fail(422, e.what(), {{"field", "template"}});
                    }
                    CslConfig cfg = toy_csl_config();
                    cfg.image_size = config_.image_size;
                    const json c = field<json>(body, "config", json::object());
                    if (!c.is_object()) fail(400, "config must be an object");
                    cfg.steps = field<int>(c, "steps", cfg.steps);
                    cfg.learning_rate = field<double>(c, "learning_rate", cfg.learning_rate);
                    cfg.seed = field<std::uint64_t>(c, "seed", cfg.seed);
                    cfg.init_word = field<std::string>(c, "init_word", cfg.init_word);
                    check_range("config.steps", cfg.steps, 1, 100000);
                    check_range("config.learning_rate", cfg.learning_rate, 1e-12, 1e6);
                    try {
                        cfg.optimizer = parse_optimizer(field<std::string>(c, "optimizer", to_string(cfg.optimizer)));
                    } catch (const InvalidArgument& e) {
                        fail(422, e.what(), {{"field", "config.optimizer"}});
                    }

                    const std::vector<std::string> image_ids = set->at("image_ids");
                    json params = {{"reference_set_id", set_id},
                                   {"template", text},
                                   {"config",
                                    {{"steps", cfg.steps},
                                     {"learning_rate", cfg.learning_rate},
                                     {"seed", cfg.seed},
                                     {"optimizer", to_string(cfg.optimizer)},
                                     {"init_word", cfg.init_word},
                                     {"image_size", cfg.image_size}}}};
                    auto task = [this, image_ids, tmpl = *tmpl, cfg, set_id, text]() {
                        std::vector<ImageGrid> refs;
                        for (const auto& id : image_ids) refs.push_back(decode_image(store_.read(id)));
                        const CslResult r = learn_style(refs, image_ids, tmpl, backend_, cfg);
                        const auto bytes = token_container(r.token).to_bytes();
                        const ArtifactInfo token = store_.put(bytes, "token", "application/x-facepaint-container",
                                                              {{"reference_set_id", set_id}});
                        std::string loss_csv = "step,loss\n";
                        for (std::size_t i = 0; i < r.losses.size(); ++i) {
                            std::ostringstream line;
                            line << i << ',' << std::setprecision(17) << r.losses[i] << '\n';
                            loss_csv += line.str();
                        }
                        const ArtifactInfo log = store_.put(std::vector<std::uint8_t>(loss_csv.begin(), loss_csv.end()),
                                                            "loss_log", "text/csv");
                        store_.put_record("style", token.id,
                                          {{"style_token_id", token.id},
                                           {"reference_set_id", set_id},
                                           {"template", text},
                                           {"final_loss", r.token.meta.final_loss},
                                           {"steps", r.token.meta.steps},
                                           {"seed", r.token.meta.seed}});
                        JobOutcome out;
                        out.result_refs = {token.id, log.id};
                        out.result = {{"style_token_id", token.id},
                                      {"loss_log_id", log.id},
                                      {"final_loss", r.token.meta.final_loss},
                                      {"warnings", r.warnings}};
                        return out;
                    };
                    const std::string job = jobs_.submit(JobKind::learn_style, params, task, "refs:" + set_id);
                    send_json(res, 202, {{"job_id", job}});
                }));

    server.Get("/styles", guarded([this](const httplib::Request&, httplib::Response& res) {
                   send_json(res, 200, {{"styles", store_.records("style")}});
               }));

    server.Post("/generate", guarded([this](const httplib::Request& req, httplib::Response& res) {
                    const json body = parse_body(req);
                    const std::string face_id = required_string(body, "face_image_id");
                    const std::string token_id = required_string(body, "style_token_id");
                    GenerationConfig cfg;
                    cfg.guidance_scale = field<double>(body, "guidance_scale", cfg.guidance_scale);
                    cfg.num_inference_steps = field<int>(body, "steps", cfg.num_inference_steps);
                    cfg.seed = field<std::uint64_t>(body, "seed", cfg.seed);
                    cfg.use_final_blend = field<bool>(body, "use_final_blend", cfg.use_final_blend);
                    cfg.use_mask_merge = field<bool>(body, "use_mask_merge", cfg.use_mask_merge);
                    cfg.use_control = field<bool>(body, "use_control", cfg.use_control);
                    cfg.use_style = field<bool>(body, "use_style", cfg.use_style);
                    check_range("guidance_scale", cfg.guidance_scale, 0.0, 20.0);
                    check_range("steps", cfg.num_inference_steps, 10, 100);

                    const auto face_info = store_.info(face_id);
                    if (!face_info || face_info->kind != "image") {
                        fail(404, "unknown face image " + face_id, {{"field", "face_image_id"}});
                    }
                    const auto token_info = store_.info(token_id);
                    if (!token_info || token_info->kind != "token") {
                        fail(404, "unknown style token " + token_id, {{"field", "style_token_id"}});
                    }
                    const auto style = store_.record("style", token_id);
                    const std::string text = style ? style->value("template", kDefaultTemplate) : kDefaultTemplate;

                    json echo = to_json(cfg);
                    echo["face_image_id"] = face_id;
                    echo["style_token_id"] = token_id;
                    echo["steps"] = cfg.num_inference_steps;
                    echo["image_size"] = config_.image_size;
                    auto task = [this, face_id, token_id, cfg, text, echo]() {
                        const ImageGrid face = prepare_image(decode_image(store_.read(face_id)), config_.image_size);
                        const StyleToken token =
                            token_from_container(Container::from_bytes(store_.read(token_id)),
                                                 backend_.encoder->embedding_dim());
                        GenerationOptions opts;
                        opts.prompt_template = PromptTemplate(text);
                        const GenerationResult r = generate(face, token, branch_, backend_, cfg, opts);
                        const auto png = [](const Grid& g) { return encode_png(g); };
                        const ArtifactInfo fin = store_.put(png(r.final_image), "image", "image/png",
                                                            {{"role", "final"}, {"width", face.width()}, {"height", face.height()}});
                        const ArtifactInfo gen = store_.put(png(r.gen), "image", "image/png",
                                                            {{"role", "generated"}, {"width", face.width()}, {"height", face.height()}});
                        const ArtifactInfo mask = store_.put(png(r.mask.values), "mask", "image/png", {{"role", "mask"}});
                        json diag = to_json(r.diagnostics);
                        diag["config_echo"] = echo;
                        const std::string d = diag.dump(2);
                        const ArtifactInfo dj = store_.put(std::vector<std::uint8_t>(d.begin(), d.end()), "diagnostics",
                                                           "application/json");
                        JobOutcome out;
                        out.result_refs = {fin.id, gen.id, mask.id, dj.id};
                        out.result = {{"final_image_id", fin.id},
                                      {"gen_image_id", gen.id},
                                      {"mask_id", mask.id},
                                      {"diagnostics_id", dj.id},
                                      {"config", echo},
                                      {"diagnostics", diag}};
                        return out;
                    };
                    const std::string job = jobs_.submit(JobKind::generate, echo, task);
                    send_json(res, 202, {{"job_id", job}, {"config", echo}});
                }));

    server.Post("/evaluate", guarded([this](const httplib::Request& req, httplib::Response& res) {
                    const json body = parse_body(req);
                    const auto generated = field<std::vector<std::string>>(body, "generated_image_ids", {});
                    const auto reference = field<std::vector<std::string>>(body, "reference_image_ids", {});
                    const std::string embedder_id = field<std::string>(body, "embedder", "toy");
                    if (generated.size() < 2 || reference.size() < 2) {
                        fail(422, "evaluation needs at least two generated and two reference images");
                    }
                    for (const auto* list : {&generated, &reference}) {
                        for (const auto& id : *list) {
                            const auto info = store_.info(id);
                            if (!info || info->kind != "image") fail(404, "unknown image " + id);
                        }
                    }
                    std::shared_ptr<const Embedder> embedder;
                    try {
                        embedder = make_embedder(embedder_id);
                    } catch (const InvalidArgument& e) {
                        fail(422, e.what(), {{"field", "embedder"}});
                    }
                    json params = {{"generated_image_ids", generated},
                                   {"reference_image_ids", reference},
                                   {"embedder", embedder_id}};
                    auto task = [this, generated, reference, embedder]() {
                        auto embed = [&](const std::vector<std::string>& ids) {
                            std::vector<ImageGrid> images;
                            for (const auto& id : ids) images.push_back(decode_image(store_.read(id)));
                            return embed_images(images, *embedder);
                        };
                        const FeatureSet g = embed(generated), r = embed(reference);
                        const ScoreRow row{"facepaint", "service", cosine_similarity_score(g, r), 0.0,
                                           frechet_distance(g, r)};
                        const std::vector<ScoreRow> rows{row};
                        const std::string report = report_json(rows);
                        const ArtifactInfo a = store_.put(std::vector<std::uint8_t>(report.begin(), report.end()),
                                                          "report", "application/json");
                        JobOutcome out;
                        out.result_refs = {a.id};
                        out.result = {{"report_id", a.id},
                                      {"embedder", embedder->id()},
                                      {"cosine", row.csd},
                                      {"fid", row.fid}};
                        return out;
                    };
                    send_json(res, 202, {{"job_id", jobs_.submit(JobKind::evaluate, params, task)}});
                }));

    server.Get(R"(/jobs/([A-Za-z0-9-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   const auto job = jobs_.get(req.matches[1]);
                   if (!job) fail(404, "unknown job " + std::string(req.matches[1]));
                   send_json(res, 200, to_json(*job));
               }));
}

bool Service::listen(const std::string& host, int port) {
    server_ = std::make_unique<httplib::Server>();
    register_routes(*server_);
    spdlog::info("facepaint service listening on {}:{} (store {})", host, port, config_.store_dir.string());
    return server_->listen(host, port);
}

void Service::stop() {
    if (server_) server_->stop();
}

}  // namespace facepaint
