#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "facepaint/backend.hpp"
#include "facepaint/mafor.hpp"

namespace httplib {
class Server;
}

namespace facepaint {

inline constexpr int kApiSchemaVersion = 1;

// Lower-case hex SHA-256 of the bytes.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

struct ArtifactInfo {
    std::string id;  // the SHA-256 of the content
    std::string kind;
    std::string content_type;
    std::uint64_t size = 0;
    std::string created_at;
    nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json to_json(const ArtifactInfo& info);

// Content-addressed blob store with an append-only JSONL index. Besides blobs
// it keeps small named records (reference sets, styles). Thread-safe.
class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path root);

    // Storing identical bytes again returns the existing entry unchanged.
    ArtifactInfo put(std::span<const std::uint8_t> bytes, const std::string& kind, const std::string& content_type,
                     nlohmann::json meta = nlohmann::json::object());
    std::optional<ArtifactInfo> info(const std::string& id) const;
    std::vector<std::uint8_t> read(const std::string& id) const;
    std::vector<ArtifactInfo> list(const std::string& kind = {}) const;

    // Records are write-once per (type, id).
    void put_record(const std::string& type, const std::string& id, const nlohmann::json& value);
    std::optional<nlohmann::json> record(const std::string& type, const std::string& id) const;
    std::vector<nlohmann::json> records(const std::string& type) const;

    const std::filesystem::path& root() const { return root_; }

private:
    void append_index(const nlohmann::json& line);
    std::filesystem::path blob_path(const std::string& id) const;

    std::filesystem::path root_;
    mutable std::mutex mutex_;
    std::map<std::string, ArtifactInfo> artifacts_;
    std::vector<std::string> order_;
    std::map<std::string, std::map<std::string, nlohmann::json>> records_;
    std::map<std::string, std::vector<std::string>> record_order_;
};

enum class JobKind { learn_style, generate, build_pairs, evaluate };
enum class JobStatus { queued, running, succeeded, failed };

std::string to_string(JobKind kind);
std::string to_string(JobStatus status);

struct JobOutcome {
    std::vector<std::string> result_refs;
    nlohmann::json result = nlohmann::json::object();
};

struct Job {
    std::string id;
    JobKind kind = JobKind::generate;
    JobStatus status = JobStatus::queued;
    nlohmann::json params;
    JobOutcome outcome;
    std::optional<std::string> error;
    std::string created_at, started_at, finished_at;
};

nlohmann::json to_json(const Job& job);

// FIFO job queue drained by a fixed pool of workers. Jobs sharing a resource
// key never run concurrently; the first queued job whose key is free runs next.
class JobQueue {
public:
    using Task = std::function<JobOutcome()>;

    explicit JobQueue(int workers);
    ~JobQueue();
    JobQueue(const JobQueue&) = delete;
    JobQueue& operator=(const JobQueue&) = delete;

    std::string submit(JobKind kind, nlohmann::json params, Task task, std::string resource = {});
    std::optional<Job> get(const std::string& id) const;
    // Blocks until nothing is queued or running.
    void wait_idle();

private:
    struct Entry {
        Job job;
        Task task;
        std::string resource;
    };
    void work(std::stop_token stop);

    mutable std::mutex mutex_;
    std::condition_variable_any cv_;
    std::condition_variable idle_cv_;
    std::map<std::string, Entry> jobs_;
    std::deque<std::string> pending_;
    std::map<std::string, int> busy_;
    int running_ = 0;
    std::uint64_t next_id_ = 1;
    std::vector<std::jthread> workers_;
};

struct ServiceConfig {
    std::filesystem::path store_dir = "facepaint-store";
    int workers = 1;
    std::string backend = "toy";
    std::uint64_t backend_seed = 0;
    std::optional<std::filesystem::path> branch_checkpoint;  // zero-initialised branch when unset
    int image_size = 64;                                     // faces and references are prepared to this size
    std::size_t max_image_bytes = 8u << 20;
    int max_references = 16;
};

// Overrides fields from FACEPAINT_STORE, FACEPAINT_WORKERS, FACEPAINT_BACKEND,
// FACEPAINT_SEED, FACEPAINT_BRANCH and FACEPAINT_IMAGE_SIZE when set.
ServiceConfig service_config_from_env(ServiceConfig base = {});

class Service {
public:
    explicit Service(ServiceConfig config);
    ~Service();

    void register_routes(httplib::Server& server);
    // Binds and serves until stop(); returns false when the address cannot be bound.
    bool listen(const std::string& host, int port);
    void stop();

    ArtifactStore& store() { return store_; }
    JobQueue& jobs() { return jobs_; }
    const ToyBackend& backend() const { return backend_; }

private:
    ServiceConfig config_;
    ToyBackend backend_;
    ControlBranch branch_;
    ArtifactStore store_;
    JobQueue jobs_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace facepaint
