#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace facepaint::cli {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitInput = 2, kExitRuntime = 3 };

inline constexpr const char* kRunManifestName = "run_manifest.json";
inline constexpr int kRunManifestVersion = 1;

// Runs one command line (without the program name). Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Object id `git hash-object` would print for these bytes.
std::string git_blob_id(std::span<const std::uint8_t> bytes);
std::string git_blob_id(const std::filesystem::path& file);

struct FileRecord {
    std::string role;
    std::string path;  // absolute for inputs, relative to the output directory for outputs
    std::string hash;  // git blob id
};

struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;  // every option of the command, resolved
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::vector<FileRecord> inputs;
    std::vector<FileRecord> outputs;
    nlohmann::json extra = nlohmann::json::object();
};

nlohmann::json to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const nlohmann::json& j);
RunManifest read_run_manifest(const std::filesystem::path& path);

// key = value lines; '#' starts a comment; keys are long option names.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

}  // namespace facepaint::cli
