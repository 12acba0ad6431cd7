#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "facepaint/grid.hpp"

namespace facepaint {

// Maps an image to a fixed-length feature vector. Implementations must be
// deterministic and safe to call concurrently.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<double> embed(const ImageGrid& image) const = 0;
    virtual int dim() const = 0;
    virtual std::string id() const = 0;
};

// Per-channel colour histogram plus a coarse luma thumbnail.
class ToyEmbedder final : public Embedder {
public:
    explicit ToyEmbedder(int bins = 8, int grid = 4);
    std::vector<double> embed(const ImageGrid& image) const override;
    int dim() const override { return 3 * bins_ + grid_ * grid_; }
    std::string id() const override;

private:
    int bins_;
    int grid_;
};

// Looks up an embedder by id ("toy" or a ToyEmbedder id); InvalidArgument otherwise.
std::unique_ptr<Embedder> make_embedder(const std::string& id);

// N x d row-major feature matrix.
struct FeatureSet {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;
    std::string embedder_id;
    std::string source_manifest;

    std::span<const double> row(int i) const { return {data.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)}; }
};

FeatureSet embed_images(std::span<const ImageGrid> images, const Embedder& embedder, int workers = 1);
// Reads and embeds each file; an unreadable image raises IoError naming its index.
FeatureSet embed_set(std::span<const std::filesystem::path> paths, const Embedder& embedder, int workers = 1,
                     std::string source_manifest = {});

struct FrechetDiagnostics {
    double mean_term = 0.0;
    double trace_term = 0.0;
    int clamped_eigenvalues = 0;  // negative eigenvalues set to 0 in the square root
    double min_eigenvalue = 0.0;
};

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) with unbiased covariances.
double frechet_distance(const FeatureSet& a, const FeatureSet& b, FrechetDiagnostics* diagnostics = nullptr);

enum class CosineMode { mean, max };

// Mean over rows of `generated` of the mean (or best) cosine against `reference` rows.
double cosine_similarity_score(const FeatureSet& generated, const FeatureSet& reference,
                               CosineMode mode = CosineMode::mean);

inline constexpr double kEmptyRegion = -1.0;

struct IntegrityResult {
    double outside_mad = kEmptyRegion;  // pixels with M == 0
    double inside_mad = kEmptyRegion;   // pixels with M > 0
    std::size_t outside_pixels = 0;
    std::size_t inside_pixels = 0;
};

IntegrityResult identity_integrity(const ImageGrid& final_image, const ImageGrid& naked, const Mask& mask);

void write_features(const FeatureSet& features, const std::filesystem::path& path);
FeatureSet read_features(const std::filesystem::path& path);

struct ScoreRow {
    std::string method;
    std::string style;
    double csd = 0.0;
    double dreamsim = 0.0;
    double fid = 0.0;
};

// Column order of every report form.
const std::vector<std::string>& report_columns();

std::string report_csv(std::span<const ScoreRow> rows);
std::vector<ScoreRow> parse_report_csv(const std::string& text);
std::string report_json(std::span<const ScoreRow> rows);
std::vector<ScoreRow> parse_report_json(const std::string& text);
// Aligned plain-text table.
std::string report_table(std::span<const ScoreRow> rows);

}  // namespace facepaint
