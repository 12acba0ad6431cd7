#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "facepaint/grid.hpp"

namespace facepaint {

enum class FaceLabel { background, skin, brows, eyes, lips, hair };
using LabelSet = std::set<FaceLabel>;

// skin + brows + eyes + lips; hair and background stay outside the facial region.
LabelSet default_facial_labels();
std::string to_string(FaceLabel label);
FaceLabel parse_face_label(const std::string& name);

// Per-pixel semantic labelling, row-major H x W.
class FaceParser {
public:
    virtual ~FaceParser() = default;
    virtual std::vector<FaceLabel> label_pixels(const ImageGrid& image) const = 0;
    virtual std::string name() const = 0;
};

// Works on the synthetic faces: warm (r - b > 0.1) pixels are face, dark ones eyes.
class ToyFaceParser final : public FaceParser {
public:
    std::vector<FaceLabel> label_pixels(const ImageGrid& image) const override;
    std::string name() const override { return "toy"; }
};

// Binary mask of the pixels whose label is in `facial`. Throws NoFaceDetected when empty.
Mask parse_face(const FaceParser& parser, const ImageGrid& image,
                const LabelSet& facial = default_facial_labels());

class DemakeupModel {
public:
    virtual ~DemakeupModel() = default;
    virtual ImageGrid remove_makeup(const ImageGrid& image) const = 0;
    virtual std::string name() const = 0;
};

// Repaints saturated off-skin face pixels with the median skin color.
class ToyDemakeup final : public DemakeupModel {
public:
    explicit ToyDemakeup(double threshold = 0.15) : threshold_(threshold) {}
    ImageGrid remove_makeup(const ImageGrid& image) const override;
    std::string name() const override { return "toy"; }

private:
    double threshold_;
};

ImageGrid demakeup(const DemakeupModel& model, const ImageGrid& image);
std::vector<ImageGrid> demakeup_batch(const DemakeupModel& model, std::span<const ImageGrid> images);

struct BlurParams {
    int kernel_size = 15;
    double sigma = 5.0;
};

// Defaults at 512 px scaled with resolution; kernel stays odd and >= 3.
BlurParams default_blur(int image_size);
Mask blur_mask(const Mask& mask, int kernel_size, double sigma);
inline Mask blur_mask(const Mask& mask, const BlurParams& p) { return blur_mask(mask, p.kernel_size, p.sigma); }

// Blurred mask snapped to 8-bit levels, so what is stored as mask.png is what gets used.
Mask soft_face_mask(const Mask& binary, const BlurParams& params);

// naked_star * M + makeup * (1 - M), per channel.
ImageGrid blend_naked(const ImageGrid& naked_star, const ImageGrid& makeup, const Mask& mask);

struct PseudoPair {
    ImageGrid makeup;
    ImageGrid naked;
    Mask mask;
    std::string source_id;
};

struct SyntheticFace {
    ImageGrid makeup;
    ImageGrid naked;  // ground truth, same face without the patches
    Mask mask;        // binary disc
    double center_x = 0.0;
    double center_y = 0.0;
    double radius = 0.0;
    std::vector<double> patch_hues;  // degrees in [0, 360)
};

std::vector<SyntheticFace> synth_faces(int n, std::uint64_t seed, int size = 64);

// Background-only image, no warm pixels, so parsing fails on it.
ImageGrid synth_faceless(std::uint64_t seed, int size = 64);

struct BuildConfig {
    int image_size = 512;
    std::optional<BlurParams> blur;  // default_blur(image_size) when unset
    LabelSet facial_labels = default_facial_labels();
    int workers = 1;
};

struct ManifestEntry {
    std::string source_id;
    std::string makeup_path;  // relative to the manifest directory
    std::string naked_path;
    std::string mask_path;
    int height = 0;
    int width = 0;
    double mask_mean = 0.0;
    double mask_support = 0.0;  // fraction of pixels with mask > 0
};

struct SkipRecord {
    std::string source_id;
    std::string reason;
};

struct PairManifest {
    int image_size = 0;
    BlurParams blur;
    std::vector<ManifestEntry> pairs;
    std::vector<SkipRecord> skipped;
};

inline constexpr const char* kManifestName = "manifest.jsonl";
inline constexpr int kManifestSchemaVersion = 1;

// Runs parse -> demakeup -> blur -> blend over every PNG/JPEG in `input_dir` and
// writes {id}/makeup.png, naked.png, mask.png plus manifest.jsonl into `output_dir`.
PairManifest build_pairs(const std::filesystem::path& input_dir, const std::filesystem::path& output_dir,
                         const BuildConfig& config, const FaceParser& parser, const DemakeupModel& model);

PseudoPair make_pseudo_pair(const ImageGrid& makeup, const FaceParser& parser, const DemakeupModel& model,
                            const BlurParams& blur, const LabelSet& facial = default_facial_labels());

PairManifest read_manifest(const std::filesystem::path& manifest_path);
std::vector<PseudoPair> load_pairs(const std::filesystem::path& manifest_path);

}  // namespace facepaint
