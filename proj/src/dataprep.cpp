#include "facepaint/dataprep.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include <json.hpp>

#include "facepaint/errors.hpp"
#include "facepaint/image_io.hpp"
#include "facepaint/rng.hpp"
#include "parallel.hpp"

namespace facepaint {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kWarmThreshold = 0.1;  // r - b above this is skin-like
constexpr double kDarkLuma = 0.2;

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

bool is_warm(const ImageGrid& im, int y, int x) {
    return im.at(y, x, 0) - im.at(y, x, 2) > kWarmThreshold;
}

bool is_dark(const ImageGrid& im, int y, int x) {
    return luma(im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2)) < kDarkLuma;
}

void require_rgb(const ImageGrid& image, const char* what) {
    if (image.channels() != 3 || image.empty()) {
        throw InvalidArgument(std::string(what) + ": expected a non-empty RGB image, got " +
                              image.shape_string());
    }
}

// Mirror without repeating the edge sample.
int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = std::abs(i) % period;
    return i < n ? i : period - i;
}

std::array<double, 3> hsv_to_rgb(double hue_deg, double s, double v) {
    const double h = std::fmod(hue_deg, 360.0) / 60.0;
    const int sector = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1 - s);
    const double q = v * (1 - s * f);
    const double t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

void fill_background(ImageGrid& im, Rng& rng) {
    const double base_r = rng.uniform(0.1, 0.35);
    const double base_g = rng.uniform(0.2, 0.6);
    const double base_b = base_r + rng.uniform(0.25, 0.45);
    const double fx = rng.uniform(1.0, 4.0) / im.width();
    const double fy = rng.uniform(1.0, 4.0) / im.height();
    const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
    for (int y = 0; y < im.height(); ++y) {
        for (int x = 0; x < im.width(); ++x) {
            // shared offset keeps every background pixel cool (b - r >= 0.25)
            const double offset = 0.04 * std::sin(2 * std::numbers::pi * (fx * x + fy * y) + phase) +
                                  rng.uniform(-0.04, 0.04);
            im.at(y, x, 0) = base_r + offset;
            im.at(y, x, 1) = base_g + offset;
            im.at(y, x, 2) = base_b + offset;
        }
    }
}

constexpr std::array<std::array<double, 3>, 4> kSkinTones{{
    {0.95, 0.80, 0.68},
    {0.90, 0.72, 0.60},
    {0.85, 0.66, 0.52},
    {0.80, 0.62, 0.50},
}};
constexpr std::array<double, 3> kEyeColor{0.20, 0.10, 0.04};

struct Geometry {
    double cx, cy, r;
    double dist2(int y, int x, double ox, double oy) const {
        const double dx = x + 0.5 - ox;
        const double dy = y + 0.5 - oy;
        return dx * dx + dy * dy;
    }
    bool in_disc(int y, int x) const { return dist2(y, x, cx, cy) <= r * r; }
    bool in_eye(int y, int x) const {
        const double er = std::max(1.0, 0.09 * r);
        const double ey = cy - 0.2 * r;
        return dist2(y, x, cx - 0.35 * r, ey) <= er * er || dist2(y, x, cx + 0.35 * r, ey) <= er * er;
    }
    bool in_lip_arc(int y, int x, double inner, double outer, double below) const {
        const double d2 = dist2(y, x, cx, cy + 0.05 * r);
        return y + 0.5 > cy + below * r && d2 >= inner * inner * r * r && d2 <= outer * outer * r * r;
    }
    bool in_eyeshadow(int y, int x) const {
        for (double side : {-1.0, 1.0}) {
            const double dx = (x + 0.5 - (cx + side * 0.35 * r)) / (0.18 * r);
            const double dy = (y + 0.5 - (cy - 0.32 * r)) / (0.09 * r);
            if (dx * dx + dy * dy <= 1.0) return true;
        }
        return false;
    }
    bool in_blush(int y, int x) const {
        const double br = 0.15 * r;
        return dist2(y, x, cx - 0.5 * r, cy + 0.15 * r) <= br * br ||
               dist2(y, x, cx + 0.5 * r, cy + 0.15 * r) <= br * br;
    }
};

}  // namespace

LabelSet default_facial_labels() {
    return {FaceLabel::skin, FaceLabel::brows, FaceLabel::eyes, FaceLabel::lips};
}

std::string to_string(FaceLabel label) {
    switch (label) {
        case FaceLabel::background: return "background";
        case FaceLabel::skin: return "skin";
        case FaceLabel::brows: return "brows";
        case FaceLabel::eyes: return "eyes";
        case FaceLabel::lips: return "lips";
        case FaceLabel::hair: return "hair";
    }
    return "unknown";
}

FaceLabel parse_face_label(const std::string& name) {
    for (FaceLabel l : {FaceLabel::background, FaceLabel::skin, FaceLabel::brows, FaceLabel::eyes,
                        FaceLabel::lips, FaceLabel::hair}) {
        if (to_string(l) == name) return l;
    }
    throw InvalidArgument("unknown face label '" + name + "'");
}

std::vector<FaceLabel> ToyFaceParser::label_pixels(const ImageGrid& image) const {
    require_rgb(image, "parse_face");
    std::vector<FaceLabel> labels(static_cast<std::size_t>(image.height()) * image.width(),
                                  FaceLabel::background);
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (!is_warm(image, y, x)) continue;
            labels[static_cast<std::size_t>(y) * image.width() + x] =
                is_dark(image, y, x) ? FaceLabel::eyes : FaceLabel::skin;
        }
    }
    return labels;
}

Mask parse_face(const FaceParser& parser, const ImageGrid& image, const LabelSet& facial) {
    const auto labels = parser.label_pixels(image);
    if (labels.size() != static_cast<std::size_t>(image.height()) * image.width()) {
        throw ShapeMismatch("face parser '" + parser.name() + "' returned a wrong-sized label map");
    }
    Mask mask = make_mask(image.height(), image.width(), MaskKind::binary);
    std::size_t count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (facial.contains(labels[i])) {
            mask.values[i] = 1.0;
            ++count;
        }
    }
    if (count == 0) throw NoFaceDetected("no facial region found");
    return mask;
}

ImageGrid ToyDemakeup::remove_makeup(const ImageGrid& image) const {
    if (image.channels() != 3 || image.empty() || !image.all_finite()) {
        throw DemakeupUnavailable("toy demakeup needs a finite RGB image, got " + image.shape_string());
    }
    std::array<std::vector<double>, 3> samples;
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (!is_warm(image, y, x) || is_dark(image, y, x)) continue;
            for (int c = 0; c < 3; ++c) samples[c].push_back(image.at(y, x, c));
        }
    }
    ImageGrid out = image;
    if (samples[0].empty()) return out;

    std::array<double, 3> skin{};
    for (int c = 0; c < 3; ++c) {
        auto& s = samples[c];
        auto mid = s.begin() + static_cast<std::ptrdiff_t>(s.size() / 2);
        std::nth_element(s.begin(), mid, s.end());
        skin[c] = *mid;
    }
    for (int y = 0; y < image.height(); ++y) {
        for (int x = 0; x < image.width(); ++x) {
            if (!is_warm(image, y, x) || is_dark(image, y, x)) continue;
            double dist = 0.0;
            for (int c = 0; c < 3; ++c) dist = std::max(dist, std::abs(image.at(y, x, c) - skin[c]));
            if (dist <= threshold_) continue;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = skin[c];
        }
    }
    return out;
}

ImageGrid demakeup(const DemakeupModel& model, const ImageGrid& image) {
    ImageGrid out = model.remove_makeup(image);
    if (!out.same_shape(image)) {
        throw DemakeupUnavailable("demakeup model '" + model.name() + "' changed the image shape");
    }
    return out;
}

std::vector<ImageGrid> demakeup_batch(const DemakeupModel& model, std::span<const ImageGrid> images) {
    std::vector<ImageGrid> out;
    out.reserve(images.size());
    for (const auto& im : images) out.push_back(demakeup(model, im));
    return out;
}

BlurParams default_blur(int image_size) {
    if (image_size < 1) throw InvalidArgument("image size must be positive");
    const double scale = image_size / 512.0;
    int k = static_cast<int>(std::lround(15.0 * scale));
    if (k % 2 == 0) ++k;
    return {std::max(3, k), 5.0 * scale};
}

Mask blur_mask(const Mask& mask, int kernel_size, double sigma) {
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw InvalidArgument("blur kernel size must be odd and >= 1, got " + std::to_string(kernel_size));
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidArgument("blur sigma must be positive");
    if (mask.values.channels() != 1) throw ShapeMismatch("mask must have one channel");

    const int radius = kernel_size / 2;
    std::vector<double> kernel(kernel_size);
    double total = 0.0;
    for (int i = 0; i < kernel_size; ++i) {
        const double d = i - radius;
        kernel[i] = std::exp(-0.5 * d * d / (sigma * sigma));
        total += kernel[i];
    }
    for (double& w : kernel) w /= total;

    const int h = mask.height();
    const int w = mask.width();
    Grid tmp(h, w, 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kernel_size; ++i) acc += kernel[i] * mask(y, reflect(x + i - radius, w));
            tmp.at(y, x, 0) = acc;
        }
    }
    Mask out = make_mask(h, w, MaskKind::blurred);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = 0; i < kernel_size; ++i) acc += kernel[i] * tmp.at(reflect(y + i - radius, h), x, 0);
            // kernel normalisation leaves rounding dust near the ends of the range
            if (std::abs(acc) < 1e-12) acc = 0.0;
            if (std::abs(acc - 1.0) < 1e-12) acc = 1.0;
            out.values.at(y, x, 0) = std::clamp(acc, 0.0, 1.0);
        }
    }
    return out;
}

Mask soft_face_mask(const Mask& binary, const BlurParams& params) {
    Mask m = blur_mask(binary, params);
    m.values = quantize8(m.values);
    return m;
}

ImageGrid blend_naked(const ImageGrid& naked_star, const ImageGrid& makeup, const Mask& mask) {
    require_same_shape(naked_star, makeup, "blend_naked");
    if (mask.height() != makeup.height() || mask.width() != makeup.width()) {
        throw ShapeMismatch("blend_naked: mask " + mask.values.shape_string() + " vs image " +
                            makeup.shape_string());
    }
    ImageGrid out(makeup.height(), makeup.width(), makeup.channels());
    for (int y = 0; y < makeup.height(); ++y) {
        for (int x = 0; x < makeup.width(); ++x) {
            const double m = mask(y, x);
            if (m < 0.0 || m > 1.0) throw InvalidArgument("blend_naked: mask outside [0, 1]");
            for (int c = 0; c < makeup.channels(); ++c) {
                out.at(y, x, c) = naked_star.at(y, x, c) * m + makeup.at(y, x, c) * (1.0 - m);
            }
        }
    }
    return out;
}

std::vector<SyntheticFace> synth_faces(int n, std::uint64_t seed, int size) {
    if (n < 1) throw InvalidArgument("synth_faces needs n >= 1");
    if (size < 16) throw InvalidArgument("synth_faces needs size >= 16");
    std::vector<SyntheticFace> faces;
    faces.reserve(n);
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        SyntheticFace f;
        ImageGrid base(size, size, 3);
        fill_background(base, rng);

        const Geometry g{size / 2.0 + rng.uniform(-0.05, 0.05) * size,
                         size / 2.0 + rng.uniform(-0.05, 0.05) * size, rng.uniform(0.28, 0.36) * size};
        const auto skin = kSkinTones[static_cast<std::size_t>(rng.uniform_int(0, kSkinTones.size() - 1))];

        struct Patch {
            int region;  // 0 lipstick, 1 eyeshadow, 2 blush
            std::array<double, 3> rgb;
        };
        std::vector<Patch> patches;
        const bool eyeshadow = rng.uniform() < 0.6;
        const bool blush = rng.uniform() < 0.5;
        for (int region = 0; region < 3; ++region) {
            if ((region == 1 && !eyeshadow) || (region == 2 && !blush)) continue;
            const double hue = std::fmod(rng.uniform(315.0, 440.0), 360.0);
            patches.push_back({region, hsv_to_rgb(hue, rng.uniform(0.7, 0.9), rng.uniform(0.8, 0.95))});
            f.patch_hues.push_back(hue);
        }

        f.naked = base;
        f.makeup = base;
        f.mask = make_mask(size, size, MaskKind::binary);
        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                if (!g.in_disc(y, x)) continue;
                f.mask.values.at(y, x, 0) = 1.0;
                const double grain = rng.uniform(-0.02, 0.02);
                const double shade = g.in_lip_arc(y, x, 0.45, 0.55, 0.35) ? 0.92 : 1.0;
                std::array<double, 3> naked{};
                for (int c = 0; c < 3; ++c) naked[c] = skin[c] * shade + grain;
                auto paint = naked;
                for (const auto& p : patches) {
                    const bool hit = (p.region == 0 && g.in_lip_arc(y, x, 0.4, 0.6, 0.3)) ||
                                     (p.region == 1 && g.in_eyeshadow(y, x)) ||
                                     (p.region == 2 && g.in_blush(y, x));
                    if (hit) paint = p.rgb;
                }
                if (g.in_eye(y, x)) naked = paint = kEyeColor;
                for (int c = 0; c < 3; ++c) {
                    f.naked.at(y, x, c) = naked[c];
                    f.makeup.at(y, x, c) = paint[c];
                }
            }
        }
        f.naked = quantize8(f.naked);
        f.makeup = quantize8(f.makeup);
        f.center_x = g.cx;
        f.center_y = g.cy;
        f.radius = g.r;
        faces.push_back(std::move(f));
    }
    return faces;
}

ImageGrid synth_faceless(std::uint64_t seed, int size) {
    Rng rng(seed);
    ImageGrid im(size, size, 3);
    fill_background(im, rng);
    return quantize8(im);
}

PseudoPair make_pseudo_pair(const ImageGrid& makeup, const FaceParser& parser, const DemakeupModel& model,
                            const BlurParams& blur, const LabelSet& facial) {
    const Mask binary = parse_face(parser, makeup, facial);
    const ImageGrid naked_star = demakeup(model, makeup);
    Mask soft = soft_face_mask(binary, blur);
    // mask and images are all on 8-bit levels so the stored pair reloads bit-exact
    ImageGrid naked = quantize8(blend_naked(naked_star, makeup, soft));
    return {makeup, std::move(naked), std::move(soft), ""};
}

namespace {

json header_json(const PairManifest& m, const BuildConfig& config, const FaceParser& parser,
                 const DemakeupModel& model) {
    json labels = json::array();
    for (FaceLabel l : config.facial_labels) labels.push_back(to_string(l));
    return {{"type", "header"},
            {"schema_version", kManifestSchemaVersion},
            {"image_size", m.image_size},
            {"blur_kernel", m.blur.kernel_size},
            {"blur_sigma", m.blur.sigma},
            {"facial_labels", labels},
            {"parser", parser.name()},
            {"demakeup", model.name()}};
}

}  // namespace

PairManifest build_pairs(const fs::path& input_dir, const fs::path& output_dir, const BuildConfig& config,
                         const FaceParser& parser, const DemakeupModel& model) {
    const std::vector<fs::path> inputs = list_images(input_dir);
    if (inputs.empty()) throw InvalidArgument("no PNG/JPEG inputs in " + input_dir.string());

    std::vector<std::string> ids(inputs.size());
    std::map<std::string, int> seen;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        std::string id = inputs[i].stem().string();
        if (seen[id]++ > 0) id = inputs[i].filename().string(), std::replace(id.begin(), id.end(), '.', '_');
        ids[i] = id;
    }

    std::error_code ec;
    fs::create_directories(output_dir, ec);
    if (ec) throw IoError("cannot create " + output_dir.string() + ": " + ec.message());

    PairManifest manifest;
    manifest.image_size = config.image_size;
    manifest.blur = config.blur.value_or(default_blur(config.image_size));

    struct Outcome {
        std::optional<ManifestEntry> entry;
        std::optional<SkipRecord> skip;
    };
    std::vector<Outcome> outcomes(inputs.size());

    detail::parallel_for(inputs.size(), config.workers, [&](std::size_t i) {
        const std::string& id = ids[i];
        const ImageGrid image = quantize8(prepare_image(read_image(inputs[i]), config.image_size));
        PseudoPair pair;
        try {
            pair = make_pseudo_pair(image, parser, model, manifest.blur, config.facial_labels);
        } catch (const NoFaceDetected& e) {
            spdlog::warn("skipping {}: {}", inputs[i].filename().string(), e.what());
            outcomes[i].skip = SkipRecord{id, e.what()};
            return;
        }
        const fs::path dir = output_dir / id;
        std::error_code dir_ec;
        fs::create_directories(dir, dir_ec);
        if (dir_ec) throw IoError("cannot create " + dir.string() + ": " + dir_ec.message());
        write_png(dir / "makeup.png", pair.makeup);
        write_png(dir / "naked.png", pair.naked);
        write_png(dir / "mask.png", pair.mask.values);

        ManifestEntry e;
        e.source_id = id;
        e.makeup_path = id + "/makeup.png";
        e.naked_path = id + "/naked.png";
        e.mask_path = id + "/mask.png";
        e.height = image.height();
        e.width = image.width();
        e.mask_mean = pair.mask.mean();
        std::size_t support = 0;
        for (double v : pair.mask.values.values()) support += v > 0.0;
        e.mask_support = static_cast<double>(support) / static_cast<double>(pair.mask.values.size());
        outcomes[i].entry = std::move(e);
    });

    std::ofstream out(output_dir / kManifestName, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + output_dir.string());
    out << header_json(manifest, config, parser, model).dump() << '\n';
    for (auto& o : outcomes) {
        if (o.entry) {
            const auto& e = *o.entry;
            out << json{{"type", "pair"},       {"source_id", e.source_id}, {"makeup", e.makeup_path},
                        {"naked", e.naked_path}, {"mask", e.mask_path},      {"height", e.height},
                        {"width", e.width},      {"mask_mean", e.mask_mean}, {"mask_support", e.mask_support}}
                       .dump()
                << '\n';
            manifest.pairs.push_back(std::move(*o.entry));
        } else {
            out << json{{"type", "skip"}, {"source_id", o.skip->source_id}, {"reason", o.skip->reason}}.dump()
                << '\n';
            manifest.skipped.push_back(std::move(*o.skip));
        }
    }
    if (!out) throw IoError("manifest write failed in " + output_dir.string());
    spdlog::info("built {} pairs, skipped {}", manifest.pairs.size(), manifest.skipped.size());
    return manifest;
}

PairManifest read_manifest(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot read manifest " + manifest_path.string());
    PairManifest m;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            const std::string type = j.at("type");
            if (type == "header") {
                if (j.at("schema_version").get<int>() != kManifestSchemaVersion) {
                    throw VersionMismatch("manifest schema version " + j.at("schema_version").dump());
                }
                m.image_size = j.at("image_size");
                m.blur = {j.at("blur_kernel").get<int>(), j.at("blur_sigma").get<double>()};
            } else if (type == "pair") {
                m.pairs.push_back({j.at("source_id"), j.at("makeup"), j.at("naked"), j.at("mask"),
                                   j.at("height"), j.at("width"), j.at("mask_mean"), j.at("mask_support")});
            } else if (type == "skip") {
                m.skipped.push_back({j.at("source_id"), j.at("reason")});
            } else {
                throw FormatError("unknown record type '" + type + "'");
            }
        } catch (const json::exception& e) {
            throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return m;
}

std::vector<PseudoPair> load_pairs(const fs::path& manifest_path) {
    const PairManifest m = read_manifest(manifest_path);
    const fs::path root = manifest_path.parent_path();
    std::vector<PseudoPair> pairs;
    pairs.reserve(m.pairs.size());
    for (const auto& e : m.pairs) {
        PseudoPair p;
        p.source_id = e.source_id;
        p.makeup = read_image(root / e.makeup_path);
        p.naked = read_image(root / e.naked_path);
        p.mask = read_mask_png(root / e.mask_path, MaskKind::blurred);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace facepaint
