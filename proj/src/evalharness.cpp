#include "facepaint/evalharness.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <limits>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "facepaint/errors.hpp"
#include "facepaint/image_io.hpp"
#include "parallel.hpp"

namespace facepaint {

namespace fs = std::filesystem;
using nlohmann::json;

ToyEmbedder::ToyEmbedder(int bins, int grid) : bins_(bins), grid_(grid) {
    if (bins < 1 || grid < 1) throw InvalidArgument("toy embedder needs positive bins and grid");
}

std::string ToyEmbedder::id() const { return "toy-hist" + std::to_string(bins_) + "-luma" + std::to_string(grid_); }

std::vector<double> ToyEmbedder::embed(const ImageGrid& image) const {
    if (image.channels() != 3) throw ShapeMismatch("embedder expects an RGB image");
    if (image.height() < grid_ || image.width() < grid_) throw ShapeMismatch("image smaller than the luma grid");
    std::vector<double> f(dim(), 0.0);
    const double pixels = static_cast<double>(image.height()) * image.width();
    std::vector<double> luma(static_cast<std::size_t>(grid_) * grid_, 0.0);
    std::vector<int> counts(luma.size(), 0);
    for (int y = 0; y < image.height(); ++y) {
        const int gy = y * grid_ / image.height();
        for (int x = 0; x < image.width(); ++x) {
            const int gx = x * grid_ / image.width();
            double l = 0.0;
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(y, x, c), 0.0, 1.0);
                const int bin = std::min(bins_ - 1, static_cast<int>(v * bins_));
                f[c * bins_ + bin] += 1.0 / pixels;
                l += (c == 0 ? 0.299 : c == 1 ? 0.587 : 0.114) * v;
            }
            luma[gy * grid_ + gx] += l;
            ++counts[gy * grid_ + gx];
        }
    }
    for (std::size_t i = 0; i < luma.size(); ++i) f[3 * bins_ + i] = luma[i] / counts[i];
    return f;
}

std::unique_ptr<Embedder> make_embedder(const std::string& id) {
    if (id == "toy") return std::make_unique<ToyEmbedder>();
    static const std::regex toy_id("toy-hist([0-9]+)-luma([0-9]+)");
    std::smatch m;
    if (std::regex_match(id, m, toy_id)) return std::make_unique<ToyEmbedder>(std::stoi(m[1]), std::stoi(m[2]));
    throw InvalidArgument("unknown embedder '" + id + "'");
}

namespace {

FeatureSet assemble(std::vector<std::vector<double>> rows, const Embedder& embedder) {
    FeatureSet fs;
    fs.rows = static_cast<int>(rows.size());
    fs.cols = embedder.dim();
    fs.embedder_id = embedder.id();
    fs.data.reserve(static_cast<std::size_t>(fs.rows) * fs.cols);
    for (const auto& r : rows) {
        if (static_cast<int>(r.size()) != fs.cols) throw ShapeMismatch("embedder returned a vector of the wrong size");
        fs.data.insert(fs.data.end(), r.begin(), r.end());
    }
    return fs;
}

Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> as_matrix(
    const FeatureSet& f) {
    return {f.data.data(), f.rows, f.cols};
}

void check_finite(const FeatureSet& f, const char* what) {
    for (double v : f.data) {
        if (!std::isfinite(v)) throw NonFiniteValue(std::string(what) + " features are not finite");
    }
}

}  // namespace

FeatureSet embed_images(std::span<const ImageGrid> images, const Embedder& embedder, int workers) {
    std::vector<std::vector<double>> rows(images.size());
    detail::parallel_for(images.size(), workers, [&](std::size_t i) { rows[i] = embedder.embed(images[i]); });
    return assemble(std::move(rows), embedder);
}

FeatureSet embed_set(std::span<const fs::path> paths, const Embedder& embedder, int workers,
                     std::string source_manifest) {
    std::vector<std::vector<double>> rows(paths.size());
    detail::parallel_for(paths.size(), workers, [&](std::size_t i) {
        ImageGrid image;
        try {
            image = read_image(paths[i]);
        } catch (const Error& e) {
            throw IoError("image " + std::to_string(i) + " (" + paths[i].string() + "): " + e.what());
        }
        rows[i] = embedder.embed(image);
    });
    FeatureSet out = assemble(std::move(rows), embedder);
    out.source_manifest = std::move(source_manifest);
    return out;
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b, FrechetDiagnostics* diagnostics) {
    if (a.cols != b.cols) {
        throw ShapeMismatch("feature dimensions differ: " + std::to_string(a.cols) + " vs " + std::to_string(b.cols));
    }
    if (a.rows < 2 || b.rows < 2) throw InvalidArgument("Frechet distance needs at least two samples per set");
    check_finite(a, "first");
    check_finite(b, "second");

    auto stats = [](const FeatureSet& f) {
        const auto m = as_matrix(f);
        const Eigen::RowVectorXd mu = m.colwise().mean();
        const Eigen::MatrixXd centered = m.rowwise() - mu;
        Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(f.rows - 1);
        return std::pair{Eigen::VectorXd(mu.transpose()), Eigen::MatrixXd(0.5 * (cov + cov.transpose()))};
    };
    const auto [mu_a, cov_a] = stats(a);
    const auto [mu_b, cov_b] = stats(b);

    // Tr((S_a S_b)^(1/2)) = Tr((R S_b R)^(1/2)) with R = S_a^(1/2), all symmetric PSD
    auto psd_sqrt = [](const Eigen::MatrixXd& s, int& clamped, double& min_ev) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
        if (eig.info() != Eigen::Success) throw Error("eigendecomposition of a covariance matrix failed");
        Eigen::VectorXd ev = eig.eigenvalues();
        min_ev = std::min(min_ev, ev.minCoeff());
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            if (ev[i] < 0.0) {
                ev[i] = 0.0;
                ++clamped;
            }
        }
        return std::pair{Eigen::MatrixXd(eig.eigenvectors() * ev.cwiseSqrt().asDiagonal() *
                                         eig.eigenvectors().transpose()),
                         ev};
    };
    int clamped = 0;
    double min_ev = std::numeric_limits<double>::infinity();
    const auto [root_a, ev_a] = psd_sqrt(cov_a, clamped, min_ev);
    Eigen::MatrixXd inner = root_a * cov_b * root_a;
    inner = 0.5 * (inner + inner.transpose());
    int inner_clamped = 0;
    double inner_min = std::numeric_limits<double>::infinity();
    const auto [root_inner, ev_inner] = psd_sqrt(inner, inner_clamped, inner_min);
    (void)root_inner;
    clamped += inner_clamped;
    min_ev = std::min(min_ev, inner_min);

    const double mean_term = (mu_a - mu_b).squaredNorm();
    const double trace_term = cov_a.trace() + cov_b.trace() - 2.0 * ev_inner.cwiseSqrt().sum();
    double d = mean_term + trace_term;
    if (d < 0.0 && d > -1e-6) d = 0.0;
    if (diagnostics) *diagnostics = {mean_term, trace_term, clamped, min_ev};
    return d;
}

double cosine_similarity_score(const FeatureSet& generated, const FeatureSet& reference, CosineMode mode) {
    if (generated.cols != reference.cols) throw ShapeMismatch("feature dimensions differ");
    if (generated.rows < 1 || reference.rows < 1) throw InvalidArgument("cosine score needs non-empty feature sets");
    auto normalized = [](const FeatureSet& f, const char* what) {
        Eigen::MatrixXd m = as_matrix(f);
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double n = m.row(i).norm();
            if (!(n > 0.0) || !std::isfinite(n)) {
                throw InvalidArgument(std::string(what) + " feature " + std::to_string(i) + " has zero norm");
            }
            m.row(i) /= n;
        }
        return m;
    };
    const Eigen::MatrixXd g = normalized(generated, "generated");
    const Eigen::MatrixXd r = normalized(reference, "reference");
    const Eigen::MatrixXd sims = g * r.transpose();
    double total = 0.0;
    for (Eigen::Index i = 0; i < sims.rows(); ++i) {
        const double s = mode == CosineMode::mean ? sims.row(i).mean() : sims.row(i).maxCoeff();
        total += std::clamp(s, -1.0, 1.0);
    }
    return total / static_cast<double>(sims.rows());
}

IntegrityResult identity_integrity(const ImageGrid& final_image, const ImageGrid& naked, const Mask& mask) {
    require_same_shape(final_image, naked, "identity_integrity");
    if (mask.height() != naked.height() || mask.width() != naked.width()) {
        throw ShapeMismatch("identity_integrity: mask " + mask.values.shape_string() + " vs image " +
                            naked.shape_string());
    }
    double out_sum = 0.0, in_sum = 0.0;
    IntegrityResult r;
    for (int y = 0; y < naked.height(); ++y) {
        for (int x = 0; x < naked.width(); ++x) {
            double d = 0.0;
            for (int c = 0; c < naked.channels(); ++c) d += std::abs(final_image.at(y, x, c) - naked.at(y, x, c));
            if (mask(y, x) == 0.0) {
                out_sum += d;
                ++r.outside_pixels;
            } else {
                in_sum += d;
                ++r.inside_pixels;
            }
        }
    }
    const double ch = naked.channels();
    if (r.outside_pixels) r.outside_mad = out_sum / (ch * static_cast<double>(r.outside_pixels));
    if (r.inside_pixels) r.inside_mad = in_sum / (ch * static_cast<double>(r.inside_pixels));
    return r;
}

namespace {

constexpr char kFeatureMagic[4] = {'F', 'P', 'F', 'S'};
constexpr std::uint32_t kFeatureVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof v);
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Cursor {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw FormatError("feature file truncated");
    }
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof v);
        pos += sizeof v;
        return v;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

// Little-endian host layout: magic, version, embedder id, manifest, rows, cols, row-major doubles.
void write_features(const FeatureSet& f, const fs::path& path) {
    if (f.data.size() != static_cast<std::size_t>(f.rows) * f.cols) throw ShapeMismatch("feature set size mismatch");
    std::vector<std::uint8_t> out(kFeatureMagic, kFeatureMagic + 4);
    put(out, kFeatureVersion);
    put_string(out, f.embedder_id);
    put_string(out, f.source_manifest);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(f.rows));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(f.cols));
    const auto* p = reinterpret_cast<const std::uint8_t*>(f.data.data());
    out.insert(out.end(), p, p + f.data.size() * sizeof(double));
    write_file(path, out);
}

FeatureSet read_features(const fs::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kFeatureMagic, 4) != 0) {
        throw FormatError(path.string() + " is not a feature file");
    }
    Cursor c{bytes, 4};
    const auto version = c.get<std::uint32_t>();
    if (version != kFeatureVersion) {
        throw VersionMismatch("feature file version " + std::to_string(version) + " is not supported");
    }
    FeatureSet f;
    f.embedder_id = c.get_string();
    f.source_manifest = c.get_string();
    const auto rows = c.get<std::uint64_t>();
    const auto cols = c.get<std::uint64_t>();
    if (rows > (1u << 30) || cols > (1u << 20)) throw FormatError("feature file dimensions are implausible");
    f.rows = static_cast<int>(rows);
    f.cols = static_cast<int>(cols);
    const std::size_t n = static_cast<std::size_t>(rows * cols);
    c.need(n * sizeof(double));
    if (c.pos + n * sizeof(double) != bytes.size()) throw FormatError("feature file has trailing bytes");
    f.data.resize(n);
    std::memcpy(f.data.data(), bytes.data() + c.pos, n * sizeof(double));
    return f;
}

const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols{"method", "style", "csd", "dreamsim", "fid"};
    return cols;
}

namespace {

std::string format_score(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
}

double parse_score(const std::string& s, const std::string& column) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw FormatError("column " + column + ": '" + s + "' is not a number");
    return v;
}

}  // namespace

std::string report_csv(std::span<const ScoreRow> rows) {
    std::string out;
    const auto& cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
    out += "\n";
    for (const auto& r : rows) {
        out += csv_field(r.method) + "," + csv_field(r.style) + "," + format_score(r.csd) + "," +
               format_score(r.dreamsim) + "," + format_score(r.fid) + "\n";
    }
    return out;
}

std::vector<ScoreRow> parse_report_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty report");
    const auto header = split_csv_line(line);
    const auto& cols = report_columns();
    std::vector<int> index(cols.size(), -1);
    for (std::size_t c = 0; c < cols.size(); ++c) {
        const auto it = std::find(header.begin(), header.end(), cols[c]);
        if (it == header.end()) throw FormatError("report is missing column '" + cols[c] + "'");
        index[c] = static_cast<int>(it - header.begin());
    }
    std::vector<ScoreRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != header.size()) throw FormatError("report row has " + std::to_string(f.size()) + " fields");
        rows.push_back({f[index[0]], f[index[1]], parse_score(f[index[2]], "csd"),
                        parse_score(f[index[3]], "dreamsim"), parse_score(f[index[4]], "fid")});
    }
    return rows;
}

std::string report_json(std::span<const ScoreRow> rows) {
    json j = {{"columns", report_columns()}, {"rows", json::array()}};
    for (const auto& r : rows) {
        j["rows"].push_back(
            {{"method", r.method}, {"style", r.style}, {"csd", r.csd}, {"dreamsim", r.dreamsim}, {"fid", r.fid}});
    }
    return j.dump(2);
}

std::vector<ScoreRow> parse_report_json(const std::string& text) {
    std::vector<ScoreRow> rows;
    try {
        const json j = json::parse(text);
        for (const auto& r : j.at("rows")) {
            for (const auto& c : report_columns()) {
                if (!r.contains(c)) throw FormatError("report row is missing column '" + c + "'");
            }
            rows.push_back({r.at("method"), r.at("style"), r.at("csd"), r.at("dreamsim"), r.at("fid")});
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad JSON report: ") + e.what());
    }
    return rows;
}

std::string report_table(std::span<const ScoreRow> rows) {
    std::vector<std::vector<std::string>> cells{report_columns()};
    for (const auto& r : rows) {
        auto fixed = [](double v) {
            std::ostringstream s;
            s << std::fixed << std::setprecision(4) << v;
            return s.str();
        };
        cells.push_back({r.method, r.style, fixed(r.csd), fixed(r.dreamsim), fixed(r.fid)});
    }
    std::vector<std::size_t> width(report_columns().size(), 0);
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (std::size_t c = 0; c < cells[i].size(); ++c) {
            const bool text = c < 2;
            out << (c ? "  " : "") << (text ? std::left : std::right) << std::setw(static_cast<int>(width[c]))
                << cells[i][c];
        }
        out << "\n";
        if (i == 0) {
            for (std::size_t c = 0; c < width.size(); ++c) out << (c ? "  " : "") << std::string(width[c], '-');
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace facepaint
