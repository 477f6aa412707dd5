#include "cad/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "cad/error.hpp"
#include "cad/rng.hpp"

namespace cad::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset, const std::filesystem::path& path) {
    if (buf.size() < offset + 4) throw FormatError(path.string() + ": truncated header");
    return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
           (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                                static_cast<char>(v)};
    out.write(b.data(), 4);
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return cells;
}

double parse_double(std::string_view cell, const std::filesystem::path& path, std::size_t line_no) {
    std::string s(cell);
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) + ": non-numeric cell '" + s + "'");
    }
    return v;
}

} // namespace

RawDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    if (read_be32(img, 0, images_path) != kImageMagic) {
        throw FormatError(images_path.string() + ": bad image magic (expected 0x00000803)");
    }
    if (read_be32(lab, 0, labels_path) != kLabelMagic) {
        throw FormatError(labels_path.string() + ": bad label magic (expected 0x00000801)");
    }
    const std::size_t n = read_be32(img, 4, images_path);
    const std::size_t rows = read_be32(img, 8, images_path);
    const std::size_t cols = read_be32(img, 12, images_path);
    const std::size_t n_labels = read_be32(lab, 4, labels_path);
    const std::size_t pixels = rows * cols;
    if (img.size() < 16 + n * pixels) {
        throw FormatError(images_path.string() + ": truncated, expected " + std::to_string(n * pixels) +
                          " pixel bytes, found " + std::to_string(img.size() - 16));
    }
    if (lab.size() < 8 + n_labels) throw FormatError(labels_path.string() + ": truncated label data");
    if (n != n_labels) {
        throw FormatError("image/label count mismatch: " + std::to_string(n) + " images, " +
                          std::to_string(n_labels) + " labels");
    }

    RawDataset ds;
    ds.rows = rows;
    ds.cols = cols;
    ds.source = images_path.filename().string() + "+" + labels_path.filename().string();
    ds.images.resize(static_cast<Eigen::Index>(pixels), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < pixels; ++p) {
            ds.images(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = img[16 + i * pixels + p] / 255.0;
        }
    }
    ds.labels.assign(lab.begin() + 8, lab.begin() + 8 + static_cast<std::ptrdiff_t>(n));
    return ds;
}

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const std::uint8_t> pixels, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> labels) {
    if (pixels.size() != labels.size() * rows * cols) throw ShapeError("pixel count does not match labels x rows x cols");
    std::ofstream img(images_path, std::ios::binary);
    std::ofstream lab(labels_path, std::ios::binary);
    if (!img || !lab) throw IoError("cannot write IDX files at " + images_path.string());
    put_be32(img, kImageMagic);
    put_be32(img, static_cast<std::uint32_t>(labels.size()));
    put_be32(img, static_cast<std::uint32_t>(rows));
    put_be32(img, static_cast<std::uint32_t>(cols));
    img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    put_be32(lab, kLabelMagic);
    put_be32(lab, static_cast<std::uint32_t>(labels.size()));
    lab.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

SampleSet load_feature_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw InsufficientDataError(path.string() + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_commas(line);
    if (header.size() < 2 || header.front() != "label") {
        throw ParseError(path.string() + ":1: header must be 'label,f0,f1,...'");
    }
    const std::size_t width = header.size() - 1;

    SampleSet samples;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split_commas(line);
        if (cells.size() != width + 1) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(width) +
                             " features, found " + std::to_string(cells.size() - 1));
        }
        Sample s;
        const double label = parse_double(cells[0], path, line_no);
        if (label < 0 || label != std::floor(label)) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
        }
        s.label = static_cast<int>(label);
        s.features.reserve(width);
        for (std::size_t k = 1; k < cells.size(); ++k) s.features.push_back(parse_double(cells[k], path, line_no));
        s.sample_id = static_cast<std::int64_t>(samples.size());
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw InsufficientDataError(path.string() + ": no data rows");
    return samples;
}

void write_feature_csv(const std::filesystem::path& path, const SampleSet& samples) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    const std::size_t width = samples.empty() ? 0 : samples.front().features.size();
    out << "label";
    for (std::size_t k = 0; k < width; ++k) out << ",f" << k;
    out << '\n';
    std::array<char, 32> buf{};
    for (const Sample& s : samples) {
        out << s.label.value_or(-1);
        for (double v : s.features) {
            // shortest representation that round-trips exactly
            const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
            out << ',' << std::string_view(buf.data(), static_cast<std::size_t>(r.ptr - buf.data()));
        }
        out << '\n';
    }
}

std::pair<SampleSet, SampleSet> stratified_split(const SampleSet& samples, const SplitSpec& spec) {
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
        throw ParameterError("train_fraction must lie in (0, 1)");
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].label) throw LabelError("stratified split needs labeled samples");
        by_class[*samples[i].label].push_back(i);
    }
    SampleSet train, test;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2) {
            throw InsufficientDataError("class " + std::to_string(label) + " has fewer than 2 samples to split");
        }
        Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(label)));
        rng.shuffle(idx);
        const auto n_train = static_cast<std::size_t>(std::floor(spec.train_fraction * static_cast<double>(idx.size())));
        for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? train : test).push_back(samples[idx[k]]);
    }
    return {std::move(train), std::move(test)};
}

NormalizationStats fit_normalization(const SampleSet& train) {
    if (train.empty()) throw InsufficientDataError("normalization needs a non-empty training set");
    const std::size_t d = train.front().features.size();
    NormalizationStats st;
    st.mean.assign(d, 0.0);
    st.stddev.assign(d, 0.0);
    for (const Sample& s : train) {
        if (s.features.size() != d) throw ShapeError("feature vectors differ in width");
        for (std::size_t k = 0; k < d; ++k) st.mean[k] += s.features[k];
    }
    for (double& m : st.mean) m /= static_cast<double>(train.size());
    for (const Sample& s : train) {
        for (std::size_t k = 0; k < d; ++k) st.stddev[k] += (s.features[k] - st.mean[k]) * (s.features[k] - st.mean[k]);
    }
    for (double& v : st.stddev) v = std::max(std::sqrt(v / static_cast<double>(train.size())), 1e-8);
    return st;
}

void apply_normalization(const NormalizationStats& stats, SampleSet& samples) {
    for (Sample& s : samples) {
        if (s.features.size() != stats.mean.size()) throw ShapeError("feature width does not match normalization");
        for (std::size_t k = 0; k < s.features.size(); ++k) {
            s.features[k] = (s.features[k] - stats.mean[k]) / stats.stddev[k];
        }
    }
}

void BatchSchedule::validate() const {
    if (batches.empty() || batches.front().empty()) throw ConfigError("schedule.baseline must list at least one class");
    std::set<int> seen;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        if (batches[b].empty()) throw ConfigError("schedule batch " + std::to_string(b) + " lists no classes");
        for (int c : batches[b]) {
            if (!seen.insert(c).second) {
                throw ConfigError("schedule: class " + std::to_string(c) + " appears in more than one batch");
            }
        }
    }
    for (int c : aux_ood_classes) {
        if (seen.count(c)) throw ConfigError("schedule.aux_ood: class " + std::to_string(c) + " is also scheduled in a batch");
    }
}

SampleSet samples_of(const SampleSet& samples, std::span<const int> classes) {
    SampleSet out;
    for (const Sample& s : samples) {
        if (s.label && std::find(classes.begin(), classes.end(), *s.label) != classes.end()) out.push_back(s);
    }
    return out;
}

} // namespace cad::data
