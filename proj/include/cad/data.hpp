#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cad/net.hpp"

namespace cad::data {

struct Sample {
    std::vector<double> features;
    std::optional<int> label;  // 0 = non-defective
    int batch_id = 0;
    std::int64_t sample_id = 0;
};

using SampleSet = std::vector<Sample>;

/// Images with pixel bytes scaled to [0, 1]; one image per column.
struct RawDataset {
    net::Matrix images;
    std::vector<int> labels;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::string source;

    std::size_t size() const noexcept { return labels.size(); }
};

/// Big-endian IDX pair: images (magic 0x00000803, dims n x rows x cols) and
/// labels (magic 0x00000801, dim n).
RawDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

void write_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
               std::span<const std::uint8_t> pixels, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> labels);

/// Header "label,f0,f1,..." then one sample per row; sample ids are row indices.
SampleSet load_feature_csv(const std::filesystem::path& path);
void write_feature_csv(const std::filesystem::path& path, const SampleSet& samples);

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
};

/// Per class (in ascending label order): seeded shuffle, the first
/// floor(fraction * count) go to train, the rest to test.
std::pair<SampleSet, SampleSet> stratified_split(const SampleSet& samples, const SplitSpec& spec);

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // floored at 1e-8
};

NormalizationStats fit_normalization(const SampleSet& train);
void apply_normalization(const NormalizationStats& stats, SampleSet& samples);

/// Batch 0 is the fully labeled baseline; later batches arrive unlabeled.
struct BatchSchedule {
    std::vector<std::vector<int>> batches;
    std::vector<int> aux_ood_classes;

    /// Throws ConfigError on empty or overlapping class lists.
    void validate() const;
};

SampleSet samples_of(const SampleSet& samples, std::span<const int> classes);

} // namespace cad::data
