#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cad::report {

struct EpochRecord {
    int batch = 0;
    std::size_t epoch = 0;
    std::size_t group = 0;
    double accuracy = 0.0;
};

struct DetectionRecord {
    int batch = 0;
    std::size_t flagged_new = 0;
    std::size_t total_new = 0;
    std::size_t flagged_old = 0;
    std::size_t cost = 0;  // labels issued during this batch

    double true_positive_rate() const {
        return total_new == 0 ? 0.0 : static_cast<double>(flagged_new) / static_cast<double>(total_new);
    }
};

/// Rows are predicted classes, columns are true classes.
struct ConfusionMatrix {
    std::vector<int> classes;
    std::vector<std::vector<std::size_t>> counts;

    std::size_t total() const;
    std::size_t trace() const;
    double accuracy() const;
};

struct MetricsLog {
    std::vector<std::vector<int>> groups;  // class groups, one per batch
    std::vector<EpochRecord> epochs;
    std::vector<DetectionRecord> detections;
    std::size_t inspection_cost = 0;
    ConfusionMatrix confusion;
    std::string config_fingerprint;
    std::string code_version;

    /// Accuracy of every group at the last recorded epoch (0 for groups never evaluated).
    std::vector<double> final_group_accuracy() const;
    double average_final_accuracy() const;
    /// Accuracy of `group` at the last epoch of `batch`, or -1 when absent.
    double accuracy_after_batch(int batch, std::size_t group) const;
};

/// Throws LabelError when a prediction or truth is not in `classes`.
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> truths, std::span<const int> classes);

/// %.6g, with "nan"/"inf" spelled out.
std::string format_number(double v);

/// Writes accuracy_curves.csv, detections.csv, confusion.csv and summary.json
/// into `out_dir` (created if missing).
void record_and_emit(const MetricsLog& log, const std::filesystem::path& out_dir);

} // namespace cad::report
