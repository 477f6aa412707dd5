#include "cad/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cad/error.hpp"

namespace cad::report {

namespace {

std::ofstream open_for_write(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

// Round to the 6 significant digits used everywhere in emitted files.
double six_digits(double v) {
    if (!std::isfinite(v)) return v;
    return std::stod(format_number(v));
}

} // namespace

std::size_t ConfusionMatrix::total() const {
    std::size_t n = 0;
    for (const auto& row : counts) n = std::accumulate(row.begin(), row.end(), n);
    return n;
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
    return n;
}

double ConfusionMatrix::accuracy() const {
    const std::size_t n = total();
    return n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> truths, std::span<const int> classes) {
    if (preds.size() != truths.size()) throw ShapeError("predictions and truths differ in length");
    ConfusionMatrix m;
    m.classes.assign(classes.begin(), classes.end());
    m.counts.assign(classes.size(), std::vector<std::size_t>(classes.size(), 0));
    auto index_of = [&](int c) {
        const auto it = std::find(classes.begin(), classes.end(), c);
        if (it == classes.end()) throw LabelError("class " + std::to_string(c) + " is not in the confusion class list");
        return static_cast<std::size_t>(it - classes.begin());
    };
    for (std::size_t i = 0; i < preds.size(); ++i) ++m.counts[index_of(preds[i])][index_of(truths[i])];
    return m;
}

std::vector<double> MetricsLog::final_group_accuracy() const {
    std::vector<double> acc(groups.size(), 0.0);
    if (epochs.empty()) return acc;
    const int last_batch = epochs.back().batch;
    const std::size_t last_epoch = epochs.back().epoch;
    for (const EpochRecord& r : epochs) {
        if (r.batch == last_batch && r.epoch == last_epoch && r.group < acc.size()) acc[r.group] = r.accuracy;
    }
    return acc;
}

double MetricsLog::average_final_accuracy() const {
    const auto acc = final_group_accuracy();
    if (acc.empty()) return 0.0;
    return std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
}

double MetricsLog::accuracy_after_batch(int batch, std::size_t group) const {
    double v = -1.0;
    std::size_t best_epoch = 0;
    for (const EpochRecord& r : epochs) {
        if (r.batch == batch && r.group == group && (v < 0.0 || r.epoch >= best_epoch)) {
            v = r.accuracy;
            best_epoch = r.epoch;
        }
    }
    return v;
}

std::string format_number(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void record_and_emit(const MetricsLog& log, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    {
        auto out = open_for_write(out_dir / "accuracy_curves.csv");
        out << "batch,epoch,group,accuracy\n";
        for (const EpochRecord& r : log.epochs) {
            out << r.batch << ',' << r.epoch << ',' << r.group << ',' << format_number(r.accuracy) << '\n';
        }
    }
    {
        auto out = open_for_write(out_dir / "detections.csv");
        out << "batch,flagged_new,total_new,flagged_old,cost\n";
        for (const DetectionRecord& r : log.detections) {
            out << r.batch << ',' << r.flagged_new << ',' << r.total_new << ',' << r.flagged_old << ',' << r.cost << '\n';
        }
    }
    {
        auto out = open_for_write(out_dir / "confusion.csv");
        out << "predicted";
        for (int c : log.confusion.classes) out << ',' << c;
        out << '\n';
        for (std::size_t i = 0; i < log.confusion.counts.size(); ++i) {
            out << log.confusion.classes[i];
            for (std::size_t n : log.confusion.counts[i]) out << ',' << n;
            out << '\n';
        }
    }
    {
        nlohmann::ordered_json j;
        j["code_version"] = log.code_version;
        j["config_fingerprint"] = log.config_fingerprint;
        j["split_method"] = "seeded stratified shuffle split";
        j["groups"] = log.groups;
        std::vector<double> acc;
        for (double a : log.final_group_accuracy()) acc.push_back(six_digits(a));
        j["final_group_accuracy"] = acc;
        j["average_accuracy"] = six_digits(log.average_final_accuracy());
        j["overall_test_accuracy"] = six_digits(log.confusion.accuracy());
        auto detections = nlohmann::ordered_json::array();
        for (const DetectionRecord& r : log.detections) {
            nlohmann::ordered_json d;
            d["batch"] = r.batch;
            d["ratio"] = std::to_string(r.flagged_new) + "/" + std::to_string(r.total_new);
            d["true_positive_rate"] = six_digits(r.true_positive_rate());
            d["false_alarms"] = r.flagged_old;
            d["cost"] = r.cost;
            detections.push_back(std::move(d));
        }
        j["detections"] = std::move(detections);
        j["inspection_cost"] = log.inspection_cost;
        auto out = open_for_write(out_dir / "summary.json");
        out << j.dump(2) << '\n';
    }
}

} // namespace cad::report
