#pragma once

// Grid sweeps over continual-learning hyperparameters.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cad/config.hpp"
#include "cad/report.hpp"

namespace cad::sweep {

/// Known axes: log10_lambda_ood, log10_lambda_prior, memory_cap.
struct Axis {
    std::string name;
    std::vector<double> values;
};

/// "name=v1,v2,..." -> Axis. Throws ConfigError on unknown names or bad values.
Axis parse_axis(std::string_view text);

/// Cartesian product, last axis varying fastest.
std::vector<std::vector<double>> grid_points(const std::vector<Axis>& axes);

/// Base config with the point applied. The seed becomes base seed XOR index and
/// the output dir gets a point-NNN subdirectory.
RunConfig apply_point(const RunConfig& base, const std::vector<Axis>& axes, std::span<const double> point,
                      std::size_t index);

struct Row {
    std::size_t index = 0;
    std::vector<double> point;
    bool ok = false;
    std::string error;
    std::vector<double> final_group_accuracy;
    double average_accuracy = 0.0;
    std::size_t inspection_cost = 0;
};

using Runner = std::function<report::MetricsLog(const RunConfig&)>;

/// Runs every point. A failing point is recorded with its error message and
/// does not stop the sweep. jobs > 1 runs points in forked worker processes.
std::vector<Row> run_sweep(const RunConfig& base, const std::vector<Axis>& axes, const Runner& runner,
                           std::size_t jobs = 1);

/// Highest average accuracy; ties go to the smaller lambda_prior, then the
/// smaller lambda_ood. Empty when no point succeeded.
std::optional<std::size_t> best_row(const std::vector<Row>& rows, const std::vector<Axis>& axes);

void write_sweep_csv(const std::filesystem::path& path, const std::vector<Axis>& axes, const std::vector<Row>& rows);

} // namespace cad::sweep
