// cad: run, sweep and prepare continual anomaly-detection experiments.
//
// Exit codes: 0 success, 2 configuration or validation error, 3 runtime error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cad/autoencoder.hpp"
#include "cad/config.hpp"
#include "cad/error.hpp"
#include "cad/experiment.hpp"
#include "cad/report.hpp"
#include "cad/sweep.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kConfigFailure = 2;
constexpr int kRuntimeFailure = 3;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::size_t jobs = 1;
    std::vector<std::string> axes;
};

void require_file(const std::string& path, const char* field) {
    if (!path.empty() && !fs::is_regular_file(path)) {
        throw cad::ConfigError(std::string(field) + ": no such file " + path);
    }
}

cad::RunConfig load(const Options& opt) {
    cad::RunConfig cfg = cad::load_config(opt.config);
    if (opt.seed) cfg.train.seed = *opt.seed;
    if (opt.out) cfg.output_dir = *opt.out;
    cfg.validate();
    require_file(cfg.data.features_csv, "data.features_csv");
    require_file(cfg.data.idx_images, "data.idx_images");
    require_file(cfg.data.idx_labels, "data.idx_labels");
    return cfg;
}

void print_line(const std::string& line) { std::cout << line << '\n' << std::flush; }

int cmd_run(const Options& opt) {
    const cad::RunConfig cfg = load(opt);
    const auto features = cad::experiment::load_features(cfg, print_line);
    const auto result = cad::experiment::run_experiment(cfg, features, print_line);
    cad::report::record_and_emit(result.log, cfg.output_dir);
    print_line("average final accuracy " + cad::report::format_number(result.log.average_final_accuracy()) +
               ", inspection cost " + std::to_string(result.log.inspection_cost) + ", outputs in " + cfg.output_dir);
    return kOk;
}

int cmd_sweep(const Options& opt) {
    std::vector<cad::sweep::Axis> axes;
    for (const auto& a : opt.axes) axes.push_back(cad::sweep::parse_axis(a));
    if (axes.empty()) throw cad::ConfigError("sweep needs at least one --axis");
    const cad::RunConfig cfg = load(opt);
    cad::sweep::grid_points(axes);

    const auto features = cad::experiment::load_features(cfg, print_line);
    const auto runner = [&](const cad::RunConfig& point) {
        const auto result = cad::experiment::run_experiment(point, features);
        cad::report::record_and_emit(result.log, point.output_dir);
        return result.log;
    };
    const auto rows = cad::sweep::run_sweep(cfg, axes, runner, opt.jobs);
    for (const auto& r : rows) {
        std::string line = "point " + std::to_string(r.index);
        for (std::size_t a = 0; a < axes.size(); ++a) {
            line += " " + axes[a].name + "=" + cad::report::format_number(r.point[a]);
        }
        line += r.ok ? " average " + cad::report::format_number(r.average_accuracy) : " failed: " + r.error;
        print_line(line);
    }
    const fs::path csv = fs::path(cfg.output_dir) / "sweep.csv";
    cad::sweep::write_sweep_csv(csv, axes, rows);
    if (const auto best = cad::sweep::best_row(rows, axes)) {
        std::string line = "best point " + std::to_string(*best);
        for (std::size_t a = 0; a < axes.size(); ++a) {
            line += " " + axes[a].name + "=" + cad::report::format_number(rows[*best].point[a]);
        }
        print_line(line + " average " + cad::report::format_number(rows[*best].average_accuracy));
    } else {
        print_line("no sweep point succeeded");
    }
    print_line("wrote " + csv.string());
    return kOk;
}

int cmd_prepare(const Options& opt) {
    const cad::RunConfig cfg = load(opt);
    if (cfg.data.idx_images.empty() || cfg.data.idx_labels.empty()) {
        throw cad::ConfigError("data.idx_images and data.idx_labels are required for prepare");
    }
    cad::net::EncoderParams enc;
    const auto features = cad::experiment::load_features(cfg, print_line, &enc);
    const fs::path out(cfg.output_dir);
    fs::create_directories(out);
    cad::data::write_feature_csv(out / "features.csv", features);
    cad::net::save_encoder(enc, out / "encoder.json");
    print_line("wrote " + (out / "features.csv").string() + " and " + (out / "encoder.json").string());
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual anomaly detection with a simulated inspection station"};
    app.require_subcommand(1);
    Options opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON run configuration")->required();
        sub->add_option("--seed", opt.seed, "override train.seed");
        sub->add_option("--out", opt.out, "override output_dir");
    };
    CLI::App* run = app.add_subcommand("run", "train across all batches and write metrics");
    add_common(run);
    CLI::App* sweep = app.add_subcommand("sweep", "grid search; one full run per point");
    add_common(sweep);
    sweep->add_option("--axis", opt.axes, "NAME=V1,V2,... (log10_lambda_ood, log10_lambda_prior, memory_cap)")
        ->required();
    sweep->add_option("--jobs", opt.jobs, "worker processes")->check(CLI::PositiveNumber);
    CLI::App* prepare = app.add_subcommand("prepare", "train the autoencoder and write 4-d features");
    add_common(prepare);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "cad: " << e.what() << '\n';
        return kConfigFailure;
    }

    try {
        if (run->parsed()) return cmd_run(opt);
        if (sweep->parsed()) return cmd_sweep(opt);
        return cmd_prepare(opt);
    } catch (const cad::ConfigError& e) {
        std::cerr << "cad: config error: " << e.what() << '\n';
        return kConfigFailure;
    } catch (const cad::Error& e) {
        std::cerr << "cad: " << e.kind() << " error: " << e.what() << '\n';
        return kRuntimeFailure;
    } catch (const std::exception& e) {
        std::cerr << "cad: error: " << e.what() << '\n';
        return kRuntimeFailure;
    }
}
