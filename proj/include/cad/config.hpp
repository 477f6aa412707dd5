#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cad/data.hpp"
#include "cad/net.hpp"
#include "cad/scores.hpp"

namespace cad {

inline constexpr const char* kCodeVersion = "cad 0.1.0";

struct DataConfig {
    std::string idx_images;
    std::string idx_labels;
    std::string features_csv;
    double train_fraction = 0.8;
    std::uint64_t split_seed = 0;
};

struct ModelConfig {
    std::vector<std::size_t> hidden{64, 64};
    net::Activation activation = net::Activation::Tanh;
    std::size_t latent_dim = 4;
    std::vector<std::size_t> encoder_hidden{256, 64};
    std::size_t encoder_epochs = 40;
    double encoder_lr = 0.01;
    std::size_t encoder_batch_size = 32;
    /// "all": the encoder sees the training split of every scheduled class
    /// (images only); "baseline": batch-0 classes only.
    std::string encoder_fit = "all";
};

struct TrainConfig {
    std::size_t epochs = 100;
    double lr = 0.002;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    /// "classifier": batch 0 trains on cross-entropy alone and the detector is
    /// calibrated afterwards. "joint": batch 0 also carries the OOD hinge, with
    /// the threshold recalibrated after every epoch.
    std::string baseline = "classifier";
};

struct ContinualConfig {
    double lambda_ood = 1.0;
    double lambda_prior = 1.0;
    double eta = 80.0;
    std::size_t memory_cap = 300;
    std::size_t n_min = 50;
};

struct ScoreConfig {
    scores::ScoreKind kind = scores::ScoreKind::Odin;
    double ridge = 1e-6;
    std::vector<double> temperatures{1.0, 10.0, 100.0, 1000.0};
    std::vector<double> epsilons{0.0, 0.0005, 0.001, 0.002, 0.005};
};

struct OodSourceConfig {
    enum class Kind { LeaveOut, Adversarial };
    Kind kind = Kind::LeaveOut;
    double epsilon = 0.5;
    std::size_t steps = 10;
    double step_size = 0.1;
};

struct RunConfig {
    DataConfig data;
    data::BatchSchedule schedule;
    ModelConfig model;
    TrainConfig train;
    ContinualConfig continual;
    ScoreConfig score;
    OodSourceConfig ood_source;
    std::string output_dir = "out";

    /// Throws ConfigError naming the offending field.
    void validate() const;

    nlohmann::ordered_json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);

    /// 16 hex digits of FNV-1a over the canonical JSON (minus output_dir) and
    /// the code version.
    std::string fingerprint() const;
};

/// Parses and validates; a missing or malformed file is a ConfigError.
RunConfig load_config(const std::filesystem::path& path);

} // namespace cad
