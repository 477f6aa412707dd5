#pragma once

// End-to-end wiring for one simulated run: features, split, normalization,
// batch stream and inspection station.

#include <cstdint>
#include <filesystem>
#include <map>

#include "cad/autoencoder.hpp"
#include "cad/config.hpp"
#include "cad/data.hpp"
#include "cad/pipeline.hpp"

namespace cad::experiment {

using data::SampleSet;

/// Every sample of the dataset with raw (unnormalized) features. A feature CSV
/// is used as is; IDX images are passed through an autoencoder trained on the
/// training split. Pass `encoder_out` to keep the trained encoder.
SampleSet load_features(const RunConfig& cfg, const pipeline::ProgressFn& progress = {},
                        net::EncoderParams* encoder_out = nullptr);

/// The autoencoder settings implied by the model section of a config.
net::AutoencoderOptions encoder_options(const RunConfig& cfg);

struct Experiment {
    pipeline::BatchStream stream;
    std::map<std::int64_t, int> truth;  // hidden labels of every streamed sample
};

/// Splits, normalizes on the baseline training data and lays out the batches.
/// Later batches carry their labels only in `truth`.
Experiment build_experiment(const RunConfig& cfg, const SampleSet& features);

pipeline::RunResult run_experiment(const RunConfig& cfg, const SampleSet& features,
                                   const pipeline::ProgressFn& progress = {});

} // namespace cad::experiment
