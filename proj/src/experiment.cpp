#include "cad/experiment.hpp"

#include <algorithm>
#include <set>

#include "cad/error.hpp"

namespace cad::experiment {

namespace {

std::vector<int> scheduled_classes(const data::BatchSchedule& schedule) {
    std::vector<int> out;
    for (const auto& b : schedule.batches) out.insert(out.end(), b.begin(), b.end());
    out.insert(out.end(), schedule.aux_ood_classes.begin(), schedule.aux_ood_classes.end());
    return out;
}

} // namespace

net::AutoencoderOptions encoder_options(const RunConfig& cfg) {
    net::AutoencoderOptions o;
    o.latent_dim = cfg.model.latent_dim;
    o.hidden = cfg.model.encoder_hidden;
    o.activation = cfg.model.activation;
    o.epochs = cfg.model.encoder_epochs;
    o.lr = cfg.model.encoder_lr;
    o.batch_size = cfg.model.encoder_batch_size;
    o.seed = cfg.train.seed;
    return o;
}

SampleSet load_features(const RunConfig& cfg, const pipeline::ProgressFn& progress, net::EncoderParams* encoder_out) {
    if (!cfg.data.features_csv.empty()) return data::load_feature_csv(cfg.data.features_csv);

    const data::RawDataset raw = data::load_idx(cfg.data.idx_images, cfg.data.idx_labels);
    SampleSet skeleton(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        skeleton[i].label = raw.labels[i];
        skeleton[i].sample_id = static_cast<std::int64_t>(i);
    }
    const auto [train, test] = data::stratified_split(skeleton, {cfg.data.train_fraction, cfg.data.split_seed});
    (void)test;

    const std::vector<int> fit_classes =
        cfg.model.encoder_fit == "baseline" ? cfg.schedule.batches.front() : scheduled_classes(cfg.schedule);
    std::vector<Eigen::Index> cols;
    for (const auto& s : train) {
        if (std::find(fit_classes.begin(), fit_classes.end(), *s.label) != fit_classes.end()) {
            cols.push_back(static_cast<Eigen::Index>(s.sample_id));
        }
    }
    std::sort(cols.begin(), cols.end());
    if (cols.empty()) throw InsufficientDataError("no training images for the autoencoder");
    net::Matrix fit(raw.images.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t k = 0; k < cols.size(); ++k) fit.col(static_cast<Eigen::Index>(k)) = raw.images.col(cols[k]);

    if (progress) progress("training autoencoder on " + std::to_string(cols.size()) + " images");
    net::EncoderParams enc = net::train_autoencoder(fit, encoder_options(cfg));
    if (progress) {
        progress("autoencoder reconstruction error " + report::format_number(enc.loss_history.front()) + " -> " +
                 report::format_number(enc.loss_history.back()));
    }

    const net::Matrix codes = net::encode_batch(enc, raw.images);
    SampleSet out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const auto c = codes.col(static_cast<Eigen::Index>(i));
        out[i].features.assign(c.data(), c.data() + c.size());
        out[i].label = raw.labels[i];
        out[i].sample_id = static_cast<std::int64_t>(i);
    }
    if (encoder_out) *encoder_out = std::move(enc);
    return out;
}

Experiment build_experiment(const RunConfig& cfg, const SampleSet& features) {
    cfg.schedule.validate();
    auto [train, test] = data::stratified_split(features, {cfg.data.train_fraction, cfg.data.split_seed});

    const data::NormalizationStats stats = data::fit_normalization(data::samples_of(train, cfg.schedule.batches.front()));
    data::apply_normalization(stats, train);
    data::apply_normalization(stats, test);

    Experiment ex;
    ex.stream.groups = cfg.schedule.batches;
    for (std::size_t t = 0; t < cfg.schedule.batches.size(); ++t) {
        SampleSet batch = data::samples_of(train, cfg.schedule.batches[t]);
        if (batch.empty()) throw InsufficientDataError("schedule batch " + std::to_string(t) + " has no samples");
        for (auto& s : batch) {
            s.batch_id = static_cast<int>(t);
            ex.truth[s.sample_id] = *s.label;
            if (t > 0) s.label.reset();
        }
        ex.stream.batches.push_back(std::move(batch));
    }
    if (!cfg.schedule.aux_ood_classes.empty()) {
        ex.stream.aux = pipeline::select_aux_ood(train, cfg.schedule.aux_ood_classes).aux;
    }
    std::vector<int> in_classes;
    for (const auto& b : cfg.schedule.batches) in_classes.insert(in_classes.end(), b.begin(), b.end());
    ex.stream.test = data::samples_of(test, in_classes);
    return ex;
}

pipeline::RunResult run_experiment(const RunConfig& cfg, const SampleSet& features, const pipeline::ProgressFn& progress) {
    Experiment ex = build_experiment(cfg, features);
    pipeline::InspectionOracle oracle(std::move(ex.truth));
    return pipeline::run_batches(cfg, ex.stream, oracle, progress);
}

} // namespace cad::experiment
