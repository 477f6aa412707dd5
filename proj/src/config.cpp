#include "cad/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "cad/error.hpp"

namespace cad {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    const std::set<std::string> names(known.begin(), known.end());
    for (const auto& [key, _] : j.items()) {
        if (!names.count(key)) throw ConfigError("unknown field " + (where.empty() ? key : where + "." + key));
    }
}

template <typename T>
void read(const json& j, const char* key, T& into, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        into = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("field " + where + "." + key + " has the wrong type");
    }
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

void RunConfig::validate() const {
    if (data.features_csv.empty() && (data.idx_images.empty() || data.idx_labels.empty())) {
        throw ConfigError("data: set features_csv or both idx_images and idx_labels");
    }
    if (!(data.train_fraction > 0.0 && data.train_fraction < 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1)");
    schedule.validate();
    if (schedule.aux_ood_classes.empty() && ood_source.kind == OodSourceConfig::Kind::LeaveOut) {
        throw ConfigError("schedule.aux_ood must list at least one class for the leave_out OOD source");
    }
    if (model.latent_dim == 0) throw ConfigError("model.latent_dim must be at least 1");
    for (std::size_t w : model.hidden) {
        if (w == 0) throw ConfigError("model.hidden widths must be positive");
    }
    for (std::size_t w : model.encoder_hidden) {
        if (w == 0) throw ConfigError("model.encoder_hidden widths must be positive");
    }
    if (model.encoder_fit != "all" && model.encoder_fit != "baseline") {
        throw ConfigError("model.encoder_fit must be 'all' or 'baseline'");
    }
    if (!(model.encoder_lr > 0.0)) throw ConfigError("model.encoder_lr must be positive");
    if (model.encoder_batch_size == 0) throw ConfigError("model.encoder_batch_size must be at least 1");
    if (train.epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (!(train.lr > 0.0) || !std::isfinite(train.lr)) throw ConfigError("train.lr must be positive");
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (train.baseline != "classifier" && train.baseline != "joint") {
        throw ConfigError("train.baseline must be 'classifier' or 'joint'");
    }
    if (!(continual.lambda_ood >= 0.0) || !std::isfinite(continual.lambda_ood)) {
        throw ConfigError("continual.lambda_ood must be non-negative");
    }
    if (!(continual.lambda_prior >= 0.0) || !std::isfinite(continual.lambda_prior)) {
        throw ConfigError("continual.lambda_prior must be non-negative");
    }
    if (!(continual.eta > 0.0 && continual.eta <= 100.0)) throw ConfigError("continual.eta must lie in (0, 100]");
    if (!(score.ridge >= 0.0)) throw ConfigError("score.ridge must be non-negative");
    if (score.temperatures.empty()) throw ConfigError("score.temperatures must not be empty");
    for (double t : score.temperatures) {
        if (!(t > 0.0)) throw ConfigError("score.temperatures must be positive");
    }
    if (score.epsilons.empty()) throw ConfigError("score.epsilons must not be empty");
    for (double e : score.epsilons) {
        if (!(e >= 0.0)) throw ConfigError("score.epsilons must be non-negative");
    }
    if (ood_source.kind == OodSourceConfig::Kind::Adversarial) {
        if (!(ood_source.epsilon >= 0.0)) throw ConfigError("ood_source.epsilon must be non-negative");
        if (ood_source.steps < 1) throw ConfigError("ood_source.steps must be at least 1");
        if (!(ood_source.step_size >= 0.0)) throw ConfigError("ood_source.step_size must be non-negative");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["data"] = {{"idx_images", data.idx_images},
                 {"idx_labels", data.idx_labels},
                 {"features_csv", data.features_csv},
                 {"train_fraction", data.train_fraction},
                 {"split_seed", data.split_seed}};
    j["schedule"] = {{"baseline", schedule.batches.empty() ? std::vector<int>{} : schedule.batches.front()},
                     {"batches", std::vector<std::vector<int>>(schedule.batches.begin() + (schedule.batches.empty() ? 0 : 1),
                                                               schedule.batches.end())},
                     {"aux_ood", schedule.aux_ood_classes}};
    j["model"] = {{"hidden", model.hidden},
                  {"activation", std::string(net::activation_name(model.activation))},
                  {"latent_dim", model.latent_dim},
                  {"encoder_hidden", model.encoder_hidden},
                  {"encoder_epochs", model.encoder_epochs},
                  {"encoder_lr", model.encoder_lr},
                  {"encoder_batch_size", model.encoder_batch_size},
                  {"encoder_fit", model.encoder_fit}};
    j["train"] = {{"epochs", train.epochs}, {"lr", train.lr}, {"batch_size", train.batch_size}, {"seed", train.seed},
                  {"baseline", train.baseline}};
    j["continual"] = {{"lambda_ood", continual.lambda_ood},
                      {"lambda_prior", continual.lambda_prior},
                      {"eta", continual.eta},
                      {"memory_cap", continual.memory_cap},
                      {"n_min", continual.n_min}};
    j["score"] = {{"kind", std::string(scores::score_kind_name(score.kind))},
                  {"ridge", score.ridge},
                  {"temperatures", score.temperatures},
                  {"epsilons", score.epsilons}};
    if (ood_source.kind == OodSourceConfig::Kind::LeaveOut) {
        j["ood_source"] = {{"kind", "leave_out"}};
    } else {
        j["ood_source"] = {{"kind", "adversarial"},
                           {"epsilon", ood_source.epsilon},
                           {"steps", ood_source.steps},
                           {"step_size", ood_source.step_size}};
    }
    j["output_dir"] = output_dir;
    return j;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    reject_unknown(j, "", {"data", "schedule", "model", "train", "continual", "score", "ood_source", "output_dir"});
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, "data", {"idx_images", "idx_labels", "features_csv", "train_fraction", "split_seed"});
        read(d, "idx_images", c.data.idx_images, "data");
        read(d, "idx_labels", c.data.idx_labels, "data");
        read(d, "features_csv", c.data.features_csv, "data");
        read(d, "train_fraction", c.data.train_fraction, "data");
        read(d, "split_seed", c.data.split_seed, "data");
    }
    if (!j.contains("schedule")) throw ConfigError("missing field schedule");
    {
        const json& s = j.at("schedule");
        reject_unknown(s, "schedule", {"baseline", "batches", "aux_ood"});
        std::vector<int> baseline;
        std::vector<std::vector<int>> batches;
        read(s, "baseline", baseline, "schedule");
        read(s, "batches", batches, "schedule");
        read(s, "aux_ood", c.schedule.aux_ood_classes, "schedule");
        c.schedule.batches.push_back(std::move(baseline));
        for (auto& b : batches) c.schedule.batches.push_back(std::move(b));
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, "model", {"hidden", "activation", "latent_dim", "encoder_hidden", "encoder_epochs", "encoder_lr",
                                    "encoder_batch_size", "encoder_fit"});
        read(m, "hidden", c.model.hidden, "model");
        std::string act = std::string(net::activation_name(c.model.activation));
        read(m, "activation", act, "model");
        try {
            c.model.activation = net::parse_activation(act);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("model.activation: ") + e.what());
        }
        read(m, "latent_dim", c.model.latent_dim, "model");
        read(m, "encoder_hidden", c.model.encoder_hidden, "model");
        read(m, "encoder_epochs", c.model.encoder_epochs, "model");
        read(m, "encoder_lr", c.model.encoder_lr, "model");
        read(m, "encoder_batch_size", c.model.encoder_batch_size, "model");
        read(m, "encoder_fit", c.model.encoder_fit, "model");
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, "train", {"epochs", "lr", "batch_size", "seed", "baseline"});
        read(t, "epochs", c.train.epochs, "train");
        read(t, "lr", c.train.lr, "train");
        read(t, "batch_size", c.train.batch_size, "train");
        read(t, "seed", c.train.seed, "train");
        read(t, "baseline", c.train.baseline, "train");
    }
    if (j.contains("continual")) {
        const json& t = j.at("continual");
        reject_unknown(t, "continual", {"lambda_ood", "lambda_prior", "eta", "memory_cap", "n_min"});
        read(t, "lambda_ood", c.continual.lambda_ood, "continual");
        read(t, "lambda_prior", c.continual.lambda_prior, "continual");
        read(t, "eta", c.continual.eta, "continual");
        read(t, "memory_cap", c.continual.memory_cap, "continual");
        read(t, "n_min", c.continual.n_min, "continual");
    }
    if (j.contains("score")) {
        const json& s = j.at("score");
        reject_unknown(s, "score", {"kind", "ridge", "temperatures", "epsilons"});
        std::string kind = std::string(scores::score_kind_name(c.score.kind));
        read(s, "kind", kind, "score");
        try {
            c.score.kind = scores::parse_score_kind(kind);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("score.kind: ") + e.what());
        }
        read(s, "ridge", c.score.ridge, "score");
        read(s, "temperatures", c.score.temperatures, "score");
        read(s, "epsilons", c.score.epsilons, "score");
    }
    if (j.contains("ood_source")) {
        const json& o = j.at("ood_source");
        reject_unknown(o, "ood_source", {"kind", "epsilon", "steps", "step_size"});
        std::string kind = "leave_out";
        read(o, "kind", kind, "ood_source");
        if (kind == "leave_out") {
            c.ood_source.kind = OodSourceConfig::Kind::LeaveOut;
        } else if (kind == "adversarial") {
            c.ood_source.kind = OodSourceConfig::Kind::Adversarial;
        } else {
            throw ConfigError("ood_source.kind must be 'leave_out' or 'adversarial'");
        }
        read(o, "epsilon", c.ood_source.epsilon, "ood_source");
        read(o, "steps", c.ood_source.steps, "ood_source");
        read(o, "step_size", c.ood_source.step_size, "ood_source");
    }
    read(j, "output_dir", c.output_dir, "");
    return c;
}

std::string RunConfig::fingerprint() const {
    // where results are written does not change what they are
    nlohmann::ordered_json science = to_json();
    science.erase("output_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(science.dump() + "|" + kCodeVersion)));
    return buf;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    RunConfig c = RunConfig::from_json(j);
    // relative paths are resolved against the config file's directory
    const auto base = path.parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    resolve(c.data.idx_images);
    resolve(c.data.idx_labels);
    resolve(c.data.features_csv);
    resolve(c.output_dir);
    c.validate();
    return c;
}

} // namespace cad
