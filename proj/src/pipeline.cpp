#include "cad/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cad/error.hpp"
#include "cad/rng.hpp"

namespace cad::pipeline {

namespace {

// Stream tags for derive_seed; one per independent random consumer.
enum SeedStream : std::uint64_t {
    kNetInit = 1,
    kTraining = 2,
    kHeadGrowth = 3,
    kReplay = 4,
};

std::string phase_error(int batch, const char* phase, const std::exception& e) {
    std::ostringstream os;
    os << "batch " << batch << ", " << phase << ": " << e.what();
    return os.str();
}

} // namespace

ClassSet::ClassSet(std::vector<int> ids) {
    for (int id : ids) add(id);
}

bool ClassSet::contains(int id) const { return std::find(ids_.begin(), ids_.end(), id) != ids_.end(); }

std::size_t ClassSet::index_of(int id) const {
    const auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) throw LabelError("class " + std::to_string(id) + " is not a known class");
    return static_cast<std::size_t>(it - ids_.begin());
}

void ClassSet::add(int id) {
    if (!contains(id)) ids_.push_back(id);
}

void ClassSet::remove(int id) { ids_.erase(std::remove(ids_.begin(), ids_.end(), id), ids_.end()); }

int InspectionOracle::label(std::int64_t sample_id) {
    const int y = peek(sample_id);
    queried_.insert(sample_id);
    return y;
}

int InspectionOracle::peek(std::int64_t sample_id) const {
    const auto it = truth_.find(sample_id);
    if (it == truth_.end()) throw OracleError("inspection station has no record of sample " + std::to_string(sample_id));
    return it->second;
}

SampleSet MemoryBuffer::all() const {
    SampleSet out;
    for (const auto& [_, samples] : per_class) out.insert(out.end(), samples.begin(), samples.end());
    return out;
}

std::size_t MemoryBuffer::size() const {
    std::size_t n = 0;
    for (const auto& [_, samples] : per_class) n += samples.size();
    return n;
}

net::Matrix to_inputs(const SampleSet& samples) {
    if (samples.empty()) return {};
    net::Matrix m(static_cast<Eigen::Index>(samples.front().features.size()), static_cast<Eigen::Index>(samples.size()));
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (static_cast<Eigen::Index>(samples[i].features.size()) != m.rows()) throw ShapeError("feature widths differ");
        m.col(static_cast<Eigen::Index>(i)) =
            Eigen::Map<const net::Vector>(samples[i].features.data(), m.rows());
    }
    return m;
}

train::LabeledSet to_labeled(const SampleSet& samples, const ClassSet& classes) {
    train::LabeledSet set;
    set.inputs = to_inputs(samples);
    set.heads.reserve(samples.size());
    for (const Sample& s : samples) {
        if (!s.label) throw LabelError("sample " + std::to_string(s.sample_id) + " has no label");
        set.heads.push_back(classes.index_of(*s.label));
    }
    return set;
}

int classify(const ModelState& state, std::span<const double> x) {
    return state.classes.at(net::argmax(net::logits(state.theta, state.spec, x)));
}

double score(const ModelState& state, std::span<const double> x) {
    return scores::score_batch(state.phi, state.theta, state.spec, net::column(x)).front();
}

bool detect_new(const ModelState& state, std::span<const double> x) { return score(state, x) <= state.threshold.tau; }

InspectionResult sample_inspection(const ModelState& state, const SampleSet& batch, InspectionOracle& oracle,
                                   const MemoryBuffer& buffer) {
    InspectionResult r;
    r.classes = state.classes;
    const std::size_t cost_before = oracle.cost();

    std::vector<std::size_t> order(batch.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch[a].sample_id < batch[b].sample_id; });

    for (std::size_t i : order) {
        const Sample& s = batch[i];
        const bool truly_new = !state.classes.contains(oracle.peek(s.sample_id));
        if (truly_new) ++r.stats.total_new;
        if (!detect_new(state, s.features)) {
            if (truly_new) ++r.stats.missed_new;
            continue;
        }
        ++r.stats.flagged;
        const int y = oracle.label(s.sample_id);
        (truly_new ? r.stats.flagged_new : r.stats.flagged_old) += 1;
        Sample labeled = s;
        labeled.label = y;
        r.labeled.push_back(std::move(labeled));
        if (!r.classes.contains(y)) {
            r.classes.add(y);
            r.new_classes.push_back(y);
        }
    }
    r.stats.cost = oracle.cost() - cost_before;
    const SampleSet old = buffer.all();
    r.labeled.insert(r.labeled.end(), old.begin(), old.end());
    return r;
}

MemoryBuffer retain_old(const SampleSet& labeled, std::size_t m, std::uint64_t seed) {
    MemoryBuffer buf;
    buf.cap = m;
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        if (!labeled[i].label) throw LabelError("replay memory accepts labeled samples only");
        by_class[*labeled[i].label].push_back(i);
    }
    for (const auto& [label, idx] : by_class) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
        std::vector<std::size_t> pick = rng.choose(idx.size(), std::min(m, idx.size()));
        std::sort(pick.begin(), pick.end());
        SampleSet& dst = buf.per_class[label];
        for (std::size_t p : pick) dst.push_back(labeled[idx[p]]);
        if (dst.empty()) buf.per_class.erase(label);
    }
    return buf;
}

AuxSplit select_aux_ood(const SampleSet& dataset, std::span<const int> held_out) {
    if (held_out.empty()) throw ConfigError("no class held out for the auxiliary OOD set");
    AuxSplit split;
    for (const Sample& s : dataset) {
        if (s.label && std::find(held_out.begin(), held_out.end(), *s.label) != held_out.end()) {
            Sample a = s;
            a.label.reset();
            split.aux.push_back(std::move(a));
        } else {
            split.in_data.push_back(s);
        }
    }
    for (int c : held_out) {
        const bool present = std::any_of(dataset.begin(), dataset.end(), [c](const Sample& s) { return s.label == c; });
        if (!present) throw ConfigError("held-out class " + std::to_string(c) + " has no samples");
    }
    return split;
}

SampleSet generate_adversarial_ood(const SampleSet& in, const ModelState& state, const AdversarialOptions& options) {
    if (!(options.epsilon >= 0.0)) throw ParameterError("adversarial epsilon must be non-negative");
    if (options.steps < 1) throw ParameterError("adversarial steps must be at least 1");
    if (in.empty()) return {};
    const train::LabeledSet labeled = to_labeled(in, state.classes);
    const net::Matrix origin = labeled.inputs;
    net::Matrix x = origin;
    for (std::size_t step = 0; step < options.steps; ++step) {
        const net::ForwardTrace trace = net::forward(state.theta, state.spec, x);
        net::Matrix dz = net::softmax_columns(trace.logits());
        for (std::size_t c = 0; c < labeled.size(); ++c) {
            dz(static_cast<Eigen::Index>(labeled.heads[c]), static_cast<Eigen::Index>(c)) -= 1.0;
        }
        const net::Matrix g = net::backward(state.theta, state.spec, trace, dz).inputs;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            for (Eigen::Index k = 0; k < x.rows(); ++k) {
                const double s = g(k, c) > 0.0 ? 1.0 : (g(k, c) < 0.0 ? -1.0 : 0.0);
                const double lo = origin(k, c) - options.epsilon;
                const double hi = origin(k, c) + options.epsilon;
                x(k, c) = std::clamp(x(k, c) + options.step_size * s, lo, hi);
            }
        }
    }
    SampleSet out;
    out.reserve(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        Sample a = in[i];
        a.label.reset();
        const auto col = x.col(static_cast<Eigen::Index>(i));
        a.features.assign(col.data(), col.data() + col.size());
        out.push_back(std::move(a));
    }
    return out;
}

MergeResult merge_undersampled(const SampleSet& labeled, const SampleSet& aux, std::span<const int> new_classes,
                               std::size_t n_min) {
    MergeResult r;
    r.aux = aux;
    for (int c : new_classes) {
        const auto count = static_cast<std::size_t>(
            std::count_if(labeled.begin(), labeled.end(), [c](const Sample& s) { return s.label == c; }));
        if (count < n_min) r.merged_classes.push_back(c);
    }
    for (const Sample& s : labeled) {
        if (s.label && std::find(r.merged_classes.begin(), r.merged_classes.end(), *s.label) != r.merged_classes.end()) {
            Sample a = s;
            a.label.reset();
            r.aux.push_back(std::move(a));
        } else {
            r.labeled.push_back(s);
        }
    }
    return r;
}

namespace {

enum class Phase { ClassifierOnly, JointBaseline, Continual };

class Runner {
public:
    Runner(const RunConfig& cfg, const BatchStream& stream, InspectionOracle& oracle, const ProgressFn& progress)
        : cfg_(cfg), stream_(stream), oracle_(oracle), progress_(progress),
          train_rng_(derive_seed(cfg.train.seed, kTraining)) {
        // adversarial runs build their OOD set from generated samples only
        if (cfg.ood_source.kind == OodSourceConfig::Kind::LeaveOut) aux_ = stream.aux;
        grid_.temperatures = cfg.score.temperatures;
        grid_.epsilons = cfg.score.epsilons;
        test_inputs_ = to_inputs(stream.test);
        log_.groups = stream.groups;
        log_.code_version = kCodeVersion;
        log_.config_fingerprint = cfg.fingerprint();
    }

    RunResult run() {
        if (stream_.batches.empty() || stream_.batches.front().empty()) {
            throw InsufficientDataError("baseline batch is empty");
        }
        baseline();
        for (std::size_t t = 1; t < stream_.batches.size(); ++t) continual_batch(static_cast<int>(t));
        log_.inspection_cost = oracle_.cost();
        log_.confusion = final_confusion();
        return {std::move(state_), std::move(log_)};
    }

private:
    void baseline() {
        const SampleSet& d0 = stream_.batches.front();
        std::vector<int> ids;
        for (const Sample& s : d0) {
            if (!s.label) throw LabelError("baseline sample " + std::to_string(s.sample_id) + " is unlabeled");
            ids.push_back(*s.label);
        }
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        state_.classes = ClassSet(ids);

        state_.spec.widths.push_back(d0.front().features.size());
        for (std::size_t h : cfg_.model.hidden) {
            state_.spec.widths.push_back(h);
            state_.spec.hidden.push_back(cfg_.model.activation);
        }
        state_.spec.widths.push_back(state_.classes.size());
        state_.spec.init_seed = derive_seed(cfg_.train.seed, kNetInit);
        state_.theta = net::init_params(state_.spec);

        switch (cfg_.score.kind) {
        case scores::ScoreKind::Odin:
            state_.phi = scores::OdinParams{cfg_.score.temperatures.front(), cfg_.score.epsilons.front()};
            break;
        case scores::ScoreKind::MaxSoftmax: state_.phi = scores::MaxSoftmaxParams{}; break;
        case scores::ScoreKind::Mahalanobis: break;  // fitted after training
        }

        // "classifier": the pre-trained f(0) sees cross-entropy only and its
        // detector is calibrated afterwards. "joint": the detector is trained
        // alongside, so phi and tau are bootstrapped from the untrained net.
        const train::LabeledSet d = to_labeled(d0, state_.classes);
        try {
            const net::Matrix aux = aux_inputs(0, d0);
            if (cfg_.train.baseline == "joint") {
                refit_mahalanobis(d);
                state_.threshold = train::update_threshold(current_scores(aux), cfg_.continual.eta);
                train_epochs(0, d, aux, {}, {}, Phase::JointBaseline);
            } else {
                train_epochs(0, d, aux, {}, {}, Phase::ClassifierOnly);
            }
            finish_batch(0, d0, d, aux);
        } catch (const Error& e) {
            rethrow(e, 0, "baseline training");
        }
    }

    void continual_batch(int t) {
        InspectionResult insp;
        try {
            insp = sample_inspection(state_, stream_.batches[static_cast<std::size_t>(t)], oracle_, buffer_);
        } catch (const Error& e) {
            rethrow(e, t, "sample inspection");
        }
        report::DetectionRecord det;
        det.batch = t;
        det.flagged_new = insp.stats.flagged_new;
        det.total_new = insp.stats.total_new;
        det.flagged_old = insp.stats.flagged_old;
        det.cost = insp.stats.cost;
        log_.detections.push_back(det);
        say("batch " + std::to_string(t) + ": flagged " + std::to_string(insp.stats.flagged) + " (" +
            std::to_string(insp.stats.flagged_new) + "/" + std::to_string(insp.stats.total_new) + " new)");

        if (insp.stats.flagged == 0) {
            // nothing new was labeled: the model carries over unchanged
            evaluate(t, cfg_.train.epochs);
            return;
        }

        const MergeResult merged = merge_undersampled(insp.labeled, aux_, insp.new_classes, cfg_.continual.n_min);
        aux_ = merged.aux;
        ClassSet classes = insp.classes;
        for (int c : merged.merged_classes) classes.remove(c);

        const std::size_t classes_before = state_.spec.output_width();
        try {
            grow_head(classes);
            const train::LabeledSet d = to_labeled(merged.labeled, state_.classes);
            // Mahalanobis means must cover the grown class set before the hinge can use them
            if (state_.spec.output_width() != classes_before) refit_mahalanobis(d);
            const net::Matrix aux = aux_inputs(t, merged.labeled);
            const net::ParamVector anchor = state_.theta_prev;
            const train::FisherDiag fisher = state_.fisher;
            train_epochs(t, d, aux, anchor, fisher, Phase::Continual);
            finish_batch(t, merged.labeled, d, aux);
        } catch (const Error& e) {
            rethrow(e, t, "continual training");
        }
    }

    void grow_head(const ClassSet& classes) {
        if (classes.size() == state_.classes.size()) return;
        const net::NetworkSpec grown = net::with_output_width(state_.spec, classes.size());
        state_.theta = net::expand_head(state_.spec, state_.theta, classes.size(),
                                        derive_seed(cfg_.train.seed, kHeadGrowth));
        if (!state_.theta_prev.empty()) {
            state_.theta_prev = net::embed_params(state_.spec, state_.theta_prev, grown, 0.0);
            state_.fisher.values = net::embed_params(state_.spec, state_.fisher.values, grown, 0.0);
        }
        state_.spec = grown;
        state_.classes = classes;
    }

    net::Matrix aux_inputs(int t, const SampleSet& labeled) {
        if (cfg_.ood_source.kind == OodSourceConfig::Kind::LeaveOut) {
            if (aux_.empty()) throw ConfigError("auxiliary OOD set is empty");
            return to_inputs(aux_);
        }
        AdversarialOptions opts{cfg_.ood_source.epsilon, cfg_.ood_source.steps, cfg_.ood_source.step_size};
        SampleSet generated = generate_adversarial_ood(labeled, state_, opts);
        // classes merged out for lack of samples still count as OOD examples
        generated.insert(generated.end(), aux_.begin(), aux_.end());
        say("batch " + std::to_string(t) + ": generated " + std::to_string(generated.size()) + " adversarial OOD samples");
        return to_inputs(generated);
    }

    void refit_mahalanobis(const train::LabeledSet& d) {
        if (cfg_.score.kind == scores::ScoreKind::Mahalanobis) {
            state_.phi = train::fit_mahalanobis_on(state_.theta, state_.spec, d, cfg_.score.ridge);
        }
    }

    std::vector<double> current_scores(const net::Matrix& inputs) const {
        return scores::score_batch(state_.phi, state_.theta, state_.spec, inputs);
    }

    void train_epochs(int t, const train::LabeledSet& d, const net::Matrix& aux, const net::ParamVector& anchor,
                      const train::FisherDiag& fisher, Phase phase) {
        train::EpochOptions opts;
        opts.lr = cfg_.train.lr;
        opts.batch_size = cfg_.train.batch_size;
        opts.weights.lambda_ood = phase == Phase::ClassifierOnly ? 0.0 : cfg_.continual.lambda_ood;
        opts.weights.lambda_prior = anchor.empty() ? 0.0 : cfg_.continual.lambda_prior;
        const std::size_t epochs = cfg_.train.epochs;
        for (std::size_t e = 1; e <= epochs; ++e) {
            const train::EpochSummary summary = train::continual_train_epoch(
                state_.theta, state_.spec, state_.phi, state_.threshold.tau, d, aux, anchor, fisher, opts, train_rng_);
            evaluate(t, e);
            if (e == epochs || (e * 10) / epochs != ((e - 1) * 10) / epochs) {
                std::ostringstream os;
                os << "batch " << t << " epoch " << e << "/" << epochs << " loss " << report::format_number(summary.terms.total)
                   << " avg_acc " << report::format_number(last_average_);
                say(os.str());
            }
        }
    }

    void finish_batch(int t, const SampleSet& labeled, const train::LabeledSet& d, const net::Matrix& aux) {
        if (cfg_.score.kind == scores::ScoreKind::Mahalanobis) {
            refit_mahalanobis(d);
        } else if (cfg_.score.kind == scores::ScoreKind::Odin) {
            train::OdinGrid grid = grid_;
            state_.phi = train::select_odin_params(state_.theta, state_.spec, d.inputs, aux, grid, cfg_.continual.eta);
        }
        state_.threshold = train::update_threshold(current_scores(aux), cfg_.continual.eta);
        state_.fisher = train::fisher_diagonal(state_.theta, state_.spec, d);
        state_.theta_prev = state_.theta;
        buffer_ = retain_old(labeled, cfg_.continual.memory_cap,
                             derive_seed(cfg_.train.seed, kReplay + 16 * static_cast<std::uint64_t>(t)));
    }

    std::vector<int> predict_test() const {
        std::vector<int> preds;
        if (stream_.test.empty()) return preds;
        const net::Matrix z = net::forward(state_.theta, state_.spec, test_inputs_).logits();
        preds.reserve(static_cast<std::size_t>(z.cols()));
        for (Eigen::Index c = 0; c < z.cols(); ++c) preds.push_back(state_.classes.at(net::argmax(z.col(c))));
        return preds;
    }

    void evaluate(int t, std::size_t epoch) {
        const std::vector<int> preds = predict_test();
        double sum = 0.0;
        std::size_t n_groups = 0;
        for (std::size_t g = 0; g < stream_.groups.size() && g <= static_cast<std::size_t>(t); ++g) {
            const auto& group = stream_.groups[g];
            std::size_t hit = 0, total = 0;
            for (std::size_t i = 0; i < stream_.test.size(); ++i) {
                const int y = *stream_.test[i].label;
                if (std::find(group.begin(), group.end(), y) == group.end()) continue;
                ++total;
                hit += preds[i] == y ? 1 : 0;
            }
            const double acc = total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
            log_.epochs.push_back({t, epoch, g, acc});
            sum += acc;
            ++n_groups;
        }
        last_average_ = n_groups == 0 ? 0.0 : sum / static_cast<double>(n_groups);
    }

    report::ConfusionMatrix final_confusion() const {
        std::vector<int> classes;
        for (const auto& g : stream_.groups) classes.insert(classes.end(), g.begin(), g.end());
        for (const Sample& s : stream_.test) classes.push_back(*s.label);
        std::sort(classes.begin(), classes.end());
        classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
        std::vector<int> truths;
        for (const Sample& s : stream_.test) truths.push_back(*s.label);
        return report::confusion_matrix(predict_test(), truths, classes);
    }

    [[noreturn]] void rethrow(const Error& e, int t, const char* phase) const {
        throw Error(e.kind(), phase_error(t, phase, e));
    }

    void say(const std::string& line) const {
        if (progress_) progress_(line);
    }

    const RunConfig& cfg_;
    const BatchStream& stream_;
    InspectionOracle& oracle_;
    const ProgressFn& progress_;
    Rng train_rng_;
    SampleSet aux_;
    train::OdinGrid grid_;
    net::Matrix test_inputs_;
    ModelState state_;
    MemoryBuffer buffer_;
    report::MetricsLog log_;
    double last_average_ = 0.0;
};

} // namespace

RunResult run_batches(const RunConfig& cfg, const BatchStream& stream, InspectionOracle& oracle,
                      const ProgressFn& progress) {
    return Runner(cfg, stream, oracle, progress).run();
}

} // namespace cad::pipeline
