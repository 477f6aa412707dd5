#pragma once

// Batch-level framework: inspect the incoming batch with the current
// detector, label flagged samples through the inspection station, retrain the
// classifier and detector jointly, then keep a capped sample of every class for
// replay.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cad/config.hpp"
#include "cad/data.hpp"
#include "cad/net.hpp"
#include "cad/report.hpp"
#include "cad/scores.hpp"
#include "cad/trainer.hpp"

namespace cad::pipeline {

using data::Sample;
using data::SampleSet;

/// Known classes in output-head order. Position i is the class predicted by head i.
class ClassSet {
public:
    ClassSet() = default;
    explicit ClassSet(std::vector<int> ids);

    bool contains(int id) const;
    std::size_t index_of(int id) const;  // throws LabelError
    void add(int id);                    // no-op if present
    void remove(int id);
    std::size_t size() const noexcept { return ids_.size(); }
    const std::vector<int>& ids() const noexcept { return ids_; }
    int at(std::size_t head) const { return ids_.at(head); }

    bool operator==(const ClassSet&) const = default;

private:
    std::vector<int> ids_;
};

struct ModelState {
    net::NetworkSpec spec;
    net::ParamVector theta;
    net::ParamVector theta_prev;
    train::FisherDiag fisher;
    scores::ScoreParams phi = scores::MaxSoftmaxParams{};
    train::Threshold threshold;
    ClassSet classes;
};

/// Simulated inspection station. Answers with the hidden true label and
/// charges one unit per distinct sample id.
class InspectionOracle {
public:
    explicit InspectionOracle(std::map<std::int64_t, int> truth) : truth_(std::move(truth)) {}

    int label(std::int64_t sample_id);
    std::size_t cost() const noexcept { return queried_.size(); }

    /// Ground truth for evaluation bookkeeping only; not charged.
    int peek(std::int64_t sample_id) const;

private:
    std::map<std::int64_t, int> truth_;
    std::set<std::int64_t> queried_;
};

/// Replay memory: at most `cap` samples per class.
struct MemoryBuffer {
    std::map<int, SampleSet> per_class;
    std::size_t cap = 0;

    SampleSet all() const;
    std::size_t size() const;
};

int classify(const ModelState& state, std::span<const double> x);
double score(const ModelState& state, std::span<const double> x);
/// 1 iff score(x) <= tau.
bool detect_new(const ModelState& state, std::span<const double> x);

struct InspectionStats {
    std::size_t flagged = 0;
    std::size_t flagged_new = 0;  // true positives
    std::size_t flagged_old = 0;  // false alarms
    std::size_t missed_new = 0;   // misdetections, known only in simulation
    std::size_t total_new = 0;
    std::size_t cost = 0;
};

struct InspectionResult {
    SampleSet labeled;         // flagged samples with oracle labels, then the replay buffer
    ClassSet classes;
    std::vector<int> new_classes;
    InspectionStats stats;
};

InspectionResult sample_inspection(const ModelState& state, const SampleSet& batch, InspectionOracle& oracle,
                                   const MemoryBuffer& buffer);

/// Per class, a seeded uniform draw of min(m, count) samples without replacement.
MemoryBuffer retain_old(const SampleSet& labeled, std::size_t m, std::uint64_t seed);

struct AuxSplit {
    SampleSet in_data;
    SampleSet aux;  // labels removed
};

/// Leave-one-out (or leave-several-out) auxiliary OOD set. Every held-out class
/// must be present.
AuxSplit select_aux_ood(const SampleSet& dataset, std::span<const int> held_out);

struct AdversarialOptions {
    double epsilon = 0.5;
    std::size_t steps = 10;
    double step_size = 0.1;
};

/// PGD on the cross-entropy of the true label, projected onto the l-inf ball
/// of radius epsilon around each input. steps = 1 with step_size = epsilon is FGSM.
SampleSet generate_adversarial_ood(const SampleSet& in, const ModelState& state, const AdversarialOptions& options);

struct MergeResult {
    SampleSet labeled;
    SampleSet aux;
    std::vector<int> merged_classes;
};

/// New classes with fewer than n_min labeled samples move to the OOD set.
MergeResult merge_undersampled(const SampleSet& labeled, const SampleSet& aux, std::span<const int> new_classes,
                               std::size_t n_min);

/// Data for one simulated run. batches[0] is the labeled baseline; later
/// batches keep their labels only inside the oracle.
struct BatchStream {
    std::vector<SampleSet> batches;
    SampleSet aux;
    SampleSet test;
    std::vector<std::vector<int>> groups;
};

struct RunResult {
    ModelState state;
    report::MetricsLog log;
};

using ProgressFn = std::function<void(const std::string&)>;

RunResult run_batches(const RunConfig& cfg, const BatchStream& stream, InspectionOracle& oracle,
                      const ProgressFn& progress = {});

train::LabeledSet to_labeled(const SampleSet& samples, const ClassSet& classes);
net::Matrix to_inputs(const SampleSet& samples);

} // namespace cad::pipeline
