#include <doctest.h>

#include <cmath>
#include <set>

#include "cad/error.hpp"
#include "cad/pipeline.hpp"
#include "support.hpp"

using namespace cad;
using namespace cad::pipeline;
using cad::net::Activation;
using cad::net::NetworkSpec;

namespace {

Sample sample(std::vector<double> f, std::optional<int> label, std::int64_t id) {
    Sample s;
    s.features = std::move(f);
    s.label = label;
    s.sample_id = id;
    return s;
}

// One input, logits (w x + b0, -w x + b1).
ModelState line_state(double w, std::vector<int> classes, double tau) {
    ModelState st;
    st.spec.widths = {1, 2};
    st.theta = {w, -w, 0.0, 0.0};
    st.classes = ClassSet(std::move(classes));
    st.threshold = {tau, 80.0};
    return st;
}

ModelState bias_state(std::vector<double> bias, std::vector<int> classes) {
    ModelState st;
    st.spec.widths = {1, bias.size()};
    st.theta.assign(bias.size(), 0.0);
    st.theta.insert(st.theta.end(), bias.begin(), bias.end());
    st.classes = ClassSet(std::move(classes));
    return st;
}

ModelState random_state(Rng& rng, std::size_t k, std::size_t d) {
    ModelState st;
    st.spec.widths = {d, 5, k};
    st.spec.hidden = {Activation::Tanh};
    st.spec.init_seed = rng.next_u64();
    st.theta = testing::random_params(rng, st.spec.param_count(), 2.0);
    std::vector<int> ids;
    for (std::size_t j = 0; j < k; ++j) ids.push_back(static_cast<int>(j));
    st.classes = ClassSet(ids);
    st.threshold = {rng.uniform(0.3, 1.0), 80.0};
    return st;
}

// Isotropic Gaussian blob around (cx, cy).
SampleSet blob(Rng& rng, double cx, double cy, int label, std::size_t n, std::int64_t first_id, int batch) {
    SampleSet out;
    for (std::size_t i = 0; i < n; ++i) {
        // Box-Muller
        const double u1 = std::max(rng.uniform(), 1e-12), u2 = rng.uniform();
        const double r = 0.5 * std::sqrt(-2.0 * std::log(u1));
        Sample s = sample({cx + r * std::cos(2 * M_PI * u2), cy + r * std::sin(2 * M_PI * u2)}, label,
                          first_id + static_cast<std::int64_t>(i));
        s.batch_id = batch;
        out.push_back(s);
    }
    return out;
}

struct BlobWorld {
    BatchStream stream;
    std::map<std::int64_t, int> truth;
};

// Baseline classes 0 and 1, batch 1 brings class 2 far from both, the
// auxiliary set is a fourth far blob off to the side of class 1.
BlobWorld blob_world(std::uint64_t seed) {
    Rng rng(seed);
    BlobWorld w;
    SampleSet b0 = blob(rng, -3.0, 0.0, 0, 100, 0, 0);
    const SampleSet b0b = blob(rng, 3.0, 0.0, 1, 100, 100, 0);
    b0.insert(b0.end(), b0b.begin(), b0b.end());
    SampleSet b1 = blob(rng, 0.0, 6.0, 2, 100, 200, 1);
    for (const auto& s : b1) w.truth[s.sample_id] = *s.label;
    for (auto& s : b1) s.label.reset();
    w.stream.batches = {b0, b1};
    w.stream.aux = blob(rng, 6.0, 6.0, 3, 100, 300, 0);
    for (auto& s : w.stream.aux) s.label.reset();
    for (const auto& [cx, cy, y] : {std::tuple{-3.0, 0.0, 0}, std::tuple{3.0, 0.0, 1}, std::tuple{0.0, 6.0, 2}}) {
        const SampleSet t = blob(rng, cx, cy, y, 50, 1000 + 50 * y, -1);
        w.stream.test.insert(w.stream.test.end(), t.begin(), t.end());
    }
    w.stream.groups = {{0, 1}, {2}};
    return w;
}

RunConfig blob_config() {
    RunConfig cfg;
    cfg.data.features_csv = "blobs.csv";
    cfg.schedule = data::BatchSchedule{{{0, 1}, {2}}, {3}};
    cfg.model.hidden = {16};
    cfg.train.epochs = 60;
    cfg.train.lr = 0.01;
    cfg.train.batch_size = 16;
    cfg.train.seed = 3;
    cfg.continual.memory_cap = 50;
    cfg.continual.n_min = 10;
    return cfg;
}

} // namespace

TEST_CASE("class sets keep head order") {
    ClassSet c({7, 2});
    CHECK(c.index_of(7) == 0);
    CHECK(c.index_of(2) == 1);
    c.add(2);
    CHECK(c.size() == 2);
    c.add(5);
    CHECK(c.at(2) == 5);
    c.remove(7);
    CHECK(c.ids() == std::vector<int>{2, 5});
    CHECK_THROWS_AS(c.index_of(9), LabelError);
}

TEST_CASE("classify maps the argmax back to a class id") {
    const std::vector<double> x{0.0};
    CHECK(classify(bias_state({0.1, 0.9}, {0, 1}), x) == 1);
    CHECK(classify(bias_state({0.5, 0.5}, {0, 1}), x) == 0);
    CHECK(classify(bias_state({0.0, 1.0}, {7, 2}), x) == 2);
    CHECK(classify(bias_state({0.5, 0.5}, {7, 2}), x) == 7);
    CHECK_THROWS_AS(classify(bias_state({0.0, 1.0}, {7, 2}), std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST_CASE("detection boundary is inclusive") {
    ModelState st = line_state(1.0, {0, 1}, 0.0);
    const std::vector<double> x{0.3};
    const double s = score(st, x);
    st.threshold.tau = s;
    CHECK(detect_new(st, x));
    st.threshold.tau = s - 1e-9;
    CHECK_FALSE(detect_new(st, x));

    scores::MahalanobisParams p;
    p.means = {net::logits(st.theta, st.spec, x), net::Vector::Constant(2, 5.0)};
    p.pooled_cov = net::Matrix::Identity(2, 2);
    p.ridge = 0.0;
    p.precision = net::Matrix::Identity(2, 2);
    st.phi = p;
    st.threshold.tau = -0.5;
    CHECK(score(st, x) == 0.0);
    CHECK_FALSE(detect_new(st, x));
}

TEST_CASE("detection is exactly the score comparison") {
    Rng rng(1);
    for (int trial = 0; trial < 30; ++trial) {
        ModelState st = random_state(rng, 3, 2);
        if (trial % 2 == 1) st.phi = scores::OdinParams{10.0, 0.002};
        for (int q = 0; q < 20; ++q) {
            const std::vector<double> x{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
            CHECK(detect_new(st, x) == (score(st, x) <= st.threshold.tau));
        }
    }
}

TEST_CASE("inspection of a three-sample batch") {
    // scores: sigmoid(2|x|) = 0.5, 0.55, ~1
    const ModelState st = line_state(1.0, {0, 1}, 0.6);
    const SampleSet batch{sample({0.0}, std::nullopt, 10), sample({0.1}, std::nullopt, 11), sample({3.0}, std::nullopt, 12)};
    InspectionOracle oracle({{10, 5}, {11, 1}, {12, 0}});
    const auto r = sample_inspection(st, batch, oracle, MemoryBuffer{});
    CHECK(r.stats.flagged == 2);
    CHECK(r.stats.cost == 2);
    CHECK(oracle.cost() == 2);
    CHECK(r.stats.flagged_new == 1);
    CHECK(r.stats.flagged_old == 1);
    CHECK(r.stats.total_new == 1);
    CHECK(r.stats.missed_new == 0);
    CHECK(r.classes.ids() == std::vector<int>{0, 1, 5});
    CHECK(r.new_classes == std::vector<int>{5});
    REQUIRE(r.labeled.size() == 2);
    CHECK(r.labeled[0].label == 5);
    CHECK(r.labeled[1].label == 1);
}

TEST_CASE("inspection when everything or nothing is flagged") {
    const SampleSet batch{sample({0.0}, std::nullopt, 1), sample({0.4}, std::nullopt, 2), sample({2.0}, std::nullopt, 3)};
    MemoryBuffer buf;
    buf.cap = 5;
    buf.per_class[0] = {sample({-1.0}, 0, 90)};
    buf.per_class[1] = {sample({1.0}, 1, 91)};

    InspectionOracle all_old({{1, 0}, {2, 1}, {3, 1}});
    const auto every = sample_inspection(line_state(1.0, {0, 1}, 1.0), batch, all_old, buf);
    CHECK(every.stats.flagged == 3);
    CHECK(every.stats.cost == 3);
    CHECK(every.stats.flagged_old == 3);
    CHECK(every.stats.flagged_new == 0);
    CHECK(every.classes.ids() == std::vector<int>{0, 1});
    CHECK(every.labeled.size() == 5);

    InspectionOracle quiet({{1, 4}, {2, 1}, {3, 1}});
    const auto none = sample_inspection(line_state(1.0, {0, 1}, 0.1), batch, quiet, buf);
    CHECK(none.stats.flagged == 0);
    CHECK(none.stats.cost == 0);
    CHECK(quiet.cost() == 0);
    CHECK(none.stats.missed_new == 1);
    CHECK(none.classes.ids() == std::vector<int>{0, 1});
    REQUIRE(none.labeled.size() == 2);
    CHECK(none.labeled[0].sample_id == 90);
    CHECK(none.labeled[1].sample_id == 91);

    InspectionOracle missing(std::map<std::int64_t, int>{{1, 0}});
    CHECK_THROWS_AS(sample_inspection(line_state(1.0, {0, 1}, 1.0), batch, missing, buf), OracleError);
}

TEST_CASE("inspection labels exactly the flagged samples and never shrinks the class set") {
    Rng rng(2);
    for (int trial = 0; trial < 40; ++trial) {
        const ModelState st = random_state(rng, 3, 2);
        SampleSet batch;
        std::map<std::int64_t, int> truth;
        const std::size_t n = 5 + rng.below(30);
        for (std::size_t i = 0; i < n; ++i) {
            const auto id = static_cast<std::int64_t>(rng.below(1000000));
            if (truth.count(id)) continue;
            truth[id] = static_cast<int>(rng.below(6));
            batch.push_back(sample({rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)}, std::nullopt, id));
        }
        InspectionOracle oracle(truth);
        const auto r = sample_inspection(st, batch, oracle, MemoryBuffer{});
        std::set<std::int64_t> flagged;
        for (const auto& s : batch)
            if (detect_new(st, s.features)) flagged.insert(s.sample_id);
        std::set<std::int64_t> labeled;
        for (const auto& s : r.labeled) {
            labeled.insert(s.sample_id);
            CHECK(detect_new(st, s.features));
            CHECK(s.label == truth.at(s.sample_id));
        }
        CHECK(labeled == flagged);
        CHECK(oracle.cost() == flagged.size());
        CHECK(r.stats.flagged_new + r.stats.flagged_old == r.stats.flagged);
        CHECK(r.stats.flagged_new + r.stats.missed_new == r.stats.total_new);
        for (int c : st.classes.ids()) CHECK(r.classes.contains(c));
    }
}

TEST_CASE("the oracle charges once per distinct sample") {
    InspectionOracle o({{1, 3}, {2, 4}});
    CHECK(o.label(1) == 3);
    CHECK(o.label(1) == 3);
    CHECK(o.cost() == 1);
    CHECK(o.peek(2) == 4);
    CHECK(o.cost() == 1);
    CHECK(o.label(2) == 4);
    CHECK(o.cost() == 2);
    CHECK_THROWS_AS(o.label(9), OracleError);
    CHECK(o.cost() == 2);
}

TEST_CASE("replay memory") {
    SampleSet d;
    for (int i = 0; i < 5; ++i) d.push_back(sample({double(i)}, 0, i));
    for (int i = 5; i < 8; ++i) d.push_back(sample({double(i)}, 1, i));
    CHECK(retain_old(d, 0, 1).size() == 0);
    const auto whole = retain_old(d, 10, 1);
    CHECK(whole.size() == 8);
    CHECK(whole.per_class.at(0).size() == 5);

    const auto a = retain_old(d, 2, 77);
    const auto b = retain_old(d, 2, 77);
    REQUIRE(a.per_class.at(0).size() == 2);
    CHECK(a.per_class.at(0)[0].sample_id == b.per_class.at(0)[0].sample_id);
    CHECK(a.per_class.at(0)[1].sample_id == b.per_class.at(0)[1].sample_id);
    CHECK(a.per_class.at(1).size() == 2);

    d.push_back(sample({9.0}, std::nullopt, 99));
    CHECK_THROWS_AS(retain_old(d, 2, 1), LabelError);
}

TEST_CASE("replay memory never exceeds the cap") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        SampleSet d;
        const std::size_t n = rng.below(80);
        for (std::size_t i = 0; i < n; ++i) d.push_back(sample({0.0}, static_cast<int>(rng.below(5)), static_cast<std::int64_t>(i)));
        const std::size_t m = rng.below(20);
        const auto buf = retain_old(d, m, rng.next_u64());
        std::set<std::int64_t> seen;
        for (const auto& [label, samples] : buf.per_class) {
            CHECK(samples.size() <= m);
            const auto count = static_cast<std::size_t>(std::count_if(d.begin(), d.end(), [l = label](const Sample& s) { return s.label == l; }));
            CHECK(samples.size() == std::min(m, count));
            for (const auto& s : samples) {
                CHECK(s.label == label);
                CHECK(seen.insert(s.sample_id).second);
            }
        }
    }
}

TEST_CASE("auxiliary set by holding out classes") {
    SampleSet d;
    std::int64_t id = 0;
    for (int c : {0, 1, 8, 9})
        for (int i = 0; i < 4; ++i) d.push_back(sample({double(c)}, c, id++));
    const std::vector<int> held{8, 9};
    const auto split = select_aux_ood(d, held);
    CHECK(split.aux.size() == 8);
    CHECK(split.in_data.size() == 8);
    CHECK(split.aux.size() + split.in_data.size() == d.size());
    for (const auto& s : split.aux) {
        CHECK_FALSE(s.label.has_value());
        CHECK((s.features[0] == 8.0 || s.features[0] == 9.0));
    }
    for (const auto& s : split.in_data) CHECK((s.label == 0 || s.label == 1));
    CHECK_THROWS_AS(select_aux_ood(d, std::vector<int>{5}), ConfigError);
    CHECK_THROWS_AS(select_aux_ood(d, std::vector<int>{}), ConfigError);
}

TEST_CASE("adversarial samples") {
    Rng rng(4);
    const ModelState st = random_state(rng, 3, 4);
    SampleSet in;
    for (int i = 0; i < 20; ++i)
        in.push_back(sample({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)},
                            static_cast<int>(rng.below(3)), i));

    const auto same = generate_adversarial_ood(in, st, {0.0, 5, 0.1});
    for (std::size_t i = 0; i < in.size(); ++i) {
        CHECK(same[i].features == in[i].features);
        CHECK_FALSE(same[i].label.has_value());
    }

    // one full step of size epsilon is the fast gradient sign method
    const double eps = 0.05;
    const auto fgsm = generate_adversarial_ood(in, st, {eps, 1, eps});
    for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t head = st.classes.index_of(*in[i].label);
        const auto g = testing::numeric_gradient(
            [&](std::span<const double> x) {
                return -std::log(net::softmax(net::logits(st.theta, st.spec, x))[static_cast<Eigen::Index>(head)]);
            },
            in[i].features, 1e-6);
        for (std::size_t k = 0; k < 4; ++k) {
            if (std::abs(g[k]) < 1e-6) continue;
            CHECK(fgsm[i].features[k] - in[i].features[k] == doctest::Approx(g[k] > 0 ? eps : -eps).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(generate_adversarial_ood(in, st, {0.1, 0, 0.1}), ParameterError);
}

TEST_CASE("adversarial samples stay inside the epsilon ball") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const ModelState st = random_state(rng, 2 + rng.below(3), 3);
        SampleSet in;
        for (int i = 0; i < 10; ++i)
            in.push_back(sample({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)},
                                st.classes.at(rng.below(st.classes.size())), i));
        const AdversarialOptions opt{rng.uniform(0.0, 1.0), 1 + rng.below(10), rng.uniform(0.0, 0.5)};
        const auto out = generate_adversarial_ood(in, st, opt);
        for (std::size_t i = 0; i < in.size(); ++i)
            for (std::size_t k = 0; k < 3; ++k)
                CHECK(std::abs(out[i].features[k] - in[i].features[k]) <= opt.epsilon + 1e-12);
    }
}

TEST_CASE("undersampled new classes move to the auxiliary set") {
    SampleSet labeled;
    for (int i = 0; i < 12; ++i) labeled.push_back(sample({1.0}, 4, i));
    for (int i = 12; i < 15; ++i) labeled.push_back(sample({2.0}, 6, i));
    for (int i = 15; i < 20; ++i) labeled.push_back(sample({0.0}, 0, i));
    const SampleSet aux{sample({9.0}, std::nullopt, 100)};
    const std::vector<int> fresh{4, 6};

    const auto keep = merge_undersampled(labeled, aux, fresh, 3);
    CHECK(keep.labeled.size() == labeled.size());
    CHECK(keep.aux.size() == 1);
    CHECK(keep.merged_classes.empty());

    const auto merged = merge_undersampled(labeled, aux, fresh, 10);
    CHECK(merged.merged_classes == std::vector<int>{6});
    CHECK(merged.labeled.size() == 17);
    CHECK(merged.aux.size() == 4);
    for (const auto& s : merged.labeled) CHECK(s.label != 6);
    for (const auto& s : merged.aux) CHECK_FALSE(s.label.has_value());

    const auto zero = merge_undersampled(labeled, aux, fresh, 0);
    CHECK(zero.labeled.size() == labeled.size());
    CHECK(zero.aux.size() == aux.size());
}

TEST_CASE("a lone baseline batch runs without inspections") {
    BlobWorld w = blob_world(10);
    w.stream.batches.resize(1);
    w.stream.groups.resize(1);
    SampleSet test01;
    for (const auto& s : w.stream.test)
        if (s.label != 2) test01.push_back(s);
    w.stream.test = test01;
    RunConfig cfg = blob_config();
    cfg.schedule = data::BatchSchedule{{{0, 1}}, {3}};
    InspectionOracle oracle(std::map<std::int64_t, int>{});
    const auto r = run_batches(cfg, w.stream, oracle);
    CHECK(r.log.inspection_cost == 0);
    CHECK(r.log.detections.empty());
    CHECK(r.state.classes.ids() == std::vector<int>{0, 1});
    CHECK(r.state.theta == r.state.theta_prev);
    CHECK(r.log.final_group_accuracy().at(0) >= 0.95);
}

TEST_CASE("end to end on separable blobs") {
    const BlobWorld w = blob_world(11);
    InspectionOracle oracle(w.truth);
    const auto r = run_batches(blob_config(), w.stream, oracle);
    REQUIRE(r.log.detections.size() == 1);
    const auto& d = r.log.detections[0];
    CHECK(d.total_new == 100);
    CHECK(d.flagged_new >= 90);
    CHECK(r.state.classes.ids() == std::vector<int>{0, 1, 2});
    CHECK(r.log.confusion.accuracy() >= 0.95);
    for (double a : r.log.final_group_accuracy()) CHECK(a >= 0.95);
    CHECK(r.log.inspection_cost == d.cost);
}

TEST_CASE("end to end with mahalanobis scores") {
    const BlobWorld w = blob_world(12);
    RunConfig cfg = blob_config();
    cfg.score.kind = scores::ScoreKind::Mahalanobis;
    cfg.score.ridge = 1.0;
    // quadratic scores inside a summed hinge need a smaller step than the default
    cfg.train.lr = 0.003;
    InspectionOracle oracle(w.truth);
    const auto r = run_batches(cfg, w.stream, oracle);
    REQUIRE(r.log.detections.size() == 1);
    CHECK(r.log.detections[0].flagged_new >= 90);
    CHECK(r.log.confusion.accuracy() >= 0.95);
}

TEST_CASE("identical runs emit identical bytes") {
    const BlobWorld w = blob_world(13);
    testing::TempDir dir("det");
    for (const char* sub : {"a", "b"}) {
        InspectionOracle oracle(w.truth);
        const auto r = run_batches(blob_config(), w.stream, oracle);
        report::record_and_emit(r.log, dir / sub);
    }
    for (const char* f : {"accuracy_curves.csv", "detections.csv", "confusion.csv", "summary.json"}) {
        CHECK(testing::read_file(dir.path() / "a" / f) == testing::read_file(dir.path() / "b" / f));
    }
}

TEST_CASE("class sets grow monotonically across batches") {
    BlobWorld w = blob_world(14);
    Rng rng(15);
    SampleSet b2 = blob(rng, -6.0, -6.0, 4, 60, 500, 2);
    const SampleSet old = blob(rng, -3.0, 0.0, 0, 20, 600, 2);
    b2.insert(b2.end(), old.begin(), old.end());
    for (auto& s : b2) {
        w.truth[s.sample_id] = *s.label;
        s.label.reset();
    }
    w.stream.batches.push_back(b2);
    w.stream.groups.push_back({4});
    const SampleSet t4 = blob(rng, -6.0, -6.0, 4, 30, 2000, -1);
    w.stream.test.insert(w.stream.test.end(), t4.begin(), t4.end());
    RunConfig cfg = blob_config();
    cfg.schedule = data::BatchSchedule{{{0, 1}, {2}, {4}}, {3}};
    // Runs over growing prefixes of the stream see the same history, so each
    // class list must extend the previous one.
    std::vector<int> prev;
    for (std::size_t n = 1; n <= 3; ++n) {
        BatchStream prefix = w.stream;
        prefix.batches.resize(n);
        prefix.groups.resize(n);
        RunConfig c = cfg;
        c.schedule.batches.resize(n);
        std::vector<std::string> lines;
        InspectionOracle oracle(w.truth);
        const auto r = run_batches(c, prefix, oracle, [&](const std::string& s) { lines.push_back(s); });
        const auto& ids = r.state.classes.ids();
        REQUIRE(ids.size() >= prev.size());
        CHECK(std::vector<int>(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(prev.size())) == prev);
        CHECK(r.log.detections.size() == n - 1);
        CHECK(r.state.spec.output_width() == r.state.classes.size());
        CHECK(r.state.theta.size() == r.state.spec.param_count());
        CHECK(r.state.fisher.values.size() == r.state.theta.size());
        CHECK_FALSE(lines.empty());
        prev = ids;
    }
    CHECK(prev.size() >= 3);
}

TEST_CASE("run errors name the batch and phase") {
    BlobWorld w = blob_world(16);
    w.truth.erase(w.truth.begin());
    InspectionOracle oracle(w.truth);
    CHECK_THROWS_WITH(run_batches(blob_config(), w.stream, oracle), doctest::Contains("batch 1"));
}
