#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "fedsim/errors.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/rng.hpp"
#include "test_util.hpp"

using namespace fedsim;
using namespace fedtest;

TEST_CASE("confusion bookkeeping on hand cases") {
    const ConfusionCounts perfect = confusion({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
    for (std::size_t k = 0; k < 3; ++k) {
        CHECK(perfect.fp[k] == 0);
        CHECK(perfect.fn[k] == 0);
        CHECK(perfect.tp[k] + perfect.tn[k] == 4);
    }

    // one sample of class 0 predicted as class 1, three classes
    const ConfusionCounts c = confusion({1}, {0}, 3);
    CHECK(c.fn[0] == 1);
    CHECK(c.fp[1] == 1);
    CHECK(c.tn[2] == 1);
    CHECK(c.tp[0] == 0);

    CHECK_THROWS_AS(confusion({0, 1}, {0}, 3), ContractError);
    CHECK_THROWS_AS(confusion({5}, {0}, 3), ContractError);
}

TEST_CASE("confusion matches an independent tally over 1000 random pairs") {
    Rng rng(1);
    const std::size_t n = 1000, k = 4;
    std::vector<int> preds(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        preds[i] = static_cast<int>(rng.below(k));
        truth[i] = static_cast<int>(rng.below(k));
    }
    const ConfusionCounts c = confusion(preds, truth, k);

    std::size_t correct = 0;
    for (std::size_t cls = 0; cls < k; ++cls) {
        std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool p = preds[i] == static_cast<int>(cls);
            const bool t = truth[i] == static_cast<int>(cls);
            tp += p && t;
            fp += p && !t;
            fn += !p && t;
            tn += !p && !t;
        }
        CHECK(c.tp[cls] == tp);
        CHECK(c.fp[cls] == fp);
        CHECK(c.fn[cls] == fn);
        CHECK(c.tn[cls] == tn);
        CHECK(tp + fp + fn + tn == n);
    }
    for (std::size_t i = 0; i < n; ++i) correct += preds[i] == truth[i];
    std::size_t tp_total = 0;
    for (std::size_t cls = 0; cls < k; ++cls) tp_total += c.tp[cls];
    CHECK(tp_total == correct);  // sum of per-class TP = correct predictions
}

TEST_CASE("metrics: direct formula evaluation") {
    ConfusionCounts c;
    c.tp = {8};
    c.fp = {2};
    c.fn = {2};
    c.tn = {88};
    c.total = 100;
    const MetricSet m = metrics(c);
    CHECK(m.precision == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(m.recall == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(m.f1 == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(m.accuracy == doctest::Approx(0.96).epsilon(1e-12));
    CHECK_FALSE(m.degenerate);
}

TEST_CASE("metrics: perfect predictions and the degenerate convention") {
    const MetricSet perfect = metrics(confusion({0, 1, 2}, {0, 1, 2}, 3));
    CHECK(perfect.accuracy == 1.0);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.f1 == 1.0);

    ConfusionCounts empty_pred;
    empty_pred.tp = {0};
    empty_pred.fp = {0};
    empty_pred.fn = {5};
    empty_pred.tn = {5};
    empty_pred.total = 10;
    const MetricSet m = metrics(empty_pred);
    CHECK(m.precision == 0.0);
    CHECK(m.degenerate);
}

TEST_CASE("f1 is the harmonic mean of the reported precision and recall") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 20 + rng.below(50), k = 2 + rng.below(4);
        std::vector<int> preds(n), truth(n);
        for (std::size_t i = 0; i < n; ++i) {
            preds[i] = static_cast<int>(rng.below(k));
            truth[i] = static_cast<int>(rng.below(k));
        }
        const MetricSet m = metrics(confusion(preds, truth, k));
        if (m.precision + m.recall > 0.0) {
            CHECK(std::abs(m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)) <
                  1e-12);
        }
    }
}

TEST_CASE("metrics are invariant under a consistent class relabeling") {
    Rng rng(7);
    const std::size_t n = 60, k = 4;
    std::vector<int> preds(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
        preds[i] = static_cast<int>(rng.below(k));
        truth[i] = static_cast<int>(rng.below(k));
    }
    const int perm[4] = {2, 0, 3, 1};
    std::vector<int> preds_p(n), truth_p(n);
    for (std::size_t i = 0; i < n; ++i) {
        preds_p[i] = perm[preds[i]];
        truth_p[i] = perm[truth[i]];
    }
    const MetricSet a = metrics(confusion(preds, truth, k));
    const MetricSet b = metrics(confusion(preds_p, truth_p, k));
    CHECK(std::abs(a.accuracy - b.accuracy) < 1e-12);
    CHECK(std::abs(a.precision - b.precision) < 1e-12);
    CHECK(std::abs(a.recall - b.recall) < 1e-12);
    CHECK(std::abs(a.f1 - b.f1) < 1e-12);
}

namespace {

// independent AP oracle: recount the confusion at every distinct threshold
double ap_oracle(const Tensor& scores, const std::vector<int>& truth, std::size_t cls) {
    std::size_t pos = 0;
    for (int t : truth) pos += static_cast<std::size_t>(t) == cls;
    REQUIRE(pos > 0);
    std::set<double, std::greater<double>> thresholds;
    for (std::size_t i = 0; i < truth.size(); ++i) thresholds.insert(scores.at(i, cls));
    double ap = 0.0, prev_recall = 0.0;
    for (double t : thresholds) {
        std::size_t tp = 0, fp = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (scores.at(i, cls) >= t) {
                if (static_cast<std::size_t>(truth[i]) == cls) {
                    ++tp;
                } else {
                    ++fp;
                }
            }
        }
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        const double recall = static_cast<double>(tp) / static_cast<double>(pos);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    return ap;
}

} // namespace

TEST_CASE("pr curve: perfect ranking gives AP 1") {
    Tensor scores({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8});
    const PrResult pr = pr_curve_ap(scores, {0, 0, 1, 1});
    CHECK(pr.per_class[0].ap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pr.per_class[1].ap == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pr.macro_ap == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("pr curve: fully tied scores give AP equal to prevalence") {
    Tensor scores = Tensor::full({8, 2}, 0.5);
    const PrResult pr = pr_curve_ap(scores, {0, 0, 0, 1, 1, 1, 1, 1});
    CHECK(pr.per_class[0].ap == doctest::Approx(3.0 / 8.0).epsilon(1e-12));
    CHECK(pr.per_class[1].ap == doctest::Approx(5.0 / 8.0).epsilon(1e-12));
    REQUIRE(pr.per_class[0].points.size() == 1);
    CHECK(pr.per_class[0].points[0].recall == 1.0);
}

TEST_CASE("pr curve matches exhaustive threshold enumeration for n <= 12") {
    Rng rng(11);
    for (std::size_t n = 2; n <= 12; ++n) {
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t k = 2 + rng.below(3);
            Tensor scores({n, k});
            // quantized scores force tie groups
            for (std::size_t i = 0; i < scores.size(); ++i) {
                scores[i] = 0.25 * static_cast<double>(rng.below(5));
            }
            std::vector<int> truth(n);
            for (auto& t : truth) t = static_cast<int>(rng.below(k));

            const PrResult pr = pr_curve_ap(scores, truth);
            for (std::size_t cls = 0; cls < k; ++cls) {
                const bool present =
                    std::any_of(truth.begin(), truth.end(),
                                [&](int t) { return static_cast<std::size_t>(t) == cls; });
                CHECK(pr.per_class[cls].defined == present);
                if (!present) continue;
                CHECK(std::abs(pr.per_class[cls].ap - ap_oracle(scores, truth, cls)) < 1e-9);
                CHECK(pr.per_class[cls].ap >= 0.0);
                CHECK(pr.per_class[cls].ap <= 1.0);
                // recall is non-decreasing along the threshold order
                double prev = 0.0;
                for (const auto& p : pr.per_class[cls].points) {
                    CHECK(p.recall >= prev);
                    prev = p.recall;
                }
            }
        }
    }
}

TEST_CASE("pr curve flags classes absent from truth") {
    Tensor scores({3, 3}, {0.5, 0.2, 0.3, 0.1, 0.8, 0.1, 0.4, 0.4, 0.2});
    const PrResult pr = pr_curve_ap(scores, {0, 1, 0});
    CHECK(pr.any_undefined);
    CHECK_FALSE(pr.per_class[2].defined);
    // macro AP averages only the defined classes
    CHECK(pr.macro_ap ==
          doctest::Approx((pr.per_class[0].ap + pr.per_class[1].ap) / 2.0).epsilon(1e-12));
}

TEST_CASE("gta is the unweighted per-metric mean") {
    MetricSet a{0.9, 0.8, 0.7, 0.6, false};
    CHECK(gta({a, a}).accuracy == doctest::Approx(0.9).epsilon(1e-15));

    MetricSet b{0.94, 0.8, 0.7, 0.6, false};
    MetricSet c{0.95, 0.8, 0.7, 0.6, false};
    CHECK(gta({a, b, c}).accuracy == doctest::Approx(0.93).epsilon(1e-12));
    CHECK_THROWS_AS(gta({}), ContractError);
}

TEST_CASE("mean_sd uses the sample convention") {
    const MetricStat flat = mean_sd({0.5, 0.5, 0.5});
    CHECK(flat.mean == 0.5);
    CHECK(flat.sd == 0.0);

    const MetricStat s = mean_sd({1.0, 2.0, 3.0, 4.0});
    CHECK(s.mean == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(s.sd == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-12));

    CHECK(mean_sd({7.0}).sd == 0.0);
}

namespace {

std::vector<CenterDataset> tiny_datasets(std::uint64_t seed) {
    const auto specs = default_center_specs(3, 4, {5, 5, 5});
    std::vector<CenterDataset> out;
    for (const auto& spec : specs) out.push_back(generate_center_dataset(spec, 4, 4, seed));
    return out;
}

FLConfig tiny_fl_cfg() {
    FLConfig cfg;
    cfg.algorithm = Algorithm::FedAvg;
    cfg.rounds = 1;
    cfg.local_epochs = 1;
    cfg.batch = 4;
    cfg.eval_every = 0;
    return cfg;
}

} // namespace

TEST_CASE("cross_validate produces k folds of per-center metrics") {
    const ModelSpec spec = tiny_spec();
    ModelSpec model = spec;
    model.n_classes = 4;
    const auto datasets = tiny_datasets(3);

    const FoldReport report = cross_validate(model, datasets, tiny_fl_cfg(), 2, 17);
    CHECK(report.algorithm == "fedavg");
    REQUIRE(report.folds.size() == 2);
    for (const auto& fold : report.folds) {
        CHECK(fold.per_center.size() == 3);
        CHECK(fold.per_center_pr.size() == 3);
        CHECK(fold.gta.accuracy >= 0.0);
        CHECK(fold.gta.accuracy <= 1.0);
    }

    // aggregate stats equal an independent recomputation from the fold values
    for (std::size_t m = 0; m < 4; ++m) {
        std::vector<double> values;
        for (const auto& fold : report.folds) {
            values.push_back(m == 0   ? fold.gta.accuracy
                             : m == 1 ? fold.gta.precision
                             : m == 2 ? fold.gta.recall
                                      : fold.gta.f1);
        }
        const MetricStat expect = mean_sd(values);
        CHECK(report.gta_stats[m].mean == expect.mean);
        CHECK(report.gta_stats[m].sd == expect.sd);
        CHECK(report.gta_stats[m].mean >= *std::min_element(values.begin(), values.end()));
        CHECK(report.gta_stats[m].mean <= *std::max_element(values.begin(), values.end()));
    }
}

TEST_CASE("cross_validate is independent of the fold execution schedule") {
    const ModelSpec spec = tiny_spec();
    ModelSpec model = spec;
    model.n_classes = 4;
    const auto datasets = tiny_datasets(5);

    const FoldReport serial = cross_validate(model, datasets, tiny_fl_cfg(), 2, 23, nullptr, 1);
    const FoldReport parallel = cross_validate(model, datasets, tiny_fl_cfg(), 2, 23, nullptr, 2);
    REQUIRE(serial.folds.size() == parallel.folds.size());
    for (std::size_t f = 0; f < serial.folds.size(); ++f) {
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(serial.folds[f].per_center[c].accuracy ==
                  parallel.folds[f].per_center[c].accuracy);
            CHECK(serial.folds[f].per_center[c].f1 == parallel.folds[f].per_center[c].f1);
        }
    }
}

TEST_CASE("fold report round-trips through its file format") {
    const ModelSpec spec = tiny_spec();
    ModelSpec model = spec;
    model.n_classes = 4;
    const FoldReport report =
        cross_validate(model, tiny_datasets(7), tiny_fl_cfg(), 2, 29);
    save_fold_report(report, "foldreport_test.json");
    const FoldReport loaded = load_fold_report("foldreport_test.json");
    CHECK(loaded.algorithm == report.algorithm);
    REQUIRE(loaded.folds.size() == report.folds.size());
    for (std::size_t f = 0; f < report.folds.size(); ++f) {
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(loaded.folds[f].per_center[c].accuracy ==
                  report.folds[f].per_center[c].accuracy);
            CHECK(loaded.folds[f].per_center_pr[c].macro_ap ==
                  report.folds[f].per_center_pr[c].macro_ap);
        }
        CHECK(loaded.folds[f].gta.f1 == report.folds[f].gta.f1);
    }
    for (std::size_t m = 0; m < 4; ++m) {
        CHECK(loaded.gta_stats[m].mean == report.gta_stats[m].mean);
        CHECK(loaded.gta_stats[m].sd == report.gta_stats[m].sd);
    }
    std::remove("foldreport_test.json");
    CHECK_THROWS_AS(load_fold_report("no_such_report.json"), DataError);
}

TEST_CASE("pr point files carry one block per class") {
    Tensor scores({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.1, 0.9, 0.2, 0.8});
    const PrResult pr = pr_curve_ap(scores, {0, 0, 1, 1});
    save_pr_points(pr, "pr_test.txt");
    std::ifstream is("pr_test.txt");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    CHECK(text.find("# class 0") != std::string::npos);
    CHECK(text.find("# class 1") != std::string::npos);
    std::remove("pr_test.txt");
}
