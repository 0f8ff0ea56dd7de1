#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/fl.hpp"
#include "fedsim/model.hpp"
#include "fedsim/synth.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// One-vs-rest bookkeeping per class; TP+FP+FN+TN = total for every class.
struct ConfusionCounts {
    std::vector<std::size_t> tp, fp, fn, tn;
    std::size_t total = 0;
    std::size_t n_classes() const { return tp.size(); }
};

ConfusionCounts confusion(const std::vector<int>& preds, const std::vector<int>& truth,
                          std::size_t n_classes);

// Accuracy/precision/recall averaged over the per-class one-vs-rest values
// (macro); F1 is the harmonic mean of the reported precision and recall.
// Classes with a zero denominator contribute 0 and raise the degenerate flag.
struct MetricSet {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool degenerate = false;
};

MetricSet metrics(const ConfusionCounts& c);

struct PrPoint {
    double recall = 0.0;
    double precision = 0.0;
};

struct PrCurve {
    std::vector<PrPoint> points;  // one point per distinct threshold, descending scores
    double ap = 0.0;
    bool defined = true;  // false when the class never occurs in truth
};

struct PrResult {
    std::vector<PrCurve> per_class;
    double macro_ap = 0.0;  // mean over defined classes
    bool any_undefined = false;
};

// One-vs-rest PR curves with ties grouped; AP = sum (R_k - R_{k-1}) P_k.
PrResult pr_curve_ap(const Tensor& scores, const std::vector<int>& truth);

// global test average: unweighted mean per metric across centers
MetricSet gta(const std::vector<MetricSet>& per_center);

struct MetricStat {
    double mean = 0.0;
    double sd = 0.0;  // sample convention (n-1)
};

MetricStat mean_sd(const std::vector<double>& values);

struct FoldEntry {
    std::vector<MetricSet> per_center;   // center-sorted order
    std::vector<PrResult> per_center_pr;
    MetricSet gta;
};

struct FoldReport {
    std::string algorithm;
    std::vector<int> center_ids;
    std::vector<FoldEntry> folds;
    std::vector<std::array<MetricStat, 4>> per_center_stats;  // acc, prec, rec, f1
    std::array<MetricStat, 4> gta_stats{};
};

// recompute the mean +- SD aggregates from the per-fold entries
void finalize_report(FoldReport& report);

// Five-fold (or k-fold) harness: per fold, build per-center train partitions
// (augmented x8) and test folds, run the federation, evaluate every center's
// final local model on its own test fold, and aggregate mean +- SD. Folds may
// run concurrently (`jobs`); results are ordered by fold index either way.
FoldReport cross_validate(const ModelSpec& spec, const std::vector<CenterDataset>& datasets,
                          const FLConfig& cfg, std::size_t k, std::uint64_t seed,
                          const ParamSet* ssl_init = nullptr, std::size_t jobs = 1);

void save_fold_report(const FoldReport& report, const std::string& path);
FoldReport load_fold_report(const std::string& path);

// "# class k" blocks of "recall precision" rows, for external plotting
void save_pr_points(const PrResult& pr, const std::string& path);

// per-class softmax probabilities for every sample, input to pr_curve_ap
Tensor class_scores(const ModelSpec& spec, const ParamSet& w,
                    const std::vector<Sample>& samples);

} // namespace fedsim
