#include "fedsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/ssl.hpp"

namespace fedsim {

ConfusionCounts confusion(const std::vector<int>& preds, const std::vector<int>& truth,
                          std::size_t n_classes) {
    if (preds.size() != truth.size()) {
        throw ContractError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                            std::to_string(truth.size()) + " labels");
    }
    ConfusionCounts c;
    c.tp.assign(n_classes, 0);
    c.fp.assign(n_classes, 0);
    c.fn.assign(n_classes, 0);
    c.tn.assign(n_classes, 0);
    c.total = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int p = preds[i], t = truth[i];
        if (p < 0 || static_cast<std::size_t>(p) >= n_classes || t < 0 ||
            static_cast<std::size_t>(t) >= n_classes) {
            throw ContractError("confusion: label outside [0, " + std::to_string(n_classes) +
                                ") at sample " + std::to_string(i));
        }
        for (std::size_t k = 0; k < n_classes; ++k) {
            const bool pred_k = static_cast<std::size_t>(p) == k;
            const bool true_k = static_cast<std::size_t>(t) == k;
            if (pred_k && true_k) {
                ++c.tp[k];
            } else if (pred_k) {
                ++c.fp[k];
            } else if (true_k) {
                ++c.fn[k];
            } else {
                ++c.tn[k];
            }
        }
    }
    return c;
}

MetricSet metrics(const ConfusionCounts& c) {
    const std::size_t k = c.n_classes();
    if (k == 0) throw ContractError("metrics: zero classes");
    MetricSet m;
    double acc = 0.0, prec = 0.0, rec = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double tp = static_cast<double>(c.tp[i]);
        const double fp = static_cast<double>(c.fp[i]);
        const double fn = static_cast<double>(c.fn[i]);
        const double tn = static_cast<double>(c.tn[i]);
        const double denom = tp + tn + fp + fn;
        if (denom == 0.0) {
            m.degenerate = true;
        } else {
            acc += (tp + tn) / denom;
        }
        if (tp + fp == 0.0) {
            m.degenerate = true;  // precision undefined, counted as 0
        } else {
            prec += tp / (tp + fp);
        }
        if (tp + fn == 0.0) {
            m.degenerate = true;
        } else {
            rec += tp / (tp + fn);
        }
    }
    m.accuracy = acc / static_cast<double>(k);
    m.precision = prec / static_cast<double>(k);
    m.recall = rec / static_cast<double>(k);
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

PrResult pr_curve_ap(const Tensor& scores, const std::vector<int>& truth) {
    const std::size_t n = scores.rows(), k = scores.cols();
    if (truth.size() != n) {
        throw ContractError("pr_curve_ap: " + std::to_string(truth.size()) + " labels for " +
                            std::to_string(n) + " rows");
    }
    if (!scores.all_finite()) throw ContractError("pr_curve_ap: non-finite score");

    PrResult out;
    out.per_class.resize(k);
    double ap_sum = 0.0;
    std::size_t defined = 0;

    for (std::size_t cls = 0; cls < k; ++cls) {
        PrCurve& curve = out.per_class[cls];
        std::size_t pos = 0;
        for (int t : truth) pos += static_cast<std::size_t>(t) == cls;
        if (pos == 0) {
            curve.defined = false;
            out.any_undefined = true;
            continue;
        }

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double sa = scores.at(a, cls), sb = scores.at(b, cls);
            if (sa != sb) return sa > sb;
            return a < b;
        });

        double ap = 0.0, prev_recall = 0.0;
        std::size_t tp = 0, fp = 0, i = 0;
        while (i < n) {
            // consume the whole tie group before emitting a point
            const double threshold = scores.at(order[i], cls);
            while (i < n && scores.at(order[i], cls) == threshold) {
                if (static_cast<std::size_t>(truth[order[i]]) == cls) {
                    ++tp;
                } else {
                    ++fp;
                }
                ++i;
            }
            const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
            const double recall = static_cast<double>(tp) / static_cast<double>(pos);
            curve.points.push_back({recall, precision});
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        curve.ap = ap;
        ap_sum += ap;
        ++defined;
    }
    out.macro_ap = defined > 0 ? ap_sum / static_cast<double>(defined) : 0.0;
    return out;
}

MetricSet gta(const std::vector<MetricSet>& per_center) {
    if (per_center.empty()) throw ContractError("gta: empty input");
    MetricSet m;
    for (const auto& c : per_center) {
        m.accuracy += c.accuracy;
        m.precision += c.precision;
        m.recall += c.recall;
        m.f1 += c.f1;
        m.degenerate = m.degenerate || c.degenerate;
    }
    const double n = static_cast<double>(per_center.size());
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
}

MetricStat mean_sd(const std::vector<double>& values) {
    MetricStat s;
    if (values.empty()) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(values.size());
    if (values.size() < 2) return s;
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return s;
}

namespace {

double metric_field(const MetricSet& m, std::size_t i) {
    switch (i) {
        case 0: return m.accuracy;
        case 1: return m.precision;
        case 2: return m.recall;
        default: return m.f1;
    }
}

} // namespace

void finalize_report(FoldReport& report) {
    const std::size_t n_centers = report.center_ids.size();
    report.per_center_stats.assign(n_centers, {});
    for (std::size_t c = 0; c < n_centers; ++c) {
        for (std::size_t f = 0; f < 4; ++f) {
            std::vector<double> values;
            for (const auto& fold : report.folds) values.push_back(metric_field(fold.per_center[c], f));
            report.per_center_stats[c][f] = mean_sd(values);
        }
    }
    for (std::size_t f = 0; f < 4; ++f) {
        std::vector<double> values;
        for (const auto& fold : report.folds) values.push_back(metric_field(fold.gta, f));
        report.gta_stats[f] = mean_sd(values);
    }
}

Tensor class_scores(const ModelSpec& spec, const ParamSet& w,
                    const std::vector<Sample>& samples) {
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Tensor x = flatten_images(samples, idx);
    Tensor lp = log_probs_from_logits(classify(encode(x, spec, w), spec, w));
    for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = std::exp(lp[i]);
    return lp;
}

FoldReport cross_validate(const ModelSpec& spec, const std::vector<CenterDataset>& datasets,
                          const FLConfig& cfg, std::size_t k, std::uint64_t seed,
                          const ParamSet* ssl_init, std::size_t jobs) {
    if (datasets.empty()) throw ContractError("cross_validate: no datasets");
    spec.validate();

    // center-sorted view; fold partitions are seeded per center
    std::vector<const CenterDataset*> ordered;
    for (const auto& d : datasets) ordered.push_back(&d);
    std::sort(ordered.begin(), ordered.end(), [](const CenterDataset* a, const CenterDataset* b) {
        return a->center_id < b->center_id;
    });

    std::vector<std::vector<FoldIndices>> splits;
    for (const CenterDataset* d : ordered) splits.push_back(kfold_split(*d, k, seed));

    FoldReport report;
    report.algorithm = algorithm_name(cfg.algorithm);
    for (const CenterDataset* d : ordered) report.center_ids.push_back(d->center_id);
    report.folds.resize(k);

    auto run_fold = [&](std::size_t fold) {
        std::vector<ClientData> clients;
        std::vector<EvalSet> eval_sets;
        for (std::size_t c = 0; c < ordered.size(); ++c) {
            const auto& [train_idx, test_idx] = splits[c][fold];
            ClientData client;
            client.center_id = ordered[c]->center_id;
            client.m_original = train_idx.size();
            std::vector<Sample> train_samples;
            train_samples.reserve(train_idx.size());
            for (std::size_t i : train_idx) train_samples.push_back(ordered[c]->samples[i]);
            client.train = augment_samples(train_samples);
            clients.push_back(std::move(client));

            EvalSet ev;
            ev.center_id = ordered[c]->center_id;
            for (std::size_t i : test_idx) ev.samples.push_back(ordered[c]->samples[i]);
            eval_sets.push_back(std::move(ev));
        }

        FLConfig fold_cfg = cfg;
        fold_cfg.seed = derive_seed(seed, {0xCF07, fold});
        FederationResult res = run_federation(spec, clients, fold_cfg, ssl_init, &eval_sets);

        FoldEntry entry;
        for (std::size_t c = 0; c < ordered.size(); ++c) {
            const std::vector<Sample>& test = eval_sets[c].samples;
            const ParamSet& model = res.per_client[c];
            std::vector<std::size_t> idx(test.size());
            std::iota(idx.begin(), idx.end(), 0);
            const Tensor x = flatten_images(test, idx);
            const std::vector<int> preds = argmax_rows(classify(encode(x, spec, model), spec, model));
            std::vector<int> truth = gather_labels(test, idx);
            entry.per_center.push_back(
                metrics(confusion(preds, truth, ordered[c]->n_classes)));
            entry.per_center_pr.push_back(pr_curve_ap(class_scores(spec, model, test), truth));
        }
        entry.gta = gta(entry.per_center);
        report.folds[fold] = std::move(entry);
    };

    if (jobs <= 1) {
        for (std::size_t fold = 0; fold < k; ++fold) run_fold(fold);
    } else {
        for (std::size_t wave = 0; wave < k; wave += jobs) {
            std::vector<std::future<void>> running;
            for (std::size_t fold = wave; fold < std::min(k, wave + jobs); ++fold) {
                running.push_back(std::async(std::launch::async, run_fold, fold));
            }
            for (auto& f : running) f.get();
        }
    }

    finalize_report(report);
    return report;
}

namespace {

nlohmann::json metricset_json(const MetricSet& m) {
    return {{"accuracy", m.accuracy},
            {"precision", m.precision},
            {"recall", m.recall},
            {"f1", m.f1},
            {"degenerate", m.degenerate}};
}

MetricSet metricset_from_json(const nlohmann::json& j) {
    MetricSet m;
    m.accuracy = j.at("accuracy").get<double>();
    m.precision = j.at("precision").get<double>();
    m.recall = j.at("recall").get<double>();
    m.f1 = j.at("f1").get<double>();
    m.degenerate = j.at("degenerate").get<bool>();
    return m;
}

nlohmann::json stat_json(const MetricStat& s) { return {{"mean", s.mean}, {"sd", s.sd}}; }

MetricStat stat_from_json(const nlohmann::json& j) {
    return {j.at("mean").get<double>(), j.at("sd").get<double>()};
}

} // namespace

void save_fold_report(const FoldReport& report, const std::string& path) {
    nlohmann::json j;
    j["algorithm"] = report.algorithm;
    j["averaging"] = "macro";
    j["center_ids"] = report.center_ids;
    auto& folds = j["folds"] = nlohmann::json::array();
    for (const auto& fold : report.folds) {
        nlohmann::json jf;
        auto& per_center = jf["per_center"] = nlohmann::json::array();
        for (std::size_t c = 0; c < fold.per_center.size(); ++c) {
            nlohmann::json jc = metricset_json(fold.per_center[c]);
            jc["center"] = report.center_ids[c];
            if (c < fold.per_center_pr.size()) {
                jc["macro_ap"] = fold.per_center_pr[c].macro_ap;
                auto& aps = jc["ap_per_class"] = nlohmann::json::array();
                for (const auto& curve : fold.per_center_pr[c].per_class) {
                    if (curve.defined) {
                        aps.push_back(curve.ap);
                    } else {
                        aps.push_back(nullptr);
                    }
                }
            }
            per_center.push_back(std::move(jc));
        }
        jf["gta"] = metricset_json(fold.gta);
        folds.push_back(std::move(jf));
    }
    auto& stats = j["per_center_stats"] = nlohmann::json::array();
    static const char* kMetricNames[4] = {"accuracy", "precision", "recall", "f1"};
    for (std::size_t c = 0; c < report.per_center_stats.size(); ++c) {
        nlohmann::json js;
        js["center"] = report.center_ids[c];
        for (std::size_t f = 0; f < 4; ++f) js[kMetricNames[f]] = stat_json(report.per_center_stats[c][f]);
        stats.push_back(std::move(js));
    }
    nlohmann::json jg;
    for (std::size_t f = 0; f < 4; ++f) jg[kMetricNames[f]] = stat_json(report.gta_stats[f]);
    j["gta_stats"] = std::move(jg);

    std::ofstream os(path);
    if (!os) throw DataError("fold report: cannot open '" + path + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw DataError("fold report: write failed on '" + path + "'");
}

FoldReport load_fold_report(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("fold report: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("fold report: '" + path + "' is not valid JSON: " + e.what());
    }
    FoldReport report;
    try {
        report.algorithm = j.at("algorithm").get<std::string>();
        report.center_ids = j.at("center_ids").get<std::vector<int>>();
        for (const auto& jf : j.at("folds")) {
            FoldEntry entry;
            for (const auto& jc : jf.at("per_center")) {
                entry.per_center.push_back(metricset_from_json(jc));
                PrResult pr;
                if (jc.contains("macro_ap")) {
                    pr.macro_ap = jc.at("macro_ap").get<double>();
                    for (const auto& ap : jc.at("ap_per_class")) {
                        PrCurve curve;
                        if (ap.is_null()) {
                            curve.defined = false;
                            pr.any_undefined = true;
                        } else {
                            curve.ap = ap.get<double>();
                        }
                        pr.per_class.push_back(std::move(curve));
                    }
                }
                entry.per_center_pr.push_back(std::move(pr));
            }
            entry.gta = metricset_from_json(jf.at("gta"));
            report.folds.push_back(std::move(entry));
        }
        static const char* kMetricNames[4] = {"accuracy", "precision", "recall", "f1"};
        for (const auto& js : j.at("per_center_stats")) {
            std::array<MetricStat, 4> row;
            for (std::size_t f = 0; f < 4; ++f) row[f] = stat_from_json(js.at(kMetricNames[f]));
            report.per_center_stats.push_back(row);
        }
        for (std::size_t f = 0; f < 4; ++f) {
            report.gta_stats[f] = stat_from_json(j.at("gta_stats").at(kMetricNames[f]));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("fold report: '" + path + "' has an unexpected layout: " + e.what());
    }
    return report;
}

void save_pr_points(const PrResult& pr, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("pr points: cannot open '" + path + "' for writing");
    for (std::size_t c = 0; c < pr.per_class.size(); ++c) {
        const PrCurve& curve = pr.per_class[c];
        os << "# class " << c;
        if (!curve.defined) {
            os << " (absent from truth; AP undefined)\n";
            continue;
        }
        char buf[64];
        std::snprintf(buf, sizeof(buf), " ap=%.17g\n", curve.ap);
        os << buf;
        for (const auto& p : curve.points) {
            std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", p.recall, p.precision);
            os << buf;
        }
    }
    if (!os) throw DataError("pr points: write failed on '" + path + "'");
}

} // namespace fedsim
