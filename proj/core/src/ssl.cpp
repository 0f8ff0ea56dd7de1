#include "fedsim/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/graph.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

const char* pretext_name(Pretext p) {
    switch (p) {
        case Pretext::Both: return "both";
        case Pretext::CeOnly: return "ce";
        case Pretext::MseOnly: return "mse";
    }
    return "?";
}

Pretext pretext_from_string(const std::string& s) {
    if (s == "both") return Pretext::Both;
    if (s == "ce") return Pretext::CeOnly;
    if (s == "mse") return Pretext::MseOnly;
    throw ConfigError("ssl.pretext: expected one of both|ce|mse, got '" + s + "'");
}

void SSLConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("ssl.learning_rate must be > 0");
    if (batch == 0) throw ConfigError("ssl.batch must be >= 1");
    if (corrupt_grid == 0) throw ConfigError("ssl.corrupt_grid must be >= 1");
}

double ce_loss(const Tensor& log_probs, const std::vector<int>& labels) {
    const std::size_t rows = log_probs.rows(), cols = log_probs.cols();
    if (labels.size() != rows) {
        throw ContractError("ce_loss: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(rows) + " rows");
    }
    for (std::size_t r = 0; r < rows; ++r) {
        double psum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) psum += std::exp(log_probs.at(r, c));
        if (std::abs(psum - 1.0) > 1e-9) {
            throw ContractError("ce_loss: row " + std::to_string(r) +
                                " is not a log-probability vector (sums to " +
                                std::to_string(psum) + ")");
        }
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
            throw ContractError("ce_loss: label " + std::to_string(labels[r]) +
                                " out of range [0, " + std::to_string(cols) + ")");
        }
    }
    double s = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        s += log_probs.at(r, static_cast<std::size_t>(labels[r]));
    }
    return -s / static_cast<double>(rows);
}

double mse_loss(const Tensor& restored, const Tensor& targets) {
    if (!restored.same_shape(targets)) {
        throw StructuralError("mse_loss: shape mismatch " + restored.shape_str() + " vs " +
                              targets.shape_str());
    }
    if (restored.rank() == 0) throw StructuralError("mse_loss: inputs must be batched");
    double s = 0.0;
    for (std::size_t i = 0; i < restored.size(); ++i) {
        const double d = restored[i] - targets[i];
        s += d * d;
    }
    return s / static_cast<double>(restored.dim(0));
}

double ssl_loss(double ce, double mse) { return ce + mse; }

Tensor log_probs_from_probs(const Tensor& probs) {
    Tensor out = probs;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(out[i], 1e-12));
    return out;
}

Tensor log_probs_from_logits(const Tensor& logits) {
    const std::size_t rows = logits.rows(), cols = logits.cols();
    const double log_floor = std::log(1e-12);
    Tensor out = logits;
    for (std::size_t r = 0; r < rows; ++r) {
        double m = out.at(r, 0);
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, out.at(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(out.at(r, c) - m);
        const double lse = m + std::log(s);
        for (std::size_t c = 0; c < cols; ++c) {
            out.at(r, c) = std::max(out.at(r, c) - lse, log_floor);
        }
    }
    return out;
}

namespace {

struct PooledPseudo {
    // references into the caller's per-center lists
    struct Item {
        const PseudoSample* sample;
        int center_label;  // contiguous center index, the self-supervised label
    };
    std::vector<Item> train;
    std::vector<Item> holdout;
    std::size_t n_centers = 0;
};

PooledPseudo pool_and_split(const std::vector<std::vector<PseudoSample>>& pseudo_sets,
                            std::uint64_t seed) {
    std::vector<const std::vector<PseudoSample>*> sets;
    for (const auto& s : pseudo_sets) {
        if (s.empty()) throw ContractError("pretrain: a center contributed no pseudo images");
        sets.push_back(&s);
    }
    // canonical center order, independent of the caller's list order
    std::sort(sets.begin(), sets.end(), [](const auto* a, const auto* b) {
        return a->front().center_id < b->front().center_id;
    });
    for (std::size_t i = 1; i < sets.size(); ++i) {
        if (sets[i]->front().center_id == sets[i - 1]->front().center_id) {
            throw ContractError("pretrain: two pseudo sets share center id " +
                                std::to_string(sets[i]->front().center_id));
        }
    }

    PooledPseudo out;
    out.n_centers = sets.size();
    for (std::size_t c = 0; c < sets.size(); ++c) {
        const auto& list = *sets[c];
        std::vector<std::size_t> order(list.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(seed, {0x55D0, static_cast<std::uint64_t>(list.front().center_id)}));
        rng.shuffle(order);
        const std::size_t n_holdout = list.size() / 5;  // 80/20 per center
        for (std::size_t i = 0; i < order.size(); ++i) {
            PooledPseudo::Item item{&list[order[i]], static_cast<int>(c)};
            if (i < order.size() - n_holdout) {
                out.train.push_back(item);
            } else {
                out.holdout.push_back(item);
            }
        }
    }
    return out;
}

double holdout_accuracy(const std::vector<PooledPseudo::Item>& holdout, const ModelSpec& spec,
                        const ParamSet& weights, const SSLConfig& cfg, std::uint64_t seed,
                        std::size_t epoch) {
    if (holdout.empty()) return 0.0;
    const std::size_t pixels = spec.input_size();
    Tensor x({holdout.size(), pixels});
    std::vector<int> labels(holdout.size());
    for (std::size_t i = 0; i < holdout.size(); ++i) {
        Tensor corrupted = corrupt(holdout[i].sample->image, cfg.corrupt_grid, cfg.corrupt_swaps,
                                   derive_seed(seed, {0x401D, epoch, i}));
        std::memcpy(x.data() + i * pixels, corrupted.data(), pixels * sizeof(double));
        labels[i] = holdout[i].center_label;
    }
    const Tensor logits = center_classify(encode(x, spec, weights), spec, weights);
    const std::vector<int> preds = argmax_rows(logits);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// one reusable training graph per batch size
struct SSLGraph {
    Graph g;
    NodeId x, targets, lce, lmse, loss;
};

SSLGraph build_ssl_graph(const ModelSpec& spec, const ParamSet& weights, std::size_t batch,
                         Pretext pretext) {
    SSLGraph sg;
    ModelGraph m(sg.g, spec, weights, /*trainable=*/true);
    m.register_all();
    const std::size_t pixels = spec.input_size();
    sg.x = sg.g.constant(Tensor::zeros({batch, pixels}), "corrupted");
    sg.targets = sg.g.constant(Tensor::zeros({batch, pixels}), "targets");
    NodeId rep = m.encoder(sg.x);
    NodeId logits = m.center_head(rep);
    NodeId restored = m.restorer(rep);
    sg.lce = sg.g.nll_loss(sg.g.log_softmax(logits), std::vector<int>(batch, 0));
    sg.lmse = sg.g.scale(sg.g.sum(sg.g.square(sg.g.sub(restored, sg.targets))),
                         1.0 / static_cast<double>(batch));
    switch (pretext) {
        case Pretext::Both: sg.loss = sg.g.add(sg.lce, sg.lmse); break;
        case Pretext::CeOnly: sg.loss = sg.lce; break;
        case Pretext::MseOnly: sg.loss = sg.lmse; break;
    }
    return sg;
}

} // namespace

PretrainResult pretrain(const std::vector<std::vector<PseudoSample>>& pseudo_sets,
                        const ModelSpec& spec, const SSLConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    spec.validate();
    if (pseudo_sets.size() < 2) {
        throw ContractError("pretrain: needs >= 2 centers; a single center makes the "
                            "source-center classification task degenerate");
    }

    PretrainResult result;
    result.weights = init_weights(spec, seed);
    if (cfg.epochs == 0) return result;

    PooledPseudo pool = pool_and_split(pseudo_sets, seed);
    if (pool.n_centers > spec.n_centers) {
        throw ContractError("pretrain: " + std::to_string(pool.n_centers) +
                            " centers exceed the model's center-head width " +
                            std::to_string(spec.n_centers));
    }
    if (pool.train.empty()) throw ContractError("pretrain: no training samples after holdout");

    const std::size_t pixels = spec.input_size();
    std::map<std::size_t, SSLGraph> graphs;  // keyed by batch size

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(pool.train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle_rng(derive_seed(seed, {0xE0C4, epoch}));
        shuffle_rng.shuffle(order);

        double ce_sum = 0.0, mse_sum = 0.0;
        std::size_t steps = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t b = std::min(cfg.batch, order.size() - start);
            auto it = graphs.find(b);
            if (it == graphs.end()) {
                it = graphs.emplace(b, build_ssl_graph(spec, result.weights, b, cfg.pretext)).first;
            }
            SSLGraph& sg = it->second;

            Tensor xb({b, pixels});
            Tensor tb({b, pixels});
            std::vector<int> labels(b);
            for (std::size_t i = 0; i < b; ++i) {
                const auto& item = pool.train[order[start + i]];
                Tensor corrupted = corrupt(item.sample->image, cfg.corrupt_grid, cfg.corrupt_swaps,
                                           derive_seed(seed, {0xC088, epoch, start + i}));
                std::memcpy(xb.data() + i * pixels, corrupted.data(), pixels * sizeof(double));
                std::memcpy(tb.data() + i * pixels, item.sample->image.data(),
                            pixels * sizeof(double));
                labels[i] = item.center_label;
            }
            sg.g.set_value(sg.x, std::move(xb));
            sg.g.set_value(sg.targets, std::move(tb));
            sg.g.set_labels(sg.lce, std::move(labels));

            sg.g.evaluate(std::max(sg.lce, sg.lmse));
            ce_sum += sg.g.value(sg.lce)[0];
            mse_sum += sg.g.value(sg.lmse)[0];
            ++steps;

            ParamSet grads = sg.g.gradients(sg.loss);
            for (auto& [bsize, graph] : graphs) graph.g.apply_sgd(grads, cfg.learning_rate);
        }

        // graphs of every batch size share the same parameter values; read back
        result.weights = graphs.begin()->second.g.current_params();

        SSLEpochRecord rec;
        rec.epoch = epoch + 1;
        rec.l_ce = ce_sum / static_cast<double>(steps);
        rec.l_mse = mse_sum / static_cast<double>(steps);
        rec.l_ssl = ssl_loss(rec.l_ce, rec.l_mse);
        rec.holdout_acc = holdout_accuracy(pool.holdout, spec, result.weights, cfg, seed, epoch);
        result.report.epochs.push_back(rec);
    }

    return result;
}

void save_ssl_report(const SSLReport& report, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("ssl report: cannot open '" + path + "' for writing");
    for (const auto& rec : report.epochs) {
        nlohmann::json j;
        j["epoch"] = rec.epoch;
        j["l_ce"] = rec.l_ce;
        j["l_mse"] = rec.l_mse;
        j["l_ssl"] = rec.l_ssl;
        j["holdout_acc"] = rec.holdout_acc;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("ssl report: write failed on '" + path + "'");
}

} // namespace fedsim
