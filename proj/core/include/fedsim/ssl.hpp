#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/params.hpp"
#include "fedsim/synth.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

// Which pretext losses drive pretraining. CeOnly / MseOnly realize the
// single-task ablations; Both is the stock multi-task setting.
enum class Pretext { Both, CeOnly, MseOnly };

const char* pretext_name(Pretext p);
Pretext pretext_from_string(const std::string& s);

struct SSLConfig {
    std::size_t epochs = 20;
    double learning_rate = 0.001;
    std::size_t batch = 4;
    std::size_t corrupt_grid = 4;
    std::size_t corrupt_swaps = 4;
    Pretext pretext = Pretext::Both;
    void validate() const;
};

struct SSLEpochRecord {
    std::size_t epoch = 0;
    double l_ce = 0.0;
    double l_mse = 0.0;
    double l_ssl = 0.0;  // always l_ce + l_mse
    double holdout_acc = 0.0;
};

struct SSLReport {
    std::vector<SSLEpochRecord> epochs;
};

// -(1/N) sum_i lp[i, y_i]; rows of exp(lp) must sum to 1 within 1e-9.
double ce_loss(const Tensor& log_probs, const std::vector<int>& labels);

// (1/N) sum_i ||restored_i - target_i||^2, N = batch rows.
double mse_loss(const Tensor& restored, const Tensor& targets);

// the two pretext losses combine by plain unweighted addition
double ssl_loss(double ce, double mse);

// log(max(p, 1e-12)) per entry; the clamp keeps one-hot rows finite
Tensor log_probs_from_probs(const Tensor& probs);

// row-wise stable log-softmax with the same 1e-12 probability clamp the
// graph kernel applies
Tensor log_probs_from_logits(const Tensor& logits);

struct PretrainResult {
    ParamSet weights;
    SSLReport report;
};

// Multi-task pretraining over the pooled pseudo sets: per batch the corrupted
// images feed the shared encoder, whose representation drives both the
// source-center head (CE) and the restoration head (MSE against the clean
// originals). One combined backward pass per batch, SGD updates, 80/20
// per-center holdout for the reported accuracy. Deterministic per seed;
// requires at least two centers.
PretrainResult pretrain(const std::vector<std::vector<PseudoSample>>& pseudo_sets,
                        const ModelSpec& spec, const SSLConfig& cfg, std::uint64_t seed);

void save_ssl_report(const SSLReport& report, const std::string& path);

} // namespace fedsim
