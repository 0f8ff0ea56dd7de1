#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/params.hpp"
#include "fedsim/synth.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class Algorithm { LocalOnly, FedAvg, FedProx, FlBt };

const char* algorithm_name(Algorithm a);
Algorithm algorithm_from_string(const std::string& s);

struct FLConfig {
    std::size_t rounds = 300;        // T
    std::size_t local_epochs = 1;    // E
    double learning_rate = 0.001;
    double mu = 0.01;                // contrastive-loss weight
    double lambda = 0.005;           // redundancy-reduction weight
    std::size_t batch = 4;
    Algorithm algorithm = Algorithm::FlBt;
    double rho = 0.01;               // FedProx proximal weight
    bool bt_centered = false;        // opt-in: subtract per-column batch means first
    std::size_t eval_every = 1;      // 0 disables per-round eval
    std::uint64_t seed = 1;
    std::string ssl_init;            // pretrained checkpoint path; resolved by the CLI

    void validate() const;
};

// Cross-correlation between two projection batches along the batch dimension.
// Every entry lies in [-1 - 1e-9, 1 + 1e-9]; equal inputs give a symmetric
// matrix with unit diagonal (up to the 1e-12 denominator guard).
struct CrossCorr {
    Tensor matrix;  // (d x d)
};

// C_ij = sum_b zl[b,i] zg[b,j] / (||zl col i|| ||zg col j|| + 1e-12).
// Not mean-centered; needs batch >= 2.
CrossCorr cross_correlation(const Tensor& z_local, const Tensor& z_glob);

// sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2
double bt_loss(const CrossCorr& c, double lambda);

// cross-entropy over class logits; same CE kernel as the pretext loss
double sup_loss(const Tensor& logits, const std::vector<int>& labels);

struct ObjectiveValue {
    double total = 0.0;
    double l_sup = 0.0;
    double l_con = 0.0;  // weighted auxiliary term (mu * BT, or the prox penalty)
    ParamSet grads;      // w.r.t. w_i only; w_g never receives gradients
};

// loss = sup + mu * bt(cc(proj_i(enc_i(x)), proj_g(enc_g(x))), lambda);
// w_g enters the computation as constants.
ObjectiveValue local_objective(const ModelSpec& spec, const ParamSet& w_i, const ParamSet& w_g,
                               const Tensor& x, const std::vector<int>& y, double mu,
                               double lambda, bool bt_centered = false);

// local_only / fedavg: sup only; fedprox: sup + (rho/2) ||w_i - w_g||^2
ObjectiveValue baseline_objective(Algorithm kind, const ModelSpec& spec, const ParamSet& w_i,
                                  const ParamSet& w_g, const Tensor& x, const std::vector<int>& y,
                                  double rho);

struct ClientData {
    int center_id = 0;
    std::vector<Sample> train;   // materialized (augmented) partition
    std::size_t m_original = 0;  // pre-augmentation sample count, the FedAvg weight
};

struct ClientState {
    int center_id = 0;
    std::vector<Sample> train;
    std::size_t m_original = 0;
    ParamSet weights;  // current local model
};

struct LocalTrainStats {
    double sup_sum = 0.0, con_sum = 0.0, total_sum = 0.0;
    std::size_t steps = 0;
};

// Algorithm: w_i <- w_g, then E epochs of seeded-order SGD steps on the
// configured objective. Batch order depends only on (seed, center, round,
// epoch); trailing batches of size 1 are dropped for every algorithm so the
// schedule never violates the correlation precondition. Returns the updated
// local weights; w_g is untouched.
ParamSet party_local_training(const ClientState& client, const ParamSet& w_g,
                              const ModelSpec& spec, const FLConfig& cfg, std::size_t round,
                              LocalTrainStats* stats = nullptr);

// size-weighted FedAvg mean, accumulated in client-index order; a single
// client or identical inputs come back bit-identical
ParamSet aggregate(const std::vector<ParamSet>& weights, const std::vector<std::size_t>& sizes);

struct ClientLoss {
    int center_id = 0;
    double l_sup = 0.0, l_con = 0.0, l_total = 0.0;  // means over the round's steps
};

struct RoundRecord {
    std::vector<ClientLoss> clients;
    double eval_acc = -1.0;  // mean per-center accuracy; -1 when not evaluated
    std::uint64_t global_checksum = 0;
    double wall_ms = 0.0;  // in-memory only, never serialized
};

struct RunHistory {
    std::vector<RoundRecord> rounds;
};

struct EvalSet {
    int center_id = 0;
    std::vector<Sample> samples;
};

struct FederationResult {
    ParamSet global;
    std::vector<ParamSet> per_client;  // final local models, client-index order
    RunHistory history;
};

// invoked with (round, aggregated global) after every round when set
using RoundSink = std::function<void(std::size_t, const ParamSet&)>;

// The server loop: broadcast, local training for every client, aggregation,
// per-round bookkeeping. Deterministic per cfg.seed regardless of scheduling;
// a failed client aborts the round with its center id attached. local_only
// skips the broadcast and deployment; its global slot holds the record-only
// size-weighted average of the local models.
FederationResult run_federation(const ModelSpec& spec, const std::vector<ClientData>& clients,
                                const FLConfig& cfg, const ParamSet* ssl_init = nullptr,
                                const std::vector<EvalSet>* eval_sets = nullptr,
                                const RoundSink& round_sink = {});

void save_history(const RunHistory& history, const std::string& path);

// fraction of samples whose argmax class matches the label
double accuracy(const ModelSpec& spec, const ParamSet& w, const std::vector<Sample>& samples);

} // namespace fedsim
