#include "fedsim/fl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "fedsim/errors.hpp"
#include "fedsim/graph.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/ssl.hpp"

namespace fedsim {

const char* algorithm_name(Algorithm a) {
    switch (a) {
        case Algorithm::LocalOnly: return "local_only";
        case Algorithm::FedAvg: return "fedavg";
        case Algorithm::FedProx: return "fedprox";
        case Algorithm::FlBt: return "fl_bt";
    }
    return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
    if (s == "local_only") return Algorithm::LocalOnly;
    if (s == "fedavg") return Algorithm::FedAvg;
    if (s == "fedprox") return Algorithm::FedProx;
    if (s == "fl_bt") return Algorithm::FlBt;
    throw ConfigError("fl.algorithm: expected local_only|fedavg|fedprox|fl_bt, got '" + s + "'");
}

void FLConfig::validate() const {
    if (learning_rate <= 0.0) throw ConfigError("fl.learning_rate must be > 0");
    if (mu < 0.0) throw ConfigError("fl.mu must be >= 0");
    if (lambda < 0.0) throw ConfigError("fl.lambda must be >= 0");
    if (rho < 0.0) throw ConfigError("fl.rho must be >= 0");
    if (batch == 0) throw ConfigError("fl.batch must be >= 1");
}

CrossCorr cross_correlation(const Tensor& z_local, const Tensor& z_glob) {
    if (!z_local.same_shape(z_glob) || z_local.rank() != 2) {
        throw StructuralError("cross_correlation: inputs must share a (batch, d) shape, got " +
                              z_local.shape_str() + " vs " + z_glob.shape_str());
    }
    const std::size_t b = z_local.rows(), d = z_local.cols();
    if (b < 2) {
        throw ContractError("cross_correlation: batch of " + std::to_string(b) +
                            " is vacuous, need >= 2");
    }
    std::vector<double> nl(d, 0.0), ng(d, 0.0);
    for (std::size_t r = 0; r < b; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
            nl[c] += z_local.at(r, c) * z_local.at(r, c);
            ng[c] += z_glob.at(r, c) * z_glob.at(r, c);
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        nl[c] = std::sqrt(nl[c]);
        ng[c] = std::sqrt(ng[c]);
    }
    CrossCorr out{Tensor({d, d})};
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            double num = 0.0;
            for (std::size_t r = 0; r < b; ++r) num += z_local.at(r, i) * z_glob.at(r, j);
            out.matrix.at(i, j) = num / (nl[i] * ng[j] + 1e-12);
        }
    }
    return out;
}

double bt_loss(const CrossCorr& c, double lambda) {
    const std::size_t d = c.matrix.rows();
    if (d != c.matrix.cols()) {
        throw StructuralError("bt_loss: cross-correlation matrix must be square, got " +
                              c.matrix.shape_str());
    }
    double diag = 0.0, off = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double v = c.matrix.at(i, j);
            if (i == j) {
                diag += (1.0 - v) * (1.0 - v);
            } else {
                off += v * v;
            }
        }
    }
    return diag + lambda * off;
}

double sup_loss(const Tensor& logits, const std::vector<int>& labels) {
    return ce_loss(log_probs_from_logits(logits), labels);
}

namespace {

// what the local objective includes beyond the supervised term
struct ObjectivePlan {
    bool use_bt = false;
    double mu = 0.0;
    double lambda = 0.0;
    bool bt_centered = false;
    bool use_prox = false;
    double rho = 0.0;
};

ObjectivePlan plan_for(Algorithm algorithm, const FLConfig& cfg) {
    ObjectivePlan plan;
    switch (algorithm) {
        case Algorithm::LocalOnly:
        case Algorithm::FedAvg:
            break;
        case Algorithm::FedProx:
            plan.use_prox = cfg.rho > 0.0;
            plan.rho = cfg.rho;
            break;
        case Algorithm::FlBt:
            plan.use_bt = cfg.mu > 0.0;
            plan.mu = cfg.mu;
            plan.lambda = cfg.lambda;
            plan.bt_centered = cfg.bt_centered;
            break;
    }
    return plan;
}

struct TrainGraph {
    Graph g;
    NodeId x = -1;
    NodeId nll = -1;   // supervised scalar; labels rebind here
    NodeId z_glob = -1;  // constant holding the global projections (BT only)
    NodeId con = -1;   // weighted auxiliary scalar, -1 when absent
    NodeId total = -1;
};

NodeId center_columns(Graph& g, NodeId z, std::size_t batch) {
    NodeId mean = g.scale(g.col_sum(z), 1.0 / static_cast<double>(batch));
    return g.add_rowvec(z, g.scale(mean, -1.0));
}

// The supervised part is built first and identically for every plan, so a
// plan with no extra terms produces a bit-identical computation.
TrainGraph build_train_graph(const ModelSpec& spec, const ParamSet& w_start, const ParamSet& w_g,
                             std::size_t batch, const ObjectivePlan& plan) {
    TrainGraph tg;
    ModelGraph local(tg.g, spec, w_start, /*trainable=*/true);
    local.register_all();
    tg.x = tg.g.constant(Tensor::zeros({batch, spec.input_size()}), "x");
    NodeId rep = local.encoder(tg.x);
    NodeId logits = local.classifier(rep);
    tg.nll = tg.g.nll_loss(tg.g.log_softmax(logits), std::vector<int>(batch, 0));
    tg.total = tg.nll;

    if (plan.use_bt) {
        if (batch < 2) {
            throw ContractError("local_objective: batch of " + std::to_string(batch) +
                                " with mu > 0; the cross-correlation needs >= 2 samples");
        }
        const std::size_t d = spec.proj_dim;
        NodeId z_local = local.projector(rep);
        tg.z_glob = tg.g.constant(Tensor::zeros({batch, d}), "z_glob");
        NodeId zl = z_local, zg = tg.z_glob;
        if (plan.bt_centered) {
            zl = center_columns(tg.g, zl, batch);
            zg = center_columns(tg.g, zg, batch);
        }
        NodeId num = tg.g.matmul(tg.g.transpose(zl), zg);
        NodeId den = tg.g.add_scalar(
            tg.g.matmul(tg.g.reshape(tg.g.col_norm(zl), {d, 1}),
                        tg.g.reshape(tg.g.col_norm(zg), {1, d})),
            1e-12);
        NodeId corr = tg.g.divide(num, den);

        Tensor diag_mask({d, d});
        Tensor off_mask = Tensor::full({d, d}, 1.0);
        for (std::size_t i = 0; i < d; ++i) {
            diag_mask.at(i, i) = 1.0;
            off_mask.at(i, i) = 0.0;
        }
        NodeId ones = tg.g.constant(Tensor::full({d, d}, 1.0));
        NodeId diag_term = tg.g.sum(
            tg.g.square(tg.g.mul(tg.g.constant(std::move(diag_mask)), tg.g.sub(ones, corr))));
        NodeId off_term =
            tg.g.sum(tg.g.square(tg.g.mul(tg.g.constant(std::move(off_mask)), corr)));
        NodeId bt = tg.g.add(diag_term, tg.g.scale(off_term, plan.lambda));
        tg.con = tg.g.scale(bt, plan.mu);
        tg.total = tg.g.add(tg.nll, tg.con);
    }

    if (plan.use_prox) {
        NodeId penalty = -1;
        for (const auto& [name, t] : w_start.entries()) {
            NodeId diff = tg.g.sub(local.weight(name), tg.g.constant(w_g.get(name), name + "@g"));
            NodeId term = tg.g.sum(tg.g.square(diff));
            penalty = penalty < 0 ? term : tg.g.add(penalty, term);
        }
        tg.con = tg.g.scale(penalty, plan.rho / 2.0);
        tg.total = tg.g.add(tg.nll, tg.con);
    }
    return tg;
}

// forward-only global model: x -> projector(encoder(x))
struct GlobGraph {
    Graph g;
    NodeId x = -1;
    NodeId z = -1;
};

GlobGraph build_glob_graph(const ModelSpec& spec, const ParamSet& w_g, std::size_t batch) {
    GlobGraph gg;
    ModelGraph glob(gg.g, spec, w_g, /*trainable=*/false);
    gg.x = gg.g.constant(Tensor::zeros({batch, spec.input_size()}), "x");
    gg.z = glob.projector(glob.encoder(gg.x));
    return gg;
}

ObjectiveValue evaluate_objective(const ModelSpec& spec, const ParamSet& w_i, const ParamSet& w_g,
                                  const Tensor& x, const std::vector<int>& y,
                                  const ObjectivePlan& plan) {
    if (x.rank() != 2) {
        throw StructuralError("objective: batch must be (n, pixels), got " + x.shape_str());
    }
    const std::size_t batch = x.rows();
    TrainGraph tg = build_train_graph(spec, w_i, w_g, batch, plan);
    tg.g.set_value(tg.x, x);
    tg.g.set_labels(tg.nll, y);
    if (tg.z_glob >= 0) {
        GlobGraph gg = build_glob_graph(spec, w_g, batch);
        gg.g.set_value(gg.x, x);
        tg.g.set_value(tg.z_glob, gg.g.evaluate(gg.z));
    }
    ObjectiveValue out;
    out.grads = tg.g.gradients(tg.total);
    out.total = tg.g.value(tg.total)[0];
    out.l_sup = tg.g.value(tg.nll)[0];
    out.l_con = tg.con >= 0 ? tg.g.value(tg.con)[0] : 0.0;
    return out;
}

} // namespace

ObjectiveValue local_objective(const ModelSpec& spec, const ParamSet& w_i, const ParamSet& w_g,
                               const Tensor& x, const std::vector<int>& y, double mu,
                               double lambda, bool bt_centered) {
    ObjectivePlan plan;
    plan.use_bt = mu > 0.0;
    plan.mu = mu;
    plan.lambda = lambda;
    plan.bt_centered = bt_centered;
    return evaluate_objective(spec, w_i, w_g, x, y, plan);
}

ObjectiveValue baseline_objective(Algorithm kind, const ModelSpec& spec, const ParamSet& w_i,
                                  const ParamSet& w_g, const Tensor& x, const std::vector<int>& y,
                                  double rho) {
    if (kind == Algorithm::FlBt) {
        throw ContractError("baseline_objective: fl_bt is not a baseline; use local_objective");
    }
    ObjectivePlan plan;
    if (kind == Algorithm::FedProx) {
        plan.use_prox = rho > 0.0;
        plan.rho = rho;
    }
    return evaluate_objective(spec, w_i, w_g, x, y, plan);
}

ParamSet party_local_training(const ClientState& client, const ParamSet& w_g,
                              const ModelSpec& spec, const FLConfig& cfg, std::size_t round,
                              LocalTrainStats* stats) {
    if (client.train.empty()) {
        throw ContractError("party_local_training: empty local dataset for center " +
                            std::to_string(client.center_id));
    }
    if (cfg.local_epochs == 0) return w_g;

    const ObjectivePlan plan = plan_for(cfg.algorithm, cfg);
    const std::size_t pixels = spec.input_size();

    std::map<std::size_t, TrainGraph> train_graphs;  // by batch size
    std::map<std::size_t, GlobGraph> glob_graphs;

    for (std::size_t epoch = 0; epoch < cfg.local_epochs; ++epoch) {
        std::vector<std::size_t> order(client.train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(cfg.seed, {0xF1, static_cast<std::uint64_t>(client.center_id), round,
                                       epoch}));
        rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t b = std::min(cfg.batch, order.size() - start);
            if (b == 1 && cfg.batch > 1) continue;  // uniform tail rule across algorithms
            if (b == 1 && plan.use_bt) {
                throw ContractError("party_local_training: batch size 1 with mu > 0");
            }

            auto it = train_graphs.find(b);
            if (it == train_graphs.end()) {
                // first touch of this batch size: weights start from the
                // current state (w_g on the very first step)
                const ParamSet w_start = train_graphs.empty()
                                             ? w_g
                                             : train_graphs.begin()->second.g.current_params();
                it = train_graphs.emplace(b, build_train_graph(spec, w_start, w_g, b, plan)).first;
                if (plan.use_bt) glob_graphs.emplace(b, build_glob_graph(spec, w_g, b));
            }
            TrainGraph& tg = it->second;

            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(start + b));
            Tensor xb = flatten_images(client.train, idx);
            std::vector<int> yb = gather_labels(client.train, idx);
            tg.g.set_value(tg.x, xb);
            tg.g.set_labels(tg.nll, std::move(yb));
            if (tg.z_glob >= 0) {
                GlobGraph& gg = glob_graphs.at(b);
                gg.g.set_value(gg.x, std::move(xb));
                tg.g.set_value(tg.z_glob, gg.g.evaluate(gg.z));
            }

            ParamSet grads = tg.g.gradients(tg.total);
            if (stats) {
                stats->sup_sum += tg.g.value(tg.nll)[0];
                stats->con_sum += tg.con >= 0 ? tg.g.value(tg.con)[0] : 0.0;
                stats->total_sum += tg.g.value(tg.total)[0];
                stats->steps += 1;
            }
            for (auto& [bsize, graph] : train_graphs) {
                graph.g.apply_sgd(grads, cfg.learning_rate);
            }
        }
    }

    if (train_graphs.empty()) return w_g;  // every batch fell to the tail rule
    return train_graphs.begin()->second.g.current_params();
}

ParamSet aggregate(const std::vector<ParamSet>& weights, const std::vector<std::size_t>& sizes) {
    if (weights.empty()) throw StructuralError("aggregate: no client weights");
    if (weights.size() != sizes.size()) {
        throw StructuralError("aggregate: " + std::to_string(weights.size()) + " weight sets vs " +
                              std::to_string(sizes.size()) + " sizes");
    }
    std::size_t total = 0;
    for (std::size_t m : sizes) {
        if (m == 0) throw ContractError("aggregate: client sizes must be positive");
        total += m;
    }
    std::vector<const ParamSet*> ptrs;
    std::vector<double> alphas;
    ptrs.reserve(weights.size());
    alphas.reserve(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        ptrs.push_back(&weights[i]);
        alphas.push_back(static_cast<double>(sizes[i]) / static_cast<double>(total));
    }
    return linear_combination(ptrs, alphas);
}

namespace {

template <class Fn>
auto with_center_tag(int center_id, Fn&& fn) {
    const std::string tag = "center " + std::to_string(center_id) + ": ";
    try {
        return fn();
    } catch (const StructuralError& e) {
        throw StructuralError(tag + e.what());
    } catch (const ContractError& e) {
        throw ContractError(tag + e.what());
    } catch (const NumericError& e) {
        throw NumericError(tag + e.what());
    } catch (const DataError& e) {
        throw DataError(tag + e.what());
    }
}

} // namespace

double accuracy(const ModelSpec& spec, const ParamSet& w, const std::vector<Sample>& samples) {
    if (samples.empty()) throw ContractError("accuracy: empty sample set");
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    const Tensor x = flatten_images(samples, idx);
    const std::vector<int> preds = argmax_rows(classify(encode(x, spec, w), spec, w));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) hits += preds[i] == samples[i].label;
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

FederationResult run_federation(const ModelSpec& spec, const std::vector<ClientData>& clients,
                                const FLConfig& cfg, const ParamSet* ssl_init,
                                const std::vector<EvalSet>* eval_sets,
                                const RoundSink& round_sink) {
    cfg.validate();
    spec.validate();
    if (clients.empty()) throw ContractError("run_federation: no clients");

    // canonical client order
    std::vector<const ClientData*> ordered;
    for (const auto& c : clients) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(),
              [](const ClientData* a, const ClientData* b) { return a->center_id < b->center_id; });
    for (std::size_t i = 1; i < ordered.size(); ++i) {
        if (ordered[i]->center_id == ordered[i - 1]->center_id) {
            throw ContractError("run_federation: duplicate center id " +
                                std::to_string(ordered[i]->center_id));
        }
    }

    ParamSet global = init_weights(spec, cfg.seed);
    if (ssl_init != nullptr) {
        // pretrained encoder initializes the backbone; heads stay fresh
        global.replace_prefix(seg::encoder, *ssl_init);
    }

    std::vector<ClientState> states;
    states.reserve(ordered.size());
    for (const ClientData* c : ordered) {
        states.push_back({c->center_id, c->train, c->m_original, global});
    }

    FederationResult result;
    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        const auto t0 = std::chrono::steady_clock::now();
        RoundRecord record;

        for (auto& state : states) {
            const ParamSet& base =
                cfg.algorithm == Algorithm::LocalOnly ? state.weights : global;
            LocalTrainStats st;
            ParamSet updated = with_center_tag(state.center_id, [&] {
                return party_local_training(state, base, spec, cfg, round, &st);
            });
            state.weights = std::move(updated);
            ClientLoss loss;
            loss.center_id = state.center_id;
            if (st.steps > 0) {
                loss.l_sup = st.sup_sum / static_cast<double>(st.steps);
                loss.l_con = st.con_sum / static_cast<double>(st.steps);
                loss.l_total = st.total_sum / static_cast<double>(st.steps);
            }
            record.clients.push_back(loss);
        }

        std::vector<ParamSet> locals;
        std::vector<std::size_t> sizes;
        for (const auto& state : states) {
            locals.push_back(state.weights);
            sizes.push_back(state.m_original);
        }
        ParamSet averaged = aggregate(locals, sizes);
        if (cfg.algorithm != Algorithm::LocalOnly) {
            global = std::move(averaged);  // deployed to every client next round
        } else {
            global = std::move(averaged);  // record-only; locals keep diverging
        }
        record.global_checksum = params_checksum(global);
        if (round_sink) round_sink(round, global);

        if (eval_sets != nullptr && cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0) {
            double acc_sum = 0.0;
            std::size_t n_eval = 0;
            for (const auto& ev : *eval_sets) {
                if (ev.samples.empty()) continue;
                const ParamSet* model = &global;
                if (cfg.algorithm == Algorithm::LocalOnly) {
                    model = nullptr;
                    for (const auto& state : states) {
                        if (state.center_id == ev.center_id) model = &state.weights;
                    }
                    if (model == nullptr) continue;
                }
                acc_sum += accuracy(spec, *model, ev.samples);
                ++n_eval;
            }
            if (n_eval > 0) record.eval_acc = acc_sum / static_cast<double>(n_eval);
        }

        record.wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
        result.history.rounds.push_back(std::move(record));
    }

    if (cfg.algorithm == Algorithm::LocalOnly) {
        for (const auto& state : states) result.per_client.push_back(state.weights);
    } else {
        for (std::size_t i = 0; i < states.size(); ++i) result.per_client.push_back(global);
    }
    result.global = std::move(global);
    return result;
}

void save_history(const RunHistory& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw DataError("history: cannot open '" + path + "' for writing");
    std::size_t round = 0;
    for (const auto& rec : history.rounds) {
        nlohmann::json j;
        j["round"] = ++round;
        auto& clients = j["clients"] = nlohmann::json::array();
        for (const auto& c : rec.clients) {
            clients.push_back({{"center", c.center_id},
                               {"l_sup", c.l_sup},
                               {"l_con", c.l_con},
                               {"l_total", c.l_total}});
        }
        if (rec.eval_acc >= 0.0) {
            j["eval_acc"] = rec.eval_acc;
        } else {
            j["eval_acc"] = nullptr;
        }
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(rec.global_checksum));
        j["checksum"] = buf;
        os << j.dump() << '\n';
    }
    if (!os) throw DataError("history: write failed on '" + path + "'");
}

} // namespace fedsim
