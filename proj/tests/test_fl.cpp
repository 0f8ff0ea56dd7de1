#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fedsim/errors.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/rng.hpp"
#include "fedsim/ssl.hpp"
#include "test_util.hpp"

using namespace fedsim;
using namespace fedtest;

TEST_CASE("cross_correlation of the alternating-sign batch") {
    Tensor z({2, 2}, {1.0, -1.0, -1.0, 1.0});
    const CrossCorr c = cross_correlation(z, z);
    CHECK(std::abs(c.matrix.at(0, 0) - 1.0) < 1e-9);
    CHECK(std::abs(c.matrix.at(0, 1) + 1.0) < 1e-9);
    CHECK(std::abs(c.matrix.at(1, 0) + 1.0) < 1e-9);
    CHECK(std::abs(c.matrix.at(1, 1) - 1.0) < 1e-9);
}

TEST_CASE("cross_correlation of orthogonal columns is the identity") {
    Tensor z({2, 2}, {1.0, 0.0, 0.0, 1.0});
    const CrossCorr c = cross_correlation(z, z);
    CHECK(std::abs(c.matrix.at(0, 0) - 1.0) < 1e-9);
    CHECK(std::abs(c.matrix.at(1, 1) - 1.0) < 1e-9);
    CHECK(c.matrix.at(0, 1) == 0.0);
    CHECK(c.matrix.at(1, 0) == 0.0);
}

TEST_CASE("cross_correlation guards zero columns without NaNs") {
    Tensor zl({3, 2}, {0.0, 1.0, 0.0, -2.0, 0.0, 0.5});  // column 0 all zero
    Rng rng(3);
    const Tensor zg = random_tensor({3, 2}, rng);
    const CrossCorr c = cross_correlation(zl, zg);
    CHECK(c.matrix.all_finite());
    CHECK(c.matrix.at(0, 0) == 0.0);
    CHECK(c.matrix.at(0, 1) == 0.0);
}

TEST_CASE("cross_correlation contract errors") {
    Rng rng(5);
    CHECK_THROWS_AS(cross_correlation(random_tensor({1, 4}, rng), random_tensor({1, 4}, rng)),
                    ContractError);
    CHECK_THROWS_AS(cross_correlation(random_tensor({3, 4}, rng), random_tensor({3, 5}, rng)),
                    StructuralError);
}

TEST_CASE("cross_correlation entries stay within the Cauchy-Schwarz bound") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(derive_seed(seed, {0xCC}));
        const std::size_t b = 2 + rng.below(6), d = 1 + rng.below(5);
        const Tensor zl = random_tensor({b, d}, rng, -2.0, 2.0);
        const Tensor zg = random_tensor({b, d}, rng, -2.0, 2.0);
        const CrossCorr c = cross_correlation(zl, zg);
        for (std::size_t i = 0; i < c.matrix.size(); ++i) {
            CHECK(std::abs(c.matrix[i]) <= 1.0 + 1e-9);
        }
    }
}

TEST_CASE("bt_loss frozen examples") {
    Tensor identity({2, 2}, {1.0, 0.0, 0.0, 1.0});
    CHECK(bt_loss({identity}, 0.005) == 0.0);

    Tensor anti({2, 2}, {1.0, -1.0, -1.0, 1.0});
    CHECK(std::abs(bt_loss({anti}, 0.005) - 0.01) <= 1e-15);

    Tensor zeros({2, 2}, {0.0, 0.0, 0.0, 0.0});
    CHECK(bt_loss({zeros}, 0.005) == 2.0);

    CHECK(bt_loss({anti}, 0.005) >= 0.0);
}

TEST_CASE("sup_loss matches an independent softmax + cross-entropy") {
    Tensor uniform({1, 4}, {0.3, 0.3, 0.3, 0.3});
    CHECK(sup_loss(uniform, {2}) == doctest::Approx(1.3862943611198906).epsilon(1e-12));

    Tensor confident({1, 3}, {30.0, 0.0, 0.0});
    CHECK(sup_loss(confident, {0}) <= 1e-11);

    Rng rng(7);
    const Tensor logits = random_tensor({5, 4}, rng);
    const std::vector<int> y = {0, 3, 1, 2, 2};
    double expect = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < 4; ++c) denom += std::exp(logits.at(r, c));
        expect += -std::log(std::exp(logits.at(r, static_cast<std::size_t>(y[r]))) / denom);
    }
    expect /= 5.0;
    CHECK(std::abs(sup_loss(logits, y) - expect) < 1e-12);
}

namespace {

struct Fixture {
    ModelSpec spec = tiny_spec();
    ParamSet w_i, w_g;
    Tensor x;
    std::vector<int> y;
};

// weights and batch with all relu pre-activations clear of their kinks
Fixture make_fixture(std::uint64_t seed, std::size_t batch = 2) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        Fixture f;
        Rng rng(derive_seed(seed, {0xF17, attempt}));
        f.w_i = random_like(init_weights(f.spec, 1), rng, -0.7, 0.7);
        f.w_g = random_like(init_weights(f.spec, 1), rng, -0.7, 0.7);
        f.x = random_tensor({batch, f.spec.input_size()}, rng, 0.0, 1.0);
        f.y.resize(batch);
        for (auto& label : f.y) label = static_cast<int>(rng.below(f.spec.n_classes));
        if (relu_margin(f.spec, f.w_i, f.x, true) > 1e-3 &&
            relu_margin(f.spec, f.w_g, f.x, true) > 1e-3) {
            return f;
        }
    }
}

} // namespace

TEST_CASE("local_objective with mu = 0 is exactly the supervised objective") {
    Fixture f = make_fixture(1);
    const ObjectiveValue bt = local_objective(f.spec, f.w_i, f.w_g, f.x, f.y, 0.0, 0.005);
    const ObjectiveValue plain =
        baseline_objective(Algorithm::FedAvg, f.spec, f.w_i, f.w_g, f.x, f.y, 0.0);
    CHECK(bt.total == plain.total);
    CHECK(bt.l_con == 0.0);
    CHECK(bt.grads.bit_equal(plain.grads));
}

TEST_CASE("identical local and global models align the correlation diagonal") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Fixture f = make_fixture(seed + 10, 4);
        const Tensor z = project(encode(f.x, f.spec, f.w_i), f.spec, f.w_i);
        const CrossCorr c = cross_correlation(z, z);
        double invariance = 0.0;
        for (std::size_t i = 0; i < c.matrix.rows(); ++i) {
            invariance += (1.0 - c.matrix.at(i, i)) * (1.0 - c.matrix.at(i, i));
        }
        CHECK(invariance < 1e-10);
    }
}

TEST_CASE("local_objective gradient matches finite differences") {
    Fixture f = make_fixture(2);
    const ObjectiveValue got = local_objective(f.spec, f.w_i, f.w_g, f.x, f.y, 0.01, 0.005);

    auto eval = [&](const ParamSet& probe) {
        return local_objective(f.spec, probe, f.w_g, f.x, f.y, 0.01, 0.005).total;
    };
    const ParamSet numeric = finite_diff_grad(eval, f.w_i, 1e-5);
    CHECK(max_rel_err(got.grads, numeric) < 1e-4);
}

TEST_CASE("gradients never flow into the global model") {
    Fixture f = make_fixture(3);
    const ObjectiveValue got = local_objective(f.spec, f.w_i, f.w_g, f.x, f.y, 0.01, 0.005);
    CHECK(got.grads.shape_compatible(f.w_i));  // exactly the local names, in order

    // and the auxiliary value reacts to w_g only through the constant branch
    ParamSet w_g2 = f.w_g;
    w_g2.get("out.b")[0] += 10.0;  // head unused by the contrastive branch
    const ObjectiveValue again = local_objective(f.spec, f.w_i, w_g2, f.x, f.y, 0.01, 0.005);
    CHECK(again.total == got.total);
}

TEST_CASE("local_objective needs two samples when the contrastive term is on") {
    Fixture f = make_fixture(4, 1);
    CHECK_THROWS_AS(local_objective(f.spec, f.w_i, f.w_g, f.x, f.y, 0.01, 0.005), ContractError);
    CHECK_NOTHROW(local_objective(f.spec, f.w_i, f.w_g, f.x, f.y, 0.0, 0.005));
}

TEST_CASE("fedprox objective: proximal gradient and finite differences") {
    Fixture f = make_fixture(5);
    const double rho = 0.3;
    const ObjectiveValue prox =
        baseline_objective(Algorithm::FedProx, f.spec, f.w_i, f.w_g, f.x, f.y, rho);
    const ObjectiveValue plain =
        baseline_objective(Algorithm::FedAvg, f.spec, f.w_i, f.w_g, f.x, f.y, 0.0);

    // grad difference isolates the quadratic term: rho * (w_i - w_g)
    for (std::size_t e = 0; e < prox.grads.size(); ++e) {
        const Tensor& gp = prox.grads.entries()[e].second;
        const Tensor& gf = plain.grads.entries()[e].second;
        const Tensor& wi = f.w_i.entries()[e].second;
        const Tensor& wg = f.w_g.entries()[e].second;
        for (std::size_t i = 0; i < gp.size(); ++i) {
            CHECK(std::abs((gp[i] - gf[i]) - rho * (wi[i] - wg[i])) < 1e-9);
        }
    }

    auto eval = [&](const ParamSet& probe) {
        return baseline_objective(Algorithm::FedProx, f.spec, probe, f.w_g, f.x, f.y, rho).total;
    };
    CHECK(max_rel_err(prox.grads, finite_diff_grad(eval, f.w_i, 1e-5)) < 1e-4);

    // rho = 0 collapses to fedavg bitwise
    const ObjectiveValue zero =
        baseline_objective(Algorithm::FedProx, f.spec, f.w_i, f.w_g, f.x, f.y, 0.0);
    CHECK(zero.total == plain.total);
    CHECK(zero.grads.bit_equal(plain.grads));
}

namespace {

ClientState make_client(const ModelSpec& spec, std::size_t n, std::uint64_t seed,
                        int center_id = 0) {
    Rng rng(seed);
    ClientState client;
    client.center_id = center_id;
    client.train = random_samples(spec, n, rng, center_id);
    client.m_original = n;
    return client;
}

FLConfig quick_cfg(Algorithm algorithm) {
    FLConfig cfg;
    cfg.algorithm = algorithm;
    cfg.rounds = 2;
    cfg.local_epochs = 1;
    cfg.batch = 4;
    cfg.seed = 99;
    cfg.eval_every = 0;
    return cfg;
}

} // namespace

TEST_CASE("party_local_training with zero epochs returns the broadcast weights") {
    const ModelSpec spec = tiny_spec();
    ClientState client = make_client(spec, 6, 1);
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    cfg.local_epochs = 0;
    const ParamSet w_g = init_weights(spec, 5);
    CHECK(party_local_training(client, w_g, spec, cfg, 0).bit_equal(w_g));
}

TEST_CASE("party_local_training rejects an empty dataset") {
    const ModelSpec spec = tiny_spec();
    ClientState client;
    client.center_id = 7;
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    CHECK_THROWS_WITH_AS(party_local_training(client, init_weights(spec, 1), spec, cfg, 0),
                         doctest::Contains("center 7"), ContractError);
}

TEST_CASE("single step decomposes into objective gradient plus sgd_step") {
    const ModelSpec spec = tiny_spec();
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    cfg.batch = 4;
    cfg.local_epochs = 1;

    ClientState client = make_client(spec, 4, 2);
    const ParamSet w_g = init_weights(spec, 3);
    const ParamSet got = party_local_training(client, w_g, spec, cfg, 0);

    // replicate the seeded batch order
    std::vector<std::size_t> order(client.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, {0xF1, static_cast<std::uint64_t>(client.center_id), 0, 0}));
    rng.shuffle(order);
    const Tensor x = flatten_images(client.train, order);
    const std::vector<int> y = gather_labels(client.train, order);

    const ObjectiveValue obj =
        baseline_objective(Algorithm::FedAvg, spec, w_g, w_g, x, y, 0.0);
    const ParamSet expect = sgd_step(w_g, obj.grads, cfg.learning_rate);
    CHECK(got.bit_equal(expect));
}

TEST_CASE("trailing singleton batches are dropped for every algorithm") {
    const ModelSpec spec = tiny_spec();
    FLConfig cfg = quick_cfg(Algorithm::FlBt);
    cfg.batch = 4;
    ClientState client = make_client(spec, 5, 4);  // 4 + 1 -> singleton tail
    const ParamSet w_g = init_weights(spec, 5);
    LocalTrainStats stats;
    CHECK_NOTHROW(party_local_training(client, w_g, spec, cfg, 0, &stats));
    CHECK(stats.steps == 1);

    // same schedule for fedavg keeps the trajectories comparable
    FLConfig plain = cfg;
    plain.algorithm = Algorithm::FedAvg;
    LocalTrainStats plain_stats;
    party_local_training(client, w_g, spec, plain, 0, &plain_stats);
    CHECK(plain_stats.steps == 1);
}

TEST_CASE("aggregate identities and weighted-average arithmetic") {
    const ModelSpec spec = tiny_spec();
    const ParamSet w = init_weights(spec, 1);
    CHECK(aggregate({w}, {17}).bit_equal(w));
    CHECK(aggregate({w, w, w}, {3, 1, 4}).bit_equal(w));

    ParamSet w1;
    w1.add("a", Tensor({2}, {0.0, 4.0}));
    ParamSet w2;
    w2.add("a", Tensor({2}, {4.0, 0.0}));
    const ParamSet avg = aggregate({w1, w2}, {1, 3});
    CHECK(avg.get("a")[0] == 3.0);
    CHECK(avg.get("a")[1] == 1.0);
}

TEST_CASE("aggregate matches a two-loop weighted sum and permutes stably") {
    Rng rng(9);
    ParamSet base;
    base.add("a", Tensor::zeros({6}));
    base.add("b", Tensor::zeros({2, 3}));
    std::vector<ParamSet> sets;
    std::vector<std::size_t> sizes = {5, 2, 9, 1, 3};
    for (std::size_t i = 0; i < sizes.size(); ++i) sets.push_back(random_like(base, rng));
    const double total = 20.0;

    const ParamSet got = aggregate(sets, sizes);
    for (std::size_t e = 0; e < got.size(); ++e) {
        const Tensor& t = got.entries()[e].second;
        for (std::size_t j = 0; j < t.size(); ++j) {
            double expect = 0.0;
            for (std::size_t i = 0; i < sets.size(); ++i) {
                expect += (static_cast<double>(sizes[i]) / total) * sets[i].entries()[e].second[j];
            }
            CHECK(std::abs(t[j] - expect) < 1e-12);
        }
    }

    // permutation of (weights, sizes) pairs moves the result by at most 1e-15
    std::vector<ParamSet> perm_sets = {sets[4], sets[2], sets[0], sets[1], sets[3]};
    std::vector<std::size_t> perm_sizes = {3, 9, 5, 2, 1};
    const ParamSet permuted = aggregate(perm_sets, perm_sizes);
    for (std::size_t e = 0; e < got.size(); ++e) {
        const Tensor& a = got.entries()[e].second;
        const Tensor& b = permuted.entries()[e].second;
        for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) <= 1e-15);
    }
}

TEST_CASE("aggregate structural errors") {
    const ModelSpec spec = tiny_spec();
    const ParamSet w = init_weights(spec, 1);
    CHECK_THROWS_AS(aggregate({}, {}), StructuralError);
    CHECK_THROWS_AS(aggregate({w}, {1, 2}), StructuralError);
    CHECK_THROWS_AS(aggregate({w}, {0}), ContractError);
    ModelSpec other = tiny_spec();
    other.repr_dim = 7;
    CHECK_THROWS_AS(aggregate({w, init_weights(other, 1)}, {1, 1}), StructuralError);
}

namespace {

std::vector<ClientData> make_clients(const ModelSpec& spec, std::uint64_t seed) {
    std::vector<ClientData> clients;
    for (int c = 0; c < 3; ++c) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
        ClientData client;
        client.center_id = c;
        client.train = random_samples(spec, 8, rng, c);
        client.m_original = 8;
        clients.push_back(std::move(client));
    }
    return clients;
}

std::vector<std::uint64_t> checksums(const RunHistory& history) {
    std::vector<std::uint64_t> out;
    for (const auto& r : history.rounds) out.push_back(r.global_checksum);
    return out;
}

} // namespace

TEST_CASE("run_federation with zero rounds returns the initial model") {
    const ModelSpec spec = tiny_spec();
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    cfg.rounds = 0;
    const FederationResult res = run_federation(spec, make_clients(spec, 1), cfg);
    CHECK(res.global.bit_equal(init_weights(spec, cfg.seed)));
    CHECK(res.history.rounds.empty());
}

TEST_CASE("run_federation is deterministic per seed") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 2);
    const FLConfig cfg = quick_cfg(Algorithm::FlBt);
    const FederationResult a = run_federation(spec, clients, cfg);
    const FederationResult b = run_federation(spec, clients, cfg);
    CHECK(a.global.bit_equal(b.global));
    CHECK(checksums(a.history) == checksums(b.history));
    REQUIRE(a.history.rounds.size() == cfg.rounds);
}

TEST_CASE("reduction chain: fl_bt(mu=0), fedavg and fedprox(rho=0) coincide bitwise") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 3);

    FLConfig bt = quick_cfg(Algorithm::FlBt);
    bt.mu = 0.0;
    FLConfig avg = quick_cfg(Algorithm::FedAvg);
    FLConfig prox = quick_cfg(Algorithm::FedProx);
    prox.rho = 0.0;

    const auto cs_bt = checksums(run_federation(spec, clients, bt).history);
    const auto cs_avg = checksums(run_federation(spec, clients, avg).history);
    const auto cs_prox = checksums(run_federation(spec, clients, prox).history);
    CHECK(cs_bt == cs_avg);
    CHECK(cs_avg == cs_prox);
}

TEST_CASE("ssl initialization transplants the encoder only") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 4);
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    cfg.rounds = 0;

    const ParamSet pretrained = init_weights(spec, 777);
    const FederationResult res = run_federation(spec, clients, cfg, &pretrained);
    CHECK(res.global.subset(seg::encoder).bit_equal(pretrained.subset(seg::encoder)));
    const ParamSet fresh = init_weights(spec, cfg.seed);
    CHECK(res.global.subset(seg::output).bit_equal(fresh.subset(seg::output)));
    CHECK(res.global.subset(seg::projector).bit_equal(fresh.subset(seg::projector)));
}

TEST_CASE("local_only keeps per-client models apart; fedavg deploys one global") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 5);

    FLConfig local = quick_cfg(Algorithm::LocalOnly);
    const FederationResult lres = run_federation(spec, clients, local);
    REQUIRE(lres.per_client.size() == 3);
    CHECK_FALSE(lres.per_client[0].bit_equal(lres.per_client[1]));

    FLConfig avg = quick_cfg(Algorithm::FedAvg);
    const FederationResult ares = run_federation(spec, clients, avg);
    CHECK(ares.per_client[0].bit_equal(ares.global));
    CHECK(ares.per_client[2].bit_equal(ares.global));
}

TEST_CASE("client failures carry the center id and abort the round") {
    const ModelSpec spec = tiny_spec();
    auto clients = make_clients(spec, 6);
    clients[1].train.clear();
    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    CHECK_THROWS_WITH_AS(run_federation(spec, clients, cfg), doctest::Contains("center 1"),
                         ContractError);
}

TEST_CASE("per-round eval accuracy lands in [0, 1] and respects eval_every") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 7);
    Rng rng(71);
    std::vector<EvalSet> eval_sets;
    for (int c = 0; c < 3; ++c) eval_sets.push_back({c, random_samples(spec, 5, rng, c)});

    FLConfig cfg = quick_cfg(Algorithm::FedAvg);
    cfg.rounds = 3;
    cfg.eval_every = 2;
    const FederationResult res = run_federation(spec, clients, cfg, nullptr, &eval_sets);
    REQUIRE(res.history.rounds.size() == 3);
    CHECK(res.history.rounds[0].eval_acc == -1.0);
    CHECK(res.history.rounds[1].eval_acc >= 0.0);
    CHECK(res.history.rounds[1].eval_acc <= 1.0);
    CHECK(res.history.rounds[2].eval_acc == -1.0);
}

TEST_CASE("history files are deterministic and omit wall time") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 8);
    const FLConfig cfg = quick_cfg(Algorithm::FlBt);
    const FederationResult res = run_federation(spec, clients, cfg);

    save_history(res.history, "hist_a.jsonl");
    save_history(res.history, "hist_b.jsonl");
    std::ifstream fa("hist_a.jsonl"), fb("hist_b.jsonl");
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    CHECK(sa.str() == sb.str());
    CHECK(sa.str().find("wall") == std::string::npos);
    CHECK(sa.str().find("l_sup") != std::string::npos);
    std::remove("hist_a.jsonl");
    std::remove("hist_b.jsonl");
}

TEST_CASE("fl_bt records the weighted contrastive term") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 9);
    FLConfig cfg = quick_cfg(Algorithm::FlBt);
    cfg.rounds = 1;
    const FederationResult res = run_federation(spec, clients, cfg);
    for (const auto& c : res.history.rounds[0].clients) {
        CHECK(c.l_con > 0.0);
        CHECK(std::abs(c.l_total - (c.l_sup + c.l_con)) < 1e-12);
    }
}

TEST_CASE("bt_centered flag changes the trajectory but stays finite") {
    const ModelSpec spec = tiny_spec();
    const auto clients = make_clients(spec, 10);
    FLConfig plain = quick_cfg(Algorithm::FlBt);
    FLConfig centered = plain;
    centered.bt_centered = true;
    const auto a = run_federation(spec, clients, plain);
    const auto b = run_federation(spec, clients, centered);
    CHECK_FALSE(a.global.bit_equal(b.global));
}
