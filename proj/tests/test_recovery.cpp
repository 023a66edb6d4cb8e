#include <doctest.h>

#include <cmath>

#include "crab/orchestrator.hpp"
#include "crab/recovery.hpp"

using namespace crab;

namespace {

Dataset tiny_dataset(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.samples_per_class = (n + classes - 1) / classes;
    spec.input_dim = dim;
    spec.num_classes = classes;
    spec.cluster_separation = 2.0;
    spec.seed = seed;
    return gen_synthetic(spec);
}

FlConfig tiny_config(std::size_t clients, std::size_t rounds) {
    FlConfig cfg;
    cfg.num_clients = clients;
    cfg.rounds = rounds;
    cfg.local = LocalTrainConfig{2, 0.05, 16, 0};
    cfg.arch = ModelArch{ArchKind::logreg, 4, 0, 3};
    cfg.attack.kind = AttackKind::none;
    cfg.storage.alpha = 0.1;
    cfg.storage.round_ratio = 1.0;
    cfg.storage.client_ratio = 1.0;
    cfg.master_seed = 99;
    return cfg;
}

struct TinyRun {
    FlConfig cfg;
    FlState state;
    HistoryStore store;
    TrainingResult result;
};

TinyRun run_tiny(std::size_t clients = 3, std::size_t rounds = 4) {
    TinyRun r;
    r.cfg = tiny_config(clients, rounds);
    auto data = tiny_dataset(120, 4, 3, 7);
    r.cfg.storage.refset = subset(data, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
    r.state.client_data = partition_iid(data, clients, 11);
    r.state.pool = data;
    r.state.model = init_model(r.cfg.arch, 5);
    r.store.arch = r.cfg.arch;
    r.store.config = r.cfg.storage;
    r.result = run_training(r.cfg, r.state, r.store);
    return r;
}

}  // namespace

TEST_CASE("calibrate: hand oracles") {
    // same direction, same norm: identity
    ParamVector hist{3.0, 4.0};
    CHECK(calibrate({3.0, 4.0}, hist) == ParamVector{3.0, 4.0});
    // (0,1) scaled to the historical norm 2
    auto c = calibrate({0.0, 1.0}, {0.0, 2.0});
    CHECK(c[0] == doctest::Approx(0.0));
    CHECK(c[1] == doctest::Approx(2.0));
    // direction is kept, norm matches history
    auto c2 = calibrate({1.0, 1.0}, {5.0, 0.0});
    CHECK(l2_norm(c2) == doctest::Approx(5.0));
    CHECK(c2[0] == doctest::Approx(c2[1]));
    // zero renewal -> zero vector regardless of history
    CHECK(calibrate({0.0, 0.0}, {1.0, 2.0}) == ParamVector{0.0, 0.0});
    CHECK_THROWS_AS(calibrate({1.0}, {1.0, 2.0}), ContractViolation);
}

TEST_CASE("calibrate: norm and direction properties on random inputs") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        ParamVector renewal(5), hist(5);
        for (double& x : renewal) x = rng.normal();
        for (double& x : hist) x = rng.normal();
        auto out = calibrate(renewal, hist);
        CHECK(l2_norm(out) == doctest::Approx(l2_norm(hist)).epsilon(1e-10));
        // collinear with renewal: cos = 1
        double cosv = dot(out, renewal) / (l2_norm(out) * l2_norm(renewal));
        CHECK(cosv == doctest::Approx(1.0).epsilon(1e-10));
    }
}

TEST_CASE("replay identity: crab with full storage and no unlearning reproduces training") {
    auto run = run_tiny(3, 4);
    REQUIRE(run.store.records.size() == run.cfg.rounds);

    auto trace = run_crab(run.store, init_model(run.cfg.arch, 5), run.state.client_data,
                          /*malicious=*/{}, run.cfg.local, 0.3, run.cfg.master_seed, run.state.pool,
                          nullptr, std::optional<std::size_t>{});
    CHECK(trace.rollback_index == std::nullopt);
    REQUIRE(!trace.models.empty());
    CHECK(l2_distance(trace.final_model(), run.result.final_model) == 0.0);
    // per-round calibration ratio is exactly 1 when renewals bit-match history
    for (double s : trace.sigma_check) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("recovery_round: benign-only replay matches stored aggregate of benign clients") {
    auto run = run_tiny(3, 3);
    const auto& rec = run.store.records[1];
    // with no malicious clients the calibrated aggregate is the stored aggregate
    // rec.model is the post-round model, so the round started from record 0's model
    auto rr = recovery_round(rec, run.cfg.arch, run.state.client_data, {}, run.store.records[0].model,
                             run.cfg.local, run.cfg.master_seed);
    // the renewed model equals previous model + stored aggregate
    ParamVector expect = run.store.records[0].model;
    add_inplace(expect, rec.selected_aggregate);
    CHECK(l2_distance(rr.next_model, expect) == doctest::Approx(0.0));
}

TEST_CASE("run_federaser: interval record count") {
    auto run = run_tiny(3, 4);
    // interval store with dt = rounds -> exactly one record
    FlState st;
    st.client_data = run.state.client_data;
    st.pool = run.state.pool;
    st.model = init_model(run.cfg.arch, 5);
    HistoryStore full, interval;
    full.arch = interval.arch = run.cfg.arch;
    full.config = interval.config = run.cfg.storage;
    run_training(run.cfg, st, full, &interval, run.cfg.rounds);
    CHECK(interval.records.size() == 1);

    HistoryStore interval2;
    interval2.arch = run.cfg.arch;
    interval2.config = run.cfg.storage;
    FlState st2;
    st2.client_data = run.state.client_data;
    st2.pool = run.state.pool;
    st2.model = init_model(run.cfg.arch, 5);
    HistoryStore full2;
    full2.arch = run.cfg.arch;
    full2.config = run.cfg.storage;
    run_training(run.cfg, st2, full2, &interval2, 2);
    CHECK(interval2.records.size() == 2);

    auto trace = run_federaser(interval2, init_model(run.cfg.arch, 5), run.state.client_data, {1},
                               run.cfg.local, run.cfg.master_seed, run.state.pool);
    CHECK(trace.rounds() == 2);
    CHECK(trace.models.size() == 3);
    CHECK(trace.losses.size() == 2);  // one loss per recovery round
}

TEST_CASE("run_retrain: deterministic and loss-improving on easy data") {
    auto data = tiny_dataset(150, 4, 3, 13);
    auto clients = partition_iid(data, 3, 3);
    auto arch = ModelArch{ArchKind::logreg, 4, 0, 3};
    auto m0 = init_model(arch, 2);
    LocalTrainConfig local{2, 0.05, 16, 0};
    auto t1 = run_retrain(m0, arch, clients, {}, 5, local, 77, data);
    auto t2 = run_retrain(m0, arch, clients, {}, 5, local, 77, data);
    CHECK(l2_distance(t1.final_model(), t2.final_model()) == 0.0);
    CHECK(t1.losses.size() == 5);  // one loss per round
    CHECK(t1.losses.back() < loss(m0, arch, data));
    // malicious clients are excluded: removing client 1 changes the outcome
    auto t3 = run_retrain(m0, arch, clients, {1}, 5, local, 77, data);
    CHECK(l2_distance(t1.final_model(), t3.final_model()) > 0.0);
}

TEST_CASE("run_crab: excising a client changes the recovered model") {
    auto run = run_tiny(3, 4);
    auto m0 = init_model(run.cfg.arch, 5);
    auto clean = run_crab(run.store, m0, run.state.client_data, {}, run.cfg.local, 0.3,
                          run.cfg.master_seed, run.state.pool, nullptr, std::optional<std::size_t>{});
    auto unlearned = run_crab(run.store, m0, run.state.client_data, {1}, run.cfg.local, 0.3,
                              run.cfg.master_seed, run.state.pool, nullptr,
                              std::optional<std::size_t>{});
    CHECK(l2_distance(clean.final_model(), unlearned.final_model()) > 0.0);
    CHECK(unlearned.rounds() == run.store.records.size());
    for (double s : unlearned.sigma_check) {
        CHECK(std::isfinite(s));
        CHECK(s >= 0.0);
    }
}
