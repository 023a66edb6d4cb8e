#include <doctest.h>

#include <cmath>

#include "crab/evaluation.hpp"
#include "crab/recovery.hpp"

using namespace crab;

namespace {

Dataset easy_dataset(std::size_t n, std::uint64_t seed, double sep = 4.0) {
    SyntheticSpec spec;
    spec.samples_per_class = (n + 2) / 3;
    spec.input_dim = 6;
    spec.num_classes = 3;
    spec.cluster_separation = sep;
    spec.seed = seed;
    return gen_synthetic(spec);
}

ParamVector train_until_good(const Dataset& d, const ModelArch& arch, int epochs) {
    auto m = init_model(arch, 3);
    LocalTrainConfig local{epochs, 0.1, 32, 9};
    auto upd = local_train(m, arch, d, local);
    add_inplace(m, upd);
    return m;
}

}  // namespace

TEST_CASE("test_accuracy: perfect and degenerate models") {
    ModelArch arch{ArchKind::logreg, 2, 0, 2};
    Dataset d;
    d.input_dim = 2;
    std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
    d.push_row(a, 0);
    d.push_row(a, 0);
    d.push_row(b, 1);
    // model with W = [[10,0],[0,10]], b = 0 classifies perfectly
    ParamVector m{10.0, 0.0, 0.0, 10.0, 0.0, 0.0};
    CHECK(test_accuracy(m, arch, d) == doctest::Approx(1.0));
    // zero model: uniform logits, argmax tie -> class 0; two of three samples are class 0
    ParamVector zero(arch.param_count(), 0.0);
    CHECK(test_accuracy(zero, arch, d) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(test_accuracy(m, arch, Dataset{}), EmptyInputError);
}

TEST_CASE("attack_success_rate: constant-target and random models") {
    ModelArch arch{ArchKind::logreg, 784, 0, 10};
    SyntheticSpec spec;
    spec.samples_per_class = 20;
    spec.input_dim = 784;
    spec.num_classes = 10;
    spec.cluster_separation = 1.0;
    spec.seed = 21;
    auto d = gen_synthetic(spec);
    TriggerSpec trig;  // defaults: 4x4, value 1.0, side 28

    // a model that always predicts the target label: huge bias on class 3
    ParamVector m(arch.param_count(), 0.0);
    m[784 * 10 + 3] = 100.0;
    CHECK(attack_success_rate(m, arch, d, trig, 3) == doctest::Approx(1.0));
    // and never the target when biased elsewhere
    CHECK(attack_success_rate(m, arch, d, trig, 7) == doctest::Approx(0.0));

    // a fresh random-ish model on random data predicts the target about 1/K of the time
    auto rnd = init_model(arch, 4);
    double asr = attack_success_rate(rnd, arch, d, trig, 0);
    CHECK(asr >= 0.0);
    CHECK(asr <= 0.4);  // loose: far from a successful backdoor
}

TEST_CASE("membership_inference_rate: chance on identical sets, high after overfitting") {
    ModelArch arch{ArchKind::logreg, 6, 0, 3};
    auto d = easy_dataset(120, 5);
    auto m = train_until_good(d, arch, 3);
    // identical member and non-member sets: balanced accuracy is exactly 0.5
    CHECK(membership_inference_rate(m, arch, d, d) == doctest::Approx(0.5));

    // overfit a tiny model on few points; held-out from a different cluster layout
    SyntheticSpec spec;
    spec.samples_per_class = 10;
    spec.input_dim = 6;
    spec.num_classes = 3;
    spec.cluster_separation = 4.0;
    spec.seed = 8;
    auto members = gen_synthetic(spec);
    spec.seed = 1234;
    auto outsiders = gen_synthetic(spec);  // same distribution, unseen points
    ModelArch small{ArchKind::mlp1, 6, 16, 3};
    auto model = init_model(small, 6);
    LocalTrainConfig local{200, 0.2, 8, 2};
    auto upd = local_train(model, small, members, local);
    add_inplace(model, upd);
    double misr = membership_inference_rate(model, small, members, outsiders);
    CHECK(misr >= 0.5);  // members have systematically lower loss
}

TEST_CASE("estimate_constants: quadratic oracle and error cases") {
    // F for logreg is not quadratic, but we can check the machinery on a
    // real trajectory: constants exist, are positive, and G covers updates.
    ModelArch arch{ArchKind::logreg, 6, 0, 3};
    auto d = easy_dataset(200, 99);
    std::vector<ParamVector> traj;
    auto m = init_model(arch, 1);
    traj.push_back(m);
    LocalTrainConfig local{1, 0.05, 32, 0};
    for (int t = 0; t < 4; ++t) {
        auto upd = local_train(m, arch, d, LocalTrainConfig{1, 0.05, 32, static_cast<std::uint64_t>(t)});
        add_inplace(m, upd);
        traj.push_back(m);
    }
    auto c = estimate_constants(traj, /*max_observed_grad_norm=*/2.0, d, arch,
                                loss(traj.front(), arch, d), loss(traj.back(), arch, d) * 0.9,
                                0.05, 4, 4, 123);
    CHECK(c.smoothness_l > 0.0);
    CHECK(c.grad_bound_g == doctest::Approx(2.2));  // 1.1 * observed
    CHECK(c.f_init >= c.f_star);
    CHECK(std::isfinite(c.smoothness_l));

    CHECK_THROWS_AS(estimate_constants(traj, 0.0, d, arch, 1.0, 0.5, 0.05, 4, 4, 1),
                    EstimationError);
    std::vector<ParamVector> degenerate{traj.front()};
    CHECK_THROWS_AS(estimate_constants(degenerate, 1.0, d, arch, 1.0, 0.5, 0.05, 4, 4, 1),
                    EstimationError);
}

TEST_CASE("theorem1_check: r=0 row is exactly zero on both sides, RHS monotone") {
    // synthesize a trace pair that starts at the same model
    ModelArch arch{ArchKind::logreg, 6, 0, 3};
    auto d = easy_dataset(150, 42);
    auto m0 = init_model(arch, 2);
    auto clients = partition_iid(d, 3, 3);
    LocalTrainConfig local{1, 0.05, 32, 0};
    auto a = run_retrain(m0, arch, clients, {}, 4, local, 50, d);
    auto b = run_retrain(m0, arch, clients, {}, 4, local, 51, d);
    // treat `a` as the recovery trace; it needs sigma_check entries
    a.sigma_check.assign(a.rounds(), 1.0);
    a.rollback_index = std::nullopt;

    BoundConstants c;
    c.smoothness_l = 5.0;
    c.grad_bound_g = 2.0;
    c.f_init = loss(m0, arch, d);
    c.f_star = 0.0;
    c.eta = 0.05;
    c.total_rounds = 4;
    c.recovery_rounds = 4;
    auto rows = theorem1_check(a, b.models, c);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].r == 0);
    CHECK(rows[0].lhs == doctest::Approx(0.0));
    CHECK(rows[0].rhs == doctest::Approx(0.0));
    CHECK(rows[0].pass);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i].rhs >= rows[i - 1].rhs);  // RHS grows with r
        CHECK(rows[i].tau >= rows[i - 1].tau);
    }

    // mismatched start model is a contract violation
    auto shifted = b.models;
    shifted[0][0] += 1.0;
    CHECK_THROWS_AS(theorem1_check(a, shifted, c), ContractViolation);
}
