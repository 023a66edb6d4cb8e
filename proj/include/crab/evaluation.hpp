#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "crab/adversary.hpp"
#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/history.hpp"
#include "crab/model.hpp"
#include "crab/paramvec.hpp"
#include "crab/recovery.hpp"
#include "crab/rng.hpp"

namespace crab {

inline int argmax_class(const std::vector<double>& probs) {
    // ties break toward the lowest class index
    int best = 0;
    for (int k = 1; k < static_cast<int>(probs.size()); ++k) {
        if (probs[static_cast<std::size_t>(k)] > probs[static_cast<std::size_t>(best)]) best = k;
    }
    return best;
}

inline double test_accuracy(const ParamVector& model, const ModelArch& arch, const Dataset& testset) {
    if (testset.empty()) throw EmptyInputError("test_accuracy: empty testset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < testset.size(); ++i) {
        if (argmax_class(predict_proba(model, arch, testset.row(i))) == testset.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(testset.size());
}

// Fraction of triggered test inputs predicted as the target label.
inline double attack_success_rate(const ParamVector& model, const ModelArch& arch,
                                  const Dataset& testset, const TriggerSpec& trigger,
                                  int target_label) {
    if (testset.empty()) throw EmptyInputError("attack_success_rate: empty testset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < testset.size(); ++i) {
        auto x = embed_trigger(testset.row(i), trigger);
        if (argmax_class(predict_proba(model, arch, x)) == target_label) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(testset.size());
}

// Loss-threshold membership inference: threshold at the median per-sample
// loss over the pooled sets, infer "member" iff loss < threshold, report
// balanced accuracy. A simplified stand-in for shadow-model attacks.
inline double membership_inference_rate(const ParamVector& model, const ModelArch& arch,
                                        const Dataset& members, const Dataset& nonmembers) {
    if (members.empty() || nonmembers.empty())
        throw EmptyInputError("membership_inference_rate: empty set");
    auto sample_losses = [&](const Dataset& d) {
        std::vector<double> out(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            auto p = predict_proba(model, arch, d.row(i));
            out[i] = -std::log(std::max(p[static_cast<std::size_t>(d.labels[i])], 1e-300));
        }
        return out;
    };
    std::vector<double> lm = sample_losses(members);
    std::vector<double> ln = sample_losses(nonmembers);
    std::vector<double> pooled(lm);
    pooled.insert(pooled.end(), ln.begin(), ln.end());
    std::sort(pooled.begin(), pooled.end());
    std::size_t n = pooled.size();
    double median = (n % 2 == 1) ? pooled[n / 2] : 0.5 * (pooled[n / 2 - 1] + pooled[n / 2]);

    double tpr = 0.0, tnr = 0.0;
    for (double l : lm) tpr += (l < median) ? 1.0 : 0.0;
    for (double l : ln) tnr += (l < median) ? 0.0 : 1.0;
    tpr /= static_cast<double>(lm.size());
    tnr /= static_cast<double>(ln.size());
    return 0.5 * (tpr + tnr);
}

struct BoundConstants {
    double smoothness_l = 0.0;   // L
    double grad_bound_g = 0.0;   // G
    double f_init = 0.0;         // F(M~_0)
    double f_star = 0.0;         // estimate of F(M*)
    double eta = 0.0;
    std::size_t total_rounds = 0;     // T
    std::size_t recovery_rounds = 0;  // T' - j*
};

// Empirical (L, G) estimates with a 1.1 safety factor. L comes from secant
// slopes of the full-data gradient over consecutive trajectory models plus 20
// random perturbation pairs; G from the largest client gradient norm the
// caller observed.
inline BoundConstants estimate_constants(const std::vector<ParamVector>& trajectory,
                                         double max_observed_grad_norm, const Dataset& pool,
                                         const ModelArch& arch, double f_init, double f_star,
                                         double eta, std::size_t total_rounds,
                                         std::size_t recovery_rounds, std::uint64_t seed) {
    if (trajectory.size() < 2) throw EstimationError("estimate_constants: need >= 2 models");
    if (max_observed_grad_norm <= 0.0)
        throw EstimationError("estimate_constants: no nonzero gradient observed");

    double max_slope = 0.0;
    auto secant = [&](const ParamVector& a, const ParamVector& b) {
        double dist = l2_distance(a, b);
        if (dist < 1e-12) return;
        ParamVector ga = gradient(a, arch, pool);
        ParamVector gb = gradient(b, arch, pool);
        max_slope = std::max(max_slope, l2_distance(ga, gb) / dist);
    };
    for (std::size_t i = 0; i + 1 < trajectory.size(); ++i) secant(trajectory[i], trajectory[i + 1]);

    Rng rng(seed);
    for (int k = 0; k < 20; ++k) {
        const ParamVector& base = trajectory[rng.below(trajectory.size())];
        ParamVector perturbed(base);
        for (double& v : perturbed) v += rng.normal(0.0, 0.05);
        secant(base, perturbed);
    }
    if (max_slope == 0.0) throw EstimationError("estimate_constants: degenerate trajectory");

    BoundConstants c;
    c.smoothness_l = 1.1 * max_slope;
    c.grad_bound_g = 1.1 * max_observed_grad_norm;
    c.f_init = f_init;
    c.f_star = f_star;
    c.eta = eta;
    c.total_rounds = total_rounds;
    c.recovery_rounds = recovery_rounds;
    return c;
}

struct BoundCheckRow {
    std::size_t r = 0;
    std::size_t tau = 0;
    bool tau_clamped = false;  // tau exceeded the scratch trace and was clamped
    double lhs = 0.0;          // ||M~_r - M_tau||
    double rhs = 0.0;
    bool pass = false;
};

// Audits the recovered-vs-scratch distance bound:
//   ||M~_r - M_tau|| <= sqrt( eta * [ (F(M~_0)-F(M*)) (r + tau)
//                                     + (L/2) eta^2 G^2 (r * sum sigma^2 + tau) ] )
// with tau = ceil(r * T / recovery_rounds). Both traces must share M~_0.
inline std::vector<BoundCheckRow> theorem1_check(const RecoveryTrace& trace,
                                                 const std::vector<ParamVector>& scratch_models,
                                                 const BoundConstants& c) {
    require(!trace.models.empty() && !scratch_models.empty(), "theorem1_check: empty traces");
    require(l2_distance(trace.models.front(), scratch_models.front()) == 0.0,
            "theorem1_check: traces must share the starting model");
    require(trace.sigma_check.size() + 1 == trace.models.size(),
            "theorem1_check: sigma/model misalignment");
    require(c.recovery_rounds == trace.rounds(), "theorem1_check: recovery_rounds mismatch");

    std::vector<BoundCheckRow> rows;
    double sigma_sq_sum = 0.0;
    for (std::size_t r = 0; r < trace.models.size(); ++r) {
        BoundCheckRow row;
        row.r = r;
        std::size_t tau = 0;
        if (r > 0) {
            tau = static_cast<std::size_t>(std::ceil(
                static_cast<double>(r) * static_cast<double>(c.total_rounds) /
                static_cast<double>(c.recovery_rounds)));
        }
        row.tau = tau;
        if (tau >= scratch_models.size()) {
            row.tau_clamped = true;
            tau = scratch_models.size() - 1;
        }
        row.lhs = l2_distance(trace.models[r], scratch_models[tau]);
        double rd = static_cast<double>(r), taud = static_cast<double>(row.tau);
        double inner = c.eta * ((c.f_init - c.f_star) * (rd + taud) +
                                0.5 * c.smoothness_l * c.eta * c.eta * c.grad_bound_g *
                                    c.grad_bound_g * (rd * sigma_sq_sum + taud));
        row.rhs = std::sqrt(std::max(inner, 0.0));
        row.pass = row.lhs <= row.rhs;
        rows.push_back(row);
        if (r < trace.sigma_check.size()) {
            sigma_sq_sum += trace.sigma_check[r] * trace.sigma_check[r];
        }
    }
    return rows;
}

struct MetricsReport {
    double test_accuracy = 0.0;
    double asr = 0.0;
    double misr = 0.0;
    std::vector<double> round_runtimes_ms;
    std::size_t stored_round_count = 0;
    std::size_t stored_client_entries = 0;
    double round_saving_pct = 0.0;  // 1 - recovery_rounds / T
    std::vector<BoundCheckRow> bound_checks;
};

inline nlohmann::json to_json(const BoundCheckRow& row) {
    return {{"r", row.r},      {"tau", row.tau}, {"tau_clamped", row.tau_clamped},
            {"lhs", row.lhs},  {"rhs", row.rhs}, {"pass", row.pass}};
}

inline nlohmann::json to_json(const MetricsReport& m) {
    nlohmann::json j;
    j["test_accuracy"] = m.test_accuracy;
    j["asr"] = m.asr;
    j["misr_loss_threshold_variant"] = m.misr;
    j["round_runtimes_ms"] = m.round_runtimes_ms;
    j["stored_round_count"] = m.stored_round_count;
    j["stored_client_entries"] = m.stored_client_entries;
    j["round_saving_pct"] = m.round_saving_pct;
    j["bound_checks"] = nlohmann::json::array();
    for (const auto& row : m.bound_checks) j["bound_checks"].push_back(to_json(row));
    return j;
}

}  // namespace crab
