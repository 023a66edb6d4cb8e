#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <set>
#include <vector>

#include "crab/errors.hpp"
#include "crab/history.hpp"
#include "crab/model.hpp"
#include "crab/orchestrator.hpp"
#include "crab/paramvec.hpp"
#include "crab/rng.hpp"
#include "crab/rollback.hpp"

namespace crab {

enum class RecoveryMethod { crab, retrain, federaser };

struct RecoveryConfig {
    RecoveryMethod method = RecoveryMethod::crab;
    double beta = 0.3;                   // crab: sensitivity ratio
    std::size_t federaser_interval = 5;  // federaser: capture interval dt
    LocalTrainConfig local;
};

struct RecoveryTrace {
    std::optional<std::size_t> rollback_index;  // nullopt = initial model
    std::vector<ParamVector> models;            // M~_0 .. M~_R
    std::vector<double> losses;                 // loss after each recovery round
    std::vector<double> sigma_check;            // sigma-check_r per round
    std::vector<double> wall_ms;
    double max_update_grad_norm = 0.0;          // max ||u||/eta across renewals

    std::size_t rounds() const { return models.empty() ? 0 : models.size() - 1; }
    const ParamVector& final_model() const { return models.back(); }
};

// Eq. (7): the renewal update is plain local training from the current
// recovered model.
inline ParamVector renew_update(const ParamVector& model, const ModelArch& arch, const Dataset& data,
                                const LocalTrainConfig& cfg) {
    return local_train(model, arch, data, cfg);
}

// Keep the renewal's direction, adopt the historical update's magnitude.
// A zero renewal calibrates to zero.
inline ParamVector calibrate(const ParamVector& renewal, const ParamVector& historical) {
    check_same_length(renewal, historical, "calibrate");
    double n_hat = l2_norm(renewal);
    if (n_hat == 0.0) return ParamVector(renewal.size(), 0.0);
    return scaled(renewal, l2_norm(historical) / n_hat);
}

struct RecoveryRoundResult {
    ParamVector next_model;
    double sigma_check = 0.0;      // sum over participating clients of sigma_r^c
    double max_renewal_norm = 0.0;
};

// One calibrated recovery round against stored record `rec`: benign clients
// present in the record renew from `current`, get calibrated against their
// stored update and aggregated with weights renormalized over the benign
// participants. Clients absent from the record sit the round out.
inline RecoveryRoundResult recovery_round(const RoundRecord& rec, const ModelArch& arch,
                                          const std::vector<Dataset>& client_data,
                                          const std::set<int>& malicious,
                                          const ParamVector& current,
                                          const LocalTrainConfig& local,
                                          std::uint64_t master_seed) {
    double total_benign = 0.0;
    for (std::size_t k = 0; k < rec.client_ids.size(); ++k) {
        if (!malicious.contains(rec.client_ids[k])) {
            total_benign += static_cast<double>(rec.client_sizes[k]);
        }
    }
    require(total_benign > 0.0, "recovery_round: no benign stored clients");

    RecoveryRoundResult res;
    // Accumulate the calibrated aggregate separately and add it once, in the
    // same order training applies FedAvg, so a no-op replay is bit-identical.
    ParamVector agg(current.size(), 0.0);
    for (std::size_t k = 0; k < rec.client_ids.size(); ++k) {
        int c = rec.client_ids[k];
        if (malicious.contains(c)) continue;
        LocalTrainConfig lc = local;
        lc.rng_seed = mix_seed(master_seed, static_cast<std::uint64_t>(c), rec.round_index);
        ParamVector renewal =
            renew_update(current, arch, client_data[static_cast<std::size_t>(c - 1)], lc);
        ParamVector calibrated = calibrate(renewal, rec.client_updates[k]);
        double w = static_cast<double>(rec.client_sizes[k]) / total_benign;
        double n_hat = l2_norm(renewal);
        res.max_renewal_norm = std::max(res.max_renewal_norm, n_hat);
        if (n_hat > 0.0) res.sigma_check += w * l2_norm(rec.client_updates[k]) / n_hat;
        axpy_inplace(agg, w, calibrated);
    }
    res.next_model = current;
    add_inplace(res.next_model, agg);
    return res;
}

using RecoveryLogger = std::function<void(std::size_t, double, double, double)>;  // r, loss, sigma, ms

namespace detail {

// Calibrated replay over records (start_index, end]: shared by Crab and the
// FedEraser-style baseline.
inline RecoveryTrace calibrated_replay(const HistoryStore& store,
                                       std::optional<std::size_t> start_index,
                                       const ParamVector& start_model,
                                       const std::vector<Dataset>& client_data,
                                       const std::set<int>& malicious,
                                       const LocalTrainConfig& local, std::uint64_t master_seed,
                                       const Dataset& loss_data, const RecoveryLogger& log) {
    RecoveryTrace trace;
    trace.rollback_index = start_index;
    trace.models.push_back(start_model);
    std::size_t first = start_index ? *start_index + 1 : 0;
    for (std::size_t j = first; j < store.records.size(); ++j) {
        auto t0 = std::chrono::steady_clock::now();
        auto res = recovery_round(store.records[j], store.arch, client_data, malicious,
                                  trace.models.back(), local, master_seed);
        double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        double l = loss(res.next_model, store.arch, loss_data);
        trace.max_update_grad_norm =
            std::max(trace.max_update_grad_norm, res.max_renewal_norm / local.learning_rate);
        trace.models.push_back(std::move(res.next_model));
        trace.losses.push_back(l);
        trace.sigma_check.push_back(res.sigma_check);
        trace.wall_ms.push_back(ms);
        if (log) log(j - first, l, res.sigma_check, ms);
    }
    return trace;
}

}  // namespace detail

// Stage III: adaptive rollback then T' - j* calibrated recovery rounds.
inline RecoveryTrace run_crab(const HistoryStore& store, const ParamVector& initial_model,
                              const std::vector<Dataset>& client_data, const std::set<int>& malicious,
                              const LocalTrainConfig& local, double beta, std::uint64_t master_seed,
                              const Dataset& loss_data, const RecoveryLogger& log = nullptr,
                              std::optional<std::optional<std::size_t>> forced_rollback = {}) {
    require(!store.records.empty(), "run_crab: empty store");
    std::optional<std::size_t> jstar;
    if (forced_rollback) {
        jstar = *forced_rollback;
    } else {
        auto rep = analyze_rollback(store, malicious, beta);
        jstar = rep.rollback_index;
    }
    const ParamVector& start = jstar ? store.records[*jstar].model : initial_model;
    return detail::calibrated_replay(store, jstar, start, client_data, malicious, local, master_seed,
                                     loss_data, log);
}

// Train-from-scratch baseline: fresh FedAvg over benign clients only.
inline RecoveryTrace run_retrain(const ParamVector& initial_model, const ModelArch& arch,
                                 const std::vector<Dataset>& client_data,
                                 const std::set<int>& malicious, std::size_t rounds,
                                 const LocalTrainConfig& local, std::uint64_t master_seed,
                                 const Dataset& loss_data, const RecoveryLogger& log = nullptr) {
    RecoveryTrace trace;
    trace.models.push_back(initial_model);
    std::map<int, std::size_t> sizes;
    for (std::size_t i = 0; i < client_data.size(); ++i) {
        int c = static_cast<int>(i + 1);
        if (!malicious.contains(c)) sizes[c] = client_data[i].size();
    }
    require(!sizes.empty(), "run_retrain: no benign clients");
    for (std::size_t t = 0; t < rounds; ++t) {
        auto t0 = std::chrono::steady_clock::now();
        std::map<int, ParamVector> updates;
        for (const auto& [c, n] : sizes) {
            LocalTrainConfig lc = local;
            lc.rng_seed = mix_seed(master_seed, 0x5c4a7cULL + static_cast<std::uint64_t>(c), t);
            ParamVector u = local_train(trace.models.back(), arch,
                                        client_data[static_cast<std::size_t>(c - 1)], lc);
            trace.max_update_grad_norm =
                std::max(trace.max_update_grad_norm, l2_norm(u) / local.learning_rate);
            updates.emplace(c, std::move(u));
        }
        ParamVector g = aggregate(updates, sizes);
        ParamVector next = trace.models.back();
        add_inplace(next, g);
        double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        double l = loss(next, arch, loss_data);
        trace.models.push_back(std::move(next));
        trace.losses.push_back(l);
        trace.sigma_check.push_back(0.0);
        trace.wall_ms.push_back(ms);
        if (log) log(t, l, 0.0, ms);
    }
    return trace;
}

// FedEraser-style baseline: roll back to the initial model and run the same
// calibration loop over the interval-sampled history.
inline RecoveryTrace run_federaser(const HistoryStore& interval_store,
                                   const ParamVector& initial_model,
                                   const std::vector<Dataset>& client_data,
                                   const std::set<int>& malicious, const LocalTrainConfig& local,
                                   std::uint64_t master_seed, const Dataset& loss_data,
                                   const RecoveryLogger& log = nullptr) {
    require(!interval_store.records.empty(), "run_federaser: empty interval store");
    return detail::calibrated_replay(interval_store, std::nullopt, initial_model, client_data,
                                     malicious, local, master_seed, loss_data, log);
}

}  // namespace crab
