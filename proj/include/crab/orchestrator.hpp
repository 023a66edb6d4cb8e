#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "crab/adversary.hpp"
#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/history.hpp"
#include "crab/model.hpp"
#include "crab/paramvec.hpp"
#include "crab/rng.hpp"

namespace crab {

struct FlConfig {
    std::size_t num_clients = 20;
    std::size_t rounds = 40;
    LocalTrainConfig local;
    ModelArch arch;
    std::set<int> malicious_ids;  // client ids in [1, C]
    AttackConfig attack;
    StorageConfig storage;
    std::uint64_t master_seed = 0;

    void validate() const {
        require(num_clients >= 1 && rounds >= 1, "FlConfig: positive sizes");
        require(malicious_ids.size() < num_clients, "FlConfig: |C_u| < C");
        for (int c : malicious_ids) {
            require(c >= 1 && static_cast<std::size_t>(c) <= num_clients,
                    "FlConfig: malicious id out of [1, C]");
        }
        local.validate();
        arch.validate();
        attack.validate();
    }
};

// Mutable server-side state across rounds. Client ids are 1-based; dataset
// for client c sits at client_data[c-1].
struct FlState {
    ParamVector model;
    std::vector<Dataset> client_data;
    Dataset pool;  // union of client data, used for the global loss F(M)

    std::map<int, std::size_t> client_sizes() const {
        std::map<int, std::size_t> sizes;
        for (std::size_t i = 0; i < client_data.size(); ++i) {
            sizes[static_cast<int>(i + 1)] = client_data[i].size();
        }
        return sizes;
    }
};

// Hook applied to a malicious client's upload before aggregation.
using AdversaryHook = std::function<ParamVector(int client_id, const ParamVector& update, Rng& rng)>;

inline AdversaryHook make_adversary_hook(const AttackConfig& attack) {
    if (attack.kind == AttackKind::trim) {
        return [attack](int, const ParamVector& u, Rng& rng) { return poison_trim(u, attack, rng); };
    }
    // Backdoor works through data poisoning at setup; uploads pass unchanged.
    return [](int, const ParamVector& u, Rng&) { return u; };
}

// FedAvg: dataset-size-weighted mean of client updates.
inline ParamVector aggregate(const std::map<int, ParamVector>& updates,
                             const std::map<int, std::size_t>& sizes) {
    require(!updates.empty(), "aggregate: empty updates");
    double total = 0.0;
    for (const auto& [c, u] : updates) {
        auto it = sizes.find(c);
        require(it != sizes.end(), "aggregate: key-set mismatch");
        require(it->second > 0, "aggregate: zero client size");
        total += static_cast<double>(it->second);
    }
    ParamVector out(updates.begin()->second.size(), 0.0);
    for (const auto& [c, u] : updates) {
        axpy_inplace(out, static_cast<double>(sizes.at(c)) / total, u);
    }
    return out;
}

// One FL round: local training on every client, adversary hook on malicious
// uploads, FedAvg, M_{t+1} = M_t + G_t (updates already carry the -eta factor).
inline RoundOutcome run_round(FlState& state, const FlConfig& cfg, const AdversaryHook& hook,
                              std::size_t t) {
    RoundOutcome out;
    out.round = t;
    auto sizes = state.client_sizes();
    for (std::size_t i = 0; i < state.client_data.size(); ++i) {
        int c = static_cast<int>(i + 1);
        LocalTrainConfig lc = cfg.local;
        lc.rng_seed = mix_seed(cfg.master_seed, static_cast<std::uint64_t>(c), t);
        ParamVector u = local_train(state.model, cfg.arch, state.client_data[i], lc);
        if (cfg.malicious_ids.contains(c)) {
            Rng rng(mix_seed(cfg.master_seed, 0xadffULL + static_cast<std::uint64_t>(c), t));
            u = hook(c, u, rng);
        }
        out.client_updates.emplace(c, std::move(u));
    }
    out.aggregated = aggregate(out.client_updates, sizes);
    add_inplace(state.model, out.aggregated);
    out.model_after = state.model;
    out.global_loss = loss(state.model, cfg.arch, state.pool);
    return out;
}

struct TrainingResult {
    ParamVector final_model;
    std::vector<double> loss_trajectory;        // F(M_{t+1}) per round
    std::vector<std::size_t> window_boundaries; // last round index of each closed window
    double max_update_grad_norm = 0.0;          // max ||u||/eta seen across clients
};

// Per-round training log sink (round, loss, wall_ms).
using RoundLogger = std::function<void(std::size_t, double, double)>;

// Stage I: T rounds with selective storage. A window closes when
// F(M_{t+1}) <= (1-alpha) * prev_loss; selection is deferred one round so the
// window's last model can pair with the next global model for its KL score.
// An optional interval store captures every dt-th round with all clients.
inline TrainingResult run_training(const FlConfig& cfg, FlState& state, HistoryStore& store,
                                   HistoryStore* interval_store = nullptr,
                                   std::size_t interval_dt = 0,
                                   const RoundLogger& log = nullptr) {
    cfg.validate();
    cfg.storage.validate();
    store.arch = cfg.arch;
    store.config = cfg.storage;
    if (interval_store) {
        require(interval_dt >= 1, "run_training: interval_dt >= 1");
        interval_store->arch = cfg.arch;
        interval_store->config = cfg.storage;
    }

    const std::size_t budget = ceil_ratio_at_least_one(cfg.storage.round_ratio, cfg.rounds);
    const auto sizes = state.client_sizes();
    const AdversaryHook hook = make_adversary_hook(cfg.attack);

    TrainingResult result;
    double prev_loss = loss(state.model, cfg.arch, state.pool);

    std::vector<RoundOutcome> buffer;   // current open window
    std::vector<RoundOutcome> pending;  // closed window awaiting the next global model

    auto flush = [&](std::vector<RoundOutcome>& win, const std::optional<ParamVector>& next) {
        if (win.empty()) return;
        std::size_t room = budget > store.records.size() ? budget - store.records.size() : 0;
        auto recs = close_window(win, cfg.storage, cfg.arch, sizes, next, room);
        for (auto& r : recs) store.records.push_back(std::move(r));
        win.clear();
    };

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        auto start = std::chrono::steady_clock::now();
        RoundOutcome outcome = run_round(state, cfg, hook, t);
        double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - start).count();

        flush(pending, outcome.model_after);

        for (const auto& [c, u] : outcome.client_updates) {
            result.max_update_grad_norm =
                std::max(result.max_update_grad_norm, l2_norm(u) / cfg.local.learning_rate);
        }
        result.loss_trajectory.push_back(outcome.global_loss);
        if (log) log(t, outcome.global_loss, ms);

        if (interval_store && (t + 1) % interval_dt == 0) {
            RoundRecord rec;
            rec.round_index = t;
            rec.model = outcome.model_after;
            for (const auto& [c, u] : outcome.client_updates) {
                rec.client_ids.push_back(c);
                rec.client_updates.push_back(u);
                rec.client_sizes.push_back(sizes.at(c));
            }
            rec.selected_aggregate = outcome.aggregated;
            interval_store->records.push_back(std::move(rec));
        }

        double this_loss = outcome.global_loss;
        buffer.push_back(std::move(outcome));
        if (this_loss <= (1.0 - cfg.storage.alpha) * prev_loss) {
            result.window_boundaries.push_back(t);
            pending = std::move(buffer);
            buffer.clear();
            prev_loss = this_loss;
        }
    }
    // Final flush: no next global model exists.
    flush(pending, std::nullopt);
    if (!buffer.empty()) result.window_boundaries.push_back(cfg.rounds - 1);
    flush(buffer, std::nullopt);

    result.final_model = state.model;
    return result;
}

}  // namespace crab
