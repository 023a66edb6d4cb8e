#pragma once

#include <optional>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "crab/errors.hpp"
#include "crab/history.hpp"
#include "crab/paramvec.hpp"

namespace crab {

// Influence of a client subset at a stored round: the size-weighted sum of
// deviations of their stored updates from the previous stored round's
// aggregated update. Weights renormalize over the subset itself.
inline ParamVector influence(const RoundRecord& rec, const ParamVector& prev_agg,
                             const std::set<int>& client_subset) {
    ParamVector out(rec.model.size(), 0.0);
    if (client_subset.empty()) return out;

    double total = 0.0;
    for (std::size_t k = 0; k < rec.client_ids.size(); ++k) {
        if (client_subset.contains(rec.client_ids[k])) {
            total += static_cast<double>(rec.client_sizes[k]);
        }
    }
    std::size_t hits = 0;
    for (int id : rec.client_ids) hits += client_subset.contains(id) ? 1 : 0;
    require(hits == client_subset.size(), "influence: subset client not stored in record");
    if (total == 0.0) return out;

    for (std::size_t k = 0; k < rec.client_ids.size(); ++k) {
        if (!client_subset.contains(rec.client_ids[k])) continue;
        double w = static_cast<double>(rec.client_sizes[k]) / total;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += w * (rec.client_updates[k][i] - prev_agg[i]);
        }
    }
    return out;
}

namespace detail {

// Per stored round: ||I(selected) - I(selected \ C_u)||_2 and ||I(benign)||_2.
// The aggregate preceding the first stored round is the zero vector.
inline void per_round_influence_norms(const HistoryStore& store, const std::set<int>& malicious,
                                      std::vector<double>& gap_norm,
                                      std::vector<double>& benign_norm) {
    gap_norm.clear();
    benign_norm.clear();
    ParamVector prev_agg;
    for (const auto& rec : store.records) {
        if (prev_agg.empty()) prev_agg.assign(rec.model.size(), 0.0);
        std::set<int> full(rec.client_ids.begin(), rec.client_ids.end());
        std::set<int> benign;
        for (int c : full) {
            if (!malicious.contains(c)) benign.insert(c);
        }
        ParamVector i_full = influence(rec, prev_agg, full);
        ParamVector i_benign = (benign == full) ? i_full : influence(rec, prev_agg, benign);
        gap_norm.push_back((benign == full) ? 0.0 : l2_distance(i_full, i_benign));
        benign_norm.push_back(l2_norm(i_benign));
        prev_agg = rec.selected_aggregate;
    }
}

}  // namespace detail

// Cumulative sensitivity S(C_u, j) over stored indices.
inline std::vector<double> sensitivity(const HistoryStore& store, const std::set<int>& malicious) {
    require(!store.records.empty(), "sensitivity: empty store");
    std::vector<double> gap, benign;
    detail::per_round_influence_norms(store, malicious, gap, benign);
    double acc = 0.0;
    for (double& v : gap) {
        acc += v;
        v = acc;
    }
    return gap;
}

// Adaptive threshold Phi(j) = beta * cumulative l2 norm of benign influence.
inline std::vector<double> threshold(const HistoryStore& store, const std::set<int>& malicious,
                                     double beta) {
    require(!store.records.empty(), "threshold: empty store");
    require(beta > 0.0 && beta <= 1.0, "threshold: beta in (0,1]");
    std::vector<double> gap, benign;
    detail::per_round_influence_norms(store, malicious, gap, benign);
    double acc = 0.0;
    for (double& v : benign) {
        acc += v;
        v = beta * acc;
    }
    return benign;
}

// Largest stored index j with S(j) <= Phi(j); nullopt means "roll back to the
// initial model".
inline std::optional<std::size_t> select_rollback(const std::vector<double>& s,
                                                  const std::vector<double>& phi) {
    require(!s.empty() && s.size() == phi.size(), "select_rollback: bad sequences");
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < s.size(); ++j) {
        if (s[j] <= phi[j]) best = j;
    }
    return best;
}

struct SensitivityReport {
    std::vector<double> sensitivity;  // S(C_u, j) per stored index
    std::vector<double> threshold;    // Phi(j)
    std::optional<std::size_t> rollback_index;  // nullopt = initial model
    double beta = 0.0;
};

inline SensitivityReport analyze_rollback(const HistoryStore& store, const std::set<int>& malicious,
                                          double beta) {
    SensitivityReport rep;
    rep.beta = beta;
    rep.sensitivity = sensitivity(store, malicious);
    rep.threshold = threshold(store, malicious, beta);
    rep.rollback_index = select_rollback(rep.sensitivity, rep.threshold);
    return rep;
}

inline nlohmann::json to_json(const SensitivityReport& rep) {
    nlohmann::json j;
    j["beta"] = rep.beta;
    j["sensitivity"] = rep.sensitivity;
    j["threshold"] = rep.threshold;
    if (rep.rollback_index) j["rollback_index"] = *rep.rollback_index;
    else j["rollback_index"] = "initial";
    return j;
}

}  // namespace crab
