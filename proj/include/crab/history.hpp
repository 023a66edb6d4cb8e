#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/model.hpp"
#include "crab/paramvec.hpp"

namespace crab {

struct StorageConfig {
    double alpha = 0.1;         // per-window loss reduction
    double round_ratio = 0.6;   // lambda
    double client_ratio = 0.7;  // delta
    Dataset refset;             // server-held reference set for output distributions
    double epsilon = 1e-12;     // smoothing floor before logs

    void validate() const {
        require(alpha > 0.0 && alpha < 1.0, "StorageConfig: alpha in (0,1)");
        require(round_ratio > 0.0 && round_ratio <= 1.0, "StorageConfig: round_ratio in (0,1]");
        require(client_ratio > 0.0 && client_ratio <= 1.0, "StorageConfig: client_ratio in (0,1]");
        require(!refset.empty(), "StorageConfig: refset non-empty");
        require(epsilon > 0.0, "StorageConfig: epsilon > 0");
    }
};

// One completed training round as buffered by the orchestrator.
struct RoundOutcome {
    std::size_t round = 0;
    ParamVector model_after;                  // M_{t+1}
    std::map<int, ParamVector> client_updates;
    ParamVector aggregated;                   // G_t
    double global_loss = 0.0;                 // F(M_{t+1})
};

// Stored round t_j: model snapshot plus the selected clients' updates.
struct RoundRecord {
    std::size_t round_index = 0;
    ParamVector model;                 // M-bar_{t_j}
    std::vector<int> client_ids;       // selected, ascending
    std::vector<ParamVector> client_updates;
    std::vector<std::size_t> client_sizes;
    ParamVector selected_aggregate;    // G-bar_{t_j}, FedAvg over the selected clients
    double kl_score = 0.0;

    bool operator==(const RoundRecord&) const = default;
};

struct HistoryStore {
    ModelArch arch;
    StorageConfig config;
    std::vector<RoundRecord> records;  // strictly increasing round_index

    std::size_t stored_rounds() const { return records.size(); }
    std::size_t stored_client_entries() const {
        std::size_t n = 0;
        for (const auto& r : records) n += r.client_ids.size();
        return n;
    }
};

// Mean softmax output over the reference set, floored at eps and renormalized.
inline std::vector<double> output_distribution(const ParamVector& model, const ModelArch& arch,
                                               const Dataset& refset, double eps = 1e-12) {
    if (refset.empty()) throw EmptyInputError("output_distribution: empty refset");
    std::vector<double> mean(arch.num_classes, 0.0);
    for (std::size_t i = 0; i < refset.size(); ++i) {
        auto p = predict_proba(model, arch, refset.row(i));
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += p[k];
    }
    double sum = 0.0;
    for (double& v : mean) {
        v = std::max(v / static_cast<double>(refset.size()), eps);
        sum += v;
    }
    for (double& v : mean) v /= sum;
    return mean;
}

// sum_k p_k * ln(p_k / q_k)
inline double kl_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    require(p.size() == q.size(), "kl_divergence: length mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) s += p[k] * std::log(p[k] / q[k]);
    return std::max(s, 0.0);
}

// Expected number of loss-reduction windows: floor(ln(1-gamma)/ln(1-alpha)), min 1.
inline std::size_t window_count(double gamma, double alpha) {
    require(gamma > 0.0 && gamma < 1.0, "window_count: gamma in (0,1)");
    require(alpha > 0.0 && alpha < 1.0, "window_count: alpha in (0,1)");
    double b = std::floor(std::log1p(-gamma) / std::log1p(-alpha));
    return b < 1.0 ? 1 : static_cast<std::size_t>(b);
}

// Cosine similarity of a client update against the aggregated update.
// Zero-norm inputs score 0 (a vanishing update contributes nothing).
inline double contribution_score(const ParamVector& g, const ParamVector& G) {
    check_same_length(g, G, "contribution_score");
    double ng = l2_norm(g), nG = l2_norm(G);
    if (ng == 0.0 || nG == 0.0) return 0.0;
    return dot(g, G) / (ng * nG);
}

inline std::size_t ceil_ratio_at_least_one(double ratio, std::size_t n) {
    auto v = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n)));
    return std::max<std::size_t>(v, 1);
}

namespace detail {

// FedAvg over a subset of updates, weights |D_c| / sum |D_c|.
inline ParamVector aggregate_selected(const std::vector<int>& ids,
                                      const std::map<int, ParamVector>& updates,
                                      const std::map<int, std::size_t>& sizes) {
    double total = 0.0;
    for (int c : ids) total += static_cast<double>(sizes.at(c));
    require(total > 0.0, "aggregate_selected: zero total size");
    ParamVector out(updates.at(ids.front()).size(), 0.0);
    for (int c : ids) axpy_inplace(out, static_cast<double>(sizes.at(c)) / total, updates.at(c));
    return out;
}

}  // namespace detail

// SelectStore over one closed window: KL round selection then cosine client
// selection. The last buffered model pairs with `next_model` when the next
// window's first global model already exists; on the final flush it pairs
// with itself (score 0). `max_records` caps the selection so the orchestrator
// can hold the overall store at ceil(lambda * T) rounds.
inline std::vector<RoundRecord> close_window(const std::vector<RoundOutcome>& buffer,
                                             const StorageConfig& cfg, const ModelArch& arch,
                                             const std::map<int, std::size_t>& client_sizes,
                                             const std::optional<ParamVector>& next_model,
                                             std::size_t max_records = SIZE_MAX) {
    require(!buffer.empty(), "close_window: empty buffer");
    cfg.validate();

    std::vector<std::vector<double>> dists(buffer.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) {
        dists[i] = output_distribution(buffer[i].model_after, arch, cfg.refset, cfg.epsilon);
    }

    std::vector<double> scores(buffer.size(), 0.0);
    for (std::size_t i = 0; i + 1 < buffer.size(); ++i) {
        scores[i] = kl_divergence(dists[i], dists[i + 1]);
    }
    if (next_model) {
        scores.back() = kl_divergence(
            dists.back(), output_distribution(*next_model, arch, cfg.refset, cfg.epsilon));
    }

    std::size_t p = std::min(ceil_ratio_at_least_one(cfg.round_ratio, buffer.size()), max_records);
    std::vector<std::size_t> order(buffer.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(std::min(p, order.size()));
    std::sort(order.begin(), order.end());

    std::vector<RoundRecord> out;
    out.reserve(order.size());
    for (std::size_t i : order) {
        const RoundOutcome& rd = buffer[i];
        std::size_t x = ceil_ratio_at_least_one(cfg.client_ratio, rd.client_updates.size());

        std::vector<int> ids;
        ids.reserve(rd.client_updates.size());
        for (const auto& [c, _] : rd.client_updates) ids.push_back(c);
        std::vector<double> cscore(ids.size());
        for (std::size_t k = 0; k < ids.size(); ++k) {
            cscore[k] = contribution_score(rd.client_updates.at(ids[k]), rd.aggregated);
        }
        std::vector<std::size_t> corder(ids.size());
        for (std::size_t k = 0; k < corder.size(); ++k) corder[k] = k;
        std::stable_sort(corder.begin(), corder.end(), [&cscore](std::size_t a, std::size_t b) {
            return cscore[a] > cscore[b];
        });
        corder.resize(std::min(x, corder.size()));

        RoundRecord rec;
        rec.round_index = rd.round;
        rec.model = rd.model_after;
        rec.kl_score = scores[i];
        std::vector<int> selected;
        for (std::size_t k : corder) selected.push_back(ids[k]);
        std::sort(selected.begin(), selected.end());
        for (int c : selected) {
            rec.client_ids.push_back(c);
            rec.client_updates.push_back(rd.client_updates.at(c));
            rec.client_sizes.push_back(client_sizes.at(c));
        }
        rec.selected_aggregate = detail::aggregate_selected(selected, rd.client_updates, client_sizes);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- persistence: <dir>/manifest.json + <dir>/blobs.bin -------------------

namespace detail {

struct BlobWriter {
    std::ofstream out;
    std::size_t offset = 0;  // in doubles

    explicit BlobWriter(const std::filesystem::path& p) : out(p, std::ios::binary) {
        if (!out) throw IoError("cannot open for write: " + p.string());
    }

    nlohmann::json put(const std::vector<double>& v) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!out) throw IoError("blob write failed");
        nlohmann::json ref{{"offset", offset}, {"length", v.size()}};
        offset += v.size();
        return ref;
    }
};

struct BlobReader {
    std::vector<double> data;

    explicit BlobReader(const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw IoError("cannot open for read: " + p.string());
        in.seekg(0, std::ios::end);
        auto bytes = static_cast<std::size_t>(in.tellg());
        if (bytes % sizeof(double) != 0) throw MalformedSnapshotError("blob size not a multiple of 8");
        in.seekg(0);
        data.resize(bytes / sizeof(double));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(bytes));
        if (!in) throw IoError("blob read failed");
    }

    std::vector<double> get(const nlohmann::json& ref) const {
        std::size_t off = ref.at("offset").get<std::size_t>();
        std::size_t len = ref.at("length").get<std::size_t>();
        if (off + len > data.size()) throw MalformedSnapshotError("blob reference out of range");
        return {data.begin() + static_cast<std::ptrdiff_t>(off),
                data.begin() + static_cast<std::ptrdiff_t>(off + len)};
    }
};

inline nlohmann::json arch_to_json(const ModelArch& a) {
    return {{"kind", a.kind == ArchKind::logreg ? "logreg" : "mlp1"},
            {"input_dim", a.input_dim},
            {"hidden_dim", a.hidden_dim},
            {"num_classes", a.num_classes}};
}

inline ModelArch arch_from_json(const nlohmann::json& j) {
    ModelArch a;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "logreg") a.kind = ArchKind::logreg;
    else if (kind == "mlp1") a.kind = ArchKind::mlp1;
    else throw MalformedSnapshotError("unknown arch kind: " + kind);
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    return a;
}

}  // namespace detail

inline void persist(const HistoryStore& store, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    detail::BlobWriter blobs(dir / "blobs.bin");

    nlohmann::json manifest;
    manifest["format"] = "crab-history-v1";
    manifest["arch"] = detail::arch_to_json(store.arch);
    manifest["config"] = {
        {"alpha", store.config.alpha},
        {"round_ratio", store.config.round_ratio},
        {"client_ratio", store.config.client_ratio},
        {"epsilon", store.config.epsilon},
        {"refset",
         {{"input_dim", store.config.refset.input_dim},
          {"owner", store.config.refset.owner},
          {"labels", store.config.refset.labels},
          {"features", blobs.put(store.config.refset.features)}}},
    };
    manifest["records"] = nlohmann::json::array();
    for (const auto& rec : store.records) {
        nlohmann::json clients = nlohmann::json::array();
        for (std::size_t k = 0; k < rec.client_ids.size(); ++k) {
            clients.push_back({{"id", rec.client_ids[k]},
                               {"size", rec.client_sizes[k]},
                               {"update", blobs.put(rec.client_updates[k])}});
        }
        manifest["records"].push_back({{"round", rec.round_index},
                                       {"kl_score", rec.kl_score},
                                       {"model", blobs.put(rec.model)},
                                       {"aggregate", blobs.put(rec.selected_aggregate)},
                                       {"clients", std::move(clients)}});
    }

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
    mf << manifest.dump(2) << '\n';
    if (!mf) throw IoError("manifest write failed");
}

inline HistoryStore load_history(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot open manifest: " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedSnapshotError(std::string("manifest parse error: ") + e.what());
    }
    try {
        if (manifest.at("format").get<std::string>() != "crab-history-v1")
            throw MalformedSnapshotError("unknown snapshot format");
        detail::BlobReader blobs(dir / "blobs.bin");

        HistoryStore store;
        store.arch = detail::arch_from_json(manifest.at("arch"));
        const auto& jc = manifest.at("config");
        store.config.alpha = jc.at("alpha").get<double>();
        store.config.round_ratio = jc.at("round_ratio").get<double>();
        store.config.client_ratio = jc.at("client_ratio").get<double>();
        store.config.epsilon = jc.at("epsilon").get<double>();
        const auto& jr = jc.at("refset");
        store.config.refset.input_dim = jr.at("input_dim").get<std::size_t>();
        store.config.refset.owner = jr.at("owner").get<std::string>();
        store.config.refset.labels = jr.at("labels").get<std::vector<int>>();
        store.config.refset.features = blobs.get(jr.at("features"));

        for (const auto& r : manifest.at("records")) {
            RoundRecord rec;
            rec.round_index = r.at("round").get<std::size_t>();
            rec.kl_score = r.at("kl_score").get<double>();
            rec.model = blobs.get(r.at("model"));
            rec.selected_aggregate = blobs.get(r.at("aggregate"));
            for (const auto& c : r.at("clients")) {
                rec.client_ids.push_back(c.at("id").get<int>());
                rec.client_sizes.push_back(c.at("size").get<std::size_t>());
                rec.client_updates.push_back(blobs.get(c.at("update")));
            }
            store.records.push_back(std::move(rec));
        }
        return store;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedSnapshotError(std::string("malformed manifest: ") + e.what());
    }
}

inline bool operator==(const StorageConfig& a, const StorageConfig& b) {
    return a.alpha == b.alpha && a.round_ratio == b.round_ratio && a.client_ratio == b.client_ratio &&
           a.epsilon == b.epsilon && a.refset.input_dim == b.refset.input_dim &&
           a.refset.features == b.refset.features && a.refset.labels == b.refset.labels &&
           a.refset.owner == b.refset.owner;
}

inline bool operator==(const HistoryStore& a, const HistoryStore& b) {
    return a.arch == b.arch && a.config == b.config && a.records == b.records;
}

}  // namespace crab
