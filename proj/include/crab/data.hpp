#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "crab/errors.hpp"
#include "crab/rng.hpp"

namespace crab {

// Labeled feature records, row-major, features expected in [0, 1].
struct Dataset {
    std::size_t input_dim = 0;
    std::vector<double> features;
    std::vector<int> labels;
    std::string owner;

    std::size_t size() const { return labels.size(); }
    bool empty() const { return labels.empty(); }

    std::span<const double> row(std::size_t i) const {
        return {features.data() + i * input_dim, input_dim};
    }
    std::span<double> row(std::size_t i) {
        return {features.data() + i * input_dim, input_dim};
    }

    void push_row(std::span<const double> x, int label) {
        require(x.size() == input_dim, "Dataset::push_row: row width != input_dim");
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
    }

    void validate(std::size_t num_classes) const {
        require(features.size() == labels.size() * input_dim, "Dataset: feature/label size mismatch");
        for (int y : labels) {
            require(y >= 0 && static_cast<std::size_t>(y) < num_classes, "Dataset: label out of range");
        }
    }
};

inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx) {
    Dataset out;
    out.input_dim = d.input_dim;
    out.owner = d.owner;
    out.features.reserve(idx.size() * d.input_dim);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.push_row(d.row(i), d.labels[i]);
    return out;
}

// Seed-shuffled equal shards; the remainder goes to the leading shards.
inline std::vector<Dataset> partition_iid(const Dataset& d, std::size_t num_clients, std::uint64_t seed) {
    require(num_clients >= 1, "partition_iid: num_clients >= 1");
    Rng rng(seed);
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);

    std::vector<Dataset> shards(num_clients);
    std::size_t base = d.size() / num_clients;
    std::size_t extra = d.size() % num_clients;
    std::size_t pos = 0;
    for (std::size_t c = 0; c < num_clients; ++c) {
        std::size_t n = base + (c < extra ? 1 : 0);
        shards[c] = subset(d, std::span<const std::size_t>(idx.data() + pos, n));
        shards[c].owner = "client_" + std::to_string(c + 1);
        pos += n;
    }
    return shards;
}

struct SyntheticSpec {
    std::size_t num_classes = 10;
    std::size_t input_dim = 784;
    std::size_t samples_per_class = 100;
    double cluster_separation = 1.0;  // distance scale between class means
    std::uint64_t seed = 0;
};

// Isotropic Gaussian clusters, one per class, clipped to [0,1].
inline Dataset gen_synthetic(const SyntheticSpec& spec) {
    require(spec.num_classes >= 2 && spec.input_dim >= 1 && spec.samples_per_class >= 1,
            "gen_synthetic: invalid spec");
    constexpr double kNoiseSigma = 0.1;
    Rng rng(spec.seed);

    // Class means: 0.5 + (sep/2) * random unit direction.
    std::vector<std::vector<double>> means(spec.num_classes,
                                           std::vector<double>(spec.input_dim, 0.0));
    for (auto& m : means) {
        double norm2 = 0.0;
        for (double& x : m) {
            x = rng.normal();
            norm2 += x * x;
        }
        double s = (spec.cluster_separation / 2.0) / std::max(std::sqrt(norm2), 1e-300);
        for (double& x : m) x = 0.5 + s * x;
    }

    Dataset out;
    out.input_dim = spec.input_dim;
    out.owner = "synthetic";
    std::vector<double> row(spec.input_dim);
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                row[j] = std::clamp(means[k][j] + rng.normal(0.0, kNoiseSigma), 0.0, 1.0);
            }
            out.push_row(row, static_cast<int>(k));
        }
    }

    // Interleave classes so prefix slices stay balanced.
    Rng shuffler(mix_seed(spec.seed, 0x5eedc0deULL));
    std::vector<std::size_t> idx(out.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    shuffler.shuffle(idx);
    return subset(out, idx);
}

}  // namespace crab
