#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/paramvec.hpp"
#include "crab/rng.hpp"

namespace crab {

enum class ArchKind { logreg, mlp1 };

// Multinomial logistic regression or one-hidden-layer tanh MLP.
// Parameter layout:
//   logreg: W (K x d, row-major), b (K)
//   mlp1:   W1 (h x d), b1 (h), W2 (K x h), b2 (K)
struct ModelArch {
    ArchKind kind = ArchKind::logreg;
    std::size_t input_dim = 1;
    std::size_t hidden_dim = 0;  // 0 for logreg
    std::size_t num_classes = 2;

    std::size_t param_count() const {
        if (kind == ArchKind::logreg) return num_classes * input_dim + num_classes;
        return hidden_dim * input_dim + hidden_dim + num_classes * hidden_dim + num_classes;
    }

    void validate() const {
        require(num_classes >= 2, "ModelArch: num_classes >= 2");
        require(input_dim >= 1, "ModelArch: input_dim >= 1");
        if (kind == ArchKind::mlp1) require(hidden_dim >= 1, "ModelArch: mlp1 needs hidden_dim >= 1");
        if (kind == ArchKind::logreg) require(hidden_dim == 0, "ModelArch: logreg has hidden_dim 0");
    }

    bool operator==(const ModelArch&) const = default;
};

struct LocalTrainConfig {
    std::size_t epochs = 5;
    double learning_rate = 0.005;
    std::size_t batch_size = 64;
    std::uint64_t rng_seed = 0;

    void validate() const {
        require(epochs >= 1, "LocalTrainConfig: epochs >= 1");
        require(learning_rate > 0.0, "LocalTrainConfig: learning_rate > 0");
        require(batch_size >= 1, "LocalTrainConfig: batch_size >= 1");
    }
};

// Weights uniform in [-0.05, 0.05], biases zero.
inline ParamVector init_model(const ModelArch& arch, std::uint64_t seed) {
    arch.validate();
    Rng rng(seed);
    ParamVector m(arch.param_count(), 0.0);
    auto fill = [&rng, &m](std::size_t begin, std::size_t count) {
        for (std::size_t i = begin; i < begin + count; ++i) m[i] = rng.uniform(-0.05, 0.05);
    };
    if (arch.kind == ArchKind::logreg) {
        fill(0, arch.num_classes * arch.input_dim);
    } else {
        fill(0, arch.hidden_dim * arch.input_dim);
        fill(arch.hidden_dim * arch.input_dim + arch.hidden_dim, arch.num_classes * arch.hidden_dim);
    }
    return m;
}

namespace detail {

inline void softmax_inplace(std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : logits) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : logits) v /= sum;
}

// Forward pass; fills hidden activations for mlp1 (tanh outputs).
inline void forward(const ParamVector& model, const ModelArch& arch, std::span<const double> x,
                    std::vector<double>& hidden, std::vector<double>& probs) {
    const std::size_t d = arch.input_dim, K = arch.num_classes;
    probs.assign(K, 0.0);
    if (arch.kind == ArchKind::logreg) {
        for (std::size_t k = 0; k < K; ++k) {
            const double* w = model.data() + k * d;
            double z = model[K * d + k];
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
            probs[k] = z;
        }
    } else {
        const std::size_t h = arch.hidden_dim;
        const double* w1 = model.data();
        const double* b1 = model.data() + h * d;
        const double* w2 = model.data() + h * d + h;
        const double* b2 = model.data() + h * d + h + K * h;
        hidden.assign(h, 0.0);
        for (std::size_t i = 0; i < h; ++i) {
            double z = b1[i];
            const double* row = w1 + i * d;
            for (std::size_t j = 0; j < d; ++j) z += row[j] * x[j];
            hidden[i] = std::tanh(z);
        }
        for (std::size_t k = 0; k < K; ++k) {
            double z = b2[k];
            const double* row = w2 + k * h;
            for (std::size_t i = 0; i < h; ++i) z += row[i] * hidden[i];
            probs[k] = z;
        }
    }
    softmax_inplace(probs);
}

// Accumulates the cross-entropy gradient of one sample into grad (unscaled).
inline void backward_sample(const ParamVector& model, const ModelArch& arch,
                            std::span<const double> x, int label,
                            const std::vector<double>& hidden, const std::vector<double>& probs,
                            ParamVector& grad) {
    const std::size_t d = arch.input_dim, K = arch.num_classes;
    if (arch.kind == ArchKind::logreg) {
        for (std::size_t k = 0; k < K; ++k) {
            double dz = probs[k] - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0);
            double* gw = grad.data() + k * d;
            for (std::size_t j = 0; j < d; ++j) gw[j] += dz * x[j];
            grad[K * d + k] += dz;
        }
    } else {
        const std::size_t h = arch.hidden_dim;
        const double* w2 = model.data() + h * d + h;
        double* g_w1 = grad.data();
        double* g_b1 = grad.data() + h * d;
        double* g_w2 = grad.data() + h * d + h;
        double* g_b2 = grad.data() + h * d + h + K * h;

        std::vector<double> da(h, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            double dz = probs[k] - (static_cast<std::size_t>(label) == k ? 1.0 : 0.0);
            double* gw = g_w2 + k * h;
            const double* w2row = w2 + k * h;
            for (std::size_t i = 0; i < h; ++i) {
                gw[i] += dz * hidden[i];
                da[i] += dz * w2row[i];
            }
            g_b2[k] += dz;
        }
        for (std::size_t i = 0; i < h; ++i) {
            double dpre = da[i] * (1.0 - hidden[i] * hidden[i]);
            double* gw = g_w1 + i * d;
            for (std::size_t j = 0; j < d; ++j) gw[j] += dpre * x[j];
            g_b1[i] += dpre;
        }
    }
}

// Mean gradient over the given sample indices of data.
inline ParamVector gradient_indexed(const ParamVector& model, const ModelArch& arch,
                                    const Dataset& data, std::span<const std::size_t> idx) {
    ParamVector grad(arch.param_count(), 0.0);
    std::vector<double> hidden, probs;
    for (std::size_t i : idx) {
        forward(model, arch, data.row(i), hidden, probs);
        backward_sample(model, arch, data.row(i), data.labels[i], hidden, probs, grad);
    }
    scale_inplace(grad, 1.0 / static_cast<double>(idx.size()));
    return grad;
}

}  // namespace detail

inline std::vector<double> predict_proba(const ParamVector& model, const ModelArch& arch,
                                         std::span<const double> x) {
    arch.validate();
    require(model.size() == arch.param_count(), "predict_proba: model length != param_count");
    require(x.size() == arch.input_dim, "predict_proba: row width != input_dim");
    std::vector<double> hidden, probs;
    detail::forward(model, arch, x, hidden, probs);
    return probs;
}

// Mean cross-entropy over the dataset.
inline double loss(const ParamVector& model, const ModelArch& arch, const Dataset& data) {
    if (data.empty()) throw EmptyInputError("loss: empty dataset");
    require(model.size() == arch.param_count(), "loss: model length != param_count");
    std::vector<double> hidden, probs;
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        detail::forward(model, arch, data.row(i), hidden, probs);
        double p = std::max(probs[static_cast<std::size_t>(data.labels[i])], 1e-300);
        total -= std::log(p);
    }
    return total / static_cast<double>(data.size());
}

inline ParamVector gradient(const ParamVector& model, const ModelArch& arch, const Dataset& batch) {
    if (batch.empty()) throw EmptyInputError("gradient: empty batch");
    require(model.size() == arch.param_count(), "gradient: model length != param_count");
    std::vector<std::size_t> idx(batch.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return detail::gradient_indexed(model, arch, batch, idx);
}

// E epochs of mini-batch SGD with seed-derived shuffling; returns the model
// delta (final - initial), i.e. -eta * sum of step gradients.
inline ParamVector local_train(const ParamVector& model, const ModelArch& arch, const Dataset& data,
                               const LocalTrainConfig& cfg) {
    if (data.empty()) throw EmptyInputError("local_train: empty dataset");
    cfg.validate();
    require(model.size() == arch.param_count(), "local_train: model length != param_count");

    Rng rng(cfg.rng_seed);
    ParamVector current(model);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        rng.shuffle(order);
        for (std::size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
            std::size_t n = std::min(cfg.batch_size, order.size() - pos);
            ParamVector g = detail::gradient_indexed(current, arch, data,
                                                     {order.data() + pos, n});
            axpy_inplace(current, -cfg.learning_rate, g);
        }
    }
    ParamVector update = sub(current, model);
    check_finite(update, "local_train update");
    return update;
}

}  // namespace crab
