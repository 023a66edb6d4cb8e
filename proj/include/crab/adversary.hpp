#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/paramvec.hpp"
#include "crab/rng.hpp"

namespace crab {

enum class AttackKind { none, trim, backdoor };
enum class TrimMode { gaussian_noise, replace_random };

struct TriggerSpec {
    std::size_t patch_rows = 4;
    std::size_t patch_cols = 4;
    double value = 1.0;       // white pixel
    std::size_t image_side = 28;

    void validate() const {
        require(patch_rows >= 1 && patch_cols >= 1 && image_side >= 1, "TriggerSpec: positive sizes");
        require(patch_rows <= image_side && patch_cols <= image_side, "TriggerSpec: patch exceeds image");
        require(value >= 0.0 && value <= 1.0, "TriggerSpec: value in [0,1]");
    }
};

struct AttackConfig {
    AttackKind kind = AttackKind::none;
    double param_fraction = 0.1;       // trim: fraction of coordinates perturbed
    TrimMode trim_mode = TrimMode::gaussian_noise;
    double noise_sigma = 0.5;
    TriggerSpec trigger;
    int target_label = 0;
    double poison_data_fraction = 0.5;

    void validate() const {
        require(param_fraction >= 0.0 && param_fraction <= 1.0, "AttackConfig: param_fraction in [0,1]");
        require(poison_data_fraction >= 0.0 && poison_data_fraction <= 1.0,
                "AttackConfig: poison_data_fraction in [0,1]");
        if (kind == AttackKind::trim) require(noise_sigma > 0.0, "AttackConfig: noise_sigma > 0");
        if (kind == AttackKind::backdoor) trigger.validate();
    }
};

// Trim attack on an uploaded update: perturb ceil(fraction * len) seed-chosen
// coordinates, leave the rest bit-identical.
inline ParamVector poison_trim(const ParamVector& update, const AttackConfig& cfg, Rng& rng) {
    require(cfg.kind == AttackKind::trim, "poison_trim: kind must be trim");
    cfg.validate();
    ParamVector out(update);
    std::size_t count = static_cast<std::size_t>(
        std::ceil(cfg.param_fraction * static_cast<double>(update.size())));
    if (count == 0) return out;
    for (std::size_t i : rng.sample_indices(update.size(), count)) {
        if (cfg.trim_mode == TrimMode::gaussian_noise) {
            out[i] += rng.normal(0.0, cfg.noise_sigma);
        } else {
            out[i] = rng.uniform(-1.0, 1.0);
        }
    }
    return out;
}

// Bottom-right patch_rows x patch_cols block set to `value` (row-major image).
inline std::vector<double> embed_trigger(std::span<const double> x, const TriggerSpec& spec) {
    spec.validate();
    require(x.size() == spec.image_side * spec.image_side, "embed_trigger: row length != image_side^2");
    std::vector<double> out(x.begin(), x.end());
    for (std::size_t r = spec.image_side - spec.patch_rows; r < spec.image_side; ++r) {
        for (std::size_t c = spec.image_side - spec.patch_cols; c < spec.image_side; ++c) {
            out[r * spec.image_side + c] = spec.value;
        }
    }
    return out;
}

// Backdoor data poisoning: a seed-chosen fraction of samples get the trigger
// and the target label; size and sample order unchanged.
inline Dataset make_backdoor_dataset(const Dataset& data, const AttackConfig& cfg, Rng& rng) {
    require(cfg.kind == AttackKind::backdoor, "make_backdoor_dataset: kind must be backdoor");
    cfg.validate();
    Dataset out(data);
    std::size_t count = static_cast<std::size_t>(
        std::llround(cfg.poison_data_fraction * static_cast<double>(data.size())));
    for (std::size_t i : rng.sample_indices(data.size(), count)) {
        auto triggered = embed_trigger(data.row(i), cfg.trigger);
        std::copy(triggered.begin(), triggered.end(), out.row(i).begin());
        out.labels[i] = cfg.target_label;
    }
    return out;
}

}  // namespace crab
