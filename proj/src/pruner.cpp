// SPDX-License-Identifier: Apache-2.0
#include "dart/pruner.hpp"

#include <algorithm>
#include <cstdio>

#include "dart/parallel.hpp"
#include "dart/scene.hpp"
#include "json.hpp"

namespace dart {

namespace {

constexpr std::uint64_t kCalibrationSeed = 1000;

void set_enabled(DetectorModel& model, const SubBlockId& id, bool enabled) {
    if (id.block >= model.blocks.size()) {
        throw std::out_of_range("sub-block " + to_string(id) + " is outside the " +
                                std::to_string(model.blocks.size()) + "-block backbone");
    }
    auto& b = model.blocks[id.block];
    (id.kind == SubBlockKind::Attn ? b.attn_enabled : b.mlp_enabled) = enabled;
}

DetectorModel with_removed(const DetectorModel& model, const std::vector<SubBlockId>& removed) {
    DetectorModel m = model;
    for (const auto& id : removed) set_enabled(m, id, false);
    return m;
}

double fpn_distance(const FpnFeatures& a, const FpnFeatures& b) {
    double total = 0.0;
    for (std::size_t l = 0; l < 3; ++l) total += l2_distance(a.levels[l], b.levels[l]);
    return total;
}

void check_reference(const std::vector<Tensor>& calib, const std::vector<FpnFeatures>& reference) {
    if (calib.empty()) throw std::invalid_argument("calibration set is empty");
    if (calib.size() != reference.size()) {
        throw std::invalid_argument("calibration set has " + std::to_string(calib.size()) +
                                    " images but reference has " + std::to_string(reference.size()));
    }
}

/// Trunk state entering each sub-block position (2*block + kind) for one
/// image, plus the final trunk at index 2*num_blocks.
std::vector<Tensor> trunk_states(const DetectorModel& model, const Tensor& image) {
    std::vector<Tensor> states;
    Tensor x = embed_patches(model, image, PrecisionMode::Fp32);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        for (auto kind : {SubBlockKind::Attn, SubBlockKind::Mlp}) {
            states.push_back(x);
            x = apply_sub_block(model, l, kind, x, PrecisionMode::Fp32);
        }
    }
    states.push_back(x);
    return states;
}

std::size_t position(const SubBlockId& id) {
    return 2 * id.block + (id.kind == SubBlockKind::Attn ? 0 : 1);
}

/// Loss of removing `candidate` from `model`, resuming each image from its
/// cached state at the candidate's position.
double memoized_loss(const DetectorModel& model, const SubBlockId& candidate,
                     const std::vector<std::vector<Tensor>>& states,
                     const std::vector<FpnFeatures>& reference) {
    const DetectorModel m = with_removed(model, {candidate});
    const std::size_t start = position(candidate);
    double total = 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
        Tensor x = states[i][start];
        for (std::size_t p = start; p < 2 * m.blocks.size(); ++p) {
            const auto kind = p % 2 == 0 ? SubBlockKind::Attn : SubBlockKind::Mlp;
            x = apply_sub_block(m, p / 2, kind, x, PrecisionMode::Fp32);
        }
        total += fpn_distance(project_fpn(m, x, PrecisionMode::Fp32), reference[i]);
    }
    return total;
}

}  // namespace

std::string to_string(const SubBlockId& id) {
    return std::to_string(id.block) + "." + to_string(id.kind);
}

std::vector<SubBlockId> PruningPlan::removed() const {
    std::vector<SubBlockId> out;
    for (const auto& s : steps) out.push_back(s.id);
    return out;
}

std::vector<SubBlockId> prune_candidates(const DetectorModel& model,
                                         const std::set<std::size_t>& protected_blocks,
                                         bool protect_attn_only) {
    std::vector<SubBlockId> out;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const bool prot = protected_blocks.count(l) > 0;
        if (!prot) out.push_back({l, SubBlockKind::Attn});
        if (!prot || protect_attn_only) out.push_back({l, SubBlockKind::Mlp});
    }
    return out;
}

std::vector<FpnFeatures> reference_features(const DetectorModel& model,
                                            const std::vector<Tensor>& calib) {
    std::vector<FpnFeatures> out;
    for (const auto& img : calib) out.push_back(backbone_forward(model, img, PrecisionMode::Fp32));
    return out;
}

double reconstruction_loss(const DetectorModel& model, const std::vector<SubBlockId>& removed,
                           const std::vector<Tensor>& calib,
                           const std::vector<FpnFeatures>& reference) {
    check_reference(calib, reference);
    const DetectorModel m = with_removed(model, removed);
    double total = 0.0;
    for (std::size_t i = 0; i < calib.size(); ++i) {
        total += fpn_distance(backbone_forward(m, calib[i], PrecisionMode::Fp32), reference[i]);
    }
    return total;
}

PruningPlan greedy_prune(const DetectorModel& model, const std::vector<Tensor>& calib,
                         std::size_t k, const PruneOptions& options) {
    PruningPlan plan;
    plan.protected_blocks = options.protected_blocks.value_or(model.config.global_blocks);
    plan.protect_attn_only = options.protect_attn_only;
    plan.calib_fingerprint = calib_fingerprint(calib);
    plan.model_seed = model.config.seed;
    for (auto b : plan.protected_blocks) {
        if (b >= model.blocks.size()) {
            throw std::invalid_argument("protected block " + std::to_string(b) + " is out of range");
        }
    }

    std::vector<SubBlockId> alive =
        prune_candidates(model, plan.protected_blocks, plan.protect_attn_only);
    if (k > alive.size()) {
        throw std::invalid_argument("K=" + std::to_string(k) + " exceeds the candidate budget of " +
                                    std::to_string(alive.size()) + " prunable sub-blocks");
    }
    if (k == 0) return plan;

    const auto reference = reference_features(model, calib);
    DetectorModel current = model;
    for (std::size_t step = 0; step < k; ++step) {
        std::vector<double> losses(alive.size());
        if (options.memoized) {
            std::vector<std::vector<Tensor>> states;
            for (const auto& img : calib) states.push_back(trunk_states(current, img));
            parallel_for(alive.size(), options.jobs, [&](std::size_t i) {
                losses[i] = memoized_loss(current, alive[i], states, reference);
            });
        } else {
            parallel_for(alive.size(), options.jobs, [&](std::size_t i) {
                losses[i] = reconstruction_loss(current, {alive[i]}, calib, reference);
            });
        }
        std::size_t best = 0;
        for (std::size_t i = 1; i < alive.size(); ++i) {
            if (losses[i] < losses[best]) best = i;
        }
        plan.steps.push_back({alive[best], losses[best]});
        set_enabled(current, alive[best], false);
        alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(best));
    }
    return plan;
}

DetectorModel apply_plan(const DetectorModel& model, const PruningPlan& plan) {
    std::set<SubBlockId> seen;
    for (const auto& s : plan.steps) {
        const bool prot = plan.protected_blocks.count(s.id.block) > 0 &&
                          (!plan.protect_attn_only || s.id.kind == SubBlockKind::Attn);
        if (prot) {
            throw std::invalid_argument("plan removes " + to_string(s.id) +
                                        ", which belongs to a protected block");
        }
        if (!seen.insert(s.id).second) {
            throw std::invalid_argument("plan lists " + to_string(s.id) + " twice");
        }
    }
    return with_removed(model, plan.removed());
}

DetectorModel restore_all(const DetectorModel& model) {
    DetectorModel m = model;
    for (auto& b : m.blocks) b.attn_enabled = b.mlp_enabled = true;
    return m;
}

std::uint64_t calib_fingerprint(const std::vector<Tensor>& calib) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& img : calib) h = fingerprint(img, h);
    return h;
}

std::vector<Tensor> default_calibration(std::size_t count, std::size_t image_size) {
    return synthetic_images(kCalibrationSeed, count, image_size);
}

std::string plan_to_json(const PruningPlan& plan) {
    nlohmann::ordered_json j;
    j["model_seed"] = plan.model_seed;
    char fp[17];
    std::snprintf(fp, sizeof fp, "%016llx", static_cast<unsigned long long>(plan.calib_fingerprint));
    j["calib_fingerprint"] = fp;
    j["protected"] = std::vector<std::size_t>(plan.protected_blocks.begin(), plan.protected_blocks.end());
    j["protect_attn_only"] = plan.protect_attn_only;
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : plan.steps) {
        j["steps"].push_back({{"block", s.id.block}, {"kind", to_string(s.id.kind)}, {"delta", s.delta}});
    }
    return j.dump(2);
}

PruningPlan plan_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    PruningPlan plan;
    plan.model_seed = j.at("model_seed").get<std::uint64_t>();
    plan.calib_fingerprint = std::stoull(j.at("calib_fingerprint").get<std::string>(), nullptr, 16);
    for (auto b : j.at("protected")) plan.protected_blocks.insert(b.get<std::size_t>());
    plan.protect_attn_only = j.value("protect_attn_only", false);
    for (const auto& s : j.at("steps")) {
        plan.steps.push_back({{s.at("block").get<std::size_t>(),
                               sub_block_kind_from_string(s.at("kind").get<std::string>())},
                              s.at("delta").get<double>()});
    }
    return plan;
}

}  // namespace dart
