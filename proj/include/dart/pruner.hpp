// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dart/model.hpp"

namespace dart {

struct SubBlockId {
    std::size_t block = 0;
    SubBlockKind kind = SubBlockKind::Attn;

    // Candidate order: block ascending, attention before MLP.
    auto operator<=>(const SubBlockId&) const = default;
};

std::string to_string(const SubBlockId& id);

struct PruneStep {
    SubBlockId id;
    double delta = 0.0;  // reconstruction loss after this removal
};

struct PruningPlan {
    std::vector<PruneStep> steps;
    std::set<std::size_t> protected_blocks;
    bool protect_attn_only = false;
    std::uint64_t calib_fingerprint = 0;
    std::uint64_t model_seed = 0;

    std::vector<SubBlockId> removed() const;
};

struct PruneOptions {
    /// Protected block indices; defaults to the model's global blocks.
    std::optional<std::set<std::size_t>> protected_blocks;
    /// Protect only the attention half of each protected block.
    bool protect_attn_only = false;
    /// Reuse cached trunk prefixes across candidates. Produces the same plan.
    bool memoized = false;
    /// Worker threads for candidate evaluation within a step.
    std::size_t jobs = 1;
};

/// Prunable sub-blocks in candidate order.
std::vector<SubBlockId> prune_candidates(const DetectorModel& model,
                                         const std::set<std::size_t>& protected_blocks,
                                         bool protect_attn_only = false);

/// Unpruned fp32 FPN features of every calibration image.
std::vector<FpnFeatures> reference_features(const DetectorModel& model,
                                            const std::vector<Tensor>& calib);

/// Sum over images and FPN levels of the (unsquared) L2 distance between the
/// features of `model` with `removed` disabled and `reference`. Fp32.
double reconstruction_loss(const DetectorModel& model, const std::vector<SubBlockId>& removed,
                           const std::vector<Tensor>& calib,
                           const std::vector<FpnFeatures>& reference);

/// Greedy pruning: K rounds, each removing the candidate with the lowest
/// reconstruction loss. Ties go to the earliest candidate.
PruningPlan greedy_prune(const DetectorModel& model, const std::vector<Tensor>& calib,
                         std::size_t k, const PruneOptions& options = {});

/// Copy of `model` with the plan's sub-blocks disabled.
DetectorModel apply_plan(const DetectorModel& model, const PruningPlan& plan);

/// Copy of `model` with every sub-block enabled.
DetectorModel restore_all(const DetectorModel& model);

std::uint64_t calib_fingerprint(const std::vector<Tensor>& calib);

/// Default calibration set: 8 synthetic scenes.
std::vector<Tensor> default_calibration(std::size_t count = 8, std::size_t image_size = 64);

std::string plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const std::string& text);

}  // namespace dart
