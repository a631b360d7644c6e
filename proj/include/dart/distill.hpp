// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dart/model.hpp"
#include "dart/pipeline.hpp"

namespace dart {

/// Shallow, narrow student sharing the teacher's image, patch and text
/// geometry so FPN token grids line up level by level.
ModelConfig default_student_config(const ModelConfig& teacher, std::uint64_t seed);

/// Affine map of one FPN level: y = x W + b.
struct LevelAdapter {
    Tensor weight;  // [student_dim, teacher_dim]
    Tensor bias;    // [teacher_dim]
};

struct AdapterMeta {
    std::string method;  // "closed-form", "gd", "random", "identity"
    std::size_t steps = 0;
    std::array<double, 3> step_size{};  // per level, gd only
    double lambda = 0.0;
    double final_loss = 0.0;  // distill_loss on the training features
};

struct Adapter {
    std::array<LevelAdapter, 3> levels;
    AdapterMeta meta;
    std::vector<double> loss_curve;  // gd: objective before step 1, then after every step

    std::size_t parameter_count() const;
    /// Exactly three levels with matching shapes and finite values.
    void validate() const;
};

struct DivergenceError : std::runtime_error {
    DivergenceError(std::size_t step, const std::string& what) : std::runtime_error(what), step(step) {}
    std::size_t step;
};

/// Student features pushed through the adapter; metadata copied from `student`.
FpnFeatures apply_adapter(const Adapter& adapter, const FpnFeatures& student);

/// Sum over levels of ||X W + b - Y||_F^2, averaged over images.
double distill_loss(const Adapter& adapter, const std::vector<FpnFeatures>& student,
                    const std::vector<FpnFeatures>& teacher);

/// Backbone features of every image, computed on up to `jobs` threads.
std::vector<FpnFeatures> extract_features(const DetectorModel& model, const std::vector<Tensor>& images,
                                          std::size_t jobs = 1);

/// Ridge least squares per level, penalty lambda * ||W||^2 (the bias is free).
/// Throws when a level has fewer than student_dim + 1 rows, or is rank
/// deficient with lambda = 0.
Adapter fit_adapter_closed_form(const std::vector<FpnFeatures>& student,
                                const std::vector<FpnFeatures>& teacher, double lambda = 1e-6);
Adapter fit_adapter_closed_form(const DetectorModel& student, const DetectorModel& teacher,
                                const std::vector<Tensor>& images, double lambda = 1e-6,
                                std::size_t jobs = 1);

struct GdOptions {
    std::size_t steps = 2000;
    std::optional<double> step_size;  // default: 1 / lambda_max of each level's Hessian
    double lambda = 0.0;
};

/// Full-batch gradient descent from zero. Throws DivergenceError naming the
/// step at which the objective stopped being finite.
Adapter fit_adapter_gd(const std::vector<FpnFeatures>& student, const std::vector<FpnFeatures>& teacher,
                       const GdOptions& options = {});
Adapter fit_adapter_gd(const DetectorModel& student, const DetectorModel& teacher,
                       const std::vector<Tensor>& images, const GdOptions& options = {},
                       std::size_t jobs = 1);

/// Largest eigenvalue of the per-level Hessian (2/M) A^T A + 2 lambda D of the
/// objective, by power iteration. A = [X 1] stacked over images.
std::array<double, 3> hessian_lambda_max(const std::vector<FpnFeatures>& student, double lambda = 0.0);

/// Synthetic regression with a known affine answer. Student rows are
/// U(-sqrt 3, sqrt 3) (unit variance, well conditioned); teacher rows are
/// x W + b plus U(-noise, noise). Row counts per image follow `rows`.
struct PlantedProblem {
    std::vector<FpnFeatures> student, teacher;
    Adapter truth;
};
PlantedProblem planted_problem(std::uint64_t seed, std::size_t images,
                               const std::array<std::size_t, 3>& rows,
                               const std::array<std::size_t, 3>& student_dims,
                               const std::array<std::size_t, 3>& teacher_dims, double noise = 0.0);

/// Weights U(-1, 1) / sqrt(student_dim), biases zero.
Adapter random_adapter(const std::array<std::size_t, 3>& student_dims,
                       const std::array<std::size_t, 3>& teacher_dims, std::uint64_t seed);
Adapter identity_adapter(const std::array<std::size_t, 3>& dims);

struct AgreementReport {
    std::size_t teacher_detections = 0;
    std::size_t matched = 0;
    std::size_t student_detections = 0;
    double agreement = 1.0;  // matched / teacher_detections; 1 when the teacher finds nothing
    std::array<double, 3> level_cosine{};  // mean over images
    std::uint64_t encdec_checksum_before = 0;
    std::uint64_t encdec_checksum_after = 0;
};

/// Runs the teacher's enc-dec and heads on teacher features and on adapted
/// student features. A teacher detection counts as matched when some student
/// detection has the same class and IoU >= 0.5.
AgreementReport evaluate_agreement(const DetectorModel& teacher, const DetectorModel& student,
                                   const Adapter& adapter, const std::vector<Tensor>& images,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg);

/// One JSON header line, then every level's weight and bias as little-endian float32.
void save_adapter(const Adapter& adapter, const std::filesystem::path& path);
Adapter load_adapter(const std::filesystem::path& path);

}  // namespace dart
