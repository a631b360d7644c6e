// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dart/model.hpp"

namespace dart {

/// Cumulative optimization levels. Each includes everything below it.
/// Inter-frame pipelining is a scheduling concern and lives in scheduler.hpp.
enum class PipelineLevel { Naive, SharedBackbone, BatchedDetOnly, BatchedDetOnlyFp16 };

const char* to_string(PipelineLevel level);
/// Accepts "naive", "shared", "batched", "batched-fp16".
PipelineLevel pipeline_level_from_string(const std::string& name);

struct Detection {
    std::size_t class_id = 0;
    std::string class_name;
    std::array<double, 4> box{};  // cx, cy, w, h in [0, 1]
    double score = 0.0;
    double presence = 0.0;
    std::size_t query = 0;  // decoder query that produced it
};

struct PipelineConfig {
    PipelineLevel level = PipelineLevel::Naive;
    PrecisionMode backbone_mode = PrecisionMode::Fp32;
    PrecisionMode encdec_mode = PrecisionMode::Fp32;
    bool detection_only = false;
    std::optional<std::size_t> n_max;  // classes per enc-dec pass; unset = all at once
    double presence_threshold = 0.5;
    double score_threshold = 0.45;
    double nms_iou_threshold = 0.5;
    bool cross_class_nms = false;

    /// Level defaults: batched levels drop the mask head; the fp16 level runs
    /// both stages with fp16 operands and fp32 accumulation.
    static PipelineConfig for_level(PipelineLevel level);

    void validate() const;
};

/// Per-run instrumentation. Owned by the caller so concurrent runs never share
/// counters.
struct RunContext {
    std::size_t backbone_calls = 0;
    std::size_t encdec_passes = 0;
    std::size_t mask_calls = 0;
    TextCache text_cache;
};

struct EmptyClassSet : std::invalid_argument {
    EmptyClassSet() : std::invalid_argument("class set is empty: at least one class name is required") {}
};

std::vector<Detection> run_naive(const DetectorModel& model, const Tensor& image,
                                 const std::vector<std::string>& class_names,
                                 const PipelineConfig& cfg, RunContext& ctx);
std::vector<Detection> run_shared(const DetectorModel& model, const Tensor& image,
                                  const std::vector<std::string>& class_names,
                                  const PipelineConfig& cfg, RunContext& ctx);
std::vector<Detection> run_batched(const DetectorModel& model, const Tensor& image,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg, RunContext& ctx);
/// The batched enc-dec stage alone: chunked decoding, optional masks and
/// postprocessing over precomputed FPN features.
std::vector<Detection> decode_batched(const DetectorModel& model, const FpnFeatures& fpn,
                                      const std::vector<std::string>& class_names,
                                      const PipelineConfig& cfg, RunContext& ctx);
/// Dispatches on cfg.level.
std::vector<Detection> run_pipeline(const DetectorModel& model, const Tensor& image,
                                    const std::vector<std::string>& class_names,
                                    const PipelineConfig& cfg, RunContext& ctx);

std::size_t encdec_pass_count(std::size_t classes, std::optional<std::size_t> n_max);

/// Gating, thresholding and greedy NMS. Row b of `raw` is class_names[b] with
/// class id `first_class_id + b`. Cross-class NMS is not applied here.
std::vector<Detection> postprocess(const RawQueryOutputs& raw,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg, std::size_t first_class_id = 0);

/// Greedy suppression across classes, keeping survivors in input order.
std::vector<Detection> cross_class_nms(const std::vector<Detection>& dets, double iou_threshold);

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

/// Exact equality of every field, doubles compared by bit pattern.
bool bitwise_equal(const std::vector<Detection>& a, const std::vector<Detection>& b);

/// JSON array of {class_id, class_name, box, score, presence}.
std::string detections_to_json(const std::vector<Detection>& dets);

struct PrecisionRow {
    std::size_t depth = 0;
    PrecisionMode mode = PrecisionMode::Fp32;
    double mean_cosine = 0.0;
    double min_cosine = 0.0;
};

/// Level-0 FPN cosine against the fp32 reference for each truncation depth and
/// each half mode. Rows ordered by depth, then fp16-acc32 before fp16-acc16.
std::vector<PrecisionRow> precision_study(const DetectorModel& model,
                                          const std::vector<Tensor>& images,
                                          const std::vector<std::size_t>& depths);

}  // namespace dart
