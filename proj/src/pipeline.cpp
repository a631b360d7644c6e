// SPDX-License-Identifier: Apache-2.0
#include "dart/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "json.hpp"

namespace dart {

namespace {

double sigmoid1(double x) { return 1.0 / (1.0 + std::exp(-x)); }

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

void require_classes(const std::vector<std::string>& class_names) {
    if (class_names.empty()) throw EmptyClassSet();
}

/// Greedy NMS over `order` (already sorted by priority); returns kept indices.
std::vector<std::size_t> greedy_nms(const std::vector<Detection>& dets,
                                    const std::vector<std::size_t>& order, double iou_threshold) {
    std::vector<std::size_t> kept;
    for (std::size_t i : order) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return box_iou(dets[i].box, dets[k].box) >= iou_threshold;
        });
        if (!suppressed) kept.push_back(i);
    }
    return kept;
}

std::vector<Detection> finish(std::vector<Detection> dets, const PipelineConfig& cfg) {
    return cfg.cross_class_nms ? cross_class_nms(dets, cfg.nms_iou_threshold) : dets;
}

void run_masks(const DetectorModel& model, const FpnFeatures& fpn, const RawQueryOutputs& raw,
               const PipelineConfig& cfg, RunContext& ctx) {
    if (cfg.detection_only) return;
    // Masks are not part of the detection record; the call is kept for its cost.
    (void)mask_head_forward(model, fpn, raw, cfg.encdec_mode);
    ++ctx.mask_calls;
}

}  // namespace

const char* to_string(PipelineLevel level) {
    switch (level) {
        case PipelineLevel::Naive: return "naive";
        case PipelineLevel::SharedBackbone: return "shared";
        case PipelineLevel::BatchedDetOnly: return "batched";
        case PipelineLevel::BatchedDetOnlyFp16: return "batched-fp16";
    }
    return "?";
}

PipelineLevel pipeline_level_from_string(const std::string& name) {
    for (auto level : {PipelineLevel::Naive, PipelineLevel::SharedBackbone,
                       PipelineLevel::BatchedDetOnly, PipelineLevel::BatchedDetOnlyFp16}) {
        if (name == to_string(level)) return level;
    }
    throw std::invalid_argument("unknown pipeline level '" + name +
                                "' (expected naive, shared, batched or batched-fp16)");
}

PipelineConfig PipelineConfig::for_level(PipelineLevel level) {
    PipelineConfig cfg;
    cfg.level = level;
    if (level == PipelineLevel::BatchedDetOnly || level == PipelineLevel::BatchedDetOnlyFp16) {
        cfg.detection_only = true;
    }
    if (level == PipelineLevel::BatchedDetOnlyFp16) {
        cfg.backbone_mode = PrecisionMode::Fp16AccumFp32;
        cfg.encdec_mode = PrecisionMode::Fp16AccumFp32;
    }
    return cfg;
}

void PipelineConfig::validate() const {
    if (n_max && *n_max == 0) throw std::invalid_argument("n_max must be at least 1");
    auto unit = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 1.0)) {
            throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
        }
    };
    unit(presence_threshold, "presence_threshold");
    unit(score_threshold, "score_threshold");
    unit(nms_iou_threshold, "nms_iou_threshold");
}

double box_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const double ax0 = a[0] - a[2] / 2, ax1 = a[0] + a[2] / 2;
    const double ay0 = a[1] - a[3] / 2, ay1 = a[1] + a[3] / 2;
    const double bx0 = b[0] - b[2] / 2, bx1 = b[0] + b[2] / 2;
    const double by0 = b[1] - b[3] / 2, by1 = b[1] + b[3] / 2;
    const double iw = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
    const double ih = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
    const double inter = iw * ih;
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<Detection> postprocess(const RawQueryOutputs& raw,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg, std::size_t first_class_id) {
    const std::size_t n = raw.batch();
    if (n != class_names.size()) {
        throw DimensionError("raw outputs hold " + std::to_string(n) + " classes, got " +
                             std::to_string(class_names.size()) + " names");
    }
    const std::size_t nq = n ? raw.score_logits.size() / n : 0;
    std::vector<Detection> out;
    for (std::size_t b = 0; b < n; ++b) {
        const double presence = sigmoid1(raw.presence_logits[b]);
        if (!(presence >= cfg.presence_threshold)) continue;

        std::vector<Detection> cand;
        for (std::size_t q = 0; q < nq; ++q) {
            const double score = sigmoid1(raw.score_logits[b * nq + q]);
            if (!(score >= cfg.score_threshold)) continue;
            Detection d;
            d.class_id = first_class_id + b;
            d.class_name = class_names[b];
            for (std::size_t k = 0; k < 4; ++k) d.box[k] = raw.boxes[(b * nq + q) * 4 + k];
            if (!(d.box[2] > 0.0 && d.box[3] > 0.0)) continue;
            d.score = score;
            d.presence = presence;
            d.query = q;
            cand.push_back(std::move(d));
        }
        std::vector<std::size_t> order(cand.size());
        std::iota(order.begin(), order.end(), 0);
        // cand is in query order, so a stable sort keeps query asc among equal scores.
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return cand[x].score > cand[y].score; });
        for (std::size_t k : greedy_nms(cand, order, cfg.nms_iou_threshold)) out.push_back(cand[k]);
    }
    return out;
}

std::vector<Detection> cross_class_nms(const std::vector<Detection>& dets, double iou_threshold) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return dets[x].score > dets[y].score; });
    auto kept = greedy_nms(dets, order, iou_threshold);
    std::sort(kept.begin(), kept.end());
    std::vector<Detection> out;
    for (std::size_t k : kept) out.push_back(dets[k]);
    return out;
}

std::size_t encdec_pass_count(std::size_t classes, std::optional<std::size_t> n_max) {
    if (classes == 0) return 0;
    if (!n_max) return 1;
    return (classes + *n_max - 1) / *n_max;
}

std::vector<Detection> run_naive(const DetectorModel& model, const Tensor& image,
                                 const std::vector<std::string>& class_names,
                                 const PipelineConfig& cfg, RunContext& ctx) {
    require_classes(class_names);
    cfg.validate();
    std::vector<Detection> out;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const FpnFeatures fpn = backbone_forward(model, image, cfg.backbone_mode);
        ++ctx.backbone_calls;
        const TextEmbeddings text = text_encode(model, {class_names[c]});
        const RawQueryOutputs raw = encdec_forward(model, fpn, text, cfg.encdec_mode);
        ++ctx.encdec_passes;
        run_masks(model, fpn, raw, cfg, ctx);
        auto dets = postprocess(raw, {class_names[c]}, cfg, c);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return finish(std::move(out), cfg);
}

std::vector<Detection> run_shared(const DetectorModel& model, const Tensor& image,
                                  const std::vector<std::string>& class_names,
                                  const PipelineConfig& cfg, RunContext& ctx) {
    require_classes(class_names);
    cfg.validate();
    const FpnFeatures fpn = backbone_forward(model, image, cfg.backbone_mode);
    ++ctx.backbone_calls;
    std::vector<Detection> out;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const TextEmbeddings text = text_encode(model, {class_names[c]});
        const RawQueryOutputs raw = encdec_forward(model, fpn, text, cfg.encdec_mode);
        ++ctx.encdec_passes;
        run_masks(model, fpn, raw, cfg, ctx);
        auto dets = postprocess(raw, {class_names[c]}, cfg, c);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return finish(std::move(out), cfg);
}

std::vector<Detection> decode_batched(const DetectorModel& model, const FpnFeatures& fpn,
                                      const std::vector<std::string>& class_names,
                                      const PipelineConfig& cfg, RunContext& ctx) {
    require_classes(class_names);
    cfg.validate();
    const std::size_t n = class_names.size();
    const std::size_t chunk = cfg.n_max ? *cfg.n_max : n;
    std::vector<Detection> out;
    for (std::size_t begin = 0; begin < n; begin += chunk) {
        const std::size_t end = std::min(n, begin + chunk);
        const std::vector<std::string> names(class_names.begin() + static_cast<std::ptrdiff_t>(begin),
                                             class_names.begin() + static_cast<std::ptrdiff_t>(end));
        const TextEmbeddings text = text_encode(model, names, &ctx.text_cache);
        const RawQueryOutputs raw = encdec_forward(model, fpn, text, cfg.encdec_mode);
        ++ctx.encdec_passes;
        run_masks(model, fpn, raw, cfg, ctx);
        auto dets = postprocess(raw, names, cfg, begin);
        out.insert(out.end(), dets.begin(), dets.end());
    }
    return finish(std::move(out), cfg);
}

std::vector<Detection> run_batched(const DetectorModel& model, const Tensor& image,
                                   const std::vector<std::string>& class_names,
                                   const PipelineConfig& cfg, RunContext& ctx) {
    require_classes(class_names);
    cfg.validate();
    const FpnFeatures fpn = backbone_forward(model, image, cfg.backbone_mode);
    ++ctx.backbone_calls;
    return decode_batched(model, fpn, class_names, cfg, ctx);
}

std::vector<Detection> run_pipeline(const DetectorModel& model, const Tensor& image,
                                    const std::vector<std::string>& class_names,
                                    const PipelineConfig& cfg, RunContext& ctx) {
    switch (cfg.level) {
        case PipelineLevel::Naive: return run_naive(model, image, class_names, cfg, ctx);
        case PipelineLevel::SharedBackbone: return run_shared(model, image, class_names, cfg, ctx);
        default: return run_batched(model, image, class_names, cfg, ctx);
    }
}

bool bitwise_equal(const std::vector<Detection>& a, const std::vector<Detection>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& x = a[i];
        const auto& y = b[i];
        if (x.class_id != y.class_id || x.class_name != y.class_name || x.query != y.query) return false;
        if (!same_bits(x.score, y.score) || !same_bits(x.presence, y.presence)) return false;
        for (std::size_t k = 0; k < 4; ++k) {
            if (!same_bits(x.box[k], y.box[k])) return false;
        }
    }
    return true;
}

std::string detections_to_json(const std::vector<Detection>& dets) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& d : dets) {
        arr.push_back({{"class_id", d.class_id},
                       {"class_name", d.class_name},
                       {"box", d.box},
                       {"score", d.score},
                       {"presence", d.presence}});
    }
    return arr.dump(2);
}

std::vector<PrecisionRow> precision_study(const DetectorModel& model,
                                          const std::vector<Tensor>& images,
                                          const std::vector<std::size_t>& depths) {
    if (images.size() < 5) throw std::invalid_argument("precision study needs at least 5 images");
    if (depths.size() < 3) throw std::invalid_argument("precision study needs at least 3 depths");
    std::vector<PrecisionRow> rows;
    for (std::size_t depth : depths) {
        const DetectorModel cut = truncate_backbone(model, depth);
        std::vector<Tensor> reference;
        for (const auto& img : images) {
            reference.push_back(backbone_forward(cut, img, PrecisionMode::Fp32).levels[0]);
        }
        for (auto mode : {PrecisionMode::Fp16AccumFp32, PrecisionMode::Fp16AccumFp16}) {
            PrecisionRow row{depth, mode, 0.0, 1.0};
            for (std::size_t i = 0; i < images.size(); ++i) {
                const double cos =
                    cosine_similarity(backbone_forward(cut, images[i], mode).levels[0], reference[i]);
                row.mean_cosine += cos;
                row.min_cosine = std::min(row.min_cosine, cos);
            }
            row.mean_cosine /= static_cast<double>(images.size());
            rows.push_back(row);
        }
    }
    return rows;
}

}  // namespace dart
