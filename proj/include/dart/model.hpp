// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dart/tensor.hpp"

namespace dart {

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct MaskHeadRemoved : std::logic_error {
    MaskHeadRemoved() : std::logic_error("mask head removed: detection-only model has no mask head") {}
};

/// Dimensions of the toy detector. Defaults are the desk-scale profile.
struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t num_blocks = 8;
    std::set<std::size_t> global_blocks = {3, 7};
    std::size_t window_size = 4;  // side of a square window, in tokens
    std::size_t num_heads = 4;
    std::size_t mlp_ratio = 4;
    std::array<std::size_t, 3> fpn_dims = {64, 64, 64};
    std::size_t text_tokens = 8;
    std::size_t text_dim = 64;
    std::size_t text_vocab = 512;
    std::size_t num_queries = 16;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    bool mask_head = true;
    std::uint64_t seed = 0;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t text_heads() const { return num_heads; }
    /// Token-grid side of FPN level l (strides patch, 2*patch, 4*patch).
    std::size_t level_grid(std::size_t level) const { return grid() >> level; }
    std::size_t level_tokens(std::size_t level) const {
        return level_grid(level) * level_grid(level);
    }

    /// Throws ConfigError naming the first violated invariant.
    void validate() const;
};

enum class BlockKind { Windowed, Global };
enum class SubBlockKind { Attn, Mlp };

const char* to_string(SubBlockKind kind);
SubBlockKind sub_block_kind_from_string(const std::string& name);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out]
};

struct Norm {
    Tensor gamma;
    Tensor beta;
};

struct Attention {
    Linear q, k, v, out;
};

struct Mlp {
    Linear fc1, fc2;
};

struct BackboneBlock {
    BlockKind kind = BlockKind::Windowed;
    Norm norm1, norm2;
    Attention attn;
    Mlp mlp;
    bool attn_enabled = true;
    bool mlp_enabled = true;
};

struct EncoderLayer {
    Norm norm_self, norm_cross, norm_mlp;
    Attention self_attn, cross_attn;
    Mlp mlp;
};

struct DecoderLayer {
    Norm norm_self, norm_cross, norm_mlp;
    Attention self_attn, cross_attn;
    Mlp mlp;
};

struct MaskHead {
    Linear query_fc1, query_fc2, pixel_proj;
};

/// Randomly initialized miniature of a promptable detector: class-agnostic
/// ViT backbone with FPN neck, hashed text embeddings, a cross-modal
/// encoder-decoder with learned queries plus a presence token, and box / score /
/// presence / mask heads. Immutable after construction from the caller's view.
struct DetectorModel {
    ModelConfig config;

    // Backbone.
    Linear patch_embed;
    std::vector<BackboneBlock> blocks;
    Tensor rope_cos, rope_sin;  // [tokens, head_dim/2], derived from the grid
    std::array<Linear, 3> fpn_lateral;
    std::array<Linear, 3> fpn_output;

    // Text.
    Tensor text_table;  // [text_vocab, text_dim]
    Tensor text_pos;    // [text_tokens, text_dim]

    // Encoder-decoder.
    std::array<Linear, 3> memory_proj;  // fpn_dims[l] -> text_dim
    Tensor level_embed;                 // [3, text_dim]
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    Tensor query_embed;     // [num_queries, text_dim]
    Tensor presence_token;  // [1, text_dim]
    Norm final_norm;

    // Heads.
    Mlp box_head;  // text_dim -> text_dim -> 4
    Linear score_proj;     // query logit = (q * score_proj) . mean(text)
    Linear presence_head;  // same form on the presence token
    std::optional<MaskHead> mask_head;

    /// Visits every weight tensor in declaration order with its dotted path.
    /// This order defines the on-disk layout.
    void for_each_weight(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    void for_each_weight(const std::function<void(const std::string&, Tensor&)>& fn);

    std::size_t parameter_count() const;
};

/// FPN pyramid emitted by the backbone. Level l is [level_tokens(l), fpn_dims[l]].
struct FpnFeatures {
    std::array<Tensor, 3> levels;
    std::uint64_t model_seed = 0;
    PrecisionMode mode = PrecisionMode::Fp32;
    std::string plan_id;  // disabled sub-blocks, e.g. "2.attn,5.mlp"; empty when unpruned

    bool bitwise_equal(const FpnFeatures& other) const;
};

/// Per-class text embeddings, [text_tokens, text_dim] each.
struct TextEmbeddings {
    std::vector<std::string> names;
    std::vector<Tensor> tokens;

    /// [N, text_tokens, text_dim].
    Tensor batch() const;
};

/// Memo of text embeddings keyed by the exact class-name string. Bound to the
/// text table it was filled from; a different model clears it.
class TextCache {
public:
    const Tensor* find(std::uint64_t model_key, const std::string& name);
    void insert(std::uint64_t model_key, const std::string& name, Tensor value);
    void clear();
    std::size_t size() const { return entries_.size(); }
    std::size_t hits() const { return hits_; }
    std::size_t misses() const { return misses_; }

private:
    std::uint64_t model_key_ = 0;
    std::map<std::string, Tensor> entries_;
    std::size_t hits_ = 0;
    std::size_t misses_ = 0;
};

struct RawQueryOutputs {
    Tensor query_features;   // [N, Q, d]
    Tensor boxes;            // [N, Q, 4] (cx, cy, w, h) in [0, 1]
    Tensor presence_logits;  // [N]
    Tensor score_logits;     // [N, Q]

    std::size_t batch() const { return presence_logits.size(); }
    /// Rows [begin, end) of the class batch.
    RawQueryOutputs rows(std::size_t begin, std::size_t end) const;
    bool bitwise_equal(const RawQueryOutputs& other) const;
};

/// Concatenates class batches in order.
RawQueryOutputs concat_batches(const std::vector<RawQueryOutputs>& parts);

// ---------------------------------------------------------------------------
// Construction and persistence

DetectorModel build_model(const ModelConfig& config);

/// Same model without mask head weights.
DetectorModel strip_mask_head(const DetectorModel& model);

/// Model with the backbone cut to its first `depth` blocks. When no global
/// block survives the cut, the last kept block is retagged global.
DetectorModel truncate_backbone(const DetectorModel& model, std::size_t depth);

/// Canonical JSON text of the config (sorted keys).
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& text);

/// Single binary file: magic "DARTM1", u32 little-endian header length, header
/// (canonical JSON of config + disabled sub-blocks), then every weight in
/// declaration order as little-endian float32.
void save_model(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_model(const std::filesystem::path& path);

/// FNV-1a over the weights whose path starts with one of `prefixes` (all when empty).
std::uint64_t weights_checksum(const DetectorModel& model,
                               const std::vector<std::string>& prefixes = {});

/// Prefixes of the frozen encoder-decoder and head weights.
const std::vector<std::string>& encdec_weight_prefixes();

// ---------------------------------------------------------------------------
// Forward passes

/// Test hook for swapping the rotary application.
using RopeFn = std::function<Tensor(const Tensor&, const Tensor&, const Tensor&)>;

struct BackboneOptions {
    RopeFn rope;  // defaults to rope_apply
};

/// Image [image_size, image_size, 3] in [0, 1] to FPN features. Takes no text
/// input by construction.
FpnFeatures backbone_forward(const DetectorModel& model, const Tensor& image, PrecisionMode mode,
                             const BackboneOptions& options = {});

// Stage-level access used by memoized pruning. Applying every enabled sub-block
// in order between embed_patches and project_fpn is exactly backbone_forward.
Tensor embed_patches(const DetectorModel& model, const Tensor& image, PrecisionMode mode);
/// x + branch(x) when the sub-block is enabled, x otherwise.
Tensor apply_sub_block(const DetectorModel& model, std::size_t block, SubBlockKind kind,
                       const Tensor& x, PrecisionMode mode, const BackboneOptions& options = {});
FpnFeatures project_fpn(const DetectorModel& model, const Tensor& trunk, PrecisionMode mode);

/// Deterministic hashed lookup; memoized through `cache` when given.
TextEmbeddings text_encode(const DetectorModel& model, const std::vector<std::string>& class_names,
                           TextCache* cache = nullptr);

/// Class-batched encoder-decoder. Every batch element is computed with the
/// same row-wise kernels and never mixes with another.
RawQueryOutputs encdec_forward(const DetectorModel& model, const FpnFeatures& fpn,
                               const TextEmbeddings& text, PrecisionMode mode);

/// Mask logits [N, Q, level0_tokens].
Tensor mask_head_forward(const DetectorModel& model, const FpnFeatures& fpn,
                         const RawQueryOutputs& queries, PrecisionMode mode = PrecisionMode::Fp32);

}  // namespace dart
