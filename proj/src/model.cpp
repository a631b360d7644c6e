// SPDX-License-Identifier: Apache-2.0
#include "dart/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dart/rng.hpp"
#include "json.hpp"

namespace dart {

using nlohmann::json;

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kRopeTheta = 100.0;
// Spreads box logits so untrained queries do not all collapse onto one box.
constexpr double kBoxLogitGain = 4.0;
constexpr char kModelMagic[6] = {'D', 'A', 'R', 'T', 'M', '1'};

Tensor apply_norm(const Norm& norm, const Tensor& x, PrecisionMode mode) {
    return store(layernorm(x, norm.gamma, norm.beta, kNormEps), mode);
}

Tensor apply_mlp(const Mlp& mlp, const Tensor& x, PrecisionMode mode) {
    return linear(gelu(linear(x, mlp.fc1.weight, mlp.fc1.bias, mode), mode), mlp.fc2.weight,
                  mlp.fc2.bias, mode);
}

/// [B, T, d] -> [B, heads, T, d/heads]
Tensor split_heads(const Tensor& x, std::size_t heads) {
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    return permute(x.reshaped({b, t, heads, d / heads}), {0, 2, 1, 3});
}

/// [B, heads, T, hd] -> [B, T, heads*hd]
Tensor merge_heads(const Tensor& x) {
    const std::size_t b = x.dim(0), h = x.dim(1), t = x.dim(2), hd = x.dim(3);
    return permute(x, {0, 2, 1, 3}).reshaped({b, t, h * hd});
}

/// Explicit QK^T -> scale -> softmax -> V on [B, heads, T, hd] operands.
Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, PrecisionMode mode) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
    Tensor scores = scale(matmul(q, transpose_last2(k), mode), inv_sqrt, mode);
    Tensor probs = softmax(scores, scores.rank() - 1, mode);
    return matmul(probs, v, mode);
}

/// Multi-head attention of xq [B, Tq, d] over xkv [B, Tk, d].
Tensor multi_head(const Attention& w, const Tensor& xq, const Tensor& xkv, std::size_t heads,
                  PrecisionMode mode) {
    Tensor q = split_heads(linear(xq, w.q.weight, w.q.bias, mode), heads);
    Tensor k = split_heads(linear(xkv, w.k.weight, w.k.bias, mode), heads);
    Tensor v = split_heads(linear(xkv, w.v.weight, w.v.bias, mode), heads);
    return linear(merge_heads(attend(q, k, v, mode)), w.out.weight, w.out.bias, mode);
}

/// Token indices grouped window by window (row-major within each window).
std::vector<std::size_t> window_order(std::size_t grid, std::size_t window) {
    std::vector<std::size_t> order;
    order.reserve(grid * grid);
    for (std::size_t wy = 0; wy < grid; wy += window)
        for (std::size_t wx = 0; wx < grid; wx += window)
            for (std::size_t y = 0; y < window; ++y)
                for (std::size_t x = 0; x < window; ++x) order.push_back((wy + y) * grid + wx + x);
    return order;
}

Tensor backbone_attention(const DetectorModel& model, const BackboneBlock& block, const Tensor& h,
                          PrecisionMode mode, const BackboneOptions& options) {
    const auto& cfg = model.config;
    const std::size_t tokens = cfg.tokens();
    const std::size_t heads = cfg.num_heads;
    const std::size_t hd = cfg.head_dim();
    const RopeFn& rope = options.rope ? options.rope : RopeFn(rope_apply);

    const Tensor x = h.reshaped({1, tokens, cfg.embed_dim});
    Tensor q = split_heads(linear(x, block.attn.q.weight, block.attn.q.bias, mode), heads);
    Tensor k = split_heads(linear(x, block.attn.k.weight, block.attn.k.bias, mode), heads);
    Tensor v = split_heads(linear(x, block.attn.v.weight, block.attn.v.bias, mode), heads);
    q = store(rope(q, model.rope_cos, model.rope_sin), mode);
    k = store(rope(k, model.rope_cos, model.rope_sin), mode);

    const bool windowed = block.kind == BlockKind::Windowed;
    const std::size_t win_tokens = windowed ? cfg.window_size * cfg.window_size : tokens;
    const std::size_t windows = tokens / win_tokens;
    const auto order = windowed ? window_order(cfg.grid(), cfg.window_size) : [&] {
        std::vector<std::size_t> id(tokens);
        std::iota(id.begin(), id.end(), 0);
        return id;
    }();

    // [1, h, T, hd] -> [windows, h, Tw, hd]
    auto partition = [&](const Tensor& t) {
        Tensor rows = take_rows(permute(t, {2, 0, 1, 3}).reshaped({tokens, heads, hd}), order);
        return permute(rows.reshaped({windows, win_tokens, heads, hd}), {0, 2, 1, 3});
    };
    Tensor out = attend(partition(q), partition(k), partition(v), mode);

    std::vector<std::size_t> inverse(tokens);
    for (std::size_t i = 0; i < tokens; ++i) inverse[order[i]] = i;
    Tensor merged = take_rows(merge_heads(out).reshaped({tokens, cfg.embed_dim}), inverse);
    return linear(merged, block.attn.out.weight, block.attn.out.bias, mode);
}

/// Mean pooling of factor x factor token tiles on the grid.
Tensor pool_grid(const Tensor& x, std::size_t grid, std::size_t factor, PrecisionMode mode) {
    const std::size_t d = x.dim(1);
    const std::size_t out_grid = grid / factor;
    std::vector<double> out(out_grid * out_grid * d, 0.0);
    const double inv = 1.0 / static_cast<double>(factor * factor);
    for (std::size_t oy = 0; oy < out_grid; ++oy)
        for (std::size_t ox = 0; ox < out_grid; ++ox) {
            double* dst = out.data() + (oy * out_grid + ox) * d;
            for (std::size_t y = 0; y < factor; ++y)
                for (std::size_t xx = 0; xx < factor; ++xx) {
                    const std::size_t t = (oy * factor + y) * grid + ox * factor + xx;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += x[t * d + c];
                }
            for (std::size_t c = 0; c < d; ++c) dst[c] *= inv;
        }
    return store(Tensor({out_grid * out_grid, d}, std::move(out)), mode);
}

void make_rope_tables(DetectorModel& m) {
    const auto& cfg = m.config;
    const std::size_t pairs = cfg.head_dim() / 2;
    const std::size_t per_axis = pairs / 2;
    const std::size_t grid = cfg.grid();
    std::vector<double> cs(cfg.tokens() * pairs), sn(cfg.tokens() * pairs);
    for (std::size_t row = 0; row < grid; ++row)
        for (std::size_t col = 0; col < grid; ++col) {
            const std::size_t t = row * grid + col;
            for (std::size_t p = 0; p < pairs; ++p) {
                const std::size_t j = p % per_axis;
                const double pos = static_cast<double>(p < per_axis ? col : row);
                const double freq =
                    std::pow(kRopeTheta, -static_cast<double>(j) / static_cast<double>(per_axis));
                cs[t * pairs + p] = std::cos(pos * freq);
                sn[t * pairs + p] = std::sin(pos * freq);
            }
        }
    m.rope_cos = Tensor({cfg.tokens(), pairs}, std::move(cs));
    m.rope_sin = Tensor({cfg.tokens(), pairs}, std::move(sn));
}

Linear zero_linear(std::size_t in, std::size_t out) {
    return {Tensor::zeros({in, out}), Tensor::zeros({out})};
}

Norm zero_norm(std::size_t d) { return {Tensor::zeros({d}), Tensor::zeros({d})}; }

Attention zero_attention(std::size_t d) {
    return {zero_linear(d, d), zero_linear(d, d), zero_linear(d, d), zero_linear(d, d)};
}

Mlp zero_mlp(std::size_t in, std::size_t hidden, std::size_t out) {
    return {zero_linear(in, hidden), zero_linear(hidden, out)};
}

/// Skeleton with correctly shaped zero weights.
DetectorModel allocate_model(const ModelConfig& cfg) {
    DetectorModel m;
    m.config = cfg;
    const std::size_t d = cfg.embed_dim;
    const std::size_t td = cfg.text_dim;
    m.patch_embed = zero_linear(cfg.patch_size * cfg.patch_size * 3, d);
    m.blocks.resize(cfg.num_blocks);
    for (std::size_t l = 0; l < cfg.num_blocks; ++l) {
        auto& b = m.blocks[l];
        b.kind = cfg.global_blocks.count(l) ? BlockKind::Global : BlockKind::Windowed;
        b.norm1 = zero_norm(d);
        b.attn = zero_attention(d);
        b.norm2 = zero_norm(d);
        b.mlp = zero_mlp(d, d * cfg.mlp_ratio, d);
    }
    for (std::size_t l = 0; l < 3; ++l) {
        m.fpn_lateral[l] = zero_linear(d, cfg.fpn_dims[l]);
        m.fpn_output[l] = zero_linear(cfg.fpn_dims[l], cfg.fpn_dims[l]);
    }
    m.text_table = Tensor::zeros({cfg.text_vocab, td});
    m.text_pos = Tensor::zeros({cfg.text_tokens, td});
    for (std::size_t l = 0; l < 3; ++l) m.memory_proj[l] = zero_linear(cfg.fpn_dims[l], td);
    m.level_embed = Tensor::zeros({3, td});
    m.encoder.resize(cfg.encoder_layers);
    for (auto& e : m.encoder) {
        e.norm_self = zero_norm(td);
        e.self_attn = zero_attention(td);
        e.norm_cross = zero_norm(td);
        e.cross_attn = zero_attention(td);
        e.norm_mlp = zero_norm(td);
        e.mlp = zero_mlp(td, td * cfg.mlp_ratio, td);
    }
    m.decoder.resize(cfg.decoder_layers);
    for (auto& e : m.decoder) {
        e.norm_self = zero_norm(td);
        e.self_attn = zero_attention(td);
        e.norm_cross = zero_norm(td);
        e.cross_attn = zero_attention(td);
        e.norm_mlp = zero_norm(td);
        e.mlp = zero_mlp(td, td * cfg.mlp_ratio, td);
    }
    m.query_embed = Tensor::zeros({cfg.num_queries, td});
    m.presence_token = Tensor::zeros({1, td});
    m.final_norm = zero_norm(td);
    m.box_head = zero_mlp(td, td, 4);
    m.score_proj = zero_linear(td, td);
    m.presence_head = zero_linear(td, td);
    if (cfg.mask_head) {
        m.mask_head = MaskHead{zero_linear(td, td), zero_linear(td, td), zero_linear(cfg.fpn_dims[0], td)};
    }
    make_rope_tables(m);
    return m;
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Weights and biases: U(-1,1)/sqrt(fan_in), biases sharing their weight's fan-in. Norms
/// start at identity. Embedding tables are U(-1,1). Values are float32-exact
/// so the on-disk format round-trips bit for bit.
void initialize(DetectorModel& m) {
    std::size_t last_fan_in = 1;
    const std::uint64_t seed = m.config.seed;
    m.for_each_weight([&](const std::string& path, Tensor& t) {
        double scale = 1.0;
        double fill = std::numeric_limits<double>::quiet_NaN();
        if (ends_with(path, ".weight")) {
            last_fan_in = t.dim(0);
            scale = 1.0 / std::sqrt(static_cast<double>(last_fan_in));
        } else if (ends_with(path, ".bias")) {
            scale = 1.0 / std::sqrt(static_cast<double>(last_fan_in));
        } else if (ends_with(path, ".gamma")) {
            fill = 1.0;
        } else if (ends_with(path, ".beta")) {
            fill = 0.0;
        }
        std::vector<double> data(t.size());
        if (!std::isnan(fill)) {
            std::fill(data.begin(), data.end(), fill);
        } else {
            const CounterRng rng(seed, path);
            for (std::size_t i = 0; i < data.size(); ++i) {
                data[i] = static_cast<float>(rng.symmetric(i) * scale);
            }
        }
        t = Tensor(t.shape(), std::move(data));
    });
}

template <class Model, class Fn>
void visit_weights(Model& m, Fn&& fn) {
    auto lin = [&](const std::string& p, auto& l) {
        fn(p + ".weight", l.weight);
        fn(p + ".bias", l.bias);
    };
    auto norm = [&](const std::string& p, auto& n) {
        fn(p + ".gamma", n.gamma);
        fn(p + ".beta", n.beta);
    };
    auto attn = [&](const std::string& p, auto& a) {
        lin(p + ".q", a.q);
        lin(p + ".k", a.k);
        lin(p + ".v", a.v);
        lin(p + ".out", a.out);
    };
    auto mlp = [&](const std::string& p, auto& x) {
        lin(p + ".fc1", x.fc1);
        lin(p + ".fc2", x.fc2);
    };

    lin("backbone.patch_embed", m.patch_embed);
    for (std::size_t l = 0; l < m.blocks.size(); ++l) {
        const std::string p = "backbone.blocks." + std::to_string(l);
        norm(p + ".norm1", m.blocks[l].norm1);
        attn(p + ".attn", m.blocks[l].attn);
        norm(p + ".norm2", m.blocks[l].norm2);
        mlp(p + ".mlp", m.blocks[l].mlp);
    }
    for (std::size_t l = 0; l < 3; ++l) {
        lin("backbone.fpn.lateral." + std::to_string(l), m.fpn_lateral[l]);
        lin("backbone.fpn.output." + std::to_string(l), m.fpn_output[l]);
    }
    fn("text.table", m.text_table);
    fn("text.pos", m.text_pos);
    for (std::size_t l = 0; l < 3; ++l) lin("encdec.memory_proj." + std::to_string(l), m.memory_proj[l]);
    fn("encdec.level_embed", m.level_embed);
    for (std::size_t i = 0; i < m.encoder.size(); ++i) {
        const std::string p = "encdec.encoder." + std::to_string(i);
        norm(p + ".norm_self", m.encoder[i].norm_self);
        attn(p + ".self_attn", m.encoder[i].self_attn);
        norm(p + ".norm_cross", m.encoder[i].norm_cross);
        attn(p + ".cross_attn", m.encoder[i].cross_attn);
        norm(p + ".norm_mlp", m.encoder[i].norm_mlp);
        mlp(p + ".mlp", m.encoder[i].mlp);
    }
    for (std::size_t i = 0; i < m.decoder.size(); ++i) {
        const std::string p = "encdec.decoder." + std::to_string(i);
        norm(p + ".norm_self", m.decoder[i].norm_self);
        attn(p + ".self_attn", m.decoder[i].self_attn);
        norm(p + ".norm_cross", m.decoder[i].norm_cross);
        attn(p + ".cross_attn", m.decoder[i].cross_attn);
        norm(p + ".norm_mlp", m.decoder[i].norm_mlp);
        mlp(p + ".mlp", m.decoder[i].mlp);
    }
    fn("encdec.query_embed", m.query_embed);
    fn("encdec.presence_token", m.presence_token);
    norm("encdec.final_norm", m.final_norm);
    mlp("heads.box", m.box_head);
    lin("heads.score_proj", m.score_proj);
    lin("heads.presence", m.presence_head);
    if (m.mask_head) {
        lin("heads.mask.query_fc1", m.mask_head->query_fc1);
        lin("heads.mask.query_fc2", m.mask_head->query_fc2);
        lin("heads.mask.pixel_proj", m.mask_head->pixel_proj);
    }
}

std::uint64_t text_key(const DetectorModel& m) {
    return fingerprint(m.text_pos, fingerprint(m.text_table));
}

void write_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated model file");
    return std::uint32_t{b[0]} | std::uint32_t{b[1]} << 8 | std::uint32_t{b[2]} << 16 |
           std::uint32_t{b[3]} << 24;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (patch_size == 0 || image_size == 0) fail("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (window_size == 0 || grid() % window_size != 0) {
        fail("token-grid side must be divisible by window_size");
    }
    if (grid() % 4 != 0) fail("token-grid side must be divisible by 4 for the FPN levels");
    if (num_blocks == 0) fail("num_blocks must be positive");
    if (global_blocks.empty()) fail("at least one global attention block is required");
    if (*global_blocks.rbegin() >= num_blocks) fail("global block index out of range");
    if (num_heads == 0 || embed_dim % num_heads != 0) fail("embed_dim must divide into heads");
    if (head_dim() % 4 != 0) fail("head_dim must be a multiple of 4 for 2D rotary embedding");
    if (text_dim == 0 || text_dim % num_heads != 0) fail("text_dim must divide into heads");
    if (std::any_of(fpn_dims.begin(), fpn_dims.end(), [](auto v) { return v == 0; })) {
        fail("fpn_dims must be positive");
    }
    if (text_tokens == 0 || text_vocab == 0) fail("text_tokens and text_vocab must be positive");
    if (num_queries == 0) fail("num_queries must be positive");
    if (mlp_ratio == 0) fail("mlp_ratio must be positive");
}

const char* to_string(SubBlockKind kind) { return kind == SubBlockKind::Attn ? "attn" : "mlp"; }

SubBlockKind sub_block_kind_from_string(const std::string& name) {
    if (name == "attn") return SubBlockKind::Attn;
    if (name == "mlp") return SubBlockKind::Mlp;
    throw std::invalid_argument("unknown sub-block kind '" + name + "'");
}

std::string config_to_json(const ModelConfig& c) {
    json j;
    j["image_size"] = c.image_size;
    j["patch_size"] = c.patch_size;
    j["embed_dim"] = c.embed_dim;
    j["num_blocks"] = c.num_blocks;
    j["global_blocks"] = std::vector<std::size_t>(c.global_blocks.begin(), c.global_blocks.end());
    j["window_size"] = c.window_size;
    j["num_heads"] = c.num_heads;
    j["mlp_ratio"] = c.mlp_ratio;
    j["fpn_dims"] = c.fpn_dims;
    j["text_tokens"] = c.text_tokens;
    j["text_dim"] = c.text_dim;
    j["text_vocab"] = c.text_vocab;
    j["num_queries"] = c.num_queries;
    j["encoder_layers"] = c.encoder_layers;
    j["decoder_layers"] = c.decoder_layers;
    j["mask_head"] = c.mask_head;
    j["seed"] = c.seed;
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    const json j = json::parse(text);
    ModelConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("image_size", c.image_size);
    get("patch_size", c.patch_size);
    get("embed_dim", c.embed_dim);
    get("num_blocks", c.num_blocks);
    if (j.contains("global_blocks")) {
        c.global_blocks.clear();
        for (auto v : j.at("global_blocks")) c.global_blocks.insert(v.get<std::size_t>());
    }
    get("window_size", c.window_size);
    get("num_heads", c.num_heads);
    get("mlp_ratio", c.mlp_ratio);
    get("fpn_dims", c.fpn_dims);
    get("text_tokens", c.text_tokens);
    get("text_dim", c.text_dim);
    get("text_vocab", c.text_vocab);
    get("num_queries", c.num_queries);
    get("encoder_layers", c.encoder_layers);
    get("decoder_layers", c.decoder_layers);
    get("mask_head", c.mask_head);
    get("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------------------
// Model

void DetectorModel::for_each_weight(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    visit_weights(*this, fn);
}

void DetectorModel::for_each_weight(const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_weights(*this, fn);
}

std::size_t DetectorModel::parameter_count() const {
    std::size_t n = 0;
    for_each_weight([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

bool FpnFeatures::bitwise_equal(const FpnFeatures& other) const {
    for (std::size_t l = 0; l < 3; ++l) {
        if (!levels[l].bitwise_equal(other.levels[l])) return false;
    }
    return true;
}

Tensor TextEmbeddings::batch() const { return stack(tokens); }

const Tensor* TextCache::find(std::uint64_t model_key, const std::string& name) {
    if (model_key != model_key_) {
        entries_.clear();
        model_key_ = model_key;
    }
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        ++misses_;
        return nullptr;
    }
    ++hits_;
    return &it->second;
}

void TextCache::insert(std::uint64_t model_key, const std::string& name, Tensor value) {
    if (model_key != model_key_) {
        entries_.clear();
        model_key_ = model_key;
    }
    entries_.insert_or_assign(name, std::move(value));
}

void TextCache::clear() {
    entries_.clear();
    hits_ = misses_ = 0;
}

RawQueryOutputs RawQueryOutputs::rows(std::size_t begin, std::size_t end) const {
    return {slice(query_features, 0, begin, end), slice(boxes, 0, begin, end),
            slice(presence_logits, 0, begin, end), slice(score_logits, 0, begin, end)};
}

bool RawQueryOutputs::bitwise_equal(const RawQueryOutputs& o) const {
    return query_features.bitwise_equal(o.query_features) && boxes.bitwise_equal(o.boxes) &&
           presence_logits.bitwise_equal(o.presence_logits) &&
           score_logits.bitwise_equal(o.score_logits);
}

RawQueryOutputs concat_batches(const std::vector<RawQueryOutputs>& parts) {
    std::vector<Tensor> qf, bx, pr, sc;
    for (const auto& p : parts) {
        qf.push_back(p.query_features);
        bx.push_back(p.boxes);
        pr.push_back(p.presence_logits);
        sc.push_back(p.score_logits);
    }
    return {concat_rows(qf), concat_rows(bx), concat_rows(pr), concat_rows(sc)};
}

DetectorModel build_model(const ModelConfig& config) {
    config.validate();
    DetectorModel m = allocate_model(config);
    initialize(m);
    return m;
}

DetectorModel strip_mask_head(const DetectorModel& model) {
    DetectorModel m = model;
    m.mask_head.reset();
    m.config.mask_head = false;
    return m;
}

DetectorModel truncate_backbone(const DetectorModel& model, std::size_t depth) {
    if (depth > model.blocks.size()) {
        throw ConfigError("truncation depth " + std::to_string(depth) + " exceeds " +
                          std::to_string(model.blocks.size()) + " backbone blocks");
    }
    DetectorModel m = model;
    m.blocks.resize(depth);
    m.config.num_blocks = depth;
    std::set<std::size_t> globals;
    for (auto g : model.config.global_blocks) {
        if (g < depth) globals.insert(g);
    }
    if (globals.empty() && depth > 0) {
        globals.insert(depth - 1);
        m.blocks[depth - 1].kind = BlockKind::Global;
    }
    m.config.global_blocks = globals;
    return m;
}

void save_model(const DetectorModel& model, const std::filesystem::path& path) {
    json header;
    header["config"] = json::parse(config_to_json(model.config));
    json disabled = json::array();
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        if (!model.blocks[l].attn_enabled) disabled.push_back({l, "attn"});
        if (!model.blocks[l].mlp_enabled) disabled.push_back({l, "mlp"});
    }
    header["disabled"] = disabled;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kModelMagic, sizeof kModelMagic);
    write_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    model.for_each_weight([&](const std::string&, const Tensor& t) {
        for (double v : t.data()) write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    });
    if (!os) throw std::runtime_error("failed writing " + path.string());
}

DetectorModel load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open model file " + path.string());
    char magic[sizeof kModelMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kModelMagic, sizeof magic) != 0) {
        throw std::runtime_error(path.string() + " is not a DARTM1 model file");
    }
    const std::uint32_t len = read_u32(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw std::runtime_error("truncated model header");
    const json header = json::parse(text);
    const ModelConfig config = config_from_json(header.at("config").dump());
    config.validate();

    DetectorModel m = allocate_model(config);
    m.for_each_weight([&](const std::string&, Tensor& t) {
        std::vector<double> data(t.size());
        for (auto& v : data) v = std::bit_cast<float>(read_u32(is));
        t = Tensor(t.shape(), std::move(data));
    });
    for (const auto& entry : header.at("disabled")) {
        const auto block = entry.at(0).get<std::size_t>();
        if (block >= m.blocks.size()) throw std::runtime_error("disabled sub-block out of range");
        if (sub_block_kind_from_string(entry.at(1).get<std::string>()) == SubBlockKind::Attn) {
            m.blocks[block].attn_enabled = false;
        } else {
            m.blocks[block].mlp_enabled = false;
        }
    }
    return m;
}

std::uint64_t weights_checksum(const DetectorModel& model, const std::vector<std::string>& prefixes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    model.for_each_weight([&](const std::string& path, const Tensor& t) {
        const bool selected =
            prefixes.empty() || std::any_of(prefixes.begin(), prefixes.end(), [&](const auto& p) {
                return path.compare(0, p.size(), p) == 0;
            });
        if (!selected) return;
        h = fnv1a(path, h);
        h = fingerprint(t, h);
    });
    return h;
}

const std::vector<std::string>& encdec_weight_prefixes() {
    static const std::vector<std::string> prefixes = {"encdec.", "heads."};
    return prefixes;
}

// ---------------------------------------------------------------------------
// Backbone

Tensor embed_patches(const DetectorModel& model, const Tensor& image, PrecisionMode mode) {
    const auto& cfg = model.config;
    const Shape expected{cfg.image_size, cfg.image_size, 3};
    if (image.shape() != expected) {
        throw DimensionError("image shape " + shape_str(image.shape()) + " does not match " +
                             shape_str(expected));
    }
    const std::size_t grid = cfg.grid();
    const std::size_t p = cfg.patch_size;
    const std::size_t width = p * p * 3;
    std::vector<double> patches(cfg.tokens() * width);
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
            double* dst = patches.data() + (gy * grid + gx) * width;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x)
                    for (std::size_t c = 0; c < 3; ++c) {
                        *dst++ = image[((gy * p + y) * cfg.image_size + gx * p + x) * 3 + c];
                    }
        }
    return linear(Tensor({cfg.tokens(), width}, std::move(patches)), model.patch_embed.weight,
                  model.patch_embed.bias, mode);
}

Tensor apply_sub_block(const DetectorModel& model, std::size_t block, SubBlockKind kind,
                       const Tensor& x, PrecisionMode mode, const BackboneOptions& options) {
    const auto& b = model.blocks.at(block);
    if (kind == SubBlockKind::Attn) {
        if (!b.attn_enabled) return x;
        return add(x, backbone_attention(model, b, apply_norm(b.norm1, x, mode), mode, options), mode);
    }
    if (!b.mlp_enabled) return x;
    return add(x, apply_mlp(b.mlp, apply_norm(b.norm2, x, mode), mode), mode);
}

FpnFeatures project_fpn(const DetectorModel& model, const Tensor& trunk, PrecisionMode mode) {
    FpnFeatures out;
    out.model_seed = model.config.seed;
    out.mode = mode;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        for (auto kind : {SubBlockKind::Attn, SubBlockKind::Mlp}) {
            const bool on = kind == SubBlockKind::Attn ? model.blocks[l].attn_enabled
                                                       : model.blocks[l].mlp_enabled;
            if (on) continue;
            if (!out.plan_id.empty()) out.plan_id += ",";
            out.plan_id += std::to_string(l) + "." + to_string(kind);
        }
    }
    const std::size_t grid = model.config.grid();
    for (std::size_t l = 0; l < 3; ++l) {
        const Tensor pooled = l == 0 ? trunk : pool_grid(trunk, grid, std::size_t{1} << l, mode);
        const Tensor lateral =
            linear(pooled, model.fpn_lateral[l].weight, model.fpn_lateral[l].bias, mode);
        out.levels[l] = linear(lateral, model.fpn_output[l].weight, model.fpn_output[l].bias,
                               mode);
    }
    return out;
}

FpnFeatures backbone_forward(const DetectorModel& model, const Tensor& image, PrecisionMode mode,
                             const BackboneOptions& options) {
    Tensor x = embed_patches(model, image, mode);
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        x = apply_sub_block(model, l, SubBlockKind::Attn, x, mode, options);
        x = apply_sub_block(model, l, SubBlockKind::Mlp, x, mode, options);
    }
    return project_fpn(model, x, mode);
}

// ---------------------------------------------------------------------------
// Text

TextEmbeddings text_encode(const DetectorModel& model, const std::vector<std::string>& class_names,
                           TextCache* cache) {
    const auto& cfg = model.config;
    if (class_names.empty()) throw std::invalid_argument("text_encode needs at least one class name");
    TextEmbeddings out;
    const std::uint64_t key = cache ? text_key(model) : 0;
    for (const auto& name : class_names) {
        if (name.empty()) throw std::invalid_argument("class names must be nonempty");
        if (cache) {
            if (const Tensor* hit = cache->find(key, name)) {
                out.names.push_back(name);
                out.tokens.push_back(*hit);
                continue;
            }
        }
        const std::uint64_t h = fnv1a(name);
        std::vector<double> data(cfg.text_tokens * cfg.text_dim);
        for (std::size_t t = 0; t < cfg.text_tokens; ++t) {
            const std::size_t row = splitmix64(h + t) % cfg.text_vocab;
            for (std::size_t c = 0; c < cfg.text_dim; ++c) {
                data[t * cfg.text_dim + c] =
                    model.text_table[row * cfg.text_dim + c] + model.text_pos[t * cfg.text_dim + c];
            }
        }
        Tensor emb({cfg.text_tokens, cfg.text_dim}, std::move(data));
        if (cache) cache->insert(key, name, emb);
        out.names.push_back(name);
        out.tokens.push_back(std::move(emb));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Encoder-decoder

RawQueryOutputs encdec_forward(const DetectorModel& model, const FpnFeatures& fpn,
                               const TextEmbeddings& text, PrecisionMode mode) {
    const auto& cfg = model.config;
    const std::size_t n = text.tokens.size();
    if (n == 0) throw std::invalid_argument("encdec_forward needs at least one class");
    const std::size_t td = cfg.text_dim;
    const std::size_t heads = cfg.text_heads();

    std::vector<Tensor> memory_parts;
    for (std::size_t l = 0; l < 3; ++l) {
        const Shape expected{cfg.level_tokens(l), cfg.fpn_dims[l]};
        if (fpn.levels[l].shape() != expected) {
            throw DimensionError("FPN level " + std::to_string(l) + " has shape " +
                                 shape_str(fpn.levels[l].shape()) + ", model expects " +
                                 shape_str(expected));
        }
        Tensor proj = linear(fpn.levels[l], model.memory_proj[l].weight, model.memory_proj[l].bias, mode);
        memory_parts.push_back(add_bias(proj, slice(model.level_embed, 0, l, l + 1).reshaped({td}), mode));
    }
    Tensor memory = broadcast_leading(concat_rows(memory_parts), n);

    Tensor txt = store(text.batch(), mode);
    if (txt.dim(1) != cfg.text_tokens || txt.dim(2) != td) {
        throw DimensionError("text embeddings " + shape_str(txt.shape()) + " do not match model");
    }

    for (const auto& layer : model.encoder) {
        Tensor h = apply_norm(layer.norm_self, memory, mode);
        memory = add(memory, multi_head(layer.self_attn, h, h, heads, mode), mode);
        h = apply_norm(layer.norm_cross, memory, mode);
        memory = add(memory, multi_head(layer.cross_attn, h, txt, heads, mode), mode);
        h = apply_norm(layer.norm_mlp, memory, mode);
        memory = add(memory, apply_mlp(layer.mlp, h, mode), mode);
    }

    const std::size_t nq = cfg.num_queries;
    Tensor queries = broadcast_leading(store(concat_rows({model.query_embed, model.presence_token}), mode), n);
    for (const auto& layer : model.decoder) {
        Tensor h = apply_norm(layer.norm_self, queries, mode);
        queries = add(queries, multi_head(layer.self_attn, h, h, heads, mode), mode);
        h = apply_norm(layer.norm_cross, queries, mode);
        queries = add(queries, multi_head(layer.cross_attn, h, memory, heads, mode), mode);
        h = apply_norm(layer.norm_mlp, queries, mode);
        queries = add(queries, apply_mlp(layer.mlp, h, mode), mode);
    }
    queries = apply_norm(model.final_norm, queries, mode);

    RawQueryOutputs out;
    out.query_features = slice(queries, 1, 0, nq);
    const Tensor presence_feat = slice(queries, 1, nq, nq + 1);

    Tensor box_logits = linear(relu(linear(out.query_features, model.box_head.fc1.weight,
                                           model.box_head.fc1.bias, mode)),
                               model.box_head.fc2.weight, model.box_head.fc2.bias, mode);
    Tensor boxes = sigmoid(scale(box_logits, kBoxLogitGain, mode));
    std::vector<double> clamped(boxes.data().begin(), boxes.data().end());
    for (auto& v : clamped) v = std::clamp(v, 0.0, 1.0);
    out.boxes = Tensor(boxes.shape(), std::move(clamped));

    // Dot-product scoring of each query against the class's pooled text.
    std::vector<double> pooled(n * td, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t t = 0; t < cfg.text_tokens; ++t)
            for (std::size_t c = 0; c < td; ++c) pooled[b * td + c] += txt[(b * cfg.text_tokens + t) * td + c];
        for (std::size_t c = 0; c < td; ++c) pooled[b * td + c] /= static_cast<double>(cfg.text_tokens);
    }
    const Tensor pooled_text = store(Tensor({n, td, 1}, std::move(pooled)), mode);
    const Tensor projected =
        linear(out.query_features, model.score_proj.weight, model.score_proj.bias, mode);
    out.score_logits = matmul(projected, pooled_text, mode).reshaped({n, nq});

    const Tensor presence_proj =
        linear(presence_feat, model.presence_head.weight, model.presence_head.bias, mode);
    out.presence_logits = matmul(presence_proj, pooled_text, mode).reshaped({n});
    return out;
}

Tensor mask_head_forward(const DetectorModel& model, const FpnFeatures& fpn,
                         const RawQueryOutputs& queries, PrecisionMode mode) {
    if (!model.mask_head) throw MaskHeadRemoved();
    const auto& mh = *model.mask_head;
    const Tensor embed = linear(relu(linear(queries.query_features, mh.query_fc1.weight,
                                            mh.query_fc1.bias, mode)),
                                mh.query_fc2.weight, mh.query_fc2.bias, mode);
    const Tensor pixels = linear(fpn.levels[0], mh.pixel_proj.weight, mh.pixel_proj.bias, mode);
    return matmul(embed, transpose_last2(pixels), mode);
}

}  // namespace dart
