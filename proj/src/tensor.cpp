// SPDX-License-Identifier: Apache-2.0
#include "dart/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace dart {

namespace {

constexpr double kHalfMinNormal = 0x1p-14;

// Same contract as round_half; kept inline for the matmul inner loops.
inline double round_half_inline(double x, bool& overflow) {
    const double ax = std::fabs(x);
    if (!(ax <= kHalfMax)) {
        if (std::isnan(x)) return x;
        overflow = true;
        return std::copysign(kHalfMax, x);
    }
    if (ax < kHalfMinNormal) {
        // Subnormal binary16 values are the multiples of 2^-24; the scaling is exact.
        return std::nearbyint(x * 0x1p24) * 0x1p-24;
    }
    // Normal range: keep 10 of the 52 stored mantissa bits, ties to even.
    constexpr int kDrop = 52 - 10;
    constexpr std::uint64_t kLowMask = (std::uint64_t{1} << kDrop) - 1;
    auto bits = std::bit_cast<std::uint64_t>(x);
    const std::uint64_t lsb = (bits >> kDrop) & 1u;
    bits += (kLowMask >> 1) + lsb;
    bits &= ~kLowMask;
    return std::bit_cast<double>(bits);
}

struct HalfRounder {
    bool overflow = false;
    double operator()(double x) { return round_half_inline(x, overflow); }
};

std::vector<double> rounded_copy(std::span<const double> in, bool& overflow) {
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = round_half_inline(in[i], overflow);
    return out;
}

Tensor finish(Shape shape, std::vector<double> data, PrecisionMode mode, bool overflow) {
    if (!is_half(mode)) return Tensor(std::move(shape), std::move(data));
    for (auto& v : data) v = round_half_inline(v, overflow);
    return Tensor(std::move(shape), std::move(data), Storage::Half, overflow);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

void gemm_block(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                std::size_t n, bool half_accumulate, bool& overflow) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        std::fill(crow, crow + n, 0.0);
        const double* arow = a + i * k;
        if (!half_accumulate) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = arow[p];
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double prod = round_half_inline(av * brow[j], overflow);
                    crow[j] = round_half_inline(crow[j] + prod, overflow);
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const char* to_string(PrecisionMode mode) {
    switch (mode) {
        case PrecisionMode::Fp32: return "fp32";
        case PrecisionMode::Fp16AccumFp32: return "fp16-acc32";
        case PrecisionMode::Fp16AccumFp16: return "fp16-acc16";
    }
    return "?";
}

PrecisionMode precision_mode_from_string(const std::string& name) {
    if (name == "fp32") return PrecisionMode::Fp32;
    if (name == "fp16-acc32") return PrecisionMode::Fp16AccumFp32;
    if (name == "fp16-acc16") return PrecisionMode::Fp16AccumFp16;
    throw std::invalid_argument("unknown precision mode '" + name +
                                "' (expected fp32, fp16-acc32 or fp16-acc16)");
}

double round_half(double x, bool* overflow) {
    bool flag = false;
    const double r = round_half_inline(x, flag);
    if (overflow && flag) *overflow = true;
    return r;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, Storage storage, bool overflowed)
    : shape_(std::move(shape)), data_(std::move(data)), storage_(storage), overflowed_(overflowed) {
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
    }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(shape_));
    }
    return shape_[axis];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) throw DimensionError("index rank mismatch");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw DimensionError("index out of range");
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return data_[flat];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_, storage_, overflowed_);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

// ---------------------------------------------------------------------------
// Kernels

Tensor round_fp16(const Tensor& x) {
    bool overflow = x.overflowed();
    auto data = rounded_copy(x.data(), overflow);
    return Tensor(x.shape(), std::move(data), Storage::Half, overflow);
}

Tensor store(const Tensor& x, PrecisionMode mode) {
    if (!is_half(mode) || x.storage() == Storage::Half) return x;
    return round_fp16(x);
}

Tensor matmul(const Tensor& a, const Tensor& b, PrecisionMode mode) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(a.rank() - 2);
    const std::size_t k = a.dim(a.rank() - 1);
    const std::size_t n = b.dim(b.rank() - 1);
    if (b.dim(b.rank() - 2) != k) {
        throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }

    // Broadcast the leading (batch) axes, right-aligned.
    const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    const std::size_t batch_rank = std::max(a_batch.size(), b_batch.size());
    Shape out_batch(batch_rank, 1);
    std::vector<std::size_t> a_dims(batch_rank, 1), b_dims(batch_rank, 1);
    std::copy(a_batch.begin(), a_batch.end(), a_dims.begin() + (batch_rank - a_batch.size()));
    std::copy(b_batch.begin(), b_batch.end(), b_dims.begin() + (batch_rank - b_batch.size()));
    for (std::size_t i = 0; i < batch_rank; ++i) {
        if (a_dims[i] != b_dims[i] && a_dims[i] != 1 && b_dims[i] != 1) {
            throw DimensionError("matmul batch dimensions do not broadcast: " +
                                 shape_str(a.shape()) + " x " + shape_str(b.shape()));
        }
        out_batch[i] = std::max(a_dims[i], b_dims[i]);
    }

    bool overflow = a.overflowed() || b.overflowed();
    std::vector<double> a_round, b_round;
    std::span<const double> av = a.data();
    std::span<const double> bv = b.data();
    if (is_half(mode)) {
        if (a.storage() != Storage::Half) {
            a_round = rounded_copy(av, overflow);
            av = a_round;
        }
        if (b.storage() != Storage::Half) {
            b_round = rounded_copy(bv, overflow);
            bv = b_round;
        }
    }

    const bool half_acc = mode == PrecisionMode::Fp16AccumFp16;
    const std::size_t batches = shape_numel(out_batch);
    Shape out_shape = out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(batches * m * n);

    const auto a_strides = strides_of(a_dims);
    const auto b_strides = strides_of(b_dims);
    const auto o_strides = strides_of(out_batch);
    for (std::size_t bi = 0; bi < batches; ++bi) {
        std::size_t a_off = 0, b_off = 0, rem = bi;
        for (std::size_t d = 0; d < batch_rank; ++d) {
            const std::size_t idx = rem / o_strides[d];
            rem %= o_strides[d];
            if (a_dims[d] != 1) a_off += idx * a_strides[d];
            if (b_dims[d] != 1) b_off += idx * b_strides[d];
        }
        gemm_block(av.data() + a_off * m * k, bv.data() + b_off * k * n, out.data() + bi * m * n, m,
                   k, n, half_acc, overflow);
    }
    return finish(std::move(out_shape), std::move(out), mode, overflow);
}

Tensor softmax(const Tensor& x, std::size_t axis, PrecisionMode mode) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    }
    const std::size_t len = x.dim(axis);
    if (len == 0) throw DimensionError("softmax over an empty axis");
    const auto strides = strides_of(x.shape());
    const std::size_t inner = strides[axis];
    const std::size_t outer = x.size() / (len * inner);

    bool overflow = x.overflowed();
    HalfRounder r;
    std::vector<double> in(x.data().begin(), x.data().end());
    if (is_half(mode) && x.storage() != Storage::Half) {
        for (auto& v : in) v = r(v);
    }
    const bool half_acc = mode == PrecisionMode::Fp16AccumFp16;
    std::vector<double> out(in.size());
    std::vector<double> e(len);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double mx = in[base];
            for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, in[base + t * inner]);
            double sum = 0.0;
            for (std::size_t t = 0; t < len; ++t) {
                if (half_acc) {
                    e[t] = r(std::exp(r(in[base + t * inner] - mx)));
                    sum = r(sum + e[t]);
                } else {
                    e[t] = std::exp(in[base + t * inner] - mx);
                    sum += e[t];
                }
            }
            for (std::size_t t = 0; t < len; ++t) out[base + t * inner] = e[t] / sum;
        }
    }
    return finish(x.shape(), std::move(out), mode, overflow || r.overflow);
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("layernorm eps must be positive");
    if (x.rank() == 0) throw DimensionError("layernorm of a rank-0 tensor");
    const std::size_t width = x.dim(x.rank() - 1);
    if (gamma.size() != width || beta.size() != width) {
        throw DimensionError("layernorm affine size does not match last axis of " +
                             shape_str(x.shape()));
    }
    const std::size_t rows = width == 0 ? 0 : x.size() / width;
    const auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.data() + r * width;
        double mean = 0.0;
        for (std::size_t j = 0; j < width; ++j) mean += row[j];
        mean /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < width; ++j) {
            out[r * width + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    return Tensor(x.shape(), std::move(out));
}

Tensor rope_apply(const Tensor& x, const Tensor& cos_table, const Tensor& sin_table) {
    if (x.rank() < 2) throw DimensionError("rope_apply needs [..., tokens, channels]");
    const std::size_t channels = x.dim(x.rank() - 1);
    const std::size_t tokens = x.dim(x.rank() - 2);
    if (channels % 2 != 0) {
        throw DimensionError("rope_apply needs an even channel count, got " +
                             std::to_string(channels));
    }
    const Shape expected{tokens, channels / 2};
    if (cos_table.shape() != expected || sin_table.shape() != expected) {
        throw DimensionError("rope tables " + shape_str(cos_table.shape()) + " / " +
                             shape_str(sin_table.shape()) + " do not match " + shape_str(expected));
    }
    const auto in = x.data();
    std::vector<double> out(in.size());
    const std::size_t plane = tokens * channels;
    const std::size_t half = channels / 2;
    for (std::size_t base = 0; base < in.size(); base += plane) {
        for (std::size_t t = 0; t < tokens; ++t) {
            for (std::size_t p = 0; p < half; ++p) {
                const double c = cos_table[t * half + p];
                const double s = sin_table[t * half + p];
                const std::size_t i = base + t * channels + 2 * p;
                const double x0 = in[i];
                const double x1 = in[i + 1];
                out[i] = x0 * c - x1 * s;
                out[i + 1] = x0 * s + x1 * c;
            }
        }
    }
    return Tensor(x.shape(), std::move(out));
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("cosine_similarity shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) {
        throw std::domain_error("cosine similarity of two zero vectors is undefined");
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b, PrecisionMode mode) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return finish(a.shape(), std::move(out), mode, a.overflowed() || b.overflowed());
}

Tensor add_bias(const Tensor& x, const Tensor& bias, PrecisionMode mode) {
    const std::size_t width = x.rank() ? x.dim(x.rank() - 1) : 0;
    if (bias.size() != width) {
        throw DimensionError("bias of size " + std::to_string(bias.size()) +
                             " does not match last axis of " + shape_str(x.shape()));
    }
    bool overflow = x.overflowed();
    std::vector<double> b(bias.data().begin(), bias.data().end());
    if (is_half(mode)) {
        for (auto& v : b) v = round_half_inline(v, overflow);
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % width];
    return finish(x.shape(), std::move(out), mode, overflow);
}

Tensor scale(const Tensor& x, double factor, PrecisionMode mode) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
    return finish(x.shape(), std::move(out), mode, x.overflowed());
}

Tensor gelu(const Tensor& x, PrecisionMode mode) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
    }
    return finish(x.shape(), std::move(out), mode, x.overflowed());
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    return Tensor(x.shape(), std::move(out), x.storage(), x.overflowed());
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
    return Tensor(x.shape(), std::move(out));
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias, PrecisionMode mode) {
    return add_bias(matmul(x, weight, mode), bias, mode);
}

// ---------------------------------------------------------------------------
// Layout

Tensor transpose_last2(const Tensor& x) {
    if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2");
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
    return permute(x, axes);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t rank = x.rank();
    if (axes.size() != rank) throw DimensionError("permute axis count mismatch");
    std::vector<bool> seen(rank, false);
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("invalid permutation");
        seen[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    const auto in_strides = strides_of(x.shape());
    std::vector<std::size_t> src_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[axes[i]];

    std::vector<double> out(x.size());
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    for (std::size_t o = 0; o < out.size(); ++o) {
        out[o] = x[src];
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += src_strides[d];
                break;
            }
            src -= src_strides[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    return Tensor(std::move(out_shape), std::move(out), x.storage(), x.overflowed());
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat of nothing");
    Shape shape = parts.front().shape();
    if (shape.empty()) throw DimensionError("concat of rank-0 tensors");
    std::size_t rows = 0;
    bool all_half = true, overflow = false;
    for (const auto& p : parts) {
        if (p.rank() != shape.size() ||
            !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
            throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " +
                                 shape_str(shape));
        }
        rows += p.dim(0);
        all_half = all_half && p.storage() == Storage::Half;
        overflow = overflow || p.overflowed();
    }
    shape[0] = rows;
    std::vector<double> out;
    out.reserve(shape_numel(shape));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return Tensor(std::move(shape), std::move(out), all_half ? Storage::Half : Storage::Full,
                  overflow);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
        throw DimensionError("invalid slice of " + shape_str(x.shape()));
    }
    const auto strides = strides_of(x.shape());
    const std::size_t inner = strides[axis];
    const std::size_t outer = x.size() / (x.dim(axis) * inner);
    Shape shape = x.shape();
    shape[axis] = end - begin;
    std::vector<double> out;
    out.reserve(outer * (end - begin) * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        const auto first = x.data().begin() + (o * x.dim(axis) + begin) * inner;
        out.insert(out.end(), first, first + (end - begin) * inner);
    }
    return Tensor(std::move(shape), std::move(out), x.storage(), x.overflowed());
}

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("stack of nothing");
    std::vector<Tensor> expanded;
    expanded.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.shape() != parts.front().shape()) {
            throw DimensionError("stack shape mismatch: " + shape_str(p.shape()) + " vs " +
                                 shape_str(parts.front().shape()));
        }
        Shape s = p.shape();
        s.insert(s.begin(), 1);
        expanded.push_back(p.reshaped(std::move(s)));
    }
    return concat_rows(expanded);
}

Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows) {
    if (x.rank() == 0) throw DimensionError("take_rows of a rank-0 tensor");
    const std::size_t row_size = x.size() / std::max<std::size_t>(x.dim(0), 1);
    Shape shape = x.shape();
    shape[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * row_size);
    for (auto r : rows) {
        if (r >= x.dim(0)) throw DimensionError("row index out of range");
        const auto first = x.data().begin() + r * row_size;
        out.insert(out.end(), first, first + row_size);
    }
    return Tensor(std::move(shape), std::move(out), x.storage(), x.overflowed());
}

Tensor broadcast_leading(const Tensor& x, std::size_t count) {
    Shape shape = x.shape();
    shape.insert(shape.begin(), count);
    std::vector<double> out;
    out.reserve(count * x.size());
    for (std::size_t i = 0; i < count; ++i) out.insert(out.end(), x.data().begin(), x.data().end());
    return Tensor(std::move(shape), std::move(out), x.storage(), x.overflowed());
}

double l2_norm(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v * v;
    return std::sqrt(s);
}

double l2_distance(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("l2_distance shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

std::uint64_t fingerprint(const Tensor& x, std::uint64_t seed) {
    std::uint64_t h = seed;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (auto d : x.shape()) {
        const std::uint64_t v = d;
        mix(&v, sizeof v);
    }
    mix(x.data().data(), x.size() * sizeof(double));
    return h;
}

}  // namespace dart
