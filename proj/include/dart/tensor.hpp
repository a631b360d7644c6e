// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dart {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Arithmetic discipline used by a kernel.
///
///   Fp32           no rounding anywhere.
///   Fp16AccumFp32  operands and results rounded to binary16, inner products
///                  accumulated in full precision (fused attention kernels).
///   Fp16AccumFp16  operands, every product, every partial sum and the result
///                  rounded to binary16 (generic half matmul).
enum class PrecisionMode { Fp32, Fp16AccumFp32, Fp16AccumFp16 };

/// Storage format the elements of a tensor are constrained to.
enum class Storage { Full, Half };

const char* to_string(PrecisionMode mode);
PrecisionMode precision_mode_from_string(const std::string& name);

inline bool is_half(PrecisionMode mode) { return mode != PrecisionMode::Fp32; }

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Round-to-nearest-even to the nearest binary16 value, returned as a double.
/// Magnitudes above 65504 saturate to +-65504 and set `*overflow` when given.
/// Subnormals are kept; NaN passes through.
double round_half(double x, bool* overflow = nullptr);

inline constexpr double kHalfMax = 65504.0;

/// Dense row-major tensor. Immutable once constructed; every kernel returns a
/// fresh value.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, Storage storage = Storage::Full,
           bool overflowed = false);

    static Tensor zeros(Shape shape);
    static Tensor filled(Shape shape, double value);
    static Tensor scalar(double value);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<const double> data() const { return data_; }
    double operator[](std::size_t i) const { return data_[i]; }
    double at(std::initializer_list<std::size_t> index) const;

    Storage storage() const { return storage_; }
    /// True when an fp16 rounding step on the way to this value saturated.
    bool overflowed() const { return overflowed_; }

    Tensor reshaped(Shape shape) const;

    /// Byte-level equality of shape and data; the strongest equivalence check.
    bool bitwise_equal(const Tensor& other) const;

private:
    Shape shape_;
    std::vector<double> data_;
    Storage storage_ = Storage::Full;
    bool overflowed_ = false;
};

// ---------------------------------------------------------------------------
// Core kernels

Tensor round_fp16(const Tensor& x);

/// Batched matrix product over the last two axes with numpy-style broadcasting
/// of the leading axes. Each output element accumulates over the inner axis in
/// a fixed left-to-right order.
Tensor matmul(const Tensor& a, const Tensor& b, PrecisionMode mode);

Tensor softmax(const Tensor& x, std::size_t axis, PrecisionMode mode);

/// Normalizes over the last axis. Computed in full precision.
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

/// Planar rotation of adjacent channel pairs (2i, 2i+1) of the last axis by the
/// tabulated angle. Tables are [tokens, channels/2]; x is [..., tokens, channels].
Tensor rope_apply(const Tensor& x, const Tensor& cos_table, const Tensor& sin_table);

double cosine_similarity(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Elementwise and layout helpers. Under half modes results are stored in fp16.

Tensor add(const Tensor& a, const Tensor& b, PrecisionMode mode);
/// Adds a vector along the last axis.
Tensor add_bias(const Tensor& x, const Tensor& bias, PrecisionMode mode);
Tensor scale(const Tensor& x, double factor, PrecisionMode mode);
Tensor gelu(const Tensor& x, PrecisionMode mode);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// x[..., in] * weight[in, out] + bias[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias, PrecisionMode mode);

/// Rounds to fp16 under half modes, identity otherwise.
Tensor store(const Tensor& x, PrecisionMode mode);

Tensor transpose_last2(const Tensor& x);
/// General axis permutation.
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
/// Concatenates along axis 0.
Tensor concat_rows(const std::vector<Tensor>& parts);
/// Rows [begin, end) along axis `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& parts);
/// Selects entries of axis 0.
Tensor take_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Repeats x along a new leading axis.
Tensor broadcast_leading(const Tensor& x, std::size_t count);

double l2_norm(const Tensor& x);
double l2_distance(const Tensor& a, const Tensor& b);

/// FNV-1a over the raw bytes of the data.
std::uint64_t fingerprint(const Tensor& x, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace dart
