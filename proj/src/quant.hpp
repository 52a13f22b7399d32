#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace bisup {

enum class Granularity { kPerTensor, kPerChannel, kPerToken, kGroup };

// Quantized axis is always the last one: a [rows x cols] matrix is split into
// row units (output channels for weights, tokens for activations) and each row
// is subdivided into groups. Per-channel/per-token means one group spanning
// the whole row; per-tensor treats the flattened tensor as a single row.
struct QuantSpec {
  int bits = 4;
  bool symmetric = true;
  Granularity granularity = Granularity::kPerToken;
  int64_t group_size = 0;  // used only with Granularity::kGroup
  double clip = 1.0;       // scalar clip factor in (0, 1]

  void validate() const;
  // symmetric integer range [-(2^{N-1}), 2^{N-1}-1]; asymmetric [0, 2^N-1]
  int64_t q_min() const { return symmetric ? -(int64_t(1) << (bits - 1)) : 0; }
  int64_t q_max() const {
    return symmetric ? (int64_t(1) << (bits - 1)) - 1 : (int64_t(1) << bits) - 1;
  }
  // number of strictly positive symmetric levels; scale denominator
  double level_count() const { return static_cast<double>(q_max()); }
};

struct GroupLayout {
  int64_t rows = 0;
  int64_t row_len = 0;
  int64_t group_size = 0;
  int64_t groups_per_row() const { return row_len / group_size; }
  int64_t total_groups() const { return rows * groups_per_row(); }
};

GroupLayout make_layout(const std::vector<int64_t>& shape, const QuantSpec& spec);

// Per-group clip source: learned per-(row,group) tensor for weights, learned
// per-column-group vector shared across tokens for activations, or the
// spec's scalar factor.
struct ClipView {
  const double* per_group = nullptr;      // size rows * groups_per_row
  const double* per_col_group = nullptr;  // size groups_per_row
  double scalar = 1.0;

  double at(int64_t row, int64_t g, int64_t gpr) const {
    if (per_group != nullptr) return per_group[row * gpr + g];
    if (per_col_group != nullptr) return per_col_group[g];
    return scalar;
  }
};

struct QuantizedTensor {
  std::vector<int64_t> shape;
  QuantSpec spec;
  GroupLayout layout;
  std::vector<int16_t> codes;        // numel entries
  std::vector<double> scales;        // total_groups entries, all > 0
  std::vector<int32_t> zero_points;  // total_groups entries iff asymmetric
};

// delta = max_abs / (2^{N-1} - 1) * clip; a zero-max group gets delta = 1.
double compute_scale_symmetric(double max_abs, int bits, double clip);

// Ties round away from zero (std::round semantics).
inline double round_half_away(double x) { return std::round(x); }

QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec);
QuantizedTensor quantize_sym(const Tensor& x, const QuantSpec& spec, const ClipView& clips);
QuantizedTensor quantize_asym(const Tensor& x, const QuantSpec& spec);
Tensor dequantize(const QuantizedTensor& q);

const std::vector<double>& default_clip_grid();

// Best scalar clip factor for w under spec, minimizing reconstruction MSE
// over the candidate grid; ties break toward the larger clip.
double grid_search_clip(const Tensor& w, const QuantSpec& spec,
                        const std::vector<double>& grid = default_clip_grid());

// Quantization scheme string: "W4A4", "W4A4-g128", "W3A3-g16". Weight and
// activation bits in [2,8]; the optional group size applies to both; the
// KV cache uses the activation bit width, per-token asymmetric, ungrouped.
// "none" disables quantization everywhere (diagnostic no-op scheme).
struct QuantScheme {
  int weight_bits = 4;
  int act_bits = 4;
  int64_t group_size = 0;  // 0 = per-channel / per-token
  bool no_op = false;
  std::string text = "W4A4";

  QuantSpec weight_spec(double clip = 1.0) const;
  QuantSpec act_spec(double clip = 1.0) const;
  QuantSpec kv_spec() const;
};

QuantScheme parse_quant_scheme(const std::string& s);

}  // namespace bisup
