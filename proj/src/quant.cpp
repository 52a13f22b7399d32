#include "quant.hpp"

#include <algorithm>
#include <charconv>

#include "errors.hpp"

namespace bisup {

void QuantSpec::validate() const {
  if (bits < 2 || bits > 8) {
    throw ConfigError("quant bits must be in [2,8], got " + std::to_string(bits));
  }
  if (granularity == Granularity::kGroup && group_size < 1) {
    throw ConfigError("group granularity requires a positive group size");
  }
  if (!(clip > 0.0) || clip > 1.0) {
    throw ConfigError("clip factor must be in (0,1], got " + std::to_string(clip));
  }
}

GroupLayout make_layout(const std::vector<int64_t>& shape, const QuantSpec& spec) {
  int64_t rows = 1, row_len = 1;
  if (shape.size() == 1) {
    row_len = shape[0];
  } else if (shape.size() == 2) {
    rows = shape[0];
    row_len = shape[1];
  } else {
    throw ShapeError("quantization expects rank-1 or rank-2 tensors");
  }

  GroupLayout lo;
  switch (spec.granularity) {
    case Granularity::kPerTensor:
      lo = {1, rows * row_len, rows * row_len};
      break;
    case Granularity::kPerChannel:
    case Granularity::kPerToken:
      lo = {rows, row_len, row_len};
      break;
    case Granularity::kGroup:
      if (row_len % spec.group_size != 0) {
        throw ShapeError("group size " + std::to_string(spec.group_size) +
                         " does not divide axis length " + std::to_string(row_len));
      }
      lo = {rows, row_len, spec.group_size};
      break;
  }
  if (lo.group_size == 0) throw ShapeError("cannot quantize an empty tensor");
  return lo;
}

double compute_scale_symmetric(double max_abs, int bits, double clip) {
  if (max_abs == 0.0) return 1.0;
  const double levels = static_cast<double>((int64_t(1) << (bits - 1)) - 1);
  return max_abs / levels * clip;
}

QuantizedTensor quantize(const Tensor& x, const QuantSpec& spec) {
  if (spec.symmetric) return quantize_sym(x, spec, ClipView{nullptr, nullptr, spec.clip});
  return quantize_asym(x, spec);
}

QuantizedTensor quantize_sym(const Tensor& x, const QuantSpec& spec, const ClipView& clips) {
  spec.validate();
  ensure_finite(x, "quantize input");
  const GroupLayout lo = make_layout(x.shape(), spec);

  QuantizedTensor q;
  q.shape = x.shape();
  q.spec = spec;
  q.layout = lo;
  q.codes.resize(static_cast<size_t>(x.numel()));
  q.scales.resize(static_cast<size_t>(lo.total_groups()));

  const double qmin = static_cast<double>(spec.q_min());
  const double qmax = static_cast<double>(spec.q_max());
  const int64_t gpr = lo.groups_per_row();
  const double* xd = x.data();

  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      double m = 0.0;
      for (int64_t i = 0; i < lo.group_size; ++i) {
        m = std::max(m, std::abs(xd[base + i]));
      }
      const double c = clips.at(r, g, gpr);
      const double scale = compute_scale_symmetric(m, spec.bits, c);
      q.scales[static_cast<size_t>(r * gpr + g)] = scale;
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double z = round_half_away(xd[base + i] / scale);
        q.codes[static_cast<size_t>(base + i)] =
            static_cast<int16_t>(std::clamp(z, qmin, qmax));
      }
    }
  }
  return q;
}

QuantizedTensor quantize_asym(const Tensor& x, const QuantSpec& spec) {
  spec.validate();
  if (spec.symmetric) throw ConfigError("quantize_asym called with a symmetric spec");
  ensure_finite(x, "quantize input");
  const GroupLayout lo = make_layout(x.shape(), spec);

  QuantizedTensor q;
  q.shape = x.shape();
  q.spec = spec;
  q.layout = lo;
  q.codes.resize(static_cast<size_t>(x.numel()));
  q.scales.resize(static_cast<size_t>(lo.total_groups()));
  q.zero_points.resize(static_cast<size_t>(lo.total_groups()));

  const double qmax = static_cast<double>(spec.q_max());
  const int64_t gpr = lo.groups_per_row();
  const double* xd = x.data();

  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      double mn = xd[base], mx = xd[base];
      for (int64_t i = 1; i < lo.group_size; ++i) {
        mn = std::min(mn, xd[base + i]);
        mx = std::max(mx, xd[base + i]);
      }
      if (mx == mn) {
        // Degenerate range: encode the constant exactly with a unit code.
        const double v = mx;
        if (v == 0.0) {
          q.scales[gi] = 1.0;
          q.zero_points[gi] = 0;
          for (int64_t i = 0; i < lo.group_size; ++i) q.codes[base + i] = 0;
        } else if (v > 0.0) {
          q.scales[gi] = v;
          q.zero_points[gi] = 0;
          for (int64_t i = 0; i < lo.group_size; ++i) q.codes[base + i] = 1;
        } else {
          q.scales[gi] = -v;
          q.zero_points[gi] = 1;
          for (int64_t i = 0; i < lo.group_size; ++i) q.codes[base + i] = 0;
        }
        continue;
      }
      // Extend the range to cover zero so the affine grid represents 0.0
      // exactly and the zero point always lands inside [0, qmax].
      const double lo_ext = std::min(mn, 0.0);
      const double hi_ext = std::max(mx, 0.0);
      const double scale = (hi_ext - lo_ext) / qmax;
      const double zp = round_half_away(-lo_ext / scale);
      q.scales[gi] = scale;
      q.zero_points[gi] = static_cast<int32_t>(zp);
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double z = round_half_away(xd[base + i] / scale) + zp;
        q.codes[static_cast<size_t>(base + i)] =
            static_cast<int16_t>(std::clamp(z, 0.0, qmax));
      }
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor y(q.shape);
  const GroupLayout& lo = q.layout;
  const int64_t gpr = lo.groups_per_row();
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      const double scale = q.scales[static_cast<size_t>(gi)];
      const double zp = q.spec.symmetric
                            ? 0.0
                            : static_cast<double>(q.zero_points[static_cast<size_t>(gi)]);
      for (int64_t i = 0; i < lo.group_size; ++i) {
        y[base + i] = (static_cast<double>(q.codes[static_cast<size_t>(base + i)]) - zp) *
                      scale;
      }
    }
  }
  return y;
}

const std::vector<double>& default_clip_grid() {
  static const std::vector<double> grid = {0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 1.00};
  return grid;
}

double grid_search_clip(const Tensor& w, const QuantSpec& spec,
                        const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("empty clip grid");
  double best_c = grid.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (double c : grid) {
    QuantSpec s = spec;
    s.clip = c;
    const Tensor deq = dequantize(quantize(w, s));
    double err = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) {
      const double d = w[i] - deq[i];
      err += d * d;
    }
    if (err <= best_err) {
      best_err = err;
      best_c = c;
    }
  }
  return best_c;
}

QuantSpec QuantScheme::weight_spec(double clip) const {
  QuantSpec s;
  s.bits = weight_bits;
  s.symmetric = true;
  s.granularity = group_size > 0 ? Granularity::kGroup : Granularity::kPerChannel;
  s.group_size = group_size;
  s.clip = clip;
  return s;
}

QuantSpec QuantScheme::act_spec(double clip) const {
  QuantSpec s;
  s.bits = act_bits;
  s.symmetric = true;
  s.granularity = group_size > 0 ? Granularity::kGroup : Granularity::kPerToken;
  s.group_size = group_size;
  s.clip = clip;
  return s;
}

QuantSpec QuantScheme::kv_spec() const {
  QuantSpec s;
  s.bits = act_bits;
  s.symmetric = false;
  s.granularity = Granularity::kPerToken;
  s.clip = 1.0;
  return s;
}

QuantScheme parse_quant_scheme(const std::string& s) {
  if (s == "none") {
    QuantScheme q;
    q.no_op = true;
    q.text = "none";
    return q;
  }
  auto fail = [&]() -> QuantScheme {
    throw ConfigError("bad quantization spec '" + s +
                      "', expected e.g. W4A4, W3A3-g16, or none");
  };
  size_t i = 0;
  auto read_int = [&](int64_t& out) {
    const char* begin = s.data() + i;
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || p == begin) return false;
    i += static_cast<size_t>(p - begin);
    return true;
  };

  QuantScheme q;
  int64_t wbits = 0, abits = 0, group = 0;
  if (i >= s.size() || s[i] != 'W') return fail();
  ++i;
  if (!read_int(wbits)) return fail();
  if (i >= s.size() || s[i] != 'A') return fail();
  ++i;
  if (!read_int(abits)) return fail();
  if (i < s.size()) {
    if (s[i] != '-' || i + 1 >= s.size() || s[i + 1] != 'g') return fail();
    i += 2;
    if (!read_int(group)) return fail();
    if (group < 1) return fail();
    if (i != s.size()) return fail();
  }
  if (wbits < 2 || wbits > 8 || abits < 2 || abits > 8) {
    throw ConfigError("quant bits must be in [2,8] in spec '" + s + "'");
  }
  q.weight_bits = static_cast<int>(wbits);
  q.act_bits = static_cast<int>(abits);
  q.group_size = group;
  q.text = s;
  return q;
}

}  // namespace bisup
