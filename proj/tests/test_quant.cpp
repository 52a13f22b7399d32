#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "errors.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "tensor.hpp"

using namespace bisup;

namespace {

QuantSpec spec_w(int bits, Granularity g, int64_t group = 0, double clip = 1.0) {
  QuantSpec s;
  s.bits = bits;
  s.symmetric = true;
  s.granularity = g;
  s.group_size = group;
  s.clip = clip;
  return s;
}

double exhaustive_best_clip(const Tensor& w, const QuantSpec& base,
                            const std::vector<double>& grid) {
  double best_err = std::numeric_limits<double>::infinity();
  double best_clip = grid.front();
  for (double c : grid) {
    QuantSpec s = base;
    s.clip = c;
    const double err = mse(dequantize(quantize(w, s)), w);
    if (err < best_err || (err == best_err && c > best_clip)) {
      best_err = err;
      best_clip = c;
    }
  }
  return best_clip;
}

}  // namespace

TEST_CASE("round_half_away breaks ties away from zero") {
  CHECK(round_half_away(0.5) == 1.0);
  CHECK(round_half_away(-0.5) == -1.0);
  CHECK(round_half_away(2.5) == 3.0);
  CHECK(round_half_away(-2.5) == -3.0);
  CHECK(round_half_away(1.25) == 1.0);
}

TEST_CASE("integer ranges per bit width") {
  QuantSpec s4 = spec_w(4, Granularity::kPerChannel);
  CHECK(s4.q_min() == -8);
  CHECK(s4.q_max() == 7);
  QuantSpec s3 = spec_w(3, Granularity::kPerChannel);
  CHECK(s3.q_min() == -4);
  CHECK(s3.q_max() == 3);
  QuantSpec a4 = s4;
  a4.symmetric = false;
  CHECK(a4.q_min() == 0);
  CHECK(a4.q_max() == 15);
}

TEST_CASE("symmetric scale formula") {
  CHECK(compute_scale_symmetric(7.0, 4, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(compute_scale_symmetric(3.0, 3, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(compute_scale_symmetric(7.0, 4, 0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(compute_scale_symmetric(0.0, 4, 1.0) == 1.0);
}

TEST_CASE("symmetric quantization invariants across granularities") {
  Rng rng(101);
  const std::vector<QuantSpec> specs = {
      spec_w(4, Granularity::kPerChannel),
      spec_w(3, Granularity::kGroup, 8),
      spec_w(4, Granularity::kPerToken),
      spec_w(5, Granularity::kPerTensor),
  };
  for (const auto& s : specs) {
    Tensor x = Tensor::randn({6, 16}, rng, 1.5);
    QuantizedTensor q = quantize(x, s);
    Tensor deq = dequantize(q);
    const GroupLayout lay = q.layout;
    for (int64_t i = 0; i < x.numel(); ++i) {
      CHECK(q.codes[i] >= s.q_min());
      CHECK(q.codes[i] <= s.q_max());
    }
    CHECK(q.zero_points.empty());
    for (int64_t r = 0; r < lay.rows; ++r) {
      for (int64_t g = 0; g < lay.groups_per_row(); ++g) {
        const double scale = q.scales[r * lay.groups_per_row() + g];
        CHECK(scale > 0.0);
        double gmax = 0.0;
        for (int64_t k = 0; k < lay.group_size; ++k) {
          const int64_t idx = r * lay.row_len + g * lay.group_size + k;
          gmax = std::max(gmax, std::abs(x[idx]));
        }
        if (gmax > 0.0)
          CHECK(scale ==
                doctest::Approx(gmax / s.level_count() * s.clip).epsilon(1e-15));
        for (int64_t k = 0; k < lay.group_size; ++k) {
          const int64_t idx = r * lay.row_len + g * lay.group_size + k;
          if (std::abs(x[idx]) <= scale * s.level_count() + 1e-15)
            CHECK(std::abs(deq[idx] - x[idx]) <= scale / 2.0 + 1e-12);
          else
            CHECK(std::abs(deq[idx]) ==
                  doctest::Approx(scale * (deq[idx] > 0 ? s.q_max() : -s.q_min()))
                      .epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("clipped values saturate at the integer boundaries") {
  QuantSpec s = spec_w(4, Granularity::kPerToken, 0, 0.5);
  Tensor x = Tensor::vector({-10.0, -2.0, 0.0, 2.0, 10.0});
  QuantizedTensor q = quantize(x, s);
  CHECK(q.codes[0] == -8);
  CHECK(q.codes[4] == 7);
}

TEST_CASE("asymmetric per-token quantization") {
  Rng rng(102);
  QuantSpec s;
  s.bits = 4;
  s.symmetric = false;
  s.granularity = Granularity::kPerToken;
  Tensor x = Tensor::randn({5, 12}, rng, 2.0);
  for (int64_t j = 0; j < 12; ++j) x.at(0, j) = 3.0 + 0.1 * (double)j;
  QuantizedTensor q = quantize_asym(x, s);
  Tensor deq = dequantize(q);
  CHECK((int64_t)q.zero_points.size() == q.layout.total_groups());
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(q.codes[i] >= 0);
    CHECK(q.codes[i] <= 15);
  }
  for (int64_t r = 0; r < 5; ++r) {
    double lo = x.at(r, 0), hi = x.at(r, 0);
    for (int64_t j = 0; j < 12; ++j) {
      lo = std::min(lo, x.at(r, j));
      hi = std::max(hi, x.at(r, j));
    }
    const double scale = q.scales[r];
    for (int64_t j = 0; j < 12; ++j)
      CHECK(std::abs(deq.at(r, j) - x.at(r, j)) <= scale / 2.0 + 1e-12);
  }
}

TEST_CASE("constant rows dequantize exactly under asymmetric quantization") {
  QuantSpec s;
  s.bits = 4;
  s.symmetric = false;
  s.granularity = Granularity::kPerToken;
  Tensor x = Tensor::zeros({3, 8});
  for (int64_t j = 0; j < 8; ++j) {
    x.at(0, j) = 5.3;
    x.at(1, j) = -2.75;
    x.at(2, j) = 0.0;
  }
  Tensor deq = dequantize(quantize_asym(x, s));
  for (int64_t j = 0; j < 8; ++j) {
    CHECK(deq.at(0, j) == 5.3);
    CHECK(deq.at(1, j) == -2.75);
    CHECK(deq.at(2, j) == 0.0);
  }
}

TEST_CASE("zero tensors quantize to zero codes with unit scale") {
  QuantSpec s = spec_w(4, Granularity::kPerChannel);
  Tensor x = Tensor::zeros({3, 6});
  QuantizedTensor q = quantize(x, s);
  for (double sc : q.scales) CHECK(sc == 1.0);
  for (int16_t c : q.codes) CHECK(c == 0);
  CHECK(max_abs(dequantize(q)) == 0.0);
}

TEST_CASE("group layout validation") {
  QuantSpec s = spec_w(4, Granularity::kGroup, 16);
  GroupLayout lay = make_layout({4, 64}, s);
  CHECK(lay.rows == 4);
  CHECK(lay.row_len == 64);
  CHECK(lay.group_size == 16);
  CHECK(lay.groups_per_row() == 4);
  CHECK(lay.total_groups() == 16);
  CHECK_THROWS_AS(make_layout({4, 60}, s), ShapeError);
  QuantSpec pc = spec_w(4, Granularity::kPerChannel);
  GroupLayout lpc = make_layout({4, 64}, pc);
  CHECK(lpc.group_size == 64);
  CHECK(lpc.total_groups() == 4);
  QuantSpec pt = spec_w(4, Granularity::kPerTensor);
  GroupLayout lpt = make_layout({4, 64}, pt);
  CHECK(lpt.rows == 1);
  CHECK(lpt.group_size == 256);
}

TEST_CASE("spec validation rejects out-of-range settings") {
  QuantSpec s = spec_w(1, Granularity::kPerChannel);
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = spec_w(9, Granularity::kPerChannel);
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = spec_w(4, Granularity::kGroup, 0);
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = spec_w(4, Granularity::kPerChannel, 0, 0.0);
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = spec_w(4, Granularity::kPerChannel, 0, 1.5);
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("grid search matches an exhaustive oracle") {
  Rng rng(103);
  for (int trial = 0; trial < 8; ++trial) {
    Tensor w = Tensor::randn({8, 16}, rng, 1.0);
    if (trial % 2 == 1) {
      w.at(0, 0) = 6.0;
      w.at(3, 7) = -5.0;
    }
    QuantSpec base = spec_w(3, trial % 2 ? Granularity::kGroup : Granularity::kPerChannel,
                            trial % 2 ? 8 : 0);
    CHECK(grid_search_clip(w, base) == exhaustive_best_clip(w, base, default_clip_grid()));
  }
}

TEST_CASE("grid search ties break toward the larger clip") {
  Tensor w = Tensor::zeros({2, 4});
  QuantSpec base = spec_w(4, Granularity::kPerChannel);
  CHECK(grid_search_clip(w, base) == 1.0);
}

TEST_CASE("default clip grid contents") {
  const auto& grid = default_clip_grid();
  CHECK(grid.size() == 7);
  CHECK(grid.front() == doctest::Approx(0.70).epsilon(1e-12));
  CHECK(grid.back() == doctest::Approx(1.00).epsilon(1e-12));
  for (size_t i = 0; i + 1 < grid.size(); ++i)
    CHECK(grid[i + 1] - grid[i] == doctest::Approx(0.05).epsilon(1e-9));
}

TEST_CASE("scheme strings parse and validate") {
  QuantScheme a = parse_quant_scheme("W4A4");
  CHECK(a.weight_bits == 4);
  CHECK(a.act_bits == 4);
  CHECK(a.group_size == 0);
  CHECK(!a.no_op);
  CHECK(a.text == "W4A4");
  QuantScheme b = parse_quant_scheme("W3A3-g16");
  CHECK(b.weight_bits == 3);
  CHECK(b.act_bits == 3);
  CHECK(b.group_size == 16);
  QuantScheme c = parse_quant_scheme("W8A6-g32");
  CHECK(c.weight_bits == 8);
  CHECK(c.act_bits == 6);
  QuantScheme n = parse_quant_scheme("none");
  CHECK(n.no_op);
  CHECK_THROWS_AS(parse_quant_scheme(""), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("w4a4"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W4"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W1A4"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W4A9"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W4A4-g0"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W4A4-x16"), ConfigError);
  CHECK_THROWS_AS(parse_quant_scheme("W4A4-g16junk"), ConfigError);
}

TEST_CASE("scheme spec builders") {
  QuantScheme s = parse_quant_scheme("W3A4-g16");
  QuantSpec w = s.weight_spec(0.85);
  CHECK(w.bits == 3);
  CHECK(w.symmetric);
  CHECK(w.granularity == Granularity::kGroup);
  CHECK(w.group_size == 16);
  CHECK(w.clip == 0.85);
  QuantSpec a = s.act_spec(0.9);
  CHECK(a.bits == 4);
  CHECK(a.symmetric);
  CHECK(a.granularity == Granularity::kGroup);
  QuantSpec kv = s.kv_spec();
  CHECK(kv.bits == 4);
  CHECK(!kv.symmetric);
  CHECK(kv.granularity == Granularity::kPerToken);
  CHECK(kv.group_size == 0);
  QuantScheme ug = parse_quant_scheme("W4A4");
  CHECK(ug.weight_spec().granularity == Granularity::kPerChannel);
  CHECK(ug.act_spec().granularity == Granularity::kPerToken);
}

TEST_CASE("kernel codes follow round(x/scale) plus zero point") {
  Rng rng(104);
  QuantSpec s;
  s.bits = 4;
  s.symmetric = false;
  s.granularity = Granularity::kPerToken;
  Tensor x = Tensor::randn({4, 10}, rng, 1.0);
  QuantizedTensor q = quantize_asym(x, s);
  for (int64_t r = 0; r < 4; ++r) {
    const double scale = q.scales[r];
    const int32_t zp = q.zero_points[r];
    for (int64_t j = 0; j < 10; ++j) {
      const double code = round_half_away(x.at(r, j) / scale) + zp;
      const double expect = std::clamp(code, 0.0, 15.0);
      CHECK((double)q.codes[r * 10 + j] == expect);
    }
  }
}
