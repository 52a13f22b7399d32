#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "calibrate.hpp"
#include "errors.hpp"
#include "params.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "tensor.hpp"

using namespace bisup;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * a.numel()) == 0;
}

std::array<std::vector<int64_t>, kNumWeights> uniform_shapes(int64_t out, int64_t in) {
  std::array<std::vector<int64_t>, kNumWeights> s;
  for (auto& v : s) v = {out, in};
  return s;
}

BisupParams neutral_theta(const QuantScheme& scheme, double wclip, uint64_t seed,
                          int64_t rank = 2, LowRankForm form = LowRankForm::kSlrec) {
  BisupInit bi;
  bi.weight_clip.fill(wclip);
  bi.act_clip = 0.9;
  bi.rank = rank;
  bi.form = form;
  Rng rng(seed);
  return init_bisup_params(uniform_shapes(6, 8), scheme, bi, rng);
}

double weighted_sum(const Tensor& y, const Tensor& r) {
  double acc = 0.0;
  for (int64_t i = 0; i < y.numel(); ++i) acc += y[i] * r[i];
  return acc;
}

}  // namespace

TEST_CASE("initial parameters are structurally neutral") {
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  BisupParams p = neutral_theta(scheme, 0.85, 5);
  for (int w = 0; w < kNumWeights; ++w) {
    for (int64_t i = 0; i < p.clip.weight[w].numel(); ++i)
      CHECK(p.clip.weight[w][i] == 0.85);
    CHECK(max_abs(p.smooth.s2_log[w]) == 0.0);
    CHECK(max_abs(p.lowrank.b[w]) == 0.0);
    CHECK(max_abs(p.lowrank.a[w]) > 0.0);
    CHECK(max_abs(p.lowrank.a[w]) < 0.1);
    CHECK(p.lowrank.a[w].shape() == std::vector<int64_t>{6, 2});
    CHECK(p.lowrank.b[w].shape() == std::vector<int64_t>{2, 8});
  }
  for (int s = 0; s < kNumActSites; ++s) {
    CHECK(max_abs(p.smooth.s1_log[s]) == 0.0);
    for (int64_t i = 0; i < p.clip.act[s].numel(); ++i) CHECK(p.clip.act[s][i] == 0.9);
  }
}

TEST_CASE("trainable slot counts follow the enable flags") {
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  BisupParams p = neutral_theta(scheme, 0.9, 6);
  CHECK(trainable_slots(p).size() == 32);
  p.enable_smooth = false;
  CHECK(trainable_slots(p).size() == 22);
  p.enable_lowrank = false;
  CHECK(trainable_slots(p).size() == 10);
  p.enable_clip = false;
  CHECK(trainable_slots(p).size() == 0);
  p.enable_clip = true;
  for (const auto& s : trainable_slots(p)) {
    CHECK(s.clamp_lo == 0.3);
    CHECK(s.clamp_hi == 1.0);
    CHECK(s.name.rfind("clip.", 0) == 0);
  }
}

TEST_CASE("zero_grads clears every gradient tensor") {
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  BisupParams p = neutral_theta(scheme, 0.9, 7);
  for (auto& s : trainable_slots(p))
    for (int64_t i = 0; i < s.grad->numel(); ++i) (*s.grad)[i] = 1.0;
  p.zero_grads();
  for (auto& s : trainable_slots(p)) CHECK(max_abs(*s.grad) == 0.0);
}

TEST_CASE("neutral parameters reproduce the baseline weight path bit for bit") {
  Rng rng(8);
  Tensor w = Tensor::randn({6, 8}, rng, 1.0);
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  QuantSpec spec = scheme.weight_spec(1.0);
  for (auto form : {LowRankForm::kSlrec, LowRankForm::kLrec}) {
    BisupParams p = neutral_theta(scheme, 0.8, 9, 2, form);
    Tensor with_theta = weight_forward(w, spec, &p, kWq, 0.8, QuantRounding::kHard, nullptr);
    Tensor baseline = weight_forward(w, spec, nullptr, kWq, 0.8, QuantRounding::kHard, nullptr);
    CHECK(bit_equal(with_theta, baseline));
  }
}

TEST_CASE("neutral parameters reproduce the baseline activation path bit for bit") {
  Rng rng(10);
  Tensor x = Tensor::randn({5, 8}, rng, 1.0);
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  QuantSpec spec = scheme.act_spec(0.9);
  BisupParams p = neutral_theta(scheme, 0.8, 11);
  Tensor with_theta = act_forward(x, spec, &p, kAttnIn, 0.9, QuantRounding::kHard, nullptr);
  Tensor baseline = act_forward(x, spec, nullptr, kAttnIn, 0.9, QuantRounding::kHard, nullptr);
  CHECK(bit_equal(with_theta, baseline));
}

TEST_CASE("baseline weight path equals the plain quantization kernel") {
  Rng rng(12);
  Tensor w = Tensor::randn({6, 8}, rng, 1.0);
  QuantScheme scheme = parse_quant_scheme("W4A4-g4");
  QuantSpec spec = scheme.weight_spec(0.85);
  Tensor node = weight_forward(w, spec, nullptr, kWq, 0.85, QuantRounding::kHard, nullptr);
  Tensor kernel = dequantize(quantize(w, spec));
  CHECK(bit_equal(node, kernel));
}

TEST_CASE("symmetric surrogate clamps into the scaled range") {
  Rng rng(13);
  Tensor x = Tensor::randn({4, 8}, rng, 1.0);
  QuantSpec spec;
  spec.bits = 3;
  spec.granularity = Granularity::kGroup;
  spec.group_size = 4;
  spec.clip = 0.8;
  Tensor y = sym_quant_forward(x, spec, ClipView{nullptr, nullptr, 0.8},
                               QuantRounding::kSurrogate, nullptr);
  const GroupLayout lo = make_layout(x.shape(), spec);
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < lo.groups_per_row(); ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      double gmax = 0.0;
      for (int64_t k = 0; k < lo.group_size; ++k)
        gmax = std::max(gmax, std::abs(x[base + k]));
      const double scale = compute_scale_symmetric(gmax, 3, 0.8);
      for (int64_t k = 0; k < lo.group_size; ++k) {
        const double expect = std::clamp(x[base + k] / scale, -4.0, 3.0) * scale;
        CHECK(y[base + k] == doctest::Approx(expect).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("symmetric node gradients agree with finite differences") {
  Rng rng(14);
  Tensor x = Tensor::randn({4, 8}, rng, 1.0);
  Tensor gx = Tensor::zeros({4, 8});
  Tensor r = Tensor::randn({4, 8}, rng, 1.0);
  QuantSpec spec;
  spec.bits = 3;
  spec.granularity = Granularity::kGroup;
  spec.group_size = 4;
  spec.clip = 0.8;
  const ClipView clips{nullptr, nullptr, 0.8};
  std::vector<ParamSlot> slots = {{"x", &x, &gx, 0.0, 0.0}};
  auto loss = [&]() {
    return weighted_sum(sym_quant_forward(x, spec, clips, QuantRounding::kSurrogate, nullptr),
                        r);
  };
  auto grads = [&]() {
    gx = Tensor::zeros(gx.shape());
    SymQuantCache cache;
    sym_quant_forward(x, spec, clips, QuantRounding::kSurrogate, &cache);
    sym_quant_backward(cache, r, gx, ClipGrad{});
  };
  FdOptions opt;
  opt.max_coords_per_tensor = 32;
  FdReport rep = finite_diff_check(slots, loss, grads, opt);
  CHECK(rep.pass(1e-5));
}

TEST_CASE("asymmetric node in hard mode matches the kernel bit for bit") {
  Rng rng(15);
  QuantSpec spec;
  spec.bits = 4;
  spec.symmetric = false;
  spec.granularity = Granularity::kPerToken;
  Tensor x = Tensor::randn({6, 10}, rng, 1.5);
  for (int64_t j = 0; j < 10; ++j) {
    x.at(1, j) = 2.0 + 0.3 * (double)j;   // all positive
    x.at(2, j) = -1.0 - 0.2 * (double)j;  // all negative
    x.at(3, j) = 4.25;                    // constant
    x.at(4, j) = 0.0;                     // zero
  }
  Tensor node = asym_quant_forward(x, spec, QuantRounding::kHard, nullptr);
  Tensor kernel = dequantize(quantize_asym(x, spec));
  CHECK(bit_equal(node, kernel));
}

TEST_CASE("asymmetric surrogate equals a clamp into the zero-extended range") {
  Rng rng(16);
  QuantSpec spec;
  spec.bits = 4;
  spec.symmetric = false;
  spec.granularity = Granularity::kPerToken;
  Tensor x = Tensor::randn({5, 8}, rng, 2.0);
  for (int64_t j = 0; j < 8; ++j) x.at(1, j) = 1.0 + 0.5 * (double)j;
  Tensor y = asym_quant_forward(x, spec, QuantRounding::kSurrogate, nullptr);
  for (int64_t rr = 0; rr < 5; ++rr) {
    double mn = x.at(rr, 0), mx = x.at(rr, 0);
    for (int64_t j = 0; j < 8; ++j) {
      mn = std::min(mn, x.at(rr, j));
      mx = std::max(mx, x.at(rr, j));
    }
    const double lo = std::min(mn, 0.0), hi = std::max(mx, 0.0);
    for (int64_t j = 0; j < 8; ++j) {
      const double expect = std::clamp(x.at(rr, j), lo, hi);
      CHECK(y.at(rr, j) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("asymmetric node gradients agree with finite differences") {
  Rng rng(17);
  QuantSpec spec;
  spec.bits = 3;
  spec.symmetric = false;
  spec.granularity = Granularity::kPerToken;
  Tensor x = Tensor::randn({4, 8}, rng, 1.0);
  Tensor gx = Tensor::zeros({4, 8});
  Tensor r = Tensor::randn({4, 8}, rng, 1.0);
  std::vector<ParamSlot> slots = {{"x", &x, &gx, 0.0, 0.0}};
  auto loss = [&]() {
    return weighted_sum(asym_quant_forward(x, spec, QuantRounding::kSurrogate, nullptr), r);
  };
  auto grads = [&]() {
    gx = Tensor::zeros(gx.shape());
    AsymQuantCache cache;
    asym_quant_forward(x, spec, QuantRounding::kSurrogate, &cache);
    asym_quant_backward(cache, r, gx);
  };
  FdOptions opt;
  opt.max_coords_per_tensor = 32;
  FdReport rep = finite_diff_check(slots, loss, grads, opt);
  CHECK(rep.pass(1e-5));
}

TEST_CASE("column scaling and its backward") {
  Rng rng(18);
  Tensor x = Tensor::randn({3, 5}, rng, 1.0);
  Tensor s = Tensor::vector({0.5, 1.0, 2.0, 0.25, 4.0});
  Tensor y = scale_columns(x, s);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) CHECK(y.at(i, j) == x.at(i, j) * s[j]);

  Tensor g = Tensor::randn({3, 5}, rng, 1.0);
  Tensor gx = Tensor::zeros({3, 5});
  Tensor gs = Tensor::zeros({5});
  scale_columns_backward(x, s, g, &gx, &gs);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 5; ++j) CHECK(gx.at(i, j) == g.at(i, j) * s[j]);
  for (int64_t j = 0; j < 5; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < 3; ++i) acc += g.at(i, j) * x.at(i, j);
    CHECK(gs[j] == doctest::Approx(acc).epsilon(1e-15));
  }
}

TEST_CASE("exp_vec exponentiates elementwise") {
  Tensor v = Tensor::vector({0.0, 1.0, -1.0});
  Tensor e = exp_vec(v);
  CHECK(e[0] == 1.0);
  CHECK(e[1] == doctest::Approx(std::exp(1.0)).epsilon(1e-15));
  CHECK(e[2] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
}

TEST_CASE("svd oracle factors give the optimal low-rank residual fit") {
  Rng rng(19);
  Tensor w = Tensor::randn({8, 12}, rng, 1.0);
  QuantSpec spec;
  spec.bits = 3;
  spec.granularity = Granularity::kPerChannel;
  Tensor e = sub(w, dequantize(quantize(w, spec)));
  SvdResult full = svd_truncated(e, 8);
  const int64_t r = 3;
  auto [u_hat, v_hat] = lorc_svd_oracle(w, spec, r);
  CHECK(u_hat.shape() == std::vector<int64_t>{8, 3});
  CHECK(v_hat.shape() == std::vector<int64_t>{3, 12});
  Tensor diff = sub(e, matmul(u_hat, v_hat));
  double err2 = 0.0;
  for (int64_t i = 0; i < diff.numel(); ++i) err2 += diff[i] * diff[i];
  double tail = 0.0;
  for (int64_t i = r; i < 8; ++i) tail += full.singular_values[i] * full.singular_values[i];
  CHECK(err2 == doctest::Approx(tail).epsilon(1e-9));
}

TEST_CASE("low-rank factors change the effective weight once b is nonzero") {
  Rng rng(20);
  Tensor w = Tensor::randn({6, 8}, rng, 1.0);
  QuantScheme scheme = parse_quant_scheme("W3A3-g4");
  QuantSpec spec = scheme.weight_spec(1.0);
  BisupParams p = neutral_theta(scheme, 0.9, 21);
  Tensor before = weight_forward(w, spec, &p, kWq, 0.9, QuantRounding::kHard, nullptr);
  Rng br(22);
  p.lowrank.b[kWq] = Tensor::randn(p.lowrank.b[kWq].shape(), br, 0.5);
  Tensor after = weight_forward(w, spec, &p, kWq, 0.9, QuantRounding::kHard, nullptr);
  CHECK(!bit_equal(before, after));
}

TEST_CASE("weight and activation site names") {
  CHECK(std::string(weight_name(kWq)) == "wq");
  CHECK(std::string(weight_name(kWDown)) == "w_down");
  CHECK(std::string(act_site_name(kAttnIn)) == "attn_in");
  CHECK(std::string(act_site_name(kMlpMid)) == "mlp_mid");
  CHECK(kWeightSite[kWq] == kAttnIn);
  CHECK(kWeightSite[kWo] == kAttnOut);
  CHECK(kWeightSite[kWUp] == kMlpIn);
  CHECK(kWeightSite[kWDown] == kMlpMid);
}
