#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "quant.hpp"
#include "tensor.hpp"

namespace bisup {

// Weight matrices and activation quantization sites of one decoder layer.
// Weights are stored [out x in]; the site feeding each weight matmul is fixed
// by the architecture (q/k/v share the attention input site).
constexpr int kNumWeights = 6;
constexpr int kNumActSites = 4;
enum WeightIdx { kWq = 0, kWk, kWv, kWo, kWUp, kWDown };
enum ActSiteIdx { kAttnIn = 0, kAttnOut, kMlpIn, kMlpMid };
constexpr std::array<int, kNumWeights> kWeightSite = {kAttnIn, kAttnIn, kAttnIn,
                                                      kAttnOut, kMlpIn, kMlpMid};
const char* weight_name(int widx);
const char* act_site_name(int sidx);

enum class LowRankForm { kSlrec, kLrec };
enum class QuantRounding { kHard, kSurrogate };

// Learnable clip factors, one per quantization group. Weight clips are per
// (output channel, input group); activation clips are per input column group,
// shared across tokens.
struct ClipParams {
  std::array<Tensor, kNumWeights> weight;  // [out x groups_per_row]
  std::array<Tensor, kNumActSites> act;    // [groups_per_row]
};

// Smoothing factors in log space so positivity is structural. s1 scales the
// activation columns of a site; s2 scales the matching input columns of each
// weight consuming that site. At init both logs are zero, so s1*s2 = 1.
struct SmoothParams {
  std::array<Tensor, kNumActSites> s1_log;  // [in]
  std::array<Tensor, kNumWeights> s2_log;   // [in]
};

// Low-rank compensation factors per weight matrix. The stabilized form
// (slrec) multiplies the weight elementwise by (1 + a.b); the comparison
// form (lrec) adds a.b directly.
struct LowRankParams {
  std::array<Tensor, kNumWeights> a;  // [out x rank]
  std::array<Tensor, kNumWeights> b;  // [rank x in]
  int64_t rank = 0;
  LowRankForm form = LowRankForm::kSlrec;
};

struct BisupParams {
  ClipParams clip;
  SmoothParams smooth;
  LowRankParams lowrank;
  bool enable_clip = true;
  bool enable_smooth = true;
  bool enable_lowrank = true;

  ClipParams g_clip;
  SmoothParams g_smooth;
  LowRankParams g_lowrank;

  void zero_grads();
};

struct BisupInit {
  std::array<double, kNumWeights> weight_clip = {1, 1, 1, 1, 1, 1};
  double act_clip = 0.9;
  int64_t rank = 32;
  LowRankForm form = LowRankForm::kSlrec;
  bool enable_clip = true;
  bool enable_smooth = true;
  bool enable_lowrank = true;
  double a_sigma = 0.01;
};

// Fresh parameters that leave the quantized forward bit-identical to the
// baseline path: clips at their grid-searched / fixed scalars, unit
// smoothing, zero second low-rank factor.
BisupParams init_bisup_params(const std::array<std::vector<int64_t>, kNumWeights>& wshapes,
                              const QuantScheme& scheme, const BisupInit& init, Rng& rng);

// Trainable views for the optimizer and the finite-difference checker.
struct ParamSlot {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  double clamp_lo = 0.0;  // post-step clamp applied iff clamp_hi > clamp_lo
  double clamp_hi = 0.0;
};
std::vector<ParamSlot> trainable_slots(BisupParams& p);

// ---- quantize-dequantize nodes -------------------------------------------
//
// The backward rules are the exact gradients of the round-free surrogate
// (hard rounding replaced by the identity, clamping kept), the function the
// straight-through estimator pretends to differentiate. Per group:
//   in-range elements pass gradients through unchanged,
//   clamped elements route gradient to the clip factor and to the group
//   extremum that defines the scale.
// Under QuantRounding::kSurrogate the forward evaluates that same surrogate,
// which is what makes central finite differences agree with these gradients.

struct SymQuantCache {
  GroupLayout layout;
  double qmin = 0, qmax = 0;
  std::vector<int8_t> state;   // per element: -1 clamped low, 0 in range, +1 high
  std::vector<double> kfac;    // per group: max_abs / levels (0 for zero groups)
  std::vector<double> clip;    // per group: applied clip factor
  std::vector<int32_t> argmax; // per group: element offset of |max|, -1 if zero
  std::vector<double> sign_max;
};

Tensor sym_quant_forward(const Tensor& x, const QuantSpec& spec, const ClipView& clips,
                         QuantRounding mode, SymQuantCache* cache);

struct ClipGrad {
  double* per_group = nullptr;      // [rows x groups_per_row]
  double* per_col_group = nullptr;  // [groups_per_row], summed over rows
};
void sym_quant_backward(const SymQuantCache& cache, const Tensor& g_out,
                        Tensor& g_x_accum, const ClipGrad& g_clip);

struct AsymQuantCache {
  GroupLayout layout;
  double qmax = 0;
  std::vector<int8_t> state;     // per element: -1 low, 0 in range, +1 high
  std::vector<int8_t> row_kind;  // 0 both edges live, 1 zero low edge, 2 zero high edge, 3 constant
  std::vector<int32_t> argmin, argmax;
};

Tensor asym_quant_forward(const Tensor& x, const QuantSpec& spec, QuantRounding mode,
                          AsymQuantCache* cache);
void asym_quant_backward(const AsymQuantCache& cache, const Tensor& g_out,
                         Tensor& g_x_accum);

// ---- smoothing -------------------------------------------------------------

Tensor exp_vec(const Tensor& v);
Tensor scale_columns(const Tensor& x, const Tensor& s);
void scale_columns_backward(const Tensor& x, const Tensor& s, const Tensor& g_out,
                            Tensor* g_x_accum, Tensor* g_s_accum);

// ---- composed per-weight / per-site ops ------------------------------------

struct WeightOpCache {
  Tensor w_s;     // column-scaled weight (copy of w when smoothing is off)
  Tensor ab;      // a.b product (empty when low-rank off)
  Tensor s2;      // exp(s2_log) (empty when smoothing off)
  SymQuantCache qc;
  bool smooth = false, lowrank = false, slrec = true;
};

// deq(quant(<w; theta>)) for one weight matrix. theta == nullptr takes the
// baseline path: plain symmetric quantization at scalar_clip.
Tensor weight_forward(const Tensor& w, const QuantSpec& spec, const BisupParams* theta,
                      int widx, double scalar_clip, QuantRounding mode,
                      WeightOpCache* cache);
void weight_backward(const Tensor& w, BisupParams& theta, int widx,
                     const WeightOpCache& cache, const Tensor& g_out);

struct ActOpCache {
  Tensor x_s;  // column-scaled activations (copy of x when smoothing is off)
  Tensor s1;
  SymQuantCache qc;
  bool smooth = false;
};

Tensor act_forward(const Tensor& x, const QuantSpec& spec, const BisupParams* theta,
                   int site, double scalar_clip, QuantRounding mode, ActOpCache* cache);
void act_backward(const Tensor& x, BisupParams& theta, int site, const ActOpCache& cache,
                  const Tensor& g_out, Tensor& g_x_accum);

// ---- low-rank SVD oracle ----------------------------------------------------

// Rank-r SVD factors of the quantization residual E = w - deq(quant(w,spec)):
// returns (u_hat, v_hat) with u_hat = U_r diag(sigma), v_hat = V_r^T, the
// Frobenius-optimal rank-r approximation E ~ u_hat.v_hat.
std::pair<Tensor, Tensor> lorc_svd_oracle(const Tensor& w, const QuantSpec& spec,
                                          int64_t r);

}  // namespace bisup
