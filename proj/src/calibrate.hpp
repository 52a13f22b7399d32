#pragma once

#include <functional>
#include <string>
#include <vector>

#include "params.hpp"
#include "transformer.hpp"

namespace bisup {

// ---- optimizer ---------------------------------------------------------------

// AdamW with decoupled weight decay; slots with clamp_hi > clamp_lo are
// clamped after every step.
struct AdamW {
  double lr = 0.005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void init(const std::vector<ParamSlot>& slots);
  void step(std::vector<ParamSlot>& slots);

 private:
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- layer-wise fine-tuning -----------------------------------------------------

struct CalibConfig {
  int64_t epochs = 5;
  double lr = 0.005;
  int64_t batch_size = 8;
  double weight_decay = 0.0;
  int64_t rank = 32;
  LowRankForm form = LowRankForm::kSlrec;
  bool enable_clip = true;
  bool enable_smooth = true;
  bool enable_lowrank = true;
  double act_clip = 0.9;

  void validate() const;
};

struct LayerCalibResult {
  std::vector<double> loss_history;  // batch loss before each step
  double initial_loss = 0.0;         // full calibration set, theta at init
  double final_loss = 0.0;           // full set after training (post-revert)
  bool reverted = false;             // training made things worse; theta reset
  double lr_used = 0.0;
  int restarts = 0;
};

struct ModelCalibResult {
  std::vector<LayerCalibResult> layers;
};

struct CalibrationOutput {
  QuantizedModel qm;
  ModelCalibResult result;
};

// Trains theta in place against fp layer outputs. x_int carries the quantized
// stream's inputs, y_fp the fp stream's outputs for the same sequences.
LayerCalibResult calibrate_layer(const ModelConfig& cfg, const LayerWeights& lw,
                                 const QuantScheme& scheme,
                                 const std::array<double, kNumWeights>& base_clips,
                                 const std::vector<Tensor>& x_int,
                                 const std::vector<Tensor>& y_fp, const Tensor* prompt_k,
                                 const Tensor* prompt_v, int64_t boundary,
                                 const CalibConfig& cc, BisupParams& theta, Rng& rng);

// Layer-by-layer pipeline over the calibration sequences: the fp stream
// supplies per-layer targets, the quantized stream supplies inputs, and the
// system prompt's K/V rows are encoded once by the fp model up front.
CalibrationOutput calibrate_model(Model model, const QuantScheme& scheme,
                                  const std::vector<std::vector<int32_t>>& seqs,
                                  const std::vector<int32_t>& prompt, const CalibConfig& cc,
                                  uint64_t seed);

// ---- finite-difference gradient checking -------------------------------------------

struct FdOptions {
  double h = 1e-5;
  double tol = 1e-4;
  int64_t max_coords_per_tensor = 24;
  uint64_t seed = 0;
  // One-sided derivative mismatch above kink_tol * (1 + max |one-sided|)
  // marks a clamp-boundary crossing; the coordinate is excluded.
  double kink_tol = 1e-3;
};

struct FdExclusion {
  std::string param;
  int64_t index = 0;
  std::string reason;
};

struct FdRecord {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
  std::vector<FdExclusion> excluded;
  FdRecord worst;

  bool pass(double tol) const { return checked > 0 && max_rel_err < tol; }
};

// Central differences on sampled coordinates of every slot. grad_fn must fill
// slot grads analytically at the current values; loss_fn must evaluate the
// same objective the gradients differentiate (surrogate-mode forward).
FdReport finite_diff_check(std::vector<ParamSlot>& slots,
                           const std::function<double()>& loss_fn,
                           const std::function<void()>& grad_fn, const FdOptions& opt);

// ---- canned gradient-check problem ---------------------------------------------------

// Small single-matmul objective exercising every learned parameter family:
// f = mean_sq(act(X) @ weight(W)^T - X @ W^T) under W3A3-g4 with rank-2
// low-rank factors and randomized theta (generic position, off clamp kinks).
struct GradcheckSetup {
  Tensor x, w, y;
  QuantScheme scheme;
  double base_clip = 0.9;
  BisupParams theta;
};

GradcheckSetup make_gradcheck_setup(uint64_t seed);
double gradcheck_loss(GradcheckSetup& s, QuantRounding mode);
void gradcheck_grads(GradcheckSetup& s);  // zeroes then fills theta grads
FdReport run_gradcheck(uint64_t seed, const FdOptions& opt);

}  // namespace bisup
