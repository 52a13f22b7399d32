#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "params.hpp"
#include "quant.hpp"
#include "tensor.hpp"

namespace bisup {

struct ModelConfig {
  int64_t n_layers = 2;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t d_hidden = 256;
  int64_t vocab = 64;
  double rms_eps = 1e-6;

  int64_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// Pre-norm decoder layer: rmsnorm -> causal MHA -> residual -> rmsnorm ->
// SiLU MLP -> residual. Weights stored [out x in], applied as x @ w^T.
struct LayerWeights {
  Tensor rms1, rms2;      // [d]
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor w_up;            // [h x d]
  Tensor w_down;          // [d x h]

  const Tensor& weight(int widx) const;
  Tensor& weight(int widx);
};

struct Model {
  ModelConfig config;
  Tensor embedding;  // [vocab x d]
  std::vector<LayerWeights> layers;
};

Model synth_model(const ModelConfig& cfg, uint64_t seed);

// Toy model whose attention concentrates on token 0 whenever that token is
// the designated bos id (0): wq = wk = gamma * u u^T with u the normalized
// all-ones direction and embedding row 0 set to u, so queries with positive
// projection on u attend almost entirely to the first token.
Model make_first_token_model(const ModelConfig& cfg, uint64_t seed, double gamma = 3.0);

Tensor embed(const Model& m, std::span<const int32_t> tokens);

// ---- mixed-precision KV cache ----------------------------------------------

// Per-layer list of cached K/V rows in token order. Rows before the boundary
// are tagged full precision (encoded once by the fp model); rows at or after
// it hold per-token asymmetric quantized entries.
struct KvEntry {
  bool full_precision = false;
  Tensor k_fp, v_fp;            // set iff full_precision
  QuantizedTensor k_q, v_q;     // set otherwise (unless quantize_tail off)
};

struct MixedKvCache {
  int64_t boundary = 0;
  QuantSpec kv_spec;
  bool quantize_tail = true;  // false under the no-op scheme
  std::vector<std::vector<KvEntry>> layers;  // [layer][token]

  int64_t size(int64_t layer) const {
    return static_cast<int64_t>(layers[static_cast<size_t>(layer)].size());
  }

  // Appends the next token's K/V row; quantizes iff the row index is past the
  // boundary. Rows must arrive in token order.
  void append(int64_t layer, const Tensor& k_row, const Tensor& v_row);
  // K and V matrices as attention sees them (prompt rows exact, tail rows
  // dequantized).
  std::pair<Tensor, Tensor> materialize(int64_t layer) const;
};

// Runs the fp model over the prompt and caches every layer's K/V rows at
// full precision. boundary = prompt length.
MixedKvCache precompute_system_prompt(const Model& m, std::span<const int32_t> prompt,
                                      const QuantSpec& kv_spec, bool quantize_tail);

// ---- forward passes ----------------------------------------------------------

struct FpLayerCapture {
  Tensor k, v;  // post-projection K/V rows
};

Tensor layer_forward_fp(const ModelConfig& cfg, const LayerWeights& lw, const Tensor& x,
                        FpLayerCapture* cap = nullptr);

Tensor model_forward_fp(const Model& m, std::span<const int32_t> tokens,
                        std::vector<Tensor>* layer_outputs = nullptr);

// Shared causal multi-head attention core; p_out (optional) receives the
// per-head attention weight matrices for the backward pass.
Tensor causal_attention(const ModelConfig& cfg, const Tensor& q, const Tensor& k,
                        const Tensor& v, std::vector<Tensor>* p_out = nullptr);

Tensor rmsnorm_backward(const Tensor& x, const Tensor& weight, double eps,
                        const Tensor& g_y);
Tensor softmax_rows_backward(const Tensor& p, const Tensor& g_p);
Tensor silu_backward(const Tensor& x, const Tensor& g_y);

// ---- quantized path -----------------------------------------------------------

// Weight-side state for one layer: quantized weights are a function of theta
// only, so they are prepared once and shared by every sequence in a step.
struct LayerQuantContext {
  const ModelConfig* cfg = nullptr;
  const LayerWeights* lw = nullptr;
  BisupParams* theta = nullptr;  // nullptr = baseline scalar-clip path
  QuantScheme scheme;
  std::array<double, kNumWeights> base_clips = {1, 1, 1, 1, 1, 1};
  double base_act_clip = 0.9;
  QuantRounding mode = QuantRounding::kHard;
  bool record = false;

  std::array<Tensor, kNumWeights> wdeq;
  std::array<WeightOpCache, kNumWeights> wcache;

  void prepare();
};

struct SeqTape {
  Tensor x, h1, h1q, q, k, v, km, vm, ctx, ctxq, x2, h2, h2q, up, su, suq;
  ActOpCache attn_in, attn_out, mlp_in, mlp_mid;
  AsymQuantCache k_asym, v_asym;
  std::vector<Tensor> p;  // per-head attention weights
  int64_t boundary = 0;
};

// One quantized layer forward. prompt_k/prompt_v hold the fp-encoded prompt
// rows (nullptr when boundary == 0); rows >= boundary quantize per token.
Tensor layer_forward_quant(LayerQuantContext& ctx, const Tensor& x,
                           const Tensor* prompt_k, const Tensor* prompt_v,
                           int64_t boundary, SeqTape* tape);

// Backward for theta: accumulates activation-site gradients directly into
// ctx.theta and the per-weight dL/d(deq weight) into g_wdeq.
void layer_backward_quant(LayerQuantContext& ctx, const SeqTape& tape, const Tensor& g_y,
                          std::array<Tensor, kNumWeights>& g_wdeq);

// Folds accumulated weight gradients through the weight-side theta ops.
void finish_weight_backward(LayerQuantContext& ctx,
                            const std::array<Tensor, kNumWeights>& g_wdeq);

// ---- quantized model artifact --------------------------------------------------

struct QuantizedModel {
  Model model;
  QuantScheme scheme;
  int64_t boundary = 0;
  std::vector<int32_t> prompt_tokens;
  double base_act_clip = 0.9;
  std::vector<std::array<double, kNumWeights>> base_clips;  // per layer
  std::vector<BisupParams> thetas;                          // empty = plain RTN

  bool has_theta() const { return !thetas.empty(); }
};

// Grid-searches per-tensor weight clips and wraps the model for the quantized
// path with no learned parameters.
QuantizedModel make_rtn_model(Model m, const QuantScheme& scheme, double act_clip = 0.9,
                              int64_t boundary = 0, std::vector<int32_t> prompt = {});

std::array<double, kNumWeights> grid_clips_for_layer(const LayerWeights& lw,
                                                     const QuantScheme& scheme);

Tensor qmodel_forward(const QuantizedModel& qm, std::span<const int32_t> tokens,
                      std::vector<Tensor>* layer_outputs = nullptr,
                      QuantRounding mode = QuantRounding::kHard);

// ---- propagation trace ----------------------------------------------------------

struct PropagationTrace {
  std::vector<double> layer_mse;  // fp vs quantized layer outputs, per layer
};

// Two independent runs per sequence: the fp path never consumes quantized
// activations. MSE is averaged over sequences, tokens, and channels.
PropagationTrace trace_propagation(const QuantizedModel& qm,
                                   const std::vector<std::vector<int32_t>>& seqs);

// ---- model file io (BSMD) --------------------------------------------------------

void save_quantized_model(const std::string& path, const QuantizedModel& qm);
QuantizedModel load_quantized_model(const std::string& path);
void save_model(const std::string& path, const Model& m);
Model load_model(const std::string& path);

}  // namespace bisup
