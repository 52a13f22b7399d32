#include "transformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <utility>

#include "errors.hpp"
#include "rng.hpp"

namespace bisup {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1 || d_hidden < 1) throw ConfigError("model dims must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (!(rms_eps > 0.0)) throw ConfigError("rms_eps must be positive");
}

const Tensor& LayerWeights::weight(int widx) const {
  switch (widx) {
    case kWq: return wq;
    case kWk: return wk;
    case kWv: return wv;
    case kWo: return wo;
    case kWUp: return w_up;
    case kWDown: return w_down;
    default: throw ConfigError("bad weight index");
  }
}

Tensor& LayerWeights::weight(int widx) {
  return const_cast<Tensor&>(static_cast<const LayerWeights&>(*this).weight(widx));
}

Model synth_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.config = cfg;
  Rng root(seed);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  Rng emb_rng = root.fork("embedding");
  m.embedding = Tensor::randn({cfg.vocab, cfg.d_model}, emb_rng, sigma);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    Rng lr = root.fork("layer." + std::to_string(l));
    LayerWeights lw;
    lw.rms1 = Tensor::ones({cfg.d_model});
    lw.rms2 = Tensor::ones({cfg.d_model});
    for (int w = 0; w < kNumWeights; ++w) {
      Rng wr = lr.fork(weight_name(w));
      int64_t out = (w == kWUp) ? cfg.d_hidden : cfg.d_model;
      int64_t in = (w == kWDown) ? cfg.d_hidden : cfg.d_model;
      lw.weight(w) = Tensor::randn({out, in}, wr, sigma);
    }
    m.layers.push_back(std::move(lw));
  }
  return m;
}

Model make_first_token_model(const ModelConfig& cfg, uint64_t seed, double gamma) {
  Model m = synth_model(cfg, seed);
  const int64_t d = cfg.d_model;
  if (d % 4 != 0) throw ConfigError("first-token model needs d_model divisible by 4");
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  // Three orthogonal unit directions: u spreads evenly over heads, every
  // embedding carries a positive bias along dir, and token 0 alone is marked
  // along mark. wq = gamma.u.dir^T makes all queries align with u at positive
  // scale; wk = gamma.u.mark^T gives token 0 a large positive key projection,
  // so each position's logit to token 0 dominates regardless of noise signs.
  Tensor u = Tensor::full({d}, inv);
  Tensor dir({d}), mark({d});
  for (int64_t j = 0; j < d; ++j) {
    dir[j] = (j % 2 == 0 ? inv : -inv);
    mark[j] = (j % 4 < 2 ? inv : -inv);
  }
  Tensor wq({d, d}), wk({d, d});
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j) {
      wq.at(i, j) = gamma * u[i] * dir[j];
      wk.at(i, j) = gamma * u[i] * mark[j];
    }
  m.layers[0].wq = wq;
  m.layers[0].wk = wk;
  for (int64_t t = 0; t < cfg.vocab; ++t)
    for (int64_t j = 0; j < d; ++j)
      m.embedding.at(t, j) += dir[j] + (t == 0 ? mark[j] : 0.0);
  return m;
}

Tensor embed(const Model& m, std::span<const int32_t> tokens) {
  const int64_t d = m.config.d_model;
  Tensor x({static_cast<int64_t>(tokens.size()), d});
  for (size_t t = 0; t < tokens.size(); ++t) {
    int32_t tok = tokens[t];
    if (tok < 0 || tok >= m.config.vocab) throw ConfigError("token id out of range");
    for (int64_t j = 0; j < d; ++j) x.at(static_cast<int64_t>(t), j) = m.embedding.at(tok, j);
  }
  return x;
}

// ---- attention core -------------------------------------------------------

Tensor causal_attention(const ModelConfig& cfg, const Tensor& q, const Tensor& k,
                        const Tensor& v, std::vector<Tensor>* p_out) {
  const int64_t seq = q.rows();
  const int64_t hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  if (k.rows() != seq || v.rows() != seq) throw ShapeError("attention kv length mismatch");
  Tensor ctx = Tensor::zeros({seq, cfg.d_model});
  if (p_out) p_out->clear();
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    const int64_t off = h * hd;
    Tensor logits({seq, seq});
    for (int64_t i = 0; i < seq; ++i) {
      for (int64_t j = 0; j < seq; ++j) {
        if (j > i) {
          logits.at(i, j) = neg_inf;
          continue;
        }
        double acc = 0.0;
        for (int64_t c = 0; c < hd; ++c) acc += q.at(i, off + c) * k.at(j, off + c);
        logits.at(i, j) = acc * inv_sqrt_hd;
      }
    }
    Tensor p = softmax_rows(logits);
    for (int64_t i = 0; i < seq; ++i)
      for (int64_t c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (int64_t j = 0; j <= i; ++j) acc += p.at(i, j) * v.at(j, off + c);
        ctx.at(i, off + c) = acc;
      }
    if (p_out) p_out->push_back(std::move(p));
  }
  return ctx;
}

Tensor rmsnorm_backward(const Tensor& x, const Tensor& weight, double eps, const Tensor& g_y) {
  const int64_t rows = x.rows(), d = x.cols();
  Tensor g_x({rows, d});
  for (int64_t i = 0; i < rows; ++i) {
    double ms = 0.0;
    for (int64_t j = 0; j < d; ++j) ms += x.at(i, j) * x.at(i, j);
    ms = ms / static_cast<double>(d) + eps;
    const double r = std::sqrt(ms);
    double c = 0.0;
    for (int64_t j = 0; j < d; ++j) c += g_y.at(i, j) * weight[j] * x.at(i, j);
    const double k = c / (static_cast<double>(d) * r * r * r);
    for (int64_t j = 0; j < d; ++j)
      g_x.at(i, j) = g_y.at(i, j) * weight[j] / r - x.at(i, j) * k;
  }
  return g_x;
}

Tensor softmax_rows_backward(const Tensor& p, const Tensor& g_p) {
  const int64_t rows = p.rows(), cols = p.cols();
  Tensor g_z({rows, cols});
  for (int64_t i = 0; i < rows; ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < cols; ++j) dot += g_p.at(i, j) * p.at(i, j);
    for (int64_t j = 0; j < cols; ++j)
      g_z.at(i, j) = p.at(i, j) * (g_p.at(i, j) - dot);
  }
  return g_z;
}

Tensor silu_backward(const Tensor& x, const Tensor& g_y) {
  Tensor g_x(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    double s;
    if (v >= 0.0) {
      s = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      s = e / (1.0 + e);
    }
    g_x[i] = g_y[i] * (s + v * s * (1.0 - s));
  }
  return g_x;
}

// ---- fp layer ---------------------------------------------------------------

Tensor layer_forward_fp(const ModelConfig& cfg, const LayerWeights& lw, const Tensor& x,
                        FpLayerCapture* cap) {
  Tensor h1 = rmsnorm(x, lw.rms1, cfg.rms_eps);
  Tensor q = matmul_nt(h1, lw.wq);
  Tensor k = matmul_nt(h1, lw.wk);
  Tensor v = matmul_nt(h1, lw.wv);
  if (cap) {
    cap->k = k;
    cap->v = v;
  }
  Tensor ctx = causal_attention(cfg, q, k, v);
  Tensor att = matmul_nt(ctx, lw.wo);
  Tensor x2 = add(x, att);
  Tensor h2 = rmsnorm(x2, lw.rms2, cfg.rms_eps);
  Tensor up = matmul_nt(h2, lw.w_up);
  Tensor su = silu(up);
  Tensor down = matmul_nt(su, lw.w_down);
  return add(x2, down);
}

Tensor model_forward_fp(const Model& m, std::span<const int32_t> tokens,
                        std::vector<Tensor>* layer_outputs) {
  Tensor x = embed(m, tokens);
  if (layer_outputs) layer_outputs->clear();
  for (const auto& lw : m.layers) {
    x = layer_forward_fp(m.config, lw, x);
    if (layer_outputs) layer_outputs->push_back(x);
  }
  return x;
}

// ---- mixed kv cache -----------------------------------------------------------

void MixedKvCache::append(int64_t layer, const Tensor& k_row, const Tensor& v_row) {
  auto& lc = layers.at(static_cast<size_t>(layer));
  const int64_t idx = static_cast<int64_t>(lc.size());
  KvEntry e;
  if (idx < boundary || !quantize_tail) {
    e.full_precision = true;
    e.k_fp = k_row;
    e.v_fp = v_row;
  } else {
    e.full_precision = false;
    e.k_q = quantize(k_row, kv_spec);
    e.v_q = quantize(v_row, kv_spec);
  }
  lc.push_back(std::move(e));
}

std::pair<Tensor, Tensor> MixedKvCache::materialize(int64_t layer) const {
  const auto& lc = layers.at(static_cast<size_t>(layer));
  const int64_t n = static_cast<int64_t>(lc.size());
  if (n == 0) throw ConfigError("empty kv cache layer");
  const int64_t d = lc[0].full_precision ? lc[0].k_fp.numel()
                                         : lc[0].k_q.shape.back();
  Tensor k({n, d}), v({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const auto& e = lc[static_cast<size_t>(i)];
    Tensor kr = e.full_precision ? e.k_fp : dequantize(e.k_q);
    Tensor vr = e.full_precision ? e.v_fp : dequantize(e.v_q);
    for (int64_t j = 0; j < d; ++j) {
      k.at(i, j) = kr[j];
      v.at(i, j) = vr[j];
    }
  }
  return {std::move(k), std::move(v)};
}

MixedKvCache precompute_system_prompt(const Model& m, std::span<const int32_t> prompt,
                                      const QuantSpec& kv_spec, bool quantize_tail) {
  MixedKvCache cache;
  cache.boundary = static_cast<int64_t>(prompt.size());
  cache.kv_spec = kv_spec;
  cache.quantize_tail = quantize_tail;
  cache.layers.resize(static_cast<size_t>(m.config.n_layers));
  if (prompt.empty()) return cache;
  Tensor x = embed(m, prompt);
  for (int64_t l = 0; l < m.config.n_layers; ++l) {
    FpLayerCapture cap;
    x = layer_forward_fp(m.config, m.layers[static_cast<size_t>(l)], x, &cap);
    for (int64_t t = 0; t < cache.boundary; ++t) {
      Tensor kr({m.config.d_model}), vr({m.config.d_model});
      for (int64_t j = 0; j < m.config.d_model; ++j) {
        kr[j] = cap.k.at(t, j);
        vr[j] = cap.v.at(t, j);
      }
      cache.append(l, kr, vr);
    }
  }
  return cache;
}

// ---- quantized layer -------------------------------------------------------------

void LayerQuantContext::prepare() {
  const QuantSpec wspec = scheme.weight_spec(1.0);
  for (int w = 0; w < kNumWeights; ++w) {
    if (scheme.no_op) {
      wdeq[w] = lw->weight(w);
      continue;
    }
    wdeq[w] = weight_forward(lw->weight(w), wspec, theta, w, base_clips[static_cast<size_t>(w)],
                             mode, record ? &wcache[w] : nullptr);
  }
}

namespace {

// Applies the mixed-precision rule to freshly projected K or V rows: prompt
// rows come from the fp cache, the rest quantize per token.
Tensor mix_rows(const Tensor& fresh, const Tensor* prompt, int64_t boundary,
                const QuantSpec& kv_spec, bool no_op, QuantRounding mode,
                AsymQuantCache* cache) {
  const int64_t seq = fresh.rows(), d = fresh.cols();
  if (boundary <= 0) {
    if (no_op) return fresh;
    Tensor out = asym_quant_forward(fresh, kv_spec, mode, cache);
    return out;
  }
  if (prompt == nullptr) throw ConfigError("missing prompt cache");
  if (boundary > seq) throw ConfigError("kv boundary exceeds sequence length");
  if (prompt->rows() < boundary) throw ConfigError("prompt cache shorter than boundary");
  Tensor out({seq, d});
  for (int64_t i = 0; i < boundary; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = prompt->at(i, j);
  const int64_t tail = seq - boundary;
  if (tail > 0) {
    Tensor tail_in({tail, d});
    for (int64_t i = 0; i < tail; ++i)
      for (int64_t j = 0; j < d; ++j) tail_in.at(i, j) = fresh.at(boundary + i, j);
    Tensor tail_out = no_op ? tail_in : asym_quant_forward(tail_in, kv_spec, mode, cache);
    for (int64_t i = 0; i < tail; ++i)
      for (int64_t j = 0; j < d; ++j) out.at(boundary + i, j) = tail_out.at(i, j);
  }
  return out;
}

}  // namespace

Tensor layer_forward_quant(LayerQuantContext& ctx, const Tensor& x, const Tensor* prompt_k,
                           const Tensor* prompt_v, int64_t boundary, SeqTape* tape) {
  const ModelConfig& cfg = *ctx.cfg;
  const LayerWeights& lw = *ctx.lw;
  const bool no_op = ctx.scheme.no_op;
  const QuantSpec aspec = ctx.scheme.act_spec(ctx.base_act_clip);
  const QuantSpec kvspec = ctx.scheme.kv_spec();

  Tensor h1 = rmsnorm(x, lw.rms1, cfg.rms_eps);
  Tensor h1q = no_op ? h1
                     : act_forward(h1, aspec, ctx.theta, kAttnIn, ctx.base_act_clip, ctx.mode,
                                   tape ? &tape->attn_in : nullptr);
  Tensor q = matmul_nt(h1q, ctx.wdeq[kWq]);
  Tensor k = matmul_nt(h1q, ctx.wdeq[kWk]);
  Tensor v = matmul_nt(h1q, ctx.wdeq[kWv]);
  Tensor km = mix_rows(k, prompt_k, boundary, kvspec, no_op, ctx.mode,
                       tape ? &tape->k_asym : nullptr);
  Tensor vm = mix_rows(v, prompt_v, boundary, kvspec, no_op, ctx.mode,
                       tape ? &tape->v_asym : nullptr);
  Tensor ctx_t = causal_attention(cfg, q, km, vm, tape ? &tape->p : nullptr);
  Tensor ctxq = no_op ? ctx_t
                      : act_forward(ctx_t, aspec, ctx.theta, kAttnOut, ctx.base_act_clip,
                                    ctx.mode, tape ? &tape->attn_out : nullptr);
  Tensor att = matmul_nt(ctxq, ctx.wdeq[kWo]);
  Tensor x2 = add(x, att);
  Tensor h2 = rmsnorm(x2, lw.rms2, cfg.rms_eps);
  Tensor h2q = no_op ? h2
                     : act_forward(h2, aspec, ctx.theta, kMlpIn, ctx.base_act_clip, ctx.mode,
                                   tape ? &tape->mlp_in : nullptr);
  Tensor up = matmul_nt(h2q, ctx.wdeq[kWUp]);
  Tensor su = silu(up);
  Tensor suq = no_op ? su
                     : act_forward(su, aspec, ctx.theta, kMlpMid, ctx.base_act_clip, ctx.mode,
                                   tape ? &tape->mlp_mid : nullptr);
  Tensor down = matmul_nt(suq, ctx.wdeq[kWDown]);
  Tensor y = add(x2, down);
  if (tape) {
    tape->x = x;
    tape->h1 = h1;
    tape->h1q = h1q;
    tape->q = q;
    tape->k = k;
    tape->v = v;
    tape->km = km;
    tape->vm = vm;
    tape->ctx = ctx_t;
    tape->ctxq = ctxq;
    tape->x2 = x2;
    tape->h2 = h2;
    tape->h2q = h2q;
    tape->up = up;
    tape->su = su;
    tape->suq = suq;
    tape->boundary = boundary;
  }
  return y;
}

namespace {

void add_weight_grad(std::array<Tensor, kNumWeights>& g_wdeq, int widx, const Tensor& g) {
  if (g_wdeq[widx].empty()) {
    g_wdeq[widx] = g;
  } else {
    add_inplace(g_wdeq[widx], g);
  }
}

// Routes dL/d(mixed rows) back to the projected rows: prompt rows are
// constants, tail rows go through the per-token asymmetric node.
Tensor unmix_rows(const Tensor& g_m, const SeqTape& tape, const AsymQuantCache& cache,
                  bool no_op) {
  const int64_t seq = g_m.rows(), d = g_m.cols();
  const int64_t b = tape.boundary;
  Tensor g = Tensor::zeros({seq, d});
  if (b >= seq && b > 0) return g;
  if (no_op) {
    for (int64_t i = b; i < seq; ++i)
      for (int64_t j = 0; j < d; ++j) g.at(i, j) = g_m.at(i, j);
    return g;
  }
  const int64_t tail = seq - b;
  Tensor g_tail_out({tail, d});
  for (int64_t i = 0; i < tail; ++i)
    for (int64_t j = 0; j < d; ++j) g_tail_out.at(i, j) = g_m.at(b + i, j);
  Tensor g_tail_in = Tensor::zeros({tail, d});
  asym_quant_backward(cache, g_tail_out, g_tail_in);
  for (int64_t i = 0; i < tail; ++i)
    for (int64_t j = 0; j < d; ++j) g.at(b + i, j) = g_tail_in.at(i, j);
  return g;
}

}  // namespace

void layer_backward_quant(LayerQuantContext& ctx, const SeqTape& tape, const Tensor& g_y,
                          std::array<Tensor, kNumWeights>& g_wdeq) {
  const ModelConfig& cfg = *ctx.cfg;
  const bool no_op = ctx.scheme.no_op;
  if (no_op) throw ConfigError("backward requires an active quantization scheme");
  if (ctx.theta == nullptr) throw ConfigError("backward requires learned parameters");
  BisupParams& theta = *ctx.theta;

  // y = x2 + down
  Tensor g_x2 = g_y;
  const Tensor& g_down = g_y;

  // down = suq @ w_down^T
  Tensor g_suq = matmul(g_down, ctx.wdeq[kWDown]);
  add_weight_grad(g_wdeq, kWDown, matmul(transpose(g_down), tape.suq));

  Tensor g_su = Tensor::zeros(tape.su.shape());
  act_backward(tape.su, theta, kMlpMid, tape.mlp_mid, g_suq, g_su);

  Tensor g_up = silu_backward(tape.up, g_su);

  // up = h2q @ w_up^T
  Tensor g_h2q = matmul(g_up, ctx.wdeq[kWUp]);
  add_weight_grad(g_wdeq, kWUp, matmul(transpose(g_up), tape.h2q));

  Tensor g_h2 = Tensor::zeros(tape.h2.shape());
  act_backward(tape.h2, theta, kMlpIn, tape.mlp_in, g_h2q, g_h2);

  add_inplace(g_x2, rmsnorm_backward(tape.x2, ctx.lw->rms2, cfg.rms_eps, g_h2));

  // x2 = x + att
  const Tensor& g_att = g_x2;

  // att = ctxq @ wo^T
  Tensor g_ctxq = matmul(g_att, ctx.wdeq[kWo]);
  add_weight_grad(g_wdeq, kWo, matmul(transpose(g_att), tape.ctxq));

  Tensor g_ctx = Tensor::zeros(tape.ctx.shape());
  act_backward(tape.ctx, theta, kAttnOut, tape.attn_out, g_ctxq, g_ctx);

  // attention backward per head
  const int64_t seq = tape.q.rows();
  const int64_t hd = cfg.head_dim();
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor g_q = Tensor::zeros(tape.q.shape());
  Tensor g_km = Tensor::zeros(tape.km.shape());
  Tensor g_vm = Tensor::zeros(tape.vm.shape());
  for (int64_t h = 0; h < cfg.n_heads; ++h) {
    const int64_t off = h * hd;
    const Tensor& p = tape.p[static_cast<size_t>(h)];
    Tensor g_p = Tensor::zeros({seq, seq});
    for (int64_t i = 0; i < seq; ++i)
      for (int64_t j = 0; j <= i; ++j) {
        double acc = 0.0;
        for (int64_t c = 0; c < hd; ++c) acc += g_ctx.at(i, off + c) * tape.vm.at(j, off + c);
        g_p.at(i, j) = acc;
      }
    for (int64_t j = 0; j < seq; ++j)
      for (int64_t c = 0; c < hd; ++c) {
        double acc = 0.0;
        for (int64_t i = j; i < seq; ++i) acc += p.at(i, j) * g_ctx.at(i, off + c);
        g_vm.at(j, off + c) += acc;
      }
    Tensor g_logits = softmax_rows_backward(p, g_p);
    for (int64_t i = 0; i < seq; ++i)
      for (int64_t j = 0; j <= i; ++j) {
        const double gl = g_logits.at(i, j) * inv_sqrt_hd;
        for (int64_t c = 0; c < hd; ++c) {
          g_q.at(i, off + c) += gl * tape.km.at(j, off + c);
          g_km.at(j, off + c) += gl * tape.q.at(i, off + c);
        }
      }
  }

  Tensor g_k = unmix_rows(g_km, tape, tape.k_asym, false);
  Tensor g_v = unmix_rows(g_vm, tape, tape.v_asym, false);

  // q/k/v = h1q @ w^T
  Tensor g_h1q = matmul(g_q, ctx.wdeq[kWq]);
  add_inplace(g_h1q, matmul(g_k, ctx.wdeq[kWk]));
  add_inplace(g_h1q, matmul(g_v, ctx.wdeq[kWv]));
  add_weight_grad(g_wdeq, kWq, matmul(transpose(g_q), tape.h1q));
  add_weight_grad(g_wdeq, kWk, matmul(transpose(g_k), tape.h1q));
  add_weight_grad(g_wdeq, kWv, matmul(transpose(g_v), tape.h1q));

  Tensor g_h1 = Tensor::zeros(tape.h1.shape());
  act_backward(tape.h1, theta, kAttnIn, tape.attn_in, g_h1q, g_h1);
}

void finish_weight_backward(LayerQuantContext& ctx,
                            const std::array<Tensor, kNumWeights>& g_wdeq) {
  for (int w = 0; w < kNumWeights; ++w) {
    if (g_wdeq[w].empty()) continue;
    weight_backward(ctx.lw->weight(w), *ctx.theta, w, ctx.wcache[w], g_wdeq[w]);
  }
}

// ---- quantized model ---------------------------------------------------------------

std::array<double, kNumWeights> grid_clips_for_layer(const LayerWeights& lw,
                                                     const QuantScheme& scheme) {
  std::array<double, kNumWeights> clips = {1, 1, 1, 1, 1, 1};
  if (scheme.no_op) return clips;
  const auto grid = default_clip_grid();
  for (int w = 0; w < kNumWeights; ++w)
    clips[static_cast<size_t>(w)] = grid_search_clip(lw.weight(w), scheme.weight_spec(1.0), grid);
  return clips;
}

QuantizedModel make_rtn_model(Model m, const QuantScheme& scheme, double act_clip,
                              int64_t boundary, std::vector<int32_t> prompt) {
  if (boundary != static_cast<int64_t>(prompt.size()))
    throw ConfigError("kv boundary must equal prompt length");
  QuantizedModel qm;
  qm.scheme = scheme;
  qm.boundary = boundary;
  qm.prompt_tokens = std::move(prompt);
  qm.base_act_clip = act_clip;
  for (const auto& lw : m.layers) qm.base_clips.push_back(grid_clips_for_layer(lw, scheme));
  qm.model = std::move(m);
  return qm;
}

namespace {

void check_prompt_prefix(const QuantizedModel& qm, std::span<const int32_t> tokens) {
  if (qm.boundary <= 0) return;
  if (static_cast<int64_t>(tokens.size()) < qm.boundary)
    throw ConfigError("sequence shorter than kv boundary");
  for (int64_t i = 0; i < qm.boundary; ++i)
    if (tokens[static_cast<size_t>(i)] != qm.prompt_tokens[static_cast<size_t>(i)])
      throw ConfigError("sequence does not start with the system prompt");
}

}  // namespace

Tensor qmodel_forward(const QuantizedModel& qm, std::span<const int32_t> tokens,
                      std::vector<Tensor>* layer_outputs, QuantRounding mode) {
  check_prompt_prefix(qm, tokens);
  MixedKvCache cache;
  if (qm.boundary > 0)
    cache = precompute_system_prompt(qm.model, qm.prompt_tokens, qm.scheme.kv_spec(),
                                     !qm.scheme.no_op);
  Tensor x = embed(qm.model, tokens);
  if (layer_outputs) layer_outputs->clear();
  for (int64_t l = 0; l < qm.model.config.n_layers; ++l) {
    LayerQuantContext ctx;
    ctx.cfg = &qm.model.config;
    ctx.lw = &qm.model.layers[static_cast<size_t>(l)];
    ctx.theta = qm.has_theta() ? const_cast<BisupParams*>(&qm.thetas[static_cast<size_t>(l)])
                               : nullptr;
    ctx.scheme = qm.scheme;
    ctx.base_clips = qm.base_clips.empty() ? std::array<double, kNumWeights>{1, 1, 1, 1, 1, 1}
                                           : qm.base_clips[static_cast<size_t>(l)];
    ctx.base_act_clip = qm.base_act_clip;
    ctx.mode = mode;
    ctx.prepare();
    Tensor pk, pv;
    const Tensor* pkp = nullptr;
    const Tensor* pvp = nullptr;
    if (qm.boundary > 0) {
      auto kv = cache.materialize(l);
      pk = std::move(kv.first);
      pv = std::move(kv.second);
      pkp = &pk;
      pvp = &pv;
    }
    x = layer_forward_quant(ctx, x, pkp, pvp, qm.boundary, nullptr);
    if (layer_outputs) layer_outputs->push_back(x);
  }
  return x;
}

PropagationTrace trace_propagation(const QuantizedModel& qm,
                                   const std::vector<std::vector<int32_t>>& seqs) {
  if (seqs.empty()) throw ConfigError("trace needs at least one sequence");
  const int64_t n_layers = qm.model.config.n_layers;
  PropagationTrace tr;
  tr.layer_mse.assign(static_cast<size_t>(n_layers), 0.0);
  for (const auto& s : seqs) {
    std::vector<Tensor> fp_outs, q_outs;
    model_forward_fp(qm.model, s, &fp_outs);
    qmodel_forward(qm, s, &q_outs);
    for (int64_t l = 0; l < n_layers; ++l)
      tr.layer_mse[static_cast<size_t>(l)] +=
          mse(fp_outs[static_cast<size_t>(l)], q_outs[static_cast<size_t>(l)]);
  }
  for (auto& v : tr.layer_mse) v /= static_cast<double>(seqs.size());
  return tr;
}

// ---- model file io ---------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'B', 'S', 'M', 'D'};
constexpr uint32_t kVersion = 1;

constexpr uint32_t kFlagHasTheta = 1u << 0;
constexpr uint32_t kFlagEnableClip = 1u << 1;
constexpr uint32_t kFlagEnableSmooth = 1u << 2;
constexpr uint32_t kFlagEnableLowRank = 1u << 3;
constexpr uint32_t kFlagFormLrec = 1u << 4;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated model file");
  return v;
}
uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated model file");
  return v;
}
double read_f64(std::istream& is) {
  double v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated model file");
  return v;
}
std::string read_str(std::istream& is) {
  uint32_t n = read_u32(is);
  if (n > (1u << 20)) throw IoError("model file string too long");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated model file");
  return s;
}

using Section = std::vector<std::pair<std::string, Tensor>>;

void write_section(std::ostream& os, const std::string& name, const Section& entries) {
  write_str(os, name);
  write_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [ename, t] : entries) {
    write_str(os, ename);
    write_tensor(os, t);
  }
}

Section read_section(std::istream& is, std::string& name) {
  name = read_str(is);
  uint32_t n = read_u32(is);
  Section entries;
  entries.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    std::string ename = read_str(is);
    Tensor t = read_tensor(is);
    entries.emplace_back(std::move(ename), std::move(t));
  }
  return entries;
}

std::string lkey(int64_t l, const std::string& rest) {
  return "layers." + std::to_string(l) + "." + rest;
}

}  // namespace

void save_quantized_model(const std::string& path, const QuantizedModel& qm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  const ModelConfig& cfg = qm.model.config;
  write_u64(os, static_cast<uint64_t>(cfg.n_layers));
  write_u64(os, static_cast<uint64_t>(cfg.d_model));
  write_u64(os, static_cast<uint64_t>(cfg.n_heads));
  write_u64(os, static_cast<uint64_t>(cfg.d_hidden));
  write_u64(os, static_cast<uint64_t>(cfg.vocab));
  write_f64(os, cfg.rms_eps);
  write_u64(os, static_cast<uint64_t>(qm.boundary));
  uint32_t flags = 0;
  uint64_t rank = 0;
  if (qm.has_theta()) {
    flags |= kFlagHasTheta;
    const BisupParams& t0 = qm.thetas.front();
    if (t0.enable_clip) flags |= kFlagEnableClip;
    if (t0.enable_smooth) flags |= kFlagEnableSmooth;
    if (t0.enable_lowrank) flags |= kFlagEnableLowRank;
    if (t0.lowrank.form == LowRankForm::kLrec) flags |= kFlagFormLrec;
    rank = static_cast<uint64_t>(t0.lowrank.rank);
  }
  write_u32(os, flags);
  write_u64(os, rank);
  write_str(os, qm.scheme.text);
  write_f64(os, qm.base_act_clip);
  write_u64(os, qm.prompt_tokens.size());
  for (int32_t t : qm.prompt_tokens) write_u32(os, static_cast<uint32_t>(t));

  uint32_t n_sections = 2;
  if (qm.has_theta()) n_sections += 3;
  write_u32(os, n_sections);

  Section model_sec;
  model_sec.emplace_back("embedding", qm.model.embedding);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = qm.model.layers[static_cast<size_t>(l)];
    model_sec.emplace_back(lkey(l, "rms1"), lw.rms1);
    model_sec.emplace_back(lkey(l, "rms2"), lw.rms2);
    for (int w = 0; w < kNumWeights; ++w)
      model_sec.emplace_back(lkey(l, weight_name(w)), lw.weight(w));
  }
  write_section(os, "model", model_sec);

  Section clips_sec;
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    Tensor c({kNumWeights});
    const auto& bc = qm.base_clips.empty() ? std::array<double, kNumWeights>{1, 1, 1, 1, 1, 1}
                                           : qm.base_clips[static_cast<size_t>(l)];
    for (int w = 0; w < kNumWeights; ++w) c[w] = bc[static_cast<size_t>(w)];
    clips_sec.emplace_back(lkey(l, "weight_clips"), std::move(c));
  }
  write_section(os, "base_clips", clips_sec);

  if (qm.has_theta()) {
    Section t1, t2, t3;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      const BisupParams& th = qm.thetas[static_cast<size_t>(l)];
      for (int w = 0; w < kNumWeights; ++w) {
        t1.emplace_back(lkey(l, std::string(weight_name(w)) + ".clip"), th.clip.weight[w]);
        t2.emplace_back(lkey(l, std::string(weight_name(w)) + ".s2_log"), th.smooth.s2_log[w]);
        t3.emplace_back(lkey(l, std::string(weight_name(w)) + ".a"), th.lowrank.a[w]);
        t3.emplace_back(lkey(l, std::string(weight_name(w)) + ".b"), th.lowrank.b[w]);
      }
      for (int s = 0; s < kNumActSites; ++s) {
        t1.emplace_back(lkey(l, std::string(act_site_name(s)) + ".clip"), th.clip.act[s]);
        t2.emplace_back(lkey(l, std::string(act_site_name(s)) + ".s1_log"), th.smooth.s1_log[s]);
      }
    }
    write_section(os, "theta1", t1);
    write_section(os, "theta2", t2);
    write_section(os, "theta3", t3);
  }
  if (!os) throw IoError("write failed: " + path);
}

QuantizedModel load_quantized_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a model file: " + path);
  if (read_u32(is) != kVersion) throw IoError("unsupported model file version");
  QuantizedModel qm;
  ModelConfig cfg;
  cfg.n_layers = static_cast<int64_t>(read_u64(is));
  cfg.d_model = static_cast<int64_t>(read_u64(is));
  cfg.n_heads = static_cast<int64_t>(read_u64(is));
  cfg.d_hidden = static_cast<int64_t>(read_u64(is));
  cfg.vocab = static_cast<int64_t>(read_u64(is));
  cfg.rms_eps = read_f64(is);
  cfg.validate();
  qm.boundary = static_cast<int64_t>(read_u64(is));
  const uint32_t flags = read_u32(is);
  const int64_t rank = static_cast<int64_t>(read_u64(is));
  qm.scheme = parse_quant_scheme(read_str(is));
  qm.base_act_clip = read_f64(is);
  const uint64_t n_prompt = read_u64(is);
  if (n_prompt > (1u << 20)) throw IoError("model file prompt too long");
  for (uint64_t i = 0; i < n_prompt; ++i)
    qm.prompt_tokens.push_back(static_cast<int32_t>(read_u32(is)));

  const uint32_t n_sections = read_u32(is);
  std::map<std::string, std::map<std::string, Tensor>> sections;
  for (uint32_t i = 0; i < n_sections; ++i) {
    std::string name;
    Section sec = read_section(is, name);
    auto& dst = sections[name];
    for (auto& [ename, t] : sec) dst.emplace(std::move(ename), std::move(t));
  }
  auto need = [&](const std::string& sec, const std::string& key) -> Tensor& {
    auto sit = sections.find(sec);
    if (sit == sections.end()) throw IoError("model file missing section: " + sec);
    auto it = sit->second.find(key);
    if (it == sit->second.end()) throw IoError("model file missing entry: " + sec + "/" + key);
    return it->second;
  };

  qm.model.config = cfg;
  qm.model.embedding = need("model", "embedding");
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights lw;
    lw.rms1 = need("model", lkey(l, "rms1"));
    lw.rms2 = need("model", lkey(l, "rms2"));
    for (int w = 0; w < kNumWeights; ++w) lw.weight(w) = need("model", lkey(l, weight_name(w)));
    qm.model.layers.push_back(std::move(lw));

    const Tensor& c = need("base_clips", lkey(l, "weight_clips"));
    if (c.numel() != kNumWeights) throw IoError("bad clip entry in model file");
    std::array<double, kNumWeights> bc;
    for (int w = 0; w < kNumWeights; ++w) bc[static_cast<size_t>(w)] = c[w];
    qm.base_clips.push_back(bc);
  }

  if (flags & kFlagHasTheta) {
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      BisupParams th;
      th.enable_clip = flags & kFlagEnableClip;
      th.enable_smooth = flags & kFlagEnableSmooth;
      th.enable_lowrank = flags & kFlagEnableLowRank;
      th.lowrank.rank = rank;
      th.lowrank.form = (flags & kFlagFormLrec) ? LowRankForm::kLrec : LowRankForm::kSlrec;
      for (int w = 0; w < kNumWeights; ++w) {
        th.clip.weight[w] = need("theta1", lkey(l, std::string(weight_name(w)) + ".clip"));
        th.smooth.s2_log[w] = need("theta2", lkey(l, std::string(weight_name(w)) + ".s2_log"));
        th.lowrank.a[w] = need("theta3", lkey(l, std::string(weight_name(w)) + ".a"));
        th.lowrank.b[w] = need("theta3", lkey(l, std::string(weight_name(w)) + ".b"));
      }
      for (int s = 0; s < kNumActSites; ++s) {
        th.clip.act[s] = need("theta1", lkey(l, std::string(act_site_name(s)) + ".clip"));
        th.smooth.s1_log[s] = need("theta2", lkey(l, std::string(act_site_name(s)) + ".s1_log"));
      }
      qm.thetas.push_back(std::move(th));
    }
  }
  return qm;
}

void save_model(const std::string& path, const Model& m) {
  QuantizedModel qm;
  qm.model = m;
  qm.scheme = parse_quant_scheme("none");
  qm.base_clips.assign(static_cast<size_t>(m.config.n_layers), {1, 1, 1, 1, 1, 1});
  save_quantized_model(path, qm);
}

Model load_model(const std::string& path) {
  QuantizedModel qm = load_quantized_model(path);
  return std::move(qm.model);
}

}  // namespace bisup
