#include "calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "errors.hpp"
#include "rng.hpp"

namespace bisup {

// ---- optimizer ---------------------------------------------------------------

void AdamW::init(const std::vector<ParamSlot>& slots) {
  t_ = 0;
  m_.assign(slots.size(), {});
  v_.assign(slots.size(), {});
  for (size_t i = 0; i < slots.size(); ++i) {
    const size_t n = static_cast<size_t>(slots[i].value->numel());
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
  }
}

void AdamW::step(std::vector<ParamSlot>& slots) {
  if (m_.size() != slots.size()) throw ConfigError("optimizer not initialized for these slots");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t i = 0; i < slots.size(); ++i) {
    ParamSlot& s = slots[i];
    Tensor& val = *s.value;
    const Tensor& grad = *s.grad;
    auto& m = m_[i];
    auto& v = v_[i];
    for (int64_t j = 0; j < val.numel(); ++j) {
      const double g = grad[j];
      m[static_cast<size_t>(j)] = beta1 * m[static_cast<size_t>(j)] + (1.0 - beta1) * g;
      v[static_cast<size_t>(j)] = beta2 * v[static_cast<size_t>(j)] + (1.0 - beta2) * g * g;
      const double mh = m[static_cast<size_t>(j)] / bc1;
      const double vh = v[static_cast<size_t>(j)] / bc2;
      val[j] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * val[j]);
    }
    if (s.clamp_hi > s.clamp_lo)
      for (int64_t j = 0; j < val.numel(); ++j)
        val[j] = std::clamp(val[j], s.clamp_lo, s.clamp_hi);
  }
}

// ---- layer calibration ---------------------------------------------------------

void CalibConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (rank < 1) throw ConfigError("rank must be >= 1");
  if (!(act_clip > 0.0) || act_clip > 1.0) throw ConfigError("act_clip must be in (0, 1]");
}

namespace {

double sum_sq_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("loss shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

double full_layer_loss(LayerQuantContext& ctx, const std::vector<Tensor>& x_int,
                       const std::vector<Tensor>& y_fp, const Tensor* pk, const Tensor* pv,
                       int64_t boundary) {
  ctx.record = false;
  ctx.prepare();
  double num = 0.0, den = 0.0;
  for (size_t s = 0; s < x_int.size(); ++s) {
    Tensor y = layer_forward_quant(ctx, x_int[s], pk, pv, boundary, nullptr);
    num += sum_sq_diff(y, y_fp[s]);
    den += static_cast<double>(y.numel());
  }
  return num / den;
}

}  // namespace

LayerCalibResult calibrate_layer(const ModelConfig& cfg, const LayerWeights& lw,
                                 const QuantScheme& scheme,
                                 const std::array<double, kNumWeights>& base_clips,
                                 const std::vector<Tensor>& x_int,
                                 const std::vector<Tensor>& y_fp, const Tensor* prompt_k,
                                 const Tensor* prompt_v, int64_t boundary,
                                 const CalibConfig& cc, BisupParams& theta, Rng& rng) {
  cc.validate();
  if (scheme.no_op) throw ConfigError("calibration requires an active quantization scheme");
  if (x_int.empty() || x_int.size() != y_fp.size())
    throw ConfigError("calibration needs matching input and target sets");

  const BisupParams init_copy = theta;
  LayerQuantContext ctx;
  ctx.cfg = &cfg;
  ctx.lw = &lw;
  ctx.theta = &theta;
  ctx.scheme = scheme;
  ctx.base_clips = base_clips;
  ctx.base_act_clip = cc.act_clip;
  ctx.mode = QuantRounding::kHard;

  LayerCalibResult result;
  result.initial_loss = full_layer_loss(ctx, x_int, y_fp, prompt_k, prompt_v, boundary);
  const double guard = 10.0 * result.initial_loss + 1e-12;

  const int64_t n = static_cast<int64_t>(x_int.size());
  double lr = cc.lr;
  int restarts = 0;
  for (;;) {
    auto slots = trainable_slots(theta);
    if (slots.empty()) break;
    AdamW opt;
    opt.lr = lr;
    opt.weight_decay = cc.weight_decay;
    opt.init(slots);
    result.loss_history.clear();
    bool diverged = false;
    for (int64_t epoch = 0; epoch < cc.epochs && !diverged; ++epoch) {
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      Rng er = rng.fork("epoch." + std::to_string(epoch));
      for (int64_t i = n - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(er.uniform_int(0, i))]);
      for (int64_t start = 0; start < n && !diverged; start += cc.batch_size) {
        const int64_t end = std::min(n, start + cc.batch_size);
        double batch_den = 0.0;
        for (int64_t i = start; i < end; ++i)
          batch_den += static_cast<double>(y_fp[static_cast<size_t>(order[static_cast<size_t>(i)])].numel());

        ctx.record = true;
        ctx.prepare();
        theta.zero_grads();
        std::array<Tensor, kNumWeights> g_wdeq;
        double batch_loss = 0.0;
        for (int64_t i = start; i < end; ++i) {
          const size_t s = static_cast<size_t>(order[static_cast<size_t>(i)]);
          SeqTape tape;
          Tensor y = layer_forward_quant(ctx, x_int[s], prompt_k, prompt_v, boundary, &tape);
          Tensor diff = sub(y, y_fp[s]);
          batch_loss += sum_sq_diff(y, y_fp[s]);
          Tensor g_y = scale(diff, 2.0 / batch_den);
          layer_backward_quant(ctx, tape, g_y, g_wdeq);
        }
        batch_loss /= batch_den;
        if (!std::isfinite(batch_loss) || batch_loss > guard) {
          diverged = true;
          break;
        }
        result.loss_history.push_back(batch_loss);
        finish_weight_backward(ctx, g_wdeq);
        opt.step(slots);
      }
    }
    if (!diverged) break;
    ++restarts;
    if (restarts > 1) throw NumericError("layer calibration diverged after lr restart");
    lr *= 0.5;
    theta = init_copy;
  }
  result.restarts = restarts;
  result.lr_used = lr;

  double final_loss = full_layer_loss(ctx, x_int, y_fp, prompt_k, prompt_v, boundary);
  if (final_loss > result.initial_loss) {
    theta = init_copy;
    result.reverted = true;
    final_loss = result.initial_loss;
  }
  result.final_loss = final_loss;
  return result;
}

CalibrationOutput calibrate_model(Model model, const QuantScheme& scheme,
                                  const std::vector<std::vector<int32_t>>& seqs,
                                  const std::vector<int32_t>& prompt, const CalibConfig& cc,
                                  uint64_t seed) {
  cc.validate();
  model.config.validate();
  if (scheme.no_op) throw ConfigError("calibration requires an active quantization scheme");
  if (seqs.empty()) throw ConfigError("calibration needs at least one sequence");
  const int64_t boundary = static_cast<int64_t>(prompt.size());
  for (const auto& s : seqs) {
    if (static_cast<int64_t>(s.size()) < std::max<int64_t>(boundary, 1))
      throw ConfigError("calibration sequence too short");
    for (int64_t i = 0; i < boundary; ++i)
      if (s[static_cast<size_t>(i)] != prompt[static_cast<size_t>(i)])
        throw ConfigError("calibration sequence does not start with the system prompt");
  }

  Rng root(seed);
  CalibrationOutput out;
  out.qm = make_rtn_model(std::move(model), scheme, cc.act_clip, boundary, prompt);
  QuantizedModel& qm = out.qm;
  const ModelConfig& cfg = qm.model.config;

  std::vector<std::pair<Tensor, Tensor>> prompt_kv;
  if (boundary > 0) {
    MixedKvCache cache =
        precompute_system_prompt(qm.model, prompt, scheme.kv_spec(), true);
    for (int64_t l = 0; l < cfg.n_layers; ++l) prompt_kv.push_back(cache.materialize(l));
  }

  std::vector<Tensor> x_fp, x_int;
  x_fp.reserve(seqs.size());
  for (const auto& s : seqs) x_fp.push_back(embed(qm.model, s));
  x_int = x_fp;

  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = qm.model.layers[static_cast<size_t>(l)];
    const Tensor* pk = boundary > 0 ? &prompt_kv[static_cast<size_t>(l)].first : nullptr;
    const Tensor* pv = boundary > 0 ? &prompt_kv[static_cast<size_t>(l)].second : nullptr;

    std::vector<Tensor> y_fp;
    y_fp.reserve(x_fp.size());
    for (const auto& x : x_fp) y_fp.push_back(layer_forward_fp(cfg, lw, x));

    BisupInit bi;
    bi.weight_clip = qm.base_clips[static_cast<size_t>(l)];
    bi.act_clip = cc.act_clip;
    bi.rank = cc.rank;
    bi.form = cc.form;
    bi.enable_clip = cc.enable_clip;
    bi.enable_smooth = cc.enable_smooth;
    bi.enable_lowrank = cc.enable_lowrank;
    std::array<std::vector<int64_t>, kNumWeights> wshapes;
    for (int w = 0; w < kNumWeights; ++w) wshapes[static_cast<size_t>(w)] = lw.weight(w).shape();
    Rng ir = root.fork("layer." + std::to_string(l) + ".init");
    BisupParams theta = init_bisup_params(wshapes, scheme, bi, ir);

    Rng tr = root.fork("layer." + std::to_string(l) + ".train");
    out.result.layers.push_back(calibrate_layer(cfg, lw, scheme,
                                                qm.base_clips[static_cast<size_t>(l)], x_int,
                                                y_fp, pk, pv, boundary, cc, theta, tr));

    LayerQuantContext ctx;
    ctx.cfg = &cfg;
    ctx.lw = &lw;
    ctx.theta = &theta;
    ctx.scheme = scheme;
    ctx.base_clips = qm.base_clips[static_cast<size_t>(l)];
    ctx.base_act_clip = cc.act_clip;
    ctx.mode = QuantRounding::kHard;
    ctx.prepare();
    for (auto& x : x_int) x = layer_forward_quant(ctx, x, pk, pv, boundary, nullptr);

    x_fp = std::move(y_fp);
    qm.thetas.push_back(std::move(theta));
  }
  return out;
}

// ---- finite differences -----------------------------------------------------------

FdReport finite_diff_check(std::vector<ParamSlot>& slots, const std::function<double()>& loss_fn,
                           const std::function<void()>& grad_fn, const FdOptions& opt) {
  if (!(opt.h > 0.0)) throw ConfigError("finite-difference step must be positive");
  grad_fn();
  FdReport rep;
  Rng root(opt.seed);
  const double f0 = loss_fn();
  if (!std::isfinite(f0)) throw NumericError("objective not finite at the checked point");
  for (auto& slot : slots) {
    Tensor& val = *slot.value;
    const Tensor& grad = *slot.grad;
    const int64_t n = val.numel();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    if (n > opt.max_coords_per_tensor) {
      Rng sr = root.fork("sample." + slot.name);
      for (int64_t i = n - 1; i > 0; --i)
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(sr.uniform_int(0, i))]);
      idx.resize(static_cast<size_t>(opt.max_coords_per_tensor));
    }
    for (int64_t i : idx) {
      const double saved = val[i];
      val[i] = saved + opt.h;
      const double f_plus = loss_fn();
      val[i] = saved - opt.h;
      const double f_minus = loss_fn();
      val[i] = saved;
      const double g_left = (f0 - f_minus) / opt.h;
      const double g_right = (f_plus - f0) / opt.h;
      if (std::abs(g_left - g_right) >
          opt.kink_tol * (1.0 + std::max(std::abs(g_left), std::abs(g_right)))) {
        rep.excluded.push_back({slot.name, i, "one-sided derivative mismatch (clamp boundary)"});
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * opt.h);
      const double analytic = grad[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
      const double rel = std::abs(numeric - analytic) / denom;
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = {slot.name, i, analytic, numeric, rel};
      }
    }
  }
  return rep;
}

// ---- canned gradient check ----------------------------------------------------------

GradcheckSetup make_gradcheck_setup(uint64_t seed) {
  GradcheckSetup s;
  s.scheme = parse_quant_scheme("W3A3-g4");
  Rng root(seed);
  Rng xr = root.fork("x");
  Rng wr = root.fork("w");
  s.x = Tensor::randn({4, 8}, xr, 1.0);
  s.w = Tensor::randn({6, 8}, wr, 1.0);
  s.y = matmul_nt(s.x, s.w);

  BisupInit bi;
  bi.weight_clip = {0.9, 0.9, 0.9, 0.9, 0.9, 0.9};
  bi.act_clip = s.base_clip;
  bi.rank = 2;
  bi.form = LowRankForm::kSlrec;
  std::array<std::vector<int64_t>, kNumWeights> wshapes;
  for (int w = 0; w < kNumWeights; ++w) wshapes[static_cast<size_t>(w)] = s.w.shape();
  Rng ir = root.fork("init");
  s.theta = init_bisup_params(wshapes, s.scheme, bi, ir);

  // Generic position: move every parameter off its init so no family sits
  // exactly on a clamp boundary or at a zero factor.
  Rng pr = root.fork("perturb");
  auto jitter = [&](Tensor& t, double sigma) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] += sigma * pr.normal();
  };
  for (int w = 0; w < kNumWeights; ++w) {
    for (int64_t i = 0; i < s.theta.clip.weight[w].numel(); ++i)
      s.theta.clip.weight[w][i] = 0.75 + 0.2 * pr.uniform();
    jitter(s.theta.smooth.s2_log[w], 0.1);
    jitter(s.theta.lowrank.a[w], 0.3);
    jitter(s.theta.lowrank.b[w], 0.3);
  }
  for (int a = 0; a < kNumActSites; ++a) {
    for (int64_t i = 0; i < s.theta.clip.act[a].numel(); ++i)
      s.theta.clip.act[a][i] = 0.75 + 0.2 * pr.uniform();
    jitter(s.theta.smooth.s1_log[a], 0.1);
  }
  return s;
}

double gradcheck_loss(GradcheckSetup& s, QuantRounding mode) {
  Tensor xq = act_forward(s.x, s.scheme.act_spec(s.base_clip), &s.theta, kAttnIn, s.base_clip,
                          mode, nullptr);
  Tensor wq = weight_forward(s.w, s.scheme.weight_spec(1.0), &s.theta, kWq, 0.9, mode, nullptr);
  Tensor yq = matmul_nt(xq, wq);
  return mse(yq, s.y);
}

void gradcheck_grads(GradcheckSetup& s) {
  s.theta.zero_grads();
  ActOpCache ac;
  WeightOpCache wc;
  Tensor xq = act_forward(s.x, s.scheme.act_spec(s.base_clip), &s.theta, kAttnIn, s.base_clip,
                          QuantRounding::kSurrogate, &ac);
  Tensor wq = weight_forward(s.w, s.scheme.weight_spec(1.0), &s.theta, kWq, 0.9,
                             QuantRounding::kSurrogate, &wc);
  Tensor yq = matmul_nt(xq, wq);
  Tensor g_y = scale(sub(yq, s.y), 2.0 / static_cast<double>(yq.numel()));
  Tensor g_xq = matmul(g_y, wq);
  Tensor g_wq = matmul(transpose(g_y), xq);
  Tensor g_x = Tensor::zeros(s.x.shape());
  act_backward(s.x, s.theta, kAttnIn, ac, g_xq, g_x);
  weight_backward(s.w, s.theta, kWq, wc, g_wq);
}

FdReport run_gradcheck(uint64_t seed, const FdOptions& opt) {
  GradcheckSetup s = make_gradcheck_setup(seed);
  auto all_slots = trainable_slots(s.theta);
  std::vector<ParamSlot> slots;
  for (auto& sl : all_slots) {
    const bool used = sl.name.size() >= 3 && sl.name.substr(sl.name.size() - 3) == ".wq";
    const bool used_act =
        sl.name.size() >= 8 && sl.name.substr(sl.name.size() - 8) == ".attn_in";
    if (used || used_act) slots.push_back(sl);
  }
  auto loss_fn = [&]() { return gradcheck_loss(s, QuantRounding::kSurrogate); };
  auto grad_fn = [&]() { gradcheck_grads(s); };
  return finite_diff_check(slots, loss_fn, grad_fn, opt);
}

}  // namespace bisup
