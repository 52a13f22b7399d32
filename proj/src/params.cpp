#include "params.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace bisup {

const char* weight_name(int widx) {
  static const char* names[kNumWeights] = {"wq", "wk", "wv", "wo", "w_up", "w_down"};
  return names[widx];
}

const char* act_site_name(int sidx) {
  static const char* names[kNumActSites] = {"attn_in", "attn_out", "mlp_in", "mlp_mid"};
  return names[sidx];
}

namespace {

void zero_like(Tensor& t) { std::fill(t.data(), t.data() + t.numel(), 0.0); }

int64_t groups_for(int64_t in_dim, const QuantScheme& scheme) {
  const int64_t gs = scheme.group_size > 0 ? scheme.group_size : in_dim;
  if (in_dim % gs != 0) {
    throw ConfigError("group size " + std::to_string(gs) +
                      " does not divide dimension " + std::to_string(in_dim));
  }
  return in_dim / gs;
}

}  // namespace

void BisupParams::zero_grads() {
  for (auto& t : g_clip.weight) zero_like(t);
  for (auto& t : g_clip.act) zero_like(t);
  for (auto& t : g_smooth.s1_log) zero_like(t);
  for (auto& t : g_smooth.s2_log) zero_like(t);
  for (auto& t : g_lowrank.a) zero_like(t);
  for (auto& t : g_lowrank.b) zero_like(t);
}

BisupParams init_bisup_params(const std::array<std::vector<int64_t>, kNumWeights>& wshapes,
                              const QuantScheme& scheme, const BisupInit& init, Rng& rng) {
  BisupParams p;
  p.enable_clip = init.enable_clip;
  p.enable_smooth = init.enable_smooth;
  p.enable_lowrank = init.enable_lowrank;
  p.lowrank.rank = init.rank;
  p.lowrank.form = init.form;

  std::array<int64_t, kNumActSites> site_dim{};
  for (int w = 0; w < kNumWeights; ++w) {
    if (wshapes[w].size() != 2) throw ShapeError("weight shapes must be rank 2");
    const int64_t out = wshapes[w][0], in = wshapes[w][1];
    site_dim[kWeightSite[w]] = in;

    p.clip.weight[w] = Tensor::full({out, groups_for(in, scheme)}, init.weight_clip[w]);
    p.smooth.s2_log[w] = Tensor::zeros({in});
    p.lowrank.a[w] = Tensor::randn({out, init.rank}, rng, init.a_sigma);
    p.lowrank.b[w] = Tensor::zeros({init.rank, in});

    p.g_clip.weight[w] = Tensor::zeros(p.clip.weight[w].shape());
    p.g_smooth.s2_log[w] = Tensor::zeros({in});
    p.g_lowrank.a[w] = Tensor::zeros(p.lowrank.a[w].shape());
    p.g_lowrank.b[w] = Tensor::zeros(p.lowrank.b[w].shape());
  }
  for (int s = 0; s < kNumActSites; ++s) {
    p.clip.act[s] = Tensor::full({groups_for(site_dim[s], scheme)}, init.act_clip);
    p.smooth.s1_log[s] = Tensor::zeros({site_dim[s]});
    p.g_clip.act[s] = Tensor::zeros(p.clip.act[s].shape());
    p.g_smooth.s1_log[s] = Tensor::zeros({site_dim[s]});
  }
  return p;
}

std::vector<ParamSlot> trainable_slots(BisupParams& p) {
  std::vector<ParamSlot> slots;
  if (p.enable_clip) {
    for (int w = 0; w < kNumWeights; ++w) {
      slots.push_back({std::string("clip.") + weight_name(w), &p.clip.weight[w],
                       &p.g_clip.weight[w], 0.3, 1.0});
    }
    for (int s = 0; s < kNumActSites; ++s) {
      slots.push_back({std::string("clip.act.") + act_site_name(s), &p.clip.act[s],
                       &p.g_clip.act[s], 0.3, 1.0});
    }
  }
  if (p.enable_smooth) {
    for (int s = 0; s < kNumActSites; ++s) {
      slots.push_back({std::string("smooth.s1.") + act_site_name(s), &p.smooth.s1_log[s],
                       &p.g_smooth.s1_log[s]});
    }
    for (int w = 0; w < kNumWeights; ++w) {
      slots.push_back({std::string("smooth.s2.") + weight_name(w), &p.smooth.s2_log[w],
                       &p.g_smooth.s2_log[w]});
    }
  }
  if (p.enable_lowrank) {
    for (int w = 0; w < kNumWeights; ++w) {
      slots.push_back({std::string("lowrank.a.") + weight_name(w), &p.lowrank.a[w],
                       &p.g_lowrank.a[w]});
      slots.push_back({std::string("lowrank.b.") + weight_name(w), &p.lowrank.b[w],
                       &p.g_lowrank.b[w]});
    }
  }
  return slots;
}

Tensor sym_quant_forward(const Tensor& x, const QuantSpec& spec, const ClipView& clips,
                         QuantRounding mode, SymQuantCache* cache) {
  spec.validate();
  ensure_finite(x, "quantize input");
  const GroupLayout lo = make_layout(x.shape(), spec);
  const double qmin = static_cast<double>(spec.q_min());
  const double qmax = static_cast<double>(spec.q_max());
  const double levels = spec.level_count();
  const int64_t gpr = lo.groups_per_row();

  Tensor y(x.shape());
  if (cache != nullptr) {
    cache->layout = lo;
    cache->qmin = qmin;
    cache->qmax = qmax;
    cache->state.assign(static_cast<size_t>(x.numel()), 0);
    cache->kfac.assign(static_cast<size_t>(lo.total_groups()), 0.0);
    cache->clip.assign(static_cast<size_t>(lo.total_groups()), 1.0);
    cache->argmax.assign(static_cast<size_t>(lo.total_groups()), -1);
    cache->sign_max.assign(static_cast<size_t>(lo.total_groups()), 0.0);
  }

  const double* xd = x.data();
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      double m = 0.0;
      int64_t am = -1;
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double a = std::abs(xd[base + i]);
        if (a > m) {
          m = a;
          am = base + i;
        }
      }
      const double c = clips.at(r, g, gpr);
      const double scale = compute_scale_symmetric(m, spec.bits, c);
      if (cache != nullptr) {
        cache->kfac[gi] = m == 0.0 ? 0.0 : m / levels;
        cache->clip[gi] = c;
        cache->argmax[gi] = static_cast<int32_t>(am);
        cache->sign_max[gi] = am >= 0 ? (xd[am] > 0.0 ? 1.0 : -1.0) : 0.0;
      }
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double z = xd[base + i] / scale;
        const double zr = mode == QuantRounding::kHard ? round_half_away(z) : z;
        double q = zr;
        int8_t st = 0;
        if (zr < qmin) {
          q = qmin;
          st = -1;
        } else if (zr > qmax) {
          q = qmax;
          st = 1;
        }
        y[base + i] = q * scale;
        if (cache != nullptr) cache->state[static_cast<size_t>(base + i)] = st;
      }
    }
  }
  return y;
}

void sym_quant_backward(const SymQuantCache& cache, const Tensor& g_out,
                        Tensor& g_x_accum, const ClipGrad& g_clip) {
  const GroupLayout& lo = cache.layout;
  const int64_t gpr = lo.groups_per_row();
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      double t_clamped = 0.0;
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const int8_t st = cache.state[static_cast<size_t>(base + i)];
        if (st == 0) {
          g_x_accum[base + i] += g_out[base + i];
        } else {
          t_clamped += g_out[base + i] * (st < 0 ? cache.qmin : cache.qmax);
        }
      }
      if (t_clamped == 0.0 || cache.kfac[gi] == 0.0) continue;
      const double levels = cache.qmax;
      g_x_accum[cache.argmax[gi]] +=
          t_clamped * (cache.clip[gi] / levels) * cache.sign_max[gi];
      if (g_clip.per_group != nullptr) {
        g_clip.per_group[gi] += t_clamped * cache.kfac[gi];
      } else if (g_clip.per_col_group != nullptr) {
        g_clip.per_col_group[g] += t_clamped * cache.kfac[gi];
      }
    }
  }
}

Tensor asym_quant_forward(const Tensor& x, const QuantSpec& spec, QuantRounding mode,
                          AsymQuantCache* cache) {
  spec.validate();
  if (spec.symmetric) throw ConfigError("asym_quant_forward needs an asymmetric spec");
  ensure_finite(x, "quantize input");
  const GroupLayout lo = make_layout(x.shape(), spec);
  const double qmax = static_cast<double>(spec.q_max());
  const int64_t gpr = lo.groups_per_row();

  Tensor y(x.shape());
  if (cache != nullptr) {
    cache->layout = lo;
    cache->qmax = qmax;
    cache->state.assign(static_cast<size_t>(x.numel()), 0);
    cache->row_kind.assign(static_cast<size_t>(lo.total_groups()), 0);
    cache->argmin.assign(static_cast<size_t>(lo.total_groups()), -1);
    cache->argmax.assign(static_cast<size_t>(lo.total_groups()), -1);
  }

  const double* xd = x.data();
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      double mn = xd[base], mx = xd[base];
      int64_t ami = base, ama = base;
      for (int64_t i = 1; i < lo.group_size; ++i) {
        const double v = xd[base + i];
        if (v < mn) {
          mn = v;
          ami = base + i;
        }
        if (v > mx) {
          mx = v;
          ama = base + i;
        }
      }
      if (cache != nullptr) {
        cache->argmin[gi] = static_cast<int32_t>(ami);
        cache->argmax[gi] = static_cast<int32_t>(ama);
      }
      if (mx == mn) {
        // Constant group dequantizes exactly; gradient is the identity.
        for (int64_t i = 0; i < lo.group_size; ++i) y[base + i] = mx;
        if (cache != nullptr) cache->row_kind[gi] = 3;
        continue;
      }
      // Range extended to cover zero, matching the quantize_asym kernel. With
      // the zero point kept continuous, the surrogate reduces to an exact
      // clamp of x into [lo_ext, hi_ext].
      const double lo_ext = std::min(mn, 0.0);
      const double hi_ext = std::max(mx, 0.0);
      const double scale = (hi_ext - lo_ext) / qmax;
      const double zp_raw = -lo_ext / scale;
      const double zp_used =
          mode == QuantRounding::kHard ? round_half_away(zp_raw) : zp_raw;
      if (cache != nullptr) {
        if (mn >= 0.0) {
          cache->row_kind[gi] = 1;
        } else if (mx <= 0.0) {
          cache->row_kind[gi] = 2;
        } else {
          cache->row_kind[gi] = 0;
        }
      }
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double z = xd[base + i] / scale;
        const double zr =
            mode == QuantRounding::kHard ? round_half_away(z) + zp_used : z + zp_used;
        double q = zr;
        int8_t st = 0;
        if (zr < 0.0) {
          q = 0.0;
          st = -1;
        } else if (zr > qmax) {
          q = qmax;
          st = 1;
        }
        y[base + i] = (q - zp_used) * scale;
        if (cache != nullptr) cache->state[static_cast<size_t>(base + i)] = st;
      }
    }
  }
  return y;
}

void asym_quant_backward(const AsymQuantCache& cache, const Tensor& g_out,
                         Tensor& g_x_accum) {
  const GroupLayout& lo = cache.layout;
  const int64_t gpr = lo.groups_per_row();
  for (int64_t r = 0; r < lo.rows; ++r) {
    for (int64_t g = 0; g < gpr; ++g) {
      const int64_t base = r * lo.row_len + g * lo.group_size;
      const int64_t gi = r * gpr + g;
      const int8_t kind = cache.row_kind[gi];
      const int64_t ami = cache.argmin[gi], ama = cache.argmax[gi];
      for (int64_t i = 0; i < lo.group_size; ++i) {
        const double gv = g_out[base + i];
        if (gv == 0.0) continue;
        const int8_t st = cache.state[static_cast<size_t>(base + i)];
        if (kind == 3 || st == 0) {
          g_x_accum[base + i] += gv;
          continue;
        }
        // Clamped element: the surrogate output is the live range edge, lo_ext
        // or hi_ext. A zero edge (range extension) carries no gradient.
        if (st > 0) {
          if (kind != 2) g_x_accum[ama] += gv;
        } else {
          if (kind != 1) g_x_accum[ami] += gv;
        }
      }
    }
  }
}

Tensor exp_vec(const Tensor& v) {
  Tensor y(v.shape());
  for (int64_t i = 0; i < v.numel(); ++i) y[i] = std::exp(v[i]);
  return y;
}

Tensor scale_columns(const Tensor& x, const Tensor& s) {
  const int64_t m = x.rows(), n = x.cols();
  if (s.rank() != 1 || s.numel() != n) {
    throw ShapeError("scale_columns factor shape mismatch: " + s.shape_str() +
                     " for " + x.shape_str());
  }
  Tensor y({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    double* yi = y.data() + i * n;
    for (int64_t j = 0; j < n; ++j) yi[j] = xi[j] * s[j];
  }
  return y;
}

void scale_columns_backward(const Tensor& x, const Tensor& s, const Tensor& g_out,
                            Tensor* g_x_accum, Tensor* g_s_accum) {
  const int64_t m = x.rows(), n = x.cols();
  for (int64_t i = 0; i < m; ++i) {
    const double* xi = x.data() + i * n;
    const double* gi = g_out.data() + i * n;
    for (int64_t j = 0; j < n; ++j) {
      if (g_x_accum != nullptr) (*g_x_accum)[i * n + j] += gi[j] * s[j];
      if (g_s_accum != nullptr) (*g_s_accum)[j] += gi[j] * xi[j];
    }
  }
}

Tensor weight_forward(const Tensor& w, const QuantSpec& spec, const BisupParams* theta,
                      int widx, double scalar_clip, QuantRounding mode,
                      WeightOpCache* cache) {
  if (theta == nullptr) {
    ClipView cv;
    cv.scalar = scalar_clip;
    return sym_quant_forward(w, spec, cv, mode, cache != nullptr ? &cache->qc : nullptr);
  }

  const bool smooth = theta->enable_smooth;
  const bool lowrank = theta->enable_lowrank;
  const bool slrec = theta->lowrank.form == LowRankForm::kSlrec;

  Tensor s2;
  Tensor w_s = smooth ? scale_columns(w, s2 = exp_vec(theta->smooth.s2_log[widx])) : w;
  Tensor m = w_s;
  Tensor ab;
  if (lowrank) {
    ab = matmul(theta->lowrank.a[widx], theta->lowrank.b[widx]);
    if (slrec) {
      m = Tensor(w_s.shape());
      for (int64_t i = 0; i < m.numel(); ++i) m[i] = w_s[i] * (1.0 + ab[i]);
    } else {
      m = add(w_s, ab);
    }
  }

  ClipView cv;
  cv.per_group = theta->clip.weight[widx].data();
  Tensor y = sym_quant_forward(m, spec, cv, mode, cache != nullptr ? &cache->qc : nullptr);
  if (cache != nullptr) {
    cache->smooth = smooth;
    cache->lowrank = lowrank;
    cache->slrec = slrec;
    cache->w_s = std::move(w_s);
    cache->ab = std::move(ab);
    cache->s2 = std::move(s2);
  }
  return y;
}

void weight_backward(const Tensor& w, BisupParams& theta, int widx,
                     const WeightOpCache& cache, const Tensor& g_out) {
  Tensor g_m(w.shape());
  ClipGrad cg;
  cg.per_group = theta.g_clip.weight[widx].data();
  sym_quant_backward(cache.qc, g_out, g_m, cg);

  Tensor g_ws = g_m;
  if (cache.lowrank) {
    Tensor g_ab(cache.ab.shape());
    if (cache.slrec) {
      for (int64_t i = 0; i < g_m.numel(); ++i) {
        g_ws[i] = g_m[i] * (1.0 + cache.ab[i]);
        g_ab[i] = g_m[i] * cache.w_s[i];
      }
    } else {
      g_ab = g_m;  // g_ws already equals g_m
    }
    add_inplace(theta.g_lowrank.a[widx], matmul_nt(g_ab, theta.lowrank.b[widx]));
    add_inplace(theta.g_lowrank.b[widx], matmul(transpose(theta.lowrank.a[widx]), g_ab));
  }
  if (cache.smooth) {
    Tensor g_s(cache.s2.shape());
    scale_columns_backward(w, cache.s2, g_ws, nullptr, &g_s);
    Tensor& g_log = theta.g_smooth.s2_log[widx];
    for (int64_t j = 0; j < g_log.numel(); ++j) g_log[j] += g_s[j] * cache.s2[j];
  }
}

Tensor act_forward(const Tensor& x, const QuantSpec& spec, const BisupParams* theta,
                   int site, double scalar_clip, QuantRounding mode, ActOpCache* cache) {
  if (theta == nullptr) {
    ClipView cv;
    cv.scalar = scalar_clip;
    return sym_quant_forward(x, spec, cv, mode, cache != nullptr ? &cache->qc : nullptr);
  }
  const bool smooth = theta->enable_smooth;
  Tensor s1;
  Tensor x_s = smooth ? scale_columns(x, s1 = exp_vec(theta->smooth.s1_log[site])) : x;
  ClipView cv;
  cv.per_col_group = theta->clip.act[site].data();
  Tensor y = sym_quant_forward(x_s, spec, cv, mode, cache != nullptr ? &cache->qc : nullptr);
  if (cache != nullptr) {
    cache->smooth = smooth;
    cache->x_s = std::move(x_s);
    cache->s1 = std::move(s1);
  }
  return y;
}

void act_backward(const Tensor& x, BisupParams& theta, int site, const ActOpCache& cache,
                  const Tensor& g_out, Tensor& g_x_accum) {
  Tensor g_xs(x.shape());
  ClipGrad cg;
  cg.per_col_group = theta.g_clip.act[site].data();
  sym_quant_backward(cache.qc, g_out, g_xs, cg);

  if (cache.smooth) {
    Tensor g_s(cache.s1.shape());
    scale_columns_backward(x, cache.s1, g_xs, &g_x_accum, &g_s);
    Tensor& g_log = theta.g_smooth.s1_log[site];
    for (int64_t j = 0; j < g_log.numel(); ++j) g_log[j] += g_s[j] * cache.s1[j];
  } else {
    add_inplace(g_x_accum, g_xs);
  }
}

std::pair<Tensor, Tensor> lorc_svd_oracle(const Tensor& w, const QuantSpec& spec,
                                          int64_t r) {
  const Tensor e = sub(w, dequantize(quantize(w, spec)));
  const SvdResult svd = svd_truncated(e, r);
  Tensor u_hat(svd.u.shape());
  for (int64_t i = 0; i < u_hat.rows(); ++i) {
    for (int64_t j = 0; j < u_hat.cols(); ++j) {
      u_hat.at(i, j) = svd.u.at(i, j) * svd.singular_values[static_cast<size_t>(j)];
    }
  }
  return {std::move(u_hat), svd.v_t};
}

}  // namespace bisup
