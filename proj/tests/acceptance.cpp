// Acceptance suite: one criterion per function, one PASS/FAIL line each.
// Run with no arguments for all criteria, or with a single criterion number.
#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "calibrate.hpp"
#include "errors.hpp"
#include "params.hpp"
#include "pipeline.hpp"
#include "quant.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "transformer.hpp"

using namespace bisup;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list args;
  va_start(args, f);
  std::vsnprintf(buf, sizeof buf, f, args);
  va_end(args);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * a.numel()) == 0;
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

// 1. Quantization kernel invariants.
Outcome criterion_kernel() {
  Rng rng(11);
  int64_t codes_checked = 0;
  for (int bits : {2, 3, 4, 8}) {
    Tensor x = Tensor::randn({6, 32}, rng);
    for (double clip : {1.0, 0.9, 0.7}) {
      QuantSpec spec;
      spec.bits = bits;
      spec.symmetric = true;
      spec.granularity = Granularity::kPerToken;
      spec.clip = clip;
      QuantizedTensor q = quantize(x, spec);
      Tensor deq = dequantize(q);
      for (int64_t r = 0; r < 6; ++r) {
        const double scale = q.scales[static_cast<size_t>(r)];
        for (int64_t c = 0; c < 32; ++c) {
          const int16_t code = q.codes[static_cast<size_t>(r * 32 + c)];
          ++codes_checked;
          if (code < spec.q_min() || code > spec.q_max())
            return {false, fmt("code %d outside [%lld, %lld]", code,
                               (long long)spec.q_min(), (long long)spec.q_max())};
          if (clip == 1.0 && code == spec.q_min())
            return {false, fmt("clip=1 produced the unreachable code %d at %d bits",
                               code, bits)};
          if (clip == 1.0) {
            const double err = std::abs(deq.at(r, c) - x.at(r, c));
            if (err > 0.5 * scale * (1.0 + 1e-12))
              return {false, fmt("recon err %.3g > half-scale %.3g at %d bits", err,
                                 0.5 * scale, bits)};
          }
        }
      }
    }
  }

  QuantSpec asym;
  asym.bits = 4;
  asym.symmetric = false;
  asym.granularity = Granularity::kPerToken;
  Tensor cst({5, 8});
  const double vals[5] = {3.25, -1.5, 0.0, 7.0, -0.125};
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t c = 0; c < 8; ++c) cst.at(r, c) = vals[r];
  Tensor cdeq = dequantize(quantize(cst, asym));
  for (int64_t i = 0; i < cst.numel(); ++i)
    if (cdeq[i] != cst[i])
      return {false, fmt("constant group not exact: %.17g vs %.17g", cdeq[i], cst[i])};

  Tensor w = Tensor::randn({8, 24}, rng);
  QuantSpec per_row;
  per_row.bits = 3;
  per_row.granularity = Granularity::kPerChannel;
  QuantSpec grouped = per_row;
  grouped.granularity = Granularity::kGroup;
  grouped.group_size = 24;
  QuantizedTensor qa = quantize(w, per_row);
  QuantizedTensor qb = quantize(w, grouped);
  if (qa.codes != qb.codes || qa.scales != qb.scales)
    return {false, "full-row groups disagree with per-channel quantization"};
  if (!bit_equal(dequantize(qa), dequantize(qb)))
    return {false, "nesting dequantization mismatch"};

  return {true, fmt("%lld codes in range, recon <= scale/2 at clip 1, constants exact, "
                    "group nesting bit-equal",
                    (long long)codes_checked)};
}

// 2. Analytic gradients vs central finite differences.
Outcome criterion_gradcheck() {
  FdOptions opt;
  FdReport rep = run_gradcheck(1, opt);
  for (const auto& e : rep.excluded)
    if (e.reason.empty()) return {false, "exclusion without a diagnosis"};
  const bool ok = rep.pass(1e-4) && rep.checked >= 50;
  return {ok, fmt("checked=%lld excluded=%lld max_rel_err=%.3g (tol 1e-4)",
                  (long long)rep.checked, (long long)rep.excluded.size(), rep.max_rel_err)};
}

// 3. Fresh parameters reproduce the baseline quantized forward bit-exactly.
Outcome criterion_neutrality() {
  Rng root(21);
  ModelConfig mc;
  Model m = synth_model(mc, root.fork("model").seed());
  const QuantScheme scheme = parse_quant_scheme("W3A3-g16");
  Dataset data = make_dataset(mc.vocab, 21, 0, 0, 4, 24);

  QuantizedModel base = make_rtn_model(m, scheme);
  QuantizedModel fresh = make_rtn_model(m, scheme);
  for (int64_t l = 0; l < mc.n_layers; ++l) {
    std::array<std::vector<int64_t>, kNumWeights> shapes;
    for (int w = 0; w < kNumWeights; ++w)
      shapes[w] = m.layers[l].weight(static_cast<WeightIdx>(w)).shape();
    BisupInit bi;
    bi.weight_clip = fresh.base_clips[static_cast<size_t>(l)];
    Rng fr = root.fork("init." + std::to_string(l));
    fresh.thetas.push_back(init_bisup_params(shapes, scheme, bi, fr));
  }
  for (const auto& seq : data.eval) {
    Tensor a = qmodel_forward(base, seq);
    Tensor b = qmodel_forward(fresh, seq);
    if (!bit_equal(a, b)) return {false, "fresh parameters changed the forward"};
  }
  return {true, fmt("%zu sequences bit-exact with fresh clip/smooth/low-rank parameters",
                    data.eval.size())};
}

// 4. Exact-inverse smoothing preserves the product.
Outcome criterion_smoothing() {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = 8 + (trial % 3) * 8;
    const int64_t in = 12 + (trial % 5) * 4;
    const int64_t out = 6 + (trial % 4) * 6;
    Tensor x = Tensor::randn({n, in}, rng);
    Tensor w = Tensor::randn({out, in}, rng);
    Tensor s1({in}), s2({in});
    for (int64_t j = 0; j < in; ++j) {
      s1[j] = std::exp(0.5 * rng.normal());
      s2[j] = 1.0 / s1[j];
    }
    Tensor y0 = matmul_nt(x, w);
    Tensor y1 = matmul_nt(scale_columns(x, s1), scale_columns(w, s2));
    for (int64_t i = 0; i < y0.numel(); ++i)
      worst = std::max(worst, std::abs(y1[i] - y0[i]));
  }
  return {worst <= 1e-10, fmt("100 instances, max |X.W - (X s1).(s2 W)| = %.3g (tol 1e-10)",
                              worst)};
}

// 5. SVD compensation oracle: monotone residual, exact at full rank.
Outcome criterion_svd() {
  Rng rng(41);
  Tensor w = Tensor::randn({16, 24}, rng);
  QuantSpec spec = parse_quant_scheme("W3A3-g8").weight_spec(0.9);
  Tensor e = sub(w, dequantize(quantize(w, spec)));
  double prev = frob_norm(e);
  const double full_start = prev;
  for (int64_t r = 1; r <= 16; ++r) {
    auto [u, v] = lorc_svd_oracle(w, spec, r);
    const double res = frob_norm(sub(e, matmul(u, v)));
    if (res > prev * (1.0 + 1e-12))
      return {false, fmt("residual rose at rank %lld: %.6g -> %.6g", (long long)r, prev, res)};
    prev = res;
  }
  const bool exact = prev <= 1e-9;
  return {exact, fmt("residual %.3g -> %.3g monotone over ranks 1..16, full rank <= 1e-9",
                     full_start, prev)};
}

// 6. Calibration shrinks the final-layer eval error by >= 30% in the median.
Outcome criterion_effectiveness() {
  const QuantScheme scheme = parse_quant_scheme("W3A3-g16");
  std::vector<double> rtn_mse, bisup_mse;
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng root(seed);
    ModelConfig mc;
    Model m = synth_model(mc, root.fork("model").seed());
    Dataset data = make_dataset(mc.vocab, seed, 8, 32, 32, 32);
    QuantizedModel rtn = make_rtn_model(m, scheme);
    rtn_mse.push_back(trace_propagation(rtn, data.eval).layer_mse.back());
    CalibConfig cc;
    CalibrationOutput co =
        calibrate_model(m, scheme, data.calib, data.prompt, cc, root.fork("calib").seed());
    bisup_mse.push_back(trace_propagation(co.qm, data.eval).layer_mse.back());
  }
  const double mr = median(rtn_mse);
  const double mb = median(bisup_mse);
  return {mb <= 0.7 * mr,
          fmt("20 seeds: median rtn=%.4f bisup=%.4f ratio=%.3f (need <= 0.7)", mr, mb,
              mb / mr)};
}

// 7. Ablation ladder: the full stack beats plain rtn in the median.
Outcome criterion_ablation() {
  static const char* kLabels[5] = {"rtn", "rtn+clip", "rtn+clip+smooth",
                                   "rtn+clip+smooth+lowrank",
                                   "rtn+clip+smooth+lowrank+mixed_kv"};
  std::vector<double> first, last;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    ordered_json j;
    j["seed"] = seed;
    RunResult r = run_command(parse_run_config("ablate", j));
    const auto& rows = r.report["report"]["rows"];
    if (rows.size() != 5) return {false, "ladder does not have 5 rows"};
    for (int i = 0; i < 5; ++i)
      if (rows[i]["label"] != kLabels[i])
        return {false, fmt("row %d label %s", i, rows[i]["label"].dump().c_str())};
    first.push_back(rows[0]["final_layer_mse_eval"].get<double>());
    last.push_back(rows[4]["final_layer_mse_eval"].get<double>());
  }
  const double mf = median(first);
  const double ml = median(last);
  return {ml < mf, fmt("10 seeds: median rtn=%.4f full-stack=%.4f, all 5 rungs exercised",
                       mf, ml)};
}

// 8. Full-precision first-token cache beats uniform quantization when the
// model attends to the first token.
Outcome criterion_prompt_kv() {
  const QuantScheme scheme = parse_quant_scheme("W3A3-g16");
  std::vector<double> b0s, b1s;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng root(seed);
    ModelConfig mc;
    Model m = make_first_token_model(mc, root.fork("model").seed());
    Dataset data = make_dataset(mc.vocab, seed, 1, 8, 8, 24);
    QuantizedModel b0 = make_rtn_model(m, scheme, 0.9, 0, {});
    QuantizedModel b1 = make_rtn_model(m, scheme, 0.9, 1, data.prompt);
    b0s.push_back(trace_propagation(b0, data.eval).layer_mse.back());
    b1s.push_back(trace_propagation(b1, data.eval).layer_mse.back());
  }
  const double m0 = median(b0s);
  const double m1 = median(b1s);
  return {m1 < m0, fmt("10 seeds: median boundary0=%.4f boundary1=%.4f", m0, m1)};
}

// 9. The anchored low-rank form stays stable at a learning rate where the
// plain additive form degrades. At gentler rates both train cleanly and the
// comparison is a toss-up; lr 0.02 is where the stabilization shows.
Outcome criterion_slrec() {
  const QuantScheme scheme = parse_quant_scheme("W3A3-g16");
  const double lr = 0.02;
  std::vector<double> slrec, lrec;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng root(seed);
    ModelConfig mc;
    mc.n_layers = 1;
    Model m = synth_model(mc, root.fork("model").seed());
    Dataset data = make_dataset(mc.vocab, seed, 8, 32, 8, 32);
    for (int f = 0; f < 2; ++f) {
      CalibConfig cc;
      cc.lr = lr;
      cc.form = f == 0 ? LowRankForm::kSlrec : LowRankForm::kLrec;
      double fin = INFINITY;
      try {
        fin = calibrate_model(m, scheme, data.calib, data.prompt, cc,
                              root.fork("calib").seed())
                  .result.layers[0]
                  .final_loss;
      } catch (const NumericError&) {
      }
      (f == 0 ? slrec : lrec).push_back(fin);
    }
  }
  const double ms = median(slrec);
  const double ml = median(lrec);
  return {ms <= ml,
          fmt("10 seeds at lr %.3g: median slrec=%.4f lrec=%.4f", lr, ms, ml)};
}

// 10. Identical configs produce byte-identical deterministic outputs.
Outcome criterion_reproducibility() {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "bisup_acceptance_repro";
  fs::remove_all(dir);
  ordered_json j;
  j["d_model"] = 16;
  j["n_heads"] = 2;
  j["d_hidden"] = 32;
  j["vocab"] = 24;
  j["samples"] = 4;
  j["eval_samples"] = 2;
  j["seq_len"] = 10;
  j["prompt_len"] = 2;
  j["epochs"] = 1;
  j["rank"] = 2;
  j["seed"] = 13;
  j["spec"] = "W4A4";
  j["format"] = "csv";
  j["out"] = (dir / "cal.csv").string();
  j["model_out"] = (dir / "cal.bsmd").string();
  RunConfig cfg = parse_run_config("calibrate", j);

  RunResult r1 = run_command(cfg);
  const std::string csv1 = slurp((dir / "cal.csv").string());
  const std::string bsmd1 = slurp((dir / "cal.bsmd").string());
  RunResult r2 = run_command(cfg);
  const std::string csv2 = slurp((dir / "cal.csv").string());
  const std::string bsmd2 = slurp((dir / "cal.bsmd").string());

  ordered_json t;
  t["d_model"] = 16;
  t["n_heads"] = 2;
  t["d_hidden"] = 32;
  t["vocab"] = 24;
  t["samples"] = 4;
  t["eval_samples"] = 2;
  t["seq_len"] = 10;
  t["prompt_len"] = 2;
  t["seed"] = 13;
  RunConfig tcfg = parse_run_config("trace", t);
  RunResult t1 = run_command(tcfg);
  RunResult t2 = run_command(tcfg);
  fs::remove_all(dir);

  if (csv1.empty() || csv1 != csv2) return {false, "csv reports differ between runs"};
  if (bsmd1.empty() || bsmd1 != bsmd2) return {false, "model artifacts differ between runs"};
  if (report_deterministic_region(r1.report) != report_deterministic_region(r2.report))
    return {false, "calibrate report regions differ between runs"};
  if (r1.report["meta"]["content_hash"] != r2.report["meta"]["content_hash"])
    return {false, "content hashes differ between runs"};
  if (report_deterministic_region(t1.report) != report_deterministic_region(t2.report))
    return {false, "trace report regions differ between runs"};
  return {true,
          "csv, model artifact, and report regions byte-identical across repeat runs "
          "(meta timing excluded)"};
}

struct Criterion {
  int number;
  const char* name;
  Outcome (*fn)();
};

const Criterion kCriteria[] = {
    {1, "kernel invariants", criterion_kernel},
    {2, "gradient check", criterion_gradcheck},
    {3, "init neutrality", criterion_neutrality},
    {4, "smoothing invariance", criterion_smoothing},
    {5, "svd compensation oracle", criterion_svd},
    {6, "calibration effectiveness", criterion_effectiveness},
    {7, "ablation trend", criterion_ablation},
    {8, "prompt mixed precision", criterion_prompt_kv},
    {9, "slrec convergence", criterion_slrec},
    {10, "reproducibility", criterion_reproducibility},
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  if (argc > 1) {
    only = std::atoi(argv[1]);
    if (only < 1 || only > 10) {
      std::fprintf(stderr, "usage: %s [criterion 1-10]\n", argv[0]);
      return 2;
    }
  }
  int failures = 0;
  for (const auto& c : kCriteria) {
    if (only != 0 && c.number != only) continue;
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d [%s]: %s %s\n", c.number, c.name, o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
