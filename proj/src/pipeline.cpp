#include "pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <thread>
#include <utility>

#include "errors.hpp"
#include "rng.hpp"

namespace bisup {

const char* version_string() { return "0.1.0"; }

// ---- config ------------------------------------------------------------------

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.n_layers = n_layers;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.d_hidden = d_hidden;
  m.vocab = vocab;
  m.rms_eps = rms_eps;
  return m;
}

CalibConfig RunConfig::calib_config() const {
  CalibConfig c;
  c.epochs = epochs;
  c.lr = lr;
  c.batch_size = batch_size;
  c.weight_decay = weight_decay;
  c.rank = rank;
  c.form = form == "lrec" ? LowRankForm::kLrec : LowRankForm::kSlrec;
  c.enable_clip = enable_clip;
  c.enable_smooth = enable_smooth;
  c.enable_lowrank = enable_lowrank;
  c.act_clip = act_clip;
  return c;
}

void RunConfig::validate() const {
  static const std::vector<std::string> kCommands = {"synth",  "calibrate", "trace",
                                                     "ablate", "sweep",     "gradcheck"};
  if (std::find(kCommands.begin(), kCommands.end(), command) == kCommands.end())
    throw ConfigError("unknown command: " + command);
  parse_quant_scheme(spec);
  if (format != "json" && format != "csv")
    throw ConfigError("format must be \"json\" or \"csv\"");
  if (format == "csv" && (command == "synth" || command == "gradcheck"))
    throw ConfigError("csv format is only available for tabular commands");
  if (preprocess != "none")
    throw ConfigError("unknown preprocess hook: " + preprocess + " (available: none)");
  if (form != "slrec" && form != "lrec")
    throw ConfigError("form must be \"slrec\" or \"lrec\"");
  model_config().validate();
  calib_config().validate();
  if (samples < 1) throw ConfigError("samples must be >= 1");
  if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
  if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
  if (prompt_len < 0) throw ConfigError("prompt_len must be >= 0");
  if (prompt_len > 0 && seq_len <= prompt_len)
    throw ConfigError("seq_len must exceed prompt_len");
  auto check_axis = [](const std::vector<int64_t>& axis, const char* name, int64_t lo) {
    if (axis.empty()) throw ConfigError(std::string(name) + " must be non-empty");
    for (int64_t v : axis)
      if (v < lo) throw ConfigError(std::string(name) + " has an out-of-range value");
  };
  check_axis(samples_axis, "samples_axis", 1);
  check_axis(epochs_axis, "epochs_axis", 0);
  check_axis(rank_axis, "rank_axis", 1);
  if (!(fd_h > 0.0)) throw ConfigError("fd_h must be positive");
  if (!(fd_tol > 0.0)) throw ConfigError("fd_tol must be positive");
  if (fd_max_coords < 1) throw ConfigError("fd_max_coords must be >= 1");
  if (command == "synth" && out.empty()) throw ConfigError("synth requires an output path");
}

RunConfig parse_run_config(const std::string& command, const ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  c.command = command;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "command") {
        if (val.get<std::string>() != command)
          throw ConfigError("config command \"" + val.get<std::string>() +
                            "\" does not match the invoked command \"" + command + "\"");
      } else if (key == "spec") {
        c.spec = val.get<std::string>();
      } else if (key == "seed") {
        c.seed = val.get<uint64_t>();
      } else if (key == "model") {
        c.model = val.get<std::string>();
      } else if (key == "out") {
        c.out = val.get<std::string>();
      } else if (key == "model_out") {
        c.model_out = val.get<std::string>();
      } else if (key == "format") {
        c.format = val.get<std::string>();
      } else if (key == "d_model") {
        c.d_model = val.get<int64_t>();
      } else if (key == "n_layers") {
        c.n_layers = val.get<int64_t>();
      } else if (key == "n_heads") {
        c.n_heads = val.get<int64_t>();
      } else if (key == "d_hidden") {
        c.d_hidden = val.get<int64_t>();
      } else if (key == "vocab") {
        c.vocab = val.get<int64_t>();
      } else if (key == "rms_eps") {
        c.rms_eps = val.get<double>();
      } else if (key == "epochs") {
        c.epochs = val.get<int64_t>();
      } else if (key == "lr") {
        c.lr = val.get<double>();
      } else if (key == "batch_size") {
        c.batch_size = val.get<int64_t>();
      } else if (key == "weight_decay") {
        c.weight_decay = val.get<double>();
      } else if (key == "rank") {
        c.rank = val.get<int64_t>();
      } else if (key == "form") {
        c.form = val.get<std::string>();
      } else if (key == "enable_clip") {
        c.enable_clip = val.get<bool>();
      } else if (key == "enable_smooth") {
        c.enable_smooth = val.get<bool>();
      } else if (key == "enable_lowrank") {
        c.enable_lowrank = val.get<bool>();
      } else if (key == "act_clip") {
        c.act_clip = val.get<double>();
      } else if (key == "preprocess") {
        c.preprocess = val.get<std::string>();
      } else if (key == "samples") {
        c.samples = val.get<int64_t>();
      } else if (key == "eval_samples") {
        c.eval_samples = val.get<int64_t>();
      } else if (key == "seq_len") {
        c.seq_len = val.get<int64_t>();
      } else if (key == "prompt_len") {
        c.prompt_len = val.get<int64_t>();
      } else if (key == "samples_axis") {
        c.samples_axis = val.get<std::vector<int64_t>>();
      } else if (key == "epochs_axis") {
        c.epochs_axis = val.get<std::vector<int64_t>>();
      } else if (key == "rank_axis") {
        c.rank_axis = val.get<std::vector<int64_t>>();
      } else if (key == "full_axes") {
        c.full_axes = val.get<bool>();
      } else if (key == "fd_h") {
        c.fd_h = val.get<double>();
      } else if (key == "fd_tol") {
        c.fd_tol = val.get<double>();
      } else if (key == "fd_max_coords") {
        c.fd_max_coords = val.get<int64_t>();
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("bad value for config key: " + key);
    }
  }
  c.validate();
  return c;
}

ordered_json run_config_to_json(const RunConfig& c) {
  ordered_json j;
  j["command"] = c.command;
  j["spec"] = c.spec;
  j["seed"] = c.seed;
  j["model"] = c.model;
  j["out"] = c.out;
  j["model_out"] = c.model_out;
  j["format"] = c.format;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_hidden"] = c.d_hidden;
  j["vocab"] = c.vocab;
  j["rms_eps"] = c.rms_eps;
  j["epochs"] = c.epochs;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["weight_decay"] = c.weight_decay;
  j["rank"] = c.rank;
  j["form"] = c.form;
  j["enable_clip"] = c.enable_clip;
  j["enable_smooth"] = c.enable_smooth;
  j["enable_lowrank"] = c.enable_lowrank;
  j["act_clip"] = c.act_clip;
  j["preprocess"] = c.preprocess;
  j["samples"] = c.samples;
  j["eval_samples"] = c.eval_samples;
  j["seq_len"] = c.seq_len;
  j["prompt_len"] = c.prompt_len;
  j["samples_axis"] = c.samples_axis;
  j["epochs_axis"] = c.epochs_axis;
  j["rank_axis"] = c.rank_axis;
  j["full_axes"] = c.full_axes;
  j["fd_h"] = c.fd_h;
  j["fd_tol"] = c.fd_tol;
  j["fd_max_coords"] = c.fd_max_coords;
  return j;
}

// ---- datasets ----------------------------------------------------------------------

Dataset make_dataset(int64_t vocab, uint64_t seed, int64_t prompt_len, int64_t n_calib,
                     int64_t n_eval, int64_t seq_len) {
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (prompt_len >= seq_len && prompt_len > 0)
    throw ConfigError("seq_len must exceed prompt_len");
  Dataset d;
  Rng root(seed);
  if (prompt_len > 0) {
    d.prompt.push_back(0);
    Rng pr = root.fork("data.prompt");
    for (int64_t i = 1; i < prompt_len; ++i)
      d.prompt.push_back(static_cast<int32_t>(pr.uniform_int(0, vocab - 1)));
  }
  auto gen = [&](const char* tag, int64_t n, std::vector<std::vector<int32_t>>& out) {
    for (int64_t i = 0; i < n; ++i) {
      std::vector<int32_t> s = d.prompt;
      Rng sr = root.fork(std::string("data.") + tag + "." + std::to_string(i));
      while (static_cast<int64_t>(s.size()) < seq_len)
        s.push_back(static_cast<int32_t>(sr.uniform_int(0, vocab - 1)));
      out.push_back(std::move(s));
    }
  };
  gen("calib", n_calib, d.calib);
  gen("eval", n_eval, d.eval);
  return d;
}

// ---- parallelism ----------------------------------------------------------------------

namespace {

int64_t thread_budget() {
  if (const char* env = std::getenv("BISUP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw ConfigError("BISUP_THREADS must be a positive integer");
    return static_cast<int64_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int64_t>(hw);
}

}  // namespace

void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  const int64_t workers = std::min<int64_t>(thread_budget(), n);
  if (workers <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int64_t w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- report plumbing ---------------------------------------------------------------------

uint64_t fnv1a64_bytes(const std::string& bytes) { return fnv1a64(bytes); }

std::string report_deterministic_region(const ordered_json& report) {
  ordered_json region = report;
  region.erase("meta");
  return region.dump(2);
}

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string iso_utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  try {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("cannot create output directory: ") + e.what());
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << content;
  if (!os) throw IoError("write failed: " + path);
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

std::string csv_row(const std::vector<std::string>& cells) {
  std::string row;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i) row += ",";
    row += cells[i];
  }
  row += "\n";
  return row;
}

std::string report_to_csv(const std::string& command, const ordered_json& body) {
  std::string csv;
  auto num = [](const ordered_json& v) {
    return v.is_null() ? std::string() : fmt_double(v.get<double>());
  };
  if (command == "calibrate") {
    csv += csv_row({"layer", "initial_loss", "final_loss", "reverted", "restarts", "lr_used",
                    "steps"});
    for (const auto& l : body.at("layers"))
      csv += csv_row({std::to_string(l.at("layer").get<int64_t>()), num(l.at("initial_loss")),
                      num(l.at("final_loss")),
                      l.at("reverted").get<bool>() ? std::string("1") : std::string("0"),
                      std::to_string(l.at("restarts").get<int64_t>()), num(l.at("lr_used")),
                      std::to_string(l.at("steps").get<int64_t>())});
  } else if (command == "trace") {
    csv += csv_row({"layer", "baseline_calib", "bisup_calib", "suppression_calib",
                    "baseline_eval", "bisup_eval", "suppression_eval"});
    for (const auto& l : body.at("layers"))
      csv += csv_row({std::to_string(l.at("layer").get<int64_t>()), num(l.at("baseline_calib")),
                      num(l.at("bisup_calib")), num(l.at("suppression_calib")),
                      num(l.at("baseline_eval")), num(l.at("bisup_eval")),
                      num(l.at("suppression_eval"))});
  } else if (command == "ablate") {
    csv += csv_row({"row", "label", "boundary", "calib_loss", "final_layer_mse_calib",
                    "final_layer_mse_eval"});
    for (const auto& r : body.at("rows"))
      csv += csv_row({std::to_string(r.at("row").get<int64_t>()),
                      r.at("label").get<std::string>(),
                      std::to_string(r.at("boundary").get<int64_t>()), num(r.at("calib_loss")),
                      num(r.at("final_layer_mse_calib")), num(r.at("final_layer_mse_eval"))});
  } else if (command == "sweep") {
    csv += csv_row({"samples", "epochs", "rank", "mean_final_loss", "final_layer_mse_eval"});
    for (const auto& c : body.at("cells"))
      csv += csv_row({std::to_string(c.at("samples").get<int64_t>()),
                      std::to_string(c.at("epochs").get<int64_t>()),
                      std::to_string(c.at("rank").get<int64_t>()), num(c.at("mean_final_loss")),
                      num(c.at("final_layer_mse_eval"))});
  } else {
    throw ConfigError("csv format is only available for tabular commands");
  }
  return csv;
}

struct CommandOutput {
  ordered_json body;
  std::string summary;
  ordered_json extra_meta;  // merged into meta (outside the hashed region)
  bool failed_check = false;
  std::string failure;
};

// ---- shared command helpers ----

QuantizedModel acquire_artifact(const RunConfig& cfg, Rng& root) {
  if (!cfg.model.empty()) return load_quantized_model(cfg.model);
  Model m = synth_model(cfg.model_config(), root.fork("model").seed());
  return make_rtn_model(std::move(m), parse_quant_scheme(cfg.spec), cfg.act_clip, 0, {});
}

Model acquire_base_model(const RunConfig& cfg, Rng& root) {
  if (!cfg.model.empty()) return load_quantized_model(cfg.model).model;
  return synth_model(cfg.model_config(), root.fork("model").seed());
}

ordered_json suppression(double baseline, double bisup) {
  if (baseline > 0.0) return 1.0 - bisup / baseline;
  if (bisup == 0.0) return 0.0;
  return nullptr;
}

ordered_json layer_result_json(int64_t layer, const LayerCalibResult& r) {
  ordered_json j;
  j["layer"] = layer;
  j["initial_loss"] = r.initial_loss;
  j["final_loss"] = r.final_loss;
  j["reverted"] = r.reverted;
  j["restarts"] = r.restarts;
  j["lr_used"] = r.lr_used;
  j["steps"] = static_cast<int64_t>(r.loss_history.size());
  j["loss_history"] = r.loss_history;
  return j;
}

double mean_final_loss(const ModelCalibResult& r) {
  double acc = 0.0;
  for (const auto& l : r.layers) acc += l.final_loss;
  return acc / static_cast<double>(r.layers.size());
}

std::string fmt_summary(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

// ---- commands ----

void ensure_parent_dir(const std::string& path) {
  try {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("cannot create output directory: ") + e.what());
  }
}

CommandOutput cmd_synth(const RunConfig& cfg) {
  Rng root(cfg.seed);
  Model m = synth_model(cfg.model_config(), root.fork("model").seed());
  ensure_parent_dir(cfg.out);
  save_model(cfg.out, m);
  CommandOutput out;
  out.body["model"] = cfg.out;
  out.body["n_layers"] = m.config.n_layers;
  out.body["d_model"] = m.config.d_model;
  out.body["n_heads"] = m.config.n_heads;
  out.body["d_hidden"] = m.config.d_hidden;
  out.body["vocab"] = m.config.vocab;
  out.body["model_hash"] = "fnv1a64:" + hex64(fnv1a64_bytes(read_file_bytes(cfg.out)));
  out.summary = fmt_summary("synth: wrote %s (%lld layers, d_model %lld)", cfg.out.c_str(),
                            static_cast<long long>(m.config.n_layers),
                            static_cast<long long>(m.config.d_model));
  return out;
}

CommandOutput cmd_calibrate(const RunConfig& cfg) {
  Rng root(cfg.seed);
  Model m = acquire_base_model(cfg, root);
  const QuantScheme scheme = parse_quant_scheme(cfg.spec);
  Dataset data = make_dataset(m.config.vocab, cfg.seed, cfg.prompt_len, cfg.samples,
                              cfg.eval_samples, cfg.seq_len);
  CalibrationOutput co = calibrate_model(std::move(m), scheme, data.calib, data.prompt,
                                         cfg.calib_config(), root.fork("calib").seed());
  if (!cfg.model_out.empty()) {
    ensure_parent_dir(cfg.model_out);
    save_quantized_model(cfg.model_out, co.qm);
  }
  PropagationTrace eval_trace = trace_propagation(co.qm, data.eval);

  CommandOutput out;
  out.body["scheme"] = scheme.text;
  out.body["boundary"] = co.qm.boundary;
  ordered_json layers = ordered_json::array();
  for (size_t l = 0; l < co.result.layers.size(); ++l)
    layers.push_back(layer_result_json(static_cast<int64_t>(l), co.result.layers[l]));
  out.body["layers"] = layers;
  out.body["mean_final_loss"] = mean_final_loss(co.result);
  out.body["final_layer_mse_eval"] = eval_trace.layer_mse.back();
  out.body["model_out"] = cfg.model_out.empty() ? ordered_json(nullptr)
                                                : ordered_json(cfg.model_out);
  out.summary =
      fmt_summary("calibrate: %s, mean final loss %.6g, final-layer eval MSE %.6g",
                  scheme.text.c_str(), mean_final_loss(co.result), eval_trace.layer_mse.back());
  return out;
}

CommandOutput cmd_trace(const RunConfig& cfg) {
  Rng root(cfg.seed);
  QuantizedModel artifact = acquire_artifact(cfg, root);
  const QuantScheme baseline_scheme = parse_quant_scheme(cfg.spec);
  Dataset data = make_dataset(artifact.model.config.vocab, cfg.seed, cfg.prompt_len,
                              cfg.samples, cfg.eval_samples, cfg.seq_len);
  if (artifact.boundary > 0 && artifact.prompt_tokens != data.prompt)
    throw ConfigError("artifact prompt does not match the dataset prompt");
  QuantizedModel baseline =
      make_rtn_model(artifact.model, baseline_scheme, cfg.act_clip, 0, {});

  PropagationTrace base_calib = trace_propagation(baseline, data.calib);
  PropagationTrace base_eval = trace_propagation(baseline, data.eval);
  PropagationTrace bi_calib = trace_propagation(artifact, data.calib);
  PropagationTrace bi_eval = trace_propagation(artifact, data.eval);

  CommandOutput out;
  out.body["baseline_scheme"] = baseline_scheme.text;
  out.body["artifact_scheme"] = artifact.scheme.text;
  out.body["artifact_has_theta"] = artifact.has_theta();
  out.body["boundary"] = artifact.boundary;
  ordered_json layers = ordered_json::array();
  const int64_t n_layers = artifact.model.config.n_layers;
  for (int64_t l = 0; l < n_layers; ++l) {
    const size_t i = static_cast<size_t>(l);
    ordered_json row;
    row["layer"] = l;
    row["baseline_calib"] = base_calib.layer_mse[i];
    row["bisup_calib"] = bi_calib.layer_mse[i];
    row["suppression_calib"] = suppression(base_calib.layer_mse[i], bi_calib.layer_mse[i]);
    row["baseline_eval"] = base_eval.layer_mse[i];
    row["bisup_eval"] = bi_eval.layer_mse[i];
    row["suppression_eval"] = suppression(base_eval.layer_mse[i], bi_eval.layer_mse[i]);
    layers.push_back(std::move(row));
  }
  out.body["layers"] = layers;
  const ordered_json sc = layers.back().at("suppression_calib");
  const ordered_json se = layers.back().at("suppression_eval");
  out.summary = fmt_summary(
      "trace: %lld layers, final-layer suppression calib=%s eval=%s",
      static_cast<long long>(n_layers),
      sc.is_null() ? "n/a" : fmt_double(sc.get<double>()).c_str(),
      se.is_null() ? "n/a" : fmt_double(se.get<double>()).c_str());
  return out;
}

CommandOutput cmd_ablate(const RunConfig& cfg) {
  Rng root(cfg.seed);
  Model m = acquire_base_model(cfg, root);
  const QuantScheme scheme = parse_quant_scheme(cfg.spec);
  Dataset data = make_dataset(m.config.vocab, cfg.seed, cfg.prompt_len, cfg.samples,
                              cfg.eval_samples, cfg.seq_len);
  const uint64_t calib_seed = root.fork("calib").seed();

  struct Row {
    const char* label;
    bool clip, smooth, lowrank, mixed_kv;
  };
  static const Row kLadder[5] = {
      {"rtn", false, false, false, false},
      {"rtn+clip", true, false, false, false},
      {"rtn+clip+smooth", true, true, false, false},
      {"rtn+clip+smooth+lowrank", true, true, true, false},
      {"rtn+clip+smooth+lowrank+mixed_kv", true, true, true, true},
  };

  CommandOutput out;
  ordered_json rows = ordered_json::array();
  double first_mse = 0.0, last_mse = 0.0;
  for (int r = 0; r < 5; ++r) {
    const Row& lad = kLadder[r];
    CalibConfig cc = cfg.calib_config();
    cc.enable_clip = lad.clip;
    cc.enable_smooth = lad.smooth;
    cc.enable_lowrank = lad.lowrank;
    const std::vector<int32_t> prompt = lad.mixed_kv ? data.prompt : std::vector<int32_t>{};
    CalibrationOutput co = calibrate_model(m, scheme, data.calib, prompt, cc, calib_seed);
    const double mse_calib = trace_propagation(co.qm, data.calib).layer_mse.back();
    const double mse_eval = trace_propagation(co.qm, data.eval).layer_mse.back();
    if (r == 0) first_mse = mse_eval;
    if (r == 4) last_mse = mse_eval;
    ordered_json row;
    row["row"] = r;
    row["label"] = lad.label;
    row["enable_clip"] = lad.clip;
    row["enable_smooth"] = lad.smooth;
    row["enable_lowrank"] = lad.lowrank;
    row["mixed_kv"] = lad.mixed_kv;
    row["boundary"] = co.qm.boundary;
    row["calib_loss"] = mean_final_loss(co.result);
    row["final_layer_mse_calib"] = mse_calib;
    row["final_layer_mse_eval"] = mse_eval;
    rows.push_back(std::move(row));
  }
  out.body["scheme"] = scheme.text;
  out.body["rows"] = rows;
  out.summary = fmt_summary("ablate: final-layer eval MSE %.6g (rtn) -> %.6g (full)",
                            first_mse, last_mse);
  return out;
}

CommandOutput cmd_sweep(const RunConfig& cfg) {
  Rng root(cfg.seed);
  Model m = acquire_base_model(cfg, root);
  const QuantScheme scheme = parse_quant_scheme(cfg.spec);
  const std::vector<int64_t> s_axis = cfg.full_axes ? std::vector<int64_t>{64, 128, 256}
                                                     : cfg.samples_axis;
  const std::vector<int64_t> e_axis = cfg.full_axes ? std::vector<int64_t>{5, 10, 20}
                                                     : cfg.epochs_axis;
  const std::vector<int64_t> r_axis = cfg.full_axes ? std::vector<int64_t>{16, 32, 64}
                                                     : cfg.rank_axis;
  const int64_t pool_size = *std::max_element(s_axis.begin(), s_axis.end());
  Dataset data = make_dataset(m.config.vocab, cfg.seed, cfg.prompt_len, pool_size,
                              cfg.eval_samples, cfg.seq_len);
  const uint64_t calib_seed = root.fork("calib").seed();

  struct Cell {
    int64_t samples, epochs, rank;
    double mean_loss = 0.0, mse_eval = 0.0, wall_ms = 0.0;
  };
  std::vector<Cell> cells;
  for (int64_t s : s_axis)
    for (int64_t e : e_axis)
      for (int64_t r : r_axis) cells.push_back({s, e, r, 0, 0, 0});

  parallel_for(static_cast<int64_t>(cells.size()), [&](int64_t i) {
    Cell& cell = cells[static_cast<size_t>(i)];
    const auto t0 = std::chrono::steady_clock::now();
    CalibConfig cc = cfg.calib_config();
    cc.epochs = cell.epochs;
    cc.rank = cell.rank;
    std::vector<std::vector<int32_t>> subset(data.calib.begin(),
                                             data.calib.begin() + cell.samples);
    CalibrationOutput co = calibrate_model(m, scheme, subset, data.prompt, cc, calib_seed);
    cell.mean_loss = mean_final_loss(co.result);
    cell.mse_eval = trace_propagation(co.qm, data.eval).layer_mse.back();
    cell.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                             t0)
                       .count();
  });

  CommandOutput out;
  out.body["scheme"] = scheme.text;
  out.body["axes"]["samples"] = s_axis;
  out.body["axes"]["epochs"] = e_axis;
  out.body["axes"]["rank"] = r_axis;
  ordered_json rows = ordered_json::array();
  ordered_json walls = ordered_json::array();
  const Cell* best = &cells[0];
  for (const auto& c : cells) {
    ordered_json row;
    row["samples"] = c.samples;
    row["epochs"] = c.epochs;
    row["rank"] = c.rank;
    row["mean_final_loss"] = c.mean_loss;
    row["final_layer_mse_eval"] = c.mse_eval;
    rows.push_back(std::move(row));
    walls.push_back(c.wall_ms);
    if (c.mse_eval < best->mse_eval) best = &c;
  }
  out.body["cells"] = rows;
  out.extra_meta["cell_wall_ms"] = walls;
  out.summary = fmt_summary(
      "sweep: %zu cells, best eval MSE %.6g at samples=%lld epochs=%lld rank=%lld",
      cells.size(), best->mse_eval, static_cast<long long>(best->samples),
      static_cast<long long>(best->epochs), static_cast<long long>(best->rank));
  return out;
}

CommandOutput cmd_gradcheck(const RunConfig& cfg) {
  Rng root(cfg.seed);
  FdOptions opt;
  opt.h = cfg.fd_h;
  opt.tol = cfg.fd_tol;
  opt.max_coords_per_tensor = cfg.fd_max_coords;
  opt.seed = root.fork("gradcheck").seed();
  FdReport rep = run_gradcheck(root.fork("problem").seed(), opt);

  CommandOutput out;
  out.body["h"] = opt.h;
  out.body["tol"] = opt.tol;
  out.body["checked"] = rep.checked;
  out.body["max_rel_err"] = rep.max_rel_err;
  out.body["pass"] = rep.pass(opt.tol);
  ordered_json worst;
  worst["param"] = rep.worst.param;
  worst["index"] = rep.worst.index;
  worst["analytic"] = rep.worst.analytic;
  worst["numeric"] = rep.worst.numeric;
  worst["rel_err"] = rep.worst.rel_err;
  out.body["worst"] = worst;
  ordered_json excluded = ordered_json::array();
  for (const auto& e : rep.excluded) {
    ordered_json ej;
    ej["param"] = e.param;
    ej["index"] = e.index;
    ej["reason"] = e.reason;
    excluded.push_back(std::move(ej));
  }
  out.body["excluded"] = excluded;
  out.summary = fmt_summary("gradcheck: max rel err %.3g over %lld coords (%zu excluded)",
                            rep.max_rel_err, static_cast<long long>(rep.checked),
                            rep.excluded.size());
  if (!rep.pass(opt.tol)) {
    out.failed_check = true;
    out.failure = fmt_summary("gradient check failed: max rel err %.3g exceeds tol %.3g",
                              rep.max_rel_err, opt.tol);
  }
  return out;
}

}  // namespace

RunResult run_command(const RunConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  CommandOutput co;
  if (config.command == "synth") {
    co = cmd_synth(config);
  } else if (config.command == "calibrate") {
    co = cmd_calibrate(config);
  } else if (config.command == "trace") {
    co = cmd_trace(config);
  } else if (config.command == "ablate") {
    co = cmd_ablate(config);
  } else if (config.command == "sweep") {
    co = cmd_sweep(config);
  } else if (config.command == "gradcheck") {
    co = cmd_gradcheck(config);
  } else {
    throw ConfigError("unknown command: " + config.command);
  }

  ordered_json doc;
  doc["schema"] = "bisup-report/v1";
  doc["command"] = config.command;
  doc["config"] = run_config_to_json(config);
  doc["report"] = std::move(co.body);
  const std::string region = doc.dump(2);
  ordered_json meta;
  meta["version"] = version_string();
  meta["timestamp"] = iso_utc_now();
  meta["wall_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  meta["content_hash"] = "fnv1a64:" + hex64(fnv1a64_bytes(region));
  for (const auto& [k, v] : co.extra_meta.items()) meta[k] = v;
  doc["meta"] = meta;

  if (!config.out.empty() && config.command != "synth") {
    if (config.format == "csv") {
      write_text_file(config.out, report_to_csv(config.command, doc.at("report")));
    } else {
      write_text_file(config.out, doc.dump(2) + "\n");
    }
  }
  if (co.failed_check) throw NumericError(co.failure);
  return {std::move(doc), std::move(co.summary)};
}

}  // namespace bisup
