#pragma once

#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "calibrate.hpp"
#include "transformer.hpp"

namespace bisup {

using ordered_json = nlohmann::ordered_json;

// ---- run configuration --------------------------------------------------------

// Flat key/value config; file values are overridden by CLI flags. Unknown
// keys are rejected.
struct RunConfig {
  std::string command;
  std::string spec = "W3A3-g16";
  uint64_t seed = 0;
  std::string model;      // input model/artifact path (empty = synthesize)
  std::string out;        // report path (synth: model path)
  std::string model_out;  // calibrate: artifact path
  std::string format = "json";

  int64_t d_model = 64;
  int64_t n_layers = 2;
  int64_t n_heads = 4;
  int64_t d_hidden = 256;
  int64_t vocab = 64;
  double rms_eps = 1e-6;

  int64_t epochs = 5;
  double lr = 0.005;
  int64_t batch_size = 8;
  double weight_decay = 0.0;
  int64_t rank = 32;
  std::string form = "slrec";
  bool enable_clip = true;
  bool enable_smooth = true;
  bool enable_lowrank = true;
  double act_clip = 0.9;
  std::string preprocess = "none";

  int64_t samples = 32;
  int64_t eval_samples = 32;
  int64_t seq_len = 32;
  int64_t prompt_len = 8;

  std::vector<int64_t> samples_axis = {8, 16, 32};
  std::vector<int64_t> epochs_axis = {2, 5, 10};
  std::vector<int64_t> rank_axis = {4, 8, 16};
  bool full_axes = false;

  double fd_h = 1e-5;
  double fd_tol = 1e-4;
  int64_t fd_max_coords = 24;

  ModelConfig model_config() const;
  CalibConfig calib_config() const;
  void validate() const;
};

RunConfig parse_run_config(const std::string& command, const ordered_json& j);
ordered_json run_config_to_json(const RunConfig& c);

// ---- datasets ---------------------------------------------------------------------

struct Dataset {
  std::vector<int32_t> prompt;
  std::vector<std::vector<int32_t>> calib;
  std::vector<std::vector<int32_t>> eval;
};

// Seeded token-id sequences; all share the prompt prefix (bos id 0) when
// prompt_len > 0. Sequence i's tail depends only on the seed and i, so a
// pool's first n sequences equal an n-sequence generation.
Dataset make_dataset(int64_t vocab, uint64_t seed, int64_t prompt_len, int64_t n_calib,
                     int64_t n_eval, int64_t seq_len);

// ---- command execution -----------------------------------------------------------------

struct RunResult {
  ordered_json report;  // full document including meta
  std::string summary;  // one-line human summary
};

// Dispatches on config.command, writes any configured output files, and
// returns the report document.
RunResult run_command(const RunConfig& config);

// Deterministic region of a report document (everything except meta),
// serialized exactly as hashed.
std::string report_deterministic_region(const ordered_json& report);

uint64_t fnv1a64_bytes(const std::string& bytes);

// Index-parallel loop honoring the BISUP_THREADS env var (default: hardware
// concurrency). Results must be written to per-index slots; the first failing
// index's exception is rethrown after all workers join.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

const char* version_string();

}  // namespace bisup
