#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bisup/bisup.h"
#include "json.hpp"

namespace {

struct CliOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string spec;
  std::string out;
  std::string model;
  std::string model_out;
  std::string format;
};

int exit_code(bisup_status st) {
  switch (st) {
    case BISUP_OK:
      return 0;
    case BISUP_ERR_CONFIG:
      return 2;
    case BISUP_ERR_NUMERIC:
      return 3;
    case BISUP_ERR_IO:
      return 4;
    default:
      return 1;
  }
}

int run_subcommand(const CLI::App* sub, const CliOpts& opts) {
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  if (!opts.config_path.empty()) {
    std::ifstream is(opts.config_path);
    if (!is) {
      std::fprintf(stderr, "error: cannot open config file: %s\n", opts.config_path.c_str());
      return 2;
    }
    try {
      cfg = nlohmann::ordered_json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
      std::fprintf(stderr, "error: config is not valid JSON: %s\n", e.what());
      return 2;
    }
  }
  if (sub->count("--seed")) cfg["seed"] = opts.seed;
  if (sub->count("--spec")) cfg["spec"] = opts.spec;
  if (sub->count("--out")) cfg["out"] = opts.out;
  if (sub->count("--model")) cfg["model"] = opts.model;
  if (sub->count("--model-out")) cfg["model_out"] = opts.model_out;
  if (sub->count("--format")) cfg["format"] = opts.format;

  bisup_run* run = nullptr;
  const bisup_status st =
      bisup_run_command(sub->get_name().c_str(), cfg.dump().c_str(), &run);
  if (st != BISUP_OK) {
    std::fprintf(stderr, "error: %s\n", bisup_last_error());
    return exit_code(st);
  }
  std::printf("%s\n", bisup_run_summary(run));
  bisup_run_free(run);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bisup: bidirectional error-suppression quantization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(bisup_version()));

  CliOpts opts;
  const std::vector<std::pair<const char*, const char*>> subs = {
      {"synth", "synthesize a toy transformer and write it to a model file"},
      {"calibrate", "calibrate error-suppression parameters for a quantized model"},
      {"trace", "trace per-layer quantization error against a plain rounding baseline"},
      {"ablate", "evaluate the cumulative component ladder"},
      {"sweep", "grid-sweep calibration hyperparameters"},
      {"gradcheck", "finite-difference check of the analytic gradients"},
  };
  for (const auto& [name, desc] : subs) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", opts.config_path, "JSON config file");
    sub->add_option("--seed", opts.seed, "master seed (overrides config)");
    sub->add_option("--spec", opts.spec, "quantization spec, e.g. W4A4 or W3A3-g16");
    sub->add_option("--out", opts.out, "output path (report, or model file for synth)");
    sub->add_option("--model", opts.model, "input model file");
    sub->add_option("--model-out", opts.model_out, "output model file (calibrate)");
    sub->add_option("--format", opts.format, "report format: json or csv");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return run_subcommand(app.get_subcommands().front(), opts);
}
