#include "bisup/bisup.h"

#include <string>
#include <utility>

#include "errors.hpp"
#include "pipeline.hpp"

struct bisup_run {
  std::string report_json;
  std::string summary;
};

namespace {

thread_local std::string g_last_error;

bisup_status classify(const std::exception& e) {
  if (dynamic_cast<const bisup::ConfigError*>(&e)) return BISUP_ERR_CONFIG;
  if (dynamic_cast<const bisup::NumericError*>(&e)) return BISUP_ERR_NUMERIC;
  if (dynamic_cast<const bisup::IoError*>(&e)) return BISUP_ERR_IO;
  return BISUP_ERR_INTERNAL;
}

}  // namespace

extern "C" {

bisup_status bisup_run_command(const char* command, const char* config_json,
                               bisup_run** out_run) {
  if (out_run) *out_run = nullptr;
  if (!command || !config_json || !out_run) {
    g_last_error = "null argument";
    return BISUP_ERR_CONFIG;
  }
  try {
    const bisup::ordered_json j = bisup::ordered_json::parse(config_json);
    const bisup::RunConfig cfg = bisup::parse_run_config(command, j);
    bisup::RunResult res = bisup::run_command(cfg);
    *out_run = new bisup_run{res.report.dump(2) + "\n", std::move(res.summary)};
    g_last_error.clear();
    return BISUP_OK;
  } catch (const nlohmann::json::parse_error& e) {
    g_last_error = std::string("config is not valid JSON: ") + e.what();
    return BISUP_ERR_CONFIG;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return classify(e);
  } catch (...) {
    g_last_error = "unknown error";
    return BISUP_ERR_INTERNAL;
  }
}

const char* bisup_run_report_json(const bisup_run* run) {
  return run ? run->report_json.c_str() : nullptr;
}

const char* bisup_run_summary(const bisup_run* run) {
  return run ? run->summary.c_str() : nullptr;
}

void bisup_run_free(bisup_run* run) { delete run; }

const char* bisup_last_error(void) { return g_last_error.c_str(); }

const char* bisup_version(void) { return bisup::version_string(); }

}  // extern "C"
