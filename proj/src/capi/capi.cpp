#include "timewarp/timewarp.h"

#include "timewarp/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <cstring>
#include <limits>

struct tw_run {
  std::unique_ptr<tw::Run> run;
  std::string report = "{}";
};

struct tw_system {
  tw::SystemPtr spec;
};

struct tw_flow {
  std::unique_ptr<tw::ConditionalFlow> flow;
  std::string id;
};

namespace {

thread_local std::string g_error;

int fail(int code, const std::string& what) {
  g_error = what;
  return code;
}

/// Runs fn, mapping exceptions to status codes.
template <typename Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    g_error.clear();
    return TW_OK;
  } catch (const tw::ConfigError& e) {
    return fail(TW_USAGE_ERROR, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(TW_USAGE_ERROR, e.what());
  } catch (const std::exception& e) {
    return fail(TW_RUNTIME_ERROR, e.what());
  } catch (...) {
    return fail(TW_RUNTIME_ERROR, "unknown error");
  }
}

std::vector<std::string> collect(const char* const* overrides, size_t n) {
  std::vector<std::string> out;
  for (size_t i = 0; i < n; ++i) {
    if (!overrides[i]) throw std::invalid_argument("override " + std::to_string(i) + " is NULL");
    out.emplace_back(overrides[i]);
  }
  return out;
}

int copy_out(const std::string& text, char* buffer, size_t capacity, size_t* needed) {
  if (needed) *needed = text.size() + 1;
  if (buffer && capacity > 0) {
    const size_t n = std::min(capacity - 1, text.size());
    std::memcpy(buffer, text.data(), n);
    buffer[n] = '\0';
  }
  g_error.clear();
  return TW_OK;
}

tw::Matrix read_matrix(const double* data, int rows, int cols) {
  tw::Matrix m(rows, cols);
  std::memcpy(m.data(), data, sizeof(double) * static_cast<size_t>(rows) * static_cast<size_t>(cols));
  return m;
}

std::string str(const char* s) { return s ? std::string(s) : std::string(); }

}  // namespace

extern "C" {

const char* tw_version(void) { return tw::code_version(); }

const char* tw_last_error(void) { return g_error.c_str(); }

void tw_set_log_level(const char* level) {
  if (level) spdlog::set_level(spdlog::level::from_str(level));
}

int tw_run_open(const char* config_path, const char* const* overrides, size_t n_overrides, tw_run** out) {
  if (!config_path || !out) return fail(TW_USAGE_ERROR, "tw_run_open: NULL argument");
  return guarded([&] {
    auto cfg = tw::RunConfig::load(config_path, collect(overrides, n_overrides));
    auto handle = std::make_unique<tw_run>();
    handle->run = std::make_unique<tw::Run>(std::move(cfg));
    *out = handle.release();
  });
}

int tw_run_open_json(const char* config_json, const char* const* overrides, size_t n_overrides, tw_run** out) {
  if (!config_json || !out) return fail(TW_USAGE_ERROR, "tw_run_open_json: NULL argument");
  return guarded([&] {
    tw::io::json doc;
    try {
      doc = tw::io::json::parse(config_json);
    } catch (const tw::io::json::exception& e) {
      throw tw::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    auto cfg = tw::RunConfig::from_json(doc, collect(overrides, n_overrides));
    auto handle = std::make_unique<tw_run>();
    handle->run = std::make_unique<tw::Run>(std::move(cfg));
    *out = handle.release();
  });
}

void tw_run_free(tw_run* run) { delete run; }

int tw_run_report(const tw_run* run, char* buffer, size_t capacity, size_t* needed) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_run_report: NULL run");
  return copy_out(run->report, buffer, capacity, needed);
}

int tw_run_config(const tw_run* run, char* buffer, size_t capacity, size_t* needed) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_run_config: NULL run");
  return copy_out(run->run->config().to_json().dump(2), buffer, capacity, needed);
}

int tw_gen_data(tw_run* run) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_gen_data: NULL run");
  return guarded([&] { run->report = run->run->gen_data().dump(); });
}

int tw_train(tw_run* run, const char* stage, int resume, int dry_run, long long* parameter_count) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_train: NULL run");
  return guarded([&] {
    tw::TrainOptions o;
    if (stage) o.stage = stage;
    o.resume = resume != 0;
    o.dry_run = dry_run != 0;
    const auto summary = run->run->train(o);
    if (parameter_count) *parameter_count = summary.at("parameter_count").get<long long>();
    run->report = summary.dump();
  });
}

int tw_sample(tw_run* run, const char* checkpoint, const char* output, long long* length) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_sample: NULL run");
  int status = guarded([&] {
    const auto summary = run->run->sample({str(checkpoint), str(output)});
    if (length) *length = summary.at("length").get<long long>();
    run->report = summary.dump();
    if (summary.at("aborted").get<bool>()) {
      throw std::runtime_error("sampler aborted: " + summary.at("abort_reason").get<std::string>());
    }
  });
  return status;
}

int tw_explore(tw_run* run, const char* checkpoint, const char* output, int* n_chains) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_explore: NULL run");
  return guarded([&] {
    const auto summary = run->run->explore({str(checkpoint), str(output)});
    if (n_chains) *n_chains = summary.at("chains").get<int>();
    run->report = summary.dump();
  });
}

int tw_analyze(tw_run* run, const char* chain, const char* reference, double reference_seconds, double* speedup) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_analyze: NULL run");
  return guarded([&] {
    const auto report = run->run->analyze({str(chain), str(reference), reference_seconds});
    if (speedup) {
      *speedup = report.at("speedup").is_number() ? report.at("speedup").get<double>()
                                                  : std::numeric_limits<double>::quiet_NaN();
    }
    run->report = report.dump();
  });
}

int tw_eval_conditional(tw_run* run, const char* checkpoint, int self_compare, int* passed, int* bonds_ok) {
  if (!run) return fail(TW_USAGE_ERROR, "tw_eval_conditional: NULL run");
  return guarded([&] {
    const auto report = run->run->eval_conditional({str(checkpoint), self_compare != 0});
    if (passed) *passed = report.at("distributions_match").get<bool>();
    if (bonds_ok) *bonds_ok = report.at("bonds_within_threshold").get<bool>();
    run->report = report.dump();
  });
}

int tw_system_load(const char* path, tw_system** out) {
  if (!path || !out) return fail(TW_USAGE_ERROR, "tw_system_load: NULL argument");
  return guarded([&] {
    auto handle = std::make_unique<tw_system>();
    handle->spec = std::make_shared<const tw::SystemSpec>(tw::io::load_system(path));
    *out = handle.release();
  });
}

void tw_system_free(tw_system* system) { delete system; }

int tw_system_n_atoms(const tw_system* system) { return system ? system->spec->n_atoms : -1; }

int tw_system_dimension(const tw_system* system) { return system ? system->spec->dimension : -1; }

int tw_system_energy(const tw_system* system, const double* positions, double* energy) {
  if (!system || !positions || !energy) return fail(TW_USAGE_ERROR, "tw_system_energy: NULL argument");
  return guarded([&] {
    const auto pot = tw::Potential::bead_chain(system->spec, 1.0);
    *energy = pot.energy(read_matrix(positions, system->spec->n_atoms, system->spec->dimension));
  });
}

int tw_flow_load(const char* checkpoint, tw_flow** out) {
  if (!checkpoint || !out) return fail(TW_USAGE_ERROR, "tw_flow_load: NULL argument");
  return guarded([&] {
    auto loaded = tw::io::load_checkpoint(checkpoint);
    auto handle = std::make_unique<tw_flow>();
    handle->flow = std::move(loaded.flow);
    handle->id = loaded.id;
    *out = handle.release();
  });
}

void tw_flow_free(tw_flow* flow) { delete flow; }

long long tw_flow_parameter_count(const tw_flow* flow) {
  return flow ? static_cast<long long>(flow->flow->params().parameter_count()) : -1;
}

int tw_flow_sample(tw_flow* flow, const tw_system* system, const double* x, int count, unsigned long long seed,
                   double* positions, double* auxiliaries, double* log_prob) {
  if (!flow || !system || !x) return fail(TW_USAGE_ERROR, "tw_flow_sample: NULL argument");
  if (count < 1) return fail(TW_USAGE_ERROR, "tw_flow_sample: count must be >= 1");
  return guarded([&] {
    const auto& spec = *system->spec;
    if (spec.dimension != flow->flow->config().dimension) {
      throw std::invalid_argument("tw_flow_sample: system dimension does not match the flow");
    }
    const auto xm = read_matrix(x, spec.n_atoms, spec.dimension);
    tw::RngStream rng(seed, 0);
    const auto p = flow->flow->sample(tw::FlowInput::repeat(xm, spec.atom_types, count), rng);
    const size_t n = static_cast<size_t>(p.positions.size());
    if (positions) std::memcpy(positions, p.positions.data(), n * sizeof(double));
    if (auxiliaries) std::memcpy(auxiliaries, p.auxiliaries.data(), n * sizeof(double));
    if (log_prob) std::memcpy(log_prob, p.log_prob.data(), static_cast<size_t>(count) * sizeof(double));
  });
}

int tw_flow_log_density(tw_flow* flow, const tw_system* system, const double* x, const double* y_positions,
                        const double* y_auxiliaries, double* log_prob) {
  if (!flow || !system || !x || !y_positions || !y_auxiliaries || !log_prob) {
    return fail(TW_USAGE_ERROR, "tw_flow_log_density: NULL argument");
  }
  return guarded([&] {
    const auto& spec = *system->spec;
    if (spec.dimension != flow->flow->config().dimension) {
      throw std::invalid_argument("tw_flow_log_density: system dimension does not match the flow");
    }
    const int n = spec.n_atoms, d = spec.dimension;
    tw::FlowInput in;
    in.append(read_matrix(x, n, d), spec.atom_types);
    *log_prob = flow->flow->log_density(in, read_matrix(y_positions, n, d), read_matrix(y_auxiliaries, n, d))[0];
  });
}

}  // extern "C"
