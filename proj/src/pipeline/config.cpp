#include "timewarp/config.hpp"

#include <sstream>

namespace tw {

using io::json;

namespace {

json to_json(const LossWeights& w) { return {{"lik", w.lik}, {"acc", w.acc}, {"ent", w.ent}}; }

json to_json(const StageSection& s) { return {{"weights", to_json(s.weights)}, {"steps", s.steps}, {"lr", s.lr}}; }

LossWeights weights_from(const json& j) {
  return {j.at("lik").get<double>(), j.at("acc").get<double>(), j.at("ent").get<double>()};
}

StageSection stage_from(const json& j) {
  return {weights_from(j.at("weights")), j.at("steps").get<long long>(), j.at("lr").get<double>()};
}

// The flow dimension always follows the system, so it is not a config key.
json architecture_json(const FlowConfig& c) {
  json j = io::to_json(c);
  j.erase("dimension");
  return j;
}

const char* type_name(const json& j) {
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const json& def, const json& val) {
  if (def.is_number()) return val.is_number();
  return def.type() == val.type();
}

void merge(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config: '" + (prefix.empty() ? "<root>" : prefix) + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    json& slot = base[key];
    if (!compatible(slot, value)) {
      throw ConfigError("config: '" + path + "' must be a " + type_name(slot) + ", got " + type_name(value));
    }
    if (slot.is_object()) {
      merge(slot, value, path);
    } else {
      slot = value;
    }
  }
}

bool has_path(const json& doc, const std::string& dotted) {
  const json* cur = &doc;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!cur->is_object() || !cur->contains(part)) return false;
    cur = &(*cur)[part];
  }
  return true;
}

void apply_override(json& doc, const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' must look like key=value");
  const std::string key = text.substr(0, eq);
  const std::string raw = text.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json nested = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) nested = json{{*it, nested}};
  merge(doc, nested, "");
}

}  // namespace

json RunConfig::to_json() const {
  const auto& fam = system.family;
  const auto& tb = training.base;
  const auto& v = analysis.validation;
  return {
      {"format_version", format_version},
      {"seed", seed},
      {"output_dir", output_dir},
      {"threads", threads},
      {"system",
       {{"kind", system.kind},
        {"name", system.name},
        {"spec_file", system.spec_file},
        {"heldout_copy", system.heldout_copy},
        {"family",
         {{"n_beads", fam.n_beads},
          {"dimension", fam.dimension},
          {"n_train", fam.n_train},
          {"n_test", fam.n_test},
          {"train_sequences", fam.train_sequences},
          {"test_sequences", fam.test_sequences},
          {"type_dihedral", fam.type_dihedral},
          {"type_mass", fam.type_mass},
          {"bond_k", fam.bond_k},
          {"bond_r0", fam.bond_r0},
          {"angle_k", fam.angle_k},
          {"angle_theta0", fam.angle_theta0},
          {"sigma", fam.sigma}}}}},
      {"potential",
       {{"temperature", potential.temperature},
        {"double_well", {{"barrier", potential.double_well.barrier}, {"offset", potential.double_well.offset}}},
        {"mueller_brown", {{"scale", potential.mueller_brown_scale}}}}},
      {"dynamics",
       {{"timestep", dynamics.timestep},
        {"friction", dynamics.friction},
        {"blowup_energy", dynamics.blowup_energy},
        {"steps", dynamics.steps},
        {"spacing", dynamics.spacing},
        {"burn_in", dynamics.burn_in}}},
      {"dataset", {{"max_pairs_per_system", dataset.max_pairs_per_system}, {"val_fraction", dataset.val_fraction}}},
      {"flow", {{"architecture", architecture_json(flow.config)}, {"init", flow.init}}},
      {"training",
       {{"batch_size", tb.batch_size},
        {"eval_every", tb.eval_every},
        {"checkpoint_every", tb.checkpoint_every},
        {"plateau_patience", tb.plateau_patience},
        {"val_pairs", tb.val_pairs},
        {"rotation_augment", tb.rotation_augment},
        {"grad_clip", tb.grad_clip},
        {"min_lr", tb.min_lr},
        {"divergence_factor", tb.divergence_factor},
        {"probe_pairs", training.probe_pairs},
        {"likelihood", tw::to_json(training.likelihood)},
        {"acceptance", tw::to_json(training.acceptance)}}},
      {"sampler",
       {{"system", sampler.system},
        {"steps", sampler.steps},
        {"batch", sampler.batch},
        {"explore_chains", sampler.explore_chains},
        {"explore_steps", sampler.explore_steps},
        {"delta_u_max", sampler.delta_u_max},
        {"constraint", sampler.constraint},
        {"dihedral", sampler.dihedral}}},
      {"analysis",
       {{"tica_lag", analysis.tica_lag},
        {"tic", analysis.tic},
        {"ess_threshold", analysis.ess_threshold},
        {"free_energy_bins", analysis.free_energy_bins},
        {"conditional_samples", analysis.conditional_samples},
        {"conditional_frame", analysis.conditional_frame},
        {"bond_ks_threshold", analysis.bond_ks_threshold},
        {"validate_new_states", analysis.validate_new_states},
        {"validation",
         {{"components", v.components},
          {"lag", v.lag},
          {"cell", v.cell},
          {"min_points", v.min_points},
          {"radius_quantile", v.radius_quantile},
          {"min_radius", v.min_radius},
          {"n_ensembles", v.n_ensembles},
          {"horizon_steps", v.horizon_steps},
          {"stay_fraction", v.stay_fraction}}}}}};
}

RunConfig RunConfig::from_json(const json& doc, const std::vector<std::string>& overrides) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  for (const char* key : kRequiredKeys) {
    if (!has_path(doc, key)) throw ConfigError(std::string("config: missing required key '") + key + "'");
  }
  json merged = RunConfig{}.to_json();
  merge(merged, doc, "");
  for (const auto& o : overrides) apply_override(merged, o);

  RunConfig c;
  try {
    c.format_version = merged.at("format_version").get<int>();
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.output_dir = merged.at("output_dir").get<std::string>();
    c.threads = merged.at("threads").get<int>();

    const auto& s = merged.at("system");
    c.system.kind = s.at("kind").get<std::string>();
    c.system.name = s.at("name").get<std::string>();
    c.system.spec_file = s.at("spec_file").get<std::string>();
    c.system.heldout_copy = s.at("heldout_copy").get<bool>();
    const auto& f = s.at("family");
    auto& fam = c.system.family;
    fam.n_beads = f.at("n_beads").get<int>();
    fam.dimension = f.at("dimension").get<int>();
    fam.n_train = f.at("n_train").get<int>();
    fam.n_test = f.at("n_test").get<int>();
    fam.train_sequences = f.at("train_sequences").get<std::vector<std::vector<int>>>();
    fam.test_sequences = f.at("test_sequences").get<std::vector<std::vector<int>>>();
    fam.type_dihedral = f.at("type_dihedral").get<std::vector<double>>();
    fam.type_mass = f.at("type_mass").get<std::vector<double>>();
    fam.bond_k = f.at("bond_k").get<double>();
    fam.bond_r0 = f.at("bond_r0").get<double>();
    fam.angle_k = f.at("angle_k").get<double>();
    fam.angle_theta0 = f.at("angle_theta0").get<double>();
    fam.sigma = f.at("sigma").get<double>();

    const auto& p = merged.at("potential");
    c.potential.temperature = p.at("temperature").get<double>();
    c.potential.double_well.barrier = p.at("double_well").at("barrier").get<double>();
    c.potential.double_well.offset = p.at("double_well").at("offset").get<double>();
    c.potential.mueller_brown_scale = p.at("mueller_brown").at("scale").get<double>();

    const auto& d = merged.at("dynamics");
    c.dynamics.timestep = d.at("timestep").get<double>();
    c.dynamics.friction = d.at("friction").get<double>();
    c.dynamics.blowup_energy = d.at("blowup_energy").get<double>();
    c.dynamics.steps = d.at("steps").get<long long>();
    c.dynamics.spacing = d.at("spacing").get<int>();
    c.dynamics.burn_in = d.at("burn_in").get<int>();

    const auto& ds = merged.at("dataset");
    c.dataset.max_pairs_per_system = ds.at("max_pairs_per_system").get<std::size_t>();
    c.dataset.val_fraction = ds.at("val_fraction").get<double>();

    json arch = merged.at("flow").at("architecture");
    arch["dimension"] = c.system.kind == "double_well" ? 1 : c.system.kind == "mueller_brown" ? 2 : fam.dimension;
    c.flow.config = io::flow_config_from_json(arch);
    c.flow.init = merged.at("flow").at("init").get<std::string>();

    const auto& t = merged.at("training");
    auto& tb = c.training.base;
    tb.batch_size = t.at("batch_size").get<std::size_t>();
    tb.eval_every = t.at("eval_every").get<int>();
    tb.checkpoint_every = t.at("checkpoint_every").get<int>();
    tb.plateau_patience = t.at("plateau_patience").get<int>();
    tb.val_pairs = t.at("val_pairs").get<std::size_t>();
    tb.rotation_augment = t.at("rotation_augment").get<bool>();
    tb.grad_clip = t.at("grad_clip").get<double>();
    tb.min_lr = t.at("min_lr").get<double>();
    tb.divergence_factor = t.at("divergence_factor").get<double>();
    c.training.probe_pairs = t.at("probe_pairs").get<std::size_t>();
    c.training.likelihood = stage_from(t.at("likelihood"));
    c.training.acceptance = stage_from(t.at("acceptance"));

    const auto& sm = merged.at("sampler");
    c.sampler.system = sm.at("system").get<std::string>();
    c.sampler.steps = sm.at("steps").get<long long>();
    c.sampler.batch = sm.at("batch").get<int>();
    c.sampler.explore_chains = sm.at("explore_chains").get<int>();
    c.sampler.explore_steps = sm.at("explore_steps").get<long long>();
    c.sampler.delta_u_max = sm.at("delta_u_max").get<double>();
    c.sampler.constraint = sm.at("constraint").get<std::string>();
    c.sampler.dihedral = sm.at("dihedral").get<std::vector<int>>();

    const auto& a = merged.at("analysis");
    c.analysis.tica_lag = a.at("tica_lag").get<int>();
    c.analysis.tic = a.at("tic").get<int>();
    c.analysis.ess_threshold = a.at("ess_threshold").get<double>();
    c.analysis.free_energy_bins = a.at("free_energy_bins").get<int>();
    c.analysis.conditional_samples = a.at("conditional_samples").get<int>();
    c.analysis.conditional_frame = a.at("conditional_frame").get<int>();
    c.analysis.bond_ks_threshold = a.at("bond_ks_threshold").get<double>();
    c.analysis.validate_new_states = a.at("validate_new_states").get<bool>();
    const auto& v = a.at("validation");
    auto& vc = c.analysis.validation;
    vc.components = v.at("components").get<int>();
    vc.lag = v.at("lag").get<int>();
    vc.cell = v.at("cell").get<double>();
    vc.min_points = v.at("min_points").get<int>();
    vc.radius_quantile = v.at("radius_quantile").get<double>();
    vc.min_radius = v.at("min_radius").get<double>();
    vc.n_ensembles = v.at("n_ensembles").get<int>();
    vc.horizon_steps = v.at("horizon_steps").get<long long>();
    vc.stay_fraction = v.at("stay_fraction").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const io::FormatError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc;
  try {
    doc = io::read_json(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return from_json(doc, overrides);
}

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("config: " + what); };
  if (format_version != 1) fail("unsupported format_version " + std::to_string(format_version));
  if (output_dir.empty()) fail("output_dir must not be empty");
  if (threads < 0) fail("threads must be >= 0");
  const auto& k = system.kind;
  if (k != "double_well" && k != "mueller_brown" && k != "bead_family" && k != "file") {
    fail("system.kind must be one of double_well, mueller_brown, bead_family, file");
  }
  if (k == "file" && system.spec_file.empty()) fail("system.spec_file is required when system.kind = file");
  if (k == "bead_family") {
    const auto& f = system.family;
    if (f.n_beads < 2) fail("system.family.n_beads must be >= 2");
    if (f.dimension < 1 || f.dimension > 3) fail("system.family.dimension must be 1, 2 or 3");
    if (f.n_train < 1 || f.n_test < 0) fail("system.family needs n_train >= 1 and n_test >= 0");
    if (f.type_dihedral.empty() || f.type_dihedral.size() != f.type_mass.size()) {
      fail("system.family.type_dihedral and type_mass must be non-empty and equally long");
    }
  }
  if (potential.temperature <= 0.0) fail("potential.temperature must be positive");
  if (dynamics.steps < 1 || dynamics.spacing < 1 || dynamics.burn_in < 0) {
    fail("dynamics.steps and dynamics.spacing must be >= 1, burn_in >= 0");
  }
  if (dataset.val_fraction < 0.0 || dataset.val_fraction >= 1.0) fail("dataset.val_fraction must be in [0, 1)");
  if (flow.init != "identity" && flow.init != "random") fail("flow.init must be identity or random");
  if (sampler.steps < 1 || sampler.batch < 1) fail("sampler.steps and sampler.batch must be >= 1");
  if (sampler.explore_chains < 1 || sampler.explore_steps < 1) fail("sampler explore sizes must be >= 1");
  if (sampler.constraint != "none" && sampler.constraint != "dihedral") fail("sampler.constraint must be none or dihedral");
  if (sampler.constraint == "dihedral" && sampler.dihedral.size() != 4) fail("sampler.dihedral needs 4 indices");
  if (analysis.tica_lag < 1) fail("analysis.tica_lag must be >= 1");
  if (analysis.tic < 0 || analysis.tic > 1) fail("analysis.tic must be 0 or 1");
  if (analysis.free_energy_bins < 2) fail("analysis.free_energy_bins must be >= 2");
  if (analysis.conditional_samples < 2) fail("analysis.conditional_samples must be >= 2");
  try {
    training.base.validate();
    training.likelihood.weights.validate();
    training.acceptance.weights.validate();
  } catch (const std::invalid_argument& e) {
    fail(std::string("training: ") + e.what());
  }
  if (training.likelihood.steps < 0 || training.acceptance.steps < 0) fail("training stage steps must be >= 0");
}

}  // namespace tw
