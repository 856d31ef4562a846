#include "timewarp/pipeline.hpp"

#include "timewarp/parallel.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>

#ifndef TIMEWARP_VERSION
#define TIMEWARP_VERSION "unknown"
#endif

namespace tw {

using io::json;
namespace fs = std::filesystem;

const char* code_version() { return TIMEWARP_VERSION; }

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Stream id for a named pipeline stage.
std::uint64_t tag(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string join_types(const std::vector<int>& types) {
  std::string s;
  for (int t : types) s += std::to_string(t);
  return s;
}

SystemPtr single_particle(const std::string& name, int dimension) {
  auto s = std::make_shared<SystemSpec>();
  s->name = name;
  s->n_atoms = 1;
  s->dimension = dimension;
  s->atom_types = {0};
  s->masses = {1.0};
  s->validate();
  return s;
}

SystemPtr renamed(const SystemPtr& system, const std::string& name) {
  auto s = std::make_shared<SystemSpec>(*system);
  s->name = name;
  return s;
}

void append_line(const fs::path& path, const json& line) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << line.dump() << "\n";
}

json null_if_nan(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json ks_json(const KsResult& r) { return {{"statistic", r.statistic}, {"p_value", r.p_value}}; }

json profile_json(const FreeEnergyProfile& p) {
  json values = json::array();
  for (const auto& v : p.values) values.push_back(v ? json(*v) : json(nullptr));
  return {{"edges", p.edges}, {"values", values}};
}

Series profile_series(const std::string& label, const FreeEnergyProfile& p) {
  Series s{label, p.centers(), {}};
  for (const auto& v : p.values) s.y.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
  return s;
}

std::vector<double> frame_energies(const std::vector<Matrix>& frames, const Potential& potential) {
  std::vector<double> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(potential.energy(f));
  return out;
}

std::vector<Matrix> chain_frames(const Chain& chain) {
  std::vector<Matrix> out;
  out.reserve(chain.size());
  for (std::size_t m = 0; m < chain.size(); ++m) out.push_back(chain.frame(m));
  return out;
}

double acceptance_rate(const Chain& c) {
  return c.size() ? static_cast<double>(c.acceptance_count) / static_cast<double>(c.size()) : 0.0;
}

}  // namespace

// ------------------------------------------------------------------ systems

SystemPtr bead_system(const FamilyConfig& config, const std::vector<int>& types) {
  const int n = config.n_beads;
  if (static_cast<int>(types.size()) != n) {
    throw ConfigError("bead family: sequence " + join_types(types) + " does not have " + std::to_string(n) + " beads");
  }
  auto s = std::make_shared<SystemSpec>();
  s->name = "beads-" + join_types(types);
  s->n_atoms = n;
  s->dimension = config.dimension;
  for (int t : types) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.type_dihedral.size()) {
      throw ConfigError("bead family: type " + std::to_string(t) + " has no entry in the type tables");
    }
    s->atom_types.push_back(t);
    s->masses.push_back(config.type_mass[static_cast<std::size_t>(t)]);
  }
  for (int i = 0; i + 1 < n; ++i) s->bonds.push_back({i, i + 1, config.bond_k, config.bond_r0});
  if (config.dimension >= 2) {
    for (int i = 0; i + 2 < n; ++i) s->angles.push_back({i, i + 1, i + 2, config.angle_k, config.angle_theta0});
  }
  if (config.dimension == 3) {
    for (int i = 0; i + 3 < n; ++i) {
      const double k = 0.5 * (config.type_dihedral[static_cast<std::size_t>(types[i + 1])] +
                              config.type_dihedral[static_cast<std::size_t>(types[i + 2])]);
      s->dihedrals.push_back({i, i + 1, i + 2, i + 3, k, 2, std::numbers::pi});
    }
  }
  s->nonbonded_sigma = config.sigma;
  s->validate();
  return s;
}

FamilySystems bead_family(const FamilyConfig& config, std::uint64_t seed) {
  std::vector<std::vector<int>> train = config.train_sequences;
  std::vector<std::vector<int>> test = config.test_sequences;
  if (train.empty() || test.empty()) {
    // Every sequence over the type table, a chain and its reversal counted once.
    const int n_types = static_cast<int>(config.type_dihedral.size());
    std::set<std::vector<int>> seen(test.begin(), test.end());
    for (const auto& t : train) seen.insert(t);
    for (auto s : seen) {
      std::reverse(s.begin(), s.end());
      seen.insert(s);
    }
    std::vector<std::vector<int>> pool;
    std::vector<int> seq(static_cast<std::size_t>(config.n_beads), 0);
    while (true) {
      std::vector<int> rev(seq.rbegin(), seq.rend());
      if (seq <= rev && !seen.count(seq)) pool.push_back(seq);
      int i = 0;
      while (i < config.n_beads && ++seq[static_cast<std::size_t>(i)] == n_types) seq[static_cast<std::size_t>(i++)] = 0;
      if (i == config.n_beads) break;
    }
    RngStream rng(seed, tag("bead-family"));
    for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
    std::size_t next = 0;
    auto take = [&](std::vector<std::vector<int>>& dst, int count) {
      while (static_cast<int>(dst.size()) < count) {
        if (next >= pool.size()) throw ConfigError("bead family: not enough distinct sequences for the requested split");
        dst.push_back(pool[next++]);
      }
    };
    if (test.empty()) take(test, config.n_test);
    if (train.empty()) take(train, config.n_train);
  }
  FamilySystems out;
  for (const auto& t : train) out.train.push_back(bead_system(config, t));
  for (const auto& t : test) out.test.push_back(bead_system(config, t));
  return out;
}

Matrix initial_positions(const SystemSpec& system, const Potential& potential) {
  const int n = system.n_atoms;
  const int d = system.dimension;
  Matrix x = Matrix::Zero(n, d);
  if (const auto* dw = potential.double_well_params()) {
    x.setConstant(-dw->offset);
    return x;
  }
  if (potential.mueller_brown_params()) {
    if (d != 2) throw std::invalid_argument("Mueller-Brown needs d = 2");
    for (int i = 0; i < n; ++i) x.row(i) << -0.558, 1.442;
    return x;
  }
  const double r0 = system.bonds.empty() ? 1.0 : system.bonds.front().r0;
  const double theta = system.angles.empty() ? 2.0 : system.angles.front().theta0;
  for (int i = 0; i < n; ++i) {
    if (d == 1) {
      x(i, 0) = i * r0;
    } else {
      x(i, 0) = i * r0 * std::sin(theta / 2);
      x(i, 1) = (i % 2) * r0 * std::cos(theta / 2);
    }
  }
  return x;
}

// ---------------------------------------------------------------------- run

Run::Run(RunConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.system.kind == "file") {
    config_.flow.config.dimension = io::load_system(config_.system.spec_file).dimension;
  }
}

void Run::record(const std::string& command, const json& inputs, const json& summary, double seconds) const {
  io::write_json(dir() / "config.json", config_.to_json());
  io::write_json(dir() / "provenance" / (command + ".json"), {{"command", command},
                                                               {"code_version", code_version()},
                                                               {"seed", config_.seed},
                                                               {"config", config_.to_json()},
                                                               {"inputs", inputs},
                                                               {"summary", summary},
                                                               {"wall_seconds", seconds}});
}

io::LoadedDataset Run::dataset() const {
  const auto manifest = dir() / "data" / "manifest.json";
  if (!fs::exists(manifest)) throw std::runtime_error("no dataset at " + manifest.string() + "; run gen-data first");
  return io::load_dataset(manifest);
}

std::size_t Run::pick_system(const io::LoadedDataset& data) const {
  const auto& systems = data.dataset.systems;
  if (!config_.sampler.system.empty()) {
    for (std::size_t i = 0; i < systems.size(); ++i) {
      if (systems[i]->name == config_.sampler.system) return i;
    }
    throw ConfigError("sampler.system '" + config_.sampler.system + "' is not in the dataset");
  }
  for (std::size_t i = 0; i < systems.size(); ++i) {
    if (data.dataset.system_split[i] == Split::Test) return i;
  }
  return 0;
}

Constraint Run::constraint() const {
  if (config_.sampler.constraint == "dihedral") {
    const auto& q = config_.sampler.dihedral;
    return dihedral_sign_constraint(q[0], q[1], q[2], q[3]);
  }
  return always_pass();
}

fs::path Run::latest_checkpoint() const {
  const auto pointer = dir() / "train" / "latest.json";
  if (!fs::exists(pointer)) return {};
  return dir() / "train" / io::read_json(pointer).at("path").get<std::string>();
}

json Run::gen_data() {
  const auto t0 = Clock::now();
  const auto& cfg = config_;
  const double temperature = cfg.potential.temperature;

  struct Item {
    SystemPtr system;
    Split split;
    Potential potential;
  };
  std::vector<Item> items;
  const std::string& kind = cfg.system.kind;
  const std::string base = cfg.system.name.empty() ? kind : cfg.system.name;
  auto add_single = [&](SystemPtr sys, const Potential& pot) {
    items.push_back({sys, Split::Train, pot});
    if (cfg.system.heldout_copy) items.push_back({renamed(sys, sys->name + "-heldout"), Split::Test, pot});
  };
  if (kind == "double_well") {
    add_single(single_particle(base, 1), Potential::double_well(cfg.potential.double_well, temperature));
  } else if (kind == "mueller_brown") {
    MuellerBrownParams p;
    p.scale = cfg.potential.mueller_brown_scale;
    add_single(single_particle(base, 2), Potential::mueller_brown(p, temperature));
  } else if (kind == "file") {
    auto sys = std::make_shared<const SystemSpec>(io::load_system(cfg.system.spec_file));
    add_single(sys, Potential::bead_chain(sys, temperature));
  } else {
    const auto fam = bead_family(cfg.system.family, cfg.seed);
    for (const auto& s : fam.train) items.push_back({s, Split::Train, Potential::bead_chain(s, temperature)});
    for (const auto& s : fam.test) items.push_back({s, Split::Test, Potential::bead_chain(s, temperature)});
  }

  LangevinParams params;
  params.timestep = cfg.dynamics.timestep;
  params.friction = cfg.dynamics.friction;
  params.temperature = temperature;
  params.blowup_energy = cfg.dynamics.blowup_energy;
  params.validate();

  std::vector<Trajectory> trajs(items.size());
  std::vector<double> seconds(items.size());
  parallel_for(items.size(), cfg.threads, [&](std::size_t i) {
    const auto& it = items[i];
    RngStream rng(cfg.seed, mix64(tag("gen-data"), i));
    const auto ts = Clock::now();
    const Matrix x0 = initial_positions(*it.system, it.potential);
    Trajectory t = simulate(it.system, it.potential, params, cfg.dynamics.steps, cfg.dynamics.spacing, x0, rng);
    seconds[i] = seconds_since(ts);
    const auto burn = static_cast<std::size_t>(cfg.dynamics.burn_in);
    if (t.frames.size() < burn + 2) {
      throw ConfigError("dynamics: " + std::to_string(t.frames.size()) + " frames leave fewer than 2 after burn_in " +
                        std::to_string(burn));
    }
    t.frames.erase(t.frames.begin(), t.frames.begin() + static_cast<std::ptrdiff_t>(burn));
    trajs[i] = std::move(t);
  });

  PairDataset ds;
  RngStream pair_rng(cfg.seed, tag("pairs"));
  for (std::size_t i = 0; i < items.size(); ++i) {
    ds.systems.push_back(items[i].system);
    ds.system_split.push_back(items[i].split);
    auto pairs = extract_pairs(trajs[i], static_cast<int>(i), cfg.dataset.max_pairs_per_system, pair_rng);
    for (auto& p : pairs) ds.pairs.push_back(std::move(p));
  }
  assign_val_split(ds, cfg.dataset.val_fraction);
  ds.check_split_hygiene();

  const auto data_dir = dir() / "data";
  io::Manifest manifest;
  manifest.spacing = cfg.dynamics.spacing;
  manifest.seed = cfg.seed;
  json timing = json::object();
  json counts = json::object();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& name = items[i].system->name;
    io::ManifestEntry e;
    e.name = name;
    e.split = items[i].split;
    e.system_file = "systems/" + name + ".json";
    e.trajectory_file = "traj/" + name + ".twtraj";
    io::save_system(data_dir / e.system_file, *items[i].system);
    io::write_trajectory(data_dir / e.trajectory_file, trajs[i]);
    e.trajectory_hash = io::file_hash(data_dir / e.trajectory_file);
    e.potential = io::to_json(items[i].potential);
    for (std::size_t k = 0; k < ds.pairs.size(); ++k) {
      if (ds.pairs[k].system != static_cast<int>(i)) continue;
      e.pair_frames.push_back(ds.pairs[k].frame);
      e.pair_splits.push_back(ds.pair_split[k]);
    }
    counts[name] = {{"split", split_name(e.split)}, {"pairs", e.pair_frames.size()}};
    timing[name] = {{"wall_seconds", seconds[i]}, {"steps", cfg.dynamics.steps}};
    manifest.systems.push_back(std::move(e));
  }
  io::write_manifest(data_dir / "manifest.json", manifest);
  // Wall times live outside the data files so reruns stay byte-identical.
  io::write_json(data_dir / "timing.json", timing);

  json summary{{"systems", counts}, {"manifest", (data_dir / "manifest.json").string()}};
  record("gen-data", json::object(), summary, seconds_since(t0));
  spdlog::info("gen-data: {} systems, {} pairs", items.size(), ds.pairs.size());
  return summary;
}

json Run::train(const TrainOptions& options) {
  const auto t0 = Clock::now();
  if (options.stage != "likelihood" && options.stage != "acceptance") {
    throw ConfigError("train: --stage must be likelihood or acceptance");
  }
  const StageSection& stage = options.stage == "likelihood" ? config_.training.likelihood : config_.training.acceptance;

  std::unique_ptr<ConditionalFlow> flow;
  std::string resumed_from;
  const bool want_resume = options.resume || options.stage == "acceptance";
  const auto latest = latest_checkpoint();
  if (want_resume && !latest.empty()) {
    auto loaded = io::load_checkpoint(latest);
    flow = std::move(loaded.flow);
    resumed_from = latest.string();
    if (loaded.info.stage != options.stage) {
      // A new objective starts with fresh optimizer moments.
      auto& store = flow->params();
      for (std::size_t i = 0; i < store.size(); ++i) {
        store.adam_m(static_cast<int>(i)).setZero();
        store.adam_v(static_cast<int>(i)).setZero();
      }
      store.set_adam_steps(0);
    }
    spdlog::info("train: resuming from {} (stage {}, step {})", latest.string(), loaded.info.stage, loaded.info.step);
  } else if (options.stage == "acceptance" && !options.dry_run) {
    throw std::runtime_error("train: the acceptance stage needs a checkpoint; run --stage likelihood first");
  } else {
    flow = std::make_unique<ConditionalFlow>(config_.flow.config, mix64(config_.seed, tag("flow")),
                                             config_.flow.init == "random" ? FlowInit::Random : FlowInit::Identity);
  }
  const auto n_params = flow->params().parameter_count();
  if (options.dry_run) {
    json summary{{"parameter_count", n_params}, {"stage", options.stage}, {"dry_run", true}};
    spdlog::info("train: dry run, {} parameters", n_params);
    record("train-dry-run", json::object(), summary, seconds_since(t0));
    return summary;
  }

  auto data = dataset();
  TrainConfig tc = config_.training.base;
  tc.lr = stage.lr;
  tc.steps = stage.steps;
  tc.weights = stage.weights;
  const auto train_dir = dir() / "train";
  const auto metrics = train_dir / "metrics.jsonl";
  const std::uint64_t flow_seed = mix64(config_.seed, tag("flow"));

  TrainHooks hooks;
  hooks.on_eval = [&](const TrainRecord& r) {
    append_line(metrics, {{"stage", options.stage},
                          {"step", r.step},
                          {"lr", r.lr},
                          {"train_lik", null_if_nan(r.train_lik)},
                          {"train_acc", null_if_nan(r.train_acc)},
                          {"train_ent", null_if_nan(r.train_ent)},
                          {"train_total", null_if_nan(r.train_total)},
                          {"val_total", null_if_nan(r.val_total)},
                          {"seconds", r.seconds}});
  };
  double last_lr = tc.lr;
  hooks.on_checkpoint = [&](long long step, double val) {
    const std::string name = fmt::format("{}-{:08d}.twckpt", options.stage, step);
    const std::string id =
        io::save_checkpoint(train_dir / "checkpoints" / name, *flow, {options.stage, step, val, last_lr, flow_seed});
    io::write_json(train_dir / "latest.json",
                   {{"path", "checkpoints/" + name}, {"stage", options.stage}, {"step", step}, {"id", id}});
  };

  RngStream rng(config_.seed, tag("train-" + options.stage));
  TrainResult result = tw::train(*flow, data.dataset, data.potentials, tc, rng, hooks);
  last_lr = result.final_lr;

  // Acceptance probe on held-out pairs (val pairs when there is no test split).
  auto probe_idx = data.dataset.indices(Split::Test);
  if (probe_idx.empty()) probe_idx = data.dataset.indices(Split::Val);
  if (probe_idx.size() > config_.training.probe_pairs) probe_idx.resize(config_.training.probe_pairs);
  RngStream probe_rng(config_.seed, tag("probe"));
  double alpha_sum = 0.0;
  for (auto k : probe_idx) {
    const auto& pair = data.dataset.pairs[k];
    const auto& sys = data.dataset.systems[static_cast<std::size_t>(pair.system)];
    const AugmentedTarget target{data.potentials[static_cast<std::size_t>(pair.system)]};
    State x(pair.start, probe_rng.normal_matrix(pair.start.rows(), pair.start.cols()), sys);
    auto prop = flow->sample(FlowInput::repeat(pair.start, sys->atom_types, 1), probe_rng);
    State y(prop.positions, prop.auxiliaries, sys);
    alpha_sum += std::exp(mh_log_alpha(target, *flow, sys->atom_types, x, y));
  }
  const double probe = probe_idx.empty() ? 0.0 : alpha_sum / static_cast<double>(probe_idx.size());
  append_line(metrics, {{"stage", options.stage},
                        {"step", result.steps_done},
                        {"probe_pairs", probe_idx.size()},
                        {"probe_mean_acceptance", probe}});

  json summary{{"stage", options.stage},
               {"parameter_count", n_params},
               {"steps_done", result.steps_done},
               {"initial_val", result.initial_val},
               {"best_val", result.best_val},
               {"final_lr", result.final_lr},
               {"stopped_on_plateau", result.stopped_on_plateau},
               {"probe_mean_acceptance", probe},
               {"checkpoint", latest_checkpoint().string()}};
  json inputs{{"manifest", io::file_hash(dir() / "data" / "manifest.json")}};
  if (!resumed_from.empty()) inputs["resumed_from"] = {{"path", resumed_from}, {"hash", io::file_hash(resumed_from)}};
  record("train-" + options.stage, inputs, summary, seconds_since(t0));
  return summary;
}

json Run::sample(const SampleOptions& options) {
  const auto t0 = Clock::now();
  const fs::path ckpt = options.checkpoint.empty() ? latest_checkpoint() : fs::path(options.checkpoint);
  if (ckpt.empty()) throw std::runtime_error("sample: no checkpoint; train first or pass --checkpoint");
  auto loaded = io::load_checkpoint(ckpt);
  auto data = dataset();
  const auto idx = pick_system(data);
  const auto& sys = data.dataset.systems[idx];
  const AugmentedTarget target{data.potentials[idx]};
  RngStream rng(config_.seed, tag("sample"));
  const Matrix& x0 = data.trajectories[idx].frames.front();
  const State start(x0, rng.normal_matrix(x0.rows(), x0.cols()), sys);

  Chain chain = sample_mcmc(*loaded.flow, target, start, config_.sampler.steps, config_.sampler.batch, rng, constraint());
  chain.seed = config_.seed;
  chain.checkpoint_id = loaded.id;
  const fs::path out = options.output.empty() ? dir() / "chains" / ("sample-" + sys->name + ".twchain")
                                              : fs::path(options.output);
  io::write_chain(out, chain, "mcmc");

  json summary{{"chain", out.string()},
               {"system", sys->name},
               {"length", chain.size()},
               {"acceptance_rate", acceptance_rate(chain)},
               {"constraint_rejections", chain.constraint_rejections},
               {"nonfinite", chain.nonfinite},
               {"t_sampling", chain.t_sampling},
               {"aborted", chain.aborted},
               {"abort_reason", chain.abort_reason}};
  record("sample", {{"checkpoint", {{"path", ckpt.string()}, {"id", loaded.id}}}}, summary, seconds_since(t0));
  spdlog::info("sample: {} states, acceptance {:.4f}, {:.2f} s", chain.size(), acceptance_rate(chain),
               chain.t_sampling);
  return summary;
}

json Run::explore(const SampleOptions& options) {
  const auto t0 = Clock::now();
  const fs::path ckpt = options.checkpoint.empty() ? latest_checkpoint() : fs::path(options.checkpoint);
  if (ckpt.empty()) throw std::runtime_error("explore: no checkpoint; train first or pass --checkpoint");
  auto loaded = io::load_checkpoint(ckpt);
  auto data = dataset();
  const auto idx = pick_system(data);
  const auto& sys = data.dataset.systems[idx];
  const auto& potential = data.potentials[idx];
  RngStream rng(config_.seed, tag("explore"));
  const Matrix& x0 = data.trajectories[idx].frames.front();
  const State start(x0, Matrix::Zero(x0.rows(), x0.cols()), sys);

  ExploreConfig ec;
  ec.steps = config_.sampler.explore_steps;
  ec.chains = config_.sampler.explore_chains;
  ec.delta_u_max = config_.sampler.delta_u_max * potential.temperature();
  ec.threads = config_.threads;
  auto chains = tw::explore(*loaded.flow, potential, start, ec, rng, constraint());

  const fs::path out = options.output.empty() ? dir() / "chains" / ("explore-" + sys->name) : fs::path(options.output);
  fs::create_directories(out);
  double accepted = 0.0;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    chains[c].seed = config_.seed;
    chains[c].checkpoint_id = loaded.id;
    accepted += acceptance_rate(chains[c]);
    io::write_chain(out / fmt::format("chain-{:04d}.twchain", c), chains[c], "explore");
  }
  json summary{{"directory", out.string()},
               {"system", sys->name},
               {"chains", chains.size()},
               {"steps", ec.steps},
               {"delta_u_max", ec.delta_u_max},
               {"mean_acceptance", accepted / static_cast<double>(chains.size())},
               {"t_sampling", chains.empty() ? 0.0 : chains.front().t_sampling}};
  record("explore", {{"checkpoint", {{"path", ckpt.string()}, {"id", loaded.id}}}}, summary, seconds_since(t0));
  return summary;
}

json Run::analyze(const AnalyzeOptions& options) {
  const auto t0 = Clock::now();
  auto data = dataset();
  const auto idx = pick_system(data);
  const auto& cfg = config_.analysis;

  const fs::path chain_path = options.chain.empty()
                                  ? dir() / "chains" / ("sample-" + data.dataset.systems[idx]->name + ".twchain")
                                  : fs::path(options.chain);
  const Chain chain = io::read_chain(chain_path);
  // Potential and MD reference follow the chain's system when it is in the dataset.
  std::size_t sys_idx = idx;
  for (std::size_t i = 0; i < data.dataset.systems.size(); ++i) {
    if (data.dataset.systems[i]->name == chain.system->name) sys_idx = i;
  }
  const auto& potential = data.potentials[sys_idx];

  std::vector<Matrix> ref_frames;
  double ref_seconds = 0.0;
  std::string ref_label = "MD";
  fs::path ref_path;
  if (!options.reference.empty() && io::is_chain_file(options.reference)) {
    const Chain ref = io::read_chain(options.reference);
    ref_frames = chain_frames(ref);
    ref_seconds = ref.t_sampling;
    ref_label = "reference chain";
    ref_path = options.reference;
  } else {
    ref_path = options.reference.empty()
                   ? dir() / "data" / data.manifest.systems[sys_idx].trajectory_file
                   : fs::path(options.reference);
    const Trajectory traj = io::read_trajectory(ref_path);
    ref_frames = traj.frames;
    ref_seconds = options.reference_seconds;
    if (ref_seconds <= 0.0) {
      const auto timing = io::read_json(dir() / "data" / "timing.json");
      ref_seconds = timing.at(traj.system->name).at("wall_seconds").get<double>();
    }
  }

  const Matrix ref_feats = trajectory_features(ref_frames);
  const Matrix model_feats = chain_features(chain);
  const TicaModel tica = tica_fit(ref_feats, cfg.tica_lag);
  const int comp = std::min<int>(cfg.tic, static_cast<int>(tica.eigenvalues.size()) - 1);
  const Vector model_tic = tica.component(model_feats, comp);
  const Vector ref_tic = tica.component(ref_feats, comp);
  const std::span<const double> ms(model_tic.data(), static_cast<std::size_t>(model_tic.size()));
  const std::span<const double> rs(ref_tic.data(), static_cast<std::size_t>(ref_tic.size()));

  json report;
  report["system"] = chain.system->name;
  report["chain"] = chain_path.string();
  report["reference"] = {{"path", ref_path.string()}, {"label", ref_label}, {"seconds", ref_seconds},
                         {"frames", ref_frames.size()}};
  report["tica"] = {{"lag", tica.lag}, {"eigenvalues", std::vector<double>(tica.eigenvalues.data(),
                                                                           tica.eigenvalues.data() +
                                                                               tica.eigenvalues.size())},
                    {"component", comp}};
  report["acceptance_rate"] = acceptance_rate(chain);
  auto ess_json = [&](std::span<const double> s, double t) -> json {
    try {
      const auto e = ess(s, t, cfg.ess_threshold);
      return {{"m_eff", e.m_eff}, {"ess_per_second", e.ess_per_second}, {"cutoff", e.cutoff},
              {"fallback", e.fallback}, {"length", s.size()}, {"seconds", t}};
    } catch (const std::exception& ex) {
      return {{"error", ex.what()}};
    }
  };
  report["model_ess"] = ess_json(ms, chain.t_sampling);
  report["reference_ess"] = ess_json(rs, ref_seconds);
  try {
    report["speedup"] = speedup_factor(model_feats, chain.t_sampling, ref_feats, ref_seconds, tica, comp,
                                       cfg.ess_threshold);
  } catch (const std::exception& ex) {
    report["speedup"] = nullptr;
    report["speedup_error"] = ex.what();
    spdlog::warn("analyze: speed-up undefined: {}", ex.what());
  }

  double lo = std::min(model_tic.minCoeff(), ref_tic.minCoeff());
  double hi = std::max(model_tic.maxCoeff(), ref_tic.maxCoeff());
  if (hi <= lo) hi = lo + 1.0;
  const double temperature = potential.temperature();
  const auto fe_model = free_energy_profile(ms, cfg.free_energy_bins, temperature, std::pair{lo, hi});
  const auto fe_ref = free_energy_profile(rs, cfg.free_energy_bins, temperature, std::pair{lo, hi});
  report["free_energy"] = {{"model", profile_json(fe_model)}, {"reference", profile_json(fe_ref)}};

  const auto plots = dir() / "reports" / "plots";
  fs::create_directories(plots);
  const std::vector<double> mv(ms.begin(), ms.end()), rv(rs.begin(), rs.end());
  if (tica.eigenvalues.size() >= 2) {
    const Vector m1 = tica.component(model_feats, 1 - std::min(comp, 1));
    const Vector r1 = tica.component(ref_feats, 1 - std::min(comp, 1));
    write_scatter_plot(plots / "tic_scatter.svg", "TIC projection", "TIC " + std::to_string(comp),
                       "TIC " + std::to_string(1 - std::min(comp, 1)),
                       {{ref_label, rv, std::vector<double>(r1.data(), r1.data() + r1.size())},
                        {"model", mv, std::vector<double>(m1.data(), m1.data() + m1.size())}});
  } else {
    auto index = [](std::size_t n) {
      std::vector<double> x(n);
      std::iota(x.begin(), x.end(), 0.0);
      return x;
    };
    write_line_plot(plots / "tic_trace.svg", "TIC trace", "frame", "TIC 0",
                    {{ref_label, index(rv.size()), rv}, {"model", index(mv.size()), mv}});
  }
  write_line_plot(plots / "free_energy.svg", "Free energy", "TIC " + std::to_string(comp), "F / T",
                  {profile_series(ref_label, fe_ref), profile_series("model", fe_model)});
  write_histogram_plot(plots / "energy.svg", "Potential energy", "U",
                       {{ref_label, frame_energies(ref_frames, potential)}, {"model", chain.energies}}, 40);
  const int max_lag = static_cast<int>(std::min<std::size_t>(200, std::min(mv.size(), rv.size()) - 1));
  if (max_lag >= 1) {
    std::vector<double> lags(static_cast<std::size_t>(max_lag));
    std::iota(lags.begin(), lags.end(), 1.0);
    try {
      write_line_plot(plots / "autocorrelation.svg", "Autocorrelation", "lag", "rho",
                      {{ref_label, lags, autocorrelation(rs, max_lag)}, {"model", lags, autocorrelation(ms, max_lag)}});
    } catch (const std::exception& ex) {
      spdlog::warn("analyze: autocorrelation plot skipped: {}", ex.what());
    }
  }

  // Exploration chains: the selected-chain convention (widest coverage of
  // the TIC) alongside the all-chains aggregate.
  const auto explore_dir = dir() / "chains" / ("explore-" + chain.system->name);
  if (fs::is_directory(explore_dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(explore_dir)) {
      if (e.path().extension() == ".twchain") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Chain> chains;
    for (const auto& f : files) chains.push_back(io::read_chain(f));
    if (!chains.empty()) {
      std::size_t best = 0;
      double best_span = -1.0, m_eff_sum = 0.0;
      json per_chain = json::array();
      for (std::size_t c = 0; c < chains.size(); ++c) {
        const Vector tic = tica.component(chain_features(chains[c]), comp);
        const double span = tic.maxCoeff() - tic.minCoeff();
        double m_eff = 0.0;
        try {
          m_eff = ess(std::span<const double>(tic.data(), static_cast<std::size_t>(tic.size())), 1.0,
                      cfg.ess_threshold).m_eff;
        } catch (const std::exception&) {
        }
        m_eff_sum += m_eff;
        per_chain.push_back({{"tic_min", tic.minCoeff()}, {"tic_max", tic.maxCoeff()}, {"m_eff", m_eff}});
        if (span > best_span) best_span = span, best = c;
      }
      const double t_explore = chains.front().t_sampling;
      report["explore"] = {{"convention", "selected chain = widest TIC coverage; aggregate = all chains"},
                           {"chains", chains.size()},
                           {"selected", best},
                           {"selected_ess_per_second", t_explore > 0 ? per_chain[best]["m_eff"].get<double>() / t_explore
                                                                     : 0.0},
                           {"aggregate_ess_per_second", t_explore > 0 ? m_eff_sum / t_explore : 0.0},
                           {"per_chain", per_chain}};
      if (cfg.validate_new_states) {
        LangevinParams params;
        params.timestep = config_.dynamics.timestep;
        params.friction = config_.dynamics.friction;
        params.temperature = temperature;
        params.blowup_energy = config_.dynamics.blowup_energy;
        ValidationConfig vc = cfg.validation;
        vc.threads = config_.threads;
        RngStream vrng(config_.seed, tag("validate"));
        const auto v = validate_new_states(ref_frames, chains, data.dataset.systems[sys_idx], potential, params, vc,
                                           vrng);
        json cands = json::array();
        for (const auto& c : v.candidates) {
          cands.push_back({{"center", std::vector<double>(c.center.data(), c.center.data() + c.center.size())},
                           {"radius", c.radius},
                           {"points", c.points},
                           {"stay", c.stay},
                           {"known", c.known},
                           {"validated", c.validated}});
        }
        report["new_states"] = {{"none_found", v.none_found()}, {"candidates", cands}};
      }
    }
  }

  io::write_json(dir() / "reports" / "analysis.json", report);
  json inputs{{"chain", {{"path", chain_path.string()}, {"hash", io::file_hash(chain_path)}}},
              {"reference", {{"path", ref_path.string()}, {"hash", io::file_hash(ref_path)}}}};
  json summary{{"report", (dir() / "reports" / "analysis.json").string()}, {"speedup", report["speedup"]}};
  record("analyze", inputs, summary, seconds_since(t0));
  return report;
}

json Run::eval_conditional(const ConditionalOptions& options) {
  const auto t0 = Clock::now();
  auto data = dataset();
  const auto idx = pick_system(data);
  const auto& sys = data.dataset.systems[idx];
  const auto& potential = data.potentials[idx];
  const auto& frames = data.trajectories[idx].frames;
  const auto& cfg = config_.analysis;
  if (cfg.conditional_frame < 0 || static_cast<std::size_t>(cfg.conditional_frame) >= frames.size()) {
    throw ConfigError("analysis.conditional_frame is outside the trajectory");
  }
  const Matrix& x_start = frames[static_cast<std::size_t>(cfg.conditional_frame)];

  LangevinParams params;
  params.timestep = config_.dynamics.timestep;
  params.friction = config_.dynamics.friction;
  params.temperature = potential.temperature();
  params.blowup_energy = config_.dynamics.blowup_energy;
  const ConditionalSampler reference =
      dynamics_conditional(sys, potential, params, config_.dynamics.spacing, config_.threads);

  std::unique_ptr<ConditionalFlow> flow;
  json inputs = json::object();
  ConditionalSampler model;
  if (options.self_compare) {
    model = reference;
  } else {
    const fs::path ckpt = options.checkpoint.empty() ? latest_checkpoint() : fs::path(options.checkpoint);
    if (ckpt.empty()) throw std::runtime_error("eval-conditional: no checkpoint; train first or pass --checkpoint");
    auto loaded = io::load_checkpoint(ckpt);
    flow = std::move(loaded.flow);
    model = flow_conditional(*flow, sys->atom_types);
    inputs["checkpoint"] = {{"path", ckpt.string()}, {"id", loaded.id}};
  }
  RngStream rng(config_.seed, tag("eval-conditional"));
  const auto r = compare_conditionals(model, reference, potential, *sys, x_start, cfg.conditional_samples, rng);

  json bonds = json::array();
  for (const auto& b : r.bonds) bonds.push_back(ks_json(b));
  bool distributions_match = r.energy.p_value > 0.01 && r.projection.p_value > 0.01;
  for (const auto& b : r.bonds) distributions_match = distributions_match && b.p_value > 0.01;
  const bool bonds_ok = r.bonds.empty() || r.max_bond_ks < cfg.bond_ks_threshold;
  json report{{"system", sys->name},
              {"self_compare", options.self_compare},
              {"frame", cfg.conditional_frame},
              {"samples", cfg.conditional_samples},
              {"energy", ks_json(r.energy)},
              {"projection", ks_json(r.projection)},
              {"bonds", bonds},
              {"max_bond_ks", r.max_bond_ks},
              {"bond_ks_threshold", cfg.bond_ks_threshold},
              {"mean_energy_gap", r.mean_energy_gap},
              {"energy_mismatch", r.energy_mismatch},
              {"distributions_match", distributions_match},
              {"bonds_within_threshold", bonds_ok}};

  const std::string stem = options.self_compare ? "conditional-self" : "conditional";
  const auto plots = dir() / "reports" / "plots";
  fs::create_directories(plots);
  const std::string model_label = options.self_compare ? "dynamics (replica)" : "model";
  write_histogram_plot(plots / (stem + "-energy.svg"), "Conditional potential energy", "U",
                       {{"dynamics", r.reference_energy}, {model_label, r.model_energy}}, 40);
  write_histogram_plot(plots / (stem + "-projection.svg"), "Conditional first descriptor", "feature 0",
                       {{"dynamics", r.reference_projection}, {model_label, r.model_projection}}, 40);
  if (!r.model_bonds.empty()) {
    std::vector<double> mb, rb;
    for (const auto& b : r.model_bonds) mb.insert(mb.end(), b.begin(), b.end());
    for (const auto& b : r.reference_bonds) rb.insert(rb.end(), b.begin(), b.end());
    write_histogram_plot(plots / (stem + "-bonds.svg"), "Conditional bond lengths", "r",
                         {{"dynamics", rb}, {model_label, mb}}, 60);
  }
  io::write_json(dir() / "reports" / (stem + ".json"), report);
  record("eval-conditional", inputs, report, seconds_since(t0));
  return report;
}

}  // namespace tw
