#include "timewarp/io.hpp"

#include <spdlog/spdlog.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace tw::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr char kTrajMagic[8] = {'T', 'W', 'T', 'R', 'A', 'J', '\0', '\0'};
constexpr char kChainMagic[8] = {'T', 'W', 'C', 'H', 'A', 'I', 'N', '\0'};
constexpr char kCkptMagic[8] = {'T', 'W', 'C', 'K', 'P', 'T', '\0', '\0'};

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw FormatError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw FormatError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw FormatError(where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad value for '" + key + "': " + e.what());
  }
}

template <typename T>
T optional_or(const json& obj, const char* key, T fallback) {
  return obj.contains(key) ? obj.at(key).get<T>() : fallback;
}

void check_version(const json& doc, const std::string& where) {
  const int v = required<int>(doc, "format_version", where);
  if (v != kFormatVersion) {
    throw FormatError(where + ": unsupported format_version " + std::to_string(v) + " (expected " +
                      std::to_string(kFormatVersion) + ")");
  }
}

class ByteWriter {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  template <typename T>
  void put_span(std::span<const T> v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    bytes.insert(bytes.end(), p, p + v.size_bytes());
  }
  void put_matrix(const Matrix& m) { put_span(std::span<const double>(m.data(), static_cast<std::size_t>(m.size()))); }

  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string where) : bytes_(bytes), where_(std::move(where)) {}

  template <typename T>
  void get_into(T* out, std::size_t count) {
    const std::size_t n = count * sizeof(T);
    if (pos_ + n > bytes_.size()) throw FormatError(where_ + ": truncated payload");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  Matrix get_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    get_into(m.data(), static_cast<std::size_t>(m.size()));
    return m;
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw FormatError(where_ + ": trailing bytes in payload");
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

void write_container(const std::filesystem::path& path, const char (&magic)[8], const json& header,
                     const std::vector<std::uint8_t>& payload) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(magic, 8);
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::pair<json, std::vector<std::uint8_t>> read_container(const std::filesystem::path& path,
                                                         const char (&magic)[8]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char got[8];
  in.read(got, 8);
  if (!in || std::memcmp(got, magic, 8) != 0) throw FormatError(path.string() + ": bad magic");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw FormatError(path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": header is not JSON: " + e.what());
  }
  std::vector<std::uint8_t> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {std::move(header), std::move(payload)};
}

}  // namespace

// ---------------------------------------------------------------- systems

json to_json(const SystemSpec& spec) {
  json doc;
  doc["format_version"] = kFormatVersion;
  doc["name"] = spec.name;
  doc["n_atoms"] = spec.n_atoms;
  doc["dimension"] = spec.dimension;
  doc["atom_types"] = spec.atom_types;
  doc["masses"] = spec.masses;
  doc["nonbonded_sigma"] = spec.nonbonded_sigma;
  doc["bonds"] = json::array();
  for (const auto& b : spec.bonds) doc["bonds"].push_back({{"i", b.i}, {"j", b.j}, {"k", b.k}, {"r0", b.r0}});
  doc["angles"] = json::array();
  for (const auto& a : spec.angles) {
    doc["angles"].push_back({{"i", a.i}, {"j", a.j}, {"k", a.k}, {"k_a", a.k_a}, {"theta0", a.theta0}});
  }
  doc["dihedrals"] = json::array();
  for (const auto& d : spec.dihedrals) {
    doc["dihedrals"].push_back(
        {{"i", d.i}, {"j", d.j}, {"k", d.k}, {"l", d.l}, {"k_d", d.k_d}, {"n", d.n}, {"phi0", d.phi0}});
  }
  return doc;
}

SystemSpec system_from_json(const json& doc) {
  const std::string where = "system";
  check_keys(doc, {"format_version", "name", "n_atoms", "dimension", "atom_types", "masses", "nonbonded_sigma",
                   "bonds", "angles", "dihedrals"},
             where);
  check_version(doc, where);
  SystemSpec s;
  s.name = required<std::string>(doc, "name", where);
  s.n_atoms = required<int>(doc, "n_atoms", where);
  s.dimension = required<int>(doc, "dimension", where);
  s.atom_types = required<std::vector<int>>(doc, "atom_types", where);
  s.masses = required<std::vector<double>>(doc, "masses", where);
  s.nonbonded_sigma = optional_or(doc, "nonbonded_sigma", 1.0);
  for (const auto& b : doc.value("bonds", json::array())) {
    check_keys(b, {"i", "j", "k", "r0"}, where + ".bonds");
    s.bonds.push_back({required<int>(b, "i", where), required<int>(b, "j", where), required<double>(b, "k", where),
                       required<double>(b, "r0", where)});
  }
  for (const auto& a : doc.value("angles", json::array())) {
    check_keys(a, {"i", "j", "k", "k_a", "theta0"}, where + ".angles");
    s.angles.push_back({required<int>(a, "i", where), required<int>(a, "j", where), required<int>(a, "k", where),
                        required<double>(a, "k_a", where), required<double>(a, "theta0", where)});
  }
  for (const auto& d : doc.value("dihedrals", json::array())) {
    check_keys(d, {"i", "j", "k", "l", "k_d", "n", "phi0"}, where + ".dihedrals");
    s.dihedrals.push_back({required<int>(d, "i", where), required<int>(d, "j", where), required<int>(d, "k", where),
                           required<int>(d, "l", where), required<double>(d, "k_d", where),
                           required<int>(d, "n", where), required<double>(d, "phi0", where)});
  }
  s.validate();
  return s;
}

void save_system(const std::filesystem::path& path, const SystemSpec& spec) { write_json(path, to_json(spec)); }

SystemSpec load_system(const std::filesystem::path& path) { return system_from_json(read_json(path)); }

// ------------------------------------------------------------- potentials

json to_json(const Potential& potential) {
  json doc{{"kind", potential.kind_name()}, {"temperature", potential.temperature()}};
  if (const auto* dw = potential.double_well_params()) {
    doc["barrier"] = dw->barrier;
    doc["offset"] = dw->offset;
  } else if (const auto* mb = potential.mueller_brown_params()) {
    doc["scale"] = mb->scale;
  }
  return doc;
}

Potential potential_from_json(const json& doc, const SystemPtr& system) {
  const std::string where = "potential";
  const auto kind = required<std::string>(doc, "kind", where);
  const double t = required<double>(doc, "temperature", where);
  if (kind == "double_well") {
    check_keys(doc, {"kind", "temperature", "barrier", "offset"}, where);
    DoubleWellParams p;
    p.barrier = optional_or(doc, "barrier", p.barrier);
    p.offset = optional_or(doc, "offset", p.offset);
    return Potential::double_well(p, t);
  }
  if (kind == "mueller_brown") {
    check_keys(doc, {"kind", "temperature", "scale"}, where);
    MuellerBrownParams p;
    p.scale = optional_or(doc, "scale", p.scale);
    return Potential::mueller_brown(p, t);
  }
  if (kind == "bead_chain") {
    check_keys(doc, {"kind", "temperature"}, where);
    if (!system) throw FormatError("potential: bead_chain needs a system");
    return Potential::bead_chain(system, t);
  }
  throw FormatError("potential: unknown kind '" + kind + "'");
}

json to_json(const LangevinParams& params) {
  return {{"timestep", params.timestep},
          {"friction", params.friction},
          {"temperature", params.temperature},
          {"blowup_energy", params.blowup_energy}};
}

LangevinParams langevin_from_json(const json& doc) {
  check_keys(doc, {"timestep", "friction", "temperature", "blowup_energy"}, "dynamics params");
  LangevinParams p;
  p.timestep = required<double>(doc, "timestep", "dynamics params");
  p.friction = required<double>(doc, "friction", "dynamics params");
  p.temperature = required<double>(doc, "temperature", "dynamics params");
  p.blowup_energy = optional_or(doc, "blowup_energy", p.blowup_energy);
  return p;
}

// ----------------------------------------------------------- trajectories

void write_trajectory(const std::filesystem::path& path, const Trajectory& trajectory) {
  if (!trajectory.system) throw std::invalid_argument("write_trajectory: trajectory has no system");
  const auto& sys = *trajectory.system;
  json header{{"format_version", kFormatVersion},
              {"system", to_json(sys)},
              {"n_atoms", sys.n_atoms},
              {"dimension", sys.dimension},
              {"n_frames", trajectory.frames.size()},
              {"spacing", trajectory.spacing},
              {"params", to_json(trajectory.params)},
              {"potential_kind", trajectory.potential_kind}};
  ByteWriter w;
  for (const auto& f : trajectory.frames) {
    if (f.rows() != sys.n_atoms || f.cols() != sys.dimension) {
      throw std::invalid_argument("write_trajectory: frame shape does not match the system");
    }
    w.put_matrix(f);
  }
  write_container(path, kTrajMagic, header, w.bytes);
}

Trajectory read_trajectory(const std::filesystem::path& path) {
  auto [header, payload] = read_container(path, kTrajMagic);
  const std::string where = path.string();
  check_version(header, where);
  Trajectory t;
  t.system = std::make_shared<const SystemSpec>(system_from_json(header.at("system")));
  t.spacing = required<int>(header, "spacing", where);
  t.params = langevin_from_json(header.at("params"));
  t.potential_kind = required<std::string>(header, "potential_kind", where);
  const auto n = required<std::size_t>(header, "n_frames", where);
  ByteReader r(payload, where);
  t.frames.reserve(n);
  for (std::size_t i = 0; i < n; ++i) t.frames.push_back(r.get_matrix(t.system->n_atoms, t.system->dimension));
  r.finish();
  return t;
}

// ----------------------------------------------------------------- chains

void write_chain(const std::filesystem::path& path, const Chain& chain, const std::string& mode) {
  if (!chain.system) throw std::invalid_argument("write_chain: chain has no system");
  json header{{"format_version", kFormatVersion},
              {"mode", mode},
              {"system", to_json(*chain.system)},
              {"n_atoms", chain.n_atoms},
              {"dimension", chain.dimension},
              {"n_frames", chain.size()},
              {"requested", chain.requested},
              {"batch", chain.batch},
              {"seed", chain.seed},
              {"checkpoint_id", chain.checkpoint_id},
              {"t_sampling", chain.t_sampling},
              {"t_sampling_excludes_model_load", true},
              {"acceptance_count", chain.acceptance_count},
              {"proposals", chain.proposals},
              {"constraint_rejections", chain.constraint_rejections},
              {"nonfinite", chain.nonfinite},
              {"energy_evaluations", chain.energy_evaluations},
              {"aborted", chain.aborted},
              {"abort_reason", chain.abort_reason}};
  ByteWriter w;
  w.put_matrix(chain.initial);
  w.put_span(std::span<const double>(chain.positions));
  w.put_span(std::span<const std::uint8_t>(chain.accepted));
  w.put_span(std::span<const std::int64_t>(chain.batch_index));
  w.put_span(std::span<const double>(chain.energies));
  write_container(path, kChainMagic, header, w.bytes);
}

Chain read_chain(const std::filesystem::path& path) {
  auto [header, payload] = read_container(path, kChainMagic);
  const std::string where = path.string();
  check_version(header, where);
  Chain c;
  c.system = std::make_shared<const SystemSpec>(system_from_json(header.at("system")));
  c.n_atoms = required<int>(header, "n_atoms", where);
  c.dimension = required<int>(header, "dimension", where);
  const auto n = required<std::size_t>(header, "n_frames", where);
  c.requested = required<long long>(header, "requested", where);
  c.batch = required<int>(header, "batch", where);
  c.seed = required<std::uint64_t>(header, "seed", where);
  c.checkpoint_id = required<std::string>(header, "checkpoint_id", where);
  c.t_sampling = required<double>(header, "t_sampling", where);
  c.acceptance_count = required<long long>(header, "acceptance_count", where);
  c.proposals = required<long long>(header, "proposals", where);
  c.constraint_rejections = required<long long>(header, "constraint_rejections", where);
  c.nonfinite = required<long long>(header, "nonfinite", where);
  c.energy_evaluations = required<long long>(header, "energy_evaluations", where);
  c.aborted = required<bool>(header, "aborted", where);
  c.abort_reason = required<std::string>(header, "abort_reason", where);

  const std::size_t per = static_cast<std::size_t>(c.n_atoms) * static_cast<std::size_t>(c.dimension);
  ByteReader r(payload, where);
  c.initial = r.get_matrix(c.n_atoms, c.dimension);
  c.positions.resize(n * per);
  r.get_into(c.positions.data(), c.positions.size());
  c.accepted.resize(n);
  r.get_into(c.accepted.data(), n);
  c.batch_index.resize(n);
  r.get_into(c.batch_index.data(), n);
  c.energies.resize(n);
  r.get_into(c.energies.data(), n);
  r.finish();
  return c;
}

bool is_chain_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char got[8] = {};
  in.read(got, 8);
  return in && std::memcmp(got, kChainMagic, 8) == 0;
}

// ------------------------------------------------------------ checkpoints

json to_json(const FlowConfig& c) {
  return {{"dimension", c.dimension},     {"n_coupling", c.n_coupling},   {"n_transformer", c.n_transformer},
          {"feature_dim", c.feature_dim}, {"embedding_dim", c.embedding_dim}, {"mlp_hidden", c.mlp_hidden},
          {"lengthscales", c.lengthscales}, {"vocab_size", c.vocab_size}, {"scale_clamp", c.scale_clamp},
          {"layer_norm", c.layer_norm}};
}

FlowConfig flow_config_from_json(const json& doc) {
  const std::string where = "flow";
  check_keys(doc, {"dimension", "n_coupling", "n_transformer", "feature_dim", "embedding_dim", "mlp_hidden",
                   "lengthscales", "vocab_size", "scale_clamp", "layer_norm"},
             where);
  FlowConfig c;
  c.dimension = optional_or(doc, "dimension", c.dimension);
  c.n_coupling = optional_or(doc, "n_coupling", c.n_coupling);
  c.n_transformer = optional_or(doc, "n_transformer", c.n_transformer);
  c.feature_dim = optional_or(doc, "feature_dim", c.feature_dim);
  c.embedding_dim = optional_or(doc, "embedding_dim", c.embedding_dim);
  c.mlp_hidden = optional_or(doc, "mlp_hidden", c.mlp_hidden);
  c.lengthscales = optional_or(doc, "lengthscales", c.lengthscales);
  c.vocab_size = optional_or(doc, "vocab_size", c.vocab_size);
  c.scale_clamp = optional_or(doc, "scale_clamp", c.scale_clamp);
  c.layer_norm = optional_or(doc, "layer_norm", c.layer_norm);
  c.validate();
  return c;
}

std::string save_checkpoint(const std::filesystem::path& path, const ConditionalFlow& flow,
                            const CheckpointInfo& info) {
  const auto& store = flow.params();
  json params = json::array();
  ByteWriter w;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const int k = static_cast<int>(i);
    const Matrix& value = store.value(k);
    params.push_back({{"name", store.name(k)}, {"rows", value.rows()}, {"cols", value.cols()}});
    w.put_matrix(value);
    const Matrix& m = store.adam_m(k);
    const Matrix& v = store.adam_v(k);
    w.put_matrix(m.size() == value.size() ? m : Matrix::Zero(value.rows(), value.cols()));
    w.put_matrix(v.size() == value.size() ? v : Matrix::Zero(value.rows(), value.cols()));
  }
  const std::string hash = fnv1a_hex(w.bytes);
  json header{{"format_version", kFormatVersion},
              {"flow", to_json(flow.config())},
              {"params", params},
              {"adam_steps", store.adam_steps()},
              {"stage", info.stage},
              {"step", info.step},
              {"val_loss", info.val_loss},
              {"lr", info.lr},
              {"flow_seed", info.flow_seed},
              {"payload_hash", hash}};
  write_container(path, kCkptMagic, header, w.bytes);
  return hash;
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto [header, payload] = read_container(path, kCkptMagic);
  const std::string where = path.string();
  check_version(header, where);
  const auto stored = required<std::string>(header, "payload_hash", where);
  const std::string actual = fnv1a_hex(payload);
  if (stored != actual) {
    throw FormatError(where + ": checkpoint hash mismatch (stored " + stored + ", payload " + actual +
                      "); refusing to load");
  }
  LoadedCheckpoint out;
  out.id = actual;
  out.info.stage = required<std::string>(header, "stage", where);
  out.info.step = required<long long>(header, "step", where);
  out.info.val_loss = required<double>(header, "val_loss", where);
  out.info.lr = required<double>(header, "lr", where);
  out.info.flow_seed = required<std::uint64_t>(header, "flow_seed", where);
  out.flow = std::make_unique<ConditionalFlow>(flow_config_from_json(header.at("flow")), out.info.flow_seed);
  auto& store = out.flow->params();
  const auto& params = header.at("params");
  if (params.size() != store.size()) throw FormatError(where + ": parameter count does not match the architecture");
  ByteReader r(payload, where);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const int k = static_cast<int>(i);
    const auto name = params[i].at("name").get<std::string>();
    const auto rows = params[i].at("rows").get<Eigen::Index>();
    const auto cols = params[i].at("cols").get<Eigen::Index>();
    if (name != store.name(k) || rows != store.value(k).rows() || cols != store.value(k).cols()) {
      throw FormatError(where + ": parameter '" + name + "' does not match the architecture");
    }
    store.value(k) = r.get_matrix(rows, cols);
    store.adam_m(k) = r.get_matrix(rows, cols);
    store.adam_v(k) = r.get_matrix(rows, cols);
  }
  r.finish();
  store.set_adam_steps(required<long long>(header, "adam_steps", where));
  return out;
}

// -------------------------------------------------------------- manifests

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
  json systems = json::array();
  for (const auto& e : manifest.systems) {
    std::vector<std::string> splits;
    for (auto s : e.pair_splits) splits.emplace_back(split_name(s));
    systems.push_back({{"name", e.name},
                       {"split", split_name(e.split)},
                       {"system_file", e.system_file},
                       {"trajectory_file", e.trajectory_file},
                       {"trajectory_hash", e.trajectory_hash},
                       {"potential", e.potential},
                       {"n_pairs", e.pair_frames.size()},
                       {"pair_frames", e.pair_frames},
                       {"pair_splits", splits}});
  }
  write_json(path, {{"format_version", kFormatVersion},
                    {"spacing", manifest.spacing},
                    {"seed", manifest.seed},
                    {"systems", systems}});
}

Manifest read_manifest(const std::filesystem::path& path) {
  const json doc = read_json(path);
  const std::string where = path.string();
  check_keys(doc, {"format_version", "spacing", "seed", "systems"}, where);
  check_version(doc, where);
  Manifest m;
  m.spacing = required<int>(doc, "spacing", where);
  m.seed = required<std::uint64_t>(doc, "seed", where);
  for (const auto& s : doc.at("systems")) {
    check_keys(s, {"name", "split", "system_file", "trajectory_file", "trajectory_hash", "potential", "n_pairs",
                   "pair_frames", "pair_splits"},
               where + ".systems");
    ManifestEntry e;
    e.name = required<std::string>(s, "name", where);
    e.split = parse_split(required<std::string>(s, "split", where));
    e.system_file = required<std::string>(s, "system_file", where);
    e.trajectory_file = required<std::string>(s, "trajectory_file", where);
    e.trajectory_hash = required<std::string>(s, "trajectory_hash", where);
    e.potential = s.at("potential");
    e.pair_frames = required<std::vector<int>>(s, "pair_frames", where);
    for (const auto& t : required<std::vector<std::string>>(s, "pair_splits", where)) {
      e.pair_splits.push_back(parse_split(t));
    }
    if (e.pair_splits.size() != e.pair_frames.size()) throw FormatError(where + ": pair_splits length mismatch");
    if (required<std::size_t>(s, "n_pairs", where) != e.pair_frames.size()) {
      throw FormatError(where + ": n_pairs does not match pair_frames");
    }
    m.systems.push_back(std::move(e));
  }
  return m;
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  LoadedDataset out;
  out.manifest = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  for (std::size_t s = 0; s < out.manifest.systems.size(); ++s) {
    const auto& e = out.manifest.systems[s];
    const auto traj_path = dir / e.trajectory_file;
    const std::string hash = file_hash(traj_path);
    if (hash != e.trajectory_hash) {
      throw FormatError(traj_path.string() + ": hash " + hash + " does not match manifest " + e.trajectory_hash);
    }
    auto system = std::make_shared<const SystemSpec>(load_system(dir / e.system_file));
    Trajectory traj = read_trajectory(traj_path);
    if (traj.system->name != system->name) throw FormatError(traj_path.string() + ": system name mismatch");
    traj.system = system;
    out.dataset.systems.push_back(system);
    out.dataset.system_split.push_back(e.split);
    out.potentials.push_back(potential_from_json(e.potential, system));
    for (std::size_t k = 0; k < e.pair_frames.size(); ++k) {
      const int f = e.pair_frames[k];
      if (f < 0 || static_cast<std::size_t>(f) + 1 >= traj.frames.size()) {
        throw FormatError(manifest_path.string() + ": pair frame out of range for " + e.name);
      }
      out.dataset.pairs.push_back({static_cast<int>(s), f, traj.spacing, traj.frames[static_cast<std::size_t>(f)],
                                   traj.frames[static_cast<std::size_t>(f) + 1]});
      out.dataset.pair_split.push_back(e.pair_splits[k]);
    }
    out.trajectories.push_back(std::move(traj));
  }
  out.dataset.check_split_hygiene();
  return out;
}

// ------------------------------------------------------------------ misc

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace tw::io
