#pragma once

// File formats. Structured documents are JSON; bulk arrays use
//
//   magic (8 bytes) | header length (uint32 LE) | JSON header | payload
//
// with every payload number stored little-endian.

#include "timewarp/analysis.hpp"

#include <json.hpp>

namespace tw::io {

using json = nlohmann::json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kFormatVersion = 1;

// SystemSpec documents.
json to_json(const SystemSpec& spec);
/// Rejects unknown keys and unsupported format versions, then validates.
SystemSpec system_from_json(const json& doc);
void save_system(const std::filesystem::path& path, const SystemSpec& spec);
SystemSpec load_system(const std::filesystem::path& path);

// Potentials: {"kind", "temperature", ...parameters}. Bead chains take
// their parameters from the system.
json to_json(const Potential& potential);
Potential potential_from_json(const json& doc, const SystemPtr& system);

json to_json(const LangevinParams& params);
LangevinParams langevin_from_json(const json& doc);

// Trajectories: frames as float64, frame-major, row-major within a frame.
void write_trajectory(const std::filesystem::path& path, const Trajectory& trajectory);
Trajectory read_trajectory(const std::filesystem::path& path);

// Chains. Payload order: initial frame, frames, accepted (uint8 per step),
// batch_index (int64 per step), energies (float64 per step).
void write_chain(const std::filesystem::path& path, const Chain& chain, const std::string& mode = "mcmc");
Chain read_chain(const std::filesystem::path& path);

/// True when the file starts with the chain magic.
bool is_chain_file(const std::filesystem::path& path);

// Checkpoints: flow architecture, named parameter arrays with Adam moments,
// and free-form metadata. The payload hash is verified on load.
struct CheckpointInfo {
  std::string stage;
  long long step = 0;
  double val_loss = 0.0;
  double lr = 0.0;
  std::uint64_t flow_seed = 0;
};

/// Returns the payload hash (hex), which doubles as the checkpoint id.
std::string save_checkpoint(const std::filesystem::path& path, const ConditionalFlow& flow,
                            const CheckpointInfo& info);

struct LoadedCheckpoint {
  std::unique_ptr<ConditionalFlow> flow;
  CheckpointInfo info;
  std::string id;
};
/// Throws FormatError when the stored hash does not match the payload.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

json to_json(const FlowConfig& config);
FlowConfig flow_config_from_json(const json& doc);

// Pair dataset manifests.
struct ManifestEntry {
  std::string name;
  Split split = Split::Train;
  std::string system_file;      ///< relative to the manifest directory
  std::string trajectory_file;  ///< relative to the manifest directory
  std::string trajectory_hash;
  json potential;
  std::vector<int> pair_frames;
  std::vector<Split> pair_splits;
};

struct Manifest {
  int spacing = 1;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> systems;
};

void write_manifest(const std::filesystem::path& path, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& path);

struct LoadedDataset {
  PairDataset dataset;
  std::vector<Potential> potentials;  ///< one per system
  std::vector<Trajectory> trajectories;
  Manifest manifest;
};
/// Reads every referenced file, checks trajectory hashes, rebuilds pairs.
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

/// FNV-1a 64-bit hash, printed as 16 hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);
std::string file_hash(const std::filesystem::path& path);

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& doc);

}  // namespace tw::io
