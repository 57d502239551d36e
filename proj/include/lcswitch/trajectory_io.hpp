#pragma once

// Bit-exact trajectory storage and the ensemble manifest.
//
// File layout (all little-endian):
//   magic "LCSWTRJ1" | u32 version | u32 scheme | u64 seed | u64 index
//   f64 aleph | i32 n_a_max | i32 n_b_max | f64 dt_sample | f64 transient_cut
//   f64 time_factor | u64 n_samples | u64 n_jumps | u8 truncation_warning
//   7 zero bytes | f64 max_edge_population
//   then 7 columns of n_samples f64: t, n_a, n_b, Re alpha, Im alpha, Re beta, Im beta
//   then n_jumps entries of (f64 t, u8 channel).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcswitch/qjump.hpp"

namespace lcswitch {

inline constexpr std::uint32_t kTrajectoryFormatVersion = 1;

void write_trajectory(const std::filesystem::path& path, const TrajectoryRecord& record);
/// Throws IntegrityError on a bad magic, version, or truncated file.
TrajectoryRecord read_trajectory(const std::filesystem::path& path);
/// Serialized bytes (what write_trajectory puts on disk).
std::string encode_trajectory(const TrajectoryRecord& record);
TrajectoryRecord decode_trajectory(const std::string& bytes, const std::string& origin = "<memory>");

/// Interchange copy: one row per sample.
void write_trajectory_csv(const std::filesystem::path& path, const TrajectoryRecord& record);

struct ManifestEntry {
  std::string file;  ///< relative to the manifest directory
  std::uint64_t index = 0;
  std::uint64_t seed = 0;
  std::size_t samples = 0;
  std::size_t jumps = 0;
  bool truncation_warning = false;
  double max_edge_population = 0.0;
  std::uintmax_t size = 0;
  std::string sha256;
};

struct EnsembleManifest {
  ScalingPlan plan{};
  FockCutoffs cutoffs{};
  EnsembleSpec spec{};
  std::uint64_t master_seed = 0;
  std::vector<ManifestEntry> entries;

  std::size_t truncation_warnings() const noexcept;
};

nlohmann::json to_json(const SystemParams& p);
SystemParams params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EnsembleSpec& s);
EnsembleSpec spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EnsembleManifest& m);
EnsembleManifest manifest_from_json(const nlohmann::json& j);

/// Writes traj_NNNNN.lctraj for every record plus manifest.json into `dir`.
EnsembleManifest write_ensemble(const std::filesystem::path& dir, const std::vector<TrajectoryRecord>& records,
                                const ScalingPlan& plan, const FockCutoffs& cutoffs, const EnsembleSpec& spec,
                                std::uint64_t master_seed);

EnsembleManifest read_manifest(const std::filesystem::path& manifest_path);

/// Loads every trajectory listed in the manifest. With `verify`, each file's
/// size and SHA-256 are checked first; a mismatch throws IntegrityError
/// naming the file.
std::vector<TrajectoryRecord> load_ensemble(const std::filesystem::path& manifest_path, bool verify = true);

/// Canonical text for a JSON document: sorted keys, two-space indent,
/// trailing newline.
std::string canonical_dump(const nlohmann::json& j);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace lcswitch
