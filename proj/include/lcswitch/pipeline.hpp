#pragma once

// End-to-end runs: configuration, on-disk layout, stage fingerprints and the
// run manifest. Every stage reads its inputs from disk so a stage can be run
// alone from the CLI or skipped when its fingerprint and outputs are intact.
//
// Layout under output_root:
//   aleph_<a>/ensemble/      trajectories + manifest.json
//   aleph_<a>/segment/       model.json + labels_NNNNN.csv (run-length encoded)
//   aleph_<a>/survival/      km_12.csv, km_21.csv, rates.json
//   aleph_<a>/escape/        events.csv, phase/hazard/density tables, escape.json
//   fits/                    rates_table.csv, fits.json, s_eff.csv
//   run_manifest.json

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lcswitch/core_model.hpp"
#include "lcswitch/escape_geometry.hpp"
#include "lcswitch/hmm.hpp"
#include "lcswitch/qjump.hpp"
#include "lcswitch/switching_stats.hpp"

namespace lcswitch {

inline constexpr const char* kToolVersion = "lcswitch 0.1.0";

/// Below this aleph the two basins merge and rates are undefined.
inline constexpr double kMeltedAleph = 2.0;

struct CutoffOverride {
  double aleph = 0.0;
  FockCutoffs cutoffs{};
};

struct AnalysisOptions {
  CovarianceKind covariance = CovarianceKind::Full;
  std::size_t hmm_max_iter = 500;
  double hmm_rel_tol = 1e-7;
  std::size_t kmeans_restarts = 20;
  std::size_t bootstrap_resamples = 1000;
  std::size_t min_records = kDefaultMinRecords;
  std::size_t phase_bins = 72;
  std::size_t density_bins = 60;
  /// Window of the phase histograms in units of 1 / kappa_a.
  double tau_lo_kappa = -15.0;
  double tau_hi_kappa = 10.0;
  /// Snapshots of the conditioned densities in units of 1 / kappa_a.
  std::vector<double> tau_snapshots_kappa{-5.0, -0.01, 0.5, 10.0};
  /// Minimum dwell before and after a switch, units of 1 / kappa_a.
  double density_pre_kappa = 15.0;
  double density_post_kappa = 10.0;
  double phase_pre_kappa = 15.0;
  double phase_post_kappa = 2.0;
  /// Directions analysed by the escape stage ("12", "21").
  std::vector<std::string> escape_directions{"12", "21"};
};

struct RunConfig {
  SystemParams base = working_point();
  std::vector<double> alephs{3.0};
  Scheme scheme = Scheme::TheoryA;
  EnsembleSpec ensemble = EnsembleSpec::in_kappa_units(0.1, 8);
  /// Per-aleph cutoffs; missing entries use suggest_cutoffs.
  std::vector<CutoffOverride> cutoffs;
  AnalysisOptions analysis{};
  std::uint64_t master_seed = 1;
  std::filesystem::path output_root = "lcswitch_run";
  /// Permits aleph < 2 (the quantum-melted regime).
  bool allow_melted = false;

  /// Throws InvalidParameter, including the melted-regime refusal.
  void validate() const;
  FockCutoffs cutoffs_for(double aleph) const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Cutoffs from the mean-field large cycle: four times its largest
/// populations at this aleph, rounded up (at least 6 and 4).
FockCutoffs suggest_cutoffs(const SystemParams& base, double aleph);

struct CutoffConvergence {
  FockCutoffs base{}, doubled{};
  double mean_na = 0.0, mean_na_doubled = 0.0;
  double mean_nb = 0.0, mean_nb_doubled = 0.0;
  double relative_change = 0.0;  ///< largest relative change of the two means
  bool converged = false;        ///< relative_change < 1%
};

/// Runs the same ensemble at `cutoffs` and at doubled cutoffs and compares
/// the post-transient ensemble means.
CutoffConvergence check_cutoff_convergence(const EnsembleSpec& spec, const ScalingPlan& plan,
                                           const FockCutoffs& cutoffs, std::uint64_t master_seed);

/// Directory name for one aleph ("aleph_3", "aleph_2.5").
std::string aleph_dir_name(double aleph);

// ---------------------------------------------------------------------------
// Stages

/// Sub-stream seeds derived from the master seed.
std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage, double aleph);

/// k-means and Baum-Welch settings from the analysis options.
SegmentationControls segmentation_controls(const AnalysisOptions& options, std::uint64_t seed);

/// Writes the ensemble for one aleph into `dir`.
void simulate_stage(const RunConfig& config, double aleph, const std::filesystem::path& dir);

struct SegmentationArtifacts {
  nlohmann::json model;  ///< contents of model.json
  std::vector<SegmentedTrajectory> trajectories;
};

/// `extra` keys (such as the aleph of the ensemble) are merged into model.json.
void write_segmentation(const std::filesystem::path& dir, const SegmentationResult& result,
                        const nlohmann::json& extra = nlohmann::json::object());
/// Reads model.json and the label files, checking them against the
/// checksums recorded in model.json.
SegmentationArtifacts read_segmentation(const std::filesystem::path& dir);

void segment_stage(const std::filesystem::path& ensemble_manifest, const SegmentationControls& controls,
                   const std::filesystem::path& dir);

struct DirectionRate {
  Direction direction = Direction::OneToTwo;
  std::optional<RateFit> fit;  ///< empty when refused
  std::optional<T0Selection> t0;
  std::string note;            ///< reason for a refusal
};

nlohmann::json to_json(const DirectionRate& r);

/// Dwells, Kaplan-Meier curves and conditional rates for both directions.
void survival_stage(const std::filesystem::path& segment_dir, const AnalysisOptions& options, std::uint64_t seed,
                    double aleph, const std::filesystem::path& dir);

void escape_stage(const std::filesystem::path& ensemble_manifest, const std::filesystem::path& segment_dir,
                  const AnalysisOptions& options, double kappa_a, const std::filesystem::path& dir);

/// Scaling fits over the rates.json files of several alephs. Writes a
/// status-only fits.json when fewer than three usable points exist.
void fit_stage(const std::vector<std::filesystem::path>& rates_files, const std::filesystem::path& dir,
               Exec exec = Exec::Parallel);

/// The fitting half of fit_stage for rates given directly (fits.json, s_eff.csv).
void fit_points_stage(std::span<const ScalingPoint> p12, std::span<const ScalingPoint> p21,
                      const std::filesystem::path& dir, Exec exec = Exec::Parallel);

// ---------------------------------------------------------------------------
// Manifest

struct FileRecord {
  std::string path;  ///< relative to output_root
  std::uintmax_t size = 0;
  std::string sha256;

  bool operator==(const FileRecord&) const = default;
};

struct StageRecord {
  std::string name;  ///< e.g. "simulate/aleph_3"
  std::string status;  ///< "done" or "failed"
  std::string fingerprint;
  std::vector<FileRecord> outputs;
  std::string error;
};

struct RunManifest {
  std::string tool_version = kToolVersion;
  nlohmann::json config;  ///< snapshot without output_root
  std::string config_hash;
  std::vector<StageRecord> stages;
  nlohmann::json timing = nlohmann::json::object();  ///< seconds per stage

  const StageRecord* find(const std::string& name) const noexcept;
  bool complete() const noexcept;
  /// SHA-256 of the canonical manifest with timing removed.
  std::string hash() const;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest run_manifest_from_json(const nlohmann::json& j);
RunManifest read_run_manifest(const std::filesystem::path& path);

/// Checks size and SHA-256 of every listed file. Throws IntegrityError
/// naming the first file that differs; returns false if one is missing.
bool verify_outputs(const std::filesystem::path& root, const StageRecord& stage);

struct PipelineOutcome {
  RunManifest manifest;
  std::vector<std::string> recomputed;  ///< stages executed in this call
  std::vector<std::string> reused;      ///< stages skipped as up to date
};

/// Runs every stage in order, reusing stages whose fingerprint matches the
/// previous manifest and whose outputs verify. On a stage failure the partial
/// manifest is written and StageFailure is thrown.
PipelineOutcome run_pipeline(const RunConfig& config);

}  // namespace lcswitch
