#pragma once

// Summary document and plot-ready tables built from a finished (or partial)
// pipeline run. Output is a pure function of the files listed in the run
// manifest, so regenerating a report gives identical bytes.
//
// Files written to the report directory:
//   summary.json            rates, fits, event counts, hazard tables, gaps
//   fig1_populations.csv    stationary (n_a, n_b) density
//   fig1_n_a_marginal.csv   its n_a marginal
//   fig1_optical.csv        stationary density of the optical amplitude
//   fig2_survival.csv       Kaplan-Meier curves with the fitted exponential
//   fig3_rates.csv          k12, k21 and Lambda_eff against aleph
//   fig3_fits.csv           fitted k(aleph) and S_eff(aleph) curves
//   fig4_conditioned.csv    conditioned densities around the switch
//   fig5_phase.csv          phase histograms against tau
//   fig5_hazard.csv         phase-resolved hazard

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace lcswitch {

struct ReportOptions {
  std::size_t population_bins = 60;
  std::size_t optical_bins = 60;
};

struct ReportResult {
  nlohmann::json summary;
  std::vector<std::filesystem::path> files;  ///< written, in order
  bool complete = false;                     ///< false when gaps were flagged
};

/// Reads `run_root/run_manifest.json`, verifies every recorded output and
/// writes the report into `out_dir`. Missing or failed stages are listed
/// under "gaps" and their tables are skipped. Throws IntegrityError when a
/// recorded file was altered and InsufficientData when no manifest exists.
ReportResult write_report(const std::filesystem::path& run_root, const std::filesystem::path& out_dir,
                          const ReportOptions& options = {});

}  // namespace lcswitch
