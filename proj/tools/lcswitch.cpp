// lcswitch: command-line front end for the switching analysis.
//
// Every subcommand accepts --config <file>; flags given on the command line
// override the corresponding config keys. Exit codes: 0 success, 2 invalid
// configuration or arguments, 3 stage failure, 4 integrity error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "lcswitch/csv.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/meanfield.hpp"
#include "lcswitch/parallel.hpp"
#include "lcswitch/pipeline.hpp"
#include "lcswitch/report.hpp"
#include "lcswitch/trajectory_io.hpp"

namespace fs = std::filesystem;
using namespace lcswitch;
using json = nlohmann::json;

namespace {

enum Exit { kOk = 0, kInvalid = 2, kStage = 3, kIntegrity = 4 };

/// "a,b" into two doubles.
std::pair<double, double> parse_pair(const std::string& s, const std::string& flag) {
  const auto f = split_csv_line(s);
  if (f.size() != 2) throw InvalidParameter(flag + " expects two comma-separated values, got '" + s + "'");
  try {
    return {std::stod(f[0]), std::stod(f[1])};
  } catch (const std::exception&) {
    throw InvalidParameter(flag + " has a non-numeric value: '" + s + "'");
  }
}

std::vector<double> parse_list(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& f : split_csv_line(s)) {
    try {
      out.push_back(std::stod(f));
    } catch (const std::exception&) {
      throw InvalidParameter(flag + " has a non-numeric value: '" + f + "'");
    }
  }
  return out;
}

/// Options shared by the subcommands that start from a RunConfig.
struct ConfigFlags {
  std::string config;
  std::optional<std::uint64_t> seed;

  RunConfig load() const {
    RunConfig c = config.empty() ? RunConfig{} : load_config(config);
    if (seed) c.master_seed = *seed;
    return c;
  }
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config, "JSON run configuration");
  app->add_option("--seed", f.seed, "master seed");
}

double manifest_kappa(const fs::path& manifest) { return read_manifest(manifest).plan.base.kappa_a; }

// ---------------------------------------------------------------------------

struct SimulateFlags {
  ConfigFlags cfg;
  std::optional<double> aleph;
  std::optional<std::string> scheme, cutoffs;
  std::optional<std::size_t> n_traj;
  std::optional<double> t_transient, t_total, sample_dt;
  bool allow_melted = false;
  std::string out;
};

int run_simulate(const SimulateFlags& f) {
  RunConfig c = f.cfg.load();
  if (f.aleph) c.alephs = {*f.aleph};
  if (c.alephs.size() != 1) throw InvalidParameter("simulate needs exactly one aleph (use --aleph)");
  if (f.scheme) c.scheme = parse_scheme(*f.scheme);
  if (f.n_traj) c.ensemble.n_traj = *f.n_traj;
  if (f.t_transient) c.ensemble.t_transient = *f.t_transient;
  if (f.t_total) c.ensemble.t_total_post = *f.t_total;
  if (f.sample_dt) c.ensemble.sample_dt = *f.sample_dt;
  if (f.cutoffs) {
    const auto [na, nb] = parse_pair(*f.cutoffs, "--cutoffs");
    c.cutoffs = {{c.alephs[0], {static_cast<int>(na), static_cast<int>(nb)}}};
  }
  c.allow_melted = c.allow_melted || f.allow_melted;
  c.validate();
  const fs::path out = f.out.empty() ? c.output_root / aleph_dir_name(c.alephs[0]) / "ensemble" : fs::path(f.out);
  simulate_stage(c, c.alephs[0], out);
  const auto m = read_manifest(out / "manifest.json");
  std::cout << "wrote " << m.entries.size() << " trajectories to " << out.string() << "\n";
  if (const auto w = m.truncation_warnings())
    std::cerr << "warning: " << w << " trajectories reached the Fock cutoff; consider larger --cutoffs\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct ScanFlags {
  std::string config;
  std::string delta_range = "-0.8,-0.6", f_range = "0.1,0.3";
  std::string resolution = "5";
  std::size_t n_init = 157;
  double t_final = 3.0e3;
  std::string out = "meanfield_scan.csv";
};

int run_scan(const ScanFlags& f) {
  const RunConfig c = f.config.empty() ? RunConfig{} : load_config(f.config);
  const auto [dlo, dhi] = parse_pair(f.delta_range, "--delta-a-range");
  const auto [flo, fhi] = parse_pair(f.f_range, "--f-range");
  std::size_t nd = 0, nf = 0;
  if (const auto x = f.resolution.find('x'); x != std::string::npos) {
    nd = std::stoul(f.resolution.substr(0, x));
    nf = std::stoul(f.resolution.substr(x + 1));
  } else {
    nd = nf = std::stoul(f.resolution);
  }
  if (nd == 0 || nf == 0) throw InvalidParameter("--grid-resolution must be positive");
  ClassifyControls cc;
  cc.t_final_kappa = f.t_final;
  if (!(cc.t_final_kappa > cc.window_kappa)) throw InvalidParameter("--t-final must exceed the averaging window");
  const auto grid = initial_condition_grid(f.n_init);
  const auto cells = phase_scan(c.base, {dlo, dhi, nd}, {flo, fhi, nf}, grid, cc);

  std::vector<std::string> header{"delta_a", "F_tilde", "label", "n_attractors", "excluded_starts"};
  for (std::size_t i = 1; i <= cc.max_attractors; ++i)
    for (const char* k : {"d_alpha_r", "d_beta_r", "mean_na", "mean_nb", "basin_starts"})
      header.push_back("a" + std::to_string(i) + "_" + k);
  std::vector<std::string_view> views(header.begin(), header.end());
  CsvBuilder csv(views);
  for (const auto& cell : cells) {
    csv.cell(cell.delta_a).cell(cell.F_tilde).cell(to_string(cell.label));
    csv.cell(static_cast<std::uint64_t>(cell.attractors.size())).cell(static_cast<std::uint64_t>(cell.excluded_starts.size()));
    for (std::size_t i = 0; i < cc.max_attractors; ++i) {
      if (i < cell.attractors.size()) {
        const auto& d = cell.attractors[i];
        csv.cell(d.d_alpha_r).cell(d.d_beta_r).cell(d.mean_na).cell(d.mean_nb);
        csv.cell(static_cast<std::uint64_t>(cell.cluster_sizes[i]));
      } else {
        for (int k = 0; k < 5; ++k) csv.cell("");
      }
    }
    csv.end_row();
  }
  write_text(f.out, csv.str());
  std::cout << "classified " << cells.size() << " cells into " << f.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SegmentFlags {
  ConfigFlags cfg;
  std::string ensemble;
  std::optional<std::string> covariance;
  std::optional<std::size_t> max_iter;
  std::string out;
};

int run_segment(const SegmentFlags& f) {
  RunConfig c = f.cfg.load();
  if (f.covariance) c.analysis.covariance = parse_covariance(*f.covariance);
  if (f.max_iter) c.analysis.hmm_max_iter = *f.max_iter;
  const fs::path manifest = f.ensemble;
  const double aleph = read_manifest(manifest).plan.aleph;
  const fs::path out = f.out.empty() ? manifest.parent_path().parent_path() / "segment" : fs::path(f.out);
  segment_stage(manifest, segmentation_controls(c.analysis, stage_seed(c.master_seed, "segment", aleph)), out);
  const auto seg = read_segmentation(out);
  std::cout << "segmented " << seg.trajectories.size() << " trajectories into " << out.string() << "\n";
  if (!seg.model.at("separation").at("reliable").get<bool>())
    std::cerr << "warning: emission means closer than one pooled standard deviation; segmentation unreliable\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SurvivalFlags {
  ConfigFlags cfg;
  std::string segment;
  std::optional<double> aleph;
  std::optional<std::size_t> bootstrap, min_records;
  std::string out;
};

int run_survival(const SurvivalFlags& f) {
  RunConfig c = f.cfg.load();
  if (f.bootstrap) c.analysis.bootstrap_resamples = *f.bootstrap;
  if (f.min_records) c.analysis.min_records = *f.min_records;
  const fs::path seg = f.segment;
  double aleph = 0.0;
  if (f.aleph) {
    aleph = *f.aleph;
  } else {
    const json model = json::parse(read_text(seg / "model.json"));
    if (!model.contains("aleph")) throw InvalidParameter("segmentation has no aleph; pass --aleph");
    aleph = model.at("aleph").get<double>();
  }
  const fs::path out = f.out.empty() ? seg.parent_path() / "survival" : fs::path(f.out);
  survival_stage(seg, c.analysis, stage_seed(c.master_seed, "survival", aleph), aleph, out);
  const json r = json::parse(read_text(out / "rates.json"));
  for (const char* d : {"12", "21"}) {
    const json& dj = r.at("directions").at(d);
    if (dj.at("status") == "ok")
      std::cout << "k" << d << " = " << format_double(dj.at("k").get<double>()) << "  [" << format_double(dj.at("ci_low").get<double>())
                << ", " << format_double(dj.at("ci_high").get<double>()) << "]  t0 = " << format_double(dj.at("t0").get<double>()) << "\n";
    else
      std::cout << "k" << d << " refused: " << dj.at("note").get<std::string>() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct FitFlags {
  std::vector<std::string> rates;
  std::string table;
  std::string out = "fits";
};

int run_fit(const FitFlags& f) {
  if (f.rates.empty() == f.table.empty()) throw InvalidParameter("give either --rates files or --table");
  if (!f.rates.empty()) {
    std::vector<fs::path> files(f.rates.begin(), f.rates.end());
    fit_stage(files, f.out);
  } else {
    // Columns: aleph, k12, sigma12, k21, sigma21 (blank or nan skips a value).
    std::istringstream in(read_text(f.table));
    std::string line;
    std::getline(in, line);
    std::vector<ScalingPoint> p12, p21;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto c = split_csv_line(line);
      if (c.size() != 5) throw InvalidParameter("rates table rows need 5 columns: aleph,k12,sigma12,k21,sigma21");
      auto value = [](const std::string& s) { return s.empty() ? std::nan("") : std::stod(s); };
      const double a = value(c[0]);
      if (std::isfinite(value(c[1]))) p12.push_back({a, value(c[1]), value(c[2])});
      if (std::isfinite(value(c[3]))) p21.push_back({a, value(c[3]), value(c[4])});
    }
    fit_points_stage(p12, p21, f.out);
  }
  std::cout << "wrote fits to " << f.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EscapeFlags {
  ConfigFlags cfg;
  std::string ensemble, segment;
  std::optional<std::string> direction, tau_snapshots;
  std::optional<double> pre_min, post_min;
  std::optional<std::size_t> phase_bins;
  std::string out;
};

int run_escape(const EscapeFlags& f) {
  RunConfig c = f.cfg.load();
  auto& a = c.analysis;
  if (f.direction) a.escape_directions = {*f.direction};
  if (f.tau_snapshots) a.tau_snapshots_kappa = parse_list(*f.tau_snapshots, "--tau-snapshots");
  if (f.pre_min) a.density_pre_kappa = a.phase_pre_kappa = *f.pre_min;
  if (f.post_min) a.density_post_kappa = a.phase_post_kappa = *f.post_min;
  if (f.phase_bins) a.phase_bins = *f.phase_bins;
  c.validate();
  const fs::path manifest = f.ensemble;
  const fs::path seg = f.segment.empty() ? manifest.parent_path().parent_path() / "segment" : fs::path(f.segment);
  const fs::path out = f.out.empty() ? manifest.parent_path().parent_path() / "escape" : fs::path(f.out);
  escape_stage(manifest, seg, a, manifest_kappa(manifest), out);
  std::cout << "wrote escape geometry to " << out.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct PipelineFlags {
  ConfigFlags cfg;
  std::optional<std::string> alephs, out;
  std::optional<std::size_t> n_traj;
  bool allow_melted = false;
  bool report = true;
};

int run_pipeline_cmd(const PipelineFlags& f) {
  RunConfig c = f.cfg.load();
  if (f.alephs) c.alephs = parse_list(*f.alephs, "--aleph");
  if (f.out) c.output_root = *f.out;
  if (f.n_traj) c.ensemble.n_traj = *f.n_traj;
  c.allow_melted = c.allow_melted || f.allow_melted;
  c.validate();
  const auto outcome = run_pipeline(c);
  std::cout << "stages recomputed: " << outcome.recomputed.size() << ", reused: " << outcome.reused.size() << "\n";
  std::cout << "manifest hash " << outcome.manifest.hash() << "\n";
  if (f.report) {
    const auto r = write_report(c.output_root, c.output_root / "report");
    std::cout << "report written to " << (c.output_root / "report").string() << (r.complete ? "" : " (with gaps)")
              << "\n";
  }
  return kOk;
}

struct ReportFlags {
  std::string run = "lcswitch_run";
  std::string out;
};

int run_report(const ReportFlags& f) {
  const fs::path out = f.out.empty() ? fs::path(f.run) / "report" : fs::path(f.out);
  const auto r = write_report(f.run, out);
  for (const auto& g : r.summary.at("gaps"))
    std::cerr << "gap: " << g.at("stage").get<std::string>() << " (" << g.at("reason").get<std::string>() << ")\n";
  std::cout << "wrote " << r.files.size() << " files to " << out.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  configure_workers_from_env();
  CLI::App app{"Quantum-jump simulation and switching analysis of coupled limit cycles", "lcswitch"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  SimulateFlags sim;
  auto* s = app.add_subcommand("simulate", "Simulate a quantum-jump trajectory ensemble");
  add_config_flags(s, sim.cfg);
  s->add_option("--aleph", sim.aleph, "fluctuation strength");
  s->add_option("--scheme", sim.scheme, "scaling scheme (a or b)");
  s->add_option("--n-traj", sim.n_traj, "number of trajectories");
  s->add_option("--t-transient", sim.t_transient, "discarded transient time");
  s->add_option("--t-total", sim.t_total, "recorded time after the transient");
  s->add_option("--cutoffs", sim.cutoffs, "Fock cutoffs NA,NB");
  s->add_option("--sample-dt", sim.sample_dt, "output sampling interval");
  s->add_flag("--allow-melted", sim.allow_melted, "permit aleph < 2");
  s->add_option("--out", sim.out, "output directory");

  ScanFlags scan;
  auto* m = app.add_subcommand("meanfield-scan", "Classify mean-field attractors on a (delta_a, F) grid");
  m->add_option("--config", scan.config, "JSON run configuration (base parameters)");
  m->add_option("--delta-a-range", scan.delta_range, "lo,hi")->capture_default_str();
  m->add_option("--f-range", scan.f_range, "lo,hi")->capture_default_str();
  m->add_option("--grid-resolution", scan.resolution, "N or NxM")->capture_default_str();
  m->add_option("--n-init", scan.n_init, "initial conditions per cell")->capture_default_str();
  m->add_option("--t-final", scan.t_final, "integration time in units of 1/kappa_a")->capture_default_str();
  m->add_option("--out", scan.out, "output CSV")->capture_default_str();

  SegmentFlags seg;
  auto* g = app.add_subcommand("segment", "Label trajectories with a two-state Gaussian HMM");
  add_config_flags(g, seg.cfg);
  g->add_option("--ensemble", seg.ensemble, "ensemble manifest.json")->required();
  g->add_option("--covariance", seg.covariance, "full or diag");
  g->add_option("--max-iter", seg.max_iter, "Baum-Welch iteration cap");
  g->add_option("--out", seg.out, "output directory");

  SurvivalFlags surv;
  auto* v = app.add_subcommand("survival", "Kaplan-Meier curves and conditional switching rates");
  add_config_flags(v, surv.cfg);
  v->add_option("--segment", surv.segment, "segmentation directory")->required();
  v->add_option("--aleph", surv.aleph, "aleph label (default: from the segmentation)");
  v->add_option("--bootstrap", surv.bootstrap, "bootstrap resamples");
  v->add_option("--min-records", surv.min_records, "minimum records beyond t0");
  v->add_option("--out", surv.out, "output directory");

  FitFlags fit;
  auto* r = app.add_subcommand("fit-rates", "Fit k(aleph) scaling laws");
  r->add_option("--rates", fit.rates, "rates.json files from the survival stage");
  r->add_option("--table", fit.table, "CSV with aleph,k12,sigma12,k21,sigma21");
  r->add_option("--out", fit.out, "output directory")->capture_default_str();

  EscapeFlags esc;
  auto* e = app.add_subcommand("escape-geometry", "Conditioned densities, phase histograms and hazard");
  add_config_flags(e, esc.cfg);
  e->add_option("--ensemble", esc.ensemble, "ensemble manifest.json")->required();
  e->add_option("--segment", esc.segment, "segmentation directory (default: sibling of the ensemble)");
  e->add_option("--direction", esc.direction, "12 or 21 (default: both)");
  e->add_option("--pre-min", esc.pre_min, "minimum dwell before a switch, units of 1/kappa_a");
  e->add_option("--post-min", esc.post_min, "minimum dwell after a switch, units of 1/kappa_a");
  e->add_option("--tau-snapshots", esc.tau_snapshots, "comma-separated kappa_a*tau values");
  e->add_option("--phase-bins", esc.phase_bins, "bins on [0, 2 pi)");
  e->add_option("--out", esc.out, "output directory");

  PipelineFlags pipe;
  auto* p = app.add_subcommand("pipeline", "Run every stage, reusing up-to-date results");
  add_config_flags(p, pipe.cfg);
  p->add_option("--aleph", pipe.alephs, "comma-separated aleph values");
  p->add_option("--n-traj", pipe.n_traj, "trajectories per aleph");
  p->add_option("--out", pipe.out, "output root");
  p->add_flag("--allow-melted", pipe.allow_melted, "permit aleph < 2");
  p->add_flag("!--no-report", pipe.report, "skip the report");

  ReportFlags rep;
  auto* t = app.add_subcommand("report", "Summary and plot-ready tables for a run");
  t->add_option("--run", rep.run, "output root of a pipeline run")->capture_default_str();
  t->add_option("--out", rep.out, "report directory (default: <run>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*s) return run_simulate(sim);
    if (*m) return run_scan(scan);
    if (*g) return run_segment(seg);
    if (*v) return run_survival(surv);
    if (*r) return run_fit(fit);
    if (*e) return run_escape(esc);
    if (*p) return run_pipeline_cmd(pipe);
    if (*t) return run_report(rep);
  } catch (const InvalidParameter& err) {
    std::cerr << "invalid configuration: " << err.what() << "\n";
    return kInvalid;
  } catch (const IntegrityError& err) {
    std::cerr << "integrity error: " << err.what() << "\n";
    return kIntegrity;
  } catch (const StageFailure& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kStage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kStage;
  }
  return kOk;
}
