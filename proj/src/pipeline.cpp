#include "lcswitch/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include "lcswitch/checksum.hpp"
#include "lcswitch/csv.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/histogram.hpp"
#include "lcswitch/meanfield.hpp"
#include "lcswitch/rng.hpp"
#include "lcswitch/trajectory_io.hpp"

namespace lcswitch {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr double kZ975 = 1.959963984540054;

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidParameter(where + " must be a JSON object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.contains(k)) throw InvalidParameter("unknown key '" + k + "' in " + where);
}

json to_json(const AnalysisOptions& a) {
  return {{"covariance", to_string(a.covariance)},
          {"hmm_max_iter", a.hmm_max_iter},
          {"hmm_rel_tol", a.hmm_rel_tol},
          {"kmeans_restarts", a.kmeans_restarts},
          {"bootstrap_resamples", a.bootstrap_resamples},
          {"min_records", a.min_records},
          {"phase_bins", a.phase_bins},
          {"density_bins", a.density_bins},
          {"tau_lo_kappa", a.tau_lo_kappa},
          {"tau_hi_kappa", a.tau_hi_kappa},
          {"tau_snapshots_kappa", a.tau_snapshots_kappa},
          {"density_pre_kappa", a.density_pre_kappa},
          {"density_post_kappa", a.density_post_kappa},
          {"phase_pre_kappa", a.phase_pre_kappa},
          {"phase_post_kappa", a.phase_post_kappa},
          {"escape_directions", a.escape_directions}};
}

AnalysisOptions analysis_from_json(const json& j) {
  require_keys(j,
               {"covariance", "hmm_max_iter", "hmm_rel_tol", "kmeans_restarts", "bootstrap_resamples", "min_records",
                "phase_bins", "density_bins", "tau_lo_kappa", "tau_hi_kappa", "tau_snapshots_kappa",
                "density_pre_kappa", "density_post_kappa", "phase_pre_kappa", "phase_post_kappa", "escape_directions"},
               "analysis");
  AnalysisOptions a;
  if (j.contains("covariance")) a.covariance = parse_covariance(j.at("covariance").get<std::string>());
  a.hmm_max_iter = j.value("hmm_max_iter", a.hmm_max_iter);
  a.hmm_rel_tol = j.value("hmm_rel_tol", a.hmm_rel_tol);
  a.kmeans_restarts = j.value("kmeans_restarts", a.kmeans_restarts);
  a.bootstrap_resamples = j.value("bootstrap_resamples", a.bootstrap_resamples);
  a.min_records = j.value("min_records", a.min_records);
  a.phase_bins = j.value("phase_bins", a.phase_bins);
  a.density_bins = j.value("density_bins", a.density_bins);
  a.tau_lo_kappa = j.value("tau_lo_kappa", a.tau_lo_kappa);
  a.tau_hi_kappa = j.value("tau_hi_kappa", a.tau_hi_kappa);
  a.tau_snapshots_kappa = j.value("tau_snapshots_kappa", a.tau_snapshots_kappa);
  a.density_pre_kappa = j.value("density_pre_kappa", a.density_pre_kappa);
  a.density_post_kappa = j.value("density_post_kappa", a.density_post_kappa);
  a.phase_pre_kappa = j.value("phase_pre_kappa", a.phase_pre_kappa);
  a.phase_post_kappa = j.value("phase_post_kappa", a.phase_post_kappa);
  a.escape_directions = j.value("escape_directions", a.escape_directions);
  for (const auto& d : a.escape_directions) parse_direction(d);
  return a;
}

json to_json(const Obs& v) { return {v(0), v(1)}; }

json to_json(const Eigen::Matrix2d& m) { return {{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}}; }

json to_json(const HmmParams& p) {
  json em = json::array();
  for (const auto& e : p.emissions) em.push_back({{"mean", to_json(e.mean)}, {"cov", to_json(e.cov)}});
  return {{"pi", p.pi}, {"A", to_json(p.A)}, {"emissions", em}};
}

std::string padded(std::uint64_t i) {
  std::ostringstream s;
  s << std::setw(5) << std::setfill('0') << i;
  return s.str();
}

json circular_json(std::span<const double> phases, double alpha = 0.01) {
  const auto s = circular_summary(phases);
  const double r_crit = rayleigh_critical_resultant(phases.size(), alpha);
  const double sd_crit = r_crit > 0.0 ? std::sqrt(-2.0 * std::log(r_crit)) : INFINITY;
  json j = {{"n", phases.size()},
            {"mean", s.mean},
            {"resultant", s.resultant},
            {"circular_variance", s.variance},
            {"rayleigh_p", rayleigh_p_value(phases.size(), s.resultant)},
            {"uniform_reference_resultant", r_crit}};
  // Infinite values are not representable in JSON; null marks them.
  j["circular_sd"] = std::isfinite(s.standard_deviation) ? json(s.standard_deviation) : json(nullptr);
  j["uniform_reference_sd"] = std::isfinite(sd_crit) ? json(sd_crit) : json(nullptr);
  j["localized"] = s.resultant > r_crit;
  return j;
}

std::vector<FileRecord> inventory(const fs::path& root, const fs::path& dir) {
  std::vector<FileRecord> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    out.push_back({fs::relative(e.path(), root).generic_string(), e.file_size(), sha256_file(e.path())});
  }
  std::sort(out.begin(), out.end(), [](const FileRecord& a, const FileRecord& b) { return a.path < b.path; });
  return out;
}

json to_json(const FileRecord& f) { return {{"path", f.path}, {"size", f.size}, {"sha256", f.sha256}}; }

FileRecord file_record_from_json(const json& j) {
  return {j.at("path").get<std::string>(), j.at("size").get<std::uintmax_t>(), j.at("sha256").get<std::string>()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  base.validate();
  ensemble.validate();
  if (alephs.empty()) throw InvalidParameter("config lists no aleph values");
  std::set<double> seen;
  for (double a : alephs) {
    if (!(a > 0.0) || !std::isfinite(a)) throw InvalidParameter("aleph values must be positive and finite");
    if (!seen.insert(a).second) throw InvalidParameter("aleph " + format_double(a) + " is listed twice");
    if (a < kMeltedAleph && !allow_melted)
      throw InvalidParameter("aleph = " + format_double(a) +
                             " lies in the quantum-melted regime (aleph < 2) where the two basins merge and "
                             "switching rates are undefined; set allow_melted to override");
  }
  for (const auto& c : cutoffs) c.cutoffs.validate();
  if (analysis.phase_bins == 0 || analysis.density_bins == 0) throw InvalidParameter("bin counts must be positive");
  if (!(analysis.tau_hi_kappa >= analysis.tau_lo_kappa)) throw InvalidParameter("tau window is empty");
  if (output_root.empty()) throw InvalidParameter("output_root is empty");
  for (const auto& d : analysis.escape_directions) parse_direction(d);
}

FockCutoffs RunConfig::cutoffs_for(double aleph) const {
  for (const auto& c : cutoffs)
    if (c.aleph == aleph) return c.cutoffs;
  return suggest_cutoffs(base, aleph);
}

json to_json(const RunConfig& c) {
  json cut = json::array();
  for (const auto& o : c.cutoffs) cut.push_back({{"aleph", o.aleph}, {"n_a_max", o.cutoffs.n_a_max}, {"n_b_max", o.cutoffs.n_b_max}});
  return {{"base", to_json(c.base)},
          {"alephs", c.alephs},
          {"scheme", to_string(c.scheme)},
          {"ensemble", to_json(c.ensemble)},
          {"cutoffs", cut},
          {"analysis", to_json(c.analysis)},
          {"master_seed", c.master_seed},
          {"output_root", c.output_root.generic_string()},
          {"allow_melted", c.allow_melted}};
}

RunConfig config_from_json(const json& j) {
  require_keys(j,
               {"base", "alephs", "scheme", "ensemble", "cutoffs", "analysis", "master_seed", "output_root",
                "allow_melted"},
               "config");
  try {
    RunConfig c;
    if (j.contains("base")) {
      require_keys(j.at("base"), {"delta_a", "omega_b", "g", "F", "kappa_a", "kappa_b"}, "base");
      c.base = params_from_json(j.at("base"));
    }
    if (j.contains("alephs")) c.alephs = j.at("alephs").get<std::vector<double>>();
    if (j.contains("scheme")) c.scheme = parse_scheme(j.at("scheme").get<std::string>());
    if (j.contains("ensemble")) {
      require_keys(j.at("ensemble"), {"n_traj", "t_transient", "t_total_post", "sample_dt", "dt_max", "p_cap", "initial"},
                   "ensemble");
      c.ensemble = spec_from_json(j.at("ensemble"));
    }
    if (j.contains("cutoffs")) {
      for (const auto& o : j.at("cutoffs")) {
        require_keys(o, {"aleph", "n_a_max", "n_b_max"}, "cutoffs entry");
        c.cutoffs.push_back({o.at("aleph").get<double>(), {o.at("n_a_max").get<int>(), o.at("n_b_max").get<int>()}});
      }
    }
    if (j.contains("analysis")) c.analysis = analysis_from_json(j.at("analysis"));
    c.master_seed = j.value("master_seed", c.master_seed);
    if (j.contains("output_root")) c.output_root = j.at("output_root").get<std::string>();
    c.allow_melted = j.value("allow_melted", c.allow_melted);
    return c;
  } catch (const json::exception& e) {
    throw InvalidParameter(std::string("malformed config: ") + e.what());
  }
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw InvalidParameter("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw InvalidParameter("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

FockCutoffs suggest_cutoffs(const SystemParams& base, double aleph) {
  if (!(aleph > 0.0)) throw InvalidParameter("aleph must be positive");
  // A large-amplitude start settles on the large cycle at the working point;
  // the window maxima bound the populations visited along it.
  const ClassifyControls cc;
  const double t_final = cc.t_final_kappa / base.kappa_a;
  const double window = cc.window_kappa / base.kappa_a;
  const auto first = integrate({cplx(3.0, 0.0), cplx(0.0)}, base, t_final - window, {});
  const auto tr = integrate_uniform(first.final_state, base, window, cc.sample_dt);
  double na = 0.0, nb = 0.0;
  for (const auto& s : tr.states) {
    na = std::max(na, std::norm(s.alpha));
    nb = std::max(nb, std::norm(s.beta));
  }
  return {std::max(6, static_cast<int>(std::ceil(4.0 * aleph * na))),
          std::max(4, static_cast<int>(std::ceil(4.0 * aleph * nb)))};
}

CutoffConvergence check_cutoff_convergence(const EnsembleSpec& spec, const ScalingPlan& plan,
                                           const FockCutoffs& cutoffs, std::uint64_t master_seed) {
  auto means = [&](const FockCutoffs& c) {
    const auto recs = simulate_ensemble(spec, plan, c, master_seed);
    double na = 0.0, nb = 0.0;
    std::size_t n = 0;
    for (const auto& r : recs)
      for (std::size_t k = r.first_post_transient(); k < r.size(); ++k, ++n) {
        na += r.n_a[k];
        nb += r.n_b[k];
      }
    if (n == 0) throw InsufficientData("cutoff check: no post-transient samples");
    return std::pair{na / static_cast<double>(n), nb / static_cast<double>(n)};
  };
  CutoffConvergence out;
  out.base = cutoffs;
  out.doubled = {2 * cutoffs.n_a_max, 2 * cutoffs.n_b_max};
  std::tie(out.mean_na, out.mean_nb) = means(out.base);
  std::tie(out.mean_na_doubled, out.mean_nb_doubled) = means(out.doubled);
  auto rel = [](double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); };
  out.relative_change = std::max(rel(out.mean_na, out.mean_na_doubled), rel(out.mean_nb, out.mean_nb_doubled));
  out.converged = out.relative_change < 0.01;
  return out;
}

SegmentationControls segmentation_controls(const AnalysisOptions& a, std::uint64_t seed) {
  SegmentationControls c;
  c.kmeans.restarts = a.kmeans_restarts;
  c.kmeans.seed = seed;
  c.kmeans.covariance = a.covariance;
  c.baum_welch.covariance = a.covariance;
  c.baum_welch.max_iter = a.hmm_max_iter;
  c.baum_welch.rel_tol = a.hmm_rel_tol;
  return c;
}

std::string aleph_dir_name(double aleph) { return "aleph_" + format_double(aleph); }

std::uint64_t stage_seed(std::uint64_t master_seed, const std::string& stage, double aleph) {
  return derive_seed(master_seed, stage, std::bit_cast<std::uint64_t>(aleph));
}

// ---------------------------------------------------------------------------
// Stages

void simulate_stage(const RunConfig& config, double aleph, const fs::path& dir) {
  const ScalingPlan plan{aleph, config.scheme, config.base};
  const FockCutoffs cutoffs = config.cutoffs_for(aleph);
  const std::uint64_t seed = stage_seed(config.master_seed, "simulate", aleph);
  const auto records = simulate_ensemble(config.ensemble, plan, cutoffs, seed);
  write_ensemble(dir, records, plan, cutoffs, config.ensemble, seed);
  fs::create_directories(dir / "csv");
  for (const auto& r : records) write_trajectory_csv(dir / "csv" / ("traj_" + padded(r.index) + ".csv"), r);
}

void write_segmentation(const fs::path& dir, const SegmentationResult& res, const json& extra) {
  fs::create_directories(dir);
  json trajs = json::array();
  for (const auto& t : res.trajectories) {
    const std::string name = "labels_" + padded(t.index) + ".csv";
    CsvBuilder csv{"start_index", "length", "state"};
    for (const auto& run : run_length_encode(t.states.labels))
      csv.cell(static_cast<std::uint64_t>(t.first_sample + run.start))
          .cell(static_cast<std::uint64_t>(run.length))
          .cell(to_string(run.state))
          .end_row();
    write_text(dir / name, csv.str());
    trajs.push_back({{"index", t.index},
                     {"file", name},
                     {"first_sample", t.first_sample},
                     {"samples", t.states.labels.size()},
                     {"dt_sample", t.dt_sample},
                     {"log_likelihood", t.states.log_likelihood},
                     {"sha256", sha256_hex(csv.str())}});
  }
  const auto& tr = res.training;
  const json model = {{"format", "lcswitch-segmentation"},
                      {"standardization", {{"mean", to_json(res.standardization.mean)}, {"scale", to_json(res.standardization.scale)}}},
                      {"params", to_json(tr.params)},
                      {"log_likelihood_trace", tr.log_likelihood_trace},
                      {"iterations", tr.iterations},
                      {"converged", tr.converged},
                      {"separation", {{"mahalanobis", res.separation.mahalanobis}, {"reliable", res.separation.reliable}}},
                      {"trajectories", trajs}};
  json merged = model;
  if (extra.is_object()) merged.update(extra);
  write_text(dir / "model.json", canonical_dump(merged));
}

SegmentationArtifacts read_segmentation(const fs::path& dir) {
  SegmentationArtifacts out;
  const fs::path model_path = dir / "model.json";
  if (!fs::exists(model_path)) throw InsufficientData("no segmentation found in " + dir.string());
  try {
    out.model = json::parse(read_text(model_path));
  } catch (const json::exception& e) {
    throw IntegrityError(model_path.string() + ": " + e.what());
  }
  if (out.model.value("format", std::string()) != "lcswitch-segmentation")
    throw IntegrityError(model_path.string() + " is not a segmentation model");
  for (const auto& t : out.model.at("trajectories")) {
    const fs::path file = dir / t.at("file").get<std::string>();
    const std::string text = read_text(file);
    if (sha256_hex(text) != t.at("sha256").get<std::string>())
      throw IntegrityError("checksum mismatch in " + file.string());
    SegmentedTrajectory s;
    s.index = t.at("index").get<std::uint64_t>();
    s.first_sample = t.at("first_sample").get<std::size_t>();
    s.dt_sample = t.at("dt_sample").get<double>();
    s.states.log_likelihood = t.at("log_likelihood").get<double>();
    const auto n = t.at("samples").get<std::size_t>();
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);  // header
    std::vector<Run> runs;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv_line(line);
      if (f.size() != 3) throw IntegrityError("malformed row in " + file.string());
      Run r;
      r.start = std::stoull(f[0]) - s.first_sample;
      r.length = std::stoull(f[1]);
      r.state = f[2] == "LC1" ? LcState::LC1 : LcState::LC2;
      runs.push_back(r);
    }
    s.states.labels = run_length_decode(runs);
    if (s.states.labels.size() != n) throw IntegrityError("label count mismatch in " + file.string());
    out.trajectories.push_back(std::move(s));
  }
  return out;
}

void segment_stage(const fs::path& ensemble_manifest, const SegmentationControls& controls, const fs::path& dir) {
  const auto records = load_ensemble(ensemble_manifest, true);
  json extra = json::object();
  if (!records.empty()) extra["aleph"] = records.front().aleph;
  write_segmentation(dir, segment_ensemble(records, controls), extra);
}

json to_json(const DirectionRate& r) {
  json j = {{"direction", to_string(r.direction)}, {"status", r.fit ? "ok" : "refused"}, {"note", r.note}};
  if (r.t0) {
    j["t0_selection"] = {{"t0", r.t0->t0},
                         {"statistic", r.t0->statistic},
                         {"candidate", r.t0->candidate},
                         {"tail_records", r.t0->tail_records}};
  }
  if (r.fit) {
    const auto& f = *r.fit;
    j["k"] = f.k;
    j["t0"] = f.t0;
    j["ci_low"] = f.ci_low;
    j["ci_high"] = f.ci_high;
    j["n_events"] = f.n_events;
    j["n_censored"] = f.n_censored;
    j["exposure"] = f.exposure;
  }
  return j;
}

void survival_stage(const fs::path& segment_dir, const AnalysisOptions& options, std::uint64_t seed, double aleph,
                    const fs::path& dir) {
  const auto seg = read_segmentation(segment_dir);
  const auto dwells = extract_dwells(seg.trajectories);
  fs::create_directories(dir);
  json rates = {{"aleph", aleph},
                {"segmentation_reliable", seg.model.at("separation").at("reliable").get<bool>()},
                {"n_dwells", dwells.size()}};
  std::array<DirectionRate, 2> found;
  for (Direction d : {Direction::OneToTwo, Direction::TwoToOne}) {
    DirectionRate dr;
    dr.direction = d;
    const auto data = incident_durations(dwells, source_state(d));
    CsvBuilder csv{"t", "survival", "at_risk", "events"};
    if (!data.empty()) {
      const auto km = kaplan_meier(data);
      csv.cell(0.0).cell(1.0).cell(static_cast<std::uint64_t>(km.n_records)).cell(std::uint64_t{0}).end_row();
      for (std::size_t k = 0; k < km.times.size(); ++k)
        csv.cell(km.times[k])
            .cell(km.survival[k])
            .cell(static_cast<std::uint64_t>(km.at_risk[k]))
            .cell(static_cast<std::uint64_t>(km.events[k]))
            .end_row();
      try {
        dr.t0 = select_t0(data);
        BootstrapControls b;
        b.resamples = options.bootstrap_resamples;
        b.seed = derive_seed(seed, "bootstrap-" + to_string(d));
        dr.fit = fit_conditional_rate(data, dr.t0->t0, b, options.min_records);
      } catch (const InsufficientData& e) {
        dr.note = e.what();
      } catch (const NotFound& e) {
        dr.note = e.what();
      }
    } else {
      dr.note = "no incident dwells in " + to_string(source_state(d));
    }
    write_text(dir / ("km_" + to_string(d) + ".csv"), csv.str());
    rates["directions"][to_string(d)] = to_json(dr);
    rates["n_incident_" + to_string(d)] = data.size();
    found[d == Direction::OneToTwo ? 0 : 1] = std::move(dr);
  }
  if (found[0].fit && found[1].fit) {
    const double k12 = found[0].fit->k, k21 = found[1].fit->k;
    const auto [p1, p2] = stationary_occupations(k12, k21);
    rates["lambda_eff"] = effective_relaxation(k12, k21);
    rates["occupations"] = {p1, p2};
    rates["k12_over_k21"] = k12 / k21;
  } else {
    rates["lambda_eff"] = nullptr;
  }
  write_text(dir / "rates.json", canonical_dump(rates));
}

void escape_stage(const fs::path& ensemble_manifest, const fs::path& segment_dir, const AnalysisOptions& options,
                  double kappa_a, const fs::path& dir) {
  const auto records = load_ensemble(ensemble_manifest, true);
  const auto seg = read_segmentation(segment_dir);
  if (records.size() != seg.trajectories.size()) throw DimensionMismatch("ensemble and segmentation differ in size");
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].index != seg.trajectories[i].index)
      throw DimensionMismatch("ensemble and segmentation list trajectories in a different order");
  fs::create_directories(dir);

  const auto ev_density = find_events(
      seg.trajectories, EventFilter{options.density_pre_kappa / kappa_a, options.density_post_kappa / kappa_a});
  const auto ev_phase = find_events(
      seg.trajectories, EventFilter{options.phase_pre_kappa / kappa_a, options.phase_post_kappa / kappa_a});
  auto write_events = [&](const std::vector<SwitchEvent>& ev, const std::string& name) {
    CsvBuilder csv{"trajectory", "sample", "t_switch", "t_midpoint", "direction", "pre_dwell", "post_dwell"};
    for (const auto& e : ev)
      csv.cell(e.trajectory)
          .cell(static_cast<std::uint64_t>(e.sample))
          .cell(e.t_switch)
          .cell(e.t_midpoint)
          .cell(to_string(e.direction))
          .cell(e.pre_dwell)
          .cell(e.post_dwell)
          .end_row();
    write_text(dir / name, csv.str());
  };
  write_events(ev_density, "events_density.csv");
  write_events(ev_phase, "events_phase.csv");

  json summary = {{"kappa_a", kappa_a}, {"phase_bins", options.phase_bins}};
  std::array<std::optional<PhaseDensity>, 2> stationary;
  for (LcState s : {LcState::LC1, LcState::LC2}) {
    const auto i = static_cast<std::size_t>(s);
    try {
      stationary[i] = stationary_phase_distribution(records, seg.trajectories, s, options.phase_bins);
      CsvBuilder csv{"phase", "density"};
      const auto centers = phase_bin_centers(options.phase_bins);
      for (std::size_t b = 0; b < centers.size(); ++b) csv.cell(centers[b]).cell(stationary[i]->density[b]).end_row();
      write_text(dir / ("stationary_phase_" + to_string(s) + ".csv"), csv.str());
      summary["stationary"][to_string(s)] =
          circular_summary(centers, stationary[i]->density).resultant;
    } catch (const InsufficientData& e) {
      summary["stationary"][to_string(s)] = nullptr;
    }
  }

  const double tau_lo = options.tau_lo_kappa / kappa_a, tau_hi = options.tau_hi_kappa / kappa_a;
  std::vector<double> snaps;
  for (double t : options.tau_snapshots_kappa) snaps.push_back(t / kappa_a);
  for (const auto& dir_name : options.escape_directions) {
    const Direction d = parse_direction(dir_name);
    const std::string tag = to_string(d);
    json& js = summary["directions"][tag];
    std::vector<SwitchEvent> dens_d, phase_d;
    for (const auto& e : ev_density)
      if (e.direction == d) dens_d.push_back(e);
    for (const auto& e : ev_phase)
      if (e.direction == d) phase_d.push_back(e);
    js["events_density"] = dens_d.size();
    js["events_phase"] = phase_d.size();

    // Conditioned phase-space densities.
    if (!dens_d.empty()) {
      for (Projection proj : {Projection::OpticalPlane, Projection::MechanicalPlane}) {
        const auto cd = conditioned_density(dens_d, records, snaps, proj, options.density_bins);
        CsvBuilder csv{"tau", "x", "y", "density"};
        json used = json::array();
        for (const auto& s : cd) {
          used.push_back({{"tau", s.tau}, {"events_used", s.events_used}, {"events_excluded", s.events_excluded}});
          if (!s.histogram) continue;
          const auto& h = *s.histogram;
          for (std::size_t ix = 0; ix < h.nx; ++ix)
            for (std::size_t iy = 0; iy < h.ny; ++iy)
              csv.cell(s.tau).cell(h.x_center(ix)).cell(h.y_center(iy)).cell(h.at(ix, iy)).end_row();
        }
        write_text(dir / ("conditioned_" + to_string(proj) + "_" + tag + ".csv"), csv.str());
        js["conditioned_" + to_string(proj)] = used;
      }
    }

    if (phase_d.empty()) {
      js["hazard_omitted"] = true;
      js["hazard_note"] = "no events for direction " + tag;
      continue;
    }
    const auto h = phase_histogram(phase_d, records, d, tau_lo, tau_hi, options.phase_bins);
    const auto centers = phase_bin_centers(options.phase_bins);
    CsvBuilder csv{"tau", "phase", "density", "events"};
    for (std::size_t c = 0; c < h.lags.size(); ++c)
      for (std::size_t b = 0; b < h.phase_bins; ++b)
        csv.cell(h.tau(c)).cell(centers[b]).cell(h.at(c, b)).cell(static_cast<std::uint64_t>(h.counts[c])).end_row();
    write_text(dir / ("phase_histogram_" + tag + ".csv"), csv.str());

    const auto phases = exit_phases(phase_d, records, d);
    js["exit_phase"] = circular_json(phases);
    CsvBuilder ex{"trajectory", "sample", "phase"};
    for (std::size_t i = 0; i < phase_d.size(); ++i)
      ex.cell(phase_d[i].trajectory).cell(static_cast<std::uint64_t>(phase_d[i].sample)).cell(phases[i]).end_row();
    write_text(dir / ("exit_phases_" + tag + ".csv"), ex.str());

    const auto& src = stationary[static_cast<std::size_t>(source_state(d))];
    const auto& dst = stationary[static_cast<std::size_t>(target_state(d))];
    if (!src || !dst) {
      js["hazard_omitted"] = true;
      js["hazard_note"] = "a basin has no labelled samples";
      continue;
    }
    try {
      const auto hz = hazard(h, *src, *dst);
      CsvBuilder hc{"phase", "raw", "hazard", "masked"};
      for (std::size_t b = 0; b < hz.phases.size(); ++b)
        hc.cell(hz.phases[b]).cell(hz.raw[b]).cell(hz.values[b]).cell(hz.masked[b] ? 1 : 0).end_row();
      write_text(dir / ("hazard_" + tag + ".csv"), hc.str());
      js["hazard_omitted"] = false;
    } catch (const InsufficientData& e) {
      js["hazard_omitted"] = true;
      js["hazard_note"] = e.what();
    }
  }
  write_text(dir / "escape.json", canonical_dump(summary));
}

void fit_stage(const std::vector<fs::path>& rates_files, const fs::path& dir, Exec exec) {
  fs::create_directories(dir);
  std::vector<json> rows;
  for (const auto& f : rates_files) rows.push_back(json::parse(read_text(f)));
  std::sort(rows.begin(), rows.end(),
            [](const json& a, const json& b) { return a.at("aleph").get<double>() < b.at("aleph").get<double>(); });

  CsvBuilder table{"aleph", "k12", "k12_ci_low", "k12_ci_high", "k21", "k21_ci_low", "k21_ci_high", "lambda_eff"};
  std::vector<ScalingPoint> p12, p21;
  auto cell_or_nan = [](const json& d, const char* key) {
    return d.contains(key) && d.at(key).is_number() ? d.at(key).get<double>() : std::nan("");
  };
  for (const auto& r : rows) {
    const double a = r.at("aleph").get<double>();
    const json& d12 = r.at("directions").at("12");
    const json& d21 = r.at("directions").at("21");
    table.cell(a);
    for (const json* d : {&d12, &d21})
      table.cell(cell_or_nan(*d, "k")).cell(cell_or_nan(*d, "ci_low")).cell(cell_or_nan(*d, "ci_high"));
    table.cell(r.at("lambda_eff").is_number() ? r.at("lambda_eff").get<double>() : std::nan("")).end_row();
    for (auto [d, pts] : {std::pair{&d12, &p12}, std::pair{&d21, &p21}}) {
      if (d->at("status") != "ok") continue;
      const double k = d->at("k").get<double>();
      // Standard error from the percentile interval, treated as normal.
      double sigma = (d->at("ci_high").get<double>() - d->at("ci_low").get<double>()) / (2.0 * kZ975);
      if (!(sigma > 0.0)) sigma = 0.1 * k;
      pts->push_back({a, k, sigma});
    }
  }
  write_text(dir / "rates_table.csv", table.str());
  fit_points_stage(p12, p21, dir, exec);
}

void fit_points_stage(std::span<const ScalingPoint> p12_in, std::span<const ScalingPoint> p21_in, const fs::path& dir,
                      Exec exec) {
  fs::create_directories(dir);
  std::vector<ScalingPoint> p12(p12_in.begin(), p12_in.end()), p21(p21_in.begin(), p21_in.end());
  auto by_aleph = [](const ScalingPoint& a, const ScalingPoint& b) { return a.aleph < b.aleph; };
  std::sort(p12.begin(), p12.end(), by_aleph);
  std::sort(p21.begin(), p21.end(), by_aleph);
  json fits = json::array();
  json status = json::object();
  CsvBuilder seff{"aleph", "direction", "form", "s_eff"};
  for (auto [tag, pts] : {std::pair{"12", &p12}, std::pair{"21", &p21}}) {
    std::vector<ScalingForm> forms{ScalingForm::Single};
    if (pts->size() >= 5) forms.push_back(ScalingForm::Biexponential);
    if (pts->size() < 3) {
      status[tag] = "insufficient points (" + std::to_string(pts->size()) + " usable alephs, need 3)";
      continue;
    }
    status[tag] = "ok";
    for (ScalingForm form : forms) {
      try {
        const auto fit = fit_scaling(*pts, form, tag, exec);
        fits.push_back({{"direction", tag},
                        {"requested_form", to_string(form)},
                        {"form", to_string(fit.form)},
                        {"params", fit.params},
                        {"std_errors", fit.std_errors},
                        {"chi2", fit.chi2},
                        {"gradient_norm", fit.gradient_norm},
                        {"fell_back", fit.fell_back},
                        {"warning", fit.warning}});
        const double lo = pts->front().aleph, hi = pts->back().aleph;
        for (int i = 0; i <= 40; ++i) {
          const double a = lo + (hi - lo) * i / 40.0;
          seff.cell(a).cell(tag).cell(to_string(fit.form)).cell(effective_action(fit, a)).end_row();
        }
      } catch (const FitError& e) {
        fits.push_back({{"direction", tag},
                        {"requested_form", to_string(form)},
                        {"error", e.what()},
                        {"best_residual", e.best_residual()}});
      }
    }
  }
  write_text(dir / "s_eff.csv", seff.str());
  write_text(dir / "fits.json", canonical_dump({{"status", status}, {"fits", fits}}));
}

// ---------------------------------------------------------------------------
// Manifest

const StageRecord* RunManifest::find(const std::string& name) const noexcept {
  for (const auto& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

bool RunManifest::complete() const noexcept {
  return !stages.empty() && std::all_of(stages.begin(), stages.end(), [](const StageRecord& s) { return s.status == "done"; });
}

json to_json(const RunManifest& m) {
  json stages = json::array();
  for (const auto& s : m.stages) {
    json outs = json::array();
    for (const auto& f : s.outputs) outs.push_back(to_json(f));
    json js = {{"name", s.name}, {"status", s.status}, {"fingerprint", s.fingerprint}, {"outputs", outs}};
    if (!s.error.empty()) js["error"] = s.error;
    stages.push_back(js);
  }
  return {{"format", "lcswitch-run"},
          {"tool_version", m.tool_version},
          {"config", m.config},
          {"config_hash", m.config_hash},
          {"stages", stages},
          {"timing", m.timing}};
}

std::string RunManifest::hash() const {
  json j = to_json(*this);
  j.erase("timing");
  return sha256_hex(canonical_dump(j));
}

RunManifest run_manifest_from_json(const json& j) {
  if (j.value("format", std::string()) != "lcswitch-run") throw IntegrityError("not a run manifest");
  RunManifest m;
  m.tool_version = j.at("tool_version").get<std::string>();
  m.config = j.at("config");
  m.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& s : j.at("stages")) {
    StageRecord r;
    r.name = s.at("name").get<std::string>();
    r.status = s.at("status").get<std::string>();
    r.fingerprint = s.at("fingerprint").get<std::string>();
    for (const auto& f : s.at("outputs")) r.outputs.push_back(file_record_from_json(f));
    r.error = s.value("error", std::string());
    m.stages.push_back(std::move(r));
  }
  m.timing = j.value("timing", json::object());
  return m;
}

RunManifest read_run_manifest(const fs::path& path) {
  try {
    return run_manifest_from_json(json::parse(read_text(path)));
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  }
}

bool verify_outputs(const fs::path& root, const StageRecord& stage) {
  for (const auto& f : stage.outputs) {
    const fs::path p = root / f.path;
    if (!fs::exists(p)) return false;
    if (fs::file_size(p) != f.size || sha256_file(p) != f.sha256)
      throw IntegrityError("checksum mismatch in " + p.string() + " (recorded by stage '" + stage.name + "')");
  }
  return true;
}

namespace {

class PipelineRunner {
 public:
  explicit PipelineRunner(const RunConfig& config) : config_(config), root_(config.output_root) {
    const fs::path mpath = root_ / "run_manifest.json";
    if (fs::exists(mpath)) prior_ = read_run_manifest(mpath);
    json snapshot = to_json(config);
    snapshot.erase("output_root");
    outcome_.manifest.config = snapshot;
    outcome_.manifest.config_hash = sha256_hex(canonical_dump(snapshot));
  }

  /// Runs or reuses one stage. `params` and `inputs` make up the fingerprint.
  const StageRecord& stage(const std::string& name, const fs::path& dir, const json& params,
                           const std::vector<FileRecord>& inputs, const std::function<void()>& body) {
    json in = json::array();
    for (const auto& f : inputs) in.push_back(to_json(f));
    const std::string fp =
        sha256_hex(canonical_dump({{"stage", name}, {"tool", kToolVersion}, {"params", params}, {"inputs", in}}));
    auto& m = outcome_.manifest;
    if (prior_) {
      const StageRecord* old = prior_->find(name);
      if (old && old->status == "done" && old->fingerprint == fp && verify_outputs(root_, *old)) {
        m.stages.push_back(*old);
        if (prior_->timing.contains(name)) m.timing[name] = prior_->timing.at(name);
        outcome_.reused.push_back(name);
        return m.stages.back();
      }
    }
    StageRecord rec;
    rec.name = name;
    rec.fingerprint = fp;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fs::remove_all(dir);
      body();
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      m.stages.push_back(rec);
      write_manifest();
      if (dynamic_cast<const IntegrityError*>(&e)) throw;
      throw StageFailure(name, e.what());
    }
    rec.status = "done";
    rec.outputs = inventory(root_, dir);
    m.timing[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.stages.push_back(std::move(rec));
    outcome_.recomputed.push_back(name);
    return m.stages.back();
  }

  void write_manifest() {
    fs::create_directories(root_);
    json j = to_json(outcome_.manifest);
    j["manifest_hash"] = outcome_.manifest.hash();
    write_text(root_ / "run_manifest.json", canonical_dump(j));
  }

  PipelineOutcome finish() {
    write_manifest();
    return std::move(outcome_);
  }

  const fs::path& root() const noexcept { return root_; }

 private:
  const RunConfig& config_;
  fs::path root_;
  std::optional<RunManifest> prior_;
  PipelineOutcome outcome_;
};

json simulate_params(const RunConfig& c, double aleph) {
  const auto cut = c.cutoffs_for(aleph);
  return {{"base", to_json(c.base)},
          {"aleph", aleph},
          {"scheme", to_string(c.scheme)},
          {"ensemble", to_json(c.ensemble)},
          {"cutoffs", {cut.n_a_max, cut.n_b_max}},
          {"seed", stage_seed(c.master_seed, "simulate", aleph)}};
}

}  // namespace

PipelineOutcome run_pipeline(const RunConfig& config) {
  config.validate();
  PipelineRunner run(config);
  const fs::path& root = run.root();
  const json analysis = to_json(config.analysis);
  std::vector<FileRecord> rates_inputs;
  std::vector<fs::path> rates_files;
  std::vector<std::vector<FileRecord>> escape_inputs;

  for (double aleph : config.alephs) {
    const std::string tag = aleph_dir_name(aleph);
    const fs::path base = root / tag;

    const auto& sim = run.stage("simulate/" + tag, base / "ensemble", simulate_params(config, aleph), {},
                                [&] { simulate_stage(config, aleph, base / "ensemble"); });
    std::vector<FileRecord> sim_out = sim.outputs;

    const std::uint64_t seg_seed = stage_seed(config.master_seed, "segment", aleph);
    const auto& seg = run.stage("segment/" + tag, base / "segment", {{"analysis", analysis}, {"seed", seg_seed}}, sim_out,
                                [&] {
                                  segment_stage(base / "ensemble" / "manifest.json",
                                                segmentation_controls(config.analysis, seg_seed), base / "segment");
                                });
    std::vector<FileRecord> seg_out = seg.outputs;

    const std::uint64_t surv_seed = stage_seed(config.master_seed, "survival", aleph);
    const auto& surv = run.stage("survival/" + tag, base / "survival",
                                 {{"analysis", analysis}, {"seed", surv_seed}, {"aleph", aleph}}, seg_out, [&] {
                                   survival_stage(base / "segment", config.analysis, surv_seed, aleph,
                                                  base / "survival");
                                 });
    for (const auto& f : surv.outputs) {
      if (f.path.ends_with("rates.json")) {
        rates_inputs.push_back(f);
        rates_files.push_back(root / f.path);
      }
    }
    sim_out.insert(sim_out.end(), seg_out.begin(), seg_out.end());
    escape_inputs.push_back(std::move(sim_out));
  }

  run.stage("fit-rates", root / "fits", json::object(), rates_inputs, [&] { fit_stage(rates_files, root / "fits"); });

  for (std::size_t i = 0; i < config.alephs.size(); ++i) {
    const std::string tag = aleph_dir_name(config.alephs[i]);
    const fs::path base = root / tag;
    run.stage("escape/" + tag, base / "escape", {{"analysis", analysis}, {"kappa_a", config.base.kappa_a}},
              escape_inputs[i], [&] {
                escape_stage(base / "ensemble" / "manifest.json", base / "segment", config.analysis,
                             config.base.kappa_a, base / "escape");
              });
  }
  return run.finish();
}

}  // namespace lcswitch
