// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 1 4 7      a subset
//
// LCSWITCH_ACCEPT_DIR sets the scratch root for the pipeline criteria
// (default: the system temp directory). The exit status is the number of
// failed criteria.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include "lcswitch/csv.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/hmm.hpp"
#include "lcswitch/meanfield.hpp"
#include "lcswitch/parallel.hpp"
#include "lcswitch/pipeline.hpp"
#include "lcswitch/qjump.hpp"
#include "lcswitch/report.hpp"
#include "lcswitch/switching_stats.hpp"
#include "lcswitch/trajectory_io.hpp"
#include "oracles.hpp"

using namespace lcswitch;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

struct Stats {
  double mean = 0.0, se = 0.0;
};

Stats column(const std::vector<TrajectoryRecord>& recs, std::size_t k, const std::vector<double> TrajectoryRecord::*col) {
  double s = 0.0, s2 = 0.0;
  for (const auto& r : recs) {
    const double v = (r.*col)[k];
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(recs.size());
  const double m = s / n;
  return {m, std::sqrt(std::max(0.0, (s2 - n * m * m) / (n - 1.0)) / n)};
}

fs::path scratch(const std::string& name) {
  const char* env = std::getenv("LCSWITCH_ACCEPT_DIR");
  const fs::path root = env ? fs::path(env) : fs::temp_directory_path() / "lcswitch_acceptance";
  const fs::path p = root / name;
  fs::remove_all(p);
  return p;
}

// ---------------------------------------------------------------------------

Verdict damped_cavity() {
  SystemParams p = working_point();
  p.g = 0.0;
  p.F = 0.0;
  EnsembleSpec spec;
  spec.n_traj = 500;
  spec.t_transient = 0.0;
  spec.t_total_post = 20.0;
  spec.sample_dt = 1.0;
  spec.initial.kind = InitialStatePolicy::Kind::Coherent;
  spec.initial.alpha = cplx(2.0, 0.0);
  const auto recs = simulate_ensemble(spec, {1.0, Scheme::TheoryA, p}, {20, 0}, 2024);
  Verdict v{true, ""};
  for (double t : {5.0, 10.0, 20.0}) {
    const auto s = column(recs, static_cast<std::size_t>(t), &TrajectoryRecord::n_a);
    const double exact = 4.0 * std::exp(-p.kappa_a * t);
    // Coherent trajectories coincide, so the standard error can vanish;
    // 1e-9 is a round-off floor.
    const bool ok = std::abs(s.mean - exact) < 3.0 * s.se + 1e-9;
    v.pass = v.pass && ok;
    v.detail += "t=" + fmt(t) + ": |dev|=" + fmt(std::abs(s.mean - exact), 3) + " vs 3se=" + fmt(3.0 * s.se, 3) + "; ";
  }
  return v;
}

Verdict master_equation() {
  SystemParams p = working_point();
  p.g = 0.0;
  p.F = 0.15;
  p.delta_a = -0.3;
  const FockCutoffs c{6, 0};
  EnsembleSpec spec;
  spec.n_traj = 2000;
  spec.t_transient = 0.0;
  spec.t_total_post = 50.0;
  spec.sample_dt = 5.0;
  spec.initial.kind = InitialStatePolicy::Kind::Fock;
  spec.initial.fock_n_a = 3;
  const auto recs = simulate_ensemble(spec, {1.0, Scheme::TheoryA, p}, c, 77);

  oracle::MasterEquation me(p, c);
  Eigen::VectorXcd v0 = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(c.dimension()));
  v0(static_cast<Eigen::Index>(c.index(3, 0))) = 1.0;
  oracle::Mat rho = v0 * v0.adjoint();
  const oracle::Mat n_op = oracle::dense(number_a(c));
  std::size_t ok = 0, checkpoints = 0;
  double worst = 0.0;
  for (std::size_t k = 1; k < recs[0].size(); ++k) {
    me.evolve(rho, spec.sample_dt, 1e-3);
    const double exact = (rho * n_op).trace().real();
    const auto s = column(recs, k, &TrajectoryRecord::n_a);
    const double z = std::abs(s.mean - exact) / s.se;
    worst = std::max(worst, z);
    ok += z < 3.0 ? 1 : 0;
    ++checkpoints;
  }
  return {checkpoints == 10 && ok == checkpoints,
          std::to_string(ok) + "/" + std::to_string(checkpoints) + " checkpoints within 3 sigma, worst |z|=" + fmt(worst, 3)};
}

Verdict meanfield_working_point() {
  const auto t0 = std::chrono::steady_clock::now();
  const SystemParams p = working_point();
  const auto grid = initial_condition_grid();
  const auto cells = phase_scan(p, {-0.72, -0.68, 5}, {0.19, 0.21, 5}, grid);
  const PhaseCell& center = cells[2 * 5 + 2];
  const auto orbits = extract_limit_cycles(p, center);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool two = orbits.size() == 2;
  const bool ordered = two && orbits[0].diagnostics.mean_na < orbits[1].diagnostics.mean_na;
  std::string d = "center (" + fmt(center.delta_a) + ", " + fmt(center.F_tilde) + ") = " + to_string(center.label) +
                  ", limit cycles=" + std::to_string(orbits.size());
  if (two)
    d += ", meanNa " + fmt(orbits[0].diagnostics.mean_na) + " < " + fmt(orbits[1].diagnostics.mean_na);
  d += ", runtime " + fmt(seconds, 3) + " s (budget 600)";
  return {two && ordered && to_string(center.label) == "2LC" && seconds < 600.0, d};
}

Verdict kaplan_meier_exact() {
  bool ok = true;
  const auto km = kaplan_meier(std::vector<Censored>{{1.0, true}, {2.0, true}, {2.5, false}});
  ok = ok && km.at(1.0) == 2.0 / 3.0 && km.at(2.0) == 1.0 / 3.0 && km.at(2.5) == 1.0 / 3.0;
  const auto all = kaplan_meier(std::vector<Censored>{{1.0, false}, {3.0, false}});
  ok = ok && all.at(0.0) == 1.0 && all.at(100.0) == 1.0;
  const auto mid = kaplan_meier(std::vector<Censored>{{1.0, true}, {2.0, false}, {3.0, true}, {4.0, true}});
  ok = ok && mid.at(3.0) == 3.0 / 4.0 * (1.0 / 2.0) && mid.at(4.0) == 0.0;

  std::mt19937_64 gen(8);
  auto data = oracle::censored_exponential(1000, 0.3, 0.0, gen);
  for (auto& d : data) d.duration = std::ceil(d.duration * 4.0) / 4.0;  // ties
  const auto e = kaplan_meier(data);
  std::size_t mismatches = 0;
  for (std::size_t k = 0; k < e.times.size(); ++k) {
    const auto tail = std::count_if(data.begin(), data.end(), [&](const Censored& c) { return c.duration > e.times[k]; });
    mismatches += e.survival[k] == static_cast<double>(tail) / 1000.0 ? 0 : 1;
  }
  return {ok && mismatches == 0, "hand tables exact; ECDF complement mismatches " + std::to_string(mismatches) + " of " +
                                     std::to_string(e.times.size()) + " event times"};
}

Verdict censored_mle() {
  const double k = 0.05;
  // Exp(k / 4) censoring gives P(censored) = 1/5.
  const double censor_rate = k / 4.0;
  std::size_t covered = 0;
  double first_dev = 0.0, censored_fraction = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    std::mt19937_64 gen(1000 + static_cast<std::uint64_t>(rep));
    const auto data = oracle::censored_exponential(5000, k, censor_rate, gen);
    BootstrapControls b;
    b.seed = 77 + static_cast<std::uint64_t>(rep);
    const auto fit = fit_conditional_rate(data, 0.0, b);
    if (rep == 0) {
      first_dev = std::abs(fit.k / k - 1.0);
      censored_fraction = static_cast<double>(fit.n_censored) / 5000.0;
    }
    covered += fit.ci_low <= k && k <= fit.ci_high ? 1 : 0;
  }
  return {first_dev < 0.03 && covered >= 90, "censored " + fmt(100 * censored_fraction, 3) + "%, |k/k_true-1|=" +
                                                 fmt(first_dev, 3) + ", CI coverage " + std::to_string(covered) + "/100"};
}

Verdict hmm_oracle() {
  std::mt19937_64 gen(2718);
  std::uniform_int_distribution<std::size_t> len(1, 10);
  std::uniform_real_distribution<double> u(0.05, 0.95), m(-2.0, 2.0), s(0.3, 1.5), r(-0.5, 0.5);
  std::size_t exact = 0;
  for (int inst = 0; inst < 100; ++inst) {
    HmmParams p;
    p.pi[0] = u(gen);
    p.pi[1] = 1.0 - p.pi[0];
    for (int i = 0; i < 2; ++i) {
      const double a = u(gen);
      p.A(i, 0) = a;
      p.A(i, 1) = 1.0 - a;
    }
    for (auto& e : p.emissions) {
      e.mean = Obs(m(gen), m(gen));
      const double s1 = s(gen), s2 = s(gen), rho = r(gen);
      e.cov << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
    }
    const auto x = oracle::sample_hmm(p, len(gen), gen);
    exact += viterbi(p, x).labels == oracle::brute_force_path(p, x) ? 1 : 0;
  }

  HmmParams truth;
  truth.pi = {0.5, 0.5};
  truth.A << 0.98, 0.02, 0.05, 0.95;
  truth.emissions[0].mean = Obs(-1.0, 0.0);
  truth.emissions[1].mean = Obs(1.5, 1.0);
  truth.emissions[0].cov << 0.25, 0.05, 0.05, 0.2;
  truth.emissions[1].cov << 0.3, -0.04, -0.04, 0.25;
  std::mt19937_64 g2(99);
  std::vector<ObsSequence> data;
  for (int i = 0; i < 10; ++i) data.push_back(oracle::sample_hmm(truth, 5000, g2));
  auto fit = baum_welch(kmeans_init(data), data, {}).params;
  fit.canonicalize();
  const double e12 = std::abs(fit.A(0, 1) / 0.02 - 1.0), e21 = std::abs(fit.A(1, 0) / 0.05 - 1.0);
  return {exact == 100 && e12 < 0.2 && e21 < 0.2,
          "Viterbi exact on " + std::to_string(exact) + "/100; a12=" + fmt(fit.A(0, 1)) + " a21=" + fmt(fit.A(1, 0))};
}

Verdict scaling_round_trip() {
  std::vector<ScalingPoint> single, bi;
  for (double a = 2.0; a <= 9.0; a += 1.0) {
    const double k1 = 0.267 * std::exp(-0.178 * a);
    single.push_back({a, k1, 0.05 * k1});
    const double k2 = 0.180 * std::exp(-0.303 * a) + 2.454 * std::exp(-1.057 * a);
    bi.push_back({a, k2, 0.05 * k2});
  }
  const auto f1 = fit_scaling(single, ScalingForm::Single, "12");
  const auto f2 = fit_scaling(bi, ScalingForm::Biexponential, "21");
  const double e1 = std::max(std::abs(f1.A() / 0.267 - 1.0), std::abs(f1.S() / 0.178 - 1.0));
  const std::array<double, 4> truth{0.180, 0.303, 2.454, 1.057};
  double e2 = f2.params.size() == 4 ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < f2.params.size() && i < 4; ++i) e2 = std::max(e2, std::abs(f2.params[i] / truth[i] - 1.0));
  bool decreasing = true;
  double prev = effective_action(f2, 2.0);
  for (double a = 2.05; a <= 40.0; a += 0.05) {
    const double s = effective_action(f2, a);
    decreasing = decreasing && s < prev;
    prev = s;
  }
  const double tail = std::abs(effective_action(f2, 40.0) - f2.params.at(1));
  return {e1 < 1e-6 && e2 < 0.01 && decreasing && tail < 1e-6,
          "single max rel err " + fmt(e1, 3) + ", biexp max rel err " + fmt(e2, 3) + ", S_eff " +
              (decreasing ? "strictly decreasing" : "NOT decreasing") + ", |S_eff(40)-S_ph|=" + fmt(tail, 3)};
}

// ---------------------------------------------------------------------------
// Physics run and determinism

RunConfig desk_config(const fs::path& root) {
  RunConfig c;
  c.alephs = {3.0};
  // 20 x 5000 gives about 500 switches per direction; the 1->2 exit-phase
  // set is still small because few LC1 dwells outlast the pre filter.
  c.ensemble.n_traj = 20;
  c.ensemble.t_transient = 500.0;
  c.ensemble.t_total_post = 5000.0;
  c.ensemble.sample_dt = 1.0;
  c.cutoffs = {{3.0, {20, 110}}};
  c.master_seed = 1;
  c.output_root = root;
  if (const char* n = std::getenv("LCSWITCH_ACCEPT_TRAJ")) c.ensemble.n_traj = std::stoul(n);
  return c;
}

Verdict desk_physics() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig c = desk_config(scratch("desk"));
  run_pipeline(c);
  const auto rep = write_report(c.output_root, c.output_root / "report");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json& s = rep.summary;

  const bool bimodal = s.at("stationary").at("3").at("n_a_bimodal").get<bool>();
  const json& row = s.at("rates").at(0);
  bool ratio_ok = false, scale_ok = false;
  std::string ratio_txt = "rates refused";
  if (row.at("lambda_eff").is_number()) {
    const double k12 = row.at("k12").get<double>(), k21 = row.at("k21").get<double>();
    const double ratio = k12 / k21;
    ratio_ok = ratio >= 0.5 && ratio <= 2.0;
    const double total = static_cast<double>(c.ensemble.n_traj) * c.ensemble.t_total_post;
    const double longest = std::max(1.0 / k12, 1.0 / k21);
    scale_ok = total >= 100.0 * longest;
    ratio_txt = "k12/k21=" + fmt(ratio, 3) + " (k12=" + fmt(k12, 3) + ", k21=" + fmt(k21, 3) + "), total time " +
                fmt(total, 6) + (scale_ok ? " >= " : " < ") + "100 x " + fmt(longest, 4);
  }
  bool localized = false;
  std::string phase_txt = "no 1->2 exit phases";
  const json& e12 = s.at("escape").at("3").at("12");
  if (e12.contains("exit_phase")) {
    const json& ep = e12.at("exit_phase");
    const std::size_t n = ep.at("n").get<std::size_t>();
    localized = n >= 2 && ep.at("localized").get<bool>();
    phase_txt = "1->2 exit phases n=" + std::to_string(n) + ", R=" + fmt(ep.at("resultant").get<double>(), 3) +
                " vs uniform reference " + fmt(ep.at("uniform_reference_resultant").get<double>(), 3);
  }
  return {bimodal && ratio_ok && scale_ok && localized,
          std::string("(a) ") + (bimodal ? "bimodal" : "NOT bimodal") + " (b) " + ratio_txt + (ratio_ok ? "" : " [out of range]") +
              " (c) " + phase_txt + (localized ? " [localized]" : " [not localized]") + "; runtime " + fmt(seconds, 4) +
              " s"};
}

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    // The run manifest is the one file with wall-clock timings; its hash
    // (which excludes them) is compared instead.
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    out[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
  }
  return out;
}

Verdict determinism() {
  RunConfig a = desk_config(scratch("det_a"));
  a.ensemble.n_traj = 2;
  a.ensemble.t_total_post = 2000.0;
  RunConfig b = a;
  b.output_root = scratch("det_b");
  const auto ra = run_pipeline(a);
  const auto rb = run_pipeline(b);
  write_report(a.output_root, a.output_root / "report");
  write_report(b.output_root, b.output_root / "report");
  const auto ta = tree_bytes(a.output_root), tb = tree_bytes(b.output_root);
  std::size_t differing = 0;
  for (const auto& [path, bytes] : ta) {
    const auto it = tb.find(path);
    differing += it == tb.end() || it->second != bytes ? 1 : 0;
  }
  const bool same_set = ta.size() == tb.size();
  const bool same_hash = ra.manifest.hash() == rb.manifest.hash();
  return {same_set && differing == 0 && same_hash, std::to_string(ta.size()) + " files compared, " +
                                                     std::to_string(differing) + " differ; manifest hashes " +
                                                     (same_hash ? "equal" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  configure_workers_from_env();
  const std::vector<std::pair<int, std::function<Verdict()>>> all{
      {1, damped_cavity},   {2, master_equation}, {3, meanfield_working_point},
      {4, kaplan_meier_exact}, {5, censored_mle}, {6, hmm_oracle},
      {7, scaling_round_trip}, {8, desk_physics}, {9, determinism}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& [id, fn] : all) {
    if (!wanted.empty() && !wanted.contains(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += v.pass ? 0 : 1;
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "  [" << fmt(s, 3)
              << " s]" << std::endl;
  }
  return failures;
}
