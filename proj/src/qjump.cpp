#include "lcswitch/qjump.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lcswitch/errors.hpp"

namespace lcswitch {

namespace {

constexpr int kMaxSubdivision = 30;
// Consecutive samples near the cutoff before a truncation warning is raised.
constexpr std::size_t kSaturationRun = 10;

// y = -i V x for the off-diagonal part V of H_eff.
void apply_coupling(const OperatorSet& ops, std::span<const cplx> x, std::span<cplx> y) {
  ops.h_off.apply(x, y);
  for (auto& v : y) v = cplx{v.imag(), -v.real()};
}

void refresh_phases(const OperatorSet& ops, double dt, StepWorkspace& ws) {
  if (ws.cached_dt == dt) return;
  const std::size_t n = ops.h_diag.size();
  for (std::size_t i = 0; i < n; ++i) {
    const cplx gen = cplx{0.0, -1.0} * ops.h_diag[i];  // -i h_ii
    ws.phase_half[i] = std::exp(gen * (0.5 * dt));
    ws.phase_full[i] = std::exp(gen * dt);
  }
  ws.cached_dt = dt;
}

double edge_population(const QuantumState& psi) {
  const FockCutoffs& c = psi.cutoffs();
  const auto amp = psi.amplitudes();
  double top_a = 0.0, top_b = 0.0;
  for (int nb = 0; nb <= c.n_b_max; ++nb) top_a += std::norm(amp[c.index(c.n_a_max, nb)]);
  if (c.n_b_max > 0)
    for (int na = 0; na <= c.n_a_max; ++na) top_b += std::norm(amp[c.index(na, c.n_b_max)]);
  return std::max(top_a, top_b);
}

std::pair<double, double> mean_populations(const QuantumState& psi, const OperatorSet& ops) noexcept {
  const auto amp = psi.amplitudes();
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < amp.size(); ++i) {
    const double w = std::norm(amp[i]);
    na += w * ops.n_a_diag[i];
    nb += w * ops.n_b_diag[i];
  }
  return {na, nb};
}

cplx lowering_expectation(const QuantumState& psi, const OperatorMatrix& op, std::vector<cplx>& buf) {
  op.apply(psi.amplitudes(), buf);
  const auto amp = psi.amplitudes();
  cplx acc = 0.0;
  for (std::size_t i = 0; i < amp.size(); ++i) acc += std::conj(amp[i]) * buf[i];
  return acc;
}

QuantumState initial_state(const InitialStatePolicy& policy, double aleph, const FockCutoffs& cutoffs,
                           CounterRng& rng) {
  const double s = std::sqrt(aleph);
  switch (policy.kind) {
    case InitialStatePolicy::Kind::Fock:
      if (policy.fock_n_a < 0 || policy.fock_n_a > cutoffs.n_a_max || policy.fock_n_b < 0 ||
          policy.fock_n_b > cutoffs.n_b_max)
        throw InvalidParameter("initial Fock state outside the cutoffs");
      return QuantumState::fock(cutoffs, policy.fock_n_a, policy.fock_n_b);
    case InitialStatePolicy::Kind::Coherent:
      return QuantumState::coherent(cutoffs, s * policy.alpha, s * policy.beta);
    case InitialStatePolicy::Kind::UniformDisk:
      break;
  }
  return QuantumState::coherent(cutoffs, s * draw_initial_alpha(policy, aleph, cutoffs, rng), 0.0);
}

}  // namespace

std::size_t TrajectoryRecord::first_post_transient() const noexcept {
  return static_cast<std::size_t>(std::lower_bound(t.begin(), t.end(), transient_cut) - t.begin());
}

EnsembleSpec EnsembleSpec::in_kappa_units(double kappa_a, std::size_t n_traj, double transient_kappa,
                                          double post_kappa, double sample_kappa) {
  if (!(kappa_a > 0.0)) throw InvalidParameter("kappa_a must be positive");
  EnsembleSpec s;
  s.n_traj = n_traj;
  s.t_transient = transient_kappa / kappa_a;
  s.t_total_post = post_kappa / kappa_a;
  s.sample_dt = sample_kappa / kappa_a;
  return s;
}

void EnsembleSpec::validate() const {
  if (n_traj < 1) throw InvalidParameter("n_traj must be at least 1");
  if (!(t_transient >= 0.0) || !std::isfinite(t_transient)) throw InvalidParameter("t_transient must be >= 0");
  if (!(t_total_post > 0.0) || !std::isfinite(t_total_post)) throw InvalidParameter("t_total_post must be > 0");
  if (!(sample_dt > 0.0) || !std::isfinite(sample_dt)) throw InvalidParameter("sample_dt must be > 0");
  if (!(dt_max >= 0.0)) throw InvalidParameter("dt_max must be >= 0");
  if (!(p_cap > 0.0 && p_cap < 1.0)) throw InvalidParameter("p_cap must lie in (0, 1)");
  if (initial.kind == InitialStatePolicy::Kind::UniformDisk && !(initial.disk_radius >= 0.0))
    throw InvalidParameter("disk radius must be >= 0");
}

StepWorkspace::StepWorkspace(const OperatorSet& ops) {
  const std::size_t n = ops.cutoffs.dimension();
  for (auto* v : {&k1, &k2, &k3, &k4, &u, &phase_half, &phase_full}) v->assign(n, cplx{});
}

void propagate_no_jump(QuantumState& psi, const OperatorSet& ops, double dt, StepWorkspace& ws) {
  refresh_phases(ops, dt, ws);
  auto x = psi.amplitudes();
  const std::size_t n = x.size();
  const auto& eh = ws.phase_half;
  const auto& ef = ws.phase_full;
  const double h2 = 0.5 * dt;

  // Lawson (integrating-factor) RK4: the diagonal of H_eff is integrated
  // exactly, RK4 handles only the coupling.
  apply_coupling(ops, x, ws.k1);
  for (std::size_t i = 0; i < n; ++i) ws.u[i] = eh[i] * (x[i] + h2 * ws.k1[i]);
  apply_coupling(ops, ws.u, ws.k2);
  for (std::size_t i = 0; i < n; ++i) ws.u[i] = eh[i] * x[i] + h2 * ws.k2[i];
  apply_coupling(ops, ws.u, ws.k3);
  for (std::size_t i = 0; i < n; ++i) ws.u[i] = ef[i] * x[i] + dt * eh[i] * ws.k3[i];
  apply_coupling(ops, ws.u, ws.k4);
  const double h6 = dt / 6.0;
  for (std::size_t i = 0; i < n; ++i)
    x[i] = ef[i] * x[i] + h6 * (ef[i] * ws.k1[i] + 2.0 * eh[i] * (ws.k2[i] + ws.k3[i]) + ws.k4[i]);
}

std::pair<double, double> jump_probabilities(const QuantumState& psi, const OperatorSet& ops, double dt) noexcept {
  const auto [na, nb] = mean_populations(psi, ops);
  return {ops.params.kappa_a * na * dt, ops.params.kappa_b * nb * dt};
}

void apply_jump(QuantumState& psi, const OperatorSet& ops, JumpChannel channel, StepWorkspace& ws) {
  const OperatorMatrix& op = channel == JumpChannel::Optical ? ops.a : ops.b;
  op.apply(psi.amplitudes(), ws.u);
  std::copy(ws.u.begin(), ws.u.end(), psi.amplitudes().begin());
  psi.normalize();
}

namespace {

void jump_step_impl(QuantumState& psi, const OperatorSet& ops, double dt, double offset, CounterRng& rng,
                    StepWorkspace& ws, double p_cap, int depth, StepOutcome& out, bool first) {
  const auto [p_a, p_b] = jump_probabilities(psi, ops, dt);
  if (first) {
    out.p_a = p_a;
    out.p_b = p_b;
  }
  if (!std::isfinite(p_a + p_b)) throw NumericalError("jump probability is not finite");
  if (p_a + p_b > p_cap) {
    if (depth >= kMaxSubdivision)
      throw StepError("jump probability stays above the cap after " + std::to_string(kMaxSubdivision) +
                      " subdivisions");
    out.substeps += 1;
    jump_step_impl(psi, ops, 0.5 * dt, offset, rng, ws, p_cap, depth + 1, out, false);
    jump_step_impl(psi, ops, 0.5 * dt, offset + 0.5 * dt, rng, ws, p_cap, depth + 1, out, false);
    return;
  }
  const double mu = rng.uniform();
  if (mu < p_a + p_b) {
    // The jump is placed at the step midpoint and the state keeps evolving
    // around it; collapsing in place of the whole step would stall the
    // coherent evolution by dt at every jump.
    const JumpChannel ch = mu < p_a ? JumpChannel::Optical : JumpChannel::Mechanical;
    propagate_no_jump(psi, ops, 0.5 * dt, ws);
    apply_jump(psi, ops, ch, ws);
    propagate_no_jump(psi, ops, 0.5 * dt, ws);
    out.jumps.push_back({offset + 0.5 * dt, ch});
  } else {
    propagate_no_jump(psi, ops, dt, ws);
  }
  psi.normalize();
}

}  // namespace

StepOutcome jump_step(QuantumState& psi, const OperatorSet& ops, double dt, CounterRng& rng, StepWorkspace& ws,
                      double p_cap) {
  if (!(dt > 0.0)) throw InvalidParameter("step must be positive");
  StepOutcome out;
  jump_step_impl(psi, ops, dt, 0.0, rng, ws, p_cap, 0, out, true);
  return out;
}

double default_max_step(const OperatorSet& ops, const SystemParams& p) {
  const double rate = std::max({std::abs(p.delta_a), p.omega_b, p.kappa_a * ops.cutoffs.n_a_max});
  double dt = 0.05 / rate;
  // RK4 is stable for |h lambda| < 2.8 on the imaginary axis; stay well inside.
  const double coupling = ops.h_off.max_abs_row_sum();
  if (coupling > 0.0) dt = std::min(dt, 2.0 / coupling);
  return dt;
}

cplx draw_initial_alpha(const InitialStatePolicy& policy, double aleph, const FockCutoffs& cutoffs,
                        CounterRng& rng) {
  double radius = policy.disk_radius;
  if (policy.clip_to_cutoffs) radius = std::min(radius, 0.5 * std::sqrt(cutoffs.n_a_max / aleph));
  const double r = radius * std::sqrt(rng.uniform());
  const double theta = 2.0 * std::numbers::pi * rng.uniform();
  return std::polar(r, theta);
}

std::uint64_t trajectory_seed(std::uint64_t master_seed, std::uint64_t index) noexcept {
  return derive_seed(master_seed, "simulation", index);
}

TrajectoryRecord simulate_trajectory(const EnsembleSpec& spec, const ScalingPlan& plan, const FockCutoffs& cutoffs,
                                     std::uint64_t seed, std::uint64_t index) {
  const ResolvedParams rp = resolve_params(plan);
  const OperatorSet ops = OperatorSet::build(rp.params, cutoffs);
  return simulate_trajectory(spec, plan, ops, seed, index);
}

TrajectoryRecord simulate_trajectory(const EnsembleSpec& spec, const ScalingPlan& plan, const OperatorSet& ops,
                                     std::uint64_t seed, std::uint64_t index) {
  spec.validate();
  const ResolvedParams rp = resolve_params(plan);
  if (!(rp.params == ops.params)) throw InvalidParameter("operator set does not match the scaling plan");

  const double aleph = plan.aleph;
  const double tf = rp.time_factor;
  const double t_end = spec.t_transient + spec.t_total_post;
  const auto n_intervals = static_cast<std::size_t>(std::floor(t_end / spec.sample_dt + 1e-9));

  // Physical step: an integer fraction of the physical sampling interval.
  const double sample_phys = spec.sample_dt / tf;
  const double dt_cap = spec.dt_max > 0.0 ? spec.dt_max : default_max_step(ops, rp.params);
  const auto substeps = static_cast<std::size_t>(std::ceil(sample_phys / dt_cap - 1e-12));
  const double dt = sample_phys / static_cast<double>(std::max<std::size_t>(substeps, 1));

  TrajectoryRecord rec;
  rec.seed = seed;
  rec.index = index;
  rec.aleph = aleph;
  rec.scheme = plan.scheme;
  rec.cutoffs = ops.cutoffs;
  rec.dt_sample = spec.sample_dt;
  rec.transient_cut = spec.t_transient;
  rec.time_factor = tf;
  for (auto* col : {&rec.t, &rec.n_a, &rec.n_b, &rec.alpha_re, &rec.alpha_im, &rec.beta_re, &rec.beta_im})
    col->reserve(n_intervals + 1);

  CounterRng rng(seed);
  QuantumState psi = initial_state(spec.initial, aleph, ops.cutoffs, rng);
  StepWorkspace ws(ops);
  std::vector<cplx> buf(ops.cutoffs.dimension());

  const double inv_aleph = 1.0 / aleph;
  const double inv_sqrt = 1.0 / std::sqrt(aleph);
  const double na_limit = 0.9 * ops.cutoffs.n_a_max;
  const double nb_limit = 0.9 * ops.cutoffs.n_b_max;
  std::size_t saturated_run = 0;

  auto record_sample = [&](std::size_t k) {
    const auto [na, nb] = mean_populations(psi, ops);
    const cplx a = lowering_expectation(psi, ops.a, buf);
    const cplx b = lowering_expectation(psi, ops.b, buf);
    rec.t.push_back(static_cast<double>(k) * spec.sample_dt);
    rec.n_a.push_back(std::max(0.0, na) * inv_aleph);
    rec.n_b.push_back(std::max(0.0, nb) * inv_aleph);
    rec.alpha_re.push_back(a.real() * inv_sqrt);
    rec.alpha_im.push_back(a.imag() * inv_sqrt);
    rec.beta_re.push_back(b.real() * inv_sqrt);
    rec.beta_im.push_back(b.imag() * inv_sqrt);
    rec.max_edge_population = std::max(rec.max_edge_population, edge_population(psi));
    const bool near_edge = na >= na_limit || (ops.cutoffs.n_b_max > 0 && nb >= nb_limit);
    saturated_run = near_edge ? saturated_run + 1 : 0;
    if (saturated_run >= kSaturationRun) rec.truncation_warning = true;
  };

  record_sample(0);
  double t_phys = 0.0;
  for (std::size_t k = 1; k <= n_intervals; ++k) {
    for (std::size_t s = 0; s < substeps; ++s) {
      StepOutcome out = jump_step(psi, ops, dt, rng, ws, spec.p_cap);
      for (const JumpEvent& j : out.jumps) rec.jumps.push_back({(t_phys + j.time) * tf, j.channel});
      t_phys = (static_cast<double>(k - 1) * static_cast<double>(substeps) + static_cast<double>(s + 1)) * dt;
    }
    record_sample(k);
  }
  return rec;
}

std::vector<TrajectoryRecord> simulate_ensemble(const EnsembleSpec& spec, const ScalingPlan& plan,
                                                const FockCutoffs& cutoffs, std::uint64_t master_seed, Exec exec) {
  spec.validate();
  const ResolvedParams rp = resolve_params(plan);
  const OperatorSet ops = OperatorSet::build(rp.params, cutoffs);
  std::vector<TrajectoryRecord> out(spec.n_traj);
  for_each_index(exec, spec.n_traj, [&](std::size_t i) {
    out[i] = simulate_trajectory(spec, plan, ops, trajectory_seed(master_seed, i), i);
  });
  return out;
}

std::string to_string(Projection p) {
  switch (p) {
    case Projection::OpticalPlane: return "optical";
    case Projection::MechanicalPlane: return "mechanical";
    case Projection::Populations: return "populations";
  }
  return "?";
}

Projection parse_projection(const std::string& s) {
  if (s == "optical" || s == "alpha") return Projection::OpticalPlane;
  if (s == "mechanical" || s == "beta") return Projection::MechanicalPlane;
  if (s == "populations" || s == "n") return Projection::Populations;
  throw InvalidParameter("unknown projection '" + s + "'");
}

std::pair<double, double> project(const TrajectoryRecord& r, std::size_t k, Projection p) noexcept {
  switch (p) {
    case Projection::OpticalPlane: return {r.alpha_re[k], r.alpha_im[k]};
    case Projection::MechanicalPlane: return {r.beta_re[k], r.beta_im[k]};
    case Projection::Populations: return {r.n_a[k], r.n_b[k]};
  }
  return {0.0, 0.0};
}

Histogram2D stationary_density(std::span<const TrajectoryRecord> records, Projection projection,
                               std::size_t bins_x, std::size_t bins_y, std::optional<HistogramRange> range) {
  if (records.empty()) throw InsufficientData("stationary_density: no records");
  for (const auto& r : records) {
    if (r.aleph != records.front().aleph || r.dt_sample != records.front().dt_sample)
      throw DimensionMismatch("stationary_density: records differ in aleph or sampling grid");
  }
  if (!range) {
    std::vector<double> xs, ys;
    for (const auto& r : records) {
      for (std::size_t k = r.first_post_transient(); k < r.size(); ++k) {
        auto [x, y] = project(r, k, projection);
        xs.push_back(x);
        ys.push_back(y);
      }
    }
    if (xs.empty()) throw InsufficientData("stationary_density: no post-transient samples");
    range = data_range(xs, ys);
  }
  HistogramAccumulator acc(*range, bins_x, bins_y);
  for (const auto& r : records) {
    for (std::size_t k = r.first_post_transient(); k < r.size(); ++k) {
      auto [x, y] = project(r, k, projection);
      acc.add(x, y);
    }
  }
  return acc.normalized();
}

}  // namespace lcswitch
