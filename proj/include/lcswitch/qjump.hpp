#pragma once

// Quantum-jump (Monte Carlo wave-function) trajectories with first-order
// jump sampling and trajectory-resolved observables on a uniform grid.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcswitch/core_model.hpp"
#include "lcswitch/histogram.hpp"
#include "lcswitch/parallel.hpp"
#include "lcswitch/rng.hpp"

namespace lcswitch {

enum class JumpChannel : std::uint8_t { Optical = 0, Mechanical = 1 };

struct JumpEvent {
  double time = 0.0;
  JumpChannel channel = JumpChannel::Optical;

  bool operator==(const JumpEvent&) const = default;
};

/// One trajectory. Observables are rescaled: n~ = n / aleph and
/// alpha~ = <a> / sqrt(aleph). Times are reported times (t' for the
/// adjoint scheme). Columns share one uniform grid t_k = k * dt_sample.
struct TrajectoryRecord {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  double aleph = 1.0;
  Scheme scheme = Scheme::TheoryA;
  FockCutoffs cutoffs{};
  double dt_sample = 0.0;
  double transient_cut = 0.0;
  double time_factor = 1.0;

  std::vector<double> t;
  std::vector<double> n_a;
  std::vector<double> n_b;
  std::vector<double> alpha_re;
  std::vector<double> alpha_im;
  std::vector<double> beta_re;
  std::vector<double> beta_im;
  std::vector<JumpEvent> jumps;

  bool truncation_warning = false;
  double max_edge_population = 0.0;  ///< largest probability seen in the top Fock level of either mode

  std::size_t size() const noexcept { return t.size(); }
  /// Index of the first sample with t >= transient_cut.
  std::size_t first_post_transient() const noexcept;
  cplx alpha(std::size_t k) const noexcept { return {alpha_re[k], alpha_im[k]}; }
  cplx beta(std::size_t k) const noexcept { return {beta_re[k], beta_im[k]}; }

  bool operator==(const TrajectoryRecord&) const = default;
};

/// How each trajectory's initial coherent state is chosen. Amplitudes are
/// tilde amplitudes (scaled by sqrt(aleph) before use).
struct InitialStatePolicy {
  enum class Kind { UniformDisk, Coherent, Fock };
  Kind kind = Kind::UniformDisk;
  /// Disk radius for UniformDisk. When clip_to_cutoffs is set the radius is
  /// reduced so that |alpha|^2 <= n_a_max / 4 for every draw.
  double disk_radius = 5.0;
  bool clip_to_cutoffs = true;
  cplx alpha{};  ///< Coherent: tilde alpha
  cplx beta{};   ///< Coherent: tilde beta
  int fock_n_a = 0;
  int fock_n_b = 0;
};

/// Times are in reported-time units (not multiples of 1/kappa_a).
struct EnsembleSpec {
  std::size_t n_traj = 1;
  double t_transient = 5000.0;   ///< 500 / kappa_a at kappa_a = 0.1
  double t_total_post = 20000.0; ///< 2000 / kappa_a
  double sample_dt = 1.0;        ///< 0.1 / kappa_a
  InitialStatePolicy initial{};
  double dt_max = 0.0;  ///< 0 selects the step from the stability rules
  double p_cap = 0.05;  ///< upper bound on the per-step jump probability

  /// Defaults expressed in units of 1 / kappa_a.
  static EnsembleSpec in_kappa_units(double kappa_a, std::size_t n_traj, double transient_kappa = 500.0,
                                     double post_kappa = 2000.0, double sample_kappa = 0.1);
  void validate() const;
};

/// Work buffers reused across steps of one trajectory.
struct StepWorkspace {
  explicit StepWorkspace(const OperatorSet& ops);

  std::vector<cplx> k1, k2, k3, k4, u, phase_half, phase_full;
  double cached_dt = -1.0;  ///< step the phase factors were built for
};

struct StepOutcome {
  /// Jumps in this step; times are offsets from the step start (midpoint of
  /// the sub-step in which the jump happened). At most one unless subdivided.
  std::vector<JumpEvent> jumps;
  double p_a = 0.0;  ///< optical jump probability of the first (sub-)step
  double p_b = 0.0;
  int substeps = 1;  ///< > 1 when dt was subdivided to respect p_cap
};

/// One first-order jump step of length dt. Draws mu in [0, 1); a jump in
/// channel a occurs for mu < p_a, channel b for p_a <= mu < p_a + p_b.
/// A jump is applied at the step midpoint between two half-step
/// propagations; otherwise the state is propagated under H_eff over dt.
/// Either way it is renormalized. If p_a + p_b exceeds p_cap the step is
/// split in halves (recursively).
StepOutcome jump_step(QuantumState& psi, const OperatorSet& ops, double dt, CounterRng& rng,
                      StepWorkspace& ws, double p_cap = 0.05);

/// Deterministic non-Hermitian propagation over dt without normalization
/// (integrating-factor RK4 on the off-diagonal part of H_eff).
void propagate_no_jump(QuantumState& psi, const OperatorSet& ops, double dt, StepWorkspace& ws);

/// Jump probabilities (kappa_a <n_a> dt, kappa_b <n_b> dt) of a normalized state.
std::pair<double, double> jump_probabilities(const QuantumState& psi, const OperatorSet& ops, double dt) noexcept;

/// Collapse by a (or b), renormalized.
void apply_jump(QuantumState& psi, const OperatorSet& ops, JumpChannel channel, StepWorkspace& ws);

/// Stability/accuracy bound on the propagation step for these operators.
double default_max_step(const OperatorSet& ops, const SystemParams& p);

/// Tilde amplitude drawn by the initial-state policy (UniformDisk).
cplx draw_initial_alpha(const InitialStatePolicy& policy, double aleph, const FockCutoffs& cutoffs,
                        CounterRng& rng);

/// Deterministic given `seed`.
TrajectoryRecord simulate_trajectory(const EnsembleSpec& spec, const ScalingPlan& plan,
                                     const FockCutoffs& cutoffs, std::uint64_t seed,
                                     std::uint64_t index = 0);

/// Same as above with prebuilt operators (shared read-only by workers).
TrajectoryRecord simulate_trajectory(const EnsembleSpec& spec, const ScalingPlan& plan,
                                     const OperatorSet& ops, std::uint64_t seed, std::uint64_t index = 0);

/// Seed of trajectory `index` under `master_seed`.
std::uint64_t trajectory_seed(std::uint64_t master_seed, std::uint64_t index) noexcept;

/// n_traj trajectories, one independent work unit each. Output is in index
/// order and identical for Exec::Serial and Exec::Parallel.
std::vector<TrajectoryRecord> simulate_ensemble(const EnsembleSpec& spec, const ScalingPlan& plan,
                                                const FockCutoffs& cutoffs, std::uint64_t master_seed,
                                                Exec exec = Exec::Parallel);

enum class Projection { OpticalPlane, MechanicalPlane, Populations };

std::string to_string(Projection p);
Projection parse_projection(const std::string& s);

/// (x, y) coordinates of sample k in the requested plane.
std::pair<double, double> project(const TrajectoryRecord& r, std::size_t k, Projection p) noexcept;

/// Normalized 2-D histogram of all post-transient samples. Records must
/// share aleph and sampling grid. When `range` is empty the bounds are the
/// data extent.
Histogram2D stationary_density(std::span<const TrajectoryRecord> records, Projection projection,
                               std::size_t bins_x = 100, std::size_t bins_y = 100,
                               std::optional<HistogramRange> range = std::nullopt);

}  // namespace lcswitch
