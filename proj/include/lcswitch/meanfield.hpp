#pragma once

// Deterministic mean-field flow, an adaptive Dormand-Prince integrator with
// dense output, late-time attractor diagnostics, phase-diagram
// classification and limit-cycle extraction.

#include <array>
#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lcswitch/core_model.hpp"
#include "lcswitch/parallel.hpp"

namespace lcswitch {

/// Coherent amplitudes (alpha, beta). In the scan and orbit routines these
/// are tilde amplitudes evolved with tilde parameters.
struct MeanFieldState {
  cplx alpha{};
  cplx beta{};

  bool operator==(const MeanFieldState&) const = default;
};

/// d/dt of (alpha, beta) under the mean-field equations.
MeanFieldState meanfield_rhs(const MeanFieldState& s, const SystemParams& p) noexcept;

struct IntegratorControls {
  double rtol = 1e-8;
  double atol = 1e-10;
  double initial_step = 0.0;  ///< 0 selects a step from the local derivative
  double max_step = 0.0;      ///< 0 = unlimited
  std::size_t max_steps = 100'000'000;
};

/// Dormand-Prince 5(4) stepper with the standard fourth-order continuous
/// extension. Kept as an object so callers can locate events on the dense
/// output between accepted steps.
class Dopri5 {
 public:
  using Vec = std::array<double, 4>;

  Dopri5(SystemParams params, IntegratorControls controls);

  void reset(double t0, const MeanFieldState& s0);

  /// Takes one accepted step, never passing t_limit. Throws StiffnessError
  /// when the step size underflows.
  void step(double t_limit);

  double t() const noexcept { return t_; }
  double t_previous() const noexcept { return t_prev_; }
  MeanFieldState state() const noexcept;
  /// Dense output on [t_previous(), t()].
  MeanFieldState interpolate(double t) const noexcept;

  std::size_t accepted() const noexcept { return accepted_; }
  std::size_t rejected() const noexcept { return rejected_; }

 private:
  Vec f(const Vec& y) const noexcept;
  void build_dense() const noexcept;

  SystemParams p_;
  IntegratorControls c_;
  double t_ = 0.0, t_prev_ = 0.0, h_ = 0.0, h_last_ = 0.0, log_facold_ = 0.0;
  Vec y_{}, k1_{}, y_prev_{};
  std::array<Vec, 6> stages_{};  ///< k1, k3..k7 of the last accepted step
  mutable std::array<Vec, 5> cont_{};
  mutable bool cont_ready_ = false;
  std::size_t accepted_ = 0, rejected_ = 0;
};

struct MeanFieldTrajectory {
  std::vector<double> times;
  std::vector<MeanFieldState> states;
  MeanFieldState final_state;
  std::size_t accepted_steps = 0;
  std::size_t rejected_steps = 0;
};

/// Integrates from t = 0 to t_final and samples the dense output at every
/// entry of `output_times` (sorted, inside [0, t_final]).
MeanFieldTrajectory integrate(const MeanFieldState& s0, const SystemParams& p, double t_final,
                              std::span<const double> output_times,
                              const IntegratorControls& controls = {});

/// Uniform output grid 0, dt_out, 2 dt_out, ... <= t_final.
MeanFieldTrajectory integrate_uniform(const MeanFieldState& s0, const SystemParams& p,
                                      double t_final, double dt_out,
                                      const IntegratorControls& controls = {});

// ---------------------------------------------------------------------------
// Late-time classification

struct AttractorDiagnostics {
  double d_alpha_r = 0.0;  ///< peak-to-peak of Re alpha in the late window
  double d_beta_r = 0.0;   ///< peak-to-peak of Re beta
  double mean_na = 0.0;
  double mean_nb = 0.0;

  std::array<double, 4> vector() const noexcept { return {d_alpha_r, d_beta_r, mean_na, mean_nb}; }
};

struct ClassifyControls {
  IntegratorControls ode{};
  double t_final_kappa = 3.0e3;  ///< t_f in units of 1/kappa_a
  double window_kappa = 30.0;    ///< late window length in units of 1/kappa_a
  double sample_dt = 0.05;       ///< sampling interval inside the window
  double eps_osc = 5e-3;
  double eps_tol = 1e-2;
  std::size_t max_attractors = 3;
};

/// A mode is dynamical when its peak-to-peak amplitude reaches eps_osc.
bool optical_dynamical(const AttractorDiagnostics& d, double eps_osc) noexcept;
bool mechanical_dynamical(const AttractorDiagnostics& d, double eps_osc) noexcept;
/// Fixed point when both modes are static; limit cycle otherwise.
bool is_limit_cycle(const AttractorDiagnostics& d, double eps_osc) noexcept;

enum class PhaseLabel { FP1, FP2, LC1only, LC1FP1, LC2, LC2FP1, Uncategorized };

/// Phase-diagram names: 1FP, 2FP, 1LC, 1LC+1FP, 2LC, 2LC+1FP, uncat.
std::string to_string(PhaseLabel label);
PhaseLabel label_from_counts(std::size_t fixed_points, std::size_t limit_cycles,
                             std::size_t max_attractors = 3) noexcept;

/// 157-point default: origin plus rings of radius R/5, ..., R with point
/// counts proportional to the radius (10, 21, 31, 42, 52). Other sizes keep
/// the origin and split the remaining points over five rings by largest
/// remainder.
std::vector<cplx> initial_condition_grid(std::size_t n_init = 157, double radius = 5.0);

struct DiagnosticCluster {
  AttractorDiagnostics representative;  ///< lexicographically smallest member
  std::vector<std::size_t> members;     ///< indices into the input span
};

/// Max-norm single-linkage agglomeration with threshold eps_tol. Window
/// averages over a non-integer number of periods scatter slightly with the
/// window phase; chaining absorbs that scatter. The result does not depend
/// on the order of the input span.
std::vector<DiagnosticCluster> cluster_diagnostics(std::span<const AttractorDiagnostics> diags,
                                                   double eps_tol);

/// Integrates one start to t_f and measures the late window.
AttractorDiagnostics late_time_diagnostics(cplx alpha0, const SystemParams& p,
                                           const ClassifyControls& controls,
                                           MeanFieldState* final_state = nullptr);

struct PhaseCell {
  double delta_a = 0.0;
  double F_tilde = 0.0;
  PhaseLabel label = PhaseLabel::Uncategorized;
  std::vector<AttractorDiagnostics> attractors;
  std::vector<MeanFieldState> attractor_states;  ///< end state of each cluster's representative start
  std::vector<std::size_t> cluster_sizes;
  std::vector<std::size_t> excluded_starts;  ///< grid indices whose integration failed
};

/// Classifies (delta_a, F_tilde) with the remaining parameters taken from
/// `base` (tilde convention, aleph = 1).
PhaseCell classify_point(const SystemParams& base, double delta_a, double F_tilde,
                         std::span<const cplx> grid, const ClassifyControls& controls = {},
                         Exec exec = Exec::Parallel);

struct ScanAxis {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t points = 1;

  double at(std::size_t i) const noexcept {
    return points <= 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
  }
};

/// Row-major over (delta_a, F_tilde). Parallel over cells x starts.
std::vector<PhaseCell> phase_scan(const SystemParams& base, ScanAxis delta_a, ScanAxis F_tilde,
                                  std::span<const cplx> grid, const ClassifyControls& controls = {},
                                  Exec exec = Exec::Parallel);

// ---------------------------------------------------------------------------
// Limit cycles

struct LimitCycleOrbit {
  std::vector<double> times;            ///< 0 .. period inclusive
  std::vector<MeanFieldState> samples;  ///< samples.front() is the section point
  double period = 0.0;
  double closure_error = 0.0;  ///< |state(period) - state(0)| in the Euclidean norm
  AttractorDiagnostics diagnostics;
};

/// Period of a sampled scalar signal: autocorrelation peak estimate.
double autocorrelation_period(std::span<const double> signal, double dt);

/// Finds every dynamical attractor reached from `grid` and returns one
/// period of each, ordered by mean n_a (LC1 first). Throws NotFound when no
/// dynamical attractor exists.
/// Same, reusing an already classified cell of these parameters.
std::vector<LimitCycleOrbit> extract_limit_cycles(const SystemParams& p, const PhaseCell& cell,
                                                  const ClassifyControls& controls = {},
                                                  std::size_t samples_per_period = 512);

std::vector<LimitCycleOrbit> extract_limit_cycles(const SystemParams& p,
                                                  std::span<const cplx> grid,
                                                  const ClassifyControls& controls = {},
                                                  std::size_t samples_per_period = 512,
                                                  Exec exec = Exec::Parallel);

}  // namespace lcswitch
