#pragma once

// Dwell extraction with censoring, Kaplan-Meier curves, conditional
// exponential rates with bootstrap intervals, threshold selection, rate
// scaling fits and the two-state relaxation rate.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lcswitch/hmm.hpp"
#include "lcswitch/parallel.hpp"

namespace lcswitch {

struct DwellRecord {
  LcState state = LcState::LC1;
  double duration = 0.0;
  bool entry_observed = false;  ///< false for the first run of a trajectory
  bool exit_observed = false;   ///< false (right-censored) for the last run
  std::uint64_t trajectory = 0;
  double start_time = 0.0;      ///< record time of the run's first sample

  bool incident() const noexcept { return entry_observed; }
  bool operator==(const DwellRecord&) const = default;
};

/// Maximal constant-label runs; duration = run length * dt.
std::vector<DwellRecord> extract_dwells(std::span<const LcState> labels, double dt, std::uint64_t trajectory = 0,
                                        double t_first = 0.0);
/// All trajectories; runs never cross trajectory boundaries.
std::vector<DwellRecord> extract_dwells(std::span<const SegmentedTrajectory> segmented);

/// A possibly right-censored duration.
struct Censored {
  double duration = 0.0;
  bool observed = true;  ///< event seen (false = right-censored)
};

/// Incident dwells of one state as censored durations.
std::vector<Censored> incident_durations(std::span<const DwellRecord> dwells, LcState state);

struct SurvivalCurve {
  std::vector<double> times;              ///< distinct event times, increasing
  std::vector<double> survival;           ///< S just after times[k]
  std::vector<std::size_t> at_risk;       ///< n_k
  std::vector<std::size_t> events;        ///< d_k
  std::size_t n_records = 0;
  std::size_t n_censored = 0;

  /// Right-continuous step function; 1 before the first event.
  double at(double t) const noexcept;
};

/// Product-limit estimate. Censorings tied with an event time stay in that
/// time's risk set. Throws InsufficientData for empty input.
SurvivalCurve kaplan_meier(std::span<const Censored> data);

struct BootstrapControls {
  std::size_t resamples = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
  Exec exec = Exec::Parallel;
};

struct RateFit {
  double k = 0.0;
  double t0 = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_events = 0;
  std::size_t n_censored = 0;
  double exposure = 0.0;  ///< sum of (t_i - t0) over the tail
};

inline constexpr std::size_t kDefaultMinRecords = 20;

/// Closed-form MLE of S(t | T >= t0) = exp(-k (t - t0)) over records with
/// duration > t0, plus a percentile bootstrap interval that resamples those
/// records with their censoring flags. Throws InsufficientData when fewer
/// than `min_records` exceed t0 or no event is observed.
RateFit fit_conditional_rate(std::span<const Censored> data, double t0, const BootstrapControls& bootstrap = {},
                             std::size_t min_records = kDefaultMinRecords);

/// MLE only (no bootstrap).
double conditional_rate_mle(std::span<const Censored> data, double t0);

struct T0Selection {
  double t0 = 0.0;
  double statistic = 0.0;        ///< max |z| of the accepted candidate
  std::size_t candidate = 0;     ///< index into the candidate list
  std::size_t tail_records = 0;
  std::vector<double> candidates;
  std::vector<double> statistics;  ///< max |z| per scanned candidate
};

struct T0Controls {
  double z_threshold = 3.0;
  double max_quantile = 0.9;     ///< candidates: event-time quantiles 0, 1%, ..., this
  double quantile_step = 0.01;
  std::size_t min_tail_events = 20;
};

/// Smallest threshold beyond which the conditional hazard is flat. For each
/// candidate t0 the tail is split at 10%, 25% and 50% of its events and the
/// early and late exponential rates are compared by a log-rate z test; the
/// first candidate whose largest |z| stays below the threshold wins.
/// Throws NotFound (with the scanned statistics) if none qualifies.
T0Selection select_t0(std::span<const Censored> data, const T0Controls& controls = {});

/// Log-rate z statistic comparing exposure-based rates before and after
/// t0 + split (exposed for testing).
double hazard_split_statistic(std::span<const Censored> data, double t0, double split);

// ---------------------------------------------------------------------------
// Rate scaling with aleph

enum class ScalingForm { Single, Biexponential };

std::string to_string(ScalingForm f);

struct ScalingPoint {
  double aleph = 0.0;
  double k = 0.0;
  double sigma = 0.0;  ///< standard error of k (weights 1 / sigma^2)
};

struct ScalingFit {
  std::string direction;                ///< "12" or "21"
  ScalingForm form = ScalingForm::Single;
  std::vector<double> params;           ///< {A, S} or {A_ph, S_ph, A_amp, S_amp}
  std::vector<double> std_errors;
  double chi2 = 0.0;
  double gradient_norm = 0.0;           ///< |J^T W r| at the solution
  bool fell_back = false;               ///< biexponential requested but degenerate
  std::string warning;

  double rate(double aleph) const noexcept;
  double A() const noexcept { return params.at(0); }
  double S() const noexcept { return params.at(1); }
};

/// Weighted least squares of k(aleph) = A exp(-S aleph) (>= 3 points) or the
/// sum of two such terms (>= 5 points). Starting points come from a
/// variable-projection grid over the exponents; the best few are polished
/// with Levenberg-Marquardt. A degenerate biexponential (vanishing
/// amplitude or merged exponents) falls back to the single form with a
/// warning. Throws FitError with the best residual on failure.
ScalingFit fit_scaling(std::span<const ScalingPoint> points, ScalingForm form, const std::string& direction = "",
                       Exec exec = Exec::Parallel);

/// S_eff(aleph) = -d log k / d aleph from the fitted form.
double effective_action(const ScalingFit& fit, double aleph);

/// Lambda_eff = k12 + k21. Throws InvalidParameter unless both are positive.
double effective_relaxation(double k12, double k21);

/// Stationary occupations (p1, p2) of the two-state rate matrix.
std::pair<double, double> stationary_occupations(double k12, double k21);

}  // namespace lcswitch
