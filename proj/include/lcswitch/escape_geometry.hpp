#pragma once

// Event-conditioned analysis around LC1 <-> LC2 switches: event detection
// with dwell filters, conditioned phase-space densities, exit-phase
// histograms, per-basin stationary phase densities and the
// phase-conditioned hazard.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lcswitch/histogram.hpp"
#include "lcswitch/hmm.hpp"
#include "lcswitch/qjump.hpp"

namespace lcswitch {

enum class Direction { OneToTwo, TwoToOne };

/// "12" / "21".
std::string to_string(Direction d);
Direction parse_direction(const std::string& s);
LcState source_state(Direction d) noexcept;
LcState target_state(Direction d) noexcept;

/// One label flip. The switch time is the time of the last sample labelled
/// with the source state, so tau = 0 is on the grid and belongs to the
/// source basin; `t_midpoint` keeps the half-step-later midpoint.
struct SwitchEvent {
  std::uint64_t trajectory = 0;      ///< record index field
  std::size_t record_position = 0;   ///< position of the record in the input span
  std::size_t sample = 0;            ///< record sample index of tau = 0
  double t_switch = 0.0;
  double t_midpoint = 0.0;
  Direction direction = Direction::OneToTwo;
  double pre_dwell = 0.0;
  double post_dwell = 0.0;

  bool operator==(const SwitchEvent&) const = default;
};

struct EventFilter {
  double pre_min = 150.0;   ///< 15 / kappa_a at kappa_a = 0.1
  double post_min = 100.0;  ///< 10 / kappa_a

  /// Filters for phase-space densities (15, 10) / kappa_a.
  static EventFilter for_densities(double kappa_a);
  /// Filters for exit-phase histograms (15, 2) / kappa_a.
  static EventFilter for_phase_histograms(double kappa_a);
};

/// Every flip whose pre- and post-flip dwells reach the filters. The first
/// and last runs of a trajectory count with their observed lengths.
/// `segmented[i]` must describe `records[i]` when positions are needed
/// later; the event stores i as record_position.
std::vector<SwitchEvent> find_events(std::span<const SegmentedTrajectory> segmented, const EventFilter& filter);

/// Lag in samples for a requested tau (nearest grid point).
long tau_to_lag(double tau, double dt) noexcept;

struct ConditionedSnapshot {
  double tau_requested = 0.0;
  double tau = 0.0;              ///< grid-aligned lag actually used
  std::optional<Histogram2D> histogram;  ///< empty when no event covers tau
  std::size_t events_used = 0;
  std::size_t events_excluded = 0;  ///< tau outside the event's record
};

/// Histogram of the projected amplitude at t_switch + tau across events.
/// One shared range for all snapshots (data extent when not given).
std::vector<ConditionedSnapshot> conditioned_density(std::span<const SwitchEvent> events,
                                                     std::span<const TrajectoryRecord> records,
                                                     std::span<const double> tau_snapshots, Projection projection,
                                                     std::size_t bins = 60,
                                                     std::optional<HistogramRange> range = std::nullopt);

/// Optical phase arg(alpha~) in [0, 2 pi).
double optical_phase(const TrajectoryRecord& r, std::size_t k) noexcept;

struct PhaseHistogram {
  Direction direction = Direction::OneToTwo;
  std::size_t phase_bins = 72;
  double dt = 0.0;
  std::vector<long> lags;               ///< tau = lag * dt
  std::vector<double> values;           ///< [lag][phase], density over phase per column
  std::vector<std::size_t> counts;      ///< events contributing per column

  double tau(std::size_t column) const noexcept { return static_cast<double>(lags[column]) * dt; }
  double at(std::size_t column, std::size_t bin) const noexcept { return values[column * phase_bins + bin]; }
  double bin_width() const noexcept;
  /// Column holding tau = 0. Throws NotFound if absent.
  std::size_t zero_column() const;
};

/// P(phi_a, tau | i -> j) for the events of one direction on lags spanning
/// [tau_lo, tau_hi]. Each column with support integrates to one over phase.
/// Throws InsufficientData when no event has the requested direction.
PhaseHistogram phase_histogram(std::span<const SwitchEvent> events, std::span<const TrajectoryRecord> records,
                               Direction direction, double tau_lo, double tau_hi, std::size_t phase_bins = 72);

struct PhaseDensity {
  std::size_t phase_bins = 72;
  std::vector<double> density;  ///< integrates to one over [0, 2 pi)
  std::size_t samples = 0;
};

/// Phase density of raw phases (shared by the basin densities and tests).
PhaseDensity phase_density(std::span<const double> phases, std::size_t phase_bins = 72);

/// P_stat(phi_a | state) from all post-transient samples decoded as `state`.
PhaseDensity stationary_phase_distribution(std::span<const TrajectoryRecord> records,
                                           std::span<const SegmentedTrajectory> segmented, LcState state,
                                           std::size_t phase_bins = 72);

inline constexpr double kHazardFloor = 1e-4;

struct HazardProfile {
  std::vector<double> phases;  ///< bin centres
  std::vector<double> raw;     ///< tau = 0 column of the histogram
  std::vector<double> values;  ///< hazard rescaled to unit maximum; 0 where masked
  std::vector<bool> masked;    ///< stationary density below the floor
  /// P(tau | phi, i -> j) for every column, [lag][phase]; 0 where masked.
  std::vector<double> ratio;
};

/// Divides each column by the stationary density of the basin occupied at
/// that lag (source for tau <= 0, target after), then takes the tau = 0
/// column rescaled to unit maximum. Bins whose stationary density is below
/// floor_fraction / (2 pi) are masked. Throws InsufficientData if every bin
/// is masked or the tau = 0 column is empty.
HazardProfile hazard(const PhaseHistogram& histogram, const PhaseDensity& stationary_source,
                     const PhaseDensity& stationary_target, double floor_fraction = kHazardFloor);

/// Optical phases at tau = 0 for the events of one direction.
std::vector<double> exit_phases(std::span<const SwitchEvent> events, std::span<const TrajectoryRecord> records,
                                Direction direction);

}  // namespace lcswitch
