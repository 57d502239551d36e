#include "lcswitch/escape_geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lcswitch/errors.hpp"

namespace lcswitch {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::size_t phase_bin(double phi, std::size_t bins) noexcept {
  const double w = wrap_phase(phi);
  return std::min(bins - 1, static_cast<std::size_t>(w / kTwoPi * static_cast<double>(bins)));
}
}  // namespace

std::string to_string(Direction d) { return d == Direction::OneToTwo ? "12" : "21"; }

Direction parse_direction(const std::string& s) {
  if (s == "12" || s == "1->2" || s == "LC1->LC2") return Direction::OneToTwo;
  if (s == "21" || s == "2->1" || s == "LC2->LC1") return Direction::TwoToOne;
  throw InvalidParameter("unknown switching direction '" + s + "' (expected 12 or 21)");
}

LcState source_state(Direction d) noexcept { return d == Direction::OneToTwo ? LcState::LC1 : LcState::LC2; }
LcState target_state(Direction d) noexcept { return d == Direction::OneToTwo ? LcState::LC2 : LcState::LC1; }

EventFilter EventFilter::for_densities(double kappa_a) { return {15.0 / kappa_a, 10.0 / kappa_a}; }
EventFilter EventFilter::for_phase_histograms(double kappa_a) { return {15.0 / kappa_a, 2.0 / kappa_a}; }

std::vector<SwitchEvent> find_events(std::span<const SegmentedTrajectory> segmented, const EventFilter& filter) {
  if (!(filter.pre_min > 0.0) || !(filter.post_min > 0.0)) throw InvalidParameter("event filters must be positive");
  std::vector<SwitchEvent> out;
  for (std::size_t pos = 0; pos < segmented.size(); ++pos) {
    const auto& s = segmented[pos];
    const auto runs = run_length_encode(s.states.labels);
    const double dt = s.dt_sample;
    // Grid comparisons: durations are integer multiples of dt.
    const double tol = 1e-9 * dt;
    for (std::size_t r = 0; r + 1 < runs.size(); ++r) {
      const double pre = static_cast<double>(runs[r].length) * dt;
      const double post = static_cast<double>(runs[r + 1].length) * dt;
      if (pre + tol < filter.pre_min || post + tol < filter.post_min) continue;
      SwitchEvent e;
      e.trajectory = s.index;
      e.record_position = pos;
      e.sample = s.first_sample + runs[r + 1].start - 1;
      e.t_switch = static_cast<double>(e.sample) * dt;
      e.t_midpoint = e.t_switch + 0.5 * dt;
      e.direction = runs[r].state == LcState::LC1 ? Direction::OneToTwo : Direction::TwoToOne;
      e.pre_dwell = pre;
      e.post_dwell = post;
      out.push_back(e);
    }
  }
  return out;
}

long tau_to_lag(double tau, double dt) noexcept { return std::lround(tau / dt); }

double optical_phase(const TrajectoryRecord& r, std::size_t k) noexcept {
  return wrap_phase(std::atan2(r.alpha_im[k], r.alpha_re[k]));
}

std::vector<ConditionedSnapshot> conditioned_density(std::span<const SwitchEvent> events,
                                                     std::span<const TrajectoryRecord> records,
                                                     std::span<const double> tau_snapshots, Projection projection,
                                                     std::size_t bins, std::optional<HistogramRange> range) {
  if (events.empty()) throw InsufficientData("conditioned_density: no events");
  std::vector<ConditionedSnapshot> out;
  // (record position, sample) pairs per snapshot.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> picks(tau_snapshots.size());
  std::vector<double> xs, ys;
  for (std::size_t s = 0; s < tau_snapshots.size(); ++s) {
    ConditionedSnapshot snap;
    snap.tau_requested = tau_snapshots[s];
    for (const auto& e : events) {
      if (e.record_position >= records.size()) throw DimensionMismatch("event refers to a missing record");
      const auto& r = records[e.record_position];
      const long lag = tau_to_lag(tau_snapshots[s], r.dt_sample);
      snap.tau = static_cast<double>(lag) * r.dt_sample;
      const long k = static_cast<long>(e.sample) + lag;
      if (k < 0 || k >= static_cast<long>(r.size())) {
        ++snap.events_excluded;
        continue;
      }
      picks[s].emplace_back(e.record_position, static_cast<std::size_t>(k));
      const auto [x, y] = project(r, static_cast<std::size_t>(k), projection);
      xs.push_back(x);
      ys.push_back(y);
      ++snap.events_used;
    }
    out.push_back(snap);
  }
  if (xs.empty()) return out;
  const HistogramRange rr = range ? *range : data_range(xs, ys);
  for (std::size_t s = 0; s < out.size(); ++s) {
    if (picks[s].empty()) continue;
    HistogramAccumulator acc(rr, bins, bins);
    for (const auto& [pos, k] : picks[s]) {
      const auto [x, y] = project(records[pos], k, projection);
      acc.add(x, y);
    }
    out[s].histogram = acc.normalized();
  }
  return out;
}

double PhaseHistogram::bin_width() const noexcept { return kTwoPi / static_cast<double>(phase_bins); }

std::size_t PhaseHistogram::zero_column() const {
  const auto it = std::find(lags.begin(), lags.end(), 0L);
  if (it == lags.end()) throw NotFound("phase histogram has no tau = 0 column");
  return static_cast<std::size_t>(it - lags.begin());
}

PhaseHistogram phase_histogram(std::span<const SwitchEvent> events, std::span<const TrajectoryRecord> records,
                               Direction direction, double tau_lo, double tau_hi, std::size_t phase_bins) {
  if (phase_bins == 0) throw InvalidParameter("phase_bins must be positive");
  if (!(tau_hi >= tau_lo)) throw InvalidParameter("tau range is empty");
  std::vector<const SwitchEvent*> chosen;
  for (const auto& e : events)
    if (e.direction == direction) chosen.push_back(&e);
  if (chosen.empty()) throw InsufficientData("phase_histogram: no events for direction " + to_string(direction));

  PhaseHistogram h;
  h.direction = direction;
  h.phase_bins = phase_bins;
  h.dt = records[chosen.front()->record_position].dt_sample;
  const long lo = tau_to_lag(tau_lo, h.dt), hi = tau_to_lag(tau_hi, h.dt);
  for (long l = lo; l <= hi; ++l) h.lags.push_back(l);
  const std::size_t ncol = h.lags.size();

  // Per-event partial counts, merged in event order.
  std::vector<std::vector<double>> partial(chosen.size());
  for_each_index(Exec::Parallel, chosen.size(), [&](std::size_t i) {
    const SwitchEvent& e = *chosen[i];
    const auto& r = records[e.record_position];
    if (r.dt_sample != h.dt) throw DimensionMismatch("phase_histogram: records use different sampling grids");
    auto& part = partial[i];
    part.assign(ncol * phase_bins, 0.0);
    for (std::size_t c = 0; c < ncol; ++c) {
      const long k = static_cast<long>(e.sample) + h.lags[c];
      if (k < 0 || k >= static_cast<long>(r.size())) continue;
      part[c * phase_bins + phase_bin(optical_phase(r, static_cast<std::size_t>(k)), phase_bins)] += 1.0;
    }
  });
  std::vector<double> counts(ncol * phase_bins, 0.0);
  for (const auto& part : partial)
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += part[i];

  h.values.assign(ncol * phase_bins, 0.0);
  h.counts.assign(ncol, 0);
  const double width = h.bin_width();
  for (std::size_t c = 0; c < ncol; ++c) {
    double total = 0.0;
    for (std::size_t b = 0; b < phase_bins; ++b) total += counts[c * phase_bins + b];
    h.counts[c] = static_cast<std::size_t>(total);
    if (total == 0.0) continue;
    for (std::size_t b = 0; b < phase_bins; ++b) h.values[c * phase_bins + b] = counts[c * phase_bins + b] / (total * width);
  }
  return h;
}

PhaseDensity phase_density(std::span<const double> phases, std::size_t phase_bins) {
  if (phases.empty()) throw InsufficientData("phase density: no samples");
  PhaseDensity d;
  d.phase_bins = phase_bins;
  d.density.assign(phase_bins, 0.0);
  for (double p : phases) d.density[phase_bin(p, phase_bins)] += 1.0;
  d.samples = phases.size();
  const double norm = static_cast<double>(phases.size()) * kTwoPi / static_cast<double>(phase_bins);
  for (auto& v : d.density) v /= norm;
  return d;
}

PhaseDensity stationary_phase_distribution(std::span<const TrajectoryRecord> records,
                                           std::span<const SegmentedTrajectory> segmented, LcState state,
                                           std::size_t phase_bins) {
  if (records.size() != segmented.size()) throw DimensionMismatch("records and decoded sequences differ in count");
  std::vector<double> phases;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& labels = segmented[i].states.labels;
    const std::size_t first = segmented[i].first_sample;
    if (first + labels.size() > records[i].size()) throw DimensionMismatch("decoded sequence exceeds its record");
    for (std::size_t k = 0; k < labels.size(); ++k)
      if (labels[k] == state) phases.push_back(optical_phase(records[i], first + k));
  }
  if (phases.empty()) throw InsufficientData("stationary phase density: no samples labelled " + to_string(state));
  return phase_density(phases, phase_bins);
}

HazardProfile hazard(const PhaseHistogram& h, const PhaseDensity& src, const PhaseDensity& dst, double floor_fraction) {
  if (src.phase_bins != h.phase_bins || dst.phase_bins != h.phase_bins)
    throw DimensionMismatch("hazard: phase grids differ");
  const std::size_t nb = h.phase_bins;
  const double floor = floor_fraction / kTwoPi;
  const std::size_t zc = h.zero_column();
  if (h.counts[zc] == 0) throw InsufficientData("hazard: no events at tau = 0");

  HazardProfile out;
  out.phases = phase_bin_centers(nb);
  out.raw.assign(h.values.begin() + static_cast<std::ptrdiff_t>(zc * nb),
                 h.values.begin() + static_cast<std::ptrdiff_t>((zc + 1) * nb));
  out.masked.assign(nb, false);
  out.values.assign(nb, 0.0);
  out.ratio.assign(h.values.size(), 0.0);
  for (std::size_t c = 0; c < h.lags.size(); ++c) {
    const PhaseDensity& st = h.lags[c] <= 0 ? src : dst;
    for (std::size_t b = 0; b < nb; ++b)
      if (st.density[b] >= floor) out.ratio[c * nb + b] = h.at(c, b) / st.density[b];
  }
  double top = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (src.density[b] < floor) {
      out.masked[b] = true;
      continue;
    }
    out.values[b] = out.raw[b] / src.density[b];
    top = std::max(top, out.values[b]);
  }
  if (std::all_of(out.masked.begin(), out.masked.end(), [](bool m) { return m; }))
    throw InsufficientData("hazard: every phase bin is below the stationary-density floor");
  if (top > 0.0)
    for (auto& v : out.values) v /= top;
  return out;
}

std::vector<double> exit_phases(std::span<const SwitchEvent> events, std::span<const TrajectoryRecord> records,
                                Direction direction) {
  std::vector<double> out;
  for (const auto& e : events)
    if (e.direction == direction) out.push_back(optical_phase(records[e.record_position], e.sample));
  return out;
}

}  // namespace lcswitch
