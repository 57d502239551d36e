#pragma once

// Normalized 1-D/2-D histograms, marginal mode counting and circular
// statistics shared by the density and phase analyses.

#include <cstddef>
#include <span>
#include <vector>

namespace lcswitch {

struct HistogramRange {
  double x_lo = 0.0, x_hi = 1.0;
  double y_lo = 0.0, y_hi = 1.0;
};

/// Densities on a regular grid, row-major with y fastest. The density
/// integrates to one: sum(density) * bin_area() == 1.
struct Histogram2D {
  HistogramRange range{};
  std::size_t nx = 0, ny = 0;
  std::vector<double> density;
  std::size_t count = 0;  ///< samples accumulated (including clipped ones)

  double dx() const noexcept { return (range.x_hi - range.x_lo) / static_cast<double>(nx); }
  double dy() const noexcept { return (range.y_hi - range.y_lo) / static_cast<double>(ny); }
  double bin_area() const noexcept { return dx() * dy(); }
  double at(std::size_t ix, std::size_t iy) const noexcept { return density[ix * ny + iy]; }
  double x_center(std::size_t ix) const noexcept { return range.x_lo + (static_cast<double>(ix) + 0.5) * dx(); }
  double y_center(std::size_t iy) const noexcept { return range.y_lo + (static_cast<double>(iy) + 0.5) * dy(); }
  double integral() const noexcept;
  std::size_t occupied_bins() const noexcept;
  /// Density of the x marginal (integrates to one over x).
  std::vector<double> marginal_x() const;
  std::vector<double> marginal_y() const;
};

/// Bin of v on [lo, hi) with n bins; the upper edge falls in the last bin.
/// Returns n for values outside the range.
std::size_t bin_index(double v, double lo, double hi, std::size_t n) noexcept;

/// Range covering the data. Degenerate extents are padded by 0.5 on each side.
HistogramRange data_range(std::span<const double> xs, std::span<const double> ys);

/// Unnormalized counts; clipped samples are ignored.
class HistogramAccumulator {
 public:
  HistogramAccumulator(HistogramRange range, std::size_t nx, std::size_t ny);
  void add(double x, double y) noexcept;
  /// Bin-wise sum; grids must match.
  void merge(const HistogramAccumulator& other);
  /// Throws InsufficientData when nothing was accumulated.
  Histogram2D normalized() const;
  std::size_t total() const noexcept { return total_; }

 private:
  HistogramRange range_;
  std::size_t nx_, ny_;
  std::vector<double> counts_;
  std::size_t total_ = 0;
  std::size_t inside_ = 0;
};

Histogram2D make_histogram(std::span<const double> xs, std::span<const double> ys, std::size_t nx,
                           std::size_t ny, const HistogramRange* range = nullptr);

struct Mode {
  std::size_t bin = 0;
  double height = 0.0;
  double prominence = 0.0;  ///< drop to the highest saddle separating it from a taller mode
};

/// Local maxima of a 1-D density after a centred moving-average smoothing
/// of half-width `smooth`. Only maxima whose prominence is at least
/// `min_prominence` times the global maximum are kept (tallest first).
std::vector<Mode> find_modes(std::span<const double> density, std::size_t smooth = 1,
                             double min_prominence = 0.1);

// ---------------------------------------------------------------------------
// Circular statistics

/// Wraps to [0, 2 pi).
double wrap_phase(double phi) noexcept;

struct CircularSummary {
  double mean = 0.0;            ///< mean direction in [0, 2 pi); 0 when R = 0
  double resultant = 0.0;       ///< mean resultant length R in [0, 1]
  double variance = 1.0;        ///< circular variance 1 - R
  double standard_deviation = 0.0;  ///< sqrt(-2 ln R); +inf when R = 0
  double weight = 0.0;
};

CircularSummary circular_summary(std::span<const double> phases);
/// Weighted version; typically bin centres weighted by a phase density.
CircularSummary circular_summary(std::span<const double> phases, std::span<const double> weights);

/// Circular standard deviation of a uniform distribution on the circle is
/// infinite; for a finite sample of n uniform phases the mean resultant
/// length exceeds this value with probability `alpha` (Rayleigh test,
/// large-sample approximation with the Zar correction).
double rayleigh_critical_resultant(std::size_t n, double alpha = 0.01);

/// Rayleigh test p-value for n phases with mean resultant length R.
double rayleigh_p_value(std::size_t n, double resultant);

/// Centres of `bins` equal bins on [0, 2 pi).
std::vector<double> phase_bin_centers(std::size_t bins);

}  // namespace lcswitch
