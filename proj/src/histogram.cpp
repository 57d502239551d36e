#include "lcswitch/histogram.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "lcswitch/errors.hpp"

namespace lcswitch {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

double Histogram2D::integral() const noexcept {
  return std::accumulate(density.begin(), density.end(), 0.0) * bin_area();
}

std::size_t Histogram2D::occupied_bins() const noexcept {
  return static_cast<std::size_t>(std::count_if(density.begin(), density.end(), [](double d) { return d > 0.0; }));
}

std::vector<double> Histogram2D::marginal_x() const {
  std::vector<double> m(nx, 0.0);
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) m[i] += density[i * ny + j] * dy();
  return m;
}

std::vector<double> Histogram2D::marginal_y() const {
  std::vector<double> m(ny, 0.0);
  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ny; ++j) m[j] += density[i * ny + j] * dx();
  return m;
}

std::size_t bin_index(double v, double lo, double hi, std::size_t n) noexcept {
  if (!(v >= lo) || !(v <= hi)) return n;
  const auto k = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(n));
  return std::min(k, n - 1);
}

HistogramRange data_range(std::span<const double> xs, std::span<const double> ys) {
  if (xs.empty() || xs.size() != ys.size()) throw InsufficientData("histogram: empty or ragged input");
  auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
  HistogramRange r{*xmin, *xmax, *ymin, *ymax};
  if (r.x_hi <= r.x_lo) { r.x_lo -= 0.5; r.x_hi += 0.5; }
  if (r.y_hi <= r.y_lo) { r.y_lo -= 0.5; r.y_hi += 0.5; }
  return r;
}

HistogramAccumulator::HistogramAccumulator(HistogramRange range, std::size_t nx, std::size_t ny)
    : range_(range), nx_(nx), ny_(ny), counts_(nx * ny, 0.0) {
  if (nx == 0 || ny == 0) throw InvalidParameter("histogram: bin counts must be positive");
  if (!(range.x_hi > range.x_lo) || !(range.y_hi > range.y_lo))
    throw InvalidParameter("histogram: empty range");
}

void HistogramAccumulator::add(double x, double y) noexcept {
  ++total_;
  const std::size_t ix = bin_index(x, range_.x_lo, range_.x_hi, nx_);
  const std::size_t iy = bin_index(y, range_.y_lo, range_.y_hi, ny_);
  if (ix == nx_ || iy == ny_) return;
  counts_[ix * ny_ + iy] += 1.0;
  ++inside_;
}

void HistogramAccumulator::merge(const HistogramAccumulator& other) {
  if (other.nx_ != nx_ || other.ny_ != ny_) throw DimensionMismatch("histogram merge: grid mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
  inside_ += other.inside_;
}

Histogram2D HistogramAccumulator::normalized() const {
  if (inside_ == 0) throw InsufficientData("histogram: no samples inside the range");
  Histogram2D h;
  h.range = range_;
  h.nx = nx_;
  h.ny = ny_;
  h.count = total_;
  h.density.resize(counts_.size());
  const double scale = 1.0 / (static_cast<double>(inside_) * h.bin_area());
  for (std::size_t i = 0; i < counts_.size(); ++i) h.density[i] = counts_[i] * scale;
  return h;
}

Histogram2D make_histogram(std::span<const double> xs, std::span<const double> ys, std::size_t nx,
                           std::size_t ny, const HistogramRange* range) {
  const HistogramRange r = range ? *range : data_range(xs, ys);
  if (xs.size() != ys.size()) throw DimensionMismatch("histogram: x/y length mismatch");
  HistogramAccumulator acc(r, nx, ny);
  for (std::size_t i = 0; i < xs.size(); ++i) acc.add(xs[i], ys[i]);
  return acc.normalized();
}

std::vector<Mode> find_modes(std::span<const double> density, std::size_t smooth, double min_prominence) {
  const std::size_t n = density.size();
  std::vector<Mode> out;
  if (n == 0) return out;
  std::vector<double> s(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= smooth ? i - smooth : 0;
    const std::size_t hi = std::min(n - 1, i + smooth);
    double acc = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) acc += density[j];
    s[i] = acc / static_cast<double>(hi - lo + 1);
  }
  const double top = *std::max_element(s.begin(), s.end());
  if (!(top > 0.0)) return out;

  // Plateaus count as one maximum located at their left end.
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && s[i - 1] >= s[i]) continue;
    std::size_t j = i;
    while (j + 1 < n && s[j + 1] == s[i]) ++j;
    if (j + 1 < n && s[j + 1] > s[i]) continue;
    // Prominence: walk outwards until a taller point, tracking the minimum.
    double left_min = s[i], right_min = s[i];
    bool left_taller = false, right_taller = false;
    for (std::size_t k = i; k-- > 0;) {
      left_min = std::min(left_min, s[k]);
      if (s[k] > s[i]) { left_taller = true; break; }
    }
    for (std::size_t k = j + 1; k < n; ++k) {
      right_min = std::min(right_min, s[k]);
      if (s[k] > s[i]) { right_taller = true; break; }
    }
    double saddle;
    if (left_taller && right_taller) saddle = std::max(left_min, right_min);
    else if (left_taller) saddle = left_min;
    else if (right_taller) saddle = right_min;
    else saddle = 0.0;  // global maximum
    const double prom = s[i] - saddle;
    if (prom >= min_prominence * top) out.push_back({i, s[i], prom});
    i = j;
  }
  std::stable_sort(out.begin(), out.end(), [](const Mode& a, const Mode& b) { return a.height > b.height; });
  return out;
}

double wrap_phase(double phi) noexcept {
  double w = std::fmod(phi, kTwoPi);
  if (w < 0.0) w += kTwoPi;
  if (w >= kTwoPi) w = 0.0;  // fmod of a tiny negative can round up to 2 pi
  return w;
}

CircularSummary circular_summary(std::span<const double> phases) {
  std::vector<double> w(phases.size(), 1.0);
  return circular_summary(phases, w);
}

CircularSummary circular_summary(std::span<const double> phases, std::span<const double> weights) {
  if (phases.size() != weights.size()) throw DimensionMismatch("circular_summary: length mismatch");
  double c = 0.0, s = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    c += weights[i] * std::cos(phases[i]);
    s += weights[i] * std::sin(phases[i]);
    wsum += weights[i];
  }
  if (!(wsum > 0.0)) throw InsufficientData("circular_summary: zero total weight");
  CircularSummary out;
  out.weight = wsum;
  out.resultant = std::min(1.0, std::hypot(c, s) / wsum);
  out.variance = 1.0 - out.resultant;
  out.mean = out.resultant > 0.0 ? wrap_phase(std::atan2(s, c)) : 0.0;
  out.standard_deviation = out.resultant > 0.0 ? std::sqrt(-2.0 * std::log(out.resultant))
                                               : std::numeric_limits<double>::infinity();
  return out;
}

double rayleigh_p_value(std::size_t n, double resultant) {
  if (n == 0) return 1.0;
  const double nn = static_cast<double>(n);
  const double R = nn * resultant;
  // Zar (1999), eq. 27.4.
  const double p = std::exp(std::sqrt(1.0 + 4.0 * nn + 4.0 * (nn * nn - R * R)) - (1.0 + 2.0 * nn));
  return std::clamp(p, 0.0, 1.0);
}

double rayleigh_critical_resultant(std::size_t n, double alpha) {
  if (n == 0) return 1.0;
  // p is decreasing in R; bisect for p(R) = alpha.
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (rayleigh_p_value(n, mid) > alpha) lo = mid;
    else hi = mid;
  }
  return hi;
}

std::vector<double> phase_bin_centers(std::size_t bins) {
  std::vector<double> c(bins);
  for (std::size_t i = 0; i < bins; ++i) c[i] = (static_cast<double>(i) + 0.5) * kTwoPi / static_cast<double>(bins);
  return c;
}

}  // namespace lcswitch
