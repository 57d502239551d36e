#include "lcswitch/switching_stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <unsupported/Eigen/LevenbergMarquardt>

#include "lcswitch/errors.hpp"
#include "lcswitch/rng.hpp"

namespace lcswitch {

// ---------------------------------------------------------------------------
// Dwells

std::vector<DwellRecord> extract_dwells(std::span<const LcState> labels, double dt, std::uint64_t trajectory,
                                        double t_first) {
  if (labels.empty()) throw InsufficientData("extract_dwells: empty state sequence");
  if (!(dt > 0.0)) throw InvalidParameter("extract_dwells: dt must be positive");
  const auto runs = run_length_encode(labels);
  std::vector<DwellRecord> out;
  out.reserve(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) {
    DwellRecord d;
    d.state = runs[i].state;
    d.duration = static_cast<double>(runs[i].length) * dt;
    d.entry_observed = i > 0;
    d.exit_observed = i + 1 < runs.size();
    d.trajectory = trajectory;
    d.start_time = t_first + static_cast<double>(runs[i].start) * dt;
    out.push_back(d);
  }
  return out;
}

std::vector<DwellRecord> extract_dwells(std::span<const SegmentedTrajectory> segmented) {
  std::vector<DwellRecord> out;
  for (const auto& s : segmented) {
    const double t_first = static_cast<double>(s.first_sample) * s.dt_sample;
    auto d = extract_dwells(s.states.labels, s.dt_sample, s.index, t_first);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

std::vector<Censored> incident_durations(std::span<const DwellRecord> dwells, LcState state) {
  std::vector<Censored> out;
  for (const auto& d : dwells)
    if (d.state == state && d.entry_observed) out.push_back({d.duration, d.exit_observed});
  return out;
}

// ---------------------------------------------------------------------------
// Kaplan-Meier

double SurvivalCurve::at(double t) const noexcept {
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - times.begin()) - 1];
}

SurvivalCurve kaplan_meier(std::span<const Censored> data) {
  if (data.empty()) throw InsufficientData("kaplan_meier: no records");
  std::vector<Censored> d(data.begin(), data.end());
  std::sort(d.begin(), d.end(), [](const Censored& a, const Censored& b) { return a.duration < b.duration; });
  SurvivalCurve c;
  c.n_records = d.size();
  // Between censorings the product-limit factors telescope to one ratio of
  // risk-set sizes, so each censoring-free block costs a single division.
  // Without censoring this is the tail fraction itself, bit for bit.
  std::size_t at_risk = d.size();
  std::size_t block_start = at_risk;
  double block_factor = 1.0;
  double s = 1.0;
  for (std::size_t i = 0; i < d.size();) {
    std::size_t j = i, events = 0;
    while (j < d.size() && d[j].duration == d[i].duration) {
      events += d[j].observed ? 1 : 0;
      ++j;
    }
    if (events > 0) {
      const double ratio = static_cast<double>(at_risk - events) / static_cast<double>(block_start);
      s = block_factor == 1.0 ? ratio : block_factor * ratio;
      c.times.push_back(d[i].duration);
      c.survival.push_back(s);
      c.at_risk.push_back(at_risk);
      c.events.push_back(events);
    }
    const std::size_t censored = (j - i) - events;
    c.n_censored += censored;
    at_risk -= j - i;
    if (censored > 0) {
      block_factor = s;
      block_start = at_risk;
    }
    i = j;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Conditional exponential rate

namespace {

struct TailSums {
  std::size_t records = 0, events = 0;
  double exposure = 0.0;
};

TailSums tail_sums(std::span<const Censored> data, double t0) {
  TailSums s;
  for (const auto& c : data) {
    if (!(c.duration > t0)) continue;
    ++s.records;
    s.events += c.observed ? 1 : 0;
    s.exposure += c.duration - t0;
  }
  return s;
}

// Linear-interpolation sample quantile of sorted data.
double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

double conditional_rate_mle(std::span<const Censored> data, double t0) {
  const TailSums s = tail_sums(data, t0);
  if (s.events == 0 || !(s.exposure > 0.0)) throw InsufficientData("conditional rate: no observed events beyond t0");
  return static_cast<double>(s.events) / s.exposure;
}

RateFit fit_conditional_rate(std::span<const Censored> data, double t0, const BootstrapControls& bootstrap,
                             std::size_t min_records) {
  std::vector<Censored> tail;
  for (const auto& c : data)
    if (c.duration > t0) tail.push_back(c);
  const TailSums s = tail_sums(tail, t0);
  if (s.records < min_records || s.events == 0)
    throw InsufficientData("conditional rate refused: " + std::to_string(s.records) + " records beyond t0 (" +
                           std::to_string(s.events) + " uncensored), need " + std::to_string(min_records));
  RateFit fit;
  fit.t0 = t0;
  fit.n_events = s.events;
  fit.n_censored = s.records - s.events;
  fit.exposure = s.exposure;
  fit.k = static_cast<double>(s.events) / s.exposure;

  if (bootstrap.resamples == 0) {
    fit.ci_low = fit.ci_high = fit.k;
    return fit;
  }
  std::vector<double> ks(bootstrap.resamples);
  const std::size_t n = tail.size();
  for_each_index(bootstrap.exec, bootstrap.resamples, [&](std::size_t b) {
    CounterRng rng(derive_seed(bootstrap.seed, "bootstrap", b));
    std::size_t ev = 0;
    double ex = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const Censored& c = tail[rng.below(n)];
      ev += c.observed ? 1 : 0;
      ex += c.duration - t0;
    }
    ks[b] = static_cast<double>(ev) / ex;
  });
  std::sort(ks.begin(), ks.end());
  const double alpha = 1.0 - bootstrap.level;
  // Percentile limits, widened to contain the point estimate if needed.
  fit.ci_low = std::min(fit.k, quantile_sorted(ks, 0.5 * alpha));
  fit.ci_high = std::max(fit.k, quantile_sorted(ks, 1.0 - 0.5 * alpha));
  return fit;
}

double hazard_split_statistic(std::span<const Censored> data, double t0, double split) {
  double e1 = 0.0, e2 = 0.0;
  double d1 = 0.0, d2 = 0.0;
  for (const auto& c : data) {
    if (!(c.duration > t0)) continue;
    const double r = c.duration - t0;
    e1 += std::min(r, split);
    e2 += std::max(r - split, 0.0);
    if (c.observed) (r <= split ? d1 : d2) += 1.0;
  }
  if (d1 == 0.0 || d2 == 0.0 || e1 <= 0.0 || e2 <= 0.0) return 0.0;
  return (std::log(d1 / e1) - std::log(d2 / e2)) / std::sqrt(1.0 / d1 + 1.0 / d2);
}

T0Selection select_t0(std::span<const Censored> data, const T0Controls& controls) {
  std::vector<double> event_times;
  for (const auto& c : data)
    if (c.observed) event_times.push_back(c.duration);
  if (event_times.size() < 10) throw InsufficientData("select_t0: need at least 10 event times");
  std::sort(event_times.begin(), event_times.end());

  T0Selection sel;
  const auto steps = static_cast<std::size_t>(std::floor(controls.max_quantile / controls.quantile_step + 1e-9));
  for (std::size_t i = 0; i <= steps; ++i) {
    const double q = static_cast<double>(i) * controls.quantile_step;
    // Candidates sit just below event times so the event itself stays in the tail.
    const double t0 = i == 0 ? 0.0 : std::nextafter(quantile_sorted(event_times, q), 0.0);
    if (!sel.candidates.empty() && t0 <= sel.candidates.back()) continue;
    std::vector<double> residual_events;
    for (double t : event_times)
      if (t > t0) residual_events.push_back(t - t0);
    if (residual_events.size() < controls.min_tail_events) break;
    double zmax = 0.0;
    for (double f : {0.10, 0.25, 0.50})
      zmax = std::max(zmax, std::abs(hazard_split_statistic(data, t0, quantile_sorted(residual_events, f))));
    sel.candidates.push_back(t0);
    sel.statistics.push_back(zmax);
    if (zmax < controls.z_threshold) {
      sel.t0 = t0;
      sel.statistic = zmax;
      sel.candidate = sel.candidates.size() - 1;
      sel.tail_records = tail_sums(data, t0).records;
      return sel;
    }
  }
  throw NotFound("select_t0: no candidate threshold with a flat conditional hazard (" +
                 std::to_string(sel.candidates.size()) + " scanned)");
}

// ---------------------------------------------------------------------------
// Scaling fits

std::string to_string(ScalingForm f) { return f == ScalingForm::Single ? "single" : "biexp"; }

double ScalingFit::rate(double aleph) const noexcept {
  double k = params[0] * std::exp(-params[1] * aleph);
  if (form == ScalingForm::Biexponential) k += params[2] * std::exp(-params[3] * aleph);
  return k;
}

namespace {

// Weighted residuals r_i = (model(aleph_i) - k_i) / sigma_i for a sum of
// exponentials with parameters (A_1, S_1, A_2, S_2, ...).
struct ExpSumResiduals : Eigen::DenseFunctor<double> {
  std::span<const ScalingPoint> pts;

  ExpSumResiduals(std::span<const ScalingPoint> p, int n_params)
      : DenseFunctor<double>(n_params, static_cast<int>(p.size())), pts(p) {}

  int operator()(const InputType& x, ValueType& f) const {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double m = 0.0;
      for (Eigen::Index j = 0; j < x.size(); j += 2) m += x[j] * std::exp(-x[j + 1] * pts[i].aleph);
      f[static_cast<Eigen::Index>(i)] = (m - pts[i].k) / pts[i].sigma;
    }
    return 0;
  }
  int df(const InputType& x, JacobianType& J) const {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (Eigen::Index j = 0; j < x.size(); j += 2) {
        const double e = std::exp(-x[j + 1] * pts[i].aleph);
        J(r, j) = e / pts[i].sigma;
        J(r, j + 1) = -x[j] * pts[i].aleph * e / pts[i].sigma;
      }
    }
    return 0;
  }
};

// Optimal amplitudes for fixed exponents (weighted linear least squares).
// Returns the chi-square; amplitudes in `amps`.
double project_amplitudes(std::span<const ScalingPoint> pts, std::span<const double> S, Eigen::VectorXd& amps) {
  const auto m = static_cast<Eigen::Index>(S.size());
  Eigen::MatrixXd B(static_cast<Eigen::Index>(pts.size()), m);
  Eigen::VectorXd y(static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (Eigen::Index j = 0; j < m; ++j) B(r, j) = std::exp(-S[static_cast<std::size_t>(j)] * pts[i].aleph) / pts[i].sigma;
    y[r] = pts[i].k / pts[i].sigma;
  }
  amps = B.colPivHouseholderQr().solve(y);
  return (B * amps - y).squaredNorm();
}

struct Candidate {
  double chi2;
  Eigen::VectorXd x;
};

// Gradient J^T r and full Hessian of chi2 / 2 (including the residual
// curvature term, which Gauss-Newton drops).
void gradient_and_hessian(std::span<const ScalingPoint> pts, const Eigen::VectorXd& x, Eigen::VectorXd& g,
                          Eigen::MatrixXd& H, double& chi2) {
  const auto n = x.size();
  g = Eigen::VectorXd::Zero(n);
  H = Eigen::MatrixXd::Zero(n, n);
  chi2 = 0.0;
  Eigen::VectorXd grad_r(n);
  for (const auto& pt : pts) {
    double m = 0.0;
    for (Eigen::Index j = 0; j < n; j += 2) {
      const double e = std::exp(-x[j + 1] * pt.aleph);
      m += x[j] * e;
      grad_r[j] = e / pt.sigma;
      grad_r[j + 1] = -x[j] * pt.aleph * e / pt.sigma;
    }
    const double r = (m - pt.k) / pt.sigma;
    chi2 += r * r;
    g += r * grad_r;
    H += grad_r * grad_r.transpose();
    for (Eigen::Index j = 0; j < n; j += 2) {
      const double e = std::exp(-x[j + 1] * pt.aleph) / pt.sigma;
      H(j, j + 1) += r * (-pt.aleph * e);
      H(j + 1, j) += r * (-pt.aleph * e);
      H(j + 1, j + 1) += r * (x[j] * pt.aleph * pt.aleph * e);
    }
  }
}

// Newton iterations from an LM solution. LM stops on relative step and
// reduction tolerances, which can leave the gradient well above round-off
// when chi2 is large; a few Newton steps drive it down to the noise floor.
void newton_refine(std::span<const ScalingPoint> pts, Eigen::VectorXd& x) {
  Eigen::VectorXd g;
  Eigen::MatrixXd H;
  double chi2 = 0.0;
  gradient_and_hessian(pts, x, g, H, chi2);
  for (int it = 0; it < 50 && g.norm() > 0.0; ++it) {
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return;
    const Eigen::VectorXd trial = x - ldlt.solve(g);
    Eigen::VectorXd g2;
    Eigen::MatrixXd H2;
    double chi2_2 = 0.0;
    gradient_and_hessian(pts, trial, g2, H2, chi2_2);
    if (!std::isfinite(chi2_2) || chi2_2 > chi2 * (1.0 + 1e-12) || !(g2.norm() < g.norm())) return;
    x = trial;
    g = g2;
    H = H2;
    chi2 = chi2_2;
  }
}

Candidate polish(std::span<const ScalingPoint> pts, Eigen::VectorXd x0) {
  ExpSumResiduals f(pts, static_cast<int>(x0.size()));
  Eigen::LevenbergMarquardt<ExpSumResiduals> lm(f);
  lm.setXtol(1e-15);
  lm.setFtol(1e-15);
  lm.setGtol(0.0);
  lm.setMaxfev(20000);
  lm.minimize(x0);
  newton_refine(pts, x0);
  Eigen::VectorXd r(static_cast<Eigen::Index>(pts.size()));
  f(x0, r);
  return {r.squaredNorm(), x0};
}

std::vector<double> exponent_grid() {
  std::vector<double> g;
  for (int i = 0; i < 40; ++i) g.push_back(0.005 * std::pow(1000.0, i / 39.0));  // 0.005 .. 5
  return g;
}

ScalingFit finish_fit(std::span<const ScalingPoint> pts, ScalingForm form, const std::string& direction,
                      const Candidate& best) {
  ScalingFit fit;
  fit.direction = direction;
  fit.form = form;
  Eigen::VectorXd x = best.x;
  if (form == ScalingForm::Biexponential && x[1] > x[3]) {
    std::swap(x[0], x[2]);
    std::swap(x[1], x[3]);
  }
  fit.params.assign(x.data(), x.data() + x.size());
  ExpSumResiduals f(pts, static_cast<int>(x.size()));
  Eigen::VectorXd r(static_cast<Eigen::Index>(pts.size()));
  Eigen::MatrixXd J(static_cast<Eigen::Index>(pts.size()), x.size());
  f(x, r);
  f.df(x, J);
  fit.chi2 = r.squaredNorm();
  fit.gradient_norm = (J.transpose() * r).norm();
  const Eigen::MatrixXd info = J.transpose() * J;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(info);
  fit.std_errors.assign(static_cast<std::size_t>(x.size()), std::numeric_limits<double>::quiet_NaN());
  if (lu.isInvertible()) {
    const Eigen::MatrixXd cov = lu.inverse();
    for (Eigen::Index i = 0; i < x.size(); ++i) fit.std_errors[static_cast<std::size_t>(i)] = std::sqrt(std::max(0.0, cov(i, i)));
  }
  return fit;
}

ScalingFit fit_single(std::span<const ScalingPoint> pts, const std::string& direction) {
  const auto grid = exponent_grid();
  Candidate best{std::numeric_limits<double>::infinity(), {}};
  for (double s : grid) {
    Eigen::VectorXd a;
    const double S[1] = {s};
    const double chi2 = project_amplitudes(pts, S, a);
    if (chi2 < best.chi2) best = {chi2, Eigen::Vector2d(a[0], s)};
  }
  best = polish(pts, best.x);
  if (!std::isfinite(best.chi2) || !(best.x[0] > 0.0)) throw FitError("single-exponential fit failed", best.chi2);
  return finish_fit(pts, ScalingForm::Single, direction, best);
}

}  // namespace

ScalingFit fit_scaling(std::span<const ScalingPoint> points, ScalingForm form, const std::string& direction,
                       Exec exec) {
  const std::size_t need = form == ScalingForm::Single ? 3 : 5;
  if (points.size() < need)
    throw InsufficientData("fit_scaling: " + to_string(form) + " form needs at least " + std::to_string(need) +
                           " points");
  for (const auto& p : points)
    if (!(p.k > 0.0) || !(p.sigma > 0.0) || !std::isfinite(p.aleph))
      throw InvalidParameter("fit_scaling: rates and uncertainties must be positive");

  if (form == ScalingForm::Single) return fit_single(points, direction);

  // Variable projection over exponent pairs, then polish the best few.
  const auto grid = exponent_grid();
  std::vector<Candidate> starts;
  for (std::size_t i = 0; i < grid.size(); ++i)
    for (std::size_t j = i + 1; j < grid.size(); ++j) {
      Eigen::VectorXd a;
      const double S[2] = {grid[i], grid[j]};
      const double chi2 = project_amplitudes(points, S, a);
      if (!std::isfinite(chi2)) continue;
      Eigen::VectorXd x(4);
      x << a[0], grid[i], a[1], grid[j];
      starts.push_back({chi2, x});
    }
  std::stable_sort(starts.begin(), starts.end(), [](const Candidate& a, const Candidate& b) { return a.chi2 < b.chi2; });
  starts.resize(std::min<std::size_t>(starts.size(), 8));
  std::vector<Candidate> polished(starts.size());
  for_each_index(exec, starts.size(), [&](std::size_t i) { polished[i] = polish(points, starts[i].x); });

  std::size_t best = polished.size();
  for (std::size_t i = 0; i < polished.size(); ++i) {
    const auto& x = polished[i].x;
    const bool valid = std::isfinite(polished[i].chi2) && x[0] > 0.0 && x[2] > 0.0 && x[1] > 0.0 && x[3] > 0.0;
    if (valid && (best == polished.size() || polished[i].chi2 < polished[best].chi2)) best = i;
  }

  ScalingFit single = fit_single(points, direction);
  auto fall_back = [&](const std::string& why) {
    single.fell_back = true;
    single.warning = "biexponential fit degenerate (" + why + "); single-exponential form reported";
    return single;
  };
  if (best == polished.size()) return fall_back("no start converged to positive amplitudes and exponents");
  const auto& x = polished[best].x;
  const double amp_ratio = std::min(x[0], x[2]) / std::max(x[0], x[2]);
  if (amp_ratio < 1e-6) return fall_back("one amplitude vanishes");
  if (std::abs(x[1] - x[3]) < 1e-6 * std::max(x[1], x[3])) return fall_back("exponents coincide");
  if (!(polished[best].chi2 < single.chi2)) return fall_back("no improvement over the single form");
  return finish_fit(points, ScalingForm::Biexponential, direction, polished[best]);
}

double effective_action(const ScalingFit& fit, double aleph) {
  if (fit.form == ScalingForm::Single) return fit.params.at(1);
  const double t1 = fit.params[0] * std::exp(-fit.params[1] * aleph);
  const double t2 = fit.params[2] * std::exp(-fit.params[3] * aleph);
  return (fit.params[1] * t1 + fit.params[3] * t2) / (t1 + t2);
}

double effective_relaxation(double k12, double k21) {
  if (!(k12 > 0.0) || !(k21 > 0.0)) throw InvalidParameter("effective_relaxation: rates must be positive");
  return k12 + k21;
}

std::pair<double, double> stationary_occupations(double k12, double k21) {
  const double lam = effective_relaxation(k12, k21);
  return {k21 / lam, k12 / lam};
}

}  // namespace lcswitch
