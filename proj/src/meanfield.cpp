#include "lcswitch/meanfield.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "lcswitch/errors.hpp"

namespace lcswitch {

MeanFieldState meanfield_rhs(const MeanFieldState& s, const SystemParams& p) noexcept {
  constexpr cplx i{0.0, 1.0};
  const cplx a = s.alpha;
  const cplx b = s.beta;
  const double x = 2.0 * b.real();  // beta + beta*
  MeanFieldState d;
  d.alpha = -i * ((p.delta_a - 0.5 * i * p.kappa_a) * a + p.g * a * x + p.F);
  d.beta = -i * (p.omega_b * b - 0.5 * i * p.kappa_b * (b - std::conj(b)) + p.g * std::norm(a));
  return d;
}

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4)

namespace {

using Vec = Dopri5::Vec;

constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                 a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                 a76 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;
constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                 d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                 d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;

Vec pack(const MeanFieldState& s) { return {s.alpha.real(), s.alpha.imag(), s.beta.real(), s.beta.imag()}; }
MeanFieldState unpack(const Vec& v) { return {cplx(v[0], v[1]), cplx(v[2], v[3])}; }

}  // namespace

Dopri5::Dopri5(SystemParams params, IntegratorControls controls) : p_(params), c_(controls) {}

Vec Dopri5::f(const Vec& y) const noexcept {
  // Real form of meanfield_rhs; avoids the checked complex multiply.
  const double ar = y[0], ai = y[1], br = y[2], bi = y[3];
  const double shift = p_.delta_a + 2.0 * p_.g * br;
  return {shift * ai - 0.5 * p_.kappa_a * ar,
          -shift * ar - 0.5 * p_.kappa_a * ai - p_.F,
          p_.omega_b * bi,
          -p_.omega_b * br - p_.kappa_b * bi - p_.g * (ar * ar + ai * ai)};
}

void Dopri5::reset(double t0, const MeanFieldState& s0) {
  t_ = t_prev_ = t0;
  y_ = pack(s0);
  k1_ = f(y_);
  accepted_ = rejected_ = 0;
  log_facold_ = std::log(1e-4);
  cont_ready_ = false;

  if (c_.initial_step > 0.0) {
    h_ = c_.initial_step;
    return;
  }
  // Hairer's starting-step heuristic.
  double d0 = 0.0, dd1 = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double sk = c_.atol + c_.rtol * std::abs(y_[k]);
    d0 += (y_[k] / sk) * (y_[k] / sk);
    dd1 += (k1_[k] / sk) * (k1_[k] / sk);
  }
  d0 = std::sqrt(d0 / 4);
  dd1 = std::sqrt(dd1 / 4);
  double h0 = (d0 < 1e-5 || dd1 < 1e-5) ? 1e-6 : 0.01 * d0 / dd1;
  Vec y1;
  for (int k = 0; k < 4; ++k) y1[k] = y_[k] + h0 * k1_[k];
  const Vec f1 = f(y1);
  double d2 = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double sk = c_.atol + c_.rtol * std::abs(y_[k]);
    d2 += ((f1[k] - k1_[k]) / sk) * ((f1[k] - k1_[k]) / sk);
  }
  d2 = std::sqrt(d2 / 4) / h0;
  const double dm = std::max(dd1, d2);
  const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
  h_ = std::min(100.0 * h0, h1);
  if (c_.max_step > 0.0) h_ = std::min(h_, c_.max_step);
}

void Dopri5::step(double t_limit) {
  constexpr double safe = 0.9, beta = 0.04, expo1 = 0.2 - beta * 0.75;
  constexpr double facc1 = 1.0 / 0.2, facc2 = 1.0 / 10.0;

  for (;;) {
    if (accepted_ + rejected_ >= c_.max_steps) throw StiffnessError("mean-field integrator exceeded max_steps");
    double h = std::min(h_, t_limit - t_);
    if (c_.max_step > 0.0) h = std::min(h, c_.max_step);
    if (h < 1e-14 * std::max(1.0, std::abs(t_))) {
      throw StiffnessError("mean-field step size underflow at t = " + std::to_string(t_));
    }
    Vec y2, y3, y4, y5, y6, y7;
    for (int k = 0; k < 4; ++k) y2[k] = y_[k] + h * a21 * k1_[k];
    const Vec k2 = f(y2);
    for (int k = 0; k < 4; ++k) y3[k] = y_[k] + h * (a31 * k1_[k] + a32 * k2[k]);
    const Vec k3 = f(y3);
    for (int k = 0; k < 4; ++k) y4[k] = y_[k] + h * (a41 * k1_[k] + a42 * k2[k] + a43 * k3[k]);
    const Vec k4 = f(y4);
    for (int k = 0; k < 4; ++k)
      y5[k] = y_[k] + h * (a51 * k1_[k] + a52 * k2[k] + a53 * k3[k] + a54 * k4[k]);
    const Vec k5 = f(y5);
    for (int k = 0; k < 4; ++k)
      y6[k] = y_[k] + h * (a61 * k1_[k] + a62 * k2[k] + a63 * k3[k] + a64 * k4[k] + a65 * k5[k]);
    const Vec k6 = f(y6);
    for (int k = 0; k < 4; ++k)
      y7[k] = y_[k] + h * (a71 * k1_[k] + a73 * k3[k] + a74 * k4[k] + a75 * k5[k] + a76 * k6[k]);
    const Vec k7 = f(y7);

    double err = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double ek = h * (e1 * k1_[k] + e3 * k3[k] + e4 * k4[k] + e5 * k5[k] + e6 * k6[k] + e7 * k7[k]);
      const double sk = c_.atol + c_.rtol * std::max(std::abs(y_[k]), std::abs(y7[k]));
      err += (ek / sk) * (ek / sk);
    }
    err = std::sqrt(err / 4);
    if (!std::isfinite(err)) throw StiffnessError("non-finite error estimate in mean-field integrator");

    // err^expo1 / facold^beta through one log and one exp; this step
    // controller dominates the cost of the tiny four-dimensional system.
    const double log_err = std::log(std::max(err, 1e-300));
    if (err <= 1.0) {
      double fac = std::exp(expo1 * log_err - beta * log_facold_);
      fac = std::max(facc2, std::min(facc1, fac / safe));
      log_facold_ = std::log(std::max(err, 1e-4));
      // Dense-output coefficients are built on demand in interpolate().
      y_prev_ = y_;
      stages_ = {k1_, k3, k4, k5, k6, k7};
      cont_ready_ = false;
      h_last_ = h;
      t_prev_ = t_;
      t_ += h;
      if (t_limit - t_ < 1e-12 * std::max(1.0, std::abs(t_limit))) t_ = t_limit;
      y_ = y7;
      k1_ = k7;
      h_ = h / fac;
      ++accepted_;
      return;
    }
    h_ = h / std::min(facc1, std::exp(expo1 * log_err) / safe);
    ++rejected_;
  }
}

MeanFieldState Dopri5::state() const noexcept { return unpack(y_); }

void Dopri5::build_dense() const noexcept {
  const double h = h_last_;
  const auto& [k1, k3, k4, k5, k6, k7] = stages_;
  for (int k = 0; k < 4; ++k) {
    const double ydiff = y_[k] - y_prev_[k];
    const double bspl = h * k1[k] - ydiff;
    cont_[0][k] = y_prev_[k];
    cont_[1][k] = ydiff;
    cont_[2][k] = bspl;
    cont_[3][k] = ydiff - h * k7[k] - bspl;
    cont_[4][k] = h * (d1 * k1[k] + d3 * k3[k] + d4 * k4[k] + d5 * k5[k] + d6 * k6[k] + d7 * k7[k]);
  }
  cont_ready_ = true;
}

MeanFieldState Dopri5::interpolate(double t) const noexcept {
  const double h = t_ - t_prev_;
  if (h <= 0.0) return unpack(y_);
  if (!cont_ready_) build_dense();
  const double th = (t - t_prev_) / h;
  const double th1 = 1.0 - th;
  Vec out;
  for (int k = 0; k < 4; ++k) {
    out[k] = cont_[0][k] + th * (cont_[1][k] + th1 * (cont_[2][k] + th * (cont_[3][k] + th1 * cont_[4][k])));
  }
  return unpack(out);
}

MeanFieldTrajectory integrate(const MeanFieldState& s0, const SystemParams& p, double t_final,
                              std::span<const double> output_times, const IntegratorControls& controls) {
  if (!(t_final > 0.0)) throw InvalidParameter("t_final must be > 0");
  if (!std::is_sorted(output_times.begin(), output_times.end())) {
    throw InvalidParameter("output times must be sorted");
  }
  if (!output_times.empty() && (output_times.front() < 0.0 || output_times.back() > t_final)) {
    throw InvalidParameter("output times must lie inside [0, t_final]");
  }
  MeanFieldTrajectory out;
  out.times.assign(output_times.begin(), output_times.end());
  out.states.reserve(output_times.size());

  Dopri5 stepper(p, controls);
  stepper.reset(0.0, s0);
  std::size_t next = 0;
  while (next < output_times.size() && output_times[next] <= 0.0) {
    out.states.push_back(s0);
    ++next;
  }
  while (stepper.t() < t_final) {
    stepper.step(t_final);
    while (next < output_times.size() && output_times[next] <= stepper.t()) {
      out.states.push_back(stepper.interpolate(output_times[next]));
      ++next;
    }
  }
  out.final_state = stepper.state();
  out.accepted_steps = stepper.accepted();
  out.rejected_steps = stepper.rejected();
  return out;
}

MeanFieldTrajectory integrate_uniform(const MeanFieldState& s0, const SystemParams& p, double t_final,
                                      double dt_out, const IntegratorControls& controls) {
  if (!(dt_out > 0.0)) throw InvalidParameter("output interval must be > 0");
  std::vector<double> grid;
  const auto n = static_cast<std::size_t>(std::floor(t_final / dt_out + 1e-9));
  grid.reserve(n + 1);
  for (std::size_t k = 0; k <= n; ++k) grid.push_back(std::min(t_final, static_cast<double>(k) * dt_out));
  return integrate(s0, p, t_final, grid, controls);
}

// ---------------------------------------------------------------------------
// Classification

bool optical_dynamical(const AttractorDiagnostics& d, double eps_osc) noexcept {
  return d.d_alpha_r >= eps_osc;
}
bool mechanical_dynamical(const AttractorDiagnostics& d, double eps_osc) noexcept {
  return d.d_beta_r >= eps_osc;
}
bool is_limit_cycle(const AttractorDiagnostics& d, double eps_osc) noexcept {
  return optical_dynamical(d, eps_osc) || mechanical_dynamical(d, eps_osc);
}

std::string to_string(PhaseLabel label) {
  switch (label) {
    case PhaseLabel::FP1: return "1FP";
    case PhaseLabel::FP2: return "2FP";
    case PhaseLabel::LC1only: return "1LC";
    case PhaseLabel::LC1FP1: return "1LC+1FP";
    case PhaseLabel::LC2: return "2LC";
    case PhaseLabel::LC2FP1: return "2LC+1FP";
    case PhaseLabel::Uncategorized: return "uncat";
  }
  return "uncat";
}

PhaseLabel label_from_counts(std::size_t fp, std::size_t lc, std::size_t max_attractors) noexcept {
  if (fp + lc == 0 || fp + lc > max_attractors) return PhaseLabel::Uncategorized;
  if (lc == 0 && fp == 1) return PhaseLabel::FP1;
  if (lc == 0 && fp == 2) return PhaseLabel::FP2;
  if (lc == 1 && fp == 0) return PhaseLabel::LC1only;
  if (lc == 1 && fp == 1) return PhaseLabel::LC1FP1;
  if (lc == 2 && fp == 0) return PhaseLabel::LC2;
  if (lc == 2 && fp == 1) return PhaseLabel::LC2FP1;
  return PhaseLabel::Uncategorized;
}

std::vector<cplx> initial_condition_grid(std::size_t n_init, double radius) {
  if (n_init == 0) throw InvalidParameter("initial-condition grid must be nonempty");
  std::vector<cplx> grid{cplx(0.0)};
  if (n_init == 1) return grid;
  constexpr int kRings = 5;
  const std::size_t rest = n_init - 1;
  const double weight_sum = kRings * (kRings + 1) / 2.0;
  std::array<std::size_t, kRings> counts{};
  std::array<double, kRings> remainder{};
  std::size_t assigned = 0;
  for (int r = 0; r < kRings; ++r) {
    const double exact = static_cast<double>(rest) * (r + 1) / weight_sum;
    counts[r] = static_cast<std::size_t>(std::floor(exact));
    remainder[r] = exact - static_cast<double>(counts[r]);
    assigned += counts[r];
  }
  std::array<int, kRings> order{0, 1, 2, 3, 4};
  std::stable_sort(order.begin(), order.end(), [&](int l, int r) { return remainder[l] > remainder[r]; });
  for (std::size_t k = 0; assigned < rest; ++k, ++assigned) ++counts[order[k % kRings]];

  for (int r = 0; r < kRings; ++r) {
    const double rad = radius * (r + 1) / kRings;
    for (std::size_t j = 0; j < counts[r]; ++j) {
      const double th = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(counts[r]);
      grid.push_back(std::polar(rad, th));
    }
  }
  return grid;
}

std::vector<DiagnosticCluster> cluster_diagnostics(std::span<const AttractorDiagnostics> diags,
                                                   double eps_tol) {
  // Single linkage: connected components of the graph joining vectors that
  // agree within eps_tol in the max norm. Components are emitted in the
  // lexicographic order of their smallest member.
  const std::size_t n = diags.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return diags[l].vector() < diags[r].vector(); });
  auto close = [&](std::size_t i, std::size_t j) {
    const auto v = diags[i].vector();
    const auto w = diags[j].vector();
    double dist = 0.0;
    for (int k = 0; k < 4; ++k) dist = std::max(dist, std::abs(v[k] - w[k]));
    return dist <= eps_tol;
  };
  std::vector<int> component(n, -1);
  std::vector<DiagnosticCluster> clusters;
  for (std::size_t seed : order) {
    if (component[seed] >= 0) continue;
    const int id = static_cast<int>(clusters.size());
    clusters.push_back({diags[seed], {}});
    std::vector<std::size_t> stack{seed};
    component[seed] = id;
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      clusters.back().members.push_back(cur);
      for (std::size_t other : order) {
        if (component[other] < 0 && close(cur, other)) {
          component[other] = id;
          stack.push_back(other);
        }
      }
    }
    std::sort(clusters.back().members.begin(), clusters.back().members.end(), [&](std::size_t l, std::size_t r) {
      return diags[l].vector() < diags[r].vector();
    });
  }
  return clusters;
}

AttractorDiagnostics late_time_diagnostics(cplx alpha0, const SystemParams& p,
                                           const ClassifyControls& controls, MeanFieldState* final_state) {
  const double t_f = controls.t_final_kappa / p.kappa_a;
  const double t_w = t_f - controls.window_kappa / p.kappa_a;
  std::vector<double> grid;
  for (double t = t_w; t <= t_f + 1e-9; t += controls.sample_dt) grid.push_back(std::min(t, t_f));
  const auto traj = integrate({alpha0, cplx(0.0)}, p, t_f, grid, controls.ode);

  AttractorDiagnostics d;
  double amin = std::numeric_limits<double>::infinity(), amax = -amin;
  double bmin = amin, bmax = -amin;
  for (const auto& s : traj.states) {
    amin = std::min(amin, s.alpha.real());
    amax = std::max(amax, s.alpha.real());
    bmin = std::min(bmin, s.beta.real());
    bmax = std::max(bmax, s.beta.real());
  }
  d.d_alpha_r = amax - amin;
  d.d_beta_r = bmax - bmin;

  // Means over whole periods: a window holding a fractional number of
  // cycles biases the average by an amount that depends on where the cycle
  // sits at t_f, which would split one attractor into several clusters. The
  // span runs between the first and last upward crossings of a level just
  // below the maximum of Re alpha (one crossing per period for a simple
  // cycle), with linear interpolation inside each sample interval.
  const auto& st = traj.states;
  auto na = [&](std::size_t k) { return std::norm(st[k].alpha); };
  auto nb = [&](std::size_t k) { return std::norm(st[k].beta); };
  std::vector<double> cross;  // fractional sample positions
  if (is_limit_cycle(d, controls.eps_osc) && d.d_alpha_r > 0.0) {
    const double level = amax - 0.1 * d.d_alpha_r;
    for (std::size_t k = 0; k + 1 < st.size(); ++k) {
      const double x0 = st[k].alpha.real(), x1 = st[k + 1].alpha.real();
      if (x0 < level && x1 >= level) cross.push_back(static_cast<double>(k) + (level - x0) / (x1 - x0));
    }
  }
  if (cross.size() >= 2) {
    // Trapezoid on the piecewise-linear interpolant between the crossings.
    const double lo = cross.front(), hi = cross.back();
    auto lerp = [&](auto&& f, double pos) {
      const auto k = static_cast<std::size_t>(pos);
      const double w = pos - static_cast<double>(k);
      return k + 1 < st.size() ? (1.0 - w) * f(k) + w * f(k + 1) : f(k);
    };
    auto integrate_between = [&](auto&& f) {
      const auto k_lo = static_cast<std::size_t>(std::ceil(lo));
      const auto k_hi = static_cast<std::size_t>(std::floor(hi));
      double acc = 0.0;
      double prev_pos = lo, prev_val = lerp(f, lo);
      for (std::size_t k = k_lo; k <= k_hi; ++k) {
        const double v = f(k);
        acc += 0.5 * (prev_val + v) * (static_cast<double>(k) - prev_pos);
        prev_pos = static_cast<double>(k);
        prev_val = v;
      }
      const double v_hi = lerp(f, hi);
      acc += 0.5 * (prev_val + v_hi) * (hi - prev_pos);
      return acc / (hi - lo);
    };
    d.mean_na = integrate_between(na);
    d.mean_nb = integrate_between(nb);
  } else {
    for (std::size_t k = 0; k < st.size(); ++k) {
      d.mean_na += na(k);
      d.mean_nb += nb(k);
    }
    d.mean_na /= static_cast<double>(st.size());
    d.mean_nb /= static_cast<double>(st.size());
  }
  if (final_state) *final_state = traj.final_state;
  return d;
}

namespace {

struct StartResult {
  AttractorDiagnostics diag;
  MeanFieldState final_state;
  bool ok = false;
};

PhaseCell reduce_cell(double delta_a, double F_tilde, std::span<const StartResult> results,
                      const ClassifyControls& controls) {
  PhaseCell cell;
  cell.delta_a = delta_a;
  cell.F_tilde = F_tilde;
  std::vector<AttractorDiagnostics> good;
  std::vector<std::size_t> good_index;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].ok) {
      good.push_back(results[i].diag);
      good_index.push_back(i);
    } else {
      cell.excluded_starts.push_back(i);
    }
  }
  const auto clusters = cluster_diagnostics(good, controls.eps_tol);
  std::size_t fp = 0, lc = 0;
  for (const auto& c : clusters) {
    cell.attractors.push_back(c.representative);
    cell.attractor_states.push_back(results[good_index[c.members.front()]].final_state);
    cell.cluster_sizes.push_back(c.members.size());
    (is_limit_cycle(c.representative, controls.eps_osc) ? lc : fp) += 1;
  }
  cell.label = label_from_counts(fp, lc, controls.max_attractors);
  return cell;
}

SystemParams cell_params(SystemParams base, double delta_a, double F_tilde) {
  base.delta_a = delta_a;
  base.F = F_tilde;
  return base;
}

}  // namespace

PhaseCell classify_point(const SystemParams& base, double delta_a, double F_tilde,
                         std::span<const cplx> grid, const ClassifyControls& controls, Exec exec) {
  if (grid.empty()) throw InvalidParameter("initial-condition grid must be nonempty");
  const SystemParams p = cell_params(base, delta_a, F_tilde);
  p.validate();
  std::vector<StartResult> results(grid.size());
  for_each_index(exec, grid.size(), [&](std::size_t i) {
    try {
      results[i].diag = late_time_diagnostics(grid[i], p, controls, &results[i].final_state);
      results[i].ok = true;
    } catch (const StiffnessError&) {
      results[i].ok = false;
    }
  });
  return reduce_cell(delta_a, F_tilde, results, controls);
}

std::vector<PhaseCell> phase_scan(const SystemParams& base, ScanAxis delta_a, ScanAxis F_tilde,
                                  std::span<const cplx> grid, const ClassifyControls& controls, Exec exec) {
  if (grid.empty()) throw InvalidParameter("initial-condition grid must be nonempty");
  if (delta_a.points == 0 || F_tilde.points == 0) throw InvalidParameter("scan axes must be nonempty");
  const std::size_t n_cells = delta_a.points * F_tilde.points;
  const std::size_t n_starts = grid.size();
  std::vector<StartResult> results(n_cells * n_starts);
  for_each_index(exec, results.size(), [&](std::size_t k) {
    const std::size_t cell = k / n_starts;
    const std::size_t start = k % n_starts;
    const SystemParams p = cell_params(base, delta_a.at(cell / F_tilde.points), F_tilde.at(cell % F_tilde.points));
    try {
      results[k].diag = late_time_diagnostics(grid[start], p, controls, &results[k].final_state);
      results[k].ok = true;
    } catch (const StiffnessError&) {
      results[k].ok = false;
    }
  });
  std::vector<PhaseCell> cells;
  cells.reserve(n_cells);
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    cells.push_back(reduce_cell(delta_a.at(cell / F_tilde.points), F_tilde.at(cell % F_tilde.points),
                                std::span<const StartResult>(results).subspan(cell * n_starts, n_starts),
                                controls));
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Limit cycles

double autocorrelation_period(std::span<const double> signal, double dt) {
  const std::size_t n = signal.size();
  if (n < 8) throw InsufficientData("signal too short for a period estimate");
  const double mean = std::accumulate(signal.begin(), signal.end(), 0.0) / static_cast<double>(n);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = signal[i] - mean;
  const std::size_t max_lag = n / 2;
  std::vector<double> r(max_lag + 1, 0.0);
  for (std::size_t lag = 0; lag <= max_lag; ++lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += x[i] * x[i + lag];
    r[lag] = s / static_cast<double>(n - lag);
  }
  if (!(r[0] > 0.0)) throw NotFound("constant signal has no period");
  // First dip below zero, then the highest peak among the local maxima that
  // follow it; taking the global maximum of that stretch skips harmonics.
  std::size_t lag = 1;
  while (lag < max_lag && r[lag] > 0.0) ++lag;
  if (lag >= max_lag) throw NotFound("autocorrelation never decorrelates inside the window");
  std::size_t best = 0;
  for (std::size_t k = lag; k + 1 < max_lag; ++k) {
    if (r[k] >= r[k - 1] && r[k] >= r[k + 1] && r[k] > 0.5 * r[0]) {
      best = k;
      break;
    }
  }
  if (best == 0) throw NotFound("no autocorrelation peak found");
  // Parabolic refinement.
  const double y0 = r[best - 1], y1 = r[best], y2 = r[best + 1];
  const double denom = y0 - 2.0 * y1 + y2;
  const double shift = denom != 0.0 ? 0.5 * (y0 - y2) / denom : 0.0;
  return (static_cast<double>(best) + shift) * dt;
}

namespace {

// Bisection on the dense output for Re alpha(t) = level inside the last step.
double locate_crossing(const Dopri5& st, double level) {
  double lo = st.t_previous(), hi = st.t();
  for (int it = 0; it < 200 && hi - lo > 1e-14 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    if (st.interpolate(mid).alpha.real() < level) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double state_distance(const MeanFieldState& a, const MeanFieldState& b) {
  return std::sqrt(std::norm(a.alpha - b.alpha) + std::norm(a.beta - b.beta));
}

LimitCycleOrbit trace_orbit(const MeanFieldState& on_attractor, const SystemParams& p,
                            const ClassifyControls& controls, std::size_t samples_per_period) {
  const double window = controls.window_kappa / p.kappa_a;
  const auto probe = integrate_uniform(on_attractor, p, window, controls.sample_dt, controls.ode);
  std::vector<double> re_alpha;
  re_alpha.reserve(probe.states.size());
  for (const auto& s : probe.states) re_alpha.push_back(s.alpha.real());
  const double t_ac = autocorrelation_period(re_alpha, controls.sample_dt);
  const double level = std::accumulate(re_alpha.begin(), re_alpha.end(), 0.0) / static_cast<double>(re_alpha.size());

  // Section point: first upward crossing of Re alpha = level.
  Dopri5 st(p, controls.ode);
  st.reset(0.0, probe.final_state);
  double t0 = -1.0;
  MeanFieldState x0;
  std::vector<std::pair<double, MeanFieldState>> crossings;
  const double horizon = 4.0 * t_ac + window;
  while (st.t() < horizon) {
    const double before = st.state().alpha.real();
    st.step(horizon);
    const double after = st.state().alpha.real();
    if (before < level && after >= level) {
      const double tc = locate_crossing(st, level);
      if (t0 < 0.0) {
        t0 = tc;
        x0 = st.interpolate(tc);
      } else {
        crossings.emplace_back(tc, st.interpolate(tc));
        if (tc - t0 > 1.5 * t_ac) break;
      }
    }
  }
  if (t0 < 0.0 || crossings.empty()) throw NotFound("limit cycle never returns to its section");
  const auto it = std::min_element(crossings.begin(), crossings.end(), [&](const auto& l, const auto& r) {
    return std::abs(l.first - t0 - t_ac) < std::abs(r.first - t0 - t_ac);
  });

  LimitCycleOrbit orbit;
  orbit.period = it->first - t0;
  std::vector<double> grid(samples_per_period + 1);
  for (std::size_t k = 0; k <= samples_per_period; ++k) {
    grid[k] = orbit.period * static_cast<double>(k) / static_cast<double>(samples_per_period);
  }
  grid.back() = orbit.period;
  auto one = integrate(x0, p, orbit.period, grid, controls.ode);
  orbit.times = std::move(one.times);
  orbit.samples = std::move(one.states);
  orbit.closure_error = state_distance(orbit.samples.front(), orbit.samples.back());
  return orbit;
}

}  // namespace

std::vector<LimitCycleOrbit> extract_limit_cycles(const SystemParams& p, const PhaseCell& cell,
                                                  const ClassifyControls& controls,
                                                  std::size_t samples_per_period) {
  if (samples_per_period < 8) throw InvalidParameter("need at least 8 samples per period");
  if (cell.attractor_states.size() != cell.attractors.size())
    throw DimensionMismatch("phase cell lacks attractor states");
  std::vector<LimitCycleOrbit> orbits;
  for (std::size_t c = 0; c < cell.attractors.size(); ++c) {
    if (!is_limit_cycle(cell.attractors[c], controls.eps_osc)) continue;
    LimitCycleOrbit orbit = trace_orbit(cell.attractor_states[c], p, controls, samples_per_period);
    orbit.diagnostics = cell.attractors[c];
    orbits.push_back(std::move(orbit));
  }
  if (orbits.empty()) throw NotFound("no dynamical attractor at this parameter point");
  std::sort(orbits.begin(), orbits.end(),
            [](const auto& l, const auto& r) { return l.diagnostics.mean_na < r.diagnostics.mean_na; });
  return orbits;
}

std::vector<LimitCycleOrbit> extract_limit_cycles(const SystemParams& p, std::span<const cplx> grid,
                                                  const ClassifyControls& controls,
                                                  std::size_t samples_per_period, Exec exec) {
  if (samples_per_period < 8) throw InvalidParameter("need at least 8 samples per period");
  const PhaseCell cell = classify_point(p, p.delta_a, p.F, grid, controls, exec);
  return extract_limit_cycles(p, cell, controls, samples_per_period);
}

}  // namespace lcswitch
