#include "lcswitch/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "lcswitch/errors.hpp"
#include "lcswitch/rng.hpp"

namespace lcswitch {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

// Per-sequence sufficient statistics of one E-step.
struct SuffStats {
  double log_likelihood = 0.0;
  std::array<double, 2> gamma0{};
  Eigen::Matrix2d xi = Eigen::Matrix2d::Zero();
  std::array<double, 2> weight{};
  std::array<Obs, 2> sum_x{Obs::Zero(), Obs::Zero()};
  std::array<Eigen::Matrix2d, 2> sum_xx{Eigen::Matrix2d::Zero(), Eigen::Matrix2d::Zero()};
};

// Emission weights rescaled by the per-step maximum; the offsets are
// returned through `shift` so the likelihood can be restored.
void emission_table(const HmmParams& p, const ObsSequence& seq, std::vector<std::array<double, 2>>& e,
                    std::vector<double>& shift) {
  const std::size_t T = seq.size();
  e.resize(T);
  shift.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const double l0 = p.emissions[0].log_pdf(seq[t]);
    const double l1 = p.emissions[1].log_pdf(seq[t]);
    const double m = std::max(l0, l1);
    shift[t] = m;
    e[t] = {std::exp(l0 - m), std::exp(l1 - m)};
  }
}

SuffStats forward_backward(const HmmParams& p, const ObsSequence& seq, bool want_stats) {
  SuffStats s;
  const std::size_t T = seq.size();
  if (T == 0) return s;
  std::vector<std::array<double, 2>> e, alpha(T), beta(T);
  std::vector<double> shift, scale(T);
  emission_table(p, seq, e, shift);

  const auto& A = p.A;
  double ll = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    std::array<double, 2> a;
    if (t == 0) {
      a = {p.pi[0] * e[0][0], p.pi[1] * e[0][1]};
    } else {
      const auto& prev = alpha[t - 1];
      a = {(prev[0] * A(0, 0) + prev[1] * A(1, 0)) * e[t][0], (prev[0] * A(0, 1) + prev[1] * A(1, 1)) * e[t][1]};
    }
    const double c = a[0] + a[1];
    scale[t] = c;
    ll += std::log(c) + shift[t];
    alpha[t] = {a[0] / c, a[1] / c};
  }
  s.log_likelihood = ll;
  if (!want_stats) return s;

  beta[T - 1] = {1.0, 1.0};
  for (std::size_t t = T - 1; t-- > 0;) {
    const auto& bn = beta[t + 1];
    const double w0 = e[t + 1][0] * bn[0], w1 = e[t + 1][1] * bn[1];
    beta[t] = {(A(0, 0) * w0 + A(0, 1) * w1) / scale[t + 1], (A(1, 0) * w0 + A(1, 1) * w1) / scale[t + 1]};
  }
  for (std::size_t t = 0; t < T; ++t) {
    std::array<double, 2> g{alpha[t][0] * beta[t][0], alpha[t][1] * beta[t][1]};
    const double gs = g[0] + g[1];
    g[0] /= gs;
    g[1] /= gs;
    if (t == 0) s.gamma0 = g;
    for (int i = 0; i < 2; ++i) {
      s.weight[i] += g[i];
      s.sum_x[i] += g[i] * seq[t];
      s.sum_xx[i] += g[i] * seq[t] * seq[t].transpose();
    }
    if (t + 1 < T) {
      const double inv = 1.0 / scale[t + 1];
      for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
          s.xi(i, j) += alpha[t][i] * A(i, j) * e[t + 1][j] * beta[t + 1][j] * inv;
    }
  }
  return s;
}

}  // namespace

std::string to_string(LcState s) { return s == LcState::LC1 ? "LC1" : "LC2"; }

std::string to_string(CovarianceKind k) { return k == CovarianceKind::Full ? "full" : "diag"; }

CovarianceKind parse_covariance(const std::string& s) {
  if (s == "full") return CovarianceKind::Full;
  if (s == "diag" || s == "diagonal") return CovarianceKind::Diagonal;
  throw InvalidParameter("unknown covariance parameterization '" + s + "'");
}

ObsSequence extract_features(const TrajectoryRecord& r) {
  ObsSequence out;
  const std::size_t first = r.first_post_transient();
  out.reserve(r.size() - first);
  for (std::size_t k = first; k < r.size(); ++k)
    out.emplace_back(std::sqrt(std::max(0.0, r.n_a[k])), std::sqrt(std::max(0.0, r.n_b[k])));
  return out;
}

Standardization fit_standardization(std::span<const ObsSequence> sequences) {
  Obs sum = Obs::Zero(), sq = Obs::Zero();
  double n = 0.0;
  for (const auto& seq : sequences)
    for (const auto& x : seq) {
      sum += x;
      sq += x.cwiseProduct(x);
      n += 1.0;
    }
  if (n < 2.0) throw InsufficientData("standardization needs at least two observations");
  Standardization s;
  s.mean = sum / n;
  const Obs var = (sq / n - s.mean.cwiseProduct(s.mean)).cwiseMax(0.0);
  for (int i = 0; i < 2; ++i) s.scale[i] = var[i] > 0.0 ? std::sqrt(var[i]) : 1.0;
  return s;
}

std::vector<ObsSequence> standardize(std::span<const ObsSequence> sequences, const Standardization& s) {
  std::vector<ObsSequence> out;
  out.reserve(sequences.size());
  for (const auto& seq : sequences) {
    ObsSequence z;
    z.reserve(seq.size());
    for (const auto& x : seq) z.push_back(s.apply(x));
    out.push_back(std::move(z));
  }
  return out;
}

double GaussianEmission::log_pdf(const Obs& x) const {
  const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  const Obs d = x - mean;
  // Closed-form 2x2 inverse quadratic form.
  const double q = (cov(1, 1) * d[0] * d[0] - (cov(0, 1) + cov(1, 0)) * d[0] * d[1] + cov(0, 0) * d[1] * d[1]) / det;
  return -0.5 * q - 0.5 * std::log(det) - std::log(2.0 * std::numbers::pi);
}

void HmmParams::validate() const {
  if (std::abs(pi[0] + pi[1] - 1.0) > 1e-10 || pi[0] < 0.0 || pi[1] < 0.0)
    throw InvalidParameter("initial probabilities must be non-negative and sum to one");
  for (int i = 0; i < 2; ++i) {
    if (std::abs(A.row(i).sum() - 1.0) > 1e-10 || A.row(i).minCoeff() < 0.0)
      throw InvalidParameter("transition matrix rows must be stochastic");
    const auto& c = emissions[static_cast<std::size_t>(i)].cov;
    if (std::abs(c(0, 1) - c(1, 0)) > 1e-12 * (1.0 + c.cwiseAbs().maxCoeff()))
      throw InvalidParameter("emission covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
    if (!(es.eigenvalues().minCoeff() > 0.0)) throw InvalidParameter("emission covariance is not positive definite");
  }
}

bool HmmParams::canonicalize() {
  if (!(emissions[0].mean[0] > emissions[1].mean[0])) return false;
  std::swap(pi[0], pi[1]);
  std::swap(emissions[0], emissions[1]);
  Eigen::Matrix2d B;
  B << A(1, 1), A(1, 0), A(0, 1), A(0, 0);
  A = B;
  return true;
}

Eigen::Matrix2d regularize_covariance(const Eigen::Matrix2d& cov, CovarianceKind kind, double floor) {
  Eigen::Matrix2d c = 0.5 * (cov + cov.transpose());
  if (kind == CovarianceKind::Diagonal) {
    c(0, 1) = c(1, 0) = 0.0;
    c(0, 0) = std::max(c(0, 0), floor);
    c(1, 1) = std::max(c(1, 1), floor);
    return c;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(c);
  Eigen::Vector2d ev = es.eigenvalues().cwiseMax(floor);
  if (ev == es.eigenvalues()) return c;
  c = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (c + c.transpose());
}

KMeansResult kmeans2(std::span<const Obs> pts, const KMeansControls& controls) {
  const std::size_t n = pts.size();
  bool distinct = false;
  for (std::size_t i = 1; i < n && !distinct; ++i) distinct = pts[i] != pts[0];
  if (!distinct) throw InsufficientData("k-means: need at least two distinct observations (degenerate clusters)");

  // Restarts are independent; keep the best inertia, earliest on ties.
  std::vector<KMeansResult> runs(controls.restarts);
  for_each_index(Exec::Serial, controls.restarts, [&](std::size_t r) {
    CounterRng rng(derive_seed(controls.seed, "kmeans", r));
    std::array<Obs, 2> c;
    c[0] = pts[rng.below(n)];
    std::vector<double> d2(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += d2[i] = (pts[i] - c[0]).squaredNorm();
    double target = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] > 0.0 && target < d2[i]) { pick = i; break; }
      target -= d2[i];
    }
    if (d2[pick] == 0.0)  // rounding pushed us onto a duplicate of c[0]
      for (std::size_t i = 0; i < n; ++i)
        if (d2[i] > 0.0) { pick = i; break; }
    c[1] = pts[pick];

    std::vector<std::uint8_t> assign(n, 2);
    double inertia = 0.0;
    for (std::size_t it = 0; it < controls.max_iter; ++it) {
      bool changed = false;
      inertia = 0.0;
      std::array<Obs, 2> sum{Obs::Zero(), Obs::Zero()};
      std::array<double, 2> cnt{};
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (pts[i] - c[0]).squaredNorm(), b = (pts[i] - c[1]).squaredNorm();
        const std::uint8_t k = b < a ? 1 : 0;
        inertia += std::min(a, b);
        if (assign[i] != k) { assign[i] = k; changed = true; }
        sum[k] += pts[i];
        cnt[k] += 1.0;
      }
      if (!changed) break;
      for (int k = 0; k < 2; ++k)
        if (cnt[k] > 0.0) c[k] = sum[k] / cnt[k];
    }
    runs[r] = {c, std::move(assign), inertia};
  });
  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].inertia < runs[best].inertia) best = r;
  return std::move(runs[best]);
}

HmmParams kmeans_init(std::span<const ObsSequence> sequences, const KMeansControls& controls) {
  std::vector<Obs> pts;
  std::vector<std::size_t> starts;
  for (const auto& seq : sequences) {
    if (seq.empty()) continue;
    starts.push_back(pts.size());
    pts.insert(pts.end(), seq.begin(), seq.end());
  }
  if (controls.restarts == 0) throw InvalidParameter("k-means needs at least one restart");
  const KMeansResult km = kmeans2(pts, controls);

  HmmParams p;
  for (int k = 0; k < 2; ++k) {
    Obs mean = Obs::Zero();
    double cnt = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (km.assignment[i] == k) { mean += pts[i]; cnt += 1.0; }
    mean /= cnt;
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (km.assignment[i] == k) cov += (pts[i] - mean) * (pts[i] - mean).transpose();
    cov /= cnt;
    p.emissions[static_cast<std::size_t>(k)] = {mean, regularize_covariance(cov, controls.covariance)};
  }
  double first1 = 0.0;
  for (std::size_t s : starts) first1 += km.assignment[s] == 1 ? 1.0 : 0.0;
  p.pi = {1.0 - first1 / static_cast<double>(starts.size()), first1 / static_cast<double>(starts.size())};
  p.A = Eigen::Matrix2d::Constant(0.5);
  p.canonicalize();
  return p;
}

double log_likelihood(const HmmParams& params, const ObsSequence& sequence) {
  return forward_backward(params, sequence, false).log_likelihood;
}

double log_likelihood(const HmmParams& params, std::span<const ObsSequence> sequences, Exec exec) {
  std::vector<double> ll(sequences.size());
  for_each_index(exec, sequences.size(), [&](std::size_t i) { ll[i] = log_likelihood(params, sequences[i]); });
  double total = 0.0;
  for (double v : ll) total += v;
  return total;
}

namespace {

HmmParams m_step(const HmmParams& old, std::span<const SuffStats> stats, const BaumWelchControls& c) {
  SuffStats tot;
  std::size_t nonempty = 0;
  for (const auto& s : stats) {
    if (s.weight[0] + s.weight[1] > 0.0) ++nonempty;
    for (int i = 0; i < 2; ++i) {
      tot.gamma0[i] += s.gamma0[i];
      tot.weight[i] += s.weight[i];
      tot.sum_x[i] += s.sum_x[i];
      tot.sum_xx[i] += s.sum_xx[i];
    }
    tot.xi += s.xi;
  }
  HmmParams p = old;
  const double g0 = tot.gamma0[0] + tot.gamma0[1];
  if (nonempty > 0 && g0 > 0.0) p.pi = {tot.gamma0[0] / g0, tot.gamma0[1] / g0};
  for (int i = 0; i < 2; ++i) {
    const double row = tot.xi(i, 0) + tot.xi(i, 1);
    if (row > 0.0) {
      p.A(i, 0) = tot.xi(i, 0) / row;
      p.A(i, 1) = 1.0 - p.A(i, 0);
    }
    const double w = tot.weight[i];
    if (w > 1e-300) {
      const Obs mu = tot.sum_x[i] / w;
      const Eigen::Matrix2d cov = tot.sum_xx[i] / w - mu * mu.transpose();
      p.emissions[static_cast<std::size_t>(i)] = {mu, regularize_covariance(cov, c.covariance, c.cov_floor)};
    }
  }
  return p;
}

std::vector<SuffStats> e_step(const HmmParams& params, std::span<const ObsSequence> sequences, Exec exec) {
  std::vector<SuffStats> stats(sequences.size());
  for_each_index(exec, sequences.size(), [&](std::size_t i) { stats[i] = forward_backward(params, sequences[i], true); });
  return stats;
}

double total_ll(std::span<const SuffStats> stats) {
  double s = 0.0;
  for (const auto& st : stats) s += st.log_likelihood;
  return s;
}

}  // namespace

HmmParams baum_welch_step(const HmmParams& params, std::span<const ObsSequence> sequences,
                          const BaumWelchControls& controls, double* log_likelihood_before) {
  const auto stats = e_step(params, sequences, controls.exec);
  if (log_likelihood_before) *log_likelihood_before = total_ll(stats);
  return m_step(params, stats, controls);
}

TrainingResult baum_welch(const HmmParams& params0, std::span<const ObsSequence> sequences,
                          const BaumWelchControls& controls) {
  if (sequences.empty()) throw InsufficientData("Baum-Welch needs at least one sequence");
  params0.validate();
  TrainingResult res;
  HmmParams p = params0;
  for (std::size_t it = 0;; ++it) {
    const auto stats = e_step(p, sequences, controls.exec);
    const double ll = total_ll(stats);
    if (!std::isfinite(ll))
      throw NumericalError("Baum-Welch: non-finite log-likelihood at iteration " + std::to_string(it));
    res.log_likelihood_trace.push_back(ll);
    if (it > 0) {
      const double prev = res.log_likelihood_trace[it - 1];
      if ((ll - prev) <= controls.rel_tol * std::abs(prev)) {
        res.converged = true;
        break;
      }
    }
    if (it == controls.max_iter) break;
    p = m_step(p, stats, controls);
    res.iterations = it + 1;
  }
  p.canonicalize();
  res.params = p;
  return res;
}

StateSequence viterbi(const HmmParams& p, const ObsSequence& seq) {
  StateSequence out;
  const std::size_t T = seq.size();
  if (T == 0) return out;
  const double la[2][2] = {{safe_log(p.A(0, 0)), safe_log(p.A(0, 1))}, {safe_log(p.A(1, 0)), safe_log(p.A(1, 1))}};
  std::vector<std::array<std::uint8_t, 2>> back(T);
  std::array<double, 2> d{safe_log(p.pi[0]) + p.emissions[0].log_pdf(seq[0]),
                          safe_log(p.pi[1]) + p.emissions[1].log_pdf(seq[0])};
  for (std::size_t t = 1; t < T; ++t) {
    std::array<double, 2> nd;
    for (int j = 0; j < 2; ++j) {
      const double from0 = d[0] + la[0][j];
      const double from1 = d[1] + la[1][j];
      const bool take1 = from1 > from0;  // ties stay with LC1
      back[t][j] = take1 ? 1 : 0;
      nd[j] = (take1 ? from1 : from0) + p.emissions[static_cast<std::size_t>(j)].log_pdf(seq[t]);
    }
    d = nd;
  }
  std::uint8_t s = d[1] > d[0] ? 1 : 0;
  out.log_likelihood = d[s];
  out.labels.resize(T);
  for (std::size_t t = T; t-- > 0;) {
    out.labels[t] = static_cast<LcState>(s);
    if (t > 0) s = back[t][s];
  }
  return out;
}

SeparationCheck separation_check(const HmmParams& p) {
  const Eigen::Matrix2d pooled = 0.5 * (p.emissions[0].cov + p.emissions[1].cov);
  const Obs d = p.emissions[1].mean - p.emissions[0].mean;
  SeparationCheck c;
  c.mahalanobis = std::sqrt(std::max(0.0, d.dot(pooled.ldlt().solve(d))));
  c.reliable = c.mahalanobis >= 1.0;
  return c;
}

std::vector<Run> run_length_encode(std::span<const LcState> labels) {
  std::vector<Run> runs;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (runs.empty() || runs.back().state != labels[i]) runs.push_back({i, 0, labels[i]});
    ++runs.back().length;
  }
  return runs;
}

std::vector<LcState> run_length_decode(std::span<const Run> runs) {
  std::vector<LcState> out;
  for (const auto& r : runs) {
    if (r.start != out.size()) throw IntegrityError("run-length table is not contiguous");
    out.insert(out.end(), r.length, r.state);
  }
  return out;
}

SegmentationResult segment_ensemble(std::span<const TrajectoryRecord> records, const SegmentationControls& controls) {
  if (records.empty()) throw InsufficientData("segmentation: no trajectories");
  std::vector<ObsSequence> raw;
  raw.reserve(records.size());
  for (const auto& r : records) raw.push_back(extract_features(r));
  SegmentationResult res;
  res.standardization = fit_standardization(raw);
  const auto z = standardize(raw, res.standardization);
  KMeansControls km = controls.kmeans;
  km.covariance = controls.baum_welch.covariance;
  const HmmParams init = kmeans_init(z, km);
  res.training = baum_welch(init, z, controls.baum_welch);
  res.separation = separation_check(res.training.params);
  res.trajectories.resize(records.size());
  for_each_index(controls.baum_welch.exec, records.size(), [&](std::size_t i) {
    res.trajectories[i] = {records[i].index, records[i].first_post_transient(), records[i].dt_sample,
                           viterbi(res.training.params, z[i])};
  });
  return res;
}

}  // namespace lcswitch
