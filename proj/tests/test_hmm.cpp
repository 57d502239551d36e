#include <doctest.h>

#include <cmath>
#include <random>

#include "lcswitch/errors.hpp"
#include "lcswitch/hmm.hpp"
#include "oracles.hpp"

using namespace lcswitch;

namespace {

HmmParams random_params(std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0.05, 0.95), m(-2.0, 2.0), s(0.3, 1.5), r(-0.5, 0.5);
  HmmParams p;
  p.pi[0] = u(gen);
  p.pi[1] = 1.0 - p.pi[0];
  for (int i = 0; i < 2; ++i) {
    const double a = u(gen);
    p.A(i, 0) = a;
    p.A(i, 1) = 1.0 - a;
  }
  for (auto& e : p.emissions) {
    e.mean = Obs(m(gen), m(gen));
    const double s1 = s(gen), s2 = s(gen), rho = r(gen);
    e.cov << s1 * s1, rho * s1 * s2, rho * s1 * s2, s2 * s2;
  }
  return p;
}

HmmParams separated_truth() {
  HmmParams p;
  p.pi = {0.5, 0.5};
  p.A << 0.98, 0.02, 0.05, 0.95;
  p.emissions[0].mean = Obs(-1.0, 0.0);
  p.emissions[1].mean = Obs(1.5, 1.0);
  p.emissions[0].cov << 0.25, 0.05, 0.05, 0.2;
  p.emissions[1].cov << 0.3, -0.04, -0.04, 0.25;
  return p;
}

std::vector<ObsSequence> sample_many(const HmmParams& p, std::size_t n, std::size_t T, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::vector<ObsSequence> out;
  for (std::size_t k = 0; k < n; ++k) out.push_back(oracle::sample_hmm(p, T, gen));
  return out;
}

}  // namespace

TEST_SUITE("hmm") {
  TEST_CASE("Viterbi matches exhaustive search") {
    std::mt19937_64 gen(2718);
    std::uniform_int_distribution<std::size_t> len(1, 10);
    for (int inst = 0; inst < 100; ++inst) {
      const HmmParams p = random_params(gen);
      const auto x = oracle::sample_hmm(p, len(gen), gen);
      double best = 0.0;
      const auto path = oracle::brute_force_path(p, x, &best);
      const auto v = viterbi(p, x);
      CHECK(v.labels == path);
      CHECK(v.log_likelihood == doctest::Approx(best).epsilon(1e-10));
    }
  }

  TEST_CASE("Viterbi tie rule yields a constant LC1 path") {
    HmmParams p;
    p.A << 0.5, 0.5, 0.5, 0.5;
    p.emissions[0].mean = Obs(-1.0, 0.0);
    p.emissions[1].mean = Obs(1.0, 0.0);
    const ObsSequence x(7, Obs(0.0, 0.0));
    const auto v = viterbi(p, x);
    for (auto s : v.labels) CHECK(s == LcState::LC1);
  }

  TEST_CASE("Viterbi is invariant under a global affine map") {
    std::mt19937_64 gen(5);
    const HmmParams p = random_params(gen);
    const auto x = oracle::sample_hmm(p, 200, gen);
    Eigen::Matrix2d M;
    M << 2.0, 0.3, -0.1, 0.7;
    const Obs shift(4.0, -3.0);
    HmmParams q = p;
    for (auto& e : q.emissions) {
      e.mean = M * e.mean + shift;
      e.cov = M * e.cov * M.transpose();
    }
    ObsSequence y;
    for (const auto& o : x) y.push_back(M * o + shift);
    CHECK(viterbi(p, x).labels == viterbi(q, y).labels);
  }

  TEST_CASE("Baum-Welch recovers the transition matrix") {
    const HmmParams truth = separated_truth();
    const auto data = sample_many(truth, 10, 5000, 99);
    const auto init = kmeans_init(data);
    CHECK(init.A(0, 0) == 0.5);
    CHECK(init.A(1, 0) == 0.5);
    const auto res = baum_welch(init, data, {});
    CHECK(res.converged);
    HmmParams fit = res.params;
    fit.canonicalize();
    MESSAGE("a12=" << fit.A(0, 1) << " a21=" << fit.A(1, 0) << " iters=" << res.iterations);
    CHECK(std::abs(fit.A(0, 1) / 0.02 - 1.0) < 0.2);
    CHECK(std::abs(fit.A(1, 0) / 0.05 - 1.0) < 0.2);
    CHECK(fit.emissions[0].mean(0) < fit.emissions[1].mean(0));
    CHECK(separation_check(fit).reliable);
    for (std::size_t k = 1; k < res.log_likelihood_trace.size(); ++k)
      CHECK(res.log_likelihood_trace[k] >= res.log_likelihood_trace[k - 1] - 1e-9 * std::abs(res.log_likelihood_trace[k - 1]));
  }

  TEST_CASE("EM steps never decrease the likelihood") {
    std::mt19937_64 gen(17);
    for (CovarianceKind kind : {CovarianceKind::Full, CovarianceKind::Diagonal}) {
      const auto data = sample_many(random_params(gen), 4, 300, gen());
      HmmParams p = random_params(gen);
      BaumWelchControls c;
      c.covariance = kind;
      double prev = log_likelihood(p, data);
      for (int it = 0; it < 25; ++it) {
        double before = 0.0;
        p = baum_welch_step(p, data, c, &before);
        CHECK(before == doctest::Approx(prev).epsilon(1e-12));
        CHECK_NOTHROW(p.validate());
        const double now = log_likelihood(p, data);
        CHECK(now >= prev - 1e-9 * std::abs(prev));
        prev = now;
      }
    }
  }

  TEST_CASE("likelihood is summed per sequence") {
    const HmmParams p = separated_truth();
    const auto data = sample_many(p, 3, 50, 4);
    double sum = 0.0;
    for (const auto& s : data) sum += log_likelihood(p, s);
    CHECK(log_likelihood(p, data, Exec::Serial) == doctest::Approx(sum).epsilon(1e-13));
    ObsSequence joined;
    for (const auto& s : data) joined.insert(joined.end(), s.begin(), s.end());
    CHECK(std::abs(log_likelihood(p, joined) - sum) > 1e-6);
  }

  TEST_CASE("k-means on two point masses") {
    std::vector<ObsSequence> seqs(2);
    for (int k = 0; k < 30; ++k) seqs[0].push_back(Obs(0.0, 0.0));
    for (int k = 0; k < 20; ++k) seqs[1].push_back(Obs(10.0, 10.0));
    const auto p = kmeans_init(seqs);
    CHECK(p.emissions[0].mean == Obs(0.0, 0.0));
    CHECK(p.emissions[1].mean == Obs(10.0, 10.0));
    CHECK(p.A == Eigen::Matrix2d::Constant(0.5));
    CHECK(p.pi[0] == doctest::Approx(0.5));
    // Single-point clusters have zero scatter; the floor keeps them SPD.
    for (const auto& e : p.emissions) {
      const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(e.cov);
      CHECK(es.eigenvalues().minCoeff() >= kCovarianceFloor * (1.0 - 1e-12));
    }
    CHECK_NOTHROW(p.validate());
  }

  TEST_CASE("k-means rejects identical data") {
    std::vector<ObsSequence> seqs{ObsSequence(10, Obs(1.0, 2.0))};
    CHECK_THROWS_AS(kmeans_init(seqs), InsufficientData);
  }

  TEST_CASE("covariance regularization") {
    Eigen::Matrix2d c;
    c << 1.0, 1.0, 1.0, 1.0;  // rank one
    const auto r = regularize_covariance(c, CovarianceKind::Full);
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(r);
    CHECK(es.eigenvalues().minCoeff() == doctest::Approx(kCovarianceFloor).epsilon(1e-6));
    const auto d = regularize_covariance(c, CovarianceKind::Diagonal);
    CHECK(d(0, 1) == 0.0);
    CHECK(d(1, 0) == 0.0);
  }

  TEST_CASE("parameter validation and canonical labels") {
    HmmParams p = separated_truth();
    CHECK_NOTHROW(p.validate());
    p.A(0, 1) = 0.5;
    CHECK_THROWS_AS(p.validate(), InvalidParameter);
    p = separated_truth();
    p.emissions[1].cov << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(p.validate(), InvalidParameter);

    p = separated_truth();
    HmmParams swapped = p;
    std::swap(swapped.emissions[0], swapped.emissions[1]);
    std::swap(swapped.pi[0], swapped.pi[1]);
    swapped.A << p.A(1, 1), p.A(1, 0), p.A(0, 1), p.A(0, 0);
    CHECK(swapped.canonicalize());
    CHECK_FALSE(p.canonicalize());
    CHECK(swapped.A.isApprox(p.A));
    CHECK(swapped.emissions[0].mean == p.emissions[0].mean);
  }

  TEST_CASE("overlapping components are flagged unreliable") {
    HmmParams p = separated_truth();
    p.emissions[1].mean = p.emissions[0].mean + Obs(0.1, 0.1);
    CHECK_FALSE(separation_check(p).reliable);
    CHECK(separation_check(separated_truth()).reliable);
  }

  TEST_CASE("run-length encoding round trip") {
    const std::vector<LcState> x{LcState::LC1, LcState::LC1, LcState::LC2, LcState::LC2, LcState::LC2,
                                 LcState::LC1};
    const auto runs = run_length_encode(x);
    REQUIRE(runs.size() == 3);
    CHECK(runs[0] == Run{0, 2, LcState::LC1});
    CHECK(runs[1] == Run{2, 3, LcState::LC2});
    CHECK(runs[2] == Run{5, 1, LcState::LC1});
    CHECK(run_length_decode(runs) == x);
    CHECK(run_length_encode(std::vector<LcState>{}).empty());
  }

  TEST_CASE("serial and parallel training agree bitwise") {
    const auto data = sample_many(separated_truth(), 6, 800, 31);
    const auto init = kmeans_init(data);
    BaumWelchControls s, q;
    s.exec = Exec::Serial;
    q.exec = Exec::Parallel;
    s.max_iter = q.max_iter = 20;
    const auto a = baum_welch(init, data, s);
    const auto b = baum_welch(init, data, q);
    CHECK(a.log_likelihood_trace == b.log_likelihood_trace);
    CHECK(a.params.A == b.params.A);
  }
}
