#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "lcswitch/errors.hpp"
#include "lcswitch/switching_stats.hpp"
#include "oracles.hpp"

using namespace lcswitch;

namespace {

constexpr LcState L1 = LcState::LC1;
constexpr LcState L2 = LcState::LC2;

std::vector<ScalingPoint> sample_points(const std::vector<double>& alephs, auto&& rate, double rel_sigma = 0.05) {
  std::vector<ScalingPoint> pts;
  for (double a : alephs) pts.push_back({a, rate(a), rel_sigma * rate(a)});
  return pts;
}

// Mixture built from fixed uniforms so that raising w only turns slow
// records into fast ones.
std::vector<Censored> coupled_mixture(double w, std::size_t n) {
  std::mt19937_64 gen(404);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Censored> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = u(gen), v = u(gen);
    out.push_back({-std::log1p(-v) / (pick < w ? 10.0 : 0.1), true});
  }
  return out;
}

}  // namespace

TEST_SUITE("switching-stats") {
  TEST_CASE("dwell extraction marks incident and censored runs") {
    const std::vector<LcState> labels{L1, L1, L2, L2, L2, L1};
    const auto d = extract_dwells(labels, 1.0, 7, 0.0);
    REQUIRE(d.size() == 3);
    CHECK_FALSE(d[0].incident());
    CHECK(d[1].state == L2);
    CHECK(d[1].duration == 3.0);
    CHECK(d[1].incident());
    CHECK(d[1].exit_observed);
    CHECK(d[1].start_time == 2.0);
    CHECK(d[2].state == L1);
    CHECK(d[2].duration == 1.0);
    CHECK(d[2].incident());
    CHECK_FALSE(d[2].exit_observed);
    CHECK(d[2].trajectory == 7);

    const auto lc2 = incident_durations(d, L2);
    REQUIRE(lc2.size() == 1);
    CHECK(lc2[0].duration == 3.0);
    CHECK(lc2[0].observed);
    const auto lc1 = incident_durations(d, L1);
    REQUIRE(lc1.size() == 1);
    CHECK_FALSE(lc1[0].observed);

    const std::vector<LcState> flat(12, L2);
    const auto c = extract_dwells(flat, 0.5);
    CHECK(incident_durations(c, L1).empty());
    CHECK(incident_durations(c, L2).empty());
    CHECK_THROWS(extract_dwells(std::vector<LcState>{}, 1.0));
  }

  TEST_CASE("dwells never cross trajectory boundaries") {
    std::vector<SegmentedTrajectory> seg(2);
    seg[0].index = 0;
    seg[0].dt_sample = 1.0;
    seg[0].states.labels = {L1, L2, L2};
    seg[1].index = 1;
    seg[1].dt_sample = 1.0;
    seg[1].states.labels = {L2, L2, L1};
    const auto d = extract_dwells(seg);
    REQUIRE(d.size() == 4);
    CHECK(d[1].duration == 2.0);
    CHECK(d[1].trajectory == 0);
    CHECK_FALSE(d[1].exit_observed);
    CHECK(d[2].trajectory == 1);
    CHECK_FALSE(d[2].entry_observed);
  }

  TEST_CASE("Kaplan-Meier examples") {
    const std::vector<Censored> data{{1.0, true}, {2.0, true}, {2.5, false}};
    const auto km = kaplan_meier(data);
    CHECK(km.at(0.5) == 1.0);
    CHECK(km.at(1.0) == 2.0 / 3.0);
    CHECK(km.at(2.0) == 1.0 / 3.0);
    CHECK(km.at(3.0) == 1.0 / 3.0);
    CHECK(km.at_risk == std::vector<std::size_t>{3, 2});
    CHECK(km.n_censored == 1);

    const std::vector<Censored> all_cens{{1.0, false}, {3.0, false}};
    const auto c = kaplan_meier(all_cens);
    CHECK(c.at(10.0) == 1.0);

    // Censoring in the middle: S = (1 - 1/4) * (1 - 1/2) by hand.
    const std::vector<Censored> mid{{1.0, true}, {2.0, false}, {3.0, true}, {4.0, true}};
    const auto m = kaplan_meier(mid);
    CHECK(m.at(1.0) == 3.0 / 4.0);
    CHECK(m.at(3.0) == 3.0 / 4.0 * (1.0 / 2.0));
    CHECK(m.at(4.0) == 0.0);
    CHECK_THROWS_AS(kaplan_meier(std::vector<Censored>{}), InsufficientData);
  }

  TEST_CASE("Kaplan-Meier without censoring is the ECDF complement") {
    std::mt19937_64 gen(8);
    auto data = oracle::censored_exponential(400, 0.3, 0.0, gen);
    // Rounding creates ties.
    for (auto& d : data) d.duration = std::ceil(d.duration * 4.0) / 4.0;
    const auto km = kaplan_meier(data);
    double prev = 1.0;
    for (std::size_t k = 0; k < km.times.size(); ++k) {
      const double t = km.times[k];
      const auto tail = std::count_if(data.begin(), data.end(), [&](const Censored& c) { return c.duration > t; });
      CHECK(km.survival[k] == static_cast<double>(tail) / 400.0);
      CHECK(km.survival[k] <= prev);
      prev = km.survival[k];
    }
  }

  TEST_CASE("conditional rate MLE examples") {
    const double t0 = 2.0;
    std::vector<Censored> d{{t0 + 1, true}, {t0 + 2, true}, {t0 + 3, true}};
    CHECK(conditional_rate_mle(d, t0) == doctest::Approx(0.5).epsilon(1e-15));
    d.push_back({t0 + 4, false});
    CHECK(conditional_rate_mle(d, t0) == doctest::Approx(0.3).epsilon(1e-15));
    // Records at or below t0 are ignored.
    d.push_back({t0, true});
    d.push_back({0.5, true});
    CHECK(conditional_rate_mle(d, t0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK_THROWS_AS(fit_conditional_rate(d, t0), InsufficientData);
  }

  TEST_CASE("conditional rate recovers a synthetic exponential") {
    std::mt19937_64 gen(12345);
    const auto data = oracle::censored_exponential(5000, 0.05, 0.0, gen);
    BootstrapControls b;
    b.seed = 3;
    const auto fit = fit_conditional_rate(data, 0.0, b);
    MESSAGE("k=" << fit.k << " ci=[" << fit.ci_low << ", " << fit.ci_high << "]");
    CHECK(std::abs(fit.k / 0.05 - 1.0) < 0.03);
    CHECK(fit.ci_low <= fit.k);
    CHECK(fit.k <= fit.ci_high);
    CHECK(fit.ci_low < 0.05);
    CHECK(0.05 < fit.ci_high);
    CHECK(fit.n_events == 5000);

    // Censoring lowers the event count but the MLE stays consistent.
    const auto cens = oracle::censored_exponential(5000, 0.05, 0.01, gen);
    const auto fc = fit_conditional_rate(cens, 0.0, b);
    CHECK(fc.n_censored > 0);
    CHECK(std::abs(fc.k / 0.05 - 1.0) < 0.05);
  }

  TEST_CASE("bootstrap is reproducible and independent of execution") {
    std::mt19937_64 gen(1);
    const auto data = oracle::censored_exponential(300, 0.2, 0.05, gen);
    BootstrapControls s, p;
    s.exec = Exec::Serial;
    p.exec = Exec::Parallel;
    s.seed = p.seed = 77;
    const auto a = fit_conditional_rate(data, 0.5, s);
    const auto b = fit_conditional_rate(data, 0.5, p);
    CHECK(a.ci_low == b.ci_low);
    CHECK(a.ci_high == b.ci_high);
  }

  TEST_CASE("t0 selection on a pure exponential takes the first candidate") {
    std::mt19937_64 gen(55);
    const auto data = oracle::censored_exponential(3000, 0.05, 0.0, gen);
    const auto sel = select_t0(data);
    CHECK(sel.candidate == 0);
    CHECK(sel.statistic < 3.0);
  }

  TEST_CASE("t0 selection cuts off a fast flicker component") {
    const auto data = coupled_mixture(0.5, 4000);
    const auto sel = select_t0(data);
    const double fast_mass_beyond = std::exp(-10.0 * sel.t0);
    MESSAGE("t0=" << sel.t0 << " fast mass beyond t0=" << fast_mass_beyond);
    CHECK(fast_mass_beyond <= 0.05);
    CHECK(std::abs(conditional_rate_mle(data, sel.t0) / 0.1 - 1.0) < 0.1);
  }

  TEST_CASE("selected t0 never decreases with the flicker weight") {
    double prev = 0.0;
    for (double w : {0.0, 0.1, 0.3, 0.5, 0.7, 0.85}) {
      const auto sel = select_t0(coupled_mixture(w, 4000));
      MESSAGE("w=" << w << " t0=" << sel.t0);
      CHECK(sel.t0 >= prev);
      prev = sel.t0;
    }
  }

  TEST_CASE("hazard split statistic is small for an exponential") {
    std::mt19937_64 gen(9);
    const auto data = oracle::censored_exponential(5000, 1.0, 0.0, gen);
    CHECK(std::abs(hazard_split_statistic(data, 0.0, 0.5)) < 4.0);
    const auto mix = coupled_mixture(0.5, 5000);
    CHECK(std::abs(hazard_split_statistic(mix, 0.0, 0.1)) > 10.0);
  }

  TEST_CASE("single-exponential scaling round trip") {
    const auto pts = sample_points({2, 3, 4, 5, 6, 7, 8, 9}, [](double a) { return 0.267 * std::exp(-0.178 * a); });
    const auto fit = fit_scaling(pts, ScalingForm::Single, "12");
    CHECK(std::abs(fit.A() - 0.267) < 1e-6);
    CHECK(std::abs(fit.S() - 0.178) < 1e-6);
    CHECK(fit.gradient_norm < 1e-8);
    CHECK(fit.direction == "12");
    for (double a : {1.0, 2.5, 7.0}) CHECK(effective_action(fit, a) == doctest::Approx(0.178).epsilon(1e-6));
    CHECK_THROWS(fit_scaling(std::span(pts).first(2), ScalingForm::Single));
  }

  TEST_CASE("biexponential scaling round trip") {
    auto k21 = [](double a) { return 0.180 * std::exp(-0.303 * a) + 2.454 * std::exp(-1.057 * a); };
    const auto pts = sample_points({2, 3, 4, 5, 6, 7, 8, 9}, k21);
    const auto fit = fit_scaling(pts, ScalingForm::Biexponential, "21");
    REQUIRE(fit.form == ScalingForm::Biexponential);
    REQUIRE_FALSE(fit.fell_back);
    const std::array<double, 4> truth{0.180, 0.303, 2.454, 1.057};
    for (std::size_t i = 0; i < 4; ++i) {
      MESSAGE("param " << i << " = " << fit.params[i]);
      CHECK(std::abs(fit.params[i] / truth[i] - 1.0) < 0.01);
    }
    CHECK(fit.gradient_norm < 1e-8);
    CHECK_THROWS(fit_scaling(std::span(pts).first(4), ScalingForm::Biexponential));
  }

  TEST_CASE("noisy fits are first-order optimal") {
    std::mt19937_64 gen(21);
    std::normal_distribution<double> z(0.0, 1.0);
    auto k21 = [](double a) { return 0.180 * std::exp(-0.303 * a) + 2.454 * std::exp(-1.057 * a); };
    std::vector<ScalingPoint> pts;
    for (double a = 2; a <= 9; a += 1) {
      const double k = k21(a), s = 0.04 * k;
      pts.push_back({a, k + s * z(gen), s});
    }
    for (ScalingForm f : {ScalingForm::Single, ScalingForm::Biexponential}) {
      const auto fit = fit_scaling(pts, f);
      MESSAGE(to_string(f) << " grad=" << fit.gradient_norm << " chi2=" << fit.chi2);
      CHECK(fit.gradient_norm < 1e-8);
      for (double s : fit.std_errors) CHECK(std::isfinite(s));
    }
  }

  TEST_CASE("degenerate biexponential falls back to the single form") {
    const auto pts = sample_points({2, 3, 4, 5, 6, 7, 8, 9}, [](double a) { return 0.5 * std::exp(-0.4 * a); });
    const auto fit = fit_scaling(pts, ScalingForm::Biexponential);
    CHECK(fit.fell_back);
    CHECK(fit.form == ScalingForm::Single);
    CHECK_FALSE(fit.warning.empty());
    CHECK(std::abs(fit.S() - 0.4) < 1e-6);
  }

  TEST_CASE("effective action of the biexponential") {
    ScalingFit fit;
    fit.form = ScalingForm::Biexponential;
    fit.params = {0.180, 0.303, 2.454, 1.057};
    auto logk = [&](double a) { return std::log(fit.rate(a)); };
    const double fd = -oracle::derivative(logk, 3.0, 1e-4);
    CHECK(std::abs(effective_action(fit, 3.0) / fd - 1.0) < 1e-6);
    CHECK(std::abs(effective_action(fit, 60.0) - 0.303) < 1e-6);
    double prev = INFINITY;
    for (double a = 0.0; a <= 20.0; a += 0.25) {
      const double s = effective_action(fit, a);
      CHECK(s < prev);
      prev = s;
    }
  }

  TEST_CASE("effective relaxation and occupations") {
    CHECK(effective_relaxation(0.1, 0.3) == doctest::Approx(0.4));
    CHECK(effective_relaxation(0.2, 0.2) == doctest::Approx(0.4));
    CHECK_THROWS_AS(effective_relaxation(0.0, 0.3), InvalidParameter);
    const auto [p1, p2] = stationary_occupations(0.1, 0.3);
    CHECK(p1 + p2 == doctest::Approx(1.0));
    CHECK(p1 / p2 == doctest::Approx(0.3 / 0.1));
  }
}
