#include <doctest.h>

#include <omp.h>

#include <stdexcept>

#include "lcswitch/hmm.hpp"
#include "lcswitch/meanfield.hpp"
#include "lcswitch/parallel.hpp"
#include "lcswitch/qjump.hpp"
#include "lcswitch/switching_stats.hpp"

using namespace lcswitch;

// The OpenMP path must reproduce the serial reference bit for bit at any
// thread count.
TEST_SUITE("parallel") {
  TEST_CASE("for_each_index rethrows the lowest failing index") {
    for (Exec e : {Exec::Serial, Exec::Parallel}) {
      try {
        for_each_index(e, 50, [](std::size_t i) {
          if (i == 17 || i == 31) throw std::runtime_error(std::to_string(i));
        });
        FAIL("expected an exception");
      } catch (const std::runtime_error& err) {
        CHECK(std::string(err.what()) == "17");
      }
    }
  }

  TEST_CASE("ensemble, segmentation and bootstrap agree across execution modes") {
    EnsembleSpec spec;
    spec.n_traj = 6;
    spec.t_transient = 20.0;
    spec.t_total_post = 200.0;
    spec.sample_dt = 1.0;
    const ScalingPlan plan{3.0, Scheme::TheoryA, working_point()};
    const FockCutoffs c{12, 20};
    const int threads = omp_get_max_threads();
    const auto serial = simulate_ensemble(spec, plan, c, 1234, Exec::Serial);
    for (int n : {1, 2, 3}) {
      omp_set_num_threads(n);
      CHECK(simulate_ensemble(spec, plan, c, 1234, Exec::Parallel) == serial);
    }
    omp_set_num_threads(threads);

    SegmentationControls sc;
    sc.baum_welch.max_iter = 15;
    sc.baum_welch.exec = Exec::Serial;
    const auto a = segment_ensemble(serial, sc);
    sc.baum_welch.exec = Exec::Parallel;
    const auto b = segment_ensemble(serial, sc);
    CHECK(a.training.log_likelihood_trace == b.training.log_likelihood_trace);
    REQUIRE(a.trajectories.size() == b.trajectories.size());
    for (std::size_t i = 0; i < a.trajectories.size(); ++i)
      CHECK(a.trajectories[i].states.labels == b.trajectories[i].states.labels);
  }

  TEST_CASE("phase scan agrees across execution modes") {
    ClassifyControls cc;
    cc.t_final_kappa = 100.0;
    cc.window_kappa = 10.0;
    const auto grid = initial_condition_grid(6);
    const SystemParams p = working_point();
    const auto s = phase_scan(p, {-0.8, -0.6, 2}, {0.1, 0.3, 2}, grid, cc, Exec::Serial);
    const auto q = phase_scan(p, {-0.8, -0.6, 2}, {0.1, 0.3, 2}, grid, cc, Exec::Parallel);
    REQUIRE(s.size() == 4);
    REQUIRE(q.size() == 4);
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s[i].label == q[i].label);
      CHECK(s[i].cluster_sizes == q[i].cluster_sizes);
      REQUIRE(s[i].attractors.size() == q[i].attractors.size());
      for (std::size_t k = 0; k < s[i].attractors.size(); ++k)
        CHECK(s[i].attractors[k].vector() == q[i].attractors[k].vector());
    }
  }

  TEST_CASE("scaling fit agrees across execution modes") {
    std::vector<ScalingPoint> pts;
    for (double a = 2; a <= 9; a += 1) {
      const double k = 0.18 * std::exp(-0.3 * a) + 2.4 * std::exp(-1.05 * a) * (1.0 + 0.01 * std::sin(7 * a));
      pts.push_back({a, k, 0.05 * k});
    }
    const auto s = fit_scaling(pts, ScalingForm::Biexponential, "21", Exec::Serial);
    const auto q = fit_scaling(pts, ScalingForm::Biexponential, "21", Exec::Parallel);
    CHECK(s.params == q.params);
    CHECK(s.chi2 == q.chi2);
  }
}
