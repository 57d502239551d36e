#include <doctest.h>

#include <cmath>

#include "lcswitch/core_model.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/meanfield.hpp"
#include "oracles.hpp"

using namespace lcswitch;

namespace {
SystemParams base_with(double F, double g) {
  SystemParams p = working_point();
  p.F = F;
  p.g = g;
  return p;
}
}  // namespace

TEST_SUITE("core-model") {
  TEST_CASE("resolve_params scheme A") {
    ScalingPlan plan{1.0, Scheme::TheoryA, base_with(0.2, 0.35)};
    auto r = resolve_params(plan);
    CHECK(r.params.F == 0.2);
    CHECK(r.params.g == 0.35);
    CHECK(r.time_factor == 1.0);
    CHECK_FALSE(r.rescaled_time);

    plan.aleph = 4.0;
    r = resolve_params(plan);
    CHECK(r.params.F == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.params.g == doctest::Approx(0.175).epsilon(1e-15));
    CHECK(r.params.delta_a == plan.base.delta_a);
    CHECK(r.params.omega_b == plan.base.omega_b);
    CHECK(r.params.kappa_a == plan.base.kappa_a);
    CHECK(r.params.kappa_b == plan.base.kappa_b);
  }

  TEST_CASE("resolve_params scheme B") {
    ScalingPlan plan{4.0, Scheme::AdjointB, base_with(0.2, 0.35)};
    const auto r = resolve_params(plan);
    CHECK(r.params.delta_a == doctest::Approx(-1.4));
    CHECK(r.params.omega_b == doctest::Approx(2.0));
    CHECK(r.params.kappa_a == doctest::Approx(0.2));
    CHECK(r.params.kappa_b == doctest::Approx(0.02));
    CHECK(r.params.F == doctest::Approx(0.8));
    CHECK(r.params.g == 0.35);
    CHECK(r.time_factor == doctest::Approx(2.0));
    CHECK(r.rescaled_time);
  }

  TEST_CASE("resolve_params rejects non-positive aleph") {
    for (double a : {0.0, -1.0, std::nan("")}) {
      ScalingPlan plan{a, Scheme::TheoryA, working_point()};
      CHECK_THROWS_AS(resolve_params(plan), InvalidParameter);
    }
  }

  TEST_CASE("SystemParams and cutoff validation") {
    SystemParams p = working_point();
    p.kappa_a = 0.0;
    CHECK_THROWS_AS(p.validate(), InvalidParameter);
    p = working_point();
    p.omega_b = -1.0;
    CHECK_THROWS_AS(p.validate(), InvalidParameter);
    p = working_point();
    p.kappa_b = -0.1;
    CHECK_THROWS_AS(p.validate(), InvalidParameter);

    CHECK_THROWS_AS((FockCutoffs{0, 3}.validate()), InvalidParameter);
    CHECK_THROWS_AS((FockCutoffs{400, 400}.validate()), CapacityError);
    CHECK_NOTHROW((FockCutoffs{6, 0}.validate()));
    CHECK_THROWS_AS(build_hamiltonian(working_point(), FockCutoffs{400, 400}), CapacityError);
  }

  TEST_CASE("scheme parsing") {
    CHECK(parse_scheme("a") == Scheme::TheoryA);
    CHECK(parse_scheme("B") == Scheme::AdjointB);
    CHECK(parse_scheme("AdjointB") == Scheme::AdjointB);
    CHECK_THROWS_AS(parse_scheme("c"), InvalidParameter);
  }

  TEST_CASE("basis ordering is row-major with n_b fastest") {
    FockCutoffs c{3, 4};
    CHECK(c.dimension() == 20);
    CHECK(c.index(0, 1) == 1);
    CHECK(c.index(1, 0) == 5);
    for (std::size_t i = 0; i < c.dimension(); ++i) CHECK(c.index(c.n_a_of(i), c.n_b_of(i)) == i);
  }

  TEST_CASE("annihilation operators have sqrt(n) on the mode sub-diagonal") {
    FockCutoffs c{4, 3};
    const auto a = annihilation_a(c);
    const auto b = annihilation_b(c);
    for (int na = 1; na <= c.n_a_max; ++na)
      for (int nb = 0; nb <= c.n_b_max; ++nb)
        CHECK(a.element(c.index(na - 1, nb), c.index(na, nb)) == cplx(std::sqrt(na), 0.0));
    for (int na = 0; na <= c.n_a_max; ++na)
      for (int nb = 1; nb <= c.n_b_max; ++nb)
        CHECK(b.element(c.index(na, nb - 1), c.index(na, nb)) == cplx(std::sqrt(nb), 0.0));
    CHECK(a.nonzeros() == static_cast<std::size_t>(c.n_a_max * (c.n_b_max + 1)));
    CHECK(b.nonzeros() == static_cast<std::size_t>(c.n_b_max * (c.n_a_max + 1)));
  }

  TEST_CASE("commutator [a, a+] is the identity away from the cutoff") {
    FockCutoffs c{5, 2};
    const auto a = annihilation_a(c);
    const auto comm = a * a.adjoint() - a.adjoint() * a;
    for (std::size_t i = 0; i < c.dimension(); ++i) {
      if (c.n_a_of(i) >= c.n_a_max) continue;
      for (std::size_t j = 0; j < c.dimension(); ++j)
        CHECK(std::abs(comm.element(i, j) - cplx(i == j ? 1.0 : 0.0)) < 1e-12);
    }
    const auto b = annihilation_b(c);
    const auto commb = b * b.adjoint() - b.adjoint() * b;
    for (std::size_t i = 0; i < c.dimension(); ++i)
      if (c.n_b_of(i) < c.n_b_max) CHECK(std::abs(commb.element(i, i) - 1.0) < 1e-12);
  }

  TEST_CASE("Hamiltonian matrix elements") {
    FockCutoffs c{4, 4};
    SystemParams p = working_point();
    p.g = 0.0;
    p.F = 0.0;
    const auto h0 = build_hamiltonian(p, c);
    for (std::size_t i = 0; i < c.dimension(); ++i) {
      for (std::size_t j = 0; j < c.dimension(); ++j) {
        const cplx expected =
            i == j ? cplx(p.delta_a * c.n_a_of(i) + p.omega_b * c.n_b_of(i), 0.0) : cplx(0.0, 0.0);
        CHECK(std::abs(h0.element(i, j) - expected) < 1e-15);
      }
    }

    p = working_point();
    const auto h = build_hamiltonian(p, c);
    CHECK(h.is_hermitian(1e-12));
    CHECK(std::abs(h.element(c.index(1, 0), c.index(0, 0)) - cplx(p.F, 0.0)) < 1e-15);
    // <1,1| g a+a (b + b+) |1,0> = g.
    SystemParams only_g{};
    only_g.delta_a = 0.0;
    only_g.omega_b = 1.0;
    only_g.F = 0.0;
    only_g.g = 0.35;
    const auto hg = build_hamiltonian(only_g, c);
    CHECK(std::abs(hg.element(c.index(1, 1), c.index(1, 0)) - cplx(0.35, 0.0)) < 1e-15);
    CHECK(std::abs(hg.element(c.index(2, 1), c.index(2, 0)) - cplx(0.70, 0.0)) < 1e-15);
  }

  TEST_CASE("effective Hamiltonian") {
    FockCutoffs c{4, 4};
    SystemParams p = working_point();
    p.kappa_a = 0.0;
    p.kappa_b = 0.0;
    const auto heff0 = build_effective_hamiltonian(p, c);
    CHECK(heff0.is_hermitian(1e-12));

    p = working_point();
    const auto heff = build_effective_hamiltonian(p, c);
    const auto lam = build_position_damping(p, c);
    const auto h = build_hamiltonian(p, c);
    // <0,2|Lambda_b|0,0> = i (kappa_b / 4) sqrt 2.
    CHECK(std::abs(lam.element(c.index(0, 2), c.index(0, 0)) - cplx(0.0, p.kappa_b / 4.0 * std::sqrt(2.0))) < 1e-15);
    CHECK(lam.is_hermitian(1e-15));
    // Removing Lambda_b leaves an anti-Hermitian part with diagonal -(kappa_a n_a + kappa_b n_b) / 2.
    const auto rest = heff - lam;
    const auto anti = cplx(0.5, 0.0) * (rest - rest.adjoint());
    for (std::size_t i = 0; i < c.dimension(); ++i) {
      const double expected = -0.5 * (p.kappa_a * c.n_a_of(i) + p.kappa_b * c.n_b_of(i));
      CHECK(std::abs(anti.element(i, i) - cplx(0.0, expected)) < 1e-15);
      CHECK(std::abs(rest.element(i, i).real() - h.element(i, i).real()) < 1e-15);
    }
    // OperatorSet splits h_eff into its diagonal and the rest.
    const auto ops = OperatorSet::build(p, c);
    for (std::size_t i = 0; i < c.dimension(); ++i) {
      CHECK(ops.h_diag[i] == heff.element(i, i));
      CHECK(ops.h_off.element(i, i) == cplx{});
    }
  }

  TEST_CASE("expectation values") {
    FockCutoffs c{14, 2};
    const auto na = number_a(c);
    CHECK(std::abs(expectation(QuantumState::fock(c, 0, 0), na)) < 1e-15);
    CHECK(std::abs(expectation(QuantumState::fock(c, 2, 0), na) - 2.0) < 1e-14);

    const auto coh = QuantumState::coherent(c, cplx(1.0, 0.0), 0.0);
    CHECK(std::abs(coh.norm() - 1.0) < 1e-12);
    const cplx a = expectation(coh, annihilation_a(c));
    // Truncation tail at n = 14 for |alpha|^2 = 1 is far below 1e-6.
    CHECK(std::abs(a - cplx(1.0, 0.0)) < 1e-6);
    const cplx n = expectation(coh, na);
    CHECK(std::abs(n.imag()) < 1e-10);
    CHECK(n.real() == doctest::Approx(1.0).epsilon(1e-6));

    const auto h = build_hamiltonian(working_point(), c);
    const auto mixed = QuantumState::coherent(c, cplx(0.7, -0.4), cplx(0.2, 0.3));
    CHECK(std::abs(expectation(mixed, h).imag()) < 1e-10);
    CHECK_THROWS_AS(expectation(mixed, number_a(FockCutoffs{3, 3})), DimensionMismatch);
  }

  TEST_CASE("normalize rejects a zero state") {
    QuantumState s(FockCutoffs{2, 2});
    CHECK_THROWS_AS(s.normalize(), NumericalError);
  }

  TEST_CASE("scheme A leaves the tilde mean-field drift invariant") {
    const SystemParams base = working_point();
    const MeanFieldState tilde{cplx(0.8, -1.3), cplx(-0.4, 0.9)};
    const auto ref = meanfield_rhs(tilde, base);
    for (double aleph : {1.0, 4.0, 9.0}) {
      const auto r = resolve_params({aleph, Scheme::TheoryA, base});
      const double s = std::sqrt(aleph);
      const auto raw = meanfield_rhs({tilde.alpha * s, tilde.beta * s}, r.params);
      CHECK(std::abs(raw.alpha / s - ref.alpha) < 1e-14);
      CHECK(std::abs(raw.beta / s - ref.beta) < 1e-14);
    }
  }
}
