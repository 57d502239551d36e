#include "lcswitch/core_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "lcswitch/errors.hpp"

namespace lcswitch {

namespace {

constexpr cplx kI{0.0, 1.0};

bool finite(double x) { return std::isfinite(x); }

}  // namespace

void SystemParams::validate(bool allow_closed) const {
  for (double v : {delta_a, omega_b, g, F, kappa_a, kappa_b}) {
    if (!finite(v)) throw InvalidParameter("system parameters must be finite");
  }
  if (allow_closed ? kappa_a < 0.0 : !(kappa_a > 0.0))
    throw InvalidParameter(allow_closed ? "kappa_a must be >= 0" : "kappa_a must be > 0");
  if (kappa_b < 0.0) throw InvalidParameter("kappa_b must be >= 0");
  if (!(omega_b > 0.0)) throw InvalidParameter("omega_b must be > 0");
}

SystemParams working_point() noexcept { return SystemParams{}; }

std::string to_string(Scheme s) { return s == Scheme::TheoryA ? "a" : "b"; }

Scheme parse_scheme(const std::string& s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "a" || lower == "theorya") return Scheme::TheoryA;
  if (lower == "b" || lower == "adjointb") return Scheme::AdjointB;
  throw InvalidParameter("unknown scaling scheme '" + s + "' (expected a or b)");
}

ResolvedParams resolve_params(const ScalingPlan& plan) {
  if (!(plan.aleph > 0.0) || !finite(plan.aleph)) {
    throw InvalidParameter("aleph must be a positive finite number");
  }
  plan.base.validate();
  const double root = std::sqrt(plan.aleph);
  ResolvedParams out;
  out.params = plan.base;
  if (plan.scheme == Scheme::TheoryA) {
    out.params.F = root * plan.base.F;
    out.params.g = plan.base.g / root;
  } else {
    out.params.delta_a = root * plan.base.delta_a;
    out.params.omega_b = root * plan.base.omega_b;
    out.params.kappa_a = root * plan.base.kappa_a;
    out.params.kappa_b = root * plan.base.kappa_b;
    out.params.F = plan.aleph * plan.base.F;
    out.time_factor = root;
    out.rescaled_time = true;
  }
  return out;
}

void FockCutoffs::validate(std::size_t limit) const {
  if (n_a_max < 1 || n_b_max < 0) {
    throw InvalidParameter("Fock cutoffs must satisfy n_a_max >= 1 and n_b_max >= 0");
  }
  if (dimension() > limit) {
    throw CapacityError("Hilbert-space dimension " + std::to_string(dimension()) +
                        " exceeds the configured limit " + std::to_string(limit));
  }
}

// ---------------------------------------------------------------------------
// OperatorMatrix

OperatorMatrix OperatorMatrix::from_entries(std::size_t dim, std::vector<Entry> entries) {
  std::sort(entries.begin(), entries.end(), [](const Entry& l, const Entry& r) {
    return l.row != r.row ? l.row < r.row : l.col < r.col;
  });
  OperatorMatrix m;
  m.dim_ = dim;
  m.row_ptr_.assign(dim + 1, 0);
  for (std::size_t k = 0; k < entries.size();) {
    const Entry& e = entries[k];
    if (e.row >= dim || e.col >= dim) throw DimensionMismatch("operator entry out of range");
    cplx sum = 0.0;
    std::size_t j = k;
    while (j < entries.size() && entries[j].row == e.row && entries[j].col == e.col) {
      sum += entries[j].value;
      ++j;
    }
    if (sum != cplx(0.0)) {
      m.cols_.push_back(e.col);
      m.values_.push_back(sum);
      ++m.row_ptr_[e.row + 1];
    }
    k = j;
  }
  std::partial_sum(m.row_ptr_.begin(), m.row_ptr_.end(), m.row_ptr_.begin());
  return m;
}

OperatorMatrix OperatorMatrix::identity(std::size_t dim) {
  std::vector<Entry> e;
  e.reserve(dim);
  for (std::size_t i = 0; i < dim; ++i) e.push_back({i, i, 1.0});
  return from_entries(dim, std::move(e));
}

void OperatorMatrix::apply(std::span<const cplx> x, std::span<cplx> y) const {
  if (x.size() != dim_ || y.size() != dim_) {
    throw DimensionMismatch("operator/vector dimension mismatch");
  }
  for (std::size_t r = 0; r < dim_; ++r) {
    cplx acc = 0.0;
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) acc += values_[k] * x[cols_[k]];
    y[r] = acc;
  }
}

cplx OperatorMatrix::element(std::size_t row, std::size_t col) const {
  if (row >= dim_ || col >= dim_) throw DimensionMismatch("element index out of range");
  const auto first = cols_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[row]);
  const auto last = cols_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[row + 1]);
  const auto it = std::lower_bound(first, last, col);
  if (it == last || *it != col) return 0.0;
  return values_[static_cast<std::size_t>(it - cols_.begin())];
}

std::vector<OperatorMatrix::Entry> OperatorMatrix::entries() const {
  std::vector<Entry> out;
  out.reserve(values_.size());
  for (std::size_t r = 0; r < dim_; ++r) {
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      out.push_back({r, cols_[k], values_[k]});
    }
  }
  return out;
}

OperatorMatrix OperatorMatrix::adjoint() const {
  auto e = entries();
  for (auto& x : e) {
    std::swap(x.row, x.col);
    x.value = std::conj(x.value);
  }
  return from_entries(dim_, std::move(e));
}

bool OperatorMatrix::is_hermitian(double tol) const {
  const OperatorMatrix diff = *this - adjoint();
  return std::all_of(diff.values_.begin(), diff.values_.end(),
                     [tol](cplx v) { return std::abs(v) <= tol; });
}

double OperatorMatrix::max_abs_row_sum() const {
  double best = 0.0;
  for (std::size_t r = 0; r < dim_; ++r) {
    double s = 0.0;
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) s += std::abs(values_[k]);
    best = std::max(best, s);
  }
  return best;
}

OperatorMatrix operator+(const OperatorMatrix& lhs, const OperatorMatrix& rhs) {
  if (lhs.dim_ != rhs.dim_) throw DimensionMismatch("operator sum dimension mismatch");
  auto e = lhs.entries();
  auto r = rhs.entries();
  e.insert(e.end(), r.begin(), r.end());
  return OperatorMatrix::from_entries(lhs.dim_, std::move(e));
}

OperatorMatrix operator-(const OperatorMatrix& lhs, const OperatorMatrix& rhs) {
  return lhs + cplx(-1.0) * rhs;
}

OperatorMatrix operator*(cplx s, const OperatorMatrix& m) {
  auto e = m.entries();
  for (auto& x : e) x.value *= s;
  return OperatorMatrix::from_entries(m.dim_, std::move(e));
}

OperatorMatrix operator*(const OperatorMatrix& lhs, const OperatorMatrix& rhs) {
  if (lhs.dim_ != rhs.dim_) throw DimensionMismatch("operator product dimension mismatch");
  std::vector<OperatorMatrix::Entry> e;
  for (std::size_t r = 0; r < lhs.dim_; ++r) {
    for (std::size_t k = lhs.row_ptr_[r]; k < lhs.row_ptr_[r + 1]; ++k) {
      const std::size_t mid = lhs.cols_[k];
      for (std::size_t q = rhs.row_ptr_[mid]; q < rhs.row_ptr_[mid + 1]; ++q) {
        e.push_back({r, rhs.cols_[q], lhs.values_[k] * rhs.values_[q]});
      }
    }
  }
  return OperatorMatrix::from_entries(lhs.dim_, std::move(e));
}

// ---------------------------------------------------------------------------
// QuantumState

QuantumState::QuantumState(FockCutoffs cutoffs)
    : cutoffs_(cutoffs), amplitudes_(cutoffs.dimension(), cplx(0.0)) {}

QuantumState::QuantumState(FockCutoffs cutoffs, std::vector<cplx> amplitudes)
    : cutoffs_(cutoffs), amplitudes_(std::move(amplitudes)) {
  if (amplitudes_.size() != cutoffs_.dimension()) {
    throw DimensionMismatch("amplitude vector does not match the Fock cutoffs");
  }
  for (cplx v : amplitudes_) {
    if (!finite(v.real()) || !finite(v.imag())) throw NumericalError("non-finite amplitude");
  }
}

namespace {

// Coherent-state coefficients e^{-|z|^2/2} z^n / sqrt(n!) for n = 0..n_max,
// generated by the stable recursion c_n = c_{n-1} z / sqrt(n).
std::vector<cplx> coherent_coefficients(cplx z, int n_max) {
  std::vector<cplx> c(static_cast<std::size_t>(n_max) + 1);
  c[0] = std::exp(-0.5 * std::norm(z));
  for (int n = 1; n <= n_max; ++n) c[n] = c[n - 1] * z / std::sqrt(static_cast<double>(n));
  return c;
}

}  // namespace

QuantumState QuantumState::coherent(FockCutoffs cutoffs, cplx alpha, cplx beta) {
  cutoffs.validate(std::numeric_limits<std::size_t>::max());
  const auto ca = coherent_coefficients(alpha, cutoffs.n_a_max);
  const auto cb = coherent_coefficients(beta, cutoffs.n_b_max);
  QuantumState s(cutoffs);
  for (int na = 0; na <= cutoffs.n_a_max; ++na) {
    for (int nb = 0; nb <= cutoffs.n_b_max; ++nb) s.amplitudes_[cutoffs.index(na, nb)] = ca[na] * cb[nb];
  }
  s.normalize();
  return s;
}

QuantumState QuantumState::fock(FockCutoffs cutoffs, int n_a, int n_b) {
  if (n_a < 0 || n_b < 0 || n_a > cutoffs.n_a_max || n_b > cutoffs.n_b_max) {
    throw InvalidParameter("Fock occupation outside the truncated basis");
  }
  QuantumState s(cutoffs);
  s.amplitudes_[cutoffs.index(n_a, n_b)] = 1.0;
  return s;
}

double QuantumState::norm_squared() const noexcept {
  double s = 0.0;
  for (cplx v : amplitudes_) s += std::norm(v);
  return s;
}

double QuantumState::norm() const noexcept { return std::sqrt(norm_squared()); }

void QuantumState::normalize() {
  const double n = norm();
  if (!(n > 0.0) || !finite(n)) throw NumericalError("cannot normalize a zero or non-finite state");
  const double inv = 1.0 / n;
  for (cplx& v : amplitudes_) v *= inv;
}

// ---------------------------------------------------------------------------
// Operators

OperatorMatrix annihilation_a(const FockCutoffs& c) {
  std::vector<OperatorMatrix::Entry> e;
  for (int na = 1; na <= c.n_a_max; ++na) {
    for (int nb = 0; nb <= c.n_b_max; ++nb) {
      e.push_back({c.index(na - 1, nb), c.index(na, nb), std::sqrt(static_cast<double>(na))});
    }
  }
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix annihilation_b(const FockCutoffs& c) {
  std::vector<OperatorMatrix::Entry> e;
  for (int na = 0; na <= c.n_a_max; ++na) {
    for (int nb = 1; nb <= c.n_b_max; ++nb) {
      e.push_back({c.index(na, nb - 1), c.index(na, nb), std::sqrt(static_cast<double>(nb))});
    }
  }
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix number_a(const FockCutoffs& c) {
  std::vector<OperatorMatrix::Entry> e;
  for (std::size_t i = 0; i < c.dimension(); ++i) e.push_back({i, i, static_cast<double>(c.n_a_of(i))});
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix number_b(const FockCutoffs& c) {
  std::vector<OperatorMatrix::Entry> e;
  for (std::size_t i = 0; i < c.dimension(); ++i) e.push_back({i, i, static_cast<double>(c.n_b_of(i))});
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix build_hamiltonian(const SystemParams& p, const FockCutoffs& c) {
  c.validate();
  std::vector<OperatorMatrix::Entry> e;
  e.reserve(5 * c.dimension());
  for (int na = 0; na <= c.n_a_max; ++na) {
    for (int nb = 0; nb <= c.n_b_max; ++nb) {
      const std::size_t i = c.index(na, nb);
      e.push_back({i, i, p.delta_a * na + p.omega_b * nb});
      // g n_a (b + b+): <na, nb-1| b |na, nb> = sqrt(nb)
      if (nb > 0) {
        const double v = p.g * na * std::sqrt(static_cast<double>(nb));
        e.push_back({c.index(na, nb - 1), i, v});
        e.push_back({i, c.index(na, nb - 1), v});
      }
      // F (a + a+)
      if (na > 0) {
        const double v = p.F * std::sqrt(static_cast<double>(na));
        e.push_back({c.index(na - 1, nb), i, v});
        e.push_back({i, c.index(na - 1, nb), v});
      }
    }
  }
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix build_position_damping(const SystemParams& p, const FockCutoffs& c) {
  c.validate();
  std::vector<OperatorMatrix::Entry> e;
  const cplx pref = kI * (p.kappa_b / 4.0);
  for (int na = 0; na <= c.n_a_max; ++na) {
    for (int nb = 0; nb + 2 <= c.n_b_max; ++nb) {
      const double v = std::sqrt(static_cast<double>((nb + 1) * (nb + 2)));
      // b+^2 |nb> = sqrt((nb+1)(nb+2)) |nb+2>,  -b^2 |nb+2> = -sqrt(...) |nb>
      e.push_back({c.index(na, nb + 2), c.index(na, nb), pref * v});
      e.push_back({c.index(na, nb), c.index(na, nb + 2), -pref * v});
    }
  }
  return OperatorMatrix::from_entries(c.dimension(), std::move(e));
}

OperatorMatrix build_effective_hamiltonian(const SystemParams& p, const FockCutoffs& c) {
  std::vector<OperatorMatrix::Entry> decay;
  for (std::size_t i = 0; i < c.dimension(); ++i) {
    decay.push_back({i, i, -0.5 * kI * (p.kappa_a * c.n_a_of(i) + p.kappa_b * c.n_b_of(i))});
  }
  return build_hamiltonian(p, c) + build_position_damping(p, c) +
         OperatorMatrix::from_entries(c.dimension(), std::move(decay));
}

cplx expectation(const QuantumState& state, const OperatorMatrix& op) {
  const auto psi = state.amplitudes();
  if (psi.size() != op.dim()) throw DimensionMismatch("state/operator dimension mismatch");
  std::vector<cplx> tmp(psi.size());
  op.apply(psi, tmp);
  cplx acc = 0.0;
  for (std::size_t i = 0; i < psi.size(); ++i) acc += std::conj(psi[i]) * tmp[i];
  return acc;
}

OperatorSet OperatorSet::build(const SystemParams& p, const FockCutoffs& c,
                               std::size_t dimension_limit) {
  p.validate(/*allow_closed=*/true);
  c.validate(dimension_limit);
  OperatorSet s;
  s.params = p;
  s.cutoffs = c;
  s.h_eff = build_effective_hamiltonian(p, c);
  s.h_diag.assign(c.dimension(), cplx{});
  {
    auto entries = s.h_eff.entries();
    std::vector<OperatorMatrix::Entry> off;
    off.reserve(entries.size());
    for (const auto& e : entries) {
      if (e.row == e.col) s.h_diag[e.row] = e.value;
      else off.push_back(e);
    }
    s.h_off = OperatorMatrix::from_entries(c.dimension(), std::move(off));
  }
  s.a = annihilation_a(c);
  s.b = annihilation_b(c);
  s.n_a_diag.resize(c.dimension());
  s.n_b_diag.resize(c.dimension());
  for (std::size_t i = 0; i < c.dimension(); ++i) {
    s.n_a_diag[i] = c.n_a_of(i);
    s.n_b_diag[i] = c.n_b_of(i);
  }
  return s;
}

}  // namespace lcswitch
