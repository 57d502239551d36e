#pragma once

// Physical parameters, the quantum-to-classical scaling manifold, the
// truncated two-mode Fock space, and the sparse operators acting on it.

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace lcswitch {

using cplx = std::complex<double>;

/// Rotating-frame constants of the optomechanical Hamiltonian plus the two
/// Lindblad decay rates. Frequencies and rates share one unit.
struct SystemParams {
  double delta_a = -0.7;  ///< optical detuning
  double omega_b = 1.0;   ///< mechanical frequency
  double g = 0.35;        ///< single-photon optomechanical coupling
  double F = 0.2;         ///< coherent drive amplitude
  double kappa_a = 0.1;   ///< optical decay rate
  double kappa_b = 0.01;  ///< mechanical decay rate

  /// Throws InvalidParameter unless kappa_a > 0, kappa_b >= 0, omega_b > 0
  /// and every field is finite. `allow_closed` also admits kappa_a = 0,
  /// which operator construction tolerates (closed-system checks).
  void validate(bool allow_closed = false) const;

  bool operator==(const SystemParams&) const = default;
};

/// The working point used throughout (tilde quantities at aleph = 1).
SystemParams working_point() noexcept;

enum class Scheme {
  TheoryA,   ///< F = sqrt(aleph) F~, g = g~ / sqrt(aleph)
  AdjointB,  ///< fixed g; frequencies and rates * sqrt(aleph), F * aleph, t' = sqrt(aleph) t
};

std::string to_string(Scheme s);
/// Accepts "a"/"b" and "TheoryA"/"AdjointB" (case-insensitive).
Scheme parse_scheme(const std::string& s);

struct ScalingPlan {
  double aleph = 1.0;
  Scheme scheme = Scheme::TheoryA;
  SystemParams base = working_point();
};

/// Output of resolve_params. For the adjoint scheme all reported times are
/// the rescaled t' = time_factor * t.
struct ResolvedParams {
  SystemParams params;
  double time_factor = 1.0;
  bool rescaled_time = false;
};

ResolvedParams resolve_params(const ScalingPlan& plan);

/// Fock-space truncation per mode. Basis order is row-major over
/// (n_a, n_b) with n_b fastest.
struct FockCutoffs {
  int n_a_max = 1;
  int n_b_max = 1;

  static constexpr std::size_t kDefaultDimensionLimit = 1u << 16;

  std::size_t dimension() const noexcept {
    return static_cast<std::size_t>(n_a_max + 1) * static_cast<std::size_t>(n_b_max + 1);
  }
  std::size_t index(int n_a, int n_b) const noexcept {
    return static_cast<std::size_t>(n_a) * static_cast<std::size_t>(n_b_max + 1) +
           static_cast<std::size_t>(n_b);
  }
  int n_a_of(std::size_t i) const noexcept { return static_cast<int>(i / (n_b_max + 1)); }
  int n_b_of(std::size_t i) const noexcept { return static_cast<int>(i % (n_b_max + 1)); }

  /// Throws InvalidParameter for cutoffs < 1 (n_b_max = 0 is accepted to
  /// freeze the mechanical mode) and CapacityError above `limit`.
  void validate(std::size_t limit = kDefaultDimensionLimit) const;

  bool operator==(const FockCutoffs&) const = default;
};

/// Compressed-sparse-row complex matrix on the product basis.
class OperatorMatrix {
 public:
  struct Entry {
    std::size_t row;
    std::size_t col;
    cplx value;
  };

  OperatorMatrix() = default;

  /// Duplicate (row, col) pairs are summed; exact zeros are dropped.
  static OperatorMatrix from_entries(std::size_t dim, std::vector<Entry> entries);
  static OperatorMatrix identity(std::size_t dim);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t nonzeros() const noexcept { return values_.size(); }

  /// y = M x. Spans must both have length dim().
  void apply(std::span<const cplx> x, std::span<cplx> y) const;

  cplx element(std::size_t row, std::size_t col) const;

  OperatorMatrix adjoint() const;
  bool is_hermitian(double tol = 1e-12) const;
  /// Infinity norm; an upper bound on the spectral radius.
  double max_abs_row_sum() const;

  friend OperatorMatrix operator+(const OperatorMatrix& lhs, const OperatorMatrix& rhs);
  friend OperatorMatrix operator-(const OperatorMatrix& lhs, const OperatorMatrix& rhs);
  friend OperatorMatrix operator*(cplx s, const OperatorMatrix& m);
  friend OperatorMatrix operator*(const OperatorMatrix& lhs, const OperatorMatrix& rhs);

  std::vector<Entry> entries() const;

 private:
  std::size_t dim_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<std::size_t> cols_;
  std::vector<cplx> values_;
};

/// State vector over the product basis.
class QuantumState {
 public:
  QuantumState() = default;
  explicit QuantumState(FockCutoffs cutoffs);
  QuantumState(FockCutoffs cutoffs, std::vector<cplx> amplitudes);

  /// Truncated product coherent state |alpha> (x) |beta>, renormalized.
  static QuantumState coherent(FockCutoffs cutoffs, cplx alpha, cplx beta);
  static QuantumState fock(FockCutoffs cutoffs, int n_a, int n_b);

  const FockCutoffs& cutoffs() const noexcept { return cutoffs_; }
  std::span<const cplx> amplitudes() const noexcept { return amplitudes_; }
  std::span<cplx> amplitudes() noexcept { return amplitudes_; }

  double norm_squared() const noexcept;
  double norm() const noexcept;
  /// Throws NumericalError on a zero or non-finite norm.
  void normalize();

 private:
  FockCutoffs cutoffs_{};
  std::vector<cplx> amplitudes_;
};

OperatorMatrix annihilation_a(const FockCutoffs& c);
OperatorMatrix annihilation_b(const FockCutoffs& c);
OperatorMatrix number_a(const FockCutoffs& c);
OperatorMatrix number_b(const FockCutoffs& c);

/// H/hbar = Da a+a + wb b+b + g a+a (b + b+) + F (a + a+).
OperatorMatrix build_hamiltonian(const SystemParams& p, const FockCutoffs& c);
/// Position-damping term i (kappa_b / 4)(b+^2 - b^2).
OperatorMatrix build_position_damping(const SystemParams& p, const FockCutoffs& c);
/// H + Lambda_b - (i/2)(kappa_a a+a + kappa_b b+b).
OperatorMatrix build_effective_hamiltonian(const SystemParams& p, const FockCutoffs& c);

/// <psi|O|psi> for a normalized state.
cplx expectation(const QuantumState& state, const OperatorMatrix& op);

/// Every operator a trajectory needs, built once per (params, cutoffs) and
/// shared read-only by all workers of an ensemble.
struct OperatorSet {
  SystemParams params;
  FockCutoffs cutoffs;
  OperatorMatrix h_eff;
  std::vector<cplx> h_diag;  ///< diagonal of h_eff
  OperatorMatrix h_off;      ///< h_eff with the diagonal removed
  OperatorMatrix a;
  OperatorMatrix b;
  std::vector<double> n_a_diag;  ///< diagonal of a+a
  std::vector<double> n_b_diag;  ///< diagonal of b+b

  static OperatorSet build(const SystemParams& p, const FockCutoffs& c,
                           std::size_t dimension_limit = FockCutoffs::kDefaultDimensionLimit);
};

}  // namespace lcswitch
