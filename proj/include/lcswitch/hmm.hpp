#pragma once

// Two-state Gaussian-emission hidden Markov model: feature extraction,
// k-means initialization, joint Baum-Welch training over many sequences and
// Viterbi decoding into LC1/LC2 labels.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lcswitch/parallel.hpp"
#include "lcswitch/qjump.hpp"

namespace lcswitch {

enum class LcState : std::uint8_t { LC1 = 0, LC2 = 1 };

std::string to_string(LcState s);

using Obs = Eigen::Vector2d;
using ObsSequence = std::vector<Obs>;

/// Raw features (sqrt n~_a, sqrt n~_b) of the post-transient samples.
ObsSequence extract_features(const TrajectoryRecord& record);

/// Ensemble-global per-coordinate standardization.
struct Standardization {
  Obs mean = Obs::Zero();
  Obs scale = Obs::Ones();

  Obs apply(const Obs& x) const { return (x - mean).cwiseQuotient(scale); }
};

Standardization fit_standardization(std::span<const ObsSequence> sequences);
std::vector<ObsSequence> standardize(std::span<const ObsSequence> sequences, const Standardization& s);

enum class CovarianceKind { Full, Diagonal };

std::string to_string(CovarianceKind k);
CovarianceKind parse_covariance(const std::string& s);

inline constexpr double kCovarianceFloor = 1e-8;

struct GaussianEmission {
  Obs mean = Obs::Zero();
  Eigen::Matrix2d cov = Eigen::Matrix2d::Identity();

  double log_pdf(const Obs& x) const;
};

struct HmmParams {
  std::array<double, 2> pi{0.5, 0.5};
  Eigen::Matrix2d A = Eigen::Matrix2d::Constant(0.5);
  std::array<GaussianEmission, 2> emissions{};

  /// Throws InvalidParameter if rows of A or pi do not sum to one within
  /// 1e-10, or a covariance is not symmetric positive definite.
  void validate() const;
  /// Swaps the components so that LC1 has the smaller mean in x1.
  /// Returns true when a swap happened.
  bool canonicalize();
};

/// Clamps eigenvalues to `floor` and symmetrizes; zeroes the off-diagonal for
/// the diagonal parameterization.
Eigen::Matrix2d regularize_covariance(const Eigen::Matrix2d& cov, CovarianceKind kind,
                                      double floor = kCovarianceFloor);

struct KMeansControls {
  std::size_t restarts = 20;
  std::size_t max_iter = 300;
  std::uint64_t seed = 0;
  CovarianceKind covariance = CovarianceKind::Full;
};

struct KMeansResult {
  std::array<Obs, 2> centers;
  std::vector<std::uint8_t> assignment;  ///< over the concatenated observations
  double inertia = 0.0;
};

/// Best-of-restarts two-cluster k-means (k-means++ seeding) on raw points.
/// Throws InsufficientData when fewer than two distinct points exist.
KMeansResult kmeans2(std::span<const Obs> points, const KMeansControls& controls);

/// Emission parameters from the two clusters, uniform A, pi from the
/// cluster of each sequence's first observation.
HmmParams kmeans_init(std::span<const ObsSequence> sequences, const KMeansControls& controls = {});

struct BaumWelchControls {
  double rel_tol = 1e-7;
  std::size_t max_iter = 500;
  CovarianceKind covariance = CovarianceKind::Full;
  double cov_floor = kCovarianceFloor;
  Exec exec = Exec::Parallel;
};

struct TrainingResult {
  HmmParams params;
  std::vector<double> log_likelihood_trace;  ///< entry k: likelihood under the parameters after k updates
  std::size_t iterations = 0;
  bool converged = false;
};

/// Summed log-likelihood of all sequences (scaled forward pass).
double log_likelihood(const HmmParams& params, std::span<const ObsSequence> sequences, Exec exec = Exec::Parallel);
double log_likelihood(const HmmParams& params, const ObsSequence& sequence);

/// One EM update (exposed for testing monotonicity).
HmmParams baum_welch_step(const HmmParams& params, std::span<const ObsSequence> sequences,
                          const BaumWelchControls& controls, double* log_likelihood_before = nullptr);

/// EM until relative improvement < rel_tol or max_iter. Throws
/// NumericalError naming the iteration on a non-finite likelihood.
TrainingResult baum_welch(const HmmParams& params0, std::span<const ObsSequence> sequences,
                          const BaumWelchControls& controls = {});

struct StateSequence {
  std::vector<LcState> labels;
  double log_likelihood = 0.0;  ///< log probability of the decoded path jointly with the data
};

/// Max-likelihood path in log space. Ties go to LC1.
StateSequence viterbi(const HmmParams& params, const ObsSequence& sequence);

struct SeparationCheck {
  double mahalanobis = 0.0;  ///< mean distance under the pooled covariance
  bool reliable = true;      ///< false when the components overlap within one pooled SD
};

SeparationCheck separation_check(const HmmParams& params);

struct Run {
  std::size_t start = 0;
  std::size_t length = 0;
  LcState state = LcState::LC1;

  bool operator==(const Run&) const = default;
};

std::vector<Run> run_length_encode(std::span<const LcState> labels);
std::vector<LcState> run_length_decode(std::span<const Run> runs);

/// Decoded labels of one trajectory plus where they start in the record.
struct SegmentedTrajectory {
  std::uint64_t index = 0;
  std::size_t first_sample = 0;  ///< record index of labels[0]
  double dt_sample = 0.0;
  StateSequence states;
};

struct SegmentationResult {
  Standardization standardization;
  TrainingResult training;
  SeparationCheck separation;
  std::vector<SegmentedTrajectory> trajectories;
};

struct SegmentationControls {
  KMeansControls kmeans{};
  BaumWelchControls baum_welch{};
};

/// Features, global standardization, k-means init, joint training and
/// per-trajectory decoding.
SegmentationResult segment_ensemble(std::span<const TrajectoryRecord> records,
                                    const SegmentationControls& controls = {});

}  // namespace lcswitch
