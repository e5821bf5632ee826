#pragma once

#include "diracsea/lattice.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace diracsea {

/// Ascending energies with orthonormal eigenvectors in the columns of `states`.
struct EigenSystem {
  Eigen::VectorXd energies;
  Eigen::MatrixXcd states;
  double source_lambda = 0.0;

  Index size() const { return energies.size(); }
  /// max |S^dagger S - I|
  double orthonormality_defect() const;
  /// max_i |H v_i - E_i v_i|
  double residual(const HermitianOperator& h) const;
};

/// Full dense decomposition. Throws NumericalError when the solver fails.
EigenSystem diagonalize(const HermitianOperator& h, double source_lambda = 0.0);
EigenSystem diagonalize(const Eigen::MatrixXcd& h, double source_lambda = 0.0);
/// Energies only (cheaper).
Eigen::VectorXd eigenvalues(const HermitianOperator& h);

/// sum_i |v_i|^4 of a normalized state; throws std::invalid_argument otherwise.
double ipr(const Eigen::Ref<const Eigen::VectorXcd>& state);

enum class StateLabel { NegativeContinuum, Bound, PositiveContinuum, DivedBound };
std::string to_string(StateLabel label);

struct StateClassification {
  std::vector<StateLabel> labels;
  std::vector<double> ipr;
  double ipr_threshold = 0.0;
  double median_continuum_ipr = 0.0;
  /// Set when some gap state is less than 5x as localized as the median
  /// continuum state, so the bound/dived split is not trustworthy.
  bool low_confidence = false;

  Index count(StateLabel label) const;
};

/// Relative window used to decide that an energy sits on a band edge +-M.
inline constexpr double kEdgeTolerance = 1e-9;

/// Bound iff |E| < M; DivedBound iff -M > E >= bottom of the free lower
/// band and IPR above the threshold.
/// Without an explicit threshold the adaptive default is 5x the median IPR
/// of the continuum states of the same snapshot.
StateClassification classify_states(const EigenSystem& es, const LatticeSpec& spec,
                                    std::optional<double> ipr_threshold = std::nullopt);
/// Same rule from precomputed energies and IPRs (e.g. those kept by a flow).
StateClassification classify_levels(const Eigen::VectorXd& energies, const Eigen::VectorXd& iprs, const LatticeSpec& spec,
                                    std::optional<double> ipr_threshold = std::nullopt);

/// A lambda -> H(lambda) map. Lattice families come from HamiltonianFamily;
/// tests also plug in small analytic models.
using OperatorFamily = std::function<HermitianOperator(double)>;

OperatorFamily lattice_family(const LatticeSpec& spec, const GaussianPotential& pot);

struct FlowOptions {
  /// Overlap weight below which a match is ambiguous.
  double ambiguity_threshold = 0.5;
  /// Bisection depth for resolving ambiguous steps before flagging a break.
  int max_refinement_depth = 6;
  /// Relative energy window for treating levels as one degenerate cluster.
  double degeneracy_tolerance = 1e-8;
  bool keep_iprs = true;
};

/// One continued eigenvalue branch; level[k] is the ascending index of the
/// branch at lambda_grid[k].
struct Branch {
  int id = 0;
  std::vector<Index> level;
  std::vector<double> energy;
  /// Grid points k where the continuation from k-1 was ambiguous.
  std::vector<std::size_t> breaks;
};

struct SpectralFlow {
  std::vector<double> lambda_grid;
  std::vector<Eigen::VectorXd> energies;
  std::vector<Eigen::VectorXd> iprs;
  std::vector<Branch> branches;
  OperatorFamily family;
  double mass = 1.0;

  bool has_breaks() const;
};

SpectralFlow spectral_flow(const OperatorFamily& family, double mass, const std::vector<double>& lambda_grid,
                           const FlowOptions& options = {});
SpectralFlow spectral_flow(const LatticeSpec& spec, const GaussianPotential& pot,
                           const std::vector<double>& lambda_grid, const FlowOptions& options = {});

/// Number of states at or below -M (within kEdgeTolerance) of the free
/// operator: the states that are never gap states.
Index free_negative_count(const LatticeSpec& spec);

/// Lambda at which the k-th gap-origin level (k = 0 is the deepest)
/// reaches -M, bisected to `tol`. Throws NumericalError if the level never
/// enters the gap ("no bound state") or stays above -M ("not reached").
double diving_threshold(const LatticeSpec& spec, const GaussianPotential& pot, int k, double tol = 1e-4,
                        double lambda_lo = 0.0, double lambda_hi = 10.0);
double find_lambda_critical(const LatticeSpec& spec, const GaussianPotential& pot, double tol = 1e-4,
                            double lambda_lo = 0.0, double lambda_hi = 10.0);

/// Former gap branches below -M at lambda, by overlap continuation from 0.
/// Throws NumericalError on an unresolved branch break.
int count_dived_states(const LatticeSpec& spec, const GaussianPotential& pot, double lambda,
                       double grid_step = 0.05);

struct CrossingWindow {
  double lambda_lo;
  double lambda_hi;
  double energy_lo;
  double energy_hi;
};

struct AvoidedCrossing {
  double gap = 0.0;
  double lambda_star = 0.0;
  double energy = 0.0;
  /// ascending index of the lower of the two levels
  Index lower_level = 0;
};

/// Minimal separation of the single near-degenerate adjacent pair inside
/// the window, refined until the gap changes by less than 1%. Throws
/// std::invalid_argument if the window holds zero or several candidates.
AvoidedCrossing avoided_crossing_gap(const SpectralFlow& flow, const CrossingWindow& window);

/// Avoided crossings met by the most localized state below -M as lambda
/// increases: each time the localized character hands over to the next
/// lower level the pair gap is refined. Exact (symmetry-protected)
/// crossings transfer nothing and are skipped.
std::vector<AvoidedCrossing> dived_state_crossings(const SpectralFlow& flow, double min_gap_over_M = 1e-6);

/// Mean level spacing of the negative pseudo-continuum in [-M - width, -M)
/// of the free operator, with width in units of M.
double mean_level_spacing(const LatticeSpec& spec, double width_over_M = 0.5);

}  // namespace diracsea
