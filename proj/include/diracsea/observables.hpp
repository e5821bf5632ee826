#pragma once

#include "diracsea/evolution.hpp"
#include "diracsea/spectral.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace diracsea {

/// Eigenbases of the positive and negative spectral subspaces of H0.
struct SpectralProjectors {
  Eigen::MatrixXcd plus_basis;
  Eigen::MatrixXcd minus_basis;
  Eigen::VectorXd plus_energies;
  Eigen::VectorXd minus_energies;
  /// ascending index in the H0 spectrum of each basis column
  std::vector<Index> plus_levels;
  std::vector<Index> minus_levels;

  Index n_plus() const { return plus_basis.cols(); }
  Index n_minus() const { return minus_basis.cols(); }
  Index dimension() const { return plus_basis.rows(); }
  /// max |P+ + P- - I|
  double completeness_defect() const;
};

/// Splits es0 by the sign of the energy. Throws NumericalError if some
/// |E| < M - 1e-9: the free operator has a gap, so that is a build bug.
SpectralProjectors free_projectors(const EigenSystem& es0, double mass);
SpectralProjectors free_projectors(const LatticeSpec& spec);

/// Start propagator holding the requested bases as columns.
Propagator vacuum_blocks(const SpectralProjectors& proj, bool with_plus, bool with_minus = true);

struct ParticleNumber {
  double total = 0.0;
  /// ||P+ U P-||^2_HS, when the minus columns are available
  std::optional<double> plus_from_minus;
  /// ||P- U P+||^2_HS, when the plus columns are available
  std::optional<double> minus_from_plus;
  double unitarity_defect = 0.0;
  /// Set when the propagator's unitarity defect exceeds the limit.
  bool tainted = false;
};

/// N = ||P- U P+||^2_HS + ||P+ U P-||^2_HS. With only one block evolved the
/// other norm is taken equal to it (exact for unitary U).
ParticleNumber particle_number(const Propagator& u, const SpectralProjectors& proj,
                               double unitarity_limit = kUnitarityLimit);

struct LevelOccupation {
  Index index = 0;  // ascending index of the reference level
  double energy = 0.0;
  double occupation = 0.0;
};

struct PairSpectrum {
  std::vector<LevelOccupation> particles;
  std::vector<LevelOccupation> antiparticles;
  /// True for projections on eigenstates of H(lambda_final) rather than H0.
  bool instantaneous_basis = false;

  double particle_total() const;
  double antiparticle_total() const;
};

/// n_p = sum_q |<f_p|U|g_q>|^2 and n_q = sum_p |<g_q|U|f_p>|^2 over the
/// H0 bases. Needs both column blocks (or the full matrix).
PairSpectrum production_spectrum(const Propagator& u, const SpectralProjectors& proj);

/// Same occupations measured in the eigenbasis of the final Hamiltonian,
/// split by the sign of its energies. A different observable from the H0
/// spectrum whenever lambda_final != 0.
PairSpectrum instantaneous_spectrum(const Propagator& u, const SpectralProjectors& proj, const EigenSystem& es_final);

/// Occupation-weighted mean energy of the antiparticle spectrum below -M;
/// empty when nothing is occupied there.
std::optional<double> resonance_energy(const PairSpectrum& spectrum, double mass);

struct PairProductionReport {
  std::vector<double> times_over_M;
  std::vector<double> lambdas;
  std::vector<double> N_of_t;
  std::optional<PairSpectrum> spectrum;
  double N_final = 0.0;
};

PairProductionReport production_report(const EvolutionResult& run, const SpectralProjectors& proj);

enum class FitMode { Subcritical, Supercritical };

struct ScalingFit {
  double alpha = 0.0;
  double n_spont = 0.0;
  double amplitude = 0.0;
  /// root mean square of N_fit - N over the series
  double residual = 0.0;
  /// residual above 10% of the mean N
  bool low_quality = false;
  std::string warning;
};

/// Subcritical: N = c T^-alpha by log-log least squares (N_spont = 0).
/// Supercritical: N = N_spont + c T^-alpha by least squares over all three.
/// Throws std::invalid_argument with fewer than 4 distinct T.
ScalingFit split_spontaneous(const std::vector<std::pair<double, double>>& series, FitMode mode);

}  // namespace diracsea
