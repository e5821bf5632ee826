#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace diracsea {

using cplx = std::complex<double>;
using Index = Eigen::Index;
/// Site-major block of states: row i holds site i, one column per state.
using SiteBlock = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Internal units: lattice constant l = 1, hbar = 1. Energies are absolute
// (in units of 1/l) unless a name says "_over_M"; schedule times are in 1/M.
inline constexpr double kLatticeConstant = 1.0;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Boundary { Open, Periodic };
enum class Copy { A, B };
enum class RampShape { Linear, SinSquared };

std::string to_string(Boundary b);
std::string to_string(Copy c);
std::string to_string(RampShape s);

/// Geometry, mass and boundary of the simulated staggered copy.
///
/// Sites are (m, n) with m in [0, nx) and n in [0, ny); the flat index is
/// m * ny + n. For copy A the upper spinor component lives on sites with
/// m + n even and the lower one on m + n odd; copy B swaps the roles.
struct LatticeSpec {
  int nx = 21;
  int ny = 21;
  double mass = 0.5;
  Boundary boundary = Boundary::Open;
  Copy copy = Copy::A;

  /// Throws ConfigError on nx, ny < 3, non-positive mass, or a periodic
  /// wrap that would couple the two staggered copies (odd extent).
  void validate() const;

  Index dimension() const { return static_cast<Index>(nx) * ny; }
  Index site_index(int m, int n) const { return static_cast<Index>(m) * ny + n; }
  std::pair<int, int> site_coords(Index i) const {
    return {static_cast<int>(i / ny), static_cast<int>(i % ny)};
  }
  /// True if the site carries the upper (+M) spinor component.
  bool is_upper_site(int m, int n) const {
    const bool even = (m + n) % 2 == 0;
    return copy == Copy::A ? even : !even;
  }
  Index upper_site_count() const;
  Index lower_site_count() const { return dimension() - upper_site_count(); }
};

/// V(x) = v0 * exp(-|x - center|^2 / sigma^2); enters H as -lambda * V.
struct GaussianPotential {
  double v0 = 0.5;
  double sigma = 2.0;
  double center_x = 10.0;
  double center_y = 10.0;

  void validate() const;
};

double gaussian_potential_at(const GaussianPotential& pot, double x, double y);

/// V sampled at every site centre, in flat site order.
Eigen::VectorXd potential_profile(const LatticeSpec& spec, const GaussianPotential& pot);

/// Switch-on, hold, switch-off of the dimensionless depth lambda(t).
/// Durations are in units of 1/M.
struct RampSchedule {
  double lambda_max = 0.0;
  double lambda_final = 0.0;
  double t_on = 0.0;
  double t_hold = 0.0;
  double t_off = 0.0;
  RampShape shape = RampShape::SinSquared;

  double total() const { return t_on + t_hold + t_off; }
  void validate() const;
  /// Same proportions, rescaled to the given total duration.
  RampSchedule scaled_to(double t_total) const;
  /// Time-mirrored schedule: lambda'(t) = lambda(T - t). Requires lambda_final == 0.
  RampSchedule mirrored() const;
};

/// Piecewise ramp-on / hold / ramp-off. Throws std::domain_error for t
/// outside [0, T_tot].
double schedule_lambda(const RampSchedule& sched, double t);

/// Sparse Hermitian lattice operator in CSR form.
///
/// Off-diagonal entries are stored for both (i, j) and (j, i); the
/// diagonal is real and kept separately.
class HermitianOperator {
 public:
  struct Entry {
    Index row;
    Index col;
    cplx value;
  };

  HermitianOperator() = default;
  HermitianOperator(Index dimension, Eigen::VectorXd diagonal, std::vector<Entry> offdiag);

  Index dimension() const { return dim_; }
  const Eigen::VectorXd& diagonal() const { return diag_; }
  const std::vector<Index>& row_offsets() const { return row_ptr_; }
  const std::vector<Index>& columns() const { return cols_; }
  const std::vector<cplx>& values() const { return vals_; }
  Index offdiagonal_count(Index row) const { return row_ptr_[row + 1] - row_ptr_[row]; }

  /// Element lookup (zero when absent).
  cplx coeff(Index row, Index col) const;

  /// Copy with the diagonal replaced.
  HermitianOperator with_diagonal(Eigen::VectorXd diagonal) const;
  /// Copy with c added to every diagonal element.
  HermitianOperator shifted(double c) const;

  Eigen::SparseMatrix<cplx> sparse() const;
  Eigen::MatrixXcd dense() const;

  /// max |H - H^dagger| over stored entries (zero by construction).
  double hermiticity_defect() const;
  bool is_hermitian() const { return hermiticity_defect() == 0.0; }

  /// Gershgorin bound on the spectral radius.
  double norm_bound() const;

  /// out = H * in for site-major blocks (row i holds site i for every column).
  template <class Block>
  void apply(const Block& in, Block& out) const {
    out.resize(in.rows(), in.cols());
    for (Index i = 0; i < dim_; ++i) {
      out.row(i) = diag_[i] * in.row(i);
      for (Index k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) out.row(i) += vals_[k] * in.row(cols_[k]);
    }
  }

 private:
  Index dim_ = 0;
  Eigen::VectorXd diag_;
  std::vector<Index> row_ptr_{0};
  std::vector<Index> cols_;
  std::vector<cplx> vals_;
};

/// Discretized Dirac Hamiltonian on one staggered copy:
/// diagonal (M - lambda V) on upper sites and (-M - lambda V) on lower sites,
/// hopping +-i/(2l) along x and +-1/(2l) along y between the two classes.
HermitianOperator build_hamiltonian(const LatticeSpec& spec, const GaussianPotential& pot, double lambda);

/// H(lambda) = H0 - lambda * diag(V): the free operator plus the sampled
/// potential, so that snapshots along a ramp only swap the diagonal.
class HamiltonianFamily {
 public:
  HamiltonianFamily(LatticeSpec spec, GaussianPotential pot);

  const LatticeSpec& spec() const { return spec_; }
  const GaussianPotential& potential() const { return pot_; }
  const HermitianOperator& free_operator() const { return h0_; }
  const Eigen::VectorXd& profile() const { return profile_; }

  HermitianOperator at(double lambda) const;
  Eigen::VectorXd diagonal_at(double lambda) const { return h0_.diagonal() - lambda * profile_; }

 private:
  LatticeSpec spec_;
  GaussianPotential pot_;
  HermitianOperator h0_;
  Eigen::VectorXd profile_;
};

struct BandEnergies {
  double plus;
  double minus;
};

bool brillouin_zone_contains(const LatticeSpec& spec, double kx, double ky);

/// E(k) = +-sqrt(M^2 + (sin^2 kx l + sin^2 ky l) / l^2). Throws
/// std::domain_error outside the diamond zone |kx| + |ky| <= pi / l.
BandEnergies free_dispersion(const LatticeSpec& spec, double kx, double ky);

/// exp(i pi [(n + m)(d - 1) + d / 2]).
///
/// Direction index to neighbour: d = 0 -> +y, 1 -> +x, 2 -> -y, 3 -> -x.
/// With this mapping t(m, n, d) / (2l) equals the matrix element
/// <neighbour|H|site> of copy A exactly; copy B agrees up to the gauge
/// psi(m, n) -> (-1)^n psi(m, n).
cplx tunneling_phase(int n, int m, int d);

}  // namespace diracsea
