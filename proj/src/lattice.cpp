#include "diracsea/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace diracsea {

std::string to_string(Boundary b) { return b == Boundary::Open ? "open" : "periodic"; }
std::string to_string(Copy c) { return c == Copy::A ? "A" : "B"; }
std::string to_string(RampShape s) { return s == RampShape::Linear ? "linear" : "sin2"; }

void LatticeSpec::validate() const {
  if (nx < 3 || ny < 3) throw ConfigError("lattice needs nx, ny >= 3 (got " + std::to_string(nx) + "x" + std::to_string(ny) + ")");
  if (!(mass > 0.0) || !std::isfinite(mass)) throw ConfigError("mass must be positive and finite");
  if (boundary == Boundary::Periodic && (nx % 2 != 0 || ny % 2 != 0))
    throw ConfigError("periodic boundary needs even nx and ny: an odd wrap couples the two staggered copies");
}

Index LatticeSpec::upper_site_count() const {
  Index count = 0;
  for (int m = 0; m < nx; ++m)
    for (int n = 0; n < ny; ++n) count += is_upper_site(m, n) ? 1 : 0;
  return count;
}

void GaussianPotential::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("potential sigma must be positive");
  if (!(v0 > 0.0) || !std::isfinite(v0)) throw ConfigError("potential v0 must be positive");
  if (!std::isfinite(center_x) || !std::isfinite(center_y)) throw ConfigError("potential centre must be finite");
}

double gaussian_potential_at(const GaussianPotential& pot, double x, double y) {
  const double dx = x - pot.center_x;
  const double dy = y - pot.center_y;
  return pot.v0 * std::exp(-(dx * dx + dy * dy) / (pot.sigma * pot.sigma));
}

Eigen::VectorXd potential_profile(const LatticeSpec& spec, const GaussianPotential& pot) {
  Eigen::VectorXd v(spec.dimension());
  for (int m = 0; m < spec.nx; ++m)
    for (int n = 0; n < spec.ny; ++n)
      v[spec.site_index(m, n)] = gaussian_potential_at(pot, m * kLatticeConstant, n * kLatticeConstant);
  return v;
}

void RampSchedule::validate() const {
  if (!std::isfinite(lambda_max) || !std::isfinite(lambda_final)) throw ConfigError("schedule lambdas must be finite");
  if (t_on < 0 || t_hold < 0 || t_off < 0) throw ConfigError("schedule durations must be non-negative");
  if (!(total() > 0.0)) throw ConfigError("schedule total duration must be positive");
}

RampSchedule RampSchedule::scaled_to(double t_total) const {
  RampSchedule s = *this;
  const double f = t_total / total();
  s.t_on *= f;
  s.t_hold *= f;
  s.t_off *= f;
  return s;
}

RampSchedule RampSchedule::mirrored() const {
  if (lambda_final != 0.0) throw std::invalid_argument("mirrored schedule needs lambda_final == 0");
  RampSchedule s = *this;
  std::swap(s.t_on, s.t_off);
  return s;
}

namespace {

double ramp_fraction(RampShape shape, double s) {
  s = std::clamp(s, 0.0, 1.0);
  if (shape == RampShape::Linear) return s;
  const double x = std::sin(0.5 * std::numbers::pi * s);
  return x * x;
}

}  // namespace

double schedule_lambda(const RampSchedule& sched, double t) {
  const double total = sched.total();
  // one ulp of slack so that accumulated step times at T_tot are accepted
  const double slack = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, total);
  if (!(t >= -slack && t <= total + slack))
    throw std::domain_error("schedule_lambda: t = " + std::to_string(t) + " outside [0, " + std::to_string(total) + "]");
  const double on_end = sched.t_on;
  const double hold_end = sched.t_on + sched.t_hold;
  if (t <= on_end) {
    if (sched.t_on == 0.0) return sched.lambda_max;
    return sched.lambda_max * ramp_fraction(sched.shape, t / sched.t_on);
  }
  if (t <= hold_end) return sched.lambda_max;
  if (sched.t_off == 0.0) return sched.lambda_final;
  const double f = ramp_fraction(sched.shape, (t - hold_end) / sched.t_off);
  return sched.lambda_max + (sched.lambda_final - sched.lambda_max) * f;
}

HermitianOperator::HermitianOperator(Index dimension, Eigen::VectorXd diagonal, std::vector<Entry> offdiag)
    : dim_(dimension), diag_(std::move(diagonal)) {
  if (diag_.size() != dim_) throw std::invalid_argument("HermitianOperator: diagonal size mismatch");
  std::sort(offdiag.begin(), offdiag.end(),
            [](const Entry& a, const Entry& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
  row_ptr_.assign(static_cast<std::size_t>(dim_) + 1, 0);
  cols_.reserve(offdiag.size());
  vals_.reserve(offdiag.size());
  const Entry* prev = nullptr;
  for (const Entry& e : offdiag) {
    if (e.row < 0 || e.row >= dim_ || e.col < 0 || e.col >= dim_ || e.row == e.col)
      throw std::invalid_argument("HermitianOperator: bad off-diagonal entry");
    if (prev && prev->row == e.row && prev->col == e.col) {
      vals_.back() += e.value;  // duplicate coordinates accumulate
    } else {
      cols_.push_back(e.col);
      vals_.push_back(e.value);
      ++row_ptr_[e.row + 1];
    }
    prev = &e;
  }
  for (Index i = 0; i < dim_; ++i) row_ptr_[i + 1] += row_ptr_[i];
}

cplx HermitianOperator::coeff(Index row, Index col) const {
  if (row == col) return diag_[row];
  auto first = cols_.begin() + row_ptr_[row];
  auto last = cols_.begin() + row_ptr_[row + 1];
  auto it = std::lower_bound(first, last, col);
  if (it != last && *it == col) return vals_[static_cast<std::size_t>(it - cols_.begin())];
  return 0.0;
}

HermitianOperator HermitianOperator::with_diagonal(Eigen::VectorXd diagonal) const {
  if (diagonal.size() != dim_) throw std::invalid_argument("with_diagonal: size mismatch");
  HermitianOperator h = *this;
  h.diag_ = std::move(diagonal);
  return h;
}

HermitianOperator HermitianOperator::shifted(double c) const {
  return with_diagonal(diag_.array() + c);
}

Eigen::SparseMatrix<cplx> HermitianOperator::sparse() const {
  std::vector<Eigen::Triplet<cplx>> t;
  t.reserve(vals_.size() + static_cast<std::size_t>(dim_));
  for (Index i = 0; i < dim_; ++i) {
    t.emplace_back(i, i, diag_[i]);
    for (Index k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) t.emplace_back(i, cols_[k], vals_[k]);
  }
  Eigen::SparseMatrix<cplx> s(dim_, dim_);
  s.setFromTriplets(t.begin(), t.end());
  return s;
}

Eigen::MatrixXcd HermitianOperator::dense() const {
  Eigen::MatrixXcd d = Eigen::MatrixXcd::Zero(dim_, dim_);
  for (Index i = 0; i < dim_; ++i) {
    d(i, i) = diag_[i];
    for (Index k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) d(i, cols_[k]) = vals_[k];
  }
  return d;
}

double HermitianOperator::hermiticity_defect() const {
  double defect = 0.0;
  for (Index i = 0; i < dim_; ++i)
    for (Index k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k)
      defect = std::max(defect, std::abs(vals_[k] - std::conj(coeff(cols_[k], i))));
  return defect;
}

double HermitianOperator::norm_bound() const {
  double bound = 0.0;
  for (Index i = 0; i < dim_; ++i) {
    double r = std::abs(diag_[i]);
    for (Index k = row_ptr_[i]; k < row_ptr_[i + 1]; ++k) r += std::abs(vals_[k]);
    bound = std::max(bound, r);
  }
  return bound;
}

HermitianOperator build_hamiltonian(const LatticeSpec& spec, const GaussianPotential& pot, double lambda) {
  spec.validate();
  pot.validate();
  if (!std::isfinite(lambda)) throw std::invalid_argument("build_hamiltonian: lambda must be finite");

  const Index dim = spec.dimension();
  const Eigen::VectorXd v = potential_profile(spec, pot);
  Eigen::VectorXd diag(dim);
  std::vector<HermitianOperator::Entry> entries;
  entries.reserve(static_cast<std::size_t>(dim) * 4);

  const double hop = 1.0 / (2.0 * kLatticeConstant);
  const cplx i_unit(0.0, 1.0);
  struct Step {
    int dm, dn;
    cplx amplitude;
  };
  // amplitude of b^dagger_{neighbour} a_{site}
  const Step steps[4] = {{+1, 0, i_unit * hop}, {-1, 0, -i_unit * hop}, {0, +1, cplx(hop)}, {0, -1, cplx(-hop)}};

  for (int m = 0; m < spec.nx; ++m) {
    for (int n = 0; n < spec.ny; ++n) {
      const Index site = spec.site_index(m, n);
      const bool upper = spec.is_upper_site(m, n);
      diag[site] = upper ? spec.mass : -spec.mass;
      if (!upper) continue;
      for (const Step& s : steps) {
        int mm = m + s.dm;
        int nn = n + s.dn;
        if (spec.boundary == Boundary::Periodic) {
          mm = (mm + spec.nx) % spec.nx;
          nn = (nn + spec.ny) % spec.ny;
        } else if (mm < 0 || mm >= spec.nx || nn < 0 || nn >= spec.ny) {
          continue;
        }
        const Index nb = spec.site_index(mm, nn);
        entries.push_back({nb, site, s.amplitude});
        entries.push_back({site, nb, std::conj(s.amplitude)});
      }
    }
  }
  // same expression as HamiltonianFamily::diagonal_at, so both round identically
  diag = diag - lambda * v;
  return HermitianOperator(dim, std::move(diag), std::move(entries));
}

HamiltonianFamily::HamiltonianFamily(LatticeSpec spec, GaussianPotential pot)
    : spec_(spec), pot_(pot), h0_(build_hamiltonian(spec, pot, 0.0)), profile_(potential_profile(spec, pot)) {}

HermitianOperator HamiltonianFamily::at(double lambda) const {
  if (!std::isfinite(lambda)) throw std::invalid_argument("HamiltonianFamily::at: lambda must be finite");
  return h0_.with_diagonal(diagonal_at(lambda));
}

bool brillouin_zone_contains(const LatticeSpec&, double kx, double ky) {
  // tolerance of a few ulps so grid points on the zone edge count as inside
  const double edge = std::numbers::pi / kLatticeConstant;
  return std::abs(kx) + std::abs(ky) <= edge * (1.0 + 4.0 * std::numeric_limits<double>::epsilon());
}

BandEnergies free_dispersion(const LatticeSpec& spec, double kx, double ky) {
  if (!brillouin_zone_contains(spec, kx, ky)) throw std::domain_error("free_dispersion: k outside the Brillouin zone");
  const double l = kLatticeConstant;
  const double sx = std::sin(kx * l);
  const double sy = std::sin(ky * l);
  const double e = std::sqrt(spec.mass * spec.mass + (sx * sx + sy * sy) / (l * l));
  return {e, -e};
}

cplx tunneling_phase(int n, int m, int d) {
  if (d < 0 || d > 3) throw std::invalid_argument("tunneling_phase: direction must be 0..3");
  // exponent / pi = (n + m)(d - 1) + d / 2, reduced mod 2 in half-integer units
  const long long twice = 2LL * (n + m) * (d - 1) + d;
  const int quarter = static_cast<int>(((twice % 4) + 4) % 4);
  static constexpr cplx table[4] = {cplx(1, 0), cplx(0, 1), cplx(-1, 0), cplx(0, -1)};
  return table[quarter];
}

}  // namespace diracsea
