#include "diracsea/observables.hpp"

#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace diracsea {

double SpectralProjectors::completeness_defect() const {
  const Eigen::MatrixXcd p = plus_basis * plus_basis.adjoint() + minus_basis * minus_basis.adjoint();
  return (p - Eigen::MatrixXcd::Identity(p.rows(), p.cols())).cwiseAbs().maxCoeff();
}

SpectralProjectors free_projectors(const EigenSystem& es0, double mass) {
  const Index n = es0.size();
  std::vector<Index> plus, minus;
  for (Index i = 0; i < n; ++i) {
    const double e = es0.energies[i];
    if (std::abs(e) < mass - 1e-9) {
      std::ostringstream msg;
      msg << "free_projectors: level " << i << " at E = " << e << " lies inside the gap (M = " << mass
          << "); the lambda = 0 operator is wrong";
      throw NumericalError(msg.str());
    }
    (e > 0.0 ? plus : minus).push_back(i);
  }
  SpectralProjectors p;
  p.plus_basis.resize(n, static_cast<Index>(plus.size()));
  p.minus_basis.resize(n, static_cast<Index>(minus.size()));
  p.plus_energies.resize(static_cast<Index>(plus.size()));
  p.minus_energies.resize(static_cast<Index>(minus.size()));
  for (std::size_t k = 0; k < plus.size(); ++k) {
    p.plus_basis.col(static_cast<Index>(k)) = es0.states.col(plus[k]);
    p.plus_energies[static_cast<Index>(k)] = es0.energies[plus[k]];
  }
  for (std::size_t k = 0; k < minus.size(); ++k) {
    p.minus_basis.col(static_cast<Index>(k)) = es0.states.col(minus[k]);
    p.minus_energies[static_cast<Index>(k)] = es0.energies[minus[k]];
  }
  p.plus_levels = std::move(plus);
  p.minus_levels = std::move(minus);
  return p;
}

SpectralProjectors free_projectors(const LatticeSpec& spec) {
  GaussianPotential unused;
  unused.center_x = 0.5 * (spec.nx - 1);
  unused.center_y = 0.5 * (spec.ny - 1);
  return free_projectors(diagonalize(build_hamiltonian(spec, unused, 0.0)), spec.mass);
}

Propagator vacuum_blocks(const SpectralProjectors& proj, bool with_plus, bool with_minus) {
  if (!with_plus && !with_minus) throw std::invalid_argument("vacuum_blocks: no block requested");
  const Eigen::MatrixXcd none(proj.dimension(), 0);
  return Propagator::column_blocks(with_plus ? proj.plus_basis : none, with_minus ? proj.minus_basis : none);
}

namespace {

// Columns of U restricted to the given H0 subspace: U P for the full matrix
// or the stored block.
const SiteBlock* evolved_block(const Propagator& u, bool plus) {
  if (u.representation() == Propagator::Representation::FullMatrix) return nullptr;
  const SiteBlock& b = plus ? u.plus() : u.minus();
  return b.cols() > 0 ? &b : nullptr;
}

// <target basis| U |source basis>, or nothing when the source columns were not evolved.
std::optional<Eigen::MatrixXcd> transition_block(const Propagator& u, const Eigen::MatrixXcd& target,
                                                 const Eigen::MatrixXcd& source, bool source_is_plus) {
  if (u.representation() == Propagator::Representation::FullMatrix)
    return Eigen::MatrixXcd(target.adjoint() * (u.full() * source));
  const SiteBlock* b = evolved_block(u, source_is_plus);
  if (!b) return std::nullopt;
  if (b->cols() != source.cols())
    throw std::invalid_argument("particle_number: evolved block does not match the projector basis");
  return Eigen::MatrixXcd(target.adjoint() * *b);
}

double current_defect(const Propagator& u) {
  return u.defect_history.empty() ? u.unitarity_defect() : u.defect_history.back();
}

}  // namespace

ParticleNumber particle_number(const Propagator& u, const SpectralProjectors& proj, double unitarity_limit) {
  if (u.dimension() != proj.dimension()) throw std::invalid_argument("particle_number: dimension mismatch");
  ParticleNumber out;
  if (auto b = transition_block(u, proj.plus_basis, proj.minus_basis, false)) out.plus_from_minus = b->squaredNorm();
  if (auto b = transition_block(u, proj.minus_basis, proj.plus_basis, true)) out.minus_from_plus = b->squaredNorm();
  if (!out.plus_from_minus && !out.minus_from_plus)
    throw std::invalid_argument("particle_number: propagator holds no evolved columns");
  const double a = out.plus_from_minus.value_or(*out.minus_from_plus);
  const double b = out.minus_from_plus.value_or(*out.plus_from_minus);
  out.total = a + b;
  out.unitarity_defect = current_defect(u);
  out.tainted = !(out.unitarity_defect <= unitarity_limit);
  return out;
}

double PairSpectrum::particle_total() const {
  return std::accumulate(particles.begin(), particles.end(), 0.0,
                         [](double s, const LevelOccupation& l) { return s + l.occupation; });
}

double PairSpectrum::antiparticle_total() const {
  return std::accumulate(antiparticles.begin(), antiparticles.end(), 0.0,
                         [](double s, const LevelOccupation& l) { return s + l.occupation; });
}

namespace {

std::vector<LevelOccupation> occupations(const Eigen::MatrixXcd& block, const Eigen::VectorXd& energies,
                                         const std::vector<Index>& levels) {
  const Eigen::VectorXd rows = block.rowwise().squaredNorm();
  std::vector<LevelOccupation> out(static_cast<std::size_t>(rows.size()));
  for (Index i = 0; i < rows.size(); ++i) out[i] = {levels[i], energies[i], rows[i]};
  return out;
}

}  // namespace

PairSpectrum production_spectrum(const Propagator& u, const SpectralProjectors& proj) {
  if (u.dimension() != proj.dimension()) throw std::invalid_argument("production_spectrum: dimension mismatch");
  auto pm = transition_block(u, proj.plus_basis, proj.minus_basis, false);
  auto mp = transition_block(u, proj.minus_basis, proj.plus_basis, true);
  if (!pm || !mp) throw std::invalid_argument("production_spectrum: needs both the plus and the minus block evolved");
  PairSpectrum s;
  s.particles = occupations(*pm, proj.plus_energies, proj.plus_levels);
  s.antiparticles = occupations(*mp, proj.minus_energies, proj.minus_levels);
  return s;
}

PairSpectrum instantaneous_spectrum(const Propagator& u, const SpectralProjectors& proj, const EigenSystem& es_final) {
  if (u.dimension() != proj.dimension() || es_final.size() != proj.dimension())
    throw std::invalid_argument("instantaneous_spectrum: dimension mismatch");
  const SpectralProjectors fin = [&] {
    // same sign split, without the gap assertion that only holds for H0
    SpectralProjectors f;
    std::vector<Index> plus, minus;
    for (Index i = 0; i < es_final.size(); ++i) (es_final.energies[i] > 0.0 ? plus : minus).push_back(i);
    f.plus_basis = es_final.states(Eigen::all, plus);
    f.minus_basis = es_final.states(Eigen::all, minus);
    f.plus_energies = es_final.energies(plus);
    f.minus_energies = es_final.energies(minus);
    f.plus_levels = std::move(plus);
    f.minus_levels = std::move(minus);
    return f;
  }();
  auto pm = transition_block(u, fin.plus_basis, proj.minus_basis, false);
  auto mp = transition_block(u, fin.minus_basis, proj.plus_basis, true);
  if (!pm || !mp) throw std::invalid_argument("instantaneous_spectrum: needs both blocks evolved");
  PairSpectrum s;
  s.instantaneous_basis = true;
  s.particles = occupations(*pm, fin.plus_energies, fin.plus_levels);
  s.antiparticles = occupations(*mp, fin.minus_energies, fin.minus_levels);
  return s;
}

std::optional<double> resonance_energy(const PairSpectrum& spectrum, double mass) {
  double weight = 0.0, moment = 0.0;
  for (const LevelOccupation& l : spectrum.antiparticles)
    if (l.energy < -mass) {
      weight += l.occupation;
      moment += l.occupation * l.energy;
    }
  if (!(weight > 0.0)) return std::nullopt;
  return moment / weight;
}

PairProductionReport production_report(const EvolutionResult& run, const SpectralProjectors& proj) {
  PairProductionReport r;
  for (const RecordPoint& p : run.series) {
    r.times_over_M.push_back(p.t_over_M);
    r.lambdas.push_back(p.lambda);
    r.N_of_t.push_back(p.value);
  }
  r.N_final = particle_number(run.u, proj).total;
  const bool both = run.u.representation() == Propagator::Representation::FullMatrix ||
                    (run.u.plus().cols() > 0 && run.u.minus().cols() > 0);
  if (both) r.spectrum = production_spectrum(run.u, proj);
  return r;
}

namespace {

struct LinearFit {
  double n_spont, amplitude, ssr;
};

// least squares for N = s + c T^-alpha at fixed alpha
LinearFit fit_at(const std::vector<std::pair<double, double>>& series, double alpha) {
  Eigen::MatrixXd a(static_cast<Index>(series.size()), 2);
  Eigen::VectorXd y(static_cast<Index>(series.size()));
  for (std::size_t i = 0; i < series.size(); ++i) {
    a(static_cast<Index>(i), 0) = 1.0;
    a(static_cast<Index>(i), 1) = std::pow(series[i].first, -alpha);
    y[static_cast<Index>(i)] = series[i].second;
  }
  const Eigen::Vector2d x = a.colPivHouseholderQr().solve(y);
  return {x[0], x[1], (a * x - y).squaredNorm()};
}

}  // namespace

ScalingFit split_spontaneous(const std::vector<std::pair<double, double>>& series, FitMode mode) {
  std::set<double> distinct;
  for (const auto& [t, n] : series) {
    if (!(t > 0.0) || !std::isfinite(t) || !std::isfinite(n))
      throw std::invalid_argument("split_spontaneous: T must be positive and N finite");
    distinct.insert(t);
  }
  if (distinct.size() < 4) throw std::invalid_argument("split_spontaneous: needs at least 4 distinct T_tot values");

  ScalingFit fit;
  auto model = [&](double t) { return fit.n_spont + fit.amplitude * std::pow(t, -fit.alpha); };
  if (mode == FitMode::Subcritical) {
    Eigen::MatrixXd a(static_cast<Index>(series.size()), 2);
    Eigen::VectorXd y(static_cast<Index>(series.size()));
    for (std::size_t i = 0; i < series.size(); ++i) {
      if (!(series[i].second > 0.0)) throw std::invalid_argument("split_spontaneous: log-log fit needs N > 0");
      a(static_cast<Index>(i), 0) = 1.0;
      a(static_cast<Index>(i), 1) = std::log(series[i].first);
      y[static_cast<Index>(i)] = std::log(series[i].second);
    }
    const Eigen::Vector2d x = a.colPivHouseholderQr().solve(y);
    fit.alpha = -x[1];
    fit.amplitude = std::exp(x[0]);
    fit.n_spont = 0.0;
  } else {
    // scan alpha on a log grid, then polish the best bracket with Brent
    constexpr int kGrid = 400;
    const double lo = 1e-2, hi = 8.0;
    auto ssr = [&](double alpha) { return fit_at(series, alpha).ssr; };
    int best = 0;
    double best_ssr = std::numeric_limits<double>::infinity();
    std::vector<double> grid(kGrid);
    for (int k = 0; k < kGrid; ++k) {
      grid[k] = lo * std::pow(hi / lo, static_cast<double>(k) / (kGrid - 1));
      const double s = ssr(grid[k]);
      if (s < best_ssr) {
        best_ssr = s;
        best = k;
      }
    }
    const double a = grid[std::max(0, best - 1)];
    const double b = grid[std::min(kGrid - 1, best + 1)];
    const auto [alpha, value] = boost::math::tools::brent_find_minima(ssr, a, b, 52);
    (void)value;
    const LinearFit lf = fit_at(series, alpha);
    fit.alpha = alpha;
    fit.n_spont = lf.n_spont;
    fit.amplitude = lf.amplitude;
  }

  double sq = 0.0, mean = 0.0;
  for (const auto& [t, n] : series) {
    sq += (model(t) - n) * (model(t) - n);
    mean += n;
  }
  fit.residual = std::sqrt(sq / static_cast<double>(series.size()));
  mean /= static_cast<double>(series.size());
  if (fit.residual > 0.1 * std::abs(mean)) {
    fit.low_quality = true;
    std::ostringstream msg;
    msg << "fit residual " << fit.residual << " exceeds 10% of the mean N " << mean;
    fit.warning = msg.str();
  }
  return fit;
}

}  // namespace diracsea
