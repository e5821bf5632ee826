#include "diracsea/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace diracsea {

namespace {

// Diagonal unitary G with G^dagger H G real symmetric, if one exists.
struct RealGauge {
  Eigen::VectorXcd phase;
  Eigen::MatrixXd matrix;
};

std::optional<RealGauge> real_gauge(const HermitianOperator& h) {
  const Index n = h.dimension();
  const auto& rp = h.row_offsets();
  const auto& cols = h.columns();
  const auto& vals = h.values();
  Eigen::VectorXcd g = Eigen::VectorXcd::Zero(n);
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  std::deque<Index> queue;
  for (Index root = 0; root < n; ++root) {
    if (seen[root]) continue;
    seen[root] = 1;
    g[root] = 1.0;
    queue.push_back(root);
    while (!queue.empty()) {
      const Index i = queue.front();
      queue.pop_front();
      for (Index k = rp[i]; k < rp[i + 1]; ++k) {
        const Index j = cols[k];
        if (seen[j] || std::abs(vals[k]) == 0.0) continue;
        seen[j] = 1;
        g[j] = g[i] * std::conj(vals[k]) / std::abs(vals[k]);
        queue.push_back(j);
      }
    }
  }
  RealGauge out{g, Eigen::MatrixXd::Zero(n, n)};
  for (Index i = 0; i < n; ++i) {
    out.matrix(i, i) = h.diagonal()[i];
    for (Index k = rp[i]; k < rp[i + 1]; ++k) {
      const cplx t = std::conj(g[i]) * vals[k] * g[cols[k]];
      if (std::abs(t.imag()) > 1e-13 * std::max(1.0, std::abs(t))) return std::nullopt;
      out.matrix(i, cols[k]) = t.real();
    }
  }
  return out;
}

void check_solver(Eigen::ComputationInfo info, Index n) {
  if (info != Eigen::Success) {
    std::ostringstream msg;
    msg << "eigensolver failed to converge (dimension " << n << ", info " << static_cast<int>(info) << ")";
    throw NumericalError(msg.str());
  }
}

}  // namespace

double EigenSystem::orthonormality_defect() const {
  const Eigen::MatrixXcd g = states.adjoint() * states;
  return (g - Eigen::MatrixXcd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff();
}

double EigenSystem::residual(const HermitianOperator& h) const {
  Eigen::MatrixXcd hv;
  h.apply(states, hv);
  hv -= states * energies.asDiagonal();
  return hv.cwiseAbs().maxCoeff();
}

EigenSystem diagonalize(const HermitianOperator& h, double source_lambda) {
  if (h.dimension() == 0) throw std::invalid_argument("diagonalize: empty operator");
  if (auto gauge = real_gauge(h)) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gauge->matrix);
    check_solver(solver.info(), h.dimension());
    EigenSystem es;
    es.energies = solver.eigenvalues();
    es.states = gauge->phase.asDiagonal() * solver.eigenvectors().cast<cplx>();
    es.source_lambda = source_lambda;
    return es;
  }
  return diagonalize(h.dense(), source_lambda);
}

EigenSystem diagonalize(const Eigen::MatrixXcd& h, double source_lambda) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(h);
  check_solver(solver.info(), h.rows());
  return {solver.eigenvalues(), solver.eigenvectors(), source_lambda};
}

Eigen::VectorXd eigenvalues(const HermitianOperator& h) {
  if (auto gauge = real_gauge(h)) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gauge->matrix, Eigen::EigenvaluesOnly);
    check_solver(solver.info(), h.dimension());
    return solver.eigenvalues();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(h.dense(), Eigen::EigenvaluesOnly);
  check_solver(solver.info(), h.dimension());
  return solver.eigenvalues();
}

double ipr(const Eigen::Ref<const Eigen::VectorXcd>& state) {
  const double norm = state.norm();
  if (std::abs(norm - 1.0) > 1e-10) throw std::invalid_argument("ipr: state is not normalized");
  return state.cwiseAbs2().cwiseAbs2().sum();
}

std::string to_string(StateLabel label) {
  switch (label) {
    case StateLabel::NegativeContinuum: return "negative_continuum";
    case StateLabel::Bound: return "bound";
    case StateLabel::PositiveContinuum: return "positive_continuum";
    case StateLabel::DivedBound: return "dived_bound";
  }
  return "unknown";
}

Index StateClassification::count(StateLabel label) const {
  return std::count(labels.begin(), labels.end(), label);
}

StateClassification classify_states(const EigenSystem& es, const LatticeSpec& spec, std::optional<double> ipr_threshold) {
  Eigen::VectorXd p(es.size());
  for (Index i = 0; i < es.size(); ++i) p[i] = es.states.col(i).cwiseAbs2().cwiseAbs2().sum();
  return classify_levels(es.energies, p, spec, ipr_threshold);
}

StateClassification classify_levels(const Eigen::VectorXd& energies, const Eigen::VectorXd& iprs, const LatticeSpec& spec,
                                    std::optional<double> ipr_threshold) {
  if (energies.size() != iprs.size()) throw std::invalid_argument("classify_levels: energies and IPRs differ in length");
  const double m = spec.mass;
  const double tol = kEdgeTolerance * m;
  // States pulled below the bottom of the free lower band are bound to the
  // well from the band edge, not former gap states.
  const double l = kLatticeConstant;
  const double band_bottom = -std::sqrt(m * m + 2.0 / (l * l));
  const Index n = energies.size();
  StateClassification out;
  out.ipr.assign(iprs.data(), iprs.data() + n);
  std::vector<double> continuum;
  for (Index i = 0; i < n; ++i)
    if (std::abs(energies[i]) >= m - tol) continuum.push_back(out.ipr[i]);
  if (!continuum.empty()) {
    auto mid = continuum.begin() + static_cast<std::ptrdiff_t>(continuum.size() / 2);
    std::nth_element(continuum.begin(), mid, continuum.end());
    out.median_continuum_ipr = *mid;
  }
  out.ipr_threshold = ipr_threshold ? *ipr_threshold : 5.0 * out.median_continuum_ipr;

  out.labels.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const double e = energies[i];
    StateLabel label;
    if (e < -m - tol)
      label = e >= band_bottom && out.ipr[i] > out.ipr_threshold ? StateLabel::DivedBound : StateLabel::NegativeContinuum;
    else if (e <= -m + tol)
      label = StateLabel::NegativeContinuum;
    else if (e < m - tol)
      label = StateLabel::Bound;
    else
      label = StateLabel::PositiveContinuum;
    out.labels[i] = label;
    if (label == StateLabel::Bound && out.ipr[i] < 5.0 * out.median_continuum_ipr) out.low_confidence = true;
  }
  return out;
}

OperatorFamily lattice_family(const LatticeSpec& spec, const GaussianPotential& pot) {
  auto family = std::make_shared<HamiltonianFamily>(spec, pot);
  return [family](double lambda) { return family->at(lambda); };
}

bool SpectralFlow::has_breaks() const {
  return std::any_of(branches.begin(), branches.end(), [](const Branch& b) { return !b.breaks.empty(); });
}

namespace {

struct Snapshot {
  double lambda;
  EigenSystem es;
};

// Consecutive levels closer than tol form one cluster; returns the cluster
// id of every level.
std::vector<Index> clusters_of(const Eigen::VectorXd& e, double tol, Index& count) {
  std::vector<Index> id(static_cast<std::size_t>(e.size()));
  count = 0;
  for (Index i = 0; i < e.size(); ++i) {
    if (i > 0 && e[i] - e[i - 1] > tol) ++count;
    id[i] = count;
  }
  ++count;
  return id;
}

struct Match {
  std::vector<Index> target;  // per source level
  std::vector<double> weight;
};

// Greedy one-to-one continuation from snapshot a to b. Degenerate clusters
// are matched as subspaces: the weight of cluster pair (A, B) is the squared
// Frobenius norm of the overlap block (the sum of squared cosines of the
// principal angles), normalized by the smaller dimension.
Match match_levels(const EigenSystem& a, const EigenSystem& b, double deg_tol) {
  const Index n = a.size();
  const Eigen::MatrixXd w = (a.states.adjoint() * b.states).cwiseAbs2();
  Index na = 0, nb = 0;
  const auto ca = clusters_of(a.energies, deg_tol, na);
  const auto cb = clusters_of(b.energies, deg_tol, nb);

  std::vector<std::vector<Index>> members_a(static_cast<std::size_t>(na)), members_b(static_cast<std::size_t>(nb));
  for (Index i = 0; i < n; ++i) members_a[ca[i]].push_back(i);
  for (Index j = 0; j < n; ++j) members_b[cb[j]].push_back(j);

  // cluster-level weights, sparse
  struct Pair {
    Index A, B;
    double weight;
  };
  std::vector<Pair> pairs;
  {
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(na, nb);
    for (Index j = 0; j < n; ++j)
      for (Index i = 0; i < n; ++i) t(ca[i], cb[j]) += w(i, j);
    for (Index B = 0; B < nb; ++B)
      for (Index A = 0; A < na; ++A) {
        if (t(A, B) < 1e-6) continue;
        const double dim = static_cast<double>(std::min(members_a[A].size(), members_b[B].size()));
        pairs.push_back({A, B, t(A, B) / dim});
      }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.weight > y.weight; });

  Match m{std::vector<Index>(static_cast<std::size_t>(n), -1), std::vector<double>(static_cast<std::size_t>(n), 0.0)};
  std::vector<std::size_t> next_a(static_cast<std::size_t>(na), 0), next_b(static_cast<std::size_t>(nb), 0);
  for (const Pair& p : pairs) {
    auto& ia = next_a[p.A];
    auto& ib = next_b[p.B];
    while (ia < members_a[p.A].size() && ib < members_b[p.B].size()) {
      m.target[members_a[p.A][ia]] = members_b[p.B][ib];
      m.weight[members_a[p.A][ia]] = p.weight;
      ++ia;
      ++ib;
    }
  }
  // leftovers (weights below the pruning floor) pair up in energy order
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  for (Index i = 0; i < n; ++i)
    if (m.target[i] >= 0) used[m.target[i]] = 1;
  Index free_j = 0;
  for (Index i = 0; i < n; ++i) {
    if (m.target[i] >= 0) continue;
    while (used[free_j]) ++free_j;
    m.target[i] = free_j;
    used[free_j] = 1;
  }
  return m;
}

class FlowBuilder {
 public:
  FlowBuilder(const OperatorFamily& family, const FlowOptions& opt) : family_(family), opt_(opt) {}

  Snapshot snapshot(double lambda) const { return {lambda, diagonalize(family_(lambda), lambda)}; }

  // Continuation a -> b, bisecting the interval while any match is ambiguous.
  Match continue_between(const Snapshot& a, const Snapshot& b, int depth) const {
    const double scale = std::max({1.0, std::abs(a.es.energies[0]), std::abs(a.es.energies[a.es.size() - 1])});
    Match direct = match_levels(a.es, b.es, opt_.degeneracy_tolerance * scale);
    const bool ambiguous = std::any_of(direct.weight.begin(), direct.weight.end(),
                                       [&](double w) { return w < opt_.ambiguity_threshold; });
    if (!ambiguous || depth >= opt_.max_refinement_depth) return direct;
    const Snapshot mid = snapshot(0.5 * (a.lambda + b.lambda));
    const Match first = continue_between(a, mid, depth + 1);
    const Match second = continue_between(mid, b, depth + 1);
    Match composed{direct.target, direct.weight};
    for (std::size_t i = 0; i < composed.target.size(); ++i) {
      const Index j = first.target[i];
      composed.target[i] = second.target[j];
      composed.weight[i] = std::min(first.weight[i], second.weight[j]);
    }
    return composed;
  }

 private:
  const OperatorFamily& family_;
  const FlowOptions& opt_;
};

}  // namespace

SpectralFlow spectral_flow(const OperatorFamily& family, double mass, const std::vector<double>& lambda_grid,
                           const FlowOptions& options) {
  if (lambda_grid.empty()) throw std::invalid_argument("spectral_flow: empty lambda grid");
  for (std::size_t k = 1; k < lambda_grid.size(); ++k)
    if (!(lambda_grid[k] > lambda_grid[k - 1])) throw std::invalid_argument("spectral_flow: lambda grid must be ascending");

  SpectralFlow flow;
  flow.lambda_grid = lambda_grid;
  flow.family = family;
  flow.mass = mass;
  FlowBuilder builder(family, options);

  Snapshot prev = builder.snapshot(lambda_grid[0]);
  const Index n = prev.es.size();
  flow.branches.resize(static_cast<std::size_t>(n));
  for (Index b = 0; b < n; ++b) flow.branches[b].id = static_cast<int>(b);

  auto record = [&](const Snapshot& s, const std::vector<Index>& level_of_branch) {
    flow.energies.push_back(s.es.energies);
    if (options.keep_iprs) {
      Eigen::VectorXd p(n);
      for (Index i = 0; i < n; ++i) p[i] = s.es.states.col(i).cwiseAbs2().cwiseAbs2().sum();
      flow.iprs.push_back(std::move(p));
    }
    for (Index b = 0; b < n; ++b) {
      flow.branches[b].level.push_back(level_of_branch[b]);
      flow.branches[b].energy.push_back(s.es.energies[level_of_branch[b]]);
    }
  };

  std::vector<Index> level_of_branch(static_cast<std::size_t>(n));
  std::iota(level_of_branch.begin(), level_of_branch.end(), Index{0});
  record(prev, level_of_branch);

  for (std::size_t k = 1; k < lambda_grid.size(); ++k) {
    Snapshot next = builder.snapshot(lambda_grid[k]);
    const Match m = builder.continue_between(prev, next, 0);
    for (Index b = 0; b < n; ++b) {
      const Index from = level_of_branch[b];
      if (m.weight[from] < options.ambiguity_threshold) flow.branches[b].breaks.push_back(k);
      level_of_branch[b] = m.target[from];
    }
    record(next, level_of_branch);
    prev = std::move(next);
  }
  return flow;
}

SpectralFlow spectral_flow(const LatticeSpec& spec, const GaussianPotential& pot, const std::vector<double>& lambda_grid,
                           const FlowOptions& options) {
  return spectral_flow(lattice_family(spec, pot), spec.mass, lambda_grid, options);
}

Index free_negative_count(const LatticeSpec& spec) {
  GaussianPotential unit;
  unit.center_x = 0.5 * (spec.nx - 1);
  unit.center_y = 0.5 * (spec.ny - 1);
  const Eigen::VectorXd e = eigenvalues(build_hamiltonian(spec, unit, 0.0));
  const double edge = -spec.mass + kEdgeTolerance * spec.mass;
  return static_cast<Index>((e.array() <= edge).count());
}

double diving_threshold(const LatticeSpec& spec, const GaussianPotential& pot, int k, double tol, double lambda_lo,
                        double lambda_hi) {
  if (!(tol > 0.0)) throw std::invalid_argument("diving_threshold: tol must be positive");
  if (!(lambda_hi > lambda_lo)) throw std::invalid_argument("diving_threshold: empty bracket");
  const HamiltonianFamily family(spec, pot);
  const Index level = free_negative_count(spec) + k;
  if (level >= spec.dimension()) throw std::invalid_argument("diving_threshold: level index out of range");
  const double m = spec.mass;
  auto energy = [&](double lambda) { return eigenvalues(family.at(lambda))[level]; };

  auto bracket_report = [&](const std::string& what) {
    std::ostringstream msg;
    msg << what << " for gap level " << k << " in bracket [" << lambda_lo << ", " << lambda_hi
        << "]: E(lo) = " << energy(lambda_lo) / m << " M, E(hi) = " << energy(lambda_hi) / m << " M";
    return msg.str();
  };

  const double e_hi = energy(lambda_hi);
  if (e_hi >= m * (1.0 - kEdgeTolerance)) throw NumericalError(bracket_report("no bound state"));
  if (e_hi >= -m) throw NumericalError(bracket_report("-M not reached"));
  if (energy(lambda_lo) < -m) throw NumericalError(bracket_report("already below -M at the lower end"));

  double lo = lambda_lo, hi = lambda_hi;
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    (energy(mid) < -m ? hi : lo) = mid;
  }
  return hi;
}

double find_lambda_critical(const LatticeSpec& spec, const GaussianPotential& pot, double tol, double lambda_lo,
                            double lambda_hi) {
  return diving_threshold(spec, pot, 0, tol, lambda_lo, lambda_hi);
}

int count_dived_states(const LatticeSpec& spec, const GaussianPotential& pot, double lambda, double grid_step) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("count_dived_states: lambda must be >= 0");
  if (lambda == 0.0) return 0;
  const int steps = std::max(1, static_cast<int>(std::ceil(lambda / grid_step)));
  std::vector<double> grid(static_cast<std::size_t>(steps) + 1);
  for (int s = 0; s <= steps; ++s) grid[s] = lambda * s / steps;
  FlowOptions opt;
  opt.keep_iprs = false;
  const SpectralFlow flow = spectral_flow(spec, pot, grid, opt);

  const double m = spec.mass;
  const double tol = kEdgeTolerance * m;
  int dived = 0;
  for (const Branch& b : flow.branches) {
    const bool visited_gap =
        std::any_of(b.energy.begin(), b.energy.end(), [&](double e) { return e > -m + tol && e < m - tol; });
    if (!visited_gap) continue;
    if (!b.breaks.empty()) {
      std::ostringstream msg;
      msg << "count_dived_states: unresolved branch break for gap branch " << b.id << " at lambda "
          << flow.lambda_grid[b.breaks.front()];
      throw NumericalError(msg.str());
    }
    if (b.energy.back() < -m - tol) ++dived;
  }
  return dived;
}

namespace {

// Minimum of E[level + 1] - E[level] over [lo, hi] by repeated grid
// refinement; stops when the gap changes by less than 1%.
AvoidedCrossing refine_gap(const OperatorFamily& family, Index level, double lo, double hi) {
  constexpr int kPoints = 9;
  AvoidedCrossing best;
  double prev_gap = -1.0;
  for (int round = 0; round < 60; ++round) {
    double best_gap = std::numeric_limits<double>::infinity();
    int best_idx = 0;
    std::vector<double> lam(kPoints);
    for (int p = 0; p < kPoints; ++p) {
      lam[p] = lo + (hi - lo) * p / (kPoints - 1);
      const Eigen::VectorXd e = eigenvalues(family(lam[p]));
      const double gap = e[level + 1] - e[level];
      if (gap < best_gap) {
        best_gap = gap;
        best_idx = p;
        best.energy = 0.5 * (e[level] + e[level + 1]);
      }
    }
    best.gap = std::max(best_gap, 0.0);
    best.lambda_star = lam[best_idx];
    best.lower_level = level;
    const double scale = std::max(1.0, std::abs(best.energy));
    if (best.gap < 1e-13 * scale) break;
    if (prev_gap >= 0.0 && std::abs(prev_gap - best.gap) < 0.01 * best.gap) break;
    prev_gap = best.gap;
    lo = lam[std::max(0, best_idx - 1)];
    hi = lam[std::min(kPoints - 1, best_idx + 1)];
  }
  return best;
}

}  // namespace

AvoidedCrossing avoided_crossing_gap(const SpectralFlow& flow, const CrossingWindow& window) {
  if (!flow.family) throw std::invalid_argument("avoided_crossing_gap: flow carries no operator family");
  std::vector<std::size_t> ks;
  for (std::size_t k = 0; k < flow.lambda_grid.size(); ++k)
    if (flow.lambda_grid[k] >= window.lambda_lo && flow.lambda_grid[k] <= window.lambda_hi) ks.push_back(k);
  if (ks.size() < 3) throw std::invalid_argument("avoided_crossing_gap: window spans fewer than 3 grid points");

  struct Candidate {
    Index level;
    std::size_t k;
  };
  std::vector<Candidate> found;
  const Index n = flow.energies.front().size();
  auto inside = [&](double e) { return e >= window.energy_lo && e <= window.energy_hi; };
  for (Index j = 0; j + 1 < n; ++j) {
    auto gap = [&](std::size_t k) { return flow.energies[k][j + 1] - flow.energies[k][j]; };
    const double edge_gap = std::max(gap(ks.front()), gap(ks.back()));
    for (std::size_t q = 1; q + 1 < ks.size(); ++q) {
      const std::size_t k = ks[q];
      if (!inside(flow.energies[k][j]) || !inside(flow.energies[k][j + 1])) continue;
      const double g = gap(k);
      // strict on the left so a minimum straddling two grid points counts once
      if (g < gap(ks[q - 1]) && g <= gap(ks[q + 1]) && g < 0.5 * edge_gap) found.push_back({j, k});
    }
  }
  if (found.size() != 1) {
    std::ostringstream msg;
    msg << "avoided_crossing_gap: window holds " << found.size()
        << " near-degeneracies; narrow it to exactly one";
    throw std::invalid_argument(msg.str());
  }
  const std::size_t k = found.front().k;
  return refine_gap(flow.family, found.front().level, flow.lambda_grid[k - 1], flow.lambda_grid[k + 1]);
}

std::vector<AvoidedCrossing> dived_state_crossings(const SpectralFlow& flow, double min_gap_over_M) {
  if (flow.iprs.size() != flow.lambda_grid.size())
    throw std::invalid_argument("dived_state_crossings: flow was built without IPRs");
  const double m = flow.mass;
  const double band_bottom = -std::sqrt(m * m + 2.0 / (kLatticeConstant * kLatticeConstant));
  std::vector<AvoidedCrossing> out;
  Index prev_level = -1;
  for (std::size_t k = 0; k < flow.lambda_grid.size(); ++k) {
    const Eigen::VectorXd& e = flow.energies[k];
    const Eigen::VectorXd& p = flow.iprs[k];
    std::vector<double> continuum;
    for (Index i = 0; i < e.size(); ++i)
      if (std::abs(e[i]) >= m) continuum.push_back(p[i]);
    std::nth_element(continuum.begin(), continuum.begin() + static_cast<std::ptrdiff_t>(continuum.size() / 2),
                     continuum.end());
    const double threshold = 5.0 * continuum[continuum.size() / 2];

    Index level = -1;
    double best = threshold;
    for (Index i = 0; i < e.size() && e[i] < -m * (1.0 + kEdgeTolerance); ++i)
      if (e[i] >= band_bottom && p[i] > best) {
        best = p[i];
        level = i;
      }
    if (level >= 0 && prev_level >= 0 && level < prev_level) {
      // search one extra cell on each side; a minimum on the boundary is a
      // partial handover, not a resolved crossing
      const double lo = flow.lambda_grid[k < 2 ? 0 : k - 2];
      const double hi = flow.lambda_grid[std::min(k + 1, flow.lambda_grid.size() - 1)];
      for (Index j = level; j < prev_level; ++j) {
        AvoidedCrossing c = refine_gap(flow.family, j, lo, hi);
        const bool interior = c.lambda_star > lo && c.lambda_star < hi;
        if (interior && c.gap > min_gap_over_M * m && c.energy < -m) out.push_back(c);
      }
    }
    prev_level = level;
  }
  return out;
}

double mean_level_spacing(const LatticeSpec& spec, double width_over_M) {
  GaussianPotential unit;
  const Eigen::VectorXd e = eigenvalues(build_hamiltonian(spec, unit, 0.0));
  const double m = spec.mass;
  const double lo = -m * (1.0 + width_over_M);
  const double hi = -m * (1.0 + kEdgeTolerance);
  const auto count = (e.array() >= lo && e.array() < hi).count();
  if (count == 0) throw NumericalError("mean_level_spacing: no levels in the window below -M");
  return width_over_M * m / static_cast<double>(count);
}

}  // namespace diracsea
