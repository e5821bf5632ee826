#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "diracsea/spectral.hpp"

#include <cmath>
#include <random>

using namespace diracsea;

TEST_CASE("diagonalize: real-gauge and complex paths agree") {
  LatticeSpec s;
  s.nx = 9;
  s.ny = 8;
  GaussianPotential pot{1.0, 2.0, 4.0, 3.5};
  const auto h = build_hamiltonian(s, pot, 2.3);
  const EigenSystem a = diagonalize(h, 2.3);
  const EigenSystem b = diagonalize(h.dense(), 2.3);
  CHECK((a.energies - b.energies).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(a.orthonormality_defect() < 1e-12);
  CHECK(a.residual(h) < 1e-12);
  CHECK((eigenvalues(h) - b.energies).cwiseAbs().maxCoeff() < 1e-12);

  // periodic 6x6 carries flux around the torus: no real gauge, complex path
  s.nx = s.ny = 6;
  s.boundary = Boundary::Periodic;
  const auto hp = build_hamiltonian(s, pot, 0.5);
  const EigenSystem p = diagonalize(hp);
  CHECK(p.residual(hp) < 1e-12);
}

TEST_CASE("ipr") {
  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(4);
  v[2] = 1.0;
  CHECK(ipr(v) == doctest::Approx(1.0));
  v.setConstant(0.5);
  CHECK(ipr(v) == doctest::Approx(0.25));
  v *= 1.1;
  CHECK_THROWS_AS(ipr(v), std::invalid_argument);
}

TEST_CASE("free lattice has no gap states, weak well binds some") {
  LatticeSpec s;
  s.nx = s.ny = 15;
  s.mass = 0.5;
  GaussianPotential pot{0.5, 2.0, 7.0, 7.0};
  const auto free = classify_states(diagonalize(build_hamiltonian(s, pot, 0.0)), s);
  CHECK(free.count(StateLabel::Bound) == 0);  // the unpaired level of odd copy A sits on +M
  const auto bound = classify_states(diagonalize(build_hamiltonian(s, pot, 1.5)), s);
  CHECK(bound.count(StateLabel::Bound) >= 1);
  CHECK(bound.count(StateLabel::DivedBound) == 0);
}

TEST_CASE("two-level avoided crossing gap matches the coupling") {
  // H = [[-a l, g], [g, a l - 0.5]]: gap minimum 2g at l = 0.5 / (2a)
  const double a = 1.0, g = 0.01;
  OperatorFamily fam = [&](double l) {
    Eigen::VectorXd d(2);
    d << -a * l, a * l - 0.5;
    return HermitianOperator(2, d, {{0, 1, cplx(g)}, {1, 0, cplx(g)}});
  };
  std::vector<double> grid;
  for (int k = 0; k <= 20; ++k) grid.push_back(0.05 * k);
  const SpectralFlow flow = spectral_flow(fam, 1.0, grid);
  const auto c = avoided_crossing_gap(flow, {0.0, 1.0, -2.0, 2.0});
  CHECK(c.gap == doctest::Approx(2 * g).epsilon(0.01));
  CHECK(c.lambda_star == doctest::Approx(0.25).epsilon(0.02));
  CHECK_THROWS_AS(avoided_crossing_gap(flow, {0.6, 1.0, -2.0, 2.0}), std::invalid_argument);
}

TEST_CASE("exact crossing keeps branch identity") {
  // two decoupled levels crossing: branches follow the diabatic lines
  OperatorFamily fam = [](double l) {
    Eigen::VectorXd d(3);
    d << -l, l - 1.0, 5.0;
    return HermitianOperator(3, d, {});
  };
  std::vector<double> grid;
  for (int k = 0; k <= 10; ++k) grid.push_back(0.1 * k + 0.01);
  const SpectralFlow flow = spectral_flow(fam, 1.0, grid);
  CHECK_FALSE(flow.has_breaks());
  for (const Branch& b : flow.branches) {
    const double slope = (b.energy.back() - b.energy.front()) / (grid.back() - grid.front());
    CHECK((std::abs(slope - 1) < 1e-9 || std::abs(slope + 1) < 1e-9 || std::abs(slope) < 1e-9));
  }
}

TEST_CASE("degenerate clusters are matched as subspaces") {
  // a 2-fold level with an arbitrary rotating basis plus a spectator
  OperatorFamily fam = [](double l) {
    Eigen::VectorXd d(3);
    d << 1.0, 1.0, -l;
    return HermitianOperator(3, d, {});
  };
  const SpectralFlow flow = spectral_flow(fam, 1.0, {0.0, 0.5, 1.0});
  CHECK_FALSE(flow.has_breaks());
}

TEST_CASE("lambda_cr bisection brackets the crossing of -M") {
  LatticeSpec s;
  s.nx = s.ny = 11;
  s.mass = 0.5;
  GaussianPotential pot{0.5, 2.0, 5.0, 5.0};
  const double tol = 1e-4;
  const double lc = find_lambda_critical(s, pot, tol);
  const Index level = free_negative_count(s);
  const HamiltonianFamily fam(s, pot);
  CHECK(eigenvalues(fam.at(lc))[level] < -s.mass);
  CHECK(eigenvalues(fam.at(lc - tol))[level] >= -s.mass);
  CHECK(count_dived_states(s, pot, lc - 2 * tol) == 0);
  CHECK(count_dived_states(s, pot, lc + 0.05) >= 1);
  CHECK_THROWS_AS(find_lambda_critical(s, pot, tol, 0.0, 0.5 * lc), NumericalError);
}

TEST_CASE("level spacing decreases with lattice size") {
  LatticeSpec a, b;
  a.nx = a.ny = 11;
  b.nx = b.ny = 21;
  CHECK(mean_level_spacing(b) < mean_level_spacing(a));
}
