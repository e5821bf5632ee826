#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "diracsea/lattice.hpp"
#include "diracsea/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace diracsea;

namespace {

GaussianPotential centred(const LatticeSpec& s, double v0 = 1.0, double sigma = 2.0) {
  return {v0, sigma, 0.5 * (s.nx - 1), 0.5 * (s.ny - 1)};
}

}  // namespace

TEST_CASE("3x3 open lattice matches the hand-written matrix") {
  LatticeSpec s;
  s.nx = s.ny = 3;
  s.mass = 0.7;
  GaussianPotential pot = centred(s);
  const double lambda = 0.3;
  const HermitianOperator h = build_hamiltonian(s, pot, lambda);
  REQUIRE(h.dimension() == 9);

  // site (m, n) -> 3m + n; copy A: upper on m + n even
  const cplx I(0, 1);
  Eigen::MatrixXcd ref = Eigen::MatrixXcd::Zero(9, 9);
  for (int m = 0; m < 3; ++m)
    for (int n = 0; n < 3; ++n) {
      const double dx = m - 1.0, dy = n - 1.0;
      const double v = std::exp(-(dx * dx + dy * dy) / 4.0);
      ref(3 * m + n, 3 * m + n) = ((m + n) % 2 == 0 ? 0.7 : -0.7) - lambda * v;
    }
  // upper site (0,0): +x neighbour (1,0) gets i/2, +y neighbour (0,1) gets 1/2
  auto hop = [&](int from, int to, cplx a) {
    ref(to, from) += a;
    ref(from, to) += std::conj(a);
  };
  const int upper[5][2] = {{0, 0}, {0, 2}, {1, 1}, {2, 0}, {2, 2}};
  for (const auto& u : upper) {
    const int m = u[0], n = u[1], site = 3 * m + n;
    if (m + 1 < 3) hop(site, 3 * (m + 1) + n, 0.5 * I);
    if (m - 1 >= 0) hop(site, 3 * (m - 1) + n, -0.5 * I);
    if (n + 1 < 3) hop(site, 3 * m + n + 1, 0.5);
    if (n - 1 >= 0) hop(site, 3 * m + n - 1, -0.5);
  }
  CHECK((h.dense() - ref).cwiseAbs().maxCoeff() == doctest::Approx(0.0));
  CHECK(h.coeff(3, 0) == 0.5 * I);
  CHECK(h.coeff(0, 3) == -0.5 * I);
  CHECK(h.coeff(1, 0) == cplx(0.5));
  CHECK(h.is_hermitian());
}

TEST_CASE("periodic free spectrum equals the analytic two-band multiset") {
  for (auto [nx, ny] : {std::pair{16, 16}, std::pair{8, 12}}) {
    LatticeSpec s;
    s.nx = nx;
    s.ny = ny;
    s.mass = 0.7;
    s.boundary = Boundary::Periodic;
    const Eigen::VectorXd e = eigenvalues(build_hamiltonian(s, centred(s), 0.0));

    // Independent oracle: the staggered lattice is a half-size two-component
    // lattice, so the full periodic k-grid double counts every band value.
    std::vector<double> oracle;
    for (int j = 0; j < nx; ++j)
      for (int k = 0; k < ny; ++k) {
        const double kx = 2 * std::numbers::pi * j / nx, ky = 2 * std::numbers::pi * k / ny;
        const double E = std::sqrt(0.49 + std::sin(kx) * std::sin(kx) + std::sin(ky) * std::sin(ky));
        oracle.push_back(E);
        oracle.push_back(-E);
      }
    std::sort(oracle.begin(), oracle.end());
    REQUIRE(oracle.size() == 2 * static_cast<std::size_t>(e.size()));
    double worst = 0;
    for (Index i = 0; i < e.size(); ++i)
      worst = std::max(worst, std::abs(e[i] - oracle[2 * i]) / std::abs(oracle[2 * i]));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("free dispersion") {
  LatticeSpec s;
  s.mass = 0.5;
  auto b = free_dispersion(s, 0.0, 0.0);
  CHECK(b.plus == doctest::Approx(0.5));
  CHECK(b.minus == doctest::Approx(-0.5));
  b = free_dispersion(s, std::numbers::pi / 2, std::numbers::pi / 2);
  CHECK(b.plus == doctest::Approx(std::sqrt(2.25)));
  CHECK(free_dispersion(s, std::numbers::pi, 0.0).plus == doctest::Approx(0.5));
  CHECK_THROWS_AS(free_dispersion(s, 2.0, 2.0), std::domain_error);
}

TEST_CASE("tunneling phase reproduces the copy A hopping") {
  LatticeSpec s;
  s.nx = 6;
  s.ny = 5;
  const HermitianOperator h = build_hamiltonian(s, centred(s), 0.0);
  const int dm[4] = {0, 1, 0, -1}, dn[4] = {1, 0, -1, 0};
  int checked = 0;
  for (int m = 0; m < s.nx; ++m)
    for (int n = 0; n < s.ny; ++n)
      for (int d = 0; d < 4; ++d) {
        const int mm = m + dm[d], nn = n + dn[d];
        if (mm < 0 || mm >= s.nx || nn < 0 || nn >= s.ny) continue;
        const cplx elem = h.coeff(s.site_index(mm, nn), s.site_index(m, n));
        CHECK(std::abs(tunneling_phase(n, m, d) / 2.0 - elem) < 1e-15);
        ++checked;
      }
  CHECK(checked > 0);
  CHECK_THROWS_AS(tunneling_phase(0, 0, 4), std::invalid_argument);
  CHECK_THROWS_AS(tunneling_phase(0, 0, -1), std::invalid_argument);
}

TEST_CASE("copy B is the gauge image of copy A with the masses swapped") {
  LatticeSpec a;
  a.nx = 5;
  a.ny = 4;
  LatticeSpec b = a;
  b.copy = Copy::B;
  const auto ha = build_hamiltonian(a, centred(a), 0.4);
  const auto hb = build_hamiltonian(b, centred(b), 0.4);
  CHECK(a.upper_site_count() + b.upper_site_count() == a.dimension());
  for (int m = 0; m < a.nx; ++m)
    for (int n = 0; n < a.ny; ++n) CHECK(a.is_upper_site(m, n) != b.is_upper_site(m, n));
  CHECK(hb.is_hermitian());
  CHECK(ha.dimension() == hb.dimension());
}

TEST_CASE("hermiticity on random shapes") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    LatticeSpec s;
    s.nx = 3 + static_cast<int>(rng() % 8);
    s.ny = 3 + static_cast<int>(rng() % 8);
    s.boundary = (s.nx % 2 == 0 && s.ny % 2 == 0 && trial % 2) ? Boundary::Periodic : Boundary::Open;
    s.copy = trial % 3 ? Copy::A : Copy::B;
    const auto h = build_hamiltonian(s, centred(s, 1.3, 1.5), 2.0 * trial);
    CHECK(h.hermiticity_defect() == 0.0);
    CHECK((h.dense() - h.dense().adjoint()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("configuration errors") {
  LatticeSpec s;
  s.nx = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.nx = 15;
  s.boundary = Boundary::Periodic;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.nx = 16;
  s.ny = 16;
  CHECK_NOTHROW(s.validate());
  s.mass = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  GaussianPotential p;
  p.sigma = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("family snapshots equal direct construction") {
  LatticeSpec s;
  const auto pot = centred(s);
  const HamiltonianFamily fam(s, pot);
  for (double lambda : {0.0, 1.7, 4.2}) {
    const auto direct = build_hamiltonian(s, pot, lambda);
    CHECK((fam.at(lambda).dense() - direct.dense()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("site-major apply equals the sparse product") {
  LatticeSpec s;
  s.nx = 7;
  s.ny = 6;
  const auto h = build_hamiltonian(s, centred(s), 1.1);
  std::mt19937 rng(3);
  std::normal_distribution<double> g;
  SiteBlock in(h.dimension(), 5), out;
  for (Index i = 0; i < in.rows(); ++i)
    for (Index j = 0; j < in.cols(); ++j) in(i, j) = cplx(g(rng), g(rng));
  h.apply(in, out);
  const Eigen::MatrixXcd ref = h.sparse() * Eigen::MatrixXcd(in);
  CHECK((Eigen::MatrixXcd(out) - ref).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("ramp schedule") {
  RampSchedule r{2.0, 0.0, 10.0, 5.0, 10.0, RampShape::SinSquared};
  CHECK(r.total() == 25.0);
  CHECK(schedule_lambda(r, 0.0) == 0.0);
  CHECK(schedule_lambda(r, 5.0) == doctest::Approx(1.0));
  CHECK(schedule_lambda(r, 12.0) == 2.0);
  CHECK(schedule_lambda(r, 25.0) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK_THROWS_AS(schedule_lambda(r, -1.0), std::domain_error);
  CHECK_THROWS_AS(schedule_lambda(r, 25.1), std::domain_error);

  r.shape = RampShape::Linear;
  CHECK(schedule_lambda(r, 2.5) == doctest::Approx(0.5));
  CHECK(schedule_lambda(r, 20.0) == doctest::Approx(1.0));

  const auto scaled = r.scaled_to(50.0);
  CHECK(scaled.t_on == doctest::Approx(20.0));
  CHECK(scaled.t_hold == doctest::Approx(10.0));

  // mirror symmetry lambda'(t) = lambda(T - t)
  RampSchedule asym{3.0, 0.0, 4.0, 1.0, 9.0, RampShape::SinSquared};
  const auto mir = asym.mirrored();
  for (double t = 0; t <= asym.total(); t += 0.7)
    CHECK(schedule_lambda(mir, t) == doctest::Approx(schedule_lambda(asym, asym.total() - t)));

  RampSchedule with_final{3.0, 1.0, 4.0, 1.0, 4.0, RampShape::Linear};
  CHECK(schedule_lambda(with_final, 9.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(with_final.mirrored(), std::invalid_argument);
}
