#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "diracsea/evolution.hpp"
#include "diracsea/observables.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

using namespace diracsea;

namespace {

HermitianOperator from_dense(const Eigen::MatrixXcd& m) {
  std::vector<HermitianOperator::Entry> e;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      if (i != j) e.push_back({i, j, m(i, j)});
  return HermitianOperator(m.rows(), m.diagonal().real(), e);
}

Eigen::MatrixXcd random_hermitian(Index n, std::mt19937& rng) {
  std::normal_distribution<double> g;
  Eigen::MatrixXcd a(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) a(i, j) = cplx(g(rng), g(rng));
  return 0.5 * (a + a.adjoint());
}

// exp(-i H t) by the eigendecomposition of the dense matrix
Eigen::MatrixXcd exact_exp(const Eigen::MatrixXcd& h, double t) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h);
  Eigen::VectorXcd ph(h.rows());
  for (Index i = 0; i < h.rows(); ++i) ph[i] = std::polar(1.0, -es.eigenvalues()[i] * t);
  return es.eigenvectors() * ph.asDiagonal() * es.eigenvectors().adjoint();
}

double spectral_norm(const Eigen::MatrixXcd& h) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd>(h, Eigen::EigenvaluesOnly).eigenvalues().cwiseAbs().maxCoeff();
}

LatticeSpec small_lattice(int n = 7) {
  LatticeSpec s;
  s.nx = s.ny = n;
  s.mass = 0.5;
  return s;
}

GaussianPotential centred(const LatticeSpec& s) { return {s.mass, 1.5, 0.5 * (s.nx - 1), 0.5 * (s.ny - 1)}; }

}  // namespace

TEST_CASE("zero Hamiltonian leaves U unchanged") {
  const HermitianOperator zero(6, Eigen::VectorXd::Zero(6), {});
  for (StepMethod m : {StepMethod::CrankNicolson, StepMethod::EigenStep}) {
    Propagator u = Propagator::identity(6);
    for (int k = 0; k < 5; ++k) propagate_step(zero, u, 0.3, m);
    CHECK((Eigen::MatrixXcd(u.full()) - Eigen::MatrixXcd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(u.time() == doctest::Approx(1.5));
  }
}

TEST_CASE("constant diagonal H gives phases") {
  Eigen::VectorXd d(4);
  d << -1.3, -0.2, 0.4, 2.0;
  const HermitianOperator h(4, d, {});
  const double dt = 0.05;
  Propagator ex = Propagator::identity(4), cn = Propagator::identity(4);
  propagate_step(h, ex, dt, StepMethod::EigenStep);
  propagate_step(h, cn, dt, StepMethod::CrankNicolson);
  for (Index i = 0; i < 4; ++i) {
    const cplx phase = std::polar(1.0, -d[i] * dt);
    CHECK(std::abs(ex.full()(i, i) - phase) < 1e-15);
    // CN phase error (E dt)^3 / 12 per step
    const double bound = std::pow(std::abs(d[i]) * dt, 3) / 12.0 * 1.01 + 1e-16;
    CHECK(std::abs(cn.full()(i, i) - phase) <= bound);
  }
}

TEST_CASE("Crank-Nicolson converges to the exact exponential at second order") {
  std::mt19937 rng(11);
  const Eigen::MatrixXcd hd = random_hermitian(12, rng);
  const HermitianOperator h = from_dense(hd);
  const double norm = spectral_norm(hd);
  const double t_total = 50 * 0.1 / norm;
  const Eigen::MatrixXcd oracle = exact_exp(hd, t_total);

  std::vector<double> dts, errs;
  for (int steps : {50, 100, 200, 400}) {
    Propagator u = Propagator::identity(12);
    const double dt = t_total / steps;
    for (int k = 0; k < steps; ++k) propagate_step(h, u, dt);
    dts.push_back(dt);
    errs.push_back((Eigen::MatrixXcd(u.full()) - oracle).cwiseAbs().maxCoeff());
    CHECK(u.unitarity_defect() < 1e-12);
  }
  const double slope = std::log(errs.front() / errs.back()) / std::log(dts.front() / dts.back());
  CHECK(slope == doctest::Approx(2.0).epsilon(0.1));

  // EigenStep is exact for constant H
  Propagator u = Propagator::identity(12);
  for (int k = 0; k < 50; ++k) propagate_step(h, u, t_total / 50, StepMethod::EigenStep);
  CHECK((Eigen::MatrixXcd(u.full()) - oracle).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("large steps take the factorized path and stay unitary") {
  std::mt19937 rng(5);
  const Eigen::MatrixXcd hd = random_hermitian(10, rng);
  const HermitianOperator h = from_dense(hd);
  const double dt = 3.0 / spectral_norm(hd);
  Propagator u = Propagator::identity(10);
  propagate_step(h, u, dt);
  // oracle: Cayley transform from the dense inverse
  const Eigen::MatrixXcd id = Eigen::MatrixXcd::Identity(10, 10);
  const cplx ia(0.0, 0.5 * dt);
  const Eigen::MatrixXcd cayley = (id + ia * hd).inverse() * (id - ia * hd);
  CHECK((Eigen::MatrixXcd(u.full()) - cayley).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(u.unitarity_defect() < 1e-12);
}

TEST_CASE("column blocks evolve like the corresponding columns of U") {
  const LatticeSpec s = small_lattice();
  const auto pot = centred(s);
  const SpectralProjectors proj = free_projectors(s);
  RampSchedule r{3.0, 0.0, 4.0, 2.0, 4.0, RampShape::SinSquared};
  EvolutionConfig cfg;
  const auto full = evolve(s, pot, r, cfg);
  const auto blocks = evolve(s, pot, r, cfg, vacuum_blocks(proj, true, true));
  const Eigen::MatrixXcd uf = full.u.full();
  CHECK((uf * proj.minus_basis - Eigen::MatrixXcd(blocks.u.minus())).cwiseAbs().maxCoeff() < 1e-11);
  CHECK((uf * proj.plus_basis - Eigen::MatrixXcd(blocks.u.plus())).cwiseAbs().maxCoeff() < 1e-11);
  CHECK(blocks.u.norm_defect() < 1e-9);
  for (double d : blocks.u.defect_history) CHECK(d <= kUnitarityLimit);
}

TEST_CASE("closed-form hold equals explicit stepping") {
  const LatticeSpec s = small_lattice();
  const auto pot = centred(s);
  RampSchedule r{2.5, 0.0, 3.0, 6.0, 3.0, RampShape::Linear};
  EvolutionConfig a, b;
  b.closed_form_hold = false;
  const auto ua = evolve(s, pot, r, a);
  const auto ub = evolve(s, pot, r, b);
  CHECK(ua.steps == ub.steps);
  CHECK((Eigen::MatrixXcd(ua.u.full()) - Eigen::MatrixXcd(ub.u.full())).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("running the mirrored schedule backward undoes the forward run") {
  const LatticeSpec s = small_lattice();
  const auto pot = centred(s);
  const OperatorFamily fwd = lattice_family(s, pot);
  // backward in time: the mirrored schedule with generator -H
  const OperatorFamily back = [&](double l) {
    const HermitianOperator h = fwd(l);
    std::vector<HermitianOperator::Entry> e;
    for (Index i = 0; i < h.dimension(); ++i)
      for (Index k = h.row_offsets()[i]; k < h.row_offsets()[i + 1]; ++k)
        e.push_back({i, h.columns()[k], -h.values()[k]});
    return HermitianOperator(h.dimension(), -h.diagonal(), e);
  };
  RampSchedule r{3.2, 0.0, 5.0, 1.0, 8.0, RampShape::SinSquared};
  EvolutionConfig cfg;
  cfg.dt = 0.05;
  const auto f = evolve(fwd, s.mass, r, cfg);
  const auto b = evolve(back, s.mass, r.mirrored(), cfg);
  const Eigen::MatrixXcd uf = f.u.full();
  CHECK((Eigen::MatrixXcd(b.u.full()) - uf.adjoint()).cwiseAbs().maxCoeff() < 5e-7);
  Propagator start = Propagator::identity(s.dimension());
  start.full() = uf;
  const auto round_trip = evolve(back, s.mass, r.mirrored(), cfg, start);
  CHECK((Eigen::MatrixXcd(round_trip.u.full()) - Eigen::MatrixXcd::Identity(uf.rows(), uf.cols())).cwiseAbs().maxCoeff() <
        5e-7);
}

TEST_CASE("halving dt shrinks the error fourfold") {
  const LatticeSpec s = small_lattice(9);
  const auto pot = centred(s);
  const SpectralProjectors proj = free_projectors(s);
  RampSchedule r{4.0, 0.0, 6.0, 2.0, 6.0, RampShape::SinSquared};
  std::vector<Eigen::MatrixXcd> blocks;
  for (double dt : {0.04, 0.02, 0.01}) {
    EvolutionConfig cfg;
    cfg.dt = dt;
    cfg.closed_form_hold = false;
    blocks.push_back(evolve(s, pot, r, cfg, vacuum_blocks(proj, false, true)).u.minus());
  }
  const double d1 = (blocks[0] - blocks[1]).norm();
  const double d2 = (blocks[1] - blocks[2]).norm();
  CHECK(d1 / d2 == doctest::Approx(4.0).epsilon(0.1));
}

TEST_CASE("step count is rounded up and dt rescaled") {
  const LatticeSpec s = small_lattice(5);
  RampSchedule r{1.0, 0.0, 1.0, 0.0, 1.0, RampShape::Linear};
  EvolutionConfig cfg;
  cfg.dt = 0.03;
  const auto res = evolve(s, centred(s), r, cfg);
  CHECK(res.steps == 67);
  CHECK(res.dt_over_M == doctest::Approx(2.0 / 67));
  CHECK(res.u.time() == doctest::Approx(2.0 / s.mass));
  CHECK(res.series.back().step == 67);
}

TEST_CASE("accuracy guard and unitarity abort") {
  const LatticeSpec s = small_lattice(5);
  RampSchedule r{1.0, 0.0, 1.0, 0.0, 1.0, RampShape::Linear};
  EvolutionConfig cfg;
  cfg.dt = 1.0;
  CHECK_THROWS_AS(evolve(s, centred(s), r, cfg), ConfigError);

  cfg.dt = 0.0;
  cfg.unitarity_limit = 1e-300;
  try {
    evolve(s, centred(s), r, cfg);
    FAIL("expected an abort");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("at step") != std::string::npos);
  }
}

TEST_CASE("snapshots hold the instantaneous spectrum") {
  const LatticeSpec s = small_lattice(5);
  const auto pot = centred(s);
  RampSchedule r{2.0, 0.0, 2.0, 2.0, 2.0, RampShape::SinSquared};
  EvolutionConfig cfg;
  cfg.snapshot_times = {0.0, 3.0, 6.0};
  const auto res = evolve(s, pot, r, cfg);
  REQUIRE(res.snapshots.size() == 3);
  CHECK(res.snapshots[1].lambda == 2.0);
  CHECK((res.snapshots[1].energies - eigenvalues(build_hamiltonian(s, pot, 2.0))).cwiseAbs().maxCoeff() < 1e-12);
  cfg.snapshot_times = {7.0};
  CHECK_THROWS_AS(evolve(s, pot, r, cfg), ConfigError);
}

TEST_CASE("resume from a checkpoint is bit-exact") {
  const LatticeSpec s = small_lattice();
  const auto pot = centred(s);
  const SpectralProjectors proj = free_projectors(s);
  RampSchedule r{3.0, 0.0, 3.0, 4.0, 3.0, RampShape::SinSquared};
  const auto dir = std::filesystem::temp_directory_path() / "diracsea_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto file = dir / "run.ckpt";
  std::filesystem::remove(file);

  auto count = [&](const Propagator& u) { return particle_number(u, proj).total; };
  EvolutionConfig cfg;
  cfg.record_stride = 10;
  const auto reference = evolve(s, pot, r, cfg, vacuum_blocks(proj, false, true), count);

  cfg.checkpoint_stride = 40;
  cfg.checkpoint_path = file;
  int calls = 0;
  auto crashing = [&](const Propagator& u) {
    if (++calls == 12) throw std::runtime_error("interrupted");
    return count(u);
  };
  CHECK_THROWS(evolve(s, pot, r, cfg, vacuum_blocks(proj, false, true), crashing));
  REQUIRE(std::filesystem::exists(file));

  cfg.resume = true;
  const auto resumed = evolve(s, pot, r, cfg, vacuum_blocks(proj, false, true), count);
  CHECK(resumed.resumed_from_step > 0);
  const SiteBlock& a = reference.u.minus();
  const SiteBlock& b = resumed.u.minus();
  REQUIRE(a.size() == b.size());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(cplx) * static_cast<std::size_t>(a.size())) == 0);
  REQUIRE(reference.series.size() == resumed.series.size());
  for (std::size_t k = 0; k < reference.series.size(); ++k) CHECK(reference.series[k].value == resumed.series[k].value);

  // a checkpoint from another configuration is refused
  RampSchedule other = r;
  other.lambda_max = 2.0;
  CHECK_THROWS_AS(evolve(s, pot, other, cfg, vacuum_blocks(proj, false, true)), std::runtime_error);
  std::filesystem::remove_all(dir);
}
