#pragma once

#include "diracsea/lattice.hpp"
#include "diracsea/spectral.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace diracsea {

enum class StepMethod { CrankNicolson, EigenStep };
std::string to_string(StepMethod m);

/// Evolved columns of U(t), stored site-major.
///
/// FullMatrix keeps all of U (starts at I). ColumnBlocks keeps U applied to
/// the given plus/minus basis columns; either block may have zero columns.
class Propagator {
 public:
  enum class Representation { FullMatrix, ColumnBlocks };

  static Propagator identity(Index n);
  static Propagator column_blocks(const Eigen::MatrixXcd& plus, const Eigen::MatrixXcd& minus);

  Representation representation() const { return rep_; }
  Index dimension() const { return n_; }
  /// Absolute time (hbar = 1, lattice units).
  double time() const { return t_; }
  void set_time(double t) { t_ = t; }

  const SiteBlock& full() const { return full_; }
  const SiteBlock& plus() const { return plus_; }
  const SiteBlock& minus() const { return minus_; }
  SiteBlock& full() { return full_; }
  SiteBlock& plus() { return plus_; }
  SiteBlock& minus() { return minus_; }

  /// Applies f(block) to every stored block.
  template <class F>
  void for_each_block(F&& f) {
    for (SiteBlock* b : {&full_, &plus_, &minus_})
      if (b->cols() > 0) f(*b);
  }

  /// max |C^dagger C - I| over all stored columns C (U^dagger U - I for the
  /// full matrix; the isometry defect of the evolved basis otherwise).
  double unitarity_defect() const;
  /// max | ||column|| - 1 |
  double norm_defect() const;

  std::vector<double> defect_history;

 private:
  Representation rep_ = Representation::FullMatrix;
  Index n_ = 0;
  double t_ = 0.0;
  SiteBlock full_, plus_, minus_;
};

inline constexpr double kUnitarityLimit = 1e-8;

/// One midpoint step U <- S(H_mid, dt) U. CrankNicolson solves
/// (I + i H dt/2) X = (I - i H dt/2) U by fixed-point iteration, falling back
/// to a sparse LU factorization when the iteration would converge slowly.
/// Throws NumericalError if the solve fails.
void propagate_step(const HermitianOperator& h_mid, Propagator& u, double dt,
                    StepMethod method = StepMethod::CrankNicolson);

struct EvolutionConfig {
  /// Step in units of 1/M; 0 selects min(0.02/M, 0.1/||H||).
  double dt = 0.0;
  StepMethod method = StepMethod::CrankNicolson;
  /// Steps between checkpoint files (0: none). Needs checkpoint_path.
  std::int64_t checkpoint_stride = 0;
  std::filesystem::path checkpoint_path;
  bool resume = false;
  /// Steps between recorder calls and unitarity checks (0: about 200 per run).
  std::int64_t record_stride = 0;
  /// Times (1/M) at which the instantaneous spectrum is stored.
  std::vector<double> snapshot_times;
  /// Runs of steps with identical H are applied as one exact power of the
  /// Crank-Nicolson (or exponential) step operator via one eigendecomposition.
  bool closed_form_hold = true;
  /// Abort when max |U^dagger U - I| exceeds this at a check.
  double unitarity_limit = kUnitarityLimit;
};

struct SpectrumSnapshot {
  double t_over_M = 0.0;  // time in 1/M
  double lambda = 0.0;
  Eigen::VectorXd energies;
};

struct RecordPoint {
  std::int64_t step = 0;
  double t_over_M = 0.0;
  double lambda = 0.0;
  double value = 0.0;
};

/// Scalar observable evaluated at record steps, e.g. the pair number.
using Recorder = std::function<double(const Propagator&)>;

struct EvolutionResult {
  Propagator u;
  std::vector<SpectrumSnapshot> snapshots;
  std::vector<RecordPoint> series;
  std::int64_t steps = 0;
  /// Actual step after rounding T_tot / dt up to an integer, in 1/M.
  double dt_over_M = 0.0;
  std::int64_t resumed_from_step = 0;
};

/// Step size (1/M) selected by the default rule for this run.
double default_dt(const OperatorFamily& family, double mass, const RampSchedule& sched);

/// Evolves from t = 0 to T_tot with lambda(t) from the schedule, sampling H
/// at step midpoints. With `start` the given columns are evolved, otherwise
/// the full matrix. Throws NumericalError when the unitarity defect exceeds
/// the limit (message names the step), ConfigError on a bad dt, and
/// std::runtime_error when a checkpoint cannot be written or read.
EvolutionResult evolve(const OperatorFamily& family, double mass, const RampSchedule& sched,
                       const EvolutionConfig& cfg, std::optional<Propagator> start = std::nullopt,
                       const Recorder& recorder = {});
EvolutionResult evolve(const LatticeSpec& spec, const GaussianPotential& pot, const RampSchedule& sched,
                       const EvolutionConfig& cfg, std::optional<Propagator> start = std::nullopt,
                       const Recorder& recorder = {});

/// Rows t,lambda,level_index,instantaneous_energy_over_M.
void write_snapshots_csv(const std::filesystem::path& path, const std::vector<SpectrumSnapshot>& snaps, double mass,
                         const std::string& manifest_hash = {});

}  // namespace diracsea
