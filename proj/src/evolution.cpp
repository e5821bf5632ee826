#include "diracsea/evolution.hpp"

#include <Eigen/SparseLU>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

namespace diracsea {

std::string to_string(StepMethod m) { return m == StepMethod::CrankNicolson ? "crank_nicolson" : "eigen_step"; }

Propagator Propagator::identity(Index n) {
  Propagator p;
  p.rep_ = Representation::FullMatrix;
  p.n_ = n;
  p.full_ = SiteBlock::Identity(n, n);
  return p;
}

Propagator Propagator::column_blocks(const Eigen::MatrixXcd& plus, const Eigen::MatrixXcd& minus) {
  if (plus.cols() > 0 && minus.cols() > 0 && plus.rows() != minus.rows())
    throw std::invalid_argument("column_blocks: plus and minus blocks differ in row count");
  Propagator p;
  p.rep_ = Representation::ColumnBlocks;
  p.n_ = plus.cols() > 0 ? plus.rows() : minus.rows();
  if (plus.cols() > 0) p.plus_ = plus;
  if (minus.cols() > 0) p.minus_ = minus;
  return p;
}

double Propagator::unitarity_defect() const {
  if (rep_ == Representation::FullMatrix) {
    const Eigen::MatrixXcd g = full_.adjoint() * full_;
    return (g - Eigen::MatrixXcd::Identity(n_, n_)).cwiseAbs().maxCoeff();
  }
  double defect = 0.0;
  for (const SiteBlock* b : {&plus_, &minus_}) {
    if (b->cols() == 0) continue;
    const Eigen::MatrixXcd g = b->adjoint() * *b;
    defect = std::max(defect, (g - Eigen::MatrixXcd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff());
  }
  if (plus_.cols() > 0 && minus_.cols() > 0)
    defect = std::max(defect, Eigen::MatrixXcd(plus_.adjoint() * minus_).cwiseAbs().maxCoeff());
  return defect;
}

double Propagator::norm_defect() const {
  double defect = 0.0;
  for (const SiteBlock* b : {&full_, &plus_, &minus_})
    if (b->cols() > 0) defect = std::max(defect, (b->colwise().norm().array() - 1.0).abs().maxCoeff());
  return defect;
}

namespace {

// Fixed-point iteration X <- B - i a H X converges with rate a ||H||; past
// this rate the LU factorization is cheaper.
constexpr double kMaxContraction = 0.3;
constexpr int kMaxIterations = 200;

void cn_sparse_lu(const HermitianOperator& h, SiteBlock& block, double dt) {
  const Index n = h.dimension();
  Eigen::SparseMatrix<cplx> a = h.sparse() * cplx(0.0, 0.5 * dt);
  Eigen::SparseMatrix<cplx> id(n, n);
  id.setIdentity();
  Eigen::SparseMatrix<cplx> lhs = id + a;
  lhs.makeCompressed();
  Eigen::SparseLU<Eigen::SparseMatrix<cplx>> lu;
  lu.compute(lhs);
  if (lu.info() != Eigen::Success) throw NumericalError("Crank-Nicolson: sparse LU factorization failed");
  const Eigen::MatrixXcd rhs = Eigen::MatrixXcd(block) - a * Eigen::MatrixXcd(block);
  Eigen::MatrixXcd x = lu.solve(rhs);
  if (lu.info() != Eigen::Success) throw NumericalError("Crank-Nicolson: sparse LU solve failed");
  block = x;
}

// Stencil of H in a diagonal gauge G with real hopping (G^dagger H G real),
// or the plain complex stencil when no such gauge exists.
template <class T>
struct Stencil {
  const std::vector<Index>* row_ptr;
  const std::vector<Index>* cols;
  std::vector<T> vals;
  const Eigen::VectorXd* diag;
};

std::optional<Eigen::VectorXcd> real_hopping_gauge(const HermitianOperator& h, std::vector<double>& real_vals) {
  const Index n = h.dimension();
  const auto& rp = h.row_offsets();
  const auto& cols = h.columns();
  const auto& vals = h.values();
  Eigen::VectorXcd g = Eigen::VectorXcd::Zero(n);
  std::vector<Index> stack;
  for (Index root = 0; root < n; ++root) {
    if (g[root] != 0.0) continue;
    g[root] = 1.0;
    stack.push_back(root);
    while (!stack.empty()) {
      const Index i = stack.back();
      stack.pop_back();
      for (Index k = rp[i]; k < rp[i + 1]; ++k)
        if (g[cols[k]] == 0.0 && vals[k] != 0.0) {
          g[cols[k]] = g[i] * std::conj(vals[k]) / std::abs(vals[k]);
          stack.push_back(cols[k]);
        }
    }
  }
  real_vals.resize(vals.size());
  for (Index i = 0; i < n; ++i)
    for (Index k = rp[i]; k < rp[i + 1]; ++k) {
      const cplx t = std::conj(g[i]) * vals[k] * g[cols[k]];
      if (std::abs(t.imag()) > 1e-14 * std::abs(t)) return std::nullopt;
      real_vals[static_cast<std::size_t>(k)] = t.real();
    }
  return g;
}

// Solves (I + i a H) X = (I - i a H) X0 in place by X <- B - i a H X.
// Returns false if the iteration stalls.
template <class T>
bool cn_iterate(const Stencil<T>& st, SiteBlock& block, double a) {
  const Index n = block.rows();
  const auto& rp = *st.row_ptr;
  const auto& cols = *st.cols;
  const Eigen::VectorXd& d = *st.diag;
  const cplx ia(0.0, a);
  Eigen::Matrix<cplx, 1, Eigen::Dynamic> row(block.cols());
  auto h_row = [&](const SiteBlock& x, Index i) {
    row.noalias() = d[i] * x.row(i);
    for (Index k = rp[i]; k < rp[i + 1]; ++k) row.noalias() += st.vals[static_cast<std::size_t>(k)] * x.row(cols[k]);
  };
  SiteBlock b(n, block.cols()), x(n, block.cols()), y(n, block.cols());
  for (Index i = 0; i < n; ++i) {
    h_row(block, i);
    b.row(i) = block.row(i) - ia * row;
    x.row(i) = 2.0 * b.row(i) - block.row(i);
  }
  const double tol = 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::sqrt(block.cwiseAbs2().maxCoeff()));
  for (int it = 0; it < kMaxIterations; ++it) {
    double change2 = 0.0;
    for (Index i = 0; i < n; ++i) {
      h_row(x, i);
      y.row(i) = b.row(i) - ia * row;
      // squared magnitudes avoid a hypot per element
      change2 = std::max(change2, (y.row(i) - x.row(i)).cwiseAbs2().maxCoeff());
    }
    x.swap(y);
    if (change2 <= tol * tol) {
      block.swap(x);
      return true;
    }
  }
  return false;
}

void cn_fixed_point(const HermitianOperator& h, Propagator& u, double dt) {
  std::vector<double> real_vals;
  bool ok = true;
  if (auto g = real_hopping_gauge(h, real_vals)) {
    const Stencil<double> st{&h.row_offsets(), &h.columns(), std::move(real_vals), &h.diagonal()};
    u.for_each_block([&](SiteBlock& blk) {
      blk = g->conjugate().asDiagonal() * blk;
      ok = ok && cn_iterate(st, blk, 0.5 * dt);
      blk = g->asDiagonal() * blk;
    });
  } else {
    const Stencil<cplx> st{&h.row_offsets(), &h.columns(), h.values(), &h.diagonal()};
    u.for_each_block([&](SiteBlock& blk) { ok = ok && cn_iterate(st, blk, 0.5 * dt); });
  }
  if (!ok) throw NumericalError("Crank-Nicolson: fixed-point iteration did not converge");
}

void eigen_apply(const EigenSystem& es, const Eigen::VectorXcd& factors, SiteBlock& block) {
  Eigen::MatrixXcd coeffs = es.states.adjoint() * block;
  coeffs = factors.asDiagonal() * coeffs;
  block.noalias() = es.states * coeffs;
}

// Eigenvalue factors of K steps of the given method for constant H.
Eigen::VectorXcd power_factors(const Eigen::VectorXd& e, double dt, std::int64_t k, StepMethod method) {
  Eigen::VectorXcd f(e.size());
  for (Index i = 0; i < e.size(); ++i) {
    // Cayley factor (1 - i E dt/2)/(1 + i E dt/2) = exp(-2 i atan(E dt/2))
    const double phase = method == StepMethod::CrankNicolson ? -2.0 * std::atan(0.5 * e[i] * dt) : -e[i] * dt;
    f[i] = std::polar(1.0, phase * static_cast<double>(k));
  }
  return f;
}

}  // namespace

void propagate_step(const HermitianOperator& h_mid, Propagator& u, double dt, StepMethod method) {
  if (h_mid.dimension() != u.dimension()) throw std::invalid_argument("propagate_step: dimension mismatch");
  if (!(dt > 0.0)) throw std::invalid_argument("propagate_step: dt must be positive");
  if (method == StepMethod::EigenStep) {
    const EigenSystem es = diagonalize(h_mid);
    const Eigen::VectorXcd f = power_factors(es.energies, dt, 1, method);
    u.for_each_block([&](SiteBlock& b) { eigen_apply(es, f, b); });
  } else if (0.5 * dt * h_mid.norm_bound() <= kMaxContraction) {
    cn_fixed_point(h_mid, u, dt);
  } else {
    u.for_each_block([&](SiteBlock& b) { cn_sparse_lu(h_mid, b, dt); });
  }
  u.set_time(u.time() + dt);
}

namespace {

double lambda_norm_bound(const OperatorFamily& family, const RampSchedule& sched) {
  // the Gershgorin bound is convex in lambda, so the extremes of the
  // schedule's range suffice
  double bound = 0.0;
  for (double l : {0.0, sched.lambda_max, sched.lambda_final}) bound = std::max(bound, family(l).norm_bound());
  return bound;
}

class Fnv {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= c[i];
      h_ *= 1099511628211ULL;
    }
  }
  template <class T>
  void value(const T& v) {
    bytes(&v, sizeof(T));
  }
  std::uint64_t digest() const { return h_; }

 private:
  std::uint64_t h_ = 1469598103934665603ULL;
};

constexpr char kMagic[8] = {'D', 'S', 'E', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointState {
  std::uint64_t hash = 0;
  std::int64_t step = 0;
  std::int64_t steps = 0;
  double dt = 0.0;
};

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void write_block(std::ostream& os, const SiteBlock& b) {
  put<std::int64_t>(os, b.rows());
  put<std::int64_t>(os, b.cols());
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(sizeof(cplx) * b.size()));
}

void read_block(std::istream& is, SiteBlock& b) {
  const auto rows = get<std::int64_t>(is);
  const auto cols = get<std::int64_t>(is);
  if (rows < 0 || cols < 0 || rows != b.rows() || cols != b.cols())
    throw std::runtime_error("checkpoint: block shape does not match this run");
  is.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(sizeof(cplx) * b.size()));
  if (!is) throw std::runtime_error("checkpoint: truncated block data");
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointState& st, const Propagator& u,
                     const std::vector<RecordPoint>& series) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string() + " for writing");
    os.write(kMagic, sizeof(kMagic));
    put(os, kCheckpointVersion);
    put(os, st.hash);
    put(os, st.step);
    put(os, st.steps);
    put(os, st.dt);
    put(os, u.time());
    put<std::uint64_t>(os, u.defect_history.size());
    for (double d : u.defect_history) put(os, d);
    put<std::uint64_t>(os, series.size());
    for (const RecordPoint& r : series) {
      put(os, r.step);
      put(os, r.t_over_M);
      put(os, r.lambda);
      put(os, r.value);
    }
    write_block(os, u.full());
    write_block(os, u.plus());
    write_block(os, u.minus());
    os.flush();
    if (!os) throw std::runtime_error("checkpoint: write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw std::runtime_error("checkpoint: cannot move " + tmp.string() + " into place: " + ec.message());
}

// Restores u and series; returns the step index stored in the file.
std::int64_t load_checkpoint(const std::filesystem::path& path, const CheckpointState& expect, Propagator& u,
                             std::vector<RecordPoint>& series) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint file");
  if (get<std::uint32_t>(is) != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version");
  if (get<std::uint64_t>(is) != expect.hash)
    throw std::runtime_error("checkpoint: " + path.string() + " belongs to a different run configuration");
  const auto step = get<std::int64_t>(is);
  if (get<std::int64_t>(is) != expect.steps || get<double>(is) != expect.dt)
    throw std::runtime_error("checkpoint: step layout does not match this run");
  u.set_time(get<double>(is));
  u.defect_history.resize(get<std::uint64_t>(is));
  for (double& d : u.defect_history) d = get<double>(is);
  series.resize(get<std::uint64_t>(is));
  for (RecordPoint& r : series) {
    r.step = get<std::int64_t>(is);
    r.t_over_M = get<double>(is);
    r.lambda = get<double>(is);
    r.value = get<double>(is);
  }
  read_block(is, u.full());
  read_block(is, u.plus());
  read_block(is, u.minus());
  if (step < 0 || step > expect.steps) throw std::runtime_error("checkpoint: step index out of range");
  return step;
}

std::uint64_t run_fingerprint(const OperatorFamily& family, const RampSchedule& sched, const EvolutionConfig& cfg,
                              std::int64_t steps, double dt, const Propagator& start) {
  Fnv f;
  f.value(start.dimension());
  f.value(static_cast<int>(start.representation()));
  f.value(steps);
  f.value(dt);
  f.value(static_cast<int>(cfg.method));
  f.value(cfg.closed_form_hold);
  f.value(sched.lambda_max);
  f.value(sched.lambda_final);
  f.value(sched.t_on);
  f.value(sched.t_hold);
  f.value(sched.t_off);
  f.value(static_cast<int>(sched.shape));
  for (double l : {0.0, sched.lambda_max}) {
    const HermitianOperator h = family(l);
    f.bytes(h.diagonal().data(), sizeof(double) * static_cast<std::size_t>(h.dimension()));
    f.bytes(h.values().data(), sizeof(cplx) * h.values().size());
  }
  for (const SiteBlock* b : {&start.full(), &start.plus(), &start.minus()}) {
    f.value(b->cols());
    f.bytes(b->data(), sizeof(cplx) * static_cast<std::size_t>(b->size()));
  }
  return f.digest();
}

// Runs of at least this many steps with identical H are applied in closed form.
constexpr std::int64_t kMinClosedFormRun = 16;

}  // namespace

double default_dt(const OperatorFamily& family, double mass, const RampSchedule& sched) {
  const double dt_abs = std::min(0.02 / mass, 0.1 / lambda_norm_bound(family, sched));
  return dt_abs * mass;
}

EvolutionResult evolve(const OperatorFamily& family, double mass, const RampSchedule& sched,
                       const EvolutionConfig& cfg, std::optional<Propagator> start, const Recorder& recorder) {
  sched.validate();
  if (!(mass > 0.0)) throw ConfigError("evolve: mass must be positive");
  if (cfg.dt < 0.0 || !std::isfinite(cfg.dt)) throw ConfigError("evolve: dt must be positive (or 0 for the default)");
  if (cfg.checkpoint_stride < 0 || cfg.record_stride < 0) throw ConfigError("evolve: strides must be >= 0");
  if (cfg.checkpoint_stride > 0 && cfg.checkpoint_path.empty())
    throw ConfigError("evolve: checkpoint_stride set without a checkpoint path");

  const double norm = lambda_norm_bound(family, sched);
  const double t_total = sched.total() / mass;
  const double dt_req = (cfg.dt > 0.0 ? cfg.dt : default_dt(family, mass, sched)) / mass;
  const auto steps = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(t_total / dt_req - 1e-9)));
  const double dt = t_total / static_cast<double>(steps);
  if (dt * norm > 0.5) {
    std::ostringstream msg;
    msg << "evolve: dt * ||H|| = " << dt * norm << " exceeds the accuracy guard 0.5 (dt = " << dt * mass
        << "/M, ||H|| <= " << norm << ")";
    throw ConfigError(msg.str());
  }
  for (double ts : cfg.snapshot_times)
    if (!(ts >= 0.0 && ts <= sched.total())) throw ConfigError("evolve: snapshot time outside [0, T_tot]");

  EvolutionResult res;
  res.u = start ? std::move(*start) : Propagator::identity(family(0.0).dimension());
  Propagator& u = res.u;
  if (u.dimension() != family(0.0).dimension()) throw std::invalid_argument("evolve: start dimension mismatch");
  u.set_time(0.0);
  res.steps = steps;
  res.dt_over_M = dt * mass;

  const std::int64_t record_stride = cfg.record_stride > 0 ? cfg.record_stride : std::max<std::int64_t>(1, steps / 200);
  auto lambda_at = [&](double t_abs) { return schedule_lambda(sched, std::min(t_abs * mass, sched.total())); };
  std::vector<double> lambda_mid(static_cast<std::size_t>(steps));
  for (std::int64_t s = 0; s < steps; ++s) lambda_mid[s] = lambda_at((static_cast<double>(s) + 0.5) * dt);

  // run_end[s] > s marks a closed-form run [.., run_end[s]) containing s
  std::vector<std::int64_t> run_end(static_cast<std::size_t>(steps), 0);
  if (cfg.closed_form_hold) {
    for (std::int64_t a = 0; a < steps;) {
      std::int64_t b = a + 1;
      while (b < steps && lambda_mid[b] == lambda_mid[a]) ++b;
      if (b - a >= kMinClosedFormRun)
        for (std::int64_t s = a; s < b; ++s) run_end[s] = b;
      a = b;
    }
  }

  const CheckpointState ck{run_fingerprint(family, sched, cfg, steps, dt, u), 0, steps, dt};
  std::int64_t step = 0;
  if (cfg.resume && !cfg.checkpoint_path.empty() && std::filesystem::exists(cfg.checkpoint_path)) {
    step = load_checkpoint(cfg.checkpoint_path, ck, u, res.series);
    res.resumed_from_step = step;
  }

  auto check = [&](std::int64_t s) {
    const double defect = u.unitarity_defect();
    u.defect_history.push_back(defect);
    if (!(defect <= cfg.unitarity_limit)) {
      std::ostringstream msg;
      msg << "unitarity defect " << defect << " exceeds " << cfg.unitarity_limit << " at step " << s << " of "
          << steps << " (t = " << static_cast<double>(s) * dt * mass << "/M)";
      throw NumericalError(msg.str());
    }
  };
  auto record = [&](std::int64_t s) {
    check(s);
    const double t = static_cast<double>(s) * dt;
    res.series.push_back({s, t * mass, lambda_at(t), recorder ? recorder(u) : 0.0});
  };
  auto is_record = [&](std::int64_t s) { return s % record_stride == 0 || s == steps; };
  auto is_checkpoint = [&](std::int64_t s) { return cfg.checkpoint_stride > 0 && s % cfg.checkpoint_stride == 0; };
  auto next_boundary = [&](std::int64_t s) {
    std::int64_t nb = std::min(steps, (s / record_stride + 1) * record_stride);
    if (cfg.checkpoint_stride > 0) nb = std::min(nb, (s / cfg.checkpoint_stride + 1) * cfg.checkpoint_stride);
    return nb;
  };

  if (step == 0) record(0);

  double cached_lambda = std::numeric_limits<double>::quiet_NaN();
  EigenSystem cached;
  while (step < steps) {
    std::int64_t next = step + 1;
    if (run_end[step] > step) {
      next = std::min(run_end[step], next_boundary(step));
      const double l = lambda_mid[step];
      if (!(l == cached_lambda)) {
        cached = diagonalize(family(l));
        cached_lambda = l;
      }
      const Eigen::VectorXcd f = power_factors(cached.energies, dt, next - step, cfg.method);
      u.for_each_block([&](SiteBlock& b) { eigen_apply(cached, f, b); });
    } else {
      propagate_step(family(lambda_mid[step]), u, dt, cfg.method);
    }
    step = next;
    // t from the step count, not accumulated, so chunking leaves no trace
    u.set_time(static_cast<double>(step) * dt);

    const bool rec = is_record(step);
    const bool ckp = is_checkpoint(step);
    if (rec) record(step);
    if (ckp) {
      if (!rec) check(step);
      CheckpointState st = ck;
      st.step = step;
      save_checkpoint(cfg.checkpoint_path, st, u, res.series);
    }
  }

  for (double ts : cfg.snapshot_times) {
    const double l = schedule_lambda(sched, ts);
    res.snapshots.push_back({ts, l, eigenvalues(family(l))});
  }
  return res;
}

EvolutionResult evolve(const LatticeSpec& spec, const GaussianPotential& pot, const RampSchedule& sched,
                       const EvolutionConfig& cfg, std::optional<Propagator> start, const Recorder& recorder) {
  return evolve(lattice_family(spec, pot), spec.mass, sched, cfg, std::move(start), recorder);
}

void write_snapshots_csv(const std::filesystem::path& path, const std::vector<SpectrumSnapshot>& snaps, double mass,
                         const std::string& manifest_hash) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (!manifest_hash.empty()) os << "# manifest " << manifest_hash << "\n";
  os << "t,lambda,level_index,instantaneous_energy_over_M\n";
  os << std::setprecision(17);
  for (const SpectrumSnapshot& s : snaps)
    for (Index i = 0; i < s.energies.size(); ++i)
      os << s.t_over_M << ',' << s.lambda << ',' << i << ',' << s.energies[i] / mass << '\n';
  if (!os) throw std::runtime_error("write to " + path.string() + " failed");
}

}  // namespace diracsea
