#include "diracsea/runner.hpp"

#include "json.hpp"
#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace diracsea {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string to_string(Command c) {
  switch (c) {
    case Command::Spectrum: return "spectrum";
    case Command::Evolve: return "evolve";
    case Command::Sweep: return "sweep";
    case Command::Dispersion: return "dispersion";
  }
  return "?";
}

Command command_from_string(const std::string& name) {
  for (Command c : {Command::Spectrum, Command::Evolve, Command::Sweep, Command::Dispersion})
    if (to_string(c) == name) return c;
  throw ConfigError("unknown command '" + name + "'");
}

// ---------------------------------------------------------------- INI

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

std::string strip_comment(std::string_view line) {
  const auto pos = line.find_first_of("#;");
  return trim(pos == std::string_view::npos ? line : line.substr(0, pos));
}

}  // namespace

IniDocument IniDocument::parse(std::string_view text, std::string source) {
  IniDocument doc;
  doc.source_ = std::move(source);
  std::string current;
  int lineno = 0;
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) {
    throw ConfigError(doc.source_ + ":" + std::to_string(lineno) + ": " + what);
  };
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string line = strip_comment(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      current = lower(trim(std::string_view(line).substr(1, line.size() - 2)));
      if (current.empty()) fail("empty section name");
      if (doc.sections_.count(current)) fail("duplicate section [" + current + "]");
      doc.sections_[current];
      doc.section_lines_[current] = lineno;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    if (current.empty()) fail("key outside any section");
    const std::string key = lower(trim(std::string_view(line).substr(0, eq)));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) fail("missing key before '='");
    if (value.empty()) fail("key '" + key + "' has no value");
    Section& sec = doc.sections_[current];
    if (sec.count(key)) fail("duplicate key '" + key + "' in [" + current + "]");
    sec[key] = {value, lineno};
  }
  return doc;
}

const IniDocument::Section& IniDocument::section(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw ConfigError(source_ + ": missing section [" + name + "]");
  return it->second;
}

std::vector<std::string> IniDocument::section_names() const {
  std::vector<std::string> out;
  for (const auto& [name, sec] : sections_) out.push_back(name);
  return out;
}

namespace {

/// Typed access to one section; finish() rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const IniDocument& doc, std::string name) : doc_(doc), name_(std::move(name)), sec_(doc.section(name_)) {}

  bool has(const std::string& key) const { return sec_.count(key) > 0; }

  double number(const std::string& key) { return parse_number(key, require(key)); }
  double number_or(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }

  long long integer(const std::string& key) { return parse_integer(key, require(key)); }
  long long integer_or(const std::string& key, long long fallback) { return has(key) ? integer(key) : fallback; }

  std::string word(const std::string& key) { return lower(require(key).text); }
  std::string word_or(const std::string& key, const std::string& fallback) { return has(key) ? word(key) : fallback; }

  std::vector<double> numbers(const std::string& key) {
    const IniDocument::Value& v = require(key);
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= v.text.size()) {
      const auto comma = v.text.find(',', start);
      const std::string item = trim(std::string_view(v.text).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (item.empty()) fail(v, "key '" + key + "': empty list element");
      out.push_back(parse_number(key, {item, v.line}));
      start = comma == std::string::npos ? v.text.size() + 1 : comma + 1;
    }
    return out;
  }

  template <class T>
  T choice(const std::string& key, const std::vector<std::pair<std::string, T>>& options) {
    const IniDocument::Value& v = require(key);
    const std::string w = lower(v.text);
    std::string names;
    for (const auto& [name, value] : options) {
      if (w == name) return value;
      names += (names.empty() ? "" : ", ") + name;
    }
    fail(v, "key '" + key + "': unknown value '" + v.text + "' (expected one of " + names + ")");
  }

  [[noreturn]] void fail(const IniDocument::Value& v, const std::string& what) const {
    throw ConfigError(doc_.source() + ":" + std::to_string(v.line) + ": [" + name_ + "] " + what);
  }
  [[noreturn]] void fail_key(const std::string& key, const std::string& what) {
    if (has(key)) fail(sec_.at(key), "key '" + key + "': " + what);
    throw ConfigError(doc_.source() + ": [" + name_ + "] " + what);
  }

  void finish() const {
    for (const auto& [key, v] : sec_)
      if (!used_.count(key)) fail(v, "unknown key '" + key + "'");
  }

 private:
  const IniDocument::Value& require(const std::string& key) {
    used_.insert(key);
    auto it = sec_.find(key);
    if (it == sec_.end())
      throw ConfigError(doc_.source() + ":" + std::to_string(doc_.section_line(name_)) + ": [" + name_ +
                        "] missing key '" + key + "'");
    return it->second;
  }

  double parse_number(const std::string& key, const IniDocument::Value& v) const {
    double x = 0.0;
    const char* b = v.text.data();
    const char* e = b + v.text.size();
    auto [p, ec] = std::from_chars(b, e, x);
    if (ec != std::errc() || p != e || !std::isfinite(x))
      fail(v, "key '" + key + "': expected a finite number, got '" + v.text + "'");
    return x;
  }

  long long parse_integer(const std::string& key, const IniDocument::Value& v) const {
    long long x = 0;
    const char* b = v.text.data();
    const char* e = b + v.text.size();
    auto [p, ec] = std::from_chars(b, e, x);
    if (ec != std::errc() || p != e) fail(v, "key '" + key + "': expected an integer, got '" + v.text + "'");
    return x;
  }

  const IniDocument& doc_;
  std::string name_;
  const IniDocument::Section& sec_;
  std::set<std::string> used_;
};

const std::set<std::string> kKnownSections = {"lattice", "potential", "schedule", "evolution",
                                              "spectrum", "sweep", "dispersion"};

void require_sections(const IniDocument& doc, Command cmd) {
  std::vector<std::string> need = {"lattice"};
  switch (cmd) {
    case Command::Spectrum: need.insert(need.end(), {"potential", "spectrum"}); break;
    case Command::Evolve: need.insert(need.end(), {"potential", "schedule"}); break;
    case Command::Sweep: need.insert(need.end(), {"potential", "schedule", "sweep"}); break;
    case Command::Dispersion: need.push_back("dispersion"); break;
  }
  for (const std::string& s : need)
    if (!doc.has(s)) throw ConfigError(doc.source() + ": missing section [" + s + "] required by '" + to_string(cmd) + "'");
}

int checked_int(SectionReader& r, const std::string& key, long long v, long long lo, long long hi) {
  if (v < lo || v > hi)
    r.fail_key(key, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(v);
}

void parse_lattice(const IniDocument& doc, Command cmd, RunConfig& cfg) {
  SectionReader r(doc, "lattice");
  LatticeSpec& s = cfg.lattice;
  s.nx = checked_int(r, "nx", r.integer("nx"), 3, 1000);
  s.ny = checked_int(r, "ny", r.integer("ny"), 3, 1000);
  s.mass = r.number("mass");
  s.boundary = r.choice<Boundary>("boundary", {{"open", Boundary::Open}, {"periodic", Boundary::Periodic}});
  s.copy = r.choice<Copy>("copy", {{"a", Copy::A}, {"b", Copy::B}});
  r.finish();
  // the dispersion relation is defined down to the massless limit
  if (cmd == Command::Dispersion) {
    if (s.mass < 0.0) r.fail_key("mass", "must be >= 0");
    LatticeSpec probe = s;
    probe.mass = 1.0;
    try {
      probe.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(doc.source() + ": [lattice] " + e.what());
    }
    return;
  }
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(doc.source() + ": [lattice] " + e.what());
  }
}

void parse_potential(const IniDocument& doc, RunConfig& cfg) {
  SectionReader r(doc, "potential");
  cfg.v0_over_M = r.number("v0");
  cfg.potential.v0 = cfg.v0_over_M * cfg.lattice.mass;
  cfg.potential.sigma = r.number("sigma");
  cfg.potential.center_x = r.number("center_x");
  cfg.potential.center_y = r.number("center_y");
  r.finish();
  if (cfg.v0_over_M < 0.0) r.fail_key("v0", "must be >= 0");
  // a massless lattice is only read by the dispersion, which ignores the well
  if (cfg.lattice.mass == 0.0) return;
  try {
    cfg.potential.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(doc.source() + ": [potential] " + e.what());
  }
}

void parse_schedule(const IniDocument& doc, RunConfig& cfg) {
  SectionReader r(doc, "schedule");
  RampSchedule s;
  s.lambda_max = r.number("lambda_max");
  s.lambda_final = r.number_or("lambda_final", 0.0);
  s.t_on = r.number("t_on");
  s.t_hold = r.number("t_hold");
  s.t_off = r.number("t_off");
  s.shape = r.choice<RampShape>("shape", {{"sin2", RampShape::SinSquared},
                                          {"sin_squared", RampShape::SinSquared},
                                          {"linear", RampShape::Linear}});
  r.finish();
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(doc.source() + ": [schedule] " + e.what());
  }
  cfg.schedule = s;
}

void parse_evolution(const IniDocument& doc, RunConfig& cfg) {
  EvolutionSettings& e = cfg.evolution;
  if (!doc.has("evolution")) return;
  SectionReader r(doc, "evolution");
  e.dt = r.number_or("dt", 0.0);
  if (r.has("method"))
    e.method = r.choice<StepMethod>("method", {{"crank_nicolson", StepMethod::CrankNicolson},
                                               {"cn", StepMethod::CrankNicolson},
                                               {"eigen_step", StepMethod::EigenStep}});
  e.checkpoint_stride = r.integer_or("checkpoint_stride", e.checkpoint_stride);
  e.record_stride = r.integer_or("record_stride", e.record_stride);
  e.snapshot_count = checked_int(r, "snapshot_count", r.integer_or("snapshot_count", e.snapshot_count), 0, 100000);
  if (r.has("closed_form_hold"))
    e.closed_form_hold = r.choice<bool>("closed_form_hold", {{"true", true}, {"false", false}});
  r.finish();
  if (e.dt < 0.0) r.fail_key("dt", "must be >= 0 (0 selects the default)");
  if (e.checkpoint_stride < 0) r.fail_key("checkpoint_stride", "must be >= 0");
  if (e.record_stride < 0) r.fail_key("record_stride", "must be >= 0");
}

void parse_spectrum(const IniDocument& doc, RunConfig& cfg) {
  SectionReader r(doc, "spectrum");
  SpectrumSettings s;
  if (r.has("lambdas")) {
    if (r.has("lambda_min") || r.has("lambda_max") || r.has("lambda_step"))
      r.fail_key("lambdas", "give either 'lambdas' or lambda_min/lambda_max/lambda_step, not both");
    s.lambdas = r.numbers("lambdas");
  } else {
    const double lo = r.number("lambda_min");
    const double hi = r.number("lambda_max");
    const double step = r.number("lambda_step");
    if (!(step > 0.0)) r.fail_key("lambda_step", "must be positive");
    if (hi < lo) r.fail_key("lambda_max", "must be >= lambda_min");
    const auto n = static_cast<long long>(std::floor((hi - lo) / step + 1e-9));
    if (n > 100000) r.fail_key("lambda_step", "grid would exceed 100000 points");
    for (long long i = 0; i <= n; ++i) s.lambdas.push_back(lo + static_cast<double>(i) * step);
  }
  r.finish();
  for (std::size_t k = 1; k < s.lambdas.size(); ++k)
    if (!(s.lambdas[k] > s.lambdas[k - 1])) r.fail_key("lambdas", "lambda grid must be strictly ascending");
  cfg.spectrum = s;
}

void parse_sweep(const IniDocument& doc, RunConfig& cfg) {
  SectionReader r(doc, "sweep");
  SweepSettings s;
  s.lambda_max_list = r.numbers("lambda_max_list");
  s.t_tot_list = r.numbers("t_tot_list");
  s.jobs = checked_int(r, "jobs", r.integer_or("jobs", 1), 1, 1024);
  r.finish();
  for (double t : s.t_tot_list)
    if (!(t > 0.0)) r.fail_key("t_tot_list", "every T_tot must be positive");
  for (double l : s.lambda_max_list)
    if (l < 0.0) r.fail_key("lambda_max_list", "lambda_max must be >= 0");
  cfg.sweep = s;
}

void parse_dispersion(const IniDocument& doc, RunConfig& cfg) {
  SectionReader r(doc, "dispersion");
  DispersionSettings s;
  s.k_points = checked_int(r, "k_points", r.integer("k_points"), 1, 4001);
  r.finish();
  cfg.dispersion = s;
}

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

std::string fmt_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt(v[i]);
  return out;
}

}  // namespace

RunConfig parse_config(std::string_view text, Command cmd, const std::string& source) {
  const IniDocument doc = IniDocument::parse(text, source);
  for (const std::string& name : doc.section_names())
    if (!kKnownSections.count(name))
      throw ConfigError(source + ":" + std::to_string(doc.section_line(name)) + ": unknown section [" + name + "]");
  require_sections(doc, cmd);

  RunConfig cfg;
  parse_lattice(doc, cmd, cfg);
  if (doc.has("potential")) parse_potential(doc, cfg);
  if (doc.has("schedule")) parse_schedule(doc, cfg);
  parse_evolution(doc, cfg);
  if (doc.has("spectrum")) parse_spectrum(doc, cfg);
  if (doc.has("sweep")) parse_sweep(doc, cfg);
  if (doc.has("dispersion")) parse_dispersion(doc, cfg);
  return cfg;
}

RunConfig load_config(const fs::path& path, Command cmd) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), cmd, path.string());
}

std::string RunConfig::canonical() const {
  std::ostringstream os;
  os << "version = " << kVersion << "\n";
  os << "[lattice]\nnx = " << lattice.nx << "\nny = " << lattice.ny << "\nmass = " << fmt(lattice.mass)
     << "\nboundary = " << to_string(lattice.boundary) << "\ncopy = " << to_string(lattice.copy) << "\n";
  os << "[potential]\nv0 = " << fmt(v0_over_M) << "\nsigma = " << fmt(potential.sigma)
     << "\ncenter_x = " << fmt(potential.center_x) << "\ncenter_y = " << fmt(potential.center_y) << "\n";
  if (schedule)
    os << "[schedule]\nlambda_max = " << fmt(schedule->lambda_max) << "\nlambda_final = " << fmt(schedule->lambda_final)
       << "\nt_on = " << fmt(schedule->t_on) << "\nt_hold = " << fmt(schedule->t_hold)
       << "\nt_off = " << fmt(schedule->t_off) << "\nshape = " << to_string(schedule->shape) << "\n";
  os << "[evolution]\ndt = " << fmt(evolution.dt) << "\nmethod = " << to_string(evolution.method)
     << "\ncheckpoint_stride = " << evolution.checkpoint_stride << "\nrecord_stride = " << evolution.record_stride
     << "\nsnapshot_count = " << evolution.snapshot_count
     << "\nclosed_form_hold = " << (evolution.closed_form_hold ? "true" : "false") << "\n";
  if (spectrum) os << "[spectrum]\nlambdas = " << fmt_list(spectrum->lambdas) << "\n";
  if (sweep)
    os << "[sweep]\nlambda_max_list = " << fmt_list(sweep->lambda_max_list)
       << "\nt_tot_list = " << fmt_list(sweep->t_tot_list) << "\n";
  if (dispersion) os << "[dispersion]\nk_points = " << dispersion->k_points << "\n";
  return os.str();
}

std::string RunConfig::hash() const { return sha256_hex(canonical()); }

std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 digest failed");
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(md[i]);
  return os.str();
}

// ---------------------------------------------------------------- output

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

ojson config_json(const RunConfig& cfg) {
  ojson j;
  j["lattice"] = {{"nx", cfg.lattice.nx},
                  {"ny", cfg.lattice.ny},
                  {"mass", cfg.lattice.mass},
                  {"boundary", to_string(cfg.lattice.boundary)},
                  {"copy", to_string(cfg.lattice.copy)}};
  j["potential"] = {{"v0_over_M", cfg.v0_over_M},
                    {"v0", cfg.potential.v0},
                    {"sigma", cfg.potential.sigma},
                    {"center_x", cfg.potential.center_x},
                    {"center_y", cfg.potential.center_y}};
  if (cfg.schedule)
    j["schedule"] = {{"lambda_max", cfg.schedule->lambda_max}, {"lambda_final", cfg.schedule->lambda_final},
                     {"t_on", cfg.schedule->t_on},             {"t_hold", cfg.schedule->t_hold},
                     {"t_off", cfg.schedule->t_off},           {"shape", to_string(cfg.schedule->shape)}};
  j["evolution"] = {{"dt", cfg.evolution.dt},
                    {"method", to_string(cfg.evolution.method)},
                    {"checkpoint_stride", cfg.evolution.checkpoint_stride},
                    {"record_stride", cfg.evolution.record_stride},
                    {"snapshot_count", cfg.evolution.snapshot_count},
                    {"closed_form_hold", cfg.evolution.closed_form_hold}};
  if (cfg.spectrum) j["spectrum"] = {{"lambdas", cfg.spectrum->lambdas}};
  if (cfg.sweep)
    j["sweep"] = {{"lambda_max_list", cfg.sweep->lambda_max_list},
                  {"t_tot_list", cfg.sweep->t_tot_list},
                  {"jobs", cfg.sweep->jobs}};
  if (cfg.dispersion) j["dispersion"] = {{"k_points", cfg.dispersion->k_points}};
  return j;
}

/// manifest.json, rewritten at start and end of a command.
class Manifest {
 public:
  Manifest(const RunConfig& cfg, Command cmd, fs::path dir) : dir_(std::move(dir)), start_(std::chrono::steady_clock::now()) {
    j_["version"] = kVersion;
    j_["hash"] = cfg.hash();
    j_["command"] = to_string(cmd);
    j_["config"] = config_json(cfg);
    j_["derived"] = ojson::object();
    j_["derived"]["dimension"] = cfg.lattice.dimension();
    j_["output_dir"] = fs::absolute(dir_).string();
    j_["started_utc"] = utc_now();
    j_["status"] = "running";
  }

  ojson& derived() { return j_["derived"]; }

  void write(const std::string& status, const std::string& error = {}) {
    j_["status"] = status;
    if (!error.empty())
      j_["error"] = error;
    else
      j_.erase("error");
    if (status != "running") {
      j_["finished_utc"] = utc_now();
      j_["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }
    const fs::path tmp = dir_ / "manifest.json.tmp";
    {
      std::ofstream os(tmp);
      if (!os) throw std::runtime_error("cannot write " + tmp.string());
      os << j_.dump(2) << "\n";
    }
    fs::rename(tmp, dir_ / "manifest.json");
  }

 private:
  fs::path dir_;
  ojson j_;
  std::chrono::steady_clock::time_point start_;
};

/// CSV with the manifest comment and header; written to a temporary name
/// and renamed on close so a crash never leaves a truncated file.
class CsvWriter {
 public:
  CsvWriter(fs::path path, const std::string& hash, const std::string& header)
      : path_(std::move(path)), tmp_(path_.string() + ".tmp"), os_(tmp_) {
    if (!os_) throw std::runtime_error("cannot write " + tmp_.string());
    os_ << "# manifest " << hash << "\n" << header << "\n" << std::setprecision(17);
  }
  std::ostream& out() { return os_; }
  void close() {
    os_.close();
    if (!os_) throw std::runtime_error("write to " + tmp_.string() + " failed");
    fs::rename(tmp_, path_);
  }

 private:
  fs::path path_;
  fs::path tmp_;
  std::ofstream os_;
};

void write_production(const fs::path& path, const std::string& hash, const PairSpectrum& ps, double mass) {
  CsvWriter w(path, hash, "kind,index,energy_over_M,occupation");
  for (const LevelOccupation& o : ps.particles)
    w.out() << "particle," << o.index << ',' << o.energy / mass << ',' << o.occupation << '\n';
  for (const LevelOccupation& o : ps.antiparticles)
    w.out() << "antiparticle," << o.index << ',' << o.energy / mass << ',' << o.occupation << '\n';
  w.close();
}

struct PointResult {
  EvolveOutcome outcome;
  std::string status = "pending";
  std::string message;
};

/// One evolution with full outputs in `dir`.
EvolveOutcome evolve_into(const RunConfig& cfg, const RampSchedule& sched, const fs::path& dir, bool resume,
                          bool with_snapshots, const std::string& hash, const std::function<void(double, double)>& progress,
                          ojson* derived) {
  const double mass = cfg.lattice.mass;
  const HamiltonianFamily fam(cfg.lattice, cfg.potential);
  const OperatorFamily family = [&fam](double l) { return fam.at(l); };
  const SpectralProjectors proj = free_projectors(diagonalize(fam.free_operator(), 0.0), mass);

  EvolutionConfig ec;
  ec.dt = cfg.evolution.dt;
  ec.method = cfg.evolution.method;
  ec.checkpoint_stride = cfg.evolution.checkpoint_stride;
  ec.checkpoint_path = dir / "checkpoint.bin";
  ec.resume = resume;
  ec.record_stride = cfg.evolution.record_stride;
  ec.closed_form_hold = cfg.evolution.closed_form_hold;
  if (with_snapshots && cfg.evolution.snapshot_count > 0) {
    const int n = cfg.evolution.snapshot_count;
    for (int i = 0; i < n; ++i)
      ec.snapshot_times.push_back(n == 1 ? 0.0 : sched.total() * static_cast<double>(i) / (n - 1));
  }

  const Recorder recorder = [&](const Propagator& u) {
    const double n = particle_number(u, proj, ec.unitarity_limit).total;
    if (progress) progress(u.time() * mass, n);
    return n;
  };
  const EvolutionResult run = evolve(family, mass, sched, ec, vacuum_blocks(proj, true, true), recorder);
  const PairProductionReport report = production_report(run, proj);

  {
    CsvWriter w(dir / "timeseries.csv", hash, "t,lambda,N");
    for (std::size_t i = 0; i < report.N_of_t.size(); ++i)
      w.out() << report.times_over_M[i] << ',' << report.lambdas[i] << ',' << report.N_of_t[i] << '\n';
    w.close();
  }
  write_production(dir / "production.csv", hash, *report.spectrum, mass);
  if (sched.lambda_final != 0.0)
    write_production(dir / "production_instantaneous.csv", hash,
                     instantaneous_spectrum(run.u, proj, diagonalize(fam.at(sched.lambda_final), sched.lambda_final)),
                     mass);
  if (with_snapshots) {
    const fs::path tmp = dir / "snapshots.csv.tmp";
    write_snapshots_csv(tmp, run.snapshots, mass, hash);
    fs::rename(tmp, dir / "snapshots.csv");
  }

  EvolveOutcome out;
  out.N_final = report.N_final;
  out.steps = run.steps;
  out.dt_over_M = run.dt_over_M;
  out.resumed_from_step = run.resumed_from_step;
  if (derived) {
    (*derived)["dt_over_M"] = run.dt_over_M;
    (*derived)["steps"] = run.steps;
    (*derived)["N_final"] = report.N_final;
    (*derived)["resumed_from_step"] = run.resumed_from_step;
    if (const auto er = resonance_energy(*report.spectrum, mass)) (*derived)["resonance_energy_over_M"] = *er / mass;
  }
  return out;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());
}

void log_line(const CommandOptions& opts, const std::string& line) {
  static std::mutex mu;
  if (!opts.log) return;
  std::lock_guard<std::mutex> lock(mu);
  *opts.log << line << std::endl;
}

std::optional<double> bracketed_lambda_cr(const RunConfig& cfg, double lo, double hi) {
  if (!(hi > lo)) return std::nullopt;
  try {
    return find_lambda_critical(cfg.lattice, cfg.potential, 1e-6, lo, hi);
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

}  // namespace

SpectrumOutcome run_spectrum(const RunConfig& cfg, const CommandOptions& opts) {
  if (!cfg.spectrum) throw ConfigError("spectrum: missing [spectrum] section");
  ensure_dir(opts.out_dir);
  const std::string hash = cfg.hash();
  Manifest manifest(cfg, Command::Spectrum, opts.out_dir);
  manifest.write("running");
  try {
    const std::vector<double>& grid = cfg.spectrum->lambdas;
    const SpectralFlow flow = spectral_flow(cfg.lattice, cfg.potential, grid);
    const double mass = cfg.lattice.mass;
    SpectrumOutcome out;
    {
      CsvWriter w(opts.out_dir / "spectrum.csv", hash, "lambda,index,energy_over_M,ipr,label");
      for (std::size_t k = 0; k < grid.size(); ++k) {
        const StateClassification c = classify_levels(flow.energies[k], flow.iprs[k], cfg.lattice);
        for (Index i = 0; i < flow.energies[k].size(); ++i, ++out.rows)
          w.out() << grid[k] << ',' << i << ',' << flow.energies[k][i] / mass << ',' << c.ipr[i] << ','
                  << to_string(c.labels[i]) << '\n';
      }
      w.close();
    }
    {
      CsvWriter w(opts.out_dir / "branches.csv", hash, "branch_id,lambda,energy_over_M");
      for (const Branch& b : flow.branches)
        for (std::size_t k = 0; k < grid.size(); ++k) w.out() << b.id << ',' << grid[k] << ',' << b.energy[k] / mass << '\n';
      w.close();
    }
    out.has_breaks = flow.has_breaks();
    out.lambda_cr = bracketed_lambda_cr(cfg, grid.front(), grid.back());
    manifest.derived()["grid_points"] = grid.size();
    manifest.derived()["branch_breaks"] = out.has_breaks;
    if (out.lambda_cr) {
      manifest.derived()["lambda_cr"] = *out.lambda_cr;
      log_line(opts, "lambda_cr = " + fmt(*out.lambda_cr));
    } else {
      log_line(opts, "lambda_cr not bracketed in [" + fmt(grid.front()) + ", " + fmt(grid.back()) + "]");
    }
    if (out.has_breaks) log_line(opts, "warning: ambiguous branch continuation; branches.csv has flagged breaks");
    manifest.write("complete");
    return out;
  } catch (const std::exception& e) {
    manifest.write("incomplete", e.what());
    throw;
  }
}

EvolveOutcome run_evolve(const RunConfig& cfg, const CommandOptions& opts) {
  if (!cfg.schedule) throw ConfigError("evolve: missing [schedule] section");
  ensure_dir(opts.out_dir);
  const fs::path marker = opts.out_dir / "INCOMPLETE";
  Manifest manifest(cfg, Command::Evolve, opts.out_dir);
  manifest.write("running");
  try {
    const EvolveOutcome out =
        evolve_into(cfg, *cfg.schedule, opts.out_dir, opts.resume, true, cfg.hash(), opts.progress, &manifest.derived());
    fs::remove(marker);
    manifest.write("complete");
    std::ostringstream line;
    line << std::setprecision(10) << "N_final = " << out.N_final << " (steps " << out.steps << ", dt = " << out.dt_over_M
         << "/M";
    if (out.resumed_from_step > 0) line << ", resumed from step " << out.resumed_from_step;
    line << ")";
    log_line(opts, line.str());
    return out;
  } catch (const std::exception& e) {
    {
      std::ofstream os(marker);
      os << e.what() << "\n";
    }
    manifest.write("incomplete", e.what());
    throw;
  }
}

int resolve_jobs(std::optional<int> cli, int config_jobs) {
  if (cli) {
    if (*cli < 1) throw ConfigError("--jobs must be >= 1");
    return *cli;
  }
  if (const char* env = std::getenv("DIRACSEA_JOBS"); env && *env) {
    int v = 0;
    const std::string_view s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v < 1)
      throw ConfigError("DIRACSEA_JOBS must be a positive integer, got '" + std::string(s) + "'");
    return v;
  }
  return std::max(1, config_jobs);
}

namespace {

std::map<std::string, std::string> read_status(const fs::path& path) {
  std::map<std::string, std::string> kv;
  std::ifstream is(path);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_status(const fs::path& dir, const PointResult& r, double lambda_max, double t_tot) {
  const fs::path tmp = dir / "status.tmp";
  {
    std::ofstream os(tmp);
    os << std::setprecision(17) << "status=" << r.status << "\nlambda_max=" << lambda_max << "\nT_tot=" << t_tot
       << "\nN_final=" << r.outcome.N_final << "\nsteps=" << r.outcome.steps << "\ndt_over_M=" << r.outcome.dt_over_M
       << "\n";
    if (!r.message.empty()) os << "message=" << r.message << "\n";
  }
  fs::rename(tmp, dir / "status");
}

std::string point_name(std::size_t i, std::size_t j) {
  std::ostringstream os;
  os << "l" << std::setw(3) << std::setfill('0') << i << "_t" << std::setw(3) << std::setfill('0') << j;
  return os.str();
}

}  // namespace

SweepOutcome run_sweep(const RunConfig& cfg, const CommandOptions& opts) {
  if (!cfg.schedule || !cfg.sweep) throw ConfigError("sweep: needs [schedule] and [sweep] sections");
  if (!(cfg.schedule->total() > 0.0)) throw ConfigError("sweep: [schedule] durations must not all be zero");
  const SweepSettings& plan = cfg.sweep.value();
  ensure_dir(opts.out_dir);
  const std::string hash = cfg.hash();
  const int jobs = resolve_jobs(opts.jobs, plan.jobs);
  Manifest manifest(cfg, Command::Sweep, opts.out_dir);
  manifest.derived()["jobs"] = jobs;
  manifest.write("running");

  struct Point {
    std::size_t i, j;
    RampSchedule sched;
    fs::path dir;
  };
  std::vector<Point> points;
  for (std::size_t i = 0; i < plan.lambda_max_list.size(); ++i)
    for (std::size_t j = 0; j < plan.t_tot_list.size(); ++j) {
      RampSchedule s = cfg.schedule->scaled_to(plan.t_tot_list[j]);
      s.lambda_max = plan.lambda_max_list[i];
      points.push_back({i, j, s, opts.out_dir / "points" / point_name(i, j)});
    }
  std::vector<PointResult> results(points.size());

  std::atomic<std::size_t> next{0};
  std::atomic<int> skipped{0};
  auto worker = [&]() {
    for (std::size_t p = next++; p < points.size(); p = next++) {
      const Point& pt = points[p];
      PointResult& r = results[p];
      try {
        ensure_dir(pt.dir);
        if (opts.resume && fs::exists(pt.dir / "status")) {
          const auto kv = read_status(pt.dir / "status");
          if (kv.count("status") && kv.at("status") == "ok") {
            r.status = "ok";
            r.outcome.N_final = std::stod(kv.at("N_final"));
            r.outcome.steps = std::stoll(kv.at("steps"));
            r.outcome.dt_over_M = std::stod(kv.at("dt_over_M"));
            ++skipped;
            continue;
          }
        }
        fs::remove(pt.dir / "status");
        r.outcome = evolve_into(cfg, pt.sched, pt.dir, opts.resume, false, hash, {}, nullptr);
        r.status = "ok";
      } catch (const ConfigError& e) {
        r.status = "config_error";
        r.message = e.what();
      } catch (const NumericalError& e) {
        r.status = "numerical_error";
        r.message = e.what();
      } catch (const std::exception& e) {
        r.status = "error";
        r.message = e.what();
      }
      try {
        write_status(pt.dir, r, pt.sched.lambda_max, plan.t_tot_list[pt.j]);
      } catch (const std::exception& e) {
        r.status = "error";
        r.message = e.what();
      }
      std::ostringstream line;
      line << std::setprecision(8) << "point lambda_max=" << pt.sched.lambda_max << " T_tot=" << plan.t_tot_list[pt.j]
           << ": " << r.status;
      if (r.status == "ok") line << " N_final=" << r.outcome.N_final;
      else line << " (" << r.message << ")";
      log_line(opts, line.str());
    }
  };
  {
    std::vector<std::thread> pool;
    const auto n = std::min<std::size_t>(static_cast<std::size_t>(jobs), points.size());
    for (std::size_t k = 0; k < n; ++k) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  SweepOutcome out;
  out.skipped = skipped;
  for (const PointResult& r : results) {
    if (r.status != "ok") ++out.failed;
  }
  out.computed = static_cast<int>(points.size()) - out.skipped - out.failed;

  {
    CsvWriter w(opts.out_dir / "sweep.csv", hash, "lambda_max,T_tot,N_final,status");
    for (std::size_t p = 0; p < points.size(); ++p) {
      w.out() << points[p].sched.lambda_max << ',' << plan.t_tot_list[points[p].j] << ',';
      if (results[p].status == "ok")
        w.out() << results[p].outcome.N_final;
      else
        w.out() << "nan";
      w.out() << ',' << results[p].status << '\n';
    }
    w.close();
  }

  // the fit model per column depends on which side of the threshold it lies
  std::optional<double> lambda_cr;
  try {
    lambda_cr = find_lambda_critical(cfg.lattice, cfg.potential, 1e-6);
  } catch (const NumericalError&) {
  }
  if (lambda_cr) manifest.derived()["lambda_cr"] = *lambda_cr;
  {
    CsvWriter w(opts.out_dir / "scaling.csv", hash, "T_tot,N_final,alpha_fit,N_spont_fit,residual");
    for (std::size_t i = 0; i < plan.lambda_max_list.size(); ++i) {
      const double lm = plan.lambda_max_list[i];
      const bool super = lambda_cr && lm > *lambda_cr;
      std::vector<std::pair<double, double>> series;
      for (std::size_t p = 0; p < points.size(); ++p)
        if (points[p].i == i && results[p].status == "ok")
          series.emplace_back(plan.t_tot_list[points[p].j], results[p].outcome.N_final);
      w.out() << "# lambda_max=" << lm << " mode=" << (super ? "supercritical" : "subcritical") << '\n';
      std::optional<ScalingFit> fit;
      try {
        fit = split_spontaneous(series, super ? FitMode::Supercritical : FitMode::Subcritical);
        if (!fit->warning.empty()) w.out() << "# warning: " << fit->warning << '\n';
      } catch (const std::exception& e) {
        w.out() << "# fit skipped: " << e.what() << '\n';
      }
      const double nan = std::numeric_limits<double>::quiet_NaN();
      for (const auto& [t, n] : series)
        w.out() << t << ',' << n << ',' << (fit ? fit->alpha : nan) << ',' << (fit ? fit->n_spont : nan) << ','
                << (fit ? fit->residual : nan) << '\n';
    }
    w.close();
  }

  manifest.derived()["points"] = points.size();
  manifest.derived()["computed"] = out.computed;
  manifest.derived()["skipped"] = out.skipped;
  manifest.derived()["failed"] = out.failed;
  manifest.write(out.failed ? "partial" : "complete");
  log_line(opts, "sweep: " + std::to_string(out.computed) + " computed, " + std::to_string(out.skipped) + " skipped, " +
                     std::to_string(out.failed) + " failed");
  return out;
}

std::size_t run_dispersion(const RunConfig& cfg, const CommandOptions& opts) {
  if (!cfg.dispersion) throw ConfigError("dispersion: missing [dispersion] section");
  ensure_dir(opts.out_dir);
  Manifest manifest(cfg, Command::Dispersion, opts.out_dir);
  manifest.write("running");
  const int n = cfg.dispersion->k_points;
  const double pi = std::numbers::pi / kLatticeConstant;
  std::size_t rows = 0;
  CsvWriter w(opts.out_dir / "dispersion.csv", cfg.hash(), "kx,ky,E_plus,E_minus");
  auto k_at = [&](int i) { return n == 1 ? 0.0 : -pi + 2.0 * pi * static_cast<double>(i) / (n - 1); };
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      const double kx = k_at(a);
      const double ky = k_at(b);
      if (!brillouin_zone_contains(cfg.lattice, kx, ky)) continue;
      const BandEnergies e = free_dispersion(cfg.lattice, kx, ky);
      w.out() << kx << ',' << ky << ',' << e.plus << ',' << e.minus << '\n';
      ++rows;
    }
  w.close();
  manifest.derived()["k_points_in_zone"] = rows;
  manifest.write("complete");
  log_line(opts, "dispersion: " + std::to_string(rows) + " k-points");
  return rows;
}

int run_command(Command cmd, const fs::path& config, const CommandOptions& opts, std::ostream& err) {
  try {
    const RunConfig cfg = load_config(config, cmd);
    switch (cmd) {
      case Command::Spectrum: run_spectrum(cfg, opts); return 0;
      case Command::Evolve: run_evolve(cfg, opts); return 0;
      case Command::Sweep: return run_sweep(cfg, opts).failed > 0 ? 4 : 0;
      case Command::Dispersion: run_dispersion(cfg, opts); return 0;
    }
    return 1;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

// ---------------------------------------------------------------- CSV input

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw std::out_of_range("no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.front() == '#') {
      t.comments.push_back(line);
      continue;
    }
    if (t.header.empty())
      t.header = split(line);
    else
      t.rows.push_back(split(line));
  }
  return t;
}

}  // namespace diracsea
