#pragma once

#include "diracsea/evolution.hpp"
#include "diracsea/lattice.hpp"
#include "diracsea/observables.hpp"

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace diracsea {

inline constexpr const char* kVersion = "0.3.0";

enum class Command { Spectrum, Evolve, Sweep, Dispersion };
std::string to_string(Command c);
/// Throws ConfigError for an unknown name.
Command command_from_string(const std::string& name);

/// Flat "key = value" file with [section] headers; '#' and ';' start comments.
class IniDocument {
 public:
  struct Value {
    std::string text;
    int line = 0;
  };
  using Section = std::map<std::string, Value>;

  /// Throws ConfigError naming the line for malformed lines, keys outside a
  /// section and duplicate sections or keys.
  static IniDocument parse(std::string_view text, std::string source = "config");

  const std::string& source() const { return source_; }
  bool has(const std::string& section) const { return sections_.count(section) > 0; }
  const Section& section(const std::string& name) const;
  int section_line(const std::string& name) const { return section_lines_.at(name); }
  std::vector<std::string> section_names() const;

 private:
  std::string source_;
  std::map<std::string, Section> sections_;
  std::map<std::string, int> section_lines_;
};

struct EvolutionSettings {
  double dt = 0.0;  // 1/M; 0 selects the default rule
  StepMethod method = StepMethod::CrankNicolson;
  std::int64_t checkpoint_stride = 500;
  std::int64_t record_stride = 0;
  int snapshot_count = 41;
  bool closed_form_hold = true;
};

struct SpectrumSettings {
  /// explicit ascending lambda values
  std::vector<double> lambdas;
};

struct SweepSettings {
  std::vector<double> lambda_max_list;
  std::vector<double> t_tot_list;  // 1/M
  int jobs = 1;
};

struct DispersionSettings {
  int k_points = 41;
};

/// Every resolved parameter of a run.
struct RunConfig {
  LatticeSpec lattice;
  /// v0 in units of M; potential.v0 holds the absolute value.
  double v0_over_M = 1.0;
  GaussianPotential potential;
  std::optional<RampSchedule> schedule;
  EvolutionSettings evolution;
  std::optional<SpectrumSettings> spectrum;
  std::optional<SweepSettings> sweep;
  std::optional<DispersionSettings> dispersion;

  /// Sorted key=value rendering with 17 significant digits; the manifest
  /// hash is taken over this text.
  std::string canonical() const;
  std::string hash() const;
};

/// Sections [lattice], [potential], [schedule], [evolution], [spectrum],
/// [sweep], [dispersion]. Present sections must be complete (documented
/// defaults: schedule.lambda_final = 0 and everything in [evolution] and
/// sweep.jobs). The command decides which sections must be present.
/// Throws ConfigError with file:line (or section/key) diagnostics.
RunConfig parse_config(std::string_view text, Command cmd, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path, Command cmd);

/// Hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

struct CommandOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  /// Worker count from the command line; wins over DIRACSEA_JOBS and the config.
  std::optional<int> jobs;
  /// Human-readable progress and summary lines (nullptr: silent).
  std::ostream* log = nullptr;
  /// Called at every recorded step of an evolve run with (t in 1/M, N).
  std::function<void(double, double)> progress;
};

struct SpectrumOutcome {
  std::optional<double> lambda_cr;
  std::size_t rows = 0;
  bool has_breaks = false;
};

struct EvolveOutcome {
  double N_final = 0.0;
  std::int64_t steps = 0;
  double dt_over_M = 0.0;
  std::int64_t resumed_from_step = 0;
};

struct SweepOutcome {
  int computed = 0;
  int skipped = 0;
  int failed = 0;
};

/// spectrum.csv, branches.csv, manifest.json; lambda_cr when bracketed by the grid.
SpectrumOutcome run_spectrum(const RunConfig& cfg, const CommandOptions& opts);
/// timeseries.csv, production.csv (plus production_instantaneous.csv when
/// lambda_final != 0), snapshots.csv, checkpoint.bin, manifest.json.
/// On an exception the manifest is marked incomplete and the error rethrown.
EvolveOutcome run_evolve(const RunConfig& cfg, const CommandOptions& opts);
/// One evolve run per (lambda_max, T_tot) point under points/, then
/// sweep.csv and scaling.csv. Point failures are recorded, never thrown.
SweepOutcome run_sweep(const RunConfig& cfg, const CommandOptions& opts);
/// dispersion.csv over the diamond zone on a k_points x k_points grid of
/// [-pi, pi]^2 (the single point k = 0 for k_points = 1).
std::size_t run_dispersion(const RunConfig& cfg, const CommandOptions& opts);

/// Worker count: explicit value, else DIRACSEA_JOBS, else the config value.
int resolve_jobs(std::optional<int> cli, int config_jobs);

/// Exit codes: 0 success, 1 I/O or unexpected error, 2 config error,
/// 3 numerical failure, 4 partial sweep.
int run_command(Command cmd, const std::filesystem::path& config, const CommandOptions& opts, std::ostream& err);

/// Rows of a CSV written by the runner: comment lines are returned
/// separately, the first other line is the header.
struct CsvTable {
  std::vector<std::string> comments;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace diracsea
