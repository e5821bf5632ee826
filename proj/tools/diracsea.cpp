#include "diracsea/runner.hpp"

#include "CLI11.hpp"

#include <iomanip>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Pair creation from a Dirac sea on a staggered lattice"};
  app.require_subcommand(1);
  app.set_version_flag("--version", diracsea::kVersion);

  std::string config;
  std::string out;
  bool resume = false;
  std::optional<int> jobs;
  bool quiet = false;

  for (const char* name : {"spectrum", "evolve", "sweep", "dispersion"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config, "INI configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out, "output directory")->required();
    sub->add_flag("--resume", resume, "continue from checkpoints and skip completed sweep points");
    sub->add_option("--jobs", jobs, "parallel sweep points (overrides DIRACSEA_JOBS and the config)")
        ->check(CLI::PositiveNumber);
    sub->add_flag("-q,--quiet", quiet, "no progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  diracsea::CommandOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  opts.jobs = jobs;
  opts.log = &std::cout;
  const auto cmd = diracsea::command_from_string(app.get_subcommands().front()->get_name());
  if (!quiet && cmd == diracsea::Command::Evolve) {
    opts.progress = [last = -1.0](double t, double n) mutable {
      // about one line per 10 time units
      if (t - last < 10.0 && last >= 0.0) return;
      last = t;
      std::cerr << std::setprecision(6) << "t = " << t << "/M  N = " << n << "\n";
    };
  }
  return diracsea::run_command(cmd, config, opts, std::cerr);
}
