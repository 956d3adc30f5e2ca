#include "ver/bench.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(std::stoull(part));
  }
  return out;
}

std::vector<std::string> parse_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

struct CommonFlags {
  std::string config_path;
  std::string seeds = "";
  std::string regime = "";
  int replicas = 0;
  bool virtual_clock = false;
  std::string out_dir = "";

  void attach(CLI::App* cmd, bool config_required = true) {
    auto* opt = cmd->add_option("--config", config_path, "run config file (TOML)");
    if (config_required) opt->required();
    cmd->add_option("--seed", seeds, "seed or comma-separated list (overrides config)");
    cmd->add_option("--regime", regime, "sync|nover|ver (overrides config)");
    cmd->add_option("--replicas", replicas, "replica count (overrides config)");
    cmd->add_flag("--virtual-clock", virtual_clock, "force the virtual clock");
    cmd->add_option("--out-dir", out_dir, "output directory (overrides config)");
  }

  ver::RunConfig load() const {
    ver::RunConfig cfg = ver::load_config(config_path);
    if (!regime.empty()) cfg.regime = regime;
    if (replicas > 0) cfg.replicas = replicas;
    if (virtual_clock) cfg.clock = "virtual";
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
  }

  std::vector<std::uint64_t> seed_list(std::uint64_t fallback) const {
    auto list = parse_seeds(seeds);
    if (list.empty()) list.push_back(fallback);
    return list;
  }
};

std::string ensure_out_dir(const ver::RunConfig& cfg) {
  std::string dir = cfg.out_dir.empty() ? "." : cfg.out_dir;
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batched on-policy RL engine with variable experience rollouts"};
  app.require_subcommand(1);

  CommonFlags train_flags, bench_flags, compare_flags, replay_flags;
  std::string bench_regimes = "sync,nover,ver";
  std::string compare_regimes = "sync,ver";
  std::string trace_path;

  auto* train_cmd = app.add_subcommand("train", "run training and write metrics + checkpoint");
  train_flags.attach(train_cmd);

  auto* bench_cmd =
      app.add_subcommand("bench", "compare regimes under identical seeds; emit CSV");
  bench_flags.attach(bench_cmd);
  bench_cmd->add_option("--regimes", bench_regimes, "comma list of regimes to benchmark");

  auto* compare_cmd =
      app.add_subcommand("compare", "return-vs-steps curves per regime/seed as CSV");
  compare_flags.attach(compare_cmd);
  compare_cmd->add_option("--regimes", compare_regimes, "comma list of regimes to compare");

  auto* replay_cmd =
      app.add_subcommand("replay", "re-run a dumped rollout trace through packing/learning");
  replay_flags.attach(replay_cmd);
  replay_cmd->add_option("trace", trace_path, "rollout JSONL dump")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      ver::RunConfig cfg = train_flags.load();
      const std::string dir = ensure_out_dir(cfg);
      for (std::uint64_t seed : train_flags.seed_list(cfg.seed)) {
        ver::RunConfig run = cfg;
        run.seed = seed;
        ver::validate_or_throw(run);
        const std::string prefix = dir + "/train_seed" + std::to_string(seed);
        ver::log_info("train: seed " + std::to_string(seed) + " -> " + prefix + "_*");
        ver::TrainResult r = ver::run_training(run, prefix);
        std::cout << "seed " << seed << ": updates " << r.updates << ", steps " << r.steps
                  << ", mean SPS " << r.sps.mean_sps() << ", final mean return "
                  << r.final_mean_return << "\n";
      }
    } else if (bench_cmd->parsed()) {
      ver::RunConfig cfg = bench_flags.load();
      ver::validate_or_throw(cfg);
      const std::string dir = ensure_out_dir(cfg);
      std::ofstream csv(dir + "/bench.csv");
      auto rows = ver::run_bench(cfg, parse_list(bench_regimes),
                                 bench_flags.seed_list(cfg.seed), &csv);
      std::cout << "regime      seed   mean_sps    max_sps  mean/max  vs_sync\n";
      for (const auto& r : rows) {
        std::printf("%-10s %5llu %10.1f %10.1f %9.3f %8.2f\n", r.regime.c_str(),
                    static_cast<unsigned long long>(r.seed), r.mean_sps, r.max_sps,
                    r.mean_over_max, r.speedup_vs_sync);
      }
      std::cout << "wrote " << dir << "/bench.csv\n";
    } else if (compare_cmd->parsed()) {
      ver::RunConfig cfg = compare_flags.load();
      ver::validate_or_throw(cfg);
      const std::string dir = ensure_out_dir(cfg);
      std::ofstream csv(dir + "/compare.csv");
      ver::run_compare(cfg, parse_list(compare_regimes), compare_flags.seed_list(cfg.seed),
                       csv);
      std::cout << "wrote " << dir << "/compare.csv\n";
    } else if (replay_cmd->parsed()) {
      ver::RunConfig cfg = replay_flags.load();
      return ver::run_replay(cfg, trace_path, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
