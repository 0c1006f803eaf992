#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mome/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MoME desk-scale trainer and analysis tool"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir;
  std::string modality = "vision";
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::vector<std::string> variants;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON")
        ->required();
    cmd->add_option("--out", out_dir, "output directory (overrides config)");
    cmd->add_option("--seed", seed, "seed override")
        ->each([&](const std::string&) { seed_set = true; });
  };

  CLI::App* train = app.add_subcommand("train", "run one training stage");
  add_common(train);

  CLI::App* ablate =
      app.add_subcommand("ablate", "run ablation variants, emit ablate.csv");
  add_common(ablate);
  ablate->add_option("--variants", variants,
                     "comma-separated variant names (default: full grid)")
      ->delimiter(',');

  CLI::App* stats =
      app.add_subcommand("stats", "export routing histograms and NMI");
  stats->add_option("run_dir", run_dir, "run directory")->required();

  CLI::App* pca = app.add_subcommand("pca", "export 2-D feature projections");
  pca->add_option("run_dir", run_dir, "run directory")->required();
  pca->add_option("--modality", modality, "vision | instruction");

  CLI11_PARSE(app, argc, argv);

  mome::cli::CommonFlags flags;
  if (!out_dir.empty()) flags.out = out_dir;
  if (seed_set) flags.seed = seed;

  if (train->parsed()) return mome::cli::cmd_train(config_path, flags);
  if (ablate->parsed()) return mome::cli::cmd_ablate(config_path, variants, flags);
  if (stats->parsed()) return mome::cli::cmd_stats(run_dir);
  if (pca->parsed()) return mome::cli::cmd_pca(run_dir, modality);
  return 1;
}
