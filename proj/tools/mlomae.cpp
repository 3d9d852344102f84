#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mlomae/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mlomae: masked-autoencoder pretraining with a learned masking network"};
  app.require_subcommand(1);

  mlomae::TrainOptions train;
  std::string resume;
  bool no_strict = false;
  auto* train_cmd = app.add_subcommand("train", "run pretraining from a config file");
  train_cmd->add_option("--config", train.config_path, "key = value config file")->required();
  train_cmd->add_flag("--strict", train.strict, "single-threaded deterministic execution (default)");
  train_cmd->add_flag("--no-strict", no_strict, "allow Eigen to pick its thread count");
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  bool flip = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "run the gradient and hypergradient oracles");
  grad_cmd->add_flag("--inject-c-path-sign-flip", flip, "test hook: negate the C-path pullback");

  std::string ckpt, data = "synthetic", out_dir, config;
  std::size_t count = 8;
  auto* probe_cmd = app.add_subcommand("probe", "linear-probe a checkpoint's encoder");
  probe_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  probe_cmd->add_option("--data", data, "synthetic | cifar10:<path> | bundle:<path>");
  probe_cmd->add_option("--config", config, "run config (synthetic spec, probe budget)");

  auto* vis_cmd = app.add_subcommand("visualize", "write σ maps and mask overlays as PGM");
  vis_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  vis_cmd->add_option("--out", out_dir, "output directory")->required();
  vis_cmd->add_option("--config", config, "run config (dataset, ratio schedule)");
  vis_cmd->add_option("--count", count, "number of validation images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : mlomae::kExitConfig;
  }

  const std::optional<std::string> cfg = config.empty() ? std::nullopt : std::optional<std::string>(config);
  if (train_cmd->parsed()) {
    if (no_strict) train.strict = false;
    if (!resume.empty()) train.resume = resume;
    return mlomae::cmd_train(train, std::cout, std::cerr);
  }
  if (grad_cmd->parsed()) return mlomae::cmd_gradcheck(flip, std::cout, std::cerr);
  if (probe_cmd->parsed()) return mlomae::cmd_probe(ckpt, data, cfg, std::cout, std::cerr);
  return mlomae::cmd_visualize(ckpt, out_dir, cfg, count, std::cout, std::cerr);
}
