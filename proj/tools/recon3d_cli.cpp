#include "recon3d/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

using namespace recon3d;

int main(int argc, char** argv) {
  CLI::App app{"recon3d: synthetic multi-view scene pipeline with reconstruction pretext losses"};
  app.require_subcommand(1);

  GenScenesOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-scenes", "generate a synthetic RGB-D scene dataset");
  gen_cmd->add_option("--seed", gen.seed, "generator seed")->required();
  gen_cmd->add_option("--scenes", gen.scenes, "total scene count")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--eval-scenes", gen.eval_scenes, "scenes held out as the eval split")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--frames", gen.frames, "frames per scene")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.image_size, "image and BEV resolution")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "output directory")->required();

  std::string teacher_config, teacher_data, teacher_out;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "train the frozen latent teacher on a dataset");
  teacher_cmd->add_option("--config", teacher_config, "train config (its teacher section is used)");
  teacher_cmd->add_option("--data", teacher_data, "dataset directory")->required();
  teacher_cmd->add_option("--out", teacher_out, "teacher checkpoint path")->required();

  std::string train_config, train_data, train_out;
  bool train_eval = false;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes config, loss log and checkpoints");
  train_cmd->add_option("--config", train_config, "train config JSON");
  train_cmd->add_option("--data", train_data, "dataset directory")->required();
  train_cmd->add_option("--out", train_out, "run directory")->required();
  train_cmd->add_flag("--eval", train_eval, "evaluate on the eval split afterwards (writes metrics.json)");

  std::string eval_ckpt, eval_data, eval_split = "eval", eval_teacher, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_cmd->add_option("--ckpt", eval_ckpt, "model checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "dataset directory")->required();
  eval_cmd->add_option("--split", eval_split, "train, eval or all");
  eval_cmd->add_option("--teacher", eval_teacher, "teacher checkpoint (default: beside the model)");
  eval_cmd->add_option("--out", eval_out, "metrics file (default: metrics.json beside the model)");

  std::string grid_path, ablate_out;
  auto* ablate_cmd_ = app.add_subcommand("ablate", "run an ablation grid over arms and seeds");
  ablate_cmd_->add_option("--grid", grid_path, "grid JSON")->required();
  ablate_cmd_->add_option("--out", ablate_out, "output directory")->required();

  std::string report_run;
  auto* report_cmd = app.add_subcommand("report", "write report.json and plots for a run directory");
  report_cmd->add_option("--run", report_run, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      const Dataset d = gen_scenes(gen);
      std::cout << "wrote " << d.scenes.size() << " scenes to " << gen.out << "\n";
    } else if (*teacher_cmd) {
      const TrainConfig cfg = load_train_config(teacher_config);
      const TeacherReport rep = train_teacher_to(cfg, read_dataset(teacher_data), teacher_out);
      std::cout << teacher_report_json(rep).dump(2) << "\n";
    } else if (*train_cmd) {
      const TrainConfig cfg = load_train_config(train_config);
      const TrainCommandResult r = train_command(cfg, train_data, train_out);
      std::cout << "trained " << cfg.steps << " steps; model checksum " << hex64(r.train.model_checksum) << "\n";
      if (train_eval) {
        const auto j = eval_command(fs::path(train_out) / "model.ckpt", train_data, "eval", r.teacher_path);
        std::cout << j.at("metrics").dump(2) << "\n";
      }
    } else if (*eval_cmd) {
      const auto j = eval_command(eval_ckpt, eval_data, eval_split, eval_teacher, eval_out);
      std::cout << j.at("metrics").dump(2) << "\n";
    } else if (*ablate_cmd_) {
      const AblationResult r = ablate_command(grid_path, ablate_out, &std::cerr);
      std::cout << ablation_table(r);
    } else if (*report_cmd) {
      const auto rep = write_report(report_run);
      std::cout << "wrote " << (fs::path(report_run) / "report.json").string() << " and " << rep.at("plots").size() << " plots\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return EXIT_FAILURE;
  }
  return EXIT_SUCCESS;
}
