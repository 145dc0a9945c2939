// Command line driver for the consistency-distillation pipeline.
//
//   cllm gen-corpus | train-base | collect | distill | evaluate | profile | visualize | ablate
//
// Configuration: defaults <- --config FILE <- flags. Exit codes: 0 success,
// 1 usage error, 2 configuration error (including missing inputs), 3 runtime failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cllm/errors.hpp"
#include "cllm/pipeline.hpp"

namespace {

using nlohmann::json;

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

// Sets overrides[a][b]... = value when the flag was given.
template <typename T>
void put(json& overrides, std::initializer_list<const char*> path, const std::optional<T>& value) {
  if (!value) return;
  json* node = &overrides;
  for (const char* key : path) node = &(*node)[key];
  *node = *value;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Jacobi decoding and consistency distillation on a toy query language"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> work_dir;
  std::optional<int> workers;
  std::optional<std::size_t> n, max_new;
  bool print_config = false;
  app.add_option("-c,--config", config_path, "JSON run configuration file");
  app.add_option("-s,--seed", seed, "root seed");
  app.add_option("-w,--work-dir", work_dir, "directory for artifacts");
  app.add_option("-j,--workers", workers, "parallel decode sessions for collect/profile");
  app.add_option("-n,--block-size", n, "Jacobi block size n");
  app.add_option("-N,--max-new", max_new, "maximum generated tokens N");
  app.add_flag("--print-config", print_config, "print the resolved configuration before running");

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  std::optional<std::size_t> count;
  gen->add_option("--count", count, "total samples over all splits");

  auto* base = app.add_subcommand("train-base", "train the target model on the corpus");
  std::optional<std::size_t> base_steps, base_batch;
  std::optional<double> base_lr;
  base->add_option("--steps", base_steps);
  base->add_option("--batch-size", base_batch);
  base->add_option("--lr", base_lr);

  auto* col = app.add_subcommand("collect", "collect Jacobi trajectories from the target model");
  std::optional<std::size_t> collect_prompts;
  std::optional<double> p_fix;
  bool no_augment = false;
  col->add_option("--prompts", collect_prompts, "number of training prompts to decode");
  col->add_option("--p-fix", p_fix, "probability of correcting a wrong token during augmentation");
  col->add_flag("--no-augment", no_augment, "store raw trajectories only");

  auto* dist = app.add_subcommand("distill", "consistency-train a copy of the target model");
  std::optional<std::size_t> distill_steps, distill_batch;
  std::optional<double> distill_lr, ar_weight;
  std::optional<std::string> loss_kind, divergence;
  dist->add_option("--steps", distill_steps);
  dist->add_option("--batch-size", distill_batch);
  dist->add_option("--lr", distill_lr);
  dist->add_option("--ar-weight", ar_weight, "weight of the AR term");
  dist->add_option("--consistency", loss_kind, "global or local")->check(CLI::IsMember({"global", "local"}));
  dist->add_option("--divergence", divergence, "forward_kl, reverse_kl or jensen_shannon")
      ->check(CLI::IsMember({"forward_kl", "reverse_kl", "jensen_shannon"}));

  auto* eval = app.add_subcommand("evaluate", "heldout perplexity and Jacobi/AR agreement of both models");
  auto* prof = app.add_subcommand("profile", "passes, fast-forwarded and stationary tokens, throughput");

  auto* vis = app.add_subcommand("visualize", "export one Jacobi trajectory");
  std::string vis_model = "cllm", vis_format = "ansi", vis_out;
  std::size_t vis_prompt = 0, vis_window = 0;
  vis->add_option("--model", vis_model, "base or cllm")->check(CLI::IsMember({"base", "cllm"}));
  vis->add_option("--prompt-index", vis_prompt, "index into the evaluation prompts");
  vis->add_option("--window", vis_window, "window of the generation to show");
  vis->add_option("--format", vis_format, "ansi, html or csv")->check(CLI::IsMember({"ansi", "html", "csv"}));
  vis->add_option("-o,--out", vis_out, "output file (default: reports/trajectory.<format>)");

  auto* abl = app.add_subcommand("ablate", "sweep block size and dataset fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  json overrides = json::object();
  put(overrides, {"seed"}, seed);
  put(overrides, {"work_dir"}, work_dir);
  put(overrides, {"workers"}, workers);
  put(overrides, {"decode", "n"}, n);
  put(overrides, {"decode", "N"}, max_new);
  put(overrides, {"corpus", "count"}, count);
  put(overrides, {"base_training", "steps"}, base_steps);
  put(overrides, {"base_training", "batch_size"}, base_batch);
  put(overrides, {"base_training", "optimizer", "learning_rate"}, base_lr);
  put(overrides, {"collect", "prompts"}, collect_prompts);
  put(overrides, {"collect", "p_fix"}, p_fix);
  if (no_augment) overrides["collect"]["augment"] = false;
  put(overrides, {"distill", "steps"}, distill_steps);
  put(overrides, {"distill", "batch_size"}, distill_batch);
  put(overrides, {"distill", "optimizer", "learning_rate"}, distill_lr);
  put(overrides, {"distill", "ar_weight"}, ar_weight);
  put(overrides, {"distill", "consistency"}, loss_kind);
  put(overrides, {"distill", "divergence"}, divergence);

  auto log = [](const std::string& line) { std::cout << line << std::endl; };
  try {
    const json file = config_path.empty() ? json::object() : cllm::read_config_file(config_path);
    const cllm::RunConfig cfg = cllm::load_run_config(file, overrides);
    if (print_config) std::cout << cfg.to_json().dump(2) << std::endl;

    if (gen->parsed()) {
      cllm::stage_gen_corpus(cfg, log);
    } else if (base->parsed()) {
      cllm::stage_train_base(cfg, log);
    } else if (col->parsed()) {
      cllm::stage_collect(cfg, log);
    } else if (dist->parsed()) {
      cllm::stage_distill(cfg, log);
    } else if (eval->parsed()) {
      cllm::stage_evaluate(cfg, log);
    } else if (prof->parsed()) {
      cllm::stage_profile(cfg, log);
    } else if (vis->parsed()) {
      const cllm::ExportFormat format = cllm::parse_export_format(vis_format);
      const std::string out = vis_out.empty() ? cfg.report_path("trajectory." + vis_format) : vis_out;
      cllm::stage_visualize(cfg, vis_model, vis_prompt, vis_window, format, out, log);
    } else if (abl->parsed()) {
      cllm::stage_ablate(cfg, log);
    }
  } catch (const cllm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const cllm::LoadError& e) {
    std::cerr << "load error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
