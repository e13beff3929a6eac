// tei: command-line front end for leak fabrication, training, attack,
// evaluation and ablation sweeps.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>

#include "tei/commands.hpp"

namespace {

int run(int argc, char** argv) {
  // stdout carries command results (paths, reports); logs go to stderr.
  spdlog::set_default_logger(spdlog::stderr_color_mt("tei"));
  CLI::App app{"Transferable embedding-inversion attack toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

  // leak-build
  tei::LeakBuildOptions lb;
  auto* leak = app.add_subcommand("leak-build", "Sample texts and record victim embeddings");
  leak->add_option("--corpus", lb.corpus_path, "Corpus JSONL, one {\"text\": ...} object per line")->required();
  leak->add_option("--endpoint", lb.endpoint, "Remote embedding service URL");
  leak->add_option("--backend", lb.backend, "Local victim backend id when no endpoint is given");
  leak->add_option("--sample", lb.sample_n, "Number of pairs to leak")->required();
  leak->add_option("--seed", lb.seed);
  leak->add_option("--out", lb.out_path, "Leak JSONL path")->required();
  leak->add_option("--batch-size", lb.batch_size);
  leak->add_option("--max-retries", lb.max_retries);

  // train
  std::string config_path;
  tei::TrainOverrides ov;
  std::uint64_t seed_value = 0;
  std::string out_dir, run_name, resume;
  auto* train = app.add_subcommand("train", "Run the joint training loop");
  train->add_option("--config", config_path)->required();
  auto* train_seed = train->add_option("--seed", seed_value);
  auto* train_out = train->add_option("--out", out_dir, "Run root directory");
  auto* train_name = train->add_option("--name", run_name);
  auto* train_resume = train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_flag("--overwrite", ov.overwrite, "Replace an existing run directory");

  // attack
  std::string checkpoint, eval_path, decode, out_path;
  auto* attack = app.add_subcommand("attack", "Decode leaked embeddings into text");
  attack->add_option("--checkpoint", checkpoint)->required();
  attack->add_option("--eval", eval_path, "Leak-format JSONL of embeddings to invert")->required();
  attack->add_option("--decode", decode, "greedy | beam:K | top_k:K[:T]")->default_val("greedy");
  attack->add_option("--out", out_path, "Reconstructions JSONL");

  // evaluate
  tei::EvaluateOptions eo;
  std::string metrics = "rougeL,ppl,cos";
  auto* evaluate = app.add_subcommand("evaluate", "Attack and score reconstructions");
  evaluate->add_option("--checkpoint", checkpoint)->required();
  evaluate->add_option("--eval", eval_path)->required();
  evaluate->add_option("--metrics", metrics, "Comma list of rougeL, ppl, cos, llm_eval, nerr");
  evaluate->add_option("--decode", eo.decode);
  evaluate->add_option("--evaluator", eo.evaluator, "Encoder id for the cos metric");
  evaluate->add_option("--judge", eo.judge_endpoint, "Completion endpoint for llm_eval");
  evaluate->add_option("--out", out_path, "Report JSON path");

  // ablate
  std::string axis;
  std::vector<std::string> values;
  tei::AblateOptions ao;
  auto* ablate = app.add_subcommand("ablate", "Sweep one axis and tabulate metrics");
  ablate->add_option("--config", config_path)->required();
  ablate->add_option("--axis", axis, "components | leak_size | surrogate_backbone")->required();
  ablate->add_option("--values", values)->delimiter(',');
  ablate->add_option("--seed", seed_value);
  ablate->add_option("--out", out_path, "CSV path (stdout when omitted)");
  ablate->add_option("--metrics", metrics);
  ablate->add_option("--evaluator", ao.eval.evaluator);
  ablate->add_option("--judge", ao.eval.judge_endpoint);
  ablate->add_flag("--parallel", ao.parallel, "Train configurations concurrently");
  ablate->add_flag("--overwrite", ao.overwrite);
  auto* ablate_seed = ablate->get_option("--seed");

  // corpus
  std::size_t corpus_n = 0;
  auto* corpus = app.add_subcommand("corpus", "Write a synthetic clinical-note corpus");
  corpus->add_option("--size", corpus_n)->required();
  corpus->add_option("--seed", seed_value);
  corpus->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : tei::exit_code(tei::ErrorKind::usage);
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (*leak) {
    auto pairs = tei::cmd_leak_build(lb);
    spdlog::info("wrote {} leaked pairs to {}", pairs.size(), lb.out_path);
  } else if (*train) {
    if (*train_seed) ov.seed = seed_value;
    if (*train_out) ov.out_dir = out_dir;
    if (*train_name) ov.name = run_name;
    if (*train_resume) ov.resume_from = resume;
    auto cfg = tei::apply_overrides(tei::load_config(config_path), ov);
    auto r = tei::cmd_train(cfg, ov.overwrite);
    std::cout << r.result.checkpoint << '\n';
    spdlog::info("manifest: {}", r.manifest_path);
  } else if (*attack) {
    auto recs = tei::cmd_attack(checkpoint, eval_path, decode, out_path);
    if (out_path.empty())
      for (const auto& r : recs) std::cout << nlohmann::json{{"truth", r.truth}, {"reconstruction", r.reconstruction}}.dump() << '\n';
  } else if (*evaluate) {
    eo.toggles = tei::MetricToggles::parse(metrics);
    auto report = tei::cmd_evaluate(checkpoint, eval_path, eo, out_path);
    std::cout << tei::to_json(report)["aggregate"].dump(2) << '\n';
  } else if (*ablate) {
    auto cfg = tei::load_config(config_path);
    if (*ablate_seed) cfg.seed = seed_value;
    ao.eval.toggles = tei::MetricToggles::parse(metrics);
    auto rows = tei::cmd_ablate(cfg, tei::parse_axis(axis), values, ao);
    const auto csv = tei::ablation_csv(rows, ao.eval.toggles);
    if (out_path.empty()) std::cout << csv;
    else tei::detail::write_atomically(out_path, [&](std::ostream& out) { out << csv; });
  } else if (*corpus) {
    tei::cmd_corpus(corpus_n, seed_value, out_path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const tei::Error& e) {
    spdlog::error("{}", e.what());
    return tei::exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return tei::exit_code(tei::ErrorKind::data);
  }
}
