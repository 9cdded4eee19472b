#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "acfpipe/errors.hpp"
#include "acfpipe/pipeline.hpp"
#include "acfpipe/synth.hpp"

namespace fs = std::filesystem;
using namespace acfpipe;

namespace {

int default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

struct GlobalOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  int workers = default_workers();
};

pipeline::PipelineConfig stage_config(const GlobalOpts& g) {
  if (g.config_path.empty()) {
    throw ConfigError("--config <path> is required for this subcommand");
  }
  pipeline::PipelineConfig cfg = pipeline::load_config(g.config_path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.precision) cfg.precision = *g.precision;
  pipeline::validate_config(cfg);
  return cfg;
}

void print_history(const char* label, const training::History& h) {
  std::cout << label << ": best epoch " << h.best_epoch << ", validation loss "
            << h.best_val_loss << (h.early_stopped ? " (early stop)" : "") << "\n";
}

void print_metrics(const char* label, const eval::Metrics& m) {
  std::cout << label << ": accuracy " << m.accuracy << ", UAR " << m.uar << " over " << m.total
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"articulatory-coordination severity pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option("--config", g.config_path, "pipeline config JSON");
  app.add_option("--seed", g.seed, "override the config seed");
  app.add_option("--precision", g.precision, "training scalar width")
      ->check(CLI::IsMember({32, 64}));
  app.add_option("--workers", g.workers, "worker pool size for per-file stages")
      ->check(CLI::PositiveNumber);

  int exit_code = 0;

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic corpus");
  std::string spec_arg = "default";
  std::string out_dir;
  synth_cmd->add_option("--spec", spec_arg, "'default' or a synth spec JSON path");
  synth_cmd->add_option("--out", out_dir, "output corpus directory")->required();
  synth_cmd->callback([&] {
    synth::SynthSpec spec;
    if (spec_arg != "default") spec = pipeline::load_synth_spec(spec_arg);
    if (g.seed) spec.seed = *g.seed;
    const corpus::Manifest m = synth::generate_corpus(spec, out_dir);
    std::cout << "synth: wrote " << m.sessions.size() << " sessions to " << out_dir << "\n";
  });

  app.add_subcommand("features", "ingest the corpus, assign splits, emit the segment table")
      ->callback([&] { pipeline::run_features(stage_config(g), g.workers); });

  app.add_subcommand("acf", "compute per-segment correlation matrices and the standardizer")
      ->callback([&] { pipeline::run_acf(stage_config(g), g.workers); });

  app.add_subcommand("train-segment", "train the dilated CNN on training-split segments")
      ->callback([&] {
        print_history("train-segment", pipeline::run_train_segment(stage_config(g)));
      });

  app.add_subcommand("embed", "write per-session embedding sequences from the segment model")
      ->callback([&] { pipeline::run_embed(stage_config(g), g.workers); });

  app.add_subcommand("train-session", "train the LSTM over embedding sequences")
      ->callback([&] {
        print_history("train-session", pipeline::run_train_session(stage_config(g)));
      });

  app.add_subcommand("train-baseline", "train the baseline CNN on raw channel crops")
      ->callback([&] {
        print_history("train-baseline", pipeline::run_train_baseline(stage_config(g)));
      });

  app.add_subcommand("evaluate", "test-split metrics, confusions and reports")
      ->callback([&] {
        const pipeline::EvaluateResult r = pipeline::run_evaluate(stage_config(g));
        print_metrics("segment", r.segment);
        print_metrics("session", r.session);
      });

  app.add_subcommand("vote", "plurality-vote session baseline over segment predictions")
      ->callback([&] { print_metrics("vote", pipeline::run_vote(stage_config(g))); });

  auto* grid_cmd = app.add_subcommand("gridsearch", "exhaustive hyper-parameter grid");
  std::string grid_stage;
  grid_cmd->add_option("--stage", grid_stage, "which model's grid to run")
      ->check(CLI::IsMember({"segment", "session"}))
      ->required();
  grid_cmd->callback([&] {
    const pipeline::PipelineConfig cfg = stage_config(g);
    if (grid_stage == "segment") {
      const auto rows = pipeline::gridsearch_segment(cfg);
      const auto& best = rows.front().cnn;
      std::cout << "gridsearch segment: " << rows.size() << " combinations, best O1="
                << best.parallel_filters << " O2=" << best.c6_filters << " K1="
                << best.c6_kernel << " O3=" << best.d2_units << " DP=" << best.dropout
                << " (val loss " << rows.front().val_loss << ")\n";
    } else {
      const auto rows = pipeline::gridsearch_session(cfg);
      const auto& best = rows.front().lstm;
      std::cout << "gridsearch session: " << rows.size() << " combinations, best L1="
                << best.lstm1_units << " L2=" << best.lstm2_units << " DP1="
                << best.recurrent_dropout1 << " DP2=" << best.recurrent_dropout2 << " D3="
                << best.d3_units << " (val loss " << rows.front().val_loss << ")\n";
    }
  });

  app.add_subcommand("gradcheck", "finite-difference checks for every layer kind")
      ->callback([&] {
        const int failures = pipeline::run_gradcheck(std::cout);
        if (failures > 0) {
          exit_code = 1;
          std::cerr << "gradcheck: " << failures << " check(s) failed\n";
        }
      });

  auto* validate_cmd =
      app.add_subcommand("validate-config", "list every violation in a pipeline config");
  validate_cmd->callback([&] {
    if (g.config_path.empty()) {
      throw ConfigError("--config <path> is required for this subcommand");
    }
    pipeline::PipelineConfig cfg = pipeline::load_config(g.config_path);
    if (g.seed) cfg.seed = *g.seed;
    if (g.precision) cfg.precision = *g.precision;
    const auto violations = pipeline::config_violations(cfg);
    if (violations.empty()) {
      std::cout << "no violations\n";
      return;
    }
    for (const auto& v : violations) std::cout << "violation: " << v << "\n";
    exit_code = 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
