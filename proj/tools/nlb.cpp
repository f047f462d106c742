// Command-line benchmark harness: train and evaluate the model family on
// standard, gap and toy splits; emit metric tables, difference tables, rank
// reports and pairwise significance verdicts.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "nlb/runner.hpp"

namespace {

using namespace nlb;
using namespace nlb::runner;

// "a..b" (inclusive) or a single index.
std::vector<int> parse_split_range(const std::string& text) {
  if (text.empty()) return {};
  const auto pos = text.find("..");
  try {
    if (pos == std::string::npos) return {std::stoi(text)};
    const int lo = std::stoi(text.substr(0, pos));
    const int hi = std::stoi(text.substr(pos + 2));
    if (hi < lo) throw ConfigError("--splits: empty range " + text);
    std::vector<int> out;
    for (int i = lo; i <= hi; ++i) out.push_back(i);
    return out;
  } catch (const std::invalid_argument&) {
    throw ConfigError("--splits: cannot parse '" + text + "'");
  }
}

int finish_run(const std::vector<ResultRecord>& records, const std::string& out_dir,
               const std::string& file_name) {
  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/" + file_name;
  write_records(records, path);
  int failures = 0;
  for (const auto& r : records) {
    if (r.failed) {
      ++failures;
      std::cerr << r.model << " " << r.dataset << " split " << r.split_index
                << " FAILED: " << r.error << "\n";
    } else {
      std::printf("%s %s split %d: test LL %.4f, test RMSE %.4f (%.1fs)\n",
                  r.model.c_str(), r.dataset.c_str(), r.split_index, r.test_ll,
                  r.test_rmse, r.wall_seconds);
    }
  }
  std::printf("wrote %zu record(s) to %s\n", records.size(), path.c_str());
  return failures > 0 ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural linear benchmark harness"};
  app.require_subcommand(1);

  ExperimentConfig config;
  config.workers = std::max(1u, std::thread::hardware_concurrency());

  std::string splits_text;
  bool gap = false, no_tune = false, no_slice = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", config.seed, "master seed");
    cmd->add_option("--bo-iters", config.bo_iters, "BO iterations after warmup");
    cmd->add_option("--out", config.out_dir, "output directory");
    cmd->add_option("--workers", config.workers, "worker threads");
    cmd->add_option("--data-dir", config.data_dir,
                    "dataset root (default $NLB_DATA_DIR or ./data)");
    cmd->add_option("--baseline-steps", config.baseline_steps,
                    "gradient steps for MFVI/MCD");
    cmd->add_flag("--no-tune", no_tune, "use practitioner defaults");
    cmd->add_flag("--no-slice", no_slice, "skip slice-sampling the head");
  };

  CLI::App* run = app.add_subcommand("run", "run one model on one dataset");
  run->add_option("--model", config.model, "model tag")->required();
  run->add_option("--dataset", config.dataset, "dataset manifest name")->required();
  run->add_option("--splits", splits_text, "split index or inclusive range a..b");
  run->add_flag("--gap", gap, "use gap splits (one per input dimension)");
  add_common(run);

  CLI::App* toy = app.add_subcommand("toy", "toy problem with predictive curves");
  std::vector<std::string> toy_models;
  toy->add_option("--models", toy_models, "model tags (default: all)")
      ->delimiter(',');
  add_common(toy);

  CLI::App* emit = app.add_subcommand("emit", "emit CSV/JSON artifacts from records");
  std::string records_path, what = "tables", axis = "tuned", emit_out = ".";
  emit->add_option("--records", records_path, "JSONL records file")->required();
  emit->add_option("--what", what, "tables | diffs | ranks");
  emit->add_option("--axis", axis, "diff axis: tuned | slice");
  emit->add_option("--out", emit_out, "output directory");

  CLI::App* compare = app.add_subcommand("compare", "Wilcoxon I/W/N between two runs");
  std::string path_a, path_b, compare_out;
  compare->add_option("--a", path_a, "records of run A")->required();
  compare->add_option("--b", path_b, "records of run B")->required();
  compare->add_option("--out", compare_out, "optional JSON output path");

  CLI::App* stats = app.add_subcommand("stats", "Friedman average-rank report");
  std::string stats_records, stats_out;
  stats->add_option("--records", stats_records, "JSONL records file")->required();
  stats->add_option("--out", stats_out, "optional JSON output path");

  CLI11_PARSE(app, argc, argv);

  try {
    config.tune = !no_tune;
    config.slice = !no_slice;

    if (run->parsed()) {
      config.split_kind = gap ? SplitKind::Gap : SplitKind::Standard;
      if (config.dataset == "toy") config.split_kind = SplitKind::Toy;
      config.split_indices = parse_split_range(splits_text);
      return finish_run(run_experiment(config), config.out_dir, "results.jsonl");
    }

    if (toy->parsed()) {
      config.dataset = "toy";
      config.split_kind = SplitKind::Toy;
      config.emit_toy_curves = true;
      if (toy_models.empty()) toy_models = all_model_tags();
      std::vector<ResultRecord> all;
      for (const auto& tag : toy_models) {
        config.model = tag;
        auto records = run_experiment(config);
        all.insert(all.end(), records.begin(), records.end());
      }
      return finish_run(all, config.out_dir, "toy_results.jsonl");
    }

    if (emit->parsed()) {
      auto records = read_records(records_path);
      std::filesystem::create_directories(emit_out);
      if (what == "tables") {
        emit_tables(records, emit_out + "/tables.csv");
        std::printf("wrote %s/tables.csv\n", emit_out.c_str());
      } else if (what == "diffs") {
        if (axis != "tuned" && axis != "slice")
          throw ConfigError("--axis must be 'tuned' or 'slice'");
        emit_diffs(records, axis, emit_out + "/diffs_" + axis + ".csv");
        std::printf("wrote %s/diffs_%s.csv\n", emit_out.c_str(), axis.c_str());
      } else if (what == "ranks") {
        std::ofstream out(emit_out + "/ranks.json");
        out << rank_report(records).dump(2) << "\n";
        std::printf("wrote %s/ranks.json\n", emit_out.c_str());
      } else {
        throw ConfigError("--what must be tables, diffs or ranks");
      }
      return 0;
    }

    if (compare->parsed()) {
      const nlohmann::json verdicts =
          compare_runs(read_records(path_a), read_records(path_b));
      std::cout << verdicts.dump(2) << "\n";
      if (!compare_out.empty()) {
        std::ofstream out(compare_out);
        out << verdicts.dump(2) << "\n";
      }
      return 0;
    }

    if (stats->parsed()) {
      const nlohmann::json report = rank_report(read_records(stats_records));
      std::cout << report.dump(2) << "\n";
      if (!stats_out.empty()) {
        std::ofstream out(stats_out);
        out << report.dump(2) << "\n";
      }
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
