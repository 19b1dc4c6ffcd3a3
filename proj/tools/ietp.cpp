// ietp: synth | prepare | train | evaluate | bench
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ietp/ietp.hpp"

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> sets;  // section.key=value overrides
};

// "train.epochs=2" -> {"train": {"epochs": 2}}; the value is parsed as JSON
// and falls back to a string.
nlohmann::json apply_overrides(nlohmann::json j, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ietp::ConfigError("override must look like section.key=value, got " + s);
    }
    const std::string section = s.substr(0, dot);
    const std::string key = s.substr(dot + 1, eq - dot - 1);
    const std::string text = s.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    j[section][key] = value;
  }
  return j;
}

ietp::WorkflowConfig load_config(const Common& c) {
  nlohmann::json j = nlohmann::json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ietp::ConfigError("cannot open config " + c.config_path);
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ietp::ConfigError("config " + c.config_path + ": " + e.what());
    }
  }
  return ietp::WorkflowConfig::from_json(apply_overrides(std::move(j), c.sets));
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file");
  cmd->add_option("--set", c.sets, "Override a config value, e.g. --set train.epochs=2");
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    fn();
    return kOk;
  } catch (const ietp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const ietp::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble trajectory prediction: data preparation, training, evaluation and benchmarking"};
  app.set_version_flag("--version", std::string(ietp::kToolVersion));
  app.require_subcommand(1);

  Common common;
  std::string out_dir, csv, prepared, run_dir, manifest, test_index;
  std::optional<std::size_t> workers;
  bool resume = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic highway scenario as CSV");
  add_common(synth, common);
  synth->add_option("-o,--out", out_dir, "Output directory")->required();

  auto* prepare = app.add_subcommand("prepare", "Build samples, the train/test split and bootstrap sets");
  add_common(prepare, common);
  prepare->add_option("csv", csv, "Trajectory CSV")->required();
  prepare->add_option("-o,--out", out_dir, "Prepared directory")->required();

  auto* train = app.add_subcommand("train", "Train one base learner per bootstrap set");
  add_common(train, common);
  train->add_option("prepared", prepared, "Prepared directory")->required();
  train->add_option("-o,--out", run_dir, "Run directory")->required();
  train->add_flag("--resume", resume, "Keep learners already trained with the same configuration");
  train->add_option("-j,--workers", workers, "Concurrent learner trainings (default IETP_WORKERS or cores)");

  auto* evaluate = app.add_subcommand("evaluate", "Metrics of every base learner and ensemble");
  add_common(evaluate, common);
  evaluate->add_option("manifest", manifest, "manifest.json written by train")->required();
  evaluate->add_option("-o,--out", out_dir, "Output directory")->required();
  evaluate->add_option("--prepared", prepared, "Prepared directory (default: the manifest's)");
  evaluate->add_option("--test-index", test_index, "Index file of test samples (default: test.idx)");
  evaluate->add_option("-j,--workers", workers, "Evaluation threads");

  auto* bench = app.add_subcommand("bench", "Per-sample latency versus ensemble size");
  add_common(bench, common);
  bench->add_option("manifest", manifest, "manifest.json written by train")->required();
  bench->add_option("-o,--out", out_dir, "Output directory")->required();

  auto* config = app.add_subcommand("config", "Print the effective configuration");
  add_common(config, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  return guarded([&] {
    const ietp::WorkflowConfig cfg = load_config(common);
    if (*synth) {
      const auto r = ietp::cmd_synth(cfg, out_dir);
      std::cout << "wrote " << r.csv.string() << " (" << r.tracks << " tracks, " << r.labels << " labels)\n";
    } else if (*prepare) {
      const auto d = ietp::cmd_prepare(csv, cfg, out_dir);
      std::cout << d.samples.size() << " samples, " << d.train.size() << " train, " << d.test.size() << " test, "
                << d.sets.size() << " bootstrap sets; fingerprint " << ietp::hex64(d.fingerprint) << "\n";
    } else if (*train) {
      const auto m = ietp::cmd_train(prepared, cfg, run_dir, {resume, workers});
      std::cout << m.learners.size() << " learners; manifest " << (std::filesystem::path(run_dir) / "manifest.json").string()
                << "\n";
    } else if (*evaluate) {
      ietp::EvaluateOptions opts;
      if (!prepared.empty()) opts.prepared_dir = prepared;
      if (!test_index.empty()) opts.test_index = test_index;
      opts.workers = workers;
      const auto ev = ietp::cmd_evaluate(manifest, cfg, out_dir, opts);
      const auto base = ietp::mean_metrics(ev.base);
      const auto ens = ietp::mean_metrics(ev.ensemble);
      std::cout << "horizon_s  base_rmse  ensemble_rmse\n";
      for (std::size_t h = 0; h < ev.horizon_s.size(); ++h) {
        std::cout << ev.horizon_s[h] << "  " << base.rmse[h] << "  " << ens.rmse[h] << "\n";
      }
    } else if (*bench) {
      const auto rep = ietp::cmd_bench(manifest, cfg, out_dir);
      for (const auto& e : rep.entries) std::cout << e.name << "  " << e.mean_s * 1e3 << " ms\n";
      std::cout << "slope " << rep.fit.slope * 1e3 << " ms/member, R^2 " << rep.fit.r2 << "\n";
    } else if (*config) {
      std::cout << cfg.to_json().dump(2) << "\n";
    }
  });
}
