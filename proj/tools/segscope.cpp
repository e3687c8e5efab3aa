// segscope command line: one subcommand per pipeline stage plus `serve`.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "segscope/pipeline.hpp"
#include "segscope/explorer_api.hpp"

using namespace segscope;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string split;
};

void add_common(CLI::App* sub, Common& c, bool config_required = true) {
  auto* opt = sub->add_option("--config", c.config, "Pipeline config JSON");
  if (config_required) opt->required();
  sub->add_option("--override", c.overrides, "Config override key=value (repeatable)");
}

void print_done(const std::string& stage, const PipelineConfig& cfg) {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["work"] = cfg.work_dir.string();
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"segscope: segment-level OOD detection and retrieval"};
  app.set_version_flag("--version", std::string(SEGSCOPE_VERSION));
  app.require_subcommand(1);

  Common common;
  std::string snapshot, host = "127.0.0.1", static_dir;
  int port = 8080;

  struct Stage {
    const char* name;
    const char* help;
    const char* default_split;  // nullptr: no --split
  };
  const std::vector<Stage> stages = {
      {"synth", "Generate the synthetic corpus", nullptr},
      {"metrics", "Build the segment metric ledger for a split", "source"},
      {"train-meta", "Train the IoU meta regressor on source metrics", nullptr},
      {"predict-meta", "Predict segment IoU for a split", "shifted"},
      {"detect", "Detect low-IoU segments, export crops and coverage", "shifted"},
      {"embed", "Compute crop features (or ingest paths.features)", nullptr},
      {"reduce", "Reduce features with PCA or PCA + t-SNE", nullptr},
      {"eval-retrieval", "Evaluate nearest-neighbor retrieval", nullptr},
      {"density", "KDE grids and HDR thresholds on the 2-D embedding", nullptr},
      {"all", "Run every stage in order", nullptr},
  };
  for (const auto& st : stages) {
    auto* sub = app.add_subcommand(st.name, st.help);
    add_common(sub, common);
    if (st.default_split) {
      sub->add_option("--split", common.split, "source or shifted")->default_str(st.default_split);
    }
  }
  auto* serve_cmd = app.add_subcommand("serve", "Serve a work directory over HTTP");
  add_common(serve_cmd, common, false);
  serve_cmd->add_option("--snapshot", snapshot, "Work directory to serve (default: paths.work of --config)");
  serve_cmd->add_option("--port", port, "Port (0 picks a free one)")->capture_default_str();
  serve_cmd->add_option("--host", host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--static", static_dir, "Directory with built UI assets");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_line("usage_error", e.what()) << "\n";
    return 2;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "serve") {
      std::filesystem::path dir = snapshot;
      if (dir.empty()) {
        if (common.config.empty()) throw ConfigError("serve needs --snapshot or --config");
        dir = load_pipeline_config(common.config, common.overrides).work_dir;
      }
      ExplorerApi api(load_snapshot(dir), static_dir.empty() ? std::nullopt : std::optional<std::filesystem::path>(static_dir));
      serve(api, host, port, [&](int bound) {
        std::cout << nlohmann::json{{"listening", host + ":" + std::to_string(bound)}}.dump() << std::endl;
      });
      return 0;
    }

    const PipelineConfig cfg = load_pipeline_config(common.config, common.overrides);
    const auto split = [&](const char* fallback) { return split_from_name(common.split.empty() ? fallback : common.split); };
    if (name == "synth") {
      cmd_synth(cfg);
    } else if (name == "metrics") {
      cmd_metrics(cfg, split("source"));
    } else if (name == "train-meta") {
      cmd_train_meta(cfg);
    } else if (name == "predict-meta") {
      cmd_predict_meta(cfg, split("shifted"));
    } else if (name == "detect") {
      cmd_detect(cfg, split("shifted"));
    } else if (name == "embed") {
      cmd_embed(cfg);
    } else if (name == "reduce") {
      cmd_reduce(cfg);
    } else if (name == "eval-retrieval") {
      cmd_eval_retrieval(cfg);
    } else if (name == "density") {
      cmd_density(cfg);
    } else if (name == "all") {
      run_all(cfg);
    }
    print_done(name, cfg);
    return 0;
  } catch (const std::exception& e) {
    const auto kind = error_kind(e);
    std::cerr << error_line(kind, e.what()) << "\n";
    return exit_code_for(kind);
  }
}
