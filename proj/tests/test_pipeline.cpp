#include <gtest/gtest.h>
#include <stdlib.h>

#include <cstdio>
#include <fstream>

#include "segscope/pipeline.hpp"
#include "test_support.hpp"

using namespace segscope;
using segscope::testing::TempDir;

namespace {

nlohmann::json small_config_doc() {
  return nlohmann::json::parse(R"({
    "seed": 17,
    "paths": {"corpus": "corpus", "work": "work"},
    "synth": {"source_count": 50, "shifted_count": 24},
    "embedding": {"method": "pca_then_tsne", "dims": 2, "tsne": {"perplexity": 5, "iterations": 300}}
  })");
}

fs::path write_config(const TempDir& dir, const nlohmann::json& doc) {
  const auto p = dir / "config.json";
  write_text_file(p, doc.dump(2));
  return p;
}

std::map<std::string, nlohmann::json> manifests(const fs::path& work) {
  std::map<std::string, nlohmann::json> out;
  for (const auto& e : fs::directory_iterator(work / "manifests")) out[e.path().filename().string()] = read_json_file(e.path());
  return out;
}

struct CliResult {
  int status = 0;
  std::string out, err;
};

CliResult run_cli(const std::string& args, const fs::path& cwd) {
  const auto out = cwd / "cli.out", err = cwd / "cli.err";
  const std::string cmd = "cd '" + cwd.string() + "' && '" SEGSCOPE_CLI_PATH "' " + args + " >'" + out.string() + "' 2>'" +
                          err.string() + "'";
  const int rc = std::system(cmd.c_str());
  CliResult r;
  r.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = read_text_file(out);
  r.err = read_text_file(err);
  return r;
}

/// One in-process chain shared by the tests that only read its artifacts.
class ChainTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("chain");
    cfg_ = new PipelineConfig(load_pipeline_config(write_config(*dir_, small_config_doc()), {}));
    run_all(*cfg_);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete dir_;
  }
  static TempDir* dir_;
  static PipelineConfig* cfg_;
};
TempDir* ChainTest::dir_ = nullptr;
PipelineConfig* ChainTest::cfg_ = nullptr;

}  // namespace

TEST(PipelineConfig, DefaultsRoundTrip) {
  const auto c = PipelineConfig::from_json(nlohmann::json::object());
  const auto back = PipelineConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(c.embedding.dims, std::optional<std::size_t>(2));
  EXPECT_EQ(c.retrieval.metric, Metric::Euclidean);
}

TEST(PipelineConfig, RejectsSchemaViolations) {
  EXPECT_THROW(PipelineConfig::from_json({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"train", {{"lr", 0.1}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"synth", {{"colour", 1}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"synth", {{"seed", 1}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"embedding", {{"dims", "most"}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"embedding", {{"method", "umap"}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"retrieval", {{"space", "both"}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"retrieval", {{"k", 0}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"detector", {{"min_box", {1}}}}}), ConfigError);
  EXPECT_THROW(PipelineConfig::from_json({{"seed", "x"}}), ConfigError);
  const auto full = PipelineConfig::from_json({{"embedding", {{"dims", "full"}, {"method", "pca"}}}});
  EXPECT_FALSE(full.embedding.dims.has_value());
}

TEST(PipelineConfig, OverridesAndSeedEnvironment) {
  TempDir dir("cfg");
  const auto path = write_config(dir, small_config_doc());
  unsetenv("SEGSCOPE_SEED");
  auto c = load_pipeline_config(path, {"train.epochs=7", "retrieval.metric=cosine", "synth.tau=0.5", "paths.model=m.json"});
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.retrieval.metric, Metric::Cosine);
  EXPECT_DOUBLE_EQ(c.synth.tau, 0.5);
  EXPECT_EQ(c.model_path(), dir / "m.json");
  EXPECT_EQ(c.corpus_dir, dir / "corpus");
  EXPECT_EQ(c.seed, 17u);

  setenv("SEGSCOPE_SEED", "123", 1);
  c = load_pipeline_config(path, {"seed=5"});
  EXPECT_EQ(c.seed, 123u);
  EXPECT_NE(c.effective_spec().seed, load_pipeline_config(path, {}).effective_spec().seed + 1);
  setenv("SEGSCOPE_SEED", "12x", 1);
  EXPECT_THROW(load_pipeline_config(path, {}), ConfigError);
  unsetenv("SEGSCOPE_SEED");

  EXPECT_THROW(load_pipeline_config(path, {"novalue"}), ConfigError);
  EXPECT_THROW(load_pipeline_config(path, {"seed.inner=1"}), ConfigError);
  EXPECT_THROW(load_pipeline_config(dir / "absent.json", {}), IoError);
}

TEST(PipelineConfig, StageSeedsDeriveFromMasterSeed) {
  PipelineConfig a, b;
  a.seed = 1;
  b.seed = 2;
  EXPECT_NE(a.corpus_seed(), b.corpus_seed());
  EXPECT_NE(a.corpus_seed(), a.train_seed());
  EXPECT_NE(a.train_seed(), a.tsne_seed());
  EXPECT_EQ(a.effective_train().seed, a.train_seed());
  EXPECT_EQ(a.effective_tsne().seed, a.tsne_seed());
}

TEST(Manifest, Sha256KnownVectors) {
  EXPECT_EQ(sha256_hex(std::string("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(std::string()), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Manifest, ConfigHashIgnoresPaths) {
  PipelineConfig a, b;
  b.work_dir = "/elsewhere/work";
  b.corpus_dir = "/elsewhere/corpus";
  EXPECT_EQ(Manifest("x", a).config_hash(), Manifest("x", b).config_hash());
  b.train.epochs = 3;
  EXPECT_NE(Manifest("x", a).config_hash(), Manifest("x", b).config_hash());
}

TEST(PipelineStages, TrainMetaConfigErrorComesBeforeAnyWork) {
  TempDir dir("vf");
  auto doc = small_config_doc();
  doc["train"] = {{"validation_fraction", 1.0}};
  const auto cfg = load_pipeline_config(write_config(dir, doc), {});
  // No metrics exist either; the config error must win.
  EXPECT_THROW(cmd_train_meta(cfg), ConfigError);
  EXPECT_FALSE(fs::exists(cfg.model_path()));
  EXPECT_FALSE(fs::exists(cfg.work_dir / "manifests"));
}

TEST(PipelineStages, MissingInputsAreReported) {
  TempDir dir("missing");
  const auto cfg = load_pipeline_config(write_config(dir, small_config_doc()), {});
  EXPECT_THROW(cmd_metrics(cfg, Split::Source), IoError);
  EXPECT_THROW(cmd_train_meta(cfg), IoError);
  EXPECT_THROW(cmd_predict_meta(cfg, Split::Shifted), IoError);
  EXPECT_THROW(cmd_detect(cfg, Split::Shifted), IoError);
  EXPECT_THROW(cmd_embed(cfg), IoError);
  EXPECT_THROW(cmd_reduce(cfg), IoError);
  EXPECT_THROW(cmd_eval_retrieval(cfg), IoError);
  EXPECT_THROW(cmd_density(cfg), IoError);
}

TEST_F(ChainTest, ProducesRetrievalReportWithBothMetrics) {
  const auto report = read_json_file(retrieval_report_path(*cfg_));
  EXPECT_EQ(report.at("space"), "full");
  EXPECT_GE(report.at("points").get<std::size_t>(), 10u);
  for (const char* m : {"euclidean", "cosine"}) {
    const auto& ev = report.at("evaluations").at(m);
    EXPECT_EQ(ev.at("metric"), m);
    const double bm = ev.at("balanced_map").get<double>();
    EXPECT_GE(bm, 0.0);
    EXPECT_LE(bm, 1.0);
    EXPECT_EQ(report.at("comparison").at(m).at("balanced_map"), ev.at("balanced_map"));
  }
}

TEST_F(ChainTest, DetectReportsAreConsistentWithArtifacts) {
  const auto shifted = read_json_file(detect_report_path(*cfg_, Split::Shifted));
  const auto source = read_json_file(detect_report_path(*cfg_, Split::Source));
  const auto crops = read_json_file(detections_dir(*cfg_, Split::Shifted) / "crops.json");
  EXPECT_EQ(shifted.at("detections"), crops.at("count"));
  EXPECT_EQ(read_records(detections_dir(*cfg_, Split::Shifted) / "records.jsonl").size(),
            shifted.at("detections").get<std::size_t>());
  EXPECT_GT(shifted.at("rate").get<double>(), source.at("rate").get<double>());
  EXPECT_EQ(shifted.at("filtered_miou").size(), curve_thresholds().size());
  EXPECT_EQ(shifted.at("detector").at("classes_of_interest"), nlohmann::json({1, 2, 3}));
  const auto& cov = shifted.at("unknown_coverage");
  EXPECT_LE(cov.at("covered").get<std::size_t>(), cov.at("total").get<std::size_t>());
}

TEST_F(ChainTest, EveryStageWroteAManifest) {
  const auto ms = manifests(cfg_->work_dir);
  for (const char* name : {"synth.json", "metrics_source.json", "metrics_shifted.json", "train_meta.json",
                           "predict_meta_source.json", "predict_meta_shifted.json", "detect_source.json",
                           "detect_shifted.json", "embed.json", "reduce.json", "eval_retrieval.json", "density.json"}) {
    ASSERT_TRUE(ms.count(name)) << name;
    const auto& m = ms.at(name);
    EXPECT_EQ(m.at("seed"), 17);
    EXPECT_EQ(m.at("version"), SEGSCOPE_VERSION);
    EXPECT_FALSE(m.at("outputs").empty()) << name;
    EXPECT_EQ(m.at("config_sha256").get<std::string>().size(), 64u);
  }
  // Hashes chain: an input of one stage is the output of its producer.
  EXPECT_EQ(ms.at("train_meta.json").at("inputs").at("work:metrics_source.segt"),
            ms.at("metrics_source.json").at("outputs").at("work:metrics_source.segt"));
  EXPECT_EQ(ms.at("reduce.json").at("inputs").at("work:features.segt"),
            ms.at("embed.json").at("outputs").at("work:features.segt"));
  EXPECT_GT(ms.at("embed.json").at("inputs").size(), 1u);  // every crop is hashed
}

TEST_F(ChainTest, RerunReproducesManifestHashes) {
  const auto before = manifests(cfg_->work_dir);
  cmd_detect(*cfg_, Split::Shifted);
  cmd_embed(*cfg_);
  cmd_reduce(*cfg_);
  cmd_eval_retrieval(*cfg_);
  const auto after = manifests(cfg_->work_dir);
  for (const char* name : {"detect_shifted.json", "embed.json", "reduce.json", "eval_retrieval.json"}) {
    EXPECT_EQ(before.at(name), after.at(name)) << name;
  }
}

TEST_F(ChainTest, ExternalFeaturesReplaceTheBaseline) {
  const auto fm = ingest_features(features_path(*cfg_));
  TempDir dir("ext");
  FeatureMatrix ext = fm;
  ext.source = FeatureSource::External;
  ext.rows = fm.rows * 2.0;
  save_features(ext, dir / "ext.segt");
  PipelineConfig c = *cfg_;
  c.work_dir = dir.path() / "work";
  fs::create_directories(c.work_dir);
  fs::copy(detections_dir(*cfg_, Split::Shifted), detections_dir(c, Split::Shifted));
  c.external_features = dir / "ext.segt";
  cmd_embed(c);
  const auto got = ingest_features(features_path(c));
  EXPECT_EQ(got.keys, ext.keys);
  EXPECT_TRUE(got.rows.isApprox(ext.rows));

  FeatureMatrix partial = ext;
  partial.rows = ext.rows.topRows(ext.rows.rows() - 1);
  partial.keys.pop_back();
  save_features(partial, dir / "partial.segt");
  c.external_features = dir / "partial.segt";
  EXPECT_THROW(cmd_embed(c), ValidationError);
}

TEST(PipelineCli, SubcommandChainMatchesInProcessRun) {
  TempDir cli_dir("cli"), lib_dir("lib");
  auto doc = small_config_doc();
  doc["embedding"] = {{"method", "pca"}, {"dims", 2}};
  write_config(cli_dir, doc);
  const auto lib_cfg = load_pipeline_config(write_config(lib_dir, doc), {});
  unsetenv("SEGSCOPE_SEED");
  for (const char* args : {"synth", "metrics --split source", "metrics --split shifted", "train-meta",
                           "predict-meta --split source", "predict-meta --split shifted", "detect --split source",
                           "detect --split shifted", "embed", "reduce", "eval-retrieval", "density"}) {
    const auto r = run_cli(std::string(args) + " --config config.json", cli_dir.path());
    ASSERT_EQ(r.status, 0) << args << ": " << r.err;
    EXPECT_TRUE(r.err.empty()) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out).at("stage"), std::string(args).substr(0, std::string(args).find(' ')));
  }
  run_all(lib_cfg);
  EXPECT_EQ(manifests(cli_dir / "work"), manifests(lib_cfg.work_dir));
}

TEST(PipelineCli, ErrorsAreSingleLineJson) {
  TempDir dir("clierr");
  auto doc = small_config_doc();
  write_config(dir, doc);
  const auto r = run_cli("train-meta --config config.json --override train.validation_fraction=1.0", dir.path());
  EXPECT_EQ(r.status, 2);
  ASSERT_FALSE(r.err.empty());
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j.at("error"), "config_error");
  EXPECT_NE(j.at("detail").get<std::string>().find("validation_fraction"), std::string::npos);

  const auto missing = run_cli("reduce --config config.json", dir.path());
  EXPECT_EQ(missing.status, 3);
  EXPECT_EQ(nlohmann::json::parse(missing.err).at("error"), "missing_input");

  const auto usage = run_cli("frobnicate", dir.path());
  EXPECT_EQ(usage.status, 2);
  EXPECT_EQ(nlohmann::json::parse(usage.err).at("error"), "usage_error");

  const auto bad_split = run_cli("metrics --split middle --config config.json", dir.path());
  EXPECT_EQ(bad_split.status, 2);
}
