#pragma once

// Stage-per-subcommand workflow: every stage reads its inputs from files,
// writes its artifacts plus a manifest, and can be run in-process.
//
// Artifacts under the work directory:
//   metrics_<split>.segt (+.json)        segment metric ledger
//   meta_model.json, train_history.json  meta regressor
//   predicted_<split>.json               predicted IoU per segment
//   detections_<split>/                  crops, records.jsonl, labels.json
//   detect_report_<split>.json           rate, coverage, filtered mIoU
//   features.segt (+.json)               crop features
//   embedding.segt (+.json)              reduced coordinates
//   retrieval_report.json
//   density/                             grids + density.json
//   manifests/<stage>.json

#include <openssl/evp.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/embedding.hpp"
#include "segscope/meta_regressor.hpp"
#include "segscope/metric_ledger.hpp"
#include "segscope/ood_detector.hpp"
#include "segscope/retrieval_eval.hpp"
#include "segscope/segments.hpp"
#include "segscope/synth_corpus.hpp"
#include "segscope/tensor_store.hpp"

#ifndef SEGSCOPE_VERSION
#define SEGSCOPE_VERSION "0.0.0"
#endif

namespace segscope {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct EmbeddingConfig {
  ReductionMethod method = ReductionMethod::PcaThenTsne;
  std::optional<std::size_t> dims = 2;  // nullopt = full dimension
  TsneConfig tsne;
};

struct RetrievalConfig {
  Metric metric = Metric::Euclidean;
  std::size_t k = 10;
  bool reduced_space = false;
};

struct DensityConfig {
  double alpha = 0.2;
  std::size_t grid_rows = 128;
  std::size_t grid_cols = 128;
  double pad = 3.0;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  fs::path corpus_dir = "corpus";
  fs::path work_dir = "work";
  std::optional<fs::path> model_file;
  std::optional<fs::path> external_features;
  CorpusSpec synth;
  DetectorConfig detector;
  bool detector_classes_explicit = false;
  TrainConfig train;
  EmbeddingConfig embedding;
  RetrievalConfig retrieval;
  DensityConfig density;

  fs::path model_path() const { return model_file.value_or(work_dir / "meta_model.json"); }

  /// Stage seeds derived from the master seed.
  std::uint64_t corpus_seed() const { return mix_seed(seed, 1); }
  std::uint64_t train_seed() const { return mix_seed(seed, 2); }
  std::uint64_t tsne_seed() const { return mix_seed(seed, 3); }

  CorpusSpec effective_spec() const {
    CorpusSpec s = synth;
    s.seed = corpus_seed();
    return s;
  }
  TrainConfig effective_train() const {
    TrainConfig t = train;
    t.seed = train_seed();
    return t;
  }
  TsneConfig effective_tsne() const {
    TsneConfig t = embedding.tsne;
    t.seed = tsne_seed();
    return t;
  }

  nlohmann::ordered_json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j, const fs::path& base = {});
};

namespace pipeline_detail {

inline nlohmann::ordered_json train_to_json(const TrainConfig& t) {
  nlohmann::ordered_json j;
  j["learning_rate"] = t.learning_rate;
  j["momentum"] = t.momentum;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  j["validation_fraction"] = t.validation_fraction;
  j["hidden_layers"] = t.hidden_layers;
  return j;
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.validation_fraction = j.value("validation_fraction", t.validation_fraction);
  if (j.contains("hidden_layers")) t.hidden_layers = j.at("hidden_layers").get<std::vector<std::size_t>>();
  return t;
}

inline void check_keys(const nlohmann::json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError("unknown config key " + std::string(section) + "." + k);
  }
}

}  // namespace pipeline_detail

inline nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  nlohmann::ordered_json paths;
  paths["corpus"] = corpus_dir.string();
  paths["work"] = work_dir.string();
  if (model_file) paths["model"] = model_file->string();
  if (external_features) paths["features"] = external_features->string();
  j["paths"] = std::move(paths);
  auto spec = synth.to_json();
  spec.erase("seed");
  j["synth"] = std::move(spec);
  auto det = detector.to_json();
  if (!detector_classes_explicit) det.erase("classes_of_interest");
  j["detector"] = std::move(det);
  j["train"] = pipeline_detail::train_to_json(train);
  nlohmann::ordered_json emb;
  emb["method"] = reduction_name(embedding.method);
  if (embedding.dims) {
    emb["dims"] = *embedding.dims;
  } else {
    emb["dims"] = "full";
  }
  auto tsne_json = embedding.tsne.to_json();
  tsne_json.erase("seed");
  emb["tsne"] = std::move(tsne_json);
  j["embedding"] = std::move(emb);
  j["retrieval"] = {{"metric", metric_name(retrieval.metric)},
                    {"k", retrieval.k},
                    {"space", retrieval.reduced_space ? "reduced" : "full"}};
  j["density"] = {{"alpha", density.alpha}, {"grid", {density.grid_rows, density.grid_cols}}, {"pad", density.pad}};
  return j;
}

/// Relative paths resolve against `base` (the config file's directory).
inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, const fs::path& base) {
  using pipeline_detail::check_keys;
  PipelineConfig c;
  const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
  try {
    check_keys(j, "config", {"seed", "paths", "synth", "detector", "train", "embedding", "retrieval", "density"});
    c.seed = j.value("seed", c.seed);
    c.corpus_dir = resolve(c.corpus_dir.string());
    c.work_dir = resolve(c.work_dir.string());
    if (j.contains("paths")) {
      const auto& p = j.at("paths");
      check_keys(p, "paths", {"corpus", "work", "model", "features"});
      if (p.contains("corpus")) c.corpus_dir = resolve(p.at("corpus").get<std::string>());
      if (p.contains("work")) c.work_dir = resolve(p.at("work").get<std::string>());
      if (p.contains("model")) c.model_file = resolve(p.at("model").get<std::string>());
      if (p.contains("features")) c.external_features = resolve(p.at("features").get<std::string>());
    }
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      if (!s.is_object()) throw ConfigError("synth must be an object");
      if (s.contains("seed")) throw ConfigError("synth.seed is derived from the top-level seed");
      const auto known = CorpusSpec{}.to_json();
      for (const auto& [k, v] : s.items()) {
        if (!known.contains(k)) throw ConfigError("unknown config key synth." + k);
      }
      c.synth = CorpusSpec::from_json(s);
    }
    if (j.contains("detector")) {
      const auto& d = j.at("detector");
      check_keys(d, "detector", {"iou_threshold", "min_box", "classes_of_interest"});
      c.detector = DetectorConfig::from_json(d);
      c.detector_classes_explicit = d.contains("classes_of_interest");
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, "train", {"learning_rate", "momentum", "batch_size", "epochs", "validation_fraction", "hidden_layers"});
      c.train = pipeline_detail::train_from_json(t);
    }
    if (j.contains("embedding")) {
      const auto& e = j.at("embedding");
      check_keys(e, "embedding", {"method", "dims", "tsne"});
      if (e.contains("method")) c.embedding.method = reduction_from_name(e.at("method").get<std::string>());
      if (e.contains("dims")) {
        const auto& d = e.at("dims");
        if (d.is_string()) {
          if (d.get<std::string>() != "full") throw ConfigError("embedding.dims must be a positive integer or \"full\"");
          c.embedding.dims.reset();
        } else {
          const auto v = d.get<std::int64_t>();
          if (v < 1) throw ConfigError("embedding.dims must be a positive integer or \"full\"");
          c.embedding.dims = static_cast<std::size_t>(v);
        }
      }
      if (e.contains("tsne")) {
        if (e.at("tsne").contains("seed")) throw ConfigError("embedding.tsne.seed is derived from the top-level seed");
        c.embedding.tsne = TsneConfig::from_json(e.at("tsne"));
      }
    }
    if (j.contains("retrieval")) {
      const auto& r = j.at("retrieval");
      check_keys(r, "retrieval", {"metric", "k", "space"});
      if (r.contains("metric")) c.retrieval.metric = metric_from_name(r.at("metric").get<std::string>());
      c.retrieval.k = r.value("k", c.retrieval.k);
      const auto space = r.value("space", std::string("full"));
      if (space != "full" && space != "reduced") throw ConfigError("retrieval.space must be \"full\" or \"reduced\"");
      c.retrieval.reduced_space = space == "reduced";
    }
    if (j.contains("density")) {
      const auto& d = j.at("density");
      check_keys(d, "density", {"alpha", "grid", "pad"});
      c.density.alpha = d.value("alpha", c.density.alpha);
      if (d.contains("grid")) {
        const auto g = d.at("grid").get<std::vector<std::size_t>>();
        if (g.size() != 2) throw ConfigError("density.grid must be [rows, cols]");
        c.density.grid_rows = g[0];
        c.density.grid_cols = g[1];
      }
      c.density.pad = d.value("pad", c.density.pad);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.retrieval.k == 0) throw ConfigError("retrieval.k must be positive");
  if (!(c.density.alpha > 0.0 && c.density.alpha < 1.0)) throw ConfigError("density.alpha must be in (0,1)");
  if (c.density.grid_rows < 2 || c.density.grid_cols < 2) throw ConfigError("density.grid must be at least 2x2");
  if (!(c.density.pad >= 0.0)) throw ConfigError("density.pad must be >= 0");
  return c;
}

/// Applies `a.b.c=value` to a config document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + path + "' has an empty component");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override key '" + path + "' descends into a non-object");
      *node = nlohmann::json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Loads a config file, applies overrides, then SEGSCOPE_SEED.
inline PipelineConfig load_pipeline_config(const fs::path& path, const std::vector<std::string>& overrides) {
  if (!fs::exists(path)) throw IoError("missing input: config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (const char* env = std::getenv("SEGSCOPE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError("SEGSCOPE_SEED must be a non-negative integer");
    doc["seed"] = v;
  }
  return PipelineConfig::from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------------------
// Manifests

inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline std::string sha256_file(const fs::path& p) { return sha256_hex(read_file_bytes(p)); }

/// Records hashed inputs and outputs of one stage. Paths are stored relative
/// to the corpus or work directory so that manifests compare across
/// locations.
class Manifest {
 public:
  Manifest(std::string stage, const PipelineConfig& cfg) : stage_(std::move(stage)), cfg_(cfg) {}

  void input(const fs::path& p) { add(inputs_, p); }
  void output(const fs::path& p) { add(outputs_, p); }
  void input_dir(const fs::path& d) { add_dir(inputs_, d); }
  void output_dir(const fs::path& d) { add_dir(outputs_, d); }

  /// The config hash covers everything except `paths`.
  std::string config_hash() const {
    auto j = cfg_.to_json();
    j.erase("paths");
    return sha256_hex(j.dump());
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["tool"] = "segscope";
    j["version"] = SEGSCOPE_VERSION;
    j["stage"] = stage_;
    j["seed"] = cfg_.seed;
    j["config_sha256"] = config_hash();
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    return j;
  }

  fs::path write() const {
    const fs::path p = cfg_.work_dir / "manifests" / (stage_ + ".json");
    fs::create_directories(p.parent_path());
    write_text_file(p, to_json().dump(2) + "\n");
    write_text_file(cfg_.work_dir / "config.json", cfg_.to_json().dump(2) + "\n");
    return p;
  }

 private:
  std::string label(const fs::path& p) const {
    const auto abs = fs::weakly_canonical(fs::absolute(p));
    for (const auto& [tag, root] : {std::pair<const char*, fs::path>{"work", cfg_.work_dir}, {"corpus", cfg_.corpus_dir}}) {
      const auto r = fs::weakly_canonical(fs::absolute(root));
      const auto rel = abs.lexically_relative(r);
      if (!rel.empty() && *rel.begin() != "..") return std::string(tag) + ":" + rel.generic_string();
    }
    return abs.generic_string();
  }
  void add(nlohmann::ordered_json& into, const fs::path& p) {
    if (!fs::is_regular_file(p)) throw IoError("missing input: " + p.string());
    into[label(p)] = sha256_file(p);
  }
  void add_dir(nlohmann::ordered_json& into, const fs::path& d) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(d)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add(into, f);
  }

  std::string stage_;
  const PipelineConfig& cfg_;
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::object();
};

// ---------------------------------------------------------------------------
// Stages

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw IoError("missing input: " + what + " " + p.string());
}

inline Split split_from_name(const std::string& s) {
  if (s == "source") return Split::Source;
  if (s == "shifted") return Split::Shifted;
  throw ConfigError("split must be \"source\" or \"shifted\", got '" + s + "'");
}

inline fs::path metrics_path(const PipelineConfig& c, Split s) { return c.work_dir / ("metrics_" + std::string(split_name(s)) + ".segt"); }
inline fs::path predicted_path(const PipelineConfig& c, Split s) { return c.work_dir / ("predicted_" + std::string(split_name(s)) + ".json"); }
inline fs::path detections_dir(const PipelineConfig& c, Split s) { return c.work_dir / ("detections_" + std::string(split_name(s))); }
inline fs::path detect_report_path(const PipelineConfig& c, Split s) { return c.work_dir / ("detect_report_" + std::string(split_name(s)) + ".json"); }
inline fs::path features_path(const PipelineConfig& c) { return c.work_dir / "features.segt"; }
inline fs::path embedding_path(const PipelineConfig& c) { return c.work_dir / "embedding.segt"; }
inline fs::path retrieval_report_path(const PipelineConfig& c) { return c.work_dir / "retrieval_report.json"; }
inline fs::path density_dir(const PipelineConfig& c) { return c.work_dir / "density"; }

inline CorpusIndex require_corpus(const PipelineConfig& c) {
  require_file(c.corpus_dir / "index.json", "corpus index");
  return load_corpus_index(c.corpus_dir);
}

inline void add_corpus_inputs(Manifest& m, const PipelineConfig& c, const CorpusIndex& idx, Split split) {
  m.input(c.corpus_dir / "index.json");
  for (const auto* e : idx.split(split)) {
    for (const auto* f : {&e->labels, &e->softmax, &e->image, &e->instances}) m.input(c.corpus_dir / *f);
  }
}

inline void cmd_synth(const PipelineConfig& c) {
  Manifest m("synth", c);
  generate_corpus(c.effective_spec(), c.corpus_dir);
  m.output_dir(c.corpus_dir);
  m.write();
}

inline void cmd_metrics(const PipelineConfig& c, Split split) {
  const auto idx = require_corpus(c);
  Manifest m(std::string("metrics_") + split_name(split), c);
  add_corpus_inputs(m, c, idx, split);
  LedgerDataset ds;
  for (const auto* e : idx.split(split)) {
    const auto probs = read_tensor(c.corpus_dir / e->softmax);
    const auto gt = to_label_raster(read_tensor(c.corpus_dir / e->labels));
    append_image_rows(ds, e->key, probs, gt);
  }
  if (ds.rows() == 0) throw ValidationError("split " + std::string(split_name(split)) + " has no segments");
  fs::create_directories(c.work_dir);
  const auto out = metrics_path(c, split);
  save_dataset(ds, out);
  m.output(out);
  m.output(sidecar_path(out));
  m.write();
}

inline TrainResult cmd_train_meta(const PipelineConfig& c) {
  const TrainConfig tc = c.effective_train();
  tc.validate();
  const auto in = metrics_path(c, Split::Source);
  require_file(in, "source metrics");
  Manifest m("train_meta", c);
  m.input(in);
  m.input(sidecar_path(in));
  const auto ds = load_dataset(in);
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(ds.targets.data(), static_cast<Eigen::Index>(ds.targets.size()));
  auto result = train(ds.features, y, tc);
  fs::create_directories(c.model_path().parent_path());
  save_model(result.model, c.model_path());
  auto hist = nlohmann::ordered_json::array();
  for (const auto& h : result.history) {
    hist.push_back({{"train_mse", h.train_mse},
                    {"validation_mse", std::isnan(h.validation_mse) ? nlohmann::ordered_json() : nlohmann::ordered_json(h.validation_mse)}});
  }
  nlohmann::ordered_json report;
  report["rows"] = ds.rows();
  report["train_rows"] = result.train_indices.size();
  report["validation_rows"] = result.validation_indices.size();
  report["history"] = std::move(hist);
  write_text_file(c.work_dir / "train_history.json", report.dump(2) + "\n");
  m.output(c.model_path());
  m.output(c.work_dir / "train_history.json");
  m.write();
  return result;
}

struct SegmentPrediction {
  SegmentKey key;
  double predicted_iou = 0.0;
  double true_iou = 0.0;
};

inline void write_predictions(const std::vector<SegmentPrediction>& preds, const fs::path& p) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& s : preds) {
    arr.push_back({{"image_key", s.key.image_key},
                   {"segment_id", s.key.segment_id},
                   {"predicted_iou", s.predicted_iou},
                   {"true_iou", s.true_iou}});
  }
  write_text_file(p, arr.dump(1) + "\n");
}

inline std::map<SegmentKey, SegmentPrediction> read_predictions(const fs::path& p) {
  std::map<SegmentKey, SegmentPrediction> out;
  try {
    for (const auto& e : read_json_file(p)) {
      SegmentPrediction s{key_from_json(e), e.at("predicted_iou").get<double>(), e.at("true_iou").get<double>()};
      out[s.key] = s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  return out;
}

inline void cmd_predict_meta(const PipelineConfig& c, Split split) {
  const auto in = metrics_path(c, split);
  require_file(in, "metrics");
  require_file(c.model_path(), "meta model");
  Manifest m(std::string("predict_meta_") + split_name(split), c);
  m.input(in);
  m.input(sidecar_path(in));
  m.input(c.model_path());
  const auto ds = load_dataset(in);
  const auto model = load_model(c.model_path());
  const Eigen::VectorXd pred = model.predict(ds.features);
  std::vector<SegmentPrediction> out(ds.rows());
  for (std::size_t i = 0; i < ds.rows(); ++i) out[i] = {ds.keys[i], pred(static_cast<Eigen::Index>(i)), ds.targets[i]};
  const auto p = predicted_path(c, split);
  write_predictions(out, p);
  m.output(p);
  m.write();
}

/// Thresholds of the filtered-mIoU curve written by cmd_detect.
inline std::vector<double> curve_thresholds() {
  std::vector<double> t;
  for (int i = 1; i <= 10; ++i) t.push_back(i / 10.0);
  return t;
}

inline nlohmann::ordered_json coverage_json(const CoverageTable& table, const std::vector<std::int32_t>& classes) {
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  CoverageCount total;
  for (auto cls : classes) {
    const auto it = table.find(cls);
    const CoverageCount cc = it == table.end() ? CoverageCount{} : it->second;
    per[std::to_string(cls)] = {{"covered", cc.covered}, {"total", cc.total}};
    total += cc;
  }
  nlohmann::ordered_json j;
  j["per_class"] = std::move(per);
  j["covered"] = total.covered;
  j["total"] = total.total;
  j["fraction"] = total.total ? nlohmann::ordered_json(total.fraction()) : nlohmann::ordered_json();
  return j;
}

inline DetectorConfig effective_detector(const PipelineConfig& c, const CorpusIndex& idx) {
  DetectorConfig d = c.detector;
  if (!c.detector_classes_explicit) {
    const auto ids = idx.spec.interest_class_ids();
    d.classes_of_interest = {ids.begin(), ids.end()};
  }
  return d;
}

inline nlohmann::ordered_json cmd_detect(const PipelineConfig& c, Split split) {
  const auto idx = require_corpus(c);
  const auto pred_file = predicted_path(c, split);
  require_file(pred_file, "predictions");
  Manifest m(std::string("detect_") + split_name(split), c);
  add_corpus_inputs(m, c, idx, split);
  m.input(pred_file);
  const auto preds = read_predictions(pred_file);
  const DetectorConfig det = effective_detector(c, idx);

  CropSet all;
  CoverageTable coverage;
  std::vector<ScoredImage> scored;
  auto labels = nlohmann::ordered_json::array();
  const auto entries = idx.split(split);
  for (const auto* e : entries) {
    const auto img = load_synth_image(c.corpus_dir, *e);
    const auto disp = compute_dispersion(img.softmax);
    auto seg = extract_segments(disp.predicted_labels);
    std::vector<double> iou(seg.count());
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const auto it = preds.find({e->key, static_cast<std::int64_t>(s)});
      if (it == preds.end()) throw ValidationError("no prediction for segment " + SegmentKey{e->key, static_cast<std::int64_t>(s)}.str());
      iou[s] = it->second.predicted_iou;
    }
    auto crops = detect(seg, iou, img.image, e->key, det);
    merge_coverage(coverage, instance_coverage(crops, img.instances, img.instance_classes, det));
    for (std::size_t i = 0; i < crops.size(); ++i) {
      labels.push_back({{"image_key", crops.records[i].image_key},
                        {"segment_id", crops.records[i].segment_id},
                        {"gt_class", assign_gt_class(crops.segment_pixels[i], img.labels)}});
    }
    all.append(crops);
    scored.push_back({std::move(seg), img.labels, std::move(iou)});
  }
  if (entries.empty()) throw ValidationError("split " + std::string(split_name(split)) + " has no images");

  const auto dir = detections_dir(c, split);
  fs::remove_all(dir);
  export_crops(all, dir);
  write_text_file(dir / "labels.json", labels.dump(1) + "\n");

  std::vector<std::int32_t> unknown;
  for (std::size_t i = 0; i < idx.spec.unknown_shapes.size(); ++i) unknown.push_back(idx.spec.unknown_class(i));
  const auto thresholds = curve_thresholds();
  const auto classes = idx.spec.known_class_ids();
  const auto curve = filtered_miou_curve(scored, thresholds, classes);
  const std::vector<double> none = {std::numeric_limits<double>::infinity()};
  const double unfiltered = filtered_miou_curve(scored, none, classes)[0].miou;
  const auto num = [](double v) { return std::isnan(v) ? nlohmann::ordered_json() : nlohmann::ordered_json(v); };

  nlohmann::ordered_json report;
  report["split"] = split_name(split);
  report["images"] = entries.size();
  report["detections"] = all.size();
  report["rate"] = detection_rate(all.size(), entries.size());
  report["detector"] = det.to_json();
  report["unknown_coverage"] = coverage_json(coverage, unknown);
  auto all_classes = nlohmann::ordered_json::object();
  for (const auto& [cls, cc] : coverage) all_classes[std::to_string(cls)] = {{"covered", cc.covered}, {"total", cc.total}};
  report["coverage_by_class"] = std::move(all_classes);
  report["unfiltered_miou"] = num(unfiltered);
  auto pts = nlohmann::ordered_json::array();
  for (const auto& p : curve) pts.push_back({{"threshold", p.threshold}, {"miou", num(p.miou)}});
  report["filtered_miou"] = std::move(pts);
  const auto rp = detect_report_path(c, split);
  write_text_file(rp, report.dump(2) + "\n");
  m.output_dir(dir);
  m.output(rp);
  m.write();
  return report;
}

/// Detected crops of the shifted split in export order.
inline std::pair<std::vector<TensorBlob>, std::vector<SegmentKey>> load_crops(const fs::path& dir) {
  require_file(dir / "crops.json", "crop manifest");
  const auto j = read_json_file(dir / "crops.json");
  std::vector<TensorBlob> crops;
  std::vector<SegmentKey> keys;
  try {
    for (const auto& e : j.at("crops")) {
      keys.push_back(key_from_json(e));
      crops.push_back(read_ppm(dir / e.at("path").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "crops.json").string() + ": " + e.what());
  }
  return {std::move(crops), std::move(keys)};
}

inline std::map<SegmentKey, std::int32_t> load_gt_labels(const fs::path& dir) {
  require_file(dir / "labels.json", "segment labels");
  std::map<SegmentKey, std::int32_t> out;
  try {
    for (const auto& e : read_json_file(dir / "labels.json")) out[key_from_json(e)] = e.at("gt_class").get<std::int32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "labels.json").string() + ": " + e.what());
  }
  return out;
}

/// Baseline descriptors of the shifted detections, or the external feature
/// file from paths.features after checking it covers the same segments.
inline void cmd_embed(const PipelineConfig& c) {
  const auto dir = detections_dir(c, Split::Shifted);
  Manifest m("embed", c);
  m.input(dir / "crops.json");
  auto [crops, keys] = load_crops(dir);
  FeatureMatrix fm;
  if (c.external_features) {
    require_file(*c.external_features, "external features");
    m.input(*c.external_features);
    m.input(sidecar_path(*c.external_features));
    fm = ingest_features(*c.external_features);
    const std::set<SegmentKey> want(keys.begin(), keys.end()), have(fm.keys.begin(), fm.keys.end());
    if (want != have) throw ValidationError("external features do not cover exactly the detected segments");
  } else {
    const auto manifest = read_json_file(dir / "crops.json");
    for (const auto& e : manifest.at("crops")) m.input(dir / e.at("path").get<std::string>());
    fm = baseline_features(crops, keys);
  }
  const auto out = features_path(c);
  save_features(fm, out);
  m.output(out);
  m.output(sidecar_path(out));
  m.write();
}

inline void cmd_reduce(const PipelineConfig& c) {
  const auto in = features_path(c);
  require_file(in, "features");
  Manifest m("reduce", c);
  m.input(in);
  m.input(sidecar_path(in));
  const auto fm = ingest_features(in);
  const auto D = static_cast<std::size_t>(fm.rows.cols());
  const std::size_t d = c.embedding.dims.value_or(D);
  const auto e = reduce(fm, c.embedding.method, d, c.effective_tsne());
  const auto out = embedding_path(c);
  save_embedding(e, out);
  m.output(out);
  m.output(sidecar_path(out));
  m.write();
}

inline std::vector<std::int32_t> classes_for(const std::vector<SegmentKey>& keys, const std::map<SegmentKey, std::int32_t>& labels) {
  std::vector<std::int32_t> out;
  out.reserve(keys.size());
  for (const auto& k : keys) {
    const auto it = labels.find(k);
    if (it == labels.end()) throw ValidationError("no ground-truth class for " + k.str());
    out.push_back(it->second);
  }
  return out;
}

/// Evaluates the configured space under both metrics; the configured metric
/// is reported as "primary".
inline nlohmann::ordered_json cmd_eval_retrieval(const PipelineConfig& c) {
  const auto dir = detections_dir(c, Split::Shifted);
  const auto in = c.retrieval.reduced_space ? embedding_path(c) : features_path(c);
  require_file(in, c.retrieval.reduced_space ? "embedding" : "features");
  Manifest m("eval_retrieval", c);
  m.input(in);
  m.input(sidecar_path(in));
  m.input(dir / "labels.json");
  const auto labels = load_gt_labels(dir);
  Eigen::MatrixXd coords;
  std::vector<SegmentKey> keys;
  if (c.retrieval.reduced_space) {
    auto e = load_embedding(in);
    coords = std::move(e.coords);
    keys = std::move(e.keys);
  } else {
    auto fm = ingest_features(in);
    coords = std::move(fm.rows);
    keys = std::move(fm.keys);
  }
  const auto classes = classes_for(keys, labels);
  nlohmann::ordered_json report;
  report["space"] = c.retrieval.reduced_space ? "reduced" : "full";
  report["points"] = keys.size();
  report["primary"] = metric_name(c.retrieval.metric);
  nlohmann::ordered_json by_metric;
  for (Metric metric : {Metric::Euclidean, Metric::Cosine}) by_metric[metric_name(metric)] = evaluate_retrieval(coords, keys, classes, metric).to_json();
  nlohmann::ordered_json cmp;
  for (const char* name : {"euclidean", "cosine"}) {
    cmp[name] = {{"global_map", by_metric[name]["global_map"]}, {"balanced_map", by_metric[name]["balanced_map"]}};
  }
  report["comparison"] = std::move(cmp);
  report["evaluations"] = std::move(by_metric);
  const auto out = retrieval_report_path(c);
  write_text_file(out, report.dump(2) + "\n");
  m.output(out);
  m.write();
  return report;
}

/// Global and per-class KDE grids on the 2-D embedding plus HDR thresholds.
inline nlohmann::ordered_json cmd_density(const PipelineConfig& c) {
  const auto in = embedding_path(c);
  require_file(in, "embedding");
  const auto dir = detections_dir(c, Split::Shifted);
  Manifest m("density", c);
  m.input(in);
  m.input(sidecar_path(in));
  m.input(dir / "labels.json");
  const auto e = load_embedding(in);
  if (e.coords.cols() != 2) throw ValidationError("density needs a 2-D embedding, got " + std::to_string(e.coords.cols()) + " dims");
  const auto classes = classes_for(e.keys, load_gt_labels(dir));
  const auto global = kde_fit(e.coords);
  const auto extent = padded_extent(global, c.density.grid_rows, c.density.grid_cols, c.density.pad);

  const auto out_dir = density_dir(c);
  fs::remove_all(out_dir);
  fs::create_directories(out_dir);
  nlohmann::ordered_json report;
  report["alpha"] = c.density.alpha;
  report["extent"] = extent.to_json();
  nlohmann::ordered_json grids = nlohmann::ordered_json::object();
  const auto emit = [&](const std::string& name, const DensityModel& model) {
    const auto grid = density_grid(model, extent);
    const std::string file = name + ".segt";
    write_tensor(from_double_raster(grid), out_dir / file);
    grids[name] = {{"file", file},
                   {"points", model.samples.rows()},
                   {"hdr_threshold", hdr_threshold(model, model.samples, c.density.alpha)},
                   {"integral", grid_integral(grid, extent)}};
    m.output(out_dir / file);
  };
  emit("global", global);
  std::map<std::int32_t, std::vector<Eigen::Index>> by_class;
  std::vector<std::int32_t> skipped;  // too few points for a threshold
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] != kIgnoreLabel) by_class[classes[i]].push_back(static_cast<Eigen::Index>(i));
  }
  for (const auto& [cls, rows] : by_class) {
    if (rows.size() < kMinHdrPoints) {
      skipped.push_back(cls);
      continue;
    }
    Eigen::MatrixXd pts(static_cast<Eigen::Index>(rows.size()), 2);
    for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = e.coords.row(rows[i]);
    emit("class_" + std::to_string(cls), kde_fit(pts));
  }
  report["grids"] = std::move(grids);
  report["skipped_classes"] = skipped;
  write_text_file(out_dir / "density.json", report.dump(2) + "\n");
  m.output(out_dir / "density.json");
  m.write();
  return report;
}

/// Every stage in order, as run by the `all` subcommand.
inline void run_all(const PipelineConfig& c) {
  cmd_synth(c);
  cmd_metrics(c, Split::Source);
  cmd_metrics(c, Split::Shifted);
  cmd_train_meta(c);
  cmd_predict_meta(c, Split::Source);
  cmd_predict_meta(c, Split::Shifted);
  cmd_detect(c, Split::Source);
  cmd_detect(c, Split::Shifted);
  cmd_embed(c);
  cmd_reduce(c);
  cmd_eval_retrieval(c);
  if (c.embedding.dims == std::optional<std::size_t>(2)) cmd_density(c);
}

// ---------------------------------------------------------------------------
// Errors

inline std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config_error";
  if (dynamic_cast<const IoError*>(&e)) return "missing_input";
  if (dynamic_cast<const FormatError*>(&e)) return "format_error";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation_error";
  if (dynamic_cast<const TrainingError*>(&e)) return "training_error";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric_error";
  return "error";
}

inline int exit_code_for(const std::string& kind) {
  if (kind == "config_error") return 2;
  if (kind == "missing_input") return 3;
  if (kind == "format_error" || kind == "validation_error") return 4;
  return 1;
}

/// Single-line JSON for standard error.
inline std::string error_line(const std::string& kind, const std::string& detail) {
  return nlohmann::json{{"error", kind}, {"detail", detail}}.dump();
}

}  // namespace segscope
