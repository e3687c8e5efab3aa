#pragma once

// Read-only HTTP view of a pipeline work directory: points of the 2-D
// embedding, crops as PNG, query-by-example retrieval and density grids.
//
// ExplorerApi::handle is transport-free so it can be tested directly;
// serve() binds it to an httplib server.

#include <png.h>

#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "segscope/embedding.hpp"
#include "segscope/ood_detector.hpp"
#include "segscope/retrieval_eval.hpp"
#include "segscope/tensor_store.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a `_res` macro that
// collides with Eigen parameter names.
#include "httplib.h"

namespace segscope {

// ---------------------------------------------------------------------------
// PNG

/// 8-bit RGB PNG of an (h, w, 3) u8 tensor.
inline std::vector<std::uint8_t> encode_png(const TensorBlob& rgb) {
  check_rgb_image(rgb);
  const auto h = rgb.dims()[0], w = rgb.dims()[1];
  const auto px = rgb.values<std::uint8_t>();
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows(h);
  for (std::size_t r = 0; r < h; ++r) rows[r] = const_cast<png_bytep>(px.data() + r * w * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png encoding failed");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t len) {
        auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + len);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes 8-bit RGB PNGs as written by encode_png.
inline TensorBlob decode_png(std::span<const std::uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) throw FormatError("not a PNG");
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw FormatError("corrupt PNG");
  }
  return TensorBlob::of<std::uint8_t>({img.height, img.width, 3}, std::move(px));
}

// ---------------------------------------------------------------------------
// Snapshot

struct SnapshotPoint {
  SegmentKey key;
  double x = 0.0, y = 0.0;
  std::int32_t gt_class = kIgnoreLabel;
  std::int32_t predicted_class = 0;
  double predicted_iou = 0.0;
  std::filesystem::path crop;
};

struct SnapshotDensity {
  GridExtent extent;
  Raster<double> grid;
  double hdr_threshold = 0.0;
};

/// Everything the explorer serves, loaded once and never modified.
struct Snapshot {
  std::filesystem::path dir;
  std::vector<SnapshotPoint> points;
  Eigen::MatrixXd reduced;  // N x 2
  FeatureMatrix features;   // full space, same order as points
  std::string method;
  std::map<std::string, SnapshotDensity> density;  // "global", "class_<id>"
  double density_alpha = 0.0;
  nlohmann::ordered_json config;  // null when absent

  std::vector<SegmentKey> keys() const {
    std::vector<SegmentKey> k;
    for (const auto& p : points) k.push_back(p.key);
    return k;
  }
};

/// Reads a work directory produced by the pipeline (embedding, features,
/// shifted detections, optional density and config).
inline Snapshot load_snapshot(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Snapshot s;
  s.dir = dir;
  const auto need = [&](const fs::path& p) {
    if (!fs::is_regular_file(p)) throw IoError("missing input: snapshot file " + p.string());
    return p;
  };
  const fs::path det = dir / "detections_shifted";
  const auto emb = load_embedding(need(dir / "embedding.segt"));
  if (emb.coords.cols() != 2) throw ValidationError("snapshot embedding must be 2-D");
  if (!emb.coords.allFinite()) throw ValidationError("snapshot coordinates are not finite");
  s.reduced = emb.coords;
  s.method = reduction_name(emb.method);
  const auto feats = ingest_features(need(dir / "features.segt"));

  std::map<SegmentKey, DetectionRecord> records;
  for (auto& r : read_records(need(det / "records.jsonl"))) records[r.key()] = r;
  std::map<SegmentKey, std::string> crops;
  std::map<SegmentKey, std::int32_t> labels;
  try {
    const auto crop_manifest = read_json_file(need(det / "crops.json"));
    for (const auto& e : crop_manifest.at("crops")) crops[key_from_json(e)] = e.at("path").get<std::string>();
    for (const auto& e : read_json_file(need(det / "labels.json"))) labels[key_from_json(e)] = e.at("gt_class").get<std::int32_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("snapshot detections: " + std::string(e.what()));
  }

  std::map<SegmentKey, Eigen::Index> feature_row;
  for (std::size_t i = 0; i < feats.keys.size(); ++i) feature_row[feats.keys[i]] = static_cast<Eigen::Index>(i);
  s.features.source = feats.source;
  s.features.rows.resize(emb.coords.rows(), feats.rows.cols());
  for (std::size_t i = 0; i < emb.keys.size(); ++i) {
    const auto& k = emb.keys[i];
    const auto rec = records.find(k);
    const auto crop = crops.find(k);
    const auto fr = feature_row.find(k);
    if (rec == records.end() || crop == crops.end() || fr == feature_row.end()) {
      throw ValidationError("snapshot point " + k.str() + " lacks a record, crop or feature row");
    }
    SnapshotPoint p;
    p.key = k;
    p.x = emb.coords(static_cast<Eigen::Index>(i), 0);
    p.y = emb.coords(static_cast<Eigen::Index>(i), 1);
    const auto lab = labels.find(k);
    p.gt_class = lab == labels.end() ? kIgnoreLabel : lab->second;
    p.predicted_class = rec->second.predicted_class;
    p.predicted_iou = rec->second.predicted_iou;
    p.crop = det / crop->second;
    if (!fs::is_regular_file(p.crop)) throw IoError("missing input: crop " + p.crop.string());
    s.points.push_back(std::move(p));
    s.features.keys.push_back(k);
    s.features.rows.row(static_cast<Eigen::Index>(i)) = feats.rows.row(fr->second);
  }

  const fs::path dens = dir / "density" / "density.json";
  if (fs::is_regular_file(dens)) {
    const auto j = read_json_file(dens);
    try {
      s.density_alpha = j.at("alpha").get<double>();
      const auto& ex = j.at("extent");
      GridExtent e;
      e.x_min = ex.at("x_min").get<double>();
      e.x_max = ex.at("x_max").get<double>();
      e.y_min = ex.at("y_min").get<double>();
      e.y_max = ex.at("y_max").get<double>();
      e.rows = ex.at("rows").get<std::size_t>();
      e.cols = ex.at("cols").get<std::size_t>();
      for (const auto& [name, g] : j.at("grids").items()) {
        SnapshotDensity d;
        d.extent = e;
        const auto t = read_tensor(need(dens.parent_path() / g.at("file").get<std::string>()));
        const auto v = t.values<float>();
        if (t.rank() != 2) throw FormatError("density grid " + name + " is not 2-D");
        d.grid = Raster<double>(t.dims()[0], t.dims()[1], std::vector<double>(v.begin(), v.end()));
        d.hdr_threshold = g.at("hdr_threshold").get<double>();
        s.density[name] = std::move(d);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(dens.string() + ": " + e.what());
    }
  }
  if (fs::is_regular_file(dir / "config.json")) s.config = read_json_file(dir / "config.json");
  return s;
}

// ---------------------------------------------------------------------------
// Handlers

struct ApiResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

inline ApiResponse json_response(const nlohmann::ordered_json& j, int status = 200) { return {status, "application/json", j.dump()}; }

inline ApiResponse error_response(int status, const std::string& error, const std::string& detail) {
  nlohmann::ordered_json j;
  j["error"] = error;
  j["detail"] = detail;
  return json_response(j, status);
}

class ExplorerApi {
 public:
  explicit ExplorerApi(Snapshot snapshot, std::optional<std::filesystem::path> static_dir = std::nullopt)
      : snap_(std::move(snapshot)), static_dir_(std::move(static_dir)), keys_(snap_.keys()) {}

  const Snapshot& snapshot() const { return snap_; }

  /// `params` are query-string parameters; `body` is the raw request body.
  ApiResponse handle(const std::string& method, const std::string& path,
                     const std::map<std::string, std::string>& params = {}, const std::string& body = {}) const {
    try {
      if (method == "GET" && path == "/api/meta") return meta();
      if (method == "GET" && path == "/api/points") return points();
      if (method == "GET" && path.rfind("/api/crops/", 0) == 0) return crop(path.substr(11));
      if (method == "POST" && path == "/api/retrieve") return retrieve(body);
      if (method == "GET" && path == "/api/density") return density(params);
      if (method == "GET" && path.rfind("/api/", 0) != 0) return static_file(path);
      return error_response(404, "not_found", method + " " + path);
    } catch (const std::exception& e) {
      return error_response(500, "internal_error", e.what());
    }
  }

  ApiResponse meta() const {
    nlohmann::ordered_json j;
    j["points"] = snap_.points.size();
    std::set<std::int32_t> classes;
    for (const auto& p : snap_.points) classes.insert(p.gt_class);
    j["classes"] = std::vector<std::int32_t>(classes.begin(), classes.end());
    j["method"] = snap_.method;
    j["feature_dims"] = snap_.features.rows.cols();
    std::vector<std::string> dens;
    for (const auto& [name, d] : snap_.density) dens.push_back(name);
    j["density"] = dens;
    j["config"] = snap_.config;
    return json_response(j);
  }

  ApiResponse points() const {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& p : snap_.points) {
      nlohmann::ordered_json e;
      e["image_key"] = p.key.image_key;
      e["segment_id"] = p.key.segment_id;
      e["x"] = p.x;
      e["y"] = p.y;
      e["gt_class"] = p.gt_class;
      e["predicted_class"] = p.predicted_class;
      e["predicted_iou"] = p.predicted_iou;
      e["crop"] = "/api/crops/" + p.key.image_key + "/" + std::to_string(p.key.segment_id);
      arr.push_back(std::move(e));
    }
    return json_response(arr);
  }

  /// `rest` is "{image_key}/{segment_id}".
  ApiResponse crop(const std::string& rest) const {
    const auto slash = rest.rfind('/');
    if (slash == std::string::npos || slash == 0) return error_response(404, "unknown_key", rest);
    SegmentKey key{rest.substr(0, slash), 0};
    const std::string id = rest.substr(slash + 1);
    if (id.empty() || id.find_first_not_of("0123456789") != std::string::npos || id.size() > 18) {
      return error_response(404, "unknown_key", rest);
    }
    key.segment_id = std::stoll(id);
    const auto idx = find(key);
    if (!idx) return error_response(404, "unknown_key", key.str());
    const auto png = encode_png(read_ppm(snap_.points[*idx].crop));
    return {200, "image/png", std::string(png.begin(), png.end())};
  }

  /// Body: {"key": {"image_key", "segment_id"} | "image/id", "metric", "k", "space"}.
  ApiResponse retrieve(const std::string& body) const {
    const auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return error_response(400, "bad_request", "body is not a JSON object");
    SegmentKey key;
    Metric metric = Metric::Euclidean;
    std::size_t k = 10;
    bool reduced = false;
    try {
      if (!j.contains("key")) return error_response(400, "bad_request", "missing field key");
      const auto& kj = j.at("key");
      if (kj.is_string()) {
        const auto s = kj.get<std::string>();
        const auto slash = s.rfind('/');
        if (slash == std::string::npos) return error_response(400, "bad_request", "key must be image_key/segment_id");
        key.image_key = s.substr(0, slash);
        const std::string id = s.substr(slash + 1);
        if (id.empty() || id.find_first_not_of("0123456789") != std::string::npos || id.size() > 18) {
          return error_response(400, "bad_request", "key must be image_key/segment_id");
        }
        key.segment_id = std::stoll(id);
      } else {
        key = key_from_json(kj);
      }
      if (j.contains("metric")) metric = metric_from_name(j.at("metric").get<std::string>());
      if (j.contains("k")) {
        const auto kv = j.at("k").get<std::int64_t>();
        if (kv < 1) return error_response(400, "bad_request", "k must be >= 1");
        k = static_cast<std::size_t>(kv);
      }
      if (j.contains("space")) {
        const auto sp = j.at("space").get<std::string>();
        if (sp != "full" && sp != "reduced") return error_response(400, "bad_request", "space must be full or reduced");
        reduced = sp == "reduced";
      }
    } catch (const nlohmann::json::exception& e) {
      return error_response(400, "bad_request", e.what());
    } catch (const Error& e) {
      return error_response(400, "bad_request", e.what());
    }
    if (!find(key)) return error_response(404, "unknown_key", key.str());
    auto ranked = rank(key, reduced ? snap_.reduced : snap_.features.rows, keys_, metric);
    if (ranked.size() > k) ranked.resize(k);
    nlohmann::ordered_json out;
    out["query"] = {{"image_key", key.image_key}, {"segment_id", key.segment_id}};
    out["metric"] = metric_name(metric);
    out["space"] = reduced ? "reduced" : "full";
    out["k"] = ranked.size();
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : ranked) {
      arr.push_back({{"image_key", r.key.image_key}, {"segment_id", r.key.segment_id}, {"distance", r.distance}});
    }
    out["results"] = std::move(arr);
    return json_response(out);
  }

  ApiResponse density(const std::map<std::string, std::string>& params) const {
    const auto it = params.find("class");
    const std::string cls = it == params.end() ? "global" : it->second;
    const std::string name = cls == "global" ? "global" : "class_" + cls;
    const auto d = snap_.density.find(name);
    if (d == snap_.density.end()) return error_response(404, "unknown_density", "no density grid for class " + cls);
    nlohmann::ordered_json j;
    j["class"] = cls;
    j["alpha"] = snap_.density_alpha;
    j["extent"] = d->second.extent.to_json();
    j["hdr_threshold"] = d->second.hdr_threshold;
    auto rows = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < d->second.grid.rows(); ++r) {
      auto row = nlohmann::ordered_json::array();
      for (std::size_t c = 0; c < d->second.grid.cols(); ++c) row.push_back(d->second.grid(r, c));
      rows.push_back(std::move(row));
    }
    j["values"] = std::move(rows);
    return json_response(j);
  }

  ApiResponse static_file(const std::string& path) const {
    if (!static_dir_) {
      if (path == "/" || path == "/index.html") {
        return {200, "text/html",
                "<!doctype html><title>segscope explorer</title><p>UI assets are not installed. API: /api/meta, "
                "/api/points, /api/crops/{image_key}/{segment_id}, POST /api/retrieve, /api/density.</p>\n"};
      }
      return error_response(404, "not_found", path);
    }
    const std::string rel = path == "/" ? "index.html" : path.substr(1);
    if (rel.find("..") != std::string::npos) return error_response(404, "not_found", path);
    const auto file = *static_dir_ / rel;
    if (!std::filesystem::is_regular_file(file)) return error_response(404, "not_found", path);
    const auto ext = file.extension().string();
    const std::string type = ext == ".html" ? "text/html"
                             : ext == ".js" ? "text/javascript"
                             : ext == ".css" ? "text/css"
                             : ext == ".svg" ? "image/svg+xml"
                             : ext == ".png" ? "image/png"
                             : ext == ".json" ? "application/json"
                                              : "application/octet-stream";
    return {200, type, read_text_file(file)};
  }

 private:
  std::optional<std::size_t> find(const SegmentKey& key) const {
    const auto it = std::lower_bound(sorted_.begin(), sorted_.end(), std::pair<SegmentKey, std::size_t>{key, 0},
                                     [](const auto& a, const auto& b) { return a.first < b.first; });
    if (it == sorted_.end() || it->first != key) return std::nullopt;
    return it->second;
  }

  Snapshot snap_;
  std::optional<std::filesystem::path> static_dir_;
  std::vector<SegmentKey> keys_;
  std::vector<std::pair<SegmentKey, std::size_t>> sorted_ = [this] {
    std::vector<std::pair<SegmentKey, std::size_t>> v;
    for (std::size_t i = 0; i < keys_.size(); ++i) v.emplace_back(keys_[i], i);
    std::sort(v.begin(), v.end());
    return v;
  }();
};

/// Routes every request of `server` to `api`.
inline void mount(httplib::Server& server, const ExplorerApi& api) {
  const auto forward = [&api](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> params;
    for (const auto& [k, v] : req.params) params.emplace(k, v);
    const auto r = api.handle(req.method, req.path, params, req.body);
    res.status = r.status;
    res.set_content(r.body, r.content_type);
  };
  server.Get(".*", forward);
  server.Post(".*", forward);
}

/// Blocks until the server stops. `on_ready` receives the bound port.
inline void serve(const ExplorerApi& api, const std::string& host, int port,
                  const std::function<void(int)>& on_ready = {}) {
  httplib::Server server;
  mount(server, api);
  int bound = port;
  if (port == 0) {
    bound = server.bind_to_any_port(host);
  } else if (!server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  if (on_ready) on_ready(bound);
  server.listen_after_bind();
}

}  // namespace segscope
