#pragma once

// Segment-wise metric vectors aggregated from dispersion heat maps.
//
// Ledger layout for K classes (31 + K values):
//   S, S_in, S_bd, S_rel = S / max(S_bd, 1), S_in_rel = S_in / max(S_bd, 1)
//   for D in {E, M, V}:
//     mean, mean_in, mean_bd, var, var_in, var_bd, rel = mean * S_rel,
//     rel_in = mean_in * S_in_rel
//   prob_0 .. prob_{K-1}: mean softmax probability per class over the segment
//   bbox_width, bbox_height
// Variances are population variances; statistics over empty sets are 0.

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <vector>

#include "segscope/dispersion.hpp"
#include "segscope/segments.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

inline std::size_t ledger_width(std::size_t num_classes) { return 31 + num_classes; }

inline std::vector<std::string> metric_names(std::size_t num_classes) {
  std::vector<std::string> names = {"S", "S_in", "S_bd", "S_rel", "S_in_rel"};
  for (const char* d : {"E", "M", "V"}) {
    for (const char* stat : {"mean", "mean_in", "mean_bd", "var", "var_in", "var_bd", "rel", "rel_in"}) {
      names.push_back(std::string(d) + "_" + stat);
    }
  }
  for (std::size_t k = 0; k < num_classes; ++k) names.push_back("prob_" + std::to_string(k));
  names.push_back("bbox_width");
  names.push_back("bbox_height");
  return names;
}

namespace detail {

// Two-pass mean and population variance over a pixel subset.
template <typename Pred>
std::pair<double, double> masked_moments(const Raster<double>& map, std::span<const std::size_t> pixels,
                                         Pred include) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto idx : pixels) {
    if (include(idx)) {
      sum += map[idx];
      ++n;
    }
  }
  if (n == 0) return {0.0, 0.0};
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto idx : pixels) {
    if (include(idx)) {
      const double d = map[idx] - mean;
      sq += d * d;
    }
  }
  return {mean, sq / static_cast<double>(n)};
}

}  // namespace detail

/// Metric vector of one segment of `seg`.
inline std::vector<double> aggregate_segment(const SegmentMap& seg, std::size_t segment, const DispersionMaps& disp,
                                             const TensorBlob& probs) {
  if (segment >= seg.count()) throw ValidationError("aggregate_segment: unknown segment id");
  const auto& pixels = seg.segment_pixels[segment];
  if (pixels.empty()) throw ValidationError("aggregate_segment: empty segment");
  check_softmax_shape(probs);
  if (probs.dims()[0] != seg.rows() || probs.dims()[1] != seg.cols() || disp.rows() != seg.rows() ||
      disp.cols() != seg.cols()) {
    throw ValidationError("aggregate_segment: shape mismatch");
  }
  const std::size_t k = probs.dims()[2];

  std::vector<double> out;
  out.reserve(ledger_width(k));
  std::size_t s_bd = 0;
  for (const auto idx : pixels) s_bd += seg.boundary_mask[idx];
  const std::size_t s = pixels.size();
  const std::size_t s_in = s - s_bd;
  const double bd_denom = static_cast<double>(std::max<std::size_t>(s_bd, 1));
  const double s_rel = static_cast<double>(s) / bd_denom;
  const double s_in_rel = static_cast<double>(s_in) / bd_denom;
  out.insert(out.end(), {static_cast<double>(s), static_cast<double>(s_in), static_cast<double>(s_bd), s_rel, s_in_rel});

  const auto all = [](std::size_t) { return true; };
  const auto inner = [&](std::size_t idx) { return seg.boundary_mask[idx] == 0; };
  const auto border = [&](std::size_t idx) { return seg.boundary_mask[idx] != 0; };
  for (const Raster<double>* map : {&disp.entropy, &disp.margin, &disp.variation_ratio}) {
    const auto [mean_all, var_all] = detail::masked_moments(*map, pixels, all);
    const auto [mean_in, var_in] = detail::masked_moments(*map, pixels, inner);
    const auto [mean_bd, var_bd] = detail::masked_moments(*map, pixels, border);
    out.insert(out.end(), {mean_all, mean_in, mean_bd, var_all, var_in, var_bd, mean_all * s_rel, mean_in * s_in_rel});
  }

  const auto& values = probs.values<float>();
  std::vector<double> class_sum(k, 0.0);
  for (const auto idx : pixels) {
    for (std::size_t c = 0; c < k; ++c) class_sum[c] += static_cast<double>(values[idx * k + c]);
  }
  for (std::size_t c = 0; c < k; ++c) out.push_back(class_sum[c] / static_cast<double>(s));

  const auto& box = seg.bboxes[segment];
  out.push_back(static_cast<double>(box.width()));
  out.push_back(static_cast<double>(box.height()));
  return out;
}

struct LedgerInput {
  std::string image_key;
  TensorBlob probs;   // float32 (H,W,K)
  LabelRaster gt;     // int32 (H,W), kIgnoreLabel allowed
};

/// Row-per-segment training table for the meta regressor.
struct LedgerDataset {
  std::vector<std::string> metric_names;
  Eigen::MatrixXd features;  // N x (31 + K)
  std::vector<double> targets;
  std::vector<SegmentKey> keys;

  std::size_t rows() const { return keys.size(); }
};

/// Metric rows of every segment in one image, with true IoU targets.
inline void append_image_rows(LedgerDataset& ds, const std::string& image_key, const TensorBlob& probs,
                              const LabelRaster& gt) {
  check_softmax_shape(probs);
  if (probs.dims()[0] != gt.rows() || probs.dims()[1] != gt.cols()) {
    throw ValidationError("build_dataset: shape mismatch for image " + image_key);
  }
  const auto disp = compute_dispersion(probs);
  const auto seg = extract_segments(disp.predicted_labels);
  const auto iou = segment_iou(seg, gt);
  const std::size_t width = ledger_width(probs.dims()[2]);
  if (ds.metric_names.empty()) ds.metric_names = metric_names(probs.dims()[2]);
  if (ds.metric_names.size() != width) throw ValidationError("build_dataset: inconsistent class count");

  const auto first = static_cast<Eigen::Index>(ds.rows());
  ds.features.conservativeResize(first + static_cast<Eigen::Index>(seg.count()), static_cast<Eigen::Index>(width));
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const auto row = aggregate_segment(seg, s, disp, probs);
    for (std::size_t j = 0; j < width; ++j) {
      ds.features(first + static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j)) = row[j];
    }
    ds.targets.push_back(iou[s]);
    ds.keys.push_back({image_key, static_cast<std::int64_t>(s)});
  }
}

inline LedgerDataset build_dataset(std::span<const LedgerInput> images) {
  if (images.empty()) throw ValidationError("build_dataset: no images");
  LedgerDataset ds;
  for (const auto& img : images) append_image_rows(ds, img.image_key, img.probs, img.gt);
  return ds;
}

/// Persists as SEGT float32 (N, width) plus a JSON sidecar next to it.
inline void save_dataset(const LedgerDataset& ds, const std::filesystem::path& path) {
  const auto n = static_cast<std::size_t>(ds.features.rows());
  const auto w = static_cast<std::size_t>(ds.features.cols());
  if (n == 0) throw ValidationError("save_dataset: empty dataset");
  std::vector<float> flat(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      flat[i * w + j] = static_cast<float>(ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
    }
  }
  write_tensor(TensorBlob::of<float>({n, w}, std::move(flat)), path);
  nlohmann::json side;
  side["metric_names"] = ds.metric_names;
  side["keys"] = nlohmann::json::array();
  for (const auto& k : ds.keys) side["keys"].push_back(key_to_json(k));
  side["targets"] = ds.targets;
  auto sidecar = path;
  write_json_file(sidecar.replace_extension(".json"), side);
}

inline LedgerDataset load_dataset(const std::filesystem::path& path) {
  const auto blob = read_tensor(path);
  if (blob.rank() != 2 || blob.dtype() != DType::Float32) throw FormatError(path.string() + ": expected float32 (N,D)");
  auto sidecar = path;
  const auto side = read_json_file(sidecar.replace_extension(".json"));
  LedgerDataset ds;
  const std::size_t n = blob.dims()[0], w = blob.dims()[1];
  if (!side.contains("metric_names") || !side.contains("keys") || !side.contains("targets")) {
    throw FormatError(sidecar.string() + ": expected metric_names, keys, targets");
  }
  ds.metric_names = side["metric_names"].get<std::vector<std::string>>();
  ds.targets = side["targets"].get<std::vector<double>>();
  for (const auto& k : side["keys"]) ds.keys.push_back(key_from_json(k));
  if (ds.metric_names.size() != w || ds.targets.size() != n || ds.keys.size() != n) {
    throw FormatError(sidecar.string() + ": sidecar does not match matrix shape");
  }
  const auto& v = blob.values<float>();
  ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(w));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[i * w + j];
    }
  }
  return ds;
}

}  // namespace segscope
