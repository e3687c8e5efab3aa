#pragma once

// Out-of-distribution segment detection: low predicted IoU, class of
// interest, minimum box size. Also the coverage and rate statistics used to
// evaluate a detector, and crop export as binary PPM.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/segments.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

/// Wall, fence, traffic light, traffic sign, person, rider, car, truck, bus,
/// train, motorcycle, bicycle under the 19-class Cityscapes train ids.
inline std::set<std::int32_t> cityscapes_interest_classes() { return {3, 4, 6, 7, 11, 12, 13, 14, 15, 16, 17, 18}; }

struct DetectorConfig {
  double iou_threshold = 0.5;
  std::int64_t min_box_height = 128;
  std::int64_t min_box_width = 128;
  std::set<std::int32_t> classes_of_interest = cityscapes_interest_classes();

  void validate() const {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("iou_threshold must be in (0, 1]");
    if (min_box_height < 1 || min_box_width < 1) throw ConfigError("min_box sizes must be >= 1");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["iou_threshold"] = iou_threshold;
    j["min_box"] = {min_box_height, min_box_width};
    j["classes_of_interest"] = std::vector<std::int32_t>(classes_of_interest.begin(), classes_of_interest.end());
    return j;
  }

  static DetectorConfig from_json(const nlohmann::json& j) {
    DetectorConfig cfg;
    try {
      if (j.contains("iou_threshold")) cfg.iou_threshold = j.at("iou_threshold").get<double>();
      if (j.contains("min_box")) {
        const auto& mb = j.at("min_box");
        if (!mb.is_array() || mb.size() != 2) throw ConfigError("min_box must be [height, width]");
        cfg.min_box_height = mb[0].get<std::int64_t>();
        cfg.min_box_width = mb[1].get<std::int64_t>();
      }
      if (j.contains("classes_of_interest")) {
        const auto ids = j.at("classes_of_interest").get<std::vector<std::int32_t>>();
        cfg.classes_of_interest = {ids.begin(), ids.end()};
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("detector config: ") + e.what());
    }
    cfg.validate();
    return cfg;
  }
};

/// Detections of one or more images. `crops[i]` is the (h, w, 3) uint8 image
/// region under `records[i].bbox`; `segment_pixels[i]` are the flat pixel
/// indices of the detected segment in its source image.
struct CropSet {
  std::vector<DetectionRecord> records;
  std::vector<TensorBlob> crops;
  std::vector<std::vector<std::size_t>> segment_pixels;
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  /// Concatenates detections of another image; shapes are kept only while
  /// every part shares them.
  void append(const CropSet& other) {
    if (records.empty() && crops.empty()) {
      image_rows = other.image_rows;
      image_cols = other.image_cols;
    } else if (image_rows != other.image_rows || image_cols != other.image_cols) {
      image_rows = image_cols = 0;
    }
    records.insert(records.end(), other.records.begin(), other.records.end());
    crops.insert(crops.end(), other.crops.begin(), other.crops.end());
    segment_pixels.insert(segment_pixels.end(), other.segment_pixels.begin(), other.segment_pixels.end());
  }
};

inline void check_rgb_image(const TensorBlob& image) {
  if (image.dtype() != DType::UInt8 || image.rank() != 3 || image.dims()[2] != 3) {
    throw ValidationError("image must be a (H, W, 3) u8 tensor");
  }
}

/// Copies the inclusive box region of an (H, W, 3) image.
inline TensorBlob crop_image(const TensorBlob& image, const BBox& box) {
  check_rgb_image(image);
  const std::size_t w = image.dims()[1];
  const auto& px = image.values<std::uint8_t>();
  const auto h_out = static_cast<std::size_t>(box.height());
  const auto w_out = static_cast<std::size_t>(box.width());
  std::vector<std::uint8_t> out;
  out.reserve(h_out * w_out * 3);
  for (std::size_t r = 0; r < h_out; ++r) {
    const std::size_t src = ((static_cast<std::size_t>(box.row_min) + r) * w + static_cast<std::size_t>(box.col_min)) * 3;
    out.insert(out.end(), px.begin() + static_cast<long>(src), px.begin() + static_cast<long>(src + w_out * 3));
  }
  return TensorBlob::of<std::uint8_t>({h_out, w_out, 3}, std::move(out));
}

inline bool qualifies(const SegmentMap& seg, std::size_t s, double predicted_iou, const DetectorConfig& cfg) {
  const auto& box = seg.bboxes[s];
  return predicted_iou < cfg.iou_threshold && cfg.classes_of_interest.count(seg.segment_class[s]) != 0 &&
         box.height() >= cfg.min_box_height && box.width() >= cfg.min_box_width;
}

inline CropSet detect(const SegmentMap& seg, std::span<const double> predicted_iou, const TensorBlob& image,
                      const std::string& image_key, const DetectorConfig& cfg) {
  cfg.validate();
  check_rgb_image(image);
  if (image.dims()[0] != seg.rows() || image.dims()[1] != seg.cols()) {
    throw ValidationError("image shape does not match segment map");
  }
  if (predicted_iou.size() != seg.count()) {
    throw ValidationError("predicted_iou has " + std::to_string(predicted_iou.size()) + " entries for " +
                          std::to_string(seg.count()) + " segments");
  }
  CropSet out;
  out.image_rows = seg.rows();
  out.image_cols = seg.cols();
  for (std::size_t s = 0; s < seg.count(); ++s) {
    if (!qualifies(seg, s, predicted_iou[s], cfg)) continue;
    DetectionRecord rec;
    rec.image_key = image_key;
    rec.segment_id = static_cast<std::int64_t>(s);
    rec.predicted_class = seg.segment_class[s];
    rec.predicted_iou = predicted_iou[s];
    rec.bbox = seg.bboxes[s];
    rec.area = static_cast<std::int64_t>(seg.segment_pixels[s].size());
    out.records.push_back(rec);
    out.crops.push_back(crop_image(image, rec.bbox));
    out.segment_pixels.push_back(seg.segment_pixels[s]);
  }
  return out;
}

struct CoverageCount {
  std::size_t covered = 0;
  std::size_t total = 0;

  CoverageCount& operator+=(const CoverageCount& o) {
    covered += o.covered;
    total += o.total;
    return *this;
  }
  double fraction() const { return total == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(total); }
  friend bool operator==(const CoverageCount&, const CoverageCount&) = default;
};

using CoverageTable = std::map<std::int32_t, CoverageCount>;

inline void merge_coverage(CoverageTable& into, const CoverageTable& from) {
  for (const auto& [cls, c] : from) into[cls] += c;
}

inline CoverageCount coverage_total(const CoverageTable& table) {
  CoverageCount sum;
  for (const auto& [cls, c] : table) sum += c;
  return sum;
}

/// Instances are counted when their bounding box meets the minimum size and
/// covered when some detected segment has at least half of its pixels on the
/// instance. `instance_class[id]` is the class of instance `id`; mask value
/// -1 is background.
inline CoverageTable instance_coverage(const CropSet& detections, const LabelRaster& instance_mask,
                                       std::span<const std::int32_t> instance_class, const DetectorConfig& cfg) {
  if (detections.image_rows != instance_mask.rows() || detections.image_cols != instance_mask.cols()) {
    throw ValidationError("instance mask shape does not match detections");
  }
  const std::size_t n_inst = instance_class.size();
  std::vector<BBox> boxes(n_inst);
  std::vector<bool> seen(n_inst, false);
  for (std::size_t r = 0; r < instance_mask.rows(); ++r) {
    for (std::size_t c = 0; c < instance_mask.cols(); ++c) {
      const std::int32_t id = instance_mask(r, c);
      if (id == kIgnoreLabel) continue;
      if (id < 0 || static_cast<std::size_t>(id) >= n_inst) {
        throw ValidationError("instance id " + std::to_string(id) + " has no class");
      }
      const auto i = static_cast<std::size_t>(id);
      const auto rr = static_cast<std::int64_t>(r), cc = static_cast<std::int64_t>(c);
      if (!seen[i]) boxes[i] = BBox::at(rr, cc);
      boxes[i].extend(rr, cc);
      seen[i] = true;
    }
  }

  std::vector<bool> covered(n_inst, false);
  std::vector<std::size_t> overlap(n_inst, 0);
  for (const auto& pixels : detections.segment_pixels) {
    std::fill(overlap.begin(), overlap.end(), 0);
    for (std::size_t p : pixels) {
      if (p >= instance_mask.size()) throw ValidationError("segment pixel outside instance mask");
      const std::int32_t id = instance_mask[p];
      if (id >= 0) ++overlap[static_cast<std::size_t>(id)];
    }
    for (std::size_t i = 0; i < n_inst; ++i) {
      if (overlap[i] > 0 && 2 * overlap[i] >= pixels.size()) covered[i] = true;
    }
  }

  CoverageTable table;
  for (std::size_t i = 0; i < n_inst; ++i) {
    if (!seen[i]) continue;
    if (boxes[i].height() < cfg.min_box_height || boxes[i].width() < cfg.min_box_width) continue;
    auto& entry = table[instance_class[i]];
    ++entry.total;
    if (covered[i]) ++entry.covered;
  }
  return table;
}

/// Detected segments per image.
inline double detection_rate(std::size_t detections, std::size_t image_count) {
  if (image_count == 0) throw ValidationError("detection_rate needs at least one image");
  return static_cast<double>(detections) / static_cast<double>(image_count);
}

inline std::vector<std::uint8_t> encode_ppm(const TensorBlob& rgb) {
  check_rgb_image(rgb);
  const std::string header =
      "P6\n" + std::to_string(rgb.dims()[1]) + " " + std::to_string(rgb.dims()[0]) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  const auto& px = rgb.values<std::uint8_t>();
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

inline TensorBlob decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  const auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  const auto number = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError("ppm: malformed header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 30)) throw FormatError("ppm: header value too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: expected P6 magic");
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError("ppm: malformed header");
  ++pos;
  if (w == 0 || h == 0) throw FormatError("ppm: zero size");
  if (bytes.size() - pos != w * h * 3) {
    throw FormatError("ppm: payload length (expected " + std::to_string(w * h * 3) + ", got " +
                      std::to_string(bytes.size() - pos) + ")");
  }
  return TensorBlob::of<std::uint8_t>({h, w, 3}, std::vector<std::uint8_t>(bytes.begin() + static_cast<long>(pos),
                                                                           bytes.end()));
}

inline void write_ppm(const TensorBlob& rgb, const std::filesystem::path& path) {
  write_file_bytes(path, encode_ppm(rgb));
}

inline TensorBlob read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_ppm(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline std::string crop_file_name(const SegmentKey& key) {
  if (key.image_key.empty() || key.image_key.find_first_of("/\\") != std::string::npos) {
    throw ValidationError("image key '" + key.image_key + "' cannot name a crop file");
  }
  return key.image_key + "_" + std::to_string(key.segment_id) + ".ppm";
}

/// Writes every crop plus `records.jsonl` and `crops.json` into `dir`.
/// Returns the manifest, whose paths are relative to `dir`.
inline nlohmann::ordered_json export_crops(const CropSet& crops, const std::filesystem::path& dir) {
  if (crops.crops.size() != crops.records.size()) throw ValidationError("crop and record counts differ");
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["count"] = crops.size();
  manifest["records"] = "records.jsonl";
  auto entries = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const auto& rec = crops.records[i];
    const auto& img = crops.crops[i];
    if (img.dims()[0] != static_cast<std::size_t>(rec.bbox.height()) ||
        img.dims()[1] != static_cast<std::size_t>(rec.bbox.width())) {
      throw ValidationError("crop " + rec.key().str() + " does not match its bbox");
    }
    const std::string name = crop_file_name(rec.key());
    write_ppm(img, dir / name);
    nlohmann::ordered_json e;
    e["image_key"] = rec.image_key;
    e["segment_id"] = rec.segment_id;
    e["path"] = name;
    entries.push_back(std::move(e));
  }
  manifest["crops"] = std::move(entries);
  write_records(crops.records, dir / "records.jsonl");
  write_text_file(dir / "crops.json", manifest.dump(2) + "\n");
  return manifest;
}

}  // namespace segscope
