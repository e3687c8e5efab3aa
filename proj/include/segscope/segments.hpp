#pragma once

// Predicted segments as connected components of the argmax label map, their
// boundary/interior split, segment-wise IoU and dataset-level mean IoU.
//
// Reconstruction choices (not fixed by the method description itself):
//  * components use 8-connectivity; boundary detection uses 4-adjacency, and
//    image-border pixels are boundary only if they touch another segment;
//  * the IoU union only counts ground-truth components of the segment's class
//    that actually intersect the segment.

#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "segscope/core.hpp"

namespace segscope {

struct SegmentMap {
  LabelRaster segment_ids;
  std::vector<std::int32_t> segment_class;
  /// Flat row-major pixel indices per segment, ascending.
  std::vector<std::vector<std::size_t>> segment_pixels;
  Raster<std::uint8_t> boundary_mask;
  std::vector<BBox> bboxes;

  std::size_t count() const { return segment_class.size(); }
  std::size_t rows() const { return segment_ids.rows(); }
  std::size_t cols() const { return segment_ids.cols(); }

  /// Per-pixel predicted class reconstructed from the partition.
  LabelRaster predicted_labels() const {
    LabelRaster out(rows(), cols());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = segment_class[static_cast<std::size_t>(segment_ids[i])];
    return out;
  }
};

struct Components {
  LabelRaster ids;  // kIgnoreLabel where skipped
  std::vector<std::size_t> sizes;
};

/// 8-connected components of equal label, ids assigned in row-major order of
/// each component's first pixel. Pixels equal to `skip` get kIgnoreLabel.
inline Components label_components(const LabelRaster& labels,
                                   std::int32_t skip = std::numeric_limits<std::int32_t>::min()) {
  const auto rows = static_cast<std::int64_t>(labels.rows());
  const auto cols = static_cast<std::int64_t>(labels.cols());
  Components out{LabelRaster(labels.rows(), labels.cols(), kIgnoreLabel), {}};
  std::deque<std::size_t> queue;
  std::int32_t next = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (labels[start] == skip || out.ids[start] != kIgnoreLabel) continue;
    const auto label = labels[start];
    std::size_t size = 0;
    out.ids[start] = next;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t idx = queue.front();
      queue.pop_front();
      ++size;
      const auto r = static_cast<std::int64_t>(idx) / cols;
      const auto c = static_cast<std::int64_t>(idx) % cols;
      for (std::int64_t dr = -1; dr <= 1; ++dr) {
        for (std::int64_t dc = -1; dc <= 1; ++dc) {
          const auto nr = r + dr, nc = c + dc;
          if ((dr == 0 && dc == 0) || nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
          const auto nidx = static_cast<std::size_t>(nr * cols + nc);
          if (out.ids[nidx] == kIgnoreLabel && labels[nidx] == label) {
            out.ids[nidx] = next;
            queue.push_back(nidx);
          }
        }
      }
    }
    out.sizes.push_back(size);
    ++next;
  }
  return out;
}

inline SegmentMap extract_segments(const LabelRaster& predicted_labels) {
  for (const auto v : predicted_labels.data()) {
    if (v < 0) throw ValidationError("predicted labels must be non-negative");
  }
  const std::size_t rows = predicted_labels.rows(), cols = predicted_labels.cols();
  auto comps = label_components(predicted_labels);
  const std::size_t count = comps.sizes.size();

  SegmentMap seg;
  seg.segment_ids = std::move(comps.ids);
  seg.segment_class.assign(count, 0);
  seg.segment_pixels.resize(count);
  seg.bboxes.resize(count);
  seg.boundary_mask = Raster<std::uint8_t>(rows, cols, 0);
  for (std::size_t s = 0; s < count; ++s) seg.segment_pixels[s].reserve(comps.sizes[s]);

  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t idx = r * cols + c;
      const auto id = static_cast<std::size_t>(seg.segment_ids[idx]);
      auto& pixels = seg.segment_pixels[id];
      const auto ri = static_cast<std::int64_t>(r), ci = static_cast<std::int64_t>(c);
      if (pixels.empty()) {
        seg.segment_class[id] = predicted_labels[idx];
        seg.bboxes[id] = BBox::at(ri, ci);
      } else {
        seg.bboxes[id].extend(ri, ci);
      }
      pixels.push_back(idx);

      const auto me = seg.segment_ids[idx];
      const bool boundary = (r > 0 && seg.segment_ids(r - 1, c) != me) ||
                            (r + 1 < rows && seg.segment_ids(r + 1, c) != me) ||
                            (c > 0 && seg.segment_ids(r, c - 1) != me) ||
                            (c + 1 < cols && seg.segment_ids(r, c + 1) != me);
      seg.boundary_mask[idx] = boundary ? 1 : 0;
    }
  }
  return seg;
}

/// Segment-wise IoU against ground truth; kIgnoreLabel pixels are excluded
/// from both the segment and the ground-truth region. A segment lying
/// entirely on ignored pixels scores 0.
inline std::vector<double> segment_iou(const SegmentMap& seg, const LabelRaster& gt) {
  if (!seg.segment_ids.same_shape(gt)) throw ValidationError("segment_iou: shape mismatch");
  const auto gt_comps = label_components(gt, kIgnoreLabel);
  std::vector<double> iou(seg.count(), 0.0);
  std::vector<std::int32_t> touched;
  std::vector<std::uint8_t> seen(gt_comps.sizes.size(), 0);
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const auto cls = seg.segment_class[s];
    std::size_t inter = 0, valid = 0;
    touched.clear();
    for (const auto idx : seg.segment_pixels[s]) {
      if (gt[idx] == kIgnoreLabel) continue;
      ++valid;
      if (gt[idx] == cls) {
        ++inter;
        const auto comp = gt_comps.ids[idx];
        if (!seen[static_cast<std::size_t>(comp)]) {
          seen[static_cast<std::size_t>(comp)] = 1;
          touched.push_back(comp);
        }
      }
    }
    std::size_t gt_region = 0;
    for (const auto comp : touched) {
      gt_region += gt_comps.sizes[static_cast<std::size_t>(comp)];
      seen[static_cast<std::size_t>(comp)] = 0;
    }
    const std::size_t uni = valid + gt_region - inter;
    iou[s] = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
  }
  return iou;
}

/// Per-class TP/FP/FN counts accumulated over a dataset. Pixels where either
/// prediction or ground truth is kIgnoreLabel are skipped.
class ConfusionCounts {
 public:
  void add(const LabelRaster& pred, const LabelRaster& gt) {
    if (!pred.same_shape(gt)) throw ValidationError("mean_iou: shape mismatch");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const auto p = pred[i], g = gt[i];
      if (p == kIgnoreLabel || g == kIgnoreLabel) continue;
      if (p == g) {
        ++counts_[p].tp;
      } else {
        ++counts_[p].fp;
        ++counts_[g].fn;
      }
    }
  }

  /// Mean over `class_ids` of per-class IoU; classes absent from both
  /// prediction and ground truth are skipped. NaN when every class is absent.
  double mean_iou(std::span<const std::int32_t> class_ids) const {
    if (class_ids.empty()) throw ValidationError("mean_iou: empty class list");
    double sum = 0.0;
    std::size_t used = 0;
    for (const auto c : class_ids) {
      const auto it = counts_.find(c);
      if (it == counts_.end()) continue;
      const auto denom = it->second.tp + it->second.fp + it->second.fn;
      if (denom == 0) continue;
      sum += static_cast<double>(it->second.tp) / static_cast<double>(denom);
      ++used;
    }
    return used ? sum / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
  }

 private:
  struct Counts {
    std::uint64_t tp = 0, fp = 0, fn = 0;
  };
  std::map<std::int32_t, Counts> counts_;
};

inline double mean_iou(const LabelRaster& pred, const LabelRaster& gt, std::span<const std::int32_t> class_ids) {
  ConfusionCounts counts;
  counts.add(pred, gt);
  return counts.mean_iou(class_ids);
}

/// One image with its segments and their estimated IoU, as consumed by the
/// filtered-mIoU evaluation.
struct ScoredImage {
  SegmentMap segments;
  LabelRaster gt_labels;
  std::vector<double> predicted_iou;
};

struct CurvePoint {
  double threshold = 0.0;
  double miou = 0.0;  // NaN when nothing remains
};

/// For each threshold t, discards every segment whose predicted IoU is >= t
/// and evaluates mean IoU on the remaining predicted pixels.
inline std::vector<CurvePoint> filtered_miou_curve(std::span<const ScoredImage> images,
                                                   std::span<const double> thresholds,
                                                   std::span<const std::int32_t> class_ids) {
  if (thresholds.empty()) throw ValidationError("filtered_miou_curve: empty thresholds");
  for (const auto& img : images) {
    if (img.predicted_iou.size() != img.segments.count()) {
      throw ValidationError("filtered_miou_curve: predicted IoU does not cover every segment");
    }
  }
  std::vector<CurvePoint> curve;
  curve.reserve(thresholds.size());
  for (const double t : thresholds) {
    ConfusionCounts counts;
    for (const auto& img : images) {
      LabelRaster pred(img.segments.rows(), img.segments.cols());
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto s = static_cast<std::size_t>(img.segments.segment_ids[i]);
        pred[i] = img.predicted_iou[s] >= t ? kIgnoreLabel : img.segments.segment_class[s];
      }
      counts.add(pred, img.gt_labels);
    }
    curve.push_back({t, counts.mean_iou(class_ids)});
  }
  return curve;
}

}  // namespace segscope
