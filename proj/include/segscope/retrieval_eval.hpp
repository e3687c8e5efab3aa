#pragma once

// Nearest-neighbor retrieval over crop embeddings, ground-truth class
// assignment for detections, AP/mAP scoring and Gaussian KDE density
// analysis of 2-D embeddings.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/embedding.hpp"

namespace segscope {

enum class Metric { Euclidean, Cosine };

inline const char* metric_name(Metric m) { return m == Metric::Euclidean ? "euclidean" : "cosine"; }

inline Metric metric_from_name(const std::string& s) {
  if (s == "euclidean") return Metric::Euclidean;
  if (s == "cosine") return Metric::Cosine;
  throw ConfigError("unknown metric '" + s + "'");
}

/// Euclidean distance, or 1 - cosine similarity so both sort ascending.
template <typename A, typename B>
double distance(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& y, Metric metric) {
  if (x.size() != y.size()) throw ValidationError("distance between vectors of different length");
  if (metric == Metric::Euclidean) return (x - y).norm();
  const double nx = x.norm(), ny = y.norm();
  if (nx == 0.0 || ny == 0.0) throw ValidationError("cosine distance of a zero vector");
  const double cos = x.dot(y) / (nx * ny);
  return std::clamp(1.0 - cos, 0.0, 2.0);
}

inline double distance(std::span<const double> x, std::span<const double> y, Metric metric) {
  using Map = Eigen::Map<const Eigen::VectorXd>;
  if (x.size() != y.size()) throw ValidationError("distance between vectors of different length");
  return distance(Map(x.data(), static_cast<Eigen::Index>(x.size())), Map(y.data(), static_cast<Eigen::Index>(y.size())),
                  metric);
}

struct RankedItem {
  std::size_t index = 0;
  SegmentKey key;
  double distance = 0.0;
};

/// Ranked candidates for the point at `query`: every other point, ascending
/// by distance with ties broken by key.
inline std::vector<RankedItem> rank_index(std::size_t query, const Eigen::MatrixXd& coords,
                                          const std::vector<SegmentKey>& keys, Metric metric) {
  const auto n = static_cast<std::size_t>(coords.rows());
  if (keys.size() != n) throw ValidationError("coordinate rows and keys differ");
  if (query >= n) throw ValidationError("query index out of range");
  std::vector<RankedItem> out;
  out.reserve(n - 1);
  const auto q = coords.row(static_cast<Eigen::Index>(query));
  for (std::size_t j = 0; j < n; ++j) {
    if (j == query) continue;
    out.push_back({j, keys[j], distance(q, coords.row(static_cast<Eigen::Index>(j)), metric)});
  }
  std::sort(out.begin(), out.end(), [](const RankedItem& a, const RankedItem& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.key < b.key);
  });
  return out;
}

inline std::size_t index_of_key(const std::vector<SegmentKey>& keys, const SegmentKey& key) {
  const auto it = std::find(keys.begin(), keys.end(), key);
  if (it == keys.end()) throw ValidationError("unknown key " + key.str());
  return static_cast<std::size_t>(it - keys.begin());
}

inline std::vector<RankedItem> rank(const SegmentKey& query, const Eigen::MatrixXd& coords,
                                    const std::vector<SegmentKey>& keys, Metric metric) {
  return rank_index(index_of_key(keys, query), coords, keys, metric);
}

inline std::vector<RankedItem> rank(const SegmentKey& query, const FeatureMatrix& fm, Metric metric) {
  return rank(query, fm.rows, fm.keys, metric);
}

inline std::vector<RankedItem> rank(const SegmentKey& query, const ReducedEmbedding& e, Metric metric) {
  return rank(query, e.coords, e.keys, metric);
}

/// Ground-truth class with the largest overlap; ties go to the smaller class
/// id; ignore pixels do not vote; kIgnoreLabel when nothing votes.
inline std::int32_t assign_gt_class(std::span<const std::size_t> segment_pixels, const LabelRaster& gt) {
  if (segment_pixels.empty()) throw ValidationError("assign_gt_class needs a non-empty segment");
  std::map<std::int32_t, std::size_t> votes;
  for (std::size_t p : segment_pixels) {
    if (p >= gt.size()) throw ValidationError("segment pixel outside ground truth");
    if (gt[p] != kIgnoreLabel) ++votes[gt[p]];
  }
  std::int32_t best = kIgnoreLabel;
  std::size_t best_count = 0;
  for (const auto& [cls, count] : votes) {
    if (count > best_count) {
      best = cls;
      best_count = count;
    }
  }
  return best;
}

/// Sum over relevant positions i of (relevant items in the top i) / i,
/// divided by the number of relevant items.
inline double average_precision(const std::vector<bool>& relevant, std::size_t t) {
  const auto count = static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), true));
  if (t == 0) throw ValidationError("average precision needs at least one relevant item");
  if (t != count) {
    throw ValidationError("relevant count " + std::to_string(t) + " does not match " + std::to_string(count) + " flags");
  }
  double acc = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i) {
    if (!relevant[i]) continue;
    ++hits;
    acc += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return acc / static_cast<double>(t);
}

inline double average_precision(const std::vector<bool>& relevant) {
  return average_precision(relevant, static_cast<std::size_t>(std::count(relevant.begin(), relevant.end(), true)));
}

struct QueryResult {
  SegmentKey key;
  std::int32_t gt_class = kIgnoreLabel;
  double ap = 0.0;
};

struct RetrievalEvaluation {
  Metric metric = Metric::Euclidean;
  std::vector<QueryResult> per_query;
  double global_map = 0.0;
  std::map<std::int32_t, double> class_map;
  double balanced_map = 0.0;
  std::size_t skipped_queries = 0;  // labeled points without a same-class peer
  std::size_t unlabeled = 0;        // points with class kIgnoreLabel

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = metric_name(metric);
    j["global_map"] = global_map;
    nlohmann::ordered_json cm = nlohmann::ordered_json::object();
    for (const auto& [cls, v] : class_map) cm[std::to_string(cls)] = v;
    j["class_map"] = std::move(cm);
    j["balanced_map"] = balanced_map;
    j["skipped"] = skipped_queries;
    j["unlabeled"] = unlabeled;
    auto pq = nlohmann::ordered_json::array();
    for (const auto& q : per_query) {
      nlohmann::ordered_json e;
      e["image_key"] = q.key.image_key;
      e["segment_id"] = q.key.segment_id;
      e["class"] = q.gt_class;
      e["ap"] = q.ap;
      pq.push_back(std::move(e));
    }
    j["per_query"] = std::move(pq);
    return j;
  }
};

/// Every labeled point with at least one same-class peer is a query; its
/// candidates are all other points and relevance means the same class.
/// Unlabeled points stay in the candidate lists but never count as relevant.
inline RetrievalEvaluation evaluate_retrieval(const Eigen::MatrixXd& coords, const std::vector<SegmentKey>& keys,
                                              const std::vector<std::int32_t>& classes, Metric metric) {
  const auto n = static_cast<std::size_t>(coords.rows());
  if (n < 2) throw ValidationError("retrieval evaluation needs at least 2 points");
  if (keys.size() != n || classes.size() != n) throw ValidationError("coords, keys and classes differ in length");
  std::map<std::int32_t, std::size_t> class_count;
  for (auto c : classes) {
    if (c != kIgnoreLabel) ++class_count[c];
  }
  RetrievalEvaluation ev;
  ev.metric = metric;
  std::map<std::int32_t, std::pair<double, std::size_t>> per_class;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = classes[i];
    if (c == kIgnoreLabel) {
      ++ev.unlabeled;
      continue;
    }
    const std::size_t t = class_count[c] - 1;
    if (t == 0) {
      ++ev.skipped_queries;
      continue;
    }
    const auto ranked = rank_index(i, coords, keys, metric);
    std::vector<bool> flags(ranked.size());
    for (std::size_t r = 0; r < ranked.size(); ++r) flags[r] = classes[ranked[r].index] == c;
    const double ap = average_precision(flags, t);
    ev.per_query.push_back({keys[i], c, ap});
    total += ap;
    per_class[c].first += ap;
    per_class[c].second += 1;
  }
  if (ev.per_query.empty()) throw ValidationError("no point has a same-class peer; nothing to evaluate");
  ev.global_map = total / static_cast<double>(ev.per_query.size());
  double balanced = 0.0;
  for (const auto& [cls, acc] : per_class) {
    const double m = acc.first / static_cast<double>(acc.second);
    ev.class_map[cls] = m;
    balanced += m;
  }
  ev.balanced_map = balanced / static_cast<double>(per_class.size());
  return ev;
}

// ---------------------------------------------------------------------------
// Kernel density estimation in 2-D

struct DensityModel {
  Eigen::MatrixXd samples;     // N x 2
  Eigen::Vector2d bandwidths;  // Scott's rule per dimension
};

/// Product Gaussian KDE with h_j = sample std_j * N^(-1/6).
inline DensityModel kde_fit(const Eigen::MatrixXd& coords) {
  const auto n = coords.rows();
  if (coords.cols() != 2) throw ValidationError("kde_fit expects N x 2 coordinates");
  if (n < 2) throw ValidationError("kde_fit needs at least 2 samples");
  if (!coords.allFinite()) throw ValidationError("kde_fit input contains non-finite values");
  DensityModel m;
  m.samples = coords;
  const double factor = std::pow(static_cast<double>(n), -1.0 / 6.0);
  for (Eigen::Index j = 0; j < 2; ++j) {
    const double mean = coords.col(j).mean();
    const double var = (coords.col(j).array() - mean).square().sum() / static_cast<double>(n - 1);
    const double sd = std::sqrt(var);
    if (!(sd > 0.0)) throw ValidationError("kde_fit: dimension " + std::to_string(j) + " has zero spread");
    m.bandwidths(j) = sd * factor;
  }
  return m;
}

inline double kde_density(const DensityModel& m, double x, double y) {
  const double hx = m.bandwidths(0), hy = m.bandwidths(1);
  const double norm = 1.0 / (2.0 * std::numbers::pi * hx * hy * static_cast<double>(m.samples.rows()));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.samples.rows(); ++i) {
    const double u = (x - m.samples(i, 0)) / hx, v = (y - m.samples(i, 1)) / hy;
    acc += std::exp(-0.5 * (u * u + v * v));
  }
  return acc * norm;
}

inline std::vector<double> kde_eval(const DensityModel& m, const Eigen::MatrixXd& points) {
  if (points.cols() != 2) throw ValidationError("kde_eval expects N x 2 points");
  std::vector<double> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) out[static_cast<std::size_t>(i)] = kde_density(m, points(i, 0), points(i, 1));
  return out;
}

/// Linear-interpolation quantile: position (n - 1) * q in sorted order.
inline double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(values.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline constexpr std::size_t kMinHdrPoints = 5;

/// Density level whose superlevel set holds roughly 1 - alpha of `subset`:
/// the alpha-quantile of the model density at the subset points.
inline double hdr_threshold(const DensityModel& m, const Eigen::MatrixXd& subset, double alpha) {
  if (subset.rows() < static_cast<Eigen::Index>(kMinHdrPoints)) {
    throw ValidationError("hdr_threshold needs at least " + std::to_string(kMinHdrPoints) + " points");
  }
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("alpha must be in (0, 1)");
  return quantile_linear(kde_eval(m, subset), alpha);
}

struct GridExtent {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
  std::size_t rows = 64, cols = 64;

  double dx() const { return (x_max - x_min) / static_cast<double>(cols); }
  double dy() const { return (y_max - y_min) / static_cast<double>(rows); }
  double x_at(std::size_t c) const { return x_min + (static_cast<double>(c) + 0.5) * dx(); }
  double y_at(std::size_t r) const { return y_min + (static_cast<double>(r) + 0.5) * dy(); }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["x_min"] = x_min;
    j["x_max"] = x_max;
    j["y_min"] = y_min;
    j["y_max"] = y_max;
    j["rows"] = rows;
    j["cols"] = cols;
    return j;
  }
};

/// Bounding box of the samples padded by `pad` bandwidths on each side.
inline GridExtent padded_extent(const DensityModel& m, std::size_t rows, std::size_t cols, double pad = 3.0) {
  GridExtent e;
  e.x_min = m.samples.col(0).minCoeff() - pad * m.bandwidths(0);
  e.x_max = m.samples.col(0).maxCoeff() + pad * m.bandwidths(0);
  e.y_min = m.samples.col(1).minCoeff() - pad * m.bandwidths(1);
  e.y_max = m.samples.col(1).maxCoeff() + pad * m.bandwidths(1);
  e.rows = rows;
  e.cols = cols;
  return e;
}

/// Density at cell centers; row r holds y_at(r), column c holds x_at(c).
inline Raster<double> density_grid(const DensityModel& m, const GridExtent& e) {
  if (e.rows == 0 || e.cols == 0 || !(e.x_max > e.x_min) || !(e.y_max > e.y_min)) {
    throw ValidationError("invalid density grid extent");
  }
  Raster<double> g(e.rows, e.cols);
  for (std::size_t r = 0; r < e.rows; ++r) {
    for (std::size_t c = 0; c < e.cols; ++c) g(r, c) = kde_density(m, e.x_at(c), e.y_at(r));
  }
  return g;
}

inline double grid_integral(const Raster<double>& g, const GridExtent& e) {
  double s = 0.0;
  for (double v : g.data()) s += v;
  return s * e.dx() * e.dy();
}

}  // namespace segscope
