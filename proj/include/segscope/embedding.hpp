#pragma once

// Feature vectors for detected crops and their low-dimensional embeddings.
//
// Features come either from external extractors (SEGT matrix plus key
// sidecar) or from a built-in color/gradient descriptor. Reduction is PCA,
// optionally followed by exact t-SNE.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

class NumericError : public Error {
 public:
  using Error::Error;
};

enum class FeatureSource { External, Baseline };

inline const char* feature_source_name(FeatureSource s) { return s == FeatureSource::External ? "external" : "baseline"; }

struct FeatureMatrix {
  Eigen::MatrixXd rows;
  std::vector<SegmentKey> keys;
  FeatureSource source = FeatureSource::External;

  std::size_t size() const { return keys.size(); }

  void validate() const {
    if (static_cast<std::size_t>(rows.rows()) != keys.size()) {
      throw ValidationError("feature matrix has " + std::to_string(rows.rows()) + " rows but " +
                            std::to_string(keys.size()) + " keys");
    }
    if (rows.cols() < 2) throw ValidationError("features need at least 2 dimensions");
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      if (!rows.row(i).allFinite()) throw ValidationError("non-finite feature row " + std::to_string(i));
    }
    std::set<SegmentKey> seen;
    for (const auto& k : keys) {
      if (!seen.insert(k).second) throw ValidationError("duplicate feature key " + k.str());
    }
  }
};

// ---------------------------------------------------------------------------
// Baseline descriptor

inline constexpr std::size_t kDescriptorGrid = 4;
inline constexpr std::size_t kOrientationBins = 6;
inline constexpr std::size_t kDescriptorLength =
    kDescriptorGrid * kDescriptorGrid * 3 + kDescriptorGrid * kDescriptorGrid * kOrientationBins;

/// 48 mean colors (4x4 grid, RGB, scaled to [0,1]) followed by 16 L1-normalized
/// 6-bin histograms of signed gradient orientation on the gray image, each
/// vote weighted by gradient magnitude, for 144 values in total. Bin k is
/// centered at k*pi/3, so bins 0 and 3 collect horizontal gradients
/// (vertical edges).
inline std::vector<double> baseline_descriptor(const TensorBlob& crop) {
  if (crop.dtype() != DType::UInt8 || crop.rank() != 3 || crop.dims()[2] != 3) {
    throw ValidationError("descriptor input must be a (h, w, 3) u8 tensor");
  }
  const std::size_t h = crop.dims()[0], w = crop.dims()[1];
  if (h < 8 || w < 8) throw ValidationError("crop " + std::to_string(h) + "x" + std::to_string(w) + " is too small");
  const auto& px = crop.values<std::uint8_t>();
  const auto cell_of = [](std::size_t i, std::size_t n) { return std::min(kDescriptorGrid - 1, i * kDescriptorGrid / n); };

  std::vector<double> out(kDescriptorLength, 0.0);
  std::vector<double> counts(kDescriptorGrid * kDescriptorGrid, 0.0);
  Raster<double> gray(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t cell = cell_of(r, h) * kDescriptorGrid + cell_of(c, w);
      const std::uint8_t* p = px.data() + (r * w + c) * 3;
      for (std::size_t ch = 0; ch < 3; ++ch) out[cell * 3 + ch] += p[ch];
      counts[cell] += 1.0;
      gray(r, c) = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
    }
  }
  for (std::size_t cell = 0; cell < counts.size(); ++cell) {
    for (std::size_t ch = 0; ch < 3; ++ch) out[cell * 3 + ch] /= 255.0 * counts[cell];
  }

  double* hist = out.data() + kDescriptorGrid * kDescriptorGrid * 3;
  const double bin_width = 2.0 * std::numbers::pi / static_cast<double>(kOrientationBins);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double gx = gray(r, std::min(c + 1, w - 1)) - gray(r, c == 0 ? 0 : c - 1);
      const double gy = gray(std::min(r + 1, h - 1), c) - gray(r == 0 ? 0 : r - 1, c);
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += 2.0 * std::numbers::pi;
      const auto bin = static_cast<std::size_t>(std::lround(theta / bin_width)) % kOrientationBins;
      const std::size_t cell = cell_of(r, h) * kDescriptorGrid + cell_of(c, w);
      hist[cell * kOrientationBins + bin] += mag;
    }
  }
  for (std::size_t cell = 0; cell < kDescriptorGrid * kDescriptorGrid; ++cell) {
    double* hcell = hist + cell * kOrientationBins;
    double total = 0.0;
    for (std::size_t b = 0; b < kOrientationBins; ++b) total += hcell[b];
    if (total > 0) {
      for (std::size_t b = 0; b < kOrientationBins; ++b) hcell[b] /= total;
    }
  }
  return out;
}

inline FeatureMatrix baseline_features(const std::vector<TensorBlob>& crops, std::vector<SegmentKey> keys) {
  if (crops.size() != keys.size()) throw ValidationError("crop and key counts differ");
  FeatureMatrix fm;
  fm.source = FeatureSource::Baseline;
  fm.keys = std::move(keys);
  fm.rows.resize(static_cast<Eigen::Index>(crops.size()), static_cast<Eigen::Index>(kDescriptorLength));
  for (std::size_t i = 0; i < crops.size(); ++i) {
    const auto d = baseline_descriptor(crops[i]);
    for (std::size_t j = 0; j < d.size(); ++j) fm.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d[j];
  }
  fm.validate();
  return fm;
}

// ---------------------------------------------------------------------------
// Matrix files with a key sidecar

inline std::filesystem::path sidecar_path(const std::filesystem::path& tensor_path) {
  auto p = tensor_path;
  return p.replace_extension(".json");
}

inline TensorBlob matrix_to_tensor(const Eigen::MatrixXd& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) v[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
  }
  return TensorBlob::of<float>({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(v));
}

inline Eigen::MatrixXd tensor_to_matrix(const TensorBlob& t) {
  if (t.dtype() != DType::Float32 || t.rank() != 2) throw ValidationError("expected an (N, D) f32 tensor");
  const auto n = static_cast<Eigen::Index>(t.dims()[0]), d = static_cast<Eigen::Index>(t.dims()[1]);
  const auto& v = t.values<float>();
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = v[static_cast<std::size_t>(i * d + j)];
  }
  return m;
}

inline nlohmann::ordered_json keys_to_json(const std::vector<SegmentKey>& keys) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& k : keys) {
    nlohmann::ordered_json e;
    e["image_key"] = k.image_key;
    e["segment_id"] = k.segment_id;
    arr.push_back(std::move(e));
  }
  return arr;
}

inline std::vector<SegmentKey> keys_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw FormatError("keys must be an array");
  std::vector<SegmentKey> keys;
  keys.reserve(arr.size());
  for (const auto& e : arr) keys.push_back(key_from_json(e));
  return keys;
}

/// Writes rows as SEGT f32 and `{source, keys}` to the .json sidecar.
inline void save_features(const FeatureMatrix& fm, const std::filesystem::path& path) {
  fm.validate();
  write_tensor(matrix_to_tensor(fm.rows), path);
  nlohmann::ordered_json side;
  side["source"] = feature_source_name(fm.source);
  side["keys"] = keys_to_json(fm.keys);
  write_text_file(sidecar_path(path), side.dump(2) + "\n");
}

inline FeatureMatrix ingest_features(const std::filesystem::path& path) {
  const auto blob = read_tensor(path);
  const auto side = read_json_file(sidecar_path(path));
  FeatureMatrix fm;
  fm.rows = tensor_to_matrix(blob);
  if (!side.contains("keys")) throw FormatError(sidecar_path(path).string() + ": missing field keys");
  fm.keys = keys_from_json(side["keys"]);
  fm.source = side.value("source", std::string("external")) == "baseline" ? FeatureSource::Baseline
                                                                          : FeatureSource::External;
  fm.validate();
  return fm;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaResult {
  Eigen::MatrixXd coords;       // N x d
  Eigen::MatrixXd basis;        // d x D, orthonormal rows
  Eigen::VectorXd mean;         // D
  Eigen::VectorXd eigenvalues;  // all D covariance eigenvalues, descending

  Eigen::MatrixXd reconstruct() const { return (coords * basis).rowwise() + mean.transpose(); }
};

/// Eigen-decomposition of the sample covariance (N-1 normalization). Each
/// basis row is signed so that its largest-magnitude entry is positive.
inline PcaResult pca_fit_transform(const Eigen::MatrixXd& x, std::size_t d) {
  const auto n = static_cast<std::size_t>(x.rows()), dim = static_cast<std::size_t>(x.cols());
  if (n < 2) throw ValidationError("PCA needs at least 2 rows");
  if (d < 1 || d > std::min(n, dim)) {
    throw ValidationError("PCA target dimension " + std::to_string(d) + " outside [1, " +
                          std::to_string(std::min(n, dim)) + "]");
  }
  PcaResult res;
  res.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - res.mean.transpose();
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("PCA eigendecomposition failed");
  const Eigen::VectorXd& ev = solver.eigenvalues();
  const Eigen::MatrixXd& vecs = solver.eigenvectors();
  res.eigenvalues.resize(static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    res.eigenvalues(static_cast<Eigen::Index>(i)) = std::max(0.0, ev(static_cast<Eigen::Index>(dim - 1 - i)));
  }
  res.basis.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < d; ++i) {
    Eigen::VectorXd v = vecs.col(static_cast<Eigen::Index>(dim - 1 - i));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    res.basis.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  res.coords = centered * res.basis.transpose();
  return res;
}

// ---------------------------------------------------------------------------
// Exact t-SNE

struct TsneConfig {
  double perplexity = 30.0;
  double exaggeration = 12.0;
  double learning_rate = 200.0;
  std::size_t iterations = 1000;
  std::size_t exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  double init_std = 1e-4;
  std::size_t pca_dims = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(perplexity > 1.0)) throw ConfigError("perplexity must exceed 1");
    if (!(exaggeration >= 1.0)) throw ConfigError("exaggeration must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("t-SNE learning_rate must be positive");
    if (iterations == 0 || exaggeration_iterations > iterations) {
      throw ConfigError("t-SNE iterations must be positive and cover the exaggeration phase");
    }
    if (!(initial_momentum >= 0.0 && initial_momentum < 1.0 && final_momentum >= 0.0 && final_momentum < 1.0)) {
      throw ConfigError("t-SNE momentum must be in [0, 1)");
    }
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
    if (pca_dims == 0) throw ConfigError("pca_dims must be positive");
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["perplexity"] = perplexity;
    j["exaggeration"] = exaggeration;
    j["learning_rate"] = learning_rate;
    j["iterations"] = iterations;
    j["exaggeration_iterations"] = exaggeration_iterations;
    j["initial_momentum"] = initial_momentum;
    j["final_momentum"] = final_momentum;
    j["init_std"] = init_std;
    j["pca_dims"] = pca_dims;
    j["seed"] = seed;
    return j;
  }

  static TsneConfig from_json(const nlohmann::json& j) {
    TsneConfig c;
    try {
      c.perplexity = j.value("perplexity", c.perplexity);
      c.exaggeration = j.value("exaggeration", c.exaggeration);
      c.learning_rate = j.value("learning_rate", c.learning_rate);
      c.iterations = j.value("iterations", c.iterations);
      c.exaggeration_iterations = j.value("exaggeration_iterations", c.exaggeration_iterations);
      c.initial_momentum = j.value("initial_momentum", c.initial_momentum);
      c.final_momentum = j.value("final_momentum", c.final_momentum);
      c.init_std = j.value("init_std", c.init_std);
      c.pca_dims = j.value("pca_dims", c.pca_dims);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("tsne config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

inline constexpr double kPerplexityTolerance = 1e-3;
inline constexpr std::size_t kMaxBisectionSteps = 50;
inline constexpr double kAffinityFloor = 1e-12;

struct RowAffinity {
  std::vector<double> p;  // conditional probabilities, 0 at the row's own index
  double beta = 1.0;      // precision 1 / (2 sigma^2)
  double perplexity = 0.0;
};

/// Conditional distribution p(j|i) for squared distances `d2` (entry `self`
/// ignored), with the Gaussian precision bisected until exp(H) is within
/// tolerance of the target or the step budget runs out.
inline RowAffinity row_affinity(std::span<const double> d2, std::size_t self, double perplexity) {
  const std::size_t n = d2.size();
  if (n < 2) throw ValidationError("affinity row needs at least one neighbor");
  double dmin = std::numeric_limits<double>::infinity(), dsum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == self) continue;
    dmin = std::min(dmin, d2[j]);
    dsum += d2[j];
  }
  const double dmean = dsum / static_cast<double>(n - 1) - dmin;
  RowAffinity out;
  out.p.assign(n, 0.0);
  const double target = std::log(perplexity);
  const auto evaluate = [&](double beta) {
    double sum = 0.0, weighted = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == self) continue;
      const double shifted = d2[j] - dmin;
      const double v = std::exp(-beta * shifted);
      out.p[j] = v;
      sum += v;
      weighted += shifted * v;
    }
    for (double& v : out.p) v /= sum;
    return std::log(sum) + beta * weighted / sum;  // entropy in nats
  };

  double beta = dmean > 0 ? 1.0 / dmean : 1.0;
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double h = evaluate(beta);
  for (std::size_t step = 0; step < kMaxBisectionSteps; ++step) {
    if (std::abs(std::exp(h) - perplexity) < 0.1 * kPerplexityTolerance) break;
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
    h = evaluate(beta);
  }
  out.beta = beta;
  out.perplexity = std::exp(h);
  return out;
}

inline Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x) {
  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = (-2.0 * x * x.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  d2 = d2.cwiseMax(0.0);
  d2.diagonal().setZero();
  return d2;
}

struct TsneResult {
  Eigen::MatrixXd coords;
  std::vector<double> perplexities;  // achieved per point
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
};

namespace detail {

inline double tsne_kl(const Eigen::MatrixXd& p, const Eigen::MatrixXd& num, double num_sum) {
  double kl = 0.0;
  const auto n = p.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = std::max(num(i, j) / num_sum, kAffinityFloor);
      kl += p(i, j) * std::log(p(i, j) / q);
    }
  }
  return kl;
}

}  // namespace detail

/// Exact t-SNE on PCA-pre-reduced input. Gradient steps use momentum plus the
/// usual per-coordinate adaptive gains; the exaggerated phase ends after
/// `exaggeration_iterations` steps, where the first KL value is recorded.
inline TsneResult tsne(const Eigen::MatrixXd& features, std::size_t d, const TsneConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(features.rows());
  if (d != 2 && d != 3) throw ValidationError("t-SNE output dimension must be 2 or 3");
  if (static_cast<double>(n) < 3.0 * cfg.perplexity + 1.0) {
    throw ValidationError("t-SNE needs at least 3*perplexity+1 = " +
                          std::to_string(static_cast<std::size_t>(std::ceil(3.0 * cfg.perplexity + 1.0))) +
                          " points, got " + std::to_string(n));
  }
  if (!features.allFinite()) throw ValidationError("t-SNE input contains non-finite values");
  const std::size_t pre = std::min({cfg.pca_dims, static_cast<std::size_t>(features.cols()), n});
  const Eigen::MatrixXd x = pca_fit_transform(features, pre).coords;
  const Eigen::MatrixXd d2 = squared_distances(x);

  TsneResult res;
  res.perplexities.resize(n);
  Eigen::MatrixXd p(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> row(d2.data() + i * n, d2.data() + (i + 1) * n);  // symmetric, column i == row i
    const auto aff = row_affinity(row, i, cfg.perplexity);
    res.perplexities[i] = aff.perplexity;
    for (std::size_t j = 0; j < n; ++j) p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = aff.p[j];
  }
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(kAffinityFloor);
  p.diagonal().setZero();

  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d);
  Rng rng(cfg.seed);
  Eigen::MatrixXd y(N, D);
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < D; ++j) y(i, j) = cfg.init_std * rng.normal();
  }
  Eigen::MatrixXd update = Eigen::MatrixXd::Zero(N, D);
  Eigen::MatrixXd gains = Eigen::MatrixXd::Ones(N, D);
  Eigen::MatrixXd num(N, N), grad(N, D);

  const auto compute_num = [&] {
    num = squared_distances(y);
    num = (1.0 + num.array()).inverse().matrix();
    num.diagonal().setZero();
    return num.sum();
  };

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const bool exaggerated = it < cfg.exaggeration_iterations;
    const double exag = exaggerated ? cfg.exaggeration : 1.0;
    const double momentum = exaggerated ? cfg.initial_momentum : cfg.final_momentum;
    const double num_sum = compute_num();
    // dC/dy_i = 4 sum_j (exag p_ij - q_ij) num_ij (y_i - y_j)
    const Eigen::MatrixXd w = ((exag * p).array() - num.array() / num_sum).matrix().cwiseProduct(num);
    grad = 4.0 * (w.rowwise().sum().asDiagonal() * y - w * y);
    if (!grad.allFinite()) throw NumericError("t-SNE: non-finite gradient at iteration " + std::to_string(it + 1));
    for (Eigen::Index i = 0; i < N; ++i) {
      for (Eigen::Index j = 0; j < D; ++j) {
        const bool same_sign = (grad(i, j) > 0) == (update(i, j) > 0);
        gains(i, j) = std::max(same_sign ? gains(i, j) * 0.8 : gains(i, j) + 0.2, 0.01);
      }
    }
    update = momentum * update - cfg.learning_rate * gains.cwiseProduct(grad);
    y += update;
    y.rowwise() -= y.colwise().mean();
    if (it + 1 == cfg.exaggeration_iterations) {
      const double s = compute_num();
      res.kl_after_exaggeration = detail::tsne_kl(p, num, s);
    }
  }
  const double s = compute_num();
  res.kl_final = detail::tsne_kl(p, num, s);
  if (cfg.exaggeration_iterations == 0) res.kl_after_exaggeration = res.kl_final;
  res.coords = std::move(y);
  return res;
}

// ---------------------------------------------------------------------------
// Reduced embeddings

enum class ReductionMethod { None, Pca, PcaThenTsne };

inline const char* reduction_name(ReductionMethod m) {
  switch (m) {
    case ReductionMethod::None: return "none";
    case ReductionMethod::Pca: return "pca";
    case ReductionMethod::PcaThenTsne: return "pca_then_tsne";
  }
  return "?";
}

inline ReductionMethod reduction_from_name(const std::string& s) {
  if (s == "none") return ReductionMethod::None;
  if (s == "pca") return ReductionMethod::Pca;
  if (s == "pca_then_tsne") return ReductionMethod::PcaThenTsne;
  throw ConfigError("unknown reduction method '" + s + "'");
}

struct ReducedEmbedding {
  Eigen::MatrixXd coords;
  std::vector<SegmentKey> keys;
  ReductionMethod method = ReductionMethod::None;
  Eigen::MatrixXd pca_basis;   // only for pca
  Eigen::VectorXd pca_mean;    // only for pca
  Eigen::VectorXd eigenvalues;  // only for pca
  TsneConfig tsne_config;      // only for pca_then_tsne
  double kl_after_exaggeration = 0.0;
  double kl_final = 0.0;
};

/// `none` returns the raw features untouched; `pca` projects to `d` dims;
/// `pca_then_tsne` embeds in `d` in {2, 3}.
inline ReducedEmbedding reduce(const FeatureMatrix& fm, ReductionMethod method, std::size_t d,
                               const TsneConfig& tsne_cfg = {}) {
  fm.validate();
  ReducedEmbedding out;
  out.keys = fm.keys;
  out.method = method;
  switch (method) {
    case ReductionMethod::None:
      out.coords = fm.rows;
      break;
    case ReductionMethod::Pca: {
      auto p = pca_fit_transform(fm.rows, d);
      out.coords = std::move(p.coords);
      out.pca_basis = std::move(p.basis);
      out.pca_mean = std::move(p.mean);
      out.eigenvalues = std::move(p.eigenvalues);
      break;
    }
    case ReductionMethod::PcaThenTsne: {
      auto t = tsne(fm.rows, d, tsne_cfg);
      out.coords = std::move(t.coords);
      out.tsne_config = tsne_cfg;
      out.kl_after_exaggeration = t.kl_after_exaggeration;
      out.kl_final = t.kl_final;
      break;
    }
  }
  if (!out.coords.allFinite()) throw NumericError("reduced coordinates are not finite");
  return out;
}

inline void save_embedding(const ReducedEmbedding& e, const std::filesystem::path& path) {
  write_tensor(matrix_to_tensor(e.coords), path);
  nlohmann::ordered_json side;
  side["method"] = reduction_name(e.method);
  side["dims"] = e.coords.cols();
  side["keys"] = keys_to_json(e.keys);
  if (e.method == ReductionMethod::Pca) {
    side["eigenvalues"] = std::vector<double>(e.eigenvalues.data(), e.eigenvalues.data() + e.eigenvalues.size());
  }
  if (e.method == ReductionMethod::PcaThenTsne) {
    side["tsne"] = e.tsne_config.to_json();
    side["kl_after_exaggeration"] = e.kl_after_exaggeration;
    side["kl_final"] = e.kl_final;
  }
  write_text_file(sidecar_path(path), side.dump(2) + "\n");
}

inline ReducedEmbedding load_embedding(const std::filesystem::path& path) {
  ReducedEmbedding e;
  e.coords = tensor_to_matrix(read_tensor(path));
  const auto side = read_json_file(sidecar_path(path));
  try {
    e.method = reduction_from_name(side.at("method").get<std::string>());
    e.keys = keys_from_json(side.at("keys"));
    if (side.contains("tsne")) e.tsne_config = TsneConfig::from_json(side["tsne"]);
    e.kl_after_exaggeration = side.value("kl_after_exaggeration", 0.0);
    e.kl_final = side.value("kl_final", 0.0);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(sidecar_path(path).string() + ": " + ex.what());
  }
  if (static_cast<std::size_t>(e.coords.rows()) != e.keys.size()) {
    throw FormatError(path.string() + ": coordinate rows and keys differ");
  }
  return e;
}

}  // namespace segscope
