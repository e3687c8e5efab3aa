#pragma once

// Per-pixel dispersion measures of a softmax output: normalized entropy,
// probability margin and variation ratio, plus the argmax label map.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

inline constexpr double kProbabilitySumTolerance = 1e-4;

struct DispersionMaps {
  Raster<double> entropy;
  Raster<double> margin;
  Raster<double> variation_ratio;
  LabelRaster predicted_labels;
  std::int32_t num_classes = 0;

  std::size_t rows() const { return entropy.rows(); }
  std::size_t cols() const { return entropy.cols(); }
};

namespace detail {

template <typename T>
void validate_probs(std::span<const T> probs) {
  if (probs.size() < 2) throw ValidationError("probability vector needs at least 2 classes");
  double sum = 0.0;
  for (const T p : probs) {
    if (!std::isfinite(static_cast<double>(p)) || p < 0) {
      throw ValidationError("probability entries must be finite and non-negative");
    }
    sum += static_cast<double>(p);
  }
  if (std::abs(sum - 1.0) > kProbabilitySumTolerance) {
    throw ValidationError("probability vector sums to " + std::to_string(sum));
  }
}

/// Largest and second-largest entry; argmax ties go to the smallest index.
template <typename T>
void top_two(std::span<const T> probs, std::size_t& argmax, double& best, double& second) {
  argmax = 0;
  best = static_cast<double>(probs[0]);
  second = -1.0;
  for (std::size_t k = 1; k < probs.size(); ++k) {
    const double p = static_cast<double>(probs[k]);
    if (p > best) {
      second = best;
      best = p;
      argmax = k;
    } else if (p > second) {
      second = p;
    }
  }
}

template <typename T>
double entropy_unchecked(std::span<const T> probs) {
  double acc = 0.0;
  for (const T pt : probs) {
    const double p = static_cast<double>(pt);
    if (p > 0.0) acc -= p * std::log(p);
  }
  const double e = acc / std::log(static_cast<double>(probs.size()));
  return std::clamp(e, 0.0, 1.0);
}

}  // namespace detail

template <typename T>
double pixel_entropy(std::span<const T> probs) {
  detail::validate_probs(probs);
  return detail::entropy_unchecked(probs);
}

template <typename T>
double pixel_margin(std::span<const T> probs) {
  detail::validate_probs(probs);
  std::size_t k;
  double best, second;
  detail::top_two(probs, k, best, second);
  return std::clamp(1.0 - best + second, 0.0, 1.0);
}

template <typename T>
double pixel_variation_ratio(std::span<const T> probs) {
  detail::validate_probs(probs);
  std::size_t k;
  double best, second;
  detail::top_two(probs, k, best, second);
  return std::clamp(1.0 - best, 0.0, 1.0);
}

inline double pixel_entropy(const std::vector<double>& p) { return pixel_entropy(std::span<const double>(p)); }
inline double pixel_margin(const std::vector<double>& p) { return pixel_margin(std::span<const double>(p)); }
inline double pixel_variation_ratio(const std::vector<double>& p) {
  return pixel_variation_ratio(std::span<const double>(p));
}

/// Softmax tensor must be float32 with dims (H, W, K).
inline void check_softmax_shape(const TensorBlob& probs) {
  if (probs.dtype() != DType::Float32 || probs.rank() != 3) {
    throw ValidationError("softmax tensor must be float32 (H,W,K)");
  }
  if (probs.dims()[2] < 2) throw ValidationError("softmax tensor needs K >= 2");
}

inline DispersionMaps compute_dispersion(const TensorBlob& probs) {
  check_softmax_shape(probs);
  const std::size_t rows = probs.dims()[0], cols = probs.dims()[1], k = probs.dims()[2];
  const auto& values = probs.values<float>();

  DispersionMaps maps{Raster<double>(rows, cols), Raster<double>(rows, cols), Raster<double>(rows, cols),
                      LabelRaster(rows, cols), static_cast<std::int32_t>(k)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t idx = r * cols + c;
      std::span<const float> row(values.data() + idx * k, k);
      try {
        detail::validate_probs(row);
      } catch (const ValidationError& e) {
        throw ValidationError("invalid softmax at pixel (" + std::to_string(r) + ", " + std::to_string(c) +
                              "): " + e.what());
      }
      std::size_t argmax;
      double best, second;
      detail::top_two(row, argmax, best, second);
      maps.entropy[idx] = detail::entropy_unchecked(row);
      maps.margin[idx] = std::clamp(1.0 - best + second, 0.0, 1.0);
      maps.variation_ratio[idx] = std::clamp(1.0 - best, 0.0, 1.0);
      maps.predicted_labels[idx] = static_cast<std::int32_t>(argmax);
    }
  }
  return maps;
}

}  // namespace segscope
