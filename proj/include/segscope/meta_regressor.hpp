#pragma once

// Small fully-connected network mapping segment metric vectors to an IoU
// estimate. Hidden layers use a leaky rectifier (slope 0.01), the output a
// logistic unit; training minimizes mean squared error with mini-batch
// momentum descent on standardized features.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "segscope/core.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t epochs = 200;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden_layers = {64, 32};

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0,1)");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("train.validation_fraction must be in [0,1)");
    }
    for (auto h : hidden_layers) {
      if (h == 0) throw ConfigError("train.hidden_layers entries must be positive");
    }
  }
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
};

struct EpochLoss {
  double train_mse = 0.0;
  double validation_mse = std::numeric_limits<double>::quiet_NaN();

  friend bool operator==(const EpochLoss& a, const EpochLoss& b) {
    const auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return same(a.train_mse, b.train_mse) && same(a.validation_mse, b.validation_mse);
  }
};

class MetaRegressor {
 public:
  static constexpr double kLeakySlope = 0.01;
  // Output pre-activations are clamped so the logistic stays strictly inside (0,1).
  static constexpr double kLogitClamp = 30.0;

  MetaRegressor() = default;

  /// Glorot-uniform weights, zero biases, identity standardization.
  static MetaRegressor glorot(const std::vector<std::size_t>& layer_sizes, std::uint64_t seed) {
    MetaRegressor m = zeros(layer_sizes);
    m.seed_ = seed;
    Rng rng(seed);
    for (auto& layer : m.layers_) {
      const double fan_in = static_cast<double>(layer.weights.cols());
      const double fan_out = static_cast<double>(layer.weights.rows());
      const double bound = std::sqrt(6.0 / (fan_in + fan_out));
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = rng.uniform(-bound, bound);
      }
    }
    return m;
  }

  static MetaRegressor zeros(const std::vector<std::size_t>& layer_sizes) {
    if (layer_sizes.size() < 2) throw ValidationError("meta regressor needs at least input and output layer");
    if (layer_sizes.back() != 1) throw ValidationError("meta regressor output width must be 1");
    for (auto s : layer_sizes) {
      if (s == 0) throw ValidationError("layer sizes must be positive");
    }
    MetaRegressor m;
    m.layer_sizes_ = layer_sizes;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(layer_sizes[l]);
      const auto out = static_cast<Eigen::Index>(layer_sizes[l + 1]);
      m.layers_.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
    }
    m.feature_means_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layer_sizes[0]));
    m.feature_stds_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(layer_sizes[0]));
    return m;
  }

  std::size_t input_width() const { return layer_sizes_.empty() ? 0 : layer_sizes_.front(); }
  const std::vector<std::size_t>& layer_sizes() const { return layer_sizes_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const Eigen::VectorXd& feature_means() const { return feature_means_; }
  const Eigen::VectorXd& feature_stds() const { return feature_stds_; }
  std::uint64_t seed() const { return seed_; }

  /// Fits standardization statistics (population std) on the given rows.
  void fit_standardization(const Eigen::MatrixXd& x) {
    check_width(x);
    const double n = static_cast<double>(x.rows());
    feature_means_ = x.colwise().mean().transpose();
    feature_stds_.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double var = (x.col(j).array() - feature_means_(j)).square().sum() / n;
      feature_stds_(j) = std::sqrt(var);
    }
  }

  void set_standardization(Eigen::VectorXd means, Eigen::VectorXd stds) {
    if (means.size() != static_cast<Eigen::Index>(input_width()) || stds.size() != means.size()) {
      throw ValidationError("standardization vectors must match input width");
    }
    for (Eigen::Index j = 0; j < stds.size(); ++j) {
      if (!(stds(j) >= 0.0)) throw ValidationError("feature stds must be non-negative");
    }
    feature_means_ = std::move(means);
    feature_stds_ = std::move(stds);
  }

  /// Zero-std features standardize to 0.
  Eigen::MatrixXd standardize(const Eigen::MatrixXd& x) const {
    check_width(x);
    Eigen::MatrixXd out(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double sd = feature_stds_(j);
      if (sd > 0.0) {
        out.col(j) = (x.col(j).array() - feature_means_(j)) / sd;
      } else {
        out.col(j).setZero();
      }
    }
    return out;
  }

  /// Predicted IoU per row of raw (unstandardized) metric vectors.
  Eigen::VectorXd predict(const Eigen::MatrixXd& x) const { return forward_standardized(standardize(x)); }

  Eigen::VectorXd forward_standardized(const Eigen::MatrixXd& xs) const {
    Eigen::MatrixXd a = xs.transpose();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Eigen::MatrixXd z = (layers_[l].weights * a).colwise() + layers_[l].bias;
      a = is_output(l) ? logistic(z) : leaky(z);
    }
    return a.row(0).transpose();
  }

  /// Mean squared error over standardized rows.
  double loss_standardized(const Eigen::MatrixXd& xs, const Eigen::VectorXd& y) const {
    const Eigen::VectorXd pred = forward_standardized(xs);
    return (pred - y).squaredNorm() / static_cast<double>(y.size());
  }

  /// Analytic MSE gradient with respect to every layer's weights and bias.
  std::vector<DenseLayer> gradients_standardized(const Eigen::MatrixXd& xs, const Eigen::VectorXd& y,
                                                 double* loss_out = nullptr) const {
    const auto batch = static_cast<double>(y.size());
    std::vector<Eigen::MatrixXd> acts{xs.transpose()};
    std::vector<Eigen::MatrixXd> pre;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      pre.push_back((layers_[l].weights * acts.back()).colwise() + layers_[l].bias);
      acts.push_back(is_output(l) ? logistic(pre.back()) : leaky(pre.back()));
    }
    const Eigen::RowVectorXd pred = acts.back().row(0);
    const Eigen::RowVectorXd diff = pred - y.transpose();
    if (loss_out) *loss_out = diff.squaredNorm() / batch;

    std::vector<DenseLayer> grads(layers_.size());
    Eigen::MatrixXd delta(1, diff.size());
    for (Eigen::Index i = 0; i < diff.size(); ++i) {
      const double z = pre.back()(0, i);
      const double dsig = std::abs(z) >= kLogitClamp ? 0.0 : pred(i) * (1.0 - pred(i));
      delta(0, i) = 2.0 * diff(i) / batch * dsig;
    }
    for (std::size_t l = layers_.size(); l-- > 0;) {
      grads[l].weights = delta * acts[l].transpose();
      grads[l].bias = delta.rowwise().sum();
      if (l == 0) break;
      Eigen::MatrixXd back = layers_[l].weights.transpose() * delta;
      delta = back.cwiseProduct(pre[l - 1].unaryExpr([](double z) { return z > 0.0 ? 1.0 : kLeakySlope; }));
    }
    return grads;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
    return n;
  }

  /// Flat parameter view: per layer, weights (row-major) then bias.
  double& parameter(std::size_t index) {
    for (auto& l : layers_) {
      const auto nw = static_cast<std::size_t>(l.weights.size());
      if (index < nw) {
        const auto cols = static_cast<std::size_t>(l.weights.cols());
        return l.weights(static_cast<Eigen::Index>(index / cols), static_cast<Eigen::Index>(index % cols));
      }
      index -= nw;
      const auto nb = static_cast<std::size_t>(l.bias.size());
      if (index < nb) return l.bias(static_cast<Eigen::Index>(index));
      index -= nb;
    }
    throw ValidationError("parameter index out of range");
  }

  static double flat_gradient(const std::vector<DenseLayer>& grads, std::size_t index) {
    for (const auto& l : grads) {
      const auto nw = static_cast<std::size_t>(l.weights.size());
      if (index < nw) {
        const auto cols = static_cast<std::size_t>(l.weights.cols());
        return l.weights(static_cast<Eigen::Index>(index / cols), static_cast<Eigen::Index>(index % cols));
      }
      index -= nw;
      const auto nb = static_cast<std::size_t>(l.bias.size());
      if (index < nb) return l.bias(static_cast<Eigen::Index>(index));
      index -= nb;
    }
    throw ValidationError("parameter index out of range");
  }

  nlohmann::json to_json() const;
  static MetaRegressor from_json(const nlohmann::json& j);

 private:
  bool is_output(std::size_t l) const { return l + 1 == layers_.size(); }

  void check_width(const Eigen::MatrixXd& x) const {
    if (static_cast<std::size_t>(x.cols()) != input_width()) {
      throw ValidationError("row width " + std::to_string(x.cols()) + " does not match model input width " +
                            std::to_string(input_width()));
    }
  }

  static Eigen::MatrixXd leaky(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
  }
  static Eigen::MatrixXd logistic(const Eigen::MatrixXd& z) {
    return z.unaryExpr([](double v) {
      const double c = std::clamp(v, -kLogitClamp, kLogitClamp);
      return 1.0 / (1.0 + std::exp(-c));
    });
  }

  std::vector<std::size_t> layer_sizes_;
  std::vector<DenseLayer> layers_;
  Eigen::VectorXd feature_means_;
  Eigen::VectorXd feature_stds_;
  std::uint64_t seed_ = 0;
};

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline const nlohmann::json& model_field(const nlohmann::json& j, const char* name) {
  if (!j.contains(name)) throw FormatError(std::string("meta regressor model: missing field ") + name);
  return j[name];
}

}  // namespace detail

inline nlohmann::json MetaRegressor::to_json() const {
  nlohmann::json j;
  j["format"] = "segscope-meta-regressor";
  j["version"] = 1;
  j["layer_sizes"] = layer_sizes_;
  j["hidden_activation"] = "leaky_relu";
  j["leaky_slope"] = kLeakySlope;
  j["output_activation"] = "logistic";
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (const auto& l : layers_) {
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weights.size()));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
    }
    j["weights"].push_back(w);
    j["biases"].push_back(detail::to_vec(l.bias));
  }
  j["feature_means"] = detail::to_vec(feature_means_);
  j["feature_stds"] = detail::to_vec(feature_stds_);
  j["seed"] = seed_;
  return j;
}

inline MetaRegressor MetaRegressor::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("meta regressor model: not a JSON object");
  const auto get = [&](const char* name) -> const nlohmann::json& { return detail::model_field(j, name); };
  try {
    if (get("hidden_activation") != "leaky_relu" || get("output_activation") != "logistic") {
      throw FormatError("meta regressor model: unsupported activation");
    }
    auto sizes = get("layer_sizes").get<std::vector<std::size_t>>();
    MetaRegressor m = zeros(sizes);
    const auto& weights = get("weights");
    const auto& biases = get("biases");
    if (!weights.is_array() || weights.size() != m.layers_.size()) throw FormatError("meta regressor model: weights");
    if (!biases.is_array() || biases.size() != m.layers_.size()) throw FormatError("meta regressor model: biases");
    for (std::size_t l = 0; l < m.layers_.size(); ++l) {
      auto& layer = m.layers_[l];
      const auto w = weights[l].get<std::vector<double>>();
      const auto b = biases[l].get<std::vector<double>>();
      if (w.size() != static_cast<std::size_t>(layer.weights.size())) throw FormatError("meta regressor model: weights");
      if (b.size() != static_cast<std::size_t>(layer.bias.size())) throw FormatError("meta regressor model: biases");
      std::size_t i = 0;
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = w[i++];
      }
      for (std::size_t k = 0; k < b.size(); ++k) layer.bias(static_cast<Eigen::Index>(k)) = b[k];
    }
    const auto means = get("feature_means").get<std::vector<double>>();
    const auto stds = get("feature_stds").get<std::vector<double>>();
    if (means.size() != sizes[0]) throw FormatError("meta regressor model: feature_means");
    if (stds.size() != sizes[0]) throw FormatError("meta regressor model: feature_stds");
    m.set_standardization(Eigen::Map<const Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size())),
                          Eigen::Map<const Eigen::VectorXd>(stds.data(), static_cast<Eigen::Index>(stds.size())));
    m.seed_ = get("seed").get<std::uint64_t>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("meta regressor model: ") + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(std::string("meta regressor model: ") + e.what());
  }
}

inline void save_model(const MetaRegressor& model, const std::filesystem::path& path) {
  write_json_file(path, model.to_json());
}

inline MetaRegressor load_model(const std::filesystem::path& path) {
  return MetaRegressor::from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  MetaRegressor model;
  std::vector<EpochLoss> history;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> validation_indices;
};

namespace detail {

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Eigen::VectorXd gather(const Eigen::VectorXd& y, std::span<const std::size_t> idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace detail

inline TrainResult train(const Eigen::MatrixXd& features, const Eigen::VectorXd& targets, const TrainConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(features.rows());
  if (n == 0) throw ValidationError("train: empty dataset");
  if (n < 2) throw ValidationError("train: need at least 2 rows");
  if (targets.size() != features.rows()) throw ValidationError("train: features and targets differ in length");
  for (Eigen::Index i = 0; i < targets.size(); ++i) {
    if (!(targets(i) >= 0.0 && targets(i) <= 1.0)) throw ValidationError("train: targets must lie in [0,1]");
  }
  if (!features.allFinite()) throw ValidationError("train: non-finite feature value");

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
  n_val = std::min(n_val, n - 1);
  TrainResult result;
  result.validation_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  result.train_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(result.validation_indices.begin(), result.validation_indices.end());
  std::sort(result.train_indices.begin(), result.train_indices.end());

  std::vector<std::size_t> sizes{static_cast<std::size_t>(features.cols())};
  sizes.insert(sizes.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
  sizes.push_back(1);
  MetaRegressor model = MetaRegressor::glorot(sizes, cfg.seed);
  model.fit_standardization(detail::gather_rows(features, result.train_indices));

  const Eigen::MatrixXd x_train = model.standardize(detail::gather_rows(features, result.train_indices));
  const Eigen::VectorXd y_train = detail::gather(targets, result.train_indices);
  const Eigen::MatrixXd x_val = model.standardize(detail::gather_rows(features, result.validation_indices));
  const Eigen::VectorXd y_val = detail::gather(targets, result.validation_indices);

  std::vector<DenseLayer> velocity;
  for (const auto& l : model.layers()) {
    velocity.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  }

  std::vector<std::size_t> batch_order(result.train_indices.size());
  for (std::size_t i = 0; i < batch_order.size(); ++i) batch_order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(batch_order);
    for (std::size_t start = 0; start < batch_order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(start + cfg.batch_size, batch_order.size());
      std::span<const std::size_t> idx(batch_order.data() + start, stop - start);
      const auto grads = model.gradients_standardized(detail::gather_rows(x_train, idx), detail::gather(y_train, idx));
      auto& layers = model.layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        velocity[l].weights = cfg.momentum * velocity[l].weights - cfg.learning_rate * grads[l].weights;
        velocity[l].bias = cfg.momentum * velocity[l].bias - cfg.learning_rate * grads[l].bias;
        layers[l].weights += velocity[l].weights;
        layers[l].bias += velocity[l].bias;
      }
    }
    EpochLoss loss;
    loss.train_mse = model.loss_standardized(x_train, y_train);
    if (n_val > 0) loss.validation_mse = model.loss_standardized(x_val, y_val);
    if (!std::isfinite(loss.train_mse) || (n_val > 0 && !std::isfinite(loss.validation_mse))) {
      throw TrainingError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
    }
    result.history.push_back(loss);
  }
  result.model = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradientCheckResult {
  double max_relative_error = 0.0;  // discrepancy beyond the difference quotient's rounding bound
  double max_raw_relative_error = 0.0;
};

/// Rounding allowance of a central difference, in ulps of the larger loss.
inline constexpr double kDifferenceRoundoffUlps = 4.0;

/// Max relative deviation between analytic gradients and central finite
/// differences of the MSE loss over every parameter. The difference quotient
/// itself is only resolved to about ulp(loss) / epsilon, so that much of the
/// absolute discrepancy is not attributed to the analytic gradient.
/// `grads` are the analytic gradients under test for the standardized batch.
inline GradientCheckResult gradient_check_against(const MetaRegressor& model, const Eigen::MatrixXd& batch,
                                                  const Eigen::VectorXd& targets, double epsilon,
                                                  const std::vector<DenseLayer>& grads) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ValidationError("gradient_check: epsilon must be in (0, 1e-2]");
  const Eigen::MatrixXd xs = model.standardize(batch);
  MetaRegressor probe = model;
  GradientCheckResult out;
  for (std::size_t p = 0; p < probe.parameter_count(); ++p) {
    double& theta = probe.parameter(p);
    const double saved = theta;
    theta = saved + epsilon;
    const double up = probe.loss_standardized(xs, targets);
    theta = saved - epsilon;
    const double down = probe.loss_standardized(xs, targets);
    theta = saved;
    const double fd = (up - down) / (2.0 * epsilon);
    const double an = MetaRegressor::flat_gradient(grads, p);
    const double scale = std::max({std::abs(an), std::abs(fd), 1e-8});
    const double roundoff = kDifferenceRoundoffUlps * std::numeric_limits<double>::epsilon() *
                            std::max(std::abs(up), std::abs(down)) / epsilon;
    out.max_raw_relative_error = std::max(out.max_raw_relative_error, std::abs(an - fd) / scale);
    out.max_relative_error = std::max(out.max_relative_error, std::max(0.0, std::abs(an - fd) - roundoff) / scale);
  }
  return out;
}

inline GradientCheckResult gradient_check_detail(const MetaRegressor& model, const Eigen::MatrixXd& batch,
                                                 const Eigen::VectorXd& targets, double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw ValidationError("gradient_check: epsilon must be in (0, 1e-2]");
  return gradient_check_against(model, batch, targets, epsilon,
                                model.gradients_standardized(model.standardize(batch), targets));
}

inline double gradient_check(const MetaRegressor& model, const Eigen::MatrixXd& batch, const Eigen::VectorXd& targets,
                             double epsilon) {
  return gradient_check_detail(model, batch, targets, epsilon).max_relative_error;
}

}  // namespace segscope
