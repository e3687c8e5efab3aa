#pragma once

// Synthetic "shape world" corpora with a simulated segmentation network.
//
// Class 0 is background, classes 1..k are known shapes that the simulated
// network can predict, and the classes after them are unknown shapes that
// only appear in the shifted split. The network output is built directly:
// known pixels get confident logits corrupted by smooth noise (scaled by tau)
// plus occasional "hard" objects confused with another class; unknown pixels
// get a blend of a hallucinated known class and a smooth random mixture
// (weight rho), which is high-entropy but keeps a consistent argmax.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "segscope/core.hpp"
#include "segscope/tensor_store.hpp"

namespace segscope {

enum class Shape { Rect, Disk, Triangle, Ring, Cross, Diamond };

inline const char* shape_name(Shape s) {
  switch (s) {
    case Shape::Rect: return "rect";
    case Shape::Disk: return "disk";
    case Shape::Triangle: return "triangle";
    case Shape::Ring: return "ring";
    case Shape::Cross: return "cross";
    case Shape::Diamond: return "diamond";
  }
  return "?";
}

inline Shape shape_from_name(const std::string& s) {
  for (Shape v : {Shape::Rect, Shape::Disk, Shape::Triangle, Shape::Ring, Shape::Cross, Shape::Diamond}) {
    if (s == shape_name(v)) return v;
  }
  throw ConfigError("unknown shape '" + s + "'");
}

enum class Split { Source, Shifted };

inline const char* split_name(Split s) { return s == Split::Source ? "source" : "shifted"; }

struct CorpusSpec {
  std::size_t height = 192;
  std::size_t width = 192;
  std::vector<Shape> known_shapes = {Shape::Rect, Shape::Disk, Shape::Triangle};
  std::vector<Shape> unknown_shapes = {Shape::Ring, Shape::Cross, Shape::Diamond};
  std::size_t known_min_size = 24;
  std::size_t known_max_size = 120;
  std::size_t unknown_min_size = 130;
  std::size_t unknown_max_size = 170;
  std::size_t min_known_objects = 2;
  std::size_t max_known_objects = 5;
  std::size_t placement_margin = 6;
  double unknown_probability = 0.8;  // shifted split only
  double hard_probability = 0.4;     // known objects confused with another class
  double tau = 1.0;
  double rho = 0.6;
  double logit_scale = 5.0;
  double unknown_logit_scale = 2.5;  // hallucinated class on unknown objects
  double noise_scale = 1.5;
  double mixture_scale = 1.0;
  std::size_t noise_cell = 16;
  std::size_t blur_radius = 2;
  std::size_t source_count = 50;
  std::size_t shifted_count = 50;
  std::uint64_t seed = 0;

  /// Softmax width: background plus the known shapes.
  std::size_t num_classes() const { return 1 + known_shapes.size(); }
  std::int32_t known_class(std::size_t i) const { return static_cast<std::int32_t>(1 + i); }
  std::int32_t unknown_class(std::size_t j) const { return static_cast<std::int32_t>(1 + known_shapes.size() + j); }

  std::vector<std::int32_t> known_class_ids() const {
    std::vector<std::int32_t> ids(num_classes());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i);
    return ids;
  }
  std::vector<std::int32_t> interest_class_ids() const {
    std::vector<std::int32_t> ids;
    for (std::size_t i = 0; i < known_shapes.size(); ++i) ids.push_back(known_class(i));
    return ids;
  }

  void validate() const {
    if (height < 16 || width < 16) throw ConfigError("canvas must be at least 16x16");
    if (known_shapes.empty()) throw ConfigError("at least one known shape is required");
    for (Shape u : unknown_shapes) {
      if (std::find(known_shapes.begin(), known_shapes.end(), u) != known_shapes.end()) {
        throw ConfigError(std::string("shape ") + shape_name(u) + " is both known and unknown");
      }
    }
    if (known_min_size < 4 || known_min_size > known_max_size) throw ConfigError("invalid known size range");
    if (unknown_min_size < 4 || unknown_min_size > unknown_max_size) throw ConfigError("invalid unknown size range");
    const std::size_t fit = std::min(height, width);
    if (known_max_size + 2 * placement_margin > fit || (!unknown_shapes.empty() && unknown_max_size + 2 * placement_margin > fit)) {
      throw ConfigError("shapes too large for canvas");
    }
    if (min_known_objects > max_known_objects) throw ConfigError("invalid known object count range");
    if (!(unknown_probability >= 0 && unknown_probability <= 1)) throw ConfigError("unknown_probability must be in [0,1]");
    if (!(hard_probability >= 0 && hard_probability <= 1)) throw ConfigError("hard_probability must be in [0,1]");
    if (!(tau >= 0)) throw ConfigError("tau must be >= 0");
    if (!(rho >= 0 && rho <= 1)) throw ConfigError("rho must be in [0,1]");
    if (!(logit_scale > 0) || !(unknown_logit_scale >= 0) || !(noise_scale >= 0) || !(mixture_scale >= 0)) throw ConfigError("invalid logit scales");
    if (noise_cell < 2) throw ConfigError("noise_cell must be >= 2");
  }

  nlohmann::ordered_json to_json() const {
    const auto names = [](const std::vector<Shape>& v) {
      std::vector<std::string> out;
      for (Shape s : v) out.emplace_back(shape_name(s));
      return out;
    };
    nlohmann::ordered_json j;
    j["height"] = height;
    j["width"] = width;
    j["known_shapes"] = names(known_shapes);
    j["unknown_shapes"] = names(unknown_shapes);
    j["known_size"] = {known_min_size, known_max_size};
    j["unknown_size"] = {unknown_min_size, unknown_max_size};
    j["known_objects"] = {min_known_objects, max_known_objects};
    j["placement_margin"] = placement_margin;
    j["unknown_probability"] = unknown_probability;
    j["hard_probability"] = hard_probability;
    j["tau"] = tau;
    j["rho"] = rho;
    j["logit_scale"] = logit_scale;
    j["unknown_logit_scale"] = unknown_logit_scale;
    j["noise_scale"] = noise_scale;
    j["mixture_scale"] = mixture_scale;
    j["noise_cell"] = noise_cell;
    j["blur_radius"] = blur_radius;
    j["source_count"] = source_count;
    j["shifted_count"] = shifted_count;
    j["seed"] = seed;
    return j;
  }

  static CorpusSpec from_json(const nlohmann::json& j) {
    CorpusSpec s;
    try {
      const auto pair = [&](const char* key, std::size_t& lo, std::size_t& hi) {
        if (!j.contains(key)) return;
        const auto& v = j.at(key);
        if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + " must be [min, max]");
        lo = v[0].get<std::size_t>();
        hi = v[1].get<std::size_t>();
      };
      const auto shapes = [&](const char* key, std::vector<Shape>& out) {
        if (!j.contains(key)) return;
        out.clear();
        for (const auto& n : j.at(key)) out.push_back(shape_from_name(n.get<std::string>()));
      };
      s.height = j.value("height", s.height);
      s.width = j.value("width", s.width);
      shapes("known_shapes", s.known_shapes);
      shapes("unknown_shapes", s.unknown_shapes);
      pair("known_size", s.known_min_size, s.known_max_size);
      pair("unknown_size", s.unknown_min_size, s.unknown_max_size);
      pair("known_objects", s.min_known_objects, s.max_known_objects);
      s.placement_margin = j.value("placement_margin", s.placement_margin);
      s.unknown_probability = j.value("unknown_probability", s.unknown_probability);
      s.hard_probability = j.value("hard_probability", s.hard_probability);
      s.tau = j.value("tau", s.tau);
      s.rho = j.value("rho", s.rho);
      s.logit_scale = j.value("logit_scale", s.logit_scale);
      s.unknown_logit_scale = j.value("unknown_logit_scale", s.unknown_logit_scale);
      s.noise_scale = j.value("noise_scale", s.noise_scale);
      s.mixture_scale = j.value("mixture_scale", s.mixture_scale);
      s.noise_cell = j.value("noise_cell", s.noise_cell);
      s.blur_radius = j.value("blur_radius", s.blur_radius);
      s.source_count = j.value("source_count", s.source_count);
      s.shifted_count = j.value("shifted_count", s.shifted_count);
      s.seed = j.value("seed", s.seed);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("corpus spec: ") + e.what());
    }
    s.validate();
    return s;
  }
};

struct SynthImage {
  std::string key;
  Split split = Split::Source;
  TensorBlob image;    // (H, W, 3) u8
  LabelRaster labels;  // ground truth, unknown shapes included
  LabelRaster instances;
  std::vector<std::int32_t> instance_classes;
  TensorBlob softmax;  // (H, W, K) f32 over background + known shapes
};

namespace synth_detail {

/// Axis-aligned mask of a shape inside an h x w box.
inline Raster<std::uint8_t> shape_mask(Shape shape, std::size_t h, std::size_t w) {
  Raster<std::uint8_t> m(h, w, 0);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double ry = static_cast<double>(h) / 2.0, rx = static_cast<double>(w) / 2.0;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double dy = (static_cast<double>(r) - cy) / ry, dx = (static_cast<double>(c) - cx) / rx;
      bool in = false;
      switch (shape) {
        case Shape::Rect: in = true; break;
        case Shape::Disk: in = dx * dx + dy * dy <= 1.0; break;
        case Shape::Triangle: {
          // Apex at the top row, base along the bottom row.
          const double t = (static_cast<double>(r) + 0.5) / static_cast<double>(h);
          in = std::abs(dx) <= t;
          break;
        }
        case Shape::Ring: {
          const double d2 = dx * dx + dy * dy;
          in = d2 <= 1.0 && d2 >= 0.62 * 0.62;
          break;
        }
        case Shape::Cross: in = std::abs(dx) <= 0.34 || std::abs(dy) <= 0.34; break;
        case Shape::Diamond: in = std::abs(dx) + std::abs(dy) <= 1.0; break;
      }
      m(r, c) = in ? 1 : 0;
    }
  }
  return m;
}

/// Gaussian values on a coarse grid, bilinearly interpolated to h x w.
inline Raster<double> smooth_field(Rng& rng, std::size_t h, std::size_t w, std::size_t cell) {
  const std::size_t gh = h / cell + 2, gw = w / cell + 2;
  std::vector<double> grid(gh * gw);
  for (auto& g : grid) g = rng.normal();
  Raster<double> out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    const double fy = static_cast<double>(r) / static_cast<double>(cell);
    const auto y0 = static_cast<std::size_t>(fy);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < w; ++c) {
      const double fx = static_cast<double>(c) / static_cast<double>(cell);
      const auto x0 = static_cast<std::size_t>(fx);
      const double tx = fx - static_cast<double>(x0);
      const double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
      const double d = grid[(y0 + 1) * gw + x0], e = grid[(y0 + 1) * gw + x0 + 1];
      out(r, c) = (1 - ty) * ((1 - tx) * a + tx * b) + ty * ((1 - tx) * d + tx * e);
    }
  }
  return out;
}

/// Fraction of pixels with label `cls` in the (2r+1)^2 window, clipped to the image.
inline Raster<double> box_fraction(const LabelRaster& labels, std::int32_t cls, std::size_t radius) {
  const std::size_t h = labels.rows(), w = labels.cols();
  std::vector<double> integral((h + 1) * (w + 1), 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      integral[(r + 1) * (w + 1) + c + 1] = (labels(r, c) == cls ? 1.0 : 0.0) + integral[r * (w + 1) + c + 1] +
                                            integral[(r + 1) * (w + 1) + c] - integral[r * (w + 1) + c];
    }
  }
  Raster<double> out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    const std::size_t r0 = r >= radius ? r - radius : 0, r1 = std::min(h, r + radius + 1);
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t c0 = c >= radius ? c - radius : 0, c1 = std::min(w, c + radius + 1);
      const double s = integral[r1 * (w + 1) + c1] - integral[r0 * (w + 1) + c1] - integral[r1 * (w + 1) + c0] +
                       integral[r0 * (w + 1) + c0];
      out(r, c) = s / static_cast<double>((r1 - r0) * (c1 - c0));
    }
  }
  return out;
}

struct PlacedObject {
  Shape shape;
  std::int32_t cls;
  bool unknown;
  BBox box;
  Raster<std::uint8_t> mask;
  double difficulty = 0.0;         // hard known objects only
  std::int32_t confuser = 0;       // class pushed up on hard objects
  std::int32_t hallucinated = 0;   // predicted class on unknown objects
  std::array<double, 3> color{};
};

inline bool boxes_clear(const BBox& a, const BBox& b, std::int64_t margin) {
  return a.row_max + margin < b.row_min || b.row_max + margin < a.row_min || a.col_max + margin < b.col_min ||
         b.col_max + margin < a.col_min;
}

inline std::array<double, 3> class_color(Shape s) {
  switch (s) {
    case Shape::Rect: return {200, 60, 50};
    case Shape::Disk: return {50, 160, 60};
    case Shape::Triangle: return {60, 80, 200};
    case Shape::Ring: return {230, 200, 40};
    case Shape::Cross: return {200, 60, 200};
    case Shape::Diamond: return {40, 200, 210};
  }
  return {128, 128, 128};
}

inline std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

}  // namespace synth_detail

inline std::string synth_key(Split split, std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu", split_name(split), index);
  return buf;
}

/// Deterministic in (spec, split, index).
inline SynthImage generate_image(const CorpusSpec& spec, Split split, std::size_t index) {
  using namespace synth_detail;
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, K = spec.num_classes();
  Rng rng(mix_seed(spec.seed, (split == Split::Source ? 0x100000000ULL : 0x200000000ULL) + index));

  std::vector<PlacedObject> objects;
  const auto place = [&](Shape shape, std::int32_t cls, bool unknown, std::size_t bh, std::size_t bw) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const auto r0 = rng.uniform_int(static_cast<std::int64_t>(spec.placement_margin),
                                      static_cast<std::int64_t>(H - spec.placement_margin - bh));
      const auto c0 = rng.uniform_int(static_cast<std::int64_t>(spec.placement_margin),
                                      static_cast<std::int64_t>(W - spec.placement_margin - bw));
      const BBox box{r0, c0, r0 + static_cast<std::int64_t>(bh) - 1, c0 + static_cast<std::int64_t>(bw) - 1};
      bool ok = true;
      for (const auto& o : objects) ok = ok && boxes_clear(box, o.box, static_cast<std::int64_t>(spec.placement_margin));
      if (!ok) continue;
      PlacedObject o{shape, cls, unknown, box, shape_mask(shape, bh, bw)};
      auto base = class_color(shape);
      for (auto& ch : base) ch += rng.uniform(-20.0, 20.0);
      o.color = base;
      objects.push_back(std::move(o));
      return true;
    }
    return false;
  };

  if (split == Split::Shifted && !spec.unknown_shapes.empty() && rng.uniform() < spec.unknown_probability) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.unknown_shapes.size()) - 1));
    const auto size = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.unknown_min_size),
                                                               static_cast<std::int64_t>(spec.unknown_max_size)));
    if (place(spec.unknown_shapes[j], spec.unknown_class(j), true, size, size)) {
      objects.back().hallucinated = spec.known_class(static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(spec.known_shapes.size()) - 1)));
    }
  }
  const auto n_known = rng.uniform_int(static_cast<std::int64_t>(spec.min_known_objects),
                                       static_cast<std::int64_t>(spec.max_known_objects));
  for (std::int64_t k = 0; k < n_known; ++k) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(spec.known_shapes.size()) - 1));
    const auto lo = static_cast<std::int64_t>(spec.known_min_size), hi = static_cast<std::int64_t>(spec.known_max_size);
    const auto bh = static_cast<std::size_t>(rng.uniform_int(lo, hi));
    const auto bw = spec.known_shapes[i] == Shape::Rect ? static_cast<std::size_t>(rng.uniform_int(lo, hi)) : bh;
    if (!place(spec.known_shapes[i], spec.known_class(i), false, bh, bw)) continue;
    auto& o = objects.back();
    if (rng.uniform() < spec.hard_probability) {
      o.difficulty = rng.uniform(0.3, 1.0);
      std::int32_t conf = o.cls;
      while (conf == o.cls) conf = static_cast<std::int32_t>(rng.uniform_int(0, static_cast<std::int64_t>(K) - 1));
      o.confuser = conf;
    }
  }

  SynthImage img;
  img.key = synth_key(split, index);
  img.split = split;
  img.labels = LabelRaster(H, W, 0);
  img.instances = LabelRaster(H, W, kIgnoreLabel);
  LabelRaster owner(H, W, -1);  // object index per pixel
  for (std::size_t oi = 0; oi < objects.size(); ++oi) {
    const auto& o = objects[oi];
    img.instance_classes.push_back(o.cls);
    for (std::size_t r = 0; r < o.mask.rows(); ++r) {
      for (std::size_t c = 0; c < o.mask.cols(); ++c) {
        if (!o.mask(r, c)) continue;
        const auto pr = static_cast<std::size_t>(o.box.row_min) + r, pc = static_cast<std::size_t>(o.box.col_min) + c;
        img.labels(pr, pc) = o.cls;
        img.instances(pr, pc) = static_cast<std::int32_t>(oi);
        owner(pr, pc) = static_cast<std::int32_t>(oi);
      }
    }
  }

  // RGB image: textured gray background, flat jittered object colors.
  const auto texture = smooth_field(rng, H, W, 12);
  std::vector<std::uint8_t> px(H * W * 3);
  for (std::size_t p = 0; p < H * W; ++p) {
    const std::int32_t oi = owner[p];
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double base = oi >= 0 ? objects[static_cast<std::size_t>(oi)].color[ch] : 110.0 + 18.0 * texture[p];
      px[p * 3 + ch] = clamp_byte(base + rng.uniform(-8.0, 8.0));
    }
  }
  img.image = TensorBlob::of<std::uint8_t>({H, W, 3}, std::move(px));

  // Simulated network output. Unknown pixels look like background to the
  // blur so neighbors do not see a class they cannot predict.
  LabelRaster visible = img.labels;
  for (auto& v : visible.data()) {
    if (v >= static_cast<std::int32_t>(K)) v = 0;
  }
  std::vector<Raster<double>> blur, noise, mixture;
  for (std::size_t k = 0; k < K; ++k) blur.push_back(box_fraction(visible, static_cast<std::int32_t>(k), spec.blur_radius));
  for (std::size_t k = 0; k < K; ++k) noise.push_back(smooth_field(rng, H, W, spec.noise_cell));
  for (std::size_t k = 0; k < K; ++k) mixture.push_back(smooth_field(rng, H, W, spec.noise_cell));

  const double kappa = spec.logit_scale;
  std::vector<float> probs(H * W * K);
  std::vector<double> logit(K), onehot(K);
  for (std::size_t p = 0; p < H * W; ++p) {
    const std::int32_t oi = owner[p];
    const PlacedObject* obj = oi >= 0 ? &objects[static_cast<std::size_t>(oi)] : nullptr;
    std::vector<double> q(K);
    if (obj && obj->unknown) {
      // (1 - rho) * confident hallucinated class + rho * smooth mixture.
      double zs = 0.0, ms = 0.0;
      std::vector<double> mix(K);
      for (std::size_t k = 0; k < K; ++k) {
        onehot[k] = std::exp(spec.unknown_logit_scale * (static_cast<std::int32_t>(k) == obj->hallucinated ? 1.0 : 0.0));
        zs += onehot[k];
        mix[k] = std::exp(spec.mixture_scale * mixture[k][p]);
        ms += mix[k];
      }
      for (std::size_t k = 0; k < K; ++k) q[k] = (1.0 - spec.rho) * onehot[k] / zs + spec.rho * mix[k] / ms;
    } else {
      const double amp = spec.tau * spec.noise_scale * (1.0 + 2.0 * (obj ? obj->difficulty : 0.0));
      for (std::size_t k = 0; k < K; ++k) {
        const double own = visible[p] == static_cast<std::int32_t>(k) ? 1.0 : 0.0;
        logit[k] = kappa * (0.5 * own + 0.5 * blur[k][p]) + amp * noise[k][p];
      }
      if (obj && obj->difficulty > 0.0) {
        // Flatten toward a weak confuser vote; flips once d > 2/3.
        const double d = std::min(1.0, spec.tau) * obj->difficulty;
        for (auto& l : logit) l *= 1.0 - d;
        logit[static_cast<std::size_t>(obj->confuser)] += 0.5 * kappa * d;
      }
      const double mx = *std::max_element(logit.begin(), logit.end());
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        q[k] = std::exp(logit[k] - mx);
        s += q[k];
      }
      for (auto& v : q) v /= s;
    }
    for (std::size_t k = 0; k < K; ++k) probs[p * K + k] = static_cast<float>(q[k]);
  }
  img.softmax = TensorBlob::of<float>({H, W, K}, std::move(probs));
  return img;
}

// ---------------------------------------------------------------------------
// Corpus directories

struct CorpusEntry {
  std::string key;
  Split split = Split::Source;
  std::string image, labels, instances, softmax;  // file names relative to the corpus dir
  std::vector<std::int32_t> instance_classes;
};

struct CorpusIndex {
  CorpusSpec spec;
  std::vector<CorpusEntry> images;

  std::vector<const CorpusEntry*> split(Split s) const {
    std::vector<const CorpusEntry*> out;
    for (const auto& e : images) {
      if (e.split == s) out.push_back(&e);
    }
    return out;
  }
};

inline nlohmann::ordered_json corpus_index_json(const CorpusIndex& idx) {
  nlohmann::ordered_json j;
  j["format"] = "segscope-synth-corpus";
  j["version"] = 1;
  j["spec"] = idx.spec.to_json();
  j["num_classes"] = idx.spec.num_classes();
  j["interest_classes"] = idx.spec.interest_class_ids();
  std::vector<std::int32_t> unknown;
  for (std::size_t i = 0; i < idx.spec.unknown_shapes.size(); ++i) unknown.push_back(idx.spec.unknown_class(i));
  j["unknown_classes"] = unknown;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : idx.images) {
    nlohmann::ordered_json o;
    o["key"] = e.key;
    o["split"] = split_name(e.split);
    o["image"] = e.image;
    o["labels"] = e.labels;
    o["instances"] = e.instances;
    o["softmax"] = e.softmax;
    o["instance_classes"] = e.instance_classes;
    arr.push_back(std::move(o));
  }
  j["images"] = std::move(arr);
  return j;
}

inline void write_synth_image(const SynthImage& img, const std::filesystem::path& dir, CorpusEntry& entry) {
  entry.key = img.key;
  entry.split = img.split;
  entry.image = img.key + "_image.segt";
  entry.labels = img.key + "_labels.segt";
  entry.instances = img.key + "_instances.segt";
  entry.softmax = img.key + "_softmax.segt";
  entry.instance_classes = img.instance_classes;
  write_tensor(img.image, dir / entry.image);
  write_tensor(from_label_raster(img.labels), dir / entry.labels);
  write_tensor(from_label_raster(img.instances), dir / entry.instances);
  write_tensor(img.softmax, dir / entry.softmax);
}

/// Writes both splits plus index.json into `dir`.
inline CorpusIndex generate_corpus(const CorpusSpec& spec, const std::filesystem::path& dir) {
  spec.validate();
  std::filesystem::create_directories(dir);
  CorpusIndex idx;
  idx.spec = spec;
  for (Split split : {Split::Source, Split::Shifted}) {
    const std::size_t n = split == Split::Source ? spec.source_count : spec.shifted_count;
    for (std::size_t i = 0; i < n; ++i) {
      CorpusEntry e;
      write_synth_image(generate_image(spec, split, i), dir, e);
      idx.images.push_back(std::move(e));
    }
  }
  write_text_file(dir / "index.json", corpus_index_json(idx).dump(2) + "\n");
  return idx;
}

inline CorpusIndex load_corpus_index(const std::filesystem::path& dir) {
  const auto j = read_json_file(dir / "index.json");
  CorpusIndex idx;
  try {
    if (j.at("format").get<std::string>() != "segscope-synth-corpus") throw FormatError("not a corpus index");
    idx.spec = CorpusSpec::from_json(j.at("spec"));
    for (const auto& o : j.at("images")) {
      CorpusEntry e;
      e.key = o.at("key").get<std::string>();
      const auto s = o.at("split").get<std::string>();
      if (s != "source" && s != "shifted") throw FormatError("unknown split '" + s + "'");
      e.split = s == "source" ? Split::Source : Split::Shifted;
      e.image = o.at("image").get<std::string>();
      e.labels = o.at("labels").get<std::string>();
      e.instances = o.at("instances").get<std::string>();
      e.softmax = o.at("softmax").get<std::string>();
      e.instance_classes = o.at("instance_classes").get<std::vector<std::int32_t>>();
      idx.images.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "index.json").string() + ": " + e.what());
  }
  return idx;
}

inline SynthImage load_synth_image(const std::filesystem::path& dir, const CorpusEntry& e) {
  SynthImage img;
  img.key = e.key;
  img.split = e.split;
  img.image = read_tensor(dir / e.image);
  img.labels = to_label_raster(read_tensor(dir / e.labels));
  img.instances = to_label_raster(read_tensor(dir / e.instances));
  img.instance_classes = e.instance_classes;
  img.softmax = read_tensor(dir / e.softmax);
  return img;
}

}  // namespace segscope
