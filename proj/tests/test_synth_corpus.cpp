#include <gtest/gtest.h>

#include "segscope/dispersion.hpp"
#include "segscope/segments.hpp"
#include "segscope/synth_corpus.hpp"
#include "test_support.hpp"

using namespace segscope;
using segscope::testing::TempDir;

namespace {

CorpusSpec small_spec(std::uint64_t seed) {
  CorpusSpec s;
  s.seed = seed;
  s.source_count = 2;
  s.shifted_count = 3;
  return s;
}

double mean_over(const Raster<double>& map, const LabelRaster& labels, bool unknown, std::int32_t first_unknown) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if ((labels[p] >= first_unknown) != unknown) continue;
    sum += map[p];
    ++n;
  }
  return n ? sum / static_cast<double>(n) : std::nan("");
}

}  // namespace

TEST(SynthCorpus, CleanNetworkReproducesGroundTruth) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    CorpusSpec spec = small_spec(seed);
    spec.tau = 0.0;
    spec.unknown_probability = 0.0;
    for (Split split : {Split::Source, Split::Shifted}) {
      const auto img = generate_image(spec, split, seed);
      const auto disp = compute_dispersion(img.softmax);
      ASSERT_EQ(disp.predicted_labels, img.labels) << img.key;
      const auto seg = extract_segments(disp.predicted_labels);
      for (double v : segment_iou(seg, img.labels)) EXPECT_DOUBLE_EQ(v, 1.0);
    }
  }
}

TEST(SynthCorpus, LargeUnknownDiskIsMispredicted) {
  CorpusSpec spec = small_spec(3);
  spec.known_shapes = {Shape::Rect, Shape::Triangle};
  spec.unknown_shapes = {Shape::Disk};
  spec.unknown_min_size = spec.unknown_max_size = 140;
  spec.unknown_probability = 1.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto img = generate_image(spec, Split::Shifted, i);
    ASSERT_FALSE(img.instance_classes.empty());
    ASSERT_EQ(img.instance_classes[0], spec.unknown_class(0));
    const auto seg = extract_segments(compute_dispersion(img.softmax).predicted_labels);
    const auto iou = segment_iou(seg, img.labels);
    bool found = false;
    for (std::size_t s = 0; s < seg.count(); ++s) {
      bool overlaps = false;
      for (std::size_t p : seg.segment_pixels[s]) overlaps = overlaps || img.instances[p] == 0;
      found = found || (overlaps && iou[s] < 0.5);
    }
    EXPECT_TRUE(found) << img.key;
  }
}

TEST(SynthCorpus, DeterministicInSeedSplitAndIndex) {
  const CorpusSpec spec = small_spec(11);
  const auto a = generate_image(spec, Split::Shifted, 4);
  const auto b = generate_image(spec, Split::Shifted, 4);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.instances, b.instances);
  EXPECT_EQ(a.softmax, b.softmax);
  EXPECT_NE(generate_image(spec, Split::Shifted, 5).softmax, a.softmax);
  EXPECT_NE(generate_image(spec, Split::Source, 4).softmax, a.softmax);
  EXPECT_NE(generate_image(small_spec(12), Split::Shifted, 4).softmax, a.softmax);
}

TEST(SynthCorpus, SoftmaxRowsAreDistributions) {
  Rng rng(5);
  for (int trial = 0; trial < 8; ++trial) {
    CorpusSpec spec = small_spec(static_cast<std::uint64_t>(trial));
    spec.tau = rng.uniform(0.0, 3.0);
    spec.rho = rng.uniform();
    const auto img = generate_image(spec, trial % 2 ? Split::Shifted : Split::Source, 0);
    const auto& d = img.softmax.dims();
    ASSERT_EQ(d.size(), 3u);
    ASSERT_EQ(d[2], spec.num_classes());
    const auto v = img.softmax.values<float>();
    for (std::size_t p = 0; p < d[0] * d[1]; ++p) {
      double sum = 0.0;
      for (std::size_t k = 0; k < d[2]; ++k) {
        const float x = v[p * d[2] + k];
        ASSERT_TRUE(std::isfinite(x));
        ASSERT_GE(x, 0.0f);
        sum += x;
      }
      ASSERT_NEAR(sum, 1.0, kProbabilitySumTolerance) << "pixel " << p;
    }
    EXPECT_NO_THROW(compute_dispersion(img.softmax));
  }
}

TEST(SynthCorpus, UnknownRegionsAreMoreDispersed) {
  for (double rho : {0.05, 0.2, 0.6, 1.0}) {
    CorpusSpec spec = small_spec(21);
    spec.rho = rho;
    spec.unknown_probability = 1.0;
    const std::int32_t first_unknown = spec.unknown_class(0);
    for (std::size_t i = 0; i < 4; ++i) {
      const auto img = generate_image(spec, Split::Shifted, i);
      const auto disp = compute_dispersion(img.softmax);
      const double unknown = mean_over(disp.entropy, img.labels, true, first_unknown);
      const double known = mean_over(disp.entropy, img.labels, false, first_unknown);
      ASSERT_FALSE(std::isnan(unknown)) << img.key;
      EXPECT_GT(unknown, known + 0.05) << "rho=" << rho << " " << img.key;
    }
  }
}

TEST(SynthCorpus, SplitsAndInstancesAreConsistent) {
  CorpusSpec spec = small_spec(8);
  spec.unknown_probability = 1.0;
  for (std::size_t i = 0; i < 6; ++i) {
    for (Split split : {Split::Source, Split::Shifted}) {
      const auto img = generate_image(spec, split, i);
      bool has_unknown = false;
      for (std::size_t p = 0; p < img.labels.size(); ++p) {
        const std::int32_t inst = img.instances[p];
        if (inst == kIgnoreLabel) {
          ASSERT_EQ(img.labels[p], 0);
          continue;
        }
        ASSERT_LT(static_cast<std::size_t>(inst), img.instance_classes.size());
        ASSERT_EQ(img.labels[p], img.instance_classes[static_cast<std::size_t>(inst)]);
        has_unknown = has_unknown || img.labels[p] >= spec.unknown_class(0);
      }
      EXPECT_EQ(has_unknown, split == Split::Shifted) << img.key;
    }
  }
}

TEST(SynthCorpus, UnknownInstancesMeetSizeRange) {
  CorpusSpec spec = small_spec(13);
  spec.unknown_probability = 1.0;
  for (std::size_t i = 0; i < 9; ++i) {
    const auto img = generate_image(spec, Split::Shifted, i);
    BBox box = BBox::at(-1, -1);
    bool seen = false;
    for (std::size_t r = 0; r < img.labels.rows(); ++r) {
      for (std::size_t c = 0; c < img.labels.cols(); ++c) {
        if (img.instances(r, c) != 0) continue;
        const auto rr = static_cast<std::int64_t>(r), cc = static_cast<std::int64_t>(c);
        if (!seen) box = BBox::at(rr, cc);
        box.extend(rr, cc);
        seen = true;
      }
    }
    ASSERT_TRUE(seen);
    EXPECT_GE(box.height(), static_cast<std::int64_t>(spec.unknown_min_size) - 1);
    EXPECT_GE(box.width(), static_cast<std::int64_t>(spec.unknown_min_size) - 1);
    EXPECT_LE(box.height(), static_cast<std::int64_t>(spec.unknown_max_size));
  }
}

TEST(SynthCorpus, SpecValidationAndJson) {
  CorpusSpec bad = small_spec(0);
  bad.unknown_shapes.push_back(Shape::Rect);
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_spec(0);
  bad.rho = 1.5;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_spec(0);
  bad.unknown_max_size = 400;
  EXPECT_THROW(bad.validate(), ConfigError);

  CorpusSpec s = small_spec(99);
  s.tau = 0.25;
  s.known_shapes = {Shape::Disk, Shape::Rect};
  const auto back = CorpusSpec::from_json(nlohmann::json::parse(s.to_json().dump()));
  EXPECT_EQ(back.to_json(), s.to_json());
  EXPECT_THROW(CorpusSpec::from_json(nlohmann::json{{"known_shapes", {"blob"}}}), ConfigError);
}

TEST(SynthCorpus, DirectoryRoundTrip) {
  TempDir dir("synth");
  const CorpusSpec spec = small_spec(4);
  const auto idx = generate_corpus(spec, dir.path());
  ASSERT_EQ(idx.images.size(), 5u);
  const auto loaded = load_corpus_index(dir.path());
  ASSERT_EQ(loaded.images.size(), 5u);
  EXPECT_EQ(loaded.spec.to_json(), spec.to_json());
  EXPECT_EQ(loaded.split(Split::Source).size(), 2u);
  const auto& e = *loaded.split(Split::Shifted)[1];
  EXPECT_EQ(e.key, "shifted_0001");
  const auto img = load_synth_image(dir.path(), e);
  const auto fresh = generate_image(spec, Split::Shifted, 1);
  EXPECT_EQ(img.softmax, fresh.softmax);
  EXPECT_EQ(img.labels, fresh.labels);
  EXPECT_EQ(img.image, fresh.image);
  EXPECT_EQ(img.instance_classes, fresh.instance_classes);
}
