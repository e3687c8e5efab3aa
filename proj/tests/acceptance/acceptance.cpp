// Acceptance gate: one PASS/FAIL line per primary criterion. Exit status is
// nonzero when any criterion fails. Tolerances and budgets are fixed here.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "segscope/pipeline.hpp"
#include "test_support.hpp"

using namespace segscope;
using segscope::testing::TempDir;

namespace {

// Dispersion identities.
constexpr double kIdentityTol = 1e-12;
constexpr double kReferenceTol = 1e-4;
constexpr double kDispersionBudget = 1.0;

// Metric ledger vs naive oracle.
constexpr int kLedgerImages = 100;
constexpr std::size_t kLedgerSide = 16;
constexpr double kLedgerTol = 1e-9;
constexpr double kLedgerBudget = 10.0;

// Meta regressor gradients.
constexpr int kGradientModels = 20;
constexpr double kGradientEpsilon = 1e-5;
constexpr double kGradientTol = 1e-4;
constexpr double kGradientBudget = 30.0;

// Synthetic detection analogs.
constexpr std::size_t kDetectSourceImages = 100;
constexpr std::size_t kDetectShiftedImages = 200;
constexpr double kDetectRho = 0.6;
constexpr double kMiouDrop = 0.10;
constexpr double kCoverageMin = 0.70;
constexpr double kRateRatio = 0.1;
constexpr double kDetectBudget = 120.0;

// PCA.
constexpr double kPcaOffDiagonalTol = 1e-8;
constexpr double kPcaReconstructionTol = 1e-6;

// t-SNE.
constexpr std::size_t kTsnePerBlob = 150;
constexpr double kTsnePerplexity = 30.0;
constexpr double kTsnePerplexityTol = 1e-3;
constexpr double kTsneNeighborMin = 0.95;
constexpr int kTsneRuns = 3;

// Retrieval.
constexpr int kRetrievalTrials = 1000;
constexpr std::size_t kRetrievalMaxN = 12;
constexpr double kApReference = 0.8333;
constexpr double kApTol = 1e-9;
constexpr double kBalancedMapMin = 0.9;

// KDE / HDR.
constexpr Eigen::Index kHdrSamples = 2000;
constexpr double kHdrAlpha = 0.2;
constexpr double kHdrCoverageTol = 0.05;
constexpr double kGridIntegralTol = 0.02;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string within_budget(bool& pass, double seconds, double budget) {
  pass = pass && seconds < budget;
  return "time " + fmt(seconds, 3) + "s/" + fmt(budget, 3) + "s";
}

// ---------------------------------------------------------------------------

Outcome dispersion_identities() {
  Stopwatch sw;
  double worst_identity = 0.0;
  for (std::size_t k = 2; k <= 32; ++k) {
    const std::vector<double> uniform(k, 1.0 / static_cast<double>(k));
    worst_identity = std::max(worst_identity, std::abs(pixel_entropy(uniform) - 1.0));
    for (std::size_t hot = 0; hot < k; ++hot) {
      std::vector<double> one(k, 0.0);
      one[hot] = 1.0;
      worst_identity = std::max(worst_identity, std::abs(pixel_entropy(one)));
    }
  }
  const std::vector<double> p = {0.5, 0.3, 0.2};
  const double e = pixel_entropy(p), m = pixel_margin(p), v = pixel_variation_ratio(p);
  const double ref_err = std::max({std::abs(e - 0.9372), std::abs(m - 0.8), std::abs(v - 0.5)});
  Outcome o;
  o.pass = worst_identity <= kIdentityTol && ref_err <= kReferenceTol;
  o.detail = "identity err " + fmt(worst_identity) + ", (E,M,V)=(" + fmt(e) + "," + fmt(m) + "," + fmt(v) + "), " +
             within_budget(o.pass, sw.seconds(), kDispersionBudget);
  return o;
}

Outcome ledger_oracle() {
  Stopwatch sw;
  Rng rng(9001);
  double worst = 0.0;
  std::size_t segments = 0;
  for (int img = 0; img < kLedgerImages; ++img) {
    // Alternate pixel-level noise with blocky label fields so both tiny and
    // extended segments are exercised.
    TensorBlob probs;
    if (img % 2 == 0) {
      probs = segscope::testing::random_softmax(rng, kLedgerSide, kLedgerSide, 3 + static_cast<std::size_t>(img % 4));
    } else {
      const auto labels = segscope::testing::blocky_labels(rng, kLedgerSide, kLedgerSide, 4, 3);
      std::vector<float> v(kLedgerSide * kLedgerSide * 4);
      for (std::size_t px = 0; px < labels.size(); ++px) {
        double raw[4], sum = 0.0;
        for (std::size_t c = 0; c < 4; ++c) {
          raw[c] = std::exp(rng.normal() + (static_cast<std::int32_t>(c) == labels.data()[px] ? 3.0 : 0.0));
          sum += raw[c];
        }
        for (std::size_t c = 0; c < 4; ++c) v[px * 4 + c] = static_cast<float>(raw[c] / sum);
      }
      probs = TensorBlob::of<float>({kLedgerSide, kLedgerSide, 4}, std::move(v));
    }
    const auto disp = compute_dispersion(probs);
    const auto seg = extract_segments(disp.predicted_labels);
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const auto got = aggregate_segment(seg, s, disp, probs);
      const auto want = oracle::naive_ledger(seg.segment_ids, static_cast<std::int32_t>(s), disp.entropy, disp.margin,
                                             disp.variation_ratio, probs);
      if (got.size() != want.size()) return {false, "ledger width mismatch"};
      for (std::size_t i = 0; i < got.size(); ++i) {
        const double err = std::abs(got[i] - want[i]);
        worst = std::max(worst, std::isnan(err) ? std::numeric_limits<double>::infinity() : err);
      }
      ++segments;
    }
  }
  Outcome o;
  o.pass = worst <= kLedgerTol;
  o.detail = std::to_string(segments) + " segments, max err " + fmt(worst) + ", " +
             within_budget(o.pass, sw.seconds(), kLedgerBudget);
  return o;
}

Outcome gradient_check_gate() {
  Stopwatch sw;
  Rng rng(4242);
  double worst = 0.0, worst_raw = 0.0;
  for (int trial = 0; trial < kGradientModels; ++trial) {
    const auto in = static_cast<std::size_t>(rng.uniform_int(2, 12));
    std::vector<std::size_t> sizes{in};
    const auto hidden = rng.uniform_int(1, 3);
    for (std::int64_t h = 0; h < hidden; ++h) sizes.push_back(static_cast<std::size_t>(rng.uniform_int(2, 16)));
    sizes.push_back(1);
    auto model = MetaRegressor::glorot(sizes, 500 + static_cast<std::uint64_t>(trial));
    for (auto& l : model.layers()) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias(i) = 0.1 * rng.normal();
    }
    const auto rows = rng.uniform_int(1, 16);
    Eigen::MatrixXd batch(rows, static_cast<Eigen::Index>(in));
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
      for (Eigen::Index c = 0; c < batch.cols(); ++c) batch(r, c) = 3.0 * rng.normal() + 1.0;
    }
    model.fit_standardization(batch);
    Eigen::VectorXd y(rows);
    for (Eigen::Index i = 0; i < rows; ++i) y(i) = rng.uniform();
    const auto r = gradient_check_detail(model, batch, y, kGradientEpsilon);
    worst = std::max(worst, r.max_relative_error);
    worst_raw = std::max(worst_raw, r.max_raw_relative_error);
  }
  Outcome o;
  o.pass = worst < kGradientTol;
  o.detail = std::to_string(kGradientModels) + " models, max rel err " + fmt(worst) + " (raw " + fmt(worst_raw) + "), " +
             within_budget(o.pass, sw.seconds(), kGradientBudget);
  return o;
}

// ---------------------------------------------------------------------------
// Synthetic detection chain shared by the three detection criteria.

struct DetectionRun {
  bool ok = false;
  std::string error;
  double seconds = 0.0;
  nlohmann::json source_report, shifted_report;
  CoverageTable oracle_coverage;
};

DetectionRun run_detection_chain() {
  DetectionRun run;
  Stopwatch sw;
  try {
    TempDir dir("acceptance_detect");
    nlohmann::json doc = {
        {"seed", 7},
        {"paths", {{"corpus", "corpus"}, {"work", "work"}}},
        {"synth", {{"source_count", kDetectSourceImages}, {"shifted_count", kDetectShiftedImages}, {"rho", kDetectRho}}}};
    write_text_file(dir / "config.json", doc.dump(2));
    const auto cfg = load_pipeline_config(dir / "config.json", {});
    cmd_synth(cfg);
    cmd_metrics(cfg, Split::Source);
    cmd_metrics(cfg, Split::Shifted);
    cmd_train_meta(cfg);
    cmd_predict_meta(cfg, Split::Source);
    cmd_predict_meta(cfg, Split::Shifted);
    run.source_report = cmd_detect(cfg, Split::Source);
    run.shifted_report = cmd_detect(cfg, Split::Shifted);

    // Recount shifted coverage with the pairwise oracle from the stored predictions.
    const auto idx = load_corpus_index(cfg.corpus_dir);
    const auto det = effective_detector(cfg, idx);
    const auto preds = read_predictions(predicted_path(cfg, Split::Shifted));
    for (const auto* e : idx.split(Split::Shifted)) {
      const auto img = load_synth_image(cfg.corpus_dir, *e);
      const auto disp = compute_dispersion(img.softmax);
      const auto seg = extract_segments(disp.predicted_labels);
      std::vector<double> iou(seg.count());
      for (std::size_t s = 0; s < seg.count(); ++s) iou[s] = preds.at({e->key, static_cast<std::int64_t>(s)}).predicted_iou;
      const auto crops = detect(seg, iou, img.image, e->key, det);
      merge_coverage(run.oracle_coverage, oracle::brute_coverage(crops, img.instances, img.instance_classes, det));
    }
    run.ok = true;
  } catch (const std::exception& e) {
    run.error = e.what();
  }
  run.seconds = sw.seconds();
  return run;
}

Outcome filtered_miou_drop(const DetectionRun& run) {
  if (!run.ok) return {false, "chain failed: " + run.error};
  const auto& r = run.shifted_report;
  double at_half = std::numeric_limits<double>::quiet_NaN();
  for (const auto& p : r.at("filtered_miou")) {
    if (std::abs(p.at("threshold").get<double>() - 0.5) < 1e-12 && !p.at("miou").is_null()) at_half = p.at("miou");
  }
  const double unfiltered = r.at("unfiltered_miou").is_null() ? std::nan("") : r.at("unfiltered_miou").get<double>();
  Outcome o;
  o.pass = std::isfinite(at_half) && std::isfinite(unfiltered) && at_half <= unfiltered - kMiouDrop;
  o.detail = "unfiltered " + fmt(unfiltered) + ", filtered@0.5 " + fmt(at_half) + ", required drop " + fmt(kMiouDrop) +
             ", " + within_budget(o.pass, run.seconds, kDetectBudget);
  return o;
}

Outcome unknown_coverage(const DetectionRun& run) {
  if (!run.ok) return {false, "chain failed: " + run.error};
  const auto& cov = run.shifted_report.at("unknown_coverage");
  const auto covered = cov.at("covered").get<std::size_t>(), total = cov.at("total").get<std::size_t>();
  bool oracle_equal = true;
  const auto& by_class = run.shifted_report.at("coverage_by_class");
  CoverageTable reported;
  for (const auto& [cls, c] : by_class.items()) {
    reported[std::stoi(cls)] = {c.at("covered").get<std::size_t>(), c.at("total").get<std::size_t>()};
  }
  const auto nonzero = [](const CoverageTable& t) {
    CoverageTable out;
    for (const auto& [cls, c] : t) {
      if (c.total > 0) out[cls] = c;
    }
    return out;
  };
  oracle_equal = nonzero(reported) == nonzero(run.oracle_coverage);
  const double frac = total == 0 ? 0.0 : static_cast<double>(covered) / static_cast<double>(total);
  Outcome o;
  o.pass = total > 0 && frac >= kCoverageMin && oracle_equal;
  o.detail = std::to_string(covered) + "/" + std::to_string(total) + " = " + fmt(frac) + " (min " + fmt(kCoverageMin) +
             "), oracle " + (oracle_equal ? "equal" : "MISMATCH") + ", " +
             within_budget(o.pass, run.seconds, kDetectBudget);
  return o;
}

Outcome detection_rate_ratio(const DetectionRun& run) {
  if (!run.ok) return {false, "chain failed: " + run.error};
  const double src = run.source_report.at("rate").get<double>();
  const double sh = run.shifted_report.at("rate").get<double>();
  Outcome o;
  o.pass = sh > 0.0 && src < kRateRatio * sh;
  o.detail = "source " + fmt(src) + "/image, shifted " + fmt(sh) + "/image, bound " + fmt(kRateRatio) + "x";
  return o;
}

// ---------------------------------------------------------------------------

Outcome pca_gate() {
  Rng rng(77);
  double worst_off = 0.0, worst_rec = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n = 60 + 20 * trial, dim = 4 + trial % 6;
    Eigen::MatrixXd mix(dim, dim), z(n, dim);
    for (Eigen::Index i = 0; i < dim; ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) mix(i, j) = rng.normal();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < dim; ++j) z(i, j) = rng.normal() * static_cast<double>(j + 1) + 2.0;
    }
    const Eigen::MatrixXd x = z * mix;
    const auto d = static_cast<std::size_t>(std::max<Eigen::Index>(2, dim / 2));
    const auto part = pca_fit_transform(x, d);
    const Eigen::MatrixXd centered = part.coords.rowwise() - part.coords.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
    for (Eigen::Index i = 0; i < cov.rows(); ++i) {
      for (Eigen::Index j = 0; j < cov.cols(); ++j) {
        if (i != j) worst_off = std::max(worst_off, std::abs(cov(i, j)));
      }
    }
    const auto full = pca_fit_transform(x, static_cast<std::size_t>(dim));
    worst_rec = std::max(worst_rec, (full.reconstruct() - x).cwiseAbs().maxCoeff());
  }
  Outcome o;
  o.pass = worst_off < kPcaOffDiagonalTol && worst_rec < kPcaReconstructionTol;
  o.detail = "max off-diagonal " + fmt(worst_off) + ", max reconstruction err " + fmt(worst_rec);
  return o;
}

Outcome tsne_gate() {
  Stopwatch sw;
  double worst_perp = 0.0, worst_nn = 1.0;
  bool kl_decreased = true;
  std::string kl_detail;
  for (int run = 0; run < kTsneRuns; ++run) {
    Rng rng(300 + static_cast<std::uint64_t>(run));
    const auto n = static_cast<Eigen::Index>(2 * kTsnePerBlob);
    Eigen::MatrixXd x(n, 10);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < 10; ++j) x(i, j) = rng.normal();
      if (i >= static_cast<Eigen::Index>(kTsnePerBlob)) x(i, 0) += 12.0;
    }
    TsneConfig cfg;
    cfg.perplexity = kTsnePerplexity;
    cfg.seed = 10 + static_cast<std::uint64_t>(run);
    const auto res = tsne(x, 2, cfg);
    for (double p : res.perplexities) worst_perp = std::max(worst_perp, std::abs(p - kTsnePerplexity));
    kl_decreased = kl_decreased && res.kl_final < res.kl_after_exaggeration;
    kl_detail += (run ? "; " : "") + fmt(res.kl_after_exaggeration) + "->" + fmt(res.kl_final);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index arg = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double d = (res.coords.row(i) - res.coords.row(j)).squaredNorm();
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      const auto blob = [](Eigen::Index k) { return k < static_cast<Eigen::Index>(kTsnePerBlob); };
      hits += blob(i) == blob(arg) ? 1 : 0;
    }
    worst_nn = std::min(worst_nn, static_cast<double>(hits) / static_cast<double>(n));
  }
  Outcome o;
  o.pass = worst_perp <= kTsnePerplexityTol && kl_decreased && worst_nn >= kTsneNeighborMin;
  o.detail = std::to_string(kTsneRuns) + " runs, max |perp-30| " + fmt(worst_perp) + ", KL " + kl_detail +
             ", min same-blob NN " + fmt(worst_nn) + ", time " + fmt(sw.seconds(), 3) + "s";
  return o;
}

Outcome retrieval_gate() {
  Rng rng(8080);
  int mismatches = 0, evaluated = 0;
  for (int trial = 0; trial < kRetrievalTrials; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(kRetrievalMaxN)));
    const auto d = rng.uniform_int(1, 4);
    Eigen::MatrixXd x(static_cast<Eigen::Index>(n), d);
    const bool ties = trial % 3 == 0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (Eigen::Index j = 0; j < d; ++j) x(i, j) = ties ? static_cast<double>(rng.uniform_int(1, 3)) : rng.normal();
    }
    std::vector<std::int32_t> cls(n);
    for (auto& c : cls) c = static_cast<std::int32_t>(rng.uniform_int(-1, 2));
    std::vector<SegmentKey> keys;
    for (std::size_t i = 0; i < n; ++i) keys.push_back({"img" + std::to_string(rng.uniform_int(0, 3)), static_cast<std::int64_t>(i)});
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<SegmentKey> shuffled(n);
    for (std::size_t i = 0; i < n; ++i) shuffled[i] = keys[order[i]];
    const Metric m = trial % 2 == 0 ? Metric::Euclidean : Metric::Cosine;
    const auto want = oracle::brute_force_eval(x, shuffled, cls, m);
    if (want.aps.empty()) {
      bool threw = false;
      try {
        evaluate_retrieval(x, shuffled, cls, m);
      } catch (const ValidationError&) {
        threw = true;
      }
      mismatches += threw ? 0 : 1;
      continue;
    }
    const auto got = evaluate_retrieval(x, shuffled, cls, m);
    bool same = got.per_query.size() == want.aps.size() && got.global_map == want.global &&
                got.balanced_map == want.balanced && got.skipped_queries == want.skipped;
    for (std::size_t i = 0; same && i < want.aps.size(); ++i) same = got.per_query[i].ap == want.aps[i];
    mismatches += same ? 0 : 1;
    ++evaluated;
  }
  const double ap = average_precision({true, false, true}, 2);

  // Four well-separated classes in 8-D.
  Rng blob_rng(99);
  const std::size_t per = 25;
  Eigen::MatrixXd emb(static_cast<Eigen::Index>(4 * per), 8);
  std::vector<std::int32_t> cls;
  std::vector<SegmentKey> keys;
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      const auto row = static_cast<Eigen::Index>(c * per + i);
      for (Eigen::Index j = 0; j < 8; ++j) emb(row, j) = 0.5 * blob_rng.normal();
      emb(row, static_cast<Eigen::Index>(2 * c)) += 10.0;
      cls.push_back(static_cast<std::int32_t>(c));
      keys.push_back({"crop", static_cast<std::int64_t>(row)});
    }
  }
  const auto euc = evaluate_retrieval(emb, keys, cls, Metric::Euclidean);
  const auto cos = evaluate_retrieval(emb, keys, cls, Metric::Cosine);

  Outcome o;
  o.pass = mismatches == 0 && std::abs(ap - 5.0 / 6.0) <= kApTol && std::abs(ap - kApReference) < 1e-4 &&
           euc.balanced_map >= kBalancedMapMin && cos.balanced_map >= kBalancedMapMin;
  o.detail = std::to_string(kRetrievalTrials) + " trials (" + std::to_string(evaluated) + " evaluated), " +
             std::to_string(mismatches) + " mismatches, AP([1,0,1],2)=" + fmt(ap, 10) + ", balanced mAP euclidean " +
             fmt(euc.balanced_map) + " cosine " + fmt(cos.balanced_map);
  return o;
}

Outcome kde_hdr_gate() {
  Rng rng(2000);
  Eigen::MatrixXd g(kHdrSamples, 2);
  for (Eigen::Index i = 0; i < kHdrSamples; ++i) g.row(i) << rng.normal(), rng.normal();
  const auto model = kde_fit(g);
  const double thr = hdr_threshold(model, g, kHdrAlpha);
  const auto dens = kde_eval(model, g);
  const double inside =
      static_cast<double>(std::count_if(dens.begin(), dens.end(), [thr](double v) { return v >= thr; })) /
      static_cast<double>(dens.size());
  const auto extent = padded_extent(model, 128, 128, 3.0);
  const double integral = grid_integral(density_grid(model, extent), extent);
  Outcome o;
  o.pass = std::abs(inside - (1.0 - kHdrAlpha)) <= kHdrCoverageTol && std::abs(integral - 1.0) <= kGridIntegralTol;
  o.detail = "HDR coverage " + fmt(inside) + ", grid integral " + fmt(integral, 6);
  return o;
}

// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" SEGSCOPE_CLI_PATH "' " + args + " >cli.out 2>cli.err";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome determinism_gate() {
  const nlohmann::json doc = {
      {"seed", 31},
      {"paths", {{"corpus", "corpus"}, {"work", "work"}}},
      {"synth", {{"source_count", 50}, {"shifted_count", 40}}},
      {"embedding", {{"method", "pca_then_tsne"}, {"dims", 2}, {"tsne", {{"perplexity", 5}, {"iterations", 300}}}}}};
  std::vector<std::map<std::string, std::string>> hashes;
  TempDir a("acceptance_det_a"), b("acceptance_det_b");
  for (const TempDir* dir : {&a, &b}) {
    write_text_file(*dir / "config.json", doc.dump(2));
    const int rc = run_cli("all --config config.json", dir->path());
    if (rc != 0) return {false, "segscope all exited " + std::to_string(rc) + ": " + read_text_file(*dir / "cli.err")};
    std::map<std::string, std::string> h;
    for (const auto& e : fs::directory_iterator(dir->path() / "work" / "manifests")) {
      h[e.path().filename().string()] = sha256_file(e.path());
    }
    hashes.push_back(std::move(h));
  }
  Outcome o;
  o.pass = !hashes[0].empty() && hashes[0] == hashes[1];
  o.detail = std::to_string(hashes[0].size()) + " manifests, " + (o.pass ? "identical" : "DIFFERENT") + " sha256";
  return o;
}

}  // namespace

int main() {
  int failures = 0;
  const auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  };

  report("dispersion_identities", dispersion_identities);
  report("ledger_matches_naive_oracle", ledger_oracle);
  report("meta_regressor_gradient_check", gradient_check_gate);
  const auto chain = run_detection_chain();
  report("filtered_miou_drop", [&] { return filtered_miou_drop(chain); });
  report("unknown_instance_coverage", [&] { return unknown_coverage(chain); });
  report("detection_rate_ratio", [&] { return detection_rate_ratio(chain); });
  report("pca_decorrelation_reconstruction", pca_gate);
  report("tsne_two_blobs", tsne_gate);
  report("retrieval_oracle_and_map", retrieval_gate);
  report("kde_hdr_coverage", kde_hdr_gate);
  report("cli_chain_determinism", determinism_gate);

  std::cout << (failures == 0 ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL (" + std::to_string(failures) + ")") << std::endl;
  return failures == 0 ? 0 : 1;
}
