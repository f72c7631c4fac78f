// Acceptance run: one PASS/FAIL line per criterion. Criteria 7 and 8 train
// the synthetic preset several times and take a while.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <set>

#include "refseg/checkpoint.hpp"
#include "refseg/feature_file.hpp"
#include "refseg/trainer.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "support/mask_oracle.hpp"
#include "support/op_cases.hpp"

using namespace refseg;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

// Pinned tolerances.
constexpr double kGradTolerance = 1e-5;
constexpr std::size_t kGradSeeds = 100;
constexpr double kGradBudgetSeconds = 300.0;
constexpr std::size_t kNormForwards = 1000;
constexpr double kNormTolerance = 1e-6;
constexpr std::size_t kLossBatches = 50;
constexpr double kLossTolerance = 1e-6;
constexpr double kCollapsedTolerance = 1e-12;
constexpr std::size_t kMaskInstances = 100;
constexpr std::size_t kMetricPairs = 50;
constexpr double kMetricTolerance = 1e-9;
constexpr double kMinMiou = 0.55;
constexpr double kBaselineFactor = 3.0;
constexpr double kLearningBudgetSeconds = 30.0 * 60.0;
constexpr double kMinSchemeFloor = 0.05;  // "near zero": mean mIoU of Min at most this
constexpr std::size_t kLossCoordinates = 40;

double since(clk::time_point t) { return std::chrono::duration<double>(clk::now() - t).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

nlohmann::json g_report;

void report(int id, const std::string& title, const Verdict& v) {
  std::printf("[%s] %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, title.c_str(), v.detail.c_str());
  std::fflush(stdout);
  g_report["criteria"][std::to_string(id)] = {{"title", title}, {"pass", v.pass}, {"detail", v.detail}};
}

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

void log(const std::string& line) {
  std::fprintf(stderr, "  %s\n", line.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------- 1

Verdict gradient_suite() {
  const auto start = clk::now();
  double worst = 0.0;
  std::string worst_where;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, std::uint64_t seed, const refseg::testing::GradCheckResult& r) {
    checks += r.coordinates;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_where = name + " seed " + std::to_string(seed) + " " + r.worst;
    }
  };
  for (const auto& op : refseg::testing::op_cases()) {
    for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
      auto c = op.make(seed);
      record(op.name, seed, refseg::testing::grad_check(c.leaves, c.loss, seed));
    }
  }
  const auto cfg = refseg::testing::tiny_config();
  for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
    Model<double> model(cfg, seed);
    refseg::testing::jitter_biases(model, seed);
    const Batch<double> batch{refseg::testing::random_tensor({3, cfg.num_patches(), cfg.feature_dim}, seed, -2, 2),
                              refseg::testing::random_tensor({3, cfg.feature_dim}, seed + 1000, -2, 2)};
    std::vector<Tensor<double>> leaves;
    for (const auto& [name, p] : model.params().entries()) leaves.push_back(p);
    record("c3_loss", seed, refseg::testing::grad_check(leaves, [&] { return c3_loss(batch, model, seed); }, seed,
                                                        kLossCoordinates));
    record("recon_loss", seed, refseg::testing::grad_check(leaves, [&] { return recon_loss(batch, model, seed); },
                                                           seed, kLossCoordinates));
    record("total_loss", seed,
           refseg::testing::grad_check(leaves, [&] { return total_loss(batch, model, 1.0, seed); }, seed,
                                       kLossCoordinates));
  }
  const double secs = since(start);
  g_report["gradient"] = {{"max_rel_error", worst}, {"checks", checks}, {"seconds", secs}};
  Verdict v;
  v.pass = worst < kGradTolerance && secs < kGradBudgetSeconds;
  v.detail = "max rel err " + fmt("%.2e", worst) + " over " + std::to_string(checks) + " coordinates (" +
             std::to_string(refseg::testing::op_cases().size()) + " ops + 3 losses x " + std::to_string(kGradSeeds) +
             " seeds) in " + fmt("%.1f", secs) + " s";
  if (!v.pass) v.detail += "; worst at " + worst_where;
  return v;
}

// ---------------------------------------------------------------- 2

Verdict normalization_invariants() {
  RunConfig cfg = synthetic_preset();
  const std::size_t n = cfg.model.num_patches(), d = cfg.model.feature_dim, k = cfg.model.num_slots();
  double slot_err = 0, fuse_err = 0, z_err = 0, dec_err = 0;
  std::unique_ptr<Model<float>> model;
  for (std::size_t f = 0; f < kNormForwards; ++f) {
    if (f % 100 == 0) model = std::make_unique<Model<float>>(cfg.model, 1000 + f);
    NoGradGuard no_grad;
    const auto x = refseg::testing::random_tensor<float>({n, d}, 2 * f, -2, 2);
    const auto t = refseg::testing::random_tensor<float>({d}, 2 * f + 1, -2, 2);
    const auto found = model->discover(x, f);
    for (std::size_t p = 0; p < n; ++p) {
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += found.a_slot[p * k + j];
      slot_err = std::max(slot_err, std::fabs(s - 1.0));
    }
    const auto fused = fuse(found.entities, t, model->fusion());
    double s = 0, z2 = 0;
    for (std::size_t j = 0; j < k; ++j) s += fused.a_fuse[j];
    for (std::size_t c = 0; c < d; ++c) z2 += double(fused.z[c]) * fused.z[c];
    fuse_err = std::max(fuse_err, std::fabs(s - 1.0));
    z_err = std::max(z_err, std::fabs(std::sqrt(z2) - 1.0));
    if (f % 10 == 0) {
      const auto dec = spatial_broadcast_decode(found.entities, n, model->decoder());
      for (std::size_t p = 0; p < n; ++p) {
        double w = 0;
        for (std::size_t j = 0; j < k; ++j) w += dec.weights[j * n + p];
        dec_err = std::max(dec_err, std::fabs(w - 1.0));
      }
    }
  }
  Verdict v;
  v.pass = slot_err <= kNormTolerance && fuse_err <= kNormTolerance && z_err <= kNormTolerance &&
           dec_err <= kNormTolerance;
  v.detail = std::to_string(kNormForwards) + " f32 forwards; max deviation A_slot rows " + fmt("%.1e", slot_err) +
             ", A_fuse " + fmt("%.1e", fuse_err) + ", |z| " + fmt("%.1e", z_err) + ", decoder weights " +
             fmt("%.1e", dec_err) + " (every 10th)";
  return v;
}

// ---------------------------------------------------------------- 3

Verdict stop_gradient_contract() {
  const auto cfg = refseg::testing::tiny_config();
  bool ok = true;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    // Loss-level contract: the target argument never receives gradient.
    auto text = refseg::testing::random_tensor({4, cfg.feature_dim}, seed);
    text.set_requires_grad(true);
    auto z = Tensor<double>::parameter({4, 4, cfg.feature_dim},
                                       refseg::testing::random_tensor({4, 4, cfg.feature_dim}, seed + 50).to_vector());
    backward(c3_loss_from_embeddings(z, text));
    for (double g : text.grad_or_zeros()) ok = ok && g == 0.0;
    auto x = refseg::testing::random_tensor({2, cfg.num_patches(), cfg.feature_dim}, seed + 100);
    x.set_requires_grad(true);
    auto r = Tensor<double>::parameter(x.shape(), refseg::testing::random_tensor(x.shape(), seed + 150).to_vector());
    backward(recon_loss_from(r, x));
    for (double g : x.grad_or_zeros()) ok = ok && g == 0.0;

    // Whole model: detaching the targets changes no input gradient.
    Model<double> model(cfg, seed);
    Batch<double> batch{refseg::testing::random_tensor({3, cfg.num_patches(), cfg.feature_dim}, seed + 200),
                        refseg::testing::random_tensor({3, cfg.feature_dim}, seed + 300)};
    batch.visual.set_requires_grad(true);
    batch.textual.set_requires_grad(true);
    const Tensor<double> tc(batch.textual.shape(), batch.textual.to_vector());
    const Tensor<double> vc(batch.visual.shape(), batch.visual.to_vector());
    auto grads = [&](bool detached) {
      batch.visual.zero_grad();
      batch.textual.zero_grad();
      const auto found = model.discover(batch.visual, seed);
      const auto zz = fuse_all_pairs(found.entities, batch.textual, model.fusion()).z;
      const auto rec = spatial_broadcast_decode(found.entities, cfg.num_patches(), model.decoder()).reconstruction;
      backward(c3_loss_from_embeddings(zz, detached ? tc : batch.textual) +
               recon_loss_from(rec, detached ? vc : batch.visual));
      return std::make_pair(batch.visual.grad_or_zeros(), batch.textual.grad_or_zeros());
    };
    ok = ok && grads(false) == grads(true);
    ++checked;
  }
  return {ok, "target-branch gradients exactly 0 for c3 (text) and recon (features) on " + std::to_string(checked) +
                  " seeds; full-model input gradients bit-identical with detached targets"};
}

// ---------------------------------------------------------------- 4

double c3_oracle(const std::vector<double>& z, const std::vector<double>& x, std::size_t b, std::size_t d) {
  double loss = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    std::vector<double> logit(b);
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += z[(i * b + j) * d + c] * x[j * d + c];
      logit[i] = s;
    }
    double denom = 0.0;
    for (double l : logit) denom += std::exp(l);
    loss -= std::log(std::exp(logit[j]) / denom);
  }
  return loss / static_cast<double>(b);
}

Verdict loss_oracles() {
  const auto cfg = refseg::testing::tiny_config();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < kLossBatches; ++seed) {
    Model<double> model(cfg, seed);
    const Batch<double> batch{refseg::testing::random_tensor({4, cfg.num_patches(), cfg.feature_dim}, seed, -2, 2),
                              refseg::testing::random_tensor({4, cfg.feature_dim}, seed + 77, -2, 2)};
    const auto found = model.discover(batch.visual, seed);
    const auto z = fuse_all_pairs(found.entities, batch.textual, model.fusion()).z;
    const double oracle = c3_oracle(z.to_vector(), batch.textual.to_vector(), 4, cfg.feature_dim);
    worst = std::max(worst, std::fabs(c3_loss(batch, model, seed).item() - oracle));
  }
  Model<double> model(cfg, 1);
  const Batch<double> single{refseg::testing::random_tensor({1, cfg.num_patches(), cfg.feature_dim}, 5),
                             refseg::testing::random_tensor({1, cfg.feature_dim}, 6)};
  const double b1 = c3_loss(single, model, 3).item();
  bool collapsed_ok = true;
  for (std::size_t b : {2, 4, 8, 16, 32}) {
    const double l = c3_loss_from_embeddings(Tensor<double>({b, b, 8}, 0.25), Tensor<double>({b, 8}, -0.5)).item();
    collapsed_ok = collapsed_ok && std::fabs(l - std::log(static_cast<double>(b))) <= kCollapsedTolerance;
  }
  Verdict v;
  v.pass = worst < kLossTolerance && b1 == 0.0 && collapsed_ok;
  v.detail = "max |c3 - scalar oracle| " + fmt("%.2e", worst) + " on " + std::to_string(kLossBatches) +
             " B=4 batches; B=1 loss " + fmt("%g", b1) + "; collapsed B in {2,4,8,16,32} " +
             (collapsed_ok ? "log B within 1e-12" : "NOT log B");
  return v;
}

// ---------------------------------------------------------------- 5

Verdict inference_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::size_t oracle_ok = 0, avg_ok = 0, mono_ok = 0;
  for (std::size_t t = 0; t < kMaskInstances; ++t) {
    const std::size_t gh = pick(1, 24), gw = pick(1, 24), k = pick(1, 36);
    const std::size_t oh = pick(1, 64), ow = pick(1, 64);
    // Values are stored at f32 as the model produces them.
    std::vector<float> slot(gh * gw * k), fuse(k);
    for (std::size_t p = 0; p < gh * gw; ++p) {
      double s = 0;
      std::vector<double> row(k);
      for (auto& r : row) s += (r = std::exp(4.0 * u(rng)));
      for (std::size_t j = 0; j < k; ++j) slot[p * k + j] = static_cast<float>(row[j] / s);
    }
    double s = 0;
    std::vector<double> fr(k);
    for (auto& r : fr) s += (r = std::exp(4.0 * u(rng)));
    for (std::size_t j = 0; j < k; ++j) fuse[j] = static_cast<float>(fr[j] / s);
    const double tau = 0.05 + 0.9 * u(rng);
    const Tensor<float> ts({gh * gw, k}, slot), tf({k}, fuse);
    const std::vector<double> sd(slot.begin(), slot.end()), fd(fuse.begin(), fuse.end());

    const auto mask = predict_mask(ts, tf, gh, gw, oh, ow, tau);
    oracle_ok += mask == refseg::testing::oracle_mask(sd, fd, k, gh, gw, oh, ow, tau);

    const Tensor<float> uniform({k}, std::vector<float>(k, 1.0f / static_cast<float>(k)));
    avg_ok += predict_mask(ts, uniform, gh, gw, oh, ow, tau, InferenceScheme::Compose) ==
              predict_mask(ts, uniform, gh, gw, oh, ow, tau, InferenceScheme::Avg);

    bool mono = true;
    Mask prev = predict_mask(ts, tf, gh, gw, oh, ow, 0.01);
    for (int step = 1; step < 100; ++step) {
      const Mask next = predict_mask(ts, tf, gh, gw, oh, ow, 0.01 * (step + 1) - 1e-9 * (step == 99));
      for (std::size_t i = 0; i < next.bits.size(); ++i) mono = mono && next.bits[i] <= prev.bits[i];
      prev = next;
    }
    mono_ok += mono;
  }
  Verdict v;
  v.pass = oracle_ok == kMaskInstances && avg_ok == kMaskInstances && mono_ok == kMaskInstances;
  v.detail = "bit-exact vs per-pixel oracle " + std::to_string(oracle_ok) + "/" + std::to_string(kMaskInstances) +
             "; Compose(uniform) == Avg " + std::to_string(avg_ok) + "/" + std::to_string(kMaskInstances) +
             "; tau-monotone " + std::to_string(mono_ok) + "/" + std::to_string(kMaskInstances);
  return v;
}

// ---------------------------------------------------------------- 6

Verdict metric_oracle() {
  std::mt19937_64 rng(99);
  EvalRecord rec;
  double inter_total = 0, union_total = 0, iou_sum = 0, worst = 0;
  std::array<double, 3> hits{};
  for (std::size_t i = 0; i < kMetricPairs; ++i) {
    const std::size_t h = 1 + rng() % 40, w = 1 + rng() % 40;
    std::bernoulli_distribution bp(0.05 + 0.9 * (rng() % 100) / 100.0), bg(0.05 + 0.9 * (rng() % 100) / 100.0);
    Mask p(h, w), g(h, w);
    for (auto& b : p.bits) b = bp(rng);
    for (auto& b : g.bits) b = bg(rng);
    rec.accumulate(p, g);
    double inter = 0, uni = 0;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        inter += p.at(r, c) && g.at(r, c);
        uni += p.at(r, c) || g.at(r, c);
      }
    }
    const double v = uni == 0 ? 1.0 : inter / uni;
    worst = std::max(worst, std::fabs(iou(p, g) - v));
    inter_total += inter;
    union_total += uni;
    iou_sum += v;
    for (std::size_t t = 0; t < 3; ++t) hits[t] += v >= kAccuracyThresholds[t];
  }
  const auto m = rec.finalize();
  worst = std::max({worst, std::fabs(m.ciou - inter_total / union_total), std::fabs(m.miou - iou_sum / kMetricPairs)});
  for (std::size_t t = 0; t < 3; ++t) worst = std::max(worst, std::fabs(m.acc[t] - hits[t] / kMetricPairs));

  // Conventions: 0/0 -> 1, thresholds inclusive.
  const bool empty_ok = iou(Mask(4, 4), Mask(4, 4)) == 1.0;
  Mask gt(1, 10, 1);
  EvalRecord edges;
  for (std::size_t on : {3, 5, 7}) {
    Mask p(1, 10);
    for (std::size_t i = 0; i < on; ++i) p.bits[i] = 1;
    edges.accumulate(p, gt);
  }
  const auto e = edges.finalize();
  const bool inclusive_ok = e.acc[0] == 1.0 && std::fabs(e.acc[1] - 2.0 / 3.0) < 1e-15 &&
                            std::fabs(e.acc[2] - 1.0 / 3.0) < 1e-15;
  Verdict v;
  v.pass = worst < kMetricTolerance && empty_ok && inclusive_ok;
  v.detail = "max deviation from brute force " + fmt("%.1e", worst) + " on " + std::to_string(kMetricPairs) +
             " pairs; 0/0 -> 1 " + (empty_ok ? "ok" : "WRONG") + "; inclusive thresholds " +
             (inclusive_ok ? "ok" : "WRONG");
  return v;
}

// ---------------------------------------------------------------- 7, 8

struct RunResult {
  Metrics metrics;
  std::map<std::string, double> scheme_miou;
  double slot_iou = 0.0;
  double seconds = 0.0;
};

RunResult train_and_score(const RunConfig& cfg, const SyntheticDataset& data, const Split& split,
                          const std::string& label, bool all_schemes) {
  const auto start = clk::now();
  auto trained = train<float>(cfg, data, split, [&](const EpochLog& l) {
    if (l.epoch == 1 || l.epoch % 10 == 0) {
      log(label + " epoch " + std::to_string(l.epoch) + " loss " + fmt("%.4f", l.loss) + " (" + fmt("%.1f", l.seconds) +
          " s)");
    }
  });
  RunResult r;
  const auto att = collect_attention(*trained.model, data, split.eval, cfg.eval_seed);
  r.metrics = score_attention(att, data, {cfg.tau, InferenceScheme::Compose, std::nullopt}).finalize();
  r.seconds = since(start);
  if (all_schemes) {
    for (auto s : {InferenceScheme::Compose, InferenceScheme::Avg, InferenceScheme::Max, InferenceScheme::Min}) {
      r.scheme_miou[to_string(s)] = score_attention(att, data, {cfg.tau, s, std::nullopt}).finalize().miou;
    }
  }
  r.slot_iou = slot_discovery_iou(att, data);
  log(label + " mIoU " + fmt("%.4f", r.metrics.miou) + " slot IoU " + fmt("%.4f", r.slot_iou) + " in " +
      fmt("%.0f", r.seconds) + " s");
  return r;
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct LearningState {
  std::vector<std::uint64_t> seeds;
  std::vector<RunResult> entity;
  std::vector<double> baseline;
  double seconds = 0.0;
};

Verdict learning(const SyntheticDataset& data, const Split& split, LearningState& st) {
  const auto start = clk::now();
  for (auto seed : st.seeds) {
    RunConfig cfg = synthetic_preset();
    cfg.seed = seed;
    cfg.eval_every = 0;
    const auto untrained = initial_state<float>(cfg);
    st.baseline.push_back(evaluate(*untrained.model, data, split.eval, cfg.eval_seed).miou);
    log("seed " + std::to_string(seed) + " untrained mIoU " + fmt("%.4f", st.baseline.back()));
    st.entity.push_back(train_and_score(cfg, data, split, "entity seed " + std::to_string(seed), true));
  }
  st.seconds = since(start);
  std::vector<double> trained;
  for (const auto& r : st.entity) trained.push_back(r.metrics.miou);
  const double m = mean(trained), b = mean(st.baseline);
  g_report["learning"] = {{"trained_miou", trained}, {"baseline_miou", st.baseline}, {"seconds", st.seconds}};
  Verdict v;
  v.pass = m >= kMinMiou && m >= kBaselineFactor * b && st.seconds < kLearningBudgetSeconds;
  v.detail = "mean mIoU " + fmt("%.4f", m) + " (need >= " + fmt("%.2f", kMinMiou) + "), untrained " + fmt("%.4f", b) +
             " (ratio " + fmt("%.1f", b > 0 ? m / b : INFINITY) + "x, need >= 3x), " + std::to_string(st.seeds.size()) +
             " seeds in " + fmt("%.1f", st.seconds / 60.0) + " min (budget 30)";
  return v;
}

Verdict orderings(const SyntheticDataset& data, const Split& split, const LearningState& st) {
  std::vector<double> entity, random, query, t1, compose, avg, mn;
  for (const auto& r : st.entity) {
    entity.push_back(r.metrics.miou);
    compose.push_back(r.scheme_miou.at("compose"));
    avg.push_back(r.scheme_miou.at("avg"));
    mn.push_back(r.scheme_miou.at("min"));
  }
  for (auto seed : st.seeds) {
    RunConfig cfg = synthetic_preset();
    cfg.seed = seed;
    cfg.eval_every = 0;
    auto rc = cfg;
    rc.model.slot_kind = SlotKind::Random;
    random.push_back(train_and_score(rc, data, split, "random seed " + std::to_string(seed), false).metrics.miou);
    auto qc = cfg;
    qc.model.slot_kind = SlotKind::Query;
    query.push_back(train_and_score(qc, data, split, "query seed " + std::to_string(seed), false).metrics.miou);
    auto tc = cfg;
    tc.model.t_iters = 1;
    t1.push_back(train_and_score(tc, data, split, "T=1 seed " + std::to_string(seed), false).metrics.miou);
  }
  const double e = mean(entity), r = mean(random), q = mean(query), t = mean(t1);
  const double c = mean(compose), a = mean(avg), n = mean(mn);
  g_report["orderings"] = {{"entity", entity}, {"random", random}, {"query", query}, {"t1", t1},
                           {"compose", compose}, {"avg", avg}, {"min", mn}};
  const bool slots_ok = e >= r && e >= q;
  const bool scheme_ok = c > a && c > n && n <= kMinSchemeFloor;
  const bool iter_ok = e > t;
  Verdict v;
  v.pass = slots_ok && scheme_ok && iter_ok;
  v.detail = "entity " + fmt("%.4f", e) + " vs random " + fmt("%.4f", r) + ", query " + fmt("%.4f", q) +
             (slots_ok ? " ok" : " VIOLATED") + "; compose " + fmt("%.4f", c) + " vs avg " + fmt("%.4f", a) +
             ", min " + fmt("%.4f", n) + " (floor <= " + fmt("%.2f", kMinSchemeFloor) + ")" +
             (scheme_ok ? " ok" : " VIOLATED") + "; T=6 " + fmt("%.4f", e) + " vs T=1 " + fmt("%.4f", t) +
             (iter_ok ? " ok" : " VIOLATED");
  return v;
}

// ---------------------------------------------------------------- 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Verdict determinism(const fs::path& work) {
  RunConfig cfg = synthetic_preset();
  cfg.data.num_items = 160;
  cfg.epochs = 2;
  cfg.seed = 5;
  const auto data = generate_synthetic(cfg.data);
  const auto split = split_items(data.items.size(), data.spec.seed);
  auto once = [&] {
    auto out = train<float>(cfg, data, split);
    auto json = out.log.back().eval->to_json();
    return std::make_pair(std::move(json), std::move(out));
  };
  auto [json_a, run_a] = once();
  auto [json_b, run_b] = once();
  const bool metrics_ok = json_a == json_b;

  const auto ckpt = work / "determinism.sgck";
  save_checkpoint(ckpt, cfg, *run_a.model, *run_a.optimizer);
  const auto loaded = load_checkpoint<float>(ckpt);
  const auto x = stack_visual<float>(data, split.eval);
  const auto t = stack_textual<float>(data, split.eval);
  bool forward_ok, bytes_ok;
  {
    NoGradGuard no_grad;
    const auto a = run_a.model->discover(x, 11);
    const auto b = loaded.model->discover(x, 11);
    const auto fa = fuse(a.entities, t, run_a.model->fusion());
    const auto fb = fuse(b.entities, t, loaded.model->fusion());
    const auto da = spatial_broadcast_decode(a.entities, cfg.model.num_patches(), run_a.model->decoder());
    const auto db = spatial_broadcast_decode(b.entities, cfg.model.num_patches(), loaded.model->decoder());
    forward_ok = a.entities.to_vector() == b.entities.to_vector() && a.a_slot.to_vector() == b.a_slot.to_vector() &&
                 fa.z.to_vector() == fb.z.to_vector() && fa.a_fuse.to_vector() == fb.a_fuse.to_vector() &&
                 da.reconstruction.to_vector() == db.reconstruction.to_vector();
    bytes_ok = checkpoint_bytes(loaded.config, *loaded.model, *loaded.optimizer) == slurp(ckpt);
  }
  const auto ff = work / "visual.sgft";
  write_feature_file(ff, x, FeatureRole::Visual);
  FeatureRole role = FeatureRole::Textual;
  const auto back = read_feature_tensor<float>(ff, &role);
  const bool feature_ok = back.shape() == x.shape() && back.to_vector() == x.to_vector() && role == FeatureRole::Visual;
  Verdict v;
  v.pass = metrics_ok && forward_ok && bytes_ok && feature_ok;
  v.detail = std::string("metrics JSON ") + (metrics_ok ? "identical" : "DIFFERS") + " across two runs (" + json_a +
             "); checkpoint forward " + (forward_ok ? "bit-identical" : "DIFFERS") + ", re-serialised bytes " +
             (bytes_ok ? "identical" : "DIFFER") + "; feature file round trip " + (feature_ok ? "lossless" : "LOSSY");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refseg acceptance criteria"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  std::size_t num_seeds = 3;
  app.add_option("--work-dir", work_dir, "scratch directory for checkpoints and the JSON report");
  app.add_option("--only", only, "run a subset of criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--seeds", num_seeds, "training seeds for criteria 7 and 8")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  const fs::path work(work_dir);
  fs::create_directories(work);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) > 0; };
  bool all_pass = true;
  auto run = [&](int id, const std::string& title, const std::function<Verdict()>& fn) {
    if (!wanted(id)) return;
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    all_pass = all_pass && v.pass;
    report(id, title, v);
  };

  run(1, "gradient suite", gradient_suite);
  run(2, "normalization invariants", normalization_invariants);
  run(3, "stop-gradient contract", stop_gradient_contract);
  run(4, "loss oracles", loss_oracles);
  run(5, "inference pipeline oracle", inference_oracle);
  run(6, "metric oracle", metric_oracle);
  run(9, "determinism and persistence", [&] { return determinism(work); });

  if (wanted(7) || wanted(8)) {
    const auto preset = synthetic_preset();
    const auto data = generate_synthetic(preset.data);
    const auto split = split_items(data.items.size(), data.spec.seed);
    LearningState st;
    for (std::uint64_t s = 0; s < num_seeds; ++s) st.seeds.push_back(s);
    Verdict learned;
    try {
      learned = learning(data, split, st);
    } catch (const std::exception& e) {
      learned = {false, std::string("error: ") + e.what()};
    }
    if (wanted(7)) {
      all_pass = all_pass && learned.pass;
      report(7, "synthetic end-to-end learning", learned);
    }
    if (wanted(8)) run(8, "ablation orderings", [&] { return orderings(data, split, st); });
  }

  std::ofstream(work / "acceptance.json") << g_report.dump(2) << "\n";
  std::printf("%s\n", all_pass ? "ALL SELECTED CRITERIA PASS" : "SOME CRITERIA FAIL");
  return all_pass ? 0 : 1;
}
