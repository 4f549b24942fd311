#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <sstream>

#include "support.hpp"
#include "tiny.hpp"

using namespace pcam;
using namespace pcam::testing;
namespace fs = std::filesystem;

namespace {

std::vector<RegistrationPair> full_overlap_pairs(const RunConfig& cfg, std::size_t n) {
  auto synth = cfg.data.synth;
  synth.overlap_target = 1.0;
  synth.noise_sigma = 0.0;
  return materialize(Dataset(synth, Split::train, n));
}

double mean_loss(const Model& m, const std::vector<RegistrationPair>& pairs, const TrainingConfig& tc) {
  double s = 0.0;
  for (const auto& p : pairs) s += pair_losses(m, p, tc).total;
  return s / static_cast<double>(pairs.size());
}

std::map<std::string, std::string> fields(const std::string& line) {
  std::map<std::string, std::string> out;
  std::istringstream in(line);
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq != std::string::npos) out[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return out;
}

}  // namespace

TEST(Train, OneEpochLowersTheLoss) {
  auto cfg = tiny_config();
  cfg.data.val_pairs = 0;
  const auto pairs = full_overlap_pairs(cfg, 5);
  const Model init(cfg.model, cfg.training.seed);
  const double before = mean_loss(init, pairs, cfg.training);
  const auto res = train(cfg, nullptr, pairs, {});
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_TRUE(std::isfinite(res.first_step_total));
  EXPECT_LT(mean_loss(*res.model, pairs, cfg.training), before);
}

TEST(Train, IdenticalSeedsGiveIdenticalCheckpoints) {
  const auto cfg = tiny_config();
  std::ostringstream log_a, log_b;
  const auto a = train(cfg, &log_a), b = train(cfg, &log_b);
  EXPECT_EQ(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
  EXPECT_EQ(log_a.str(), log_b.str());
  auto other = cfg;
  other.training.seed = 1;
  EXPECT_NE(train(other).checkpoint.to_bytes(), a.checkpoint.to_bytes());
}

TEST(Train, ResumedCheckpointEvaluatesIdentically) {
  const auto cfg = tiny_config();
  const auto res = train(cfg);
  const auto dir = fs::temp_directory_path() / "pcam_pipeline";
  fs::create_directories(dir);
  res.checkpoint.save(dir / "ckpt.bin");
  const auto model = Checkpoint::load(dir / "ckpt.bin").make_model();
  const auto test = make_split(cfg, Split::test);
  const auto r1 = evaluate(*model, test, res.checkpoint.tau, cfg.eval);
  const auto r2 = evaluate(*model, test, res.checkpoint.tau, cfg.eval);
  const auto r0 = evaluate(*res.model, test, res.checkpoint.tau, cfg.eval);
  EXPECT_EQ(r1.to_records(), r2.to_records());
  EXPECT_EQ(r0.to_records(), r1.to_records());
}

TEST(Train, LogRecordsPerEpoch) {
  auto cfg = tiny_config();
  cfg.training.epochs = 2;
  std::ostringstream log;
  const auto res = train(cfg, &log);
  ASSERT_EQ(res.history.size(), 2u);
  std::istringstream in(log.str());
  std::string line;
  std::size_t epochs = 0, taus = 0;
  while (std::getline(in, line)) {
    const auto f = fields(line);
    if (f.at("event") == "epoch") {
      ++epochs;
      EXPECT_EQ(std::stod(f.at("total")), res.history[epochs - 1].total);
    }
    taus += f.at("event") == "tau";
  }
  EXPECT_EQ(epochs, 2u);
  EXPECT_EQ(taus, 1u);
}

TEST(Evaluate, TauOneFailsEveryPair) {
  const auto cfg = tiny_config();
  const Model model(cfg.model, 0);
  const auto test = make_split(cfg, Split::test);
  const auto pred = predict(model, test[0].p, test[0].q);
  EXPECT_THROW(estimate(pred, test[0].p, test[0].q, 1.0, false, {}), DegenerateWeightsError);
  const auto rep = evaluate(model, test, 1.0, cfg.eval);
  EXPECT_EQ(rep.summary.recall, 0.0);
  for (const auto& o : rep.pairs) {
    EXPECT_TRUE(o.failed);
    EXPECT_EQ(o.result.transform.to_array(), RigidTransform::identity().to_array());
  }
}

TEST(Evaluate, PerfectPredictionsGiveFullRecall) {
  const auto cfg = tiny_config();
  const auto test = make_split(cfg, Split::test);
  std::vector<Prediction> preds;
  for (const auto& pr : test) preds.push_back({apply_transform(pr.p, pr.t_gt), std::vector<double>(pr.p.size(), 1.0)});
  const auto rep = evaluate_predictions(preds, test, 0.5, cfg.eval);
  EXPECT_EQ(rep.summary.recall, 1.0);
  EXPECT_LT(rep.summary.te_all, 1e-9);
  EXPECT_LT(rep.errors.rmse_r_deg, 1e-6);
}

TEST(Evaluate, ReportTotalsMatchPerPairDump) {
  const auto cfg = tiny_config();
  const Model model(cfg.model, 2);
  auto test = make_split(cfg, Split::test);
  std::vector<Prediction> preds;
  Rng rng(3);
  for (const auto& pr : test) {
    // Perturbed perfect maps so that some pairs succeed and some fail.
    auto mapped = apply_transform(pr.p, pr.t_gt);
    std::vector<Vec3> pts(mapped.begin(), mapped.end());
    const double scale = rng.uniform(0.0, 0.6);
    for (auto& x : pts) x += scale * Vec3(rng.normal(), rng.normal(), rng.normal());
    preds.push_back({PointCloud(pts), std::vector<double>(pr.p.size(), 1.0)});
  }
  const auto rep = evaluate_predictions(preds, test, 0.0, cfg.eval);
  std::istringstream in(rep.to_records());
  std::string line;
  std::getline(in, line);
  const auto head = fields(line);
  double te_all = 0, re_all = 0, te = 0, re = 0;
  std::size_t n = 0, ok = 0;
  while (std::getline(in, line)) {
    const auto f = fields(line);
    ASSERT_EQ(f.at("event"), "pair");
    const double pte = std::stod(f.at("te")), pre = std::stod(f.at("re_deg"));
    ++n;
    te_all += pte;
    re_all += pre;
    if (f.at("success") == "1") {
      ++ok;
      te += pte;
      re += pre;
    }
  }
  ASSERT_EQ(n, test.size());
  EXPECT_EQ(std::stoul(head.at("pairs")), n);
  EXPECT_NEAR(std::stod(head.at("recall")), static_cast<double>(ok) / n, 1e-15);
  EXPECT_NEAR(std::stod(head.at("te_all")), te_all / n, 1e-12);
  EXPECT_NEAR(std::stod(head.at("re_all_deg")), re_all / n, 1e-9);
  if (ok) {
    EXPECT_NEAR(std::stod(head.at("te")), te / ok, 1e-12);
    EXPECT_NEAR(std::stod(head.at("re_deg")), re / ok, 1e-9);
  }
}

TEST(Evaluate, WorkersDoNotChangeTheReport) {
  auto cfg = tiny_config();
  const Model model(cfg.model, 4);
  const auto test = make_split(cfg, Split::test);
  const auto one = evaluate(model, test, 0.0, cfg.eval);
  cfg.eval.workers = 3;
  EXPECT_EQ(evaluate(model, test, 0.0, cfg.eval).to_records(), one.to_records());
}

TEST(Evaluate, OneLayerProductEqualsLastLayer) {
  auto cfg = tiny_config();
  cfg.model.matching.channels = {3, 8};
  const auto prod = train(cfg);
  cfg.model.matching.combine = CombineMode::last_layer;
  const auto last = train(cfg);
  const auto test = make_split(cfg, Split::test);
  EXPECT_EQ(evaluate(*prod.model, test, 0.0, cfg.eval).to_records(),
            evaluate(*last.model, test, 0.0, cfg.eval).to_records());
}

TEST(Data, WriteReadPairs) {
  const auto cfg = tiny_config();
  const auto dir = fs::temp_directory_path() / "pcam_pairs";
  fs::remove_all(dir);
  const auto val = make_split(cfg, Split::val);
  write_pairs(val, Split::val, dir);
  const auto back = read_pairs(dir, Split::val);
  ASSERT_EQ(back.size(), val.size());
  for (std::size_t i = 0; i < val.size(); ++i) {
    EXPECT_EQ(back[i].p, val[i].p);
    EXPECT_EQ(back[i].q, val[i].q);
    EXPECT_EQ(back[i].t_gt.to_array(), val[i].t_gt.to_array());
  }
  EXPECT_THROW(read_pairs(dir, Split::test), IoError);
}

TEST(TuneTau, PrefersHigherRecallThenSmallerTau) {
  const auto cfg = tiny_config();
  const auto test = make_split(cfg, Split::test);
  std::vector<Prediction> preds;
  for (const auto& pr : test) preds.push_back({apply_transform(pr.p, pr.t_gt), std::vector<double>(pr.p.size(), 0.7)});
  // Every tau below 0.7 keeps all pairs and gives the same result.
  EXPECT_EQ(tune_tau(preds, test, cfg.eval), 0.0);
}

TEST(Ablation, VariantParsing) {
  const auto v = AblationVariant::parse("last_layer/sparse");
  EXPECT_EQ(v.combine, CombineMode::last_layer);
  EXPECT_EQ(v.map, MapMode::sparse);
  EXPECT_EQ(v.losses.to_string(), "ca+cc+gc");
  EXPECT_EQ(AblationVariant::parse("product/soft/ca+ga").name(), "product/soft/ca+ga");
  EXPECT_THROW(AblationVariant::parse("product"), ConfigError);
}

TEST(Ablation, ReportsEveryVariantAndSeed) {
  auto cfg = tiny_config();
  const auto rep = ablate(cfg, {AblationVariant::parse("product/soft"), AblationVariant::parse("no_intermediate/soft")},
                          {0, 1});
  EXPECT_EQ(rep.rows.size(), 4u);
  const double m = rep.mean_recall("product/soft/ca+cc+gc");
  EXPECT_GE(m, 0.0);
  EXPECT_LE(m, 1.0);
  EXPECT_NE(rep.to_table().find("no_intermediate/soft"), std::string::npos);
}

TEST(Train, SelfPairsMakeGlobalAttentionDiagonal) {
  auto cfg = tiny_config();
  cfg.data.val_pairs = 0;
  std::vector<std::size_t> first(64);
  for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
  std::vector<RegistrationPair> pairs;
  for (std::uint64_t s = 0; s < 5; ++s) {
    RegistrationPair pr;
    pr.seed = s;
    pr.p = pr.q = generate_scene(cfg.data.synth, s).select(first);
    pr.mask_p.assign(pr.p.size(), true);
    pr.mask_q.assign(pr.q.size(), true);
    pairs.push_back(pr);
  }
  const auto res = train(cfg, nullptr, pairs, {});
  for (const auto& pr : pairs) {
    const auto f = res.model->forward(pr.p, pr.q);
    const auto& g = f.match.attention.global_pq;
    const std::size_t n = pr.p.size();
    double diag = 0.0, off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) (i == j ? diag : off) += g.at(i, j);
    EXPECT_GT(diag / static_cast<double>(n), off / static_cast<double>(n * (n - 1)));
  }
}
