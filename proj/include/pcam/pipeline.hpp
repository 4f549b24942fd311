#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "pcam/checkpoint.hpp"
#include "pcam/cloud_io.hpp"
#include "pcam/config.hpp"
#include "pcam/geometry.hpp"
#include "pcam/losses.hpp"
#include "pcam/metrics.hpp"
#include "pcam/model.hpp"
#include "pcam/synth.hpp"

namespace pcam {

// ---------------------------------------------------------------------------
// Data

inline std::vector<RegistrationPair> materialize(const Dataset& d) {
  std::vector<RegistrationPair> out;
  out.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out.push_back(d[i]);
  return out;
}

inline std::vector<RegistrationPair> make_split(const RunConfig& cfg, Split split) {
  const std::size_t n = split == Split::train ? cfg.data.train_pairs
                        : split == Split::val ? cfg.data.val_pairs
                                              : cfg.data.test_pairs;
  return materialize(Dataset(cfg.data.synth, split, n));
}

inline std::string pair_stem(Split split, std::size_t index) {
  return to_string(split) + "_" + std::to_string(index);
}

/// Writes <split>_<i>_P.xyz, <split>_<i>_Q.xyz and <split>_<i>.meta.
inline void write_pairs(const std::vector<RegistrationPair>& pairs, Split split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto stem = pair_stem(split, i);
    write_cloud(pairs[i].p, dir / (stem + "_P.xyz"));
    write_cloud(pairs[i].q, dir / (stem + "_Q.xyz"));
    write_meta(pairs[i].t_gt, dir / (stem + ".meta"));
  }
}

/// Reads consecutive pairs <split>_0, <split>_1, ... until one is missing.
inline std::vector<RegistrationPair> read_pairs(const std::filesystem::path& dir, Split split) {
  std::vector<RegistrationPair> out;
  for (std::size_t i = 0;; ++i) {
    const auto stem = pair_stem(split, i);
    if (!std::filesystem::exists(dir / (stem + "_P.xyz"))) break;
    RegistrationPair p;
    p.p = read_cloud(dir / (stem + "_P.xyz"));
    p.q = read_cloud(dir / (stem + "_Q.xyz"));
    p.t_gt = read_meta(dir / (stem + ".meta"));
    p.seed = i;
    out.push_back(std::move(p));
  }
  if (out.empty()) throw IoError("no " + to_string(split) + " pairs found in " + dir.string());
  return out;
}

// ---------------------------------------------------------------------------
// Losses on one pair

inline LossBreakdown pair_losses(const Model& model, const RegistrationPair& pair, const TrainingConfig& tc) {
  const PairForward f = model.forward(pair.p, pair.q);
  LossComponents parts;
  if (tc.losses.ca || tc.losses.ga) {
    const CorrespondenceSet c = build_correspondences(pair.p, pair.q, pair.t_gt);
    if (tc.losses.ca) parts.ca = loss_ca(f.match.attention, c, pair.p.size(), pair.q.size());
    if (tc.losses.ga) parts.ga = loss_ga(f.match, c, pair.p, pair.q);
  }
  if (tc.losses.cc) parts.cc = loss_cc(f.scores, pair.p, pair.q, f.match, pair.t_gt, tc.kappa);
  if (tc.losses.gc) parts.gc = loss_gc(f.scores, pair.p, pair.q, f.match, pair.t_gt);
  return total_loss(tc.losses, parts);
}

// ---------------------------------------------------------------------------
// Registration

/// Network outputs needed to estimate a transform: the image of every point
/// of P and its confidence.
struct Prediction {
  PointCloud mapped;
  std::vector<double> weights;
};

inline Prediction predict(const Model& model, const PointCloud& p, const PointCloud& q) {
  if (p.size() < model.min_points() || q.size() < model.min_points()) {
    throw ShapeError("clouds need at least " + std::to_string(model.min_points()) + " points");
  }
  ad::NoGradGuard no_grad;
  const PairForward f = model.forward(p, q);
  Prediction out;
  out.mapped = cloud_from_tensor(f.match.mapped_pq);
  out.weights.assign(f.scores.w_p.values().begin(), f.scores.w_p.values().end());
  return out;
}

struct Registration {
  RigidTransform transform;
  RigidTransform procrustes_transform;  // before ICP
  std::vector<double> weights;          // after the hard threshold
  bool refined = false;
};

/// phi, weighted Procrustes, then optional ICP. Throws DegenerateWeightsError
/// or RankDeficiencyError when the kept pairs cannot fix a motion.
inline Registration estimate(const Prediction& pred, const PointCloud& p, const PointCloud& q, double tau,
                             bool icp, const IcpOptions& icp_options) {
  Registration r;
  r.weights = hard_threshold(pred.weights, tau);
  r.procrustes_transform = weighted_procrustes(p, pred.mapped, r.weights);
  r.transform = r.procrustes_transform;
  if (icp) {
    r.transform = icp_refine(p, q, r.procrustes_transform, icp_options).transform;
    r.refined = true;
  }
  return r;
}

inline Registration register_clouds(const Model& model, const PointCloud& p, const PointCloud& q, double tau,
                                    bool icp, const IcpOptions& icp_options) {
  return estimate(predict(model, p, q), p, q, tau, icp, icp_options);
}

struct MatchedPair {
  std::size_t index;
  Vec3 source;
  Vec3 target;
  double weight;
};

/// The n matches with the highest confidence, best first; ties keep index order.
inline std::vector<MatchedPair> top_pairs(const Prediction& pred, const PointCloud& p, std::size_t n) {
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pred.weights[a] > pred.weights[b]; });
  order.resize(std::min(n, order.size()));
  std::vector<MatchedPair> out;
  for (auto i : order) out.push_back({i, p[i], pred.mapped[i], pred.weights[i]});
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// The 12 transform numbers joined by commas, usable as one key=value token.
inline std::string transform_token(const RigidTransform& t) {
  std::string s = format_transform(t);
  std::replace(s.begin(), s.end(), ' ', ',');
  return s;
}

struct PairOutcome {
  std::uint64_t seed = 0;
  RegistrationResult result;
  RigidTransform truth;
  bool failed = false;  // degenerate weights or rank-deficient pairs
};

struct EvalReport {
  double tau = 0.0;
  double te_max = 0.0;
  double re_max = 0.0;
  RecallSummary summary;
  RmseMae errors;
  std::vector<PairOutcome> pairs;

  /// One key=value record for the summary plus one per pair.
  std::string to_records() const {
    using detail::format_double;
    std::ostringstream os;
    os << "event=eval pairs=" << summary.count << " tau=" << format_double(tau) << " te_max=" << format_double(te_max)
       << " re_max_deg=" << format_double(rad2deg(re_max)) << " recall=" << format_double(summary.recall)
       << " te_all=" << format_double(summary.te_all) << " re_all_deg=" << format_double(rad2deg(summary.re_all))
       << " te=" << format_double(summary.te) << " re_deg=" << format_double(rad2deg(summary.re))
       << " rmse_r_deg=" << format_double(errors.rmse_r_deg) << " mae_r_deg=" << format_double(errors.mae_r_deg)
       << " rmse_t=" << format_double(errors.rmse_t) << " mae_t=" << format_double(errors.mae_t) << '\n';
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const auto& o = pairs[i];
      os << "event=pair index=" << i << " seed=" << o.seed << " te=" << format_double(o.result.te)
         << " re_deg=" << format_double(rad2deg(o.result.re)) << " success=" << (o.result.success ? 1 : 0)
         << " failed=" << (o.failed ? 1 : 0) << " transform=" << transform_token(o.result.transform) << '\n';
    }
    return os.str();
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed;
    os << "pairs " << summary.count << ", thresholds TE <= " << std::setprecision(3) << te_max << ", RE <= "
       << std::setprecision(2) << rad2deg(re_max) << " deg, tau " << std::setprecision(2) << tau << '\n';
    os << "  recall   TE(all)  RE(all)      TE       RE\n";
    os << std::setprecision(4) << std::setw(8) << summary.recall * 100.0 << std::setw(9) << summary.te_all
       << std::setw(9) << rad2deg(summary.re_all) << std::setw(8) << summary.te << std::setw(9) << rad2deg(summary.re)
       << '\n';
    os << "  RMSE(R) deg " << errors.rmse_r_deg << "  MAE(R) deg " << errors.mae_r_deg << "  RMSE(t) " << errors.rmse_t
       << "  MAE(t) " << errors.mae_t << '\n';
    return os.str();
  }
};

/// Runs fn(i) for i in [0, n) on `workers` threads; fn writes to slot i only.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::vector<Prediction> predict_all(const Model& model, const std::vector<RegistrationPair>& pairs,
                                           std::size_t workers) {
  std::vector<Prediction> out(pairs.size());
  parallel_for(pairs.size(), workers, [&](std::size_t i) { out[i] = predict(model, pairs[i].p, pairs[i].q); });
  return out;
}

/// A pair whose transform cannot be estimated counts as a failed
/// registration scored at the identity.
inline EvalReport evaluate_predictions(const std::vector<Prediction>& preds, const std::vector<RegistrationPair>& pairs,
                                       double tau, const EvalConfig& ec) {
  if (pairs.empty()) throw ParameterError("evaluate: empty dataset");
  EvalReport rep;
  rep.tau = tau;
  rep.te_max = ec.te_max;
  rep.re_max = ec.re_max;
  rep.pairs.resize(pairs.size());
  parallel_for(pairs.size(), ec.workers, [&](std::size_t i) {
    auto& o = rep.pairs[i];
    o.seed = pairs[i].seed;
    o.truth = pairs[i].t_gt;
    RigidTransform est;
    try {
      est = estimate(preds[i], pairs[i].p, pairs[i].q, tau, ec.icp, ec.icp_options).transform;
    } catch (const DegenerateWeightsError&) {
      o.failed = true;
    } catch (const RankDeficiencyError&) {
      o.failed = true;
    }
    o.result = score_registration(est, o.truth, ec.te_max, ec.re_max);
    if (o.failed) o.result.success = false;
  });
  std::vector<RegistrationResult> results;
  std::vector<RigidTransform> est, truth;
  for (const auto& o : rep.pairs) {
    results.push_back(o.result);
    est.push_back(o.result.transform);
    truth.push_back(o.truth);
  }
  rep.summary = recall(results, ec.te_max, ec.re_max);
  // recall() re-derives success from the thresholds; failures stay failures.
  std::size_t ok = 0;
  for (const auto& o : rep.pairs) ok += o.result.success ? 1 : 0;
  if (ok != rep.summary.successes) {
    rep.summary.successes = ok;
    rep.summary.recall = static_cast<double>(ok) / static_cast<double>(rep.pairs.size());
    double te = 0.0, re = 0.0;
    for (const auto& o : rep.pairs) {
      if (o.result.success) {
        te += o.result.te;
        re += o.result.re;
      }
    }
    rep.summary.te = ok ? te / static_cast<double>(ok) : std::nan("");
    rep.summary.re = ok ? re / static_cast<double>(ok) : std::nan("");
  }
  rep.errors = rmse_mae_rotation_translation(est, truth);
  return rep;
}

inline EvalReport evaluate(const Model& model, const std::vector<RegistrationPair>& pairs, double tau,
                           const EvalConfig& ec) {
  if (pairs.empty()) throw ParameterError("evaluate: empty dataset");
  return evaluate_predictions(predict_all(model, pairs, ec.workers), pairs, tau, ec);
}

/// Best tau on the grid by recall, then by lower mean RE, then smaller tau.
inline double tune_tau(const std::vector<Prediction>& preds, const std::vector<RegistrationPair>& pairs,
                       const EvalConfig& ec) {
  double best_tau = ec.tau_grid.front();
  double best_recall = -1.0, best_re = 0.0;
  for (double tau : ec.tau_grid) {
    const auto rep = evaluate_predictions(preds, pairs, tau, ec);
    const bool better = rep.summary.recall > best_recall ||
                        (rep.summary.recall == best_recall &&
                         (rep.summary.re_all < best_re || (rep.summary.re_all == best_re && tau < best_tau)));
    if (better) {
      best_tau = tau;
      best_recall = rep.summary.recall;
      best_re = rep.summary.re_all;
    }
  }
  return best_tau;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double l_ca = 0.0, l_cc = 0.0, l_gc = 0.0, l_ga = 0.0, total = 0.0;
  double val_recall = 0.0;

  std::string to_record() const {
    using detail::format_double;
    std::ostringstream os;
    os << "event=epoch epoch=" << epoch << " lr=" << format_double(learning_rate) << " l_ca=" << format_double(l_ca)
       << " l_cc=" << format_double(l_cc) << " l_gc=" << format_double(l_gc) << " l_ga=" << format_double(l_ga)
       << " total=" << format_double(total) << " val_recall=" << format_double(val_recall);
    return os.str();
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::unique_ptr<Model> model;  // holds the checkpoint's (32-bit) weights
  std::vector<EpochRecord> history;
  double first_step_total = 0.0;
};

inline double learning_rate_at(const RunConfig& cfg, std::size_t epoch0) {
  double lr = cfg.optimizer.learning_rate;
  for (auto d : cfg.training.lr_decay_epochs) {
    if (epoch0 >= d) lr *= cfg.training.lr_decay_factor;
  }
  return lr;
}

/// Trains on the configured synthetic train split, validating on the val
/// split after every epoch. `train_pairs`/`val_pairs` override the
/// generated splits when nonempty.
inline TrainResult train(const RunConfig& cfg, std::ostream* log = nullptr,
                         std::vector<RegistrationPair> train_pairs = {},
                         std::vector<RegistrationPair> val_pairs = {}) {
  cfg.validate();
  if (train_pairs.empty()) train_pairs = make_split(cfg, Split::train);
  if (val_pairs.empty() && cfg.data.val_pairs > 0) val_pairs = make_split(cfg, Split::val);

  TrainResult res;
  res.model = std::make_unique<Model>(cfg.model, cfg.training.seed);
  Model& model = *res.model;
  for (const auto& pr : train_pairs) {
    if (pr.p.size() < model.min_points() || pr.q.size() < model.min_points()) {
      throw ConfigError("training pair smaller than the neighborhood size");
    }
  }
  auto& params = model.parameters().all();
  OptimizerConfig opt = cfg.optimizer;
  Rng order_rng(mix_seed(cfg.training.seed ^ 0x9e3779b97f4a7c15ULL));
  std::vector<std::size_t> order(train_pairs.size());
  bool first = true;

  for (std::size_t e = 0; e < cfg.training.epochs; ++e) {
    opt.learning_rate = learning_rate_at(cfg, e);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.learning_rate = opt.learning_rate;
    for (auto idx : order) {
      const auto& pair = train_pairs[idx];
      LossBreakdown b;
      try {
        model.parameters().zero_grad();
        b = pair_losses(model, pair, cfg.training);
        ad::backward(b.total_tensor);
      } catch (const NumericError& err) {
        if (log) *log << "event=error epoch=" << e + 1 << " pair_seed=" << pair.seed << " what=\"" << err.what() << "\"\n";
        throw NumericError("non-finite value while training on pair seed " + std::to_string(pair.seed) + ": " +
                           err.what());
      }
      if (first) {
        res.first_step_total = b.total;
        first = false;
      }
      adamw_step(params, opt);
      rec.l_ca += b.l_ca;
      rec.l_cc += b.l_cc;
      rec.l_gc += b.l_gc;
      rec.l_ga += b.l_ga;
      rec.total += b.total;
    }
    const double n = static_cast<double>(train_pairs.size());
    rec.l_ca /= n;
    rec.l_cc /= n;
    rec.l_gc /= n;
    rec.l_ga /= n;
    rec.total /= n;
    if (!val_pairs.empty()) rec.val_recall = evaluate(model, val_pairs, 0.0, cfg.eval).summary.recall;
    if (log) *log << rec.to_record() << '\n';
    res.history.push_back(rec);
  }
  model.parameters().zero_grad();
  round_to_float32(model.parameters());

  double tau = 0.0;
  if (!val_pairs.empty()) tau = tune_tau(predict_all(model, val_pairs, cfg.eval.workers), val_pairs, cfg.eval);
  if (log) *log << "event=tau tau=" << detail::format_double(tau) << '\n';
  res.checkpoint = Checkpoint::capture(model, cfg, cfg.training.epochs, tau);
  return res;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  CombineMode combine = CombineMode::product;
  MapMode map = MapMode::soft;
  LossFlags losses;

  std::string name() const { return to_string(combine) + "/" + to_string(map) + "/" + losses.to_string(); }

  /// "combine/map[/losses]", e.g. "last_layer/sparse" or "product/soft/ca+ga+cc+gc".
  static AblationVariant parse(const std::string& s) {
    AblationVariant v;
    const auto a = s.find('/');
    if (a == std::string::npos) throw ConfigError("variant '" + s + "' must look like combine/map[/losses]");
    const auto b = s.find('/', a + 1);
    v.combine = parse_combine_mode(s.substr(0, a));
    v.map = parse_map_mode(s.substr(a + 1, b == std::string::npos ? std::string::npos : b - a - 1));
    if (b != std::string::npos) v.losses = LossFlags::parse(s.substr(b + 1));
    return v;
  }
};

struct AblationRow {
  AblationVariant variant;
  std::uint64_t seed = 0;
  RecallSummary summary;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  /// Mean recall of a variant over all its seeds.
  double mean_recall(const std::string& variant_name) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant.name() == variant_name) {
        s += r.summary.recall;
        ++n;
      }
    }
    if (n == 0) throw ParameterError("no rows for variant " + variant_name);
    return s / static_cast<double>(n);
  }

  std::string to_records() const {
    using detail::format_double;
    std::ostringstream os;
    for (const auto& r : rows) {
      os << "event=ablation variant=" << r.variant.name() << " seed=" << r.seed
         << " recall=" << format_double(r.summary.recall) << " te_all=" << format_double(r.summary.te_all)
         << " re_all_deg=" << format_double(rad2deg(r.summary.re_all)) << " te=" << format_double(r.summary.te)
         << " re_deg=" << format_double(rad2deg(r.summary.re)) << '\n';
    }
    return os.str();
  }

  /// One line per variant: mean over seeds of the five registration columns.
  std::string to_table() const {
    std::vector<std::string> names;
    for (const auto& r : rows) {
      if (std::find(names.begin(), names.end(), r.variant.name()) == names.end()) names.push_back(r.variant.name());
    }
    std::ostringstream os;
    os << std::fixed << std::left << std::setw(32) << "variant" << std::right << std::setw(8) << "recall"
       << std::setw(9) << "TE(all)" << std::setw(9) << "RE(all)" << std::setw(8) << "TE" << std::setw(9) << "RE"
       << std::setw(7) << "seeds" << '\n';
    for (const auto& name : names) {
      double rc = 0, tea = 0, rea = 0, te = 0, re = 0;
      std::size_t n = 0, ok = 0;
      for (const auto& r : rows) {
        if (r.variant.name() != name) continue;
        ++n;
        rc += r.summary.recall;
        tea += r.summary.te_all;
        rea += rad2deg(r.summary.re_all);
        if (r.summary.successes) {
          ++ok;
          te += r.summary.te;
          re += rad2deg(r.summary.re);
        }
      }
      os << std::left << std::setw(32) << name << std::right << std::setprecision(4) << std::setw(8)
         << 100.0 * rc / n << std::setw(9) << tea / n << std::setw(9) << rea / n << std::setw(8)
         << (ok ? te / ok : std::nan("")) << std::setw(9) << (ok ? re / ok : std::nan("")) << std::setw(7) << n
         << '\n';
    }
    return os.str();
  }
};

/// Trains every variant for every seed on the same data and evaluates on the
/// validation split without thresholding (tau = 0).
inline AblationReport ablate(const RunConfig& base, const std::vector<AblationVariant>& variants,
                             const std::vector<std::uint64_t>& seeds, std::ostream* log = nullptr) {
  if (variants.empty() || seeds.empty()) throw ConfigError("ablation needs at least one variant and one seed");
  base.validate();
  const auto train_pairs = make_split(base, Split::train);
  const auto val_pairs = make_split(base, Split::val);
  AblationReport rep;
  for (const auto& v : variants) {
    for (auto seed : seeds) {
      RunConfig cfg = base;
      cfg.model.matching.combine = v.combine;
      cfg.model.matching.map = v.map;
      cfg.training.losses = v.losses;
      cfg.training.seed = seed;
      cfg.validate();
      if (log) *log << "event=ablation_start variant=" << v.name() << " seed=" << seed << '\n';
      RunConfig no_val = cfg;
      no_val.data.val_pairs = 0;
      auto trained = train(no_val, log, train_pairs, {});
      const auto er = evaluate(*trained.model, val_pairs, 0.0, cfg.eval);
      rep.rows.push_back({v, seed, er.summary});
    }
  }
  return rep;
}

}  // namespace pcam
