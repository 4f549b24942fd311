// Command-line front end: train, register, eval, ablate, gen-data.
//
// Exit codes: 0 success, 2 registration failure, 3 I/O or parse error,
// 4 configuration error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pcam.hpp"

namespace fs = std::filesystem;
using namespace pcam;

namespace {

constexpr int kExitRegistration = 2;
constexpr int kExitIo = 3;
constexpr int kExitConfig = 4;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;  // key=value

  void attach(CLI::App* app, const char* seed_help) {
    app->add_option("--config", config_path, "configuration file (key = value lines)");
    app->add_option("--seed", seed, seed_help);
    app->add_option("--out", out_dir, "output directory");
    app->add_option("--set", overrides, "override one configuration key, key=value (repeatable)");
  }

  RunConfig build(RunConfig base = {}) const {
    RunConfig cfg = config_path.empty() ? base : RunConfig::load(config_path, base);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
  }

  fs::path out() const {
    fs::create_directories(out_dir);
    return out_dir;
  }
};

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

/// <dir>/<stem>_P.xyz -> <dir>/<stem>.meta
fs::path meta_for(const fs::path& p_path) {
  std::string name = p_path.filename().string();
  const std::string suffix = "_P.xyz";
  if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return p_path.parent_path() / (name.substr(0, name.size() - suffix.size()) + ".meta");
  }
  return {};
}

int run_train(const CommonOptions& o) {
  RunConfig cfg = o.build();
  if (o.seed) cfg.training.seed = *o.seed;
  cfg.validate();
  const fs::path out = o.out();
  open_out(out / "config.txt") << cfg.to_text();
  auto log = open_out(out / "train.log");
  struct Both : std::streambuf {
    std::streambuf* a;
    std::streambuf* b;
    int overflow(int c) override {
      if (traits_type::eq_int_type(c, traits_type::eof())) return traits_type::not_eof(c);
      a->sputc(static_cast<char>(c));
      b->sputc(static_cast<char>(c));
      return c;
    }
  } both;
  both.a = std::cout.rdbuf();
  both.b = log.rdbuf();
  std::ostream tee(&both);
  auto res = train(cfg, &tee);
  res.checkpoint.save(out / "checkpoint.bin");
  std::cout << "event=saved path=" << (out / "checkpoint.bin").string() << '\n';
  return 0;
}

struct RegisterOptions {
  std::string checkpoint;
  std::string p_path, q_path, meta_path;
  std::optional<double> tau;
  bool icp = false;
  std::size_t dump_pairs = 0;
  std::string map;
};

int run_register(const CommonOptions& o, const RegisterOptions& r) {
  Checkpoint ck = Checkpoint::load(r.checkpoint);
  RunConfig cfg = o.build(ck.config);
  if (!r.map.empty()) cfg.model.matching.map = parse_map_mode(r.map);
  cfg.validate();
  Model model(cfg.model, cfg.training.seed);
  ck.apply_to(model);
  const double tau = r.tau.value_or(ck.tau);
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("--tau must lie in [0, 1]");

  const PointCloud p = read_cloud(r.p_path);
  const PointCloud q = read_cloud(r.q_path);
  if (p.size() < model.min_points() || q.size() < model.min_points()) {
    throw ConfigError("clouds need at least " + std::to_string(model.min_points()) + " points for this model");
  }
  const Prediction pred = predict(model, p, q);
  Registration reg;
  try {
    reg = estimate(pred, p, q, tau, r.icp || cfg.eval.icp, cfg.eval.icp_options);
  } catch (const DegenerateWeightsError& e) {
    std::cout << "event=register status=failed reason=\"" << e.what() << "\"\n";
    return kExitRegistration;
  } catch (const RankDeficiencyError& e) {
    std::cout << "event=register status=failed reason=\"" << e.what() << "\"\n";
    return kExitRegistration;
  }
  std::cout << format_transform(reg.transform) << '\n';
  std::size_t kept = 0;
  for (double w : reg.weights) kept += w > 0.0 ? 1 : 0;
  std::cout << "event=register status=ok tau=" << detail::format_double(tau) << " kept=" << kept
            << " icp=" << (reg.refined ? 1 : 0) << '\n';

  const fs::path meta = r.meta_path.empty() ? meta_for(r.p_path) : fs::path(r.meta_path);
  if (!meta.empty() && fs::exists(meta)) {
    const RigidTransform gt = read_meta(meta);
    const auto s = score_registration(reg.transform, gt, cfg.eval.te_max, cfg.eval.re_max);
    std::cout << "event=metrics te=" << detail::format_double(s.te) << " re_deg=" << detail::format_double(rad2deg(s.re))
              << " success=" << (s.success ? 1 : 0) << '\n';
  }
  if (r.dump_pairs > 0) {
    const fs::path path = o.out() / "pairs.txt";
    auto f = open_out(path);
    f << "# index px py pz mx my mz weight\n";
    for (const auto& m : top_pairs(pred, p, r.dump_pairs)) {
      f << m.index << ' ' << detail::format_double(m.source.x()) << ' ' << detail::format_double(m.source.y()) << ' '
        << detail::format_double(m.source.z()) << ' ' << detail::format_double(m.target.x()) << ' '
        << detail::format_double(m.target.y()) << ' ' << detail::format_double(m.target.z()) << ' '
        << detail::format_double(m.weight) << '\n';
    }
    std::cout << "event=dump path=" << path.string() << '\n';
  }
  return 0;
}

struct EvalOptions {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "test";
  std::optional<double> tau;
  bool icp = false;
  std::optional<std::size_t> workers;
};

int run_eval(const CommonOptions& o, const EvalOptions& e) {
  Checkpoint ck = Checkpoint::load(e.checkpoint);
  RunConfig cfg = o.build(ck.config);
  if (o.seed) cfg.data.synth.seed = *o.seed;
  if (e.icp) cfg.eval.icp = true;
  if (e.workers) cfg.eval.workers = *e.workers;
  cfg.validate();
  Model model(cfg.model, cfg.training.seed);
  ck.apply_to(model);
  const Split split = parse_split(e.split);
  const auto pairs = e.data_dir.empty() ? make_split(cfg, split) : read_pairs(e.data_dir, split);
  const double tau = e.tau.value_or(ck.tau);
  const EvalReport rep = evaluate(model, pairs, tau, cfg.eval);
  const fs::path out = o.out();
  open_out(out / "report.txt") << rep.to_records();
  std::cout << rep.to_table();
  return 0;
}

struct AblateOptions {
  std::vector<std::string> variants{"product/soft", "last_layer/soft", "no_intermediate/soft"};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool six_layers = false;
};

int run_ablate(const CommonOptions& o, const AblateOptions& a) {
  RunConfig base;
  if (a.six_layers) base.model.matching.channels = MatchingModelConfig::six_layer_channels();
  RunConfig cfg = o.build(base);
  cfg.validate();
  std::vector<AblationVariant> variants;
  for (const auto& v : a.variants) variants.push_back(AblationVariant::parse(v));
  const fs::path out = o.out();
  auto log = open_out(out / "ablate.log");
  const auto rep = ablate(cfg, variants, a.seeds, &log);
  open_out(out / "ablation.txt") << rep.to_records();
  std::cout << rep.to_table();
  return 0;
}

int run_gen_data(const CommonOptions& o, const std::string& which) {
  RunConfig cfg = o.build();
  if (o.seed) cfg.data.synth.seed = *o.seed;
  cfg.validate();
  const fs::path out = o.out();
  std::vector<Split> splits;
  if (which == "all") {
    splits = {Split::train, Split::val, Split::test};
  } else {
    splits = {parse_split(which)};
  }
  for (auto s : splits) {
    const auto pairs = make_split(cfg, s);
    write_pairs(pairs, s, out);
    std::cout << "event=gen_data split=" << to_string(s) << " pairs=" << pairs.size() << " dir=" << out.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Point cloud registration with cross-attention matching"};
  app.require_subcommand(1);

  CommonOptions train_o, reg_o, eval_o, abl_o, gen_o;
  auto* train_cmd = app.add_subcommand("train", "train a model on synthetic pairs");
  train_o.attach(train_cmd, "training seed (initialization and pair order)");

  RegisterOptions reg;
  auto* reg_cmd = app.add_subcommand("register", "register one cloud pair");
  reg_o.attach(reg_cmd, "unused; accepted for uniformity");
  reg_cmd->add_option("--checkpoint", reg.checkpoint, "trained checkpoint")->required();
  reg_cmd->add_option("source", reg.p_path, "source cloud P (.xyz)")->required();
  reg_cmd->add_option("target", reg.q_path, "target cloud Q (.xyz)")->required();
  reg_cmd->add_option("--meta", reg.meta_path, "ground-truth meta file (default: next to P)");
  reg_cmd->add_option("--tau", reg.tau, "confidence threshold (default: tuned value in the checkpoint)");
  reg_cmd->add_flag("--icp", reg.icp, "refine with ICP");
  reg_cmd->add_option("--dump-pairs", reg.dump_pairs, "write the n most confident matches to <out>/pairs.txt");
  reg_cmd->add_option("--map", reg.map, "correspondence map")->check(CLI::IsMember({"soft", "sparse"}));

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  eval_o.attach(eval_cmd, "data seed for the synthetic split");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "trained checkpoint")->required();
  eval_cmd->add_option("--data", ev.data_dir, "directory written by gen-data (default: regenerate)");
  eval_cmd->add_option("--split", ev.split, "split")->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--tau", ev.tau, "confidence threshold (default: tuned value in the checkpoint)");
  eval_cmd->add_flag("--icp", ev.icp, "refine with ICP");
  eval_cmd->add_option("--workers", ev.workers, "worker threads");

  AblateOptions ab;
  auto* abl_cmd = app.add_subcommand("ablate", "train and compare model variants");
  abl_o.attach(abl_cmd, "unused; use --seeds");
  abl_cmd->add_option("--variants", ab.variants, "combine/map[/losses] entries");
  abl_cmd->add_option("--seeds", ab.seeds, "training seeds");
  abl_cmd->add_flag("--six-layers", ab.six_layers, "start from the six-layer channel profile");

  std::string which = "all";
  auto* gen_cmd = app.add_subcommand("gen-data", "write synthetic pairs to disk");
  gen_o.attach(gen_cmd, "data seed");
  gen_cmd->add_option("--split", which, "split to write")->check(CLI::IsMember({"all", "train", "val", "test"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train_cmd) return run_train(train_o);
    if (*reg_cmd) return run_register(reg_o, reg);
    if (*eval_cmd) return run_eval(eval_o, ev);
    if (*abl_cmd) return run_ablate(abl_o, ab);
    if (*gen_cmd) return run_gen_data(gen_o, which);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitIo;
  } catch (const DegenerateWeightsError& e) {
    std::cerr << "registration failed: " << e.what() << '\n';
    return kExitRegistration;
  } catch (const RankDeficiencyError& e) {
    std::cerr << "registration failed: " << e.what() << '\n';
    return kExitRegistration;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
