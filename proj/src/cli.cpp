#include "advobj/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "advobj/bundle.hpp"
#include "advobj/dataset.hpp"
#include "advobj/evalharness.hpp"
#include "advobj/gradcheck_suite.hpp"
#include "advobj/image_io.hpp"

#ifndef ADVOBJ_DATA_DIR
#define ADVOBJ_DATA_DIR "data"
#endif

namespace advobj {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Typed reads from one JSON object with unknown-key rejection.
class Section {
 public:
  Section(const json& j, std::string where, const std::set<std::string>& allowed)
      : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (!allowed.count(it.key())) {
        throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
      }
    }
  }

  template <typename T>
  void get(const char* key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where_ + ": key '" + key + "' has the wrong type");
    }
  }

  void path(const char* key, fs::path& out, const fs::path& base) const {
    std::string s;
    get(key, s);
    if (!s.empty()) out = base / s;
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string where(const char* key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
};

json read_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(std::string(what) + ": cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string(what) + ": " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

void parse_detector_train(const Section& s, RunConfig& c, const fs::path& base) {
  auto& t = c.detector_train;
  s.path("dataset", c.detector_dataset, base);
  s.get("epochs", t.epochs);
  s.get("learning_rate", t.learning_rate);
  s.get("final_lr_scale", t.final_lr_scale);
  s.get("train_scenes", t.train_scenes);
  s.get("batch_size", t.batch_size);
  s.get("hard_negatives", t.hard_negatives);
  s.get("positive_iou", t.positive_iou);
  s.get("negative_iou", t.negative_iou);
  s.get("detect_prob", t.detect_prob);
  s.get("clear_prob", t.clear_prob);
  s.get("required_rate", t.required_rate);
  s.get("require_targets", t.require_targets);
}

void parse_generator_train(const Section& s, RunConfig& c, const fs::path& base) {
  auto& t = c.generator_train;
  s.path("dataset", c.generator_dataset, base);
  s.get("epochs", t.epochs);
  s.get("learning_rate", t.learning_rate);
  s.get("batch_size", t.batch_size);
  s.get("latent_dim", t.latent_dim);
  s.get("recon_variance", t.recon_variance);
  s.get("heldout_patches", t.heldout_patches);
  s.get("max_heldout_mse", t.max_heldout_mse);
  s.get("min_channel_variance", t.min_channel_variance);
  s.get("require_targets", t.require_targets);
}

}  // namespace

fs::path default_data_dir() { return fs::path(ADVOBJ_DATA_DIR); }

RunConfig RunConfig::defaults(const fs::path& data_dir) {
  RunConfig c;
  c.generator = data_dir / "generator.bundle";
  c.detectors = {{"detector_a", data_dir / "detector_a.bundle"},
                 {"detector_b", data_dir / "detector_b.bundle"}};
  c.background = data_dir / "background.png";
  c.viewpoints = data_dir / "viewpoints.json";
  return c;
}

RunConfig run_config_from_json(const json& j, const fs::path& base, const fs::path& data_dir) {
  RunConfig c = RunConfig::defaults(data_dir);
  const Section top(j, "config",
                    {"seed", "out_dir", "parallel", "models", "background", "attack", "train", "eval"});
  top.get("seed", c.seed);
  top.path("out_dir", c.out_dir, base);
  top.get("parallel", c.parallel);
  top.path("background", c.background, base);
  if (top.has("models")) {
    const Section m(top.at("models"), "config.models", {"generator", "detectors"});
    m.path("generator", c.generator, base);
    if (m.has("detectors")) {
      const json& list = m.at("detectors");
      if (!list.is_array()) throw ConfigError("config.models.detectors: expected a list");
      c.detectors.clear();
      for (const auto& e : list) {
        const Section d(e, "config.models.detectors[]", {"name", "path"});
        DetectorEntry entry;
        d.get("name", entry.name);
        d.path("path", entry.path, base);
        if (entry.name.empty() || entry.path.empty()) {
          throw ConfigError("config.models.detectors[]: 'name' and 'path' are required");
        }
        c.detectors.push_back(entry);
      }
    }
  }
  if (top.has("attack")) {
    const json& a = top.at("attack");
    if (a.is_object() && a.contains("seed")) {
      throw ConfigError("config.attack: unknown key 'seed' (the top-level seed drives the attack)");
    }
    try {
      c.attack = attack_config_from_json(a, reference_class_names());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config.") + e.what());
    }
  }
  if (top.has("train")) {
    const Section t(top.at("train"), "config.train", {"detector", "generator"});
    if (t.has("detector")) {
      parse_detector_train(
          Section(t.at("detector"), "config.train.detector",
                  {"dataset", "epochs", "learning_rate", "final_lr_scale", "train_scenes",
                   "batch_size", "hard_negatives", "positive_iou", "negative_iou", "detect_prob",
                   "clear_prob", "required_rate", "require_targets"}),
          c, base);
    }
    if (t.has("generator")) {
      parse_generator_train(
          Section(t.at("generator"), "config.train.generator",
                  {"dataset", "epochs", "learning_rate", "batch_size", "latent_dim",
                   "recon_variance", "heldout_patches", "max_heldout_mse", "min_channel_variance",
                   "require_targets"}),
          c, base);
    }
  }
  if (top.has("eval")) {
    const Section e(top.at("eval"), "config.eval",
                    {"viewpoints", "n_seeds", "attacks_per_source", "threshold", "report_floor",
                     "patch", "backgrounds"});
    e.path("viewpoints", c.viewpoints, base);
    e.get("n_seeds", c.n_seeds);
    e.get("attacks_per_source", c.attacks_per_source);
    if (e.has("threshold") && !e.at("threshold").is_null()) {
      double t = 0.0;
      e.get("threshold", t);
      c.transfer_threshold = t;
    }
    e.get("report_floor", c.report_floor);
    fs::path patch;
    e.path("patch", patch, base);
    if (!patch.empty()) c.patch = patch;
    std::vector<std::string> bgs;
    e.get("backgrounds", bgs);
    for (const auto& b : bgs) c.backgrounds.push_back(base / b);
  }
  c.attack.seed = c.seed;
  return c;
}

namespace {

struct Globals {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> parallel;
  std::optional<std::string> fault;
};

RunConfig load_config(const Globals& g) {
  const fs::path data = default_data_dir();
  RunConfig c = RunConfig::defaults(data);
  if (g.config) {
    const fs::path path(*g.config);
    c = run_config_from_json(read_json_file(path, "config"), path.parent_path(), data);
  }
  if (g.seed) c.seed = *g.seed;
  if (g.out) c.out_dir = *g.out;
  if (g.parallel) c.parallel = std::max<std::size_t>(1, *g.parallel);
  c.attack.seed = c.seed;
  return c;
}

Tensor load_background(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("background image not found: " + path.string());
  return read_png(path);
}

std::vector<Detector> load_detectors(const RunConfig& c, std::vector<NamedDetector>& named) {
  if (c.detectors.empty()) throw ConfigError("no detectors configured");
  std::vector<Detector> out;
  out.reserve(c.detectors.size());
  for (const auto& d : c.detectors) out.push_back(load_detector(d.path));
  named.clear();
  for (std::size_t i = 0; i < out.size(); ++i) named.push_back({c.detectors[i].name, &out[i]});
  return out;
}

std::size_t pick_detector(const RunConfig& c, const std::optional<std::string>& name) {
  if (!name) return 0;
  for (std::size_t i = 0; i < c.detectors.size(); ++i)
    if (c.detectors[i].name == *name) return i;
  throw ConfigError("unknown detector '" + *name + "'");
}

// Command bodies. Each returns an exit code; exceptions are mapped by run_cli.

int cmd_gen_data(const Globals& g, const std::string& spec_path, std::optional<std::size_t> count,
                 std::ostream& out) {
  const json spec = read_json_file(spec_path, "dataset spec");
  if (!spec.is_object()) throw SpecError("dataset spec: expected an object");
  std::uint64_t seed = spec.value("seed", std::uint64_t{0});
  if (g.seed) seed = *g.seed;
  const std::size_t n = count ? *count : spec.value("count", std::size_t{0});
  if (!g.out) throw ConfigError("gen-data: --out is required");
  json clean = spec;
  clean.erase("count");
  clean.erase("seed");
  const auto m = write_dataset(clean, n, seed, *g.out);
  out << "wrote " << m.items.size() << " " << m.kind << " to " << *g.out << "\n";
  return kExitOk;
}

int cmd_train(const Globals& g, const std::string& kind, const std::optional<std::string>& dataset,
              const std::optional<std::size_t>& epochs, std::ostream& out, std::ostream& err) {
  RunConfig c = load_config(g);
  fs::create_directories(c.out_dir);
  if (kind == "detector") {
    fs::path dir = dataset ? fs::path(*dataset) : c.detector_dataset;
    if (dir.empty()) throw ConfigError("train detector: no dataset given (--dataset or config.train.detector.dataset)");
    if (!fs::exists(dir / "manifest.json")) throw ConfigError("train detector: missing dataset " + dir.string());
    const auto manifest = load_manifest(dir);
    auto cfg = c.detector_train;
    cfg.seed = c.seed;
    if (epochs) cfg.epochs = *epochs;
    cfg.scenes = scene_spec_from_json(manifest.spec);
    const bool require = cfg.require_targets;
    cfg.require_targets = false;
    const auto heldout = load_scenes(dir, manifest);
    const auto trained = train_detector(cfg, nullptr, &heldout);
    const json metrics = trained.metrics.to_json();
    write_json(c.out_dir / "detector_metrics.json", metrics);
    out << "detector metrics: " << metrics.dump() << "\n";
    if (require && !trained.metrics.targets_met) {
      err << "advobj: detector training targets not met\n";
      return kExitTrainingTarget;
    }
    json meta{{"seed", c.seed}, {"epochs", cfg.epochs}, {"learning_rate", cfg.learning_rate},
              {"train_scenes", cfg.train_scenes}, {"scene_spec", manifest.spec}};
    save_bundle(to_bundle(trained.detector, meta), c.out_dir / "detector.bundle");
    out << "wrote " << (c.out_dir / "detector.bundle").string() << "\n";
    return kExitOk;
  }
  fs::path dir = dataset ? fs::path(*dataset) : c.generator_dataset;
  if (dir.empty()) throw ConfigError("train generator: no dataset given (--dataset or config.train.generator.dataset)");
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("train generator: missing dataset " + dir.string());
  const auto manifest = load_manifest(dir);
  auto cfg = c.generator_train;
  cfg.seed = c.seed;
  if (epochs) cfg.epochs = *epochs;
  cfg.patches = patch_spec_from_json(manifest.spec);
  const bool require = cfg.require_targets;
  cfg.require_targets = false;
  const auto patches = load_patches(dir, manifest);
  const auto trained = train_generator(cfg, &patches);
  const json metrics = trained.metrics.to_json();
  write_json(c.out_dir / "generator_metrics.json", metrics);
  out << "generator metrics: " << metrics.dump() << "\n";
  if (require && !trained.metrics.targets_met) {
    err << "advobj: generator training targets not met\n";
    return kExitTrainingTarget;
  }
  json meta{{"seed", c.seed}, {"epochs", cfg.epochs}, {"learning_rate", cfg.learning_rate},
            {"train_patches", patches.size()}, {"patch_spec", manifest.spec}};
  save_bundle(to_bundle(trained.generator, meta), c.out_dir / "generator.bundle");
  out << "wrote " << (c.out_dir / "generator.bundle").string() << "\n";
  return kExitOk;
}

struct AttackOverrides {
  std::optional<std::size_t> max_iters;
  std::optional<double> kappa;
  std::optional<double> learning_rate;
  std::optional<double> threshold;
  std::optional<std::string> target;
  std::optional<std::string> detector;
  bool no_eot = false;

  void apply(AttackConfig& a) const {
    if (max_iters) a.max_iters = *max_iters;
    if (kappa) a.kappa = *kappa;
    if (learning_rate) a.learning_rate = *learning_rate;
    if (threshold) a.success_threshold = *threshold;
    if (target) {
      try {
        a.target_class = attack_config_from_json({{"target_class", *target}}, reference_class_names()).target_class;
      } catch (const std::invalid_argument&) {
        a.target_class = static_cast<std::size_t>(std::stoul(*target));
      }
    }
    if (no_eot) a.eot_enabled = false;
    try {
      a.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

int cmd_attack(const Globals& g, const AttackOverrides& o, std::ostream& out) {
  RunConfig c = load_config(g);
  o.apply(c.attack);
  const Generator gen = load_generator(c.generator);
  const std::size_t di = pick_detector(c, o.detector);
  const Detector det = load_detector(c.detectors[di].path);
  const Tensor bg = load_background(c.background);
  try {
    check_attack_inputs(gen, det, bg, c.attack);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const AttackResult r = run_attack(gen, det, bg, c.attack);
  fs::create_directories(c.out_dir);
  json j = r.to_json();
  j["detector"] = c.detectors[di].name;
  write_json(c.out_dir / "result.json", j);
  write_png(r.patch, c.out_dir / "patch.png");
  write_png(r.composite, c.out_dir / "composite.png");
  out << (r.success ? "success" : "failure") << " after " << r.iterations
      << " iterations; confidence " << fixed(r.final_confidence) << ", sigma " << fixed(r.sigma_hat)
      << ", kl " << fixed(r.final_kl) << "\n";
  return r.success ? kExitOk : kExitAttackFailed;
}

std::vector<Tensor> load_backgrounds(const RunConfig& c) {
  std::vector<Tensor> out;
  if (c.backgrounds.empty()) {
    out.push_back(load_background(c.background));
  } else {
    for (const auto& p : c.backgrounds) out.push_back(load_background(p));
  }
  return out;
}

void write_reports(const fs::path& dir, const std::string& stem, const auto& report) {
  fs::create_directories(dir);
  export_report(report, dir / (stem + ".csv"), ReportFormat::kCsv);
  export_report(report, dir / (stem + ".json"), ReportFormat::kJson);
}

int cmd_eval(const Globals& g, const std::string& mode, const AttackOverrides& o, bool benign,
             std::ostream& out) {
  RunConfig c = load_config(g);
  o.apply(c.attack);
  const Generator gen = load_generator(c.generator);
  std::vector<NamedDetector> named;
  const auto detectors = load_detectors(c, named);

  if (mode == "transfer") {
    if (detectors.size() < 2) throw ConfigError("eval transfer: needs at least two detectors");
    const auto backgrounds = load_backgrounds(c);
    std::vector<std::vector<TransferSample>> samples;
    json sources = json::array();
    for (std::size_t s = 0; s < detectors.size(); ++s) {
      const auto rate = eval_success_rate(gen, detectors[s], backgrounds, c.attack,
                                          c.attacks_per_source, c.parallel);
      samples.emplace_back();
      for (const auto& r : rate.results) samples.back().push_back(transfer_sample(r));
      sources.push_back({{"source", named[s].name}, {"success_rate", rate.fraction}});
    }
    const double threshold = c.transfer_threshold.value_or(c.attack.success_threshold);
    const auto m = eval_transfer(samples, named, threshold, c.parallel);
    write_reports(c.out_dir, "transfer", m);
    for (const auto& row : m.to_json().at("rows")) {
      out << row.at("source").get<std::string>() << " -> " << row.at("target").get<std::string>()
          << ": " << (row.at("percent").is_null() ? "NA" : fixed(row.at("percent").get<double>(), 1) + "%")
          << "\n";
    }
    return kExitOk;
  }

  if (mode == "robustness") {
    const Tensor bg = load_background(c.background);
    Tensor patch;
    if (c.patch) {
      if (!fs::exists(*c.patch)) throw ConfigError("eval robustness: patch not found: " + c.patch->string());
      patch = read_png(*c.patch);
    } else if (benign) {
      Rng rng(derive_seed(c.seed, "benign"));
      patch = gen.generate(init_latent(gen.latent_dim(), rng));
    } else {
      const std::size_t di = pick_detector(c, o.detector);
      const auto r = run_attack(gen, detectors[di], bg, c.attack);
      out << "attack " << (r.success ? "succeeded" : "failed") << " after " << r.iterations
          << " iterations\n";
      patch = r.patch;
    }
    const auto viewpoints = load_viewpoints(c.viewpoints);
    const auto grid = eval_robustness(patch, bg, viewpoints, named, c.attack.target_class,
                                      c.attack.placement, c.report_floor, c.parallel);
    write_reports(c.out_dir, "robustness", grid);
    for (std::size_t p = 0; p < grid.positions.size(); ++p) {
      out << "position " << grid.positions[p] << ":";
      for (std::size_t d = 0; d < grid.detectors.size(); ++d) {
        out << " " << grid.detectors[d] << "="
            << (grid.detected(p, d) ? fixed(grid.confidence[p][d], 2) : "-");
      }
      out << "\n";
    }
    return kExitOk;
  }

  const std::size_t di = pick_detector(c, o.detector);
  const auto rate = eval_success_rate(gen, detectors[di], load_backgrounds(c), c.attack, c.n_seeds,
                                      c.parallel);
  write_reports(c.out_dir, "success_rate", rate);
  out << "success rate " << fixed(rate.fraction, 2) << " over " << rate.records.size() << " seeds\n";
  return kExitOk;
}

int cmd_gradcheck(const Globals& g, const std::string& scope, std::size_t points, std::ostream& out,
                  std::ostream& err) {
  std::vector<CheckResult> results;
  if (scope == "ops") {
    results = check_ops(points, g.seed.value_or(0));
  } else {
    RunConfig c = load_config(g);
    const Generator gen = load_generator(c.generator);
    const Detector det = load_detector(c.detectors.at(0).path);
    results.push_back(check_pipeline(gen, det, load_background(c.background), c.attack, points, c.seed));
  }
  for (const auto& r : results) {
    out << std::left << std::setw(24) << r.name << " max rel error " << std::scientific
        << std::setprecision(3) << r.max_rel_error << std::defaultfloat << " ("
        << (r.passed() ? "ok" : "FAIL") << ")\n";
  }
  if (g.out) {
    fs::create_directories(*g.out);
    write_json(fs::path(*g.out) / ("gradcheck_" + scope + ".json"), to_json(results));
  }
  std::vector<CheckResult> bad;
  std::copy_if(results.begin(), results.end(), std::back_inserter(bad),
               [](const CheckResult& r) { return !r.passed(); });
  if (bad.empty()) {
    out << "all " << results.size() << " checks below tolerance\n";
    return kExitOk;
  }
  std::sort(bad.begin(), bad.end(),
            [](const CheckResult& a, const CheckResult& b) { return a.max_rel_error > b.max_rel_error; });
  err << "advobj: gradient check failed; worst offenders:\n";
  for (const auto& r : bad) err << "  " << r.name << " " << r.max_rel_error << "\n";
  return kExitGradcheck;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial object generation against a small anchor-grid detector", "advobj"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run configuration (JSON)");
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--parallel", g.parallel, "Worker threads for attacks and evaluation");
  app.add_option("--inject-fault", g.fault)->group("")->check(CLI::IsMember({"sigmoid"}));

  std::string spec_path;
  std::optional<std::size_t> count;
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic scene or patch dataset");
  gen->add_option("--spec", spec_path, "Dataset spec (JSON)")->required();
  gen->add_option("--count", count, "Number of items (overrides the spec)");

  std::string train_kind;
  std::optional<std::string> dataset;
  std::optional<std::size_t> epochs;
  auto* train = app.add_subcommand("train", "Train a reference detector or generator");
  train->add_option("kind", train_kind)->required()->check(CLI::IsMember({"detector", "generator"}));
  train->add_option("--dataset", dataset, "Dataset directory from gen-data");
  train->add_option("--epochs", epochs, "Epoch budget");

  AttackOverrides ov;
  auto add_attack_flags = [&](CLI::App* sub) {
    sub->add_option("--max-iters", ov.max_iters, "Iteration budget");
    sub->add_option("--kappa", ov.kappa, "Weight of the normality term");
    sub->add_option("--learning-rate", ov.learning_rate, "Adam step size");
    sub->add_option("--threshold", ov.threshold, "Success threshold");
    sub->add_option("--target", ov.target, "Target class name or index");
    sub->add_option("--detector", ov.detector, "Detector name from the config");
    sub->add_flag("--no-eot", ov.no_eot, "Disable transform sampling");
  };
  auto* attack = app.add_subcommand("attack", "Search for an adversarial patch");
  add_attack_flags(attack);

  std::string eval_mode;
  bool benign = false;
  auto* eval = app.add_subcommand("eval", "Transfer, robustness or success-rate evaluation");
  eval->add_option("mode", eval_mode)
      ->required()
      ->check(CLI::IsMember({"transfer", "robustness", "success-rate"}));
  eval->add_flag("--benign", benign, "Robustness of a random, non-adversarial patch");
  add_attack_flags(eval);

  std::string scope;
  std::size_t points = 100;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and numerical gradients");
  gc->add_option("scope", scope)->required()->check(CLI::IsMember({"ops", "pipeline"}));
  gc->add_option("--points", points, "Random points per check");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  fault::set_sigmoid_backward_fault(g.fault.has_value());
  try {
    int code = kExitOk;
    if (*gen) code = cmd_gen_data(g, spec_path, count, out);
    if (*train) code = cmd_train(g, train_kind, dataset, epochs, out, err);
    if (*attack) code = cmd_attack(g, ov, out);
    if (*eval) code = cmd_eval(g, eval_mode, ov, benign, out);
    if (*gc) code = cmd_gradcheck(g, scope, points, out, err);
    fault::set_sigmoid_backward_fault(false);
    return code;
  } catch (const std::exception& e) {
    fault::set_sigmoid_backward_fault(false);
    err << "advobj: error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace advobj
