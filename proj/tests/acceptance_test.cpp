// Acceptance suite over the shipped reference scenario in the data directory.
// Prints one PASS/FAIL line per criterion; exit status is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

#include "advobj/bundle.hpp"
#include "advobj/cli.hpp"
#include "advobj/evalharness.hpp"
#include "advobj/gradcheck_suite.hpp"
#include "advobj/image_io.hpp"

using namespace advobj;
namespace fs = std::filesystem;

namespace {

const fs::path kData = ADVOBJ_DATA_DIR;

struct Scenario {
  Generator gen = load_generator(kData / "generator.bundle");
  Detector det_a = load_detector(kData / "detector_a.bundle");
  Detector det_b = load_detector(kData / "detector_b.bundle");
  Tensor bg = read_png(kData / "background.png");
  AttackConfig config = run_config_from_json(json_file(kData / "reference.json"), kData, kData).attack;

  static nlohmann::json json_file(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] criterion %d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Composite Simpson of p log(p/q) with p = N(mu, sigma^2), q = N(0, 1).
double kl_quadrature(double mu, double sigma) {
  const int n = 400000;
  const double a = mu - 14.0 * sigma - 10.0, b = mu + 14.0 * sigma + 10.0, h = (b - a) / n;
  const double root_two_pi = std::sqrt(2.0 * std::acos(-1.0));
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double x = a + i * h;
    const double u = (x - mu) / sigma;
    const double p = std::exp(-0.5 * u * u) / (sigma * root_two_pi);
    const double f = p * (-std::log(sigma) - 0.5 * u * u + 0.5 * x * x);
    acc += f * (i == 0 || i == n ? 1.0 : (i % 2 ? 4.0 : 2.0));
  }
  return acc * h / 3.0;
}

// Independent recomposition: integer placement is a plain pixel copy.
Tensor paste(const Tensor& bg, const Tensor& patch, std::size_t x0, std::size_t y0) {
  Tensor out = bg;
  const auto& ps = patch.shape();
  const std::size_t H = bg.shape()[1], W = bg.shape()[2];
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ps[1]; ++y)
      for (std::size_t x = 0; x < ps[2]; ++x) {
        const double v = patch.data()[(c * ps[1] + y) * ps[2] + x];
        out.data()[(c * H + y0 + y) * W + x0 + x] = std::clamp(v, 0.0, 1.0);
      }
  return out;
}

void criterion_gradients(const Scenario& s) {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_op = 0.0;
  std::string worst_name;
  bool ops_ok = true;
  for (const auto& r : check_ops(100, 0)) {
    if (r.max_rel_error > worst_op) worst_op = r.max_rel_error, worst_name = r.name;
    ops_ok = ops_ok && r.max_rel_error <= 1e-6 && r.points == 100;
  }
  const auto pipe = check_pipeline(s.gen, s.det_a, s.bg, s.config, 100, 0);
  const double secs = seconds_since(t0);
  const bool pass = ops_ok && pipe.max_rel_error <= 1e-4 && pipe.points == 100 && secs < 120.0;
  report(1, "gradient correctness", pass,
         fmt("ops max rel err %.2e (%s) <= 1e-6, pipeline %.2e <= 1e-4, %.1f s < 120 s", worst_op,
             worst_name.c_str(), pipe.max_rel_error, secs));
}

void criterion_kl() {
  Rng rng(derive_seed(0, "acceptance-kl"));
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double mu = rng.uniform(-2.0, 2.0), sigma = rng.uniform(0.2, 3.0);
    worst = std::max(worst, std::abs(loss_kl(mu, sigma) - kl_quadrature(mu, sigma)));
  }
  const double at_origin = std::abs(loss_kl(0.0, 1.0));
  report(2, "KL closed form", worst <= 1e-6 && at_origin <= 1e-12,
         fmt("max |closed - quadrature| %.2e <= 1e-6 over 50 pairs, KL(0,1) = %.1e", worst, at_origin));
}

void criterion_streak() {
  const std::vector<double> seq{0.96, 0.96, 0.96, 0.96, 0.94, 0.96, 0.96, 0.96, 0.96, 0.96};
  const auto step = streak_stop_step(seq, 0.95, 5);
  StreakCounter counter(0.95, 5);
  std::size_t stopped = 0;
  for (std::size_t i = 0; i < seq.size() && !stopped; ++i)
    if (counter.observe(seq[i])) stopped = i + 1;
  const bool pass = step && *step == 10 && stopped == 10;
  report(3, "stopping rule", pass,
         fmt("scripted sequence stops at step %zu (counter %zu), expected 10", step.value_or(0), stopped));
}

struct Runs {
  std::vector<AttackResult> kappa, no_kappa;
};

void criterion_attack(const Scenario& s, const Runs& runs, double secs) {
  const Detector fresh = load_detector(kData / "detector_a.bundle");
  const auto& p = s.config.placement;
  std::size_t wins = 0, verified = 0;
  for (const auto& r : runs.kappa) {
    if (!r.success) continue;
    ++wins;
    const Tensor comp = paste(s.bg, r.patch, static_cast<std::size_t>(p.x), static_cast<std::size_t>(p.y));
    if (fresh.max_class_prob(comp, s.config.target_class) >= s.config.success_threshold) ++verified;
  }
  report(4, "end-to-end attack", wins >= 6 && verified == wins && secs < 1800.0,
         fmt("%zu/10 seeds succeed (>= 6), %zu/%zu re-verified at >= %.2f, %.0f s < 1800 s", wins,
             verified, wins, s.config.success_threshold, secs));
}

void criterion_normality(const Runs& runs) {
  double kl_on = 0.0, kl_off = 0.0;
  std::size_t wins = 0, in_band = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    kl_on += runs.kappa[i].final_kl / 10.0;
    kl_off += runs.no_kappa[i].final_kl / 10.0;
    if (runs.kappa[i].success) {
      ++wins;
      const double sg = runs.kappa[i].sigma_hat;
      if (sg >= 0.5 && sg <= 2.0) ++in_band;
    }
  }
  const bool pass = kl_on <= kl_off && wins > 0 && 10 * in_band >= 8 * wins;
  report(5, "normality regularizer", pass,
         fmt("mean KL %.4f (kappa 0.1) <= %.4f (kappa 0); sigma in [0.5, 2] for %zu of %zu successes",
             kl_on, kl_off, in_band, wins));
}

void criterion_benign(const Scenario& s) {
  const auto viewpoints = load_viewpoints(kData / "viewpoints.json");
  Rng rng(derive_seed(0, "acceptance-benign"));
  std::size_t cells = 0, clear = 0;
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Tensor patch = s.gen.generate(init_latent(s.gen.latent_dim(), rng));
    const auto g = eval_robustness(patch, s.bg, viewpoints, {{"detector_a", &s.det_a}},
                                   s.config.target_class, s.config.placement);
    for (const auto& row : g.confidence) {
      ++cells;
      worst = std::max(worst, row[0]);
      if (row[0] < 0.5) ++clear;
    }
  }
  report(6, "benign baseline", cells == 120 && 100 * clear >= 95 * cells,
         fmt("%zu/%zu (patch, position) cells below 0.5 (>= 95%%), max confidence %.3f", clear, cells,
             worst));
}

void criterion_transfer(const Scenario& s, const Runs& runs) {
  AttackConfig c = s.config;
  const auto on_b = eval_success_rate(s.gen, s.det_b, {s.bg}, c, 10);
  std::vector<std::vector<TransferSample>> samples(2);
  for (const auto& r : runs.kappa) samples[0].push_back(transfer_sample(r));
  for (const auto& r : on_b.results) samples[1].push_back(transfer_sample(r));
  const std::vector<NamedDetector> dets{{"detector_a", &s.det_a}, {"detector_b", &s.det_b}};
  const auto m = eval_transfer(samples, dets, c.success_threshold);
  std::reverse(samples[0].begin(), samples[0].end());
  const auto m2 = eval_transfer(samples, dets, c.success_threshold, 2);

  const auto dir = fs::temp_directory_path() / "advobj_acceptance_transfer";
  fs::remove_all(dir);
  fs::create_directories(dir);
  export_report(m, dir / "a.csv", ReportFormat::kCsv);
  export_report(m, dir / "a.json", ReportFormat::kJson);
  export_report(m2, dir / "b.csv", ReportFormat::kCsv);
  export_report(m2, dir / "b.json", ReportFormat::kJson);
  const bool identical = slurp(dir / "a.csv") == slurp(dir / "b.csv") &&
                         slurp(dir / "a.json") == slurp(dir / "b.json");

  const bool shape = m.percent.size() == 2 && m.percent[0].size() == 2;
  const auto& ab = m.percent[0][1];
  const auto& ba = m.percent[1][0];
  const bool defined = ab && ba && *ab >= 0 && *ab <= 100 && *ba >= 0 && *ba <= 100;
  const bool self = m.self_transfer[0] == 100.0 && m.self_transfer[1] == 100.0;
  report(7, "transfer matrix protocol", shape && defined && self && identical,
         fmt("A->B %s%%, B->A %s%% (%zu and %zu successful sources), self-transfer %s/%s, reports "
             "%s",
             ab ? format_number(*ab).c_str() : "NA", ba ? format_number(*ba).c_str() : "NA",
             m.successful[0], m.successful[1],
             m.self_transfer[0] ? format_number(*m.self_transfer[0]).c_str() : "NA",
             m.self_transfer[1] ? format_number(*m.self_transfer[1]).c_str() : "NA",
             identical ? "byte-identical" : "differ"));
}

void criterion_determinism() {
  const auto dir = fs::temp_directory_path() / "advobj_acceptance_determinism";
  fs::remove_all(dir);
  std::ostringstream sink;
  int codes[2];
  for (int i = 0; i < 2; ++i) {
    codes[i] = run_cli({"--config", (kData / "reference.json").string(), "--seed", "0", "--out",
                        (dir / std::to_string(i)).string(), "attack"},
                       sink, sink);
  }
  bool same = true;
  for (const char* f : {"result.json", "patch.png", "composite.png"}) {
    const auto a = slurp(dir / "0" / f), b = slurp(dir / "1" / f);
    same = same && !a.empty() && a == b;
  }
  report(8, "determinism", same && codes[0] == codes[1],
         fmt("two attack runs (exit %d, %d): result.json, patch.png, composite.png %s", codes[0],
             codes[1], same ? "byte-identical" : "differ"));
}

void criterion_bundles() {
  const auto dir = fs::temp_directory_path() / "advobj_acceptance_bundles";
  fs::create_directories(dir);
  bool round_trip = true;
  for (const char* name : {"generator.bundle", "detector_a.bundle", "detector_b.bundle"}) {
    const std::string original = slurp(kData / name);
    save_bundle(load_bundle(kData / name), dir / "once.bundle");
    save_bundle(load_bundle(dir / "once.bundle"), dir / "twice.bundle");
    round_trip = round_trip && slurp(dir / "once.bundle") == original &&
                 slurp(dir / "twice.bundle") == original;
  }

  // Every byte of the detector bundle, each flipped with a random nonzero mask.
  const std::string bytes = slurp(kData / "detector_a.bundle");
  Rng rng(derive_seed(0, "acceptance-corrupt"));
  std::size_t tried = 0, caught = 0;
  std::string copy = bytes;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto mask = static_cast<char>(1 + rng.uniform_int(0, 254));
    copy[i] = static_cast<char>(bytes[i] ^ mask);
    ++tried;
    try {
      parse_bundle(copy);
    } catch (const BundleError&) {
      ++caught;
    }
    copy[i] = bytes[i];
  }
  report(9, "bundle round-trip", round_trip && caught == tried,
         fmt("save-load-save byte-identical: %s; %zu/%zu single-byte corruptions rejected",
             round_trip ? "yes" : "no", caught, tried));
}

}  // namespace

int main() {
  const Scenario s;

  criterion_gradients(s);
  criterion_kl();
  criterion_streak();

  const auto t0 = std::chrono::steady_clock::now();
  Runs runs;
  runs.kappa = eval_success_rate(s.gen, s.det_a, {s.bg}, s.config, 10).results;
  const double attack_secs = seconds_since(t0);
  AttackConfig off = s.config;
  off.kappa = 0.0;
  runs.no_kappa = eval_success_rate(s.gen, s.det_a, {s.bg}, off, 10).results;

  criterion_attack(s, runs, attack_secs);
  criterion_normality(runs);
  criterion_benign(s);
  criterion_transfer(s, runs);
  criterion_determinism();
  criterion_bundles();

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
