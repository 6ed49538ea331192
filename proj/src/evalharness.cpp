#include "advobj/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

namespace advobj {

namespace {

// Runs job(i) for i in [0, n) on up to `parallel` threads. Each job writes
// only its own slot, so results do not depend on scheduling.
void parallel_for(std::size_t n, std::size_t parallel, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::min(std::max<std::size_t>(1, parallel), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

TransferSample transfer_sample(const AttackResult& r) {
  return {r.composite, r.config.target_class, r.success};
}

TransferMatrix eval_transfer(const std::vector<std::vector<TransferSample>>& samples,
                             const std::vector<NamedDetector>& detectors, double threshold,
                             std::size_t parallel) {
  const std::size_t n = detectors.size();
  if (n < 2) throw std::invalid_argument("eval_transfer: need at least two models");
  if (samples.size() != n) {
    throw std::invalid_argument("eval_transfer: one attack list per model is required");
  }
  TransferMatrix m;
  m.threshold = threshold;
  for (const auto& d : detectors) m.models.push_back(d.name);
  m.attacks.resize(n);
  m.successful.resize(n);
  m.percent.assign(n, std::vector<std::optional<double>>(n));
  m.self_transfer.assign(n, std::nullopt);

  // hits[s][t] for every (source, target) pair, diagonal included.
  std::vector<std::vector<std::size_t>> hits(n, std::vector<std::size_t>(n, 0));
  for (std::size_t s = 0; s < n; ++s) {
    m.attacks[s] = samples[s].size();
    for (const auto& a : samples[s]) m.successful[s] += a.success ? 1 : 0;
  }
  parallel_for(n * n, parallel, [&](std::size_t job) {
    const std::size_t s = job / n, t = job % n;
    std::size_t count = 0;
    for (const auto& a : samples[s]) {
      if (!a.success) continue;
      if (detectors[t].detector->max_class_prob(a.composite, a.target_class) >= threshold) ++count;
    }
    hits[s][t] = count;
  });
  for (std::size_t s = 0; s < n; ++s) {
    if (m.successful[s] == 0) continue;
    const double denom = static_cast<double>(m.successful[s]);
    for (std::size_t t = 0; t < n; ++t) {
      const double pct = 100.0 * static_cast<double>(hits[s][t]) / denom;
      if (s == t) {
        m.self_transfer[s] = pct;
      } else {
        m.percent[s][t] = pct;
      }
    }
  }
  return m;
}

nlohmann::json TransferMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t s = 0; s < models.size(); ++s) {
    for (std::size_t t = 0; t < models.size(); ++t) {
      if (s == t) continue;
      rows.push_back({{"source", models[s]}, {"target", models[t]}, {"percent", optional_json(percent[s][t])}});
    }
  }
  nlohmann::json self = nlohmann::json::array();
  for (const auto& v : self_transfer) self.push_back(optional_json(v));
  return {{"models", models},   {"threshold", threshold}, {"attacks", attacks},
          {"successful", successful}, {"rows", rows},      {"self_transfer", self}};
}

std::vector<Viewpoint> default_viewpoints() {
  return {{"1", 1.0, 0.0, 0.0, 1.0, 0.0},  {"2", 1.0, 3.0, 2.0, 0.8, 0.0},
          {"3", 0.8, 0.0, 0.0, 1.0, 0.0},  {"4", 0.8, 3.0, 2.0, 0.8, 0.0},
          {"5", 0.6, 0.0, 0.0, 1.0, 0.0},  {"6", 0.6, 3.0, 2.0, 0.8, 0.0}};
}

std::vector<Viewpoint> viewpoints_from_json(const nlohmann::json& j) {
  const nlohmann::json& list = j.is_object() && j.contains("positions") ? j.at("positions") : j;
  if (!list.is_array()) throw std::invalid_argument("viewpoints: expected a list of positions");
  static const std::set<std::string> allowed{"label", "scale", "dx", "dy", "brightness",
                                             "smoothing_sigma"};
  std::vector<Viewpoint> out;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto& e = list[i];
    const std::string where = "viewpoints: position " + std::to_string(i + 1);
    if (!e.is_object()) throw std::invalid_argument(where + ": expected an object");
    for (auto it = e.begin(); it != e.end(); ++it) {
      if (!allowed.count(it.key())) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
    }
    Viewpoint v;
    try {
      v.label = e.value("label", std::to_string(i + 1));
      v.scale = e.value("scale", 1.0);
      v.dx = e.value("dx", 0.0);
      v.dy = e.value("dy", 0.0);
      v.brightness = e.value("brightness", 1.0);
      v.smoothing_sigma = e.value("smoothing_sigma", 0.0);
    } catch (const nlohmann::json::exception& ex) {
      throw std::invalid_argument(where + ": " + ex.what());
    }
    if (!(v.scale > 0.0)) throw std::invalid_argument(where + " ('" + v.label + "'): scale must be > 0");
    out.push_back(v);
  }
  return out;
}

nlohmann::json to_json(const std::vector<Viewpoint>& v) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& p : v) {
    list.push_back({{"label", p.label},
                    {"scale", p.scale},
                    {"dx", p.dx},
                    {"dy", p.dy},
                    {"brightness", p.brightness},
                    {"smoothing_sigma", p.smoothing_sigma}});
  }
  return {{"positions", list}};
}

std::vector<Viewpoint> load_viewpoints(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("viewpoints: cannot open " + path.string());
  try {
    return viewpoints_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("viewpoints: " + path.string() + ": " + e.what());
  }
}

RobustnessGrid eval_robustness(const Tensor& patch, const Tensor& background,
                               const std::vector<Viewpoint>& viewpoints,
                               const std::vector<NamedDetector>& detectors,
                               std::size_t target_class, const PlacementSpec& placement,
                               double floor, std::size_t parallel) {
  RobustnessGrid g;
  g.target_class = target_class;
  g.floor = floor;
  for (const auto& d : detectors) g.detectors.push_back(d.name);
  std::vector<Tensor> composites;
  for (std::size_t i = 0; i < viewpoints.size(); ++i) {
    const auto& v = viewpoints[i];
    g.positions.push_back(v.label);
    try {
      Tape tape;
      composites.push_back(apply_transform(tape.constant(patch), tape.constant(background),
                                           v.transform(), placement)
                               .value());
    } catch (const std::exception& e) {
      throw std::invalid_argument("robustness: position " + v.label + ": " + e.what());
    }
  }
  g.confidence.assign(viewpoints.size(), std::vector<double>(detectors.size(), 0.0));
  parallel_for(viewpoints.size() * detectors.size(), parallel, [&](std::size_t job) {
    const std::size_t p = job / detectors.size(), d = job % detectors.size();
    g.confidence[p][d] = detectors[d].detector->max_class_prob(composites[p], target_class);
  });
  return g;
}

nlohmann::json RobustnessGrid::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t p = 0; p < positions.size(); ++p)
    for (std::size_t d = 0; d < detectors.size(); ++d) {
      rows.push_back({{"position", positions[p]},
                      {"detector", detectors[d]},
                      {"confidence", detected(p, d) ? nlohmann::json(confidence[p][d])
                                                    : nlohmann::json(nullptr)}});
    }
  return {{"target_class", target_class}, {"floor", floor}, {"rows", rows}};
}

SuccessRate eval_success_rate(const Generator& generator, const Detector& detector,
                              const std::vector<Tensor>& backgrounds, const AttackConfig& config,
                              std::size_t n_seeds, std::size_t parallel) {
  if (n_seeds < 1) throw std::invalid_argument("eval_success_rate: n_seeds must be >= 1");
  if (backgrounds.empty()) throw std::invalid_argument("eval_success_rate: no backgrounds");
  SuccessRate out;
  out.results.resize(n_seeds);
  parallel_for(n_seeds, parallel, [&](std::size_t i) {
    AttackConfig c = config;
    c.seed = config.seed + i;
    out.results[i] = run_attack(generator, detector, backgrounds[i % backgrounds.size()], c);
  });
  std::size_t wins = 0;
  for (const auto& r : out.results) {
    out.records.push_back({r.config.seed, r.success, r.iterations, r.final_confidence, r.final_kl,
                           r.sigma_hat});
    wins += r.success ? 1 : 0;
  }
  out.fraction = static_cast<double>(wins) / static_cast<double>(n_seeds);
  return out;
}

nlohmann::json SuccessRate::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : records) {
    rows.push_back({{"seed", r.seed},
                    {"success", r.success},
                    {"iterations", r.iterations},
                    {"final_confidence", r.final_confidence},
                    {"final_kl", r.final_kl},
                    {"sigma_hat", r.sigma_hat}});
  }
  return {{"fraction", fraction}, {"runs", records.size()}, {"records", rows}};
}

std::string render_report(const TransferMatrix& m, ReportFormat f) {
  if (f == ReportFormat::kJson) return m.to_json().dump(2) + "\n";
  std::ostringstream out;
  out << "source,target,percent\n";
  for (std::size_t s = 0; s < m.models.size(); ++s)
    for (std::size_t t = 0; t < m.models.size(); ++t) {
      if (s == t) continue;
      out << m.models[s] << ',' << m.models[t] << ','
          << (m.percent[s][t] ? format_number(*m.percent[s][t]) : "NA") << '\n';
    }
  return out.str();
}

std::string render_report(const RobustnessGrid& g, ReportFormat f) {
  if (f == ReportFormat::kJson) return g.to_json().dump(2) + "\n";
  std::ostringstream out;
  out << "position,detector,confidence\n";
  for (std::size_t p = 0; p < g.positions.size(); ++p)
    for (std::size_t d = 0; d < g.detectors.size(); ++d) {
      out << g.positions[p] << ',' << g.detectors[d] << ','
          << (g.detected(p, d) ? format_number(g.confidence[p][d]) : "not_detected") << '\n';
    }
  return out.str();
}

std::string render_report(const SuccessRate& s, ReportFormat f) {
  if (f == ReportFormat::kJson) return s.to_json().dump(2) + "\n";
  std::ostringstream out;
  out << "seed,success,iterations,final_confidence,final_kl,sigma_hat\n";
  for (const auto& r : s.records) {
    out << r.seed << ',' << (r.success ? "true" : "false") << ',' << r.iterations << ','
        << format_number(r.final_confidence) << ',' << format_number(r.final_kl) << ','
        << format_number(r.sigma_hat) << '\n';
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  out.close();
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

template <typename Report>
void export_report(const Report& report, const std::filesystem::path& path, ReportFormat f) {
  write_text_file(path, render_report(report, f));
}

template void export_report(const TransferMatrix&, const std::filesystem::path&, ReportFormat);
template void export_report(const RobustnessGrid&, const std::filesystem::path&, ReportFormat);
template void export_report(const SuccessRate&, const std::filesystem::path&, ReportFormat);

}  // namespace advobj
