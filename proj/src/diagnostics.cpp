#include "hem/diagnostics.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>

#include "hem/numerics.hpp"

namespace hem::diag {

namespace nx = hem::numerics;

LayerGradStats grad_profile(const HemTrace& trace, const backprop::HemGradients& exact,
                            const backprop::HemGradients& skip_only, std::size_t step) {
  const std::size_t layers = trace.layers();
  if (exact.per_layer_grad_x_contrib.size() != layers ||
      skip_only.per_layer_grad_x_contrib.size() != layers ||
      skip_only.per_layer_grad_mu.size() != layers) {
    throw ConsistencyError("grad_profile: gradients do not match the trace depth");
  }
  LayerGradStats out;
  out.step = step;
  for (std::size_t t = 0; t < layers; ++t) {
    const Matrix& skip = skip_only.per_layer_grad_x_contrib[t];
    const Matrix& full = exact.per_layer_grad_x_contrib[t];
    if (!skip.same_shape(full)) throw ConsistencyError("grad_profile: layer shapes differ");
    out.per_layer_mean_abs_grad_x.push_back(nx::mean_abs(skip));
    out.estep_component_norm.push_back(nx::mean_abs(nx::subtract(full, skip)));
    out.per_layer_grad_mu_norm.push_back(nx::frobenius_norm(skip_only.per_layer_grad_mu[t]));
  }
  out.total_mean_abs_grad_x = nx::mean_abs(exact.grad_x);
  return out;
}

LayerGradStats average(std::span<const LayerGradStats> stats) {
  if (stats.empty()) throw ConsistencyError("average: no profiles");
  const std::size_t layers = stats.front().per_layer_mean_abs_grad_x.size();
  LayerGradStats out;
  out.step = stats.front().step;
  out.per_layer_mean_abs_grad_x.assign(layers, 0.0);
  out.estep_component_norm.assign(layers, 0.0);
  out.per_layer_grad_mu_norm.assign(layers, 0.0);
  const double w = 1.0 / static_cast<double>(stats.size());
  for (const auto& s : stats) {
    if (s.per_layer_mean_abs_grad_x.size() != layers) {
      throw ConsistencyError("average: profiles have different depths");
    }
    for (std::size_t t = 0; t < layers; ++t) {
      out.per_layer_mean_abs_grad_x[t] += w * s.per_layer_mean_abs_grad_x[t];
      out.estep_component_norm[t] += w * s.estep_component_norm[t];
      out.per_layer_grad_mu_norm[t] += w * s.per_layer_grad_mu_norm[t];
    }
    out.total_mean_abs_grad_x += w * s.total_mean_abs_grad_x;
  }
  return out;
}

double layer_entropy(std::span<const double> profile) {
  double total = 0.0;
  for (double v : profile) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConsistencyError("layer_entropy: invalid entry");
    total += v;
  }
  if (!(total > 0.0)) throw ConsistencyError("layer_entropy: profile has no positive entry");
  double h = 0.0;
  for (double v : profile) {
    const double p = v / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double layer_entropy(const LayerGradStats& stats) {
  return layer_entropy(stats.per_layer_mean_abs_grad_x);
}

std::vector<double> reweight_skip_profile(std::span<const double> profile, double eta_measured,
                                          double eta) {
  if (!(eta_measured > 0.0 && eta_measured < 1.0)) {
    throw ConfigError("reweight_skip_profile: measured step size must lie in (0, 1)");
  }
  const std::size_t layers = profile.size();
  std::vector<double> out(layers);
  for (std::size_t i = 0; i < layers; ++i) {
    const double depth = static_cast<double>(layers - 1 - i);  // T - t
    const double measured_weight = eta_measured * std::pow(1.0 - eta_measured, depth);
    const double weight = eta * std::pow(1.0 - eta, depth);
    out[i] = profile[i] / measured_weight * weight;
  }
  return out;
}

ElboCurve ElboCurve::from_trace(const HemTrace& trace) {
  ElboCurve c;
  c.eta = trace.step_size;
  c.kernel = trace.kernel;
  for (const auto& e : trace.elbo) c.totals.push_back(e.total);
  return c;
}

bool ElboCurve::non_decreasing(double slack) const {
  for (std::size_t i = 1; i < totals.size(); ++i) {
    if (totals[i] < totals[i - 1] - slack) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

std::string format_double(double v) {
  if (!std::isfinite(v)) throw ConsistencyError("refusing to emit a non-finite value");
  char buf[64];
  // Shortest round-trip digits in %g layout: never more than 17 significant
  // digits, and no long runs of padding zeros for large magnitudes.
  auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general);
  return std::string(buf, res.ptr);
}

std::string to_csv(std::span<const MetricRecord> records) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : records) {
    out += std::to_string(r.step);
    out += ',';
    out += std::to_string(r.layer);
    out += ',';
    out += r.metric;
    out += ',';
    out += format_double(r.value);
    out += ',';
    out += format_double(r.eta);
    out += ',';
    out += std::to_string(r.layers);
    out += ',';
    out += r.kernel;
    out += ',';
    out += std::to_string(r.seed);
    out += '\n';
  }
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (text.empty() || text.back() != '\n') out << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void emit_csv(std::span<const MetricRecord> records, const std::filesystem::path& path) {
  write_text_file(path, to_csv(records));
}

nlohmann::ordered_json summarize(std::span<const MetricRecord> records) {
  std::map<std::string, std::map<std::size_t, double>> last;
  for (const auto& r : records) {
    if (!std::isfinite(r.value)) throw ConsistencyError("refusing to emit a non-finite value");
    last[r.metric][r.layer] = r.value;
  }
  nlohmann::ordered_json j;
  j["records"] = records.size();
  if (!records.empty()) {
    j["final_step"] = records.back().step;
    j["eta"] = records.back().eta;
    j["T"] = records.back().layers;
    j["kernel"] = records.back().kernel;
    j["seed"] = records.back().seed;
  }
  nlohmann::ordered_json finals = nlohmann::ordered_json::object();
  for (const auto& [metric, by_layer] : last) {
    if (by_layer.size() == 1 && by_layer.begin()->first == 0) {
      finals[metric] = by_layer.begin()->second;
    } else {
      nlohmann::ordered_json per = nlohmann::ordered_json::object();
      for (const auto& [layer, v] : by_layer) per[std::to_string(layer)] = v;
      finals[metric] = per;
    }
  }
  j["final"] = finals;
  return j;
}

void emit_summary_json(std::span<const MetricRecord> records, const std::filesystem::path& path) {
  write_text_file(path, summarize(records).dump(2));
}

void append_grad_stats(std::vector<MetricRecord>& out, const LayerGradStats& stats,
                       const MetricRecord& tag) {
  auto push = [&](std::size_t layer, const char* metric, double value) {
    MetricRecord r = tag;
    r.step = stats.step;
    r.layer = layer;
    r.metric = metric;
    r.value = value;
    out.push_back(std::move(r));
  };
  for (std::size_t t = 0; t < stats.per_layer_mean_abs_grad_x.size(); ++t) {
    push(t + 1, "grad_x_nstep", stats.per_layer_mean_abs_grad_x[t]);
    push(t + 1, "grad_x_estep", stats.estep_component_norm[t]);
    push(t + 1, "grad_mu_norm", stats.per_layer_grad_mu_norm[t]);
  }
  push(0, "grad_x_total", stats.total_mean_abs_grad_x);
  if (!stats.per_layer_mean_abs_grad_x.empty()) {
    double total = 0.0;
    for (double v : stats.per_layer_mean_abs_grad_x) total += v;
    if (total > 0.0) push(0, "layer_entropy", layer_entropy(stats));
  }
}

}  // namespace hem::diag
