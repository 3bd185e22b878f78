#include "hem/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "hem/diagnostics.hpp"
#include "hem/errors.hpp"

namespace hem::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Strict JSON section reading

class Section {
 public:
  Section(const json& parent, std::string name, std::vector<std::string> allowed)
      : name_(std::move(name)) {
    if (name_.empty()) {
      node_ = &parent;
    } else if (parent.contains(name_)) {
      node_ = &parent.at(name_);
    }
    if (node_ == nullptr) return;
    if (!node_->is_object()) {
      throw ConfigError((name_.empty() ? std::string("config") : name_) + ": expected an object");
    }
    for (const auto& item : node_->items()) {
      if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
        throw ConfigError("unknown key '" + where(item.key()) + "'");
      }
    }
  }

  bool has(const std::string& key) const { return find(key) != nullptr; }

  std::string where(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

  double number(const std::string& key, double fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    return as_number(*v, where(key));
  }

  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    return as_unsigned(*v, where(key));
  }

  std::size_t count(const std::string& key, std::size_t fallback) const {
    return static_cast<std::size_t>(u64(key, fallback));
  }

  bool flag(const std::string& key, bool fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
    return v->get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
    return v->get<std::string>();
  }

  std::vector<double> numbers(const std::string& key, std::vector<double> fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_array()) throw ConfigError(where(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : *v) out.push_back(as_number(e, where(key)));
    return out;
  }

  std::vector<std::size_t> counts(const std::string& key, std::vector<std::size_t> fallback) const {
    const json* v = find(key);
    if (v == nullptr) return fallback;
    if (!v->is_array()) throw ConfigError(where(key) + ": expected an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : *v) out.push_back(static_cast<std::size_t>(as_unsigned(e, where(key))));
    return out;
  }

  const json* find(const std::string& key) const {
    if (node_ == nullptr) return nullptr;
    const auto it = node_->find(key);
    return it == node_->end() ? nullptr : &*it;
  }

 private:
  static double as_number(const json& v, const std::string& where) {
    if (!v.is_number()) throw ConfigError(where + ": expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError(where + ": must be finite");
    return d;
  }

  static std::uint64_t as_unsigned(const json& v, const std::string& where) {
    if (!v.is_number_unsigned()) throw ConfigError(where + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  std::string name_;
  const json* node_ = nullptr;
};

std::vector<std::string> top_level_keys(const std::string& command) {
  if (command == "gen") return {"seed", "data"};
  if (command == "gradcheck") return {"seed", "gradcheck"};
  std::vector<std::string> keys{"seed", "data", "dataset", "model", "hem", "train"};
  if (command == "sweep") keys.push_back("sweep");
  if (command == "fig3") keys.push_back("fig3");
  return keys;
}

fs::path resolve_path(const std::string& p, const fs::path& base_dir) {
  if (p.empty()) throw ConfigError("empty path in config");
  const fs::path path(p);
  return path.is_absolute() ? path : (base_dir / path).lexically_normal();
}

void parse_data(const json& doc, std::uint64_t seed, DataSource& ds) {
  const Section probe(doc, "data", {"kind", "seed", "num_images", "height", "width", "num_shapes",
                                    "num_classes", "pixel_noise_std", "n_points", "k_true",
                                    "dim", "separation", "noise_std"});
  ds.kind = probe.text("kind", ds.kind);
  const std::uint64_t data_seed = probe.u64("seed", seed);
  if (ds.kind == "toy_seg") {
    const Section s(doc, "data", {"kind", "seed", "num_images", "height", "width", "num_shapes",
                                  "num_classes", "pixel_noise_std"});
    ds.num_images = s.count("num_images", ds.num_images);
    auto& t = ds.toy_seg;
    t.height = s.count("height", t.height);
    t.width = s.count("width", t.width);
    t.num_shapes = s.count("num_shapes", t.num_shapes);
    t.num_classes = s.count("num_classes", t.num_classes);
    t.pixel_noise_std = s.number("pixel_noise_std", t.pixel_noise_std);
    t.seed = data_seed;
    t.validate();
    if (ds.num_images < 1) throw ConfigError("data.num_images must be >= 1");
  } else if (ds.kind == "point_cloud") {
    const Section s(doc, "data",
                    {"kind", "seed", "n_points", "k_true", "dim", "separation", "noise_std"});
    auto& p = ds.point_cloud;
    p.n_points = s.count("n_points", p.n_points);
    p.k_true = s.count("k_true", p.k_true);
    p.dim = s.count("dim", p.dim);
    p.separation = s.number("separation", p.separation);
    p.noise_std = s.number("noise_std", p.noise_std);
    p.seed = data_seed;
    p.validate();
  } else {
    throw ConfigError("data.kind: unknown kind '" + ds.kind + "' (expected toy_seg or point_cloud)");
  }
}

void parse_training(const json& doc, RunConfig& cfg) {
  auto& mc = cfg.train.model;
  const Section m(doc, "model", {"channels", "num_bases", "hidden", "use_hem"});
  mc.channels = m.count("channels", mc.channels);
  mc.num_bases = m.count("num_bases", mc.num_bases);
  mc.hidden = m.count("hidden", mc.hidden);
  mc.use_hem = m.flag("use_hem", mc.use_hem);

  auto& hc = cfg.train.hem;
  const Section h(doc, "hem", {"num_layers_train", "num_layers_eval", "step_size", "temperature",
                               "kernel", "momentum", "normalize_bases", "reinit_seed"});
  hc.num_layers_train = h.count("num_layers_train", hc.num_layers_train);
  hc.num_layers_eval = h.count("num_layers_eval", hc.num_layers_eval);
  hc.step_size = h.number("step_size", hc.step_size);
  if (const json* t = h.find("temperature")) {
    if (t->is_string() && t->get<std::string>() == "sqrt_c") {
      hc.temperature.reset();
    } else if (t->is_number()) {
      hc.temperature = h.number("temperature", 0.0);
    } else {
      throw ConfigError("hem.temperature: expected a number or \"sqrt_c\"");
    }
  }
  hc.kernel = gmm::kernel_from_string(h.text("kernel", gmm::to_string(hc.kernel)));
  hc.momentum = h.number("momentum", hc.momentum);
  hc.normalize_bases = basis_norm_from_string(h.text("normalize_bases", to_string(hc.normalize_bases)));
  hc.reinit_seed = h.u64("reinit_seed", hc.reinit_seed);

  auto& tc = cfg.train;
  const Section t(doc, "train",
                  {"learning_rate", "epochs", "batch_size", "log_interval", "probe_size"});
  tc.learning_rate = t.number("learning_rate", tc.learning_rate);
  tc.epochs = t.count("epochs", tc.epochs);
  tc.batch_size = t.count("batch_size", tc.batch_size);
  tc.log_interval = t.count("log_interval", tc.log_interval);
  tc.probe_size = t.count("probe_size", tc.probe_size);
  tc.seed = cfg.seed;
  tc.validate();
}

void validate_eta_grid(const std::vector<double>& grid, const HemConfig& base,
                       const std::string& where) {
  if (grid.empty()) throw ConfigError(where + " must not be empty");
  for (double eta : grid) {
    HemConfig h = base;
    h.step_size = eta;
    try {
      h.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

void validate_depths(const std::vector<std::size_t>& grid, const std::string& where) {
  if (grid.empty()) throw ConfigError(where + " must not be empty");
  for (std::size_t t : grid) {
    if (t < 1) throw ConfigError(where + ": depths must be >= 1");
  }
}

const char* to_string(Fig3Source s) {
  switch (s) {
    case Fig3Source::Init: return "init";
    case Fig3Source::Checkpoint: return "checkpoint";
    case Fig3Source::TrainInline: return "train_inline";
  }
  return "init";
}

}  // namespace

RunConfig parse_config(const std::string& command, const json& doc,
                       std::optional<std::uint64_t> seed_override, const fs::path& base_dir) {
  if (std::find(std::begin(kCommands), std::end(kCommands), command) == std::end(kCommands)) {
    throw ConfigError("unknown command '" + command + "'");
  }
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object at top level");
  const Section root(doc, "", top_level_keys(command));

  RunConfig cfg;
  cfg.command = command;
  if (seed_override) {
    cfg.seed = *seed_override;
  } else if (root.has("seed")) {
    cfg.seed = root.u64("seed", 0);
  } else {
    throw ConfigError("missing required field 'seed'");
  }

  if (command == "gradcheck") {
    auto& g = cfg.gradcheck;
    const Section s(doc, "gradcheck", {"hem_instances", "model_instances", "skip_instances",
                                       "elbo_instances", "tolerance", "fault_injection"});
    g.seed = cfg.seed;
    g.hem_instances = s.count("hem_instances", g.hem_instances);
    g.model_instances = s.count("model_instances", g.model_instances);
    g.skip_instances = s.count("skip_instances", g.skip_instances);
    g.elbo_instances = s.count("elbo_instances", g.elbo_instances);
    g.tolerance = s.number("tolerance", g.tolerance);
    const std::string fault = s.text("fault_injection", "none");
    if (fault == "flip_nstep_skip") {
      g.flip_nstep_skip = true;
    } else if (fault != "none") {
      throw ConfigError("gradcheck.fault_injection: expected none or flip_nstep_skip");
    }
    g.validate();
    return cfg;
  }

  if (command == "gen") {
    if (!root.has("data")) throw ConfigError("missing required section 'data'");
    parse_data(doc, cfg.seed, cfg.data);
    return cfg;
  }

  const bool inline_data = root.has("data");
  const bool file_data = root.has("dataset");
  if (inline_data == file_data) {
    throw ConfigError("exactly one of 'data' or 'dataset' must be given");
  }
  if (file_data) {
    cfg.data.dataset_path = resolve_path(root.text("dataset", ""), base_dir);
  } else {
    parse_data(doc, cfg.seed, cfg.data);
    if (cfg.data.kind == "point_cloud" && cfg.data.point_cloud.k_true < 2) {
      throw ConfigError("data.k_true must be >= 2 to train a classifier");
    }
  }
  parse_training(doc, cfg);

  if (command == "sweep") {
    auto& sw = cfg.sweep;
    const Section s(doc, "sweep", {"eta_train", "t_train", "t_eval", "parallel"});
    sw.eta_train = s.numbers("eta_train", sw.eta_train);
    sw.t_train = s.counts("t_train", sw.t_train);
    sw.t_eval = s.counts("t_eval", sw.t_eval);
    sw.parallel = s.flag("parallel", sw.parallel);
    validate_eta_grid(sw.eta_train, cfg.train.hem, "sweep.eta_train");
    validate_depths(sw.t_train, "sweep.t_train");
    validate_depths(sw.t_eval, "sweep.t_eval");
  }

  if (command == "fig3") {
    auto& f = cfg.fig3;
    const Section s(doc, "fig3", {"eta_grid", "num_layers", "source", "checkpoint"});
    f.eta_grid = s.numbers("eta_grid", f.eta_grid);
    f.num_layers = s.count("num_layers", f.num_layers);
    if (f.num_layers == 0) f.num_layers = cfg.train.hem.num_layers_train;
    const std::string source = s.text("source", to_string(f.source));
    if (source == "init") {
      f.source = Fig3Source::Init;
    } else if (source == "checkpoint") {
      f.source = Fig3Source::Checkpoint;
    } else if (source == "train_inline") {
      f.source = Fig3Source::TrainInline;
    } else {
      throw ConfigError("fig3.source: expected init, checkpoint or train_inline");
    }
    if (s.has("checkpoint")) f.checkpoint = resolve_path(s.text("checkpoint", ""), base_dir);
    if ((f.source == Fig3Source::Checkpoint) != f.checkpoint.has_value()) {
      throw ConfigError("fig3.checkpoint is required exactly when fig3.source is checkpoint");
    }
    if (!cfg.train.model.use_hem) throw ConfigError("fig3 requires model.use_hem = true");
    validate_eta_grid(f.eta_grid, cfg.train.hem, "fig3.eta_grid");
  }
  return cfg;
}

ordered_json to_json(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  if (cfg.command == "gradcheck") {
    const auto& g = cfg.gradcheck;
    j["gradcheck"] = {{"hem_instances", g.hem_instances},
                      {"model_instances", g.model_instances},
                      {"skip_instances", g.skip_instances},
                      {"elbo_instances", g.elbo_instances},
                      {"tolerance", g.tolerance},
                      {"fault_injection", g.flip_nstep_skip ? "flip_nstep_skip" : "none"}};
    return j;
  }

  if (cfg.data.dataset_path) {
    j["dataset"] = cfg.data.dataset_path->string();
  } else if (cfg.data.kind == "toy_seg") {
    const auto& t = cfg.data.toy_seg;
    j["data"] = {{"kind", "toy_seg"},          {"seed", t.seed},
                 {"num_images", cfg.data.num_images}, {"height", t.height},
                 {"width", t.width},           {"num_shapes", t.num_shapes},
                 {"num_classes", t.num_classes}, {"pixel_noise_std", t.pixel_noise_std}};
  } else {
    const auto& p = cfg.data.point_cloud;
    j["data"] = {{"kind", "point_cloud"}, {"seed", p.seed},           {"n_points", p.n_points},
                 {"k_true", p.k_true},    {"dim", p.dim},             {"separation", p.separation},
                 {"noise_std", p.noise_std}};
  }
  if (cfg.command == "gen") return j;

  const auto& m = cfg.train.model;
  j["model"] = {{"channels", m.channels},
                {"num_bases", m.num_bases},
                {"hidden", m.hidden},
                {"use_hem", m.use_hem}};
  const auto& h = cfg.train.hem;
  ordered_json hem = {{"num_layers_train", h.num_layers_train},
                      {"num_layers_eval", h.num_layers_eval},
                      {"step_size", h.step_size}};
  if (h.temperature) {
    hem["temperature"] = *h.temperature;
  } else {
    hem["temperature"] = "sqrt_c";
  }
  hem["kernel"] = gmm::to_string(h.kernel);
  hem["momentum"] = h.momentum;
  hem["normalize_bases"] = to_string(h.normalize_bases);
  hem["reinit_seed"] = h.reinit_seed;
  j["hem"] = hem;
  const auto& t = cfg.train;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"log_interval", t.log_interval},
                {"probe_size", t.probe_size}};
  if (cfg.command == "sweep") {
    j["sweep"] = {{"eta_train", cfg.sweep.eta_train},
                  {"t_train", cfg.sweep.t_train},
                  {"t_eval", cfg.sweep.t_eval},
                  {"parallel", cfg.sweep.parallel}};
  }
  if (cfg.command == "fig3") {
    ordered_json f = {{"eta_grid", cfg.fig3.eta_grid},
                      {"num_layers", cfg.fig3.num_layers},
                      {"source", to_string(cfg.fig3.source)}};
    if (cfg.fig3.checkpoint) f["checkpoint"] = cfg.fig3.checkpoint->string();
    j["fig3"] = f;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Context {
  const RunConfig& cfg;
  fs::path out_dir;
  std::ostream& out;
  std::ostream& err;

  fs::path file(const std::string& name) const { return out_dir / name; }

  void wrote(const fs::path& p) const { out << p.string() << '\n'; }
};

void prepare_output(const Context& ctx) {
  std::error_code ec;
  fs::create_directories(ctx.out_dir, ec);
  if (ec) {
    throw IoError("cannot create output directory '" + ctx.out_dir.string() + "': " + ec.message());
  }
  const fs::path p = ctx.file("resolved_config.json");
  diag::write_text_file(p, to_json(ctx.cfg).dump(2));
  ctx.wrote(p);
}

data::Dataset obtain_dataset(const DataSource& src) {
  if (src.dataset_path) return data::load_dataset(*src.dataset_path);
  if (src.kind == "toy_seg") return data::gen_toy_seg_dataset(src.toy_seg, src.num_images);
  return data::point_cloud_dataset(data::gen_point_cloud(src.point_cloud),
                                   src.point_cloud.k_true);
}

diag::MetricRecord tag_for(const model::TrainConfig& tc, std::size_t layers) {
  diag::MetricRecord tag;
  tag.eta = tc.hem.step_size;
  tag.layers = layers;
  tag.kernel = tc.model.use_hem ? gmm::to_string(tc.hem.kernel) : "none";
  tag.seed = tc.seed;
  return tag;
}

std::vector<diag::MetricRecord> step_records(const model::MetricsHistory& history,
                                             const model::TrainConfig& tc) {
  std::vector<diag::MetricRecord> out;
  const auto tag = tag_for(tc, tc.hem.num_layers_train);
  auto push = [&](std::size_t step, std::size_t layer, const char* metric, double value) {
    diag::MetricRecord r = tag;
    r.step = step;
    r.layer = layer;
    r.metric = metric;
    r.value = value;
    out.push_back(std::move(r));
  };
  for (const auto& s : history.steps) {
    push(s.step, 0, "loss", s.loss);
    push(s.step, 0, "accuracy", s.accuracy);
    for (std::size_t t = 0; t < s.elbo.size(); ++t) push(s.step, t + 1, "elbo", s.elbo[t]);
  }
  return out;
}

void append_eval(std::vector<diag::MetricRecord>& out, const model::EvalResult& ev,
                 const model::TrainConfig& tc, std::size_t step, std::size_t layers) {
  auto tag = tag_for(tc, layers);
  tag.step = step;
  auto push = [&](const char* metric, double value) {
    diag::MetricRecord r = tag;
    r.metric = metric;
    r.value = value;
    out.push_back(r);
  };
  push("eval_accuracy", ev.accuracy);
  push("eval_loss", ev.loss);
  if (tc.model.use_hem) push("eval_final_elbo", ev.final_elbo);
}

std::vector<diag::MetricRecord> grad_records(const model::MetricsHistory& history,
                                             const model::TrainConfig& tc) {
  std::vector<diag::MetricRecord> out;
  const auto tag = tag_for(tc, tc.hem.num_layers_train);
  for (const auto& s : history.grad_stats) diag::append_grad_stats(out, s, tag);
  return out;
}

int training_failure(const Context& ctx, const TrainingError& e) {
  ordered_json dump;
  dump["command"] = ctx.cfg.command;
  dump["error"] = e.what();
  dump["config"] = to_json(ctx.cfg);
  const fs::path p = ctx.file("failure_dump.json");
  diag::write_text_file(p, dump.dump(2));
  ctx.err << "training failed: " << e.what() << '\n' << "diagnostic dump: " << p.string() << '\n';
  ctx.wrote(p);
  return kExitTraining;
}

int cmd_gen(const Context& ctx) {
  const data::Dataset ds = obtain_dataset(ctx.cfg.data);
  prepare_output(ctx);
  const fs::path p = ctx.file("dataset.bin");
  data::save_dataset(ds, p);
  ctx.err << data::digest(ds) << '\n';
  ctx.wrote(p);
  return kExitOk;
}

int cmd_train(const Context& ctx) {
  const auto& tc = ctx.cfg.train;
  const data::Dataset ds = obtain_dataset(ctx.cfg.data);
  prepare_output(ctx);
  model::TrainResult result;
  try {
    result = model::train(ds, tc);
  } catch (const TrainingError& e) {
    return training_failure(ctx, e);
  }
  const auto ev = model::evaluate(ds, result.params, result.state, tc.hem, tc.model);

  auto metrics = step_records(result.history, tc);
  append_eval(metrics, ev, tc, result.history.steps.size(), tc.hem.num_layers_eval);
  const auto grads = grad_records(result.history, tc);

  const fs::path metrics_path = ctx.file("metrics.csv");
  const fs::path grads_path = ctx.file("grads.csv");
  const fs::path ckpt_path = ctx.file("checkpoint.bin");
  const fs::path summary_path = ctx.file("summary.json");
  diag::emit_csv(metrics, metrics_path);
  diag::emit_csv(grads, grads_path);
  data::save_container(model::to_checkpoint(result.params, result.state), ckpt_path);
  diag::emit_summary_json(metrics, summary_path);
  ctx.err << "train: " << result.history.steps.size() << " steps, eval accuracy "
          << ev.accuracy << " at T=" << tc.hem.num_layers_eval << '\n';
  for (const auto& p : {metrics_path, grads_path, ckpt_path, summary_path}) ctx.wrote(p);
  return kExitOk;
}

struct SweepRow {
  double eta = 0.0;
  std::size_t t_train = 0;
  std::size_t t_eval = 0;
  double accuracy = 0.0;
  double final_elbo = 0.0;
  std::string status;
};

std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

std::vector<SweepRow> run_sweep_cell(const Context& ctx, const data::Dataset& ds, double eta,
                                     std::size_t t_train, const fs::path& cell_dir) {
  model::TrainConfig tc = ctx.cfg.train;
  tc.hem.step_size = eta;
  tc.hem.num_layers_train = t_train;
  std::vector<SweepRow> rows;
  try {
    const auto result = model::train(ds, tc);
    auto metrics = step_records(result.history, tc);
    for (std::size_t t_eval : ctx.cfg.sweep.t_eval) {
      const auto ev = model::evaluate(ds, result.params, result.state, tc.hem, tc.model, t_eval);
      append_eval(metrics, ev, tc, result.history.steps.size(), t_eval);
      rows.push_back({eta, t_train, t_eval, ev.accuracy, ev.final_elbo, "ok"});
    }
    std::error_code ec;
    fs::create_directories(cell_dir, ec);
    if (ec) throw IoError("cannot create '" + cell_dir.string() + "': " + ec.message());
    diag::emit_csv(metrics, cell_dir / "metrics.csv");
    data::save_container(model::to_checkpoint(result.params, result.state),
                         cell_dir / "checkpoint.bin");
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    rows.clear();
    for (std::size_t t_eval : ctx.cfg.sweep.t_eval) {
      rows.push_back({eta, t_train, t_eval, std::nan(""), std::nan(""),
                      "failed: " + csv_safe(e.what())});
    }
  }
  return rows;
}

int cmd_sweep(const Context& ctx) {
  const auto& sw = ctx.cfg.sweep;
  const data::Dataset ds = obtain_dataset(ctx.cfg.data);
  prepare_output(ctx);

  struct Cell {
    double eta;
    std::size_t t_train;
    fs::path dir;
  };
  std::vector<Cell> cells;
  for (double eta : sw.eta_train) {
    for (std::size_t t : sw.t_train) {
      cells.push_back({eta, t,
                       ctx.out_dir / "cells" /
                           ("eta_" + diag::format_double(eta) + "_t_" + std::to_string(t))});
    }
  }
  std::vector<std::vector<SweepRow>> results(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  auto work = [&](std::size_t i) {
    try {
      results[i] = run_sweep_cell(ctx, ds, cells[i].eta, cells[i].t_train, cells[i].dir);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (sw.parallel && cells.size() > 1) {
    const std::size_t workers =
        std::min<std::size_t>(cells.size(), std::max(1u, std::thread::hardware_concurrency()));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < cells.size(); i = next++) work(i);
      });
    }
    for (auto& th : pool) th.join();
  } else {
    for (std::size_t i = 0; i < cells.size(); ++i) work(i);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string csv = "eta_train,t_train,t_eval,accuracy,final_elbo,status\n";
  std::size_t failed = 0;
  for (const auto& cell_rows : results) {
    for (const auto& r : cell_rows) {
      const bool ok = r.status == "ok";
      csv += diag::format_double(r.eta) + ',' + std::to_string(r.t_train) + ',' +
             std::to_string(r.t_eval) + ',' + (ok ? diag::format_double(r.accuracy) : "") + ',' +
             (ok ? diag::format_double(r.final_elbo) : "") + ',' + r.status + '\n';
    }
    if (!cell_rows.empty() && cell_rows.front().status != "ok") {
      ++failed;
      ctx.err << "sweep: cell eta=" << cell_rows.front().eta
              << " T=" << cell_rows.front().t_train << " " << cell_rows.front().status << '\n';
    }
  }
  const fs::path p = ctx.file("sweep.csv");
  diag::write_text_file(p, csv);
  ctx.wrote(p);
  for (const auto& c : cells) {
    if (fs::exists(c.dir)) ctx.wrote(c.dir);
  }
  return failed == cells.size() ? kExitTraining : kExitOk;
}

std::pair<model::ToyModelParams, BasisState> load_checkpoint_for(const RunConfig& cfg,
                                                                 const data::Dataset& ds) {
  auto [params, state] = model::from_checkpoint(data::load_container(*cfg.fig3.checkpoint));
  const auto& mc = cfg.train.model;
  const std::size_t in_dim = mc.hidden > 0 ? params.hidden_weight.rows()
                                           : params.backbone_weight.rows();
  if (params.backbone_weight.cols() != mc.channels || params.hidden_weight.cols() != mc.hidden ||
      state.running_mu.rows() != mc.num_bases || state.running_mu.cols() != mc.channels ||
      params.num_classes() != ds.num_classes || in_dim != ds.feature_dim()) {
    throw ConfigError("fig3.checkpoint does not match the model section or the dataset");
  }
  return {std::move(params), std::move(state)};
}

int cmd_fig3(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto& f = cfg.fig3;
  const data::Dataset ds = obtain_dataset(cfg.data);
  std::optional<std::pair<model::ToyModelParams, BasisState>> fixed;
  if (f.source == Fig3Source::Checkpoint) fixed = load_checkpoint_for(cfg, ds);
  prepare_output(ctx);
  if (f.source == Fig3Source::Init) {
    fixed = model::initial_model(ds.feature_dim(), ds.num_classes, cfg.train);
  }

  const auto probe = model::probe_indices(ds.samples.size(), cfg.train.probe_size, cfg.seed);
  std::vector<diag::MetricRecord> elbo_rows, grad_rows;
  std::vector<std::vector<double>> curves;
  for (double eta : f.eta_grid) {
    model::TrainConfig tc = cfg.train;
    tc.hem.step_size = eta;
    std::pair<model::ToyModelParams, BasisState> m;
    if (fixed) {
      m = *fixed;
    } else {
      try {
        auto r = model::train(ds, tc);
        m = {std::move(r.params), std::move(r.state)};
      } catch (const TrainingError& e) {
        return training_failure(ctx, e);
      }
    }
    tc.hem.num_layers_train = f.num_layers;

    std::vector<double> curve(f.num_layers, 0.0);
    for (std::size_t idx : probe) {
      const auto fwd = model::model_forward(ds.samples[idx].raw_features, m.first, m.second,
                                            tc.hem, tc.model, f.num_layers);
      for (std::size_t t = 0; t < f.num_layers; ++t) {
        curve[t] += fwd.trace->elbo[t].total / static_cast<double>(probe.size());
      }
    }
    auto tag = tag_for(tc, f.num_layers);
    for (std::size_t t = 0; t < f.num_layers; ++t) {
      diag::MetricRecord r = tag;
      r.layer = t + 1;
      r.metric = "elbo";
      r.value = curve[t];
      elbo_rows.push_back(r);
    }
    curves.push_back(std::move(curve));

    const auto stats =
        model::probe_grad_profile(ds, probe, m.first, m.second, tc.hem, tc.model, 0);
    diag::append_grad_stats(grad_rows, stats, tag);
    double mass = 0.0;
    for (double v : stats.per_layer_mean_abs_grad_x) mass += v;
    for (std::size_t t = 0; t < stats.per_layer_mean_abs_grad_x.size() && mass > 0.0; ++t) {
      diag::MetricRecord r = tag;
      r.layer = t + 1;
      r.metric = "grad_x_nstep_share";
      r.value = stats.per_layer_mean_abs_grad_x[t] / mass;
      grad_rows.push_back(r);
    }
  }

  const fs::path elbo_path = ctx.file("elbo_curve.csv");
  const fs::path grad_path = ctx.file("grad_profile.csv");
  diag::emit_csv(elbo_rows, elbo_path);
  diag::emit_csv(grad_rows, grad_path);
  ctx.wrote(elbo_path);
  ctx.wrote(grad_path);

  // With shared parameters, full EM steps must reach at least the ELBO of every
  // damped run at each depth.
  const auto one = std::find(f.eta_grid.begin(), f.eta_grid.end(), 1.0);
  if (cfg.train.hem.kernel != gmm::Kernel::Rbf || one == f.eta_grid.end()) return kExitOk;
  if (!fixed) {
    ctx.err << "fig3: ELBO dominance not checked, parameters differ per step size\n";
    return kExitOk;
  }
  const auto& top = curves[static_cast<std::size_t>(one - f.eta_grid.begin())];
  std::vector<std::string> violations;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    for (std::size_t t = 0; t < f.num_layers; ++t) {
      const double slack = 1e-9 * std::max(1.0, std::abs(curves[i][t]));
      if (top[t] < curves[i][t] - slack) {
        std::ostringstream os;
        os << "eta=" << f.eta_grid[i] << " layer " << (t + 1) << ": " << curves[i][t] << " > "
           << top[t];
        violations.push_back(os.str());
      }
    }
  }
  if (violations.empty()) return kExitOk;
  ctx.err << "FAILED: eta=1 ELBO curve does not dominate\n";
  for (const auto& v : violations) ctx.err << "  " << v << '\n';
  return kExitCheckFailed;
}

int cmd_gradcheck(const Context& ctx) {
  prepare_output(ctx);
  const auto results = checks::run_all(ctx.cfg.gradcheck);
  ordered_json checks_json = ordered_json::array();
  std::vector<std::string> failing;
  for (const auto& r : results) {
    ctx.err << (r.passed ? "PASS " : "FAIL ") << r.name << ": max error " << r.worst
            << " (tolerance " << r.tolerance << ", " << r.instances << " instances)";
    if (!r.passed) ctx.err << " at " << r.detail;
    ctx.err << '\n';
    if (!r.passed) failing.push_back(r.name);
    checks_json.push_back({{"check", r.name},
                      {"passed", r.passed},
                      {"instances", r.instances},
                      {"max_error", std::isfinite(r.worst) ? ordered_json(r.worst) : ordered_json()},
                      {"tolerance", r.tolerance},
                      {"worst_case", r.detail}});
  }
  ordered_json report;
  report["seed"] = ctx.cfg.seed;
  report["passed"] = failing.empty();
  report["checks"] = checks_json;
  const fs::path p = ctx.file("gradcheck.json");
  diag::write_text_file(p, report.dump(2));
  ctx.wrote(p);
  if (failing.empty()) return kExitOk;
  ctx.err << "FAILED:";
  for (const auto& name : failing) ctx.err << " [" << name << "]";
  ctx.err << '\n';
  return kExitCheckFailed;
}

json read_config_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace

int run(const Invocation& inv, std::ostream& out, std::ostream& err) {
  try {
    const json doc = read_config_file(inv.config_path);
    const fs::path base_dir = fs::absolute(inv.config_path).parent_path();
    const RunConfig cfg = parse_config(inv.command, doc, inv.seed, base_dir);
    if (inv.out_dir.empty()) throw ConfigError("an output directory is required");
    const Context ctx{cfg, inv.out_dir, out, err};
    if (cfg.command == "gen") return cmd_gen(ctx);
    if (cfg.command == "train") return cmd_train(ctx);
    if (cfg.command == "sweep") return cmd_sweep(ctx);
    if (cfg.command == "fig3") return cmd_fig3(ctx);
    return cmd_gradcheck(ctx);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const FormatError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << '\n';
    return kExitTraining;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace hem::cli
