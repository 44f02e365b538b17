#include "stmoe/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <Eigen/Core>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "stmoe/errors.hpp"
#include "stmoe/eval_stats.hpp"
#include "stmoe/io.hpp"
#include "stmoe/log.hpp"
#include "stmoe/random.hpp"
#include "stmoe/synthgen.hpp"

namespace stmoe::cli {

using json = nlohmann::ordered_json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError("unknown key '" + key + "' in " + where + " (allowed: " + list + ")");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

json metrics_json(const eval::MetricReport& r) {
  return {{"n", r.n},
          {"mse", r.mse},
          {"rmse", r.rmse},
          {"mae", r.mae},
          {"mape", r.mape ? json(*r.mape) : json(nullptr)},
          {"mape_entries", r.mape_entries}};
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) { io::write_file(p, text); }

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw ConfigError("cannot create output directory " + dir.string());
  }
}

}  // namespace

void RunConfig::validate() const {
  fusion.validate();
  if (!(split.test_fraction > 0.0 && split.test_fraction < 1.0) ||
      !(split.val_fraction > 0.0 && split.val_fraction < 1.0)) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }
  model::ModelConfig probe = model;
  probe.height = probe.width = 1;
  probe.flow_channels = fusion.flow_channels();
  probe.ext_width = 1;
  probe.validate();
  train.validate();
  train.loss.validate(model.experts);
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  check_keys(j, {"version", "data", "out", "seed", "fusion", "split", "norm_range", "model", "train", "loss"},
             "config");
  if (!j.contains("version")) throw ConfigError("config lacks 'version'");
  if (j.at("version") != run_config_version) {
    throw ConfigError("unsupported config version " + j.at("version").dump() + " (expected " +
                      std::to_string(run_config_version) + ")");
  }
  RunConfig c;
  std::string s;
  if (j.contains("data")) {
    read(j, "data", s, "config");
    c.data = s;
  }
  if (j.contains("out")) {
    read(j, "out", s, "config");
    c.out = s;
  }
  read(j, "seed", c.seed, "config");
  if (j.contains("fusion")) {
    const auto& f = j.at("fusion");
    check_keys(f, {"closeness", "period", "trend"}, "fusion");
    read(f, "closeness", c.fusion.closeness, "fusion");
    read(f, "period", c.fusion.period, "fusion");
    read(f, "trend", c.fusion.trend, "fusion");
  }
  if (j.contains("split")) {
    const auto& f = j.at("split");
    check_keys(f, {"test_fraction", "val_fraction"}, "split");
    read(f, "test_fraction", c.split.test_fraction, "split");
    read(f, "val_fraction", c.split.val_fraction, "split");
  }
  if (j.contains("norm_range")) {
    read(j, "norm_range", s, "config");
    if (s == "symmetric") c.norm_range = flow::NormRange::symmetric;
    else if (s == "unit") c.norm_range = flow::NormRange::unit;
    else throw ConfigError("norm_range must be 'symmetric' or 'unit'");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"experts", "backbone", "filters", "gate_filters", "conv_layers", "recurrent_layers",
                   "ext_channels", "norm", "variant"},
               "model");
    read(m, "experts", c.model.experts, "model");
    if (m.contains("backbone")) {
      read(m, "backbone", s, "model");
      c.model.backbone = model::backbone_from_string(s);
    }
    read(m, "filters", c.model.filters, "model");
    read(m, "gate_filters", c.model.gate_filters, "model");
    read(m, "conv_layers", c.model.conv_layers, "model");
    read(m, "recurrent_layers", c.model.recurrent_layers, "model");
    read(m, "ext_channels", c.model.ext_channels, "model");
    if (m.contains("norm")) {
      read(m, "norm", s, "model");
      if (s == "batch") c.model.norm = model::Norm::batch;
      else if (s == "none") c.model.norm = model::Norm::none;
      else throw ConfigError("model.norm must be 'batch' or 'none'");
    }
    if (m.contains("variant")) {
      read(m, "variant", s, "model");
      c.model.variant = model::variant_from_string(s);
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, {"batch_size", "learning_rate", "max_epochs", "patience", "clip_norm", "beta1", "beta2"},
               "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "learning_rate", c.train.learning_rate, "train");
    read(t, "max_epochs", c.train.max_epochs, "train");
    read(t, "patience", c.train.patience, "train");
    read(t, "clip_norm", c.train.clip_norm, "train");
    read(t, "beta1", c.train.beta1, "train");
    read(t, "beta2", c.train.beta2, "train");
  }
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"lambda_er", "lambda_eid", "n_top", "er_variant", "residual"}, "loss");
    read(l, "lambda_er", c.train.loss.lambda_er, "loss");
    read(l, "lambda_eid", c.train.loss.lambda_eid, "loss");
    read(l, "n_top", c.train.loss.n_top, "loss");
    if (l.contains("er_variant")) {
      read(l, "er_variant", s, "loss");
      c.train.loss.er_variant = loss::er_variant_from_string(s);
    }
    if (l.contains("residual")) {
      read(l, "residual", s, "loss");
      if (s == "per_cell") c.train.loss.residual = loss::ResidualDomain::per_cell;
      else if (s == "global") c.train.loss.residual = loss::ResidualDomain::global;
      else throw ConfigError("loss.residual must be 'per_cell' or 'global'");
    }
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_run_config(io::read_file(path));
}

std::string run_config_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  json j;
  j["version"] = run_config_version;
  j["data"] = c.data.string();
  j["out"] = c.out.string();
  j["seed"] = c.seed;
  j["fusion"] = {{"closeness", c.fusion.closeness}, {"period", c.fusion.period}, {"trend", c.fusion.trend}};
  j["split"] = {{"test_fraction", c.split.test_fraction}, {"val_fraction", c.split.val_fraction}};
  j["norm_range"] = c.norm_range == flow::NormRange::symmetric ? "symmetric" : "unit";
  j["model"] = {{"experts", m.experts},
                {"backbone", model::to_string(m.backbone)},
                {"filters", m.filters},
                {"gate_filters", m.gate_filters},
                {"conv_layers", m.conv_layers},
                {"recurrent_layers", m.recurrent_layers},
                {"ext_channels", m.ext_channels},
                {"norm", m.norm == model::Norm::batch ? "batch" : "none"},
                {"variant", model::to_string(m.variant)}};
  j["train"] = {{"batch_size", t.batch_size}, {"learning_rate", t.learning_rate},
                {"max_epochs", t.max_epochs}, {"patience", t.patience},
                {"clip_norm", t.clip_norm},   {"beta1", t.beta1},
                {"beta2", t.beta2}};
  j["loss"] = {{"lambda_er", t.loss.lambda_er},
               {"lambda_eid", t.loss.lambda_eid},
               {"n_top", t.loss.n_top},
               {"er_variant", loss::to_string(t.loss.er_variant)},
               {"residual", t.loss.residual == loss::ResidualDomain::per_cell ? "per_cell" : "global"}};
  return j.dump(2) + "\n";
}

fusion::Dataset load_dataset(const flow::StFlowData& data, const RunConfig& cfg) {
  fusion::FusionConfig f = cfg.fusion;
  f.day_offset = data.series.grid.steps_per_day();
  f.week_offset = 7 * f.day_offset;
  return fusion::make_dataset(data.series, data.externals, f, cfg.split, cfg.norm_range);
}

namespace {

// Model geometry from the dataset; external channels dropped when the
// dataset carries no external factors.
model::ModelConfig resolve_model(RunConfig& cfg, const fusion::Dataset& ds) {
  if (ds.external_width == 0 && cfg.model.ext_channels > 0) {
    log_warning("dataset has no external factors; using ext_channels = 0");
    cfg.model.ext_channels = 0;
  }
  return model::with_geometry(cfg.model, ds);
}

struct Common {
  std::string config;
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string er_variant;
  std::size_t ntop = 0;
  bool ntop_set = false;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (!c.data.empty()) cfg.data = c.data;
  if (!c.out.empty()) cfg.out = c.out;
  if (c.seed_set) cfg.seed = c.seed;
  cfg.train.seed = cfg.seed;
  if (!c.er_variant.empty()) cfg.train.loss.er_variant = loss::er_variant_from_string(c.er_variant);
  if (c.ntop_set) cfg.train.loss.n_top = c.ntop;
  if (cfg.data.empty()) throw ConfigError("no dataset given (config 'data' or --data)");
  if (cfg.out.empty()) throw ConfigError("no output directory given (config 'out' or --out)");
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_loss_flags) {
  app->add_option("--config", c.config, "run configuration JSON");
  app->add_option("--data", c.data, "stflow dataset directory");
  app->add_option("--out", c.out, "output directory");
  app->add_option_function<std::uint64_t>("--seed", [&c](const std::uint64_t& s) {
    c.seed = s;
    c.seed_set = true;
  }, "random seed");
  if (with_loss_flags) {
    app->add_option("--er-variant", c.er_variant, "responsibility loss variant")
        ->check(CLI::IsMember({"general", "logmix"}));
    app->add_option_function<std::size_t>("--ntop", [&c](const std::size_t& n) {
      c.ntop = n;
      c.ntop_set = true;
    }, "experts entering the discrepancy loss");
  }
}

void read_threads_env() {
  const char* v = std::getenv("STMOE_THREADS");
  if (!v) return;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) {
    throw ConfigError("STMOE_THREADS must be a positive integer, got '" + std::string(v) + "'");
  }
  Eigen::setNbThreads(static_cast<int>(n));
}

// generate ---------------------------------------------------------------

struct GenerateArgs {
  std::string preset;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool deterministic = false;
  bool no_weekend_shift = false;
  std::size_t weeks = 0;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out is required");
  synth::SynthConfig cfg;
  std::string preset = a.preset;
  json j;
  if (!a.config.empty()) {
    try {
      j = json::parse(io::read_file(a.config));
    } catch (const json::exception& e) {
      throw ConfigError("synthetic config is not valid JSON: " + std::string(e.what()));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    check_keys(j, {"version", "preset", "seed", "weeks", "weekend_shift", "deterministic"}, "synthetic config");
    if (j.value("version", 0) != run_config_version) throw ConfigError("synthetic config needs version 1");
    if (preset.empty()) read(j, "preset", preset, "synthetic config");
  }
  if (preset.empty()) throw ConfigError("--preset or --config is required");
  cfg = synth::builtin_city(preset);
  if (!j.is_null()) {
    read(j, "seed", cfg.seed, "synthetic config");
    read(j, "weeks", cfg.weeks, "synthetic config");
    read(j, "weekend_shift", cfg.weekend_shift, "synthetic config");
    read(j, "deterministic", cfg.deterministic, "synthetic config");
  }
  if (a.seed_set) cfg.seed = a.seed;
  if (a.weeks > 0) cfg.weeks = a.weeks;
  if (a.deterministic) cfg.deterministic = true;
  if (a.no_weekend_shift) cfg.weekend_shift = false;
  const auto data = synth::generate(cfg);
  ensure_dir(a.out);
  synth::write_synthetic(a.out, cfg, data);
  out << "wrote " << a.out << " (" << data.series.size() << " intervals, "
      << cfg.patterns.size() << " patterns)\nmanifest " << flow::manifest_hash(a.out) << "\n";
  return ok;
}

// train ------------------------------------------------------------------

std::map<std::string, std::string> checkpoint_meta(const RunConfig& cfg, const std::string& manifest,
                                                   std::size_t best_epoch, double best_val) {
  return {{"run_config", run_config_json(cfg)},
          {"manifest_sha1", manifest},
          {"best_epoch", std::to_string(best_epoch)},
          {"best_val_mse", fmt(best_val)}};
}

int cmd_train(const Common& c, bool resume, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(c);
  const auto data = flow::read_stflow(cfg.data);
  const std::string manifest = flow::manifest_hash(cfg.data);
  const auto ds = load_dataset(data, cfg);
  const auto mc = resolve_model(cfg, ds);
  ensure_dir(cfg.out);
  const auto state_path = cfg.out / "state.bin";
  const auto ckpt_path = cfg.out / "checkpoint.bin";

  train::TrainState state;
  const bool resuming = resume && std::filesystem::exists(state_path);
  if (resuming) {
    state = train::load_state(state_path);
    if (model::model_config_to_json(state.net.config) != model::model_config_to_json(mc)) {
      throw ConfigError("saved training state in " + cfg.out.string() +
                        " was created with a different model configuration");
    }
    out << "resuming after epoch " << state.epoch << "\n";
  } else {
    state = train::initial_state(model::init_model(mc, derive_seed(cfg.seed, 1)));
  }

  train::TrainHooks hooks;
  hooks.on_epoch = [&](const train::TrainState& s) {
    const auto& r = s.history.back();
    out << "epoch " << r.epoch << " train_total " << fmt(r.train.total) << " val_mse " << fmt(r.val_mse)
        << (s.best_epoch == s.epoch ? " *" : "") << "\n";
    if (s.best_epoch == s.epoch) {
      model::save_checkpoint(ckpt_path, s.best, checkpoint_meta(cfg, manifest, s.best_epoch, s.best_val_mse));
    }
    train::save_state(state_path, s);
  };
  const auto result = train::train(ds, std::move(state), cfg.train, hooks);

  {
    std::ofstream h(cfg.out / "history.csv", std::ios::binary);
    train::write_history_csv(h, result.history);
  }
  {
    std::ofstream s(cfg.out / "steps.csv",
                    resuming ? std::ios::binary | std::ios::app : std::ios::binary | std::ios::trunc);
    std::ostringstream buf;
    train::write_steps_csv(buf, result.steps);
    std::string text = buf.str();
    if (resuming) text = text.substr(text.find('\n') + 1);
    s << text;
  }
  if (!std::filesystem::exists(ckpt_path)) {
    model::save_checkpoint(ckpt_path, result.best, checkpoint_meta(cfg, manifest, 0, result.best_val_mse));
  }
  json meta;
  meta["config"] = json::parse(run_config_json(cfg));
  meta["seed"] = cfg.seed;
  meta["dataset_manifest_sha1"] = manifest;
  meta["trainable_parameters"] = result.best.params.trainable_scalars();
  meta["epochs"] = result.history.size();
  meta["best_epoch"] = result.best_epoch;
  meta["best_val_mse"] = std::isfinite(result.best_val_mse) ? json(result.best_val_mse) : json(nullptr);
  meta["stopped_early"] = result.stopped_early;
  meta["diverged"] = result.diverged;
  meta["created_at"] = utc_now();
  write_text(cfg.out / "run.json", meta.dump(2) + "\n");
  if (result.diverged) {
    err << "error: " << result.divergence << " (best checkpoint kept at " << ckpt_path.string() << ")\n";
    return numerical_error;
  }
  out << "best epoch " << result.best_epoch << " val_mse " << fmt(result.best_val_mse) << "\n";
  return ok;
}

// evaluate ---------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  std::string split = "test";
  bool ablate_gs = false;
  bool ablate_gt = false;
  std::size_t quade_batch = 32;
  bool mape_truth = false;
};

struct Loaded {
  model::StExpertNet net;
  RunConfig cfg;
  flow::StFlowData data;
  fusion::Dataset ds;
};

Loaded load_for_eval(const std::string& checkpoint, const std::string& data_override) {
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  Loaded l;
  std::map<std::string, std::string> meta;
  l.net = model::load_checkpoint(checkpoint, &meta);
  if (!meta.count("run_config")) throw DataError("checkpoint lacks its run configuration");
  l.cfg = parse_run_config(meta.at("run_config"));
  if (!data_override.empty()) l.cfg.data = data_override;
  l.data = flow::read_stflow(l.cfg.data);
  l.ds = load_dataset(l.data, l.cfg);
  const auto& mc = l.net.config;
  const auto expect = model::with_geometry(mc, l.ds);
  if (expect.height != mc.height || expect.width != mc.width || expect.flow_channels != mc.flow_channels ||
      expect.ext_width != mc.ext_width) {
    throw DataError("dataset geometry (h=" + std::to_string(expect.height) + ", w=" +
                    std::to_string(expect.width) + ", flow channels=" + std::to_string(expect.flow_channels) +
                    ", external width=" + std::to_string(expect.ext_width) + ") does not match checkpoint (h=" +
                    std::to_string(mc.height) + ", w=" + std::to_string(mc.width) + ", flow channels=" +
                    std::to_string(mc.flow_channels) + ", external width=" + std::to_string(mc.ext_width) + ")");
  }
  return l;
}

model::Variant pick_variant(const model::StExpertNet& net, bool gs, bool gt) {
  if (gs && gt) throw ConfigError("--ablate-gs and --ablate-gt are mutually exclusive");
  if (gs) return model::Variant::no_gs;
  if (gt) return model::Variant::no_gt;
  return net.config.variant;
}

const std::vector<fusion::InputSample>& pick_split(const fusion::Dataset& ds, const std::string& s) {
  if (s == "test") return ds.test;
  if (s == "val") return ds.val;
  if (s == "train") return ds.train;
  throw ConfigError("--split must be train, val or test");
}

Tensor stack_targets(const std::vector<fusion::InputSample>& samples) {
  const Shape& ys = samples.front().y.shape();
  Tensor out(Shape{samples.size(), ys[0], ys[1], ys[2]});
  const std::size_t per = samples.front().y.size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].y.data().begin(), samples[i].y.data().end(),
              out.data().begin() + static_cast<long>(i * per));
  }
  return out;
}

void write_match(const std::filesystem::path& dir, const eval::MatchReport& m,
                 const std::vector<std::string>& names) {
  std::ostringstream s;
  s << "expert,assigned_pattern";
  for (const auto& n : names) s << ',' << n;
  s << '\n';
  for (std::size_t i = 0; i < m.correlation.size(); ++i) {
    s << i << ',' << (m.assignment[i] >= 0 ? names[static_cast<std::size_t>(m.assignment[i])] : "");
    for (double v : m.correlation[i]) s << ',' << fmt(v);
    s << '\n';
  }
  write_text(dir / "match.csv", s.str());
}

std::vector<std::string> pattern_names(const std::filesystem::path& data_dir, std::size_t m) {
  std::vector<std::string> names;
  const auto p = data_dir / "patterns.json";
  if (std::filesystem::exists(p)) {
    try {
      for (const auto& e : json::parse(io::read_file(p)).at("patterns")) names.push_back(e.at("name"));
    } catch (const json::exception&) {
      names.clear();
    }
  }
  if (names.size() != m) {
    names.clear();
    for (std::size_t i = 0; i < m; ++i) names.push_back("pattern" + std::to_string(i));
  }
  return names;
}

int cmd_evaluate(const EvalArgs& a, std::ostream& out) {
  auto l = load_for_eval(a.checkpoint, a.data);
  const auto variant = pick_variant(l.net, a.ablate_gs, a.ablate_gt);
  const auto& samples = pick_split(l.ds, a.split);
  eval::MetricOptions opt;
  if (a.mape_truth) opt.mape_denominator = eval::MapeDenominator::truth;
  const Tensor pred = model::predict(l.net, samples, variant);
  const auto report = eval::metrics(pred, stack_targets(samples), l.ds.stats, opt);

  json j;
  j["split"] = a.split;
  j["variant"] = model::to_string(variant);
  j["metrics"] = metrics_json(report);
  const std::size_t k = l.net.config.experts;
  eval::QuadeMatrix quade;
  if (k >= 2 && samples.size() >= 3) {
    quade = eval::batched_expert_quade(eval::gated_outputs(l.net, samples, variant), a.quade_batch);
    json rows = json::array();
    for (std::size_t i = 0; i < k; ++i) {
      json row = json::array();
      for (std::size_t jx = 0; jx < k; ++jx) row.push_back(quade.at(i, jx));
      rows.push_back(row);
    }
    j["quade"] = {{"batch", a.quade_batch},
                  {"p_values", rows},
                  {"max_off_diagonal", quade.max_off_diagonal()},
                  {"median_off_diagonal", quade.median_off_diagonal()}};
  }
  std::optional<eval::MatchReport> match;
  if (l.data.truth_masks) {
    match = eval::match_experts_to_patterns(eval::mean_inflow_attention(l.net, samples, variant),
                                            *l.data.truth_masks);
    j["match"] = {{"assignment", match->assignment},
                  {"correlation", match->correlation},
                  {"mean_matched_correlation", match->mean_matched_correlation}};
  }
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text(std::filesystem::path(a.out) / "metrics.json", j.dump(2) + "\n");
    if (!quade.p.empty()) {
      std::ostringstream s;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t jx = 0; jx < k; ++jx) s << (jx ? "," : "") << fmt(quade.at(i, jx));
        s << '\n';
      }
      write_text(std::filesystem::path(a.out) / "quade.csv", s.str());
    }
    if (match) write_match(a.out, *match, pattern_names(l.cfg.data, l.data.truth_masks->dim(0)));
  }
  out << j.dump(2) << "\n";
  return ok;
}

// ablate -----------------------------------------------------------------

int cmd_ablate(const Common& c, std::size_t repeats, std::ostream& out) {
  RunConfig base = resolve(c);
  if (repeats < 1) throw ConfigError("--repeats must be >= 1");
  const auto data = flow::read_stflow(base.data);
  const auto ds = load_dataset(data, base);
  ensure_dir(base.out);
  std::ostringstream csv;
  csv << "variant,seed,best_epoch,val_mse,test_mse\n";
  json summary = json::object();
  for (auto v : {model::Variant::full, model::Variant::no_gs, model::Variant::no_gt}) {
    double sum = 0.0;
    for (std::size_t r = 0; r < repeats; ++r) {
      RunConfig cfg = base;
      cfg.seed = base.seed + r;
      cfg.train.seed = cfg.seed;
      cfg.model.variant = v;
      const auto mc = resolve_model(cfg, ds);
      const auto res = train::train(ds, model::init_model(mc, derive_seed(cfg.seed, 1)), cfg.train);
      if (res.diverged) throw NumericalError(model::to_string(v) + ": " + res.divergence);
      const double test = train::denormalized_mse(res.best, ds.test, ds.stats, v);
      csv << model::to_string(v) << ',' << cfg.seed << ',' << res.best_epoch << ',' << fmt(res.best_val_mse)
          << ',' << fmt(test) << '\n';
      out << model::to_string(v) << " seed " << cfg.seed << " test_mse " << fmt(test) << "\n";
      sum += test;
    }
    summary[model::to_string(v)] = sum / static_cast<double>(repeats);
  }
  write_text(base.out / "ablation.csv", csv.str());
  write_text(base.out / "ablation.json", json{{"mean_test_mse", summary}}.dump(2) + "\n");
  out << summary.dump() << "\n";
  return ok;
}

// search -----------------------------------------------------------------

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw ConfigError(std::string("bad value '") + item + "' in " + what);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(std::string("empty list for ") + what);
  return out;
}

int cmd_search(const Common& c, const std::string& experts, const std::string& lambdas,
               const std::string& closeness, std::size_t repeats, std::ostream& out) {
  RunConfig cfg = resolve(c);
  const auto data = flow::read_stflow(cfg.data);
  train::SearchSpec spec;
  if (!experts.empty()) spec.experts = parse_list<std::size_t>(experts, "--experts");
  if (!lambdas.empty()) spec.lambdas = parse_list<double>(lambdas, "--lambdas");
  if (!closeness.empty()) spec.closeness = parse_list<std::size_t>(closeness, "--closeness");
  spec.repeats = repeats;
  const auto probe = load_dataset(data, cfg);
  const auto mc = resolve_model(cfg, probe);
  auto make = [&](const fusion::FusionConfig& f) {
    RunConfig r = cfg;
    r.fusion = f;
    return load_dataset(data, r);
  };
  const auto report = train::grid_search(make, cfg.fusion, mc, cfg.train, spec);
  ensure_dir(cfg.out);
  {
    std::ostringstream s;
    train::write_search_csv(s, report);
    write_text(cfg.out / "search.csv", s.str());
  }
  {
    std::ostringstream s;
    s << "phase,experts,lambda_er,lambda_eid,closeness,seed,val_mse,test_mse\n";
    for (const auto& r : report.rows) {
      s << r.phase << ',' << r.experts << ',' << fmt(r.lambda_er) << ',' << fmt(r.lambda_eid) << ','
        << r.closeness << ',' << r.seed << ',' << fmt(r.val_mse) << ',' << fmt(r.test_mse) << '\n';
    }
    write_text(cfg.out / "search_rows.csv", s.str());
  }
  RunConfig best = cfg;
  best.model.experts = report.best_model.experts;
  best.train.loss = report.best_train.loss;
  best.fusion.closeness = report.best_fusion.closeness;
  write_text(cfg.out / "best_config.json", run_config_json(best));
  for (const auto& s : report.skipped) log_warning("skipped " + s + " (weights must sum below 1)");
  out << "best K=" << best.model.experts << " lambda_er=" << fmt(best.train.loss.lambda_er)
      << " lambda_eid=" << fmt(best.train.loss.lambda_eid) << " closeness=" << best.fusion.closeness << "\n";
  return ok;
}

// export-attention -------------------------------------------------------

struct ExportArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  long t = -1;
  long t_begin = -1;
  long t_end = -1;
  std::vector<std::string> coords;
  bool render = false;
};

// Blue-to-red heatmap, one value in [0, 1] per cell, `px` pixels per cell.
void write_ppm(const std::filesystem::path& p, const Tensor& map, std::size_t px) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  std::string img = "P6\n" + std::to_string(w * px) + " " + std::to_string(h * px) + "\n255\n";
  for (std::size_t y = 0; y < h * px; ++y) {
    for (std::size_t x = 0; x < w * px; ++x) {
      const double v = std::clamp(map[(y / px) * w + x / px], 0.0, 1.0);
      img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
      img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(2.0 * v - 1.0))))));
      img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (1.0 - v)))));
    }
  }
  io::write_file(p, img);
}

int cmd_export_attention(const ExportArgs& a, std::ostream& out) {
  if (a.out.empty()) throw ConfigError("--out is required");
  auto l = load_for_eval(a.checkpoint, a.data);
  const auto& mc = l.net.config;
  std::vector<const fusion::InputSample*> all;
  for (const auto* part : {&l.ds.train, &l.ds.val, &l.ds.test}) {
    for (const auto& s : *part) all.push_back(&s);
  }
  const long t_min = all.front()->t, t_max = all.back()->t;
  std::vector<fusion::InputSample> sel;
  if (a.t >= 0) {
    if (a.t < t_min || a.t > t_max) {
      throw ConfigError("t=" + std::to_string(a.t) + " out of range [" + std::to_string(t_min) + ", " +
                        std::to_string(t_max) + "]");
    }
    for (const auto* s : all) {
      if (s->t == a.t) sel.push_back(*s);
    }
  } else if (a.t_begin >= 0 || a.t_end >= 0) {
    const long b = a.t_begin >= 0 ? a.t_begin : t_min, e = a.t_end >= 0 ? a.t_end : t_max;
    if (b > e || e < t_min || b > t_max) {
      throw ConfigError("time range [" + std::to_string(b) + ", " + std::to_string(e) +
                        "] out of range [" + std::to_string(t_min) + ", " + std::to_string(t_max) + "]");
    }
    for (const auto* s : all) {
      if (s->t >= b && s->t <= e) sel.push_back(*s);
    }
  } else {
    sel = l.ds.test;
  }
  if (sel.empty()) throw ConfigError("no samples in the requested time selection");

  const std::filesystem::path dir(a.out);
  ensure_dir(dir);
  const auto variant = mc.variant;
  const Tensor maps = eval::mean_inflow_attention(l.net, sel, variant);
  const std::size_t plane = mc.height * mc.width;
  for (std::size_t i = 0; i < mc.experts; ++i) {
    std::ostringstream s;
    for (std::size_t r = 0; r < mc.height; ++r) {
      for (std::size_t c = 0; c < mc.width; ++c) s << (c ? "," : "") << fmt(maps[i * plane + r * mc.width + c]);
      s << '\n';
    }
    write_text(dir / ("expert_" + std::to_string(i) + ".csv"), s.str());
    if (a.render) {
      Tensor m(Shape{mc.height, mc.width});
      std::copy(maps.data().begin() + static_cast<long>(i * plane),
                maps.data().begin() + static_cast<long>((i + 1) * plane), m.data().begin());
      write_ppm(dir / ("expert_" + std::to_string(i) + ".ppm"), m, 16);
    }
  }
  if (!a.coords.empty()) {
    const auto trace = model::forward_batch(l.net, sel, variant);
    for (const auto& spec : a.coords) {
      const auto comma = spec.find(',');
      std::size_t r = 0, c = 0;
      try {
        if (comma == std::string::npos) throw std::invalid_argument(spec);
        r = std::stoul(spec.substr(0, comma));
        c = std::stoul(spec.substr(comma + 1));
      } catch (const std::logic_error&) {
        throw ConfigError("--coord expects row,col, got '" + spec + "'");
      }
      if (r >= mc.height || c >= mc.width) throw ConfigError("--coord " + spec + " outside the grid");
      std::ostringstream s;
      s << "t,expert,inflow_attention,outflow_attention\n";
      for (std::size_t i = 0; i < mc.experts; ++i) {
        for (std::size_t n = 0; n < sel.size(); ++n) {
          const std::size_t base = (n * mc.experts + i) * 2 * plane + r * mc.width + c;
          s << sel[n].t << ',' << i << ',' << fmt(trace.attention[base]) << ','
            << fmt(trace.attention[base + plane]) << '\n';
        }
      }
      write_text(dir / ("series_" + std::to_string(r) + "_" + std::to_string(c) + ".csv"), s.str());
    }
  }
  if (l.data.truth_masks) {
    const auto m = eval::match_experts_to_patterns(maps, *l.data.truth_masks);
    write_match(dir, m, pattern_names(l.cfg.data, l.data.truth_masks->dim(0)));
    out << "mean matched correlation " << fmt(m.mean_matched_correlation) << "\n";
  }
  out << "exported " << mc.experts << " attention maps over " << sel.size() << " samples to " << a.out << "\n";
  return ok;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spatiotemporal mixture-of-experts flow prediction"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic city dataset");
  g->add_option("--preset", gen.preset, "built-in city (tiny8, ring16)");
  g->add_option("--config", gen.config, "synthetic city JSON");
  g->add_option_function<std::uint64_t>("--seed", [&gen](const std::uint64_t& s) {
    gen.seed = s;
    gen.seed_set = true;
  }, "random seed");
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--weeks", gen.weeks, "number of weeks");
  g->add_flag("--deterministic", gen.deterministic, "expected intensities, no Poisson noise");
  g->add_flag("--no-weekend-shift", gen.no_weekend_shift, "weekends reuse the weekday profile");

  Common tr;
  bool resume = false;
  auto* t = app.add_subcommand("train", "train a model");
  add_common(t, tr, true);
  t->add_flag("--resume", resume, "continue from the saved state in the output directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "score a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--data", ev.data, "dataset directory (defaults to the training dataset)");
  e->add_option("--out", ev.out, "report directory");
  e->add_option("--split", ev.split, "train, val or test");
  e->add_flag("--ablate-gs", ev.ablate_gs, "drop the spatial gate");
  e->add_flag("--ablate-gt", ev.ablate_gt, "drop the temporal gate");
  e->add_option("--quade-batch", ev.quade_batch, "samples per Quade block set");
  e->add_flag("--mape-truth", ev.mape_truth, "MAPE relative to the ground truth");

  Common ab;
  std::size_t ab_repeats = 1;
  auto* abl = app.add_subcommand("ablate", "train the full, no-Gs and no-Gt variants");
  add_common(abl, ab, true);
  abl->add_option("--repeats", ab_repeats, "seeds per variant");

  Common se;
  std::string se_experts, se_lambdas, se_closeness;
  std::size_t se_repeats = 3;
  auto* sr = app.add_subcommand("search", "grid search over K, loss weights and closeness");
  add_common(sr, se, true);
  sr->add_option("--experts", se_experts, "comma-separated expert counts");
  sr->add_option("--lambdas", se_lambdas, "comma-separated loss weights");
  sr->add_option("--closeness", se_closeness, "comma-separated closeness lengths");
  sr->add_option("--repeats", se_repeats, "seeds per grid cell");

  ExportArgs ex;
  auto* xa = app.add_subcommand("export-attention", "write per-expert attention maps");
  xa->add_option("--checkpoint", ex.checkpoint, "checkpoint file")->required();
  xa->add_option("--data", ex.data, "dataset directory (defaults to the training dataset)");
  xa->add_option("--out", ex.out, "output directory");
  xa->add_option("--t", ex.t, "single interval");
  xa->add_option("--t-begin", ex.t_begin, "first interval of a range");
  xa->add_option("--t-end", ex.t_end, "last interval of a range");
  xa->add_option("--coord", ex.coords, "row,col for a per-interval attention series")->take_all();
  xa->add_flag("--render", ex.render, "also write PPM heatmaps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? ok : config_error;
  }

  try {
    read_threads_env();
    if (*g) return cmd_generate(gen, out);
    if (*t) return cmd_train(tr, resume, out, err);
    if (*e) return cmd_evaluate(ev, out);
    if (*abl) return cmd_ablate(ab, ab_repeats, out);
    if (*sr) return cmd_search(se, se_experts, se_lambdas, se_closeness, se_repeats, out);
    if (*xa) return cmd_export_attention(ex, out);
  } catch (const ConfigError& x) {
    err << "configuration error: " << x.what() << "\n";
    return config_error;
  } catch (const DataError& x) {
    err << "data error: " << x.what() << "\n";
    return data_error;
  } catch (const NumericalError& x) {
    err << "numerical error: " << x.what() << "\n";
    return numerical_error;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return failure;
  }
  return failure;
}

}  // namespace stmoe::cli
