#include "stmoe/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include "stmoe/archive.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/log.hpp"
#include "stmoe/random.hpp"

namespace stmoe::train {

using model::Mode;
using model::StExpertNet;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and >= 0");
  }
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  loss.validate();
}

namespace {

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

bool finite(const loss::LossComponents& c) {
  return std::isfinite(c.mse) && std::isfinite(c.l_er) && std::isfinite(c.l_eid) &&
         std::isfinite(c.total);
}

std::vector<std::size_t> trainable_indices(const model::ParamSet& ps) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps.trainable(i)) out.push_back(i);
  }
  return out;
}

}  // namespace

std::vector<double> flatten_trainable(const model::ParamSet& params) {
  std::vector<double> out;
  out.reserve(params.trainable_scalars());
  for (std::size_t i : trainable_indices(params)) {
    const auto d = params.value(i).data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

void assign_trainable(model::ParamSet& params, const std::vector<double>& flat) {
  if (flat.size() != params.trainable_scalars()) {
    throw std::invalid_argument("flat parameter vector has wrong length");
  }
  std::size_t pos = 0;
  for (std::size_t i : trainable_indices(params)) {
    auto d = params.value(i).data();
    std::copy(flat.begin() + static_cast<long>(pos), flat.begin() + static_cast<long>(pos + d.size()),
              d.begin());
    pos += d.size();
  }
}

LossAndGrad loss_and_grad(const StExpertNet& net, const model::Batch& batch,
                          const loss::LossConfig& cfg, Mode mode) {
  model::Bindings b = model::bind(net.params, true);
  auto g = model::forward_graph(net, b, batch, net.config.variant, mode);
  auto l = loss::total_loss_graph(g, batch.y, cfg);
  ag::backward(l.total);
  LossAndGrad out;
  out.loss = l.components;
  out.grad.reserve(net.params.trainable_scalars());
  for (std::size_t i : trainable_indices(net.params)) {
    const Tensor& gr = b.vars[i].grad();
    if (gr.empty()) {
      out.grad.insert(out.grad.end(), net.params.value(i).size(), 0.0);
    } else {
      out.grad.insert(out.grad.end(), gr.data().begin(), gr.data().end());
    }
  }
  return out;
}

TrainState initial_state(const StExpertNet& init) {
  TrainState s;
  s.net = init;
  s.best = init;
  s.net.params.snap_to_f32();
  s.best.params.snap_to_f32();
  for (std::size_t i = 0; i < init.params.size(); ++i) {
    s.adam_m.emplace_back(init.params.value(i).shape());
    s.adam_v.emplace_back(init.params.value(i).shape());
  }
  s.best_val_mse = std::numeric_limits<double>::infinity();
  return s;
}

double denormalized_mse(const StExpertNet& net, const std::vector<fusion::InputSample>& samples,
                        const flow::NormStats& stats, model::Variant variant) {
  const Tensor pred = flow::minmax_invert(model::predict(net, samples, variant), stats);
  const std::size_t per = samples.front().y.size();
  double s = 0.0;
  for (std::size_t n = 0; n < samples.size(); ++n) {
    const Tensor truth = flow::minmax_invert(samples[n].y, stats);
    for (std::size_t i = 0; i < per; ++i) {
      const double d = pred[n * per + i] - truth[i];
      s += d * d;
    }
  }
  return s / static_cast<double>(samples.size() * per);
}

TrainResult train(const fusion::Dataset& ds, const StExpertNet& init, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  return train(ds, initial_state(init), cfg, hooks);
}

TrainResult train(const fusion::Dataset& ds, TrainState state, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
  cfg.validate();
  cfg.loss.validate(state.net.config.experts);
  if (ds.train.empty() || ds.val.empty()) throw DataError("training needs non-empty train and val splits");

  TrainResult result;
  StExpertNet& net = state.net;
  const auto train_idx = trainable_indices(net.params);
  const model::Variant variant = net.config.variant;

  auto finish = [&]() {
    result.best = state.best;
    result.history = state.history;
    result.best_epoch = state.best_epoch;
    result.best_val_mse = state.best_val_mse;
    return result;
  };

  while (state.epoch < cfg.max_epochs && state.since_best < cfg.patience) {
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, state.epoch));
    shuffle(order, rng);

    loss::LossComponents sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      std::vector<const fusion::InputSample*> ptrs;
      for (std::size_t j = 0; j < count; ++j) ptrs.push_back(&ds.train[order[start + j]]);
      const model::Batch batch = model::make_batch(std::span<const fusion::InputSample* const>(ptrs));

      model::Bindings b = model::bind(net.params, true);
      auto g = model::forward_graph(net, b, batch, variant, Mode::train);
      auto l = loss::total_loss_graph(g, batch.y, cfg.loss);
      if (!finite(l.components)) {
        result.diverged = true;
        result.divergence = "non-finite loss at epoch " + std::to_string(state.epoch + 1) + ", step " +
                            std::to_string(state.step + 1);
        log_warning(result.divergence + "; keeping the last finite checkpoint");
        return finish();
      }
      ag::backward(l.total);

      double norm2 = 0.0;
      for (std::size_t i : train_idx) {
        for (double v : b.vars[i].grad().data()) norm2 += v * v;  // empty when unused
      }
      const double norm = std::sqrt(norm2);
      if (!std::isfinite(norm)) {
        result.diverged = true;
        result.divergence = "non-finite gradient at step " + std::to_string(state.step + 1);
        log_warning(result.divergence + "; keeping the last finite checkpoint");
        return finish();
      }
      const double clip = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

      ++state.step;
      const double t = static_cast<double>(state.step);
      const double bc1 = 1.0 - std::pow(cfg.beta1, t);
      const double bc2 = 1.0 - std::pow(cfg.beta2, t);
      for (std::size_t i : train_idx) {
        if (b.vars[i].grad().empty()) continue;
        auto p = net.params.value(i).data();
        auto m = state.adam_m[i].data();
        auto v = state.adam_v[i].data();
        const auto gr = b.vars[i].grad().data();
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double gj = gr[j] * clip;
          m[j] = to_f32(cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj);
          v[j] = to_f32(cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj);
          p[j] = to_f32(p[j] - cfg.learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps));
        }
      }
      for (auto& [idx, value] : b.buffer_updates) {
        net.params.value(idx) = std::move(value);
        for (auto& x : net.params.value(idx).data()) x = to_f32(x);
      }

      StepRecord rec{state.step, l.components};
      result.steps.push_back(rec);
      if (hooks.on_step) hooks.on_step(rec);
      sum.mse += l.components.mse;
      sum.l_er += l.components.l_er;
      sum.l_eid += l.components.l_eid;
      sum.total += l.components.total;
      ++batches;
    }

    ++state.epoch;
    EpochRecord er;
    er.epoch = state.epoch;
    const double nb = static_cast<double>(batches);
    er.train = {sum.mse / nb, sum.l_er / nb, sum.l_eid / nb, sum.total / nb};
    er.val_mse = denormalized_mse(net, ds.val, ds.stats, variant);
    if (!std::isfinite(er.val_mse)) {
      result.diverged = true;
      result.divergence = "non-finite validation MSE at epoch " + std::to_string(state.epoch);
      log_warning(result.divergence + "; keeping the last finite checkpoint");
      return finish();
    }
    if (er.val_mse < state.best_val_mse) {
      state.best_val_mse = er.val_mse;
      state.best_epoch = state.epoch;
      state.best = net;
      state.since_best = 0;
    } else {
      ++state.since_best;
    }
    er.best_val_mse = state.best_val_mse;
    state.history.push_back(er);
    if (hooks.on_epoch) hooks.on_epoch(state);
  }
  result.stopped_early = state.since_best >= cfg.patience;
  return finish();
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void write_history_csv(std::ostream& out, const std::vector<EpochRecord>& history) {
  out << "epoch,train_mse,train_l_er,train_l_eid,train_total,val_mse,best_val_mse\n";
  for (const auto& r : history) {
    out << r.epoch << ',' << fmt(r.train.mse) << ',' << fmt(r.train.l_er) << ',' << fmt(r.train.l_eid)
        << ',' << fmt(r.train.total) << ',' << fmt(r.val_mse) << ',' << fmt(r.best_val_mse) << '\n';
  }
}

void write_steps_csv(std::ostream& out, const std::vector<StepRecord>& steps) {
  out << "step,mse,l_er,l_eid,total\n";
  for (const auto& r : steps) {
    out << r.step << ',' << fmt(r.loss.mse) << ',' << fmt(r.loss.l_er) << ',' << fmt(r.loss.l_eid)
        << ',' << fmt(r.loss.total) << '\n';
  }
}

void save_state(const std::filesystem::path& path, const TrainState& state) {
  nlohmann::ordered_json h;
  h["model"] = nlohmann::ordered_json::parse(model::model_config_to_json(state.net.config));
  h["step"] = state.step;
  h["epoch"] = state.epoch;
  h["best_epoch"] = state.best_epoch;
  h["best_val_mse"] = std::isfinite(state.best_val_mse) ? nlohmann::ordered_json(state.best_val_mse)
                                                       : nlohmann::ordered_json(nullptr);
  h["since_best"] = state.since_best;
  auto& hist = h["history"] = nlohmann::ordered_json::array();
  for (const auto& r : state.history) {
    hist.push_back({r.epoch, r.train.mse, r.train.l_er, r.train.l_eid, r.train.total, r.val_mse,
                    r.best_val_mse});
  }
  io::TensorArchive a;
  a.header_json = h.dump();
  const auto& ps = state.net.params;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    a.arrays.emplace_back("net/" + ps.name(i), ps.value(i));
    a.arrays.emplace_back("best/" + ps.name(i), state.best.params.value(i));
    a.arrays.emplace_back("adam_m/" + ps.name(i), state.adam_m[i]);
    a.arrays.emplace_back("adam_v/" + ps.name(i), state.adam_v[i]);
  }
  io::write_archive(path, a);
}

TrainState load_state(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("training state not found: " + path.string());
  const auto a = io::read_archive(path);
  nlohmann::ordered_json h;
  try {
    h = nlohmann::ordered_json::parse(a.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("training state header: " + std::string(e.what()));
  }
  const auto cfg = model::model_config_from_json(h.at("model").dump());
  TrainState s = initial_state(model::init_model(cfg, 0));
  auto fetch = [&](const std::string& name, const Shape& shape) {
    const Tensor* t = a.find(name);
    if (!t) throw DataError("training state lacks array '" + name + "'");
    if (t->shape() != shape) throw DataError("training state array '" + name + "' has wrong shape");
    return *t;
  };
  for (std::size_t i = 0; i < s.net.params.size(); ++i) {
    const auto& name = s.net.params.name(i);
    const Shape shape = s.net.params.value(i).shape();
    s.net.params.value(i) = fetch("net/" + name, shape);
    s.best.params.value(i) = fetch("best/" + name, shape);
    s.adam_m[i] = fetch("adam_m/" + name, shape);
    s.adam_v[i] = fetch("adam_v/" + name, shape);
  }
  s.step = h.at("step").get<std::size_t>();
  s.epoch = h.at("epoch").get<std::size_t>();
  s.best_epoch = h.at("best_epoch").get<std::size_t>();
  s.best_val_mse = h.at("best_val_mse").is_null() ? std::numeric_limits<double>::infinity()
                                                  : h.at("best_val_mse").get<double>();
  s.since_best = h.at("since_best").get<std::size_t>();
  for (const auto& r : h.at("history")) {
    EpochRecord e;
    e.epoch = r.at(0).get<std::size_t>();
    e.train = {r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>(),
               r.at(4).get<double>()};
    e.val_mse = r.at(5).get<double>();
    e.best_val_mse = r.at(6).get<double>();
    s.history.push_back(e);
  }
  return s;
}

FiniteDiffResult finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                   const std::vector<double>& theta, const std::vector<double>& grad,
                                   double eps) {
  if (!(eps > 0.0)) throw ConfigError("finite-difference step must be > 0");
  if (theta.size() != grad.size()) throw std::invalid_argument("theta and grad lengths differ");
  if (theta.size() > 10000) throw ConfigError("finite-difference check limited to 1e4 parameters");
  FiniteDiffResult r;
  std::vector<double> x = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (std::abs(grad[i]) <= 1e-8) continue;
    x[i] = theta[i] + eps;
    const double fp = f(x);
    x[i] = theta[i] - eps;
    const double fm = f(x);
    x[i] = theta[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("non-finite loss during finite differences at coordinate " + std::to_string(i));
    }
    const double fd = (fp - fm) / (2.0 * eps);
    const double rel = std::abs(fd - grad[i]) / std::abs(grad[i]);
    ++r.checked;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
  }
  return r;
}

namespace {

struct Candidate {
  std::size_t experts;
  double lambda_er, lambda_eid;
  std::size_t closeness;
};

}  // namespace

SearchReport grid_search(const DatasetFactory& make, const fusion::FusionConfig& fusion,
                         const model::ModelConfig& model, const TrainConfig& train_cfg,
                         const SearchSpec& spec) {
  if (spec.repeats < 1) throw ConfigError("search needs at least one repeat");
  if (spec.experts.empty() || spec.lambdas.empty()) throw ConfigError("empty search grid");
  SearchReport report;
  std::map<std::size_t, fusion::Dataset> datasets;
  auto dataset_for = [&](std::size_t closeness) -> const fusion::Dataset& {
    auto it = datasets.find(closeness);
    if (it == datasets.end()) {
      fusion::FusionConfig f = fusion;
      f.closeness = closeness;
      it = datasets.emplace(closeness, make(f)).first;
    }
    return it->second;
  };

  auto evaluate = [&](const std::string& phase, const Candidate& c) {
    const auto& ds = dataset_for(c.closeness);
    SearchCell cell{phase, c.experts, c.lambda_er, c.lambda_eid, c.closeness};
    std::vector<double> vals, tests;
    for (std::size_t r = 0; r < spec.repeats; ++r) {
      model::ModelConfig mc = model::with_geometry(model, ds);
      mc.experts = c.experts;
      TrainConfig tc = train_cfg;
      tc.seed = train_cfg.seed + r;
      tc.loss.lambda_er = c.lambda_er;
      tc.loss.lambda_eid = c.lambda_eid;
      if (tc.loss.n_top > c.experts) tc.loss.n_top = 0;
      const auto net = model::init_model(mc, derive_seed(tc.seed, 0x5eed));
      const auto res = train(ds, net, tc);
      SearchRow row{phase, c.experts, c.lambda_er, c.lambda_eid, c.closeness, tc.seed,
                    res.best_val_mse,
                    denormalized_mse(res.best, ds.test, ds.stats, mc.variant)};
      vals.push_back(row.val_mse);
      tests.push_back(row.test_mse);
      report.rows.push_back(row);
    }
    auto mean_var = [](const std::vector<double>& v) {
      const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return std::pair{m, s / static_cast<double>(v.size())};
    };
    std::tie(cell.mean_val_mse, cell.var_val_mse) = mean_var(vals);
    std::tie(cell.mean_test_mse, cell.var_test_mse) = mean_var(tests);
    report.cells.push_back(cell);
    return cell.mean_val_mse;
  };

  Candidate best{model.experts, train_cfg.loss.lambda_er, train_cfg.loss.lambda_eid, fusion.closeness};
  double best_score = std::numeric_limits<double>::infinity();
  auto consider = [&](const std::string& phase, const Candidate& c) {
    const double s = evaluate(phase, c);
    if (s < best_score) {
      best_score = s;
      best = c;
    }
  };

  for (std::size_t k : spec.experts) {
    if (k < 1) throw ConfigError("expert counts must be >= 1");
    consider("experts", {k, best.lambda_er, best.lambda_eid, best.closeness});
  }
  if (spec.lambdas.size() > 1 || spec.lambdas.front() != best.lambda_er ||
      spec.lambdas.front() != best.lambda_eid) {
    const Candidate anchor = best;
    best_score = std::numeric_limits<double>::infinity();
    for (double ler : spec.lambdas) {
      for (double leid : spec.lambdas) {
        if (!(ler + leid < 1.0)) {
          report.skipped.push_back("lambda_er=" + fmt(ler) + " lambda_eid=" + fmt(leid));
          continue;
        }
        consider("lambdas", {anchor.experts, ler, leid, anchor.closeness});
      }
    }
    if (!std::isfinite(best_score)) best = anchor;
  }
  if (!spec.closeness.empty()) {
    const Candidate anchor = best;
    best_score = std::numeric_limits<double>::infinity();
    for (std::size_t c : spec.closeness) consider("closeness", {anchor.experts, anchor.lambda_er,
                                                                anchor.lambda_eid, c});
  }

  report.best_fusion = fusion;
  report.best_fusion.closeness = best.closeness;
  report.best_model = model::with_geometry(model, dataset_for(best.closeness));
  report.best_model.experts = best.experts;
  report.best_train = train_cfg;
  report.best_train.loss.lambda_er = best.lambda_er;
  report.best_train.loss.lambda_eid = best.lambda_eid;
  return report;
}

void write_search_csv(std::ostream& out, const SearchReport& report) {
  out << "phase,experts,lambda_er,lambda_eid,closeness,mean_val_mse,var_val_mse,mean_test_mse,"
         "var_test_mse\n";
  for (const auto& c : report.cells) {
    out << c.phase << ',' << c.experts << ',' << fmt(c.lambda_er) << ',' << fmt(c.lambda_eid) << ','
        << c.closeness << ',' << fmt(c.mean_val_mse) << ',' << fmt(c.var_val_mse) << ','
        << fmt(c.mean_test_mse) << ',' << fmt(c.var_test_mse) << '\n';
  }
}

}  // namespace stmoe::train
