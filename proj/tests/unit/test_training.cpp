#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/training.hpp"

using namespace stmoe;
using namespace stmoe::train;

namespace {

fusion::Dataset toy_dataset(std::uint64_t seed = 1, std::size_t n = 40, std::size_t closeness = 2) {
  Rng rng(seed);
  flow::FlowSeries s;
  s.grid.height = s.grid.width = 2;
  std::vector<flow::ExternalVector> ext;
  for (std::size_t t = 0; t < n; ++t) {
    Tensor f(Shape{2, 2, 2});
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = std::round(10.0 + 8.0 * std::sin(0.7 * static_cast<double>(t) + static_cast<double>(i)) +
                        uniform(rng, 0.0, 3.0));
    }
    s.snapshots.push_back({f, static_cast<long>(t)});
    ext.push_back({{static_cast<double>(t % 2), 1.0 - static_cast<double>(t % 2)}});
  }
  fusion::FusionConfig fc;
  fc.closeness = closeness;
  fc.period = 0;
  fc.trend = 0;
  return fusion::make_dataset(s, ext, fc);
}

model::ModelConfig toy_model(const fusion::Dataset& ds, std::size_t k = 2) {
  model::ModelConfig c;
  c.experts = k;
  c.filters = 4;
  c.gate_filters = 4;
  c.conv_layers = 2;
  c.ext_channels = 1;
  return model::with_geometry(c, ds);
}

TrainConfig quick(std::size_t epochs = 3) {
  TrainConfig t;
  t.batch_size = 8;
  t.learning_rate = 3e-3;
  t.max_epochs = epochs;
  t.patience = 100;
  t.seed = 5;
  return t;
}

std::string history_text(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  write_history_csv(os, h);
  return os.str();
}

}  // namespace

TEST_CASE("zero learning rate leaves trainable parameters unchanged") {
  const auto ds = toy_dataset();
  const auto net = model::init_model(toy_model(ds), 3);
  auto cfg = quick(3);
  cfg.learning_rate = 0.0;
  const auto res = train::train(ds, net, cfg);
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (net.params.trainable(i)) CHECK(res.best.params.value(i) == net.params.value(i));
  }
}

TEST_CASE("same seed reproduces the history bit for bit") {
  const auto ds = toy_dataset();
  const auto net = model::init_model(toy_model(ds), 3);
  const auto a = train::train(ds, net, quick(4));
  const auto b = train::train(ds, net, quick(4));
  CHECK(history_text(a.history) == history_text(b.history));
  CHECK(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.best.params.size(); ++i) CHECK(a.best.params.value(i) == b.best.params.value(i));
  auto other = quick(4);
  other.seed = 6;
  CHECK(history_text(train::train(ds, net, other).history) != history_text(a.history));
  CHECK(history_text(a.history).rfind("epoch,train_mse,train_l_er,train_l_eid,train_total,val_mse,best_val_mse\n", 0) == 0);
}

TEST_CASE("a single sample is memorized") {
  const auto full = toy_dataset();
  fusion::Dataset ds = full;
  ds.train = {full.train.front()};
  ds.val = ds.train;
  ds.test = ds.train;
  auto mc = toy_model(ds, 2);
  mc.filters = 16;
  mc.norm = model::Norm::none;
  const auto net = model::init_model(mc, 4);
  auto cfg = quick(400);
  cfg.batch_size = 1;
  cfg.learning_rate = 1e-2;
  cfg.loss.lambda_er = cfg.loss.lambda_eid = 0.0;
  const auto res = train::train(ds, net, cfg);
  const Tensor p = model::predict(res.best, ds.train, model::Variant::full);
  CHECK(loss::mse(p, model::make_batch(ds.train).y) < 1e-3);
}

TEST_CASE("best validation score is monotone and early stopping honours patience") {
  const auto ds = toy_dataset(2);
  const auto net = model::init_model(toy_model(ds), 7);
  auto cfg = quick(60);
  cfg.learning_rate = 2e-2;
  cfg.patience = 3;
  const auto res = train::train(ds, net, cfg);
  REQUIRE_FALSE(res.history.empty());
  for (std::size_t i = 1; i < res.history.size(); ++i) {
    CHECK(res.history[i].best_val_mse <= res.history[i - 1].best_val_mse);
  }
  CHECK(res.history.size() <= res.best_epoch + cfg.patience);
  if (res.stopped_early) CHECK(res.history.size() == res.best_epoch + cfg.patience);
  CHECK(res.best_val_mse == res.history[res.best_epoch - 1].val_mse);
}

TEST_CASE("a saved checkpoint evaluates exactly like the in-memory best") {
  testutil::TempDir dir("train_ckpt");
  const auto ds = toy_dataset();
  const auto net = model::init_model(toy_model(ds), 8);
  const auto res = train::train(ds, net, quick(3));
  model::save_checkpoint(dir / "best.bin", res.best);
  const auto back = model::load_checkpoint(dir / "best.bin");
  const double a = denormalized_mse(res.best, ds.val, ds.stats, model::Variant::full);
  const double b = denormalized_mse(back, ds.val, ds.stats, model::Variant::full);
  CHECK(a == b);
  CHECK(a == res.best_val_mse);
}

TEST_CASE("resuming from saved state equals an uninterrupted run") {
  testutil::TempDir dir("resume");
  const auto ds = toy_dataset();
  const auto net = model::init_model(toy_model(ds), 9);
  const auto cfg = quick(5);
  TrainHooks hooks;
  hooks.on_epoch = [&](const TrainState& s) {
    if (s.epoch == 2) save_state(dir / "state.bin", s);
  };
  const auto full = train::train(ds, net, cfg, hooks);
  auto state = load_state(dir / "state.bin");
  CHECK(state.epoch == 2);
  const auto resumed = train::train(ds, std::move(state), cfg);
  CHECK(history_text(resumed.history) == history_text(full.history));
  for (std::size_t i = 0; i < full.best.params.size(); ++i) {
    CHECK(resumed.best.params.value(i) == full.best.params.value(i));
  }
}

TEST_CASE("finite-difference checker") {
  const std::vector<double> theta{0.3, -1.2, 2.5, 0.0};
  auto half_sq = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += 0.5 * v * v;
    return s;
  };
  const auto r = finite_diff_check(half_sq, theta, theta, 1e-4);
  CHECK(r.checked == 3);
  CHECK(r.max_rel_error < 1e-9);
  CHECK_THROWS_AS(finite_diff_check(half_sq, theta, theta, 0.0), ConfigError);
  CHECK_THROWS_AS(finite_diff_check(half_sq, std::vector<double>(10001, 1.0), std::vector<double>(10001, 1.0), 1e-4),
                  ConfigError);
}

TEST_CASE("total loss gradient matches finite differences on a 2x2 grid with two experts") {
  const auto ds = toy_dataset();
  auto mc = toy_model(ds, 2);
  const auto net = model::init_model(mc, 10);
  const auto batch = model::make_batch(std::span(ds.train).first(4));
  loss::LossConfig lc;
  lc.lambda_er = 0.2;
  lc.lambda_eid = 0.3;
  for (auto variant : {loss::ErVariant::log_mixture, loss::ErVariant::general}) {
    lc.er_variant = variant;
    const auto lg = loss_and_grad(net, batch, lc);
    auto f = [&](const std::vector<double>& th) {
      auto copy = net;
      assign_trainable(copy.params, th);
      model::Bindings b = model::bind(copy.params, false);
      const auto g = model::forward_graph(copy, b, batch, model::Variant::full, model::Mode::eval);
      return loss::total_loss_graph(g, batch.y, lc).components.total;
    };
    const auto theta = flatten_trainable(net.params);
    CHECK(f(theta) == doctest::Approx(lg.loss.total).epsilon(1e-12));
    const auto r = finite_diff_check(f, theta, lg.grad, 1e-5);
    INFO("worst coordinate " << r.worst_index);
    CHECK(r.checked > 100);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("non-finite parameters abort training as diverged") {
  const auto ds = toy_dataset();
  auto net = model::init_model(toy_model(ds), 11);
  net.params.value("expert0.conv0.weight")[0] = std::nan("");
  const auto res = train::train(ds, net, quick(3));
  CHECK(res.diverged);
  CHECK_FALSE(res.divergence.empty());
}

TEST_CASE("grid search bookkeeping") {
  const auto base = toy_dataset();
  auto make = [](const fusion::FusionConfig& f) { return toy_dataset(1, 40, f.closeness); };
  auto tc = quick(1);
  tc.loss.lambda_er = tc.loss.lambda_eid = 0.01;

  SearchSpec one;
  one.experts = {2};
  one.lambdas = {0.01};
  one.repeats = 3;
  const auto r1 = grid_search(make, base.fusion, toy_model(base), tc, one);
  CHECK(r1.rows.size() == 3);
  CHECK(r1.cells.size() == 1);
  CHECK(r1.best_model.experts == 2);
  CHECK(r1.best_train.loss.lambda_er == 0.01);

  SearchSpec grid;
  grid.experts = {1, 2};
  grid.lambdas = {0.01, 0.5, 0.6};
  grid.closeness = {1, 3};
  grid.repeats = 2;
  const auto r2 = grid_search(make, base.fusion, toy_model(base), tc, grid);
  // 2 expert cells, 9 - 4 admissible lambda pairs, 2 closeness cells
  CHECK(r2.skipped.size() == 4);
  CHECK(r2.cells.size() == 2 + 5 + 2);
  CHECK(r2.rows.size() == r2.cells.size() * 2);
  std::ostringstream os;
  write_search_csv(os, r2);
  std::size_t lines = 0;
  for (char ch : os.str()) lines += ch == '\n';
  CHECK(lines == r2.cells.size() + 1);

  tc.patience = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigError);
}
