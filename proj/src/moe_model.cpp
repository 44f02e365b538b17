#include "stmoe/moe_model.hpp"

#include <json.hpp>

#include <cmath>

#include "stmoe/archive.hpp"
#include "stmoe/errors.hpp"
#include "stmoe/random.hpp"

namespace stmoe::model {

using ag::Var;

std::string to_string(BackboneKind kind) {
  return kind == BackboneKind::conv_stack ? "conv_stack" : "recurrent_conv";
}

std::string to_string(Variant variant) {
  switch (variant) {
    case Variant::full:
      return "full";
    case Variant::no_gs:
      return "no_gs";
    case Variant::no_gt:
      return "no_gt";
  }
  return "full";
}

BackboneKind backbone_from_string(const std::string& s) {
  if (s == "conv_stack") return BackboneKind::conv_stack;
  if (s == "recurrent_conv") return BackboneKind::recurrent_conv;
  throw ConfigError("unknown backbone '" + s + "' (expected conv_stack or recurrent_conv)");
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "no_gs") return Variant::no_gs;
  if (s == "no_gt") return Variant::no_gt;
  throw ConfigError("unknown model variant '" + s + "' (expected full, no_gs or no_gt)");
}

void ModelConfig::validate() const {
  if (experts < 1) throw ConfigError("expert count K must be >= 1");
  if (filters < 1 || gate_filters < 1) throw ConfigError("filter counts must be >= 1");
  if (conv_layers < 2) throw ConfigError("conv-stack needs at least 2 layers");
  if (backbone == BackboneKind::recurrent_conv && recurrent_layers < 1) {
    throw ConfigError("recurrent backbone needs at least 1 layer");
  }
  if (height == 0 || width == 0) throw ConfigError("model grid geometry not set");
  if (flow_channels == 0 || flow_channels % 2 != 0) {
    throw ConfigError("flow channel count must be a positive multiple of 2");
  }
  if (ext_channels > 0 && ext_width == 0) {
    throw ConfigError("ext_channels = " + std::to_string(ext_channels) +
                      " but the dataset has no external factors");
  }
}

ModelConfig with_geometry(ModelConfig cfg, const fusion::Dataset& ds) {
  cfg.height = ds.grid.height;
  cfg.width = ds.grid.width;
  cfg.flow_channels = ds.fusion.flow_channels();
  cfg.ext_width = ds.external_width;
  return cfg;
}

std::size_t ParamSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_[name] = values_.size();
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  trainable_.push_back(trainable);
  return values_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("model has no parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::trainable_scalars() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (trainable_[i]) n += values_[i].size();
  }
  return n;
}

void ParamSet::snap_to_f32() {
  for (auto& t : values_) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  }
}

namespace {

void add_uniform(ParamSet& ps, Rng& rng, const std::string& name, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = uniform(rng, -bound, bound);
  ps.add(name, std::move(t), true);
}

void add_conv(ParamSet& ps, Rng& rng, const std::string& prefix, std::size_t cin, std::size_t cout,
              std::size_t k = 3) {
  add_uniform(ps, rng, prefix + ".weight", {cout, cin, k, k}, cin * k * k);
  add_uniform(ps, rng, prefix + ".bias", {cout}, cin * k * k);
}

void add_batch_norm(ParamSet& ps, const std::string& prefix, std::size_t c) {
  ps.add(prefix + ".gamma", Tensor(Shape{c}, 1.0), true);
  ps.add(prefix + ".beta", Tensor(Shape{c}, 0.0), true);
  ps.add(prefix + ".running_mean", Tensor(Shape{c}, 0.0), false);
  ps.add(prefix + ".running_var", Tensor(Shape{c}, 1.0), false);
}

void add_conv_stack(ParamSet& ps, Rng& rng, const std::string& prefix, std::size_t cin,
                    std::size_t width, std::size_t cout, std::size_t layers, Norm norm) {
  std::size_t in = cin;
  for (std::size_t l = 0; l < layers; ++l) {
    const bool last = l + 1 == layers;
    const std::string p = prefix + ".conv" + std::to_string(l);
    add_conv(ps, rng, p, in, last ? cout : width);
    if (!last && norm == Norm::batch) add_batch_norm(ps, p + ".bn", width);
    in = width;
  }
}

void add_recurrent(ParamSet& ps, Rng& rng, const std::string& prefix, const ModelConfig& cfg) {
  std::size_t in = cfg.ext_channels + 2;
  for (std::size_t l = 0; l < cfg.recurrent_layers; ++l) {
    add_conv(ps, rng, prefix + ".cell" + std::to_string(l), in + cfg.filters, 4 * cfg.filters);
    in = cfg.filters;
  }
  add_conv(ps, rng, prefix + ".head", cfg.filters, 2);
}

// Graph construction helpers.
struct Ctx {
  const StExpertNet& net;
  Bindings& b;
  Mode mode;

  const Var& p(const std::string& name) const { return b.vars[net.params.index(name)]; }

  Var conv(const Var& x, const std::string& prefix) const {
    return ag::conv2d_same(x, p(prefix + ".weight"), p(prefix + ".bias"));
  }

  Var batch_norm(const Var& x, const std::string& prefix) const {
    const std::size_t mi = net.params.index(prefix + ".running_mean");
    const std::size_t vi = net.params.index(prefix + ".running_var");
    ag::BatchNormState st;
    st.running_mean = &net.params.value(mi);
    st.running_var = &net.params.value(vi);
    st.training = mode == Mode::train;
    Tensor new_mean(st.running_mean->shape()), new_var(st.running_var->shape());
    if (st.training) {
      st.updated_mean = &new_mean;
      st.updated_var = &new_var;
    }
    Var out = ag::batch_norm2d(x, p(prefix + ".gamma"), p(prefix + ".beta"), st);
    if (st.training) {
      b.buffer_updates.emplace_back(mi, std::move(new_mean));
      b.buffer_updates.emplace_back(vi, std::move(new_var));
    }
    return out;
  }

  Var conv_stack(const Var& x, const std::string& prefix, std::size_t layers) const {
    Var h = x;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::string pl = prefix + ".conv" + std::to_string(l);
      h = conv(h, pl);
      if (l + 1 < layers) {
        if (net.config.norm == Norm::batch) h = batch_norm(h, pl + ".bn");
        h = ag::relu(h);
      }
    }
    return h;
  }

  // Convolutional LSTM over the flow frames in chronological order; the
  // external embedding is appended to every frame.
  Var recurrent(const Var& ext_emb, const Var& flow_x, const std::string& prefix) const {
    const auto& cfg = net.config;
    const std::size_t n = flow_x.shape()[0];
    const std::size_t f = cfg.filters;
    const Shape state_shape{n, f, cfg.height, cfg.width};
    std::vector<Var> h(cfg.recurrent_layers, ag::constant(Tensor(state_shape)));
    std::vector<Var> c(cfg.recurrent_layers, ag::constant(Tensor(state_shape)));
    const std::size_t frames = cfg.flow_channels / 2;
    for (std::size_t t = 0; t < frames; ++t) {
      Var in = ag::slice_axis1(flow_x, 2 * t, 2);
      if (cfg.ext_channels > 0) in = ag::concat_axis1({ext_emb, in});
      for (std::size_t l = 0; l < cfg.recurrent_layers; ++l) {
        Var gates = conv(ag::concat_axis1({in, h[l]}), prefix + ".cell" + std::to_string(l));
        Var ig = ag::sigmoid(ag::slice_axis1(gates, 0, f));
        Var fg = ag::sigmoid(ag::slice_axis1(gates, f, f));
        Var og = ag::sigmoid(ag::slice_axis1(gates, 2 * f, f));
        Var gg = ag::tanh(ag::slice_axis1(gates, 3 * f, f));
        c[l] = ag::add(ag::mul(fg, c[l]), ag::mul(ig, gg));
        h[l] = ag::mul(og, ag::tanh(c[l]));
        in = h[l];
      }
    }
    return conv(h.back(), prefix + ".head");
  }
};

void check_finite_logits(const Tensor& z) {
  const std::size_t n = z.dim(0), k = z.dim(1);
  const std::size_t r = z.size() / (n * k);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < r; ++j) {
        if (!std::isfinite(z[(b * k + i) * r + j])) {
          throw NumericalError("non-finite attention logit from expert " + std::to_string(i));
        }
      }
    }
  }
}

Var embed_external(const Ctx& ctx, const Var& ext, std::size_t n) {
  const auto& cfg = ctx.net.config;
  Var flat = ag::relu(ag::linear(ext, ctx.p("embed.weight"), ctx.p("embed.bias")));
  return ag::reshape(flat, {n, cfg.ext_channels, cfg.height, cfg.width});
}

}  // namespace

StExpertNet init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  StExpertNet net{cfg, {}};
  Rng rng(seed);
  auto& ps = net.params;
  const std::size_t cin = cfg.input_channels();
  if (cfg.ext_channels > 0) {
    const std::size_t out = cfg.ext_channels * cfg.height * cfg.width;
    add_uniform(ps, rng, "embed.weight", {out, cfg.ext_width}, cfg.ext_width);
    add_uniform(ps, rng, "embed.bias", {out}, cfg.ext_width);
  }
  for (std::size_t i = 0; i < cfg.experts; ++i) {
    const std::string prefix = "expert" + std::to_string(i);
    if (cfg.backbone == BackboneKind::conv_stack) {
      add_conv_stack(ps, rng, prefix, cin, cfg.filters, 2, cfg.conv_layers, cfg.norm);
    } else {
      add_recurrent(ps, rng, prefix, cfg);
    }
  }
  if (cfg.has_spatial_gate()) {
    add_conv_stack(ps, rng, "gs", cin, cfg.gate_filters, 2 * cfg.experts, cfg.conv_layers, cfg.norm);
  }
  if (cfg.has_temporal_gate()) {
    add_conv_stack(ps, rng, "gt", cin, cfg.gate_filters, 2, cfg.conv_layers, cfg.norm);
  }
  ps.snap_to_f32();
  return net;
}

Bindings bind(const ParamSet& params, bool requires_grad) {
  Bindings b;
  b.vars.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (requires_grad && params.trainable(i)) {
      b.vars.push_back(ag::leaf(params.value(i)));
    } else {
      b.vars.push_back(ag::constant(params.value(i)));
    }
  }
  return b;
}

Batch make_batch(std::span<const fusion::InputSample* const> samples) {
  if (samples.empty()) throw std::invalid_argument("empty batch");
  const auto& first = *samples.front();
  const std::size_t n = samples.size();
  Shape xs{n};
  xs.insert(xs.end(), first.x.shape().begin(), first.x.shape().end());
  Shape ys{n};
  ys.insert(ys.end(), first.y.shape().begin(), first.y.shape().end());
  const std::size_t ew = first.external.values.size();
  Batch b{Tensor(xs), Tensor(Shape{n, ew}), Tensor(ys)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = *samples[i];
    if (s.x.size() != first.x.size() || s.y.size() != first.y.size() ||
        s.external.values.size() != ew) {
      throw DataError("inconsistent sample shapes in batch");
    }
    std::copy(s.x.data().begin(), s.x.data().end(), b.x.data().begin() + static_cast<long>(i * s.x.size()));
    std::copy(s.y.data().begin(), s.y.data().end(), b.y.data().begin() + static_cast<long>(i * s.y.size()));
    std::copy(s.external.values.begin(), s.external.values.end(),
              b.ext.data().begin() + static_cast<long>(i * ew));
  }
  return b;
}

Batch make_batch(std::span<const fusion::InputSample> samples) {
  std::vector<const fusion::InputSample*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return make_batch(std::span<const fusion::InputSample* const>(ptrs));
}

GraphTrace forward_graph(const StExpertNet& net, Bindings& bindings, const Batch& batch,
                         Variant variant, Mode mode) {
  const auto& cfg = net.config;
  const std::size_t n = batch.x.dim(0);
  const Shape expected_x{n, cfg.flow_channels, cfg.height, cfg.width};
  if (batch.x.shape() != expected_x) {
    throw ConfigError("input shape " + shape_string(batch.x.shape()) + " does not match model " +
                      shape_string(expected_x));
  }
  if (cfg.ext_channels > 0 && batch.ext.shape() != Shape{n, cfg.ext_width}) {
    throw ConfigError("external shape " + shape_string(batch.ext.shape()) +
                      " does not match model width " + std::to_string(cfg.ext_width));
  }
  const bool use_gs = variant != Variant::no_gs && cfg.experts > 1;
  const bool use_gt = variant != Variant::no_gt;
  if (use_gs && !cfg.has_spatial_gate()) {
    throw ConfigError("model was built without a spatial gate (variant " + to_string(cfg.variant) + ")");
  }
  if (use_gt && !cfg.has_temporal_gate()) {
    throw ConfigError("model was built without a temporal gate (variant " + to_string(cfg.variant) + ")");
  }

  Ctx ctx{net, bindings, mode};
  const std::size_t k = cfg.experts;
  const Shape field{n, 2, cfg.height, cfg.width};
  const Shape kfield{n, k, 2, cfg.height, cfg.width};

  GraphTrace g;
  Var flow_x = ag::constant(batch.x);
  Var ext_emb;
  if (cfg.ext_channels > 0) {
    ext_emb = embed_external(ctx, ag::constant(batch.ext), n);
    g.input = ag::concat_axis1({ext_emb, flow_x});
  } else {
    g.input = flow_x;
  }

  std::vector<Var> experts;
  for (std::size_t i = 0; i < k; ++i) {
    const std::string prefix = "expert" + std::to_string(i);
    Var e = cfg.backbone == BackboneKind::conv_stack
                ? ctx.conv_stack(g.input, prefix, cfg.conv_layers)
                : ctx.recurrent(ext_emb, flow_x, prefix);
    experts.push_back(ag::reshape(e, {n, 1, 2, cfg.height, cfg.width}));
  }
  g.expert_raw = ag::concat_axis1(experts);

  if (k == 1) {
    g.attention = ag::constant(Tensor(kfield, 1.0));
    g.log_attention = ag::constant(Tensor(kfield, 0.0));
  } else {
    Var logits = g.expert_raw;
    if (use_gs) {
      Var gs = ag::reshape(ctx.conv_stack(g.input, "gs", cfg.conv_layers), kfield);
      logits = ag::mul(gs, g.expert_raw);
    }
    check_finite_logits(logits.value());
    g.attention = ag::softmax_axis1(logits);
    g.log_attention = ag::log_softmax_axis1(logits);
  }
  g.gated = ag::mul(g.attention, g.expert_raw);
  Var combined = ag::tanh(ag::sum_axis1(g.gated));
  Var tanh_experts = ag::tanh(g.expert_raw);
  if (use_gt) {
    g.temporal_gate = ag::sigmoid(ctx.conv_stack(g.input, "gt", cfg.conv_layers));
    g.prediction = ag::mul(combined, g.temporal_gate);
    g.per_expert_h = ag::mul(ag::broadcast_axis1(g.temporal_gate, k), tanh_experts);
  } else {
    g.temporal_gate = ag::constant(Tensor(field, 1.0));
    g.prediction = combined;
    g.per_expert_h = tanh_experts;
  }
  return g;
}

ForwardTrace to_trace(const GraphTrace& g) {
  ForwardTrace t;
  t.prediction = g.prediction.value();
  t.expert_raw = g.expert_raw.value();
  t.attention = g.attention.value();
  t.gated = g.gated.value();
  t.temporal_gate = g.temporal_gate.value();
  t.per_expert_h = g.per_expert_h.value();
  t.input_channels = g.input.shape()[1];
  return t;
}

Tensor external_embed(const StExpertNet& net, const flow::ExternalVector& v) {
  const auto& cfg = net.config;
  if (cfg.ext_channels == 0) return Tensor(Shape{0, cfg.height, cfg.width});
  if (v.values.size() != cfg.ext_width) {
    throw ConfigError("external vector length " + std::to_string(v.values.size()) +
                      " does not match model width " + std::to_string(cfg.ext_width));
  }
  Bindings b = bind(net.params, false);
  Ctx ctx{net, b, Mode::eval};
  Var out = embed_external(ctx, ag::constant(Tensor(Shape{1, cfg.ext_width}, v.values)), 1);
  return out.value().reshaped({cfg.ext_channels, cfg.height, cfg.width});
}

Tensor spatial_attention(const Tensor& gs_out, const Tensor& expert_raw) {
  if (gs_out.shape() != expert_raw.shape()) {
    throw std::invalid_argument("spatial_attention: shape mismatch " +
                                shape_string(gs_out.shape()) + " vs " +
                                shape_string(expert_raw.shape()));
  }
  if (gs_out.rank() < 1) throw std::invalid_argument("spatial_attention: empty shape");
  // A leading expert axis is promoted to [1, K, ...].
  Shape batched = gs_out.shape();
  const bool single = gs_out.rank() <= 4;
  if (single) batched.insert(batched.begin(), 1);
  Tensor z(batched);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = gs_out[i] * expert_raw[i];
  check_finite_logits(z);
  Tensor a = ag::softmax_axis1(ag::constant(z)).value();
  return single ? a.reshaped(gs_out.shape()) : a;
}

ForwardTrace forward_batch(const StExpertNet& net, std::span<const fusion::InputSample> samples,
                           Variant variant) {
  Bindings b = bind(net.params, false);
  return to_trace(forward_graph(net, b, make_batch(samples), variant, Mode::eval));
}

ForwardTrace model_forward(const StExpertNet& net, const fusion::InputSample& x) {
  return forward_batch(net, std::span(&x, 1), Variant::full);
}

ForwardTrace forward_no_gs(const StExpertNet& net, const fusion::InputSample& x) {
  return forward_batch(net, std::span(&x, 1), Variant::no_gs);
}

ForwardTrace forward_no_gt(const StExpertNet& net, const fusion::InputSample& x) {
  return forward_batch(net, std::span(&x, 1), Variant::no_gt);
}

Tensor predict(const StExpertNet& net, std::span<const fusion::InputSample> samples,
               Variant variant, std::size_t batch_size) {
  if (samples.empty()) throw DataError("no samples to predict");
  const auto& cfg = net.config;
  Tensor out(Shape{samples.size(), 2, cfg.height, cfg.width});
  const std::size_t per = 2 * cfg.height * cfg.width;
  Bindings b = bind(net.params, false);
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, samples.size() - start);
    auto g = forward_graph(net, b, make_batch(samples.subspan(start, count)), variant, Mode::eval);
    const auto& p = g.prediction.value();
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<long>(start * per));
  }
  return out;
}

namespace {

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"experts", c.experts},
          {"backbone", to_string(c.backbone)},
          {"filters", c.filters},
          {"gate_filters", c.gate_filters},
          {"conv_layers", c.conv_layers},
          {"recurrent_layers", c.recurrent_layers},
          {"ext_channels", c.ext_channels},
          {"norm", c.norm == Norm::batch ? "batch" : "none"},
          {"variant", to_string(c.variant)},
          {"height", c.height},
          {"width", c.width},
          {"flow_channels", c.flow_channels},
          {"ext_width", c.ext_width}};
}

ModelConfig config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.experts = j.at("experts").get<std::size_t>();
  c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  c.filters = j.at("filters").get<std::size_t>();
  c.gate_filters = j.at("gate_filters").get<std::size_t>();
  c.conv_layers = j.at("conv_layers").get<std::size_t>();
  c.recurrent_layers = j.at("recurrent_layers").get<std::size_t>();
  c.ext_channels = j.at("ext_channels").get<std::size_t>();
  c.norm = j.at("norm").get<std::string>() == "batch" ? Norm::batch : Norm::none;
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.flow_channels = j.at("flow_channels").get<std::size_t>();
  c.ext_width = j.at("ext_width").get<std::size_t>();
  return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) { return config_to_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  try {
    return config_from_json(nlohmann::ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model config: " + std::string(e.what()));
  }
}

void save_checkpoint(const std::filesystem::path& path, const StExpertNet& net,
                     const std::map<std::string, std::string>& metadata) {
  nlohmann::ordered_json header;
  header["model"] = config_to_json(net.config);
  header["metadata"] = metadata;
  io::TensorArchive archive;
  archive.header_json = header.dump();
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    archive.arrays.emplace_back(net.params.name(i), net.params.value(i));
  }
  io::write_archive(path, archive);
}

StExpertNet load_checkpoint(const std::filesystem::path& path,
                            std::map<std::string, std::string>* metadata) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  auto archive = io::read_archive(path);
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(archive.header_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint header: " + std::string(e.what()));
  }
  StExpertNet net = init_model(config_from_json(header.at("model")), 0);
  if (archive.arrays.size() != net.params.size()) {
    throw DataError("checkpoint has " + std::to_string(archive.arrays.size()) +
                    " arrays, model expects " + std::to_string(net.params.size()));
  }
  for (auto& [name, t] : archive.arrays) {
    auto& dst = net.params.value(name);
    if (dst.shape() != t.shape()) {
      throw DataError("checkpoint array '" + name + "' has shape " + shape_string(t.shape()) +
                      ", model expects " + shape_string(dst.shape()));
    }
    dst = std::move(t);
  }
  if (metadata) {
    *metadata = header.value("metadata", nlohmann::ordered_json::object())
                    .get<std::map<std::string, std::string>>();
  }
  return net;
}

}  // namespace stmoe::model
