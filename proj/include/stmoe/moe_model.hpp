#pragma once

// Spatiotemporal mixture of experts: K expert backbones, a spatial gate whose
// output is combined with each expert's output into per-cell softmax
// attention, and a temporal gate that scales the combined prediction:
//
//   a_i = softmax_i(Gs(X)_i * E_i(X))          per channel and cell
//   e_i = a_i * E_i(X)
//   Y   = tanh(sum_i e_i) * sigmoid(Gt(X))
//   H_i = sigmoid(Gt(X)) * tanh(E_i(X))        consumed by the responsibility loss

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stmoe/autograd.hpp"
#include "stmoe/fusion.hpp"
#include "stmoe/tensor.hpp"

namespace stmoe::model {

enum class BackboneKind { conv_stack, recurrent_conv };
enum class Variant { full, no_gs, no_gt };
enum class Norm { batch, none };

std::string to_string(BackboneKind kind);
std::string to_string(Variant variant);
BackboneKind backbone_from_string(const std::string& s);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
  std::size_t experts = 3;
  BackboneKind backbone = BackboneKind::conv_stack;
  std::size_t filters = 64;       // expert width
  std::size_t gate_filters = 64;  // Gs / Gt width
  std::size_t conv_layers = 3;    // conv-stack depth
  std::size_t recurrent_layers = 2;
  std::size_t ext_channels = 2;   // n_w
  Norm norm = Norm::batch;
  Variant variant = Variant::full;  // which gates exist

  // Input geometry, taken from the dataset.
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t flow_channels = 0;
  std::size_t ext_width = 0;

  void validate() const;
  std::size_t input_channels() const { return ext_channels + flow_channels; }
  bool has_spatial_gate() const { return experts > 1 && variant != Variant::no_gs; }
  bool has_temporal_gate() const { return variant != Variant::no_gt; }
};

/// Geometry fields of a ModelConfig filled from a dataset.
ModelConfig with_geometry(ModelConfig cfg, const fusion::Dataset& ds);

/// Named tensors; trainable ones are optimized, the rest are buffers
/// (batch-norm running statistics).
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value, bool trainable);
  std::size_t size() const { return values_.size(); }
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  bool trainable(std::size_t i) const { return trainable_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(const std::string& n) const { return values_[index(n)]; }
  Tensor& value(const std::string& n) { return values_[index(n)]; }
  std::size_t trainable_scalars() const;
  /// Rounds every entry to the nearest binary32 value.
  void snap_to_f32();

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::vector<bool> trainable_;
  std::map<std::string, std::size_t> index_;
};

struct StExpertNet {
  ModelConfig config;
  ParamSet params;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, unit
/// batch-norm scale; every draw comes from `seed`. Values are binary32-exact.
StExpertNet init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Per-sample values of every intermediate, each with a leading batch axis N.
struct ForwardTrace {
  Tensor prediction;     // [N, 2, h, w]
  Tensor expert_raw;     // [N, K, 2, h, w]  E_i(X)
  Tensor attention;      // [N, K, 2, h, w]  a_i
  Tensor gated;          // [N, K, 2, h, w]  e_i
  Tensor temporal_gate;  // [N, 2, h, w]     sigmoid(Gt(X)), ones without Gt
  Tensor per_expert_h;   // [N, K, 2, h, w]  H_i
  std::size_t input_channels = 0;
};

enum class Mode { eval, train };

/// Parameter leaves for one graph evaluation plus batch-norm updates
/// collected in training mode.
struct Bindings {
  std::vector<ag::Var> vars;
  std::vector<std::pair<std::size_t, Tensor>> buffer_updates;
};

Bindings bind(const ParamSet& params, bool requires_grad);

struct GraphTrace {
  ag::Var input;  // fused X_t [N, n_w + flow, h, w]
  ag::Var prediction;
  ag::Var expert_raw;
  ag::Var attention;
  ag::Var log_attention;
  ag::Var gated;
  ag::Var temporal_gate;
  ag::Var per_expert_h;
};

struct Batch {
  Tensor x;    // [N, flow, h, w]
  Tensor ext;  // [N, ext_width]
  Tensor y;    // [N, 2, h, w]
};

Batch make_batch(std::span<const fusion::InputSample> samples);
Batch make_batch(std::span<const fusion::InputSample* const> samples);

GraphTrace forward_graph(const StExpertNet& net, Bindings& bindings, const Batch& batch,
                         Variant variant, Mode mode);

ForwardTrace to_trace(const GraphTrace& g);

/// External embedding [n_w, h, w]: affine map, ReLU, reshape.
Tensor external_embed(const StExpertNet& net, const flow::ExternalVector& v);

/// Softmax over the expert axis of gs_out * expert_raw. Shapes [K, ...] or
/// [N, K, ...]; throws NumericalError naming the expert with a non-finite logit.
Tensor spatial_attention(const Tensor& gs_out, const Tensor& expert_raw);

ForwardTrace model_forward(const StExpertNet& net, const fusion::InputSample& x);
/// Self-attention over the experts' own outputs; Gs unused.
ForwardTrace forward_no_gs(const StExpertNet& net, const fusion::InputSample& x);
/// Temporal gate dropped (reported as ones).
ForwardTrace forward_no_gt(const StExpertNet& net, const fusion::InputSample& x);

ForwardTrace forward_batch(const StExpertNet& net, std::span<const fusion::InputSample> samples,
                           Variant variant);

/// Predictions for a whole split in batches (eval mode), [N, 2, h, w].
Tensor predict(const StExpertNet& net, std::span<const fusion::InputSample> samples,
               Variant variant, std::size_t batch_size = 64);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// Checkpoint: "STMOECKP", u32 version, u32 json length, json (config +
// metadata), u32 array count, then per array: u32 name length, name,
// u32 rank, u32 dims..., f32le values.
void save_checkpoint(const std::filesystem::path& path, const StExpertNet& net,
                     const std::map<std::string, std::string>& metadata = {});
StExpertNet load_checkpoint(const std::filesystem::path& path,
                            std::map<std::string, std::string>* metadata = nullptr);

}  // namespace stmoe::model
