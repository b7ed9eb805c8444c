#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgl/tensor.hpp"

namespace cgl {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FilterRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool operator==(const FilterRange&) const = default;
};

/// A layer's filters split into G equal contiguous concept groups followed by
/// an optional trailing block of free filters.
struct GroupPartition {
  int total_filters = 0;
  int num_groups = 0;
  int group_size = 0;
  int free_filters = 0;
  std::vector<FilterRange> groups;
  std::optional<FilterRange> free_range;
};

GroupPartition partition_filters(int total_filters, int num_groups, int free_filters);

/// The network-wide (P1, P2) pair of the soft receptive field.
struct ScaleParams {
  Tensor p1 = Tensor::scalar(1.0f, true);
  Tensor p2 = Tensor::scalar(0.0f, true);
};

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Buffer running_mean;
  Buffer running_var;
};

/// Minimum |gamma| used when undoing batch normalization for the soft field.
inline constexpr Scalar kGammaFloor = 1e-3f;
inline constexpr Scalar kStdEps = 1e-5f;

/// psi = sigmoid(P1 * a / S + P2), with S one value per channel.
Tensor soft_field(const Tensor& pre_activation, const Tensor& channel_std, const ScaleParams& scale);

/// psi = sigmoid(P1 * (a + beta / gamma) + P2) for batch-normalized a. gamma's
/// magnitude is floored at kGammaFloor.
Tensor soft_field_batchnorm(const Tensor& standardized, const BatchNormParams& bn,
                            const ScaleParams& scale);

struct ConvLayerSpec {
  int out_channels = 0;
  int kernel = 3;
  int groups = 1;
  int free_filters = 0;
};

/// conv -> ReLU -> 2x2 max-pool per layer, then global average pool and a
/// linear head.
struct Architecture {
  int in_channels = 3;
  std::vector<ConvLayerSpec> conv;
  int num_classes = 2;
  bool batch_norm = false;

  bool operator==(const Architecture& other) const;
};

/// Two 3x3 layers with 128 and 256 filters, eight concept groups each.
Architecture synthetic_architecture(int num_classes);

struct ConvLayer {
  ConvLayerSpec spec;
  GroupPartition partition;
  Tensor weight;  // out x in x k x k
  Tensor bias;    // out
  std::optional<BatchNormParams> bn;
  Buffer running_std;  // soft-field std in evaluation mode (no batch norm)
};

struct LayerActivations {
  int layer = 0;
  Tensor pre_activation;  // N x F x H x W, conv output
  Tensor response;        // unit output before ReLU (after batch norm, if any)
  Tensor field;           // psi, same shape, values in (0, 1); empty unless captured
  const GroupPartition* partition = nullptr;
};

struct ForwardResult {
  Tensor logits;
  std::vector<LayerActivations> layers;
};

enum class Mode { Train, Eval };

class ConceptModel {
 public:
  ConceptModel(Architecture arch, std::uint64_t seed);

  /// Runs the network. With `capture_fields` the soft receptive fields are
  /// computed alongside; they never feed back into the logits. In Train mode
  /// minibatch statistics are used and the running estimates are updated.
  ForwardResult forward(const Tensor& images, Mode mode, bool capture_fields = true);

  const Architecture& architecture() const { return arch_; }
  std::vector<ConvLayer>& layers() { return layers_; }
  const std::vector<ConvLayer>& layers() const { return layers_; }
  ScaleParams& scale() { return scale_; }
  const ScaleParams& scale() const { return scale_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }

  std::vector<Tensor> parameters() const;
  std::vector<Tensor> conv_weights() const;
  std::vector<GroupPartition> partitions() const;

  static constexpr Scalar kRunningMomentum = 0.1f;

 private:
  Architecture arch_;
  std::vector<ConvLayer> layers_;
  ScaleParams scale_;
  Tensor head_weight_;
  Tensor head_bias_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ConceptModel& model, std::uint64_t config_hash,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  ConceptModel model;
  std::uint64_t config_hash;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cgl
