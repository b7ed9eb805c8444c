#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cgl/concept_model.hpp"
#include "cgl/rng.hpp"
#include "cgl/tensor.hpp"

namespace cgl {

/// Floor applied to every soft-IoU and spatial-loss denominator.
inline constexpr double kDenominatorFloor = 1e-8;

enum class GroupLossMode {
  RatioOfSums,  // (1/r) * sum of numerators / sum of denominators
  PerPairMean,  // mean of soft_iou_distance over the sampled pairs
};

std::string to_string(GroupLossMode mode);
GroupLossMode parse_group_loss_mode(const std::string& text);

struct LossWeights {
  Scalar block_norm = 1e-4f;  // lambda_bn
  Scalar group = 0.1f;        // lambda_g
  Scalar spatial = 0.01f;     // lambda_s
  Scalar cross_layer = 0.0f;  // lambda_2
};

using FilterPair = std::pair<int, int>;

/// Pairs of absolute filter indices drawn for one optimizer step.
/// `within[l][g]` pairs filters of group g in layer l; `cross[l][g]` pairs a
/// filter of group g in layer l (first) with one of group g in layer l + 1
/// (second).
struct PairSample {
  std::vector<std::vector<std::vector<FilterPair>>> within;
  std::vector<std::vector<std::vector<FilterPair>>> cross;
};

/// r = multiplier * group_size ordered off-diagonal pairs drawn uniformly
/// without replacement; every off-diagonal pair when r exceeds their count.
/// Indices are relative to the group.
std::vector<FilterPair> sample_group_pairs(int group_size, int multiplier, Rng& rng);

PairSample sample_pairs(std::span<const GroupPartition> partitions, int multiplier, Rng& rng,
                        bool cross_layer = false);

/// 2|a-b|_1 / (|a|_1 + |b|_1 + |a-b|_1); 1 - IoU on indicator fields.
Tensor soft_iou_distance(const Tensor& a, const Tensor& b);

/// Group activation loss over the per-layer soft fields (N x F x H x W).
/// The cross-layer term is only evaluated when lambda2 > 0; fields of
/// adjacent layers are reconciled by average-pooling the larger one.
Tensor group_activation_loss(std::span<const Tensor> fields,
                             std::span<const GroupPartition> partitions, const PairSample& pairs,
                             Scalar lambda2, GroupLossMode mode);

/// Mean over samples and filters of the psi-weighted distance from the
/// activation center, measured in grid cells of the field.
Tensor spatial_loss(const Tensor& field);

/// Sum over layers and groups of the Frobenius norm of each group's weights;
/// free filters enter as singleton blocks.
Tensor block_norm(std::span<const Tensor> weights, std::span<const GroupPartition> partitions);

struct RelevanceVector {
  std::vector<std::vector<Scalar>> group;  // beta_gl, indexed [layer][group]
  std::vector<Scalar> layer;               // beta_l

  /// sum_l beta_l, accumulated the way block_norm accumulates.
  Scalar total() const;
};

RelevanceVector relevance(std::span<const Tensor> weights,
                          std::span<const GroupPartition> partitions);

/// L_d + lambda_bn R_a + lambda_g R_b + lambda_s R_c. Undefined terms count
/// as zero.
Tensor total_objective(const Tensor& data_loss, const Tensor& block, const Tensor& group,
                       const Tensor& spatial, const LossWeights& weights);

}  // namespace cgl
