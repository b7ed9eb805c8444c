#include "cgl/cgl_losses.hpp"

#include <cmath>
#include <numeric>
#include <optional>

namespace cgl {

std::string to_string(GroupLossMode mode) {
  return mode == GroupLossMode::RatioOfSums ? "ratio-of-sums" : "per-pair-mean";
}

GroupLossMode parse_group_loss_mode(const std::string& text) {
  if (text == "ratio-of-sums") return GroupLossMode::RatioOfSums;
  if (text == "per-pair-mean") return GroupLossMode::PerPairMean;
  throw ConfigError("unknown group loss mode '" + text +
                    "' (expected ratio-of-sums or per-pair-mean)");
}

// ---------------------------------------------------------------------------
// Pair sampling

namespace {

// r distinct draws from [0, total) by partial Fisher-Yates, in draw order.
std::vector<int> sample_indices(int total, int r, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(total));
  std::iota(idx.begin(), idx.end(), 0);
  if (r >= total) return idx;
  for (int k = 0; k < r; ++k) {
    const auto j = k + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(total - k)));
    std::swap(idx[static_cast<std::size_t>(k)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(r));
  return idx;
}

}  // namespace

std::vector<FilterPair> sample_group_pairs(int group_size, int multiplier, Rng& rng) {
  if (multiplier < 1) throw ConfigError("pair multiplier must be >= 1");
  if (group_size < 2) {
    throw ConfigError("group of size " + std::to_string(group_size) +
                      " has no off-diagonal filter pairs");
  }
  const int total = group_size * (group_size - 1);
  std::vector<FilterPair> pairs;
  for (int code : sample_indices(total, multiplier * group_size, rng)) {
    // code enumerates (i, j), i != j, row-major with the diagonal removed
    const int i = code / (group_size - 1);
    const int rest = code % (group_size - 1);
    pairs.emplace_back(i, rest < i ? rest : rest + 1);
  }
  return pairs;
}

PairSample sample_pairs(std::span<const GroupPartition> partitions, int multiplier, Rng& rng,
                        bool cross_layer) {
  PairSample sample;
  for (const auto& part : partitions) {
    auto& layer = sample.within.emplace_back();
    for (const auto& range : part.groups) {
      auto pairs = sample_group_pairs(range.size(), multiplier, rng);
      for (auto& [i, j] : pairs) {
        i += range.begin;
        j += range.begin;
      }
      layer.push_back(std::move(pairs));
    }
  }
  if (cross_layer) {
    for (std::size_t l = 0; l + 1 < partitions.size(); ++l) {
      auto& layer = sample.cross.emplace_back();
      const auto& lo = partitions[l];
      const auto& hi = partitions[l + 1];
      const std::size_t shared = std::min(lo.groups.size(), hi.groups.size());
      for (std::size_t g = 0; g < shared; ++g) {
        const int n1 = lo.groups[g].size();
        const int n2 = hi.groups[g].size();
        std::vector<FilterPair> pairs;
        for (int code : sample_indices(n1 * n2, multiplier * n1, rng)) {
          pairs.emplace_back(lo.groups[g].begin + code / n2, hi.groups[g].begin + code % n2);
        }
        layer.push_back(std::move(pairs));
      }
    }
  }
  return sample;
}

// ---------------------------------------------------------------------------
// Soft IoU and the group activation loss

namespace {

Tensor floored(const Tensor& denominator) {
  if (denominator.item() < kDenominatorFloor) {
    return Tensor::scalar(static_cast<Scalar>(kDenominatorFloor));
  }
  return denominator;
}

// Lazily sliced per-filter fields and their L1 norms for one layer.
class FieldCache {
 public:
  explicit FieldCache(Tensor field)
      : field_(std::move(field)),
        slices_(static_cast<std::size_t>(field_.dim(1))),
        norms_(static_cast<std::size_t>(field_.dim(1))) {}

  const Tensor& slice(int filter) {
    auto& s = slices_.at(static_cast<std::size_t>(filter));
    if (!s) s = slice_channel(field_, filter);
    return *s;
  }
  const Tensor& norm(int filter) {
    auto& n = norms_.at(static_cast<std::size_t>(filter));
    if (!n) n = l1_norm(slice(filter));
    return *n;
  }

 private:
  Tensor field_;
  std::vector<std::optional<Tensor>> slices_;
  std::vector<std::optional<Tensor>> norms_;
};

// One term of either group-loss flavour, over a list of (a-filter, b-filter)
// pairs drawn from two caches (the same cache for within-layer pairs).
struct PairTerms {
  std::vector<Tensor> numerators;    // 2 |a - b|_1
  std::vector<Tensor> denominators;  // |a|_1 + |b|_1 + |a - b|_1
  std::vector<Tensor> distances;     // per-pair soft IoU distance
  std::size_t blocks = 0;            // (layer, group) blocks contributing pairs
};

void collect(FieldCache& a_cache, FieldCache& b_cache, const std::vector<FilterPair>& pairs,
             GroupLossMode mode, PairTerms& terms) {
  if (pairs.empty()) return;
  ++terms.blocks;
  for (const auto& [i, j] : pairs) {
    const Tensor& a = a_cache.slice(i);
    const Tensor& b = b_cache.slice(j);
    if (a.shape() != b.shape()) {
      throw DimensionError("group loss: field shapes " + shape_str(a.shape()) + " and " +
                           shape_str(b.shape()) + " differ");
    }
    Tensor diff = l1_norm(sub(b, a));
    std::vector<Tensor> parts{a_cache.norm(i), b_cache.norm(j), diff};
    Tensor den = add_n(parts);
    Tensor num = scale(diff, 2.0f);
    if (mode == GroupLossMode::PerPairMean) {
      terms.distances.push_back(div(num, floored(den)));
    } else {
      terms.numerators.push_back(std::move(num));
      terms.denominators.push_back(std::move(den));
    }
  }
}

Tensor reduce(const PairTerms& terms, GroupLossMode mode) {
  if (mode == GroupLossMode::PerPairMean) {
    return scale(add_n(terms.distances), 1.0f / static_cast<Scalar>(terms.distances.size()));
  }
  // r: pairs per (layer, group) block, averaged when blocks differ in size.
  const double r = static_cast<double>(terms.numerators.size()) / static_cast<double>(terms.blocks);
  Tensor ratio = div(add_n(terms.numerators), floored(add_n(terms.denominators)));
  return scale(ratio, static_cast<Scalar>(1.0 / r));
}

}  // namespace

Tensor soft_iou_distance(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("soft_iou_distance: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor diff = l1_norm(sub(a, b));
  std::vector<Tensor> parts{l1_norm(a), l1_norm(b), diff};
  return div(scale(diff, 2.0f), floored(add_n(parts)));
}

Tensor group_activation_loss(std::span<const Tensor> fields,
                             std::span<const GroupPartition> partitions, const PairSample& pairs,
                             Scalar lambda2, GroupLossMode mode) {
  if (fields.size() != partitions.size() || pairs.within.size() != fields.size()) {
    throw DimensionError("group loss: " + std::to_string(fields.size()) + " fields, " +
                         std::to_string(partitions.size()) + " partitions, " +
                         std::to_string(pairs.within.size()) + " pair layers");
  }
  std::vector<FieldCache> caches;
  caches.reserve(fields.size());
  for (std::size_t l = 0; l < fields.size(); ++l) {
    if (fields[l].rank() != 4 || fields[l].dim(1) != partitions[l].total_filters) {
      throw DimensionError("group loss: field " + shape_str(fields[l].shape()) +
                           " does not match a partition of " +
                           std::to_string(partitions[l].total_filters) + " filters");
    }
    caches.emplace_back(fields[l]);
  }

  PairTerms within;
  for (std::size_t l = 0; l < fields.size(); ++l) {
    for (const auto& group_pairs : pairs.within[l]) collect(caches[l], caches[l], group_pairs, mode, within);
  }
  if (within.numerators.empty() && within.distances.empty()) {
    throw ConfigError("group loss: r = 0 (no filter pairs sampled)");
  }
  Tensor loss = reduce(within, mode);
  if (lambda2 <= 0.0f || fields.size() < 2) return loss;

  PairTerms cross;
  for (std::size_t l = 0; l + 1 < fields.size() && l < pairs.cross.size(); ++l) {
    const Tensor& lo = fields[l];
    const Tensor& hi = fields[l + 1];
    const int factor_lo = lo.dim(2) / hi.dim(2);
    const int factor_hi = hi.dim(2) / lo.dim(2);
    Tensor lo_pooled = lo, hi_pooled = hi;
    if (factor_lo > 1) lo_pooled = avg_pool(lo, factor_lo);
    if (factor_hi > 1) hi_pooled = avg_pool(hi, factor_hi);
    if (lo_pooled.dim(2) != hi_pooled.dim(2) || lo_pooled.dim(3) != hi_pooled.dim(3)) {
      throw DimensionError("group loss: cannot reconcile fields " + shape_str(lo.shape()) +
                           " and " + shape_str(hi.shape()));
    }
    FieldCache lo_cache(lo_pooled), hi_cache(hi_pooled);
    for (const auto& group_pairs : pairs.cross[l]) collect(lo_cache, hi_cache, group_pairs, mode, cross);
  }
  if (cross.numerators.empty() && cross.distances.empty()) return loss;
  return add(loss, scale(reduce(cross, mode), lambda2));
}

// ---------------------------------------------------------------------------
// Spatial loss

Tensor spatial_loss(const Tensor& field) {
  if (field.rank() != 4) {
    throw DimensionError("spatial_loss: expected N x F x H x W, got " + shape_str(field.shape()));
  }
  const int n = field.dim(0), f = field.dim(1), h = field.dim(2), w = field.dim(3);
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  const Eigen::Index maps = static_cast<Eigen::Index>(n) * f;
  if (maps == 0 || plane == 0) {
    throw DimensionError("spatial_loss: empty field " + shape_str(field.shape()));
  }
  Eigen::ArrayXd rows(plane), cols(plane);
  for (Eigen::Index j = 0; j < plane; ++j) {
    rows(j) = static_cast<double>(j / w);
    cols(j) = static_cast<double>(j % w);
  }
  // Per-map center, mass and loss are kept for the backward pass.
  Eigen::ArrayXd mass(maps), cy(maps), cx(maps), spread(maps);
  double total = 0.0;
  const Buffer& v = field.data();
  for (Eigen::Index m = 0; m < maps; ++m) {
    const Eigen::ArrayXd p = v.segment(m * plane, plane).cast<double>();
    const double msum = std::max(p.sum(), kDenominatorFloor);
    const double y = (p * rows).sum() / msum;
    const double x = (p * cols).sum() / msum;
    const Eigen::ArrayXd d = ((rows - y).square() + (cols - x).square()).sqrt();
    mass(m) = msum;
    cy(m) = y;
    cx(m) = x;
    spread(m) = (p * d).sum() / msum;
    total += spread(m);
  }
  const double inv_maps = 1.0 / static_cast<double>(maps);
  return make_result(
      Shape{}, Buffer::Constant(1, static_cast<Scalar>(total * inv_maps)), {field},
      [rows, cols, mass, cy, cx, spread, plane, maps, inv_maps](detail::Node& self) {
        auto& parent = *self.parents[0];
        Buffer& g = parent.grad_buffer();
        const double upstream = self.grad(0) * inv_maps;
        for (Eigen::Index m = 0; m < maps; ++m) {
          const Eigen::ArrayXd p = parent.value.segment(m * plane, plane).cast<double>();
          const Eigen::ArrayXd dy = rows - cy(m);
          const Eigen::ArrayXd dx = cols - cx(m);
          const Eigen::ArrayXd d = (dy.square() + dx.square()).sqrt();
          const Eigen::ArrayXd inv_d = (d > 0).select(d.inverse(), 0.0);
          // dR/dp_k = (d_k - R)/M - u . (x_k - c) / M^2, u = sum_j p_j (x_j - c)/d_j
          const double uy = (p * dy * inv_d).sum();
          const double ux = (p * dx * inv_d).sum();
          const double M = mass(m);
          const Eigen::ArrayXd grad =
              (d - spread(m)) / M - (uy * dy + ux * dx) / (M * M);
          g.segment(m * plane, plane) += (grad * upstream).cast<Scalar>();
        }
      });
}

// ---------------------------------------------------------------------------
// Block norm and relevance

namespace {

void check_layers(std::span<const Tensor> weights, std::span<const GroupPartition> partitions) {
  if (weights.size() != partitions.size()) {
    throw DimensionError("block norm: " + std::to_string(weights.size()) + " weight tensors for " +
                         std::to_string(partitions.size()) + " partitions");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rank() < 1 || weights[l].dim(0) != partitions[l].total_filters) {
      throw DimensionError("block norm: weight " + shape_str(weights[l].shape()) +
                           " does not match a partition of " +
                           std::to_string(partitions[l].total_filters) + " filters");
    }
  }
}

}  // namespace

Tensor block_norm(std::span<const Tensor> weights, std::span<const GroupPartition> partitions) {
  check_layers(weights, partitions);
  std::vector<Tensor> layer_sums;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    std::vector<Tensor> blocks;
    for (const auto& range : partitions[l].groups) {
      blocks.push_back(frobenius_norm(narrow(weights[l], range.begin, range.end)));
    }
    if (partitions[l].free_range) {
      for (int k = partitions[l].free_range->begin; k < partitions[l].free_range->end; ++k) {
        blocks.push_back(frobenius_norm(narrow(weights[l], k, k + 1)));
      }
    }
    layer_sums.push_back(add_n(blocks));
  }
  return add_n(layer_sums);
}

Scalar RelevanceVector::total() const {
  double acc = 0.0;
  for (Scalar b : layer) acc += static_cast<double>(b);
  return static_cast<Scalar>(acc);
}

RelevanceVector relevance(std::span<const Tensor> weights,
                          std::span<const GroupPartition> partitions) {
  check_layers(weights, partitions);
  NoGradGuard guard;
  RelevanceVector rel;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    auto& groups = rel.group.emplace_back();
    double acc = 0.0;
    for (const auto& range : partitions[l].groups) {
      const Scalar beta = frobenius_norm(narrow(weights[l], range.begin, range.end)).item();
      groups.push_back(beta);
      acc += static_cast<double>(beta);
    }
    rel.layer.push_back(static_cast<Scalar>(acc));
  }
  return rel;
}

Tensor total_objective(const Tensor& data_loss, const Tensor& block, const Tensor& group,
                       const Tensor& spatial, const LossWeights& weights) {
  Tensor total = data_loss;
  if (block.defined()) total = add(total, scale(block, weights.block_norm));
  if (group.defined()) total = add(total, scale(group, weights.group));
  if (spatial.defined()) total = add(total, scale(spatial, weights.spatial));
  return total;
}

}  // namespace cgl
