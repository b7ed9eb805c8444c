#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "cgl/cgl_losses.hpp"
#include "test_support.hpp"

using namespace cgl;
using cgl::testing::gradcheck;
using cgl::testing::random_tensor;

namespace {

Tensor indicator(Shape shape, const std::vector<int>& on) {
  Buffer b = Buffer::Zero(shape_numel(shape));
  for (int i : on) b(i) = 1.0f;
  return Tensor::from(std::move(shape), std::move(b));
}

// |A n B| / |A u B| over explicit index sets.
double set_iou(const std::set<int>& a, const std::set<int>& b) {
  std::set<int> both, either = a;
  for (int x : b) {
    if (a.count(x)) both.insert(x);
    either.insert(x);
  }
  return static_cast<double>(both.size()) / static_cast<double>(either.size());
}

// Direct transcription of the spread formula for one H x W map.
double spread_oracle(const std::vector<double>& p, int h, int w) {
  double m = 0, ry = 0, rx = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      m += p[r * w + c];
      ry += r * p[r * w + c];
      rx += c * p[r * w + c];
    }
  ry /= m;
  rx /= m;
  double s = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) s += p[r * w + c] * std::hypot(r - ry, c - rx);
  return s / m;
}

// Fields whose filters occupy disjoint value bands, so no |psi_i - psi_j|
// sits within a finite-difference step of its kink. `offset` shifts the
// bands by half a period for the second layer of cross-layer pairs.
Tensor banded_field(std::mt19937& gen, Shape shape, float offset) {
  std::uniform_real_distribution<float> jitter(0.0f, 0.05f);
  const int filters = shape[1];
  const int inner = static_cast<int>(shape_numel(shape)) / (shape[0] * filters);
  Buffer b(shape_numel(shape));
  for (Eigen::Index k = 0; k < b.size(); ++k) {
    const int f = static_cast<int>(k / inner) % filters;
    b(k) = 0.05f + 0.15f * static_cast<float>(f) + offset + jitter(gen);
  }
  return Tensor::from(std::move(shape), std::move(b), true);
}

PairSample single_pair(int i, int j) {
  PairSample s;
  s.within = {{{{i, j}}}};
  return s;
}

}  // namespace

TEST_CASE("soft_iou_distance examples") {
  std::mt19937 gen(1);
  auto x = random_tensor(gen, {2, 3, 3}, 0, 1, false);
  CHECK(soft_iou_distance(x, x).item() == 0.0f);

  auto a = indicator({1, 3, 3}, {0, 1, 2});
  auto b = indicator({1, 3, 3}, {6, 7, 8});
  CHECK(soft_iou_distance(a, b).item() == doctest::Approx(1.0).epsilon(1e-7));

  auto sub_a = indicator({1, 1, 2}, {0});
  auto sup_b = indicator({1, 1, 2}, {0, 1});
  CHECK(soft_iou_distance(sub_a, sup_b).item() == doctest::Approx(0.5).epsilon(1e-7));

  CHECK_THROWS_AS(soft_iou_distance(a, sub_a), DimensionError);
  // empty fields: floored denominator, no NaN
  auto zero = Tensor::zeros({1, 2, 2});
  CHECK(soft_iou_distance(zero, zero).item() == 0.0f);
}

TEST_CASE("soft IoU matches brute-force set IoU on random binary masks") {
  std::mt19937 gen(2024);
  std::uniform_int_distribution<int> side(1, 16);
  std::uniform_real_distribution<double> u(0, 1);
  int checked = 0;
  while (checked < 200) {
    const int h = side(gen), w = side(gen);
    const double density_a = u(gen), density_b = u(gen);
    std::set<int> sa, sb;
    for (int k = 0; k < h * w; ++k) {
      if (u(gen) < density_a) sa.insert(k);
      if (u(gen) < density_b) sb.insert(k);
    }
    if (sa.empty() && sb.empty()) continue;
    auto a = indicator({1, h, w}, {sa.begin(), sa.end()});
    auto b = indicator({1, h, w}, {sb.begin(), sb.end()});
    const double d = soft_iou_distance(a, b).item();
    CHECK(std::abs(d - (1.0 - set_iou(sa, sb))) < 1e-6);
    CHECK(std::abs(soft_iou_distance(b, a).item() - d) < 1e-7);
    ++checked;
  }
}

TEST_CASE("soft IoU is bounded for non-negative fields") {
  std::mt19937 gen(3);
  for (int i = 0; i < 100; ++i) {
    auto a = random_tensor(gen, {2, 4, 4}, 0, 1, false);
    auto b = random_tensor(gen, {2, 4, 4}, 0, 1, false);
    const float d = soft_iou_distance(a, b).item();
    CHECK(d > 0.0f);
    CHECK(d <= 1.0f);
  }
}

TEST_CASE("pair sampling") {
  Rng rng(17);
  auto pairs = sample_group_pairs(16, 3, rng);
  CHECK(pairs.size() == 48);
  std::set<FilterPair> distinct(pairs.begin(), pairs.end());
  CHECK(distinct.size() == 48);
  for (auto [i, j] : pairs) {
    CHECK(i != j);
    CHECK(i >= 0);
    CHECK(i < 16);
    CHECK(j >= 0);
    CHECK(j < 16);
  }

  auto tiny = sample_group_pairs(2, 3, rng);
  CHECK(std::set<FilterPair>(tiny.begin(), tiny.end()) == std::set<FilterPair>{{0, 1}, {1, 0}});

  CHECK_THROWS_AS(sample_group_pairs(1, 3, rng), ConfigError);
  CHECK_THROWS_AS(sample_group_pairs(4, 0, rng), ConfigError);

  std::vector<GroupPartition> parts{partition_filters(10, 3, 1), partition_filters(8, 2, 0)};
  Rng r1(5), r2(5);
  auto s1 = sample_pairs(parts, 3, r1, true);
  auto s2 = sample_pairs(parts, 3, r2, true);
  CHECK(s1.within == s2.within);
  CHECK(s1.cross == s2.cross);
  // absolute indices stay inside their group; the free filter never appears
  for (std::size_t l = 0; l < parts.size(); ++l) {
    for (std::size_t g = 0; g < parts[l].groups.size(); ++g) {
      const auto range = parts[l].groups[g];
      CHECK(s1.within[l][g].size() ==
            static_cast<std::size_t>(std::min(3 * range.size(), range.size() * (range.size() - 1))));
      for (auto [i, j] : s1.within[l][g]) {
        CHECK(i >= range.begin);
        CHECK(i < range.end);
        CHECK(j >= range.begin);
        CHECK(j < range.end);
      }
    }
  }
  REQUIRE(s1.cross.size() == 1);
  CHECK(s1.cross[0].size() == 2);
  for (auto [i, j] : s1.cross[0][1]) {
    CHECK(i >= 3);
    CHECK(i < 6);
    CHECK(j >= 4);
    CHECK(j < 8);
  }

  // fresh draws differ from step to step
  Rng r3(5);
  auto first = sample_pairs(parts, 1, r3);
  auto second = sample_pairs(parts, 1, r3);
  CHECK(first.within != second.within);
}

TEST_CASE("group activation loss examples") {
  const auto part = partition_filters(2, 1, 0);
  std::vector<GroupPartition> parts{part};
  // two filters with disjoint indicator fields of m = 3 pixels each
  Buffer b = Buffer::Zero(2 * 9);
  for (int k : {0, 1, 2}) b(k) = 1.0f;
  for (int k : {9 + 6, 9 + 7, 9 + 8}) b(k) = 1.0f;
  std::vector<Tensor> fields{Tensor::from({1, 2, 3, 3}, b)};
  for (auto mode : {GroupLossMode::RatioOfSums, GroupLossMode::PerPairMean}) {
    CHECK(group_activation_loss(fields, parts, single_pair(0, 1), 0.0f, mode).item() ==
          doctest::Approx(1.0).epsilon(1e-7));
  }

  // identical fields inside each group
  std::mt19937 gen(4);
  auto base = random_tensor(gen, {2, 1, 4, 4}, 0.1f, 0.9f, false);
  Buffer same(2 * 6 * 16);
  for (int n = 0; n < 2; ++n)
    for (int f = 0; f < 6; ++f)
      same.segment((n * 6 + f) * 16, 16) = base.data().segment(n * 16, 16);
  std::vector<Tensor> flat{Tensor::from({2, 6, 4, 4}, same)};
  std::vector<GroupPartition> three{partition_filters(6, 3, 0)};
  Rng rng(9);
  auto pairs = sample_pairs(three, 3, rng);
  for (auto mode : {GroupLossMode::RatioOfSums, GroupLossMode::PerPairMean}) {
    CHECK(group_activation_loss(flat, three, pairs, 0.0f, mode).item() == 0.0f);
  }

  PairSample none;
  none.within = {{{}, {}, {}}};
  CHECK_THROWS_AS(group_activation_loss(flat, three, none, 0.0f, GroupLossMode::RatioOfSums),
                  ConfigError);
  CHECK_THROWS_AS(group_activation_loss(fields, three, pairs, 0.0f, GroupLossMode::RatioOfSums),
                  DimensionError);

  CHECK(parse_group_loss_mode(to_string(GroupLossMode::PerPairMean)) == GroupLossMode::PerPairMean);
  CHECK(parse_group_loss_mode("ratio-of-sums") == GroupLossMode::RatioOfSums);
  CHECK_THROWS_AS(parse_group_loss_mode("mean"), ConfigError);
}

TEST_CASE("ratio-of-sums against a hand-rolled sum") {
  std::mt19937 gen(5);
  auto field = random_tensor(gen, {2, 4, 3, 3}, 0.05f, 0.95f, false);
  std::vector<GroupPartition> parts{partition_filters(4, 2, 0)};
  Rng rng(3);
  auto pairs = sample_pairs(parts, 3, rng);
  auto at = [&](int n, int f, int k) { return static_cast<double>(field.data()((n * 4 + f) * 9 + k)); };
  double num = 0, den = 0, per_pair = 0;
  std::size_t count = 0;
  for (const auto& group : pairs.within[0]) {
    for (auto [i, j] : group) {
      double ai = 0, aj = 0, d = 0;
      for (int n = 0; n < 2; ++n)
        for (int k = 0; k < 9; ++k) {
          ai += at(n, i, k);
          aj += at(n, j, k);
          d += std::abs(at(n, j, k) - at(n, i, k));
        }
      num += 2 * d;
      den += ai + aj + d;
      per_pair += 2 * d / (ai + aj + d);
      ++count;
    }
  }
  const double r = static_cast<double>(count) / 2.0;
  std::vector<Tensor> fields{field};
  CHECK(group_activation_loss(fields, parts, pairs, 0, GroupLossMode::RatioOfSums).item() ==
        doctest::Approx(num / den / r).epsilon(1e-6));
  CHECK(group_activation_loss(fields, parts, pairs, 0, GroupLossMode::PerPairMean).item() ==
        doctest::Approx(per_pair / static_cast<double>(count)).epsilon(1e-6));
}

TEST_CASE("cross-layer term") {
  std::mt19937 gen(6);
  std::vector<GroupPartition> parts{partition_filters(4, 2, 0), partition_filters(6, 2, 0)};
  std::vector<Tensor> fields{random_tensor(gen, {2, 4, 4, 4}, 0.05f, 0.95f, false),
                             random_tensor(gen, {2, 6, 2, 2}, 0.05f, 0.95f, false)};
  Rng rng(1);
  auto pairs = sample_pairs(parts, 3, rng, true);
  PairSample within_only = pairs;
  within_only.cross.clear();
  for (auto mode : {GroupLossMode::RatioOfSums, GroupLossMode::PerPairMean}) {
    const float off = group_activation_loss(fields, parts, pairs, 0.0f, mode).item();
    const float base = group_activation_loss(fields, parts, within_only, 0.0f, mode).item();
    CHECK(off == base);
    const float on = group_activation_loss(fields, parts, pairs, 0.5f, mode).item();
    CHECK(on > base);
  }
}

TEST_CASE("spatial loss values") {
  std::vector<double> uniform(9, 0.5);
  CHECK(spread_oracle(uniform, 3, 3) == doctest::Approx((4 + 4 * std::sqrt(2.0)) / 9));
  auto field = Tensor::full({1, 1, 3, 3}, 0.5f);
  CHECK(std::abs(spatial_loss(field).item() - 1.07298) < 1e-4);
  CHECK(spatial_loss(field).item() == doctest::Approx(spread_oracle(uniform, 3, 3)).epsilon(1e-6));

  Buffer spike = Buffer::Constant(25, 1e-6f);
  spike(12) = 1.0f - 1e-6f;
  CHECK(spatial_loss(Tensor::from({1, 1, 5, 5}, spike)).item() < 1e-3f);
  CHECK(spatial_loss(Tensor::zeros({1, 1, 3, 3})).item() == 0.0f);

  std::mt19937 gen(7);
  for (int t = 0; t < 20; ++t) {
    // 3x3 pattern placed at two offsets of an otherwise empty 7x7 grid
    auto pattern = random_tensor(gen, {9}, 0.05f, 0.95f, false);
    auto place = [&](int dy, int dx) {
      Buffer b = Buffer::Zero(49);
      for (int k = 0; k < 9; ++k) b((k / 3 + dy) * 7 + k % 3 + dx) = pattern.data()(k);
      return Tensor::from({1, 1, 7, 7}, b);
    };
    const float a = spatial_loss(place(0, 0)).item();
    CHECK(std::abs(spatial_loss(place(4, 3)).item() - a) < 1e-6);
    CHECK(std::abs(spatial_loss(place(2, 1)).item() - a) < 1e-6);

    auto random_field = random_tensor(gen, {2, 3, 5, 4}, 0.01f, 0.99f, false);
    const float s = spatial_loss(random_field).item();
    CHECK(s >= 0.0f);
    CHECK(std::abs(spatial_loss(scale(random_field, 0.37f)).item() - s) < 1e-6);

    // mean over maps of the per-map oracle
    double expect = 0;
    for (int m = 0; m < 6; ++m) {
      std::vector<double> p(20);
      for (int k = 0; k < 20; ++k) p[k] = random_field.data()(m * 20 + k);
      expect += spread_oracle(p, 5, 4);
    }
    CHECK(s == doctest::Approx(expect / 6).epsilon(1e-5));
  }
  CHECK_THROWS_AS(spatial_loss(Tensor::zeros({3, 3})), DimensionError);
}

TEST_CASE("block norm and relevance") {
  std::vector<GroupPartition> one{partition_filters(2, 1, 0)};
  std::vector<Tensor> zero{Tensor::zeros({2, 1, 1, 1})};
  CHECK(block_norm(zero, one).item() == 0.0f);
  std::vector<Tensor> eye{Tensor::from({2, 1, 1, 2}, std::vector<float>{1, 0, 0, 1})};
  CHECK(block_norm(eye, one).item() == doctest::Approx(std::sqrt(2.0)).epsilon(1e-7));

  std::mt19937 gen(8);
  // G = F: per-filter l2,1 sum
  std::vector<Tensor> w{random_tensor(gen, {6, 2, 3, 3}, -1, 1, false)};
  std::vector<GroupPartition> per_filter{partition_filters(6, 6, 0)};
  double oracle = 0;
  for (int f = 0; f < 6; ++f) {
    double sq = 0;
    for (int k = 0; k < 18; ++k) sq += std::pow(static_cast<double>(w[0].data()(f * 18 + k)), 2);
    oracle += std::sqrt(sq);
  }
  CHECK(block_norm(w, per_filter).item() == doctest::Approx(oracle).epsilon(1e-6));

  // free filters are singleton blocks in the block norm
  std::vector<GroupPartition> with_free{partition_filters(6, 2, 2)};
  double expect = 0;
  for (auto [b, e] : std::vector<std::pair<int, int>>{{0, 2}, {2, 4}, {4, 5}, {5, 6}}) {
    double sq = 0;
    for (int k = b * 18; k < e * 18; ++k) sq += std::pow(static_cast<double>(w[0].data()(k)), 2);
    expect += std::sqrt(sq);
  }
  CHECK(block_norm(w, with_free).item() == doctest::Approx(expect).epsilon(1e-6));

  // relevance identities, exact
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> ws{random_tensor(gen, {8, 3, 3, 3}, -1, 1, false),
                           random_tensor(gen, {12, 8, 3, 3}, -1, 1, false)};
    std::vector<GroupPartition> parts{partition_filters(8, 4, 0), partition_filters(12, 3, 0)};
    auto rel = relevance(ws, parts);
    for (std::size_t l = 0; l < 2; ++l) {
      std::vector<Tensor> wl{ws[l]};
      std::vector<GroupPartition> pl{parts[l]};
      CHECK(rel.layer[l] == block_norm(wl, pl).item());
      for (float b : rel.group[l]) CHECK(b >= 0.0f);
    }
    CHECK(rel.total() == block_norm(ws, parts).item());
  }

  Buffer zero_group = w[0].data();
  std::fill_n(zero_group.data(), 36, 0.0f);  // first group
  std::vector<Tensor> wz{Tensor::from({6, 2, 3, 3}, zero_group)};
  std::vector<GroupPartition> three{partition_filters(6, 3, 0)};
  auto rz = relevance(wz, three);
  CHECK(rz.group[0][0] == 0.0f);
  CHECK(rz.group[0][1] > 0.0f);
  std::vector<GroupPartition> whole{partition_filters(6, 1, 0)};
  auto single = relevance(w, whole);
  CHECK(single.layer[0] == single.group[0][0]);

  CHECK_THROWS_AS(block_norm(w, one), DimensionError);
}

TEST_CASE("total objective") {
  auto t = total_objective(Tensor::scalar(1), Tensor::scalar(2), Tensor::scalar(3), Tensor::scalar(4),
                           {0.5f, 0.1f, 0.01f, 0.0f});
  CHECK(t.item() == doctest::Approx(2.34).epsilon(1e-6));
  auto plain = total_objective(Tensor::scalar(1.5f), Tensor::scalar(2), Tensor::scalar(3),
                               Tensor::scalar(4), {0, 0, 0, 0});
  CHECK(plain.item() == 1.5f);
  auto partial = total_objective(Tensor::scalar(1), Tensor::scalar(2), Tensor(), Tensor(),
                                 {0.5f, 0.1f, 0.01f, 0.0f});
  CHECK(partial.item() == 2.0f);
}

TEST_CASE("finite-difference checks of the losses") {
  std::mt19937 gen(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GroupPartition> parts{partition_filters(5, 2, 1), partition_filters(4, 2, 0)};
    auto f0 = banded_field(gen, {1, 5, 2, 2}, 0.0f);
    auto f1 = banded_field(gen, {1, 4, 1, 1}, 0.075f);
    Rng rng(static_cast<std::uint64_t>(trial));
    auto pairs = sample_pairs(parts, 3, rng, true);
    for (auto mode : {GroupLossMode::RatioOfSums, GroupLossMode::PerPairMean}) {
      auto loss = [&] {
        std::vector<Tensor> fields{f0, f1};
        return group_activation_loss(fields, parts, pairs, 0.5f, mode);
      };
      CHECK(gradcheck(loss, {f0, f1}) < 1e-3);
    }

    auto field = random_tensor(gen, {1, 2, 3, 3}, 0.05f, 0.95f);
    CHECK(gradcheck([&] { return spatial_loss(field); }, {field}) < 1e-3);

    auto w0 = random_tensor(gen, {5, 2, 2, 2}, -0.1f, 0.1f);
    auto w1 = random_tensor(gen, {4, 5, 1, 1}, -0.1f, 0.1f);
    auto bn = [&] {
      std::vector<Tensor> ws{w0, w1};
      return block_norm(ws, parts);
    };
    CHECK(gradcheck(bn, {w0, w1}) < 1e-3);
  }
}

TEST_CASE("finite-difference check of the combined objective") {
  // The field is a leaf shared by the data term and both field losses.
  // Routed through a conv instead, R_c's weight gradient cancels across
  // pixels down to the float32 evaluation noise at h = 1e-3.
  std::mt19937 gen(43);
  const LossWeights lw{0.5f, 0.3f, 0.2f, 0.0f};
  std::vector<GroupPartition> parts{partition_filters(3, 1, 1)};
  std::vector<int> labels{1};
  for (int trial = 0; trial < 20; ++trial) {
    auto psi = banded_field(gen, {1, 3, 2, 2}, 0.0f);
    auto w = random_tensor(gen, {3, 1, 2, 2}, -0.3f, 0.3f);
    auto head = random_tensor(gen, {2, 3}, -1, 1);
    auto bias = random_tensor(gen, {2}, -1, 1);
    Rng rng(static_cast<std::uint64_t>(trial));
    auto pairs = sample_pairs(parts, 3, rng);
    for (auto mode : {GroupLossMode::RatioOfSums, GroupLossMode::PerPairMean}) {
      auto objective = [&] {
        std::vector<Tensor> fields{psi};
        std::vector<Tensor> ws{w};
        return total_objective(cross_entropy(linear(global_avg_pool(psi), head, bias), labels),
                               block_norm(ws, parts),
                               group_activation_loss(fields, parts, pairs, 0, mode),
                               spatial_loss(psi), lw);
      };
      CHECK(gradcheck(objective, {psi, w, head, bias}) < 1e-3);
    }
  }
}

TEST_CASE("objective gradient is the weighted sum of component gradients") {
  std::mt19937 gen(41);
  const LossWeights lw{0.5f, 0.3f, 0.2f, 0.0f};
  std::vector<GroupPartition> parts{partition_filters(4, 2, 0)};
  std::vector<int> labels{0, 1};
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor(gen, {2, 1, 3, 3}, -1, 1, false);
    auto w = random_tensor(gen, {4, 1, 3, 3}, -0.1f, 0.1f);
    auto head = random_tensor(gen, {2, 4}, -1, 1);
    auto bias = random_tensor(gen, {2}, -1, 1);
    Rng rng(static_cast<std::uint64_t>(trial));
    auto pairs = sample_pairs(parts, 3, rng);

    struct Parts {
      Tensor ld, ra, rb, rc;
    };
    auto build = [&] {
      auto a = conv2d(x, w, 1, 1);
      auto psi = sigmoid(a);
      std::vector<Tensor> fields{psi};
      std::vector<Tensor> ws{w};
      return Parts{cross_entropy(linear(global_avg_pool(a), head, bias), labels),
                   block_norm(ws, parts),
                   group_activation_loss(fields, parts, pairs, 0, GroupLossMode::RatioOfSums),
                   spatial_loss(psi)};
    };
    auto objective = [&] {
      auto p = build();
      return total_objective(p.ld, p.ra, p.rb, p.rc, lw);
    };
    w.zero_grad();
    backward(objective());
    const Buffer combined = w.grad();
    Buffer expect = Buffer::Zero(w.numel());
    const float weights[] = {1.0f, lw.block_norm, lw.group, lw.spatial};
    for (int c = 0; c < 4; ++c) {
      w.zero_grad();
      auto p = build();
      const Tensor* terms[] = {&p.ld, &p.ra, &p.rb, &p.rc};
      backward(*terms[c]);
      expect += weights[c] * w.grad();
    }
    CHECK(((combined - expect).abs() < 1e-5f).all());
  }
}
