#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cgl/concept_model.hpp"
#include "cgl/rng.hpp"
#include "cgl/tensor.hpp"

namespace cgl {

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { Square = 0, Circle = 1, Triangle = 2 };
enum class Color { Red = 0, Green = 1, Blue = 2 };

inline constexpr int kNumConcepts = 15;
inline constexpr int kNumAtoms = 9;
inline constexpr int kNumPairLabels = 45;

/// [red, green, blue, square, circle, triangle, red-square, ..., blue-triangle]
const std::array<std::string, kNumConcepts>& concept_names();

constexpr int color_concept(Color c) { return static_cast<int>(c); }
constexpr int kind_concept(ShapeKind k) { return 3 + static_cast<int>(k); }
constexpr int atom_concept(Color c, ShapeKind k) {
  return 6 + 3 * static_cast<int>(c) + static_cast<int>(k);
}

enum class ConceptFamily { Color, Shape, ColorShape };
constexpr ConceptFamily concept_family(int concept_id) {
  return concept_id < 3 ? ConceptFamily::Color
                        : (concept_id < 6 ? ConceptFamily::Shape : ConceptFamily::ColorShape);
}

/// A figure, in continuous pixel coordinates (pixel (r, c) covers
/// [r, r+1) x [c, c+1)). `size` is the side of a square or triangle and the
/// diameter of a circle; the center is that of the bounding box.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::Square;
  Color color = Color::Red;
  double center_row = 0.0;
  double center_col = 0.0;
  int size = 0;

  struct Box {
    double top, left, bottom, right;
  };
  Box bounds() const;
  /// Exact geometric membership of a point.
  bool contains(double row, double col) const;
};

double box_iou(const ShapeSpec::Box& a, const ShapeSpec::Box& b);

enum class LabelMode { Binary, Multiclass45 };
std::string to_string(LabelMode mode);
LabelMode parse_label_mode(const std::string& text);
int num_classes(LabelMode mode);

/// 1 when either figure is a square.
int label_binary(const ShapeSpec& a, const ShapeSpec& b);
/// Index of the unordered pair of (kind, color) atoms, in [0, 45).
int label_multiclass(const ShapeSpec& a, const ShapeSpec& b);

struct DatasetConfig {
  int height = 64;
  int width = 64;
  int min_size = 12;
  int max_size = 24;
  double max_overlap_iou = 0.1;
  LabelMode label_mode = LabelMode::Binary;

  void validate() const;
};

struct ConceptSample {
  Buffer image;                       // 3 x H x W
  std::vector<std::uint8_t> masks;    // 15 x H x W, 0/1
  int label = 0;
  std::array<ShapeSpec, 2> specs;
};

ConceptSample generate_sample(Rng& rng, const DatasetConfig& config);

inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  int count = 0;
  std::uint64_t seed = 0;
  DatasetConfig config;
};

struct Dataset {
  DatasetHeader header;
  Buffer images;                      // N x 3 x H x W
  std::vector<std::uint8_t> masks;    // N x 15 x H x W
  std::vector<std::uint32_t> labels;  // N

  int size() const { return header.count; }
  int height() const { return header.config.height; }
  int width() const { return header.config.width; }
  Eigen::Index image_numel() const { return 3 * static_cast<Eigen::Index>(height()) * width(); }
  Eigen::Index plane() const { return static_cast<Eigen::Index>(height()) * width(); }

  /// Images at `indices`, stacked as a B x 3 x H x W tensor.
  Tensor batch(std::span<const int> indices) const;
  std::vector<int> batch_labels(std::span<const int> indices) const;
  /// H x W mask of `concept_id` for sample `index`.
  const std::uint8_t* mask(int index, int concept_id) const;
};

/// Sample i is drawn from Rng::derive(seed, i), so the dataset does not depend
/// on generation order.
Dataset generate_dataset(int count, std::uint64_t seed, const DatasetConfig& config);

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace cgl
