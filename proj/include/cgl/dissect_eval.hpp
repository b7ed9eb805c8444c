#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cgl/cgl_losses.hpp"
#include "cgl/concept_model.hpp"
#include "cgl/shapes_dataset.hpp"

namespace cgl {

enum class AlignmentCount { Fraction, Absolute };
std::string to_string(AlignmentCount mode);
AlignmentCount parse_alignment_count(const std::string& text);

struct DissectConfig {
  double quantile = 0.005;        // top fraction of activations counted as "on"
  double iou_threshold = 0.04;    // detector cutoff
  double w_det = 0.5;
  double w_iou = 0.5;
  double align_threshold = 0.25;
  AlignmentCount count_mode = AlignmentCount::Fraction;
  int top_k = 8;
  int batch_size = 64;
  double memory_budget_mb = 1024.0;  // stored activations per sweep

  void validate() const;
};

/// The (1 - q) quantile of `values` with linear interpolation between order
/// statistics.
double activation_threshold(std::span<const float> values, double q);

enum class Upsample { Nearest, BilinearThreshold };
std::string to_string(Upsample method);
Upsample upsample_method(int h, int w, int height, int width);

/// Binarize an h x w map by value > threshold and bring it to height x width.
/// Nearest-neighbour replication for integer factors, otherwise bilinear
/// interpolation of the binary map followed by a 0.5 cut.
std::vector<std::uint8_t> active_mask(const float* map, int h, int w, double threshold, int height,
                                      int width);

/// Dataset-wide intersection and union counts of one unit against every
/// concept.
struct IouCounts {
  std::array<std::uint64_t, kNumConcepts> intersection{};
  std::array<std::uint64_t, kNumConcepts> mask_pixels{};
  std::uint64_t active_pixels = 0;

  /// Adds one image: `active` and the concept masks are height x width.
  void add(std::span<const std::uint8_t> active, const Dataset& data, int image);
  double iou(int concept_id) const;
};

struct FilterProfile {
  int layer = 0;
  int filter = 0;
  double threshold = 0.0;
  int best_concept = 0;
  double best_iou = 0.0;
  std::array<double, kNumConcepts> iou{};
};

FilterProfile make_profile(int layer, int filter, double threshold, const IouCounts& counts);

struct FamilyCounts {
  int color = 0;
  int shape = 0;
  int color_shape = 0;
  int total = 0;
  bool operator==(const FamilyCounts&) const = default;
};

/// A filter detects its best concept when best IoU > iou_threshold; the
/// layer counts distinct detected concepts.
FamilyCounts assign_detectors(std::span<const FilterProfile> profiles, double iou_threshold);
std::vector<int> detected_concepts(std::span<const FilterProfile> profiles, double iou_threshold);

struct GroupAlignment {
  int layer = 0;
  int group = 0;
  FilterRange filters;
  std::optional<int> concept_id;  // modal detected concept, when aligned
  int modal_concept = -1;         // -1 without detectors
  double detector_fraction = 0.0;
  double mean_iou = 0.0;
  double score = 0.0;
  Scalar relevance = 0.0f;
};

/// Scores the group's modal detected concept (ties: lowest id) by
/// w_det * count term + w_iou * mean IoU of the filters detecting it.
GroupAlignment group_alignment(std::span<const FilterProfile> group, const DissectConfig& config);

/// Unique detectors of the last two layers over their filter count.
double rud(std::span<const FamilyCounts> counts, std::span<const int> filters_per_layer);

struct TopRegion {
  int image = 0;
  float activation = 0.0f;              // per-image max of the unit
  std::optional<std::array<int, 4>> box;  // top, left, bottom, right (exclusive)
};

/// The K images with the largest per-image max (ties: ascending image id),
/// each with the bounding box of its upsampled super-threshold region.
/// `acts` holds N consecutive h x w maps.
std::vector<TopRegion> top_k_regions(std::span<const float> acts, int n, int h, int w,
                                     double threshold, int k, int height, int width);

struct LayerReport {
  int layer = 0;
  int filters = 0;
  int height = 0;
  int width = 0;
  Upsample upsampling = Upsample::Nearest;
  std::vector<FilterProfile> profiles;
  FamilyCounts counts;
  std::vector<GroupAlignment> groups;
  std::vector<std::vector<TopRegion>> top;  // per filter
};

inline constexpr int kReportSchemaVersion = 1;

struct DissectReport {
  DissectConfig config;
  int eval_count = 0;
  std::vector<LayerReport> layers;
  RelevanceVector relevance;
  std::optional<double> rud;
  std::optional<std::uint64_t> config_hash;  // of the run that produced the model
  std::vector<std::string> warnings;
};

DissectReport dissect(ConceptModel& model, const Dataset& eval, const DissectConfig& config);

/// Responses of one unit over the whole dataset: N consecutive h x w maps.
std::vector<float> unit_activations(ConceptModel& model, const Dataset& data, int layer, int filter,
                                    int batch_size, int* h, int* w);

/// 16 lowercase hex digits.
std::string hash_hex(std::uint64_t h);

nlohmann::ordered_json to_json(const DissectReport& report);
/// One JSON line per (layer, filter, rank).
void write_manifest(const DissectReport& report, const std::filesystem::path& path);

/// 8-bit RGB PNG, rows top to bottom.
void write_png(const std::filesystem::path& path, int width, int height,
               std::span<const std::uint8_t> rgb);

}  // namespace cgl
