#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cgl/cgl_losses.hpp"
#include "cgl/concept_model.hpp"
#include "cgl/dissect_eval.hpp"
#include "cgl/shapes_dataset.hpp"

namespace cgl {

/// A loss went NaN or infinite; the message names the component.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::filesystem::path train_data;
  std::filesystem::path eval_data;
  LabelMode label_mode = LabelMode::Binary;
  std::filesystem::path out_dir = "run";

  std::vector<int> conv_filters = {128, 256};
  std::vector<int> conv_groups = {8, 8};
  std::vector<int> free_filters = {0, 0};
  int kernel = 3;
  bool batch_norm = false;

  LossWeights weights;
  GroupLossMode rb_mode = GroupLossMode::RatioOfSums;
  int pair_multiplier = 3;
  double weight_decay = 0.0;           // 0.5 * wd * sum of squared weights
  double baseline_weight_decay = 5e-4; // used by the table1 baseline variant

  double lr = 0.01;
  double momentum = 0.9;
  int epochs = 30;
  int batch_size = 64;
  std::uint64_t seed = 1;

  DissectConfig dissect;

  /// Every key with its canonical text value, sorted by key.
  std::map<std::string, std::string> to_map() const;
  /// Applies one `key = value` setting; unknown keys and bad values throw
  /// ConfigError.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  Architecture architecture() const;

  /// FNV-1a over the sorted settings that determine the trained model
  /// (everything except out_dir and the dissect.* keys).
  std::uint64_t hash() const;
  /// `key = value` lines, one per setting.
  std::string effective_text() const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

/// Flat `key = value` text; blank lines and `#` comments are ignored.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

struct MetricsRecord {
  int epoch = 0;
  double data_loss = 0.0;
  double block_norm = 0.0;
  std::optional<double> group_loss;    // only when lambda_g > 0
  std::optional<double> spatial_loss;  // only when lambda_s > 0
  double weight_decay = 0.0;
  double total = 0.0;
  double train_accuracy = 0.0;
  double eval_accuracy = 0.0;
  RelevanceVector relevance;

  nlohmann::ordered_json to_json() const;
};

/// total == L_d + lambda_bn R_a + lambda_g R_b + lambda_s R_c + weight decay,
/// within `tol`.
bool metrics_identity_holds(const nlohmann::json& record, const RunConfig& config, double tol = 1e-5);
/// beta_l == float(sum of beta_gl in order) for every layer.
bool relevance_identity_holds(const nlohmann::json& record);

struct TrainResult {
  ConceptModel model;
  std::vector<MetricsRecord> metrics;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Trains in config.out_dir: effective.cfg, metrics.jsonl and checkpoint.bin
/// (rewritten each epoch).
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const ProgressFn& progress = {});
TrainResult train(const RunConfig& config, const ProgressFn& progress = {});

/// Fraction of correct argmax predictions.
double evaluate_accuracy(ConceptModel& model, const Dataset& data, int batch_size);

/// Dissects a model and stamps the run hash; warns when `expected_hash`
/// disagrees with the checkpoint's.
DissectReport dissect_run(ConceptModel& model, std::uint64_t checkpoint_hash, const Dataset& eval,
                          const DissectConfig& config, std::optional<std::uint64_t> expected_hash);

struct Table1Variant {
  std::string name;
  RunConfig config;
  std::vector<MetricsRecord> metrics;
  DissectReport report;
};

/// weight-decay baseline, block norm only, full objective.
std::vector<RunConfig> table1_variants(const RunConfig& base);
std::vector<std::string> table1_variant_names();

/// Trains and dissects the three variants under base.out_dir/<variant>/ and
/// writes table1.json and table1.md there.
std::vector<Table1Variant> run_table1(const RunConfig& base, const ProgressFn& progress = {});

nlohmann::ordered_json table1_json(const std::vector<Table1Variant>& variants);
/// Markdown table: rows variant x layer, columns color / shape /
/// color-shape / total.
std::string table1_markdown(const nlohmann::json& table);

/// "conv2:17" -> (1, 17).
std::pair<int, int> parse_unit(const std::string& text);

/// Writes, per top-K image of one unit, the full image with the active
/// region highlighted and the crop of its bounding box. Returns the manifest
/// records (also written to manifest.jsonl in `out_dir`).
std::vector<nlohmann::ordered_json> visualize_unit(ConceptModel& model, const Dataset& data, int layer,
                                                   int filter, const DissectConfig& config,
                                                   const std::filesystem::path& out_dir);

/// Command-line entry point; returns the process exit code.
int run_cli(int argc, char** argv);

}  // namespace cgl
