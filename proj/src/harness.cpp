#include "cgl/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cgl {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config text

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
std::string fmt(T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto t = trim(text);
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("bad value '" + text + "' for " + key);
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) throw ConfigError("bad value '" + text + "' for " + key);
  }
  return v;
}

std::vector<int> parse_ints(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<int>(key, item));
  if (out.empty()) throw ConfigError("empty list for " + key);
  return out;
}

std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value '" + text + "' for " + key + " (expected true or false)");
}

}  // namespace

std::map<std::string, std::string> RunConfig::to_map() const {
  return {
      {"train_data", train_data.string()},
      {"eval_data", eval_data.string()},
      {"label_mode", to_string(label_mode)},
      {"out_dir", out_dir.string()},
      {"conv_filters", join(conv_filters)},
      {"conv_groups", join(conv_groups)},
      {"free_filters", join(free_filters)},
      {"kernel", std::to_string(kernel)},
      {"batch_norm", batch_norm ? "true" : "false"},
      {"lambda_bn", fmt(weights.block_norm)},
      {"lambda_g", fmt(weights.group)},
      {"lambda_s", fmt(weights.spatial)},
      {"lambda2", fmt(weights.cross_layer)},
      {"rb_mode", to_string(rb_mode)},
      {"pair_multiplier", std::to_string(pair_multiplier)},
      {"weight_decay", fmt(weight_decay)},
      {"baseline_weight_decay", fmt(baseline_weight_decay)},
      {"lr", fmt(lr)},
      {"momentum", fmt(momentum)},
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"seed", std::to_string(seed)},
      {"dissect.quantile", fmt(dissect.quantile)},
      {"dissect.iou_threshold", fmt(dissect.iou_threshold)},
      {"dissect.w_det", fmt(dissect.w_det)},
      {"dissect.w_iou", fmt(dissect.w_iou)},
      {"dissect.align_threshold", fmt(dissect.align_threshold)},
      {"dissect.count_mode", to_string(dissect.count_mode)},
      {"dissect.top_k", std::to_string(dissect.top_k)},
      {"dissect.batch_size", std::to_string(dissect.batch_size)},
      {"dissect.memory_budget_mb", fmt(dissect.memory_budget_mb)},
  };
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "train_data") train_data = v;
  else if (key == "eval_data") eval_data = v;
  else if (key == "label_mode") label_mode = parse_label_mode(v);
  else if (key == "out_dir") out_dir = v;
  else if (key == "conv_filters") conv_filters = parse_ints(key, v);
  else if (key == "conv_groups") conv_groups = parse_ints(key, v);
  else if (key == "free_filters") free_filters = parse_ints(key, v);
  else if (key == "kernel") kernel = parse_number<int>(key, v);
  else if (key == "batch_norm") batch_norm = parse_bool(key, v);
  else if (key == "lambda_bn") weights.block_norm = parse_number<float>(key, v);
  else if (key == "lambda_g") weights.group = parse_number<float>(key, v);
  else if (key == "lambda_s") weights.spatial = parse_number<float>(key, v);
  else if (key == "lambda2") weights.cross_layer = parse_number<float>(key, v);
  else if (key == "rb_mode") rb_mode = parse_group_loss_mode(v);
  else if (key == "pair_multiplier") pair_multiplier = parse_number<int>(key, v);
  else if (key == "weight_decay") weight_decay = parse_number<double>(key, v);
  else if (key == "baseline_weight_decay") baseline_weight_decay = parse_number<double>(key, v);
  else if (key == "lr") lr = parse_number<double>(key, v);
  else if (key == "momentum") momentum = parse_number<double>(key, v);
  else if (key == "epochs") epochs = parse_number<int>(key, v);
  else if (key == "batch_size") batch_size = parse_number<int>(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "dissect.quantile") dissect.quantile = parse_number<double>(key, v);
  else if (key == "dissect.iou_threshold") dissect.iou_threshold = parse_number<double>(key, v);
  else if (key == "dissect.w_det") dissect.w_det = parse_number<double>(key, v);
  else if (key == "dissect.w_iou") dissect.w_iou = parse_number<double>(key, v);
  else if (key == "dissect.align_threshold") dissect.align_threshold = parse_number<double>(key, v);
  else if (key == "dissect.count_mode") dissect.count_mode = parse_alignment_count(v);
  else if (key == "dissect.top_k") dissect.top_k = parse_number<int>(key, v);
  else if (key == "dissect.batch_size") dissect.batch_size = parse_number<int>(key, v);
  else if (key == "dissect.memory_budget_mb") dissect.memory_budget_mb = parse_number<double>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  if (conv_filters.size() != conv_groups.size() || conv_filters.size() != free_filters.size()) {
    throw ConfigError("conv_filters, conv_groups and free_filters need one entry per layer");
  }
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd and positive");
  for (float l : {weights.block_norm, weights.group, weights.spatial, weights.cross_layer}) {
    if (l < 0) throw ConfigError("loss weights must be non-negative");
  }
  if (pair_multiplier < 1) throw ConfigError("pair_multiplier must be >= 1");
  if (weight_decay < 0 || baseline_weight_decay < 0) throw ConfigError("weight decay must be >= 0");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  dissect.validate();
  for (std::size_t l = 0; l < conv_filters.size(); ++l) {
    partition_filters(conv_filters[l], conv_groups[l], free_filters[l]);  // throws on bad splits
  }
}

Architecture RunConfig::architecture() const {
  Architecture a;
  for (std::size_t l = 0; l < conv_filters.size(); ++l) {
    a.conv.push_back({conv_filters[l], kernel, conv_groups[l], free_filters[l]});
  }
  a.num_classes = num_classes(label_mode);
  a.batch_norm = batch_norm;
  return a;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t RunConfig::hash() const {
  std::string canonical;
  for (const auto& [k, v] : to_map()) {
    if (k == "out_dir" || k.starts_with("dissect.")) continue;
    canonical += k + "=" + v + "\n";
  }
  return fnv1a64(canonical);
}

std::string RunConfig::effective_text() const {
  std::string s;
  for (const auto& [k, v] : to_map()) s += k + " = " + v + "\n";
  return s;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    try {
      base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metrics

ojson MetricsRecord::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); };
  return {{"epoch", epoch},
          {"L_d", data_loss},
          {"R_a", block_norm},
          {"R_b", opt(group_loss)},
          {"R_c", opt(spatial_loss)},
          {"weight_decay", weight_decay},
          {"total", total},
          {"train_accuracy", train_accuracy},
          {"eval_accuracy", eval_accuracy},
          {"beta_layer", relevance.layer},
          {"beta_group", relevance.group}};
}

bool metrics_identity_holds(const nlohmann::json& r, const RunConfig& config, double tol) {
  auto value = [&r](const char* k) { return r.at(k).is_null() ? 0.0 : r.at(k).get<double>(); };
  const double rebuilt = value("L_d") + config.weights.block_norm * value("R_a") +
                         config.weights.group * value("R_b") + config.weights.spatial * value("R_c") +
                         value("weight_decay");
  return std::abs(rebuilt - value("total")) <= tol;
}

bool relevance_identity_holds(const nlohmann::json& r) {
  const auto& groups = r.at("beta_group");
  const auto& layers = r.at("beta_layer");
  if (groups.size() != layers.size()) return false;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    double acc = 0.0;
    for (const auto& b : groups[l]) acc += static_cast<double>(b.get<float>());
    if (static_cast<float>(acc) != layers[l].get<float>()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Training

namespace {

void check_finite(const Tensor& t, const char* name, int epoch, int step) {
  if (t.defined() && !std::isfinite(t.item())) {
    throw TrainingError(std::string("non-finite ") + name + " at epoch " + std::to_string(epoch) +
                        ", step " + std::to_string(step));
  }
}

int count_correct(const Tensor& logits, std::span<const int> labels) {
  const int n = logits.dim(0), c = logits.dim(1);
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data().data() + static_cast<Eigen::Index>(i) * c;
    correct += static_cast<int>(std::max_element(row, row + c) - row) == labels[static_cast<std::size_t>(i)];
  }
  return correct;
}

void check_datasets(const RunConfig& config, const Dataset& train_set, const Dataset& eval_set) {
  for (const Dataset* d : {&train_set, &eval_set}) {
    if (d->header.config.label_mode != config.label_mode) {
      throw ConfigError("dataset labels are " + to_string(d->header.config.label_mode) +
                        " but the run expects " + to_string(config.label_mode));
    }
    if (d->size() == 0) throw ConfigError("empty dataset");
  }
  if (train_set.height() != eval_set.height() || train_set.width() != eval_set.width()) {
    throw ConfigError("train and eval images differ in size");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out << text;
  }
  fs::rename(tmp, path);
}

// Tags for the independent random streams of a run.
constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kPairStream = 0x5041;

}  // namespace

double evaluate_accuracy(ConceptModel& model, const Dataset& data, int batch_size) {
  NoGradGuard guard;
  int correct = 0;
  for (int start = 0; start < data.size(); start += batch_size) {
    std::vector<int> idx(static_cast<std::size_t>(std::min(batch_size, data.size() - start)));
    std::iota(idx.begin(), idx.end(), start);
    const auto out = model.forward(data.batch(idx), Mode::Eval, false);
    correct += count_correct(out.logits, data.batch_labels(idx));
  }
  return static_cast<double>(correct) / data.size();
}

TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& eval_set,
                  const ProgressFn& progress) {
  config.validate();
  check_datasets(config, train_set, eval_set);
  fs::create_directories(config.out_dir);
  write_text(config.out_dir / "effective.cfg", config.effective_text());
  const fs::path metrics_path = config.out_dir / "metrics.jsonl";
  std::ofstream metrics_out(metrics_path, std::ios::trunc);
  if (!metrics_out) throw std::runtime_error("cannot open " + metrics_path.string());

  TrainResult result{ConceptModel(config.architecture(), config.seed), {}};
  ConceptModel& model = result.model;
  const auto partitions = model.partitions();
  const std::uint64_t hash = config.hash();
  const auto& w = config.weights;
  const bool need_fields = w.group > 0 || w.spatial > 0;
  Sgd opt(model.parameters(), static_cast<Scalar>(config.lr), static_cast<Scalar>(config.momentum));
  Rng pair_rng = Rng::derive(config.seed, kPairStream);

  std::vector<Tensor> decayed = model.conv_weights();
  decayed.push_back(model.head_weight());

  std::vector<int> order(static_cast<std::size_t>(train_set.size()));
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng::derive(config.seed ^ kShuffleStream, static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle.uniform_int(static_cast<std::uint64_t>(i))]);
    }

    double sum_ld = 0, sum_ra = 0, sum_rb = 0, sum_rc = 0, sum_wd = 0, sum_total = 0;
    int steps = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::span<const int> idx(order.data() + start, stop - start);
      const auto labels = train_set.batch_labels(idx);
      auto out = model.forward(train_set.batch(idx), Mode::Train, need_fields);

      const Tensor ld = cross_entropy(out.logits, labels);
      const auto conv_w = model.conv_weights();
      Tensor ra;
      {
        std::optional<NoGradGuard> guard;
        if (w.block_norm == 0) guard.emplace();  // logged only
        ra = block_norm(conv_w, partitions);
      }
      Tensor rb, rc, wd;
      if (need_fields) {
        std::vector<Tensor> fields;
        for (const auto& l : out.layers) fields.push_back(l.field);
        if (w.group > 0) {
          const auto pairs = sample_pairs(partitions, config.pair_multiplier, pair_rng, w.cross_layer > 0);
          rb = group_activation_loss(fields, partitions, pairs, w.cross_layer, config.rb_mode);
        }
        if (w.spatial > 0) {
          std::vector<Tensor> per_layer;
          for (const auto& f : fields) per_layer.push_back(spatial_loss(f));
          rc = add_n(per_layer);
        }
      }
      if (config.weight_decay > 0) {
        std::vector<Tensor> sq;
        for (const auto& p : decayed) sq.push_back(squared_norm(p));
        wd = scale(add_n(sq), static_cast<Scalar>(0.5 * config.weight_decay));
      }
      Tensor total = total_objective(ld, w.block_norm > 0 ? ra : Tensor{}, rb, rc, w);
      if (wd.defined()) total = add(total, wd);

      check_finite(ld, "L_d", epoch, steps);
      check_finite(ra, "R_a", epoch, steps);
      check_finite(rb, "R_b", epoch, steps);
      check_finite(rc, "R_c", epoch, steps);
      check_finite(wd, "weight decay", epoch, steps);
      check_finite(total, "total loss", epoch, steps);

      opt.zero_grad();
      backward(total);
      opt.step();

      sum_ld += ld.item();
      sum_ra += ra.item();
      if (rb.defined()) sum_rb += rb.item();
      if (rc.defined()) sum_rc += rc.item();
      if (wd.defined()) sum_wd += wd.item();
      sum_total += total.item();
      correct += count_correct(out.logits, labels);
      ++steps;
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.data_loss = sum_ld / steps;
    rec.block_norm = sum_ra / steps;
    if (w.group > 0) rec.group_loss = sum_rb / steps;
    if (w.spatial > 0) rec.spatial_loss = sum_rc / steps;
    rec.weight_decay = sum_wd / steps;
    rec.total = sum_total / steps;
    rec.train_accuracy = static_cast<double>(correct) / train_set.size();
    rec.eval_accuracy = evaluate_accuracy(model, eval_set, config.batch_size);
    rec.relevance = relevance(model.conv_weights(), partitions);
    metrics_out << rec.to_json().dump() << '\n' << std::flush;
    save_checkpoint(model, hash, config.out_dir / "checkpoint.bin");
    if (progress) {
      std::ostringstream msg;
      msg << "epoch " << epoch << "/" << config.epochs << "  loss " << rec.total << "  train "
          << rec.train_accuracy << "  eval " << rec.eval_accuracy;
      progress(msg.str());
    }
    result.metrics.push_back(std::move(rec));
  }
  return result;
}

TrainResult train(const RunConfig& config, const ProgressFn& progress) {
  const Dataset train_set = read_dataset(config.train_data);
  const Dataset eval_set = read_dataset(config.eval_data);
  return train(config, train_set, eval_set, progress);
}

DissectReport dissect_run(ConceptModel& model, std::uint64_t checkpoint_hash, const Dataset& eval,
                          const DissectConfig& config, std::optional<std::uint64_t> expected_hash) {
  DissectReport report = dissect(model, eval, config);
  report.config_hash = checkpoint_hash;
  if (expected_hash && *expected_hash != checkpoint_hash) {
    report.warnings.push_back("config hash mismatch: checkpoint " + hash_hex(checkpoint_hash) +
                              ", config " + hash_hex(*expected_hash));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Table 1

std::vector<std::string> table1_variant_names() { return {"weight-decay", "block-norm", "cgl"}; }

std::vector<RunConfig> table1_variants(const RunConfig& base) {
  const auto names = table1_variant_names();
  RunConfig wd = base, ra = base, full = base;
  wd.weights.block_norm = wd.weights.group = wd.weights.spatial = wd.weights.cross_layer = 0;
  wd.weight_decay = base.baseline_weight_decay;
  ra.weights.group = ra.weights.spatial = ra.weights.cross_layer = 0;
  ra.weight_decay = 0;
  full.weight_decay = 0;
  std::vector<RunConfig> out = {wd, ra, full};
  for (std::size_t i = 0; i < out.size(); ++i) out[i].out_dir = base.out_dir / names[i];
  return out;
}

std::vector<Table1Variant> run_table1(const RunConfig& base, const ProgressFn& progress) {
  base.validate();
  if (base.label_mode != LabelMode::Binary) throw ConfigError("table1 runs on binary labels");
  const Dataset train_set = read_dataset(base.train_data);
  const Dataset eval_set = read_dataset(base.eval_data);
  const auto configs = table1_variants(base);
  const auto names = table1_variant_names();
  std::vector<Table1Variant> out;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (progress) progress("== " + names[i]);
    auto trained = train(configs[i], train_set, eval_set, progress);
    auto report = dissect_run(trained.model, configs[i].hash(), eval_set, configs[i].dissect, std::nullopt);
    write_text(configs[i].out_dir / "report.json", to_json(report).dump(2) + "\n");
    write_manifest(report, configs[i].out_dir / "manifest.jsonl");
    out.push_back({names[i], configs[i], std::move(trained.metrics), std::move(report)});
  }
  const auto table = table1_json(out);
  write_text(base.out_dir / "table1.json", table.dump(2) + "\n");
  write_text(base.out_dir / "table1.md", table1_markdown(table));
  return out;
}

ojson table1_json(const std::vector<Table1Variant>& variants) {
  ojson j;
  j["variants"] = ojson::array();
  for (const auto& v : variants) {
    ojson layers = ojson::array();
    for (const auto& l : v.report.layers) {
      layers.push_back({{"layer", "conv" + std::to_string(l.layer + 1)},
                        {"color", l.counts.color},
                        {"shape", l.counts.shape},
                        {"color_shape", l.counts.color_shape},
                        {"total", l.counts.total}});
    }
    j["variants"].push_back(
        {{"name", v.name},
         {"config_hash", hash_hex(v.config.hash())},
         {"eval_accuracy", v.metrics.empty() ? ojson(nullptr) : ojson(v.metrics.back().eval_accuracy)},
         {"rud", v.report.rud ? ojson(*v.report.rud) : ojson(nullptr)},
         {"layers", layers}});
  }
  return j;
}

std::string table1_markdown(const nlohmann::json& table) {
  std::ostringstream md;
  md << "| regularizer | layer | color | shape | color-shape | total |\n";
  md << "|---|---|---|---|---|---|\n";
  for (const auto& v : table.at("variants"))
    for (const auto& l : v.at("layers")) {
      md << "| " << v.at("name").get<std::string>() << " | " << l.at("layer").get<std::string>() << " | "
         << l.at("color") << " | " << l.at("shape") << " | " << l.at("color_shape") << " | "
         << l.at("total") << " |\n";
    }
  md << "\n| regularizer | eval accuracy | RUD |\n|---|---|---|\n";
  for (const auto& v : table.at("variants")) {
    md << "| " << v.at("name").get<std::string>() << " | " << v.at("eval_accuracy").dump() << " | "
       << v.at("rud").dump() << " |\n";
  }
  return md.str();
}

// ---------------------------------------------------------------------------
// Visualization

std::pair<int, int> parse_unit(const std::string& text) {
  const auto colon = text.find(':');
  if (!text.starts_with("conv") || colon == std::string::npos) {
    throw ConfigError("unit must look like conv2:17, got '" + text + "'");
  }
  const int layer = parse_number<int>("unit layer", text.substr(4, colon - 4));
  const int filter = parse_number<int>("unit filter", text.substr(colon + 1));
  if (layer < 1 || filter < 0) throw ConfigError("unit must look like conv2:17, got '" + text + "'");
  return {layer - 1, filter};
}

std::vector<ojson> visualize_unit(ConceptModel& model, const Dataset& data, int layer, int filter,
                                  const DissectConfig& config, const fs::path& out_dir) {
  config.validate();
  int h = 0, w = 0;
  const auto acts = unit_activations(model, data, layer, filter, config.batch_size, &h, &w);
  const double t = activation_threshold(acts, config.quantile);
  const auto top = top_k_regions(acts, data.size(), h, w, t, config.top_k, data.height(), data.width());
  fs::create_directories(out_dir);

  const int H = data.height(), W = data.width();
  const auto plane = static_cast<std::size_t>(H) * W;
  const std::string stem = "conv" + std::to_string(layer + 1) + "_" + std::to_string(filter);
  std::vector<ojson> records;
  for (std::size_t rank = 0; rank < top.size(); ++rank) {
    const auto& r = top[rank];
    const auto active = active_mask(acts.data() + static_cast<std::size_t>(h) * w * static_cast<std::size_t>(r.image),
                                    h, w, t, H, W);
    const float* img = data.images.data() + data.image_numel() * r.image;
    std::vector<std::uint8_t> rgb(plane * 3);
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) {
        const float v = img[static_cast<std::size_t>(c) * plane + p] * (active[p] ? 1.0f : 0.3f);
        rgb[p * 3 + static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      }
    const std::string base = stem + "_rank" + std::to_string(rank) + "_img" + std::to_string(r.image);
    write_png(out_dir / (base + ".png"), W, H, rgb);
    ojson rec{{"layer", layer},         {"filter", filter}, {"rank", static_cast<int>(rank)},
              {"image", r.image},       {"activation", r.activation},
              {"threshold", t},         {"box", r.box ? ojson(*r.box) : ojson(nullptr)},
              {"image_png", base + ".png"}, {"crop_png", nullptr}};
    if (r.box) {
      // crop of the full-brightness image, scaled up 4x
      const auto [top_y, left, bottom, right] = *r.box;
      constexpr int kZoom = 4;
      const int cw = (right - left) * kZoom, ch = (bottom - top_y) * kZoom;
      std::vector<std::uint8_t> crop(static_cast<std::size_t>(cw) * ch * 3);
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
          const std::size_t p = static_cast<std::size_t>(top_y + y / kZoom) * W + left + x / kZoom;
          for (int c = 0; c < 3; ++c) {
            crop[(static_cast<std::size_t>(y) * cw + x) * 3 + c] = static_cast<std::uint8_t>(
                std::lround(std::clamp(img[static_cast<std::size_t>(c) * plane + p], 0.0f, 1.0f) * 255.0f));
          }
        }
      write_png(out_dir / (base + "_crop.png"), cw, ch, crop);
      rec["crop_png"] = base + "_crop.png";
    }
    records.push_back(rec);
  }
  std::string lines;
  for (const auto& r : records) lines += r.dump() + "\n";
  write_text(out_dir / "manifest.jsonl", lines);
  return records;
}

}  // namespace cgl
