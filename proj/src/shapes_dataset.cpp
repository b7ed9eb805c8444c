#include "cgl/shapes_dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace cgl {

namespace fs = std::filesystem;
using nlohmann::json;

const std::array<std::string, kNumConcepts>& concept_names() {
  static const std::array<std::string, kNumConcepts> names{
      "red",          "green",        "blue",           "square",      "circle",
      "triangle",     "red-square",   "red-circle",     "red-triangle", "green-square",
      "green-circle", "green-triangle", "blue-square",  "blue-circle", "blue-triangle"};
  return names;
}

// ---------------------------------------------------------------------------
// Geometry

namespace {

constexpr double kSqrt3 = 1.7320508075688772;

double half_height(const ShapeSpec& s) {
  return s.kind == ShapeKind::Triangle ? 0.25 * kSqrt3 * s.size : 0.5 * s.size;
}

}  // namespace

ShapeSpec::Box ShapeSpec::bounds() const {
  const double hw = 0.5 * size, hh = half_height(*this);
  return {center_row - hh, center_col - hw, center_row + hh, center_col + hw};
}

bool ShapeSpec::contains(double row, double col) const {
  const double r = 0.5 * size;
  const double dy = row - center_row, dx = col - center_col;
  switch (kind) {
    case ShapeKind::Square:
      return std::abs(dy) <= r && std::abs(dx) <= r;
    case ShapeKind::Circle:
      return dy * dy + dx * dx <= r * r;
    case ShapeKind::Triangle: {
      // apex up: the half-width grows linearly from 0 at the apex to size/2
      const double hh = half_height(*this);
      const double depth = dy + hh;
      if (depth < 0.0 || dy > hh) return false;
      return std::abs(dx) <= r * depth / (2.0 * hh);
    }
  }
  return false;
}

double box_iou(const ShapeSpec::Box& a, const ShapeSpec::Box& b) {
  const double ih = std::max(0.0, std::min(a.bottom, b.bottom) - std::max(a.top, b.top));
  const double iw = std::max(0.0, std::min(a.right, b.right) - std::max(a.left, b.left));
  const double inter = ih * iw;
  const double area_a = (a.bottom - a.top) * (a.right - a.left);
  const double area_b = (b.bottom - b.top) * (b.right - b.left);
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Labels

std::string to_string(LabelMode mode) {
  return mode == LabelMode::Binary ? "binary" : "multiclass45";
}

LabelMode parse_label_mode(const std::string& text) {
  if (text == "binary") return LabelMode::Binary;
  if (text == "multiclass45") return LabelMode::Multiclass45;
  throw ConfigError("unknown label mode '" + text + "' (expected binary or multiclass45)");
}

int num_classes(LabelMode mode) { return mode == LabelMode::Binary ? 2 : kNumPairLabels; }

int label_binary(const ShapeSpec& a, const ShapeSpec& b) {
  return a.kind == ShapeKind::Square || b.kind == ShapeKind::Square ? 1 : 0;
}

int label_multiclass(const ShapeSpec& a, const ShapeSpec& b) {
  int i = static_cast<int>(a.kind) * 3 + static_cast<int>(a.color);
  int j = static_cast<int>(b.kind) * 3 + static_cast<int>(b.color);
  if (i > j) std::swap(i, j);
  // rows of the upper triangle (diagonal included) of the 9 x 9 atom table
  return i * (2 * kNumAtoms - i + 1) / 2 + (j - i);
}

// ---------------------------------------------------------------------------
// Sampling

void DatasetConfig::validate() const {
  if (height < 32 || width < 32) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " is below the 32x32 minimum");
  }
  if (min_size < 2 || min_size > max_size) {
    throw ConfigError("shape size range [" + std::to_string(min_size) + ", " +
                      std::to_string(max_size) + "] is empty or degenerate");
  }
  if (max_size > std::min(height, width)) {
    throw ConfigError("shape size " + std::to_string(max_size) + " does not fit a " +
                      std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  if (!(max_overlap_iou >= 0.0 && max_overlap_iou <= 1.0)) {
    throw ConfigError("max_overlap_iou must lie in [0, 1]");
  }
}

namespace {

void place(ShapeSpec& s, Rng& rng, const DatasetConfig& config) {
  const double hw = 0.5 * s.size, hh = half_height(s);
  s.center_row = rng.uniform(hh, config.height - hh);
  s.center_col = rng.uniform(hw, config.width - hw);
}

constexpr std::array<std::array<float, 3>, 3> kRgb{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};

}  // namespace

ConceptSample generate_sample(Rng& rng, const DatasetConfig& config) {
  config.validate();
  ConceptSample sample;
  for (auto& s : sample.specs) {
    s.kind = static_cast<ShapeKind>(rng.uniform_int(3));
    s.color = static_cast<Color>(rng.uniform_int(3));
    s.size = rng.uniform_int(config.min_size, config.max_size);
  }

  constexpr int kInnerAttempts = 100, kOuterRetries = 10;
  bool placed = false;
  for (int outer = 0; outer < kOuterRetries && !placed; ++outer) {
    place(sample.specs[0], rng, config);
    const auto first = sample.specs[0].bounds();
    for (int inner = 0; inner < kInnerAttempts; ++inner) {
      place(sample.specs[1], rng, config);
      if (box_iou(first, sample.specs[1].bounds()) <= config.max_overlap_iou) {
        placed = true;
        break;
      }
    }
  }
  if (!placed) {
    throw GenerationError("could not place two shapes of sizes " +
                          std::to_string(sample.specs[0].size) + " and " +
                          std::to_string(sample.specs[1].size) + " with box IoU <= " +
                          std::to_string(config.max_overlap_iou) + " after " +
                          std::to_string(kOuterRetries) + " retries");
  }

  const int h = config.height, w = config.width;
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  sample.image = Buffer::Zero(3 * plane);
  sample.masks.assign(static_cast<std::size_t>(kNumConcepts * plane), 0);
  for (const auto& s : sample.specs) {
    const auto box = s.bounds();
    const int r0 = std::max(0, static_cast<int>(std::floor(box.top)));
    const int r1 = std::min(h - 1, static_cast<int>(std::ceil(box.bottom)));
    const int c0 = std::max(0, static_cast<int>(std::floor(box.left)));
    const int c1 = std::min(w - 1, static_cast<int>(std::ceil(box.right)));
    const int concepts[] = {color_concept(s.color), kind_concept(s.kind),
                            atom_concept(s.color, s.kind)};
    const auto& rgb = kRgb[static_cast<std::size_t>(s.color)];
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        if (!s.contains(r + 0.5, c + 0.5)) continue;
        const Eigen::Index px = static_cast<Eigen::Index>(r) * w + c;
        for (int ch = 0; ch < 3; ++ch) sample.image(ch * plane + px) = rgb[static_cast<std::size_t>(ch)];
        for (int k : concepts) sample.masks[static_cast<std::size_t>(k * plane + px)] = 1;
      }
    }
  }
  sample.label = config.label_mode == LabelMode::Binary
                     ? label_binary(sample.specs[0], sample.specs[1])
                     : label_multiclass(sample.specs[0], sample.specs[1]);
  return sample;
}

Dataset generate_dataset(int count, std::uint64_t seed, const DatasetConfig& config) {
  if (count < 1) throw ConfigError("dataset size must be positive, got " + std::to_string(count));
  config.validate();
  Dataset ds;
  ds.header.count = count;
  ds.header.seed = seed;
  ds.header.config = config;
  const Eigen::Index img = ds.image_numel();
  const auto msk = static_cast<std::size_t>(kNumConcepts * ds.plane());
  ds.images.resize(img * count);
  ds.masks.resize(msk * static_cast<std::size_t>(count));
  ds.labels.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    auto s = generate_sample(rng, config);
    ds.images.segment(img * i, img) = s.image;
    std::copy(s.masks.begin(), s.masks.end(), ds.masks.begin() + static_cast<std::ptrdiff_t>(msk * static_cast<std::size_t>(i)));
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(s.label);
  }
  return ds;
}

Tensor Dataset::batch(std::span<const int> indices) const {
  const Eigen::Index img = image_numel();
  Buffer out(img * static_cast<Eigen::Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= size()) {
      throw IndexError("sample " + std::to_string(indices[k]) + " out of range [0, " +
                       std::to_string(size()) + ")");
    }
    out.segment(img * static_cast<Eigen::Index>(k), img) = images.segment(img * indices[k], img);
  }
  return Tensor::from({static_cast<int>(indices.size()), 3, height(), width()}, std::move(out));
}

std::vector<int> Dataset::batch_labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(static_cast<int>(labels.at(static_cast<std::size_t>(i))));
  return out;
}

const std::uint8_t* Dataset::mask(int index, int concept_id) const {
  return masks.data() + (static_cast<std::size_t>(index) * kNumConcepts + static_cast<std::size_t>(concept_id)) *
                            static_cast<std::size_t>(plane());
}

// ---------------------------------------------------------------------------
// Files

namespace {

constexpr const char* kMagic = "CGLD";

template <typename T>
void write_le_file(const fs::path& path, const T* data, std::size_t count) {
  static_assert(sizeof(T) == 1 || sizeof(T) == 4);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    if constexpr (sizeof(T) == 1 || std::endian::native == std::endian::little) {
      out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
    } else {
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t v;
        std::memcpy(&v, data + i, 4);
        const char bytes[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
        out.write(bytes, 4);
      }
    }
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open (byte offset 0)");
  return {std::istreambuf_iterator<char>(in), {}};
}

template <typename T>
void read_le_file(const fs::path& path, T* data, std::size_t count) {
  const std::string bytes = read_all(path);
  const std::size_t expected = count * sizeof(T);
  if (bytes.size() != expected) {
    throw FormatError(path.filename().string() + ": expected " + std::to_string(expected) +
                      " bytes, file ends at byte offset " + std::to_string(bytes.size()));
  }
  if constexpr (sizeof(T) == 1 || std::endian::native == std::endian::little) {
    std::memcpy(data, bytes.data(), expected);
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      const auto* b = reinterpret_cast<const unsigned char*>(bytes.data() + 4 * i);
      const std::uint32_t v = b[0] | (b[1] << 8) | (b[2] << 16) | (std::uint32_t{b[3]} << 24);
      std::memcpy(data + i, &v, 4);
    }
  }
}

json header_json(const DatasetHeader& h) {
  json concepts = json::array();
  for (const auto& c : concept_names()) concepts.push_back(c);
  return {{"magic", kMagic},
          {"version", h.version},
          {"count", h.count},
          {"height", h.config.height},
          {"width", h.config.width},
          {"label_mode", to_string(h.config.label_mode)},
          {"concepts", concepts},
          {"seed", h.seed},
          {"config",
           {{"min_size", h.config.min_size},
            {"max_size", h.config.max_size},
            {"max_overlap_iou", h.config.max_overlap_iou}}}};
}

// Offset of a key in the meta text, for error messages.
std::string offset_of(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  return std::to_string(pos == std::string::npos ? 0 : pos);
}

DatasetHeader parse_header(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("meta.json: malformed JSON at byte offset " + std::to_string(e.byte));
  }
  auto field = [&](const char* key) -> const json& {
    if (!j.is_object() || !j.contains(key)) {
      throw FormatError(std::string("meta.json: missing field '") + key + "' (byte offset " +
                        std::to_string(text.size()) + ")");
    }
    return j.at(key);
  };
  auto bad = [&](const std::string& key, const std::string& what) {
    return FormatError("meta.json: " + what + " at byte offset " + offset_of(text, key));
  };
  try {
    if (field("magic") != kMagic) throw bad("magic", "bad magic " + field("magic").dump());
    DatasetHeader h;
    h.version = field("version").get<std::uint32_t>();
    if (h.version != kDatasetVersion) {
      throw bad("version", "unsupported version " + std::to_string(h.version));
    }
    h.count = field("count").get<int>();
    h.seed = field("seed").get<std::uint64_t>();
    h.config.height = field("height").get<int>();
    h.config.width = field("width").get<int>();
    try {
      h.config.label_mode = parse_label_mode(field("label_mode").get<std::string>());
    } catch (const ConfigError& e) {
      throw bad("label_mode", e.what());
    }
    const auto& cfg = field("config");
    h.config.min_size = cfg.at("min_size").get<int>();
    h.config.max_size = cfg.at("max_size").get<int>();
    h.config.max_overlap_iou = cfg.at("max_overlap_iou").get<double>();
    const auto& concepts = field("concepts");
    if (!concepts.is_array() || concepts.size() != kNumConcepts) {
      throw bad("concepts", "concept list must hold " + std::to_string(kNumConcepts) + " names");
    }
    for (std::size_t i = 0; i < kNumConcepts; ++i) {
      if (concepts[i] != concept_names()[i]) {
        throw bad("concepts", "concept " + std::to_string(i) + " is " + concepts[i].dump() +
                                  ", expected \"" + concept_names()[i] + "\"");
      }
    }
    if (h.count < 1 || h.config.height < 1 || h.config.width < 1) {
      throw bad("count", "non-positive dataset dimensions");
    }
    return h;
  } catch (const json::exception& e) {
    throw FormatError(std::string("meta.json: wrong field type (") + e.what() + ") at byte offset 0");
  }
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  write_le_file(dir / "images.bin", ds.images.data(), static_cast<std::size_t>(ds.images.size()));
  write_le_file(dir / "masks.bin", ds.masks.data(), ds.masks.size());
  write_le_file(dir / "labels.bin", ds.labels.data(), ds.labels.size());
  // meta.json last: a directory with a header is a complete dataset
  const std::string text = header_json(ds.header).dump(2) + "\n";
  write_le_file(dir / "meta.json", text.data(), text.size());
}

Dataset read_dataset(const fs::path& dir) {
  Dataset ds;
  ds.header = parse_header(read_all(dir / "meta.json"));
  const auto n = static_cast<std::size_t>(ds.size());
  ds.images.resize(ds.image_numel() * ds.size());
  ds.masks.resize(n * kNumConcepts * static_cast<std::size_t>(ds.plane()));
  ds.labels.resize(n);
  read_le_file(dir / "images.bin", ds.images.data(), static_cast<std::size_t>(ds.images.size()));
  read_le_file(dir / "masks.bin", ds.masks.data(), ds.masks.size());
  read_le_file(dir / "labels.bin", ds.labels.data(), ds.labels.size());
  for (std::size_t i = 0; i < ds.masks.size(); ++i) {
    if (ds.masks[i] > 1) {
      throw FormatError("masks.bin: value " + std::to_string(ds.masks[i]) + " at byte offset " +
                        std::to_string(i));
    }
  }
  const auto classes = static_cast<std::uint32_t>(num_classes(ds.header.config.label_mode));
  for (std::size_t i = 0; i < n; ++i) {
    if (ds.labels[i] >= classes) {
      throw FormatError("labels.bin: label " + std::to_string(ds.labels[i]) + " at byte offset " +
                        std::to_string(4 * i) + " exceeds " + std::to_string(classes) + " classes");
    }
  }
  return ds;
}

}  // namespace cgl
