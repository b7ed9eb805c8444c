#include "cgl/dissect_eval.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace cgl {

namespace fs = std::filesystem;

std::string to_string(AlignmentCount mode) {
  return mode == AlignmentCount::Fraction ? "fraction" : "absolute";
}

AlignmentCount parse_alignment_count(const std::string& text) {
  if (text == "fraction") return AlignmentCount::Fraction;
  if (text == "absolute") return AlignmentCount::Absolute;
  throw ConfigError("unknown alignment count mode '" + text + "' (expected fraction or absolute)");
}

std::string to_string(Upsample method) {
  return method == Upsample::Nearest ? "nearest" : "bilinear-threshold";
}

void DissectConfig::validate() const {
  if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("quantile must lie in (0, 1)");
  if (!(iou_threshold >= 0.0 && iou_threshold < 1.0)) {
    throw ConfigError("iou_threshold must lie in [0, 1)");
  }
  if (top_k < 1) throw ConfigError("top_k must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(memory_budget_mb > 0.0)) throw ConfigError("memory budget must be positive");
}

// ---------------------------------------------------------------------------
// Thresholds and masks

double activation_threshold(std::span<const float> values, double q) {
  if (values.empty()) throw DimensionError("activation_threshold: no activations");
  if (!(q > 0.0 && q < 1.0)) throw ConfigError("activation quantile must lie in (0, 1)");
  std::vector<float> v(values.begin(), values.end());
  const double pos = (1.0 - q) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (lo + 1 >= v.size() || frac == 0.0) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + frac * (b - a);
}

Upsample upsample_method(int h, int w, int height, int width) {
  return height % h == 0 && width % w == 0 ? Upsample::Nearest : Upsample::BilinearThreshold;
}

std::vector<std::uint8_t> active_mask(const float* map, int h, int w, double threshold, int height,
                                      int width) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width, 0);
  if (upsample_method(h, w, height, width) == Upsample::Nearest) {
    const int fy = height / h, fx = width / w;
    for (int r = 0; r < height; ++r)
      for (int c = 0; c < width; ++c)
        out[static_cast<std::size_t>(r) * width + c] = map[(r / fy) * w + c / fx] > threshold;
    return out;
  }
  // half-pixel-centred bilinear interpolation of the 0/1 map, kept where > 0.5
  auto axis = [](int dst, int src_len, int dst_len, int& i0, int& i1, double& t) {
    double s = (dst + 0.5) * src_len / dst_len - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_len - 1));
    i0 = static_cast<int>(std::floor(s));
    i1 = std::min(i0 + 1, src_len - 1);
    t = s - i0;
  };
  auto on = [&](int y, int x) { return map[y * w + x] > threshold ? 1.0 : 0.0; };
  for (int r = 0; r < height; ++r) {
    int y0, y1;
    double ty;
    axis(r, h, height, y0, y1, ty);
    for (int c = 0; c < width; ++c) {
      int x0, x1;
      double tx;
      axis(c, w, width, x0, x1, tx);
      const double v = (1 - ty) * ((1 - tx) * on(y0, x0) + tx * on(y0, x1)) +
                       ty * ((1 - tx) * on(y1, x0) + tx * on(y1, x1));
      out[static_cast<std::size_t>(r) * width + c] = v > 0.5;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// IoU

namespace {

std::array<std::uint64_t, kNumConcepts> concept_totals(const Dataset& data) {
  std::array<std::uint64_t, kNumConcepts> totals{};
  const auto plane = static_cast<std::size_t>(data.plane());
  for (int n = 0; n < data.size(); ++n)
    for (int c = 0; c < kNumConcepts; ++c) {
      const std::uint8_t* m = data.mask(n, c);
      totals[static_cast<std::size_t>(c)] += static_cast<std::uint64_t>(std::count(m, m + plane, 1));
    }
  return totals;
}

void add_pixels(IouCounts& counts, std::span<const int> pixels, const Dataset& data, int image) {
  counts.active_pixels += pixels.size();
  for (int c = 0; c < kNumConcepts; ++c) {
    const std::uint8_t* m = data.mask(image, c);
    std::uint64_t hit = 0;
    for (int p : pixels) hit += m[p];
    counts.intersection[static_cast<std::size_t>(c)] += hit;
  }
}

}  // namespace

void IouCounts::add(std::span<const std::uint8_t> active, const Dataset& data, int image) {
  std::vector<int> pixels;
  for (std::size_t p = 0; p < active.size(); ++p)
    if (active[p]) pixels.push_back(static_cast<int>(p));
  add_pixels(*this, pixels, data, image);
  const auto plane = static_cast<std::size_t>(data.plane());
  for (int c = 0; c < kNumConcepts; ++c) {
    const std::uint8_t* m = data.mask(image, c);
    mask_pixels[static_cast<std::size_t>(c)] += static_cast<std::uint64_t>(std::count(m, m + plane, 1));
  }
}

double IouCounts::iou(int concept_id) const {
  const auto c = static_cast<std::size_t>(concept_id);
  const std::uint64_t uni = active_pixels + mask_pixels[c] - intersection[c];
  return uni == 0 ? 0.0 : static_cast<double>(intersection[c]) / static_cast<double>(uni);
}

FilterProfile make_profile(int layer, int filter, double threshold, const IouCounts& counts) {
  FilterProfile p;
  p.layer = layer;
  p.filter = filter;
  p.threshold = threshold;
  for (int c = 0; c < kNumConcepts; ++c) {
    p.iou[static_cast<std::size_t>(c)] = counts.iou(c);
    if (p.iou[static_cast<std::size_t>(c)] > p.best_iou) {
      p.best_iou = p.iou[static_cast<std::size_t>(c)];
      p.best_concept = c;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Detectors, alignment, RUD

std::vector<int> detected_concepts(std::span<const FilterProfile> profiles, double iou_threshold) {
  std::array<bool, kNumConcepts> hit{};
  for (const auto& p : profiles)
    if (p.best_iou > iou_threshold) hit[static_cast<std::size_t>(p.best_concept)] = true;
  std::vector<int> out;
  for (int c = 0; c < kNumConcepts; ++c)
    if (hit[static_cast<std::size_t>(c)]) out.push_back(c);
  return out;
}

FamilyCounts assign_detectors(std::span<const FilterProfile> profiles, double iou_threshold) {
  FamilyCounts counts;
  for (int c : detected_concepts(profiles, iou_threshold)) {
    switch (concept_family(c)) {
      case ConceptFamily::Color: ++counts.color; break;
      case ConceptFamily::Shape: ++counts.shape; break;
      case ConceptFamily::ColorShape: ++counts.color_shape; break;
    }
    ++counts.total;
  }
  return counts;
}

GroupAlignment group_alignment(std::span<const FilterProfile> group, const DissectConfig& config) {
  if (group.empty()) throw DimensionError("group_alignment: empty group");
  GroupAlignment a;
  std::array<int, kNumConcepts> votes{};
  for (const auto& p : group)
    if (p.best_iou > config.iou_threshold) ++votes[static_cast<std::size_t>(p.best_concept)];
  const auto modal = std::max_element(votes.begin(), votes.end());  // first maximum
  if (*modal == 0) return a;
  a.modal_concept = static_cast<int>(modal - votes.begin());
  double iou_sum = 0.0;
  for (const auto& p : group)
    if (p.best_iou > config.iou_threshold && p.best_concept == a.modal_concept) iou_sum += p.best_iou;
  a.detector_fraction = static_cast<double>(*modal) / static_cast<double>(group.size());
  a.mean_iou = iou_sum / *modal;
  const double count_term =
      config.count_mode == AlignmentCount::Fraction ? a.detector_fraction : static_cast<double>(*modal);
  a.score = config.w_det * count_term + config.w_iou * a.mean_iou;
  if (a.score > config.align_threshold) a.concept_id = a.modal_concept;
  return a;
}

double rud(std::span<const FamilyCounts> counts, std::span<const int> filters_per_layer) {
  if (counts.size() != filters_per_layer.size() || counts.size() < 2) {
    throw ConfigError("RUD needs per-layer counts for at least two conv layers");
  }
  const std::size_t n = counts.size();
  const int detectors = counts[n - 2].total + counts[n - 1].total;
  const int filters = filters_per_layer[n - 2] + filters_per_layer[n - 1];
  return filters == 0 ? 0.0 : static_cast<double>(detectors) / filters;
}

// ---------------------------------------------------------------------------
// Top-K

std::vector<TopRegion> top_k_regions(std::span<const float> acts, int n, int h, int w,
                                     double threshold, int k, int height, int width) {
  if (k < 1) throw ConfigError("top_k must be >= 1");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (acts.size() != plane * static_cast<std::size_t>(n)) {
    throw DimensionError("top_k_regions: " + std::to_string(acts.size()) + " values for " +
                         std::to_string(n) + " maps of " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<float> peak(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* m = acts.data() + plane * static_cast<std::size_t>(i);
    peak[static_cast<std::size_t>(i)] = *std::max_element(m, m + plane);
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int take = std::min(k, n);
  std::partial_sort(order.begin(), order.begin() + take, order.end(), [&](int a, int b) {
    const float pa = peak[static_cast<std::size_t>(a)], pb = peak[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  std::vector<TopRegion> out;
  for (int r = 0; r < take; ++r) {
    const int img = order[static_cast<std::size_t>(r)];
    TopRegion region{img, peak[static_cast<std::size_t>(img)], std::nullopt};
    const auto mask = active_mask(acts.data() + plane * static_cast<std::size_t>(img), h, w,
                                  threshold, height, width);
    int top = height, left = width, bottom = -1, right = -1;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (mask[static_cast<std::size_t>(y) * width + x]) {
          top = std::min(top, y);
          left = std::min(left, x);
          bottom = std::max(bottom, y);
          right = std::max(right, x);
        }
    if (bottom >= 0) region.box = std::array<int, 4>{top, left, bottom + 1, right + 1};
    out.push_back(region);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full dissection

namespace {

// A run of filters of one layer whose activations are held at once.
struct Chunk {
  int layer;
  int begin;
  int end;
};

}  // namespace

DissectReport dissect(ConceptModel& model, const Dataset& eval, const DissectConfig& config) {
  config.validate();
  const auto& layers = model.layers();
  const int n = eval.size();
  const int height = eval.height(), width = eval.width();

  // layer resolutions from a one-image probe
  std::vector<std::pair<int, int>> res;
  {
    NoGradGuard guard;
    std::vector<int> first{0};
    for (const auto& l : model.forward(eval.batch(first), Mode::Eval, false).layers) {
      res.emplace_back(l.response.dim(2), l.response.dim(3));
    }
  }

  DissectReport report;
  report.config = config;
  report.eval_count = n;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    LayerReport lr;
    lr.layer = static_cast<int>(l);
    lr.filters = layers[l].spec.out_channels;
    lr.height = res[l].first;
    lr.width = res[l].second;
    lr.upsampling = upsample_method(lr.height, lr.width, height, width);
    lr.profiles.resize(static_cast<std::size_t>(lr.filters));
    lr.top.resize(static_cast<std::size_t>(lr.filters));
    report.layers.push_back(std::move(lr));
  }

  // pack filters into sweeps that fit the activation budget
  const double budget = config.memory_budget_mb * 1024.0 * 1024.0;
  std::vector<std::vector<Chunk>> sweeps(1);
  double used = 0.0;
  for (const auto& lr : report.layers) {
    const double per_filter = 4.0 * n * lr.height * lr.width;
    for (int f = 0; f < lr.filters; ++f) {
      if (used > 0.0 && used + per_filter > budget) {
        sweeps.emplace_back();
        used = 0.0;
      }
      auto& sweep = sweeps.back();
      if (!sweep.empty() && sweep.back().layer == lr.layer && sweep.back().end == f) {
        ++sweep.back().end;
      } else {
        sweep.push_back({lr.layer, f, f + 1});
      }
      used += per_filter;
    }
  }

  const auto totals = concept_totals(eval);
  for (const auto& sweep : sweeps) {
    // acts[chunk][filter - begin] holds n consecutive h x w maps
    std::vector<std::vector<std::vector<float>>> acts(sweep.size());
    for (std::size_t c = 0; c < sweep.size(); ++c) {
      const auto& lr = report.layers[static_cast<std::size_t>(sweep[c].layer)];
      acts[c].assign(static_cast<std::size_t>(sweep[c].end - sweep[c].begin),
                     std::vector<float>(static_cast<std::size_t>(n) * lr.height * lr.width));
    }
    for (int start = 0; start < n; start += config.batch_size) {
      const int stop = std::min(n, start + config.batch_size);
      std::vector<int> idx(static_cast<std::size_t>(stop - start));
      std::iota(idx.begin(), idx.end(), start);
      NoGradGuard guard;
      const auto out = model.forward(eval.batch(idx), Mode::Eval, false);
      for (std::size_t c = 0; c < sweep.size(); ++c) {
        const Tensor& r = out.layers[static_cast<std::size_t>(sweep[c].layer)].response;
        const int filters = r.dim(1);
        const Eigen::Index plane = static_cast<Eigen::Index>(r.dim(2)) * r.dim(3);
        for (int b = 0; b < stop - start; ++b)
          for (int f = sweep[c].begin; f < sweep[c].end; ++f) {
            const float* src = r.data().data() + (static_cast<Eigen::Index>(b) * filters + f) * plane;
            std::copy(src, src + plane,
                      acts[c][static_cast<std::size_t>(f - sweep[c].begin)].begin() +
                          static_cast<std::ptrdiff_t>((start + b) * plane));
          }
      }
    }

    for (std::size_t c = 0; c < sweep.size(); ++c) {
      auto& lr = report.layers[static_cast<std::size_t>(sweep[c].layer)];
      const int h = lr.height, w = lr.width;
      const std::size_t plane = static_cast<std::size_t>(h) * w;
      for (int f = sweep[c].begin; f < sweep[c].end; ++f) {
        const auto& values = acts[c][static_cast<std::size_t>(f - sweep[c].begin)];
        const double t = activation_threshold(values, config.quantile);
        IouCounts counts;
        counts.mask_pixels = totals;
        std::vector<int> pixels;
        for (int i = 0; i < n; ++i) {
          const float* map = values.data() + plane * static_cast<std::size_t>(i);
          pixels.clear();
          if (lr.upsampling == Upsample::Nearest) {
            const int fy = height / h, fx = width / w;
            for (std::size_t p = 0; p < plane; ++p) {
              if (!(map[p] > t)) continue;
              const int y = static_cast<int>(p) / w, x = static_cast<int>(p) % w;
              for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx) pixels.push_back((y * fy + dy) * width + x * fx + dx);
            }
          } else {
            if (!std::any_of(map, map + plane, [t](float v) { return v > t; })) continue;
            const auto mask = active_mask(map, h, w, t, height, width);
            for (std::size_t p = 0; p < mask.size(); ++p)
              if (mask[p]) pixels.push_back(static_cast<int>(p));
          }
          if (!pixels.empty()) add_pixels(counts, pixels, eval, i);
        }
        lr.profiles[static_cast<std::size_t>(f)] = make_profile(lr.layer, f, t, counts);
        lr.top[static_cast<std::size_t>(f)] =
            top_k_regions(values, n, h, w, t, config.top_k, height, width);
      }
    }
  }

  report.relevance = relevance(model.conv_weights(), model.partitions());
  std::vector<FamilyCounts> counts;
  std::vector<int> filters;
  for (auto& lr : report.layers) {
    lr.counts = assign_detectors(lr.profiles, config.iou_threshold);
    const auto& part = layers[static_cast<std::size_t>(lr.layer)].partition;
    for (int g = 0; g < part.num_groups; ++g) {
      const auto range = part.groups[static_cast<std::size_t>(g)];
      auto a = group_alignment(std::span(lr.profiles).subspan(static_cast<std::size_t>(range.begin),
                                                              static_cast<std::size_t>(range.size())),
                               config);
      a.layer = lr.layer;
      a.group = g;
      a.filters = range;
      a.relevance = report.relevance.group[static_cast<std::size_t>(lr.layer)][static_cast<std::size_t>(g)];
      lr.groups.push_back(a);
    }
    counts.push_back(lr.counts);
    filters.push_back(lr.filters);
  }
  if (counts.size() >= 2) report.rud = rud(counts, filters);
  return report;
}

std::vector<float> unit_activations(ConceptModel& model, const Dataset& data, int layer, int filter,
                                    int batch_size, int* h, int* w) {
  const auto& layers = model.layers();
  if (layer < 0 || layer >= static_cast<int>(layers.size()) || filter < 0 ||
      filter >= layers[static_cast<std::size_t>(layer)].spec.out_channels) {
    throw ConfigError("no unit " + std::to_string(filter) + " in conv layer " + std::to_string(layer + 1));
  }
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<float> out;
  for (int start = 0; start < data.size(); start += batch_size) {
    const int stop = std::min(data.size(), start + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(stop - start));
    std::iota(idx.begin(), idx.end(), start);
    NoGradGuard guard;
    const auto fwd = model.forward(data.batch(idx), Mode::Eval, false);
    const Tensor& r = fwd.layers[static_cast<std::size_t>(layer)].response;
    *h = r.dim(2);
    *w = r.dim(3);
    const Eigen::Index plane = static_cast<Eigen::Index>(*h) * *w;
    for (int b = 0; b < stop - start; ++b) {
      const float* src = r.data().data() + (static_cast<Eigen::Index>(b) * r.dim(1) + filter) * plane;
      out.insert(out.end(), src, src + plane);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

using ojson = nlohmann::ordered_json;

ojson family_json(const FamilyCounts& c) {
  return {{"color", c.color}, {"shape", c.shape}, {"color_shape", c.color_shape}, {"total", c.total}};
}

ojson concept_json(int id) { return id < 0 ? ojson(nullptr) : ojson(concept_names()[static_cast<std::size_t>(id)]); }

}  // namespace

ojson to_json(const DissectReport& report) {
  const auto& cfg = report.config;
  ojson j;
  j["schema_version"] = kReportSchemaVersion;
  j["config"] = {{"quantile", cfg.quantile},
                 {"iou_threshold", cfg.iou_threshold},
                 {"w_det", cfg.w_det},
                 {"w_iou", cfg.w_iou},
                 {"align_threshold", cfg.align_threshold},
                 {"count_mode", to_string(cfg.count_mode)},
                 {"top_k", cfg.top_k}};
  j["eval_images"] = report.eval_count;
  j["concepts"] = concept_names();
  ojson layers = ojson::array();
  for (const auto& lr : report.layers) {
    ojson l;
    l["layer"] = lr.layer;
    l["filters"] = lr.filters;
    l["resolution"] = {lr.height, lr.width};
    l["upsampling"] = to_string(lr.upsampling);
    l["unique_detectors"] = family_json(lr.counts);
    ojson detected = ojson::array();
    for (int c : detected_concepts(lr.profiles, cfg.iou_threshold)) detected.push_back(concept_json(c));
    l["detected_concepts"] = detected;
    ojson groups = ojson::array();
    for (const auto& g : lr.groups) {
      groups.push_back({{"group", g.group},
                        {"filters", {g.filters.begin, g.filters.end}},
                        {"aligned_concept", concept_json(g.concept_id.value_or(-1))},
                        {"modal_concept", concept_json(g.modal_concept)},
                        {"detector_fraction", g.detector_fraction},
                        {"mean_iou", g.mean_iou},
                        {"score", g.score},
                        {"relevance", g.relevance}});
    }
    l["groups"] = groups;
    ojson profiles = ojson::array();
    for (const auto& p : lr.profiles) {
      profiles.push_back({{"filter", p.filter},
                          {"threshold", p.threshold},
                          {"best_concept", concept_json(p.best_concept)},
                          {"best_iou", p.best_iou},
                          {"detector", p.best_iou > cfg.iou_threshold},
                          {"iou", p.iou}});
    }
    l["profiles"] = profiles;
    layers.push_back(l);
  }
  j["layers"] = layers;
  j["relevance"] = {{"group", report.relevance.group}, {"layer", report.relevance.layer}};
  j["rud"] = report.rud ? ojson(*report.rud) : ojson(nullptr);
  j["config_hash"] = report.config_hash ? ojson(hash_hex(*report.config_hash)) : ojson(nullptr);
  j["warnings"] = report.warnings;
  return j;
}

void write_manifest(const DissectReport& report, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    for (const auto& lr : report.layers)
      for (std::size_t f = 0; f < lr.top.size(); ++f)
        for (std::size_t r = 0; r < lr.top[f].size(); ++r) {
          const auto& t = lr.top[f][r];
          ojson line{{"layer", lr.layer},
                     {"filter", static_cast<int>(f)},
                     {"rank", static_cast<int>(r)},
                     {"image", t.image},
                     {"activation", t.activation},
                     {"box", t.box ? ojson(*t.box) : ojson(nullptr)}};
          out << line.dump() << '\n';
        }
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// PNG

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

void put_chunk(std::string& png, const char* type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  std::string body = std::string(type, 4) + data;
  png += body;
  put_u32(png, static_cast<std::uint32_t>(
                   crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace

void write_png(const fs::path& path, int width, int height, std::span<const std::uint8_t> rgb) {
  if (width < 1 || height < 1 || rgb.size() != static_cast<std::size_t>(width) * height * 3) {
    throw DimensionError("write_png: " + std::to_string(rgb.size()) + " bytes for a " +
                         std::to_string(width) + "x" + std::to_string(height) + " RGB image");
  }
  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // no filter
    raw.append(reinterpret_cast<const char*>(rgb.data()) + static_cast<std::size_t>(y) * width * 3,
               static_cast<std::size_t>(width) * 3);
  }
  uLongf packed_len = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_len,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw std::runtime_error("write_png: compression failed");
  }
  packed.resize(packed_len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(width));
  put_u32(ihdr, static_cast<std::uint32_t>(height));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", packed);
  put_chunk(png, "IEND", "");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(png.data(), static_cast<std::streamsize>(png.size()));
}

}  // namespace cgl
