#include "cgl/concept_model.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

#include "cgl/rng.hpp"

namespace cgl {

GroupPartition partition_filters(int total_filters, int num_groups, int free_filters) {
  if (num_groups < 1 || free_filters < 0 || total_filters < 1 || free_filters >= total_filters ||
      (total_filters - free_filters) % num_groups != 0) {
    throw ConfigError("cannot partition F=" + std::to_string(total_filters) + " filters into G=" +
                      std::to_string(num_groups) + " equal groups with free=" +
                      std::to_string(free_filters));
  }
  GroupPartition p;
  p.total_filters = total_filters;
  p.num_groups = num_groups;
  p.free_filters = free_filters;
  p.group_size = (total_filters - free_filters) / num_groups;
  for (int g = 0; g < num_groups; ++g) {
    p.groups.push_back({g * p.group_size, (g + 1) * p.group_size});
  }
  if (free_filters > 0) p.free_range = FilterRange{total_filters - free_filters, total_filters};
  return p;
}

Tensor soft_field(const Tensor& pre_activation, const Tensor& channel_std,
                  const ScaleParams& scale) {
  Tensor standardized = div_channel(pre_activation, channel_std);
  return sigmoid(add(mul(standardized, scale.p1), scale.p2));
}

Tensor soft_field_batchnorm(const Tensor& standardized, const BatchNormParams& bn,
                            const ScaleParams& scale) {
  Tensor shift = div(bn.beta, clamp_magnitude(bn.gamma, kGammaFloor));
  Tensor tau = add_channel(standardized, shift);
  return sigmoid(add(mul(tau, scale.p1), scale.p2));
}

bool Architecture::operator==(const Architecture& other) const {
  if (in_channels != other.in_channels || num_classes != other.num_classes ||
      batch_norm != other.batch_norm || conv.size() != other.conv.size()) {
    return false;
  }
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& a = conv[i];
    const auto& b = other.conv[i];
    if (a.out_channels != b.out_channels || a.kernel != b.kernel || a.groups != b.groups ||
        a.free_filters != b.free_filters) {
      return false;
    }
  }
  return true;
}

Architecture synthetic_architecture(int num_classes) {
  Architecture arch;
  arch.in_channels = 3;
  arch.conv = {{128, 3, 8, 0}, {256, 3, 8, 0}};
  arch.num_classes = num_classes;
  return arch;
}

ConceptModel::ConceptModel(Architecture arch, std::uint64_t seed) : arch_(std::move(arch)) {
  if (arch_.conv.empty()) throw ConfigError("architecture needs at least one conv layer");
  if (arch_.num_classes < 2) throw ConfigError("architecture needs at least two classes");
  Rng rng(seed);
  int in = arch_.in_channels;
  for (const auto& spec : arch_.conv) {
    if (spec.kernel % 2 == 0 || spec.kernel < 1) {
      throw ConfigError("conv kernel must be odd, got " + std::to_string(spec.kernel));
    }
    ConvLayer layer;
    layer.spec = spec;
    layer.partition = partition_filters(spec.out_channels, spec.groups, spec.free_filters);
    const Shape wshape{spec.out_channels, in, spec.kernel, spec.kernel};
    Buffer w(shape_numel(wshape));
    const double he = std::sqrt(2.0 / (in * spec.kernel * spec.kernel));
    for (auto& v : w) v = static_cast<Scalar>(he * rng.normal());
    layer.weight = Tensor::from(wshape, std::move(w), true);
    layer.bias = Tensor::zeros({spec.out_channels}, true);
    if (arch_.batch_norm) {
      layer.bn = BatchNormParams{Tensor::full({spec.out_channels}, 1.0f, true),
                                 Tensor::zeros({spec.out_channels}, true),
                                 Buffer::Zero(spec.out_channels),
                                 Buffer::Ones(spec.out_channels)};
    }
    layer.running_std = Buffer::Ones(spec.out_channels);
    layers_.push_back(std::move(layer));
    in = spec.out_channels;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Buffer hw(static_cast<Eigen::Index>(arch_.num_classes) * in);
  for (auto& v : hw) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  head_weight_ = Tensor::from({arch_.num_classes, in}, std::move(hw), true);
  head_bias_ = Tensor::zeros({arch_.num_classes}, true);
}

ForwardResult ConceptModel::forward(const Tensor& images, Mode mode, bool capture_fields) {
  if (images.rank() != 4 || images.dim(1) != arch_.in_channels) {
    throw DimensionError("forward: expected N x " + std::to_string(arch_.in_channels) +
                         " x H x W images, got " + shape_str(images.shape()));
  }
  ForwardResult result;
  Tensor x = images;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    ConvLayer& layer = layers_[l];
    Tensor a = add_channel(conv2d(x, layer.weight, 1, layer.spec.kernel / 2), layer.bias);
    Tensor out = a;
    Tensor field;
    if (layer.bn) {
      BatchNormParams& bn = *layer.bn;
      Tensor standardized;
      if (mode == Mode::Train) {
        BatchMoments moments;
        standardized = batch_normalize(a, kStdEps, &moments);
        bn.running_mean = (1 - kRunningMomentum) * bn.running_mean + kRunningMomentum * moments.mean;
        bn.running_var = (1 - kRunningMomentum) * bn.running_var + kRunningMomentum * moments.var;
      } else {
        Tensor mu = Tensor::from({layer.spec.out_channels}, Buffer(-bn.running_mean));
        Tensor sd = Tensor::from({layer.spec.out_channels}, Buffer((bn.running_var + kStdEps).sqrt()));
        standardized = div_channel(add_channel(a, mu), sd);
      }
      out = add_channel(mul_channel(standardized, bn.gamma), bn.beta);
      if (capture_fields) field = soft_field_batchnorm(standardized, bn, scale_);
    } else {
      Tensor sd;
      if (mode == Mode::Train) {
        // running_std tracks every training batch, captured or not
        std::optional<NoGradGuard> guard;
        if (!capture_fields) guard.emplace();
        sd = batch_std(a, kStdEps);
        layer.running_std =
            (1 - kRunningMomentum) * layer.running_std + kRunningMomentum * sd.data();
      } else if (capture_fields) {
        sd = Tensor::from({layer.spec.out_channels}, layer.running_std);
      }
      if (capture_fields) field = soft_field(a, sd, scale_);
    }
    result.layers.push_back({static_cast<int>(l), a, out, field, &layer.partition});
    x = max_pool2(relu(out));
  }
  result.logits = linear(global_avg_pool(x), head_weight_, head_bias_);
  return result;
}

std::vector<Tensor> ConceptModel::parameters() const {
  std::vector<Tensor> params{scale_.p1, scale_.p2};
  for (const auto& layer : layers_) {
    params.push_back(layer.weight);
    params.push_back(layer.bias);
    if (layer.bn) {
      params.push_back(layer.bn->gamma);
      params.push_back(layer.bn->beta);
    }
  }
  params.push_back(head_weight_);
  params.push_back(head_bias_);
  return params;
}

std::vector<Tensor> ConceptModel::conv_weights() const {
  std::vector<Tensor> w;
  for (const auto& layer : layers_) w.push_back(layer.weight);
  return w;
}

std::vector<GroupPartition> ConceptModel::partitions() const {
  std::vector<GroupPartition> p;
  for (const auto& layer : layers_) p.push_back(layer.partition);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint: "CGLM", u32 version, u64 config hash, architecture descriptor,
// P1, P2, per-layer tensors, head, u32 CRC-32 of everything before it. All
// integers and floats are little-endian.

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void floats(const Buffer& b) {
    for (float v : b) f32(v);
  }
  const std::string& str() const { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t limit) : data_(data), limit_(limit) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  float f32() { return std::bit_cast<float>(u32()); }
  Buffer floats(Eigen::Index n) {
    Buffer b(n);
    for (Eigen::Index i = 0; i < n; ++i) b(i) = f32();
    return b;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: " + what + " at byte offset " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > limit_) fail("truncated data (need " + std::to_string(n) + " bytes)");
  }
  const std::string& data_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ConceptModel& model, std::uint64_t config_hash,
                     const std::filesystem::path& path) {
  Writer w;
  w.bytes("CGLM", 4);
  w.u32(kCheckpointVersion);
  w.u64(config_hash);
  const Architecture& arch = model.architecture();
  w.u32(static_cast<std::uint32_t>(arch.in_channels));
  w.u32(static_cast<std::uint32_t>(arch.num_classes));
  w.u32(arch.batch_norm ? 1u : 0u);
  w.u32(static_cast<std::uint32_t>(arch.conv.size()));
  for (const auto& spec : arch.conv) {
    w.u32(static_cast<std::uint32_t>(spec.out_channels));
    w.u32(static_cast<std::uint32_t>(spec.kernel));
    w.u32(static_cast<std::uint32_t>(spec.groups));
    w.u32(static_cast<std::uint32_t>(spec.free_filters));
  }
  w.f32(model.scale().p1.item());
  w.f32(model.scale().p2.item());
  for (const auto& layer : model.layers()) {
    w.floats(layer.weight.data());
    w.floats(layer.bias.data());
    if (layer.bn) {
      w.floats(layer.bn->gamma.data());
      w.floats(layer.bn->beta.data());
      w.floats(layer.bn->running_mean);
      w.floats(layer.bn->running_var);
    }
    w.floats(layer.running_std);
  }
  w.floats(model.head_weight().data());
  w.floats(model.head_bias().data());
  const auto& body = w.str();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  Writer tail;
  tail.u32(crc);

  // Write-then-rename so an interrupted save never clobbers the previous file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    f.write(tail.str().data(), 4);
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();
  if (data.size() < 8) {
    throw FormatError("checkpoint: truncated data at byte offset " + std::to_string(data.size()));
  }
  if (data.compare(0, 4, "CGLM") != 0) throw FormatError("checkpoint: bad magic at byte offset 0");

  Reader r(data, data.size() - 4);
  r.u32();  // magic, checked above
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  }
  const std::uint64_t hash = r.u64();
  Architecture arch;
  arch.in_channels = static_cast<int>(r.u32());
  arch.num_classes = static_cast<int>(r.u32());
  arch.batch_norm = r.u32() != 0;
  const std::uint32_t num_layers = r.u32();
  if (num_layers == 0 || num_layers > 64) r.fail("implausible layer count");
  for (std::uint32_t i = 0; i < num_layers; ++i) {
    ConvLayerSpec spec;
    spec.out_channels = static_cast<int>(r.u32());
    spec.kernel = static_cast<int>(r.u32());
    spec.groups = static_cast<int>(r.u32());
    spec.free_filters = static_cast<int>(r.u32());
    if (spec.out_channels <= 0 || spec.out_channels > (1 << 16) || spec.kernel <= 0 ||
        spec.kernel > 15) {
      r.fail("implausible layer descriptor");
    }
    arch.conv.push_back(spec);
  }

  ConceptModel model(arch, 0);
  model.scale().p1.mutable_data()(0) = r.f32();
  model.scale().p2.mutable_data()(0) = r.f32();
  for (auto& layer : model.layers()) {
    layer.weight.mutable_data() = r.floats(layer.weight.numel());
    layer.bias.mutable_data() = r.floats(layer.bias.numel());
    if (layer.bn) {
      layer.bn->gamma.mutable_data() = r.floats(layer.bn->gamma.numel());
      layer.bn->beta.mutable_data() = r.floats(layer.bn->beta.numel());
      layer.bn->running_mean = r.floats(layer.bn->running_mean.size());
      layer.bn->running_var = r.floats(layer.bn->running_var.size());
    }
    layer.running_std = r.floats(layer.running_std.size());
  }
  model.head_weight().mutable_data() = r.floats(model.head_weight().numel());
  model.head_bias().mutable_data() = r.floats(model.head_bias().numel());
  if (r.pos() != data.size() - 4) r.fail("trailing bytes before checksum");

  const auto expected = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(r.pos())));
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[r.pos() + i])) << (8 * i);
  }
  if (stored != expected) {
    throw FormatError("checkpoint: checksum mismatch at byte offset " + std::to_string(r.pos()));
  }
  return {std::move(model), hash};
}

}  // namespace cgl
