#include "fuseseg/unet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "fuseseg/rng.hpp"

using nlohmann::json;

namespace fuseseg {

namespace {

struct LayerSpec {
  std::string name;
  nn::Shape5 shape;
  enum Kind { ConvW, ConvB, NormG, NormB, TConvW } kind;
};

std::vector<LayerSpec> layer_specs(const UNetConfig& cfg) {
  std::vector<LayerSpec> out;
  auto conv_block = [&out](const std::string& prefix, int cin, int cout) {
    out.push_back({prefix + ".conv1.w", {cout, cin, 3, 3, 3}, LayerSpec::ConvW});
    out.push_back({prefix + ".conv1.b", {1, cout, 1, 1, 1}, LayerSpec::ConvB});
    out.push_back({prefix + ".norm1.g", {1, cout, 1, 1, 1}, LayerSpec::NormG});
    out.push_back({prefix + ".norm1.b", {1, cout, 1, 1, 1}, LayerSpec::NormB});
    out.push_back({prefix + ".conv2.w", {cout, cout, 3, 3, 3}, LayerSpec::ConvW});
    out.push_back({prefix + ".conv2.b", {1, cout, 1, 1, 1}, LayerSpec::ConvB});
    out.push_back({prefix + ".norm2.g", {1, cout, 1, 1, 1}, LayerSpec::NormG});
    out.push_back({prefix + ".norm2.b", {1, cout, 1, 1, 1}, LayerSpec::NormB});
  };

  for (int s = 1; s <= cfg.stages; ++s) {
    int cin = (s == 1) ? cfg.in_channels : cfg.channels_at(s - 1);
    conv_block("enc" + std::to_string(s), cin, cfg.channels_at(s));
  }
  for (int s = cfg.stages - 1; s >= 1; --s) {
    out.push_back({"up" + std::to_string(s),
                   {cfg.channels_at(s + 1), cfg.channels_at(s), 2, 2, 2},
                   LayerSpec::TConvW});
    conv_block("dec" + std::to_string(s), 2 * cfg.channels_at(s), cfg.channels_at(s));
  }
  for (const auto& label : cfg.head_labels) {
    out.push_back({"head_" + label + ".w", {2, cfg.channels_at(1), 1, 1, 1}, LayerSpec::ConvW});
    out.push_back({"head_" + label + ".b", {1, 2, 1, 1, 1}, LayerSpec::ConvB});
  }
  return out;
}

}  // namespace

void UNetConfig::validate() const {
  if (in_channels < 1 || stages < 2 || base_channels < 1 || max_channels < base_channels)
    fail(Err::InvalidConfig, "unet config: counts out of range");
  if (!(leaky_slope >= 0.0f && leaky_slope < 1.0f))
    fail(Err::InvalidConfig, "unet config: leaky_slope out of range");
  if (head_labels.empty()) fail(Err::InvalidConfig, "unet config: no head labels");
}

std::string UNetConfig::to_json() const {
  json j;
  j["in_channels"] = in_channels;
  j["stages"] = stages;
  j["base_channels"] = base_channels;
  j["max_channels"] = max_channels;
  j["leaky_slope"] = leaky_slope;
  j["head_labels"] = head_labels;
  return j.dump();
}

UNetConfig UNetConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail(Err::SchemaError, std::string("unet config json: ") + e.what());
  }
  UNetConfig cfg;
  cfg.in_channels = j.at("in_channels").get<int>();
  cfg.stages = j.at("stages").get<int>();
  cfg.base_channels = j.at("base_channels").get<int>();
  cfg.max_channels = j.at("max_channels").get<int>();
  cfg.leaky_slope = j.at("leaky_slope").get<float>();
  cfg.head_labels = j.at("head_labels").get<std::vector<std::string>>();
  cfg.validate();
  return cfg;
}

int64_t UNetModel::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.value.numel();
  return n;
}

const UNetModel::Param* UNetModel::find(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

UNetModel build_unet(const UNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  UNetModel model;
  model.config = cfg;
  Rng rng(seed);

  for (const auto& spec : layer_specs(cfg)) {
    nn::Tensor5 t = nn::Tensor5::zeros(spec.shape);
    switch (spec.kind) {
      case LayerSpec::ConvW:
      case LayerSpec::TConvW: {
        // He init adjusted for the leaky ReLU gain; fan-in over the kernel.
        int fan_in = spec.shape.c * spec.shape.d * spec.shape.h * spec.shape.w;
        if (spec.kind == LayerSpec::TConvW)
          fan_in = spec.shape.n * spec.shape.d * spec.shape.h * spec.shape.w;
        double sd = std::sqrt(2.0 / ((1.0 + cfg.leaky_slope * cfg.leaky_slope) * fan_in));
        for (auto& v : t.data) v = static_cast<float>(rng.normal() * sd);
        break;
      }
      case LayerSpec::NormG:
        std::fill(t.data.begin(), t.data.end(), 1.0f);
        break;
      case LayerSpec::ConvB:
      case LayerSpec::NormB:
        break;  // zeros
    }
    model.params.push_back({spec.name, std::move(t)});
  }
  return model;
}

UNetModel::Forward UNetModel::forward(nn::Tape& tape, const nn::Tensor5& x, bool train) const {
  const nn::Shape5& xs = x.shape;
  if (xs.c != config.in_channels)
    fail(Err::ShapeMismatch, "unet forward: input channels " + std::to_string(xs.c) +
                                 ", model expects " + std::to_string(config.in_channels));
  int f = config.downsample_factor();
  if (xs.d % f || xs.h % f || xs.w % f)
    fail(Err::ShapeMismatch, "unet forward: spatial dims " + xs.str() +
                                 " not divisible by " + std::to_string(f));

  Forward fw;
  std::vector<nn::NodeT<float>*> pnode;
  pnode.reserve(params.size());
  for (const auto& p : params) pnode.push_back(tape.leaf(p.value, train));
  fw.param_nodes = pnode;

  size_t pi = 0;
  auto next = [&]() { return pnode[pi++]; };

  auto conv_block = [&](nn::NodeT<float>* in, int stride1) {
    nn::ConvSpec s1{{stride1, stride1, stride1}, {1, 1, 1}};
    nn::NodeT<float>* w1 = next();
    nn::NodeT<float>* b1 = next();
    nn::NodeT<float>* g1 = next();
    nn::NodeT<float>* be1 = next();
    auto* h = nn::conv3d(tape, in, w1, b1, s1);
    h = nn::instance_norm(tape, h, g1, be1);
    h = nn::leaky_relu(tape, h, config.leaky_slope);
    nn::ConvSpec s2{{1, 1, 1}, {1, 1, 1}};
    nn::NodeT<float>* w2 = next();
    nn::NodeT<float>* b2 = next();
    nn::NodeT<float>* g2 = next();
    nn::NodeT<float>* be2 = next();
    h = nn::conv3d(tape, h, w2, b2, s2);
    h = nn::instance_norm(tape, h, g2, be2);
    h = nn::leaky_relu(tape, h, config.leaky_slope);
    return h;
  };

  nn::NodeT<float>* cur = tape.leaf(x, false);
  std::vector<nn::NodeT<float>*> skips(config.stages + 1, nullptr);
  for (int s = 1; s <= config.stages; ++s) {
    cur = conv_block(cur, s == 1 ? 1 : 2);
    skips[s] = cur;
  }
  for (int s = config.stages - 1; s >= 1; --s) {
    nn::NodeT<float>* wu = next();
    cur = nn::conv3d_transpose(tape, cur, wu, {2, 2, 2});
    cur = nn::concat_channels(tape, cur, skips[s]);
    cur = conv_block(cur, 1);
  }
  for (size_t h = 0; h < config.head_labels.size(); ++h) {
    nn::NodeT<float>* wh = next();
    nn::NodeT<float>* bh = next();
    auto* logits = nn::conv3d(tape, cur, wh, bh, nn::ConvSpec{});
    auto* probs = nn::softmax_channels(tape, logits);
    fw.heads.push_back(nn::select_channel(tape, probs, 1));
  }
  return fw;
}

namespace {
constexpr char kMagic[8] = {'F', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const UNetModel& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Err::IoError, "cannot open for write: " + path);
  f.write(kMagic, 8);
  auto w32 = [&f](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  w32(kVersion);
  std::string cfg = model.config.to_json();
  w32(static_cast<uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  w32(static_cast<uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    w32(static_cast<uint32_t>(p.name.size()));
    f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    int32_t dims[5] = {p.value.shape.n, p.value.shape.c, p.value.shape.d, p.value.shape.h,
                       p.value.shape.w};
    f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    f.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(float)));
  }
  if (!f) fail(Err::IoError, "write failed: " + path);
}

UNetModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Err::MissingFile, "cannot open: " + path);
  auto need = [&f, &path](char* dst, size_t n) {
    f.read(dst, static_cast<std::streamsize>(n));
    if (f.gcount() != static_cast<std::streamsize>(n))
      fail(Err::IoError, "checkpoint truncated: " + path);
  };
  char magic[8];
  need(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) fail(Err::BadMagic, "not a checkpoint: " + path);
  auto r32 = [&need]() {
    uint32_t v;
    need(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  uint32_t version = r32();
  if (version != kVersion)
    fail(Err::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                   ", expected " + std::to_string(kVersion));
  uint32_t cfg_len = r32();
  std::string cfg_text(cfg_len, '\0');
  need(cfg_text.data(), cfg_len);
  UNetModel model;
  model.config = UNetConfig::from_json(cfg_text);

  auto expected = layer_specs(model.config);
  uint32_t n_params = r32();
  if (n_params != expected.size())
    fail(Err::ShapeMismatch, "checkpoint has " + std::to_string(n_params) +
                                 " parameters, config implies " +
                                 std::to_string(expected.size()));
  for (uint32_t i = 0; i < n_params; ++i) {
    uint32_t name_len = r32();
    if (name_len > 4096) fail(Err::IoError, "implausible name length: " + path);
    std::string name(name_len, '\0');
    need(name.data(), name_len);
    int32_t dims[5];
    need(reinterpret_cast<char*>(dims), sizeof(dims));
    nn::Shape5 shape{dims[0], dims[1], dims[2], dims[3], dims[4]};
    const auto& spec = expected[i];
    if (name != spec.name || !(shape == spec.shape))
      fail(Err::ShapeMismatch, "checkpoint parameter \"" + name + "\" " + shape.str() +
                                   " does not match expected \"" + spec.name + "\" " +
                                   spec.shape.str());
    nn::Tensor5 t = nn::Tensor5::zeros(shape);
    need(reinterpret_cast<char*>(t.data.data()), t.data.size() * sizeof(float));
    model.params.push_back({name, std::move(t)});
  }
  return model;
}

}  // namespace fuseseg
