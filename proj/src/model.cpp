#include "veil/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "veil/error.hpp"
#include "veil/ops.hpp"
#include "veil/rng.hpp"
#include "veil/weights_io.hpp"

namespace veil {

using nlohmann::ordered_json;

namespace {

Tensor he_init(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = rng.normal(0.0, stddev);
  return t;
}

void validate_config(const ModelConfig& config) {
  if (config.input_size < 1) throw ConfigError("ModelConfig: input_size must be positive");
  for (int c : config.conv_channels) {
    if (c < 1) throw ConfigError("ModelConfig: conv channel widths must be positive");
  }
  for (int h : config.fc_hidden) {
    if (h < 1) throw ConfigError("ModelConfig: fc hidden widths must be positive");
  }
}

void init_head_weights(Head& head, const ModelConfig& config, int feature_length,
                       std::uint64_t rng_seed) {
  const std::array<int, 4> widths = {feature_length, config.fc_hidden[0], config.fc_hidden[1],
                                     head.num_classes};
  head.layers.clear();
  for (int i = 0; i < 3; ++i) {
    Rng rng(mix_seed({rng_seed, 0xFCull, static_cast<std::uint64_t>(i)}));
    DenseLayer layer;
    layer.weight = he_init({widths[i + 1], widths[i]}, widths[i], rng);
    layer.bias = Tensor({widths[i + 1]}, true);
    head.layers.push_back(std::move(layer));
  }
}

}  // namespace

ConvBase build_conv_base(const ModelConfig& config, std::uint64_t rng_seed) {
  validate_config(config);
  ConvBase base;
  base.input_size = config.input_size;

  // Walk the shape chain first so size errors carry the full trace.
  std::string trace = std::to_string(config.input_size);
  int h = config.input_size;
  std::vector<std::pair<int, int>> crops;
  for (int i = 0; i < 3; ++i) {
    if (i) trace += " | " + std::to_string(h);
    if (h < 3) {
      throw ShapeError("conv base: stage " + std::to_string(i + 1) + " input " + std::to_string(h) +
                       "x" + std::to_string(h) + " too small for a 3x3 kernel (shape trace: " +
                       trace + ")");
    }
    h -= 2;  // valid conv
    trace += ">" + std::to_string(h);
    if (h % 2 != 0) {
      if (h == 1) {
        throw ShapeError("conv base: stage " + std::to_string(i + 1) +
                         " collapses to 1x1 before pooling (shape trace: " + trace + ")");
      }
      h -= 1;  // drop last row/column
      trace += ">" + std::to_string(h);
    }
    crops.emplace_back(h, h);
    h /= 2;  // 2x2 max pool
    trace += ">" + std::to_string(h);
  }
  base.shape_trace = trace;
  base.pre_pool_crop = crops;
  base.feature_length = config.conv_channels[2] * h * h;

  int in_channels = 1;
  for (int i = 0; i < 3; ++i) {
    Rng rng(mix_seed({rng_seed, 0xC0ull, static_cast<std::uint64_t>(i)}));
    ConvLayer layer;
    layer.kernel = he_init({config.conv_channels[static_cast<std::size_t>(i)], in_channels, 3, 3},
                           in_channels * 9, rng);
    layer.bias = Tensor({config.conv_channels[static_cast<std::size_t>(i)]}, true);
    base.layers.push_back(std::move(layer));
    in_channels = config.conv_channels[static_cast<std::size_t>(i)];
  }
  return base;
}

Head build_head(const ModelConfig& config, int num_classes, std::uint64_t rng_seed) {
  validate_config(config);
  if (num_classes < 2) {
    throw ConfigError("build_head: num_classes must be >= 2, got " + std::to_string(num_classes));
  }
  // feature length comes from the same shape chain as the base
  ConvBase probe = build_conv_base(config, 0);
  Head head;
  head.num_classes = num_classes;
  init_head_weights(head, config, probe.feature_length, rng_seed);
  return head;
}

HybridModel build_hybrid(const ModelConfig& config, int num_emotions, int num_identities,
                         std::uint64_t rng_seed) {
  HybridModel model;
  model.base = build_conv_base(config, mix_seed({rng_seed, 0xBA5Eull}));
  model.emotion_head = build_head(config, num_emotions, mix_seed({rng_seed, 0xE40ull}));
  model.identity_head = build_head(config, num_identities, mix_seed({rng_seed, 0x1Dull}));
  return model;
}

Tensor ConvBase::forward(const Tensor& image) const {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 1 || s[1] != input_size || s[2] != input_size) {
    throw ShapeError("ConvBase::forward: expected [1," + std::to_string(input_size) + "," +
                     std::to_string(input_size) + "] input");
  }
  Tensor x = image;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = relu(conv2d(x, layers[i].kernel, layers[i].bias));
    const auto [ch, cw] = pre_pool_crop[i];
    if (x.dim(1) != ch || x.dim(2) != cw) x = crop_spatial(x, ch, cw);
    x = max_pool2d(x);
  }
  return flatten(x);
}

Tensor Head::forward(const Tensor& features) const {
  Tensor x = features;
  x = relu(dense(x, layers[0].weight, layers[0].bias));
  x = relu(dense(x, layers[1].weight, layers[1].bias));
  return softmax(dense(x, layers[2].weight, layers[2].bias));
}

std::vector<Tensor> ConvBase::parameters() const {
  std::vector<Tensor> out;
  for (const ConvLayer& l : layers) {
    out.push_back(l.kernel);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<Tensor> Head::parameters() const {
  std::vector<Tensor> out;
  for (const DenseLayer& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

Tensor forward(const ConvBase& base, const Head& head, const Tensor& image) {
  return head.forward(base.forward(image));
}

void set_frozen(HybridModel& model, ParamGroup group, bool frozen) {
  switch (group) {
    case ParamGroup::Base: model.base.frozen = frozen; break;
    case ParamGroup::EmotionHead: model.emotion_head.frozen = frozen; break;
    case ParamGroup::IdentityHead: model.identity_head.frozen = frozen; break;
  }
}

bool is_frozen(const HybridModel& model, ParamGroup group) {
  switch (group) {
    case ParamGroup::Base: return model.base.frozen;
    case ParamGroup::EmotionHead: return model.emotion_head.frozen;
    case ParamGroup::IdentityHead: return model.identity_head.frozen;
  }
  return false;
}

void reinit_head(HybridModel& model, ParamGroup group, std::uint64_t rng_seed,
                 OptimizerState* optimizer) {
  if (group == ParamGroup::Base) {
    throw ProtocolError("reinit_head: the conv base is the learned artifact and cannot be re-initialized");
  }
  Head& head = group == ParamGroup::EmotionHead ? model.emotion_head : model.identity_head;
  const int feature_length = static_cast<int>(head.layers[0].weight.dim(1));
  // Overwrite in place so existing parameter handles stay valid.
  Head fresh;
  fresh.num_classes = head.num_classes;
  ModelConfig widths;
  widths.fc_hidden = {head.layers[1].weight.dim(1), head.layers[2].weight.dim(1)};
  init_head_weights(fresh, widths, feature_length, rng_seed);
  for (int i = 0; i < 3; ++i) {
    head.layers[static_cast<std::size_t>(i)].weight.values() =
        fresh.layers[static_cast<std::size_t>(i)].weight.values();
    head.layers[static_cast<std::size_t>(i)].bias.values() =
        fresh.layers[static_cast<std::size_t>(i)].bias.values();
    head.layers[static_cast<std::size_t>(i)].weight.zero_grad();
    head.layers[static_cast<std::size_t>(i)].bias.zero_grad();
  }
  if (optimizer != nullptr) optimizer->reset(head.parameters());
}

double accuracy(const ConvBase& base, const Head& head, const Dataset& data,
                const std::vector<int>& indices, Task task) {
  if (indices.empty()) throw Error("accuracy: empty split");
  NoGradGuard untaped;
  std::size_t correct = 0;
  for (int idx : indices) {
    const LabeledImage& img = data[static_cast<std::size_t>(idx)];
    Tensor probs = forward(base, head, to_tensor(img));
    int best = 0;
    for (int k = 1; k < head.num_classes; ++k) {
      if (probs.data()[k] > probs.data()[best]) best = k;  // ties keep the lowest index
    }
    if (best == label_of(img, task)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

Tensor to_tensor(const LabeledImage& image) {
  return Tensor::from_data({1, image.height, image.width}, image.pixels);
}

std::vector<Tensor> trainable_parameters(const HybridModel& model) {
  std::vector<Tensor> out;
  auto append = [&out](const std::vector<Tensor>& ps) {
    out.insert(out.end(), ps.begin(), ps.end());
  };
  if (!model.base.frozen) append(model.base.parameters());
  if (!model.emotion_head.frozen) append(model.emotion_head.parameters());
  if (!model.identity_head.frozen) append(model.identity_head.parameters());
  return out;
}

// --- persistence -----------------------------------------------------------

namespace {

std::vector<NamedTensor> named_base(const ConvBase& base) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    out.push_back({"conv" + std::to_string(i) + ".kernel", base.layers[i].kernel});
    out.push_back({"conv" + std::to_string(i) + ".bias", base.layers[i].bias});
  }
  return out;
}

std::vector<NamedTensor> named_head(const std::string& prefix, const Head& head) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    out.push_back({prefix + ".fc" + std::to_string(i) + ".weight", head.layers[i].weight});
    out.push_back({prefix + ".fc" + std::to_string(i) + ".bias", head.layers[i].bias});
  }
  return out;
}

}  // namespace

void save_model(const std::filesystem::path& directory, const ModelConfig& config,
                const ConvBase& base, const std::vector<std::pair<std::string, const Head*>>& heads) {
  std::filesystem::create_directories(directory);
  std::vector<NamedTensor> tensors = named_base(base);
  ordered_json manifest;
  manifest["input_size"] = config.input_size;
  manifest["conv_channels"] = config.conv_channels;
  manifest["fc_hidden"] = config.fc_hidden;
  manifest["seed"] = config.seed;
  manifest["heads"] = ordered_json::object();
  for (const auto& [name, head] : heads) {
    manifest["heads"][name] = head->num_classes;
    auto named = named_head(name, *head);
    tensors.insert(tensors.end(), named.begin(), named.end());
  }
  save_weights(directory, tensors);
  std::ofstream out(directory / "model.json", std::ios::trunc);
  if (!out) throw DataError("save_model: cannot open " + (directory / "model.json").string());
  out << manifest.dump(2) << "\n";
}

LoadedModel load_model(const std::filesystem::path& directory) {
  std::ifstream in(directory / "model.json");
  if (!in) throw DataError("load_model: missing " + (directory / "model.json").string());
  ordered_json manifest;
  try {
    in >> manifest;
  } catch (const std::exception& e) {
    throw DataError("load_model: malformed model.json: " + std::string(e.what()));
  }

  LoadedModel loaded;
  loaded.config.input_size = manifest.at("input_size").get<int>();
  loaded.config.conv_channels = manifest.at("conv_channels").get<std::array<int, 3>>();
  loaded.config.fc_hidden = manifest.at("fc_hidden").get<std::array<int, 2>>();
  loaded.config.seed = manifest.value("seed", 0ull);
  loaded.base = build_conv_base(loaded.config, 0);

  std::map<std::string, Tensor> by_name;
  for (NamedTensor& nt : load_weights(directory)) by_name.emplace(nt.name, nt.tensor);

  auto fetch = [&](const std::string& name) -> Tensor {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("load_model: tensor '" + name + "' missing from weights");
    Tensor t = it->second;
    t.set_requires_grad(true);
    return t;
  };

  for (std::size_t i = 0; i < loaded.base.layers.size(); ++i) {
    loaded.base.layers[i].kernel = fetch("conv" + std::to_string(i) + ".kernel");
    loaded.base.layers[i].bias = fetch("conv" + std::to_string(i) + ".bias");
  }
  for (const auto& [name, classes] : manifest.at("heads").items()) {
    Head head;
    head.num_classes = classes.get<int>();
    head.layers.resize(3);
    for (std::size_t i = 0; i < 3; ++i) {
      head.layers[i].weight = fetch(name + ".fc" + std::to_string(i) + ".weight");
      head.layers[i].bias = fetch(name + ".fc" + std::to_string(i) + ".bias");
    }
    loaded.heads.emplace(name, std::move(head));
  }
  return loaded;
}

}  // namespace veil
