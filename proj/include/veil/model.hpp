#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "veil/dataset.hpp"
#include "veil/optimizer.hpp"
#include "veil/tensor.hpp"

namespace veil {

struct ModelConfig {
  int input_size = 48;  // square grayscale input
  std::array<int, 3> conv_channels{8, 16, 32};
  std::array<int, 2> fc_hidden{128, 64};
  std::uint64_t seed = 0;
};

struct ConvLayer {
  Tensor kernel;  // [C_out, C_in, 3, 3]
  Tensor bias;    // [C_out]
};

struct DenseLayer {
  Tensor weight;  // [M, N]
  Tensor bias;    // [M]
};

// Shared convolutional transformation: three conv(3x3, stride 1, valid)
// stages, each followed by relu and 2x2 max pooling. Odd spatial dims are
// cropped (drop last row/column) before pooling. The flattened output feeds
// every classification head.
class ConvBase {
 public:
  std::vector<ConvLayer> layers;
  std::vector<std::pair<int, int>> pre_pool_crop;  // (h,w) after crop; equals conv output if even
  bool frozen = false;
  int input_size = 0;
  int feature_length = 0;
  std::string shape_trace;  // e.g. "48>46>23 | 23>21>20>10 | 10>8>4"

  Tensor forward(const Tensor& image) const;
  std::vector<Tensor> parameters() const;
};

// Per-task classifier: three dense layers, relu hidden activations,
// softmax output over num_classes.
class Head {
 public:
  std::vector<DenseLayer> layers;
  bool frozen = false;
  int num_classes = 0;

  Tensor forward(const Tensor& features) const;
  std::vector<Tensor> parameters() const;
};

// Shared base with one head per task plus per-group freeze flags; the
// adversarial loop toggles the flags between phases.
struct HybridModel {
  ConvBase base;
  Head emotion_head;
  Head identity_head;
};

enum class ParamGroup { Base, EmotionHead, IdentityHead };

ConvBase build_conv_base(const ModelConfig& config, std::uint64_t rng_seed);
Head build_head(const ModelConfig& config, int num_classes, std::uint64_t rng_seed);
HybridModel build_hybrid(const ModelConfig& config, int num_emotions, int num_identities,
                         std::uint64_t rng_seed);

// head(flatten(base(image)))
Tensor forward(const ConvBase& base, const Head& head, const Tensor& image);

void set_frozen(HybridModel& model, ParamGroup group, bool frozen);
bool is_frozen(const HybridModel& model, ParamGroup group);

// Fresh He initialization of a head; the base is the learned artifact and
// cannot be re-initialized. Velocity for the group is dropped when an
// optimizer state is supplied.
void reinit_head(HybridModel& model, ParamGroup group, std::uint64_t rng_seed,
                 OptimizerState* optimizer = nullptr);

// Fraction of argmax-correct predictions over the given indices; argmax
// ties break toward the lowest class index.
double accuracy(const ConvBase& base, const Head& head, const Dataset& data,
                const std::vector<int>& indices, Task task);

Tensor to_tensor(const LabeledImage& image);

// Parameters of all unfrozen groups, in deterministic order.
std::vector<Tensor> trainable_parameters(const HybridModel& model);

// --- persistence -----------------------------------------------------------
// Weight interchange: header.json (names, shapes, byte offsets) +
// weights.bin (little-endian doubles in header order) + model.json
// (config and head class counts). Round trips are bit-exact.

void save_model(const std::filesystem::path& directory, const ModelConfig& config,
                const ConvBase& base,
                const std::vector<std::pair<std::string, const Head*>>& heads);

struct LoadedModel {
  ModelConfig config;
  ConvBase base;
  std::map<std::string, Head> heads;
};

LoadedModel load_model(const std::filesystem::path& directory);

}  // namespace veil
