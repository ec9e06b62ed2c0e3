#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "veil/rng.hpp"

namespace veil {

enum class Task { Emotion, Identity };

// Grayscale image with both label tracks. group_id identifies the original
// pre-augmentation image; every augmented copy keeps its group.
struct LabeledImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;  // row-major, clamped to [0,1]
  int emotion = 0;
  int identity = 0;
  int group_id = 0;
};

using Dataset = std::vector<LabeledImage>;

inline int label_of(const LabeledImage& img, Task task) {
  return task == Task::Emotion ? img.emotion : img.identity;
}

// Number of classes for a task, after validating that labels are a
// contiguous 0..K-1 set.
int num_classes(const Dataset& data, Task task);

struct FactorRange {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
};

// Synthetic face-proxy generator configuration. Identity factors (face
// geometry) and emotion factors (expression geometry) are disjoint by
// construction, so either label is recoverable independently of the other.
struct SyntheticConfig {
  int num_identities = 10;
  int num_emotions = 4;
  int images_per_cell = 30;
  int image_size = 48;

  // identity factors: face shape and feature placement, in pixels
  FactorRange face_rx{13.0, 19.0};
  FactorRange face_ry{16.5, 21.5};
  FactorRange eye_dx{5.0, 9.0};   // half eye spacing
  FactorRange eye_y{18.0, 24.0};  // eye row
  FactorRange nose_len{3.0, 7.0};

  // emotion factors: expression shape; class prototypes are spread over
  // these ranges
  FactorRange mouth_curve{-3.0, 3.0};
  FactorRange mouth_open{0.6, 3.4};
  FactorRange brow_tilt{-0.4, 0.4};

  double jitter = 0.25;        // per-image geometric jitter (pixels / radians*0.12)
  double center_jitter = 0.8;  // whole-face translation jitter (pixels)
  std::uint64_t seed = 7;
};

struct AugmentConfig {
  double rotation_degrees = 12.0;  // uniform in +-range
  double flip_probability = 0.5;
  double noise_sigma = 0.03;  // additive gaussian, then clamp
  int target_size = 0;        // expand_corpus output size
};

// k-fold split over groups: all augmented descendants of one original image
// land in the same fold.
struct FoldPlan {
  int k = 0;
  std::vector<std::vector<int>> fold_groups;
  std::string stratification;  // "identity_emotion" or "identity_only"
};

Dataset generate_synthetic(const SyntheticConfig& config);

// Rotation about the image center with bilinear interpolation; uncovered
// pixels are filled with mid-gray.
LabeledImage rotate_image(const LabeledImage& image, double degrees);

// Rotation, optional horizontal flip, additive noise. Labels and group_id
// are copied verbatim.
LabeledImage augment(const LabeledImage& image, const AugmentConfig& config, Rng& rng);

// Originals retained, augmented copies appended round-robin until
// target_size; each copy draws from an independent stream of (seed, index).
Dataset expand_corpus(const Dataset& images, const AugmentConfig& config, std::uint64_t seed);

FoldPlan make_group_folds(const Dataset& images, int k, std::uint64_t seed);

// PGM (P5, maxval 255) files plus manifest.csv; quantization is the only
// loss on round trip.
void save_dataset(const Dataset& images, const std::filesystem::path& directory);
Dataset load_dataset(const std::filesystem::path& directory);

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& file);
FoldPlan load_fold_plan(const std::filesystem::path& file);

}  // namespace veil
