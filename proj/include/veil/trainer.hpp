#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "veil/dataset.hpp"
#include "veil/error.hpp"
#include "veil/model.hpp"

namespace veil {

struct TrainConfig {
  double alpha = 0.5;  // multi-task init weight on the identity loss
  double beta = 1.0;   // adversarial weight on the negated identity loss
  int iterations = 20;  // outer adversarial iterations (T)

  int epochs_init = 30;
  int epochs_adv = 1;
  int epochs_refit = 3;
  int epochs_probe = 30;

  double learning_rate = 0.02;
  double momentum = 0.9;
  int batch_size = 32;

  enum class ReinitPolicy { Fresh, Warm };
  ReinitPolicy reinit_policy = ReinitPolicy::Fresh;

  // optional plateau stop: refit identity accuracy <= chance + margin for
  // `patience` consecutive iterations
  bool early_stop = false;
  int early_stop_patience = 3;
  double early_stop_margin = 0.05;

  double val_fraction = 0.1;  // group-aware carve from the training side
  std::uint64_t seed = 0;

  void validate() const;
};

struct LoopTraceRow {
  int iteration = 0;
  double loss_emotion = 0.0;
  double loss_identity = 0.0;
  double acc_emotion_val = 0.0;
  double acc_identity_refit_val = 0.0;
};

// Per-iteration record of the adversarial loop; this is where the stopping
// condition and the degradation of the refit adversary are observed.
struct LoopTrace {
  std::vector<LoopTraceRow> rows;

  std::string to_csv() const;
  static LoopTrace from_csv(const std::string& text);
};

// Adversarial objectives are unbounded below in principle; the loss clamp
// bounds them in practice and this guard converts any escape into a
// diagnosable error instead of a silent garbage run.
struct DivergenceError : Error {
  DivergenceError(const std::string& msg, double loss_value) : Error(msg), loss(loss_value) {}
  double loss = 0.0;
  LoopTrace partial_trace;  // attached when propagating out of the loop
};

inline constexpr double kDivergenceLimit = 1e6;
void check_divergence(double loss, const std::string& phase);

// Fold-local index lists. Test images are exactly those of the fold's
// groups; val is a group-aware carve from the remaining groups and feeds
// traces and early stopping only.
struct Split {
  int fold = 0;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

Split make_split(const Dataset& data, const FoldPlan& plan, int fold, double val_fraction,
                 std::uint64_t seed);

// Base outputs for the given indices, computed untaped (valid only while
// the base is not updated).
std::vector<Tensor> featurize(const ConvBase& base, const Dataset& data,
                              const std::vector<int>& indices);

// Joint base+head cross-entropy training (the Emotion / Face baselines).
void train_single_task(ConvBase& base, Head& head, const Dataset& data, const Split& split,
                       Task task, const TrainConfig& config);

// Head-only training on a frozen base (probes and the identity refit).
// Throws ProtocolError when the base is not marked frozen.
void finetune_head_frozen_base(const ConvBase& base, Head& head, const Dataset& data,
                               const Split& split, Task task, const TrainConfig& config,
                               int epochs);

// Fresh probe head with a base-independent seed stream: probing two
// different bases uses identical head init, batch order, and epochs.
Head train_probe_head(const ConvBase& frozen_base, const Dataset& data, const Split& split,
                      Task task, const ModelConfig& model_config, const TrainConfig& config);

// min over {W_c, W_e, W_i} of L_e + alpha * L_i
void multitask_init(HybridModel& model, const Dataset& data, const Split& split,
                    const TrainConfig& config);

struct AdvLosses {
  double emotion = 0.0;
  double identity = 0.0;
};

// min over {W_c, W_e} of L_e - beta * L_i with W_i frozen; gradients flow
// through the frozen identity head into the base.
AdvLosses adversarial_phase(HybridModel& model, const Dataset& data, const Split& split,
                            const TrainConfig& config, int iteration);

// Re-initialize (policy permitting) and retrain W_i on the frozen base;
// returns the adversary's held-out identity accuracy.
double identity_refit_phase(HybridModel& model, const Dataset& data, const Split& split,
                            const TrainConfig& config, int iteration);

// Multi-task init followed by T iterations of adversarial phase + identity
// refit. The model's base ends up as the learned transformation; all freeze
// flags are cleared on return.
LoopTrace run_algorithm1(HybridModel& model, const Dataset& data, const Split& split,
                         const TrainConfig& config);

}  // namespace veil
