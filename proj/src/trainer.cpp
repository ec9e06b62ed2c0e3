#include "veil/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "veil/ops.hpp"
#include "veil/rng.hpp"

namespace veil {

namespace {

// Stream tags decorrelate the phases of one run; multitask init shares the
// emotion-task tag so that alpha=0 reproduces emotion-only training exactly.
enum StreamTag : std::uint64_t {
  kStreamJoint = 1,
  kStreamAdv = 2,
  kStreamRefit = 3,
  kStreamReinit = 4,
  kStreamProbe = 5,
  kStreamValCarve = 6,
};

std::uint64_t stream_seed(const TrainConfig& cfg, int fold, int iteration, StreamTag tag,
                          std::uint64_t extra = 0) {
  return mix_seed({cfg.seed, static_cast<std::uint64_t>(fold), static_cast<std::uint64_t>(iteration),
                   static_cast<std::uint64_t>(tag), extra});
}

// Mini-batch SGD over per-sample scalar losses. The loss builder returns an
// unscaled loss node; the mean is formed by scaling each sample's backward
// seed. zero_list covers every parameter that can receive gradients,
// including frozen ones, so stale gradients never leak across batches.
template <typename LossFn>
double run_epoch(std::vector<int>& order, Rng& rng, int batch_size,
                 const std::vector<Tensor>& step_params, std::vector<Tensor>& zero_list,
                 OptimizerState& opt, LossFn&& make_loss, const char* divergence_phase = nullptr) {
  rng.shuffle(order);
  double epoch_loss = 0.0;
  std::size_t seen = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    const double inv = 1.0 / static_cast<double>(end - start);
    for (Tensor& p : zero_list) p.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t i = start; i < end; ++i) {
      Tensor loss = make_loss(order[i]);
      batch_loss += loss.value();
      backward(scale(loss, inv));
    }
    batch_loss *= inv;
    if (divergence_phase != nullptr) check_divergence(batch_loss, divergence_phase);
    sgd_step(step_params, opt);
    epoch_loss += batch_loss * static_cast<double>(end - start);
    seen += end - start;
  }
  return seen > 0 ? epoch_loss / static_cast<double>(seen) : 0.0;
}

std::vector<Tensor> collect(std::initializer_list<std::vector<Tensor>> groups) {
  std::vector<Tensor> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

void train_head_on_features(Head& head, const std::vector<Tensor>& features,
                            const std::vector<int>& labels, int epochs, const TrainConfig& cfg,
                            std::uint64_t seed) {
  Rng rng(seed);
  OptimizerState opt(cfg.learning_rate, cfg.momentum);
  std::vector<Tensor> params = head.parameters();
  std::vector<int> order(features.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int e = 0; e < epochs; ++e) {
    run_epoch(order, rng, cfg.batch_size, params, params, opt, [&](int i) {
      return cross_entropy(head.forward(features[static_cast<std::size_t>(i)]),
                           labels[static_cast<std::size_t>(i)]);
    });
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("TrainConfig: alpha must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("TrainConfig: beta must be finite and >= 0");
  if (iterations < 0) throw ConfigError("TrainConfig: iterations must be >= 0");
  if (epochs_init < 1 || epochs_adv < 1 || epochs_refit < 1 || epochs_probe < 1) {
    throw ConfigError("TrainConfig: epoch counts must be positive");
  }
  if (learning_rate < 0.0) throw ConfigError("TrainConfig: learning_rate must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("TrainConfig: momentum must be in [0,1)");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (val_fraction < 0.0 || val_fraction > 0.5) throw ConfigError("TrainConfig: val_fraction must be in [0,0.5]");
  if (early_stop_patience < 1) throw ConfigError("TrainConfig: early_stop_patience must be >= 1");
  if (early_stop_margin < 0.0) throw ConfigError("TrainConfig: early_stop_margin must be >= 0");
}

void check_divergence(double loss, const std::string& phase) {
  if (!std::isfinite(loss) || std::abs(loss) > kDivergenceLimit) {
    throw DivergenceError(phase + ": batch loss " + std::to_string(loss) + " exceeded " +
                              std::to_string(kDivergenceLimit) + ", aborting",
                          loss);
  }
}

std::string LoopTrace::to_csv() const {
  std::string out = "t,L_e,L_i,acc_e_val,acc_i_refit_val\n";
  char line[160];
  for (const LoopTraceRow& r : rows) {
    std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.17g\n", r.iteration, r.loss_emotion,
                  r.loss_identity, r.acc_emotion_val, r.acc_identity_refit_val);
    out += line;
  }
  return out;
}

LoopTrace LoopTrace::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "t,L_e,L_i,acc_e_val,acc_i_refit_val") {
    throw DataError("LoopTrace::from_csv: bad header");
  }
  LoopTrace trace;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LoopTraceRow r;
    if (std::sscanf(line.c_str(), "%d,%lg,%lg,%lg,%lg", &r.iteration, &r.loss_emotion,
                    &r.loss_identity, &r.acc_emotion_val, &r.acc_identity_refit_val) != 5) {
      throw DataError("LoopTrace::from_csv: bad row: " + line);
    }
    trace.rows.push_back(r);
  }
  return trace;
}

Split make_split(const Dataset& data, const FoldPlan& plan, int fold, double val_fraction,
                 std::uint64_t seed) {
  if (fold < 0 || fold >= plan.k) {
    throw ConfigError("make_split: fold " + std::to_string(fold) + " out of range for k=" +
                      std::to_string(plan.k));
  }
  std::set<int> test_groups(plan.fold_groups[static_cast<std::size_t>(fold)].begin(),
                            plan.fold_groups[static_cast<std::size_t>(fold)].end());
  std::set<int> known_groups;
  std::vector<int> train_groups;
  for (const auto& fg : plan.fold_groups) {
    for (int gid : fg) {
      known_groups.insert(gid);
    }
  }
  for (int gid : known_groups) {
    if (!test_groups.count(gid)) train_groups.push_back(gid);
  }

  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(fold), kStreamValCarve}));
  rng.shuffle(train_groups);
  std::size_t n_val_groups = 0;
  if (val_fraction > 0.0) {
    n_val_groups = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(train_groups.size()))));
  }
  std::set<int> val_groups(train_groups.begin(),
                           train_groups.begin() + static_cast<std::ptrdiff_t>(n_val_groups));

  Split split;
  split.fold = fold;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int gid = data[i].group_id;
    if (!known_groups.count(gid)) {
      throw DataError("make_split: image group " + std::to_string(gid) +
                      " is not covered by the fold plan");
    }
    if (test_groups.count(gid)) {
      split.test.push_back(static_cast<int>(i));
    } else if (val_groups.count(gid)) {
      split.val.push_back(static_cast<int>(i));
    } else {
      split.train.push_back(static_cast<int>(i));
    }
  }
  if (split.train.empty()) throw DataError("make_split: fold leaves no training images");
  return split;
}

std::vector<Tensor> featurize(const ConvBase& base, const Dataset& data,
                              const std::vector<int>& indices) {
  NoGradGuard untaped;
  std::vector<Tensor> out;
  out.reserve(indices.size());
  for (int idx : indices) {
    out.push_back(base.forward(to_tensor(data[static_cast<std::size_t>(idx)])));
  }
  return out;
}

void train_single_task(ConvBase& base, Head& head, const Dataset& data, const Split& split,
                       Task task, const TrainConfig& config) {
  config.validate();
  if (base.frozen || head.frozen) {
    throw ProtocolError("train_single_task: joint training requires unfrozen base and head");
  }
  if (num_classes(data, task) > head.num_classes) {
    throw ConfigError("train_single_task: dataset has more classes than the head width " +
                      std::to_string(head.num_classes));
  }

  Rng rng(stream_seed(config, split.fold, 0, kStreamJoint, static_cast<std::uint64_t>(task)));
  OptimizerState opt(config.learning_rate, config.momentum);
  std::vector<Tensor> params = collect({base.parameters(), head.parameters()});
  std::vector<int> order = split.train;
  for (int e = 0; e < config.epochs_init; ++e) {
    run_epoch(order, rng, config.batch_size, params, params, opt, [&](int i) {
      const LabeledImage& img = data[static_cast<std::size_t>(i)];
      return cross_entropy(forward(base, head, to_tensor(img)), label_of(img, task));
    });
  }
}

void finetune_head_frozen_base(const ConvBase& base, Head& head, const Dataset& data,
                               const Split& split, Task task, const TrainConfig& config,
                               int epochs) {
  config.validate();
  if (!base.frozen) {
    throw ProtocolError("finetune_head_frozen_base: base must be frozen before probing");
  }
  if (head.frozen) throw ProtocolError("finetune_head_frozen_base: head is frozen");

  std::vector<Tensor> features = featurize(base, data, split.train);
  std::vector<int> labels;
  labels.reserve(split.train.size());
  for (int idx : split.train) {
    labels.push_back(label_of(data[static_cast<std::size_t>(idx)], task));
  }
  train_head_on_features(head, features, labels, epochs, config,
                         stream_seed(config, split.fold, 0, kStreamProbe,
                                     static_cast<std::uint64_t>(task)));
}

Head train_probe_head(const ConvBase& frozen_base, const Dataset& data, const Split& split,
                      Task task, const ModelConfig& model_config, const TrainConfig& config) {
  // Seed and batch order depend only on (seed, fold, task): probing two
  // different bases differs in nothing but the base.
  Head head = build_head(model_config, num_classes(data, task),
                         stream_seed(config, split.fold, 0, kStreamProbe,
                                     0x4EAD0000ull + static_cast<std::uint64_t>(task)));
  finetune_head_frozen_base(frozen_base, head, data, split, task, config, config.epochs_probe);
  return head;
}

void multitask_init(HybridModel& model, const Dataset& data, const Split& split,
                    const TrainConfig& config) {
  config.validate();
  if (model.base.frozen || model.emotion_head.frozen || model.identity_head.frozen) {
    throw ProtocolError("multitask_init: all parameter groups must be unfrozen");
  }

  Rng rng(stream_seed(config, split.fold, 0, kStreamJoint,
                      static_cast<std::uint64_t>(Task::Emotion)));
  OptimizerState opt(config.learning_rate, config.momentum);
  std::vector<Tensor> params = collect({model.base.parameters(), model.emotion_head.parameters(),
                                        model.identity_head.parameters()});
  std::vector<int> order = split.train;
  for (int e = 0; e < config.epochs_init; ++e) {
    run_epoch(order, rng, config.batch_size, params, params, opt, [&](int i) {
      const LabeledImage& img = data[static_cast<std::size_t>(i)];
      Tensor features = model.base.forward(to_tensor(img));
      Tensor loss_e = cross_entropy(model.emotion_head.forward(features), img.emotion);
      Tensor loss_i = cross_entropy(model.identity_head.forward(features), img.identity);
      return add(loss_e, scale(loss_i, config.alpha));
    });
  }
}

AdvLosses adversarial_phase(HybridModel& model, const Dataset& data, const Split& split,
                            const TrainConfig& config, int iteration) {
  config.validate();
  if (!model.identity_head.frozen) {
    throw ProtocolError("adversarial_phase: identity head must be frozen");
  }
  if (model.base.frozen || model.emotion_head.frozen) {
    throw ProtocolError("adversarial_phase: base and emotion head must be trainable");
  }

  Rng rng(stream_seed(config, split.fold, iteration, kStreamAdv));
  OptimizerState opt(config.learning_rate, config.momentum);
  std::vector<Tensor> step_params = collect({model.base.parameters(), model.emotion_head.parameters()});
  // the frozen identity head still accumulates gradients; include it in the
  // per-batch zero list
  std::vector<Tensor> zero_list = collect({model.base.parameters(), model.emotion_head.parameters(),
                                           model.identity_head.parameters()});
  std::vector<int> order = split.train;

  AdvLosses avg;
  double loss_e_sum = 0.0, loss_i_sum = 0.0;
  std::size_t samples = 0;
  for (int e = 0; e < config.epochs_adv; ++e) {
    run_epoch(
        order, rng, config.batch_size, step_params, zero_list, opt,
        [&](int i) {
          const LabeledImage& img = data[static_cast<std::size_t>(i)];
          Tensor features = model.base.forward(to_tensor(img));
          Tensor loss_e = cross_entropy(model.emotion_head.forward(features), img.emotion);
          Tensor loss_i = cross_entropy(model.identity_head.forward(features), img.identity);
          loss_e_sum += loss_e.value();
          loss_i_sum += loss_i.value();
          ++samples;
          return add(loss_e, scale(loss_i, -config.beta));
        },
        "adversarial_phase");
  }
  if (samples > 0) {
    avg.emotion = loss_e_sum / static_cast<double>(samples);
    avg.identity = loss_i_sum / static_cast<double>(samples);
  }
  return avg;
}

double identity_refit_phase(HybridModel& model, const Dataset& data, const Split& split,
                            const TrainConfig& config, int iteration) {
  config.validate();
  if (!model.base.frozen || !model.emotion_head.frozen) {
    throw ProtocolError("identity_refit_phase: base and emotion head must be frozen");
  }
  if (model.identity_head.frozen) {
    throw ProtocolError("identity_refit_phase: identity head must be trainable");
  }

  if (config.reinit_policy == TrainConfig::ReinitPolicy::Fresh) {
    reinit_head(model, ParamGroup::IdentityHead,
                stream_seed(config, split.fold, iteration, kStreamReinit));
  }

  std::vector<Tensor> features = featurize(model.base, data, split.train);
  std::vector<int> labels;
  labels.reserve(split.train.size());
  for (int idx : split.train) labels.push_back(data[static_cast<std::size_t>(idx)].identity);
  train_head_on_features(model.identity_head, features, labels, config.epochs_refit, config,
                         stream_seed(config, split.fold, iteration, kStreamRefit));

  const std::vector<int>& eval_idx = split.val.empty() ? split.train : split.val;
  return accuracy(model.base, model.identity_head, data, eval_idx, Task::Identity);
}

LoopTrace run_algorithm1(HybridModel& model, const Dataset& data, const Split& split,
                         const TrainConfig& config) {
  config.validate();
  multitask_init(model, data, split, config);

  LoopTrace trace;
  const double chance = 1.0 / static_cast<double>(model.identity_head.num_classes);
  int plateau = 0;
  const std::vector<int>& eval_idx = split.val.empty() ? split.train : split.val;

  for (int t = 1; t <= config.iterations; ++t) {
    set_frozen(model, ParamGroup::IdentityHead, true);
    set_frozen(model, ParamGroup::Base, false);
    set_frozen(model, ParamGroup::EmotionHead, false);
    AdvLosses losses;
    try {
      losses = adversarial_phase(model, data, split, config, t);
    } catch (DivergenceError& diverged) {
      diverged.partial_trace = trace;
      throw;
    }

    set_frozen(model, ParamGroup::Base, true);
    set_frozen(model, ParamGroup::EmotionHead, true);
    set_frozen(model, ParamGroup::IdentityHead, false);
    const double acc_identity = identity_refit_phase(model, data, split, config, t);
    const double acc_emotion = accuracy(model.base, model.emotion_head, data, eval_idx, Task::Emotion);

    trace.rows.push_back({t, losses.emotion, losses.identity, acc_emotion, acc_identity});

    if (config.early_stop) {
      plateau = acc_identity <= chance + config.early_stop_margin ? plateau + 1 : 0;
      if (plateau >= config.early_stop_patience) break;
    }
  }

  set_frozen(model, ParamGroup::Base, false);
  set_frozen(model, ParamGroup::EmotionHead, false);
  set_frozen(model, ParamGroup::IdentityHead, false);
  return trace;
}

}  // namespace veil
