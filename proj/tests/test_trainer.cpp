#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "veil/dataset.hpp"
#include "veil/error.hpp"
#include "veil/model.hpp"
#include "veil/ops.hpp"
#include "veil/trainer.hpp"

using namespace veil;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_size = 24;
  cfg.conv_channels = {2, 3, 4};
  cfg.fc_hidden = {10, 8};
  return cfg;
}

Dataset tiny_data(int ids = 4, int emotions = 3, int per_cell = 4, std::uint64_t seed = 11) {
  SyntheticConfig cfg;
  cfg.num_identities = ids;
  cfg.num_emotions = emotions;
  cfg.images_per_cell = per_cell;
  cfg.image_size = 24;
  cfg.seed = seed;
  return generate_synthetic(cfg);
}

Split whole_as_train(const Dataset& data) {
  Split split;
  for (std::size_t i = 0; i < data.size(); ++i) split.train.push_back(static_cast<int>(i));
  return split;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs_init = 2;
  cfg.epochs_adv = 1;
  cfg.epochs_refit = 2;
  cfg.epochs_probe = 4;
  cfg.learning_rate = 0.01;  // narrow test nets die under hot steps
  cfg.momentum = 0.5;
  cfg.batch_size = 8;
  cfg.iterations = 2;
  cfg.val_fraction = 0.0;
  cfg.seed = 99;
  return cfg;
}

bool params_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].values() != b[i].values()) return false;
  }
  return true;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  for (const Tensor& p : params) out.push_back(p.values());
  return out;
}

bool matches(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].values() != snap[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("alpha=0 multi-task init reproduces emotion-only training bitwise") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.alpha = 0.0;

  HybridModel multitask = build_hybrid(tiny_model(), 3, 4, 5);
  HybridModel single = build_hybrid(tiny_model(), 3, 4, 5);
  auto identity_before = snapshot(multitask.identity_head.parameters());

  multitask_init(multitask, data, split, cfg);
  train_single_task(single.base, single.emotion_head, data, split, Task::Emotion, cfg);

  CHECK(params_equal(multitask.base.parameters(), single.base.parameters()));
  CHECK(params_equal(multitask.emotion_head.parameters(), single.emotion_head.parameters()));
  // the zero-weighted identity loss leaves the identity head untouched
  CHECK(matches(multitask.identity_head.parameters(), identity_before));
}

TEST_CASE("lr=0 training leaves accuracies at untrained levels") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.learning_rate = 0.0;

  ConvBase base = build_conv_base(tiny_model(), 7);
  Head head = build_head(tiny_model(), 3, 8);
  const double before = accuracy(base, head, data, split.train, Task::Emotion);
  train_single_task(base, head, data, split, Task::Emotion, cfg);
  CHECK(accuracy(base, head, data, split.train, Task::Emotion) == before);
}

TEST_CASE("single-class dataset trains to 100% accuracy") {
  Dataset data = tiny_data();
  for (LabeledImage& img : data) img.emotion = 0;
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();

  ConvBase base = build_conv_base(tiny_model(), 7);
  Head head = build_head(tiny_model(), 2, 8);
  train_single_task(base, head, data, split, Task::Emotion, cfg);
  CHECK(accuracy(base, head, data, split.train, Task::Emotion) == 1.0);
}

TEST_CASE("label/head width mismatch is rejected") {
  Dataset data = tiny_data();  // 4 identities
  Split split = whole_as_train(data);
  ConvBase base = build_conv_base(tiny_model(), 7);
  Head head = build_head(tiny_model(), 3, 8);  // too narrow for 4 identities
  CHECK_THROWS_AS(train_single_task(base, head, data, split, Task::Identity, quick_config()),
                  ConfigError);
}

TEST_CASE("protocol errors: probing or refitting with wrong freeze state") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();

  ConvBase base = build_conv_base(tiny_model(), 7);
  Head head = build_head(tiny_model(), 4, 8);
  CHECK_THROWS_AS(finetune_head_frozen_base(base, head, data, split, Task::Identity, cfg, 1),
                  ProtocolError);

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 9);
  CHECK_THROWS_AS(adversarial_phase(model, data, split, cfg, 1), ProtocolError);

  set_frozen(model, ParamGroup::IdentityHead, true);
  set_frozen(model, ParamGroup::Base, true);
  CHECK_THROWS_AS(adversarial_phase(model, data, split, cfg, 1), ProtocolError);

  set_frozen(model, ParamGroup::Base, false);
  set_frozen(model, ParamGroup::IdentityHead, false);
  CHECK_THROWS_AS(identity_refit_phase(model, data, split, cfg, 1), ProtocolError);

  set_frozen(model, ParamGroup::Base, true);
  set_frozen(model, ParamGroup::EmotionHead, true);
  set_frozen(model, ParamGroup::IdentityHead, true);
  CHECK_THROWS_AS(identity_refit_phase(model, data, split, cfg, 1), ProtocolError);
}

TEST_CASE("adversarial objective gradient equals grad(L_e) - beta*grad(L_i)") {
  Dataset data = tiny_data();
  HybridModel model = build_hybrid(tiny_model(), 3, 4, 13);
  const double beta = 0.7;
  const int batch = 8;

  auto base_params = model.base.parameters();
  auto all_params = trainable_parameters(model);

  // combined objective, one backward per sample
  for (Tensor& p : all_params) p.zero_grad();
  for (int i = 0; i < batch; ++i) {
    const LabeledImage& img = data[static_cast<std::size_t>(i * 3)];
    Tensor features = model.base.forward(to_tensor(img));
    Tensor loss = add(cross_entropy(model.emotion_head.forward(features), img.emotion),
                      scale(cross_entropy(model.identity_head.forward(features), img.identity),
                            -beta));
    backward(scale(loss, 1.0 / batch));
  }
  std::vector<std::vector<double>> combined;
  for (Tensor& p : base_params) combined.push_back(p.grad());

  // two independent backward passes
  for (Tensor& p : all_params) p.zero_grad();
  for (int i = 0; i < batch; ++i) {
    const LabeledImage& img = data[static_cast<std::size_t>(i * 3)];
    Tensor features = model.base.forward(to_tensor(img));
    backward(scale(cross_entropy(model.emotion_head.forward(features), img.emotion), 1.0 / batch));
  }
  std::vector<std::vector<double>> grad_e;
  for (Tensor& p : base_params) grad_e.push_back(p.grad());

  for (Tensor& p : all_params) p.zero_grad();
  for (int i = 0; i < batch; ++i) {
    const LabeledImage& img = data[static_cast<std::size_t>(i * 3)];
    Tensor features = model.base.forward(to_tensor(img));
    backward(scale(cross_entropy(model.identity_head.forward(features), img.identity), 1.0 / batch));
  }
  std::vector<std::vector<double>> grad_i;
  for (Tensor& p : base_params) grad_i.push_back(p.grad());

  for (std::size_t p = 0; p < combined.size(); ++p) {
    for (std::size_t j = 0; j < combined[p].size(); ++j) {
      CHECK(std::abs(combined[p][j] - (grad_e[p][j] - beta * grad_i[p][j])) < 1e-10);
    }
  }
}

TEST_CASE("adversarial phase: frozen identity head constant, base moves") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 17);
  multitask_init(model, data, split, cfg);

  set_frozen(model, ParamGroup::IdentityHead, true);
  auto id_snap = snapshot(model.identity_head.parameters());
  auto base_snap = snapshot(model.base.parameters());
  AdvLosses losses = adversarial_phase(model, data, split, cfg, 1);
  CHECK(matches(model.identity_head.parameters(), id_snap));
  CHECK_FALSE(matches(model.base.parameters(), base_snap));
  CHECK(std::isfinite(losses.emotion));
  CHECK(std::isfinite(losses.identity));
}

TEST_CASE("identity refit: base and emotion head constant, returns accuracy") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 19);
  multitask_init(model, data, split, cfg);

  set_frozen(model, ParamGroup::Base, true);
  set_frozen(model, ParamGroup::EmotionHead, true);
  auto base_snap = snapshot(model.base.parameters());
  auto emo_snap = snapshot(model.emotion_head.parameters());
  auto id_snap = snapshot(model.identity_head.parameters());

  const double acc = identity_refit_phase(model, data, split, cfg, 1);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(matches(model.base.parameters(), base_snap));
  CHECK(matches(model.emotion_head.parameters(), emo_snap));
  CHECK_FALSE(matches(model.identity_head.parameters(), id_snap));  // fresh reinit + training

  // the adversary never degenerates to all-zero weights
  bool any_nonzero = false;
  for (const Tensor& p : model.identity_head.parameters()) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.data()[i] != 0.0) any_nonzero = true;
    }
  }
  CHECK(any_nonzero);
}

TEST_CASE("warm reinit policy skips the re-initialization") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.reinit_policy = TrainConfig::ReinitPolicy::Warm;
  cfg.learning_rate = 0.0;  // isolate the reinit effect

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 23);
  set_frozen(model, ParamGroup::Base, true);
  set_frozen(model, ParamGroup::EmotionHead, true);
  auto id_snap = snapshot(model.identity_head.parameters());
  identity_refit_phase(model, data, split, cfg, 1);
  CHECK(matches(model.identity_head.parameters(), id_snap));

  cfg.reinit_policy = TrainConfig::ReinitPolicy::Fresh;
  identity_refit_phase(model, data, split, cfg, 1);
  CHECK_FALSE(matches(model.identity_head.parameters(), id_snap));
}

TEST_CASE("probe on a constant-output base lands at chance") {
  Dataset data = tiny_data(4, 3, 45);  // 540 images, balanced
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.epochs_probe = 6;

  ConvBase base = build_conv_base(tiny_model(), 31);
  for (Tensor& p : base.parameters()) {
    for (std::size_t i = 0; i < p.size(); ++i) p.data()[i] = 0.0;
  }
  base.frozen = true;
  Head probe = train_probe_head(base, data, split, Task::Identity, tiny_model(), cfg);
  const double acc = accuracy(base, probe, data, split.train, Task::Identity);
  CHECK(acc > 0.25 - 0.05);
  CHECK(acc < 0.25 + 0.05);
}

TEST_CASE("probe training is deterministic") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();

  ConvBase base = build_conv_base(tiny_model(), 37);
  base.frozen = true;
  Head a = train_probe_head(base, data, split, Task::Identity, tiny_model(), cfg);
  Head b = train_probe_head(base, data, split, Task::Identity, tiny_model(), cfg);
  CHECK(params_equal(a.parameters(), b.parameters()));
}

TEST_CASE("divergence guard") {
  CHECK_THROWS_AS(check_divergence(2e6, "phase"), DivergenceError);
  CHECK_THROWS_AS(check_divergence(-2e6, "phase"), DivergenceError);
  CHECK_THROWS_AS(check_divergence(std::nan(""), "phase"), DivergenceError);
  CHECK_NOTHROW(check_divergence(5.0, "phase"));
}

TEST_CASE("run_algorithm1 with T=0 equals plain multi-task init") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.iterations = 0;

  HybridModel looped = build_hybrid(tiny_model(), 3, 4, 41);
  HybridModel plain = build_hybrid(tiny_model(), 3, 4, 41);
  LoopTrace trace = run_algorithm1(looped, data, split, cfg);
  multitask_init(plain, data, split, cfg);

  CHECK(trace.rows.empty());
  CHECK(params_equal(looped.base.parameters(), plain.base.parameters()));
  CHECK(params_equal(looped.emotion_head.parameters(), plain.emotion_head.parameters()));
  CHECK(params_equal(looped.identity_head.parameters(), plain.identity_head.parameters()));
}

TEST_CASE("run_algorithm1 produces a complete trace and clears freeze flags") {
  Dataset data = tiny_data();
  FoldPlan plan = make_group_folds(data, 4, 2);
  Split split = make_split(data, plan, 0, 0.15, 99);
  TrainConfig cfg = quick_config();
  cfg.iterations = 2;

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 43);
  LoopTrace trace = run_algorithm1(model, data, split, cfg);
  REQUIRE(trace.rows.size() == 2);
  for (std::size_t i = 0; i < trace.rows.size(); ++i) {
    CHECK(trace.rows[i].iteration == static_cast<int>(i) + 1);
    CHECK(trace.rows[i].acc_emotion_val >= 0.0);
    CHECK(trace.rows[i].acc_emotion_val <= 1.0);
    CHECK(trace.rows[i].acc_identity_refit_val >= 0.0);
    CHECK(trace.rows[i].acc_identity_refit_val <= 1.0);
    CHECK(std::isfinite(trace.rows[i].loss_emotion));
    CHECK(std::isfinite(trace.rows[i].loss_identity));
  }
  CHECK_FALSE(model.base.frozen);
  CHECK_FALSE(model.emotion_head.frozen);
  CHECK_FALSE(model.identity_head.frozen);
}

TEST_CASE("run_algorithm1 is deterministic per seed") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.iterations = 1;

  HybridModel a = build_hybrid(tiny_model(), 3, 4, 47);
  HybridModel b = build_hybrid(tiny_model(), 3, 4, 47);
  run_algorithm1(a, data, split, cfg);
  run_algorithm1(b, data, split, cfg);
  CHECK(params_equal(a.base.parameters(), b.base.parameters()));
  CHECK(params_equal(a.identity_head.parameters(), b.identity_head.parameters()));
}

TEST_CASE("early stop halts after the patience plateau") {
  Dataset data = tiny_data();
  Split split = whole_as_train(data);
  TrainConfig cfg = quick_config();
  cfg.iterations = 10;
  cfg.early_stop = true;
  cfg.early_stop_margin = 1.0;  // any accuracy counts as plateau
  cfg.early_stop_patience = 2;

  HybridModel model = build_hybrid(tiny_model(), 3, 4, 53);
  LoopTrace trace = run_algorithm1(model, data, split, cfg);
  CHECK(trace.rows.size() == 2);
}

TEST_CASE("loop trace CSV round trip") {
  LoopTrace trace;
  trace.rows.push_back({1, 1.25, 0.5, 0.875, 0.3333333333333333});
  trace.rows.push_back({2, 1.0, 0.75, 0.9, 0.25});
  LoopTrace parsed = LoopTrace::from_csv(trace.to_csv());
  REQUIRE(parsed.rows.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(parsed.rows[i].iteration == trace.rows[i].iteration);
    CHECK(parsed.rows[i].loss_emotion == trace.rows[i].loss_emotion);
    CHECK(parsed.rows[i].loss_identity == trace.rows[i].loss_identity);
    CHECK(parsed.rows[i].acc_emotion_val == trace.rows[i].acc_emotion_val);
    CHECK(parsed.rows[i].acc_identity_refit_val == trace.rows[i].acc_identity_refit_val);
  }
  CHECK_THROWS_AS(LoopTrace::from_csv("nope\n1,2,3,4,5\n"), DataError);
}

TEST_CASE("make_split: partition, group awareness, and validation") {
  Dataset data = tiny_data(4, 3, 6);
  AugmentConfig acfg;
  acfg.target_size = 150;
  Dataset big = expand_corpus(data, acfg, 3);
  FoldPlan plan = make_group_folds(big, 4, 7);

  Split split = make_split(big, plan, 1, 0.15, 5);
  CHECK(split.fold == 1);
  CHECK(split.train.size() + split.val.size() + split.test.size() == big.size());

  std::set<int> train_groups, val_groups, test_groups;
  for (int i : split.train) train_groups.insert(big[static_cast<std::size_t>(i)].group_id);
  for (int i : split.val) val_groups.insert(big[static_cast<std::size_t>(i)].group_id);
  for (int i : split.test) test_groups.insert(big[static_cast<std::size_t>(i)].group_id);
  for (int gid : test_groups) {
    CHECK_FALSE(train_groups.count(gid));
    CHECK_FALSE(val_groups.count(gid));
  }
  for (int gid : val_groups) CHECK_FALSE(train_groups.count(gid));

  // test groups are exactly the fold's groups
  std::set<int> plan_groups(plan.fold_groups[1].begin(), plan.fold_groups[1].end());
  CHECK(test_groups == plan_groups);

  CHECK_THROWS_AS(make_split(big, plan, 9, 0.1, 5), ConfigError);

  // a dataset not covered by the plan is rejected
  Dataset other = tiny_data(4, 3, 8, 123);
  CHECK_THROWS_AS(make_split(other, plan, 0, 0.1, 5), DataError);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = quick_config();
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config();
  cfg.epochs_adv = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config();
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config();
  cfg.val_fraction = 0.9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config();
  cfg.iterations = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
