#include "fixtures.hpp"
#include "recon3d/report.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>

using namespace recon3d;
using fixture::toy;

namespace {

TrainConfig toy_train_config(int steps) {
  TrainConfig c;
  c.steps = steps;
  c.lr = 1e-3;
  c.model = toy().model;
  c.teacher_enforce_threshold = false;
  return c;
}

std::vector<int> all_indices(std::size_t n) {
  std::vector<int> v(n);
  for (std::size_t k = 0; k < n; ++k) v[k] = static_cast<int>(k);
  return v;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("recon3d_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(Schedule3d, DeltaTRule) {
  EXPECT_TRUE(should_apply_3d(0, 4));
  EXPECT_TRUE(should_apply_3d(4, 4));
  EXPECT_TRUE(should_apply_3d(8, 4));
  for (long s : {1, 2, 3}) EXPECT_FALSE(should_apply_3d(s, 4));
  for (long s = 0; s < 50; ++s) EXPECT_TRUE(should_apply_3d(s, 1));
  int n = 0;
  for (long s = 0; s < 871; ++s) n += should_apply_3d(s, 4) ? 1 : 0;
  EXPECT_EQ(n, 218);
  EXPECT_THROW(should_apply_3d(-1, 4), std::invalid_argument);
  EXPECT_THROW(should_apply_3d(0, 0), std::invalid_argument);
}

TEST(Routing, Table) {
  const ActiveLosses qa4 = route_losses(TaskTag::qa, Regime::labeled, 4, 4);
  EXPECT_EQ(qa4, (ActiveLosses{true, false, true, true, false}));
  EXPECT_EQ(route_losses(TaskTag::caption, Regime::labeled, 5, 4), (ActiveLosses{true, false, false, false, false}));
  for (long s : {0, 1, 2, 3, 4}) {
    EXPECT_EQ(route_losses(TaskTag::ground, Regime::labeled, s, 4), (ActiveLosses{false, false, false, false, true}));
  }
  EXPECT_FALSE(route_losses(TaskTag::qa, Regime::unlabeled, 3, 4).any());
  EXPECT_EQ(route_losses(TaskTag::ground, Regime::unlabeled, 8, 4), (ActiveLosses{false, false, true, true, false}));
}

TEST(Routing, ArmSwitches) {
  TrainConfig c;
  c.use_cross = false;
  EXPECT_EQ(active_losses(c, TaskTag::qa, Regime::labeled, 0), (ActiveLosses{true, false, false, true, false}));
  c.use_cross = true;
  c.use_global = false;
  c.use_vanilla = true;
  EXPECT_EQ(active_losses(c, TaskTag::qa, Regime::labeled, 0), (ActiveLosses{true, true, true, false, false}));
  EXPECT_EQ(active_losses(c, TaskTag::qa, Regime::labeled, 1), (ActiveLosses{true, false, false, false, false}));
  EXPECT_EQ(active_losses(c, TaskTag::ground, Regime::labeled, 0), (ActiveLosses{false, false, false, false, true}));
  c.unlabeled_3d = false;
  EXPECT_FALSE(active_losses(c, TaskTag::qa, Regime::unlabeled, 0).any());
  TrainConfig g;
  g.schedule_global = false;
  EXPECT_EQ(active_losses(g, TaskTag::qa, Regime::labeled, 1), (ActiveLosses{true, false, false, true, false}));
}

TEST(SemiSplitTest, Contract) {
  const SemiSplit s = split_semi(20, 0.5, 3);
  EXPECT_EQ(s.labeled.size(), 10u);
  EXPECT_EQ(s.unlabeled.size(), 10u);
  std::set<int> all(s.labeled.begin(), s.labeled.end());
  for (int u : s.unlabeled) EXPECT_TRUE(all.insert(u).second);
  EXPECT_EQ(all.size(), 20u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 19);
  EXPECT_EQ(split_semi(20, 0.5, 3).labeled, s.labeled);
  EXPECT_NE(split_semi(20, 0.5, 4).labeled, s.labeled);
  EXPECT_THROW(split_semi(3, 0.1, 0), std::invalid_argument);
  EXPECT_THROW(split_semi(3, 1.0, 0), std::invalid_argument);
  TrainConfig c;
  EXPECT_EQ(regime_split(7, c).labeled.size(), 7u);
  c.labeled_fraction = 0.5;
  EXPECT_EQ(regime_split(20, c).labeled, split_semi(20, 0.5, 0).labeled);
}

TEST(TrainConfigJson, RoundTripUnknownKeysAndEnvOverride) {
  TrainConfig c;
  c.gamma = 0.5;
  c.delta_t = 3;
  c.tasks = {TaskTag::ground};
  c.model.backbone.layers = 3;
  c.teacher.steps = 17;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json({{"gama", 0.5}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"gamma", 1.0}}), std::invalid_argument);
  EXPECT_THROW(train_config_from_json({{"tasks", {"dance"}}}), std::invalid_argument);
  ::setenv("RECON3D_SEED", "77", 1);
  const TrainConfig env = train_config_from_json({{"seed", 3}});
  ::unsetenv("RECON3D_SEED");
  EXPECT_EQ(env.seed, 77u);
  EXPECT_EQ(train_config_from_json({{"seed", 3}}).seed, 3u);
}

TEST(Trainer, RejectsVocabularyLargerThanModel) {
  ModelConfig mc = toy().model;
  mc.backbone.vocab = 10;
  EXPECT_THROW(prepare_scene(toy().data.scenes[0], *toy().teacher, toy().tok, mc), std::invalid_argument);
  mc = toy().model;
  mc.backbone.views = 5;
  EXPECT_THROW(prepare_scene(toy().data.scenes[0], *toy().teacher, toy().tok, mc), std::invalid_argument);
}

TEST(Trainer, LogFlagsFollowSchedule) {
  TrainConfig c = toy_train_config(24);
  c.tasks = {TaskTag::qa, TaskTag::caption};
  Model<float> m(c.model);
  const TrainResult r = train(m, toy().train, all_indices(toy().train.size()), {}, c);
  ASSERT_EQ(r.log.size(), 24u);
  for (const auto& b : r.log) {
    const bool s3 = b.step % 4 == 0;
    EXPECT_EQ(b.cross.applied, s3) << b.step;
    EXPECT_EQ(b.global.applied, s3) << b.step;
    EXPECT_TRUE(b.text.applied);
    EXPECT_FALSE(b.ground.applied);
    EXPECT_FALSE(b.vanilla2d.applied);
    for (const auto& e : b.batch) EXPECT_EQ(e.at("masked").size(), s3 ? 1u : 0u);  // round(0.25 * 4)
  }
  EXPECT_EQ(r.steps_with_3d, 6);
}

TEST(Trainer, BitIdenticalRunsAndArtifacts) {
  TempDir a("train_a"), b("train_b");
  TrainConfig c = toy_train_config(12);
  c.checkpoint_every = 5;
  Model<float> m1(c.model), m2(c.model);
  const TrainResult r1 = train(m1, toy().train, all_indices(toy().train.size()), {}, c, a.path);
  const TrainResult r2 = train(m2, toy().train, all_indices(toy().train.size()), {}, c, b.path);
  EXPECT_EQ(r1.model_checksum, r2.model_checksum);
  EXPECT_EQ(read_file(a.path / "loss_log.jsonl"), read_file(b.path / "loss_log.jsonl"));
  EXPECT_TRUE(std::filesystem::exists(a.path / "model_step5.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(a.path / "model_step10.ckpt"));
  nlohmann::json extra;
  auto loaded = Model<float>::load((a.path / "model.ckpt").string(), &extra);
  EXPECT_EQ(extra.at("steps"), 12);
  EXPECT_EQ(loaded->params().find("lm.head.weight")->value, m1.params().find("lm.head.weight")->value);

  std::ifstream log(a.path / "loss_log.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step"), n++);
    for (const char* k : {"text", "vanilla2d", "cross", "global", "ground"}) {
      EXPECT_EQ(j.at("flags").at(k).get<bool>(), !j.at("losses").at(k).is_null());
    }
  }
  EXPECT_EQ(n, 12);

  TrainConfig other = c;
  other.seed = 1;
  Model<float> m3(c.model);
  EXPECT_NE(train(m3, toy().train, all_indices(toy().train.size()), {}, other).log.back().total, r1.log.back().total);
}

TEST(Trainer, AbortsOnNonFiniteLossWithDump) {
  TempDir d("train_nan");
  TrainConfig c = toy_train_config(5);
  Model<float> m(c.model);
  m.params().find("lm.head.weight")->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  c.tasks = {TaskTag::qa};
  try {
    train(m, toy().train, all_indices(toy().train.size()), {}, c, d.path);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
  const auto dump = nlohmann::json::parse(read_file(d.path / "nan_dump.json"));
  EXPECT_EQ(dump.at("step"), 0);
  EXPECT_FALSE(dump.at("batch").empty());
}

TEST(Trainer, UnlabeledStepsGiveExactlyZeroHeadGradient) {
  TrainConfig c = toy_train_config(8);
  Model<float> m(c.model);
  std::vector<double> head_norms;
  std::vector<bool> has3d;
  TrainHooks hooks;
  hooks.after_backward = [&](long, const Model<float>& model, const std::vector<TrainSample>& batch) {
    bool only_unlabeled = true;
    for (const auto& s : batch) only_unlabeled = only_unlabeled && s.regime == Regime::unlabeled;
    if (!only_unlabeled) return;
    auto& ps = const_cast<Model<float>&>(model).params();
    head_norms.push_back(ps.find("lm.head.weight")->grad.norm());
    has3d.push_back(ps.find("vis.proj2.weight")->grad.norm() > 0);
  };
  // No labeled scenes: every batch is unlabeled and only 3D steps carry a loss.
  train(m, toy().train, {}, all_indices(toy().train.size()), c, {}, hooks);
  ASSERT_EQ(head_norms.size(), 2u);
  for (double v : head_norms) EXPECT_EQ(v, 0.0);
  for (bool b : has3d) EXPECT_TRUE(b);
}

TEST(Trainer, SemiSupervisedApplies3dAtLeastAsOften) {
  TrainConfig full = toy_train_config(16);
  Model<float> a(full.model), b(full.model);
  const TrainResult rf = train(a, toy().train, all_indices(toy().train.size()), {}, full);
  TrainConfig semi = full;
  semi.labeled_fraction = 0.5;
  const SemiSplit s = regime_split(static_cast<int>(toy().train.size()), semi);
  const TrainResult rs = train(b, toy().train, s.labeled, s.unlabeled, semi);
  EXPECT_GE(rs.applications_3d, rf.applications_3d);
  EXPECT_EQ(rs.steps_with_3d, 4);
}

TEST(Trainer, TextLossFallsOnTwentyScenes) {
  const Dataset d = generate_dataset(fixture::toy_data(20, 0));
  const auto scenes = prepare_scenes(d.split("train"), *toy().teacher, toy().tok, toy().model);
  TrainConfig c = toy_train_config(200);
  Model<float> m(c.model);
  const TrainResult r = train(m, scenes, all_indices(scenes.size()), {}, c);
  std::vector<double> text;
  std::vector<long> steps;
  for (const auto& b : r.log) {
    if (b.text.applied) {
      text.push_back(b.text.value);
      steps.push_back(b.step);
    }
  }
  const std::vector<double> s = ema(text, 0.1);
  std::size_t at10 = 0;
  while (steps[at10] < 10) ++at10;
  EXPECT_LE(s.back(), 0.7 * s[at10]) << "step10 " << s[at10] << " final " << s.back();
}
