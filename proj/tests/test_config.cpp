#include <gtest/gtest.h>

#include "gflow/config.hpp"

namespace gflow {
namespace {

TEST(Config, DefaultsAndPresetsParse) {
  EXPECT_NO_THROW(parse_run_config(default_config()));
  for (const auto& name : preset_names()) EXPECT_NO_THROW(parse_run_config(preset_config(name))) << name;
  EXPECT_THROW(preset_config("nope"), ConfigError);
  EXPECT_EQ(preset_config("translate"), default_config());
}

TEST(Config, CheckedInFilesMatchPresets) {
  for (const auto& name : preset_names()) {
    const auto path = std::filesystem::path(GFLOW_SOURCE_DIR) / "configs" / (name + ".json");
    EXPECT_EQ(load_config(path), preset_config(name)) << path;
  }
}

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(merge_config(default_config(), Json::parse(R"({"sed": 1})")), ConfigError);
  EXPECT_THROW(merge_config(default_config(), Json::parse(R"({"train": {"lr": {"means": 1}}})")), ConfigError);
  EXPECT_THROW(merge_config(default_config(), Json::parse(R"({"scene": {"clusters": [{"colour": [1, 1, 1]}]}})")),
               ConfigError);
  Json j = default_config();
  EXPECT_THROW(apply_override(j, "train.iteration=3"), ConfigError);
  EXPECT_THROW(apply_override(j, "scene.clusters.4.scale=1"), ConfigError);
  EXPECT_THROW(apply_override(j, "train.iterations"), ConfigError);
}

TEST(Config, TypeMismatchIsRejected) {
  EXPECT_THROW(merge_config(default_config(), Json::parse(R"({"train": {"iterations": "many"}})")), ConfigError);
  EXPECT_THROW(merge_config(default_config(), Json::parse(R"({"render": 3})")), ConfigError);
}

TEST(Config, OverridesReachTheStructs) {
  Json j = default_config();
  apply_override(j, "train.iterations=5");
  apply_override(j, "train.norm=l2");
  apply_override(j, "scene.clusters.0.scale=0.2");
  apply_override(j, "render.background=[0.1,0.2,0.3]");
  apply_override(j, "scene.clusters.0.motion.pivot=[0,0,4]");
  const RunConfig rc = parse_run_config(j);
  EXPECT_EQ(rc.train.iterations, 5);
  EXPECT_EQ(rc.train.norm, FlowNorm::L2);
  EXPECT_EQ(rc.scene.clusters[0].scale, 0.2);
  EXPECT_EQ(rc.train.render.background, Vec3(0.1, 0.2, 0.3));
  EXPECT_EQ(rc.scene.render.background, Vec3(0.1, 0.2, 0.3));
  ASSERT_TRUE(rc.scene.clusters[0].motion.pivot);
  EXPECT_EQ(*rc.scene.clusters[0].motion.pivot, Vec3(0, 0, 4));
}

TEST(Config, ClusterEntriesAreCompletedFromDefaults) {
  const Json j = merge_config(default_config(), Json::parse(R"({"scene": {"clusters": [{"count": 2}, {"scale": 0.3}]}})"));
  const RunConfig rc = parse_run_config(j);
  ASSERT_EQ(rc.scene.clusters.size(), 2u);
  EXPECT_EQ(rc.scene.clusters[0].count, 2);
  EXPECT_EQ(rc.scene.clusters[1].scale, 0.3);
  EXPECT_EQ(rc.scene.clusters[1].count, ClusterSpec{}.count);
}

TEST(Config, InvalidValuesAreRejected) {
  for (const char* o : {"train.lr.mean=-1", "seed=-2", "train.norm=l3", "scene.width=0", "render.top_k=0",
                        "train.iterations=-1", "scene.clusters.0.opacity=1.5"}) {
    Json j = default_config();
    apply_override(j, o);
    EXPECT_THROW(parse_run_config(j), ConfigError) << o;
  }
}

TEST(Config, SeedDrivesInitSeed) {
  Json j = default_config();
  j["seed"] = 41;
  const RunConfig rc = parse_run_config(j);
  EXPECT_EQ(rc.seed, 41u);
  EXPECT_EQ(rc.init_seed(), 42u);
}

TEST(Config, EchoIsSortedAndStable) {
  const std::string a = config_echo(preset_config("nvs"));
  EXPECT_EQ(a, config_echo(Json::parse(a)));
  EXPECT_LT(a.find("\"eval\""), a.find("\"train\""));
}

}  // namespace
}  // namespace gflow
