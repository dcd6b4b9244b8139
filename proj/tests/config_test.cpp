#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "clove/ablation.hpp"
#include "clove/config.hpp"
#include "clove/error.hpp"
#include "tiny.hpp"

namespace clove {
namespace {

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, DumpRoundTripsExactly) {
  RunConfig cfg;
  apply_override(cfg, "lr=0.1");
  apply_override(cfg, "weight_decay=1.2345678901234567e-07");
  apply_override(cfg, "channels=16,24,32");
  apply_override(cfg, "strides=1,2,2");
  apply_override(cfg, "negatives=inter_avg");
  apply_override(cfg, "distance_unit=canonical");
  apply_override(cfg, "symmetric=false");
  apply_override(cfg, "metrics=/tmp/run dir/m.csv");
  const std::string dump = dump_config(cfg);

  RunConfig back;
  std::istringstream in(dump);
  apply_config_stream(back, in, "dump");
  EXPECT_EQ(dump_config(back), dump);
  EXPECT_EQ(back.train.lr, 0.1);
  EXPECT_EQ(back.train.lars.weight_decay, 1.2345678901234567e-07);
  EXPECT_EQ(back.train.encoder.channels, (std::vector<std::size_t>{16, 24, 32}));
  EXPECT_EQ(back.train.loss.negatives, NegativeStrategy::inter_avg);
  EXPECT_EQ(back.train.metrics_path, "/tmp/run dir/m.csv");
  EXPECT_FALSE(back.train.symmetric);
}

TEST(Config, EveryKeyDocumentedAndDumped) {
  const std::string dump = "\n" + dump_config(RunConfig{});
  for (const auto& k : config_keys()) {
    EXPECT_FALSE(k.doc.empty()) << k.name;
    EXPECT_NE(dump.find("\n" + k.name + " = "), std::string::npos) << k.name;
    EXPECT_NO_THROW(get_setting(RunConfig{}, k.name));
  }
}

TEST(Config, DefaultsValidate) {
  EXPECT_NO_THROW(RunConfig{}.validate());
  EXPECT_NO_THROW(testing::tiny_train().validate());
}

TEST(Config, UnknownKeyNamed) {
  RunConfig cfg;
  EXPECT_NE(error_of([&] { apply_override(cfg, "learning_rate=1"); }).find("learning_rate"), std::string::npos);
  EXPECT_NE(error_of([&] { get_setting(cfg, "nope"); }).find("nope"), std::string::npos);
}

TEST(Config, BadValuesRejected) {
  RunConfig cfg;
  for (const char* s : {"steps=abc", "steps=-3", "lr=1.0x", "loss=hinge", "symmetric=maybe", "channels=8,,8",
                        "distance_unit=pixels", "negatives=queue", "lr", "=3"}) {
    EXPECT_FALSE(error_of([&] { apply_override(cfg, s); }).empty()) << s;
  }
}

TEST(Config, StreamErrorsCarryLocation) {
  RunConfig cfg;
  std::istringstream repeated("steps = 10\n# comment\nlr = 0.2\nsteps = 20\n");
  const std::string e1 = error_of([&] { apply_config_stream(cfg, repeated, "run.cfg"); });
  EXPECT_NE(e1.find("run.cfg:4"), std::string::npos) << e1;
  std::istringstream junk("steps = 10\nthis is not a setting\n");
  const std::string e2 = error_of([&] { apply_config_stream(cfg, junk, "run.cfg"); });
  EXPECT_NE(e2.find("run.cfg:2"), std::string::npos) << e2;
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  RunConfig cfg;
  std::istringstream in("\n  # header\nsteps = 12   # trailing\n\nbatch=8\n");
  apply_config_stream(cfg, in, "x");
  EXPECT_EQ(cfg.train.steps, 12u);
  EXPECT_EQ(cfg.train.batch, 8u);
}

TEST(Config, SeedFromEnvironment) {
  ::setenv("CLOVE_SEED", "77", 1);
  EXPECT_EQ(default_seed_from_env(), 77u);
  EXPECT_EQ(RunConfig{}.train.seed, 77u);
  ::setenv("CLOVE_SEED", "junk", 1);
  EXPECT_THROW(default_seed_from_env(), ConfigError);
  ::unsetenv("CLOVE_SEED");
  EXPECT_EQ(default_seed_from_env(), 0u);
}

TEST(Config, ViewSizeSetsTrainingAndEvalViews) {
  RunConfig cfg;
  apply_override(cfg, "view_size=24");
  EXPECT_EQ(cfg.train.augment.out_h, 24u);
  EXPECT_EQ(cfg.eval.views.out_w, 24u);
}

RunConfig tiny_run() {
  RunConfig cfg;
  for (const char* s : {"steps=3", "batch=4", "channels=8,8,8", "strides=2,2,2", "head_hidden=16", "embed_dim=16",
                        "heads=2", "head_dim=8", "queue_capacity=16", "corpus_train=12", "corpus_eval=6",
                        "probe_train=12", "probe_iterations=20"}) {
    apply_override(cfg, s);
  }
  return cfg;
}

TEST(Grid, EmptyGridIsTheBaseCell) {
  std::istringstream in("# nothing here\n\n");
  const auto cells = parse_grid(in, "g");
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_EQ(cells[0].id, "base");
  EXPECT_TRUE(cells[0].overrides.empty());
  EXPECT_EQ(cells[0].override_keys(), "");
}

TEST(Grid, ParsesCellsAndRejectsBadKeys) {
  std::istringstream in("rank: loss=rank\nl2_mc: loss=l2 local_crops=2  # multi-crop\n");
  const auto cells = parse_grid(in, "g");
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[1].id, "l2_mc");
  EXPECT_EQ(cells[1].override_keys(), "loss=l2;local_crops=2");

  std::istringstream bad("a: loss=rank\nb: lossy=l2\n");
  EXPECT_NE(error_of([&] { parse_grid(bad, "grid.txt"); }).find("grid.txt:2"), std::string::npos);
  std::istringstream dup("a: loss=rank\na: loss=l2\n");
  EXPECT_FALSE(error_of([&] { parse_grid(dup, "g"); }).empty());
}

TEST(Ablation, EmptyGridMatchesTheBaseRun) {
  RunConfig base = tiny_run();
  std::istringstream in("");
  const auto rows = run_ablation(parse_grid(in, "g"), base, {5});
  ASSERT_EQ(rows.size(), 1u);
  base.train.seed = 5;
  const RunOutcome direct = run_experiment(base);
  EXPECT_EQ(rows[0].cell_id, "base");
  EXPECT_EQ(rows[0].corr_top1, direct.report.top1);
  EXPECT_EQ(rows[0].probe_acc, direct.probe_accuracy);
  EXPECT_EQ(rows[0].final_loss, direct.final_loss);
}

TEST(Ablation, TposSweepEmitsFiveRowsPerSeedAndReproduces) {
  std::istringstream in("t50: t_pos=0.5\nt60: t_pos=0.6\nt70: t_pos=0.7\nt80: t_pos=0.8\nt90: t_pos=0.9\n");
  const auto cells = parse_grid(in, "g");
  const auto rows = run_ablation(cells, tiny_run(), {0, 1, 2});
  ASSERT_EQ(rows.size(), 15u);
  for (const auto& r : rows) EXPECT_TRUE(r.error.empty()) << r.error;
  std::ostringstream a, b;
  write_ablation_csv(a, rows);
  write_ablation_csv(b, run_ablation(cells, tiny_run(), {0, 1, 2}));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, a.str().find('\n')), kAblationHeader);

  const auto summary = summarize(rows);
  ASSERT_EQ(summary.size(), 5u);
  for (const auto& s : summary) EXPECT_EQ(s.runs, 3u);
}

TEST(Ablation, FailingCellRecordedAndTableStillEmitted) {
  std::vector<AblationCell> cells{{"broken", {{"embed_dim", "17"}}}, {"ok", {}}};
  const auto rows = run_ablation(cells, tiny_run(), {0});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_FALSE(rows[0].error.empty());
  EXPECT_TRUE(std::isnan(rows[0].corr_top1));
  EXPECT_TRUE(rows[1].error.empty());
  const auto summary = summarize(rows);
  EXPECT_EQ(summary[0].runs, 0u);
  EXPECT_EQ(summary[1].runs, 1u);
}

TEST(Ablation, SummaryUsesSampleStd) {
  std::vector<AblationRow> rows(3);
  const double v[] = {0.1, 0.2, 0.6};
  for (int i = 0; i < 3; ++i) {
    rows[i].cell_id = "c";
    rows[i].corr_top1 = v[i];
  }
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].top1_mean, 0.3, 1e-15);
  EXPECT_NEAR(s[0].top1_std, std::sqrt((0.04 + 0.01 + 0.09) / 2), 1e-15);
}

}  // namespace
}  // namespace clove
