#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "clove/error.hpp"
#include "tiny.hpp"

namespace clove {
namespace {

using testing::ScratchDir;
using testing::tiny_corpus;
using testing::tiny_train;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<const Tensor<float>*> pick(const std::vector<Tensor<float>>& corpus, const TrainConfig& cfg,
                                       std::size_t step) {
  std::vector<const Tensor<float>*> out;
  for (std::size_t i : batch_indices(cfg, step, corpus.size())) out.push_back(&corpus[i]);
  return out;
}

std::vector<std::vector<float>> snapshot(const std::vector<NamedParam<float>>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& p : ps) out.push_back(p.value.values());
  return out;
}

TEST(Trainer, LossCurveIsBitwiseReproducible) {
  ScratchDir dir("det");
  const auto corpus = tiny_corpus();
  std::string runs[2];
  for (int r = 0; r < 2; ++r) {
    TrainConfig cfg = tiny_train(8);
    cfg.metrics_path = dir.file("m" + std::to_string(r) + ".csv");
    cfg.checkpoint_path = dir.file("c" + std::to_string(r) + ".ckpt");
    TrainState st = init_state(cfg);
    train(st, cfg, corpus);
    runs[r] = slurp(cfg.metrics_path);
    EXPECT_EQ(st.step, 8u);
  }
  EXPECT_EQ(runs[0], runs[1]);
  EXPECT_EQ(slurp(dir.file("c0.ckpt")), slurp(dir.file("c1.ckpt")));
  EXPECT_EQ(runs[0].substr(0, runs[0].find('\n')), kMetricsHeader);
}

TEST(Trainer, DifferentSeedsDiffer) {
  const auto corpus = tiny_corpus();
  TrainConfig a = tiny_train(3), b = tiny_train(3);
  b.seed = a.seed + 1;
  TrainState sa = init_state(a), sb = init_state(b);
  const auto ha = train(sa, a, corpus), hb = train(sb, b, corpus);
  EXPECT_NE(ha.back().loss, hb.back().loss);
}

TEST(Trainer, ResumeSplicesIntoTheSameCurve) {
  ScratchDir dir("resume");
  const auto corpus = tiny_corpus();
  for (auto neg : {NegativeStrategy::intra, NegativeStrategy::inter_avg}) {
    TrainConfig full = tiny_train(8);
    full.loss.negatives = neg;
    full.metrics_path = dir.file("full.csv");
    full.checkpoint_path = dir.file("full.ckpt");
    TrainState a = init_state(full);
    train(a, full, corpus);

    TrainConfig part = full;
    part.metrics_path = dir.file("part.csv");
    part.checkpoint_path = dir.file("part.ckpt");
    part.checkpoint_every = 2;
    part.stop_at = 5;
    TrainState b = init_state(part);
    train(b, part, corpus);
    EXPECT_EQ(b.step, 5u);

    TrainConfig rest = part;
    rest.stop_at = 0;
    TrainState c = init_state(rest);
    load_checkpoint(c, dir.file("part.ckpt"));
    EXPECT_EQ(c.step, 5u);
    train(c, rest, corpus);

    EXPECT_EQ(slurp(dir.file("full.csv")), slurp(dir.file("part.csv")));
    EXPECT_EQ(slurp(dir.file("full.ckpt")), slurp(dir.file("part.ckpt")));
    std::filesystem::remove(dir.file("full.csv"));
    std::filesystem::remove(dir.file("part.csv"));
  }
}

TEST(Trainer, ResumeDropsRowsPastTheCheckpoint) {
  ScratchDir dir("drop");
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(6);
  cfg.metrics_path = dir.file("m.csv");
  cfg.checkpoint_path = dir.file("c.ckpt");
  cfg.checkpoint_every = 2;
  cfg.stop_at = 3;
  TrainState a = init_state(cfg);
  train(a, cfg, corpus);
  // A checkpoint from step 2 next to a CSV that already reached step 3.
  TrainConfig two = cfg;
  two.stop_at = 2;
  two.metrics_path = dir.file("m2.csv");
  two.checkpoint_path = dir.file("c2.ckpt");
  TrainState b = init_state(two);
  train(b, two, corpus);
  std::filesystem::copy_file(dir.file("m.csv"), dir.file("m2.csv"), std::filesystem::copy_options::overwrite_existing);

  TrainConfig rest = two;
  rest.stop_at = 0;
  TrainState c = init_state(rest);
  load_checkpoint(c, rest.checkpoint_path);
  train(c, rest, corpus);

  std::istringstream rows(slurp(dir.file("m2.csv")));
  std::string line;
  std::getline(rows, line);
  std::size_t expect = 1;
  while (std::getline(rows, line)) EXPECT_EQ(std::stoul(line.substr(0, line.find(','))), expect++);
  EXPECT_EQ(expect, 7u);
}

TEST(Trainer, ResumeWithMissingRowsFails) {
  ScratchDir dir("missing");
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(4);
  cfg.checkpoint_path = dir.file("c.ckpt");
  cfg.stop_at = 2;
  TrainState a = init_state(cfg);
  train(a, cfg, corpus);
  cfg.stop_at = 0;
  cfg.metrics_path = dir.file("m.csv");
  std::ofstream(cfg.metrics_path) << kMetricsHeader << "\n";
  TrainState b = init_state(cfg);
  load_checkpoint(b, cfg.checkpoint_path);
  EXPECT_THROW(train(b, cfg, corpus), DataError);
}

TEST(Trainer, SmokeSweepStaysFinite) {
  const auto corpus = tiny_corpus(32);
  struct Case {
    LossMode mode;
    NegativeStrategy neg;
    std::size_t locals;
    std::size_t steps;
  };
  const Case cases[] = {{LossMode::rank, NegativeStrategy::intra, 0, 100},
                        {LossMode::rank, NegativeStrategy::inter, 0, 20},
                        {LossMode::rank, NegativeStrategy::inter_avg, 2, 20},
                        {LossMode::l2, NegativeStrategy::intra, 2, 20}};
  for (const Case& c : cases) {
    TrainConfig cfg = tiny_train(c.steps);
    cfg.loss.mode = c.mode;
    cfg.loss.negatives = c.neg;
    cfg.local_crops = c.locals;
    cfg.lr = 2.0;
    TrainState st = init_state(cfg);
    for (const StepMetrics& m : train(st, cfg, corpus)) {
      ASSERT_TRUE(std::isfinite(m.loss)) << "step " << m.step;
      ASSERT_TRUE(std::isfinite(m.diag.sigma_pos_mean()));
      for (auto* p : st.trainable()) {
        ASSERT_TRUE(p->value.all_finite()) << p->name;
        for (float g : p->value.grad()) ASSERT_TRUE(std::isfinite(g)) << p->name;
      }
    }
  }
}

TEST(Trainer, MetricsStepsStrictlyIncrease) {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(5);
  TrainState st = init_state(cfg);
  const auto hist = train(st, cfg, corpus);
  ASSERT_EQ(hist.size(), 5u);
  for (std::size_t i = 0; i < hist.size(); ++i) {
    EXPECT_EQ(hist[i].step, i + 1);
    EXPECT_EQ(hist[i].wallclock_ms, 0.0);
  }
}

TEST(Trainer, TeacherStaysInsideConvexHull) {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(12);
  cfg.lr = 2.0;
  cfg.ema_start = 0.6;
  TrainState st = init_state(cfg);
  auto lo = snapshot(st.student.parameters()), hi = lo;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    train_step(st, cfg, pick(corpus, cfg, s));
    const auto now = snapshot(st.student.parameters());
    for (std::size_t i = 0; i < now.size(); ++i) {
      for (std::size_t j = 0; j < now[i].size(); ++j) {
        lo[i][j] = std::min(lo[i][j], now[i][j]);
        hi[i][j] = std::max(hi[i][j], now[i][j]);
      }
    }
  }
  const auto teacher = snapshot(st.teacher.parameters());
  std::size_t moved = 0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (std::size_t j = 0; j < teacher[i].size(); ++j) {
      const float tol = 1e-6f * (1 + std::abs(teacher[i][j]));
      EXPECT_GE(teacher[i][j], lo[i][j] - tol);
      EXPECT_LE(teacher[i][j], hi[i][j] + tol);
      moved += hi[i][j] > lo[i][j];
    }
  }
  EXPECT_GT(moved, 0u);
}

TEST(Trainer, OneOptimizerAndOneEmaUpdatePerStep) {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(4);
  TrainState st = init_state(cfg);
  train_step(st, cfg, pick(corpus, cfg, 0));

  const auto student_before = snapshot(st.student.parameters());
  const auto pred_before = snapshot(st.predictor.parameters());
  const auto teacher_before = snapshot(st.teacher.parameters());
  const LarsState<float> slots_before = st.lars;

  const StepMetrics m = train_step(st, cfg, pick(corpus, cfg, 1));
  ASSERT_FALSE(m.skipped);
  EXPECT_EQ(st.step, 2u);

  // Replay a single LARS update from the gradients left on the parameters.
  std::vector<NamedParam<float>> replay;
  auto all_before = student_before;
  all_before.insert(all_before.end(), pred_before.begin(), pred_before.end());
  const auto trainable = st.trainable();
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    NamedParam<float> p{trainable[i]->name, Tensor<float>::parameter(trainable[i]->value.shape(), all_before[i]),
                        trainable[i]->kind};
    const auto g = trainable[i]->value.grad();
    p.value.grad_buffer().assign(g.begin(), g.end());
    replay.push_back(std::move(p));
  }
  std::vector<NamedParam<float>*> ptrs;
  for (auto& p : replay) ptrs.push_back(&p);
  LarsState<float> slots = slots_before;
  lars_step<float>(ptrs, slots, m.lr, cfg.lars);
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    EXPECT_EQ(replay[i].value.values(), trainable[i]->value.values()) << trainable[i]->name;
  }

  const auto student = snapshot(st.student.parameters());
  const auto teacher = snapshot(st.teacher.parameters());
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    for (std::size_t j = 0; j < teacher[i].size(); ++j) {
      const double want = m.alpha * teacher_before[i][j] + (1 - m.alpha) * student[i][j];
      EXPECT_NEAR(teacher[i][j], want, 1e-6 * (1 + std::abs(want)));
    }
  }
}

TEST(Trainer, AllEmptyMatchSetsSkipTheUpdate) {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(3);
  cfg.augment = AugmentProfile::identity(32, 32);
  cfg.augment.crop_min = 0.1;
  cfg.augment.crop_max = 0.1;
  cfg.t_pos = 1e-9;
  TrainState st = init_state(cfg);
  const auto before = snapshot(st.student.parameters());
  const StepMetrics m = train_step(st, cfg, pick(corpus, cfg, 0));
  EXPECT_TRUE(m.skipped);
  EXPECT_EQ(m.diag.n_matches, 0u);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(snapshot(st.student.parameters()), before);
}

TEST(Trainer, IdenticalViewsMatchTheDiagonal) {
  const auto corpus = tiny_corpus();
  TrainConfig cfg = tiny_train(3);
  cfg.augment = AugmentProfile::identity(32, 32);
  cfg.t_pos = 0.5;
  TrainState st = init_state(cfg);
  const auto images = pick(corpus, cfg, 0);

  // Expected: mean cosine between the prediction and the target at the same location.
  TrainState ref = init_state(cfg);
  std::vector<ViewRecord> views;
  std::vector<const ViewRecord*> ptrs;
  Rng rng(0);
  for (const auto* img : images) views.push_back(sample_view(*img, rng, cfg.augment));
  for (const auto& v : views) ptrs.push_back(&v);
  Tape<float> tape(false);
  const auto batch = make_batch<float>(ptrs);
  const auto pred = ref.predictor.forward(tape, to_sequence(tape, ref.student.forward(tape, batch).map));
  ref.teacher.set_training(false);
  const auto tgt = to_sequence(tape, ref.teacher.forward(tape, batch).map);
  const std::size_t d = cfg.encoder.embed_dim, per = pred.size() / d;
  double sum = 0;
  for (std::size_t r = 0; r < per; ++r) sum += cosine<float>(pred.data().subspan(r * d, d), tgt.data().subspan(r * d, d));
  const double expected = sum / static_cast<double>(per);

  const StepMetrics m = train_step(st, cfg, images);
  EXPECT_EQ(m.diag.n_matches, 2 * per);
  EXPECT_NEAR(m.diag.sigma_pos_mean(), expected, 1e-5);
}

}  // namespace
}  // namespace clove
