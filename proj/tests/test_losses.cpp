#include <gtest/gtest.h>

#include "crqat/losses.hpp"

using namespace crqat;

namespace {

struct Fixture {
  SyntheticDataset ds{DatasetConfig{}, default_category_table()};
  TextBank bank{default_category_table(), 16, 11};
  std::vector<DetectionSample> samples;
  std::vector<std::vector<Annotation>> gts;
  Tensor images;

  explicit Fixture(std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      samples.push_back(ds.sample(Split::train, i));
      gts.push_back(samples.back().annotations);
    }
    images = SyntheticDataset::batch_images(samples);
  }
};

// Embedding-only outputs on a one-image grid.
DetectionOutputs embedding_outputs(const Tensor& embeddings) {
  DetectionOutputs out;
  out.grid = GridLayout::make(1, 64, {8, 16});
  out.embeddings = embeddings;
  return out;
}

Assignment rows_for(const GridLayout& grid, const std::vector<std::pair<std::size_t, std::size_t>>& row_category) {
  Assignment a{grid, {}};
  for (const auto& [row, cat] : row_category) a.positives.push_back({row, 0, 0, cat});
  std::sort(a.positives.begin(), a.positives.end(), [](const auto& x, const auto& y) { return x.row < y.row; });
  return a;
}

Tensor random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * d);
  for (double& x : v) x = rng.normal();
  return Tensor(Shape{n, d}, std::move(v));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST(TaskLoss, MatchesIndependentOracle) {
  Fixture f(2);
  const Model m = Model::build(ArchConfig{}, 3);
  const auto q = f.bank.base_queries();
  const auto out = m.forward(f.images, q);
  const auto a = assign_positives(f.gts, out.grid);
  ASSERT_GT(a.positives.size(), 0u);
  const auto loss = task_loss(out, a, f.gts);

  const std::size_t N = q.ids.size();
  double bce = 0;
  for (std::size_t r = 0; r < out.grid.rows(); ++r)
    for (std::size_t j = 0; j < N; ++j) {
      bool pos = false;
      for (const auto& p : a.positives) pos |= p.row == r && p.category == q.ids[j];
      const double z = out.logits[r * N + j];
      const double prob = 1.0 / (1.0 + std::exp(-z));
      bce += -(pos ? std::log(prob) : std::log1p(-prob));
    }
  bce /= static_cast<double>(a.positives.size());
  double loc = 0;
  for (const auto& p : a.positives) {
    const auto cell = out.grid.cell(p.row);
    const Box pred = decode_box(cell, out.boxes.values().subspan(p.row * 4, 4));
    loc += 1.0 - iou(pred, f.gts[p.image][p.gt].box);
  }
  loc /= static_cast<double>(a.positives.size());
  EXPECT_NEAR(loss.cls.item(), bce, 1e-6);
  EXPECT_NEAR(loss.loc.item(), loc, 1e-6);
  EXPECT_NEAR(loss.total.item(), bce + loc, 1e-6);
}

TEST(TaskLoss, EmptyImageIsBackgroundOnly) {
  const Model m = Model::build(ArchConfig{}, 3);
  const TextBank bank(default_category_table(), 16, 1);
  const auto out = m.forward(Tensor(Shape{1, 3, 64, 64}, 0.5), bank.base_queries());
  const std::vector<std::vector<Annotation>> gts{{}};
  const auto loss = task_loss(out, assign_positives(gts, out.grid), gts);
  EXPECT_EQ(loss.loc.item(), 0.0);
  double bce = 0;
  for (double z : out.logits.values()) bce += std::log1p(std::exp(z));
  EXPECT_NEAR(loss.cls.item(), bce, 1e-9);
}

TEST(TaskLoss, PerfectPredictionsApproachZero) {
  // Hand-built outputs: logits ±L, boxes exactly on target.
  const auto grid = GridLayout::make(1, 64, {8, 16});
  const std::vector<std::vector<Annotation>> gts{{Annotation{Box{10, 12, 40, 38}, 0}}};
  const auto a = assign_positives(gts, grid);
  ASSERT_FALSE(a.positives.empty());
  double prev = std::numeric_limits<double>::infinity();
  for (double L : {5.0, 10.0, 20.0, 40.0}) {
    DetectionOutputs out;
    out.grid = grid;
    out.categories = {0, 1};
    std::vector<double> logits(grid.rows() * 2, -L), boxes(grid.rows() * 4, 1.0);
    for (const auto& p : a.positives) {
      logits[p.row * 2] = L;
      const auto t = ltrb_target(grid.cell(p.row), gts[0][0].box);
      std::copy(t.begin(), t.end(), boxes.begin() + p.row * 4);
    }
    out.logits = Tensor(Shape{grid.rows(), 2}, logits);
    out.boxes = Tensor(Shape{grid.rows(), 4}, boxes);
    const double v = task_loss(out, a, gts).total.item();
    EXPECT_LT(v, prev);
    EXPECT_GE(v, 0.0);
    prev = v;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(TaskLoss, GradientMatchesFiniteDifferences) {
  Fixture f(1);
  Model m = Model::build(ArchConfig{}, 4);
  const auto q = f.bank.base_queries();
  const auto grid = GridLayout::make(1, 64, {8, 16});
  const auto a = assign_positives(f.gts, grid);
  const double err = grad_check(
      [&](const Tensor& w) {
        m.layer("head.embed_out").weight = w;
        return task_loss(m.forward(f.images, q), a, f.gts).total;
      },
      m.layer("head.embed_out").weight.detach(), 1e-5);
  EXPECT_LT(err, 1e-3);
}

TEST(FeatureKd, IdentityAndAffineInvariance) {
  const Tensor t = random_rows(2 * 3 * 4, 4, 1);
  const Tensor ft(Shape{2, 3, 4, 4}, t.vec());
  EXPECT_NEAR(feature_kd_loss({ft}, {ft}).item(), 0.0, 1e-12);
  std::vector<double> v = ft.vec();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 16; ++i) {
        double& x = v[(n * 3 + c) * 16 + i];
        x = (0.5 + c) * x + (c == 1 ? -3.0 : 2.0);
      }
  EXPECT_NEAR(feature_kd_loss({Tensor(Shape{2, 3, 4, 4}, v)}, {ft}).item(), 0.0, 1e-6);
}

TEST(FeatureKd, AntiCorrelatedChannelGivesFour) {
  const std::vector<double> z{1.0, -2.0, 0.5, 3.0};
  std::vector<double> neg(z.size());
  std::transform(z.begin(), z.end(), neg.begin(), [](double x) { return -x; });
  const Tensor a(Shape{1, 1, 2, 2}, z), b(Shape{1, 1, 2, 2}, neg);
  EXPECT_NEAR(feature_kd_loss({a}, {b}).item(), 4.0, 1e-5);
}

TEST(FeatureKd, RejectsShapeMismatchAndBlocksTeacherGradient) {
  const Tensor a(Shape{1, 2, 2, 2}, 1.0), b(Shape{1, 2, 4, 4}, 1.0);
  EXPECT_THROW(feature_kd_loss({a}, {b}), ShapeError);
  Tensor s(Shape{1, 1, 2, 2}, {1.0, 2.0, 0.0, 4.0}, true), t(Shape{1, 1, 2, 2}, {0.0, 1.0, 3.0, 1.0}, true);
  feature_kd_loss({s}, {t}).backward();
  EXPECT_TRUE(s.has_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(RelationalMatrix, OrthogonalParallelCase) {
  const std::vector<double> t{1.0, 0.0};
  const auto s = build_relational_matrix(t, Tensor(Shape{2, 2}, {0.0, 1.0, 1.0, 0.0}));
  const std::vector<double> expected{1, 0, 1, 0, 1, 0, 1, 0, 1};
  ASSERT_EQ(s.size, 3u);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(s.values[i], expected[i], 1e-12);
  const auto one = build_relational_matrix(t, Tensor(Shape{1, 2}, {3.0, 0.0}));
  for (double x : one.values) EXPECT_NEAR(x, 1.0, 1e-12);
  EXPECT_THROW(build_relational_matrix(t, Tensor(Shape{0, 2})), std::invalid_argument);
}

TEST(RelationalMatrix, BruteForceOracleAndInvariants) {
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 9;
    const Tensor t = random_rows(1, 16, 1000 + trial);
    const Tensor regions = random_rows(n, 16, 2000 + trial);
    const auto s = build_relational_matrix(t.values(), regions);
    std::vector<std::span<const double>> rows{t.values()};
    for (std::size_t r = 0; r < n; ++r) rows.push_back(regions.values().subspan(r * 16, 16));
    for (std::size_t i = 0; i <= n; ++i)
      for (std::size_t j = 0; j <= n; ++j) {
        EXPECT_NEAR(s(i, j), cosine(rows[i], rows[j]), 1e-9);
        EXPECT_NEAR(s(i, j), s(j, i), 1e-9);
        EXPECT_LE(std::abs(s(i, j)), 1.0 + 1e-6);
      }
    for (std::size_t i = 0; i <= n; ++i) EXPECT_NEAR(s(i, i), 1.0, 1e-6);
  }
}

TEST(Trkd, IdenticalIsZero) {
  const TextBank bank(default_category_table(), 16, 3);
  const auto out = embedding_outputs(random_rows(80, 16, 5));
  const auto a = rows_for(out.grid, {{3, 0}, {4, 0}, {9, 2}, {30, 2}, {31, 2}});
  EXPECT_EQ(trkd_loss(out, out, a, bank).item(), 0.0);
}

TEST(Trkd, DirectFormula) {
  const TextBank bank(default_category_table(), 2, 3);
  const auto t = bank.embedding(1);
  const std::vector<double> orth{-t[1], t[0]};
  std::vector<double> teacher(80 * 2, 0.1), student(80 * 2, 0.1);
  teacher[10 * 2] = orth[0];
  teacher[10 * 2 + 1] = orth[1];
  const double c = 0.5, s = std::sqrt(0.75);
  student[10 * 2] = c * t[0] + s * orth[0];
  student[10 * 2 + 1] = c * t[1] + s * orth[1];
  const auto a = rows_for(GridLayout::make(1, 64, {8, 16}), {{10, 1}});
  const double v = trkd_loss(embedding_outputs(Tensor(Shape{80, 2}, teacher)), embedding_outputs(Tensor(Shape{80, 2}, student)), a, bank, 1.0).item();
  EXPECT_NEAR(v, 0.0625, 1e-12);
}

TEST(Trkd, PerTextAveraging) {
  const TextBank bank(default_category_table(), 16, 3);
  const Tensor te = random_rows(80, 16, 6), se = random_rows(80, 16, 7);
  const auto grid = GridLayout::make(1, 64, {8, 16});
  std::vector<std::pair<std::size_t, std::size_t>> rc{{0, 0}};
  for (std::size_t r = 20; r < 29; ++r) rc.emplace_back(r, 2);
  const auto both = rows_for(grid, rc);
  const auto only1 = rows_for(grid, {rc.front()});
  const auto only9 = rows_for(grid, std::vector(rc.begin() + 1, rc.end()));
  const auto T = embedding_outputs(te), S = embedding_outputs(se);
  const double l1 = trkd_loss(T, S, only1, bank).item(), l9 = trkd_loss(T, S, only9, bank).item();
  const double total = trkd_loss(T, S, both, bank).item();
  EXPECT_NEAR(total, 0.5 * l1 + 0.5 * l9, 1e-12);
  // Flat oracle: one average over all 4 + 100 entries.
  const double flat = (l1 * 4 + l9 * 100) / 104.0;
  EXPECT_GT(std::abs(total - flat), 1e-3);
}

TEST(Trkd, ImagesAveragedAfterTexts) {
  const TextBank bank(default_category_table(), 16, 3);
  DetectionOutputs T, S;
  T.grid = S.grid = GridLayout::make(2, 64, {8, 16});
  T.embeddings = random_rows(160, 16, 8);
  S.embeddings = random_rows(160, 16, 9);
  auto with = [&](std::vector<PositiveRegion> p) { return Assignment{T.grid, std::move(p)}; };
  // Image 0 (rows of scale 8 start at 0; image 1 at 64) has two texts, image 1 one.
  const auto img0a = with({{1, 0, 0, 0}, {2, 0, 0, 0}}), img0b = with({{5, 0, 1, 4}});
  const auto img1 = with({{70, 1, 0, 4}, {71, 1, 0, 4}});
  const auto all = with({{1, 0, 0, 0}, {2, 0, 0, 0}, {5, 0, 1, 4}, {70, 1, 0, 4}, {71, 1, 0, 4}});
  const double a = trkd_loss(T, S, img0a, bank).item(), b = trkd_loss(T, S, img0b, bank).item(), c = trkd_loss(T, S, img1, bank).item();
  EXPECT_NEAR(trkd_loss(T, S, all, bank).item(), 0.5 * (0.5 * (a + b) + c), 1e-12);
}

TEST(Trkd, NoPositivesIsZero) {
  const TextBank bank(default_category_table(), 16, 3);
  const auto out = embedding_outputs(random_rows(80, 16, 5));
  const auto other = embedding_outputs(random_rows(80, 16, 6));
  EXPECT_EQ(trkd_loss(out, other, rows_for(out.grid, {}), bank).item(), 0.0);
}

TEST(Trkd, ScaleInvariant) {
  const TextBank bank(default_category_table(), 16, 3);
  const auto T = embedding_outputs(random_rows(80, 16, 10));
  const Tensor se = random_rows(80, 16, 11);
  const auto a = rows_for(T.grid, {{3, 1}, {4, 1}, {5, 1}, {40, 6}});
  const double base = trkd_loss(T, embedding_outputs(se), a, bank).item();
  for (double k : {0.25, 2.0, 1024.0}) EXPECT_EQ(trkd_loss(T, embedding_outputs(scale(se, k)), a, bank).item(), base);
  for (double k : {0.3, 7.0}) EXPECT_NEAR(trkd_loss(T, embedding_outputs(scale(se, k)), a, bank).item(), base, 1e-12);
}

TEST(Trkd, VariantsSelectEntries) {
  const auto full = trkd_entry_weights(3, TrkdVariant::full);
  const auto rt = trkd_entry_weights(3, TrkdVariant::region_text);
  const auto rr = trkd_entry_weights(3, TrkdVariant::region_region);
  for (const auto* w : {&full, &rt, &rr}) EXPECT_NEAR(std::accumulate(w->begin(), w->end(), 0.0), 1.0, 1e-12);
  EXPECT_EQ(rt[0], 0.0);
  EXPECT_GT(rt[1], 0.0);
  EXPECT_EQ(rt[5], 0.0);
  EXPECT_EQ(rr[1], 0.0);
  EXPECT_GT(rr[5], 0.0);
}

TEST(Trkd, GradientMatchesFiniteDifferences) {
  const TextBank bank(default_category_table(), 16, 3);
  const auto T = embedding_outputs(random_rows(80, 16, 12));
  const auto a = rows_for(T.grid, {{3, 1}, {4, 1}, {5, 1}, {40, 6}, {41, 6}});
  for (double delta : {1.0, 0.05}) {
    const double err = grad_check([&](const Tensor& e) { return trkd_loss(T, embedding_outputs(e), a, bank, delta); }, random_rows(80, 16, 13), 1e-6);
    EXPECT_LT(err, 1e-3);
  }
}

TEST(Trkd, RejectsMismatchedGrids) {
  const TextBank bank(default_category_table(), 16, 3);
  DetectionOutputs T = embedding_outputs(random_rows(80, 16, 1));
  DetectionOutputs S;
  S.grid = GridLayout::make(2, 64, {8, 16});
  S.embeddings = random_rows(160, 16, 2);
  EXPECT_THROW(trkd_loss(T, S, rows_for(T.grid, {{1, 0}}), bank), std::invalid_argument);
}

TEST(StageLoss, Examples) {
  EXPECT_DOUBLE_EQ(stage_loss(1, 1.0, {0.5}, {6.0}), 4.0);
  EXPECT_NEAR(stage_loss(2, 0.2, {0.1, 0.05}, {6.0, 6.0}), 1.1, 1e-12);
  EXPECT_DOUBLE_EQ(stage_loss(2, 0.7, {0.0, 0.0}, {6.0, 6.0}), 0.7);
  EXPECT_THROW(stage_loss(2, 1.0, {0.5}, {6.0, 6.0}), std::invalid_argument);
  EXPECT_THROW(stage_loss(2, 1.0, {0.5}, {6.0}), std::invalid_argument);
}
