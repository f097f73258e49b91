#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"

using namespace doam;
using testutil::random_tensor;

namespace {
DetectorConfig small_detector(int classes = 3) {
  DetectorConfig c;
  c.num_classes = classes;
  c.widths = {4, 6, 6, 8, 8};
  return c;
}
}  // namespace

TEST(Boxes, IouCases) {
  Box a{0, 0, 10, 10}, b{5, 0, 15, 10}, c{20, 20, 30, 30};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, c), 0.0);
  EXPECT_DOUBLE_EQ(intersection_area(a, b), 50.0);
  EXPECT_DOUBLE_EQ(iou(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou(b, a), iou(a, b));
  EXPECT_THROW(iou(a, Box{1, 1, 1, 5}), std::invalid_argument);
}

TEST(Boxes, EncodeDecodeRoundTrip) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(0, 200), s(3, 90);
  for (int i = 0; i < 200; ++i) {
    Box g{u(gen), u(gen), 0, 0};
    g.xmax = g.xmin + s(gen);
    g.ymax = g.ymin + s(gen);
    Anchor a{u(gen), u(gen), s(gen), s(gen)};
    auto d = decode_box(encode_box(g, a), a);
    EXPECT_NEAR(d.xmin, g.xmin, 1e-4);
    EXPECT_NEAR(d.ymin, g.ymin, 1e-4);
    EXPECT_NEAR(d.xmax, g.xmax, 1e-4);
    EXPECT_NEAR(d.ymax, g.ymax, 1e-4);
  }
}

TEST(Nms, IdenticalBoxesKeepHighestScore) {
  std::vector<Detection> d{{0, 0.8, {0, 0, 10, 10}}, {0, 0.9, {0, 0, 10, 10}}};
  auto k = nms(d, 0.45);
  ASSERT_EQ(k.size(), 1u);
  EXPECT_DOUBLE_EQ(k[0].score, 0.9);
}

TEST(Nms, SortedAndPairwiseBelowThresholdPerClass) {
  std::mt19937_64 gen(2);
  std::uniform_real_distribution<double> u(0, 50), s(5, 30), sc(0, 1);
  std::vector<Detection> d;
  for (int i = 0; i < 150; ++i) {
    Box b{u(gen), u(gen), 0, 0};
    b.xmax = b.xmin + s(gen);
    b.ymax = b.ymin + s(gen);
    d.push_back({i % 2, sc(gen), b});
  }
  auto k = nms(d, 0.45, 200);
  for (std::size_t i = 1; i < k.size(); ++i) EXPECT_GE(k[i - 1].score, k[i].score);
  for (std::size_t i = 0; i < k.size(); ++i)
    for (std::size_t j = i + 1; j < k.size(); ++j)
      if (k[i].class_id == k[j].class_id) EXPECT_LE(iou(k[i].box, k[j].box), 0.45);
  EXPECT_LE(nms(d, 1.0, 10).size(), 10u);
}

TEST(Detector, GridShapesAtDefaultSize) {
  DetectorConfig cfg;
  auto grids = head_grids(cfg, 300, 300);
  ASSERT_EQ(grids.size(), 2u);
  EXPECT_EQ(grids[0], std::make_pair(75, 75));
  EXPECT_EQ(grids[1], std::make_pair(38, 38));
  EXPECT_EQ(make_anchors(cfg, 300, 300).size(), (75u * 75 + 38 * 38) * 4);
  TinyDetector<float> det(small_detector(5));
  auto heads = det.raw_heads(Var<float>(Tensor<float>({1, 3, 300, 300})), false);
  EXPECT_EQ(heads[0].shape(), (Shape{1, 40, 75, 75}));
  EXPECT_EQ(heads[1].shape(), (Shape{1, 40, 38, 38}));
}

TEST(Detector, ZeroInputZeroParamsGivesZeroLogits) {
  TinyDetector<double> det(small_detector());
  det.visit("", [](const std::string& name, Var<double>& v, bool trainable) {
    if (trainable && name.find("gamma") == std::string::npos) v.mutable_value().fill(0.0);
  });
  auto y = det(Var<double>(Tensor<double>({1, 3, 16, 16})), false);
  for (auto v : y.value().vec()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(det(Var<double>(Tensor<double>({1, 4, 16, 16})), false), ShapeError);
}

TEST(Detector, GradientMatchesFiniteDifferences) {
  TinyDetector<double> det(small_detector(), 7);
  std::mt19937_64 gen(3);
  Var<double> x(random_tensor({2, 3, 32, 32}, gen, 0, 1), true);
  std::vector<Var<double>> targets{x};
  det.visit("", [&](const std::string& name, Var<double>& v, bool trainable) {
    if (trainable && (name == "stage0.conv.weight" || name == "head1.weight" || name == "stage3.bn.gamma"))
      targets.push_back(v);
  });
  auto loss = [&] { return testutil::readout(det(x, true)); };
  EXPECT_LT(testutil::grad_check(loss, targets, 10, gen).max_rel_error, 1e-2);
}

// Straight-line multibox loss: explicit IoU table, matching, log-softmax and
// hard-negative ranking.
namespace {
double oracle_loss(const Tensor<double>& pred, const std::vector<Anchor>& anchors,
                   const std::vector<std::vector<GroundTruth>>& gts) {
  const int n = pred.dim(0), na = pred.dim(1), v = pred.dim(2), k1 = v - 4;
  double total = 0;
  int npos = 0;
  for (int b = 0; b < n; ++b) {
    const auto& g = gts[b];
    std::vector<std::vector<double>> table(g.size(), std::vector<double>(na));
    for (std::size_t j = 0; j < g.size(); ++j)
      for (int a = 0; a < na; ++a) {
        const Box ab = anchors[a].box();
        const double ix = std::max(0.0, std::min(ab.xmax, g[j].box.xmax) - std::max(ab.xmin, g[j].box.xmin));
        const double iy = std::max(0.0, std::min(ab.ymax, g[j].box.ymax) - std::max(ab.ymin, g[j].box.ymin));
        const double inter = ix * iy;
        table[j][a] = inter / (ab.width() * ab.height() + g[j].box.width() * g[j].box.height() - inter);
      }
    std::vector<int> match(na, -1);
    for (int a = 0; a < na; ++a) {
      double best = 0.5 - 1e-15;
      for (std::size_t j = 0; j < g.size(); ++j)
        if (table[j][a] >= 0.5 && table[j][a] > best) best = table[j][a], match[a] = static_cast<int>(j);
    }
    for (std::size_t j = 0; j < g.size(); ++j) {
      const int a = static_cast<int>(std::max_element(table[j].begin(), table[j].end()) - table[j].begin());
      if (table[j][a] > 0) match[a] = static_cast<int>(j);
    }
    auto logsoftmax = [&](int a, int c) {
      const double* r = pred.data() + (static_cast<std::size_t>(b) * na + a) * v;
      double z = 0;
      for (int q = 0; q < k1; ++q) z += std::exp(r[q]);
      return r[c] - std::log(z);
    };
    std::vector<std::pair<double, int>> neg;
    int pos = 0;
    for (int a = 0; a < na; ++a) {
      if (match[a] < 0) {
        neg.push_back({-logsoftmax(a, 0), a});
        continue;
      }
      ++pos;
      const auto& gt = g[static_cast<std::size_t>(match[a])];
      total -= logsoftmax(a, gt.class_id + 1);
      const Anchor& an = anchors[a];
      const double t[4] = {((gt.box.xmin + gt.box.xmax) / 2 - an.cx) / an.w / 0.1,
                           ((gt.box.ymin + gt.box.ymax) / 2 - an.cy) / an.h / 0.1,
                           std::log(gt.box.width() / an.w) / 0.2, std::log(gt.box.height() / an.h) / 0.2};
      for (int q = 0; q < 4; ++q) {
        const double d = std::abs(pred[(static_cast<std::size_t>(b) * na + a) * v + k1 + q] - t[q]);
        total += d < 1 ? 0.5 * d * d : d - 0.5;
      }
    }
    std::sort(neg.begin(), neg.end(), [](auto& x, auto& y) { return x.first > y.first; });
    const std::size_t keep = std::min<std::size_t>(neg.size(), 3 * std::max(pos, 1));
    for (std::size_t i = 0; i < keep; ++i) total += neg[i].first;
    npos += pos;
  }
  return total / std::max(npos, 1);
}
}  // namespace

TEST(Loss, MatchesStraightLineOracle) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 32, 32);
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto pred = random_tensor({2, static_cast<int>(anchors.size()), cfg.values_per_anchor()}, gen, -2, 2);
    std::vector<std::vector<GroundTruth>> gts{{{0, {3, 4, 15, 20}}, {2, {18, 10, 30, 29}}}, {{1, {5, 5, 25, 22}}}};
    LossBreakdown br;
    auto l = multibox_loss(Var<double>(pred), anchors, gts, &br);
    EXPECT_NEAR(l.value()[0], oracle_loss(pred, anchors, gts), 1e-5);
    EXPECT_GT(br.positives, 0);
  }
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  std::mt19937_64 gen(5);
  Var<double> pred(random_tensor({1, static_cast<int>(anchors.size()), cfg.values_per_anchor()}, gen, -2, 2), true);
  std::vector<std::vector<GroundTruth>> gts{{{1, {2, 3, 14, 15}}}};
  auto loss = [&] { return multibox_loss(pred, anchors, gts); };
  // mining keeps the same negatives under tiny perturbations
  EXPECT_LT(testutil::grad_check(loss, {pred}, 200, gen).max_rel_error, 1e-4);
}

TEST(Loss, EmptyImageIsBackgroundOnly) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  std::mt19937_64 gen(6);
  auto pred = random_tensor({1, static_cast<int>(anchors.size()), cfg.values_per_anchor()}, gen);
  LossBreakdown br;
  auto l = multibox_loss(Var<double>(pred), anchors, {{}}, &br);
  EXPECT_GE(l.value()[0], 0.0);
  EXPECT_EQ(br.localization, 0.0);
  EXPECT_EQ(br.positives, 0);
}

TEST(Loss, ExactTargetsGiveZeroLocalization) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  std::vector<GroundTruth> g{{0, {4, 4, 16, 18}}};
  auto m = match_anchors(anchors, g);
  Tensor<double> pred({1, static_cast<int>(anchors.size()), cfg.values_per_anchor()});
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    if (m.assigned[a] < 0) continue;
    auto t = encode_box(g[0].box, anchors[a]);
    for (int q = 0; q < 4; ++q) pred[a * cfg.values_per_anchor() + 4 + q] = t[q];
  }
  LossBreakdown br;
  multibox_loss(Var<double>(pred), anchors, {g}, &br);
  EXPECT_NEAR(br.localization, 0.0, 1e-12);
  EXPECT_GE(br.positives, 1);
}

TEST(Loss, BoxMatchingNoAnchorIsExcludedWithWarning) {
  std::vector<Anchor> anchors{{5, 5, 4, 4}};
  std::vector<GroundTruth> g{{0, {20, 20, 30, 30}}};
  std::ostringstream warn;
  LossBreakdown br;
  Tensor<double> pred({1, 1, 8});
  auto l = multibox_loss(Var<double>(pred), anchors, {g}, &br, &warn);
  EXPECT_EQ(br.positives, 0);
  EXPECT_NE(warn.str().find("excluded"), std::string::npos);
  EXPECT_TRUE(std::isfinite(l.value()[0]));
}

TEST(Loss, NonNegativeAndFiniteForRandomInputs) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  std::mt19937_64 gen(7);
  for (int t = 0; t < 20; ++t) {
    auto pred = random_tensor({1, static_cast<int>(anchors.size()), cfg.values_per_anchor()}, gen, -30, 30);
    auto l = multibox_loss(Var<double>(pred), anchors, {{{2, {1, 1, 20, 12}}}});
    EXPECT_GE(l.value()[0], 0.0);
    EXPECT_TRUE(std::isfinite(l.value()[0]));
  }
}

TEST(Predict, AllBackgroundGivesNoDetections) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  Tensor<float> pred({static_cast<int>(anchors.size()), cfg.values_per_anchor()});
  for (std::size_t a = 0; a < anchors.size(); ++a) pred[a * cfg.values_per_anchor()] = 50.0f;
  EXPECT_TRUE(decode_predictions(pred.data(), anchors, cfg.values_per_anchor(), 24, 24, PredictOptions{}).empty());
}

TEST(Predict, DecodesConfidentAnchorToItsBox) {
  auto cfg = small_detector();
  auto anchors = make_anchors(cfg, 24, 24);
  const int v = cfg.values_per_anchor();
  Tensor<float> pred({static_cast<int>(anchors.size()), v});
  for (std::size_t a = 0; a < anchors.size(); ++a) pred[a * v] = 50.0f;
  const std::size_t pick = 7;
  pred[pick * v] = 0.0f;
  pred[pick * v + 2] = 20.0f;
  auto d = decode_predictions(pred.data(), anchors, v, 24, 24, PredictOptions{});
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].class_id, 1);
  EXPECT_EQ(d[0].box, clip_box(anchors[pick].box(), 24, 24));
}

namespace {
ModelConfig tiny_model(AblationVariant v, std::uint64_t seed) {
  ModelConfig m;
  m.variant = v;
  m.height = m.width = 32;
  m.seed = seed;
  m.doam.c_e = m.doam.c_r = 4;
  m.doam.k_set = {2, 4, 8};
  m.detector = small_detector();
  return m;
}

PreparedSet tiny_data(int n, std::uint64_t seed) {
  SynthConfig sc;
  sc.n_images = n;
  sc.height = sc.width = 32;
  sc.seed = seed;
  auto set = generate_synthetic(sc);
  return prepare(set.split, sc.classes, 32, 32);
}
}  // namespace

TEST(Train, OverfitsOneImage) {
  auto data = tiny_data(1, 3);
  DetectionModel<float> model(tiny_model(AblationVariant::baseline, 1));
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 1;
  auto res = train(model, data, tc);
  // strictly decreasing over the first 10 evaluations
  for (int i = 1; i < 10; ++i) EXPECT_LT(res.step_loss[i], res.step_loss[i - 1]) << "step " << i;
  EXPECT_LT(res.step_loss.back(), res.step_loss.front());
}

TEST(Train, SeedFixesEpochZeroLoss) {
  auto data = tiny_data(6, 4);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.learning_rate = 0.01;
  tc.seed = 9;
  for (auto v : {AblationVariant::baseline, AblationVariant::full_doam}) {
    DetectionModel<float> a(tiny_model(v, 2)), b(tiny_model(v, 2));
    EXPECT_EQ(train(a, data, tc).epoch_loss[0], train(b, data, tc).epoch_loss[0]);
  }
}

TEST(Train, RejectsInvalidConfig) {
  auto data = tiny_data(2, 5);
  DetectionModel<float> model(tiny_model(AblationVariant::baseline, 1));
  TrainConfig tc;
  EXPECT_THROW(train(model, data, tc), ConfigError);  // epochs unset
  tc.epochs = 1;
  tc.momentum = 1.0;
  EXPECT_THROW(train(model, data, tc), ConfigError);
  tc.momentum = 0.9;
  tc.batch_size = 0;
  EXPECT_THROW(train(model, data, tc), ConfigError);
}

TEST(Train, DivergenceReportsBatchIndex) {
  auto data = tiny_data(4, 6);
  DetectionModel<float> model(tiny_model(AblationVariant::baseline, 1));
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 2;
  model.detector.heads[0].bias.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, data, tc);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.batch_index(), 0);
  }
}

TEST(Model, VariantsShareDetectorInitialisation) {
  DetectionModel<float> a(tiny_model(AblationVariant::baseline, 4)), b(tiny_model(AblationVariant::full_doam, 4));
  std::map<std::string, Tensor<float>> wa;
  a.visit([&](const std::string& n, Var<float>& v, bool) { wa[n] = v.value(); });
  int shared = 0;
  b.visit([&](const std::string& n, Var<float>& v, bool) {
    if (n.rfind("detector.", 0) == 0) {
      EXPECT_EQ(wa.at(n), v.value()) << n;
      ++shared;
    }
  });
  EXPECT_EQ(shared, static_cast<int>(wa.size()));
  EXPECT_THROW(parse_variant("doam_plus"), ConfigError);
}

TEST(Model, ParameterCountsMatchDescriptions) {
  for (auto v : {AblationVariant::baseline, AblationVariant::concat_only, AblationVariant::doam_minus_ma,
                 AblationVariant::doam_minus_gate, AblationVariant::full_doam}) {
    auto cfg = tiny_model(v, 1);
    DetectionModel<float> m(cfg);
    EXPECT_EQ(m.trainable_parameters(), count_parameters(describe_model(cfg))) << to_string(v);
  }
}
