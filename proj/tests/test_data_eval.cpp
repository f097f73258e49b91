#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <jpeglib.h>

#include "test_util.hpp"

using namespace doam;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("doam_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig small_synth(int n, std::uint64_t seed) {
  SynthConfig c;
  c.n_images = n;
  c.height = c.width = 48;
  c.seed = seed;
  return c;
}
}  // namespace

// ---- occlusion levels and synthesis --------------------------------------

TEST(OcclusionLevel, Boundaries) {
  EXPECT_EQ(assign_occlusion_level(0.0), 1);
  EXPECT_EQ(assign_occlusion_level(0.2), 2);
  EXPECT_EQ(assign_occlusion_level(0.4999), 2);
  EXPECT_EQ(assign_occlusion_level(0.5), 3);
  EXPECT_EQ(assign_occlusion_level(0.95), 3);
  EXPECT_THROW(assign_occlusion_level(1.2), std::out_of_range);
  EXPECT_THROW(assign_occlusion_level(-0.1), std::out_of_range);
}

TEST(Synthetic, Deterministic) {
  auto a = generate_synthetic(small_synth(10, 7)), b = generate_synthetic(small_synth(10, 7));
  ASSERT_EQ(a.split.items.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.split.items[i].pixels, b.split.items[i].pixels);
    EXPECT_EQ(a.split.items[i].boxes, b.split.items[i].boxes);
  }
  auto c = generate_synthetic(small_synth(10, 8));
  EXPECT_NE(a.split.items[0].pixels, c.split.items[0].pixels);
}

TEST(Synthetic, NoOccludersMeansZeroRatio) {
  auto cfg = small_synth(15, 3);
  cfg.occluders_min = cfg.occluders_max = 0;
  for (const auto& it : generate_synthetic(cfg).split.items)
    for (const auto& b : it.boxes) {
      EXPECT_EQ(*b.occlusion_ratio, 0.0);
      EXPECT_EQ(*b.level, 1);
    }
}

TEST(Synthetic, RatiosMatchPixelMaskOracle) {
  auto cfg = small_synth(40, 11);
  cfg.targets_max = 3;
  auto set = generate_synthetic(cfg);
  int boxes = 0;
  for (std::size_t i = 0; i < set.split.items.size(); ++i) {
    const auto& it = set.split.items[i];
    ASSERT_EQ(set.masks[i].targets.size(), it.boxes.size());
    for (std::size_t b = 0; b < it.boxes.size(); ++b) {
      double in = 0, tot = 0;
      for (std::size_t p = 0; p < set.masks[i].occluders.size(); ++p)
        if (set.masks[i].targets[b][p]) tot += 1, in += set.masks[i].occluders[p] ? 1 : 0;
      EXPECT_NEAR(*it.boxes[b].occlusion_ratio, in / tot, 1e-6);
      ++boxes;
    }
  }
  EXPECT_GT(boxes, 40);
}

TEST(Synthetic, RangeRestrictsLevels) {
  auto cfg = small_synth(20, 12);
  cfg.ratio_min = 0.6;
  cfg.ratio_max = 0.9;
  for (const auto& it : generate_synthetic(cfg).split.items) {
    for (const auto& b : it.boxes) {
      EXPECT_EQ(*b.level, 3);
      EXPECT_GE(*b.occlusion_ratio, 0.6);
      EXPECT_LE(*b.occlusion_ratio, 0.9);
    }
  }
  cfg.ratio_min = 0.8;
  cfg.ratio_max = 0.3;
  EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Synthetic, LevelsCoverAllThree) {
  auto set = generate_synthetic(small_synth(60, 13));
  std::map<int, int> lv;
  for (const auto& it : set.split.items) ++lv[*it.occlusion_level];
  for (int l = 1; l <= 3; ++l) EXPECT_GT(lv[l], 5) << "level " << l;
}

// ---- annotation I/O ------------------------------------------------------

TEST(Annotations, ParseErrorsCarryLocation) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_annotations(in, "a.txt", 100, 80);
  };
  EXPECT_EQ(parse("Folding 1 2 30 40\n\nring 5 5 10 10 3\n").size(), 2u);
  try {
    parse("Folding 1 2 30 40\nspoon 1 1 5 5\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("a.txt:2"), std::string::npos);
  }
  EXPECT_THROW(parse("Folding 1 x 30 40\n"), ParseError);
  EXPECT_THROW(parse("Folding 1 2 300 40\n"), ParseError);
  EXPECT_THROW(parse("Folding 30 2 10 40\n"), ParseError);
  EXPECT_THROW(parse(""), ParseError);
}

TEST(Dataset, WriteLoadRoundTripAndPartition) {
  auto root = temp_dir("roundtrip");
  auto cfg = small_synth(30, 21);
  auto ds = generate_train_test(cfg, 12);
  write_split(root, "train", ds.train.split);
  write_split(root, "test", ds.test.split);
  for (const auto& [name, ref] : {std::pair{"train", &ds.train.split}, std::pair{"test", &ds.test.split}}) {
    auto back = load_dataset(root, name);
    ASSERT_EQ(back.items.size(), ref->items.size());
    for (std::size_t i = 0; i < back.items.size(); ++i) {
      EXPECT_EQ(back.items[i].id, ref->items[i].id);
      EXPECT_EQ(back.items[i].boxes, ref->items[i].boxes);
      EXPECT_EQ(back.items[i].occlusion_level, ref->items[i].occlusion_level);
      EXPECT_EQ(back.items[i].load(), ref->items[i].pixels);
    }
    EXPECT_EQ(back.category_counts, ref->category_counts);
  }
  auto test = load_dataset(root, "test");
  std::set<std::string> ids, seen;
  for (const auto& it : test.items) ids.insert(it.id);
  for (const char* lvl : {"OL1", "OL2", "OL3"})
    for (const auto& it : load_dataset(root, lvl).items) {
      EXPECT_TRUE(seen.insert(it.id).second);
      EXPECT_EQ(*it.occlusion_level, lvl[2] - '0');
    }
  EXPECT_EQ(ids, seen);
  EXPECT_THROW(load_dataset(root, "val"), ConfigError);
  EXPECT_THROW(load_dataset(root / "missing", "test"), IoError);
  fs::remove_all(root);
}

TEST(Dataset, SingleImageToyRoot) {
  auto root = temp_dir("toy");
  fs::create_directories(root / "test" / "images");
  fs::create_directories(root / "test" / "annotations");
  write_png(root / "test" / "images" / "x1.png", Tensor<float>({3, 20, 30}, 0.5f));
  std::ofstream(root / "test" / "annotations" / "x1.txt") << "Scissor 2 3 12 15\n";
  auto s = load_dataset(root, "test");
  ASSERT_EQ(s.items.size(), 1u);
  EXPECT_EQ(s.items[0].width, 30);
  EXPECT_EQ(s.items[0].height, 20);
  EXPECT_EQ(s.category_counts, (std::map<std::string, int>{{"Scissor", 1}}));
  EXPECT_FALSE(s.items[0].occlusion_level.has_value());
  std::ofstream(root / "test" / "annotations" / "x2.txt") << "Scissor 2 3 12 15\n";
  EXPECT_THROW(load_dataset(root, "test"), IoError);
  fs::remove_all(root);
}

TEST(Dataset, ReadsJpegImages) {
  auto root = temp_dir("jpeg");
  const fs::path file = root / "g.jpg";
  {
    const int w = 16, h = 8;
    std::vector<unsigned char> rgb(w * h * 3, 128);
    jpeg_compress_struct c;
    jpeg_error_mgr err;
    c.err = jpeg_std_error(&err);
    jpeg_create_compress(&c);
    FILE* f = std::fopen(file.c_str(), "wb");
    jpeg_stdio_dest(&c, f);
    c.image_width = w;
    c.image_height = h;
    c.input_components = 3;
    c.in_color_space = JCS_RGB;
    jpeg_set_defaults(&c);
    jpeg_set_quality(&c, 95, TRUE);
    jpeg_start_compress(&c, TRUE);
    while (c.next_scanline < c.image_height) {
      JSAMPROW row = rgb.data() + c.next_scanline * w * 3;
      jpeg_write_scanlines(&c, &row, 1);
    }
    jpeg_finish_compress(&c);
    std::fclose(f);
    jpeg_destroy_compress(&c);
  }
  auto img = read_image(file);
  EXPECT_EQ(img.shape(), (Shape{3, 8, 16}));
  for (auto v : img.vec()) EXPECT_NEAR(v, 128.0f / 255.0f, 3.0f / 255.0f);
  EXPECT_EQ(image_size(file), std::make_pair(16, 8));
  std::ofstream(root / "bad.jpg") << "not a jpeg";
  EXPECT_THROW(read_image(root / "bad.jpg"), IoError);
  fs::remove_all(root);
}

TEST(Resize, FullFrameIdentityAndScaling) {
  AnnotatedImage it;
  it.id = "a";
  it.width = 1225;
  it.height = 954;
  it.pixels = Tensor<float>({3, 954, 1225}, 0.3f);
  it.boxes = {{"Folding", 0, 0, 1225, 954}};
  auto r = resize_with_boxes(it, 300, 300);
  EXPECT_EQ(r.boxes[0], (BoxAnnotation{"Folding", 0, 0, 300, 300}));
  EXPECT_EQ(r.pixels.shape(), (Shape{3, 300, 300}));
  auto same = resize_with_boxes(it, 954, 1225);
  EXPECT_EQ(same.boxes, it.boxes);
  EXPECT_EQ(same.pixels, it.pixels);

  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> x(0, 1000), y(0, 800);
  for (int t = 0; t < 50; ++t) {
    BoxAnnotation b{"Straight", x(gen), y(gen), 0, 0};
    b.xmax = b.xmin + 50 + x(gen) % 170;
    b.ymax = b.ymin + 50 + y(gen) % 150;
    it.boxes = {b};
    auto s = resize_with_boxes(it, 300, 300);
    EXPECT_NEAR(s.boxes[0].xmin, b.xmin * 300.0 / 1225, 0.5);
    EXPECT_NEAR(s.boxes[0].xmax, b.xmax * 300.0 / 1225, 0.5);
    EXPECT_NEAR(s.boxes[0].ymin, b.ymin * 300.0 / 954, 0.5);
    EXPECT_NEAR(s.boxes[0].ymax, b.ymax * 300.0 / 954, 0.5);
  }
}

// ---- average precision and evaluation ------------------------------------

TEST(AveragePrecision, HandExamples) {
  const Box gt{0, 0, 10, 10};
  const Box iou06{0, 0, 10, 6};  // IoU 0.6
  const Box iou01{0, 0, 10, 1};  // IoU 0.1
  EXPECT_DOUBLE_EQ(average_precision({{0, 0.9, iou06}}, {gt}, 0.5), 1.0);

  auto r = average_precision(std::vector<ScoredBox>{{0, 0.9, iou06}, {0, 0.8, iou01}}, std::vector<GtBox>{{0, gt}}, 0.5);
  ASSERT_EQ(r.curve.size(), 2u);
  EXPECT_DOUBLE_EQ(r.curve[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.curve[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(r.curve[1].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.curve[1].precision, 0.5);
  EXPECT_DOUBLE_EQ(r.ap, 1.0);

  const Box gt2{50, 50, 60, 60};
  EXPECT_DOUBLE_EQ(average_precision({{0, 0.9, gt}, {0, 0.8, {30, 30, 40, 40}}}, {gt, gt2}, 0.5), 0.5);
}

TEST(AveragePrecision, Properties) {
  std::mt19937_64 gen(31);
  std::uniform_real_distribution<double> u(0, 60), s(5, 20), sc(0, 1);
  auto rbox = [&] {
    Box b{u(gen), u(gen), 0, 0};
    b.xmax = b.xmin + s(gen);
    b.ymax = b.ymin + s(gen);
    return b;
  };
  for (int t = 0; t < 100; ++t) {
    std::vector<GtBox> g;
    for (int i = 0; i < 4; ++i) g.push_back({static_cast<std::size_t>(i % 2), rbox()});
    std::vector<ScoredBox> d;
    for (int i = 0; i < 6; ++i) d.push_back({static_cast<std::size_t>(i % 2), sc(gen), rbox()});
    for (int i = 0; i < 2; ++i) d.push_back({g[i].image, sc(gen), g[i].box});
    const double ap = average_precision(d, g, 0.5).ap;
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
    auto more_fp = d;
    more_fp.push_back({0, sc(gen), {200, 200, 210, 210}});
    EXPECT_LE(average_precision(more_fp, g, 0.5).ap, ap + 1e-12);
    // a top-scored exact hit on a still unmatched box
    auto more_tp = d;
    std::size_t target = 3;
    more_tp.insert(more_tp.begin(), {g[target].image, 2.0, g[target].box});
    EXPECT_GE(average_precision(more_tp, g, 0.5).ap, ap - 1e-12);
  }
}

TEST(AveragePrecision, DegenerateDetectionIsFalsePositive) {
  std::vector<Detection> dets{{0, 0.9, {5, 5, 5, 9}}, {0, 0.8, {0, 0, 10, 10}}};
  EXPECT_DOUBLE_EQ(average_precision(dets, {{0, 0, 10, 10}}, 0.5), 0.5);
}

TEST(AveragePrecision, NoGroundTruthIsUndefined) {
  auto r = average_precision(std::vector<ScoredBox>{{0, 0.5, {0, 0, 2, 2}}}, {}, 0.5);
  EXPECT_TRUE(r.undefined);
  EXPECT_EQ(r.ap, 0.0);
}

namespace {
DatasetSplit eval_split() {
  DatasetSplit s;
  s.name = "test";
  std::mt19937_64 gen(41);
  std::uniform_int_distribution<int> p(0, 60), sz(8, 30), lv(1, 3), cls(0, 2);
  const std::vector<std::string> names{"blade", "ring", "hook"};
  for (int i = 0; i < 30; ++i) {
    AnnotatedImage it;
    it.id = "im" + std::to_string(i);
    it.width = it.height = 100;
    for (int b = 0; b < 2; ++b) {
      BoxAnnotation a{names[cls(gen)], p(gen), p(gen), 0, 0};
      a.xmax = a.xmin + sz(gen);
      a.ymax = a.ymin + sz(gen);
      it.boxes.push_back(a);
    }
    it.occlusion_level = lv(gen);
    s.items.push_back(it);
  }
  return s;
}

DetectionsByImage noisy_detections(const DatasetSplit& s, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> jitter(0, 3);
  std::uniform_real_distribution<double> sc(0, 1);
  DetectionsByImage d;
  for (const auto& it : s.items)
    for (const auto& b : it.boxes) {
      auto bx = b.box();
      d[it.id].push_back({b.class_name, sc(gen),
                          {bx.xmin + jitter(gen), bx.ymin + jitter(gen), bx.xmax + jitter(gen), bx.ymax + jitter(gen)}});
      d[it.id].push_back({"ring", sc(gen), {10, 10, 30, 30}});
    }
  return d;
}
}  // namespace

TEST(Evaluate, LevelUnionEqualsWholeSplit) {
  auto s = eval_split();
  auto d = noisy_detections(s, 1);
  auto whole = evaluate(d, s);
  DatasetSplit uni;
  for (int l = 1; l <= 3; ++l)
    for (const auto& it : s.items)
      if (it.occlusion_level == l) uni.items.push_back(it);
  auto u = evaluate(d, uni);
  EXPECT_NEAR(whole.map, u.map, 1e-9);
  for (const auto& [c, ap] : whole.per_class_ap) EXPECT_NEAR(ap, u.per_class_ap.at(c), 1e-9);
  EXPECT_EQ(whole.per_level.size(), 3u);
  EXPECT_GT(whole.map, 0.0);
  EXPECT_LT(whole.map, 1.0);
}

TEST(Evaluate, PerfectAndEmptyDetections) {
  auto s = eval_split();
  DetectionsByImage perfect;
  for (const auto& it : s.items)
    for (const auto& b : it.boxes) perfect[it.id].push_back({b.class_name, 1.0, b.box()});
  EXPECT_DOUBLE_EQ(evaluate(perfect, s).map, 1.0);
  auto empty = evaluate({}, s);
  EXPECT_EQ(empty.map, 0.0);
  for (const auto& [c, ap] : empty.per_class_ap) EXPECT_EQ(ap, 0.0);
  EXPECT_THROW(evaluate({{"nope", {}}}, s), ConfigError);
  EXPECT_THROW(evaluate({{"im0", {{"spoon", 0.5, {0, 0, 1, 1}}}}}, s), ConfigError);
}

TEST(Evaluate, OneImageOneClassPerfect) {
  DatasetSplit s;
  AnnotatedImage it;
  it.id = "x";
  it.width = it.height = 50;
  it.boxes = {{"Utility", 5, 5, 20, 20}};
  s.items = {it};
  auto r = evaluate({{"x", {{"Utility", 0.7, {5, 5, 20, 20}}}}}, s);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_TRUE(r.per_level.empty());
  auto flagged = evaluate({{"x", {{"Utility", 0.7, {5, 5, 20, 20}}, {"Scissor", 0.6, {1, 1, 4, 4}}}}}, s);
  EXPECT_EQ(flagged.flagged, std::vector<std::string>{"Scissor"});
  EXPECT_DOUBLE_EQ(flagged.map, 1.0);
}

TEST(Evaluate, DetectionsCsvRoundTrip) {
  auto root = temp_dir("csv");
  auto s = eval_split();
  auto d = noisy_detections(s, 2);
  write_detections_csv(root / "d.csv", d);
  auto back = read_detections_csv(root / "d.csv");
  EXPECT_NEAR(evaluate(back, s).map, evaluate(d, s).map, 1e-9);
  std::ofstream(root / "bad.csv") << "image_id,class_name,score,xmin,ymin,xmax,ymax\nim0,ring,abc,1,2,3,4\n";
  EXPECT_THROW(read_detections_csv(root / "bad.csv"), ParseError);
  fs::remove_all(root);
}

// ---- complexity ----------------------------------------------------------

namespace {
LayerRecord conv(int in, int out, int k, int s, int p, int h, int w, bool chained = true) {
  return {LayerKind::conv, "conv", in, out, k, s, p, h, w, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1, true,
          false, chained};
}
LayerRecord same(LayerKind kind, int c, int h, int w) { return {kind, "x", c, c, 1, 1, 0, h, w, h, w}; }
}  // namespace

TEST(Complexity, SingleConv) {
  ModelDescription d{{conv(3, 32, 3, 1, 1, 300, 300)}};
  EXPECT_EQ(count_parameters(d), 896u);
  EXPECT_DOUBLE_EQ(estimate_flops(d, 3, 300, 300), 0.15552);
  EXPECT_DOUBLE_EQ(model_size_mb(count_parameters(d)), 896.0 * 4 / 1048576.0);
  EXPECT_EQ(count_parameters(ModelDescription{}), 0u);
  EXPECT_EQ(estimate_flops(ModelDescription{}, 3, 10, 10), 0.0);
}

TEST(Complexity, ConvBnReluPoolChain) {
  // conv 3->8 3x3 s2 on 32x32 -> 16x16; BN; ReLU; 2x2 pool s2 -> 8x8
  ModelDescription d{{conv(3, 8, 3, 2, 1, 32, 32), same(LayerKind::batchnorm, 8, 16, 16),
                      same(LayerKind::elementwise, 8, 16, 16),
                      {LayerKind::pool, "pool", 8, 8, 2, 2, 0, 16, 16, 8, 8}}};
  EXPECT_EQ(count_parameters(d), 8u * 3 * 9 + 8 + 16);
  EXPECT_EQ(count_buffers(d), 16u);
  const double flops = 2.0 * 8 * 3 * 9 * 16 * 16 + 2.0 * 8 * 256 + 2.0 * 8 * 256 + 8 * 64;
  EXPECT_DOUBLE_EQ(estimate_flops(d, 3, 32, 32), flops / 1e9);
}

TEST(Complexity, TwoBranchWithConcatAndSigmoid) {
  // 1x1 conv 4->2 (no bias), parallel 3x3 conv 4->3, concat to 5, 1x1 conv 5->1, sigmoid
  auto a = conv(4, 2, 1, 1, 0, 10, 12);
  a.bias = false;
  auto b = conv(4, 3, 3, 1, 1, 10, 12, false);
  LayerRecord cat{LayerKind::concat, "cat", 3, 5, 1, 1, 0, 10, 12, 10, 12};
  ModelDescription d{{a, b, cat, conv(5, 1, 1, 1, 0, 10, 12), same(LayerKind::sigmoid, 1, 10, 12)}};
  EXPECT_EQ(count_parameters(d), 8u + (108 + 3) + (5 + 1));
  const double flops = 2.0 * 2 * 4 * 120 + 2.0 * 3 * 4 * 9 * 120 + 2.0 * 5 * 120 + 2.0 * 120;
  EXPECT_DOUBLE_EQ(estimate_flops(d, 4, 10, 12), flops / 1e9);
}

TEST(Complexity, AdditiveAndConsistencyChecked) {
  ModelDescription a{{conv(3, 4, 3, 1, 1, 8, 8)}}, b{{conv(4, 6, 3, 2, 1, 8, 8)}};
  ModelDescription ab = a;
  ab.append(b);
  EXPECT_EQ(count_parameters(ab), count_parameters(a) + count_parameters(b));
  EXPECT_DOUBLE_EQ(estimate_flops(ab, 3, 8, 8), estimate_flops(a, 3, 8, 8) + estimate_flops(b, 4, 8, 8));
  ModelDescription bad{{conv(3, 4, 3, 1, 1, 8, 8), conv(5, 6, 3, 1, 1, 8, 8)}};
  EXPECT_THROW(count_parameters(bad), ConfigError);
  EXPECT_THROW(estimate_flops(a, 1, 8, 8), ConfigError);
}

TEST(Complexity, DoamDefaultCount) {
  ModelConfig base, full;
  base.variant = AblationVariant::baseline;
  full.variant = AblationVariant::full_doam;
  const auto delta = count_parameters(describe_model(full)) - count_parameters(describe_model(base));
  EXPECT_EQ(delta, 135027u);  // DOAM 134916 + adapter 111
  EXPECT_LT(delta, 242000u);
  EXPECT_GT(estimate_flops(describe_model(full), 3, 300, 300), estimate_flops(describe_model(base), 3, 300, 300));
}

// ---- visualisation -------------------------------------------------------

TEST(Visualize, ConstantAttentionGivesUniformTint) {
  Tensor<float> img({3, 6, 5}, 0.4f), att({6, 5}, 0.7f);
  auto o = overlay_attention(img, att);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 30; ++i) EXPECT_FLOAT_EQ(o[c * 30 + i], o[c * 30]);
}

TEST(Visualize, SingleHotPixel) {
  Tensor<float> att({5, 7});
  att[2 * 7 + 3] = 1.0f;
  auto c = colorize(att);
  const auto hot = viridis(1.0), cold = viridis(0.0);
  for (int i = 0; i < 35; ++i)
    for (int k = 0; k < 3; ++k) EXPECT_FLOAT_EQ(c[k * 35 + i], i == 17 ? hot[k] : cold[k]);
}

TEST(Visualize, PngRoundTripWithinQuantisation) {
  auto root = temp_dir("png");
  std::mt19937_64 gen(3);
  auto img = testutil::random_tensor<float>({3, 9, 11}, gen, 0, 1);
  auto att = testutil::random_tensor<float>({9, 11}, gen, 0, 1);
  auto blended = overlay_attention(img, att);
  write_png(root / "o.png", blended);
  auto back = read_png(root / "o.png");
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], blended[i], 1.0 / 255.0);
  fs::remove_all(root);
}

// ---- checkpoints ---------------------------------------------------------

TEST(Checkpoint, RoundTripAndIncompatibility) {
  auto root = temp_dir("ckpt");
  ModelConfig cfg;
  cfg.height = cfg.width = 24;
  cfg.doam.c_e = cfg.doam.c_r = 3;
  cfg.doam.k_set = {2, 3};
  cfg.detector.num_classes = 3;
  cfg.detector.widths = {4, 4, 6, 6, 6};
  cfg.seed = 8;
  DetectionModel<float> m(cfg);
  std::mt19937_64 gen(4);
  m.visit([&](const std::string&, Var<float>& v, bool) {
    for (auto& x : v.mutable_value().vec()) x += std::uniform_real_distribution<float>(-0.1f, 0.1f)(gen);
  });
  save_checkpoint(root / "m.ckpt", m, {"blade", "ring", "hook"}, {{"epoch", 3}});
  auto loaded = load_checkpoint(root / "m.ckpt");
  EXPECT_EQ(loaded.meta.classes, (std::vector<std::string>{"blade", "ring", "hook"}));
  EXPECT_EQ(loaded.meta.extra.at("epoch"), 3);
  auto x = testutil::random_tensor<float>({2, 3, 24, 24}, gen, 0, 1);
  EXPECT_EQ(m(x, false).predictions.value(), loaded.model(x, false).predictions.value());

  auto other = cfg;
  other.variant = AblationVariant::baseline;
  DetectionModel<float> b(other);
  EXPECT_THROW(load_weights(root / "m.ckpt", b), CheckpointError);
  auto wider = cfg;
  wider.detector.widths = {4, 4, 6, 6, 8};
  DetectionModel<float> w(wider);
  EXPECT_THROW(load_weights(root / "m.ckpt", w), CheckpointError);
  std::ofstream(root / "junk.ckpt") << "garbage";
  EXPECT_THROW(load_checkpoint(root / "junk.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(root / "absent.ckpt"), IoError);
  fs::remove_all(root);
}
