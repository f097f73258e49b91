// doam: data generation, training, evaluation, complexity report and
// attention visualisation.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "doam/doam.hpp"

namespace fs = std::filesystem;
using namespace doam;

namespace {

// Flat `key = value` file. Keys are option names without the leading dashes
// (underscores and dashes are interchangeable). Values given on the command
// line win.
// Options that must be present once the config file has been merged. CLI11's
// own required() fires during parsing, before the file is read.
std::set<const CLI::Option*>& deferred_required() {
  static std::set<const CLI::Option*> opts;
  return opts;
}

CLI::Option* required_after_config(CLI::Option* o) {
  deferred_required().insert(o);
  o->description(o->get_description() + " (required)");
  return o;
}

void check_required(const CLI::App& sub) {
  for (const CLI::Option* o : sub.get_options())
    if (deferred_required().count(o) && o->count() == 0)
      throw ConfigError(o->get_name() + " is required (flag or config key)");
}

void merge_config_file(CLI::App& sub, const std::string& path) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  for (const auto& it : items) {
    if (!it.parents.empty() || it.name == "++" || it.name == "--") throw ConfigError(path + ": sections are not supported");
    std::string key = it.name;
    for (auto& ch : key)
      if (ch == '_') ch = '-';
    if (key == "config") throw ConfigError(path + ": config files cannot include other config files");
    CLI::Option* opt = sub.get_option_no_throw("--" + key);
    if (!opt) throw ConfigError(path + ": unknown key '" + it.name + "'");
    if (opt->count() > 0) continue;
    try {
      opt->add_result(it.inputs);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError(path + ": bad value for '" + it.name + "': " + e.what());
    }
  }
}

void apply_config_file(CLI::App& sub, const std::string& path) {
  merge_config_file(sub, path);
  check_required(sub);
}

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  sub->add_option("--config", c.config, "flat key = value config file; flags override it");
  sub->add_option("--seed", c.seed, "random seed");
  auto* o = sub->add_option("--out", c.out, "output directory");
  if (out_required) required_after_config(o);
}

struct ModelFlags {
  std::string variant = "full_doam";
  int height = 300, width = 300;
  int n1 = 2, n2 = 2, c_e = 32, c_r = 32;
  std::vector<int> k_set{5, 10, 15};
  double fusion_bias = 2.0;
  std::vector<int> widths{32, 64, 96, 128, 128};
};

void add_model_flags(CLI::App* sub, ModelFlags& m, bool with_variant = true) {
  if (with_variant)
    sub->add_option("--variant", m.variant, "baseline | concat_only | doam_minus_ma | doam_minus_gate | full_doam");
  sub->add_option("--height", m.height, "model input height");
  sub->add_option("--width", m.width, "model input width");
  sub->add_option("--n1", m.n1, "edge-guidance conv blocks");
  sub->add_option("--n2", m.n2, "material-awareness conv blocks");
  sub->add_option("--c-e", m.c_e, "edge-guidance channels");
  sub->add_option("--c-r", m.c_r, "material-awareness channels");
  sub->add_option("--k-set", m.k_set, "region scales");
  sub->add_option("--fusion-bias", m.fusion_bias, "initial fusion bias");
  sub->add_option("--detector-widths", m.widths, "detector stage widths (5 values)");
}

ModelConfig model_config(const ModelFlags& m, int num_classes, std::uint64_t seed) {
  ModelConfig c;
  c.variant = parse_variant(m.variant);
  c.height = m.height;
  c.width = m.width;
  c.seed = seed;
  c.doam.n1 = m.n1;
  c.doam.n2 = m.n2;
  c.doam.c_e = m.c_e;
  c.doam.c_r = m.c_r;
  c.doam.k_set = m.k_set;
  c.doam.fusion_bias = m.fusion_bias;
  c.doam.seed = seed;
  if (m.widths.size() != c.detector.strides.size())
    throw ConfigError("--detector-widths needs " + std::to_string(c.detector.strides.size()) + " values");
  c.detector.widths = m.widths;
  c.detector.num_classes = num_classes;
  c.validate();
  return c;
}

std::vector<std::string> read_classes(const fs::path& data_root) {
  const fs::path p = data_root / "classes.txt";
  if (!fs::exists(p)) return opixray_classes();
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!is_known_class(line)) throw ConfigError(p.string() + ": unknown class '" + line + "'");
    out.push_back(line);
  }
  if (out.empty()) throw ConfigError(p.string() + ": no classes");
  return out;
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw IoError(what + " not found: " + p.string());
}

// gen-data ------------------------------------------------------------------

struct GenFlags {
  Common common;
  int n = 600;
  double test_fraction = 0.25;
  std::vector<double> occlusion_range{0.0, 1.0};
  int canvas = 300;
  std::vector<std::string> classes{"blade", "ring", "hook"};
  std::vector<int> occluders{2, 5};
  std::vector<int> targets{1, 2};
  std::vector<double> thresholds{0.2, 0.5};
};

void print_stats(std::ostream& os, const std::vector<std::string>& classes, const DatasetSplit& train,
                 const DatasetSplit& test) {
  std::vector<std::pair<std::string, std::vector<const AnnotatedImage*>>> rows;
  auto all = [](const DatasetSplit& s) {
    std::vector<const AnnotatedImage*> v;
    for (const auto& it : s.items) v.push_back(&it);
    return v;
  };
  rows.push_back({"train", all(train)});
  rows.push_back({"test", all(test)});
  for (int l = 1; l <= 3; ++l) {
    std::vector<const AnnotatedImage*> v;
    for (const auto& it : test.items)
      if (it.occlusion_level == l) v.push_back(&it);
    rows.push_back({"OL" + std::to_string(l), v});
  }
  os << std::left << std::setw(8) << "Split" << std::right << std::setw(8) << "Images";
  for (const auto& c : classes) os << std::setw(std::max<int>(8, static_cast<int>(c.size()) + 2)) << c;
  os << std::setw(8) << "Boxes" << '\n';
  for (const auto& [name, items] : rows) {
    std::map<std::string, int> counts;
    int boxes = 0;
    for (const auto* it : items)
      for (const auto& b : it->boxes) ++counts[b.class_name], ++boxes;
    os << std::left << std::setw(8) << name << std::right << std::setw(8) << items.size();
    for (const auto& c : classes) os << std::setw(std::max<int>(8, static_cast<int>(c.size()) + 2)) << counts[c];
    os << std::setw(8) << boxes << '\n';
  }
}

int cmd_gen_data(CLI::App& sub, GenFlags& f) {
  apply_config_file(sub, f.common.config);
  SynthConfig cfg;
  cfg.n_images = f.n;
  cfg.height = cfg.width = f.canvas;
  cfg.classes = f.classes;
  if (f.occlusion_range.size() != 2 || f.occluders.size() != 2 || f.targets.size() != 2 || f.thresholds.size() != 2)
    throw ConfigError("range flags take exactly two values");
  cfg.ratio_min = f.occlusion_range[0];
  cfg.ratio_max = f.occlusion_range[1];
  cfg.occluders_min = f.occluders[0];
  cfg.occluders_max = f.occluders[1];
  cfg.targets_min = f.targets[0];
  cfg.targets_max = f.targets[1];
  cfg.thresholds = {f.thresholds[0], f.thresholds[1]};
  if (!(0 < cfg.thresholds.partial && cfg.thresholds.partial < cfg.thresholds.severe && cfg.thresholds.severe < 1))
    throw ConfigError("level thresholds must satisfy 0 < t1 < t2 < 1");
  cfg.seed = f.common.seed;
  cfg.validate();
  if (!(f.test_fraction > 0 && f.test_fraction < 1)) throw ConfigError("--test-fraction must be in (0,1)");
  const int n_test = static_cast<int>(std::lround(f.n * f.test_fraction));
  if (n_test < 1 || n_test >= f.n) throw ConfigError("--n too small for the requested test fraction");
  const fs::path root = f.common.out;
  if (fs::exists(root) && !fs::is_directory(root)) throw IoError(root.string() + " exists and is not a directory");

  auto ds = generate_train_test(cfg, n_test);
  write_split(root, "train", ds.train.split);
  write_split(root, "test", ds.test.split);
  {
    std::ofstream os(root / "classes.txt");
    for (const auto& c : cfg.classes) os << c << '\n';
  }
  nlohmann::json meta = {{"config", synth_config_json(cfg)},
                         {"test_fraction", f.test_fraction},
                         {"regenerated", ds.train.regenerated + ds.test.regenerated},
                         {"images", split_meta_json(ds.train.split, "train")}};
  for (auto& j : split_meta_json(ds.test.split, "test")) meta["images"].push_back(j);
  std::ofstream(root / "meta.json") << meta.dump(1) << '\n';
  print_stats(std::cout, cfg.classes, ds.train.split, ds.test.split);
  std::cout << "regenerated scenes: " << ds.train.regenerated + ds.test.regenerated << '\n';
  return 0;
}

// train ---------------------------------------------------------------------

struct TrainFlags {
  Common common;
  ModelFlags model;
  std::string data;
  int epochs = 0;
  double lr = 1e-4, momentum = 0.9, weight_decay = 5e-4;
  int batch_size = 8;
};

int cmd_train(CLI::App& sub, TrainFlags& f) {
  apply_config_file(sub, f.common.config);
  TrainConfig tc;
  tc.learning_rate = f.lr;
  tc.momentum = f.momentum;
  tc.weight_decay = f.weight_decay;
  tc.batch_size = f.batch_size;
  tc.epochs = f.epochs;
  tc.seed = f.common.seed;
  tc.validate();
  require_dir(f.data, "data directory");
  const auto classes = read_classes(f.data);
  const auto mc = model_config(f.model, static_cast<int>(classes.size()), f.common.seed);
  auto train_split = load_dataset(f.data, "train");
  if (train_split.items.empty()) throw ConfigError("training split is empty");
  for (const auto& it : train_split.items)
    for (const auto& b : it.boxes) class_index(classes, b.class_name);
  auto data = prepare(train_split, classes, mc.height, mc.width);

  DetectionModel<float> model(mc);
  const fs::path out = f.common.out;
  fs::create_directories(out);
  std::cout << "variant " << to_string(mc.variant) << ", trainable parameters " << model.trainable_parameters() << '\n';
  std::ofstream csv(out / "loss.csv");
  TrainHooks hooks;
  hooks.log = &std::cerr;
  hooks.loss_csv = &csv;
  hooks.checkpoint_dir = out;
  hooks.classes = classes;
  auto res = train(model, data, tc, hooks);
  std::cout << "final epoch loss " << res.epoch_loss.back() << ", checkpoint " << (out / "last.ckpt").string() << '\n';
  return 0;
}

// eval ----------------------------------------------------------------------

struct EvalFlags {
  Common common;
  std::string data, checkpoint, detections, split = "test";
  double iou = 0.5, score_threshold = 0.01, nms_iou = 0.45;
};

int cmd_eval(CLI::App& sub, EvalFlags& f) {
  apply_config_file(sub, f.common.config);
  if (f.checkpoint.empty() == f.detections.empty()) throw ConfigError("give exactly one of --checkpoint or --detections");
  if (!(f.iou > 0 && f.iou <= 1)) throw ConfigError("--iou must be in (0,1]");
  require_dir(f.data, "data directory");
  auto split = load_dataset(f.data, f.split);
  DetectionsByImage dets;
  std::string method = "detections";
  if (!f.detections.empty()) {
    dets = read_detections_csv(f.detections);
  } else {
    auto loaded = load_checkpoint(f.checkpoint);
    PredictOptions opt;
    opt.score_threshold = f.score_threshold;
    opt.nms_iou = f.nms_iou;
    method = std::string(to_string(loaded.model.config.variant));
    dets = predict(loaded.model, split, loaded.meta.classes, opt);
  }
  auto rep = evaluate(dets, split, f.iou);
  if (rep.per_level.empty()) std::cerr << "notice: split has no occlusion levels; per-level section omitted\n";
  for (const auto& c : rep.flagged) std::cerr << "notice: class '" << c << "' detected but absent from ground truth\n";
  const fs::path out = f.common.out;
  fs::create_directories(out);
  std::ofstream(out / "report.json") << to_json(rep).dump(2) << '\n';
  const auto text = to_text(rep, method);
  std::ofstream(out / "report.txt") << text;
  if (f.detections.empty()) write_detections_csv(out / "detections.csv", dets);
  std::cout << text;
  return 0;
}

// report-complexity ---------------------------------------------------------

struct ComplexityFlags {
  Common common;
  ModelFlags model;
  int num_classes = 5;
};

int cmd_report_complexity(CLI::App& sub, ComplexityFlags& f) {
  apply_config_file(sub, f.common.config);
  if (f.num_classes < 1) throw ConfigError("--num-classes must be >= 1");
  auto base_flags = f.model;
  base_flags.variant = "baseline";
  const auto vc = model_config(f.model, f.num_classes, f.common.seed);
  const auto bc = model_config(base_flags, f.num_classes, f.common.seed);
  const auto vd = describe_model(vc), bd = describe_model(bc);
  const auto vp = count_parameters(vd), bp = count_parameters(bd);
  const double vf = estimate_flops(vd, 3, vc.height, vc.width), bf = estimate_flops(bd, 3, bc.height, bc.width);
  std::ostringstream os;
  os << "input " << vc.height << "x" << vc.width << "\n";
  os << std::left << std::setw(18) << "Model" << std::right << std::setw(12) << "PARAMs" << std::setw(12) << "SIZE(MB)"
     << std::setw(12) << "GFLOPs" << '\n';
  os << std::fixed;
  auto row = [&](const std::string& name, std::uint64_t p, double g) {
    os << std::left << std::setw(18) << name << std::right << std::setw(12) << p << std::setw(12) << std::setprecision(3)
       << model_size_mb(p) << std::setw(12) << std::setprecision(4) << g << '\n';
  };
  row("baseline", bp, bf);
  row(std::string(to_string(vc.variant)), vp, vf);
  os << std::setprecision(2) << "delta: +" << (vp - bp) << " params (" << 100.0 * double(vp - bp) / double(bp)
     << "%), +" << std::setprecision(4) << (vf - bf) << " GFLOPs (" << std::setprecision(2) << 100.0 * (vf - bf) / bf
     << "%)\n";
  std::cout << os.str();
  if (!f.common.out.empty()) {
    fs::create_directories(f.common.out);
    std::ofstream(fs::path(f.common.out) / "complexity.txt") << os.str();
  }
  return 0;
}

// visualize -----------------------------------------------------------------

struct VisFlags {
  Common common;
  std::string checkpoint;
  std::vector<std::string> images;
};

int cmd_visualize(CLI::App& sub, VisFlags& f) {
  apply_config_file(sub, f.common.config);
  auto loaded = load_checkpoint(f.checkpoint);
  if (!loaded.model.doam)
    throw ConfigError("checkpoint variant '" + std::string(to_string(loaded.model.config.variant)) +
                      "' has no attention module to visualise");
  std::vector<fs::path> files;
  for (const auto& p : f.images) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        const auto ext = e.path().extension();
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError("image not found: " + p);
    }
  }
  if (files.empty()) throw ConfigError("no input images");
  std::set<std::string> stems;
  for (const auto& p : files)
    if (!stems.insert(p.stem().string()).second) throw ConfigError("duplicate image name " + p.stem().string());
  const int h = loaded.model.config.height, w = loaded.model.config.width;
  std::vector<Tensor<float>> inputs;
  for (const auto& p : files) {
    auto img = read_image(p);
    inputs.push_back(img.dim(1) == h && img.dim(2) == w ? img : resize_bilinear(img, h, w));
  }
  const fs::path out = f.common.out;
  fs::create_directories(out);
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto [refined, attention] = doam_forward(inputs[i], *loaded.model.doam);
    const auto overlay = overlay_attention(inputs[i], attention);
    write_png(out / (files[i].stem().string() + "_attention.png"), side_by_side({inputs[i], overlay}));
  }
  std::cout << "wrote " << files.size() << " overlays to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"De-occlusion attention toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic occluded dataset");
  add_common(gen_cmd, gen.common, true);
  gen_cmd->add_option("--n", gen.n, "total number of images");
  gen_cmd->add_option("--test-fraction", gen.test_fraction, "fraction of images in the test split");
  gen_cmd->add_option("--occlusion-range", gen.occlusion_range, "min and max target occlusion ratio")->expected(2);
  gen_cmd->add_option("--canvas", gen.canvas, "square image size in pixels");
  gen_cmd->add_option("--classes", gen.classes, "archetypes: blade shears hook ring bar");
  gen_cmd->add_option("--occluders", gen.occluders, "min and max occluders per image")->expected(2);
  gen_cmd->add_option("--targets", gen.targets, "min and max targets per image")->expected(2);
  gen_cmd->add_option("--level-thresholds", gen.thresholds, "occlusion level boundaries")->expected(2);

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "train a detector variant");
  add_common(train_cmd, tr.common, true);
  add_model_flags(train_cmd, tr.model);
  required_after_config(train_cmd->add_option("--data", tr.data, "dataset root"));
  train_cmd->add_option("--epochs", tr.epochs, "number of epochs (mandatory)");
  train_cmd->add_option("--lr", tr.lr, "learning rate");
  train_cmd->add_option("--momentum", tr.momentum, "SGD momentum");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "L2 weight decay");
  train_cmd->add_option("--batch-size", tr.batch_size, "batch size");

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint or a detections file");
  add_common(eval_cmd, ev.common, true);
  required_after_config(eval_cmd->add_option("--data", ev.data, "dataset root"));
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  eval_cmd->add_option("--detections", ev.detections, "CSV image_id,class_name,score,xmin,ymin,xmax,ymax");
  eval_cmd->add_option("--split", ev.split, "train | test | OL1 | OL2 | OL3");
  eval_cmd->add_option("--iou", ev.iou, "IoU threshold for a true positive");
  eval_cmd->add_option("--score-threshold", ev.score_threshold, "minimum detection score");
  eval_cmd->add_option("--nms-iou", ev.nms_iou, "NMS IoU threshold");

  ComplexityFlags cx;
  auto* cx_cmd = app.add_subcommand("report-complexity", "parameter, size and FLOP comparison against the baseline");
  add_common(cx_cmd, cx.common, false);
  add_model_flags(cx_cmd, cx.model);
  cx_cmd->add_option("--num-classes", cx.num_classes, "detector classes");

  VisFlags vis;
  auto* vis_cmd = app.add_subcommand("visualize", "write attention overlays");
  add_common(vis_cmd, vis.common, true);
  required_after_config(vis_cmd->add_option("--checkpoint", vis.checkpoint, "model checkpoint"));
  required_after_config(vis_cmd->add_option("--images", vis.images, "image files or directories"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    if (*gen_cmd) return cmd_gen_data(*gen_cmd, gen);
    if (*train_cmd) return cmd_train(*train_cmd, tr);
    if (*eval_cmd) return cmd_eval(*eval_cmd, ev);
    if (*cx_cmd) return cmd_report_complexity(*cx_cmd, cx);
    if (*vis_cmd) return cmd_visualize(*vis_cmd, vis);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
