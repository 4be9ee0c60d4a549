#include "protodet/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "protodet/dataio.hpp"
#include "protodet/detector.hpp"
#include "protodet/errors.hpp"
#include "protodet/evaluation.hpp"
#include "protodet/training.hpp"
#include "protodet/viz.hpp"

namespace protodet::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

ClassSplit class_split(const std::string& name, int num_classes) {
  if (num_classes < 3) throw ConfigError("a class split needs at least 3 classes");
  ClassSplit s;
  for (int c = 0; c < num_classes; ++c) {
    const bool novel = name == "A" ? c >= num_classes - 2 : name == "B" ? c < 2 : false;
    if (name != "A" && name != "B") throw ConfigError("unknown class split '" + name + "'");
    (novel ? s.novel : s.base).push_back(c);
  }
  return s;
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  KeyValues kv = KeyValues::parse(std::string("v = ") + text);
  try {
    return kv.get_int_list("v", {});
  } catch (const ConfigError&) {
    throw ConfigError(std::string("bad ") + what + " list '" + text + "'");
  }
}

std::string join(const std::vector<int>& v) { return join_ints(v); }

/// Manifest written next to every command's outputs.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args) {
    doc_["format"] = 1;
    doc_["command"] = std::move(command);
    doc_["argv"] = args;
    doc_["started"] = utc_now();
    doc_["config"] = json::object();
    doc_["seeds"] = json::object();
    doc_["outputs"] = json::array();
  }
  void config(const KeyValues& kv) {
    for (const auto& [k, v] : kv.entries()) doc_["config"][k] = v;
  }
  void seed(const std::string& name, std::uint64_t v) { doc_["seeds"][name] = v; }
  void dataset(const fs::path& root, const std::string& hash) {
    doc_["dataset"] = root.string();
    doc_["dataset_hash"] = hash;
  }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
  void write(const fs::path& dir) {
    doc_["finished"] = utc_now();
    std::ofstream out(dir / "manifest.json");
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  int images = 100;
  int classes = 7;
  int size = 128;
  int min_objects = 1;
  int max_objects = 4;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_data(const GenArgs& a, const std::vector<std::string>& argv, std::ostream& out) {
  SynthConfig sc;
  sc.num_images = a.images;
  sc.num_classes = a.classes;
  sc.image_size = a.size;
  sc.min_objects = a.min_objects;
  sc.max_objects = a.max_objects;
  sc.seed = a.seed;
  const DatasetIndex ds = generate_synthetic_dataset(sc);
  ensure_dir(a.out);
  save_dataset(ds, a.out);
  const std::string hash = dataset_content_hash(a.out);
  Manifest m("gen-data", argv);
  m.seed("data", a.seed);
  m.dataset(a.out, hash);
  m.output(fs::path(a.out) / "images");
  m.output(fs::path(a.out) / "labels");
  m.output(fs::path(a.out) / "classes.txt");
  m.write(a.out);
  out << "wrote " << ds.records().size() << " images to " << a.out << " (sha256 " << hash << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out, config, split = "A", novel;
  bool hem = false, ma = false, bc = false;
  int iterations = 0, n_way = 0, k_shot = 0, eval_every = 0, patience = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double val_fraction = 0.1, eval_fraction = 0.2;
  CLI::Option *o_hem = nullptr, *o_ma = nullptr, *o_bc = nullptr, *o_iterations = nullptr, *o_seed = nullptr,
              *o_lr = nullptr, *o_n = nullptr, *o_k = nullptr, *o_eval_every = nullptr, *o_patience = nullptr;
};

struct TrainSetup {
  ModelConfig model;
  TrainConfig train;
};

TrainSetup resolve_train_config(const TrainArgs& a, std::ostream& err) {
  TrainSetup s;
  if (!a.config.empty()) std::tie(s.model, s.train) = load_config(a.config);
  auto override_bool = [&](CLI::Option* opt, const char* key, bool& field, bool value) {
    if (!opt || opt->count() == 0) return;
    if (!a.config.empty() && field != value) {
      err << "flag --" << key << " overrides config value " << key << "=" << (field ? "true" : "false") << '\n';
    }
    field = value;
  };
  auto override_num = [&](CLI::Option* opt, const char* key, auto& field, auto value) {
    if (!opt || opt->count() == 0) return;
    if (!a.config.empty() && field != value) {
      err << "flag --" << key << " overrides config value " << key << "=" << field << '\n';
    }
    field = static_cast<std::decay_t<decltype(field)>>(value);
  };
  override_bool(a.o_hem, "hem", s.train.hem, a.hem);
  override_bool(a.o_ma, "ma", s.train.ma, a.ma);
  override_bool(a.o_bc, "bc", s.train.bc, a.bc);
  override_num(a.o_iterations, "iterations", s.train.max_iterations, a.iterations);
  override_num(a.o_seed, "seed", s.train.seed, a.seed);
  override_num(a.o_lr, "lr", s.train.learning_rate, a.lr);
  override_num(a.o_n, "n-way", s.train.n_way, a.n_way);
  override_num(a.o_k, "k-shot", s.train.k_shot, a.k_shot);
  override_num(a.o_eval_every, "eval-every", s.train.eval_every, a.eval_every);
  override_num(a.o_patience, "patience", s.train.patience, a.patience);
  s.model.validate();
  s.train.validate();
  return s;
}

ClassSplit resolve_split(const std::string& split, const std::string& novel, int num_classes) {
  ClassSplit cs = class_split(split, num_classes);
  if (!novel.empty()) {
    cs.novel = parse_int_list(novel, "class");
    cs.base.clear();
    const std::set<int> held(cs.novel.begin(), cs.novel.end());
    for (int c : cs.novel) {
      if (c < 0 || c >= num_classes) throw ConfigError("novel class " + std::to_string(c) + " out of range");
    }
    for (int c = 0; c < num_classes; ++c) {
      if (!held.count(c)) cs.base.push_back(c);
    }
  }
  if (cs.base.empty() || cs.novel.empty()) throw ConfigError("both base and novel classes are required");
  return cs;
}

struct TrainOutcome {
  FitResult fit;
  fs::path checkpoint;
};

TrainOutcome train_into(const DatasetIndex& ds, const std::string& dataset_hash, const TrainSetup& setup,
                        const ClassSplit& cs, double val_fraction, double eval_fraction, const fs::path& dir,
                        std::ostream& out) {
  ensure_dir(dir);
  {
    std::ofstream cfg(dir / "config.cfg");
    cfg << format_config(setup.model, setup.train);
  }
  const ImageSplit split = split_images(ds, val_fraction, eval_fraction);
  Detector<float> detector(setup.model);
  Trainer trainer(detector, ds, setup.train);
  FitOptions fo;
  fo.train_classes = cs.base;
  fo.train_images = split.train;
  fo.val_images = split.val;
  fo.metric_log = dir / "metrics.log";
  fo.last_checkpoint = dir / "last.ckpt";
  fo.val_settings.score_threshold = setup.model.score_threshold;
  fs::remove(fo.metric_log);
  TrainOutcome outcome;
  outcome.fit = trainer.fit(fo);

  KeyValues meta;
  meta.set("iteration", std::to_string(outcome.fit.best_iteration));
  meta.set("iterations_run", std::to_string(outcome.fit.iterations));
  meta.set("val_map", format_double(outcome.fit.best_val_map));
  meta.set("flags", setup.train.flag_name());
  meta.set("seed", std::to_string(setup.train.seed));
  meta.set("base_classes", join(cs.base));
  meta.set("novel_classes", join(cs.novel));
  meta.set("val_fraction", format_double(val_fraction));
  meta.set("eval_fraction", format_double(eval_fraction));
  meta.set("dataset_hash", dataset_hash);
  outcome.checkpoint = dir / "model.ckpt";
  save_checkpoint(make_checkpoint(detector, PrototypeBank{}, meta), outcome.checkpoint);
  out << setup.train.flag_name() << ": " << outcome.fit.iterations << " episodes, best val mAP "
      << format_double(outcome.fit.best_val_map) << " at episode " << outcome.fit.best_iteration << '\n';
  return outcome;
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const TrainSetup setup = resolve_train_config(a, err);
  const DatasetIndex ds = load_dataset(a.data);
  const std::string hash = dataset_content_hash(a.data);
  const ClassSplit cs = resolve_split(a.split, a.novel, ds.num_classes());
  const TrainOutcome outcome = train_into(ds, hash, setup, cs, a.val_fraction, a.eval_fraction, a.out, out);
  Manifest m("train", argv);
  KeyValues kv;
  setup.model.write(kv);
  setup.train.write(kv);
  m.config(kv);
  m.seed("train", setup.train.seed);
  m.seed("init", setup.model.init_seed);
  m.dataset(a.data, hash);
  for (const char* f : {"config.cfg", "metrics.log", "last.ckpt", "model.ckpt"}) m.output(fs::path(a.out) / f);
  m.write(a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint, data, out, shots = "1,3,5,10", split = "both";
  int runs = 5;
  std::uint64_t seed = 0;
  double score_threshold = -1.0;
  double iou = kDefaultEvalIou;
};

struct LoadedModel {
  Checkpoint ckpt;
  std::unique_ptr<Detector<float>> detector;
  ClassSplit classes;
  double val_fraction = 0.1, eval_fraction = 0.2;
};

LoadedModel load_model(const fs::path& path, std::ostream& err, const std::string& data_hash) {
  LoadedModel m;
  if (!fs::exists(path)) throw IoError("checkpoint " + path.string() + " not found");
  m.ckpt = load_checkpoint(path);
  m.detector = std::make_unique<Detector<float>>(m.ckpt.model);
  load_weights(*m.detector, m.ckpt);
  const KeyValues& meta = m.ckpt.meta;
  m.classes.base = meta.get_int_list("base_classes", {});
  m.classes.novel = meta.get_int_list("novel_classes", {});
  m.val_fraction = meta.get_double("val_fraction", m.val_fraction);
  m.eval_fraction = meta.get_double("eval_fraction", m.eval_fraction);
  if (m.classes.base.empty()) throw ConfigError("checkpoint lacks its class split");
  const std::string trained_on = meta.get_string("dataset_hash", "");
  if (!trained_on.empty() && trained_on != data_hash) {
    err << "warning: dataset differs from the one the checkpoint was trained on\n";
  }
  return m;
}

std::vector<EvalReport> evaluate_model(const LoadedModel& m, const DatasetIndex& ds, const std::vector<int>& shots,
                                       int runs, std::uint64_t seed, const std::string& which,
                                       const EvalSettings& settings) {
  const ImageSplit split = split_images(ds, m.val_fraction, m.eval_fraction);
  std::vector<std::pair<std::string, std::vector<int>>> parts;
  if (which == "train" || which == "both") parts.emplace_back("train", m.classes.base);
  if ((which == "test" || which == "both") && !m.classes.novel.empty()) parts.emplace_back("test", m.classes.novel);
  std::vector<EvalReport> reports;
  for (const auto& [name, classes] : parts) {
    for (int k : shots) {
      for (int r = 0; r < runs; ++r) {
        reports.push_back(evaluate_split(*m.detector, ds, split.eval, classes, name, k, r,
                                         mix_seed(seed, static_cast<std::uint64_t>(r)), settings));
      }
    }
  }
  return reports;
}

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const DatasetIndex ds = load_dataset(a.data);
  const std::string hash = dataset_content_hash(a.data);
  const LoadedModel m = load_model(a.checkpoint, err, hash);
  const std::vector<int> shots = parse_int_list(a.shots, "shots");
  EvalSettings settings{a.iou, a.score_threshold >= 0 ? a.score_threshold : m.ckpt.model.score_threshold};
  const auto reports = evaluate_model(m, ds, shots, a.runs, a.seed, a.split, settings);
  ensure_dir(a.out);
  save_reports(reports, fs::path(a.out) / "reports.tsv");
  const auto rows = summarize_reports(reports);
  {
    std::ofstream s(fs::path(a.out) / "summary.tsv");
    write_summary(s, rows);
  }
  write_summary(out, rows);
  Manifest man("eval", argv);
  KeyValues kv;
  m.ckpt.model.write(kv);
  kv.set("shots", a.shots);
  kv.set("runs", std::to_string(a.runs));
  kv.set("split", a.split);
  kv.set("eval_score_threshold", format_double(settings.score_threshold));
  kv.set("iou_threshold", format_double(settings.iou_threshold));
  kv.set("checkpoint", a.checkpoint);
  man.config(kv);
  man.seed("eval", a.seed);
  man.dataset(a.data, hash);
  man.output(fs::path(a.out) / "reports.tsv");
  man.output(fs::path(a.out) / "summary.tsv");
  man.write(a.out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
  TrainArgs train;
  std::string shots = "1,3,5,10";
  int runs = 5;
  std::uint64_t eval_seed = 0;
  bool reuse = false;
  bool from_reports = false;
  double score_threshold = -1.0;
};

int cmd_ablate(AblateArgs a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const std::vector<int> shots = parse_int_list(a.shots, "shots");
  const fs::path root = a.train.out;
  ensure_dir(root);
  std::string hash;
  std::map<std::string, std::vector<EvalReport>> reports;
  Manifest man("ablate", argv);
  if (!a.from_reports) {
    const DatasetIndex ds = load_dataset(a.train.data);
    hash = dataset_content_hash(a.train.data);
    man.dataset(a.train.data, hash);
    const ClassSplit cs = resolve_split(a.train.split, a.train.novel, ds.num_classes());
    for (const std::string& name : kAblationConfigs) {
      TrainArgs ta = a.train;
      TrainSetup setup = resolve_train_config(ta, err);
      setup.train.hem = name.find("hem") != std::string::npos;
      setup.train.ma = name.find("ma") != std::string::npos;
      setup.train.bc = name.find("bc") != std::string::npos;
      const fs::path dir = root / name;
      fs::path ckpt = dir / "model.ckpt";
      if (!(a.reuse && fs::exists(ckpt))) {
        ckpt = train_into(ds, hash, setup, cs, ta.val_fraction, ta.eval_fraction, dir, out).checkpoint;
      }
      const LoadedModel m = load_model(ckpt, err, hash);
      EvalSettings settings{kDefaultEvalIou, a.score_threshold >= 0 ? a.score_threshold : m.ckpt.model.score_threshold};
      save_reports(evaluate_model(m, ds, shots, a.runs, a.eval_seed, "both", settings), dir / "reports.tsv");
      man.output(dir / "model.ckpt");
      man.output(dir / "reports.tsv");
      if (name == kAblationConfigs.front()) {
        KeyValues kv;
        setup.model.write(kv);
        setup.train.write(kv);
        kv.set("hem", "ablated");
        kv.set("ma", "ablated");
        kv.set("bc", "ablated");
        kv.set("shots", a.shots);
        kv.set("runs", std::to_string(a.runs));
        kv.set("eval_score_threshold", format_double(settings.score_threshold));
        man.config(kv);
        man.seed("train", setup.train.seed);
      }
    }
  }
  for (const std::string& name : kAblationConfigs) reports[name] = load_reports(root / name / "reports.tsv");
  const auto cells = ablation_table(reports, kAblationConfigs, {"train", "test"}, shots);
  {
    std::ofstream csv(root / "ablation.csv");
    write_ablation_csv(csv, cells);
  }
  write_ablation_csv(out, cells);
  man.seed("eval", a.eval_seed);
  man.output(root / "ablation.csv");
  man.write(root);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// viz-embeddings

struct VizArgs {
  std::string checkpoint, data, out, split = "train", method = "pca";
  int images = 20;
  int negatives = 8;
  int size = 512;
  std::uint64_t seed = 0;
};

int cmd_viz(const VizArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const DatasetIndex ds = load_dataset(a.data);
  const std::string hash = dataset_content_hash(a.data);
  const LoadedModel m = load_model(a.checkpoint, err, hash);
  const ImageSplit split = split_images(ds, m.val_fraction, m.eval_fraction);
  const std::vector<int>& classes = a.split == "test" ? m.classes.novel : m.classes.base;
  const std::set<int> wanted(classes.begin(), classes.end());

  std::vector<Vector> points;
  std::vector<int> labels;
  Rng rng(a.seed);
  int used = 0;
  for (const std::string& id : split.eval) {
    if (used >= a.images) break;
    const ImageRecord& rec = ds.record(id);
    std::vector<Box> boxes;
    std::vector<int> box_labels;
    std::vector<Box> gt;
    for (const Annotation& ann : rec.annotations) gt.push_back(ann.box);
    for (const Annotation& ann : rec.annotations) {
      if (!wanted.count(ann.class_id)) continue;
      boxes.push_back(ann.box);
      box_labels.push_back(ann.class_id);
    }
    if (boxes.empty()) continue;
    ++used;
    // Background boxes that overlap no object.
    for (int tries = 0, got = 0; got < a.negatives && tries < 200; ++tries) {
      const double w = rng.uniform(12.0, 44.0), h = rng.uniform(12.0, 44.0);
      const double x = rng.uniform(0.0, rec.image.width - w), y = rng.uniform(0.0, rec.image.height - h);
      const Box b{x, y, x + w, y + h};
      double worst = 0.0;
      for (const Box& g : gt) worst = std::max(worst, iou(b, g));
      if (worst >= 0.3) continue;
      boxes.push_back(b);
      box_labels.push_back(kBackgroundLabel);
      ++got;
    }
    const FeaturePyramid<float> f = m.detector->extract_features(rec.image);
    const HeadOutput h = m.detector->head_embed(f, boxes);
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      points.push_back(h.embeddings[i].values());
      labels.push_back(box_labels[i]);
    }
  }
  if (points.empty()) throw ReportError("no embeddings to plot");
  const std::vector<Point2> xy = a.method == "tsne" ? tsne_project(points, TsneSettings{30.0, 500, 100.0, a.seed})
                                                    : pca_project(points);
  ensure_dir(a.out);
  const fs::path png = fs::path(a.out) / "embeddings.png";
  const fs::path tsv = fs::path(a.out) / "embeddings.tsv";
  write_png(render_scatter(xy, labels, a.size), png);
  {
    std::ofstream t(tsv);
    t << "label\tx\ty\n";
    for (std::size_t i = 0; i < xy.size(); ++i) {
      t << labels[i] << '\t' << format_double(xy[i][0]) << '\t' << format_double(xy[i][1]) << '\n';
    }
  }
  Manifest man("viz-embeddings", argv);
  KeyValues kv;
  kv.set("checkpoint", a.checkpoint);
  kv.set("method", a.method);
  kv.set("images", std::to_string(a.images));
  kv.set("negatives", std::to_string(a.negatives));
  kv.set("split", a.split);
  man.config(kv);
  man.seed("viz", a.seed);
  man.dataset(a.data, hash);
  man.output(png);
  man.output(tsv);
  man.write(a.out);
  out << "plotted " << points.size() << " embeddings to " << png.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

std::vector<std::string> replay_args(const fs::path& manifest, const std::string& new_out) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open manifest " + manifest.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.contains("argv") || !doc["argv"].is_array()) throw IoError("manifest lacks argv");
  std::vector<std::string> args = doc["argv"].get<std::vector<std::string>>();
  if (!args.empty() && args.front() == "replay") throw ConfigError("refusing to replay a replay manifest");
  if (!new_out.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
      if (args[i] == "--out") {
        args[i + 1] = new_out;
        replaced = true;
      }
    }
    for (std::string& s : args) {
      if (s.rfind("--out=", 0) == 0) {
        s = "--out=" + new_out;
        replaced = true;
      }
    }
    if (!replaced) throw ConfigError("manifest command has no --out to redirect");
  }
  return args;
}

void add_train_options(CLI::App* cmd, TrainArgs& t) {
  cmd->add_option("--data", t.data, "dataset directory")->required();
  cmd->add_option("--out", t.out, "run directory")->required();
  cmd->add_option("--config", t.config, "key = value config file")->check(CLI::ExistingFile);
  t.o_hem = cmd->add_flag("--hem,!--no-hem", t.hem, "hard example mining");
  t.o_ma = cmd->add_flag("--ma,!--no-ma", t.ma, "moving-average prototypes");
  t.o_bc = cmd->add_flag("--bc,!--no-bc", t.bc, "background clustering");
  t.o_iterations = cmd->add_option("--iterations", t.iterations, "training episodes")->check(CLI::NonNegativeNumber);
  t.o_seed = cmd->add_option("--seed", t.seed, "training seed");
  t.o_lr = cmd->add_option("--lr", t.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  t.o_n = cmd->add_option("--n-way", t.n_way, "classes per episode")->check(CLI::PositiveNumber);
  t.o_k = cmd->add_option("--k-shot", t.k_shot, "support exemplars per class")->check(CLI::PositiveNumber);
  t.o_eval_every = cmd->add_option("--eval-every", t.eval_every, "episodes between validations")->check(CLI::NonNegativeNumber);
  t.o_patience = cmd->add_option("--patience", t.patience, "validations without gain before stopping")->check(CLI::NonNegativeNumber);
  cmd->add_option("--split", t.split, "class split")->check(CLI::IsMember({"A", "B"}));
  cmd->add_option("--novel-classes", t.novel, "held-out class ids, comma separated");
  cmd->add_option("--val-fraction", t.val_fraction, "fraction of images for validation")->check(CLI::Range(0.0, 0.5));
  cmd->add_option("--eval-fraction", t.eval_fraction, "fraction of images for evaluation")->check(CLI::Range(0.01, 0.9));
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth) {
  CLI::App app{"Prototypical few-shot detector"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  GenArgs g;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--images", g.images)->check(CLI::PositiveNumber);
  gen->add_option("--classes", g.classes);
  gen->add_option("--size", g.size);
  gen->add_option("--min-objects", g.min_objects);
  gen->add_option("--max-objects", g.max_objects);
  gen->add_option("--seed", g.seed);
  gen->add_option("--out", g.out, "output directory")->required();

  TrainArgs t;
  auto* train = app.add_subcommand("train", "episodic training");
  add_train_options(train, t);

  EvalArgs e;
  auto* eval = app.add_subcommand("eval", "k-shot evaluation");
  eval->add_option("--checkpoint", e.checkpoint)->required();
  eval->add_option("--data", e.data)->required();
  eval->add_option("--out", e.out)->required();
  eval->add_option("--shots", e.shots, "comma separated shot counts");
  eval->add_option("--runs", e.runs)->check(CLI::PositiveNumber);
  eval->add_option("--split", e.split)->check(CLI::IsMember({"train", "test", "both"}));
  eval->add_option("--seed", e.seed);
  eval->add_option("--score-threshold", e.score_threshold)->check(CLI::Range(0.0, 1.0));
  eval->add_option("--iou", e.iou)->check(CLI::Range(0.0, 1.0));

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the four flag configurations");
  add_train_options(ablate, ab.train);
  ablate->add_option("--shots", ab.shots);
  ablate->add_option("--runs", ab.runs)->check(CLI::PositiveNumber);
  ablate->add_option("--eval-seed", ab.eval_seed);
  ablate->add_option("--score-threshold", ab.score_threshold)->check(CLI::Range(0.0, 1.0));
  ablate->add_flag("--reuse-checkpoints", ab.reuse);
  ablate->add_flag("--from-reports", ab.from_reports, "only rebuild the table from stored reports");

  VizArgs v;
  auto* viz = app.add_subcommand("viz-embeddings", "2D projection of head embeddings");
  viz->add_option("--checkpoint", v.checkpoint)->required();
  viz->add_option("--data", v.data)->required();
  viz->add_option("--out", v.out)->required();
  viz->add_option("--split", v.split)->check(CLI::IsMember({"train", "test"}));
  viz->add_option("--method", v.method)->check(CLI::IsMember({"pca", "tsne"}));
  viz->add_option("--images", v.images)->check(CLI::PositiveNumber);
  viz->add_option("--negatives", v.negatives)->check(CLI::NonNegativeNumber);
  viz->add_option("--size", v.size)->check(CLI::Range(32, 4096));
  viz->add_option("--seed", v.seed);

  std::string manifest_path, replay_out;
  auto* replay = app.add_subcommand("replay", "re-run a command from its manifest");
  replay->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  replay->add_option("--out", replay_out, "redirect outputs");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& ex) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& ex) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << '\n';
    return kExitUsage;
  }

  if (gen->parsed()) return cmd_gen_data(g, args, out);
  if (train->parsed()) return cmd_train(t, args, out, err);
  if (eval->parsed()) return cmd_eval(e, args, out, err);
  if (ablate->parsed()) return cmd_ablate(ab, args, out, err);
  if (viz->parsed()) return cmd_viz(v, args, out, err);
  if (replay->parsed()) {
    if (depth > 0) throw ConfigError("nested replay");
    return dispatch(replay_args(manifest_path, replay_out), out, err, depth + 1);
  }
  return kExitUsage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err, 0);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitFailure;
  }
}

int main_entry(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace protodet::cli
