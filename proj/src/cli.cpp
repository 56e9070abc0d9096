#include "nemf/cli.hpp"

#include <sys/resource.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "nemf/config.hpp"
#include "nemf/error.hpp"
#include "nemf/eval_data.hpp"
#include "nemf/inference.hpp"
#include "nemf/parallel.hpp"
#include "nemf/training.hpp"

namespace nemf::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonOptions {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string output = ".";
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("-c,--config", o.config_file, "key=value configuration file");
  cmd->add_option("--set", o.overrides, "override a config key (key=value), repeatable");
  cmd->add_option("-o,--output", o.output, "output directory");
  cmd->add_option("--seed", o.seed, "random seed (falls back to NEMF_SEED, then 1)");
  cmd->add_option("--threads", o.threads, "worker threads; results do not depend on it");
}

// Defaults < NEMF_SEED < config file < --set < dedicated flags.
Config build_config(const CommonOptions& o) {
  Config cfg;
  if (const char* env = std::getenv("NEMF_SEED"); env != nullptr && *env != '\0') cfg.set("seed", env);
  if (!o.config_file.empty()) cfg.load_file(o.config_file);
  for (const auto& s : o.overrides) cfg.apply_override(s);
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  if (o.threads) cfg.set("threads", std::to_string(*o.threads));
  cfg.get_u64("seed");
  const std::size_t threads = cfg.get_size("threads");
  if (threads == 0) throw Error(ErrorCode::kConfig, "threads must be at least 1");
  set_num_threads(static_cast<int>(threads));
  return cfg;
}

template <typename T>
void set_if(Config& cfg, const char* key, const std::optional<T>& v) {
  if (!v) return;
  std::ostringstream os;
  os << std::setprecision(17) << *v;
  cfg.set(key, os.str());
}

fs::path prepare_output(const std::string& dir) {
  fs::path p(dir);
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create output directory " + dir + ": " + ec.message());
  return p;
}

fs::path resolve(const fs::path& base, const std::string& ref) {
  const fs::path p(ref);
  return p.is_absolute() ? p : base / p;
}

ImagePair load_images(const PairAnnotation& a, const fs::path& base) {
  ImagePair pair;
  pair.source = read_image(resolve(base, a.source));
  pair.target = read_image(resolve(base, a.target));
  pair.source_id = a.source;
  pair.target_id = a.target;
  return pair;
}

struct LoadedPair {
  ImagePair images;
  PairAnnotation annotation;
};

std::vector<LoadedPair> load_annotated_pairs(const std::string& data) {
  const DatasetLoad load = load_dataset(data);
  const fs::path base = fs::path(data).parent_path();
  std::vector<LoadedPair> out;
  std::vector<std::string> errors = load.errors;
  for (const auto& a : load.annotations) {
    try {
      out.push_back({load_images(a, base), a});
    } catch (const Error& e) {
      errors.push_back(a.source + " / " + a.target + ": " + e.what());
    }
  }
  for (const auto& e : errors) std::cerr << "skipped record, " << e << "\n";
  std::cerr << data << ": " << out.size() << " pairs loaded, " << errors.size() << " records rejected\n";
  return out;
}

double peak_rss_mib() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return static_cast<double>(usage.ru_maxrss) / 1024.0;
}

json points_json(std::span<const Point2> pts) {
  json out = json::array();
  for (const auto& p : pts) out.push_back({p.col, p.row});
  return out;
}

// ---- train -----------------------------------------------------------------

struct TrainOptions {
  CommonOptions common;
  std::string data;
  std::optional<std::size_t> synthetic;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::string> warp;
};

int cmd_train(const TrainOptions& o) {
  Config cfg = build_config(o.common);
  set_if(cfg, "steps", o.steps);
  set_if(cfg, "learning_rate", o.lr);
  set_if(cfg, "warp", o.warp);
  const ModelConfig model = cfg.model();
  LossConfig loss = cfg.loss();
  if (o.data.empty() && !o.synthetic) throw Error(ErrorCode::kConfig, "no training data: pass --data or --synthetic N");

  const fs::path out = prepare_output(o.common.output);
  cfg.write(out / "train.effective.cfg");

  std::vector<TrainingPair> pairs;
  if (o.synthetic) {
    const auto synth =
        generate_synthetic(*o.synthetic, parse_warp_family(cfg.get("warp")), cfg.get_u64("seed"), cfg.synthetic());
    for (const auto& s : synth) pairs.push_back(prepare_pair(s.images, s.annotation, model.extractor, model.embedder));
  } else {
    for (const auto& p : load_annotated_pairs(o.data)) {
      pairs.push_back(prepare_pair(p.images, p.annotation, model.extractor, model.embedder));
    }
  }
  if (pairs.empty()) throw Error(ErrorCode::kConfig, "no usable training pairs");

  loss.checkpoint_path = out / "model.nmfw";
  const auto t0 = std::chrono::steady_clock::now();
  const TrainingResult result = train(pairs, model, loss);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_model(out / "model.nmfw", result.field, result.embedder, model.extractor);
  write_loss_csv(out / "loss.csv", result.trace);

  std::cout << "trained " << result.trace.size() << " steps on " << pairs.size() << " pairs in " << std::fixed
            << std::setprecision(1) << seconds << " s\n";
  if (!result.trace.empty()) {
    std::cout << std::setprecision(4) << "L_total first " << result.trace.front().total << ", last "
              << result.trace.back().total << "\n";
  }
  std::cout << "wrote " << (out / "model.nmfw").string() << " and " << (out / "loss.csv").string() << "\n";
  return kExitOk;
}

// ---- infer -----------------------------------------------------------------

struct InferOptions {
  CommonOptions common;
  std::string model;
  std::string data;
  std::string source, target;
  std::optional<std::string> strategy;
  bool no_coord_opt = false;
  bool keypoints_only = false;
  bool png = false;
  std::optional<std::size_t> batch_size, rounds, random_candidates, lattice;
  std::optional<double> step_size;
};

int cmd_infer(const InferOptions& o) {
  Config cfg = build_config(o.common);
  set_if(cfg, "strategy", o.strategy);
  set_if(cfg, "batch_size", o.batch_size);
  set_if(cfg, "rounds", o.rounds);
  set_if(cfg, "random_candidates", o.random_candidates);
  set_if(cfg, "lattice", o.lattice);
  set_if(cfg, "step_size", o.step_size);
  if (o.no_coord_opt) cfg.set("coordinate_optimization", "false");
  if (o.keypoints_only) cfg.set("keypoints_only", "true");
  const InferenceConfig icfg = cfg.inference();
  const std::string strategy = cfg.get("strategy");
  if (strategy != "patchmatch" && strategy != "exhaustive") {
    throw Error(ErrorCode::kConfig, "strategy must be patchmatch or exhaustive, got '" + strategy + "'");
  }
  if (!fs::exists(o.model)) throw Error(ErrorCode::kConfig, "checkpoint not found: " + o.model);
  if (o.data.empty() && (o.source.empty() || o.target.empty())) {
    throw Error(ErrorCode::kConfig, "pass --data or both --source and --target");
  }

  const fs::path out = prepare_output(o.common.output);
  cfg.write(out / "infer.effective.cfg");
  const ModelBundle bundle = load_model(o.model);
  const EmbedderParams embedder = bundle.embedder.frozen();

  std::vector<LoadedPair> pairs;
  if (!o.data.empty()) {
    pairs = load_annotated_pairs(o.data);
  } else {
    LoadedPair p;
    p.images.source = read_image(o.source);
    p.images.target = read_image(o.target);
    p.annotation.source = o.source;
    p.annotation.target = o.target;
    pairs.push_back(std::move(p));
  }

  std::ofstream report(out / "infer_report.csv");
  report << "pair,strategy,batch_size,seconds,patchmatch_seconds,coordinate_seconds,peak_rss_mib\n";
  std::ofstream predictions;
  if (!o.data.empty()) predictions.open(out / "predictions.jsonl");

  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainingPair tp = prepare_pair(pairs[i].images, pairs[i].annotation, bundle.extractor, embedder.config);
    const auto& a = tp.annotation;
    const CostFeatureVolume volume = embed(tp.cost, embedder, a.source_extent, a.target_extent);
    const NeuralField field(bundle.field, volume);
    const std::size_t lattice = cfg.get_size("lattice");
    const InferenceGeometry geometry = lattice == 0
                                           ? InferenceGeometry::full_resolution(a.source_extent, a.target_extent)
                                           : InferenceGeometry::lattice(a.source_extent, a.target_extent, lattice, lattice);
    std::vector<Point2> sources;
    for (const auto& kp : a.keypoints) sources.push_back(kp.source);

    InferenceTrace trace;
    FlowField flow = strategy == "exhaustive"
                         ? infer_exhaustive(field, geometry, icfg.batch_size)
                         : infer_dense(field, pool(volume), geometry, icfg, sources, &trace);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::ostringstream stem;
    stem << "flow_" << std::setw(4) << std::setfill('0') << i;
    write_flow(out / (stem.str() + ".nmff"), flow);
    if (o.png) write_flow_png(out / (stem.str() + ".png"), flow);
    if (predictions.is_open()) {
      const json line = {{"src", a.source}, {"tgt", a.target}, {"pred", points_json(transfer_keypoints(flow, sources))}};
      predictions << line.dump() << "\n";
    }
    report << i << "," << strategy << "," << icfg.batch_size << "," << seconds << "," << trace.patchmatch_seconds
           << "," << trace.coordinate_seconds << "," << peak_rss_mib() << "\n";
    std::cout << "pair " << i << ": " << stem.str() << ".nmff in " << std::fixed << std::setprecision(3) << seconds
              << " s\n";
  }
  std::cout << "peak resident memory " << std::setprecision(1) << peak_rss_mib() << " MiB\n";
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

struct EvalOptions {
  CommonOptions common;
  std::string predictions;
  std::string annotations;
  std::optional<std::string> normalization;
};

int cmd_eval(const EvalOptions& o) {
  Config cfg = build_config(o.common);
  set_if(cfg, "pck_normalization", o.normalization);
  const PckNormalization norm = cfg.pck_normalization();
  const DatasetLoad load = load_dataset(o.annotations);
  if (!load.errors.empty()) {
    for (const auto& e : load.errors) std::cerr << e << "\n";
    throw Error(ErrorCode::kConfig, "annotation file has invalid records; predictions cannot be aligned");
  }
  std::ifstream in(o.predictions);
  if (!in) throw Error(ErrorCode::kConfig, "cannot read predictions " + o.predictions);
  std::vector<std::vector<Point2>> preds;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      const std::size_t idx = preds.size();
      if (idx >= load.annotations.size()) throw Error(ErrorCode::kShape, "more predictions than annotations");
      if (j.value("src", "") != load.annotations[idx].source || j.value("tgt", "") != load.annotations[idx].target) {
        throw Error(ErrorCode::kShape, "pair does not match annotation " + std::to_string(idx));
      }
      std::vector<Point2> pts;
      for (const auto& p : j.at("pred")) pts.push_back({p.at(1).get<double>(), p.at(0).get<double>()});
      preds.push_back(std::move(pts));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfig, o.predictions + ":" + std::to_string(number) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::kShape, o.predictions + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  if (preds.size() != load.annotations.size()) {
    throw Error(ErrorCode::kShape, std::to_string(preds.size()) + " prediction records for " +
                                       std::to_string(load.annotations.size()) + " annotations");
  }

  const fs::path out = prepare_output(o.common.output);
  cfg.write(out / "eval.effective.cfg");
  std::ofstream csv(out / "pck.csv");
  csv << "alpha_pck,pck,correct,total\n";
  std::cout << "alpha_pck    pck\n";
  for (double alpha : kPckThresholds) {
    PckCount total;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const PckCount c = pck_count(preds[i], load.annotations[i], {alpha, norm});
      total.correct += c.correct;
      total.total += c.total;
    }
    csv << alpha << "," << total.ratio() << "," << total.correct << "," << total.total << "\n";
    std::cout << std::fixed << std::setprecision(2) << std::setw(9) << alpha << "  " << std::setprecision(4)
              << total.ratio() << "\n";
  }
  return kExitOk;
}

// ---- export-field ----------------------------------------------------------

struct ExportOptions {
  CommonOptions common;
  std::string model;
  std::string source, target;
  std::vector<double> keypoint;
  std::size_t resolution = 0;
  std::optional<double> smoothing;
  std::optional<std::size_t> batch_size;
};

int cmd_export_field(const ExportOptions& o) {
  Config cfg = build_config(o.common);
  set_if(cfg, "smoothing_radius", o.smoothing);
  set_if(cfg, "batch_size", o.batch_size);
  if (!fs::exists(o.model)) throw Error(ErrorCode::kConfig, "checkpoint not found: " + o.model);
  if (o.keypoint.size() != 2) throw Error(ErrorCode::kConfig, "--keypoint takes x,y");
  const fs::path out = prepare_output(o.common.output);
  cfg.write(out / "export.effective.cfg");

  const ModelBundle bundle = load_model(o.model);
  const EmbedderParams embedder = bundle.embedder.frozen();
  ImagePair images;
  images.source = read_image(o.source);
  images.target = read_image(o.target);
  const TrainingPair tp = prepare_pair(images, {}, bundle.extractor, embedder.config);
  const auto& a = tp.annotation;
  const Point2 source{o.keypoint[1], o.keypoint[0]};
  if (source.row < 0 || source.col < 0 || source.row > static_cast<double>(a.source_extent.rows) - 1.0 ||
      source.col > static_cast<double>(a.source_extent.cols) - 1.0) {
    throw Error(ErrorCode::kConfig, "keypoint lies outside the source image");
  }
  const InferenceGeometry geometry =
      o.resolution == 0 ? InferenceGeometry::full_resolution(a.source_extent, a.target_extent)
                        : InferenceGeometry::lattice(a.source_extent, a.target_extent, o.resolution, o.resolution);
  const CostFeatureVolume volume = embed(tp.cost, embedder, a.source_extent, a.target_extent);
  const NeuralField field(bundle.field, volume);
  const FieldSlice slice =
      export_field_slice(field, geometry, source, cfg.get_size("batch_size"), cfg.get_double("smoothing_radius"));
  write_field_slice_csv(out / "field_slice.csv", slice);
  std::cout << "wrote " << (out / "field_slice.csv").string() << " (" << slice.rows << "x" << slice.cols << ")\n";
  return kExitOk;
}

// ---- gen-synthetic ---------------------------------------------------------

struct SynthOptions {
  CommonOptions common;
  std::size_t count = 1;
  std::optional<std::string> warp;
};

int cmd_gen_synthetic(const SynthOptions& o) {
  Config cfg = build_config(o.common);
  set_if(cfg, "warp", o.warp);
  const auto family = parse_warp_family(cfg.get("warp"));
  const fs::path out = prepare_output(o.common.output);
  cfg.write(out / "gen-synthetic.effective.cfg");
  const auto pairs = generate_synthetic(o.count, family, cfg.get_u64("seed"), cfg.synthetic());
  std::vector<PairAnnotation> annotations;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::ostringstream stem;
    stem << "pair_" << std::setw(4) << std::setfill('0') << i;
    PairAnnotation a = pairs[i].annotation;
    a.source = stem.str() + "_src.png";
    a.target = stem.str() + "_tgt.png";
    write_png(out / a.source, pairs[i].images.source);
    write_png(out / a.target, pairs[i].images.target);
    write_flow(out / (stem.str() + "_flow.nmff"), pairs[i].flow);
    annotations.push_back(std::move(a));
  }
  save_dataset(out / "annotations.jsonl", annotations);
  std::cout << "wrote " << pairs.size() << " " << warp_family_name(family) << " pairs to " << out.string() << "\n";
  return kExitOk;
}

int exit_code_for(ErrorCode code) {
  return code == ErrorCode::kNumerical || code == ErrorCode::kNonFinite ? kExitNumerical : kExitUsage;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Neural matching fields: dense semantic correspondence"};
  app.require_subcommand(1);

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "train a field model and write a checkpoint plus loss trace");
  add_common(train_cmd, train_o.common);
  train_cmd->add_option("--data", train_o.data, "JSON-lines annotation file");
  train_cmd->add_option("--synthetic", train_o.synthetic, "train on N generated pairs instead of --data");
  train_cmd->add_option("--steps", train_o.steps, "optimizer steps");
  train_cmd->add_option("--lr", train_o.lr, "learning rate");
  train_cmd->add_option("--warp", train_o.warp, "synthetic warp family: translation, affine, smooth");

  InferOptions infer_o;
  auto* infer_cmd = app.add_subcommand("infer", "dense correspondence for image pairs");
  add_common(infer_cmd, infer_o.common);
  infer_cmd->add_option("-m,--model", infer_o.model, "NMFW checkpoint")->required();
  infer_cmd->add_option("--data", infer_o.data, "JSON-lines annotation file");
  infer_cmd->add_option("--source", infer_o.source, "source image");
  infer_cmd->add_option("--target", infer_o.target, "target image");
  infer_cmd->add_option("--strategy", infer_o.strategy, "patchmatch or exhaustive");
  infer_cmd->add_flag("--no-coord-opt", infer_o.no_coord_opt, "skip coordinate optimization");
  infer_cmd->add_flag("--keypoints-only", infer_o.keypoints_only, "optimize coordinates only at annotated keypoints");
  infer_cmd->add_flag("--png", infer_o.png, "also write color-wheel renderings");
  infer_cmd->add_option("--batch-size", infer_o.batch_size, "field evaluations per batch");
  infer_cmd->add_option("--rounds", infer_o.rounds, "alternation rounds N");
  infer_cmd->add_option("--random", infer_o.random_candidates, "random candidates per pixel and round");
  infer_cmd->add_option("--step-size", infer_o.step_size, "coordinate descent step size");
  infer_cmd->add_option("--lattice", infer_o.lattice, "query lattice size per side (0 = every pixel)");

  EvalOptions eval_o;
  auto* eval_cmd = app.add_subcommand("eval", "PCK of predicted keypoints");
  add_common(eval_cmd, eval_o.common);
  eval_cmd->add_option("--predictions", eval_o.predictions, "predictions.jsonl from infer")->required();
  eval_cmd->add_option("--annotations", eval_o.annotations, "JSON-lines annotation file")->required();
  eval_cmd->add_option("--normalization", eval_o.normalization, "bbox or img");

  ExportOptions export_o;
  auto* export_cmd = app.add_subcommand("export-field", "score grid M([x, .]) over the target image as CSV");
  add_common(export_cmd, export_o.common);
  export_cmd->add_option("-m,--model", export_o.model, "NMFW checkpoint")->required();
  export_cmd->add_option("--source", export_o.source, "source image")->required();
  export_cmd->add_option("--target", export_o.target, "target image")->required();
  export_cmd->add_option("--keypoint", export_o.keypoint, "source keypoint x,y")->required()->delimiter(',');
  export_cmd->add_option("--resolution", export_o.resolution, "grid nodes per side (0 = every pixel)");
  export_cmd->add_option("--smoothing", export_o.smoothing, "Gaussian sigma in grid cells");
  export_cmd->add_option("--batch-size", export_o.batch_size, "field evaluations per batch");

  SynthOptions synth_o;
  auto* synth_cmd = app.add_subcommand("gen-synthetic", "write synthetic image pairs, annotations and exact flows");
  add_common(synth_cmd, synth_o.common);
  synth_cmd->add_option("--count", synth_o.count, "number of pairs")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--warp", synth_o.warp, "translation, affine or smooth");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_o);
    if (infer_cmd->parsed()) return cmd_infer(infer_o);
    if (eval_cmd->parsed()) return cmd_eval(eval_o);
    if (export_cmd->parsed()) return cmd_export_field(export_o);
    if (synth_cmd->parsed()) return cmd_gen_synthetic(synth_o);
  } catch (const Error& e) {
    std::cerr << "nemf: " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "nemf: " << e.what() << "\n";
    return 1;
  }
  return kExitUsage;
}

}  // namespace nemf::cli
