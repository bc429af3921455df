#pragma once

// Command-line front end: gen-data, train, predict, eval, gt-compare and
// convert. Exit codes: 0 success, 2 usage error, 3 data error.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "incarpose/checkpoint.hpp"
#include "incarpose/errors.hpp"
#include "incarpose/geom3.hpp"
#include "incarpose/imageproc.hpp"
#include "incarpose/labels.hpp"
#include "incarpose/model.hpp"
#include "incarpose/posefile.hpp"
#include "incarpose/synthgen.hpp"

namespace incarpose::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;

inline constexpr const char* kPosesFile = "poses.json";
inline constexpr const char* kDatasetInfoFile = "dataset.json";
inline constexpr const char* kImageDir = "images";

/// INCARPOSE_SEED when set, otherwise `fallback`.
inline std::uint64_t default_seed(std::uint64_t fallback = 0) {
  const char* s = std::getenv("INCARPOSE_SEED");
  if (!s || !*s) return fallback;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end != '\0' || s[0] == '-') throw InvalidArgument(std::string("INCARPOSE_SEED is not an unsigned integer: ") + s);
  return v;
}

// ---------------------------------------------------------------------------
// Datasets on disk: <dir>/poses.json (absolute poses plus pairs),
// <dir>/images/<image_id>.pgm and <dir>/dataset.json (generation settings).

struct DiskDataset {
  PoseFile poses;
  std::vector<PairSample> samples;
  std::vector<std::string> query_ids;
};

inline std::string image_path(const std::filesystem::path& dir, const std::string& id) {
  return (dir / kImageDir / (id + ".pgm")).string();
}

inline DiskDataset load_dataset_dir(const std::string& dir) {
  DiskDataset d;
  d.poses = read_pose_file((std::filesystem::path(dir) / kPosesFile).string());
  if (!d.poses.pairs || d.poses.pairs->empty()) throw DataError("dataset '" + dir + "' lists no pairs");
  std::map<std::string, ImageF> cache;
  const auto image = [&](const std::string& id) -> const ImageF& {
    auto it = cache.find(id);
    if (it == cache.end()) it = cache.emplace(id, read_pnm(image_path(dir, id))).first;
    return it->second;
  };
  for (const PairRef& p : *d.poses.pairs) {
    d.samples.push_back({image(p.ref_id), image(p.query_id),
                         relative_pose(d.poses.find(p.ref_id).pose(), d.poses.find(p.query_id).pose())});
    d.query_ids.push_back(p.query_id);
  }
  return d;
}

inline std::string pair_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair%06zu", i);
  return buf;
}

inline std::string scene_ref_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene%02zu_ref", k);
  return buf;
}

inline void write_dataset_dir(const std::string& dir, const SyntheticDataset& d, const nlohmann::json& info) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / kImageDir);
  PoseFile f;
  f.frame = "scene";
  f.pairs.emplace();
  std::vector<bool> ref_written(d.scene_seeds.size(), false);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const std::size_t k = d.scene_index[i];
    const std::string ref = scene_ref_id(k), query = pair_id(i);
    if (!ref_written[k]) {
      write_pnm(image_path(dir, ref), d.samples[i].img_ref);
      f.entries.push_back(PoseEntry::from_pose(ref, d.views[i].ref_view));
      ref_written[k] = true;
    }
    write_pnm(image_path(dir, query), d.samples[i].img_2);
    f.entries.push_back(PoseEntry::from_pose(query, d.views[i].second_view));
    f.pairs->push_back({ref, query});
  }
  write_pose_file((fs::path(dir) / kPosesFile).string(), f);
  write_text_file((fs::path(dir) / kDatasetInfoFile).string(), info.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Configs

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// {"preset": "toy" | "paper", "model": {...}, "train": {...}}; fields
/// absent from the document keep the preset's values.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  try {
    const std::string preset = j.value("preset", "toy");
    if (preset == "paper") {
      c.model = ModelConfig::paper();
      c.train = TrainConfig::paper();
    } else if (preset != "toy") {
      throw InvalidArgument("unknown preset '" + preset + "'");
    }
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("train")) from_json(j.at("train"), c.train);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad config: ") + e.what());
  }
  c.model.validate();
  c.train.loss_cfg.validate();
  return c;
}

inline nlohmann::json metrics_json(const EvalMetrics& m) {
  return {{"median_rotation_deg", m.median_rotation_deg},
          {"median_translation_m", m.median_translation_m},
          {"median_consistency_deg", m.median_consistency_deg}};
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::size_t pairs = 0;
  std::optional<std::uint64_t> seed;
  std::string out;
  SamplingRanges ranges;
  std::string split = "train";
  std::optional<int> scenes;
  int image_size = 32;
  double focal = 10.0;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  if (a.pairs < 1) throw InvalidArgument("--pairs must be >= 1");
  const std::uint64_t seed = a.seed ? *a.seed : default_seed();
  const bool val = a.split == "val";
  const int n_scenes = a.scenes ? *a.scenes : (val ? 3 : 8);
  const auto [train_seeds, val_seeds] = split_scene_seeds(seed, val ? 1 : n_scenes, val ? n_scenes : 1);
  const std::vector<std::uint64_t>& scene_seeds = val ? val_seeds : train_seeds;
  const FisheyeCamera cam = FisheyeCamera::square(a.image_size, a.focal);
  const std::uint64_t pseed = val ? val_pair_seed(seed) : seed;
  const SyntheticDataset d = make_dataset(a.pairs, scene_seeds, a.ranges, cam, pseed);
  const nlohmann::json info = {
      {"pairs", a.pairs},
      {"seed", seed},
      {"split", a.split},
      {"scene_seeds", scene_seeds},
      {"ranges", {{"rot_x_deg", a.ranges.rot_x_deg}, {"rot_y_deg", a.ranges.rot_y_deg}, {"rot_z_deg", a.ranges.rot_z_deg},
                  {"trans_m", a.ranges.trans_m}}},
      {"camera", {{"size", a.image_size}, {"focal_px_per_rad", a.focal}, {"fov_deg", cam.fov_deg}}}};
  write_dataset_dir(a.out, d, info);
  out << "wrote " << a.pairs << " pairs from " << scene_seeds.size() << " scenes to " << a.out << "\n";
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string val;
  std::string config;
  std::string out;
  std::string metrics;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const nlohmann::json raw = a.config.empty() ? nlohmann::json::object() : read_json_file(a.config);
  RunConfig rc = parse_run_config(raw);
  const bool has_train_seed = raw.contains("train") && raw.at("train").contains("seed");
  const bool has_init_seed = raw.contains("model") && raw.at("model").contains("init_seed");
  if (a.seed) {
    rc.train.seed = *a.seed;
    rc.model.init_seed = *a.seed;
  } else {
    if (!has_train_seed) rc.train.seed = default_seed(rc.train.seed);
    if (!has_init_seed) rc.model.init_seed = default_seed(rc.model.init_seed);
  }
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (rc.train.epochs < 0) throw InvalidArgument("--epochs must be >= 0");

  const DiskDataset train_set = load_dataset_dir(a.data);
  std::optional<DiskDataset> val_set;
  if (!a.val.empty()) val_set = load_dataset_dir(a.val);
  ModelWeights w = init_model(rc.model);

  nlohmann::json history = nlohmann::json::array();
  nlohmann::json untrained;
  if (val_set) untrained = metrics_json(evaluate(val_set->samples, w));
  const auto hist = train(w, train_set.samples,
                          val_set ? std::span<const PairSample>(val_set->samples) : std::span<const PairSample>(),
                          rc.train, [&err](const EpochRecord& r) {
                            err << "epoch " << r.epoch << " loss " << r.train_loss;
                            if (r.validation) {
                              err << " val_rot_deg " << r.validation->median_rotation_deg << " val_trans_m "
                                  << r.validation->median_translation_m;
                            }
                            err << "\n";
                          });
  for (const EpochRecord& r : hist) {
    nlohmann::json e = {{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"seconds", r.seconds}};
    if (r.validation) e["validation"] = metrics_json(*r.validation);
    history.push_back(e);
  }
  const nlohmann::json cfg_json = {{"model", rc.model}, {"train", rc.train}};
  save_checkpoint(a.out, weights_to_checkpoint(w, {{"train", rc.train}}));
  nlohmann::json metrics = {{"config", cfg_json}, {"history", history}, {"train_pairs", train_set.samples.size()}};
  if (val_set) metrics["untrained_validation"] = untrained;
  const std::string mpath = a.metrics.empty() ? a.out + ".metrics.json" : a.metrics;
  write_text_file(mpath, metrics.dump(2) + "\n");
  out << "trained " << hist.size() << " epochs; checkpoint " << a.out << ", metrics " << mpath << "\n";
  return kExitOk;
}

struct PredictArgs {
  std::string ckpt;
  std::string data;
  std::string out;
};

/// Predicted relative poses keyed by query id.
inline int cmd_predict(const PredictArgs& a, std::ostream& out) {
  const ModelWeights w = weights_from_checkpoint(load_checkpoint(a.ckpt));
  const DiskDataset d = load_dataset_dir(a.data);
  PoseFile f;
  f.frame = "relative";
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const PosePrediction p = model_forward(d.samples[i].img_ref, d.samples[i].img_2, w);
    f.entries.push_back(PoseEntry::from_pose(d.query_ids[i], p.forward));
  }
  write_pose_file(a.out, f);
  out << "wrote " << f.entries.size() << " predictions to " << a.out << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string out;
};

inline void print_warnings(const std::vector<std::string>& w, std::ostream& err) {
  for (const std::string& s : w) err << "warning: " << s << "\n";
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<std::string> warnings;
  const PoseFile pred = read_pose_file(a.pred, &warnings), gt = read_pose_file(a.gt, &warnings);
  print_warnings(warnings, err);
  const ErrorReport r = evaluate_pose_files(pred, gt);
  if (!r.ids_match()) {
    for (const std::string& id : r.missing_in_pred) err << "missing in predictions: " << id << "\n";
    for (const std::string& id : r.missing_in_gt) err << "missing in ground truth: " << id << "\n";
    return kExitData;
  }
  const std::string csv = report_csv(r);
  if (a.out.empty()) {
    out << csv;
  } else {
    write_text_file(a.out, csv);
    out << "pairs " << r.rows.size() << "  rot_deg mean " << format_double(r.rot_deg.mean) << " median "
        << format_double(r.rot_deg.median) << "  trans_m mean " << format_double(r.trans_m.mean) << " median "
        << format_double(r.trans_m.median) << "\n";
  }
  return kExitOk;
}

struct GtCompareArgs {
  std::string a;
  std::string b;
  double threshold = kDefaultDisplacementThreshold;
  std::string out;
};

inline int cmd_gt_compare(const GtCompareArgs& args, std::ostream& out, std::ostream& err) {
  std::vector<std::string> warnings;
  const PoseFile a = read_pose_file(args.a, &warnings), b = read_pose_file(args.b, &warnings);
  print_warnings(warnings, err);
  const GtComparison c = compare_trajectories(a.trajectory(), b.trajectory(), args.threshold);
  const auto cell = [](const ColumnSummary& s, double v) { return s.count ? format_double(v) : std::string("n/a"); };
  std::ostringstream t;
  t << "stat,rotation_deg,direction_deg,gt_displacement_m\n";
  t << "max," << cell(c.rotation_deg, c.rotation_deg.max) << ',' << cell(c.direction_deg, c.direction_deg.max) << ','
    << cell(c.displacement_m, c.displacement_m.max) << '\n';
  t << "mean," << cell(c.rotation_deg, c.rotation_deg.mean) << ',' << cell(c.direction_deg, c.direction_deg.mean)
    << ',' << cell(c.displacement_m, c.displacement_m.mean) << '\n';
  t << "median," << cell(c.rotation_deg, c.rotation_deg.median) << ','
    << cell(c.direction_deg, c.direction_deg.median) << ',' << cell(c.displacement_m, c.displacement_m.median) << '\n';
  t << "count," << c.rotation_deg.count << ',' << c.direction_deg.count << ',' << c.displacement_m.count << '\n';
  out << t.str();
  if (!args.out.empty()) {
    std::ostringstream rows;
    rows << "image_id,rotation_deg,direction_deg,gt_displacement_m\n";
    for (const GtComparisonRow& r : c.rows) {
      rows << r.image_id << ',' << format_double(r.rotation_error_deg) << ','
           << (r.direction_error_deg ? format_double(*r.direction_error_deg) : "") << ','
           << format_double(r.displacement_m) << '\n';
    }
    write_text_file(args.out, rows.str());
  }
  return kExitOk;
}

struct ConvertArgs {
  std::string in;
  std::string repr;
  std::string out;
};

/// Input is a pose file or a converted file ({"repr", "frame", "entries":
/// [{image_id, y}]}). Output is the flat vector of each entry for --repr
/// TAG, or a pose file for --repr pose.
inline int cmd_convert(const ConvertArgs& a, std::ostream& out, std::ostream& err) {
  const nlohmann::json in = read_json_file(a.in);
  std::vector<std::pair<std::string, PoseSE3>> poses;
  std::string frame;
  if (in.contains("repr")) {
    try {
      const ReprTag tag = parse_repr_tag(in.at("repr").get<std::string>());
      frame = in.value("frame", "");
      for (const auto& e : in.at("entries")) {
        poses.push_back({e.at("image_id").get<std::string>(), vector_to_pose(tag, e.at("y").get<std::vector<double>>())});
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed converted file: ") + e.what());
    } catch (const InvalidArgument& e) {
      throw DataError(std::string("malformed converted file: ") + e.what());
    }
  } else {
    std::vector<std::string> warnings;
    const PoseFile f = pose_file_from_json(in, &warnings);
    print_warnings(warnings, err);
    frame = f.frame;
    for (const PoseEntry& e : f.entries) poses.push_back({e.image_id, e.pose()});
  }
  if (a.repr == "pose") {
    PoseFile f;
    f.frame = frame;
    for (const auto& [id, p] : poses) f.entries.push_back(PoseEntry::from_pose(id, p));
    write_pose_file(a.out, f);
  } else {
    const ReprTag tag = parse_repr_tag(a.repr);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [id, p] : poses) entries.push_back({{"image_id", id}, {"y", pose_to_vector(p, tag)}});
    write_text_file(a.out, nlohmann::json{{"repr", a.repr}, {"frame", frame}, {"entries", entries}}.dump(2) + "\n");
  }
  out << "converted " << poses.size() << " entries to " << a.repr << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Relative camera pose regression toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  std::uint64_t gen_seed = 0;
  auto* g = app.add_subcommand("gen-data", "Render a synthetic pose-pair dataset");
  g->add_option("--pairs", gen.pairs, "Number of pairs")->required();
  auto* gen_seed_opt = g->add_option("--seed", gen_seed, "Dataset seed (default: INCARPOSE_SEED or 0)");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--rx", gen.ranges.rot_x_deg, "Half-range of rotation about x, degrees")->capture_default_str();
  g->add_option("--ry", gen.ranges.rot_y_deg, "Half-range of rotation about y, degrees")->capture_default_str();
  g->add_option("--rz", gen.ranges.rot_z_deg, "Half-range of rotation about z, degrees")->capture_default_str();
  g->add_option("--t", gen.ranges.trans_m, "Half-range of translation per axis, meters")->capture_default_str();
  g->add_option("--split", gen.split, "Scene pool: train or val")->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  int gen_scenes = 0;
  auto* gen_scenes_opt = g->add_option("--scenes", gen_scenes, "Number of scenes (default 8 for train, 3 for val)");
  g->add_option("--size", gen.image_size, "Image side in pixels")->capture_default_str();
  g->add_option("--focal", gen.focal, "Fisheye focal length, pixels per radian")->capture_default_str();

  TrainArgs tr;
  int tr_epochs = 0;
  std::uint64_t tr_seed = 0;
  auto* t = app.add_subcommand("train", "Train the pose network");
  t->add_option("--data", tr.data, "Training dataset directory")->required();
  t->add_option("--val", tr.val, "Validation dataset directory");
  t->add_option("--config", tr.config, "JSON config {preset, model, train}");
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--metrics", tr.metrics, "Metrics JSON path (default: <out>.metrics.json)");
  auto* tr_epochs_opt = t->add_option("--epochs", tr_epochs, "Override the configured epoch count");
  auto* tr_seed_opt = t->add_option("--seed", tr_seed, "Seed for initialization, shuffling and dropout");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Predict relative poses for a dataset");
  p->add_option("--ckpt", pr.ckpt, "Checkpoint")->required();
  p->add_option("--data", pr.data, "Dataset directory")->required();
  p->add_option("--out", pr.out, "Output pose file")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Per-pair error report");
  e->add_option("--pred", ev.pred, "Predicted pose file")->required();
  e->add_option("--gt", ev.gt, "Ground-truth pose file")->required();
  e->add_option("--out", ev.out, "Report CSV (default: stdout)");

  GtCompareArgs gc;
  auto* c = app.add_subcommand("gt-compare", "Compare two labelings of the same images");
  c->add_option("--a", gc.a, "First pose file")->required();
  c->add_option("--b", gc.b, "Second pose file")->required();
  c->add_option("--threshold", gc.threshold, "Displacement gate, meters")->capture_default_str();
  c->add_option("--out", gc.out, "Per-image CSV");

  ConvertArgs cv;
  auto* v = app.add_subcommand("convert", "Flatten poses to a rotation representation");
  v->add_option("--in", cv.in, "Pose file or converted file")->required();
  v->add_option("--repr", cv.repr, "quat, matrix, rotvec, euler_int, euler_ext or pose")->required();
  v->add_option("--out", cv.out, "Output JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) {
      if (*gen_seed_opt) gen.seed = gen_seed;
      if (*gen_scenes_opt) gen.scenes = gen_scenes;
      return cmd_gen_data(gen, out);
    }
    if (*t) {
      if (*tr_epochs_opt) tr.epochs = tr_epochs;
      if (*tr_seed_opt) tr.seed = tr_seed;
      return cmd_train(tr, out, err);
    }
    if (*p) return cmd_predict(pr, out);
    if (*e) return cmd_eval(ev, out, err);
    if (*c) return cmd_gt_compare(gc, out, err);
    if (*v) return cmd_convert(cv, out, err);
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const EmptyOverlap& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const InvalidArgument& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const Error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace incarpose::cli
