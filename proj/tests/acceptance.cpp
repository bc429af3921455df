// One PASS/FAIL line per acceptance criterion; exits non-zero if any fail.

#include <Eigen/Geometry>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include "gradient_checks.hpp"
#include "incarpose/cli.hpp"
#include "model_checks.hpp"

using namespace incarpose;
using namespace incarpose::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int n, bool pass, const std::string& what, const std::string& detail) {
  std::printf("CRITERION %d %s: %s [%s]\n", n, pass ? "PASS" : "FAIL", what.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

template <typename F>
void guarded(int n, const std::string& what, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(n, false, what, std::string("exception: ") + e.what());
  }
}

Vec4 random_unit4(std::mt19937_64& g) {
  return Vec4(gauss(g), gauss(g), gauss(g), gauss(g)).normalized();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("incarpose_accept_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "incarpose");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  return cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
}

void criterion_1() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(101);
  double worst_round = 0.0;
  for (ReprTag tag : kAllReprTags) {
    for (int i = 0; i < 10000; ++i) {
      const PoseSE3 p{RotationMatrix::unchecked(random_rotation(g)), Translation::Zero()};
      const std::vector<double> y = pose_to_vector(p, tag);
      worst_round = std::max(worst_round, angle_between(vector_to_pose(tag, y).rotation.matrix(), p.rotation.matrix()));
    }
  }
  double worst_ortho = 0.0, worst_det = 0.0;
  for (int i = 0; i < 10000; ++i) {
    Mat3 m;
    for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = gauss(g);
    const Mat3 r = project_to_so3(m).matrix();
    worst_ortho = std::max(worst_ortho, (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff());
    worst_det = std::max(worst_det, std::abs(r.determinant() - 1.0));
  }
  bool cover_exact = true, canonical_exact = true;
  for (int i = 0; i < 10000; ++i) {
    const UnitQuaternion q = UnitQuaternion::from_coeffs(random_unit4(g));
    cover_exact &= quat_to_matrix(q).matrix() == quat_to_matrix(-q).matrix();
    const UnitQuaternion m = matrix_to_quat(quat_to_matrix(q));
    canonical_exact &= is_canonical(m) && canonicalize(q) == canonicalize(-q) && is_canonical(canonicalize(q));
    canonical_exact &= canonicalize(q) == q || canonicalize(q) == -q;
  }
  const double secs = seconds_since(t0);
  report(1, worst_round < 1e-9 && worst_ortho < 1e-9 && worst_det < 1e-9 && cover_exact && canonical_exact && secs < 10,
         "representation round-trips, SO(3) projection, double cover, canonical sign",
         fmt("round-trip %.2e rad, |RtR-I| %.2e, |det-1| %.2e, double cover %s, canonical %s, %.2f s", worst_round,
             worst_ortho, worst_det, cover_exact ? "exact" : "broken", canonical_exact ? "exact" : "broken", secs));
}

void criterion_2() {
  std::mt19937_64 g(202);
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const UnitQuaternion a = UnitQuaternion::from_coeffs(random_unit4(g));
    const UnitQuaternion b = UnitQuaternion::from_coeffs(random_unit4(g));
    worst = std::max(worst, std::abs(quaternion_error(a, b) - geodesic_distance(quat_to_matrix(a), quat_to_matrix(b))));
  }
  std::size_t non_finite = 0;
  for (int i = 0; i < 100000; ++i) {
    const Mat3 base = random_rotation(g);
    const double eps = std::pow(10.0, uniform(g, -17, -4));
    const Vec3 axis = random_vec3(g).normalized();
    const double angle = i % 2 == 0 ? eps : kPi - eps;
    const Mat3 other = base * Eigen::AngleAxisd(angle, axis).toRotationMatrix();
    const RotationMatrix ra = project_to_so3(base), rb = project_to_so3(other);
    const UnitQuaternion qa = matrix_to_quat(ra);
    const UnitQuaternion qb = i % 4 < 2 ? matrix_to_quat(rb) : -matrix_to_quat(rb);
    const double d1 = geodesic_distance(ra, rb);
    const double d2 = quaternion_error(qa, qb);
    const double d3 = quaternion_error(qa, qa);
    const double d4 = geodesic_distance(ra, ra);
    non_finite += !(std::isfinite(d1) && std::isfinite(d2) && std::isfinite(d3) && std::isfinite(d4));
  }
  report(2, worst < 1e-9 && non_finite == 0, "quaternion error matches geodesic; arccos boundary fuzz finite",
         fmt("max |quat - geodesic| %.2e rad over 1e4 pairs, %zu non-finite of 1e5 boundary inputs", worst,
             non_finite));
}

void criterion_3() {
  const auto t0 = Clock::now();
  NamedError worst_op{"", 0.0}, worst_loss{"", 0.0};
  for (const NamedError& e : op_gradient_suite(303))
    if (e.error >= worst_op.error) worst_op = e;
  for (const NamedError& e : loss_gradient_suite(304, 50))
    if (e.error >= worst_loss.error) worst_loss = e;
  const GradientCheckResult model = tiny_model_gradient_check(305, 50);
  const double secs = seconds_since(t0);
  report(3, worst_op.error < 1e-6 && worst_loss.error < 1e-5 && model.max_rel_err < 1e-4 && model.checked == 50 &&
                secs < 120,
         "finite-difference gradients of ops, losses and the tiny model",
         fmt("ops %.2e (%s), losses %.2e (%s), model %.2e on %zu weights, %.1f s", worst_op.error,
             worst_op.name.c_str(), worst_loss.error, worst_loss.name.c_str(), model.max_rel_err, model.checked, secs));
}

void criterion_4() {
  const double shift = rope_shift_invariance_error(404, 100);
  const double norm = rope_norm_error(405, 100);
  report(4, shift < 1e-9 && norm < 1e-12, "RoPE relative-position invariance and norm preservation",
         fmt("logit shift error %.2e over 100 draws, norm error %.2e", shift, norm));
}

void criterion_5() {
  std::mt19937_64 g(505);
  const auto to_pose = [](const Mat4& h) {
    return PoseSE3{RotationMatrix::from_matrix(h.topLeftCorner<3, 3>(), 1e-8), h.topRightCorner<3, 1>()};
  };
  double worst_single = 0.0, worst_multi = 0.0;
  bool permutation_exact = true;
  double worst_unanimous = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Mat4 w_r = random_pose(g).homogeneous(), w_j = random_pose(g).homogeneous();
    const Mat4 truth = w_j.inverse() * w_r;
    std::vector<PoseSE3> per_marker;
    for (int m = 0; m < 4; ++m) {
      const Mat4 w_m = random_pose(g).homogeneous();
      const MarkerObservation r{"r", std::to_string(m), to_pose(w_r.inverse() * w_m)};
      const MarkerObservation j{"j", std::to_string(m), to_pose(w_j.inverse() * w_m)};
      const PoseSE3 rel = marker_relative_pose(r, j);
      worst_single = std::max(worst_single, (rel.homogeneous() - truth).cwiseAbs().maxCoeff());
      per_marker.push_back(rel);
    }
    const Mat4 fused = aggregate_marker_poses(per_marker).homogeneous();
    worst_multi = std::max(worst_multi, (fused - truth).cwiseAbs().maxCoeff());
    for (int k = 0; k < 5; ++k) {
      std::shuffle(per_marker.begin(), per_marker.end(), g);
      permutation_exact &= aggregate_marker_poses(per_marker).homogeneous() == fused;
    }
    const PoseSE3 one = random_pose(g);
    const std::vector<PoseSE3> same(1 + g() % 6, one);
    const PoseSE3 agg = aggregate_marker_poses(same);
    worst_unanimous = std::max({worst_unanimous, angle_between(agg.rotation.matrix(), one.rotation.matrix()),
                                (agg.translation - one.translation).norm()});
  }
  report(5, worst_single < 1e-12 && worst_multi < 1e-12 && permutation_exact && worst_unanimous < 1e-12,
         "marker relative poses from the forward model; aggregation",
         fmt("single-marker %.2e, 4-marker fused %.2e, permutation %s, unanimous %.2e", worst_single, worst_multi,
             permutation_exact ? "bit-identical" : "differs", worst_unanimous));
}

void criterion_6() {
  std::mt19937_64 g(606);
  Trajectory a, b;
  std::vector<double> expected_dir;
  std::set<std::string> gated_out;
  const Mat3 p2 = Rx(deg2rad(2.0));
  for (int i = 0; i < 60; ++i) {
    const std::string id = "frame" + std::to_string(i);
    const Vec3 dir = random_vec3(g).normalized();
    const double disp = i % 3 == 0 ? uniform(g, 0.0, 0.099) : uniform(g, 0.101, 1.5);
    const PoseSE3 pa{RotationMatrix::unchecked(random_rotation(g)), disp * dir};
    const double theta_deg = uniform(g, 0.5, 40.0);
    const Vec3 axis = dir.cross(random_vec3(g)).normalized();
    const Vec3 tb = Eigen::AngleAxisd(deg2rad(theta_deg), axis) * pa.translation;
    a.entries.push_back({id, pa});
    b.entries.push_back({id, {RotationMatrix::unchecked(pa.rotation.matrix() * p2), tb}});
    if (disp > 0.1) {
      expected_dir.push_back(theta_deg);
    } else {
      gated_out.insert(id);
    }
  }
  std::shuffle(b.entries.begin(), b.entries.end(), g);
  const GtComparison c = compare_trajectories(a, b, 0.1);
  std::set<std::string> excluded;
  for (const GtComparisonRow& r : c.rows)
    if (!r.direction_error_deg) excluded.insert(r.image_id);
  std::sort(expected_dir.begin(), expected_dir.end());
  const std::size_t n = expected_dir.size();
  double mean = 0.0;
  for (double v : expected_dir) mean += v / static_cast<double>(n);
  const double median = n % 2 ? expected_dir[n / 2] : 0.5 * (expected_dir[n / 2 - 1] + expected_dir[n / 2]);
  const double rot_err = std::max({std::abs(c.rotation_deg.max - 2.0), std::abs(c.rotation_deg.mean - 2.0),
                                   std::abs(c.rotation_deg.median - 2.0)});
  const double dir_err = std::max({std::abs(c.direction_deg.max - expected_dir.back()),
                                   std::abs(c.direction_deg.mean - mean), std::abs(c.direction_deg.median - median)});
  report(6, rot_err < 1e-9 && dir_err < 1e-9 && excluded == gated_out && c.direction_deg.count == n,
         "trajectory comparison statistics and 0.1 m displacement gate",
         fmt("rotation stats off by %.2e deg, direction stats off by %.2e deg, gate excluded %zu of %zu expected", rot_err,
             dir_err, excluded.size(), gated_out.size()));
}

ModelWeights trained_weights;
bool have_trained = false;

void criteria_7_8() {
  const auto t0 = Clock::now();
  const std::uint64_t seed = 0;
  const TrainValSplit data = make_train_val_split(2000, 400, seed);
  ModelConfig mcfg = ModelConfig::toy();
  mcfg.repr_tag = ReprTag::quat;
  mcfg.init_seed = seed;
  TrainConfig tcfg = TrainConfig::toy();
  tcfg.loss = LossId::quat_pose_metric;
  tcfg.seed = seed;
  ModelWeights w = init_model(mcfg);
  const EvalMetrics before = evaluate(data.val.samples, w);
  std::printf("  untrained: rotation %.3f deg, translation %.4f m, consistency %.3f deg\n", before.median_rotation_deg,
              before.median_translation_m, before.median_consistency_deg);
  const auto history = train(w, data.train.samples, {}, tcfg, [](const EpochRecord& r) {
    std::printf("  epoch %d: train loss %.5f (%.1f s)\n", r.epoch, r.train_loss, r.seconds);
    std::fflush(stdout);
  });
  const EvalMetrics after = evaluate(data.val.samples, w);
  const double minutes = seconds_since(t0) / 60.0;
  const double rot_ratio = after.median_rotation_deg / before.median_rotation_deg;
  const double trans_ratio = after.median_translation_m / before.median_translation_m;
  report(7, rot_ratio <= 0.25 && trans_ratio <= 0.50 && minutes <= 30.0,
         "toy training beats the untrained model on held-out scenes",
         fmt("%zu train / %zu val pairs, %zu epochs, %.1f min; median rotation %.3f -> %.3f deg (ratio %.3f <= 0.25), "
             "median translation %.4f -> %.4f m (ratio %.3f <= 0.50)",
             data.train.samples.size(), data.val.samples.size(), history.size(), minutes, before.median_rotation_deg,
             after.median_rotation_deg, rot_ratio, before.median_translation_m, after.median_translation_m,
             trans_ratio));
  report(8, after.median_consistency_deg < before.median_consistency_deg,
         "bidirectional consistency improves with training",
         fmt("median geodesic of forward o inverse %.3f -> %.3f deg", before.median_consistency_deg,
             after.median_consistency_deg));
  trained_weights = std::move(w);
  have_trained = true;
}

void criterion_9() {
  TempDir d("det");
  const auto gen = [&](const std::string& name) {
    return run_cli({"gen-data", "--pairs", "12", "--seed", "909", "--out", (d.path / name).string()});
  };
  bool gen_same = gen("a") == 0 && gen("b") == 0;
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d.path / "a")) {
    if (!e.is_regular_file()) continue;
    gen_same &= slurp(e.path()) == slurp(d.path / "b" / fs::relative(e.path(), d.path / "a"));
    ++files;
  }

  std::mt19937_64 g(910);
  ImageF rgb(40, 56, 3);
  for (double& v : rgb.data) v = uniform(g, 0.0, 1.0);
  PreprocessConfig pc;
  pc.target_size = 32;
  pc.mean = {0.485, 0.456, 0.406};
  pc.stdv = {0.229, 0.224, 0.225};
  pc.jitter = {0.3, 0.3, 0.3, 0.1};
  pc.seed = 911;
  bool pre_same = true;
  for (ResizeMode mode : {ResizeMode::zero_pad, ResizeMode::center_crop}) {
    pc.mode = mode;
    pre_same &= preprocess(rgb, pc).data == preprocess(rgb, pc).data;
  }

  const ModelWeights w = have_trained ? trained_weights : init_model(ModelConfig::toy());
  const ModelWeights fresh_a = init_model(ModelConfig::toy()), fresh_b = init_model(ModelConfig::toy());
  const ImageF x = random_image(32, 1, g), y = random_image(32, 1, g);
  const PosePrediction p1 = model_forward(x, y, w), p2 = model_forward(x, y, w);
  const PosePrediction q1 = model_forward(x, y, fresh_a), q2 = model_forward(x, y, fresh_b);
  const bool infer_same = p1.raw == p2.raw && q1.raw == q2.raw;
  report(9, gen_same && files > 0 && pre_same && infer_same, "determinism of data generation, preprocessing, inference",
         fmt("gen-data %zu files %s, preprocessing %s, eval inference %s", files, gen_same ? "byte-identical" : "differ",
             pre_same ? "bit-identical" : "differs", infer_same ? "bit-identical" : "differs"));
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

void criterion_10() {
  TempDir d("io");
  std::mt19937_64 g(1010);
  PoseFile f;
  f.frame = "standard_view";
  for (int i = 0; i < 50; ++i) f.entries.push_back(PoseEntry::from_pose("img" + std::to_string(i), random_pose(g)));
  f.pairs = std::vector<PairRef>{{"img0", "img1"}, {"img0", "img7"}};
  write_pose_file((d.path / "p.json").string(), f);
  const PoseFile back = read_pose_file((d.path / "p.json").string());
  bool pose_exact = back.entries.size() == f.entries.size() && back.frame == f.frame && back.pairs->size() == 2;
  for (std::size_t i = 0; pose_exact && i < f.entries.size(); ++i) {
    pose_exact &= back.entries[i].image_id == f.entries[i].image_id && back.entries[i].q == f.entries[i].q &&
                  back.entries[i].t_m == f.entries[i].t_m;
  }

  const ModelWeights w = have_trained ? trained_weights : init_model(ModelConfig::toy());
  const std::string ck_path = (d.path / "m.ckpt").string();
  save_checkpoint(ck_path, weights_to_checkpoint(w));
  const ModelWeights w2 = weights_from_checkpoint(load_checkpoint(ck_path));
  bool ckpt_exact = true;
  const auto pa = w.parameters(), pb = w2.parameters();
  ckpt_exact &= pa.size() == pb.size();
  for (std::size_t i = 0; ckpt_exact && i < pa.size(); ++i) {
    ckpt_exact &= pa[i].first == pb[i].first && pa[i].second.shape() == pb[i].second.shape() &&
                  pa[i].second.data() == pb[i].second.data();
  }
  save_checkpoint((d.path / "m2.ckpt").string(), weights_to_checkpoint(w2));
  ckpt_exact &= slurp(ck_path) == slurp(d.path / "m2.ckpt");

  // Five hand-built pairs with known rotation, translation and direction errors.
  const std::vector<double> rot_deg{3.0, 0.5, 12.0, 7.0, 1.5};
  const std::vector<double> gt_len{0.4, 1.0, 0.25, 0.8, 0.6};
  const std::vector<double> dir_deg{10.0, 0.0, 30.0, 5.0, 60.0};
  const std::vector<double> pred_len{0.5, 1.2, 0.25, 0.8, 0.3};
  PoseFile gt, pred;
  gt.frame = pred.frame = "relative";
  std::vector<double> rot_truth, trans_truth;
  for (int i = 0; i < 5; ++i) {
    const std::string id = "pair" + std::to_string(i);
    const Mat3 r = random_rotation(g);
    const Vec3 u = random_vec3(g).normalized();
    const Vec3 axis = u.cross(random_vec3(g)).normalized();
    const Vec3 tg = gt_len[i] * u;
    const Vec3 tp = pred_len[i] * (Eigen::AngleAxisd(deg2rad(dir_deg[i]), axis) * u);
    gt.entries.push_back(PoseEntry::from_pose(id, {RotationMatrix::unchecked(r), tg}));
    pred.entries.push_back(PoseEntry::from_pose(
        id, {RotationMatrix::unchecked(r * Eigen::AngleAxisd(deg2rad(rot_deg[i]), random_vec3(g).normalized())
                                                .toRotationMatrix()),
             tp}));
    trans_truth.push_back((tp - tg).norm());
  }
  std::reverse(pred.entries.begin(), pred.entries.end());
  write_pose_file((d.path / "gt.json").string(), gt);
  write_pose_file((d.path / "pred.json").string(), pred);
  const std::string csv_path = (d.path / "report.csv").string();
  const int rc = run_cli({"eval", "--pred", (d.path / "pred.json").string(), "--gt", (d.path / "gt.json").string(),
                          "--out", csv_path});
  const auto rows = csv_rows(slurp(csv_path));
  bool csv_ok = rc == 0 && rows.size() == 8 && rows[0] == std::vector<std::string>{"pair", "rot_deg", "trans_m", "dir_deg"};
  double worst = 0.0;
  if (csv_ok) {
    // Oracle: sort each column of known per-pair errors.
    const std::vector<std::vector<double>> truth{rot_deg, trans_truth, dir_deg};
    std::vector<std::vector<double>> seen(3);
    for (int i = 0; i < 5; ++i) {
      csv_ok &= rows[1 + i][0] == "pair" + std::to_string(i);
      for (int c = 0; c < 3; ++c) {
        seen[c].push_back(std::stod(rows[1 + i][1 + c]));
        worst = std::max(worst, std::abs(seen[c].back() - truth[c][i]));
      }
    }
    csv_ok &= rows[6][0] == "#mean" && rows[7][0] == "#median";
    for (int c = 0; c < 3; ++c) {
      std::vector<double> sorted = truth[c];
      std::sort(sorted.begin(), sorted.end());
      double m = 0.0;
      for (double v : sorted) m += v;
      m /= 5.0;
      worst = std::max({worst, std::abs(std::stod(rows[6][1 + c]) - m), std::abs(std::stod(rows[7][1 + c]) - sorted[2])});
      std::vector<double> own = seen[c];
      std::sort(own.begin(), own.end());
      double own_mean = 0.0;
      for (double v : own) own_mean += v;
      own_mean /= 5.0;
      csv_ok &= std::stod(rows[7][1 + c]) == own[2];
      worst = std::max(worst, std::abs(std::stod(rows[6][1 + c]) - own_mean));
    }
  }
  report(10, pose_exact && ckpt_exact && csv_ok && worst < 1e-9, "pose file and checkpoint round-trips; eval CSV",
         fmt("pose file %s, checkpoint %s, CSV layout %s, max deviation from sort oracle %.2e", pose_exact ? "exact" : "differs",
             ckpt_exact ? "exact" : "differs", csv_ok ? "ok" : "wrong", worst));
}

}  // namespace

int main() {
  guarded(1, "representation suite", criterion_1);
  guarded(2, "metric cross-consistency", criterion_2);
  guarded(3, "gradient suite", criterion_3);
  guarded(4, "RoPE property", criterion_4);
  guarded(5, "marker ground truth", criterion_5);
  guarded(6, "ground-truth comparison tool", criterion_6);
  guarded(7, "toy training", criteria_7_8);
  guarded(9, "determinism", criterion_9);
  guarded(10, "I/O", criterion_10);
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
