// Command-line pipeline driver: simulate | fbp | reconstruct | evaluate.
//
// Every subcommand writes a RunManifest next to its outputs capturing the
// complete effective configuration; `--from-manifest FILE` re-executes a
// previous run and, because every stage is deterministic under its seed,
// reproduces its outputs byte for byte.
//
// Exit codes: 0 success, 2 bad flags or missing ground truth, 3 I/O failure,
// 4 non-finite loss during optimization.

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dtomo/dtomo.hpp"
#include "dtomo/version.hpp"

namespace fs = std::filesystem;
using namespace dtomo;

namespace {

struct Options {
  std::string preset;
  uint64_t seed = 0;
  std::string out_dir = ".";
  std::string in_dir;  // defaults to out_dir when empty
  int64_t size = 64;
  int64_t tilts = 60;
  double angle_range = 70.0;  // tilts span [-angle_range, angle_range]
  double snr_db = 10.0;
  double shift_bound_px = 10.0;
  double shear_bound = 0.10;
  double rot_bound_deg = 10.0;
  double lambda1 = 10.0;
  double lambda2 = 1.0;
  double lambda_theta = 1e-5;
  double lambda_x = 1e-5;
  int64_t iterations = 1500;
  double lr_field = 1e-3;
  double lr_deform = 1e-2;
  int64_t warmup_op = 0;
  double subsample = 1.0;
  int64_t field_width = 128;
  int64_t field_layers = 3;
  int64_t field_frequencies = 8;
  std::string field_activation = "relu";
  std::string phantom = "ellipsoids";
  std::string volume;  // optional substitute volume for simulate
};

// Seed streams so the same --seed drives independent draws per purpose.
constexpr uint64_t kStreamDeformations = 2;
constexpr uint64_t kStreamNoise = 3;

TiltAngles angles_of(const Options& o) {
  return TiltAngles::uniform(o.tilts, -o.angle_range, o.angle_range);
}

DeformationBounds bounds_of(const Options& o) {
  return DeformationBounds{o.shift_bound_px, o.shear_bound, o.rot_bound_deg};
}

TrainConfig train_config_of(const Options& o) {
  TrainConfig cfg;
  cfg.field.width = o.field_width;
  cfg.field.hidden_layers = o.field_layers;
  cfg.field.frequencies = o.field_frequencies;
  cfg.field.activation = activation_from_string(o.field_activation);
  cfg.lambda1 = o.lambda1;
  cfg.lambda2 = o.lambda2;
  cfg.lambda_theta = o.lambda_theta;
  cfg.lambda_x = o.lambda_x;
  cfg.iterations = o.iterations;
  cfg.lr_field = o.lr_field;
  cfg.lr_deform = o.lr_deform;
  cfg.bounds = bounds_of(o);
  cfg.seed = o.seed;
  cfg.warmup_op = o.warmup_op;
  cfg.subsample = o.subsample;
  return cfg;
}

std::string in_dir_of(const Options& o) { return o.in_dir.empty() ? o.out_dir : o.in_dir; }

void fill_manifest(RunManifest& mf, const std::string& command, const Options& o) {
  mf.set("tool", std::string(kToolName) + " " + kVersion);
  mf.set("command", command);
  mf.set("preset", o.preset.empty() ? std::string("none") : o.preset);
  mf.set("seed", o.seed);
  mf.set("out_dir", o.out_dir);
  mf.set("in_dir", in_dir_of(o));
  mf.set("size", o.size);
  mf.set("tilts", o.tilts);
  mf.set("angle_range", o.angle_range);
  mf.set("snr_db", o.snr_db);
  mf.set("shift_bound_px", o.shift_bound_px);
  mf.set("shear_bound", o.shear_bound);
  mf.set("rot_bound_deg", o.rot_bound_deg);
  mf.set("lambda1", o.lambda1);
  mf.set("lambda2", o.lambda2);
  mf.set("lambda_theta", o.lambda_theta);
  mf.set("lambda_x", o.lambda_x);
  mf.set("iterations", o.iterations);
  mf.set("lr_field", o.lr_field);
  mf.set("lr_deform", o.lr_deform);
  mf.set("warmup_op", o.warmup_op);
  mf.set("subsample", o.subsample);
  mf.set("field_width", o.field_width);
  mf.set("field_layers", o.field_layers);
  mf.set("field_frequencies", o.field_frequencies);
  mf.set("field_activation", o.field_activation);
  mf.set("phantom", o.phantom);
  mf.set("volume", o.volume);
}

Options options_from_manifest(const RunManifest& mf) {
  Options o;
  auto str = [&](const char* k, std::string& dst) {
    if (auto v = mf.get(k)) dst = *v;
  };
  auto num = [&](const char* k, double& dst) {
    if (auto v = mf.get(k)) dst = std::stod(*v);
  };
  auto i64 = [&](const char* k, int64_t& dst) {
    if (auto v = mf.get(k)) dst = std::stoll(*v);
  };
  if (auto v = mf.get("seed")) o.seed = std::stoull(*v);
  str("preset", o.preset);
  if (o.preset == "none") o.preset.clear();
  str("out_dir", o.out_dir);
  str("in_dir", o.in_dir);
  i64("size", o.size);
  i64("tilts", o.tilts);
  num("angle_range", o.angle_range);
  num("snr_db", o.snr_db);
  num("shift_bound_px", o.shift_bound_px);
  num("shear_bound", o.shear_bound);
  num("rot_bound_deg", o.rot_bound_deg);
  num("lambda1", o.lambda1);
  num("lambda2", o.lambda2);
  num("lambda_theta", o.lambda_theta);
  num("lambda_x", o.lambda_x);
  i64("iterations", o.iterations);
  num("lr_field", o.lr_field);
  num("lr_deform", o.lr_deform);
  i64("warmup_op", o.warmup_op);
  num("subsample", o.subsample);
  i64("field_width", o.field_width);
  i64("field_layers", o.field_layers);
  i64("field_frequencies", o.field_frequencies);
  str("field_activation", o.field_activation);
  str("phantom", o.phantom);
  str("volume", o.volume);
  return o;
}

void require_out_dir(const Options& o) {
  if (!fs::is_directory(o.out_dir))
    throw IoError("output directory '" + o.out_dir + "' does not exist");
}

Volume load_or_make_phantom(const Options& o) {
  if (!o.volume.empty()) return read_mrc_volume(o.volume);
  return make_phantom(phantom_kind_from_string(o.phantom), o.size, o.seed);
}

// ------------------------------- subcommands --------------------------------

int run_simulate(const Options& o) {
  require_out_dir(o);
  const Volume ph = load_or_make_phantom(o);
  const TiltAngles angles = angles_of(o);
  const auto truth =
      sample_deformations(angles.count(), bounds_of(o), derive_seed(o.seed, kStreamDeformations));
  const TiltSeries ts = simulate(ph, angles, truth, o.snr_db, derive_seed(o.seed, kStreamNoise));

  const fs::path out(o.out_dir);
  write_mrc((out / "phantom.mrc").string(), ph);
  write_mrc((out / "stack.mrc").string(), ts.stack);
  write_deformations((out / "truth_deformations.csv").string(), truth, angles);
  RunManifest mf;
  fill_manifest(mf, "simulate", o);
  mf.write((out / "manifest_simulate.txt").string());
  std::cout << "simulate: wrote " << (out / "stack.mrc").string() << " (" << ts.stack.m << " tilts, "
            << ts.stack.n << "x" << ts.stack.n << ", snr " << o.snr_db << " dB)\n";
  return 0;
}

// Angle parameters come from the simulate manifest when one is present so a
// chained fbp/reconstruct/evaluate run cannot drift from its input stack.
Options with_input_geometry(Options o) {
  const fs::path mfp = fs::path(in_dir_of(o)) / "manifest_simulate.txt";
  if (fs::exists(mfp)) {
    const RunManifest mf = RunManifest::read(mfp.string());
    if (auto v = mf.get("tilts")) o.tilts = std::stoll(*v);
    if (auto v = mf.get("angle_range")) o.angle_range = std::stod(*v);
    if (auto v = mf.get("size")) o.size = std::stoll(*v);
    if (auto v = mf.get("snr_db")) o.snr_db = std::stod(*v);
  }
  return o;
}

int run_fbp(const Options& given) {
  const Options o = with_input_geometry(given);
  require_out_dir(o);
  const fs::path in(in_dir_of(o));
  const Stack stack = read_mrc_stack((in / "stack.mrc").string());
  const TiltAngles angles = angles_of(o);
  if (angles.count() != stack.m)
    throw ValueError("fbp: stack has " + std::to_string(stack.m) + " tilts but --tilts is " +
                     std::to_string(angles.count()));
  const Volume rec = fbp_reconstruct(stack, angles, stack.n);
  const fs::path out(o.out_dir);
  write_mrc((out / "recon_fbp.mrc").string(), rec);
  RunManifest mf;
  fill_manifest(mf, "fbp", o);
  mf.write((out / "manifest_fbp.txt").string());
  std::cout << "fbp: wrote " << (out / "recon_fbp.mrc").string() << "\n";
  return 0;
}

int run_reconstruct(const Options& given) {
  const Options o = with_input_geometry(given);
  require_out_dir(o);
  const fs::path in(in_dir_of(o));
  TiltSeries ts;
  ts.stack = read_mrc_stack((in / "stack.mrc").string());
  ts.angles = angles_of(o);
  if (ts.angles.count() != ts.stack.m)
    throw ValueError("reconstruct: stack has " + std::to_string(ts.stack.m) +
                     " tilts but --tilts is " + std::to_string(ts.angles.count()));

  const TrainConfig cfg = train_config_of(o);
  const TrainResult res = train(ts, cfg);
  const Volume rec = extract_tomogram(res.weights, ts.angles, ts.stack.n);

  const fs::path out(o.out_dir);
  write_mrc((out / "recon_joint.mrc").string(), rec);
  write_deformations((out / "est_deformations.csv").string(), res.deformations, ts.angles);
  std::vector<double> h_data, h_op, h_reg, h_total;
  for (const auto& row : res.history) {
    h_data.push_back(row.data);
    h_op.push_back(row.op);
    h_reg.push_back(row.reg);
    h_total.push_back(row.total);
  }
  write_history_csv((out / "history.csv").string(), h_data, h_op, h_reg, h_total);
  write_weights((out / "weights.bin").string(), res.weights);
  RunManifest mf;
  fill_manifest(mf, "reconstruct", o);
  mf.write((out / "manifest_reconstruct.txt").string());
  std::cout << "reconstruct: " << cfg.iterations << " iterations in " << res.wall_seconds
            << " s; wrote " << (out / "recon_joint.mrc").string() << "\n";
  if (!res.history.empty())
    std::cout << "reconstruct: L_data " << res.history.front().data << " -> "
              << res.history.back().data << "\n";
  return 0;
}

int run_evaluate(const Options& given) {
  const Options o = with_input_geometry(given);
  require_out_dir(o);
  const fs::path in(in_dir_of(o));
  const fs::path out(o.out_dir);

  const fs::path phantom_path = in / "phantom.mrc";
  const fs::path truth_path = in / "truth_deformations.csv";
  if (!fs::exists(phantom_path) || !fs::exists(truth_path))
    throw ValueError("evaluate: ground truth missing (need " + phantom_path.string() + " and " +
                     truth_path.string() + "); run simulate first");

  // The undeformed baseline below must reuse the *simulation* noise draw, so
  // its seed comes from the simulate manifest, not from this command's --seed.
  uint64_t sim_seed = o.seed;
  if (const fs::path mfp = in / "manifest_simulate.txt"; fs::exists(mfp))
    if (auto v = RunManifest::read(mfp.string()).get("seed")) sim_seed = std::stoull(*v);

  const Volume ph = read_mrc_volume(phantom_path.string());
  const auto [truth, angles] = read_deformations(truth_path.string());
  const Stack stack = read_mrc_stack((in / "stack.mrc").string());
  const Volume joint = read_mrc_volume((in / "recon_joint.mrc").string());
  const int64_t shells = ph.n1 / 2;

  // Joint reconstruction vs ground truth.
  write_fsc_csv((out / "fsc.csv").string(), fsc(ph, joint, shells));

  // FBP of the deformed, noisy stack: the baseline that ignores deformations.
  write_fsc_csv((out / "fsc_fbp.csv").string(),
                fsc(ph, fbp_reconstruct(stack, angles, ph.n1), shells));

  // FBP of the stack the microscope would have produced without deformations:
  // re-simulated with the same phantom, angles, noise level, and noise seed.
  const std::vector<DeformationParams> no_deform(static_cast<size_t>(angles.count()));
  const TiltSeries clean =
      simulate(ph, angles, no_deform, o.snr_db, derive_seed(sim_seed, kStreamNoise));
  write_fsc_csv((out / "fsc_fbp_no_deformation.csv").string(),
                fsc(ph, fbp_reconstruct(clean.stack, angles, ph.n1), shells));

  // Deformation error table: the zero-initialization row and the estimate.
  std::ofstream table(out / "deformation_table.csv");
  if (!table) throw IoError("cannot open '" + (out / "deformation_table.csv").string() + "'");
  table << "row,shift_px,shear_percent,rot_deg,shift_px_gauge_removed\n";
  const std::vector<DeformationParams> zeros(truth.size());
  const DeformationErrorSummary init = deformation_error(zeros, truth);
  const DeformationErrorSummary init_g = deformation_error_gauge_removed(zeros, truth);
  table << "init," << init.shift_px << ',' << init.shear_percent << ',' << init.rot_deg << ','
        << init_g.shift_px << "\n";
  const fs::path est_path = in / "est_deformations.csv";
  if (fs::exists(est_path)) {
    const auto [est, est_angles] = read_deformations(est_path.string());
    (void)est_angles;
    const DeformationErrorSummary err = deformation_error(est, truth);
    const DeformationErrorSummary err_g = deformation_error_gauge_removed(est, truth);
    table << "estimated," << err.shift_px << ',' << err.shear_percent << ',' << err.rot_deg << ','
          << err_g.shift_px << "\n";
  }
  if (!table) throw IoError("write failed for deformation_table.csv");
  table.close();

  RunManifest mf;
  fill_manifest(mf, "evaluate", o);
  mf.write((out / "manifest_evaluate.txt").string());
  std::cout << "evaluate: wrote fsc.csv, fsc_fbp.csv, fsc_fbp_no_deformation.csv, "
               "deformation_table.csv in "
            << out.string() << "\n";
  return 0;
}

int dispatch(const std::string& command, const Options& o) {
  if (command == "simulate") return run_simulate(o);
  if (command == "fbp") return run_fbp(o);
  if (command == "reconstruct") return run_reconstruct(o);
  if (command == "evaluate") return run_evaluate(o);
  throw ValueError("unknown command '" + command + "' in manifest");
}

// Precedence: built-in defaults < preset values < flags given on the command
// line. A preset value is applied only when its flag was not passed.
void apply_preset(Options& o, const CLI::App* cmd) {
  auto set_i = [&](const char* flag, int64_t& dst, int64_t v) {
    if (cmd->count(flag) == 0) dst = v;
  };
  auto set_d = [&](const char* flag, double& dst, double v) {
    if (cmd->count(flag) == 0) dst = v;
  };
  if (o.preset.empty()) return;
  if (o.preset == "paper-mpn") {
    // 60 projections in [-70,70] of a 64^3 volume, bounds (10 px, 10%, 10 deg),
    // 1500 iterations with lambda1=10, lambda2=1, lambda_theta=lambda_x=1e-5.
    set_i("--size", o.size, 64);
    set_i("--tilts", o.tilts, 60);
    set_d("--angle-range", o.angle_range, 70.0);
    set_d("--shift-bound-px", o.shift_bound_px, 10.0);
    set_d("--shear-bound", o.shear_bound, 0.10);
    set_d("--rot-bound-deg", o.rot_bound_deg, 10.0);
    set_d("--lambda1", o.lambda1, 10.0);
    set_d("--lambda2", o.lambda2, 1.0);
    set_d("--lambda-theta", o.lambda_theta, 1e-5);
    set_d("--lambda-x", o.lambda_x, 1e-5);
    set_i("--iterations", o.iterations, 1500);
    set_i("--field-width", o.field_width, 128);
  } else if (o.preset == "paper-neuron") {
    // 50 projections in [-70,70] at sensor size 128, bounds (5 px, 5%, 5 deg),
    // 2000 iterations with lambda1=100, lambda2=1e-2, lambda_theta=1e-6,
    // lambda_x=1e-5.
    set_i("--size", o.size, 128);
    set_i("--tilts", o.tilts, 50);
    set_d("--angle-range", o.angle_range, 70.0);
    set_d("--shift-bound-px", o.shift_bound_px, 5.0);
    set_d("--shear-bound", o.shear_bound, 0.05);
    set_d("--rot-bound-deg", o.rot_bound_deg, 5.0);
    set_d("--lambda1", o.lambda1, 100.0);
    set_d("--lambda2", o.lambda2, 1e-2);
    set_d("--lambda-theta", o.lambda_theta, 1e-6);
    set_d("--lambda-x", o.lambda_x, 1e-5);
    set_i("--iterations", o.iterations, 2000);
    set_i("--field-width", o.field_width, 128);
  } else if (o.preset == "desk") {
    // Reduced-scale variant of the first protocol: runs end to end in minutes
    // on one CPU core while keeping the same loss weights.
    set_i("--size", o.size, 32);
    set_i("--tilts", o.tilts, 60);
    set_d("--angle-range", o.angle_range, 70.0);
    set_d("--shift-bound-px", o.shift_bound_px, 5.0);
    set_d("--shear-bound", o.shear_bound, 0.05);
    set_d("--rot-bound-deg", o.rot_bound_deg, 5.0);
    set_d("--lambda1", o.lambda1, 10.0);
    set_d("--lambda2", o.lambda2, 1.0);
    set_d("--lambda-theta", o.lambda_theta, 1e-5);
    set_d("--lambda-x", o.lambda_x, 1e-5);
    set_i("--iterations", o.iterations, 1500);
    set_i("--field-width", o.field_width, 64);
  } else {
    throw CLI::ValidationError("--preset", "unknown preset '" + o.preset +
                                               "' (expected paper-mpn, paper-neuron, or desk)");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string(kToolName) +
               ": joint tilt-series alignment and tomographic reconstruction"};
  app.set_version_flag("--version", std::string(kToolName) + " " + kVersion);

  std::string from_manifest;
  app.add_option("--from-manifest", from_manifest,
                 "re-execute a previous run from its manifest file (reproduces outputs exactly)");

  Options o;
  auto add_shared = [&](CLI::App* cmd) {
    cmd->add_option("--seed", o.seed, "master seed for all randomized choices")
        ->capture_default_str();
    cmd->add_option("--out-dir", o.out_dir, "directory for output artifacts")
        ->capture_default_str();
    cmd->add_option("--in-dir", o.in_dir, "directory holding input artifacts (default: --out-dir)");
    cmd->add_option("--preset", o.preset, "parameter set: paper-mpn | paper-neuron | desk");
    cmd->add_option("--size", o.size, "volume and sensor side length N")
        ->capture_default_str();
    cmd->add_option("--tilts", o.tilts, "number of projections M")
        ->capture_default_str();
    cmd->add_option("--angle-range", o.angle_range, "tilts span [-range, range] degrees")
        ->capture_default_str();
    cmd->add_option("--snr-db", o.snr_db, "measurement SNR after deformation (dB; inf = noiseless)")
        ->capture_default_str();
    cmd->add_option("--shift-bound-px", o.shift_bound_px, "|shift| bound in pixels")
        ->capture_default_str();
    cmd->add_option("--shear-bound", o.shear_bound, "|shear| bound (fraction of the sensor axis)")
        ->capture_default_str();
    cmd->add_option("--rot-bound-deg", o.rot_bound_deg, "|rotation| bound in degrees")
        ->capture_default_str();
    cmd->add_option("--lambda1", o.lambda1, "data-term weight")
        ->capture_default_str();
    cmd->add_option("--lambda2", o.lambda2, "consistency-term weight")
        ->capture_default_str();
    cmd->add_option("--lambda-theta", o.lambda_theta, "TV weight along the tilt axis")
        ->capture_default_str();
    cmd->add_option("--lambda-x", o.lambda_x, "TV weight along the sensor axes")
        ->capture_default_str();
    cmd->add_option("--iterations", o.iterations, "Adam iterations")
        ->capture_default_str();
    cmd->add_option("--lr-field", o.lr_field, "Adam learning rate for field weights")
        ->capture_default_str();
    cmd->add_option("--lr-deform", o.lr_deform, "Adam learning rate for deformation parameters")
        ->capture_default_str();
    cmd->add_option("--warmup-op", o.warmup_op,
                    "iteration from which the consistency term participates")
        ->capture_default_str();
    cmd->add_option("--subsample", o.subsample, "fraction of sensor pixels per tilt in the data term")
        ->capture_default_str();
    cmd->add_option("--field-width", o.field_width, "hidden width of the field network")
        ->capture_default_str();
    cmd->add_option("--field-layers", o.field_layers, "hidden layers of the field network")
        ->capture_default_str();
    cmd->add_option("--field-frequencies", o.field_frequencies, "encoding frequencies per coordinate")
        ->capture_default_str();
    cmd->add_option("--field-activation", o.field_activation, "hidden activation: relu | sine")
        ->capture_default_str();
    cmd->add_option("--phantom", o.phantom, "procedural phantom: ball | ellipsoids | blobs")
        ->capture_default_str();
    cmd->add_option("--volume", o.volume, "substitute volume (.mrc) instead of a phantom");
  };

  CLI::App* c_sim = app.add_subcommand("simulate", "generate phantom, deformations, and tilt series");
  CLI::App* c_fbp = app.add_subcommand("fbp", "filtered backprojection ignoring deformations");
  CLI::App* c_rec = app.add_subcommand("reconstruct", "joint alignment + field fit, then tomogram");
  CLI::App* c_eval = app.add_subcommand("evaluate", "FSC curves and deformation-error table");
  for (CLI::App* c : {c_sim, c_fbp, c_rec, c_eval}) add_shared(c);
  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // help/version exit 0; any parse failure exits 2
  }

  try {
    if (!from_manifest.empty()) {
      const RunManifest mf = RunManifest::read(from_manifest);
      const auto cmd = mf.get("command");
      if (!cmd) throw ValueError("manifest '" + from_manifest + "' has no command entry");
      return dispatch(*cmd, options_from_manifest(mf));
    }
    CLI::App* chosen = nullptr;
    for (CLI::App* c : {c_sim, c_fbp, c_rec, c_eval})
      if (c->parsed()) chosen = c;
    if (chosen == nullptr) {
      std::cerr << app.help() << std::endl;
      return 2;
    }
    apply_preset(o, chosen);
    return dispatch(chosen->get_name(), o);
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  } catch (const NonFiniteError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 4;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}
