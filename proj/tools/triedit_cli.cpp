// SPDX-License-Identifier: Apache-2.0
//
// triedit command line: make-data, train, adapt, edit, render, eval, serve.
// Exit codes: 0 success, 2 invalid input, 1 runtime failure.
#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "triedit/error.hpp"
#include "triedit/eval.hpp"
#include "triedit/image_io.hpp"
#include "triedit/service.hpp"
#include "triedit/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace triedit;

namespace {

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_file_atomic(path, j.dump(2) + "\n");
}

std::vector<std::string> split_ids(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Checkpoint path from the flag, overridden by TRIEDIT_MODEL when set.
std::string model_path(const std::string& flag) {
  if (const char* env = std::getenv("TRIEDIT_MODEL"); env && *env) return env;
  if (flag.empty()) throw ValidationError("--ckpt is required (or set TRIEDIT_MODEL)");
  return flag;
}

Prompt make_prompt(const std::string& text, const std::string& image_path, const ModelConfig& mc) {
  if (text.empty() == image_path.empty()) throw ValidationError("give exactly one of --prompt and --prompt-image");
  return text.empty() ? Prompt::from_image(read_png(image_path)) : Prompt::from_text(text, mc.vocab_size);
}

CameraPose pose_for(double yaw, double pitch, const ModelConfig& mc) {
  require(std::abs(yaw) <= 90 && std::abs(pitch) <= 45, "yaw must be in [-90, 90] and pitch in [-45, 45]");
  OrbitSettings o;
  o.image_size = mc.image_size;
  o.extent = mc.triplane_extent;
  return orbit_pose(yaw, pitch, o);
}

// ---------------------------------------------------------------------------

struct MakeDataArgs {
  std::string config, out, styles;
  std::optional<int> scenes, cameras_per_scene, camera_set_size, march_samples, fit_iterations;
  std::optional<std::string> camera_set, prompt_mode;
  std::optional<std::uint64_t> seed;
};

int run_make_data(const MakeDataArgs& a) {
  // Flags override the config file field by field; validation runs once on the merged JSON.
  json j = a.config.empty() ? json::object() : read_json(a.config);
  if (a.scenes) j["num_scenes"] = *a.scenes;
  if (a.cameras_per_scene) j["cameras_per_scene"] = *a.cameras_per_scene;
  if (a.camera_set_size) j["camera_set_size"] = *a.camera_set_size;
  if (a.march_samples) j["march_samples"] = *a.march_samples;
  if (a.fit_iterations) j["fit"]["iterations"] = *a.fit_iterations;
  if (a.camera_set) j["camera_set"] = *a.camera_set;
  if (a.seed) j["seed"] = *a.seed;
  if (a.prompt_mode) j["prompt_mode"] = *a.prompt_mode;
  std::vector<std::string> ids = split_ids(a.styles);
  if (ids.empty() && !j.contains("styles")) ids = {"sepia", "alien"};
  if (!ids.empty()) {
    j["styles"] = json::array();
    for (const auto& id : ids) j["styles"].push_back(id);
  }
  DatasetConfig c;
  try {
    c = j.get<DatasetConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("dataset config: ") + e.what());
  }
  const Dataset d = build_dataset(c);
  save_dataset(d, a.out);
  std::cout << json{{"out", a.out}, {"samples", d.samples.size()}, {"teachers", d.teachers.size()},
                    {"hash", d.hash()}}.dump()
            << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, mode = "distill_train", init;
  bool resume = false;
  std::optional<double> lr, lambda1, lambda2, clip_norm;
  std::optional<int> batch_size, steps, samples_per_ray, views_per_step, log_every, checkpoint_every;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  const Dataset d = load_dataset(a.data);
  TrainConfig c;
  c.model = d.config.model;
  if (!a.config.empty()) {
    try {
      c = read_json(a.config).get<TrainConfig>();
    } catch (const json::exception& e) {
      throw ValidationError(std::string("train config: ") + e.what());
    }
  }
  if (a.lr) c.lr = *a.lr;
  if (a.lambda1) c.loss_weights.lambda1 = *a.lambda1;
  if (a.lambda2) c.loss_weights.lambda2 = *a.lambda2;
  if (a.clip_norm) c.clip_norm = *a.clip_norm;
  if (a.batch_size) c.batch_size = *a.batch_size;
  if (a.steps) c.max_steps = *a.steps;
  if (a.samples_per_ray) c.samples_per_ray = *a.samples_per_ray;
  if (a.views_per_step) c.views_per_step = *a.views_per_step;
  if (a.log_every) c.log_every = *a.log_every;
  if (a.checkpoint_every) c.checkpoint_every = *a.checkpoint_every;
  if (a.seed) c.seed = *a.seed;
  const TrainMode mode = mode_from_name(a.mode);
  require(mode != TrainMode::Adapt, "use the adapt subcommand for adaptation");

  fs::create_directories(a.out);
  const std::string ckpt = (fs::path(a.out) / "checkpoint.ckpt").string();
  const std::string log_path = (fs::path(a.out) / "train_log.jsonl").string();
  std::optional<Trainer<float>> tr;
  if (a.resume && fs::exists(ckpt)) {
    tr.emplace(Trainer<float>::load(ckpt));
    require(tr->mode() == mode, "checkpoint mode " + mode_name(tr->mode()) + " differs from --mode");
  } else {
    ModelParams<float> p = a.init.empty() ? ModelParams<float>::init(c.model) : load_model(a.init).params;
    require(json(p.config) == json(d.config.model), "model config differs from the dataset's model config");
    c.model = p.config;
    tr.emplace(std::move(p), c, mode);
  }
  write_json((fs::path(a.out) / "config.json").string(), tr->config());
  const auto pool = make_pool(d, mode);
  const long target = a.steps ? *a.steps : tr->config().max_steps;
  const int remaining = static_cast<int>(std::max<long>(0, target - tr->steps_done()));
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot write " + log_path);
  run_training(*tr, pool, remaining, &log, ckpt);
  tr->save(ckpt);
  std::cout << json{{"checkpoint", ckpt}, {"steps", tr->steps_done()}}.dump() << "\n";
  return 0;
}

struct AdaptArgs {
  std::string ckpt, pairs, out, prompt, prompt_image, config;
  int steps = 500;
  double lr = 1e-3;
  int batch_size = 2;
  std::string heldout;
};

/// Pairs directory: <name>_input.png with <name>_label.png, optional <name>_pose.json.
std::vector<EditSample> read_pairs(const std::string& dir, const Prompt& prompt, const ModelConfig& mc) {
  if (!fs::is_directory(dir)) throw IoError("pairs directory not found: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string f = e.path().filename().string();
    const std::string suffix = "_input.png";
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0)
      names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  require(!names.empty(), "no *_input.png files in " + dir);
  std::vector<EditSample> out;
  for (const auto& n : names) {
    EditSample s;
    s.id = n;
    s.input = read_png((fs::path(dir) / (n + "_input.png")).string());
    s.pseudo_label = read_png((fs::path(dir) / (n + "_label.png")).string());
    validate_image(s.input, mc.image_size);
    validate_image(s.pseudo_label, mc.image_size);
    const fs::path pose = fs::path(dir) / (n + "_pose.json");
    s.pose = fs::exists(pose) ? read_json(pose.string()).get<CameraPose>() : pose_for(0, 0, mc);
    s.prompt = prompt;
    out.push_back(std::move(s));
  }
  return out;
}

int run_adapt(const AdaptArgs& a) {
  LoadedModel m = load_model(model_path(a.ckpt));
  const Prompt prompt = make_prompt(a.prompt, a.prompt_image, m.params.config);
  auto pairs = read_pairs(a.pairs, prompt, m.params.config);
  std::optional<EditSample> held;
  if (!a.heldout.empty()) {
    auto h = read_pairs(a.heldout, prompt, m.params.config);
    held = h.front();
  }
  TrainConfig base;
  if (!a.config.empty()) base = read_json(a.config).get<TrainConfig>();
  AdaptOptions opt;
  opt.steps = a.steps;
  opt.lr = a.lr;
  opt.batch_size = std::min<int>(a.batch_size, static_cast<int>(pairs.size()));
  opt.heldout = held ? &*held : nullptr;
  AdaptResult r = adapt(m.params, pairs, base, opt);
  save_model(r.params, a.out, TrainMode::Adapt, m.clip_r_excluded);
  json curve = json::array();
  for (const auto& [s, l] : r.heldout_curve) curve.push_back({{"step", s}, {"image_loss", l}});
  std::cout << json{{"out", a.out}, {"pairs", pairs.size()}, {"wall_ms", r.wall_ms}, {"heldout_curve", curve}}.dump()
            << "\n";
  return 0;
}

struct EditArgs {
  std::string ckpt, image, prompt, prompt_image, out, depth_out, triplane_out;
  double yaw = 0, pitch = 0;
  std::optional<std::uint64_t> seed;
  int samples = 24;
};

int run_edit(const EditArgs& a) {
  LoadedModel m = load_model(model_path(a.ckpt));
  const ModelConfig& mc = m.params.config;
  const Tensorf img = read_png(a.image);
  validate_image(img, mc.image_size);
  const Prompt prompt = make_prompt(a.prompt, a.prompt_image, mc);
  const Triplane<float> t = edit(img, prompt, m.params);
  RenderSettings rs{a.samples, a.seed ? SamplingMode::Stratified : SamplingMode::Midpoint, a.seed.value_or(0)};
  const RenderOutput out = render_model(t, m.params, pose_for(a.yaw, a.pitch, mc), rs);
  write_png(a.out, out.rgb_final);
  if (!a.depth_out.empty()) save_depth(a.depth_out, out.depth);
  if (!a.triplane_out.empty()) save_triplane(a.triplane_out, t);
  return 0;
}

struct RenderArgs {
  std::string triplane, pose, out, ckpt, depth_out;
  int samples = 32, size = 32;
  std::optional<std::uint64_t> seed;
};

int run_render(const RenderArgs& a) {
  const Triplane<float> t = load_triplane(a.triplane);
  CameraPose pose = read_json(a.pose).get<CameraPose>();
  RenderSettings rs{a.samples, a.seed ? SamplingMode::Stratified : SamplingMode::Midpoint, a.seed.value_or(0)};
  RenderOutput out;
  std::string ck = a.ckpt;
  if (ck.empty())
    if (const char* env = std::getenv("TRIEDIT_MODEL"); env && *env) ck = env;
  if (!ck.empty()) {
    // Full path: low-res render plus the model's upsampler at the model's size.
    const LoadedModel m = load_model(ck);
    out = render_model(t, m.params, pose, rs);
    write_png(a.out, out.rgb_final);
  } else {
    ModelConfig mc;
    mc.triplane_channels = t.channels();
    out = volume_render(t, canonical_decoder(mc), pose, a.size, a.size, rs);
    write_png(a.out, out.rgb_low);
  }
  if (!a.depth_out.empty()) save_depth(a.depth_out, out.depth);
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, out;
  int timing_runs = 100, max_samples = 0, samples = 24;
};

int run_eval(const EvalArgs& a) {
  const LoadedModel m = load_model(model_path(a.ckpt));
  const Dataset d = load_dataset(a.data);
  EvalOptions o;
  o.timing_runs = a.timing_runs;
  o.max_samples = a.max_samples;
  o.samples_per_ray = a.samples;
  o.clip_r_excluded = m.clip_r_excluded;
  const EvalReport r = evaluate(m.params, d, o);
  json j = r;
  write_json(a.out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

struct ServeArgs {
  std::string ckpt, host = "127.0.0.1";
  int port = 8080, preview = 4, samples = 24;
  double ttl = 600;
};

int run_serve(const ServeArgs& a) {
  ServiceConfig c;
  c.n_preview = a.preview;
  c.samples_per_ray = a.samples;
  c.session_ttl_s = a.ttl;
  EditService svc(c);
  const std::string path = model_path(a.ckpt);
  LoadedModel m = load_model(path);
  svc.load(std::move(m.params));
  std::cerr << "serving " << path << " on http://" << a.host << ":" << a.port << "\n";
  if (!svc.serve(a.host, a.port)) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(a.port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"triedit: prompt-driven 3D portrait editing at desk scale"};
  app.require_subcommand(1);

  MakeDataArgs md;
  auto* c_md = app.add_subcommand("make-data", "Build a synthetic dataset with teacher targets");
  c_md->add_option("--out", md.out, "Output directory")->required();
  c_md->add_option("--config", md.config, "DatasetConfig JSON");
  c_md->add_option("--scenes", md.scenes, "num_scenes");
  c_md->add_option("--styles", md.styles, "Comma-separated style ids");
  c_md->add_option("--cameras-per-scene", md.cameras_per_scene, "cameras_per_scene");
  c_md->add_option("--camera-set", md.camera_set, "front_arc or ring");
  c_md->add_option("--camera-set-size", md.camera_set_size, "camera_set_size");
  c_md->add_option("--march-samples", md.march_samples, "march_samples");
  c_md->add_option("--fit-iterations", md.fit_iterations, "fit.iterations");
  c_md->add_option("--prompt-mode", md.prompt_mode, "text, image or mixed");
  c_md->add_option("--seed", md.seed, "seed");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Pretrain or distill; writes checkpoint.ckpt and train_log.jsonl");
  c_tr->add_option("--data", tr.data, "Dataset directory")->required();
  c_tr->add_option("--out", tr.out, "Run directory")->required();
  c_tr->add_option("--config", tr.config, "TrainConfig JSON");
  c_tr->add_option("--mode", tr.mode, "pretrain or distill_train");
  c_tr->add_option("--init", tr.init, "Start from this checkpoint's weights");
  c_tr->add_flag("--resume", tr.resume, "Continue from RUNDIR/checkpoint.ckpt if present");
  c_tr->add_option("--lr", tr.lr, "lr");
  c_tr->add_option("--lambda1", tr.lambda1, "loss_weights.lambda1");
  c_tr->add_option("--lambda2", tr.lambda2, "loss_weights.lambda2");
  c_tr->add_option("--clip-norm", tr.clip_norm, "clip_norm");
  c_tr->add_option("--batch-size", tr.batch_size, "batch_size");
  c_tr->add_option("--steps", tr.steps, "max_steps");
  c_tr->add_option("--samples-per-ray", tr.samples_per_ray, "samples_per_ray");
  c_tr->add_option("--views-per-step", tr.views_per_step, "views_per_step");
  c_tr->add_option("--log-every", tr.log_every, "log_every");
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "checkpoint_every");
  c_tr->add_option("--seed", tr.seed, "seed");

  AdaptArgs ad;
  auto* c_ad = app.add_subcommand("adapt", "Few-pair adaptation to a new prompt");
  c_ad->add_option("--ckpt", ad.ckpt, "Base checkpoint (TRIEDIT_MODEL overrides)");
  c_ad->add_option("--pairs", ad.pairs, "Directory of <name>_input.png / <name>_label.png")->required();
  c_ad->add_option("--out", ad.out, "Adapted checkpoint")->required();
  c_ad->add_option("--prompt", ad.prompt, "Text prompt");
  c_ad->add_option("--prompt-image", ad.prompt_image, "Image prompt PNG");
  c_ad->add_option("--heldout", ad.heldout, "Directory with one held-out pair");
  c_ad->add_option("--config", ad.config, "TrainConfig JSON for loss weights and optimizer constants");
  c_ad->add_option("--steps", ad.steps, "Steps")->check(CLI::NonNegativeNumber);
  c_ad->add_option("--lr", ad.lr, "Learning rate")->check(CLI::PositiveNumber);
  c_ad->add_option("--batch-size", ad.batch_size, "Batch size")->check(CLI::PositiveNumber);

  EditArgs ed;
  auto* c_ed = app.add_subcommand("edit", "Edit one image and render the input view");
  c_ed->add_option("--ckpt", ed.ckpt, "Checkpoint (TRIEDIT_MODEL overrides)");
  c_ed->add_option("--image", ed.image, "Input PNG")->required();
  c_ed->add_option("--prompt", ed.prompt, "Text prompt");
  c_ed->add_option("--prompt-image", ed.prompt_image, "Image prompt PNG");
  c_ed->add_option("--yaw", ed.yaw, "Render yaw (degrees)");
  c_ed->add_option("--pitch", ed.pitch, "Render pitch (degrees)");
  c_ed->add_option("--seed", ed.seed, "Stratified sampling seed (midpoint when absent)");
  c_ed->add_option("--samples", ed.samples, "Samples per ray")->check(CLI::PositiveNumber);
  c_ed->add_option("--out", ed.out, "Output PNG")->required();
  c_ed->add_option("--depth-out", ed.depth_out, "Depth map output");
  c_ed->add_option("--triplane-out", ed.triplane_out, "Edited triplane output");

  RenderArgs rd;
  auto* c_rd = app.add_subcommand("render", "Render a saved triplane at a pose");
  c_rd->add_option("--triplane", rd.triplane, "Triplane file")->required();
  c_rd->add_option("--pose", rd.pose, "Pose JSON file")->required();
  c_rd->add_option("--samples", rd.samples, "Samples per ray")->check(CLI::PositiveNumber);
  c_rd->add_option("--seed", rd.seed, "Stratified sampling seed (midpoint when absent)");
  c_rd->add_option("--size", rd.size, "Image size without --ckpt")->check(CLI::PositiveNumber);
  c_rd->add_option("--ckpt", rd.ckpt, "Use this model's decoder and upsampler");
  c_rd->add_option("--out", rd.out, "Output PNG")->required();
  c_rd->add_option("--depth-out", rd.depth_out, "Depth map output");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluation report for a checkpoint");
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint (TRIEDIT_MODEL overrides)");
  c_ev->add_option("--data", ev.data, "Dataset directory")->required();
  c_ev->add_option("--out", ev.out, "Report JSON")->required();
  c_ev->add_option("--timing-runs", ev.timing_runs, "Timed runs")->check(CLI::PositiveNumber);
  c_ev->add_option("--max-samples", ev.max_samples, "Limit evaluated samples (0 = all)");
  c_ev->add_option("--samples", ev.samples, "Samples per ray")->check(CLI::PositiveNumber);

  ServeArgs sv;
  auto* c_sv = app.add_subcommand("serve", "HTTP edit service");
  c_sv->add_option("--ckpt", sv.ckpt, "Checkpoint (TRIEDIT_MODEL overrides)");
  c_sv->add_option("--host", sv.host, "Bind address");
  c_sv->add_option("--port", sv.port, "Port")->check(CLI::Range(0, 65535));
  c_sv->add_option("--preview-views", sv.preview, "Novel views per /edit")->check(CLI::Range(0, 16));
  c_sv->add_option("--samples", sv.samples, "Samples per ray")->check(CLI::PositiveNumber);
  c_sv->add_option("--session-ttl", sv.ttl, "Session TTL in seconds")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (*c_md) return run_make_data(md);
    if (*c_tr) return run_train(tr);
    if (*c_ad) return run_adapt(ad);
    if (*c_ed) return run_edit(ed);
    if (*c_rd) return run_render(rd);
    if (*c_ev) return run_eval(ev);
    if (*c_sv) return run_serve(sv);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
