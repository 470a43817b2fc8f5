// SPDX-License-Identifier: Apache-2.0
#include "triedit/service.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <sstream>

#include "httplib.h"
#include "triedit/hashing.hpp"
#include "triedit/image_io.hpp"

namespace triedit {

namespace {

using json = nlohmann::json;

HttpResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, "application/json", json{{"error", code}, {"message", message}}.dump()};
}

HttpResponse json_response(const json& j, int status = 200) { return {status, "application/json", j.dump()}; }

/// Thrown inside handlers to short-circuit with an HTTP error.
struct HttpError {
  int status;
  std::string code;
  std::string message;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

Tensorf decode_image_field(const std::string& b64, std::size_t max_bytes, int size, const std::string& what,
                           int bad_status, const std::string& bad_code) {
  if (b64.size() / 4 * 3 > max_bytes)
    throw HttpError{413, "payload_too_large", what + " exceeds " + std::to_string(max_bytes) + " bytes"};
  try {
    Tensorf img = decode_png(base64_decode(b64));
    if (img.shape() != Shape{size, size, 3})
      throw ValidationError(what + " must be " + std::to_string(size) + "x" + std::to_string(size) + " RGB, got " +
                            shape_str(img.shape()));
    return img;
  } catch (const ValidationError& e) {
    throw HttpError{bad_status, bad_code, e.what()};
  }
}

double pose_value(const json& j, const char* key, double limit, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw HttpError{400, "bad_pose", std::string(key) + " must be a number"};
  const double v = j[key].get<double>();
  if (!std::isfinite(v) || std::abs(v) > limit)
    throw HttpError{400, "bad_pose", std::string(key) + " must lie in [-" + std::to_string(int(limit)) + ", " +
                                         std::to_string(int(limit)) + "]"};
  return v;
}

double parse_number(const std::string& s, const char* key, double limit) {
  if (s.empty()) throw HttpError{400, "bad_pose", std::string("missing ") + key};
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw HttpError{400, "bad_pose", std::string(key) + " is not a number"};
  }
  if (used != s.size() || !std::isfinite(v) || std::abs(v) > limit)
    throw HttpError{400, "bad_pose", std::string(key) + " is invalid or out of range"};
  return v;
}

CameraPose service_pose(double yaw, double pitch, const ModelConfig& mc) {
  OrbitSettings o;
  o.image_size = mc.image_size;
  o.extent = mc.triplane_extent;
  return orbit_pose(yaw, pitch, o);
}

Prompt parse_prompt(const json& j, const ModelConfig& mc, std::size_t max_bytes, int bad_status,
                    const std::string& bad_code) {
  try {
    if (j.is_string()) return Prompt::from_text(j.get<std::string>(), mc.vocab_size);
    if (!j.is_object()) throw ValidationError("prompt must be a string or an object");
    const std::string type = j.value("type", j.contains("image") ? "image" : "text");
    Prompt p;
    if (type == "text") {
      p = Prompt::from_text(j.at("text").get<std::string>(), mc.vocab_size);
    } else if (type == "image") {
      p = Prompt::from_image(
          decode_image_field(j.at("image").get<std::string>(), max_bytes, mc.image_size, "prompt image", bad_status,
                             bad_code));
    } else {
      throw ValidationError("prompt type must be text or image");
    }
    p.validate(mc);
    return p;
  } catch (const ValidationError& e) {
    throw HttpError{bad_status, bad_code, e.what()};
  } catch (const json::exception& e) {
    throw HttpError{bad_status, bad_code, std::string("malformed prompt: ") + e.what()};
  }
}

json job_json(const AdaptJob& j) {
  json curve = json::array();
  for (const auto& [s, l] : j.heldout_curve) curve.push_back({{"step", s}, {"image_loss", l}});
  json out{{"job_id", j.id},       {"style_id", j.style_id}, {"status", j.status},     {"step", j.step},
           {"total", j.total},     {"heldout_curve", curve}, {"wall_ms", j.wall_ms}};
  if (j.status == "done") out["params_version"] = j.params_version;
  if (!j.error.empty()) out["error"] = j.error;
  return out;
}

}  // namespace

struct EditService::AdaptRequest {
  std::string style_id;
  Prompt prompt;
  std::vector<EditSample> pairs;
  int steps = 0;
};

struct EditService::Server {
  httplib::Server http;
};

EditService::EditService(ServiceConfig config) : config_(std::move(config)), now_([] { return Clock::now(); }) {
  require(config_.n_preview >= 0 && config_.n_preview <= 16, "n_preview must be in [0, 16]");
  require(config_.session_ttl_s > 0, "session_ttl_s must be > 0");
  require(config_.samples_per_ray >= 1, "samples_per_ray must be >= 1");
  require(config_.max_adapt_pairs >= 1, "max_adapt_pairs must be >= 1");
  require(config_.adapt_steps >= 0, "adapt_steps must be >= 0");
  std::random_device rd;
  session_counter_ = (std::uint64_t(rd()) << 32) ^ rd();
  job_counter_ = 0;
}

EditService::~EditService() {
  stop();
  if (worker_.joinable()) worker_.join();
}

void EditService::load(ModelParams<float> params) {
  params.config.validate();
  auto m = std::make_shared<Model>();
  m->hash = triedit::params_hash(params);
  m->params = std::move(params);
  std::lock_guard lock(model_mu_);
  m->version = ++version_;
  model_ = std::move(m);
}

std::shared_ptr<const EditService::Model> EditService::snapshot() const {
  std::lock_guard lock(model_mu_);
  return model_;
}

bool EditService::loaded() const { return snapshot() != nullptr; }

std::uint64_t EditService::params_version() const {
  std::lock_guard lock(model_mu_);
  return version_;
}

std::uint64_t EditService::params_hash() const {
  const auto m = snapshot();
  return m ? m->hash : 0;
}

void EditService::set_clock(std::function<Clock::time_point()> now) {
  std::lock_guard lock(session_mu_);
  now_ = std::move(now);
}

void EditService::evict_expired() {
  std::lock_guard lock(session_mu_);
  const auto now = now_();
  const auto ttl = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(config_.session_ttl_s));
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second.last_used > ttl)
      it = sessions_.erase(it);
    else
      ++it;
  }
}

std::size_t EditService::session_count() {
  evict_expired();
  std::lock_guard lock(session_mu_);
  return sessions_.size();
}

HttpResponse EditService::handle_health() const {
  const auto m = snapshot();
  return json_response({{"status", "ok"},
                        {"model_loaded", m != nullptr},
                        {"params_version", m ? m->version : 0},
                        {"params_hash", m ? hex64(m->hash) : ""}});
}

HttpResponse EditService::handle_edit(const std::string& body) {
  const auto t0 = Clock::now();
  try {
    evict_expired();
    const auto model = snapshot();
    if (!model) return error_response(503, "model_not_loaded", "no model weights are loaded");
    const ModelConfig& mc = model->params.config;
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error_response(400, "bad_request", std::string("body is not valid JSON: ") + e.what());
    }
    if (!req.is_object()) return error_response(400, "bad_request", "body must be a JSON object");
    if (!req.contains("image") || !req["image"].is_string())
      return error_response(400, "bad_image", "image must be a base64 PNG string");
    Tensorf img = decode_image_field(req["image"].get<std::string>(), config_.max_image_bytes, mc.image_size, "image",
                                     400, "bad_image");
    if (!req.contains("prompt")) return error_response(400, "bad_prompt", "prompt is required");
    const Prompt prompt = parse_prompt(req["prompt"], mc, config_.max_image_bytes, 400, "bad_prompt");
    const double yaw = pose_value(req, "yaw", 90, 0), pitch = pose_value(req, "pitch", 45, 0);
    RenderSettings rs{config_.samples_per_ray, SamplingMode::Midpoint, 0};
    if (req.contains("seed") && !req["seed"].is_null()) {
      if (!req["seed"].is_number_integer() || req["seed"].get<long long>() < 0)
        return error_response(400, "bad_request", "seed must be a non-negative integer");
      rs.mode = SamplingMode::Stratified;
      rs.seed = req["seed"].get<std::uint64_t>();
    }

    Triplane<float> t = edit(img, prompt, model->params);
    const RenderOutput main = render_model(t, model->params, service_pose(yaw, pitch, mc), rs);
    json views = json::array();
    for (int k = 0; k < config_.n_preview; ++k) {
      const double vy = config_.n_preview == 1 ? 0.0 : -45.0 + 90.0 * k / (config_.n_preview - 1);
      const RenderOutput v = render_model(t, model->params, service_pose(vy, 0, mc), rs);
      views.push_back({{"yaw", vy}, {"pitch", 0.0}, {"image", base64_encode(encode_png(v.rgb_final))}});
    }

    std::string sid;
    {
      std::lock_guard lock(session_mu_);
      sid = hex64(mix_seed(++session_counter_, 0x5E55));
      sessions_[sid] = Session{model, std::move(t), rs, now_()};
    }
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    return json_response({{"edited", base64_encode(encode_png(main.rgb_final))},
                          {"novel_views", views},
                          {"depth", base64_encode(encode_depth(main.depth))},
                          {"latency_ms", ms},
                          {"session_id", sid},
                          {"params_version", model->version}});
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message);
  } catch (const ValidationError& e) {
    return error_response(400, "bad_request", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

HttpResponse EditService::handle_render(const std::string& session, const std::string& yaw_s,
                                        const std::string& pitch_s) {
  try {
    evict_expired();
    const double yaw = parse_number(yaw_s, "yaw", 90), pitch = parse_number(pitch_s, "pitch", 45);
    std::shared_ptr<const Model> model;
    Triplane<float> t;
    RenderSettings rs;
    {
      std::lock_guard lock(session_mu_);
      auto it = sessions_.find(session);
      if (it == sessions_.end()) return error_response(404, "unknown_session", "session is unknown or expired");
      it->second.last_used = now_();
      model = it->second.model;
      t = it->second.triplane;
      rs = it->second.settings;
    }
    const RenderOutput out = render_model(t, model->params, service_pose(yaw, pitch, model->params.config), rs);
    return {200, "image/png", encode_png(out.rgb_final)};
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message);
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

HttpResponse EditService::handle_adapt(const std::string& body) {
  try {
    const auto model = snapshot();
    if (!model) return error_response(503, "model_not_loaded", "no model weights are loaded");
    {
      std::lock_guard lock(job_mu_);
      if (active_) return error_response(409, "job_running", "adaptation job " + active_->id + " is still running");
    }
    const ModelConfig& mc = model->params.config;
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error_response(400, "bad_request", std::string("body is not valid JSON: ") + e.what());
    }
    AdaptRequest ar;
    if (!req.is_object() || !req.contains("style_id") || !req["style_id"].is_string() ||
        req["style_id"].get<std::string>().empty())
      return error_response(422, "bad_pairs", "style_id must be a non-empty string");
    ar.style_id = req["style_id"].get<std::string>();
    EditStyle named;
    named.style_id = ar.style_id;
    ar.prompt = req.contains("prompt") ? parse_prompt(req["prompt"], mc, config_.max_image_bytes, 422, "bad_pairs")
                                       : Prompt::from_text(named.instruction(), mc.vocab_size);
    if (!req.contains("pairs") || !req["pairs"].is_array() || req["pairs"].empty())
      return error_response(422, "bad_pairs", "pairs must be a non-empty array");
    if (static_cast<int>(req["pairs"].size()) > config_.max_adapt_pairs)
      return error_response(422, "bad_pairs", "at most " + std::to_string(config_.max_adapt_pairs) + " pairs");
    int k = 0;
    for (const auto& pj : req["pairs"]) {
      if (!pj.is_object() || !pj.contains("input") || !pj.contains("label") || !pj["input"].is_string() ||
          !pj["label"].is_string())
        return error_response(422, "bad_pairs", "pair " + std::to_string(k) + " needs input and label images");
      EditSample s;
      s.id = "pair" + std::to_string(k);
      s.style_id = ar.style_id;
      s.input = decode_image_field(pj["input"].get<std::string>(), config_.max_image_bytes, mc.image_size,
                                   s.id + " input", 422, "bad_pairs");
      s.pseudo_label = decode_image_field(pj["label"].get<std::string>(), config_.max_image_bytes, mc.image_size,
                                          s.id + " label", 422, "bad_pairs");
      try {
        s.pose = service_pose(pose_value(pj, "yaw", 90, 0), pose_value(pj, "pitch", 45, 0), mc);
      } catch (const HttpError& e) {
        return error_response(422, "bad_pairs", e.message);
      }
      s.prompt = ar.prompt;
      ar.pairs.push_back(std::move(s));
      ++k;
    }
    ar.steps = config_.adapt_steps;
    if (req.contains("steps")) {
      if (!req["steps"].is_number_integer() || req["steps"].get<long long>() < 0 ||
          req["steps"].get<long long>() > 100000)
        return error_response(422, "bad_pairs", "steps must be an integer in [0, 100000]");
      ar.steps = req["steps"].get<int>();
    }
    return start_adapt(std::move(ar));
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message);
  } catch (const ValidationError& e) {
    return error_response(422, "bad_pairs", e.what());
  } catch (const std::exception& e) {
    return error_response(500, "internal", e.what());
  }
}

HttpResponse EditService::handle_adapt_parts(const std::vector<FormPart>& parts) {
  // Translate the multipart form into the JSON request shape.
  std::map<std::string, std::string> f;
  for (const auto& p : parts) f[p.name] = p.content;
  json req;
  if (f.count("style_id")) req["style_id"] = f["style_id"];
  if (f.count("prompt_image"))
    req["prompt"] = {{"type", "image"}, {"image", base64_encode(f["prompt_image"])}};
  else if (f.count("prompt_text"))
    req["prompt"] = {{"type", "text"}, {"text", f["prompt_text"]}};
  if (f.count("steps")) {
    try {
      req["steps"] = std::stoi(f["steps"]);
    } catch (const std::exception&) {
      return error_response(422, "bad_pairs", "steps must be an integer");
    }
  }
  req["pairs"] = json::array();
  for (int k = 0; f.count("input_" + std::to_string(k)) || f.count("label_" + std::to_string(k)); ++k) {
    const std::string s = std::to_string(k);
    json pj;
    if (f.count("input_" + s)) pj["input"] = base64_encode(f["input_" + s]);
    if (f.count("label_" + s)) pj["label"] = base64_encode(f["label_" + s]);
    for (const char* key : {"yaw", "pitch"}) {
      const auto it = f.find(std::string(key) + "_" + s);
      if (it == f.end()) continue;
      try {
        pj[key] = std::stod(it->second);
      } catch (const std::exception&) {
        return error_response(422, "bad_pairs", std::string(key) + "_" + s + " is not a number");
      }
    }
    req["pairs"].push_back(pj);
  }
  return handle_adapt(req.dump());
}

HttpResponse EditService::start_adapt(AdaptRequest req) {
  std::lock_guard lock(job_mu_);
  if (active_) return error_response(409, "job_running", "adaptation job " + active_->id + " is still running");
  if (worker_.joinable()) worker_.join();
  auto job = std::make_shared<AdaptJob>();
  job->id = "job" + std::to_string(++job_counter_);
  job->style_id = req.style_id;
  job->total = req.steps;
  jobs_[job->id] = job;
  active_ = job;
  worker_ = std::thread(&EditService::run_job, this, job, snapshot(), std::make_shared<AdaptRequest>(std::move(req)));
  return json_response({{"job_id", job->id}, {"status", "queued"}}, 202);
}

void EditService::run_job(std::shared_ptr<AdaptJob> job, std::shared_ptr<const Model> base,
                          std::shared_ptr<AdaptRequest> req) {
  {
    std::lock_guard lock(job_mu_);
    job->status = "running";
  }
  try {
    // With two or more pairs the last one is held out for the loss curve.
    std::vector<EditSample> train = req->pairs;
    std::optional<EditSample> held;
    if (train.size() >= 2) {
      held = train.back();
      train.pop_back();
    }
    AdaptOptions opt;
    opt.steps = req->steps;
    opt.lr = config_.adapt_lr;
    opt.batch_size = std::min<int>(config_.adapt_batch, static_cast<int>(train.size()));
    opt.heldout = held ? &*held : nullptr;
    opt.progress = [&](int step, int) {
      std::lock_guard lock(job_mu_);
      job->step = step;
    };
    TrainConfig cfg = config_.adapt_base;
    cfg.samples_per_ray = config_.samples_per_ray;
    AdaptResult r = adapt(base->params, train, cfg, opt);
    load(std::move(r.params));
    std::lock_guard lock(job_mu_);
    job->heldout_curve = r.heldout_curve;
    job->wall_ms = r.wall_ms;
    job->params_version = params_version();
    job->status = "done";
    active_.reset();
  } catch (const std::exception& e) {
    std::lock_guard lock(job_mu_);
    job->status = "failed";
    job->error = e.what();
    active_.reset();
  }
}

HttpResponse EditService::handle_adapt_status(const std::string& job_id) {
  std::lock_guard lock(job_mu_);
  const auto it = jobs_.find(job_id);
  if (it == jobs_.end()) return error_response(404, "unknown_job", "no such adaptation job");
  return json_response(job_json(*it->second));
}

void EditService::wait_for_jobs() {
  std::thread w;
  {
    std::lock_guard lock(job_mu_);
    w = std::move(worker_);
  }
  if (w.joinable()) w.join();
}

namespace {

void reply(httplib::Response& res, const HttpResponse& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

namespace {

void install_routes(httplib::Server& s, EditService& svc, std::size_t max_payload) {
  s.set_payload_max_length(max_payload);
  s.Post("/edit", [&svc](const httplib::Request& req, httplib::Response& res) { reply(res, svc.handle_edit(req.body)); });
  s.Get("/render", [&svc](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.handle_render(req.get_param_value("session"), req.get_param_value("yaw"),
                                 req.get_param_value("pitch")));
  });
  s.Post("/adapt", [&svc](const httplib::Request& req, httplib::Response& res) {
    if (req.is_multipart_form_data()) {
      std::vector<FormPart> parts;
      for (const auto& [name, f] : req.files) parts.push_back({name, f.content});
      reply(res, svc.handle_adapt_parts(parts));
    } else {
      reply(res, svc.handle_adapt(req.body));
    }
  });
  s.Get(R"(/adapt/([A-Za-z0-9_-]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.handle_adapt_status(req.matches[1]));
  });
  s.Get("/health", [&svc](const httplib::Request&, httplib::Response& res) { reply(res, svc.handle_health()); });
}

}  // namespace

bool EditService::serve(const std::string& host, int port) {
  stop();
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this, config_.max_image_bytes * 4 + (1u << 20));
  return server_->http.listen(host, port);
}

int EditService::start_background(const std::string& host) {
  stop();
  server_ = std::make_unique<Server>();
  install_routes(server_->http, *this, config_.max_image_bytes * 4 + (1u << 20));
  const int port = server_->http.bind_to_any_port(host);
  if (port <= 0) return -1;
  server_thread_ = std::thread([this] { server_->http.listen_after_bind(); });
  server_->http.wait_until_ready();
  return port;
}

void EditService::stop() {
  if (server_) server_->http.stop();
  if (server_thread_.joinable()) server_thread_.join();
  server_.reset();
}

}  // namespace triedit
