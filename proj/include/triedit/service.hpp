// SPDX-License-Identifier: Apache-2.0
//
// HTTP JSON edit service. Handlers are plain functions of the request so they
// can be exercised without a socket; serve() binds them to an httplib server.
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "triedit/trainer.hpp"

namespace triedit {

struct ServiceConfig {
  int n_preview = 4;                    // novel views returned by /edit, yaws evenly over [-45, 45]
  double session_ttl_s = 600;
  std::size_t max_image_bytes = 4u << 20;  // decoded PNG payload limit (413 above)
  int samples_per_ray = 24;
  int max_adapt_pairs = 20;
  int adapt_steps = 500;
  double adapt_lr = 1e-3;
  int adapt_batch = 2;
  TrainConfig adapt_base;               // loss weights and optimizer constants for /adapt
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// A multipart part or JSON field already decoded to bytes.
struct FormPart {
  std::string name;
  std::string content;
};

struct AdaptJob {
  std::string id;
  std::string style_id;
  std::string status = "queued";  // queued | running | done | failed
  int step = 0, total = 0;
  std::vector<std::pair<int, double>> heldout_curve;
  std::string error;
  std::uint64_t params_version = 0;  // version published on success
  double wall_ms = 0;
};

class EditService {
 public:
  using Clock = std::chrono::steady_clock;

  explicit EditService(ServiceConfig config = {});
  ~EditService();
  EditService(const EditService&) = delete;
  EditService& operator=(const EditService&) = delete;

  /// Installs new weights and bumps params_version. Sessions keep the
  /// weights they were created with.
  void load(ModelParams<float> params);
  bool loaded() const;
  std::uint64_t params_version() const;
  /// Hash of the currently published weights; 0 when none are loaded.
  std::uint64_t params_hash() const;

  HttpResponse handle_edit(const std::string& json_body);
  HttpResponse handle_render(const std::string& session, const std::string& yaw, const std::string& pitch);
  /// JSON body: {"style_id", "prompt": {...}, "pairs": [{"input", "label", "yaw"?, "pitch"?}], "steps"?}
  HttpResponse handle_adapt(const std::string& json_body);
  /// Multipart fields: style_id, prompt_text | prompt_image, input_<k>, label_<k>, yaw_<k>, pitch_<k>, steps.
  HttpResponse handle_adapt_parts(const std::vector<FormPart>& parts);
  HttpResponse handle_adapt_status(const std::string& job_id);
  HttpResponse handle_health() const;

  /// Blocks until no adaptation job is queued or running.
  void wait_for_jobs();
  std::size_t session_count();
  /// Test hook: replaces the clock used for session expiry.
  void set_clock(std::function<Clock::time_point()> now);

  /// Binds all routes and blocks serving on host:port. Returns false if binding fails.
  bool serve(const std::string& host, int port);
  /// Binds to an ephemeral port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Model {
    ModelParams<float> params;
    std::uint64_t version = 0;
    std::uint64_t hash = 0;
  };
  struct Session {
    std::shared_ptr<const Model> model;
    Triplane<float> triplane;
    RenderSettings settings;
    Clock::time_point last_used;
  };
  struct AdaptRequest;

  std::shared_ptr<const Model> snapshot() const;
  void evict_expired();
  HttpResponse start_adapt(AdaptRequest req);
  void run_job(std::shared_ptr<AdaptJob> job, std::shared_ptr<const Model> base, std::shared_ptr<AdaptRequest> req);

  ServiceConfig config_;
  mutable std::mutex model_mu_;
  std::shared_ptr<const Model> model_;
  std::uint64_t version_ = 0;

  std::mutex session_mu_;
  std::map<std::string, Session> sessions_;
  std::uint64_t session_counter_ = 0;
  std::function<Clock::time_point()> now_;

  std::mutex job_mu_;
  std::map<std::string, std::shared_ptr<AdaptJob>> jobs_;
  std::shared_ptr<AdaptJob> active_;
  std::thread worker_;
  std::uint64_t job_counter_ = 0;

  struct Server;
  std::unique_ptr<Server> server_;
  std::thread server_thread_;
};

}  // namespace triedit
