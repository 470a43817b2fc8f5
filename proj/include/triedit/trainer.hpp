// SPDX-License-Identifier: Apache-2.0
//
// Training: reconstruction pretraining, distillation with the freezing
// contract, few-pair adaptation, Adam with global-norm clipping and
// single-file checkpoints.
#pragma once

#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triedit/optim.hpp"
#include "triedit/synthetic.hpp"

namespace triedit {

enum class TrainMode { Pretrain, Distill, Adapt };
std::string mode_name(TrainMode m);
TrainMode mode_from_name(const std::string& s);

/// Trainable set per mode:
///   pretrain: everything except decoder_mlp (the teacher triplanes are fitted against it);
///   distill:  e_p and e_t;
///   adapt:    e_p and the normalization parameters of e_t.
struct FreezePolicy {
  TrainMode mode = TrainMode::Distill;

  template <typename VarT>
  bool trainable(const BasicParamRef<VarT>& p) const {
    switch (mode) {
      case TrainMode::Pretrain: return p.group != ParamGroup::DecoderMLP;
      case TrainMode::Distill: return p.group == ParamGroup::EP || p.group == ParamGroup::ET;
      case TrainMode::Adapt: return p.group == ParamGroup::EP || (p.group == ParamGroup::ET && p.norm);
    }
    return false;
  }
};

struct TrainConfig {
  double lr = 5e-5;         // full scale: 5e-5
  int batch_size = 8;       // full scale: 32
  int max_steps = 2000;     // full scale: 60000
  LossWeights loss_weights;
  ModelConfig model;
  int samples_per_ray = 24;
  SamplingMode sampling = SamplingMode::Stratified;
  int views_per_step = 0;   // cameras of C rendered per sample and step; 0 = all
  double clip_norm = 1.0;   // global gradient norm; <= 0 disables clipping
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int log_every = 1;
  int checkpoint_every = 0;
  int heldout_every = 10;   // adapt mode: held-out evaluation period
  std::uint64_t seed = 0;

  void validate() const;
  AdamHyper adam() const { return {lr, beta1, beta2, eps}; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One training triplet plus its 3D teacher.
struct BatchItem {
  const EditSample* sample = nullptr;
  const TeacherTargets* teacher = nullptr;
};

template <typename Real>
struct OptimizerState {
  std::vector<AdamMoments<Real>> moments;  // one per parameter, registry order; empty while untouched
};

template <typename Real>
class Trainer {
 public:
  Trainer(ModelParams<Real> params, TrainConfig config, TrainMode mode);

  /// Forward (edit or reconstruct), render input view and camera set, total
  /// loss, backward, clip, Adam on trainable parameters only. Throws
  /// TrainingError on a non-finite loss before touching any parameter.
  LossReport step(const std::vector<BatchItem>& batch);
  /// Draws `batch_size` items from `pool` with the trainer RNG and steps.
  LossReport step_from(const std::vector<BatchItem>& pool);

  ModelParams<Real>& params() { return params_; }
  const ModelParams<Real>& params() const { return params_; }
  const TrainConfig& config() const { return config_; }
  TrainMode mode() const { return mode_; }
  FreezePolicy policy() const { return {mode_}; }
  long steps_done() const { return step_; }
  const OptimizerState<Real>& optimizer() const { return opt_; }
  std::mt19937_64& rng() { return rng_; }
  double last_grad_norm() const { return grad_norm_; }

  /// Marks that a prompt-space embedder was used as a training signal, which
  /// excludes the resulting model from reporting CLIP_r.
  bool clip_r_excluded = false;

  void save(const std::string& path) const;
  static Trainer load(const std::string& path);

 private:
  ModelParams<Real> params_;
  TrainConfig config_;
  TrainMode mode_;
  OptimizerState<Real> opt_;
  long step_ = 0;
  std::mt19937_64 rng_;
  double grad_norm_ = 0;
};

/// Model weights from a checkpoint of either dtype, cast to float32.
struct LoadedModel {
  ModelParams<float> params;
  TrainMode mode = TrainMode::Distill;
  long step = 0;
  bool clip_r_excluded = false;
};
LoadedModel load_model(const std::string& checkpoint_path);
/// Writes a float32 checkpoint holding weights only (no optimizer moments).
void save_model(const ModelParams<float>& params, const std::string& path, TrainMode mode = TrainMode::Distill,
                bool clip_r_excluded = false);

/// JSON line for the training log.
nlohmann::json log_record(long step, const LossReport& r);

using StepCallback = std::function<void(long step, const LossReport&)>;

/// Runs `steps` steps drawing from `pool`; appends one JSON line per logged
/// step to `log` when non-null; checkpoints to `checkpoint_path` every
/// config.checkpoint_every steps when set.
template <typename Real>
std::vector<LossReport> run_training(Trainer<Real>& trainer, const std::vector<BatchItem>& pool, int steps,
                                     std::ostream* log = nullptr, const std::string& checkpoint_path = "",
                                     const StepCallback& on_step = {});

/// Pool of (sample, teacher) pairs: reconstruction samples for pretraining,
/// edited samples otherwise.
std::vector<BatchItem> make_pool(const Dataset& d, TrainMode mode);

/// Trains the prompt-free reconstruct() path on unedited scenes of `data`.
ModelParams<float> pretrain_reconstruction(const Dataset& data, const TrainConfig& config, std::ostream* log = nullptr);

/// Teacher targets for user pairs that come without 3D supervision: the frozen
/// reconstruct() path applied to the pseudo-label, rendered over `cameras`.
TeacherTargets reconstruct_teacher(const ModelParams<float>& params, const Tensorf& pseudo_label,
                                   const std::vector<CameraPose>& cameras, const RenderSettings& settings);

struct AdaptOptions {
  int steps = 500;
  double lr = 5e-5;
  int batch_size = 2;
  std::vector<CameraPose> cameras;    // camera set for L_3d; empty = front arc of 4
  const EditSample* heldout = nullptr; // evaluated every config.heldout_every steps and at the end
  std::vector<const TeacherTargets*> teachers;  // optional, parallel to pairs
  std::function<void(int step, int total)> progress;
};

struct AdaptResult {
  ModelParams<float> params;
  std::vector<LossReport> losses;
  std::vector<std::pair<int, double>> heldout_curve;  // (step, image_loss)
  double wall_ms = 0;
};

/// Few-pair adaptation updating only e_p and the normalization layers of e_t.
AdaptResult adapt(const ModelParams<float>& params, const std::vector<EditSample>& pairs, const TrainConfig& base,
                  const AdaptOptions& options);

/// image_loss of the edited render at the sample's pose against its pseudo-label.
double heldout_image_loss(const ModelParams<float>& params, const EditSample& s, const LossWeights& w,
                          int samples_per_ray);

}  // namespace triedit
