// SPDX-License-Identifier: Apache-2.0
//
// Evaluation: identity preservation, prompt alignment, multi-view
// consistency and inference timing, all against small fixed random
// embedders. Absolute values are only meaningful relative to each other.
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triedit/synthetic.hpp"

namespace triedit {

/// Fixed random conv features (3->8 s2, 8->16 s2, SiLU), 4x4 average pooling,
/// then a random projection to `dim` and unit normalisation.
class EmbeddingModel {
 public:
  enum class Kind { Identity, PromptSpace };

  static EmbeddingModel make(Kind kind, int dim = 64);
  Kind kind() const { return kind_; }
  int dim() const { return dim_; }
  std::vector<double> embed(const Tensorf& img) const;

 private:
  Kind kind_ = Kind::Identity;
  int dim_ = 64;
  std::vector<Tensord> conv_w_;  // [3, 3, Cin, Cout]
  Tensord proj_;                 // [features + 1, dim]
};

/// Cosine similarity after normalising both vectors; 0 when either is zero.
double cosine(const std::vector<double>& a, const std::vector<double>& b);

double id_t(const Tensorf& input, const Tensorf& edited, const EmbeddingModel& m);

/// Image prompts are embedded directly; text prompts through the exemplar
/// registered for their text (ValidationError if none is registered).
double clip_r(const Tensorf& edited, const Prompt& prompt, const EmbeddingModel& m,
              const std::map<std::string, Tensorf>& text_exemplars = {});

/// Mean pairwise id_t over renders of `t` at every pose (final resolution).
double consistency_3d(const Triplane<float>& t, const DecoderMLP<float>& decoder, const Upsampler<float>& upsampler,
                      const std::vector<CameraPose>& poses, const EmbeddingModel& m, int image_size,
                      const RenderSettings& settings = {});

struct TimingStats {
  double mean = 0, p50 = 0, p95 = 0, min = 0, max = 0;
  std::vector<double> runs_ms;
};

/// Wall-clock of edit() + render_full() over n runs after `warmup` discarded runs.
TimingStats time_inference(const ModelParams<float>& params, const EditSample& sample, int n = 100, int warmup = 5,
                           const RenderSettings& settings = {});

double psnr(const Tensorf& a, const Tensorf& b);
/// Mean |a - b| over pixels where `reference` > 0; 0 when none.
double masked_depth_l1(const Tensorf& pred, const Tensorf& reference);

/// Poses not used for training inputs or the camera set.
std::vector<CameraPose> heldout_poses(const DatasetConfig& c, int image_size);

struct EvalReport {
  double id_t = 0;
  std::optional<double> clip_r;  // absent when the model was optimised with the prompt-space embedder
  double consistency_3d = 0;
  double time_ms_mean = 0, time_ms_p50 = 0, time_ms_p95 = 0;
  int n_samples = 0;
  double psnr_train_view = 0;     // edited render at the input pose vs. pseudo-label
  double psnr_heldout_view = 0;   // vs. analytic render of the edited scene
  double depth_l1_heldout = 0;
  double image_loss_input_view = 0;
};

void to_json(nlohmann::json& j, const EvalReport& r);

struct EvalOptions {
  int timing_runs = 100;
  int timing_warmup = 5;
  int samples_per_ray = 24;
  int max_samples = 0;  // 0 = every edited sample
  bool clip_r_excluded = false;
  LossWeights loss_weights;
};

EvalReport evaluate(const ModelParams<float>& params, const Dataset& data, const EvalOptions& options = {});

}  // namespace triedit
