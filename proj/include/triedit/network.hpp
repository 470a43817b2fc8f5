// SPDX-License-Identifier: Apache-2.0
//
// The editing network: a convolutional geometry branch (E_low), a patch
// transformer appearance branch (E_high), a prompt encoder (E_p), one
// cross-attention layer and the transformer decoder (E_t) that emits a
// triplane. The density/colour decoder and the upsampler are carried along
// so that one ModelParams holds everything needed to render.
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "triedit/renderer.hpp"

namespace triedit {

struct ModelConfig {
  int image_size = 64;
  int patch = 8;
  int d_model = 64;
  std::vector<int> low_channels{16, 32, 64};  // each layer halves the resolution
  int encoder_blocks = 2;
  int prompt_image_blocks = 2;
  int prompt_text_blocks = 1;
  int decoder_blocks = 2;
  int mlp_ratio = 2;
  int vocab_size = 256;
  int max_text_tokens = 64;
  int triplane_channels = 16;
  int triplane_resolution = 32;
  double triplane_extent = 1.0;
  int decoder_hidden = 32;
  int color_dim = 7;  // 3 RGB + extra upsampler features
  int upsampler_hidden = 16;
  int upsample_factor = 2;
  std::uint64_t seed = 0;

  int low_grid() const { return image_size >> static_cast<int>(low_channels.size()); }
  int high_tokens() const { return (image_size / patch) * (image_size / patch); }
  int render_size() const { return image_size / upsample_factor; }
  void validate() const;

  /// Small dimensions used by gradient checks (image 16, R 8, C 4).
  static ModelConfig toy();
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class ParamGroup { ELow, EHigh, EP, ET, DecoderMLP, Upsampler };
inline constexpr ParamGroup kAllGroups[] = {ParamGroup::ELow, ParamGroup::EHigh,      ParamGroup::EP,
                                            ParamGroup::ET,   ParamGroup::DecoderMLP, ParamGroup::Upsampler};
std::string group_name(ParamGroup g);
ParamGroup group_from_name(const std::string& name);

template <typename Real>
struct TransformerBlock {
  ad::Var<Real> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename Real>
struct ConvLayer {
  ad::Var<Real> w, b;
};

template <typename VarT>
struct BasicParamRef {
  std::string name;
  ParamGroup group;
  bool norm;  // normalization-layer affine parameter of E_t (the e_t.norm subgroup)
  VarT* var;
};
template <typename Real>
using ParamRef = BasicParamRef<ad::Var<Real>>;
template <typename Real>
using ConstParamRef = BasicParamRef<const ad::Var<Real>>;

template <typename Real>
struct ModelParams {
  ModelConfig config;
  // e_low
  std::vector<ConvLayer<Real>> low;
  // e_high
  ad::Var<Real> patch_w, patch_b, pos_high;
  std::vector<TransformerBlock<Real>> high_blocks;
  // e_p
  ad::Var<Real> prompt_patch_w, prompt_patch_b, prompt_pos_image;
  std::vector<TransformerBlock<Real>> prompt_image_blocks;
  ad::Var<Real> token_table, prompt_pos_text;
  std::vector<TransformerBlock<Real>> prompt_text_blocks;
  // e_t (cross-attention lives here; its output projection starts at zero)
  ad::Var<Real> xattn_q, xattn_k, xattn_v, xattn_o;
  ad::Var<Real> low_proj_w, low_proj_b, pos_low;
  std::vector<TransformerBlock<Real>> decoder_blocks;
  ad::Var<Real> final_ln_g, final_ln_b, head_w, head_b;
  // rendering
  DecoderMLP<Real> decoder;
  Upsampler<Real> upsampler;

  static ModelParams init(const ModelConfig& config);

  /// Every parameter exactly once, in a fixed order.
  std::vector<ParamRef<Real>> parameters();
  std::vector<ConstParamRef<Real>> parameters() const;

  /// Deep copy: the result shares no storage with *this.
  ModelParams clone() const;
  template <typename To>
  ModelParams<To> cast() const;

  std::size_t count(ParamGroup g) const;
  std::size_t count_norm() const;
  std::size_t count() const;

  /// Sets requires_grad per parameter.
  void set_trainable(const std::function<bool(const ParamRef<Real>&)>& pred);
  void set_all_trainable(bool on);
};

/// The density/colour decoder a fresh model starts from; the teacher fits its
/// triplanes against the same weights so the two triplane spaces agree.
DecoderMLP<float> canonical_decoder(const ModelConfig& config);

/// FNV-1a word hashing into [0, vocab); words are lower-cased alphanumeric runs.
std::vector<int> tokenize(const std::string& text, int vocab_size);

struct Prompt {
  enum class Kind { Image, Text };
  Kind kind = Kind::Text;
  Tensorf image;            // [H, W, 3] when kind == Image
  std::vector<int> tokens;  // when kind == Text
  std::string text;         // source text, informational

  static Prompt from_text(const std::string& text, int vocab_size = 256);
  static Prompt from_image(Tensorf image);
  void validate(const ModelConfig& config) const;
};

enum class Branch { Low, High };
Branch branch_from_name(const std::string& name);

template <typename Real>
struct FeatureMaps {
  ad::Var<Real> f_low;   // [g, g, D_low]
  ad::Var<Real> f_high;  // [L_h, D]
  ad::Var<Real> f_attn;  // [L_h, D]
};

/// Throws unless `img` is [size, size, 3], finite and within [0, 1].
template <typename Real>
void validate_image(const Tensor<Real>& img, int size);

template <typename Real>
ad::Var<Real> transformer_block(const ad::Var<Real>& x, const TransformerBlock<Real>& b);
template <typename Real>
ad::Var<Real> embed_patches(const ad::Var<Real>& img, int patch, const ad::Var<Real>& w, const ad::Var<Real>& b,
                            const ad::Var<Real>& pos);

template <typename Real>
ad::Var<Real> encode_low(const ad::Var<Real>& img, const ModelParams<Real>& p);
template <typename Real>
ad::Var<Real> encode_high(const ad::Var<Real>& img, const ModelParams<Real>& p);
template <typename Real>
ad::Var<Real> encode_prompt(const Prompt& prompt, const ModelParams<Real>& p);
template <typename Real>
ad::Var<Real> cross_attend(const ad::Var<Real>& f_high, const ad::Var<Real>& prompt_emb, const ModelParams<Real>& p);
/// Returns channel-last planes [3, R, R, C].
template <typename Real>
ad::Var<Real> decode_triplane(const ad::Var<Real>& f_attn, const ad::Var<Real>& f_low, const ModelParams<Real>& p);

template <typename Real>
ad::Var<Real> reconstruct(const ad::Var<Real>& img, const ModelParams<Real>& p);
template <typename Real>
ad::Var<Real> edit(const ad::Var<Real>& img, const Prompt& prompt, const ModelParams<Real>& p,
                   FeatureMaps<Real>* features = nullptr);
template <typename Real>
ad::Var<Real> ablate_branch(const ad::Var<Real>& img, const Prompt& prompt, const ModelParams<Real>& p, Branch disabled);

// Value-level entry points (no graph recorded).
Triplane<float> reconstruct(const Tensorf& img, const ModelParams<float>& p);
Triplane<float> edit(const Tensorf& img, const Prompt& prompt, const ModelParams<float>& p);
Triplane<float> ablate_branch(const Tensorf& img, const Prompt& prompt, const ModelParams<float>& p,
                              const std::string& disabled);
RenderOutput render_model(const Triplane<float>& t, const ModelParams<float>& p, const CameraPose& pose,
                          const RenderSettings& settings = {});

/// FNV-1a over all parameter bytes in registry order.
std::uint64_t params_hash(const ModelParams<float>& p);

}  // namespace triedit
