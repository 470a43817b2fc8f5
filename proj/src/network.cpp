// SPDX-License-Identifier: Apache-2.0
#include "triedit/network.hpp"

#include "triedit/hashing.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>
#include <random>

namespace triedit {

void ModelConfig::validate() const {
  require(image_size >= 4 && patch >= 1 && image_size % patch == 0, "image_size must be a positive multiple of patch");
  require(d_model >= 1 && mlp_ratio >= 1, "d_model and mlp_ratio must be positive");
  require(!low_channels.empty(), "low_channels must not be empty");
  for (int c : low_channels) require(c >= 1, "low_channels entries must be positive");
  require(image_size % (1 << low_channels.size()) == 0, "image_size must be divisible by 2^len(low_channels)");
  require(encoder_blocks >= 0 && prompt_image_blocks >= 0 && prompt_text_blocks >= 0 && decoder_blocks >= 0,
          "block counts must be non-negative");
  require(vocab_size >= 2 && max_text_tokens >= 1, "vocab_size and max_text_tokens must be positive");
  require(triplane_channels >= 1 && triplane_resolution >= 2, "triplane dims must be positive (R >= 2)");
  require(triplane_resolution % low_grid() == 0, "triplane_resolution must be a multiple of the low-branch grid");
  require(triplane_extent > 0, "triplane_extent must be positive");
  require(decoder_hidden >= 1 && color_dim >= 3 && upsampler_hidden >= 1, "decoder dims must be positive, color_dim >= 3");
  require(upsample_factor >= 1 && image_size % upsample_factor == 0, "image_size must be a multiple of upsample_factor");
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.image_size = 16;
  c.patch = 4;
  c.d_model = 8;
  c.low_channels = {4, 6, 8};
  c.vocab_size = 32;
  c.max_text_tokens = 8;
  c.triplane_channels = 4;
  c.triplane_resolution = 8;
  c.decoder_hidden = 8;
  c.color_dim = 4;
  c.upsampler_hidden = 4;
  return c;
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch", c.patch},
                     {"d_model", c.d_model},
                     {"low_channels", c.low_channels},
                     {"encoder_blocks", c.encoder_blocks},
                     {"prompt_image_blocks", c.prompt_image_blocks},
                     {"prompt_text_blocks", c.prompt_text_blocks},
                     {"decoder_blocks", c.decoder_blocks},
                     {"mlp_ratio", c.mlp_ratio},
                     {"vocab_size", c.vocab_size},
                     {"max_text_tokens", c.max_text_tokens},
                     {"triplane_channels", c.triplane_channels},
                     {"triplane_resolution", c.triplane_resolution},
                     {"triplane_extent", c.triplane_extent},
                     {"decoder_hidden", c.decoder_hidden},
                     {"color_dim", c.color_dim},
                     {"upsampler_hidden", c.upsampler_hidden},
                     {"upsample_factor", c.upsample_factor},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  try {
    const ModelConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.patch = j.value("patch", d.patch);
    c.d_model = j.value("d_model", d.d_model);
    c.low_channels = j.value("low_channels", d.low_channels);
    c.encoder_blocks = j.value("encoder_blocks", d.encoder_blocks);
    c.prompt_image_blocks = j.value("prompt_image_blocks", d.prompt_image_blocks);
    c.prompt_text_blocks = j.value("prompt_text_blocks", d.prompt_text_blocks);
    c.decoder_blocks = j.value("decoder_blocks", d.decoder_blocks);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_text_tokens = j.value("max_text_tokens", d.max_text_tokens);
    c.triplane_channels = j.value("triplane_channels", d.triplane_channels);
    c.triplane_resolution = j.value("triplane_resolution", d.triplane_resolution);
    c.triplane_extent = j.value("triplane_extent", d.triplane_extent);
    c.decoder_hidden = j.value("decoder_hidden", d.decoder_hidden);
    c.color_dim = j.value("color_dim", d.color_dim);
    c.upsampler_hidden = j.value("upsampler_hidden", d.upsampler_hidden);
    c.upsample_factor = j.value("upsample_factor", d.upsample_factor);
    c.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
}

std::string group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::ELow: return "e_low";
    case ParamGroup::EHigh: return "e_high";
    case ParamGroup::EP: return "e_p";
    case ParamGroup::ET: return "e_t";
    case ParamGroup::DecoderMLP: return "decoder_mlp";
    case ParamGroup::Upsampler: return "upsampler";
  }
  return "?";
}

ParamGroup group_from_name(const std::string& name) {
  for (ParamGroup g : kAllGroups)
    if (group_name(g) == name) return g;
  throw ValidationError("unknown parameter group: " + name);
}

namespace {

template <typename Real>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  ad::Var<Real> xavier(Shape shape, int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> d(-bound, bound);
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<Real>(d(rng_));
    return ad::Var<Real>::leaf(std::move(t), false);
  }
  ad::Var<Real> normal(Shape shape, double std) {
    std::normal_distribution<double> d(0.0, std);
    Tensor<Real> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<Real>(d(rng_));
    return ad::Var<Real>::leaf(std::move(t), false);
  }
  static ad::Var<Real> fill(Shape shape, Real value) {
    return ad::Var<Real>::leaf(Tensor<Real>(std::move(shape), value), false);
  }

  TransformerBlock<Real> block(int d, int ratio) {
    TransformerBlock<Real> b;
    b.ln1_g = fill({d}, 1);
    b.ln1_b = fill({d}, 0);
    b.wq = xavier({d, d}, d, d);
    b.wk = xavier({d, d}, d, d);
    b.wv = xavier({d, d}, d, d);
    b.wo = xavier({d, d}, d, d);
    b.ln2_g = fill({d}, 1);
    b.ln2_b = fill({d}, 0);
    b.w1 = xavier({d, ratio * d}, d, ratio * d);
    b.b1 = fill({ratio * d}, 0);
    b.w2 = xavier({ratio * d, d}, ratio * d, d);
    b.b2 = fill({d}, 0);
    return b;
  }

 private:
  std::mt19937_64 rng_;
};

// Visits every parameter in registry order. Works for const and non-const models.
template <typename Model, typename F>
void visit_params(Model& m, F&& f) {
  auto block = [&](auto& b, const std::string& prefix, ParamGroup g, bool tag_norm) {
    f(prefix + ".ln1.gamma", g, tag_norm, b.ln1_g);
    f(prefix + ".ln1.beta", g, tag_norm, b.ln1_b);
    f(prefix + ".attn.wq", g, false, b.wq);
    f(prefix + ".attn.wk", g, false, b.wk);
    f(prefix + ".attn.wv", g, false, b.wv);
    f(prefix + ".attn.wo", g, false, b.wo);
    f(prefix + ".ln2.gamma", g, tag_norm, b.ln2_g);
    f(prefix + ".ln2.beta", g, tag_norm, b.ln2_b);
    f(prefix + ".mlp.w1", g, false, b.w1);
    f(prefix + ".mlp.b1", g, false, b.b1);
    f(prefix + ".mlp.w2", g, false, b.w2);
    f(prefix + ".mlp.b2", g, false, b.b2);
  };
  using G = ParamGroup;
  for (std::size_t i = 0; i < m.low.size(); ++i) {
    f("e_low.conv" + std::to_string(i) + ".w", G::ELow, false, m.low[i].w);
    f("e_low.conv" + std::to_string(i) + ".b", G::ELow, false, m.low[i].b);
  }
  f("e_high.patch.w", G::EHigh, false, m.patch_w);
  f("e_high.patch.b", G::EHigh, false, m.patch_b);
  f("e_high.pos", G::EHigh, false, m.pos_high);
  for (std::size_t i = 0; i < m.high_blocks.size(); ++i) block(m.high_blocks[i], "e_high.block" + std::to_string(i), G::EHigh, false);
  f("e_p.image.patch.w", G::EP, false, m.prompt_patch_w);
  f("e_p.image.patch.b", G::EP, false, m.prompt_patch_b);
  f("e_p.image.pos", G::EP, false, m.prompt_pos_image);
  for (std::size_t i = 0; i < m.prompt_image_blocks.size(); ++i)
    block(m.prompt_image_blocks[i], "e_p.image.block" + std::to_string(i), G::EP, false);
  f("e_p.text.tokens", G::EP, false, m.token_table);
  f("e_p.text.pos", G::EP, false, m.prompt_pos_text);
  for (std::size_t i = 0; i < m.prompt_text_blocks.size(); ++i)
    block(m.prompt_text_blocks[i], "e_p.text.block" + std::to_string(i), G::EP, false);
  f("e_t.xattn.wq", G::ET, false, m.xattn_q);
  f("e_t.xattn.wk", G::ET, false, m.xattn_k);
  f("e_t.xattn.wv", G::ET, false, m.xattn_v);
  f("e_t.xattn.wo", G::ET, false, m.xattn_o);
  f("e_t.low_proj.w", G::ET, false, m.low_proj_w);
  f("e_t.low_proj.b", G::ET, false, m.low_proj_b);
  f("e_t.pos_low", G::ET, false, m.pos_low);
  for (std::size_t i = 0; i < m.decoder_blocks.size(); ++i) block(m.decoder_blocks[i], "e_t.block" + std::to_string(i), G::ET, true);
  f("e_t.final_ln.gamma", G::ET, true, m.final_ln_g);
  f("e_t.final_ln.beta", G::ET, true, m.final_ln_b);
  f("e_t.head.w", G::ET, false, m.head_w);
  f("e_t.head.b", G::ET, false, m.head_b);
  f("decoder_mlp.w1", G::DecoderMLP, false, m.decoder.w1);
  f("decoder_mlp.b1", G::DecoderMLP, false, m.decoder.b1);
  f("decoder_mlp.w2", G::DecoderMLP, false, m.decoder.w2);
  f("decoder_mlp.b2", G::DecoderMLP, false, m.decoder.b2);
  f("upsampler.w1", G::Upsampler, false, m.upsampler.w1);
  f("upsampler.b1", G::Upsampler, false, m.upsampler.b1);
  f("upsampler.w2", G::Upsampler, false, m.upsampler.w2);
  f("upsampler.b2", G::Upsampler, false, m.upsampler.b2);
}

template <typename Real>
int head_width(const ModelConfig& c) {
  const int q = c.triplane_resolution / c.low_grid();
  return 3 * q * q * c.triplane_channels;
}

}  // namespace

DecoderMLP<float> canonical_decoder(const ModelConfig& config) {
  return DecoderMLP<float>::init(config.triplane_channels, config.decoder_hidden, config.color_dim, mix_seed(config.seed, 1));
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::init(const ModelConfig& c) {
  c.validate();
  ModelParams p;
  p.config = c;
  Initializer<Real> ini(mix_seed(c.seed, 0));
  const int d = c.d_model;
  int cin = 3;
  for (int cout : c.low_channels) {
    p.low.push_back({ini.xavier({3, 3, cin, cout}, 9 * cin, 9 * cout), Initializer<Real>::fill({cout}, 0)});
    cin = cout;
  }
  const int pd = c.patch * c.patch * 3;
  const int lh = c.high_tokens();
  p.patch_w = ini.xavier({pd, d}, pd, d);
  p.patch_b = Initializer<Real>::fill({d}, 0);
  p.pos_high = ini.normal({lh, d}, 0.02);
  for (int i = 0; i < c.encoder_blocks; ++i) p.high_blocks.push_back(ini.block(d, c.mlp_ratio));
  p.prompt_patch_w = ini.xavier({pd, d}, pd, d);
  p.prompt_patch_b = Initializer<Real>::fill({d}, 0);
  p.prompt_pos_image = ini.normal({lh, d}, 0.02);
  for (int i = 0; i < c.prompt_image_blocks; ++i) p.prompt_image_blocks.push_back(ini.block(d, c.mlp_ratio));
  p.token_table = ini.normal({c.vocab_size, d}, 0.02);
  p.prompt_pos_text = ini.normal({c.max_text_tokens, d}, 0.02);
  for (int i = 0; i < c.prompt_text_blocks; ++i) p.prompt_text_blocks.push_back(ini.block(d, c.mlp_ratio));
  p.xattn_q = ini.xavier({d, d}, d, d);
  p.xattn_k = ini.xavier({d, d}, d, d);
  p.xattn_v = ini.xavier({d, d}, d, d);
  p.xattn_o = Initializer<Real>::fill({d, d}, 0);
  const int dl = c.low_channels.back();
  const int lg = c.low_grid() * c.low_grid();
  p.low_proj_w = ini.xavier({dl, d}, dl, d);
  p.low_proj_b = Initializer<Real>::fill({d}, 0);
  p.pos_low = ini.normal({lg, d}, 0.02);
  for (int i = 0; i < c.decoder_blocks; ++i) p.decoder_blocks.push_back(ini.block(d, c.mlp_ratio));
  p.final_ln_g = Initializer<Real>::fill({d}, 1);
  p.final_ln_b = Initializer<Real>::fill({d}, 0);
  const int hw = head_width<Real>(c);
  p.head_w = ini.xavier({d, hw}, d, hw);
  p.head_b = Initializer<Real>::fill({hw}, 0);
  const auto dec = canonical_decoder(c);
  p.decoder = DecoderMLP<Real>{ad::Var<Real>::constant(dec.w1.value().template cast<Real>()),
                               ad::Var<Real>::constant(dec.b1.value().template cast<Real>()),
                               ad::Var<Real>::constant(dec.w2.value().template cast<Real>()),
                               ad::Var<Real>::constant(dec.b2.value().template cast<Real>())};
  p.upsampler = Upsampler<Real>::init(c.color_dim, c.upsampler_hidden, c.upsample_factor, mix_seed(c.seed, 2));
  return p;
}

template <typename Real>
std::vector<ParamRef<Real>> ModelParams<Real>::parameters() {
  std::vector<ParamRef<Real>> out;
  visit_params(*this, [&](std::string name, ParamGroup g, bool norm, ad::Var<Real>& v) {
    out.push_back({std::move(name), g, norm, &v});
  });
  return out;
}

template <typename Real>
std::vector<ConstParamRef<Real>> ModelParams<Real>::parameters() const {
  std::vector<ConstParamRef<Real>> out;
  visit_params(*this, [&](std::string name, ParamGroup g, bool norm, const ad::Var<Real>& v) {
    out.push_back({std::move(name), g, norm, &v});
  });
  return out;
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::clone() const {
  ModelParams out = *this;
  for (auto& ref : out.parameters()) *ref.var = ad::Var<Real>::leaf(ref.var->value(), ref.var->requires_grad());
  return out;
}

template <typename Real>
template <typename To>
ModelParams<To> ModelParams<Real>::cast() const {
  ModelParams<To> out = ModelParams<To>::init(config);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i)
    *dst[i].var = ad::Var<To>::leaf(src[i].var->value().template cast<To>(), src[i].var->requires_grad());
  return out;
}

template <typename Real>
std::size_t ModelParams<Real>::count(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& r : parameters())
    if (r.group == g) n += r.var->size();
  return n;
}

template <typename Real>
std::size_t ModelParams<Real>::count_norm() const {
  std::size_t n = 0;
  for (const auto& r : parameters())
    if (r.norm) n += r.var->size();
  return n;
}

template <typename Real>
std::size_t ModelParams<Real>::count() const {
  std::size_t n = 0;
  for (const auto& r : parameters()) n += r.var->size();
  return n;
}

template <typename Real>
void ModelParams<Real>::set_trainable(const std::function<bool(const ParamRef<Real>&)>& pred) {
  for (auto& r : parameters()) r.var->set_requires_grad(pred(r));
}

template <typename Real>
void ModelParams<Real>::set_all_trainable(bool on) {
  set_trainable([on](const ParamRef<Real>&) { return on; });
}

// --------------------------------------------------------------------------

std::vector<int> tokenize(const std::string& text, int vocab_size) {
  require(vocab_size >= 1, "tokenize: vocab_size must be positive");
  std::vector<int> tokens;
  std::uint32_t h = 0;
  bool in_word = false;
  auto flush = [&] {
    if (in_word) tokens.push_back(static_cast<int>(h % static_cast<std::uint32_t>(vocab_size)));
    in_word = false;
  };
  for (unsigned char ch : text) {
    if (std::isalnum(ch) || ch == '_' || ch >= 0x80) {
      if (!in_word) {
        h = 2166136261u;
        in_word = true;
      }
      h ^= static_cast<std::uint32_t>(std::tolower(ch));
      h *= 16777619u;
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

Prompt Prompt::from_text(const std::string& text, int vocab_size) {
  Prompt p;
  p.kind = Kind::Text;
  p.text = text;
  p.tokens = tokenize(text, vocab_size);
  require(!p.tokens.empty(), "text prompt must contain at least one word");
  return p;
}

Prompt Prompt::from_image(Tensorf image) {
  Prompt p;
  p.kind = Kind::Image;
  p.image = std::move(image);
  return p;
}

void Prompt::validate(const ModelConfig& config) const {
  if (kind == Kind::Text) {
    require(image.empty(), "text prompt must not carry an image");
    require(!tokens.empty(), "text prompt must contain at least one token");
    require(static_cast<int>(tokens.size()) <= config.max_text_tokens,
            "text prompt exceeds " + std::to_string(config.max_text_tokens) + " tokens");
    for (int t : tokens) require(t >= 0 && t < config.vocab_size, "text prompt token out of vocabulary range");
  } else {
    require(tokens.empty(), "image prompt must not carry tokens");
    validate_image(image, config.image_size);
  }
}

Branch branch_from_name(const std::string& name) {
  if (name == "low") return Branch::Low;
  if (name == "high") return Branch::High;
  throw ValidationError("unknown branch '" + name + "' (expected 'low' or 'high')");
}

template <typename Real>
void validate_image(const Tensor<Real>& img, int size) {
  require(img.rank() == 3 && img.dim(2) == 3, "image must be [H, W, 3], got " + shape_str(img.shape()));
  require(img.dim(0) == size && img.dim(1) == size,
          "image must be " + std::to_string(size) + "x" + std::to_string(size) + ", got " + shape_str(img.shape()));
  for (Real v : img.storage()) require(std::isfinite(v) && v >= 0 && v <= 1, "image values must be finite and in [0, 1]");
}

// --------------------------------------------------------------------------

template <typename Real>
ad::Var<Real> transformer_block(const ad::Var<Real>& x, const TransformerBlock<Real>& b) {
  auto h = ad::layer_norm(x, b.ln1_g, b.ln1_b);
  auto a = ad::attention(ad::matmul(h, b.wq), ad::matmul(h, b.wk), ad::matmul(h, b.wv));
  auto y = ad::add(x, ad::matmul(a, b.wo));
  auto h2 = ad::layer_norm(y, b.ln2_g, b.ln2_b);
  auto m = ad::linear(ad::gelu(ad::linear(h2, b.w1, b.b1)), b.w2, b.b2);
  return ad::add(y, m);
}

template <typename Real>
ad::Var<Real> embed_patches(const ad::Var<Real>& img, int patch, const ad::Var<Real>& w, const ad::Var<Real>& b,
                            const ad::Var<Real>& pos) {
  const auto& s = img.shape();
  require(s.size() == 3 && s[2] == 3, "embed_patches: image must be [H, W, 3]");
  require(s[0] % patch == 0 && s[1] % patch == 0, "embed_patches: image size must be divisible by the patch size");
  const int gh = s[0] / patch, gw = s[1] / patch, width = s[1];
  const int pd = patch * patch * 3;
  std::vector<int> idx(static_cast<std::size_t>(gh) * gw * pd);
  std::size_t o = 0;
  for (int pi = 0; pi < gh; ++pi)
    for (int pj = 0; pj < gw; ++pj)
      for (int a = 0; a < patch; ++a)
        for (int c = 0; c < patch; ++c)
          for (int ch = 0; ch < 3; ++ch) idx[o++] = ((pi * patch + a) * width + pj * patch + c) * 3 + ch;
  auto tokens = ad::gather(img, std::move(idx), {gh * gw, pd});
  require(pos.shape()[0] == gh * gw, "embed_patches: positional table does not match token count");
  return ad::add(ad::linear(tokens, w, b), pos);
}

template <typename Real>
ad::Var<Real> encode_low(const ad::Var<Real>& img, const ModelParams<Real>& p) {
  validate_image(img.value(), p.config.image_size);
  ad::Var<Real> x = img;
  for (const auto& layer : p.low) x = ad::gelu(ad::conv2d(x, layer.w, layer.b, 2, 1));
  return x;
}

template <typename Real>
ad::Var<Real> encode_high(const ad::Var<Real>& img, const ModelParams<Real>& p) {
  validate_image(img.value(), p.config.image_size);
  auto x = embed_patches(img, p.config.patch, p.patch_w, p.patch_b, p.pos_high);
  for (const auto& b : p.high_blocks) x = transformer_block(x, b);
  return x;
}

template <typename Real>
ad::Var<Real> encode_prompt(const Prompt& prompt, const ModelParams<Real>& p) {
  prompt.validate(p.config);
  ad::Var<Real> x;
  if (prompt.kind == Prompt::Kind::Text) {
    const int l = static_cast<int>(prompt.tokens.size()), d = p.config.d_model;
    std::vector<int> idx(static_cast<std::size_t>(l) * d);
    for (int i = 0; i < l; ++i)
      for (int k = 0; k < d; ++k) idx[static_cast<std::size_t>(i) * d + k] = prompt.tokens[i] * d + k;
    x = ad::add(ad::gather(p.token_table, std::move(idx), {l, d}), ad::slice_rows(p.prompt_pos_text, 0, l));
    for (const auto& b : p.prompt_text_blocks) x = transformer_block(x, b);
  } else {
    auto img = ad::Var<Real>::constant(prompt.image.template cast<Real>());
    x = embed_patches(img, p.config.patch, p.prompt_patch_w, p.prompt_patch_b, p.prompt_pos_image);
    for (const auto& b : p.prompt_image_blocks) x = transformer_block(x, b);
  }
  return x;
}

template <typename Real>
ad::Var<Real> cross_attend(const ad::Var<Real>& f_high, const ad::Var<Real>& prompt_emb, const ModelParams<Real>& p) {
  const int d = p.config.d_model;
  require(f_high.shape().size() == 2 && f_high.shape()[1] == d, "cross_attend: f_high must be [L_h, D]");
  require(prompt_emb.shape().size() == 2 && prompt_emb.shape()[1] == d && prompt_emb.shape()[0] >= 1,
          "cross_attend: prompt embedding must be [L_p, D]");
  auto q = ad::matmul(f_high, p.xattn_q);
  auto k = ad::matmul(prompt_emb, p.xattn_k);
  auto v = ad::matmul(prompt_emb, p.xattn_v);
  return ad::add(f_high, ad::matmul(ad::attention(q, k, v), p.xattn_o));
}

template <typename Real>
ad::Var<Real> decode_triplane(const ad::Var<Real>& f_attn, const ad::Var<Real>& f_low, const ModelParams<Real>& p) {
  const auto& c = p.config;
  const int g = c.low_grid(), lg = g * g, d = c.d_model, dl = c.low_channels.back();
  require(f_attn.shape() == Shape{c.high_tokens(), d}, "decode_triplane: f_attn must be " + shape_str({c.high_tokens(), d}));
  require(f_low.shape() == Shape{g, g, dl}, "decode_triplane: f_low must be " + shape_str({g, g, dl}));
  auto low_tokens = ad::add(ad::linear(ad::reshape(f_low, {lg, dl}), p.low_proj_w, p.low_proj_b), p.pos_low);
  auto x = ad::concat_rows(low_tokens, f_attn);
  for (const auto& b : p.decoder_blocks) x = transformer_block(x, b);
  x = ad::layer_norm(x, p.final_ln_g, p.final_ln_b);
  auto head = ad::linear(ad::slice_rows(x, 0, lg), p.head_w, p.head_b);  // [lg, 3 q q C]
  const int r = c.triplane_resolution, q = r / g, ch = c.triplane_channels;
  const int hw = 3 * q * q * ch;
  std::vector<int> idx(static_cast<std::size_t>(3) * r * r * ch);
  std::size_t o = 0;
  for (int pl = 0; pl < 3; ++pl)
    for (int row = 0; row < r; ++row)
      for (int col = 0; col < r; ++col) {
        const int token = (row / q) * g + col / q;
        const int within = ((pl * q + row % q) * q + col % q) * ch;
        for (int k = 0; k < ch; ++k) idx[o++] = token * hw + within + k;
      }
  return ad::gather(head, std::move(idx), {3, r, r, ch});
}

template <typename Real>
ad::Var<Real> reconstruct(const ad::Var<Real>& img, const ModelParams<Real>& p) {
  return decode_triplane(encode_high(img, p), encode_low(img, p), p);
}

template <typename Real>
ad::Var<Real> edit(const ad::Var<Real>& img, const Prompt& prompt, const ModelParams<Real>& p, FeatureMaps<Real>* features) {
  auto f_low = encode_low(img, p);
  auto f_high = encode_high(img, p);
  auto f_attn = cross_attend(f_high, encode_prompt(prompt, p), p);
  if (features) *features = {f_low, f_high, f_attn};
  return decode_triplane(f_attn, f_low, p);
}

template <typename Real>
ad::Var<Real> ablate_branch(const ad::Var<Real>& img, const Prompt& prompt, const ModelParams<Real>& p, Branch disabled) {
  auto f_low = encode_low(img, p);
  auto f_high = encode_high(img, p);
  if (disabled == Branch::Low) f_low = ad::Var<Real>::constant(Tensor<Real>(f_low.shape()));
  if (disabled == Branch::High) f_high = ad::Var<Real>::constant(Tensor<Real>(f_high.shape()));
  auto f_attn = cross_attend(f_high, encode_prompt(prompt, p), p);
  return decode_triplane(f_attn, f_low, p);
}

namespace {
Triplane<float> as_triplane(const ad::Var<float>& planes, const ModelConfig& c) {
  return Triplane<float>{planes.value(), static_cast<float>(c.triplane_extent)};
}
}  // namespace

Triplane<float> reconstruct(const Tensorf& img, const ModelParams<float>& p) {
  ad::NoGradGuard ng;
  return as_triplane(reconstruct(ad::Var<float>::constant(img), p), p.config);
}

Triplane<float> edit(const Tensorf& img, const Prompt& prompt, const ModelParams<float>& p) {
  ad::NoGradGuard ng;
  return as_triplane(edit(ad::Var<float>::constant(img), prompt, p), p.config);
}

Triplane<float> ablate_branch(const Tensorf& img, const Prompt& prompt, const ModelParams<float>& p,
                              const std::string& disabled) {
  const Branch b = branch_from_name(disabled);
  ad::NoGradGuard ng;
  return as_triplane(ablate_branch(ad::Var<float>::constant(img), prompt, p, b), p.config);
}

RenderOutput render_model(const Triplane<float>& t, const ModelParams<float>& p, const CameraPose& pose,
                          const RenderSettings& settings) {
  return render_full(t, p.decoder, p.upsampler, pose, p.config.image_size, p.config.image_size, settings);
}

std::uint64_t params_hash(const ModelParams<float>& p) {
  Fnv1a h;
  for (const auto& r : p.parameters()) h.update(r.var->value().data(), r.var->size() * sizeof(float));
  return h.value();
}

#define TRIEDIT_INSTANTIATE_NETWORK(R)                                                                              \
  template struct ModelParams<R>;                                                                                   \
  template void validate_image<R>(const Tensor<R>&, int);                                                           \
  template ad::Var<R> transformer_block<R>(const ad::Var<R>&, const TransformerBlock<R>&);                          \
  template ad::Var<R> embed_patches<R>(const ad::Var<R>&, int, const ad::Var<R>&, const ad::Var<R>&,                \
                                       const ad::Var<R>&);                                                          \
  template ad::Var<R> encode_low<R>(const ad::Var<R>&, const ModelParams<R>&);                                      \
  template ad::Var<R> encode_high<R>(const ad::Var<R>&, const ModelParams<R>&);                                     \
  template ad::Var<R> encode_prompt<R>(const Prompt&, const ModelParams<R>&);                                       \
  template ad::Var<R> cross_attend<R>(const ad::Var<R>&, const ad::Var<R>&, const ModelParams<R>&);                 \
  template ad::Var<R> decode_triplane<R>(const ad::Var<R>&, const ad::Var<R>&, const ModelParams<R>&);              \
  template ad::Var<R> reconstruct<R>(const ad::Var<R>&, const ModelParams<R>&);                                     \
  template ad::Var<R> edit<R>(const ad::Var<R>&, const Prompt&, const ModelParams<R>&, FeatureMaps<R>*);            \
  template ad::Var<R> ablate_branch<R>(const ad::Var<R>&, const Prompt&, const ModelParams<R>&, Branch);

TRIEDIT_INSTANTIATE_NETWORK(float)
TRIEDIT_INSTANTIATE_NETWORK(double)
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;

}  // namespace triedit
