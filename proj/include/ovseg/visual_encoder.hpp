#pragma once

// Group-token visual encoder: patch embedding, a joint transformer stage over
// [groups; patches], the slot-attention binding module, a second joint stage
// and a final norm.

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ovseg/image.hpp"
#include "ovseg/nn.hpp"

namespace ovseg {

using ag::Matrix;
using ag::Var;

struct VisualConfig {
  int image_size = 64;
  int patch_size = 8;
  int embed_dim = 64;
  int num_groups = 8;
  int layers_stage1 = 2;
  int layers_stage2 = 2;
  int heads = 4;
  double mlp_ratio = 2.0;
  // Divide binding logits by sqrt(embed_dim). Off: raw dot products.
  bool scale_binding_logits = false;
  // Layer-normalise group and image tokens before the binding projections.
  bool bind_norm = false;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_features() const { return patch_size * patch_size * 3; }
  void validate() const;
};

// Denominator guard for groups that attract no patches.
inline constexpr double kBindEpsilon = 1e-8;

struct BindResult {
  Var affinity;  // L x K, rows sum to one
  Var groups;    // K x D, G' + W_o * pooled values
};

struct GroupState {
  Var groups;        // K x D
  Var image_tokens;  // L x D
  Var affinity;      // L x K
  Var stage1_groups;
  Var stage1_image;
};

class VisualEncoder {
 public:
  VisualEncoder(const VisualConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
                const std::string& prefix = "visual");

  const VisualConfig& config() const { return cfg_; }
  const Var& group_tokens() const { return group_tokens_; }

  // L x D tokens: linear patch projection plus learned positions.
  Var patchify(const Image& image) const;
  std::pair<Var, Var> encode_stage1(const Var& groups, const Var& image_tokens) const;
  BindResult bind(const Var& groups, const Var& image_tokens) const;
  std::pair<Var, Var> encode_stage2(const Var& groups, const Var& image_tokens) const;
  GroupState forward(const Image& image) const;
  std::vector<GroupState> forward_batch(std::span<const Image> images) const;

 private:
  std::pair<Var, Var> run_stage(const std::vector<nn::EncoderBlock>& blocks, const Var& groups,
                                const Var& image_tokens) const;

  VisualConfig cfg_;
  Var group_tokens_;
  nn::Linear patch_proj_;
  Var pos_embed_;
  std::vector<nn::EncoderBlock> stage1_;
  std::vector<nn::EncoderBlock> stage2_;
  nn::Linear bind_q_, bind_k_, bind_v_, bind_o_;
  nn::LayerNorm bind_norm_g_, bind_norm_x_;
  nn::LayerNorm norm_;
};

// L x (P*P*3) matrix of normalized patch pixels in raster order.
Matrix extract_patches(const Image& image, int patch_size);

}  // namespace ovseg
