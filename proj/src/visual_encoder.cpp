#include "ovseg/visual_encoder.hpp"

#include <cmath>

#include "ovseg/error.hpp"

namespace ovseg {

void VisualConfig::validate() const {
  if (patch_size < 1 || image_size < patch_size || image_size % patch_size != 0) {
    throw UsageError("image size must be a positive multiple of the patch size");
  }
  if (num_groups < 1) throw UsageError("need at least one group token");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
    throw UsageError("embed dim must be divisible by heads");
  }
  if (layers_stage1 < 0 || layers_stage2 < 0) throw UsageError("negative layer count");
  if (!(mlp_ratio > 0)) throw UsageError("mlp ratio must be positive");
}

Matrix extract_patches(const Image& image, int patch_size) {
  const int grid_h = image.height / patch_size;
  const int grid_w = image.width / patch_size;
  Matrix patches(grid_h * grid_w, patch_size * patch_size * 3);
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      auto row = patches.row(gy * grid_w + gx);
      int f = 0;
      for (int py = 0; py < patch_size; ++py) {
        for (int px = 0; px < patch_size; ++px) {
          for (int c = 0; c < 3; ++c) {
            row(f++) = (image.at(gy * patch_size + py, gx * patch_size + px, c) - 0.5) / 0.25;
          }
        }
      }
    }
  }
  return patches;
}

VisualEncoder::VisualEncoder(const VisualConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
                             const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.embed_dim;
  group_tokens_ = store.add(prefix + ".group_tokens", init.truncated_normal(cfg_.num_groups, d));
  patch_proj_ = nn::Linear(store, prefix + ".patch_proj", cfg_.patch_features(), d, init);
  pos_embed_ = store.add(prefix + ".pos_embed", init.truncated_normal(cfg_.num_patches(), d));
  for (int i = 0; i < cfg_.layers_stage1; ++i) {
    stage1_.emplace_back(store, prefix + ".stage1." + std::to_string(i), d, cfg_.heads, cfg_.mlp_ratio, init);
  }
  bind_q_ = nn::Linear(store, prefix + ".bind.q", d, d, init, false);
  bind_k_ = nn::Linear(store, prefix + ".bind.k", d, d, init, false);
  bind_v_ = nn::Linear(store, prefix + ".bind.v", d, d, init, false);
  bind_o_ = nn::Linear(store, prefix + ".bind.o", d, d, init, false);
  if (cfg_.bind_norm) {
    bind_norm_g_ = nn::LayerNorm(store, prefix + ".bind.norm_g", d);
    bind_norm_x_ = nn::LayerNorm(store, prefix + ".bind.norm_x", d);
  }
  for (int i = 0; i < cfg_.layers_stage2; ++i) {
    stage2_.emplace_back(store, prefix + ".stage2." + std::to_string(i), d, cfg_.heads, cfg_.mlp_ratio, init);
  }
  norm_ = nn::LayerNorm(store, prefix + ".norm", d);
}

Var VisualEncoder::patchify(const Image& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size) {
    throw UsageError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", encoder expects " + std::to_string(cfg_.image_size) + "x" +
                     std::to_string(cfg_.image_size));
  }
  Var patches = ag::constant(extract_patches(image, cfg_.patch_size));
  return ag::add(patch_proj_(patches), pos_embed_);
}

std::pair<Var, Var> VisualEncoder::run_stage(const std::vector<nn::EncoderBlock>& blocks,
                                             const Var& groups, const Var& image_tokens) const {
  if (groups.cols() != cfg_.embed_dim || image_tokens.cols() != cfg_.embed_dim) {
    throw UsageError("token width does not match embed dim");
  }
  if (blocks.empty()) return {groups, image_tokens};
  const Var parts[] = {groups, image_tokens};
  Var x = ag::concat_rows(parts);
  for (const auto& block : blocks) x = block(x);
  const ag::Index k = groups.rows();
  return {ag::slice_rows(x, 0, k), ag::slice_rows(x, k, image_tokens.rows())};
}

std::pair<Var, Var> VisualEncoder::encode_stage1(const Var& groups, const Var& image_tokens) const {
  return run_stage(stage1_, groups, image_tokens);
}

std::pair<Var, Var> VisualEncoder::encode_stage2(const Var& groups, const Var& image_tokens) const {
  return run_stage(stage2_, groups, image_tokens);
}

BindResult VisualEncoder::bind(const Var& groups, const Var& image_tokens) const {
  if (groups.cols() != cfg_.embed_dim || image_tokens.cols() != cfg_.embed_dim) {
    throw UsageError("bind: token width does not match embed dim");
  }
  const Var g = cfg_.bind_norm ? bind_norm_g_(groups) : groups;
  const Var x = cfg_.bind_norm ? bind_norm_x_(image_tokens) : image_tokens;
  Var q = bind_q_(g);
  Var k = bind_k_(x);
  Var v = bind_v_(x);
  Var logits = ag::matmul_nt(k, q);  // L x K
  if (cfg_.scale_binding_logits) logits = ag::scale(logits, 1.0 / std::sqrt(double(cfg_.embed_dim)));
  // Normalised over groups: each patch distributes unit mass.
  Var affinity = ag::softmax_rows(logits);
  Var mass = ag::add_scalar(ag::transpose(ag::sum_rows(affinity)), kBindEpsilon);  // K x 1
  Var pooled = ag::div_rows(ag::matmul(ag::transpose(affinity), v), mass);
  return {affinity, ag::add(groups, bind_o_(pooled))};
}

GroupState VisualEncoder::forward(const Image& image) const {
  auto [g1, i1] = encode_stage1(group_tokens_, patchify(image));
  BindResult b = bind(g1, i1);
  auto [g2, i2] = encode_stage2(b.groups, i1);
  return GroupState{norm_(g2), norm_(i2), b.affinity, g1, i1};
}

std::vector<GroupState> VisualEncoder::forward_batch(std::span<const Image> images) const {
  std::vector<GroupState> out;
  out.reserve(images.size());
  for (const Image& img : images) out.push_back(forward(img));
  return out;
}

}  // namespace ovseg
