#pragma once

// Joint-space heads and the three training objectives: image-caption
// contrast, masked entity completion, and cross-image mask consistency.

#include <span>
#include <string>
#include <vector>

#include "ovseg/nn.hpp"

namespace ovseg {

using ag::Matrix;
using ag::Var;

struct LossConfig {
  int joint_dim = 256;
  double init_temperature = 0.07;
  double max_logit_scale = 100.0;
  double lambda = 0.1;
  // Epoch at which the mask term switches on; -1 puts it at the last quarter.
  int lambda_start_epoch = -1;
  double selection_ratio = 0.5;
  double mask_threshold = 0.65;
  double ema_coef = 0.99;
  bool enable_entity = true;
  int decoder_heads = 4;
  double decoder_mlp_ratio = 2.0;

  void validate() const;
};

// K' = max(1, round(r * K)), capped at K.
int selected_count(int num_groups, double ratio);

// Lambda in effect during `epoch` of a run lasting `total_epochs`.
double lambda_at_epoch(const LossConfig& cfg, int epoch, int total_epochs);
int lambda_start(const LossConfig& cfg, int total_epochs);

class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(nn::ParamStore& store, const std::string& name, int dim, int heads,
                 nn::Initializer& init);
  Var operator()(const Var& x, const Var& keys, const Var& values,
                 std::vector<Matrix>* weights = nullptr) const;

 private:
  int heads_ = 1;
  double scale_ = 1.0;
  nn::Linear q_, out_;
};

// One pre-norm decoder layer: masked self-attention over the caption,
// cross-attention into the group tokens, feed-forward, final norm.
class CompletionDecoder {
 public:
  CompletionDecoder() = default;
  CompletionDecoder(nn::ParamStore& store, const std::string& name, int dim, int heads,
                    double mlp_ratio, nn::Initializer& init);

  // caption: rows x D (positions past key_len are padding); groups: K x D.
  Var operator()(const Var& caption, const Var& groups, ag::Index key_len = -1,
                 std::vector<Matrix>* cross_weights = nullptr) const;

 private:
  nn::Linear query_, key_, value_;
  nn::LayerNorm ln_self_, ln_cross_, ln_ffn_, ln_out_;
  nn::MultiHeadAttention self_attn_;
  CrossAttention cross_attn_;
  nn::FeedForward ffn_;
};

class JointHeads {
 public:
  JointHeads(int embed_dim, const LossConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
             const std::string& prefix = "joint");

  // Mean over group rows, projected, unit norm.
  Var project_visual(const Var& groups) const;
  // Each group row projected and normalized separately (K x joint).
  Var project_groups(const Var& groups) const;
  // 1 x D pooled text vector to a unit joint vector.
  Var project_text(const Var& eot_vector) const;
  Var complete_masked(const Var& masked_caption, const Var& groups, ag::Index key_len = -1) const;

  const Var& logit_scale() const { return logit_scale_; }
  double temperature() const;
  // Keeps exp(logit_scale) at or below the configured ceiling.
  void clamp_logit_scale(double max_scale);

 private:
  nn::Linear visual_proj_;
  nn::Linear text_proj_;
  CompletionDecoder decoder_;
  Var logit_scale_;
};

// Symmetric InfoNCE over (a_i, b_i) positives; logits scaled by exp(log_scale).
Var contrastive_loss(const Var& a, const Var& b, const Var& log_scale);
Var contrastive_loss(const Var& a, const Var& b, double temperature);
// Same objective with completed-caption and entity-prompt vectors as the pair.
Var entity_completion_loss(const Var& completed, const Var& entity, const Var& log_scale);

struct SubgroupSelection {
  std::vector<int> indices;        // descending similarity
  std::vector<double> similarity;  // aligned with indices
};

// Indices of the k largest scores, descending; equal scores keep lower index first.
std::vector<int> top_k_indices(std::span<const double> scores, int k);
// group_embeddings: K x J unit rows; entity: 1 x J unit row.
SubgroupSelection select_subgroups(const Matrix& group_embeddings, const Matrix& entity, double ratio);

// sigmoid(image_tokens * subgroups^T), L x K'.
Var ground_masks(const Var& image_tokens, const Var& subgroups);

// Minimum-cost perfect assignment on a square matrix; result[row] = column.
// Among optimal assignments the lexicographically smallest is returned.
std::vector<int> solve_assignment(const Matrix& cost);
// Column-cosine cost matrix, -cos(target_k, pred_j); zero-norm columns give 0.
Matrix matching_cost(const Matrix& target, const Matrix& pred);
std::vector<int> hungarian_match(const Matrix& target, const Matrix& pred);

inline constexpr double kDiceSmooth = 1.0;
double dice_distance(std::span<const double> target, std::span<const double> pred);
// target: L x 1 constant, pred: L x 1.
Var dice_distance(const Matrix& target, const Var& pred);

Matrix binarize(const Matrix& soft, double threshold);

struct MaskConsistency {
  Var loss;
  std::vector<int> perm_first;
  std::vector<int> perm_second;
};

// Soft targets come from the momentum model and carry no gradient. pred_first
// grounds the first image's tokens with the partner's subgroups and vice versa.
MaskConsistency mask_consistency(const Matrix& target_first, const Matrix& target_second,
                                 const Var& pred_first, const Var& pred_second, double threshold);

// theta_mom <- m * theta_mom + (1 - m) * theta_online for every parameter,
// evaluated in extended precision.
void ema_update(nn::ParamStore& momentum, const nn::ParamStore& online, long double m);

struct LossBundle {
  double contrast = 0.0;
  double entity = 0.0;
  double mask = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  int partnered = 0;
  std::vector<std::vector<int>> permutations;
  std::vector<std::vector<int>> selections;
};

// L_contrast + L_entity + lambda * L_mask.
Var total_loss(const Var& contrast, const Var& entity, const Var& mask, double lambda);

}  // namespace ovseg
