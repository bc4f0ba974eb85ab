#pragma once

#include <cstdint>
#include <string>

#include "ovseg/objectives.hpp"
#include "ovseg/text_encoder.hpp"
#include "ovseg/visual_encoder.hpp"

namespace ovseg {

struct ModelConfig {
  VisualConfig visual;
  TextConfig text;
  LossConfig loss;

  void validate() const;
};

// Visual tower, text tower and joint heads sharing one parameter store.
// The momentum model is a second instance kept in sync by ema_update.
class OvSegModel {
 public:
  OvSegModel(const ModelConfig& cfg, std::uint64_t seed);
  OvSegModel(const OvSegModel&) = delete;
  OvSegModel& operator=(const OvSegModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const VisualEncoder& visual() const { return visual_; }
  const TextEncoder& text() const { return text_; }
  const JointHeads& heads() const { return heads_; }
  JointHeads& heads() { return heads_; }

 private:
  OvSegModel(const ModelConfig& cfg, nn::Initializer&& init);

  ModelConfig cfg_;
  nn::ParamStore params_;
  VisualEncoder visual_;
  TextEncoder text_;
  JointHeads heads_;
};

inline constexpr const char* kEntityPromptTemplate = "a photo of a {}.";

// Unit joint-space embedding of a single-entity prompt.
Var entity_embedding(const OvSegModel& model, const std::string& entity, const Tokenizer& tokenizer);

struct CrossImageMaskInputs {
  const GroupState* online_first;
  const GroupState* online_second;
  const GroupState* momentum_first;
  const GroupState* momentum_second;
  Matrix entity_online;    // 1 x joint
  Matrix entity_momentum;  // 1 x joint
};

struct CrossImageMaskResult {
  MaskConsistency consistency;
  SubgroupSelection target_first, target_second;
  SubgroupSelection online_first, online_second;
};

// Targets ground each momentum image with its own subgroups; predictions
// ground each online image with the partner's online subgroups.
CrossImageMaskResult cross_image_mask_loss(const JointHeads& online_heads, const JointHeads& momentum_heads,
                                           const CrossImageMaskInputs& in, const LossConfig& cfg);

}  // namespace ovseg
