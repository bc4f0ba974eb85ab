#include "ovseg/model.hpp"

#include "ovseg/error.hpp"

namespace ovseg {

void ModelConfig::validate() const {
  visual.validate();
  text.validate();
  loss.validate();
  if (visual.embed_dim != text.embed_dim) throw UsageError("visual and text embed dims differ");
}

OvSegModel::OvSegModel(const ModelConfig& cfg, std::uint64_t seed) : OvSegModel(cfg, nn::Initializer(seed)) {}

OvSegModel::OvSegModel(const ModelConfig& cfg, nn::Initializer&& init)
    : cfg_((cfg.validate(), cfg)),
      visual_(cfg.visual, params_, init),
      text_(cfg.text, params_, init),
      heads_(cfg.visual.embed_dim, cfg.loss, params_, init) {}

Var entity_embedding(const OvSegModel& model, const std::string& entity, const Tokenizer& tokenizer) {
  TokenizedText prompt =
      tokenizer.encode(fill_template(kEntityPromptTemplate, entity), model.text().config().max_len);
  return model.heads().project_text(model.text().encode_prefix(prompt).eot_vector);
}

namespace {

SubgroupSelection choose(const JointHeads& heads, const GroupState& state, const Matrix& entity, double ratio) {
  ag::NoGradGuard guard;
  return select_subgroups(heads.project_groups(ag::detach(state.groups)).value(), entity, ratio);
}

}  // namespace

CrossImageMaskResult cross_image_mask_loss(const JointHeads& online_heads, const JointHeads& momentum_heads,
                                           const CrossImageMaskInputs& in, const LossConfig& cfg) {
  CrossImageMaskResult r;
  const double ratio = cfg.selection_ratio;
  r.target_first = choose(momentum_heads, *in.momentum_first, in.entity_momentum, ratio);
  r.target_second = choose(momentum_heads, *in.momentum_second, in.entity_momentum, ratio);
  r.online_first = choose(online_heads, *in.online_first, in.entity_online, ratio);
  r.online_second = choose(online_heads, *in.online_second, in.entity_online, ratio);

  Matrix target_first, target_second;
  {
    ag::NoGradGuard guard;
    const GroupState& m1 = *in.momentum_first;
    const GroupState& m2 = *in.momentum_second;
    target_first = ground_masks(ag::detach(m1.image_tokens),
                                ag::gather_rows(ag::detach(m1.groups), r.target_first.indices))
                       .value();
    target_second = ground_masks(ag::detach(m2.image_tokens),
                                 ag::gather_rows(ag::detach(m2.groups), r.target_second.indices))
                        .value();
  }
  const GroupState& o1 = *in.online_first;
  const GroupState& o2 = *in.online_second;
  Var pred_first = ground_masks(o1.image_tokens, ag::gather_rows(o2.groups, r.online_second.indices));
  Var pred_second = ground_masks(o2.image_tokens, ag::gather_rows(o1.groups, r.online_first.indices));
  r.consistency = mask_consistency(target_first, target_second, pred_first, pred_second, cfg.mask_threshold);
  return r;
}

}  // namespace ovseg
