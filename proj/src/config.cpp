#include "ovseg/config.hpp"

#include <fstream>
#include <type_traits>

#include "ovseg/error.hpp"

namespace ovseg {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 0) throw UsageError("epochs must be non-negative");
  if (batch_size < 2) throw UsageError("batch size must be at least 2");
  if (!(lr >= 0)) throw UsageError("learning rate must be non-negative");
  if (!(weight_decay >= 0)) throw UsageError("weight decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw UsageError("adam betas must be in [0, 1)");
  if (!(adam_eps > 0)) throw UsageError("adam epsilon must be positive");
  if (checkpoint_every < 0) throw UsageError("checkpoint interval must be non-negative");
}

json to_json(const RunConfig& cfg) {
  const auto& v = cfg.model.visual;
  const auto& t = cfg.model.text;
  const auto& l = cfg.model.loss;
  const auto& tr = cfg.train;
  return {
      {"visual",
       {{"image_size", v.image_size},
        {"patch_size", v.patch_size},
        {"embed_dim", v.embed_dim},
        {"num_groups", v.num_groups},
        {"layers_stage1", v.layers_stage1},
        {"layers_stage2", v.layers_stage2},
        {"heads", v.heads},
        {"mlp_ratio", v.mlp_ratio},
        {"scale_binding_logits", v.scale_binding_logits},
        {"bind_norm", v.bind_norm}}},
      {"text",
       {{"vocab_size", t.vocab_size},
        {"embed_dim", t.embed_dim},
        {"layers", t.layers},
        {"heads", t.heads},
        {"max_len", t.max_len},
        {"mlp_ratio", t.mlp_ratio}}},
      {"loss",
       {{"joint_dim", l.joint_dim},
        {"init_temperature", l.init_temperature},
        {"max_logit_scale", l.max_logit_scale},
        {"lambda", l.lambda},
        {"lambda_start_epoch", l.lambda_start_epoch},
        {"selection_ratio", l.selection_ratio},
        {"mask_threshold", l.mask_threshold},
        {"ema_coef", l.ema_coef},
        {"enable_entity", l.enable_entity},
        {"decoder_heads", l.decoder_heads},
        {"decoder_mlp_ratio", l.decoder_mlp_ratio}}},
      {"train",
       {{"epochs", tr.epochs},
        {"batch_size", tr.batch_size},
        {"lr", tr.lr},
        {"weight_decay", tr.weight_decay},
        {"beta1", tr.beta1},
        {"beta2", tr.beta2},
        {"adam_eps", tr.adam_eps},
        {"seed", tr.seed},
        {"checkpoint_every", tr.checkpoint_every}}},
  };
}

namespace {

template <typename T>
void read_field(const json& section, const char* key, T& field, const std::string& where) {
  auto it = section.find(key);
  if (it == section.end()) return;
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw UsageError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!it->is_number_integer()) throw UsageError("");
    } else {
      if (!it->is_number()) throw UsageError("");
    }
    field = it->get<T>();
  } catch (const std::exception&) {
    throw UsageError("config: bad value for " + where + "." + key);
  }
}

void reject_unknown(const json& section, const json& known, const std::string& where) {
  if (!section.is_object()) throw UsageError("config: section " + where + " must be an object");
  for (const auto& [key, _] : section.items()) {
    if (!known.contains(key)) throw UsageError("config: unknown key " + where + "." + key);
  }
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  RunConfig cfg;
  const json known = to_json(cfg);
  reject_unknown(j, known, "config");
  if (j.contains("visual")) {
    const json& s = j["visual"];
    reject_unknown(s, known["visual"], "visual");
    auto& v = cfg.model.visual;
    read_field(s, "image_size", v.image_size, "visual");
    read_field(s, "patch_size", v.patch_size, "visual");
    read_field(s, "embed_dim", v.embed_dim, "visual");
    read_field(s, "num_groups", v.num_groups, "visual");
    read_field(s, "layers_stage1", v.layers_stage1, "visual");
    read_field(s, "layers_stage2", v.layers_stage2, "visual");
    read_field(s, "heads", v.heads, "visual");
    read_field(s, "mlp_ratio", v.mlp_ratio, "visual");
    read_field(s, "scale_binding_logits", v.scale_binding_logits, "visual");
    read_field(s, "bind_norm", v.bind_norm, "visual");
  }
  if (j.contains("text")) {
    const json& s = j["text"];
    reject_unknown(s, known["text"], "text");
    auto& t = cfg.model.text;
    read_field(s, "vocab_size", t.vocab_size, "text");
    read_field(s, "embed_dim", t.embed_dim, "text");
    read_field(s, "layers", t.layers, "text");
    read_field(s, "heads", t.heads, "text");
    read_field(s, "max_len", t.max_len, "text");
    read_field(s, "mlp_ratio", t.mlp_ratio, "text");
  }
  if (j.contains("loss")) {
    const json& s = j["loss"];
    reject_unknown(s, known["loss"], "loss");
    auto& l = cfg.model.loss;
    read_field(s, "joint_dim", l.joint_dim, "loss");
    read_field(s, "init_temperature", l.init_temperature, "loss");
    read_field(s, "max_logit_scale", l.max_logit_scale, "loss");
    read_field(s, "lambda", l.lambda, "loss");
    read_field(s, "lambda_start_epoch", l.lambda_start_epoch, "loss");
    read_field(s, "selection_ratio", l.selection_ratio, "loss");
    read_field(s, "mask_threshold", l.mask_threshold, "loss");
    read_field(s, "ema_coef", l.ema_coef, "loss");
    read_field(s, "enable_entity", l.enable_entity, "loss");
    read_field(s, "decoder_heads", l.decoder_heads, "loss");
    read_field(s, "decoder_mlp_ratio", l.decoder_mlp_ratio, "loss");
  }
  if (j.contains("train")) {
    const json& s = j["train"];
    reject_unknown(s, known["train"], "train");
    auto& tr = cfg.train;
    read_field(s, "epochs", tr.epochs, "train");
    read_field(s, "batch_size", tr.batch_size, "train");
    read_field(s, "lr", tr.lr, "train");
    read_field(s, "weight_decay", tr.weight_decay, "train");
    read_field(s, "beta1", tr.beta1, "train");
    read_field(s, "beta2", tr.beta2, "train");
    read_field(s, "adam_eps", tr.adam_eps, "train");
    read_field(s, "seed", tr.seed, "train");
    read_field(s, "checkpoint_every", tr.checkpoint_every, "train");
  }
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override must look like section.key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  const auto dot = key.find('.');
  if (dot == std::string::npos || key.find('.', dot + 1) != std::string::npos) {
    throw UsageError("override key must be section.key: " + key);
  }
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  j[key.substr(0, dot)][key.substr(dot + 1)] = value;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          int vocab_size) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config: " + path.string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError("config " + path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig cfg = run_config_from_json(j);
  if (cfg.model.text.vocab_size == 0) cfg.model.text.vocab_size = vocab_size;
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

}  // namespace ovseg
