#include "ovseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ovseg/error.hpp"

namespace ovseg {

using json = nlohmann::json;

TrainingSet TrainingSet::load(std::vector<Triplet> triplets, const std::filesystem::path& base_dir, int image_size) {
  std::vector<TrainingExample> examples;
  examples.reserve(triplets.size());
  for (auto& t : triplets) {
    std::filesystem::path p = t.pair.image_path;
    if (p.is_relative()) p = base_dir / p;
    Image img = read_png_rgb(p);
    if (img.height != image_size || img.width != image_size) {
      throw DataError("image " + p.string() + " is not " + std::to_string(image_size) + "x" +
                      std::to_string(image_size));
    }
    examples.push_back({std::move(t), std::move(img)});
  }
  return from_examples(std::move(examples));
}

TrainingSet TrainingSet::from_examples(std::vector<TrainingExample> examples) {
  TrainingSet set;
  set.examples_ = std::move(examples);
  for (size_t i = 0; i < set.examples_.size(); ++i) {
    const auto& t = set.examples_[i].triplet;
    if (!set.positions_.emplace(t.pair.id, static_cast<int>(i)).second) {
      throw DataError("duplicate triplet id: " + t.pair.id);
    }
    set.index_.add(t);
  }
  return set;
}

int TrainingSet::position(const std::string& id) const {
  auto it = positions_.find(id);
  if (it == positions_.end()) throw DataError("unknown triplet id: " + id);
  return it->second;
}

std::vector<std::vector<int>> epoch_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  if (batch_size < 1) throw UsageError("batch size must be positive");
  std::vector<int> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<int>> batches;
  for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(n, start + static_cast<size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<BatchItem> make_batch(const TrainingSet& data, std::span<const int> anchors, std::mt19937_64& rng) {
  if (data.size() == 0) throw DataError("empty training set");
  std::vector<BatchItem> batch;
  batch.reserve(anchors.size());
  for (int a : anchors) {
    BatchItem item;
    item.anchor = a;
    if (auto pair = try_sample_cross_pair(data.at(static_cast<size_t>(a)).triplet, data.index(), rng)) {
      item.partner = data.position(pair->partner_id);
      item.shared_entity = pair->entity;
    }
    batch.push_back(std::move(item));
  }
  return batch;
}

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(nn::ParamStore& params, double lr, const TrainConfig& cfg) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
  for (const auto& [name, entry] : params.entries()) {
    ag::Var p = entry.var;
    if (p.grad().size() == 0) continue;
    auto [mit, fresh] = m_.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto vit = v_.try_emplace(name, Matrix::Zero(p.rows(), p.cols())).first;
    (void)fresh;
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    const Matrix& g = p.grad();
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v.array() = cfg.beta2 * v.array() + (1.0 - cfg.beta2) * g.array().square();
    Matrix& w = p.mutable_value();
    if (entry.decay && cfg.weight_decay > 0) w *= 1.0 - lr * cfg.weight_decay;
    w.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
  }
}

Trainer::Trainer(const RunConfig& cfg, const Tokenizer& tokenizer, std::vector<std::string> templates)
    : cfg_(cfg),
      tokenizer_(tokenizer),
      templates_(std::move(templates)),
      online_(cfg.model, cfg.train.seed),
      momentum_(cfg.model, cfg.train.seed),
      rng_(cfg.train.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.train.validate();
  if (templates_.empty()) throw UsageError("no prompt templates");
  if (tokenizer.size() != cfg.model.text.vocab_size) throw UsageError("tokenizer size does not match text vocab");
  momentum_.params().copy_values_from(online_.params());
  momentum_.params().set_requires_grad(false);
}

std::int64_t Trainer::batches_per_epoch(std::size_t n) const {
  const auto b = static_cast<std::size_t>(cfg_.train.batch_size);
  return static_cast<std::int64_t>((n + b - 1) / b);
}

namespace {

std::string batch_ids(const TrainingSet& data, const std::vector<BatchItem>& batch) {
  std::string out;
  for (const auto& item : batch) {
    if (!out.empty()) out += ",";
    out += data.at(static_cast<size_t>(item.anchor)).triplet.pair.id;
  }
  return out;
}

}  // namespace

LossBundle Trainer::train_step(const TrainingSet& data, const std::vector<BatchItem>& batch, double lambda,
                               double lr) {
  if (batch.empty()) throw UsageError("empty batch");
  try {
    const auto& loss_cfg = cfg_.model.loss;
    const int max_len = cfg_.model.text.max_len;
    const VisualEncoder& visual = online_.visual();
    const TextEncoder& text = online_.text();
    const JointHeads& heads = online_.heads();
    online_.params().zero_grad();

    const size_t b = batch.size();
    std::vector<GroupState> states;
    std::vector<Var> image_vecs, caption_vecs, completed_vecs, entity_vecs;
    states.reserve(b);
    for (const auto& item : batch) {
      const TrainingExample& ex = data.at(static_cast<size_t>(item.anchor));
      states.push_back(visual.forward(ex.image));
      const GroupState& st = states.back();
      image_vecs.push_back(heads.project_visual(st.groups));
      caption_vecs.push_back(heads.project_text(text.encode_prefix(ex.triplet.tokens).eot_vector));
      if (loss_cfg.enable_entity) {
        TokenizedText masked = mask_entities(ex.triplet.tokens, ex.triplet.entities, tokenizer_);
        TextEmbedding m = text.encode_prefix(masked);
        Var completed = heads.complete_masked(m.sequence, st.groups);
        completed_vecs.push_back(heads.project_text(ag::row(completed, m.eot_index)));
        TokenizedText prompt = build_entity_prompt(ex.triplet.entities, templates_, rng_, max_len, tokenizer_);
        entity_vecs.push_back(heads.project_text(text.encode_prefix(prompt).eot_vector));
      }
    }

    LossBundle bundle;
    bundle.lambda = lambda;
    Var contrast = contrastive_loss(ag::concat_rows(image_vecs), ag::concat_rows(caption_vecs), heads.logit_scale());
    Var entity = ag::constant(Matrix::Zero(1, 1));
    if (loss_cfg.enable_entity) {
      entity = entity_completion_loss(ag::concat_rows(completed_vecs), ag::concat_rows(entity_vecs),
                                      heads.logit_scale());
    }
    Var mask = ag::constant(Matrix::Zero(1, 1));
    if (lambda > 0) {
      std::vector<Var> terms;
      for (size_t i = 0; i < b; ++i) {
        const BatchItem& item = batch[i];
        if (!item.partner) continue;
        const TrainingExample& anchor = data.at(static_cast<size_t>(item.anchor));
        const TrainingExample& partner = data.at(static_cast<size_t>(*item.partner));
        GroupState partner_online = visual.forward(partner.image);
        GroupState anchor_mom, partner_mom;
        Matrix e_online, e_mom;
        {
          ag::NoGradGuard guard;
          anchor_mom = momentum_.visual().forward(anchor.image);
          partner_mom = momentum_.visual().forward(partner.image);
          e_online = entity_embedding(online_, item.shared_entity, tokenizer_).value();
          e_mom = entity_embedding(momentum_, item.shared_entity, tokenizer_).value();
        }
        CrossImageMaskInputs in{&states[i], &partner_online, &anchor_mom, &partner_mom, e_online, e_mom};
        CrossImageMaskResult r = cross_image_mask_loss(heads, momentum_.heads(), in, loss_cfg);
        terms.push_back(r.consistency.loss);
        bundle.permutations.push_back(r.consistency.perm_first);
        bundle.permutations.push_back(r.consistency.perm_second);
        bundle.selections.push_back(r.online_first.indices);
        bundle.selections.push_back(r.online_second.indices);
      }
      bundle.partnered = static_cast<int>(terms.size());
      if (!terms.empty()) mask = ag::scale(ag::sum(ag::concat_rows(terms)), 1.0 / static_cast<double>(b));
    }
    Var total = total_loss(contrast, entity, mask, lambda);
    bundle.contrast = contrast.item();
    bundle.entity = entity.item();
    bundle.mask = mask.item();
    bundle.total = total.item();
    if (!std::isfinite(bundle.total)) {
      throw NumericError("non-finite loss at step " + std::to_string(step_) + "; batch ids: " + batch_ids(data, batch));
    }

    ag::backward(total);
    optimizer_.step(online_.params(), lr, cfg_.train);
    online_.heads().clamp_logit_scale(loss_cfg.max_logit_scale);
    online_.params().zero_grad();
    ema_update(momentum_.params(), online_.params(), static_cast<long double>(loss_cfg.ema_coef));
    ++step_;
    return bundle;
  } catch (const NumericError& e) {
    const std::string what = e.what();
    if (what.find("batch ids:") != std::string::npos) throw;
    throw NumericError(what + " at step " + std::to_string(step_) + "; batch ids: " + batch_ids(data, batch));
  }
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = to_json(cfg_);
  ckpt.step = step_;
  ckpt.epoch = epoch_;
  std::ostringstream rng;
  rng << rng_;
  ckpt.rng_state = rng.str();
  ckpt.groups["online"] = snapshot(online_.params());
  ckpt.groups["momentum"] = snapshot(momentum_.params());
  ckpt.groups["adam_m"] = optimizer_.first_moment();
  ckpt.groups["adam_v"] = optimizer_.second_moment();
  return ckpt;
}

void Trainer::load_checkpoint(const Checkpoint& ckpt) {
  const json mine = to_json(cfg_);
  for (const char* section : {"visual", "text", "loss"}) {
    if (!ckpt.config.contains(section) || ckpt.config.at(section) != mine.at(section)) {
      throw UsageError(std::string("checkpoint ") + section + " config differs from run config");
    }
  }
  auto group = [&](const char* name) -> const TensorGroup& {
    auto it = ckpt.groups.find(name);
    if (it == ckpt.groups.end()) throw DataError(std::string("checkpoint lacks ") + name + " tensors");
    return it->second;
  };
  restore(online_.params(), group("online"));
  restore(momentum_.params(), group("momentum"));
  optimizer_.first_moment() = ckpt.groups.count("adam_m") ? ckpt.groups.at("adam_m") : TensorGroup{};
  optimizer_.second_moment() = ckpt.groups.count("adam_v") ? ckpt.groups.at("adam_v") : TensorGroup{};
  optimizer_.set_steps(ckpt.step);
  step_ = ckpt.step;
  epoch_ = ckpt.epoch;
  std::istringstream rng(ckpt.rng_state);
  rng >> rng_;
  if (!rng) throw DataError("bad rng state in checkpoint");
}

std::unique_ptr<OvSegModel> load_model(const std::filesystem::path& checkpoint, int vocab_size) {
  Checkpoint ckpt = load_checkpoint(checkpoint);
  RunConfig cfg = run_config_from_json(ckpt.config);
  if (cfg.model.text.vocab_size == 0) cfg.model.text.vocab_size = vocab_size;
  if (cfg.model.text.vocab_size != vocab_size) throw DataError("checkpoint vocabulary size differs from tokenizer");
  auto model = std::make_unique<OvSegModel>(cfg.model, cfg.train.seed);
  auto it = ckpt.groups.find("online");
  if (it == ckpt.groups.end()) throw DataError("checkpoint lacks online tensors");
  restore(model->params(), it->second);
  return model;
}

std::filesystem::path fit(const RunConfig& cfg, const TrainingSet& data, const Tokenizer& tokenizer,
                          const std::vector<std::string>& templates, const FitOptions& opts) {
  if (data.size() == 0) throw DataError("empty training set");
  std::filesystem::create_directories(opts.out_dir);
  Trainer trainer(cfg, tokenizer, templates);
  if (opts.resume) trainer.load_checkpoint(load_checkpoint(*opts.resume));

  const auto final_path = opts.out_dir / "checkpoint.bin";
  const int epochs = cfg.train.epochs;
  if (epochs == 0) {
    save_checkpoint(final_path, trainer.to_checkpoint());
    return final_path;
  }
  const std::int64_t per_epoch = trainer.batches_per_epoch(data.size());
  const std::int64_t total_steps = per_epoch * epochs;
  std::ofstream metrics(opts.out_dir / "metrics.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write metrics in " + opts.out_dir.string());

  for (int epoch = trainer.epoch(); epoch < epochs; ++epoch) {
    const double lambda = lambda_at_epoch(cfg.model.loss, epoch, epochs);
    for (const auto& anchors : epoch_batches(data.size(), cfg.train.batch_size, trainer.rng())) {
      std::vector<BatchItem> batch = make_batch(data, anchors, trainer.rng());
      const double lr = cosine_lr(cfg.train.lr, trainer.step(), total_steps);
      LossBundle bundle;
      try {
        bundle = trainer.train_step(data, batch, lambda, lr);
      } catch (const NumericError&) {
        json dump = {{"step", trainer.step()}, {"epoch", epoch}, {"batch", json::array()}};
        for (const auto& item : batch) dump["batch"].push_back(data.at(static_cast<size_t>(item.anchor)).triplet.pair.id);
        std::ofstream(opts.out_dir / "nonfinite_batch.json") << dump.dump(2) << "\n";
        throw;
      }
      metrics << json{{"step", trainer.step()},
                      {"epoch", epoch},
                      {"L_contrast", bundle.contrast},
                      {"L_entity", bundle.entity},
                      {"L_mask", bundle.mask},
                      {"L_total", bundle.total},
                      {"lambda", bundle.lambda},
                      {"lr", lr}}
                     .dump()
              << "\n";
      if (opts.on_step) opts.on_step(bundle, trainer.step(), epoch);
    }
    metrics.flush();
    trainer.set_epoch(epoch + 1);
    const int every = cfg.train.checkpoint_every;
    if (every > 0 && (epoch + 1) % every == 0) {
      save_checkpoint(opts.out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".bin"),
                      trainer.to_checkpoint());
    }
  }
  save_checkpoint(final_path, trainer.to_checkpoint());
  return final_path;
}

}  // namespace ovseg
