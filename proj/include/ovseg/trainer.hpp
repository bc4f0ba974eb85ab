#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ovseg/checkpoint.hpp"
#include "ovseg/config.hpp"
#include "ovseg/corpus.hpp"
#include "ovseg/image.hpp"
#include "ovseg/model.hpp"

namespace ovseg {

struct TrainingExample {
  Triplet triplet;
  Image image;
};

class TrainingSet {
 public:
  TrainingSet() = default;
  // Image paths resolve against base_dir; every image must be image_size square.
  static TrainingSet load(std::vector<Triplet> triplets, const std::filesystem::path& base_dir, int image_size);
  static TrainingSet from_examples(std::vector<TrainingExample> examples);

  std::size_t size() const { return examples_.size(); }
  const TrainingExample& at(std::size_t i) const { return examples_.at(i); }
  const CrossPairIndex& index() const { return index_; }
  // Position of a triplet id; throws DataError when unknown.
  int position(const std::string& id) const;

 private:
  std::vector<TrainingExample> examples_;
  CrossPairIndex index_;
  std::map<std::string, int> positions_;
};

struct BatchItem {
  int anchor = 0;
  std::optional<int> partner;
  std::string shared_entity;
};

// Shuffled partition of [0, n) into consecutive batches of at most batch_size.
std::vector<std::vector<int>> epoch_batches(std::size_t n, int batch_size, std::mt19937_64& rng);
std::vector<BatchItem> make_batch(const TrainingSet& data, std::span<const int> anchors, std::mt19937_64& rng);

// Cosine decay from base_lr to zero over total_steps.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

// Adam moments with decoupled weight decay on parameters flagged for decay.
class AdamW {
 public:
  void step(nn::ParamStore& params, double lr, const TrainConfig& cfg);
  std::int64_t steps() const { return t_; }
  TensorGroup& first_moment() { return m_; }
  TensorGroup& second_moment() { return v_; }
  const TensorGroup& first_moment() const { return m_; }
  const TensorGroup& second_moment() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  TensorGroup m_;
  TensorGroup v_;
  std::int64_t t_ = 0;
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Tokenizer& tokenizer, std::vector<std::string> templates);

  const RunConfig& config() const { return cfg_; }
  OvSegModel& model() { return online_; }
  const OvSegModel& model() const { return online_; }
  OvSegModel& momentum() { return momentum_; }
  const OvSegModel& momentum() const { return momentum_; }
  std::mt19937_64& rng() { return rng_; }
  std::int64_t step() const { return step_; }
  int epoch() const { return epoch_; }
  void set_epoch(int e) { epoch_ = e; }

  // Steps per epoch for a dataset of n examples.
  std::int64_t batches_per_epoch(std::size_t n) const;
  // One optimization step: losses, backward, AdamW, logit-scale clamp, EMA.
  LossBundle train_step(const TrainingSet& data, const std::vector<BatchItem>& batch, double lambda, double lr);

  Checkpoint to_checkpoint() const;
  // Restores parameters, moments, counters and rng; model sections of the
  // checkpoint config must equal this trainer's.
  void load_checkpoint(const Checkpoint& ckpt);

 private:
  RunConfig cfg_;
  const Tokenizer& tokenizer_;
  std::vector<std::string> templates_;
  OvSegModel online_;
  OvSegModel momentum_;
  AdamW optimizer_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  int epoch_ = 0;
};

// Online parameters of a checkpoint in a freshly built model.
std::unique_ptr<OvSegModel> load_model(const std::filesystem::path& checkpoint, int vocab_size);

struct FitOptions {
  std::filesystem::path out_dir = "run";
  std::optional<std::filesystem::path> resume;
  // Called after every step.
  std::function<void(const LossBundle&, std::int64_t step, int epoch)> on_step;
};

// Epoch loop with metrics.jsonl and checkpoints under out_dir. Returns the
// final checkpoint path. With zero epochs only the initial checkpoint is written.
std::filesystem::path fit(const RunConfig& cfg, const TrainingSet& data, const Tokenizer& tokenizer,
                          const std::vector<std::string>& templates, const FitOptions& opts);

}  // namespace ovseg
