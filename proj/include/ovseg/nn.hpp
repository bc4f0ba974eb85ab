#pragma once

// Parameter storage and the transformer building blocks shared by the
// visual tower, the text tower and the entity-completion decoder.

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "ovseg/autograd.hpp"

namespace ovseg::nn {

using ag::Matrix;
using ag::Var;

struct ParamEntry {
  Var var;
  bool decay = true;  // participates in decoupled weight decay
};

// Named, ordered collection of learnable tensors. Names are stable and
// used as checkpoint keys.
class ParamStore {
 public:
  Var add(const std::string& name, Matrix init, bool decay = true);
  const Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const std::map<std::string, ParamEntry>& entries() const { return entries_; }

  void zero_grad();
  void set_requires_grad(bool on);
  std::size_t scalar_count() const;
  // Copies every value from `other`; names and shapes must match.
  void copy_values_from(const ParamStore& other);

 private:
  std::map<std::string, ParamEntry> entries_;
};

// Truncated normal (resampled beyond two standard deviations).
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed, double stddev = 0.02) : rng_(seed), stddev_(stddev) {}
  Matrix truncated_normal(ag::Index rows, ag::Index cols);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
  double stddev_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int in, int out, Initializer& init,
         bool bias = true);
  Var operator()(const Var& x) const { return ag::linear(x, weight_, bias_); }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ag::layer_norm(x, gamma_, beta_); }

 private:
  Var gamma_;
  Var beta_;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParamStore& store, const std::string& name, int dim, int hidden, Initializer& init);
  Var operator()(const Var& x) const { return fc2_(ag::gelu(fc1_(x))); }

 private:
  Linear fc1_;
  Linear fc2_;
};

// Multi-head attention with separate q/k/v/out projections and 1/sqrt(d_head)
// scaling. Keys beyond key_len are masked.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, int dim, int heads,
                     Initializer& init);
  Var self_attend(const Var& x, ag::Index key_len = -1) const;

 private:
  int heads_ = 1;
  double scale_ = 1.0;
  Linear q_, k_, v_, out_;
};

// Pre-norm encoder layer: x += MHSA(LN(x)); x += FFN(LN(x)).
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(ParamStore& store, const std::string& name, int dim, int heads, double mlp_ratio,
               Initializer& init);
  Var operator()(const Var& x, ag::Index key_len = -1) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  FeedForward ffn_;
};

int hidden_width(int dim, double mlp_ratio);

}  // namespace ovseg::nn
