#include "ovseg/nn.hpp"

#include <cmath>

#include "ovseg/error.hpp"

namespace ovseg::nn {

Var ParamStore::add(const std::string& name, Matrix init, bool decay) {
  if (entries_.count(name)) throw UsageError("duplicate parameter name: " + name);
  Var v = ag::parameter(std::move(init));
  entries_.emplace(name, ParamEntry{v, decay});
  return v;
}

const Var& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw UsageError("unknown parameter: " + name);
  return it->second.var;
}

void ParamStore::zero_grad() {
  for (auto& [_, e] : entries_) e.var.zero_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& [_, e] : entries_) e.var.set_requires_grad(on);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += static_cast<std::size_t>(e.var.value().size());
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.entries_.size() != entries_.size()) throw UsageError("parameter sets differ in size");
  for (auto& [name, e] : entries_) {
    const Var& src = other.at(name);
    if (src.rows() != e.var.rows() || src.cols() != e.var.cols()) {
      throw UsageError("parameter shape mismatch: " + name);
    }
    e.var.mutable_value() = src.value();
  }
}

Matrix Initializer::truncated_normal(ag::Index rows, ag::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) {
    double z = normal(rng_);
    while (std::abs(z) > 2.0) z = normal(rng_);
    m.data()[i] = z * stddev_;
  }
  return m;
}

int hidden_width(int dim, double mlp_ratio) {
  return std::max(1, static_cast<int>(std::lround(dim * mlp_ratio)));
}

Linear::Linear(ParamStore& store, const std::string& name, int in, int out, Initializer& init,
               bool bias) {
  weight_ = store.add(name + ".weight", init.truncated_normal(in, out));
  if (bias) bias_ = store.add(name + ".bias", Matrix::Zero(1, out), false);
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, int dim) {
  gamma_ = store.add(name + ".gamma", Matrix::Ones(1, dim), false);
  beta_ = store.add(name + ".beta", Matrix::Zero(1, dim), false);
}

FeedForward::FeedForward(ParamStore& store, const std::string& name, int dim, int hidden,
                         Initializer& init)
    : fc1_(store, name + ".fc1", dim, hidden, init), fc2_(store, name + ".fc2", hidden, dim, init) {}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, int dim,
                                       int heads, Initializer& init)
    : heads_(heads),
      q_(store, name + ".q", dim, dim, init),
      k_(store, name + ".k", dim, dim, init),
      v_(store, name + ".v", dim, dim, init),
      out_(store, name + ".out", dim, dim, init) {
  if (heads < 1 || dim % heads != 0) throw UsageError("embed dim must be divisible by heads");
  scale_ = 1.0 / std::sqrt(static_cast<double>(dim / heads));
}

Var MultiHeadAttention::self_attend(const Var& x, ag::Index key_len) const {
  ag::AttentionOptions opts{heads_, key_len, scale_};
  return out_(ag::attention(q_(x), k_(x), v_(x), opts));
}

EncoderBlock::EncoderBlock(ParamStore& store, const std::string& name, int dim, int heads,
                           double mlp_ratio, Initializer& init)
    : ln1_(store, name + ".ln1", dim),
      ln2_(store, name + ".ln2", dim),
      attn_(store, name + ".attn", dim, heads, init),
      ffn_(store, name + ".ffn", dim, hidden_width(dim, mlp_ratio), init) {}

Var EncoderBlock::operator()(const Var& x, ag::Index key_len) const {
  Var h = ag::add(x, attn_.self_attend(ln1_(x), key_len));
  return ag::add(h, ffn_(ln2_(h)));
}

}  // namespace ovseg::nn
