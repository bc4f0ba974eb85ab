#pragma once

#include <random>
#include <string>
#include <vector>

#include "ovseg/corpus.hpp"
#include "ovseg/nn.hpp"
#include "ovseg/tokenizer.hpp"

namespace ovseg {

using ag::Var;

struct TextConfig {
  int vocab_size = 0;
  int embed_dim = 64;
  int layers = 2;
  int heads = 4;
  int max_len = 32;
  double mlp_ratio = 2.0;

  void validate() const;
};

struct TextEmbedding {
  Var sequence;    // rows x D; rows == max_len for a full encoding
  Var eot_vector;  // 1 x D, the sequence row at the end token
  int eot_index = 0;
};

// Bidirectional transformer over token + position embeddings. Pad positions
// never serve as keys, so they cannot influence any other row.
class TextEncoder {
 public:
  TextEncoder(const TextConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
              const std::string& prefix = "text");

  const TextConfig& config() const { return cfg_; }
  TextEmbedding encode(const TokenizedText& tokens) const;
  // Only rows up to the end token; identical to those rows of encode().
  TextEmbedding encode_prefix(const TokenizedText& tokens) const;

 private:
  TextEmbedding run(const TokenizedText& tokens, int rows) const;

  TextConfig cfg_;
  Var token_embed_;
  Var pos_embed_;
  std::vector<nn::EncoderBlock> blocks_;
  nn::LayerNorm norm_;
};

TextEmbedding encode_masked_caption(const TextEncoder& encoder, const Triplet& triplet,
                                    const Tokenizer& tokenizer, MatchOptions opts = {});
TextEmbedding encode_entity_prompt(const TextEncoder& encoder, const Triplet& triplet,
                                   const std::vector<std::string>& templates, std::mt19937_64& rng,
                                   const Tokenizer& tokenizer);

}  // namespace ovseg
