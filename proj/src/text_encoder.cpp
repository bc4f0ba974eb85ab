#include "ovseg/text_encoder.hpp"

#include "ovseg/error.hpp"

namespace ovseg {

void TextConfig::validate() const {
  if (vocab_size <= Tokenizer::kReserved) throw UsageError("text vocab size too small");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
    throw UsageError("text embed dim must be divisible by heads");
  }
  if (max_len < 2) throw UsageError("text max length must be at least 2");
  if (layers < 0) throw UsageError("negative text layer count");
}

TextEncoder::TextEncoder(const TextConfig& cfg, nn::ParamStore& store, nn::Initializer& init,
                         const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  token_embed_ = store.add(prefix + ".token_embed", init.truncated_normal(cfg_.vocab_size, cfg_.embed_dim));
  pos_embed_ = store.add(prefix + ".pos_embed", init.truncated_normal(cfg_.max_len, cfg_.embed_dim));
  for (int i = 0; i < cfg_.layers; ++i) {
    blocks_.emplace_back(store, prefix + ".layer." + std::to_string(i), cfg_.embed_dim, cfg_.heads,
                         cfg_.mlp_ratio, init);
  }
  norm_ = nn::LayerNorm(store, prefix + ".norm", cfg_.embed_dim);
}

TextEmbedding TextEncoder::run(const TokenizedText& tokens, int rows) const {
  if (tokens.length() != cfg_.max_len) {
    throw UsageError("token sequence length " + std::to_string(tokens.length()) + " != " +
                     std::to_string(cfg_.max_len));
  }
  const int eot = tokens.eot_index;
  int eot_count = 0;
  for (int id : tokens.token_ids) eot_count += id == Tokenizer::kEot;
  if (eot < 1 || eot >= tokens.length() || tokens.token_ids[static_cast<size_t>(eot)] != Tokenizer::kEot ||
      eot_count != 1) {
    throw UsageError("token sequence has no unique end token");
  }
  std::vector<int> ids(tokens.token_ids.begin(), tokens.token_ids.begin() + rows);
  for (int id : ids) {
    if (id < 0 || id >= cfg_.vocab_size) throw UsageError("token id out of vocabulary");
  }
  // Rows past the end token read the pad embedding whatever id they carry.
  for (size_t i = static_cast<size_t>(eot) + 1; i < ids.size(); ++i) ids[i] = Tokenizer::kPad;
  Var x = ag::add(ag::gather_rows(token_embed_, ids), ag::slice_rows(pos_embed_, 0, rows));
  for (const auto& block : blocks_) x = block(x, tokens.valid_length());
  x = norm_(x);
  return TextEmbedding{x, ag::row(x, eot), eot};
}

TextEmbedding TextEncoder::encode(const TokenizedText& tokens) const { return run(tokens, cfg_.max_len); }

TextEmbedding TextEncoder::encode_prefix(const TokenizedText& tokens) const {
  return run(tokens, tokens.valid_length());
}

TextEmbedding encode_masked_caption(const TextEncoder& encoder, const Triplet& triplet,
                                    const Tokenizer& tokenizer, MatchOptions opts) {
  return encoder.encode(mask_entities(triplet.tokens, triplet.entities, tokenizer, opts));
}

TextEmbedding encode_entity_prompt(const TextEncoder& encoder, const Triplet& triplet,
                                   const std::vector<std::string>& templates, std::mt19937_64& rng,
                                   const Tokenizer& tokenizer) {
  return encoder.encode(
      build_entity_prompt(triplet.entities, templates, rng, encoder.config().max_len, tokenizer));
}

}  // namespace ovseg
