#pragma once

// Toy-scale text tokenizer: lowercase, split into words and punctuation,
// then greedy longest-prefix subword pieces from a fixed table. Pieces that
// continue a word carry a "##" prefix in the table.

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ovseg {

struct TokenizedText {
  static constexpr int kSotIndex = 0;
  std::vector<int> token_ids;  // length M: [SOT] content [EOT] [PAD]...
  int eot_index = 1;
  bool truncated = false;

  int length() const { return static_cast<int>(token_ids.size()); }
  // Positions up to and including the end token.
  int valid_length() const { return eot_index + 1; }
};

// Lowercases ASCII and splits on whitespace. Letters, digits, intra-word
// hyphens and apostrophes form words; any other character is its own word.
std::vector<std::string> split_words(std::string_view text);

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSot = 1;
  static constexpr int kEot = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;
  static constexpr int kReserved = 5;

  // Table lines are tokens; the line number is the id. The first five lines
  // must be [PAD] [SOT] [EOT] [MASK] [UNK].
  static Tokenizer from_file(const std::filesystem::path& path);
  static Tokenizer from_tokens(std::vector<std::string> table);
  // Table shipped with the project.
  static const Tokenizer& builtin();

  int size() const { return static_cast<int>(table_.size()); }
  const std::string& token(int id) const { return table_.at(static_cast<size_t>(id)); }
  bool is_continuation(int id) const;

  std::vector<int> encode_word(std::string_view word) const;
  // Content ids only; no start/end/pad.
  std::vector<int> encode_words(std::string_view text) const;
  // Exactly max_len ids. Content beyond max_len - 2 is dropped and
  // `truncated` set.
  TokenizedText encode(std::string_view text, int max_len) const;
  std::string decode(const TokenizedText& tokens) const;

 private:
  std::vector<std::string> table_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace ovseg
