#include "ovseg/tokenizer.hpp"

#include <cctype>
#include <fstream>

#include "ovseg/error.hpp"

#ifndef OVSEG_DATA_DIR
#define OVSEG_DATA_DIR "data"
#endif

namespace ovseg {
namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

const char* const kReservedNames[] = {"[PAD]", "[SOT]", "[EOT]", "[MASK]", "[UNK]"};

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    // Trailing hyphens/apostrophes do not belong to the word.
    size_t end = cur.size();
    while (end > 0 && (cur[end - 1] == '-' || cur[end - 1] == '\'')) --end;
    if (end > 0) words.push_back(cur.substr(0, end));
    for (size_t i = end; i < cur.size(); ++i) words.emplace_back(1, cur[i]);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if ((c == '-' || c == '\'') && !cur.empty()) {
      cur.push_back(static_cast<char>(c));
    } else {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return words;
}

Tokenizer Tokenizer::from_tokens(std::vector<std::string> table) {
  if (table.size() < kReserved) throw DataError("tokenizer table too short");
  for (int i = 0; i < kReserved; ++i) {
    if (table[static_cast<size_t>(i)] != kReservedNames[i]) {
      throw DataError("tokenizer table must start with [PAD] [SOT] [EOT] [MASK] [UNK]");
    }
  }
  Tokenizer t;
  t.table_ = std::move(table);
  for (size_t i = 0; i < t.table_.size(); ++i) {
    if (t.table_[i].empty()) throw DataError("empty token at line " + std::to_string(i + 1));
    if (!t.ids_.emplace(t.table_[i], static_cast<int>(i)).second) {
      throw DataError("duplicate token in table: " + t.table_[i]);
    }
  }
  return t;
}

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open tokenizer table: " + path.string());
  std::vector<std::string> table;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    table.push_back(line);
  }
  while (!table.empty() && table.back().empty()) table.pop_back();
  return from_tokens(std::move(table));
}

const Tokenizer& Tokenizer::builtin() {
  static const Tokenizer tok = from_file(std::filesystem::path(OVSEG_DATA_DIR) / "vocab.txt");
  return tok;
}

bool Tokenizer::is_continuation(int id) const {
  const std::string& t = token(id);
  return t.size() > 2 && t[0] == '#' && t[1] == '#';
}

std::vector<int> Tokenizer::encode_word(std::string_view word) const {
  if (auto it = ids_.find(std::string(word)); it != ids_.end()) return {it->second};
  std::vector<int> pieces;
  size_t pos = 0;
  while (pos < word.size()) {
    int found = -1;
    size_t found_len = 0;
    for (size_t len = word.size() - pos; len > 0; --len) {
      std::string piece(word.substr(pos, len));
      if (pos > 0) piece = "##" + piece;
      if (auto it = ids_.find(piece); it != ids_.end()) {
        found = it->second;
        found_len = len;
        break;
      }
    }
    if (found < 0) return {kUnk};
    pieces.push_back(found);
    pos += found_len;
  }
  return pieces;
}

std::vector<int> Tokenizer::encode_words(std::string_view text) const {
  std::vector<int> ids;
  for (const std::string& w : split_words(text)) {
    const auto pieces = encode_word(w);
    ids.insert(ids.end(), pieces.begin(), pieces.end());
  }
  return ids;
}

TokenizedText Tokenizer::encode(std::string_view text, int max_len) const {
  if (max_len < 2) throw UsageError("max token length must be at least 2");
  std::vector<int> content = encode_words(text);
  TokenizedText out;
  const size_t room = static_cast<size_t>(max_len - 2);
  if (content.size() > room) {
    content.resize(room);
    out.truncated = true;
  }
  out.token_ids.reserve(static_cast<size_t>(max_len));
  out.token_ids.push_back(kSot);
  out.token_ids.insert(out.token_ids.end(), content.begin(), content.end());
  out.eot_index = static_cast<int>(out.token_ids.size());
  out.token_ids.push_back(kEot);
  out.token_ids.resize(static_cast<size_t>(max_len), kPad);
  return out;
}

std::string Tokenizer::decode(const TokenizedText& tokens) const {
  std::string s;
  for (int i = 1; i < tokens.eot_index; ++i) {
    const int id = tokens.token_ids[static_cast<size_t>(i)];
    if (is_continuation(id)) {
      s += token(id).substr(2);
    } else {
      if (!s.empty()) s += ' ';
      s += token(id);
    }
  }
  return s;
}

}  // namespace ovseg
