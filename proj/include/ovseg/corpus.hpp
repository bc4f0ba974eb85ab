#pragma once

// Entity vocabulary construction, caption filtering into image-caption-entity
// triplets, entity masking, entity prompts, and cross-image pairing.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ovseg/tokenizer.hpp"

namespace ovseg {

struct RawPair {
  std::string id;
  std::string image_path;
  std::string caption;
  std::optional<std::string> mask_path;
};

struct EntitySet {
  std::vector<std::string> entities;  // ordered by frequency, then name
  std::map<std::string, int> frequencies;
  std::vector<std::string> stoplist;
  int max_size = 100;

  bool empty() const { return entities.empty(); }
  bool contains(std::string_view e) const;
};

struct Triplet {
  RawPair pair;
  TokenizedText tokens;
  std::vector<std::string> entities;  // first-occurrence order
};

struct MatchOptions {
  // "chairs" / "glasses" match the vocabulary entries "chair" / "glass".
  bool plural_folding = true;
};

// Whole-word phrase matcher over lowercase word sequences. At each position
// the longest phrase wins and its words are consumed.
class PhraseMatcher {
 public:
  PhraseMatcher(const std::vector<std::string>& phrases, MatchOptions opts = {});
  // Canonical phrase for every match, in caption order (duplicates kept).
  std::vector<std::string> find_all(std::string_view caption) const;

 private:
  struct Phrase {
    std::string canonical;
    std::vector<std::string> words;
  };
  bool word_matches(const std::string& surface, const std::string& entry, bool last) const;

  std::vector<Phrase> phrases_;  // longest first
  MatchOptions opts_;
};

// Most frequent candidate nouns, stoplist removed, ties broken by name.
// Throws DataError("empty corpus") when no captions are given.
EntitySet build_entity_set(const std::vector<std::string>& captions, int max_size,
                           const std::vector<std::string>& stoplist,
                           const std::vector<std::string>& candidates, MatchOptions opts = {});

std::vector<std::string> extract_entities(std::string_view caption, const EntitySet& omega,
                                          MatchOptions opts = {});

struct FilterSummary {
  std::int64_t read = 0;
  std::int64_t kept = 0;
  std::int64_t no_entity = 0;
  std::int64_t skipped = 0;  // unreadable or invalid records
};

struct FilterResult {
  std::vector<Triplet> triplets;
  FilterSummary summary;
};

struct FilterOptions {
  int max_len = 32;
  MatchOptions match;
  // Reject records whose image path does not exist (relative to base_dir).
  bool check_images = true;
  std::filesystem::path base_dir;
};

FilterResult filter_corpus(const std::vector<RawPair>& pairs, const EntitySet& omega,
                           const Tokenizer& tokenizer, const FilterOptions& opts);
// JSONL stream variant; malformed lines are counted as skipped.
FilterResult filter_corpus(std::istream& jsonl, const EntitySet& omega, const Tokenizer& tokenizer,
                           const FilterOptions& opts);

// Replaces every token of every occurrence of each entity with [MASK].
// Throws DataError("entity/token mismatch") when an entity is absent.
TokenizedText mask_entities(const TokenizedText& tokens, const std::vector<std::string>& entities,
                            const Tokenizer& tokenizer, MatchOptions opts = {});

// Fills one randomly chosen template's "{}" with the entities joined by " and ".
TokenizedText build_entity_prompt(const std::vector<std::string>& entities,
                                  const std::vector<std::string>& templates, std::mt19937_64& rng,
                                  int max_len, const Tokenizer& tokenizer);
std::string fill_template(std::string_view tmpl, std::string_view text);

class CrossPairIndex {
 public:
  void add(const Triplet& t);
  static CrossPairIndex from_triplets(const std::vector<Triplet>& triplets);
  const std::vector<std::string>& members(const std::string& entity) const;
  const std::map<std::string, std::vector<std::string>>& lists() const { return lists_; }
  bool operator==(const CrossPairIndex& other) const = default;

 private:
  std::map<std::string, std::vector<std::string>> lists_;
};

struct CrossPair {
  std::string partner_id;
  std::string entity;
};

// Uniform over the anchor's entities that have another member, then uniform
// over that entity's other members.
std::optional<CrossPair> try_sample_cross_pair(const Triplet& anchor, const CrossPairIndex& index,
                                               std::mt19937_64& rng);
// As above; throws DataError("no cross pair") when nothing is eligible.
CrossPair sample_cross_pair(const Triplet& anchor, const CrossPairIndex& index,
                            std::mt19937_64& rng);

// --- file formats ---------------------------------------------------------

std::vector<std::string> read_word_list(const std::filesystem::path& path);
std::vector<std::string> builtin_candidate_nouns();
std::vector<std::string> builtin_stoplist();
std::vector<std::string> builtin_templates();

// One entity per line with a "# freq=N" suffix.
void write_entity_set(const EntitySet& omega, std::ostream& out);
EntitySet read_entity_set(std::istream& in);
EntitySet load_entity_set(const std::filesystem::path& path);

// Corpus JSONL: id, image_path, caption, optional mask_path.
struct CorpusReadResult {
  std::vector<RawPair> pairs;
  std::int64_t skipped = 0;
};
std::optional<RawPair> parse_corpus_line(std::string_view line);
CorpusReadResult read_corpus(std::istream& in);
CorpusReadResult load_corpus(const std::filesystem::path& path);
void write_corpus_line(const RawPair& pair, std::ostream& out);

void write_triplets(const std::vector<Triplet>& triplets, std::ostream& out);
std::vector<Triplet> read_triplets(std::istream& in, const Tokenizer& tokenizer, int max_len);
std::vector<Triplet> load_triplets(const std::filesystem::path& path, const Tokenizer& tokenizer,
                                   int max_len);

}  // namespace ovseg
