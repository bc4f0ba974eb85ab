#include "ovseg/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ovseg/error.hpp"

#ifndef OVSEG_DATA_DIR
#define OVSEG_DATA_DIR "data"
#endif

namespace ovseg {
namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
  size_t b = 0;
  size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

// Token spans [start, start+len) of `entity` inside the content region.
std::vector<std::pair<int, int>> entity_spans(const TokenizedText& tokens, const std::string& entity,
                                              const Tokenizer& tokenizer, MatchOptions opts) {
  std::vector<std::string> words = split_words(entity);
  if (words.empty()) return {};
  std::vector<std::vector<std::string>> variants{words};
  if (opts.plural_folding) {
    for (const char* suffix : {"s", "es"}) {
      auto v = words;
      v.back() += suffix;
      variants.push_back(std::move(v));
    }
  }
  std::vector<std::pair<int, int>> spans;
  const auto& ids = tokens.token_ids;
  const int end = tokens.eot_index;
  for (const auto& variant : variants) {
    std::vector<int> pattern;
    for (const auto& w : variant) {
      auto pieces = tokenizer.encode_word(w);
      pattern.insert(pattern.end(), pieces.begin(), pieces.end());
    }
    const int len = static_cast<int>(pattern.size());
    for (int p = 1; p + len <= end; ++p) {
      if (!std::equal(pattern.begin(), pattern.end(), ids.begin() + p)) continue;
      if (p + len < end && tokenizer.is_continuation(ids[static_cast<size_t>(p + len)])) continue;
      spans.emplace_back(p, len);
    }
  }
  return spans;
}

std::vector<std::string> read_lines(const std::filesystem::path& path, bool lowercase) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::string t = trim(line);
    if (t.empty()) continue;
    out.push_back(lowercase ? lower(t) : t);
  }
  return out;
}

}  // namespace

bool EntitySet::contains(std::string_view e) const {
  return std::find(entities.begin(), entities.end(), e) != entities.end();
}

PhraseMatcher::PhraseMatcher(const std::vector<std::string>& phrases, MatchOptions opts) : opts_(opts) {
  std::set<std::string> seen;
  for (const auto& p : phrases) {
    auto words = split_words(p);
    if (words.empty()) continue;
    std::string canonical = join_words(words);
    if (!seen.insert(canonical).second) continue;
    phrases_.push_back({std::move(canonical), std::move(words)});
  }
  std::stable_sort(phrases_.begin(), phrases_.end(),
                   [](const Phrase& a, const Phrase& b) { return a.words.size() > b.words.size(); });
}

bool PhraseMatcher::word_matches(const std::string& surface, const std::string& entry, bool last) const {
  if (surface == entry) return true;
  if (!last || !opts_.plural_folding) return false;
  return surface == entry + "s" || surface == entry + "es";
}

std::vector<std::string> PhraseMatcher::find_all(std::string_view caption) const {
  const auto words = split_words(caption);
  std::vector<std::string> found;
  size_t i = 0;
  while (i < words.size()) {
    const Phrase* best = nullptr;
    bool best_exact = false;
    for (const Phrase& ph : phrases_) {
      const size_t n = ph.words.size();
      if (best && n < best->words.size()) break;
      if (i + n > words.size()) continue;
      bool ok = true;
      bool exact = true;
      for (size_t k = 0; k < n && ok; ++k) {
        const bool last = k + 1 == n;
        ok = word_matches(words[i + k], ph.words[k], last);
        exact = exact && words[i + k] == ph.words[k];
      }
      if (!ok) continue;
      if (!best || (exact && !best_exact)) {
        best = &ph;
        best_exact = exact;
      }
    }
    if (best) {
      found.push_back(best->canonical);
      i += best->words.size();
    } else {
      ++i;
    }
  }
  return found;
}

EntitySet build_entity_set(const std::vector<std::string>& captions, int max_size,
                           const std::vector<std::string>& stoplist,
                           const std::vector<std::string>& candidates, MatchOptions opts) {
  if (max_size < 1) throw UsageError("entity set size must be at least 1");
  if (captions.empty()) throw DataError("empty corpus");
  PhraseMatcher matcher(candidates, opts);
  std::map<std::string, int> counts;
  for (const auto& c : captions) {
    for (auto& e : matcher.find_all(c)) ++counts[e];
  }
  std::set<std::string> stop;
  for (const auto& s : stoplist) stop.insert(join_words(split_words(s)));

  std::vector<std::pair<std::string, int>> ranked;
  for (const auto& [e, n] : counts) {
    if (!stop.count(e)) ranked.emplace_back(e, n);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > static_cast<size_t>(max_size)) ranked.resize(static_cast<size_t>(max_size));

  EntitySet out;
  out.max_size = max_size;
  out.stoplist.assign(stop.begin(), stop.end());
  for (auto& [e, n] : ranked) {
    out.entities.push_back(e);
    out.frequencies[e] = n;
  }
  return out;
}

std::vector<std::string> extract_entities(std::string_view caption, const EntitySet& omega,
                                          MatchOptions opts) {
  PhraseMatcher matcher(omega.entities, opts);
  std::vector<std::string> out;
  for (auto& e : matcher.find_all(caption)) {
    if (std::find(out.begin(), out.end(), e) == out.end()) out.push_back(std::move(e));
  }
  return out;
}

FilterResult filter_corpus(const std::vector<RawPair>& pairs, const EntitySet& omega,
                           const Tokenizer& tokenizer, const FilterOptions& opts) {
  FilterResult result;
  PhraseMatcher matcher(omega.entities, opts.match);
  for (const RawPair& pair : pairs) {
    ++result.summary.read;
    if (pair.id.empty() || trim(pair.caption).empty()) {
      ++result.summary.skipped;
      continue;
    }
    if (opts.check_images) {
      std::error_code ec;
      if (!std::filesystem::is_regular_file(opts.base_dir / pair.image_path, ec)) {
        ++result.summary.skipped;
        continue;
      }
    }
    std::vector<std::string> found;
    for (auto& e : matcher.find_all(pair.caption)) {
      if (std::find(found.begin(), found.end(), e) == found.end()) found.push_back(std::move(e));
    }
    Triplet t{pair, tokenizer.encode(pair.caption, opts.max_len), {}};
    // Entities cut off by truncation are not part of the triplet.
    for (auto& e : found) {
      if (!entity_spans(t.tokens, e, tokenizer, opts.match).empty()) t.entities.push_back(std::move(e));
    }
    if (t.entities.empty()) {
      ++result.summary.no_entity;
      continue;
    }
    ++result.summary.kept;
    result.triplets.push_back(std::move(t));
  }
  return result;
}

FilterResult filter_corpus(std::istream& jsonl, const EntitySet& omega, const Tokenizer& tokenizer,
                           const FilterOptions& opts) {
  CorpusReadResult read = read_corpus(jsonl);
  FilterResult result = filter_corpus(read.pairs, omega, tokenizer, opts);
  result.summary.read += read.skipped;
  result.summary.skipped += read.skipped;
  return result;
}

TokenizedText mask_entities(const TokenizedText& tokens, const std::vector<std::string>& entities,
                            const Tokenizer& tokenizer, MatchOptions opts) {
  TokenizedText out = tokens;
  for (const auto& e : entities) {
    auto spans = entity_spans(tokens, e, tokenizer, opts);
    if (spans.empty()) throw DataError("entity/token mismatch: " + e);
    for (auto [start, len] : spans) {
      for (int p = start; p < start + len; ++p) out.token_ids[static_cast<size_t>(p)] = Tokenizer::kMask;
    }
  }
  return out;
}

std::string fill_template(std::string_view tmpl, std::string_view text) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string_view::npos) throw UsageError("prompt template lacks {}: " + std::string(tmpl));
  std::string out(tmpl.substr(0, pos));
  out += text;
  out += tmpl.substr(pos + 2);
  return out;
}

TokenizedText build_entity_prompt(const std::vector<std::string>& entities,
                                  const std::vector<std::string>& templates, std::mt19937_64& rng,
                                  int max_len, const Tokenizer& tokenizer) {
  if (entities.empty()) throw UsageError("entity prompt needs at least one entity");
  if (templates.empty()) throw UsageError("no prompt templates");
  std::uniform_int_distribution<size_t> pick(0, templates.size() - 1);
  const std::string& tmpl = templates[pick(rng)];
  std::string joined;
  for (const auto& e : entities) {
    if (!joined.empty()) joined += " and ";
    joined += e;
  }
  return tokenizer.encode(fill_template(tmpl, joined), max_len);
}

void CrossPairIndex::add(const Triplet& t) {
  std::set<std::string> seen;
  for (const auto& e : t.entities) {
    if (seen.insert(e).second) lists_[e].push_back(t.pair.id);
  }
}

CrossPairIndex CrossPairIndex::from_triplets(const std::vector<Triplet>& triplets) {
  CrossPairIndex index;
  for (const auto& t : triplets) index.add(t);
  return index;
}

const std::vector<std::string>& CrossPairIndex::members(const std::string& entity) const {
  static const std::vector<std::string> kEmpty;
  auto it = lists_.find(entity);
  return it == lists_.end() ? kEmpty : it->second;
}

std::optional<CrossPair> try_sample_cross_pair(const Triplet& anchor, const CrossPairIndex& index,
                                               std::mt19937_64& rng) {
  const std::string& self = anchor.pair.id;
  std::vector<const std::string*> eligible;
  for (const auto& e : anchor.entities) {
    const auto& m = index.members(e);
    if (std::any_of(m.begin(), m.end(), [&](const std::string& id) { return id != self; })) {
      eligible.push_back(&e);
    }
  }
  if (eligible.empty()) return std::nullopt;
  const std::string& entity =
      *eligible[std::uniform_int_distribution<size_t>(0, eligible.size() - 1)(rng)];
  std::vector<const std::string*> others;
  for (const auto& id : index.members(entity)) {
    if (id != self) others.push_back(&id);
  }
  const std::string& partner = *others[std::uniform_int_distribution<size_t>(0, others.size() - 1)(rng)];
  return CrossPair{partner, entity};
}

CrossPair sample_cross_pair(const Triplet& anchor, const CrossPairIndex& index, std::mt19937_64& rng) {
  auto p = try_sample_cross_pair(anchor, index, rng);
  if (!p) throw DataError("no cross pair");
  return *p;
}

// --- file formats ---------------------------------------------------------

std::vector<std::string> read_word_list(const std::filesystem::path& path) {
  return read_lines(path, true);
}

std::vector<std::string> builtin_candidate_nouns() {
  return read_word_list(std::filesystem::path(OVSEG_DATA_DIR) / "candidate_nouns.txt");
}

std::vector<std::string> builtin_stoplist() {
  return read_word_list(std::filesystem::path(OVSEG_DATA_DIR) / "stoplist.txt");
}

std::vector<std::string> builtin_templates() {
  return read_lines(std::filesystem::path(OVSEG_DATA_DIR) / "templates.txt", false);
}

void write_entity_set(const EntitySet& omega, std::ostream& out) {
  out << "# max_size=" << omega.max_size << "\n";
  out << "# stoplist=";
  for (size_t i = 0; i < omega.stoplist.size(); ++i) out << (i ? "," : "") << omega.stoplist[i];
  out << "\n";
  for (const auto& e : omega.entities) {
    auto it = omega.frequencies.find(e);
    out << e << " # freq=" << (it == omega.frequencies.end() ? 1 : it->second) << "\n";
  }
}

EntitySet read_entity_set(std::istream& in) {
  EntitySet omega;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      std::string meta = trim(std::string_view(t).substr(1));
      if (meta.rfind("max_size=", 0) == 0) {
        omega.max_size = std::stoi(meta.substr(9));
      } else if (meta.rfind("stoplist=", 0) == 0) {
        std::stringstream ss(meta.substr(9));
        std::string item;
        while (std::getline(ss, item, ',')) {
          if (!trim(item).empty()) omega.stoplist.push_back(trim(item));
        }
      }
      continue;
    }
    std::string entity = t;
    int freq = 1;
    if (auto hash = t.find('#'); hash != std::string::npos) {
      entity = trim(std::string_view(t).substr(0, hash));
      const std::string comment = trim(std::string_view(t).substr(hash + 1));
      if (comment.rfind("freq=", 0) == 0) {
        try {
          freq = std::stoi(comment.substr(5));
        } catch (const std::exception&) {
          throw DataError("bad frequency in entity set line: " + line);
        }
      }
    }
    entity = join_words(split_words(entity));
    if (entity.empty()) continue;
    if (omega.frequencies.count(entity)) throw DataError("duplicate entity: " + entity);
    omega.entities.push_back(entity);
    omega.frequencies[entity] = freq;
  }
  if (static_cast<int>(omega.entities.size()) > omega.max_size) {
    omega.max_size = static_cast<int>(omega.entities.size());
  }
  return omega;
}

EntitySet load_entity_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open entity set: " + path.string());
  return read_entity_set(in);
}

std::optional<RawPair> parse_corpus_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    RawPair p;
    if (j.at("id").is_number_integer()) {
      p.id = std::to_string(j.at("id").get<long long>());
    } else {
      p.id = j.at("id").get<std::string>();
    }
    p.image_path = j.at("image_path").get<std::string>();
    p.caption = j.at("caption").get<std::string>();
    if (j.contains("mask_path") && !j.at("mask_path").is_null()) {
      p.mask_path = j.at("mask_path").get<std::string>();
    }
    return p;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

CorpusReadResult read_corpus(std::istream& in) {
  CorpusReadResult out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    if (auto p = parse_corpus_line(line)) {
      out.pairs.push_back(std::move(*p));
    } else {
      ++out.skipped;
    }
  }
  return out;
}

CorpusReadResult load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus: " + path.string());
  return read_corpus(in);
}

void write_corpus_line(const RawPair& pair, std::ostream& out) {
  json j{{"id", pair.id}, {"image_path", pair.image_path}, {"caption", pair.caption}};
  if (pair.mask_path) j["mask_path"] = *pair.mask_path;
  out << j.dump() << "\n";
}

void write_triplets(const std::vector<Triplet>& triplets, std::ostream& out) {
  for (const auto& t : triplets) {
    json j{{"id", t.pair.id},
           {"image_path", t.pair.image_path},
           {"caption", t.pair.caption},
           {"entities", t.entities},
           {"token_ids", t.tokens.token_ids}};
    if (t.pair.mask_path) j["mask_path"] = *t.pair.mask_path;
    out << j.dump() << "\n";
  }
}

std::vector<Triplet> read_triplets(std::istream& in, const Tokenizer& tokenizer, int max_len) {
  std::vector<Triplet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto pair = parse_corpus_line(line);
    if (!pair) throw DataError("malformed triplet at line " + std::to_string(lineno));
    Triplet t{*pair, tokenizer.encode(pair->caption, max_len), {}};
    try {
      t.entities = json::parse(line).at("entities").get<std::vector<std::string>>();
    } catch (const json::exception&) {
      throw DataError("triplet without entities at line " + std::to_string(lineno));
    }
    if (t.entities.empty()) throw DataError("triplet without entities at line " + std::to_string(lineno));
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Triplet> load_triplets(const std::filesystem::path& path, const Tokenizer& tokenizer,
                                   int max_len) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open triplets: " + path.string());
  return read_triplets(in, tokenizer, max_len);
}

}  // namespace ovseg
