#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "ovseg/corpus.hpp"
#include "ovseg/error.hpp"
#include "test_util.hpp"

using namespace ovseg;

namespace {

struct LabeledCaption {
  RawPair pair;
  std::vector<std::string> entities;
};

std::vector<LabeledCaption> load_labeled(const std::string& name) {
  std::ifstream in(test_data(name));
  REQUIRE(in.good());
  std::vector<LabeledCaption> out;
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    out.push_back({RawPair{j["id"], j["image_path"], j["caption"], std::nullopt},
                   j["entities"].get<std::vector<std::string>>()});
  }
  return out;
}

std::vector<std::string> lines_of(const std::string& name) {
  std::ifstream in(test_data(name));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

EntitySet omega_of(std::vector<std::string> entities) {
  EntitySet o;
  o.entities = std::move(entities);
  for (const auto& e : o.entities) o.frequencies[e] = 1;
  return o;
}

}  // namespace

TEST_CASE("hand-labelled caption fixture") {
  const auto rows = load_labeled("captions50.jsonl");
  REQUIRE(rows.size() == 50);
  std::vector<std::string> captions;
  for (const auto& r : rows) captions.push_back(r.pair.caption);

  std::ifstream omega_file(test_data("captions50_omega.txt"));
  const EntitySet expected = read_entity_set(omega_file);
  const EntitySet omega = build_entity_set(captions, 100, builtin_stoplist(), builtin_candidate_nouns());

  SUBCASE("entity set") {
    CHECK(omega.entities == expected.entities);
    for (const auto& e : expected.entities) CHECK(omega.frequencies.at(e) == expected.frequencies.at(e));
  }
  SUBCASE("extraction") {
    for (const auto& r : rows) {
      INFO(r.pair.caption);
      CHECK(extract_entities(r.pair.caption, omega) == r.entities);
    }
  }
  SUBCASE("filtering keeps exactly the labelled captions") {
    FilterOptions opts;
    opts.check_images = false;
    std::vector<RawPair> pairs;
    for (const auto& r : rows) pairs.push_back(r.pair);
    const FilterResult res = filter_corpus(pairs, omega, Tokenizer::builtin(), opts);
    size_t k = 0;
    for (const auto& r : rows) {
      if (r.entities.empty()) continue;
      REQUIRE(k < res.triplets.size());
      CHECK(res.triplets[k].pair.id == r.pair.id);
      CHECK(res.triplets[k].entities == r.entities);
      ++k;
    }
    CHECK(k == res.triplets.size());
    CHECK(res.summary.kept == 46);
    CHECK(res.summary.no_entity == 4);
  }
  SUBCASE("masking covers exactly the entity words") {
    const Tokenizer& tok = Tokenizer::builtin();
    for (const auto& r : rows) {
      if (r.entities.empty()) continue;
      INFO(r.pair.caption);
      std::set<std::string> entity_words;
      for (const auto& e : r.entities) {
        for (const auto& w : split_words(e)) entity_words.insert(w);
      }
      // Word-level oracle: a word is masked when it, or it without a plural
      // suffix, is a word of a labelled entity.
      std::vector<int> expected_ids{Tokenizer::kSot};
      for (const auto& w : split_words(r.pair.caption)) {
        bool hit = entity_words.count(w) > 0;
        if (!hit && w.size() > 1 && w.back() == 's') hit = entity_words.count(w.substr(0, w.size() - 1)) > 0;
        if (!hit && w.size() > 2 && w.ends_with("es")) hit = entity_words.count(w.substr(0, w.size() - 2)) > 0;
        for (int id : tok.encode_word(w)) expected_ids.push_back(hit ? Tokenizer::kMask : id);
      }
      expected_ids.push_back(Tokenizer::kEot);
      const TokenizedText tokens = tok.encode(r.pair.caption, 32);
      const TokenizedText masked = mask_entities(tokens, r.entities, tok);
      CHECK(std::vector<int>(masked.token_ids.begin(), masked.token_ids.begin() + masked.valid_length()) ==
            expected_ids);
      CHECK(masked.length() == 32);
    }
  }
}

TEST_CASE("entity set construction") {
  SUBCASE("stoplisted frequent noun is dropped") {
    const auto captions = lines_of("cat_art100.txt");
    REQUIRE(captions.size() == 100);
    const EntitySet omega = build_entity_set(captions, 100, {"art"}, builtin_candidate_nouns());
    CHECK(omega.entities == std::vector<std::string>{"cat"});
    CHECK(omega.frequencies.at("cat") == 40);
    CHECK(omega.frequencies.count("art") == 0);
    const EntitySet unfiltered = build_entity_set(captions, 100, {}, builtin_candidate_nouns());
    CHECK(unfiltered.entities == std::vector<std::string>{"art", "cat"});
    CHECK(unfiltered.frequencies.at("art") == 60);
  }
  SUBCASE("max size one") {
    const EntitySet omega = build_entity_set({"a cat", "a cat and dog"}, 1, {}, builtin_candidate_nouns());
    CHECK(omega.entities == std::vector<std::string>{"cat"});
  }
  SUBCASE("person never survives the stoplist") {
    const EntitySet omega =
        build_entity_set({"a person", "a person and a person", "a dog"}, 100, builtin_stoplist(),
                         builtin_candidate_nouns());
    CHECK_FALSE(omega.contains("person"));
    CHECK(omega.entities == std::vector<std::string>{"dog"});
  }
  SUBCASE("ties broken by name") {
    const EntitySet omega = build_entity_set({"a dog", "a cat", "a bird"}, 2, {}, builtin_candidate_nouns());
    CHECK(omega.entities == std::vector<std::string>{"bird", "cat"});
  }
  SUBCASE("caption order does not matter") {
    auto captions = lines_of("cat_art100.txt");
    for (const auto& r : load_labeled("captions50.jsonl")) captions.push_back(r.pair.caption);
    const EntitySet a = build_entity_set(captions, 20, builtin_stoplist(), builtin_candidate_nouns());
    std::mt19937_64 rng(3);
    std::shuffle(captions.begin(), captions.end(), rng);
    const EntitySet b = build_entity_set(captions, 20, builtin_stoplist(), builtin_candidate_nouns());
    CHECK(a.entities == b.entities);
    CHECK(a.frequencies == b.frequencies);
  }
  SUBCASE("empty corpus") {
    CHECK_THROWS_AS(build_entity_set({}, 10, {}, builtin_candidate_nouns()), DataError);
  }
  SUBCASE("text round trip") {
    const EntitySet a = build_entity_set({"a cat", "a fire hydrant and a cat"}, 10, {}, builtin_candidate_nouns());
    std::stringstream s;
    write_entity_set(a, s);
    const EntitySet b = read_entity_set(s);
    CHECK(b.entities == a.entities);
    CHECK(b.frequencies == a.frequencies);
  }
}

TEST_CASE("entity extraction") {
  const EntitySet omega = omega_of({"cat", "chair", "dog"});
  CHECK(extract_entities("a cat sits on a chair", omega) == std::vector<std::string>{"cat", "chair"});
  CHECK(extract_entities("a catalog of chairs", omega, MatchOptions{false}).empty());
  CHECK(extract_entities("a catalog of chairs", omega) == std::vector<std::string>{"chair"});
  CHECK(extract_entities("cat and cat and dog", omega) == std::vector<std::string>{"cat", "dog"});
  CHECK(extract_entities("A CAT.", omega) == std::vector<std::string>{"cat"});
}

TEST_CASE("corpus filtering") {
  const EntitySet omega = omega_of({"ball", "bird", "bus", "car", "cat", "dog", "horse", "sofa"});
  FilterOptions opts;
  opts.check_images = false;
  std::ifstream in(test_data("filter10.jsonl"));
  const FilterResult res = filter_corpus(in, omega, Tokenizer::builtin(), opts);
  std::vector<std::string> ids;
  for (const auto& t : res.triplets) ids.push_back(t.pair.id);
  CHECK(ids == std::vector<std::string>{"f0", "f2", "f6", "f7", "f8", "f9"});
  CHECK(res.summary.read == 10);
  CHECK(res.summary.kept == 6);
  CHECK(res.summary.no_entity == 4);
  CHECK(res.triplets[3].pair.mask_path == std::optional<std::string>("masks/f7.png"));
  CHECK(res.triplets[4].entities == std::vector<std::string>{"dog", "ball"});

  SUBCASE("emits a triplet iff extraction is non-empty") {
    std::ifstream again(test_data("filter10.jsonl"));
    const auto pairs = read_corpus(again).pairs;
    size_t k = 0;
    for (const auto& p : pairs) {
      if (extract_entities(p.caption, omega).empty()) continue;
      CHECK(res.triplets.at(k++).pair.id == p.id);
    }
    CHECK(k == res.triplets.size());
  }
  SUBCASE("superset vocabulary keeps everything") {
    std::ifstream again(test_data("filter10.jsonl"));
    const EntitySet all = omega_of({"grass", "composition", "sofa", "hills", "person", "furniture", "bus", "bird",
                                    "dog", "horse"});
    CHECK(filter_corpus(again, all, Tokenizer::builtin(), opts).triplets.size() == 10);
  }
  SUBCASE("empty vocabulary keeps nothing") {
    std::ifstream again(test_data("filter10.jsonl"));
    CHECK(filter_corpus(again, EntitySet{}, Tokenizer::builtin(), opts).triplets.empty());
  }
  SUBCASE("bad lines are skipped and counted") {
    std::stringstream s;
    s << "{\"id\":\"a\",\"image_path\":\"x.png\",\"caption\":\"a dog\"}\n"
      << "not json\n"
      << "{\"id\":\"b\",\"caption\":\"a cat\"}\n"
      << "{\"id\":\"c\",\"image_path\":\"y.png\",\"caption\":\"   \"}\n"
      << "{\"id\":\"d\",\"image_path\":\"z.png\",\"caption\":\"a cat\"}\n";
    const FilterResult r = filter_corpus(s, omega, Tokenizer::builtin(), opts);
    CHECK(r.triplets.size() == 2);
    CHECK(r.summary.skipped == 3);
  }
  SUBCASE("missing images are rejected when checked") {
    FilterOptions checked = opts;
    checked.check_images = true;
    checked.base_dir = test_data(".");
    std::ifstream again(test_data("filter10.jsonl"));
    const FilterResult r = filter_corpus(again, omega, Tokenizer::builtin(), checked);
    CHECK(r.triplets.empty());
    CHECK(r.summary.skipped == 10);
  }
}

TEST_CASE("entity masking") {
  const Tokenizer& tok = Tokenizer::builtin();
  const TokenizedText t = tok.encode("a cat and a dog", 32);
  const TokenizedText m = mask_entities(t, {"cat", "dog"}, tok);
  CHECK(tok.decode(m) == "a [MASK] and a [MASK]");
  CHECK(mask_entities(t, {}, tok).token_ids == t.token_ids);
  CHECK_THROWS_AS(mask_entities(t, {"horse"}, tok), DataError);

  SUBCASE("multi-piece entity") {
    const TokenizedText h = tok.encode("a fire hydrant on the street", 32);
    const auto fire = tok.encode_word("fire");
    const auto hydrant = tok.encode_word("hydrant");
    const TokenizedText hm = mask_entities(h, {"fire hydrant"}, tok);
    const int first = 2;  // after [SOT] and "a"
    const int n = static_cast<int>(fire.size() + hydrant.size());
    CHECK(n >= 2);
    for (int i = 0; i < h.length(); ++i) {
      const bool inside = i >= first && i < first + n;
      CHECK((hm.token_ids[i] == Tokenizer::kMask) == inside);
      if (!inside) CHECK(hm.token_ids[i] == h.token_ids[i]);
    }
  }
}

TEST_CASE("entity prompts") {
  const Tokenizer& tok = Tokenizer::builtin();
  std::mt19937_64 rng(1);
  const TokenizedText p = build_entity_prompt({"cat"}, {"A photo of a {}."}, rng, 32, tok);
  CHECK(p.token_ids == tok.encode("A photo of a cat.", 32).token_ids);
  const TokenizedText q = build_entity_prompt({"cat", "dog", "ball"}, {"A painting of a {}"}, rng, 32, tok);
  CHECK(tok.decode(q) == "a painting of a cat and dog and ball");
  CHECK(q.length() == 32);

  SUBCASE("seeded template choice") {
    const auto templates = builtin_templates();
    std::mt19937_64 a(9), b(9);
    for (int i = 0; i < 20; ++i) {
      CHECK(build_entity_prompt({"dog"}, templates, a, 32, tok).token_ids ==
            build_entity_prompt({"dog"}, templates, b, 32, tok).token_ids);
    }
  }
  SUBCASE("overlong prompt is truncated before the end token") {
    std::vector<std::string> many(20, "elephant");
    const TokenizedText t = build_entity_prompt(many, {"{}"}, rng, 16, tok);
    CHECK(t.truncated);
    CHECK(t.length() == 16);
    CHECK(t.token_ids[t.eot_index] == Tokenizer::kEot);
  }
}

TEST_CASE("cross-image pairs") {
  auto triplet = [](std::string id, std::vector<std::string> entities) {
    Triplet t;
    t.pair.id = std::move(id);
    t.entities = std::move(entities);
    return t;
  };
  std::mt19937_64 rng(5);

  SUBCASE("only choice") {
    const std::vector<Triplet> ts{triplet("a", {"cat"}), triplet("b", {"cat"})};
    const CrossPairIndex idx = CrossPairIndex::from_triplets(ts);
    const CrossPair p = sample_cross_pair(ts[0], idx, rng);
    CHECK(p.partner_id == "b");
    CHECK(p.entity == "cat");
  }
  SUBCASE("eligibility filter") {
    const std::vector<Triplet> ts{triplet("a", {"cat", "dog"}), triplet("b", {"dog"}), triplet("c", {"horse"})};
    const CrossPairIndex idx = CrossPairIndex::from_triplets(ts);
    for (int i = 0; i < 20; ++i) {
      const CrossPair p = sample_cross_pair(ts[0], idx, rng);
      CHECK(p.partner_id == "b");
      CHECK(p.entity == "dog");
    }
    CHECK_THROWS_AS(sample_cross_pair(ts[2], idx, rng), DataError);
    CHECK_FALSE(try_sample_cross_pair(ts[2], idx, rng).has_value());
  }
  SUBCASE("uniform partner choice") {
    const std::vector<Triplet> ts{triplet("a", {"cat"}), triplet("b", {"cat"}), triplet("c", {"cat"})};
    const CrossPairIndex idx = CrossPairIndex::from_triplets(ts);
    std::mt19937_64 draws(2024);
    std::map<std::string, int> counts;
    for (int i = 0; i < 1000; ++i) ++counts[sample_cross_pair(ts[0], idx, draws).partner_id];
    CHECK(counts.count("a") == 0);
    const double chi2 = (counts["b"] - 500.0) * (counts["b"] - 500.0) / 500.0 +
                        (counts["c"] - 500.0) * (counts["c"] - 500.0) / 500.0;
    CHECK(chi2 < 10.83);  // one degree of freedom, p = 0.001
    CHECK(std::abs(counts["b"] - 500) <= 3 * 15.82);
  }
  SUBCASE("index rebuild equals incremental build") {
    const auto rows = load_labeled("captions50.jsonl");
    std::vector<Triplet> ts;
    for (const auto& r : rows) {
      if (!r.entities.empty()) ts.push_back(triplet(r.pair.id, r.entities));
    }
    CrossPairIndex inc;
    for (const auto& t : ts) inc.add(t);
    CHECK(inc == CrossPairIndex::from_triplets(ts));
    for (const auto& [e, ids] : inc.lists()) {
      CHECK_FALSE(ids.empty());
      for (const auto& t : ts) {
        const bool listed = std::find(ids.begin(), ids.end(), t.pair.id) != ids.end();
        const bool has = std::find(t.entities.begin(), t.entities.end(), e) != t.entities.end();
        CHECK(listed == has);
      }
    }
  }
}

TEST_CASE("triplet file round trip") {
  const EntitySet omega = omega_of({"bird", "dog"});
  FilterOptions opts;
  opts.check_images = false;
  std::ifstream in(test_data("filter10.jsonl"));
  const FilterResult res = filter_corpus(in, omega, Tokenizer::builtin(), opts);
  std::stringstream s;
  write_triplets(res.triplets, s);
  const auto back = read_triplets(s, Tokenizer::builtin(), 32);
  REQUIRE(back.size() == res.triplets.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].pair.id == res.triplets[i].pair.id);
    CHECK(back[i].entities == res.triplets[i].entities);
    CHECK(back[i].tokens.token_ids == res.triplets[i].tokens.token_ids);
    CHECK(back[i].pair.mask_path == res.triplets[i].pair.mask_path);
  }
}
