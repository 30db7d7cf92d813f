#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "fewner/episode_data.hpp"

using namespace fewner;

namespace {

std::string temp_path(const std::string& stem) {
  static int counter = 0;
  return "/tmp/fewner_test_" + stem + "_" + std::to_string(++counter);
}

/// Brute-force run-length oracle for tag sequences.
std::vector<SpanAnnotation> run_length_oracle(const std::vector<std::string>& tags) {
  std::vector<SpanAnnotation> spans;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    if (tags[i] == "O") continue;
    const bool starts_run = i == 0 || tags[i - 1] != tags[i];
    if (!starts_run) continue;
    std::size_t j = i;
    while (j + 1 < tags.size() && tags[j + 1] == tags[i]) ++j;
    spans.push_back({static_cast<int>(i), static_cast<int>(j), tags[i]});
  }
  return spans;
}

Corpus synthetic_two_class_corpus() {
  Corpus c;
  const std::vector<std::string> people = {"anna", "boris", "clara", "denis", "elena"};
  const std::vector<std::string> firms = {"acme", "globex", "initech", "umbrella"};
  for (std::size_t i = 0; i < 30; ++i) {
    TaggedSentence s;
    s.words = {people[i % people.size()], "works", "at", firms[i % firms.size()], "."};
    s.tags = {"person", "O", "O", "company", "O"};
    c.sentences.push_back(s);
  }
  c.types = {"person", "company"};
  return c;
}

}  // namespace

TEST_CASE("column-bio loading strips prefixes and reports malformed lines") {
  const auto path = temp_path("corpus");
  {
    std::ofstream out(path);
    out << "Steve\tB-person\nJobs\tI-person\nfounded\tO\n\nAcme\tS-company\n";
  }
  const auto corpus = load_corpus(path, CorpusFormat::column_bio);
  REQUIRE(corpus.sentences.size() == 2);
  CHECK(corpus.sentences[0].words == std::vector<std::string>{"Steve", "Jobs", "founded"});
  CHECK(corpus.sentences[0].tags == std::vector<std::string>{"person", "person", "O"});
  CHECK(corpus.sentences[1].tags == std::vector<std::string>{"company"});
  CHECK(corpus.types == std::vector<std::string>{"person", "company"});

  {
    std::ofstream out(path);
    out << "good\tO\nbadline\n";
  }
  CHECK_THROWS_WITH_AS(load_corpus(path, CorpusFormat::column_bio),
                       doctest::Contains("line 2"), ParseError);
  std::remove(path.c_str());
}

TEST_CASE("unknown corpus formats are config errors") {
  CHECK(parse_corpus_format("column-bio") == CorpusFormat::column_bio);
  CHECK(parse_corpus_format("episode-json") == CorpusFormat::episode_json);
  CHECK_THROWS_AS(parse_corpus_format("parquet"), ConfigError);
}

TEST_CASE("empty file gives an empty corpus and inventory") {
  const auto path = temp_path("empty");
  { std::ofstream out(path); }
  const auto corpus = load_corpus(path, CorpusFormat::column_bio);
  CHECK(corpus.sentences.empty());
  CHECK(corpus.types.empty());
  std::remove(path.c_str());
}

TEST_CASE("tags_to_spans handles runs, all-O, and adjacent distinct tags") {
  TaggedSentence s;
  s.words = {"a", "b", "c", "d"};
  s.tags = {"person", "person", "O", "company"};
  auto spans = tags_to_spans(s);
  REQUIRE(spans.size() == 2);
  CHECK(spans[0] == SpanAnnotation{0, 1, "person"});
  CHECK(spans[1] == SpanAnnotation{3, 3, "company"});

  s.tags = {"O", "O", "O", "O"};
  CHECK(tags_to_spans(s).empty());

  s.tags = {"A", "B", "B", "A"};
  spans = tags_to_spans(s);
  CHECK(spans == run_length_oracle(s.tags));
  REQUIRE(spans.size() == 3);
  CHECK(spans[0] == SpanAnnotation{0, 0, "A"});
  CHECK(spans[1] == SpanAnnotation{1, 2, "B"});
  CHECK(spans[2] == SpanAnnotation{3, 3, "A"});
}

TEST_CASE("tag round trip: spans_to_tags inverts tags_to_spans") {
  std::mt19937_64 rng(99);
  const std::vector<std::string> alphabet = {"O", "A", "B", "C"};
  for (int trial = 0; trial < 200; ++trial) {
    TaggedSentence s;
    const std::size_t len = 1 + rng() % 8;
    for (std::size_t i = 0; i < len; ++i) {
      s.words.push_back("w" + std::to_string(i));
      s.tags.push_back(alphabet[rng() % alphabet.size()]);
    }
    CHECK(spans_to_tags(len, tags_to_spans(s)) == s.tags);
  }
}

TEST_CASE("episode JSON round trip") {
  Episode ep;
  ep.support.push_back({{"anna", "works", "at", "acme"}, {"person", "O", "O", "company"}});
  ep.query.push_back({{"boris", "joined", "globex"}, {"person", "O", "company"}});
  ep.type_set = make_type_set({"person", "company"});
  ep.n_way = 2;
  ep.k_shot = 1;

  const auto path = temp_path("episodes");
  write_episodes_jsonl(path, {ep, ep});
  const auto loaded = load_episodes_jsonl(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].support == ep.support);
  CHECK(loaded[0].query == ep.query);
  CHECK(loaded[0].type_set.types == ep.type_set.types);
  CHECK(loaded[0].n_way == 2);
  CHECK(loaded[0].k_shot == 1);

  const auto as_corpus = load_corpus(path, CorpusFormat::episode_json);
  CHECK(as_corpus.sentences.size() == 4);
  CHECK(as_corpus.types == std::vector<std::string>{"person", "company"});
  std::remove(path.c_str());
}

TEST_CASE("greedy sampling produces valid episodes deterministically") {
  const auto corpus = synthetic_two_class_corpus();

  SUBCASE("2-way 2-shot stays in the K..2K band") {
    const auto ep = sample_episode(corpus, 2, 2, 42);
    CHECK(ep.n_way == 2);
    CHECK(ep.type_set.types.size() == 3);
    const auto report = validate_episode(ep);
    CHECK(report.pass);
    for (const auto& c : report.classes) {
      CHECK(c.support_mentions >= 2);
      CHECK(c.support_mentions <= 4);
    }
  }

  SUBCASE("1-way 1-shot over one-entity sentences needs exactly one sentence") {
    Corpus c;
    for (int i = 0; i < 6; ++i) {
      TaggedSentence s;
      s.words = {"city" + std::to_string(i), "rocks"};
      s.tags = {"location", "O"};
      c.sentences.push_back(s);
    }
    c.types = {"location"};
    const auto ep = sample_episode(c, 1, 1, 5);
    CHECK(ep.support.size() == 1);
    CHECK(validate_episode(ep).pass);
  }

  SUBCASE("same seed twice gives identical episodes") {
    const auto a = sample_episode(corpus, 2, 2, 7);
    const auto b = sample_episode(corpus, 2, 2, 7);
    CHECK(a.support == b.support);
    CHECK(a.query == b.query);
    CHECK(a.type_set.types == b.type_set.types);
  }

  SUBCASE("sampled episodes always validate") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      const auto ep = sample_episode(corpus, 2, 2, seed);
      CHECK(validate_episode(ep).pass);
    }
  }

  SUBCASE("infeasible corpora raise with the deficient classes") {
    Corpus c;
    c.sentences.push_back({{"one"}, {"rare"}});
    c.types = {"rare"};
    CHECK_THROWS_WITH_AS(sample_episode(c, 1, 3, 1), doctest::Contains("rare"),
                         InfeasibleError);
  }
}

TEST_CASE("validate_episode flags band and disjointness violations") {
  Episode ep;
  ep.type_set = make_type_set({"person"});
  ep.n_way = 1;
  ep.k_shot = 1;
  TaggedSentence s1{{"anna"}, {"person"}};
  TaggedSentence s2{{"boris", "and", "clara", "and", "denis"},
                    {"person", "O", "person", "O", "person"}};
  ep.support = {s1};
  ep.query = {s1};  // same sentence: disjointness violation
  auto report = validate_episode(ep);
  CHECK_FALSE(report.disjoint);
  CHECK_FALSE(report.pass);

  ep.query = {s2};  // 3 mentions = 3K for K=1: band violation
  report = validate_episode(ep);
  CHECK(report.disjoint);
  REQUIRE(report.classes.size() == 1);
  CHECK(report.classes[0].query_mentions == 3);
  CHECK_FALSE(report.classes[0].query_in_band);
  CHECK_FALSE(report.pass);
  CHECK(report.format().find("person") != std::string::npos);
}
