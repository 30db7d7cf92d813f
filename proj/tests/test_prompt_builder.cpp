#include <doctest.h>

#include "fewner/prompt_builder.hpp"
#include "fewner/tokenizer.hpp"

using namespace fewner;

namespace {

const ChunkTokenizer& test_tokenizer() {
  static ChunkTokenizer tok(512, 4);
  return tok;
}

}  // namespace

TEST_CASE("default template builds the documented segment layout") {
  const auto ts = make_type_set({"person", "company"});
  const std::vector<std::string> sentence = {"Steve", "Jobs", "founded",
                                             "Apple", "in",   "1976", "."};
  const auto pi = build_prompted_input(sentence, ts, PromptTemplate{}, test_tokenizer());

  CHECK(pi.m == 3);
  CHECK(pi.n == 7);
  // "Find some entities , such as :" — separators count into the l segment
  CHECK(pi.l == 7);
  CHECK(pi.l + pi.m + pi.n == pi.full_text_words.size());
  CHECK(pi.full_text_words[pi.l] == "none");
  CHECK(pi.full_text_words[pi.l + 1] == "person");
  CHECK(pi.full_text_words[pi.l + 2] == "company");
  for (std::size_t i = 0; i < sentence.size(); ++i)
    CHECK(pi.full_text_words[pi.l + pi.m + i] == sentence[i]);

  // the display rendering keeps the natural comma-joined surface form
  CHECK(render_prompt(PromptTemplate{}, ts) ==
        "Find some entities, such as none, person, company: ");
}

TEST_CASE("minimal type set and sentence") {
  const auto ts = make_type_set({"t1"});
  const auto pi =
      build_prompted_input({"a"}, ts, PromptTemplate{}, test_tokenizer());
  CHECK(pi.m == 2);
  CHECK(pi.n == 1);
  CHECK(pi.l == template_words(PromptTemplate{}).size());
}

TEST_CASE("alignment ranges tile the subtoken sequence exactly") {
  const auto ts = make_type_set({"person", "astronomical object"});
  const auto pi = build_prompted_input({"interstellar", "dust", "clouds"}, ts,
                                       PromptTemplate{}, test_tokenizer());
  std::size_t expect_begin = 0;
  for (const auto& r : pi.alignment) {
    CHECK(r.begin == expect_begin);
    CHECK(r.end > r.begin);
    expect_begin = r.end;
  }
  CHECK(expect_begin == pi.subtoken_ids.size());

  // re-joining the per-word ranges reproduces each word's own tokenization
  for (std::size_t w = 0; w < pi.full_text_words.size(); ++w) {
    const auto ids = test_tokenizer().subtokenize(pi.full_text_words[w]);
    const auto& r = pi.alignment[w];
    REQUIRE(ids.size() == r.end - r.begin);
    for (std::size_t k = 0; k < ids.size(); ++k)
      CHECK(ids[k] == pi.subtoken_ids[r.begin + k]);
  }
}

TEST_CASE("multi-word type names become one underscore-joined label word") {
  const auto ts = make_type_set({"astronomical object"});
  const auto pi =
      build_prompted_input({"x"}, ts, PromptTemplate{}, test_tokenizer());
  CHECK(pi.full_text_words[pi.l + 1] == "astronomical_object");

  const auto ranges = label_word_indices(pi);
  REQUIRE(ranges.size() == 2);
  // chunk length 4 over 19 chars -> 5 subtokens in one range
  CHECK(ranges[1].end - ranges[1].begin ==
        test_tokenizer().subtokenize("astronomical_object").size());
  CHECK(ranges[1].end - ranges[1].begin == 5);
}

TEST_CASE("label_word_indices returns one range per type in order") {
  const auto ts = make_type_set({"person", "company"});
  const auto pi = build_prompted_input({"hi"}, ts, PromptTemplate{}, test_tokenizer());
  const auto ranges = label_word_indices(pi);
  REQUIRE(ranges.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) CHECK(ranges[j] == pi.alignment[pi.l + j]);

  const auto single = make_type_set({"only"});
  CHECK(label_word_indices(build_prompted_input({"hi"}, single, PromptTemplate{},
                                                test_tokenizer()))
            .size() == 2);
}

TEST_CASE("template changes touch only the l segment") {
  const auto ts = make_type_set({"person"});
  const std::vector<std::string> sent = {"boris", "slept"};
  const auto a = build_prompted_input(sent, ts, PromptTemplate{}, test_tokenizer());
  const auto b = build_prompted_input(
      sent, ts, PromptTemplate{"List entity mentions of kinds {types} now : "},
      test_tokenizer());
  CHECK(a.m == b.m);
  CHECK(a.n == b.n);
  for (std::size_t j = 0; j < a.m + a.n; ++j)
    CHECK(a.full_text_words[a.l + j] == b.full_text_words[b.l + j]);
}

TEST_CASE("construction errors") {
  const auto ts = make_type_set({"person"});
  CHECK_THROWS_AS(
      build_prompted_input({}, ts, PromptTemplate{}, test_tokenizer()),
      ContractError);
  EntityTypeSet not_none_first;
  not_none_first.types = {"person", "none"};
  CHECK_THROWS_AS(build_prompted_input({"a"}, not_none_first, PromptTemplate{},
                                       test_tokenizer()),
                  ContractError);
  CHECK_THROWS_AS(build_prompted_input({"a"}, ts, PromptTemplate{"no placeholder"},
                                       test_tokenizer()),
                  ConfigError);

  EntityTypeSet empty_name;
  empty_name.types = {"none", ""};
  CHECK_THROWS_WITH_AS(build_prompted_input({"a"}, empty_name, PromptTemplate{},
                                            test_tokenizer()),
                       doctest::Contains("zero tokens"), ConfigError);
}

TEST_CASE("wordpiece tokenizer splits with greedy longest match") {
  const auto path = std::string("/tmp/fewner_vocab_test.txt");
  {
    std::ofstream out(path);
    out << "[PAD]\n[UNK]\nfound\n##ed\nsteve\napple\n##s\n";
  }
  WordPieceTokenizer tok(path);
  CHECK(tok.vocab_size() == 7);
  CHECK(tok.subtokenize("founded") == std::vector<int>{2, 3});
  CHECK(tok.subtokenize("Steve") == std::vector<int>{4});
  CHECK(tok.subtokenize("apples") == std::vector<int>{5, 6});
  CHECK(tok.subtokenize("zzz") == std::vector<int>{1});  // [UNK]
  std::remove(path.c_str());
}
