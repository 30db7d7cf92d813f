#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"

namespace fewner {

/// Desk-scale synthetic corpus: person/company (and optionally location)
/// mentions with disjoint surface vocabularies, so entity words never occur
/// as context and small encoders can memorize the task.
inline Corpus make_synthetic_corpus(int n_sentences, std::uint64_t seed,
                                    int n_types = 2) {
  if (n_types < 1 || n_types > 3) throw ConfigError("synthetic corpus supports 1-3 types");
  const std::vector<std::string> people = {"anna",  "boris", "clara", "denis",
                                           "elena", "felix", "greta", "hugo"};
  const std::vector<std::string> surnames = {"smith", "jones", "kim", "lee"};
  const std::vector<std::string> firms = {"acme",     "globex", "initech",
                                          "umbrella", "hooli",  "vandelay"};
  const std::vector<std::string> firm_suffixes = {"corp", "inc"};
  const std::vector<std::string> places = {"tokyo", "oslo", "cairo", "lima"};

  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::string>& pool) {
    return pool[rng() % pool.size()];
  };

  Corpus corpus;
  corpus.types.push_back("person");
  if (n_types >= 2) corpus.types.push_back("company");
  if (n_types >= 3) corpus.types.push_back("location");

  auto add_entity = [&](TaggedSentence& s, const std::string& type) {
    if (type == "person") {
      s.words.push_back(pick(people));
      s.tags.push_back("person");
      if (rng() % 3 == 0) {
        s.words.push_back(pick(surnames));
        s.tags.push_back("person");
      }
    } else if (type == "company") {
      s.words.push_back(pick(firms));
      s.tags.push_back("company");
      if (rng() % 3 == 0) {
        s.words.push_back(pick(firm_suffixes));
        s.tags.push_back("company");
      }
    } else {
      s.words.push_back(pick(places));
      s.tags.push_back("location");
    }
  };
  auto add_context = [&](TaggedSentence& s, std::initializer_list<const char*> words) {
    for (const char* w : words) {
      s.words.push_back(w);
      s.tags.push_back("O");
    }
  };

  for (int i = 0; i < n_sentences; ++i) {
    TaggedSentence s;
    const int shape = static_cast<int>(rng() % (n_types >= 3 ? 6 : 4));
    switch (shape) {
      case 0:
        add_entity(s, "person");
        add_context(s, {"works", "at"});
        add_entity(s, n_types >= 2 ? "company" : "person");
        add_context(s, {"."});
        break;
      case 1:
        if (n_types >= 2) {
          add_entity(s, "company");
          add_context(s, {"hired"});
          add_entity(s, "person");
        } else {
          add_entity(s, "person");
          add_context(s, {"greeted"});
          add_entity(s, "person");
        }
        add_context(s, {"last", "year", "."});
        break;
      case 2:
        add_entity(s, "person");
        add_context(s, {"met"});
        add_entity(s, "person");
        if (n_types >= 2) {
          add_context(s, {"at"});
          add_entity(s, "company");
        }
        add_context(s, {"."});
        break;
      case 3:
        add_entity(s, "person");
        add_context(s, {"joined"});
        add_entity(s, n_types >= 2 ? "company" : "person");
        add_context(s, {"this", "spring", "."});
        break;
      case 4:
        add_entity(s, "person");
        add_context(s, {"flew", "to"});
        add_entity(s, "location");
        add_context(s, {"."});
        break;
      default:
        add_entity(s, "company");
        add_context(s, {"opened", "offices", "in"});
        add_entity(s, "location");
        add_context(s, {"."});
        break;
    }
    corpus.sentences.push_back(std::move(s));
  }
  return corpus;
}

/// Companion corpus over a disjoint label and surface vocabulary
/// (location/animal), for transfer-style evaluation where test classes never
/// appear in training.
inline Corpus make_synthetic_target_corpus(int n_sentences, std::uint64_t seed) {
  const std::vector<std::string> places = {"tokyo", "oslo",  "cairo",
                                           "lima",  "quito", "minsk"};
  const std::vector<std::string> animals = {"otter", "falcon", "lynx",
                                            "ibis",  "panda",  "gecko"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const std::vector<std::string>& pool) {
    return pool[rng() % pool.size()];
  };

  Corpus corpus;
  corpus.types = {"location", "animal"};
  for (int i = 0; i < n_sentences; ++i) {
    TaggedSentence s;
    auto entity = [&](const std::string& type) {
      s.words.push_back(type == "location" ? pick(places) : pick(animals));
      s.tags.push_back(type);
    };
    auto ctx = [&](std::initializer_list<const char*> words) {
      for (const char* w : words) {
        s.words.push_back(w);
        s.tags.push_back("O");
      }
    };
    switch (rng() % 4) {
      case 0:
        entity("animal");
        ctx({"lives", "near"});
        entity("location");
        ctx({"."});
        break;
      case 1:
        entity("location");
        ctx({"protects", "the"});
        entity("animal");
        ctx({"."});
        break;
      case 2:
        ctx({"the"});
        entity("animal");
        ctx({"escaped", "in"});
        entity("location");
        ctx({"."});
        break;
      default:
        entity("animal");
        ctx({"and"});
        entity("animal");
        ctx({"roam"});
        entity("location");
        ctx({"."});
        break;
    }
    corpus.sentences.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace fewner
