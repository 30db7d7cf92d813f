#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/tokenizer.hpp"

namespace fewner {

/// Prompt prefix with a single {types} placeholder for the type list.
/// Default instructs the encoder to look for the prompted classes.
struct PromptTemplate {
  std::string prefix_text = "Find some entities, such as {types}: ";
};

/// Half-open subtoken range [begin, end) for one word.
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const TokenRange& o) const { return begin == o.begin && end == o.end; }
};

/// The prompted input [X_l, X_m, X]: template words, one label word per
/// type, then the original sentence. Separator punctuation (commas, the
/// trailing colon) always counts into the l segment, never into m, so the
/// word at index l+j is exactly the j-th type name and the word at index
/// l+m+i is the i-th sentence word.
struct PromptedInput {
  std::vector<std::string> full_text_words;
  std::size_t l = 0;  ///< template word count
  std::size_t m = 0;  ///< label word count (== type set size)
  std::size_t n = 0;  ///< sentence word count
  std::vector<TokenRange> alignment;  ///< per word, its subtoken range
  std::vector<int> subtoken_ids;      ///< flattened subtoken sequence
};

namespace detail {

/// Whitespace split with separator punctuation peeled into its own words.
inline std::vector<std::string> split_template_words(std::string_view text) {
  static const std::string punct = ",:;.!?";
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    if (punct.find(text[i]) != std::string::npos) {
      words.emplace_back(1, text[i]);
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) &&
           punct.find(text[j]) == std::string::npos)
      ++j;
    words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

/// Multi-word class names become a single underscore-joined label word.
inline std::string to_label_word(const std::string& type_name) {
  std::string out = type_name;
  for (char& c : out)
    if (c == ' ') c = '_';
  return out;
}

}  // namespace detail

/// Template words without the type list; their count is the l segment size.
inline std::vector<std::string> template_words(const PromptTemplate& tpl) {
  const auto ph = tpl.prefix_text.find("{types}");
  if (ph == std::string::npos)
    throw ConfigError("prompt template lacks the {types} placeholder");
  auto words = detail::split_template_words(tpl.prefix_text.substr(0, ph));
  const auto after = detail::split_template_words(tpl.prefix_text.substr(ph + 7));
  words.insert(words.end(), after.begin(), after.end());
  return words;
}

/// Rendered display string (type names joined with ", " at the placeholder).
inline std::string render_prompt(const PromptTemplate& tpl, const EntityTypeSet& ts) {
  const auto ph = tpl.prefix_text.find("{types}");
  if (ph == std::string::npos)
    throw ConfigError("prompt template lacks the {types} placeholder");
  std::string joined;
  for (std::size_t i = 0; i < ts.types.size(); ++i) {
    if (i) joined += ", ";
    joined += ts.types[i];
  }
  return tpl.prefix_text.substr(0, ph) + joined + tpl.prefix_text.substr(ph + 7);
}

inline PromptedInput build_prompted_input(const std::vector<std::string>& sentence,
                                          const EntityTypeSet& type_set,
                                          const PromptTemplate& tpl,
                                          const Subtokenizer& tokenizer) {
  if (sentence.empty()) throw ContractError("cannot prompt an empty sentence");
  if (type_set.types.empty() || type_set.types.front() != "none")
    throw ContractError("type set must start with \"none\"");

  PromptedInput pi;
  auto tw = template_words(tpl);
  pi.l = tw.size();
  pi.m = type_set.types.size();
  pi.n = sentence.size();
  pi.full_text_words = std::move(tw);
  for (const auto& t : type_set.types)
    pi.full_text_words.push_back(detail::to_label_word(t));
  pi.full_text_words.insert(pi.full_text_words.end(), sentence.begin(), sentence.end());

  pi.alignment.reserve(pi.full_text_words.size());
  for (std::size_t w = 0; w < pi.full_text_words.size(); ++w) {
    const auto ids = tokenizer.subtokenize(pi.full_text_words[w]);
    if (ids.empty()) {
      const bool is_label = w >= pi.l && w < pi.l + pi.m;
      throw ConfigError(std::string(is_label ? "type name" : "word") + " \"" +
                        pi.full_text_words[w] + "\" subtokenizes to zero tokens");
    }
    TokenRange r;
    r.begin = pi.subtoken_ids.size();
    pi.subtoken_ids.insert(pi.subtoken_ids.end(), ids.begin(), ids.end());
    r.end = pi.subtoken_ids.size();
    pi.alignment.push_back(r);
  }
  return pi;
}

/// Subtoken ranges of the m label words, in type-set order.
inline std::vector<TokenRange> label_word_indices(const PromptedInput& pi) {
  std::vector<TokenRange> ranges;
  ranges.reserve(pi.m);
  for (std::size_t j = 0; j < pi.m; ++j) ranges.push_back(pi.alignment[pi.l + j]);
  return ranges;
}

}  // namespace fewner
