#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fewner/errors.hpp"

namespace fewner {

/// Word -> subtoken ids. Injected into prompt construction and encoding so
/// the pipeline never hard-codes one tokenization scheme.
class Subtokenizer {
 public:
  virtual ~Subtokenizer() = default;
  virtual std::vector<int> subtokenize(std::string_view word) const = 0;
  virtual int vocab_size() const = 0;
  virtual std::string describe() const = 0;
};

using TokenizerPtr = std::shared_ptr<const Subtokenizer>;

/// Self-contained tokenizer for desk-scale runs: lowercases, splits a word
/// into chunks of at most chunk_len chars, maps each chunk to a stable id by
/// FNV-1a hash. No vocabulary file, fully deterministic.
class ChunkTokenizer final : public Subtokenizer {
 public:
  explicit ChunkTokenizer(int vocab = 2048, int chunk_len = 4)
      : vocab_(vocab), chunk_len_(chunk_len) {
    if (vocab_ < 2 || chunk_len_ < 1) throw ConfigError("bad chunk tokenizer settings");
  }

  std::vector<int> subtokenize(std::string_view word) const override {
    std::vector<int> ids;
    std::string lowered(word);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    for (std::size_t pos = 0; pos < lowered.size();
         pos += static_cast<std::size_t>(chunk_len_)) {
      const std::string_view chunk(lowered.data() + pos,
                                   std::min<std::size_t>(chunk_len_, lowered.size() - pos));
      ids.push_back(hash_id(chunk));
    }
    return ids;
  }

  int vocab_size() const override { return vocab_; }

  std::string describe() const override {
    return "chunk(vocab=" + std::to_string(vocab_) +
           ",chunk_len=" + std::to_string(chunk_len_) + ")";
  }

  int chunk_len() const { return chunk_len_; }

 private:
  int hash_id(std::string_view s) const {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return static_cast<int>(h % static_cast<std::uint64_t>(vocab_));
  }

  int vocab_;
  int chunk_len_;
};

/// Greedy longest-match-first subword tokenizer driven by a vocabulary file
/// (one piece per line, "##" marking continuations, must contain [UNK]).
class WordPieceTokenizer final : public Subtokenizer {
 public:
  explicit WordPieceTokenizer(const std::string& vocab_path, bool lowercase = true)
      : path_(vocab_path), lowercase_(lowercase) {
    std::ifstream in(vocab_path);
    if (!in) throw ConfigError("cannot open vocabulary file: " + vocab_path);
    std::string line;
    int id = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) vocab_.emplace(line, id);
      ++id;
    }
    size_ = id;
    auto unk = vocab_.find("[UNK]");
    if (unk == vocab_.end()) throw ConfigError("vocabulary lacks [UNK]: " + vocab_path);
    unk_id_ = unk->second;
  }

  std::vector<int> subtokenize(std::string_view word) const override {
    if (word.empty()) return {};
    std::string w(word);
    if (lowercase_)
      std::transform(w.begin(), w.end(), w.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::vector<int> ids;
    std::size_t start = 0;
    while (start < w.size()) {
      std::size_t end = w.size();
      int found = -1;
      while (end > start) {
        std::string piece = (start == 0 ? "" : "##") + w.substr(start, end - start);
        auto it = vocab_.find(piece);
        if (it != vocab_.end()) {
          found = it->second;
          break;
        }
        --end;
      }
      if (found < 0) return {unk_id_};
      ids.push_back(found);
      start = end;
    }
    return ids;
  }

  int vocab_size() const override { return size_; }

  std::string describe() const override { return "wordpiece(" + path_ + ")"; }

 private:
  std::string path_;
  bool lowercase_;
  std::unordered_map<std::string, int> vocab_;
  int size_ = 0;
  int unk_id_ = 0;
};

}  // namespace fewner
