#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fewner/autodiff.hpp"
#include "fewner/errors.hpp"
#include "fewner/matrix.hpp"
#include "fewner/params.hpp"
#include "fewner/prompt_builder.hpp"
#include "fewner/tokenizer.hpp"

namespace fewner {

/// Per-word representations of a prompted input, split at the segment
/// boundaries: H = [H_l, H_m, H_n].
struct EncodedInput {
  Matrix h_l;
  Matrix h_m;
  Matrix h_n;
  std::size_t d = 0;
};

struct EncoderConfig {
  int d = 32;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  int max_len = 128;
  double dropout = 0.1;
  double ln_eps = 1e-5;
};

/// Handle over one encoder's parameters. "pretrained" loads weights from a
/// named-tensor checkpoint; "tiny_trainable" is randomly initialized. Both
/// share the architecture and the trainable-parameter registry.
struct EncoderHandle {
  enum class Kind { pretrained, tiny_trainable };

  Kind kind = Kind::tiny_trainable;
  EncoderConfig cfg;
  std::string prefix;  ///< parameter name prefix inside the store
  std::shared_ptr<ParamStore> params;
  TokenizerPtr tokenizer;
};

namespace detail {

inline void init_encoder_params(ParamStore& store, const std::string& prefix,
                                const EncoderConfig& cfg, int vocab_size,
                                std::mt19937_64& rng) {
  if (cfg.d < 8 || cfg.d % 2 != 0) throw ConfigError("encoder width must be even and >= 8");
  if (cfg.layers < 1) throw ConfigError("encoder needs at least one layer");
  if (cfg.d % cfg.heads != 0) throw ConfigError("encoder width not divisible by heads");
  const double std0 = 0.02;
  auto normal = [&](std::size_t r, std::size_t c) {
    Matrix m(r, c);
    m.fill_normal(rng, std0);
    return m;
  };
  const auto d = static_cast<std::size_t>(cfg.d);
  store.add(prefix + "tok_emb", normal(static_cast<std::size_t>(vocab_size), d));
  store.add(prefix + "pos_emb", normal(static_cast<std::size_t>(cfg.max_len), d));
  for (int layer = 0; layer < cfg.layers; ++layer) {
    const std::string p = prefix + "L" + std::to_string(layer) + ".";
    store.add(p + "Wq", normal(d, d));
    store.add(p + "Wk", normal(d, d));
    store.add(p + "Wv", normal(d, d));
    store.add(p + "Wo", normal(d, d));
    store.add(p + "ln1.g", Matrix(1, d, 1.0));
    store.add(p + "ln1.b", Matrix(1, d, 0.0));
    store.add(p + "ln2.g", Matrix(1, d, 1.0));
    store.add(p + "ln2.b", Matrix(1, d, 0.0));
    const auto ff = d * static_cast<std::size_t>(cfg.ffn_mult);
    store.add(p + "W1", normal(d, ff));
    store.add(p + "b1", Matrix(1, ff, 0.0));
    store.add(p + "W2", normal(ff, d));
    store.add(p + "b2", Matrix(1, d, 0.0));
  }
  store.add(prefix + "lnf.g", Matrix(1, d, 1.0));
  store.add(prefix + "lnf.b", Matrix(1, d, 0.0));
}

/// words x subtokens averaging matrix from the alignment.
inline Matrix pooling_matrix(const PromptedInput& pi) {
  Matrix pool(pi.full_text_words.size(), pi.subtoken_ids.size());
  for (std::size_t w = 0; w < pi.alignment.size(); ++w) {
    const auto& r = pi.alignment[w];
    const double inv = 1.0 / static_cast<double>(r.end - r.begin);
    for (std::size_t t = r.begin; t < r.end; ++t) pool(w, t) = inv;
  }
  return pool;
}

}  // namespace detail

/// Segments of the encoder graph, as tape nodes.
struct EncodedGraph {
  ad::Tape::NodeId subtokens;  ///< seq_len x d, before word pooling
  ad::Tape::NodeId words;      ///< (l+m+n) x d, per-word mean-pooled
  ad::Tape::NodeId h_l;
  ad::Tape::NodeId h_m;
  ad::Tape::NodeId h_n;
};

/// Builds the full encoder forward pass on the tape: embeddings, pre-LN
/// self-attention blocks, final LN, then per-word mean pooling and the
/// l/m/n split. Dropout is active only in train mode.
inline EncodedGraph encode_graph(ad::Tape& tape, ParamBinder& bind,
                                 const EncoderHandle& h, const PromptedInput& pi,
                                 bool train, std::mt19937_64& rng) {
  const auto& cfg = h.cfg;
  const std::size_t len = pi.subtoken_ids.size();
  if (len > static_cast<std::size_t>(cfg.max_len)) {
    std::string text;
    for (std::size_t i = pi.l + pi.m; i < pi.full_text_words.size(); ++i)
      text += (text.empty() ? "" : " ") + pi.full_text_words[i];
    throw TruncationError("prompted input of " + std::to_string(len) +
                          " subtokens exceeds encoder max length " +
                          std::to_string(cfg.max_len) + " for sentence: " + text);
  }
  const std::string& pre = h.prefix;
  const double rate = train ? cfg.dropout : 0.0;

  std::vector<int> pos_ids(len);
  for (std::size_t i = 0; i < len; ++i) pos_ids[i] = static_cast<int>(i);
  auto x = tape.add(tape.gather_rows(bind(pre + "tok_emb"), pi.subtoken_ids),
                    tape.gather_rows(bind(pre + "pos_emb"), pos_ids));

  const int dh = cfg.d / cfg.heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int layer = 0; layer < cfg.layers; ++layer) {
    const std::string p = pre + "L" + std::to_string(layer) + ".";
    auto a_in = tape.add_row_vec(
        tape.mul_row_vec(tape.layer_norm_rows(x, cfg.ln_eps), bind(p + "ln1.g")),
        bind(p + "ln1.b"));
    auto q = tape.matmul(a_in, bind(p + "Wq"));
    auto k = tape.matmul(a_in, bind(p + "Wk"));
    auto v = tape.matmul(a_in, bind(p + "Wv"));
    std::vector<ad::Tape::NodeId> head_outs;
    for (int head = 0; head < cfg.heads; ++head) {
      const std::size_t c0 = static_cast<std::size_t>(head * dh);
      auto qh = tape.slice_cols(q, c0, static_cast<std::size_t>(dh));
      auto kh = tape.slice_cols(k, c0, static_cast<std::size_t>(dh));
      auto vh = tape.slice_cols(v, c0, static_cast<std::size_t>(dh));
      auto att = tape.softmax_rows(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh));
      head_outs.push_back(tape.matmul(att, vh));
    }
    auto attn = tape.matmul(cfg.heads == 1 ? head_outs.front()
                                           : tape.concat_cols(head_outs),
                            bind(p + "Wo"));
    x = tape.add(x, tape.dropout(attn, rate, rng));
    auto f_in = tape.add_row_vec(
        tape.mul_row_vec(tape.layer_norm_rows(x, cfg.ln_eps), bind(p + "ln2.g")),
        bind(p + "ln2.b"));
    auto ff = tape.add_row_vec(
        tape.matmul(tape.relu(tape.add_row_vec(tape.matmul(f_in, bind(p + "W1")),
                                               bind(p + "b1"))),
                    bind(p + "W2")),
        bind(p + "b2"));
    x = tape.add(x, tape.dropout(ff, rate, rng));
  }
  x = tape.add_row_vec(
      tape.mul_row_vec(tape.layer_norm_rows(x, cfg.ln_eps), bind(pre + "lnf.g")),
      bind(pre + "lnf.b"));

  EncodedGraph out;
  out.subtokens = x;
  out.words = tape.const_premul(detail::pooling_matrix(pi), x);
  out.h_l = tape.slice_rows(out.words, 0, pi.l);
  out.h_m = tape.slice_rows(out.words, pi.l, pi.m);
  out.h_n = tape.slice_rows(out.words, pi.l + pi.m, pi.n);
  return out;
}

/// Eval-mode encoding: deterministic for fixed parameters.
inline EncodedInput encode(const EncoderHandle& h, const PromptedInput& pi) {
  ad::Tape tape;
  ParamBinder bind(tape, *h.params);
  std::mt19937_64 rng(0);  // unused: dropout is off in eval mode
  const auto g = encode_graph(tape, bind, h, pi, /*train=*/false, rng);
  EncodedInput out;
  out.h_l = tape.value(g.h_l);
  out.h_m = tape.value(g.h_m);
  out.h_n = tape.value(g.h_n);
  out.d = static_cast<std::size_t>(h.cfg.d);
  if (!out.h_l.all_finite() || !out.h_m.all_finite() || !out.h_n.all_finite())
    throw ContractError("encoder produced non-finite values");
  return out;
}

/// Randomly initialized small self-attention encoder with its own parameter
/// store; deterministic per seed.
inline EncoderHandle make_tiny_encoder(int d, int layers, std::uint64_t seed,
                                       TokenizerPtr tokenizer = nullptr,
                                       EncoderConfig base = EncoderConfig{}) {
  EncoderHandle h;
  h.kind = EncoderHandle::Kind::tiny_trainable;
  h.cfg = base;
  h.cfg.d = d;
  h.cfg.layers = layers;
  if (d % h.cfg.heads != 0 || d / h.cfg.heads < 4) h.cfg.heads = 1;
  h.prefix = "enc.";
  h.params = std::make_shared<ParamStore>();
  h.tokenizer = tokenizer ? std::move(tokenizer) : std::make_shared<ChunkTokenizer>();
  std::mt19937_64 rng(seed);
  detail::init_encoder_params(*h.params, h.prefix, h.cfg, h.tokenizer->vocab_size(), rng);
  return h;
}

}  // namespace fewner
