#include <doctest.h>

#include <memory>
#include <random>

#include "fewner/encoder_backend.hpp"
#include "fewner/prompt_builder.hpp"

using namespace fewner;

namespace {

TokenizerPtr small_tokenizer() { return std::make_shared<ChunkTokenizer>(64, 3); }

PromptedInput sample_input(const Subtokenizer& tok,
                           std::vector<std::string> sentence = {"anna", "visited",
                                                                "acme", "towers",
                                                                "today"}) {
  return build_prompted_input(sentence, make_type_set({"person", "company"}),
                              PromptTemplate{}, tok);
}

}  // namespace

TEST_CASE("seeded init is reproducible and shapes follow the contract") {
  auto tok = small_tokenizer();
  const auto a = make_tiny_encoder(32, 2, 1, tok);
  const auto b = make_tiny_encoder(32, 2, 1, tok);
  REQUIRE(a.params->size() == b.params->size());
  for (const auto& [name, tensor] : *a.params) CHECK(tensor == b.params->get(name));

  const auto c = make_tiny_encoder(32, 2, 2, tok);
  CHECK_FALSE(c.params->get("enc.tok_emb") == a.params->get("enc.tok_emb"));

  const auto pi = sample_input(*tok);
  const auto enc = encode(a, pi);
  CHECK(enc.h_n.rows() == 5);
  CHECK(enc.h_n.cols() == 32);
  CHECK(enc.h_m.rows() == 3);
  CHECK(enc.h_l.rows() == pi.l);
}

TEST_CASE("per-word rows are the arithmetic mean of their subtoken vectors") {
  auto tok = small_tokenizer();
  const auto h = make_tiny_encoder(16, 1, 3, tok);
  const auto pi = sample_input(*tok);

  ad::Tape tape;
  ParamBinder bind(tape, *h.params);
  std::mt19937_64 rng(0);
  const auto g = encode_graph(tape, bind, h, pi, false, rng);
  const Matrix& sub = tape.value(g.subtokens);
  const Matrix& words = tape.value(g.words);

  for (std::size_t w = 0; w < pi.alignment.size(); ++w) {
    const auto& r = pi.alignment[w];
    for (std::size_t j = 0; j < words.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t t = r.begin; t < r.end; ++t) mean += sub(t, j);
      mean /= static_cast<double>(r.end - r.begin);
      CHECK(words(w, j) == doctest::Approx(mean).epsilon(1e-12));
    }
  }

  // single-subtoken words equal that subtoken row exactly
  bool saw_single = false;
  for (std::size_t w = 0; w < pi.alignment.size(); ++w) {
    const auto& r = pi.alignment[w];
    if (r.end - r.begin != 1) continue;
    saw_single = true;
    for (std::size_t j = 0; j < words.cols(); ++j)
      CHECK(words(w, j) == sub(r.begin, j));
  }
  CHECK(saw_single);
}

TEST_CASE("split segments concatenate back to the pooled sequence") {
  auto tok = small_tokenizer();
  const auto h = make_tiny_encoder(16, 1, 4, tok);
  const auto pi = sample_input(*tok);
  const auto enc = encode(h, pi);
  CHECK(enc.h_l.rows() + enc.h_m.rows() + enc.h_n.rows() == pi.full_text_words.size());

  ad::Tape tape;
  ParamBinder bind(tape, *h.params);
  std::mt19937_64 rng(0);
  const auto g = encode_graph(tape, bind, h, pi, false, rng);
  const Matrix& words = tape.value(g.words);
  for (std::size_t j = 0; j < words.cols(); ++j) {
    CHECK(enc.h_l(0, j) == words(0, j));
    CHECK(enc.h_m(0, j) == words(pi.l, j));
    CHECK(enc.h_n(0, j) == words(pi.l + pi.m, j));
  }
}

TEST_CASE("eval-mode encoding is bitwise deterministic") {
  auto tok = small_tokenizer();
  const auto h = make_tiny_encoder(32, 2, 5, tok);
  const auto pi = sample_input(*tok);
  const auto a = encode(h, pi);
  const auto b = encode(h, pi);
  CHECK(a.h_l == b.h_l);
  CHECK(a.h_m == b.h_m);
  CHECK(a.h_n == b.h_n);
}

TEST_CASE("over-long inputs raise a truncation error naming the sentence") {
  auto tok = small_tokenizer();
  EncoderConfig cfg;
  cfg.max_len = 12;
  const auto h = make_tiny_encoder(16, 1, 6, tok, cfg);
  const auto pi = sample_input(*tok, {"verylongword", "anotherlongword",
                                      "supercalifragilistic", "expialidocious", "words",
                                      "beyond", "limit"});
  CHECK_THROWS_WITH_AS(encode(h, pi), doctest::Contains("supercalifragilistic"),
                       TruncationError);
}

TEST_CASE("gradients of a scalar loss match finite differences for every parameter") {
  auto tok = std::make_shared<ChunkTokenizer>(48, 3);
  const auto h = make_tiny_encoder(8, 1, 7, tok);
  const auto pi = sample_input(*tok, {"ada", "met", "bo"});

  auto build_loss = [&](ad::Tape& tape, const ParamStore& store) {
    ParamBinder bind(tape, store);
    std::mt19937_64 rng(0);
    const auto g = encode_graph(tape, bind, h, pi, false, rng);
    const auto sq = tape.matmul_nt(g.words, g.words);
    Matrix probe(1, tape.value(sq).rows());
    for (std::size_t i = 0; i < probe.cols(); ++i)
      probe(0, i) = 0.05 * static_cast<double>(i + 1);
    const auto row = tape.const_premul(probe, sq);
    return std::make_pair(tape.matmul_nt(row, row), std::move(bind));
  };

  ad::Tape tape;
  auto [loss, bind] = build_loss(tape, *h.params);
  tape.backward(loss);
  const auto grads = bind.collect_grads();

  auto loss_at = [&](const ParamStore& store) {
    ad::Tape t2;
    return t2.scalar(build_loss(t2, store).first);
  };

  const double eps = 1e-5;
  std::size_t checked = 0;
  for (const auto& [name, tensor] : *h.params) {
    const auto& analytic = grads.at(name);
    for (std::size_t k = 0; k < tensor.size(); ++k) {
      ParamStore perturbed = *h.params;
      perturbed.get(name).data()[k] += eps;
      const double up = loss_at(perturbed);
      perturbed.get(name).data()[k] -= 2 * eps;
      const double dn = loss_at(perturbed);
      const double fd = (up - dn) / (2 * eps);
      const double ad_g = analytic.data()[k];
      const double denom = std::max({std::abs(fd), std::abs(ad_g), 1e-4});
      CAPTURE(name);
      CAPTURE(k);
      CHECK(std::abs(fd - ad_g) / denom < 1e-3);
      ++checked;
    }
  }
  CHECK(checked > 1000);
}
