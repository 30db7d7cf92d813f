#include <doctest.h>

#include <random>

#include "fewner/prompt_classifier.hpp"

using namespace fewner;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  Matrix m(r, c);
  m.fill_normal(rng, sd);
  return m;
}

}  // namespace

TEST_CASE("embed_span means the covered rows") {
  std::mt19937_64 rng(31);
  const auto h_n = random_matrix(5, 6, rng);

  SUBCASE("single word span equals its row") {
    const auto se = embed_span(h_n, {2, 2});
    for (std::size_t j = 0; j < 6; ++j) CHECK(se.u[j] == h_n(2, j));
  }

  SUBCASE("two word span is the midpoint") {
    const auto se = embed_span(h_n, {1, 2});
    for (std::size_t j = 0; j < 6; ++j)
      CHECK(se.u[j] == doctest::Approx((h_n(1, j) + h_n(2, j)) / 2.0).epsilon(1e-12));
  }

  SUBCASE("three word span matches the scalar loop oracle") {
    const auto se = embed_span(h_n, {1, 3});
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (int k = 1; k <= 3; ++k) s += h_n(static_cast<std::size_t>(k), j);
      CHECK(se.u[j] == doctest::Approx(s / 3.0).epsilon(1e-7));
    }
  }

  SUBCASE("out-of-bounds span raises") {
    CHECK_THROWS_AS(embed_span(h_n, {3, 7}), ContractError);
    CHECK_THROWS_AS(embed_span(h_n, {2, 1}), ContractError);
  }
}

TEST_CASE("classify softmax behavior") {
  std::mt19937_64 rng(37);

  SUBCASE("zero embedding gives the uniform distribution") {
    const auto h_m = random_matrix(4, 8, rng);
    SpanEmbedding se;
    se.u.assign(8, 0.0);
    const auto dist = classify(h_m, se);
    for (double p : dist.probs) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
  }

  SUBCASE("a large aligned embedding concentrates its class") {
    const std::size_t d = 16;
    Matrix h_m(3, d, 0.0);
    h_m(0, 0) = 1.0;
    h_m(1, 5) = 1.0;
    h_m(2, 10) = 1.0;
    SpanEmbedding se;
    se.u.assign(d, 0.0);
    se.u[5] = 100.0 * std::sqrt(static_cast<double>(d));
    const auto dist = classify(h_m, se);
    CHECK(dist.probs[1] > 0.99);
    CHECK(dist.argmax() == 1);
  }

  SUBCASE("sqrt(d) scaling: zero-padding to twice the width rescales logits") {
    const std::size_t d = 8;
    const auto h_m = random_matrix(3, d, rng);
    SpanEmbedding se;
    se.u.resize(d);
    for (auto& x : se.u) x = std::normal_distribution<double>()(rng);

    Matrix h_m2(3, 2 * d, 0.0);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t j = 0; j < d; ++j) h_m2(c, j) = h_m(c, j);
    SpanEmbedding se2;
    se2.u.assign(2 * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) se2.u[j] = se.u[j];

    // logits shrink by exactly sqrt(d / 2d); verify via the raw dot products
    for (std::size_t c = 0; c < 3; ++c) {
      const double raw = dot(h_m.row(c), se.u.data(), d);
      const double l1 = raw / std::sqrt(static_cast<double>(d));
      const double l2 = raw / std::sqrt(static_cast<double>(2 * d));
      CHECK(l2 == doctest::Approx(l1 * std::sqrt(0.5)).epsilon(1e-12));
    }
    // and the argmax is unchanged by the temperature change
    CHECK(classify(h_m, se).argmax() == classify(h_m2, se2).argmax());
  }

  SUBCASE("softmax shift invariance") {
    const std::size_t d = 8;
    const auto h_m = random_matrix(4, d, rng);
    SpanEmbedding se;
    se.u.resize(d);
    for (auto& x : se.u) x = std::normal_distribution<double>()(rng);
    const auto base = classify(h_m, se);

    // adding the same vector to every class row shifts all logits equally
    Matrix shifted = h_m;
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t j = 0; j < d; ++j) shifted(c, j) += se.u[j] * 0.37;
    const auto moved = classify(shifted, se);
    for (std::size_t c = 0; c < 4; ++c)
      CHECK(moved.probs[c] == doctest::Approx(base.probs[c]).epsilon(1e-9));
  }
}

TEST_CASE("classification loss values") {
  const auto type_set = make_type_set({"person", "company"});
  std::mt19937_64 rng(41);

  SUBCASE("probability one on the right label gives zero loss") {
    const std::size_t d = 8;
    Matrix h_m(3, d, 0.0);
    h_m(1, 0) = 1.0;
    Matrix h_n(2, d, 0.0);
    h_n(0, 0) = 1000.0 * std::sqrt(static_cast<double>(d));
    const double loss =
        classification_loss(h_m, h_n, {{Span{0, 0}, "person"}}, {}, type_set);
    CHECK(loss == doctest::Approx(0.0).epsilon(1e-9));
  }

  SUBCASE("uniform distribution over m classes costs ln m") {
    const auto five = make_type_set({"a", "b", "c", "d"});
    Matrix h_m(5, 4, 0.0);
    Matrix h_n(1, 4, 0.0);  // zero embedding: uniform
    const double loss = classification_loss(h_m, h_n, {{Span{0, 0}, "a"}}, {}, five);
    CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }

  SUBCASE("random instances match the hand-computed mean NLL") {
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t d = 6;
      const auto h_m = random_matrix(3, d, rng);
      const auto h_n = random_matrix(5, d, rng);
      const std::vector<std::pair<Span, std::string>> gold = {{{0, 1}, "person"},
                                                              {{3, 3}, "company"}};
      const std::vector<Span> negatives = {{2, 4}};

      double direct = 0.0;
      auto nll = [&](const Span& sp, int target) {
        const auto dist = classify(h_m, embed_span(h_n, sp));
        return -std::log(dist.probs[static_cast<std::size_t>(target)]);
      };
      direct += nll({0, 1}, 1);
      direct += nll({3, 3}, 2);
      direct += nll({2, 4}, 0);
      direct /= 3.0;

      const double loss = classification_loss(h_m, h_n, gold, negatives, type_set);
      CHECK(loss == doctest::Approx(direct).epsilon(1e-7));
    }
  }

  SUBCASE("empty gold and negatives is an error") {
    Matrix h_m(3, 4);
    Matrix h_n(2, 4);
    CHECK_THROWS_AS(classification_loss(h_m, h_n, {}, {}, type_set), ContractError);
  }

  SUBCASE("unknown label is an error") {
    Matrix h_m(3, 4);
    Matrix h_n(2, 4);
    CHECK_THROWS_AS(
        classification_loss(h_m, h_n, {{Span{0, 0}, "ghost"}}, {}, type_set),
        ContractError);
  }
}

TEST_CASE("classification loss gradients match finite differences") {
  std::mt19937_64 rng(43);
  const auto type_set = make_type_set({"person", "company"});
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 6;
    const auto h_m0 = random_matrix(3, d, rng);
    const auto h_n0 = random_matrix(4, d, rng);
    const std::vector<std::pair<Span, std::string>> gold = {{{0, 1}, "person"}};
    const std::vector<Span> negatives = {{2, 3}};

    ad::Tape tape;
    const auto h_m = tape.leaf(h_m0);
    const auto h_n = tape.leaf(h_n0);
    const auto u = span_embeddings_graph(tape, h_n, {Span{0, 1}, Span{2, 3}});
    const auto logits = class_logits_graph(tape, h_m, u);
    const auto loss = tape.softmax_nll(logits, {1, 0});
    tape.backward(loss);

    const double eps = 1e-4;
    auto fd_check = [&](const Matrix& base, const Matrix& grad, bool is_hm) {
      for (std::size_t k = 0; k < base.size(); ++k) {
        Matrix up = base, dn = base;
        up.data()[k] += eps;
        dn.data()[k] -= eps;
        const double lu = classification_loss(is_hm ? up : h_m0, is_hm ? h_n0 : up,
                                              gold, negatives, type_set);
        const double ld = classification_loss(is_hm ? dn : h_m0, is_hm ? h_n0 : dn,
                                              gold, negatives, type_set);
        const double fd = (lu - ld) / (2 * eps);
        const double ad_g = grad.data()[k];
        const double denom = std::max({std::abs(fd), std::abs(ad_g), 1e-8});
        CHECK(std::abs(fd - ad_g) / denom < 1e-4);
      }
    };
    fd_check(h_m0, tape.grad(h_m), true);
    fd_check(h_n0, tape.grad(h_n), false);
  }
}
