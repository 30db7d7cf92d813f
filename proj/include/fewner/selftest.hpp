#pragma once

#include <chrono>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fewner/inference.hpp"
#include "fewner/metrics.hpp"
#include "fewner/prompt_classifier.hpp"
#include "fewner/span_detector.hpp"
#include "fewner/training.hpp"

namespace fewner::selftest {

struct Check {
  std::string name;
  bool pass = true;
  std::string detail;
  double seconds = 0.0;

  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                            double sd = 1.0) {
  Matrix m(r, c);
  m.fill_normal(rng, sd);
  return m;
}

inline bool rel_close(double a, double b, double tol, double floor = 1e-8) {
  const double denom = std::max(std::abs(a), std::abs(b));
  if (denom < floor) return true;
  return std::abs(a - b) / denom < tol;
}

inline BiaffineParams random_biaffine(std::size_t d, std::size_t h,
                                      std::mt19937_64& rng) {
  BiaffineParams p;
  p.w_start = random_matrix(d, h, rng, 0.3);
  p.w_end = random_matrix(d, h, rng, 0.3);
  p.w_pos = random_matrix(d, h, rng, 0.3);
  p.u = random_matrix(h, h, rng, 0.3);
  p.hidden = static_cast<int>(h);
  return p;
}

template <typename F>
Check timed(const std::string& name, F&& body) {
  Check c;
  c.name = name;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.fail(std::string("exception: ") + e.what());
  }
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                  .count();
  return c;
}

}  // namespace detail

/// Rotary constraint <R_i u, R_j v> == <u, R_{j-i} v> for 1000 random draws
/// per width, plus position-offset invariance of full score matrices.
inline Check rope_constraint() {
  return detail::timed("rope-constraint", [](Check& c) {
    std::mt19937_64 rng(1001);
    for (const std::size_t h : {8u, 32u, 64u}) {
      for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> u(h), v(h);
        for (auto& x : u) x = std::normal_distribution<double>()(rng);
        for (auto& x : v) x = std::normal_distribution<double>()(rng);
        const long i = static_cast<long>(rng() % 128);
        const long j = static_cast<long>(rng() % 128);
        const auto ru = rope_rotate(u, i);
        const auto rv = rope_rotate(v, j);
        const auto rel = rope_rotate(v, j - i);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t k = 0; k < h; ++k) {
          lhs += ru[k] * rv[k];
          rhs += u[k] * rel[k];
        }
        if (std::abs(lhs - rhs) > 1e-5)
          c.fail("constraint violated at h=" + std::to_string(h));
      }
    }
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t n = 2 + rng() % 5;
      const auto h_n = detail::random_matrix(n, 12, rng);
      const auto p = detail::random_biaffine(12, 8, rng);
      const auto base = score_spans(h_n, p);
      for (const long offset : {7L, 123L}) {
        ScoreOptions opts;
        opts.pos_offset = offset;
        const auto shifted = score_spans(h_n, p, opts);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = i; j < n; ++j)
            if (std::abs(shifted.r(i, j) - base.r(i, j)) > 1e-5)
              c.fail("score matrix not offset-invariant");
      }
    }
  });
}

/// Central finite differences (eps = 1e-4, float64) against the tape
/// gradients of the three losses, 50 random small instances each.
inline Check loss_gradients() {
  return detail::timed("loss-gradients", [](Check& c) {
    std::mt19937_64 rng(2002);
    const double eps = 1e-4;

    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 2 + rng() % 4;
      Matrix r0 = detail::random_matrix(n, n, rng, 1.5);
      const std::vector<SpanAnnotation> gold = {
          {0, static_cast<int>(rng() % n), "x"}};
      auto [pos, neg] = fewner::detail::split_cells(n, gold);
      ad::Tape tape;
      const auto leaf = tape.leaf(r0);
      tape.backward(tape.span_imbalance_loss(leaf, pos, neg));
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
          ScoreMatrix up, dn;
          up.r = r0;
          dn.r = r0;
          up.r(i, j) += eps;
          dn.r(i, j) -= eps;
          const double fd = (span_loss(up, gold) - span_loss(dn, gold)) / (2 * eps);
          if (!detail::rel_close(fd, tape.grad(leaf)(i, j), 1e-4))
            c.fail("span_loss gradient off at trial " + std::to_string(trial));
        }
    }

    const auto ts = make_type_set({"a", "b"});
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t d = 4 + rng() % 4;
      Matrix h_m0 = detail::random_matrix(3, d, rng);
      Matrix h_n0 = detail::random_matrix(4, d, rng);
      const std::vector<std::pair<Span, std::string>> gold = {{{0, 1}, "a"}};
      const std::vector<Span> negatives = {{2, 3}};

      ad::Tape tape;
      const auto hm = tape.leaf(h_m0);
      const auto hn = tape.leaf(h_n0);
      const auto u = span_embeddings_graph(tape, hn, {Span{0, 1}, Span{2, 3}});
      tape.backward(tape.softmax_nll(class_logits_graph(tape, hm, u), {1, 0}));

      auto fd_scan = [&](Matrix& base, const Matrix& grads, bool is_hm) {
        for (std::size_t k = 0; k < base.size(); ++k) {
          Matrix up = base, dn = base;
          up.data()[k] += eps;
          dn.data()[k] -= eps;
          const double lu =
              classification_loss(is_hm ? up : h_m0, is_hm ? h_n0 : up, gold,
                                  negatives, ts);
          const double ld =
              classification_loss(is_hm ? dn : h_m0, is_hm ? h_n0 : dn, gold,
                                  negatives, ts);
          if (!detail::rel_close((lu - ld) / (2 * eps), grads.data()[k], 1e-4))
            c.fail("classification_loss gradient off at trial " +
                   std::to_string(trial));
        }
      };
      fd_scan(h_m0, tape.grad(hm), true);
      fd_scan(h_n0, tape.grad(hn), false);
    }

    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t count = 4 + rng() % 3;
      const std::size_t dim = 4;
      Matrix u0 = detail::random_matrix(count, dim, rng);
      std::vector<std::string> labels;
      for (std::size_t i = 0; i < count; ++i)
        labels.push_back(i % 2 == 0 ? "a" : "b");
      const double scale = 0.5;

      auto loss_of = [&](const Matrix& u) {
        ContrastiveBatch b;
        for (std::size_t i = 0; i < u.rows(); ++i) {
          SpanEmbedding se;
          se.u.assign(u.row(i), u.row(i) + u.cols());
          b.embeddings.push_back(se);
          b.labels.push_back(labels[i]);
        }
        return contrastive_loss(b, scale);
      };

      ad::Tape tape;
      const auto leaf = tape.leaf(u0);
      const auto sims = tape.scale(tape.matmul_nt(leaf, leaf), scale);
      tape.backward(
          tape.contrastive_nll(sims, fewner::detail::anchor_sets(labels, nullptr)));
      for (std::size_t k = 0; k < u0.size(); ++k) {
        Matrix up = u0, dn = u0;
        up.data()[k] += eps;
        dn.data()[k] -= eps;
        const double fd = (loss_of(up) - loss_of(dn)) / (2 * eps);
        if (!detail::rel_close(fd, tape.grad(leaf).data()[k], 1e-4))
          c.fail("contrastive_loss gradient off at trial " + std::to_string(trial));
      }
    }
  });
}

/// score_spans, extract_candidates, knn_distribution, micro_f1 and
/// error_breakdown against their brute-force oracles, 200 instances each.
inline Check oracle_equivalence() {
  return detail::timed("oracle-equivalence", [](Check& c) {
    std::mt19937_64 rng(3003);

    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 1 + rng() % 6;
      const auto h_n = detail::random_matrix(n, 8, rng);
      const auto p = detail::random_biaffine(8, 6, rng);
      const auto scores = score_spans(h_n, p);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
          // scalar loop-nest oracle
          std::vector<double> hs(6, 0.0), he(6, 0.0), pi(6, 0.0), pj(6, 0.0);
          for (std::size_t b = 0; b < 6; ++b)
            for (std::size_t k = 0; k < 8; ++k) {
              hs[b] += h_n(i, k) * p.w_start(k, b);
              he[b] += h_n(j, k) * p.w_end(k, b);
              pi[b] += h_n(i, k) * p.w_pos(k, b);
              pj[b] += h_n(j, k) * p.w_pos(k, b);
            }
          for (auto& x : hs)
            if (x < 0) x *= p.leaky_slope;
          for (auto& x : he)
            if (x < 0) x *= p.leaky_slope;
          double cell = 0.0;
          for (std::size_t a = 0; a < 6; ++a)
            for (std::size_t b = 0; b < 6; ++b) cell += hs[a] * p.u(a, b) * he[b];
          const auto ri = rope_rotate(pi, static_cast<long>(i), p.rope_base);
          const auto rj = rope_rotate(pj, static_cast<long>(j), p.rope_base);
          for (std::size_t a = 0; a < 6; ++a) cell += ri[a] * rj[a];
          if (std::abs(cell - scores.r(i, j)) > 1e-5)
            c.fail("score_spans disagrees with the loop-nest oracle");
        }

      const int k = 1 + static_cast<int>(rng() % 3);
      const auto got = extract_candidates(scores, k);
      std::vector<SpanCandidate> oracle;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j)
          oracle.push_back({static_cast<int>(i), static_cast<int>(j), scores.r(i, j)});
      std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return a.end < b.end;
      });
      oracle.resize(std::min<std::size_t>(3 * static_cast<std::size_t>(k), oracle.size()));
      if (got.size() != oracle.size()) c.fail("extract_candidates size mismatch");
      for (std::size_t idx = 0; idx < got.size(); ++idx)
        if (got[idx].start != oracle[idx].start || got[idx].end != oracle[idx].end)
          c.fail("extract_candidates order mismatch");
    }

    const auto ts = make_type_set({"a", "b", "c"});
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t bank_size = 1 + rng() % 10;
      GoldenEntityBank bank;
      bank.embeddings = detail::random_matrix(bank_size, 5, rng);
      for (std::size_t i = 0; i < bank_size; ++i)
        bank.labels.push_back(ts.types[1 + rng() % 3]);
      SpanEmbedding u;
      u.u.resize(5);
      for (auto& x : u.u) x = std::normal_distribution<double>()(rng);
      const int k = 1 + static_cast<int>(rng() % (bank_size + 2));

      const auto dist = knn_distribution(u, bank, k, ts);
      // brute-force top-k + per-class sums
      std::vector<std::pair<double, std::size_t>> sims;
      for (std::size_t i = 0; i < bank_size; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < 5; ++j) s += bank.embeddings(i, j) * u.u[j];
        sims.push_back({s / std::sqrt(5.0), i});
      }
      std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      sims.resize(std::min<std::size_t>(static_cast<std::size_t>(k), sims.size()));
      double mn = sims.front().first;
      for (const auto& [s, i] : sims) mn = std::min(mn, s);
      const double shift = std::min(0.0, mn);
      std::vector<double> mass(ts.size(), 0.0);
      double total = 0.0;
      for (const auto& [s, i] : sims) {
        mass[static_cast<std::size_t>(ts.index_of(bank.labels[i]))] += s - shift;
        total += s - shift;
      }
      if (total > 0.0) {
        for (std::size_t cc = 0; cc < mass.size(); ++cc)
          if (std::abs(dist.probs[cc] - mass[cc] / total) > 1e-9)
            c.fail("knn_distribution disagrees with the brute-force oracle");
      }
    }

    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t sentences = 1 + rng() % 20;
      std::vector<SentenceGold> gold(sentences);
      std::vector<SentencePredictions> preds(sentences);
      std::set<std::tuple<std::int64_t, int, int, std::string>> used;
      for (std::size_t s = 0; s < sentences; ++s) {
        gold[s].sentence_id = static_cast<std::int64_t>(s);
        preds[s].sentence_id = static_cast<std::int64_t>(s);
        const std::size_t n_gold = rng() % 3;
        for (std::size_t g = 0; g < n_gold; ++g) {
          const int start = static_cast<int>(rng() % 6);
          const int end = start + static_cast<int>(rng() % 2);
          const std::string label = ts.types[1 + rng() % 3];
          bool clash = false;
          for (const auto& existing : gold[s].spans)
            if (existing.start == start && existing.end == end) clash = true;
          if (!clash) gold[s].spans.push_back({start, end, label});
        }
        const std::size_t n_pred = rng() % 3;
        for (std::size_t g = 0; g < n_pred; ++g) {
          const int start = static_cast<int>(rng() % 6);
          const int end = start + static_cast<int>(rng() % 2);
          const std::string label = ts.types[1 + rng() % 3];
          if (used.insert({static_cast<std::int64_t>(s), start, end, label}).second)
            preds[s].spans.push_back({{start, end}, label, 0.5});
        }
      }

      const auto res = micro_f1(preds, gold);
      // set-intersection oracle
      std::set<std::tuple<std::int64_t, int, int, std::string>> gset, pset;
      for (const auto& g : gold)
        for (const auto& sp : g.spans)
          gset.insert({g.sentence_id, sp.start, sp.end, sp.label});
      for (const auto& p : preds)
        for (const auto& sp : p.spans)
          pset.insert({p.sentence_id, sp.span.start, sp.span.end, sp.label});
      std::int64_t tp = 0;
      for (const auto& key : pset) tp += gset.count(key) ? 1 : 0;
      const auto fp = static_cast<std::int64_t>(pset.size()) - tp;
      const auto fn = static_cast<std::int64_t>(gset.size()) - tp;
      const double prec = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
      const double rec = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
      const double f1 = (prec + rec) > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      if (res.tp != tp || res.fp != fp || res.fn != fn) c.fail("micro_f1 count mismatch");
      if (std::abs(res.micro_f1 - f1) > 1e-12) c.fail("micro_f1 value mismatch");

      const auto breakdown = error_breakdown(preds, gold);
      std::int64_t fp_type = 0, fp_span = 0;
      for (const auto& p : preds)
        for (const auto& sp : p.spans) {
          if (gset.count({p.sentence_id, sp.span.start, sp.span.end, sp.label})) continue;
          bool boundary = false;
          for (const auto& g : gold)
            if (g.sentence_id == p.sentence_id)
              for (const auto& gs : g.spans)
                if (gs.start == sp.span.start && gs.end == sp.span.end) boundary = true;
          (boundary ? fp_type : fp_span) += 1;
        }
      if (breakdown.fp_type_count != fp_type || breakdown.fp_span_count != fp_span)
        c.fail("error_breakdown disagrees with the direct loop");
      if (fp_type + fp_span != fp) c.fail("FP-Span + FP-Type must equal total FPs");
    }
  });
}

/// Retrieval-mass contract, exhaustive over k in {1..bank_size+2}.
inline Check knn_contract() {
  return detail::timed("knn-contract", [](Check& c) {
    std::mt19937_64 rng(4004);
    const auto ts = make_type_set({"a", "b", "c", "d"});
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t bank_size = 1 + rng() % 10;
      GoldenEntityBank bank;
      bank.embeddings = detail::random_matrix(bank_size, 6, rng);
      for (std::size_t i = 0; i < bank_size; ++i)
        bank.labels.push_back(ts.types[1 + rng() % 4]);
      SpanEmbedding u;
      u.u.resize(6);
      for (auto& x : u.u) x = std::normal_distribution<double>()(rng);

      for (int k = 1; k <= static_cast<int>(bank_size) + 2; ++k) {
        const auto dist = knn_distribution(u, bank, k, ts);
        if (dist.probs[0] != 0.0) c.fail("none received kNN mass");
        double sum = 0.0;
        for (double p : dist.probs) {
          if (p < 0.0) c.fail("negative kNN probability");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) c.fail("kNN distribution does not sum to 1");

        // classes with no retrieved neighbor get exactly zero
        std::vector<std::pair<double, std::size_t>> sims;
        for (std::size_t i = 0; i < bank_size; ++i) {
          double s = 0.0;
          for (std::size_t j = 0; j < 6; ++j) s += bank.embeddings(i, j) * u.u[j];
          sims.push_back({s / std::sqrt(6.0), i});
        }
        std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
          if (a.first != b.first) return a.first > b.first;
          return a.second < b.second;
        });
        sims.resize(std::min<std::size_t>(static_cast<std::size_t>(k), sims.size()));
        std::set<std::string> retrieved;
        for (const auto& [s, i] : sims) retrieved.insert(bank.labels[i]);
        for (std::size_t cc = 1; cc < ts.size(); ++cc)
          if (!retrieved.count(ts.types[cc]) && dist.probs[cc] != 0.0)
            c.fail("non-retrieved class got non-zero mass");

        // clamping: any k beyond the bank behaves exactly like k = bank size
        if (k >= static_cast<int>(bank_size)) {
          const auto full = knn_distribution(u, bank, static_cast<int>(bank_size), ts);
          for (std::size_t cc = 0; cc < ts.size(); ++cc)
            if (dist.probs[cc] != full.probs[cc]) c.fail("k clamping changed the vote");
        }
      }
    }
  });
}

/// Rerank mixture semantics on constructed distributions, exact.
inline Check rerank_semantics() {
  return detail::timed("rerank-semantics", [](Check& c) {
    std::mt19937_64 rng(5005);
    for (int trial = 0; trial < 500; ++trial) {
      const std::size_t m = 3 + rng() % 3;
      ClassDistribution p_prompt, p_knn;
      p_prompt.probs.resize(m);
      p_knn.probs.resize(m);
      double sp = 0.0, sk = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        p_prompt.probs[i] = std::uniform_real_distribution<double>(0, 1)(rng);
        p_knn.probs[i] = i == 0 ? 0.0 : std::uniform_real_distribution<double>(0, 1)(rng);
        sp += p_prompt.probs[i];
        sk += p_knn.probs[i];
      }
      for (std::size_t i = 0; i < m; ++i) {
        p_prompt.probs[i] /= sp;
        if (sk > 0) p_knn.probs[i] /= sk;
      }
      const double score = std::normal_distribution<double>(0.0, 3.0)(rng);

      // gamma = 0: the pipeline score IS the alpha/beta mixture
      RerankWeights w0{0.0, 0.35, 0.65};
      const auto mixed = rerank(score, p_prompt, p_knn, w0);
      std::size_t best_mix = 0;
      for (std::size_t i = 1; i < m; ++i)
        if (mixed[i] > mixed[best_mix]) best_mix = i;
      std::size_t best_direct = 0;
      double best_val = -1.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double v = 0.35 * p_prompt.probs[i] + 0.65 * p_knn.probs[i];
        if (v > best_val) {
          best_val = v;
          best_direct = i;
        }
      }
      if (best_mix != best_direct) c.fail("gamma=0 argmax differs from the mixture");

      // the entity-only bonus must never reorder entity classes
      RerankWeights w{0.6, 0.2, 0.2};
      const auto with_bonus = rerank(score, p_prompt, p_knn, w);
      std::size_t e0 = 1, e1 = 1;
      RerankWeights wz{0.0, 0.2, 0.2};
      const auto no_bonus = rerank(score, p_prompt, p_knn, wz);
      for (std::size_t i = 2; i < m; ++i) {
        if (with_bonus[i] > with_bonus[e0]) e0 = i;
        if (no_bonus[i] > no_bonus[e1]) e1 = i;
      }
      if (e0 != e1) c.fail("sigmoid bonus reordered entity classes");
    }

    // the entity-vs-none margin is strictly monotone in the span score
    ClassDistribution p_prompt{{0.6, 0.4, 0.0}};
    ClassDistribution p_knn{{0.0, 1.0, 0.0}};
    RerankWeights w{0.5, 0.35, 0.15};
    double prev = 1e18;
    for (double score = 8.0; score >= -8.0; score -= 0.5) {
      const auto f = rerank(score, p_prompt, p_knn, w);
      const double margin = std::max(f[1], f[2]) - f[0];
      if (margin >= prev) c.fail("margin not strictly decreasing in span score");
      prev = margin;
    }
    // and a collapsing detector score flips a narrow margin to none
    ClassDistribution narrow{{0.52, 0.48, 0.0}};
    ClassDistribution zero{{0.0, 0.0, 0.0}};
    RerankWeights tight{0.5, 1.0, 0.0};
    const auto high = rerank(8.0, narrow, zero, tight);
    const auto low = rerank(-40.0, narrow, zero, tight);
    if (!(high[1] > high[0])) c.fail("strong detector score failed to keep the entity");
    if (!(low[0] > low[1])) c.fail("collapsed detector score failed to favor none");
  });
}

inline std::vector<Check> property_suite() {
  return {rope_constraint(), loss_gradients(), oracle_equivalence(), knn_contract(),
          rerank_semantics()};
}

inline int run_property_suite(std::ostream& os) {
  int failures = 0;
  for (const auto& check : property_suite()) {
    os << (check.pass ? "PASS" : "FAIL") << "  " << check.name << "  ("
       << std::fixed << std::setprecision(2) << check.seconds << "s)";
    if (!check.pass) os << "  " << check.detail;
    os << "\n";
    failures += check.pass ? 0 : 1;
  }
  return failures;
}

}  // namespace fewner::selftest
