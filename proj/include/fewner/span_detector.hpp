#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "fewner/autodiff.hpp"
#include "fewner/episode_data.hpp"
#include "fewner/errors.hpp"
#include "fewner/matrix.hpp"
#include "fewner/params.hpp"
#include "fewner/rope.hpp"

namespace fewner {

/// Projections and bilinear form of the position-aware biaffine scorer.
struct BiaffineParams {
  Matrix w_start;  ///< d x h
  Matrix w_end;    ///< d x h
  Matrix w_pos;    ///< d x h
  Matrix u;        ///< h x h
  int hidden = 0;
  double rope_base = 10000.0;
  double leaky_slope = 0.01;
};

/// n x n span scores; cells with start > end are masked (never candidates,
/// excluded from losses).
struct ScoreMatrix {
  Matrix r;

  std::size_t n() const { return r.rows(); }
  bool unmasked(std::size_t i, std::size_t j) const { return i <= j; }
};

struct ScoreOptions {
  bool use_rotary_term = true;  ///< false drops the positional dot-product term
  long pos_offset = 0;          ///< shifts all rotary positions (testing hook)
};

namespace detail {

inline void init_biaffine_params(ParamStore& store, const std::string& prefix, int d,
                                 int hidden, std::mt19937_64& rng) {
  if (hidden < 2 || hidden % 2 != 0)
    throw ConfigError("biaffine hidden width must be even and >= 2");
  auto normal = [&](std::size_t r, std::size_t c, double sd) {
    Matrix m(r, c);
    m.fill_normal(rng, sd);
    return m;
  };
  const auto dd = static_cast<std::size_t>(d);
  const auto hh = static_cast<std::size_t>(hidden);
  store.add(prefix + "Ws", normal(dd, hh, 0.05));
  store.add(prefix + "We", normal(dd, hh, 0.05));
  store.add(prefix + "Wp", normal(dd, hh, 0.05));
  store.add(prefix + "U", normal(hh, hh, 0.05));
}

}  // namespace detail

struct BiaffineNodes {
  ad::Tape::NodeId w_start;
  ad::Tape::NodeId w_end;
  ad::Tape::NodeId w_pos;
  ad::Tape::NodeId u;
};

inline BiaffineNodes bind_biaffine(ParamBinder& bind, const std::string& prefix) {
  return {bind(prefix + "Ws"), bind(prefix + "We"), bind(prefix + "Wp"),
          bind(prefix + "U")};
}

/// Tape forward of the scorer:
///   R(i,j) = LeakyReLU(h_i Ws)^T U LeakyReLU(h_j We)
///          + <rot_i(h_i Wp), rot_j(h_j Wp)>
/// computed densely for all (i,j); masking is applied by the consumers.
inline ad::Tape::NodeId score_graph(ad::Tape& tape, ad::Tape::NodeId h_n,
                                    const BiaffineNodes& p, double rope_base,
                                    double leaky_slope,
                                    const ScoreOptions& opts = {}) {
  auto hs = tape.leaky_relu(tape.matmul(h_n, p.w_start), leaky_slope);
  auto he = tape.leaky_relu(tape.matmul(h_n, p.w_end), leaky_slope);
  auto bilinear = tape.matmul_nt(tape.matmul(hs, p.u), he);
  if (!opts.use_rotary_term) return bilinear;
  auto proj = tape.matmul(h_n, p.w_pos);
  std::vector<long> positions(tape.value(h_n).rows());
  for (std::size_t i = 0; i < positions.size(); ++i)
    positions[i] = opts.pos_offset + static_cast<long>(i);
  auto rotated = tape.rope_rows(proj, std::move(positions), rope_base);
  return tape.add(bilinear, tape.matmul_nt(rotated, rotated));
}

/// Scores all word pairs of one sentence (rows of h_n are word vectors).
inline ScoreMatrix score_spans(const Matrix& h_n, const BiaffineParams& params,
                               const ScoreOptions& opts = {}) {
  if (h_n.rows() < 1) throw ContractError("score_spans needs at least one word");
  if (h_n.cols() != params.w_start.rows())
    throw ContractError("score_spans: embedding width does not match projections");
  ad::Tape tape;
  BiaffineNodes nodes{tape.leaf(params.w_start), tape.leaf(params.w_end),
                      tape.leaf(params.w_pos), tape.leaf(params.u)};
  const auto r =
      score_graph(tape, tape.leaf(h_n), nodes, params.rope_base, params.leaky_slope, opts);
  ScoreMatrix out;
  out.r = tape.value(r);
  return out;
}

namespace detail {

/// Splits the upper triangle into gold cells and their complement.
inline std::pair<std::vector<ad::Cell>, std::vector<ad::Cell>> split_cells(
    std::size_t n, const std::vector<SpanAnnotation>& gold) {
  std::vector<std::vector<bool>> is_gold(n, std::vector<bool>(n, false));
  std::vector<ad::Cell> pos;
  for (const auto& g : gold) {
    if (g.start < 0 || g.end < g.start || static_cast<std::size_t>(g.end) >= n)
      throw ContractError("gold span out of range for span loss");
    if (!is_gold[g.start][g.end]) {
      is_gold[g.start][g.end] = true;
      pos.push_back({g.start, g.end});
    }
  }
  std::vector<ad::Cell> neg;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      if (!is_gold[i][j]) neg.push_back({static_cast<int>(i), static_cast<int>(j)});
  return {std::move(pos), std::move(neg)};
}

}  // namespace detail

/// Class-imbalance span loss L_pos + L_neg over the unmasked cells.
inline double span_loss(const ScoreMatrix& scores,
                        const std::vector<SpanAnnotation>& gold) {
  auto [pos, neg] = detail::split_cells(scores.n(), gold);
  ad::Tape tape;
  const auto r = tape.leaf(scores.r);
  return tape.scalar(tape.span_imbalance_loss(r, std::move(pos), std::move(neg)));
}

/// Candidate span with its detector score.
struct SpanCandidate {
  int start = 0;
  int end = 0;
  double score = 0.0;
};

/// Top-3k cells of the upper triangle by score, descending; ties break by
/// (start, end) lexicographic order.
inline std::vector<SpanCandidate> extract_candidates(const ScoreMatrix& scores,
                                                     int k_shot) {
  if (k_shot < 1) throw ContractError("k_shot must be >= 1");
  const std::size_t n = scores.n();
  std::vector<SpanCandidate> cells;
  cells.reserve(n * (n + 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      cells.push_back({static_cast<int>(i), static_cast<int>(j), scores.r(i, j)});
  std::sort(cells.begin(), cells.end(), [](const SpanCandidate& a, const SpanCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
  });
  const std::size_t keep = std::min<std::size_t>(3 * static_cast<std::size_t>(k_shot),
                                                 cells.size());
  cells.resize(keep);
  return cells;
}

/// Every unmasked cell, in (start, end) order; the candidate source when the
/// biaffine detector is ablated away.
inline std::vector<SpanCandidate> all_spans(std::size_t n) {
  std::vector<SpanCandidate> cells;
  cells.reserve(n * (n + 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j)
      cells.push_back({static_cast<int>(i), static_cast<int>(j), 0.0});
  return cells;
}

}  // namespace fewner
