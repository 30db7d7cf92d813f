#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fewner/matrix.hpp"
#include "fewner/rope.hpp"

namespace fewner::ad {

/// (row, col) cell of a score matrix.
struct Cell {
  int i = 0;
  int j = 0;
};

/// Anchor of a contrastive batch: positives/negatives are row indices into
/// the pairwise similarity matrix.
struct AnchorSets {
  int anchor = 0;
  std::vector<int> positives;
  std::vector<int> negatives;
};

/// Reverse-mode autodiff over Matrix values. Nodes are identified by the
/// order of creation, which is also a valid topological order; backward()
/// walks the tape in reverse. One tape per forward pass.
class Tape {
 public:
  using NodeId = int;

  NodeId leaf(Matrix v) { return push(std::move(v), nullptr); }

  const Matrix& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Matrix& grad(NodeId id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  double scalar(NodeId id) const { return value(id)(0, 0); }

  NodeId add(NodeId a, NodeId b) {
    if (!value(a).same_shape(value(b))) throw std::invalid_argument("ad::add shape mismatch");
    Matrix out = value(a);
    out += value(b);
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      t.grad(a) += t.grad(self);
      t.grad(b) += t.grad(self);
    });
  }

  NodeId add_scalars(const std::vector<NodeId>& xs) {
    Matrix out(1, 1);
    for (NodeId x : xs) out(0, 0) += scalar(x);
    auto ids = xs;
    return push(std::move(out), [ids](Tape& t, NodeId self) {
      const double g = t.grad(self)(0, 0);
      for (NodeId x : ids) t.grad(x)(0, 0) += g;
    });
  }

  NodeId scale(NodeId a, double s) {
    Matrix out = value(a);
    out *= s;
    return push(std::move(out), [a, s](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t k = 0; k < g.size(); ++k) ga.data()[k] += s * g.data()[k];
    });
  }

  NodeId matmul(NodeId a, NodeId b) {
    Matrix out = fewner::matmul(value(a), value(b));
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      t.grad(a) += fewner::matmul_nt(t.grad(self), t.value(b));
      t.grad(b) += fewner::matmul_tn(t.value(a), t.grad(self));
    });
  }

  /// a * b^T
  NodeId matmul_nt(NodeId a, NodeId b) {
    Matrix out = fewner::matmul_nt(value(a), value(b));
    return push(std::move(out), [a, b](Tape& t, NodeId self) {
      t.grad(a) += fewner::matmul(t.grad(self), t.value(b));
      t.grad(b) += fewner::matmul_tn(t.grad(self), t.value(a));
    });
  }

  /// C * a for a constant matrix C (pooling, averaging).
  NodeId const_premul(Matrix c, NodeId a) {
    Matrix out = fewner::matmul(c, value(a));
    return push(std::move(out), [c = std::move(c), a](Tape& t, NodeId self) {
      t.grad(a) += fewner::matmul_tn(c, t.grad(self));
    });
  }

  NodeId slice_rows(NodeId a, std::size_t r0, std::size_t n) {
    const Matrix& v = value(a);
    if (r0 + n > v.rows()) throw std::invalid_argument("slice_rows out of range");
    Matrix out(n, v.cols());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) out(i, j) = v(r0 + i, j);
    return push(std::move(out), [a, r0, n](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(r0 + i, j) += g(i, j);
    });
  }

  NodeId slice_cols(NodeId a, std::size_t c0, std::size_t n) {
    const Matrix& v = value(a);
    if (c0 + n > v.cols()) throw std::invalid_argument("slice_cols out of range");
    Matrix out(v.rows(), n);
    for (std::size_t i = 0; i < v.rows(); ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) = v(i, c0 + j);
    return push(std::move(out), [a, c0, n](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) ga(i, c0 + j) += g(i, j);
    });
  }

  NodeId concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
    std::size_t rows = 0;
    const std::size_t cols = value(parts.front()).cols();
    for (NodeId p : parts) rows += value(p).rows();
    Matrix out(rows, cols);
    std::size_t r = 0;
    for (NodeId p : parts) {
      const Matrix& v = value(p);
      for (std::size_t i = 0; i < v.rows(); ++i, ++r)
        for (std::size_t j = 0; j < cols; ++j) out(r, j) = v(i, j);
    }
    auto ids = parts;
    return push(std::move(out), [ids](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      std::size_t r = 0;
      for (NodeId p : ids) {
        Matrix& gp = t.grad(p);
        for (std::size_t i = 0; i < gp.rows(); ++i, ++r)
          for (std::size_t j = 0; j < g.cols(); ++j) gp(i, j) += g(r, j);
      }
    });
  }

  NodeId concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols of nothing");
    const std::size_t rows = value(parts.front()).rows();
    std::size_t cols = 0;
    for (NodeId p : parts) cols += value(p).cols();
    Matrix out(rows, cols);
    std::size_t c = 0;
    for (NodeId p : parts) {
      const Matrix& v = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < v.cols(); ++j) out(i, c + j) = v(i, j);
      c += v.cols();
    }
    auto ids = parts;
    return push(std::move(out), [ids](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      std::size_t c = 0;
      for (NodeId p : ids) {
        Matrix& gp = t.grad(p);
        for (std::size_t i = 0; i < gp.rows(); ++i)
          for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, c + j);
        c += gp.cols();
      }
    });
  }

  /// a + v broadcast over rows; v is 1 x cols.
  NodeId add_row_vec(NodeId a, NodeId v) {
    const Matrix& av = value(a);
    const Matrix& vv = value(v);
    if (vv.rows() != 1 || vv.cols() != av.cols())
      throw std::invalid_argument("add_row_vec shape mismatch");
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += vv(0, j);
    return push(std::move(out), [a, v](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      t.grad(a) += g;
      Matrix& gv = t.grad(v);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gv(0, j) += g(i, j);
    });
  }

  /// a ∘ v broadcast over rows; v is 1 x cols.
  NodeId mul_row_vec(NodeId a, NodeId v) {
    const Matrix& av = value(a);
    const Matrix& vv = value(v);
    if (vv.rows() != 1 || vv.cols() != av.cols())
      throw std::invalid_argument("mul_row_vec shape mismatch");
    Matrix out = av;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= vv(0, j);
    return push(std::move(out), [a, v](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      const Matrix& av2 = t.value(a);
      const Matrix& vv2 = t.value(v);
      Matrix& ga = t.grad(a);
      Matrix& gv = t.grad(v);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) {
          ga(i, j) += g(i, j) * vv2(0, j);
          gv(0, j) += g(i, j) * av2(i, j);
        }
    });
  }

  NodeId leaky_relu(NodeId a, double slope) {
    Matrix out = value(a);
    for (std::size_t k = 0; k < out.size(); ++k)
      if (out.data()[k] < 0.0) out.data()[k] *= slope;
    return push(std::move(out), [a, slope](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      const Matrix& x = t.value(a);
      Matrix& ga = t.grad(a);
      for (std::size_t k = 0; k < g.size(); ++k)
        ga.data()[k] += g.data()[k] * (x.data()[k] < 0.0 ? slope : 1.0);
    });
  }

  NodeId relu(NodeId a) { return leaky_relu(a, 0.0); }

  /// Per-row standardization (x - mean) / sqrt(var + eps); affine handled
  /// separately via mul_row_vec/add_row_vec.
  NodeId layer_norm_rows(NodeId a, double eps = 1e-5) {
    const Matrix& x = value(a);
    const std::size_t n = x.cols();
    Matrix out(x.rows(), n);
    std::vector<double> inv_std(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += x(i, j);
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = x(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[i] = is;
      for (std::size_t j = 0; j < n; ++j) out(i, j) = (x(i, j) - mu) * is;
    }
    Matrix y = out;
    return push(std::move(out), [a, y = std::move(y), inv_std = std::move(inv_std)](
                                    Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      const std::size_t n = g.cols();
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double gsum = 0.0, gysum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          gsum += g(i, j);
          gysum += g(i, j) * y(i, j);
        }
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          ga(i, j) += inv_std[i] * (g(i, j) - gsum * inv_n - y(i, j) * gysum * inv_n);
      }
    });
  }

  NodeId softmax_rows(NodeId a) {
    const Matrix& x = value(a);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double mx = x(i, 0);
      for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
      double s = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) s += std::exp(x(i, j) - mx);
      for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j) - mx) / s;
    }
    Matrix y = out;
    return push(std::move(out), [a, y = std::move(y)](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        double dotgy = 0.0;
        for (std::size_t j = 0; j < g.cols(); ++j) dotgy += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < g.cols(); ++j)
          ga(i, j) += y(i, j) * (g(i, j) - dotgy);
      }
    });
  }

  /// Inverted dropout; identity when rate == 0.
  NodeId dropout(NodeId a, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return a;
    if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
    const Matrix& x = value(a);
    Matrix mask(x.rows(), x.cols());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 - rate;
    for (std::size_t k = 0; k < mask.size(); ++k)
      mask.data()[k] = (u(rng) < keep) ? 1.0 / keep : 0.0;
    Matrix out = x;
    for (std::size_t k = 0; k < out.size(); ++k) out.data()[k] *= mask.data()[k];
    return push(std::move(out), [a, mask = std::move(mask)](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& ga = t.grad(a);
      for (std::size_t k = 0; k < g.size(); ++k)
        ga.data()[k] += g.data()[k] * mask.data()[k];
    });
  }

  /// Rotary transform applied row-wise: row i rotated by angle positions[i]·θ_t.
  NodeId rope_rows(NodeId a, std::vector<long> positions, double base) {
    const Matrix& x = value(a);
    if (positions.size() != x.rows()) throw std::invalid_argument("rope_rows position count");
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      rope_rotate_into(x.row(i), x.cols(), positions[i], base, out.row(i));
    return push(std::move(out),
                [a, positions = std::move(positions), base](Tape& t, NodeId self) {
                  const Matrix& g = t.grad(self);
                  Matrix& ga = t.grad(a);
                  Matrix tmp(1, g.cols());
                  for (std::size_t i = 0; i < g.rows(); ++i) {
                    // rotation is orthonormal: transpose == rotate by -pos
                    rope_rotate_into(g.row(i), g.cols(), -positions[i], base, tmp.row(0));
                    for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += tmp(0, j);
                  }
                });
  }

  /// Row gather from an embedding table; backward scatter-adds.
  NodeId gather_rows(NodeId table, std::vector<int> ids) {
    const Matrix& tb = value(table);
    Matrix out(ids.size(), tb.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tb.rows())
        throw std::out_of_range("gather_rows id out of range");
      for (std::size_t j = 0; j < tb.cols(); ++j) out(i, j) = tb(ids[i], j);
    }
    return push(std::move(out), [table, ids = std::move(ids)](Tape& t, NodeId self) {
      const Matrix& g = t.grad(self);
      Matrix& gt = t.grad(table);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gt(ids[i], j) += g(i, j);
    });
  }

  /// Class-imbalance span loss over a score matrix:
  ///   log(1 + Σ_pos e^{-r}) + log(1 + Σ_neg e^{r}),
  /// both terms via log-sum-exp with the implicit e^0 = 1 term.
  NodeId span_imbalance_loss(NodeId r, std::vector<Cell> pos, std::vector<Cell> neg) {
    const Matrix& rv = value(r);
    auto lse_with_zero = [&](const std::vector<Cell>& cells, double sign) {
      std::vector<double> xs;
      xs.reserve(cells.size() + 1);
      xs.push_back(0.0);
      for (const Cell& c : cells) xs.push_back(sign * rv(c.i, c.j));
      return log_sum_exp(xs);
    };
    const double l_pos = lse_with_zero(pos, -1.0);
    const double l_neg = lse_with_zero(neg, +1.0);
    Matrix out(1, 1);
    out(0, 0) = l_pos + l_neg;
    return push(std::move(out), [r, pos = std::move(pos), neg = std::move(neg), l_pos,
                                 l_neg](Tape& t, NodeId self) {
      const double g = t.grad(self)(0, 0);
      const Matrix& rv2 = t.value(r);
      Matrix& gr = t.grad(r);
      for (const Cell& c : pos) gr(c.i, c.j) -= g * std::exp(-rv2(c.i, c.j) - l_pos);
      for (const Cell& c : neg) gr(c.i, c.j) += g * std::exp(rv2(c.i, c.j) - l_neg);
    });
  }

  /// Mean negative log-likelihood of softmax(logits) rows at the target ids.
  NodeId softmax_nll(NodeId logits, std::vector<int> targets) {
    const Matrix& z = value(logits);
    if (targets.size() != z.rows()) throw std::invalid_argument("softmax_nll target count");
    if (z.rows() == 0) throw std::invalid_argument("softmax_nll over zero rows");
    Matrix probs(z.rows(), z.cols());
    double loss = 0.0;
    for (std::size_t i = 0; i < z.rows(); ++i) {
      double mx = z(i, 0);
      for (std::size_t j = 1; j < z.cols(); ++j) mx = std::max(mx, z(i, j));
      double s = 0.0;
      for (std::size_t j = 0; j < z.cols(); ++j) s += std::exp(z(i, j) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < z.cols(); ++j) probs(i, j) = std::exp(z(i, j) - lse);
      loss += lse - z(i, static_cast<std::size_t>(targets[i]));
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(z.rows());
    return push(std::move(out), [logits, targets = std::move(targets),
                                 probs = std::move(probs)](Tape& t, NodeId self) {
      const double g = t.grad(self)(0, 0) / static_cast<double>(probs.rows());
      Matrix& gz = t.grad(logits);
      for (std::size_t i = 0; i < probs.rows(); ++i) {
        for (std::size_t j = 0; j < probs.cols(); ++j) gz(i, j) += g * probs(i, j);
        gz(i, static_cast<std::size_t>(targets[i])) -= g;
      }
    });
  }

  /// Span-based contrastive loss over a pairwise similarity matrix:
  ///   Σ_anchors -log( Σ_pos e^{d} / Σ_neg e^{d} )
  /// Anchors must arrive pre-filtered (>= 1 positive and negative each).
  NodeId contrastive_nll(NodeId sims, std::vector<AnchorSets> anchors) {
    const Matrix& d = value(sims);
    double loss = 0.0;
    std::vector<double> lse_pos(anchors.size()), lse_neg(anchors.size());
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const AnchorSets& an = anchors[a];
      if (an.positives.empty() || an.negatives.empty())
        throw std::invalid_argument("contrastive anchor without both sets");
      std::vector<double> ps, ns;
      for (int j : an.positives) ps.push_back(d(an.anchor, j));
      for (int k : an.negatives) ns.push_back(d(an.anchor, k));
      lse_pos[a] = log_sum_exp(ps);
      lse_neg[a] = log_sum_exp(ns);
      loss += -lse_pos[a] + lse_neg[a];
    }
    Matrix out(1, 1);
    out(0, 0) = loss;
    return push(std::move(out), [sims, anchors = std::move(anchors),
                                 lse_pos = std::move(lse_pos),
                                 lse_neg = std::move(lse_neg)](Tape& t, NodeId self) {
      const double g = t.grad(self)(0, 0);
      const Matrix& d2 = t.value(sims);
      Matrix& gd = t.grad(sims);
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        const AnchorSets& an = anchors[a];
        for (int j : an.positives)
          gd(an.anchor, j) -= g * std::exp(d2(an.anchor, j) - lse_pos[a]);
        for (int k : an.negatives)
          gd(an.anchor, k) += g * std::exp(d2(an.anchor, k) - lse_neg[a]);
      }
    });
  }

  void backward(NodeId loss) {
    if (value(loss).rows() != 1 || value(loss).cols() != 1)
      throw std::invalid_argument("backward target must be scalar");
    grad(loss)(0, 0) = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (node.backward) node.backward(*this, id);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&, NodeId)> backward;
  };

  NodeId push(Matrix v, std::function<void(Tape&, NodeId)> b) {
    Node n;
    n.grad = Matrix::zeros(v.rows(), v.cols());
    n.value = std::move(v);
    n.backward = std::move(b);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

}  // namespace fewner::ad
