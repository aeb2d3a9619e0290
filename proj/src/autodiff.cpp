#include "qp/autodiff.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>

#include "qp/error.hpp"

namespace qp {

// ---------------------------------------------------------------------------
// RowMask
// ---------------------------------------------------------------------------

RowMask RowMask::causal(int n) {
  RowMask m{n, n, std::vector<uint8_t>(static_cast<size_t>(n) * n, 0)};
  for (int r = 0; r < n; ++r)
    for (int c = 0; c <= r; ++c) m.set(r, c, 1);
  return m;
}

RowMask RowMask::keys(int rows, const std::vector<uint8_t>& valid) {
  RowMask m{rows, static_cast<int>(valid.size()), {}};
  m.allow.resize(static_cast<size_t>(rows) * valid.size());
  for (int r = 0; r < rows; ++r)
    for (size_t c = 0; c < valid.size(); ++c) m.allow[static_cast<size_t>(r) * valid.size() + c] = valid[c] ? 1 : 0;
  return m;
}

RowMask RowMask::combined(const RowMask& o) const {
  if (rows != o.rows || cols != o.cols) throw ShapeError("mask combine: shape mismatch");
  RowMask m{rows, cols, allow};
  for (size_t i = 0; i < allow.size(); ++i) m.allow[i] = allow[i] && o.allow[i];
  return m;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw ContractError("Var does not belong to this tape");
  return nodes_[static_cast<size_t>(v.id)];
}

Tape::Node& Tape::node(Var v) {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw ContractError("Var does not belong to this tape");
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  auto it = param_vars_.find(&p);
  if (it != param_vars_.end()) return Var{it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  Parameter* pp = &p;
  if (p.trainable) {
    n.backward = [pp](Tape& t, int self) {
      vaccumulate(pp->grad, t.nodes_[static_cast<size_t>(self)].grad);
    };
  }
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  param_vars_.emplace(pp, id);
  return Var{id};
}

Var Tape::record(Tensor value, std::span<const Var> parents, std::function<void(Tape&, int)> backward) {
  Node n;
  n.value = std::move(value);
  for (Var p : parents)
    if (node(p).requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Var v) const {
  static const Tensor empty;
  const Node& n = node(v);
  return n.grad.data.empty() ? empty : n.grad;
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = node(v);
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& delta) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
  vaccumulate(n.grad, delta);
}

void Tape::backward(Var loss) {
  Node& L = node(loss);
  if (L.value.size() != 1) throw ContractError("backward: loss must be scalar, got " + L.value.shape_str());
  if (!L.requires_grad) return;
  grad_slot(loss).data[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.backward && !n.grad.data.empty()) n.backward(*this, i);
  }
}

void Tape::clear() {
  nodes_.clear();
  param_vars_.clear();
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) throw ShapeError("add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  Tensor out = A;
  vaccumulate(out, B);
  std::array<Var, 2> ps{a, b};
  return t.record(std::move(out), ps, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var add_rowvec(Tape& t, Var x, Var b) {
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(b);
  int rows = X.rows(), cols = X.cols();
  if (B.size() != static_cast<size_t>(cols))
    throw ShapeError("add_rowvec: vector size " + B.shape_str() + " vs row width " + X.shape_str());
  Tensor out = X;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) += B[static_cast<size_t>(c)];
  std::array<Var, 2> ps{x, b};
  return t.record(std::move(out), ps, [x, b, rows, cols](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    t.accumulate(x, g);
    if (t.requires_grad(b)) {
      Tensor db = Tensor::zeros(t.value(b).shape);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) db[static_cast<size_t>(c)] += g.at(r, c);
      t.accumulate(b, db);
    }
  });
}

Var sub(Tape& t, Var a, Var b) { return add(t, a, scale(t, b, -1.0)); }

Var mul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (!A.same_shape(B)) throw ShapeError("mul: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  Tensor out = A;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  std::array<Var, 2> ps{a, b};
  return t.record(std::move(out), ps, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    if (t.requires_grad(a)) {
      Tensor da = g;
      const Tensor& B = t.value(b);
      for (size_t i = 0; i < da.size(); ++i) da[i] *= B[i];
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      Tensor db = g;
      const Tensor& A = t.value(a);
      for (size_t i = 0; i < db.size(); ++i) db[i] *= A[i];
      t.accumulate(b, db);
    }
  });
}

Var scale(Tape& t, Var a, double c) {
  Tensor out = t.value(a);
  for (double& v : out.data) v *= c;
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, c](Tape& t, int self) {
    Tensor g = t.grad(Var{self});
    for (double& v : g.data) v *= c;
    t.accumulate(a, g);
  });
}

Var neg(Tape& t, Var a) { return scale(t, a, -1.0); }

Var mul_scalarvar(Tape& t, Var x, Var s) {
  const Tensor& S = t.value(s);
  if (!S.is_scalar()) throw ShapeError("mul_scalarvar: scale must be scalar, got " + S.shape_str());
  double sv = S.data[0];
  Tensor out = t.value(x);
  for (double& v : out.data) v *= sv;
  std::array<Var, 2> ps{x, s};
  return t.record(std::move(out), ps, [x, s, sv](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    if (t.requires_grad(x)) {
      Tensor dx = g;
      for (double& v : dx.data) v *= sv;
      t.accumulate(x, dx);
    }
    if (t.requires_grad(s)) {
      const Tensor& X = t.value(x);
      double ds = 0.0;
      for (size_t i = 0; i < X.size(); ++i) ds += X[i] * g[i];
      t.accumulate(s, Tensor::scalar(ds));
    }
  });
}

Var exp_elem(Tape& t, Var a) {
  Tensor out = t.value(a);
  for (double& v : out.data) v = std::exp(v);
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a](Tape& t, int self) {
    Tensor g = t.grad(Var{self});
    const Tensor& y = t.value(Var{self});
    for (size_t i = 0; i < g.size(); ++i) g[i] *= y[i];
    t.accumulate(a, g);
  });
}

Var matmul(Tape& t, Var a, Var b) {
  Tensor out = vmatmul(t.value(a), t.value(b));
  std::array<Var, 2> ps{a, b};
  return t.record(std::move(out), ps, [a, b](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    if (t.requires_grad(a)) t.accumulate(a, vmatmul_nt(g, t.value(b)));
    if (t.requires_grad(b)) t.accumulate(b, vmatmul_tn(t.value(a), g));
  });
}

Var transpose(Tape& t, Var a) {
  Tensor out = vtranspose(t.value(a));
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a](Tape& t, int self) {
    t.accumulate(a, vtranspose(t.grad(Var{self})));
  });
}

Var gelu(Tape& t, Var a) {
  static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  const Tensor& X = t.value(a);
  Tensor out = X;
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    const Tensor& X = t.value(a);
    Tensor dx = g;
    for (size_t i = 0; i < dx.size(); ++i) {
      double x = X[i];
      double d = 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * std::exp(-0.5 * x * x) * inv_sqrt2pi;
      dx[i] *= d;
    }
    t.accumulate(a, dx);
  });
}

// ---------------------------------------------------------------------------
// Softmax / normalization / losses
// ---------------------------------------------------------------------------

namespace {

// Shared forward kernel. Masked-out entries are exactly zero; a fully masked
// row is a contract violation.
Tensor softmax_rows_value(const Tensor& X, const RowMask* mask) {
  int rows = X.rows(), cols = X.cols();
  if (mask && (mask->rows != rows || mask->cols != cols))
    throw ShapeError("softmax: mask shape mismatch");
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c)
      if (!mask || mask->at(r, c)) mx = std::max(mx, X.at(r, c));
    if (mx == -std::numeric_limits<double>::infinity())
      throw ContractError("softmax: row " + std::to_string(r) + " is fully masked");
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      if (!mask || mask->at(r, c)) {
        double e = std::exp(X.at(r, c) - mx);
        out.at(r, c) = e;
        sum += e;
      }
    }
    for (int c = 0; c < cols; ++c) out.at(r, c) /= sum;
  }
  return out;
}

void softmax_rows_backward(const Tensor& y, const Tensor& g, Tensor& dx) {
  int rows = y.rows(), cols = y.cols();
  for (int r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (int c = 0; c < cols; ++c) dot += g.at(r, c) * y.at(r, c);
    for (int c = 0; c < cols; ++c) dx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
  }
}

}  // namespace

Var softmax_rows(Tape& t, Var x, const RowMask* mask) {
  Tensor out = softmax_rows_value(t.value(x), mask);
  std::array<Var, 1> ps{x};
  return t.record(std::move(out), ps, [x](Tape& t, int self) {
    const Tensor& y = t.value(Var{self});
    const Tensor& g = t.grad(Var{self});
    Tensor dx = Tensor::zeros(y.shape);
    softmax_rows_backward(y, g, dx);
    t.accumulate(x, dx);
  });
}

Var softmax(Tape& t, Var x, int axis) {
  if (axis == 1 || axis == -1) return softmax_rows(t, x, nullptr);
  if (axis == 0) return transpose(t, softmax_rows(t, transpose(t, x), nullptr));
  throw ContractError("softmax: axis must be 0 or 1");
}

Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be > 0");
  const Tensor& X = t.value(x);
  const Tensor& G = t.value(gain);
  const Tensor& B = t.value(bias);
  int rows = X.rows(), cols = X.cols();
  if (G.size() != static_cast<size_t>(cols) || B.size() != static_cast<size_t>(cols))
    throw ShapeError("layer_norm: gain/bias width mismatch");
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += X.at(r, c);
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      double d = X.at(r, c) - mu;
      var += d * d;
    }
    var /= cols;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      out.at(r, c) = (X.at(r, c) - mu) * inv * G[static_cast<size_t>(c)] + B[static_cast<size_t>(c)];
  }
  std::array<Var, 3> ps{x, gain, bias};
  return t.record(std::move(out), ps, [x, gain, bias, eps](Tape& t, int self) {
    const Tensor& X = t.value(x);
    const Tensor& G = t.value(gain);
    const Tensor& g = t.grad(Var{self});
    int rows = X.rows(), cols = X.cols();
    Tensor dx = Tensor::zeros(X.shape);
    Tensor dg = Tensor::zeros(t.value(gain).shape);
    Tensor db = Tensor::zeros(t.value(bias).shape);
    for (int r = 0; r < rows; ++r) {
      double mu = 0.0;
      for (int c = 0; c < cols; ++c) mu += X.at(r, c);
      mu /= cols;
      double var = 0.0;
      for (int c = 0; c < cols; ++c) {
        double d = X.at(r, c) - mu;
        var += d * d;
      }
      var /= cols;
      double inv = 1.0 / std::sqrt(var + eps);
      // accumulate in two reductions, then distribute
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = 0; c < cols; ++c) {
        double xhat = (X.at(r, c) - mu) * inv;
        double dxhat = g.at(r, c) * G[static_cast<size_t>(c)];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dg[static_cast<size_t>(c)] += g.at(r, c) * xhat;
        db[static_cast<size_t>(c)] += g.at(r, c);
      }
      for (int c = 0; c < cols; ++c) {
        double xhat = (X.at(r, c) - mu) * inv;
        double dxhat = g.at(r, c) * G[static_cast<size_t>(c)];
        dx.at(r, c) += inv * (dxhat - sum_dxhat / cols - xhat * sum_dxhat_xhat / cols);
      }
    }
    t.accumulate(x, dx);
    t.accumulate(gain, dg);
    t.accumulate(bias, db);
  });
}

std::vector<double> cross_entropy_per_row(const Tensor& logits, const std::vector<int>& targets) {
  int rows = logits.rows(), cols = logits.cols();
  if (static_cast<int>(targets.size()) != rows)
    throw ShapeError("cross_entropy: target count " + std::to_string(targets.size()) + " vs rows " + std::to_string(rows));
  std::vector<double> out(targets.size());
  for (int r = 0; r < rows; ++r) {
    int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= cols)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(tgt) + " out of range for vocab " + std::to_string(cols));
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) mx = std::max(mx, logits.at(r, c));
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) sum += std::exp(logits.at(r, c) - mx);
    out[static_cast<size_t>(r)] = mx + std::log(sum) - logits.at(r, tgt);
  }
  return out;
}

Var cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                  const std::vector<uint8_t>* score_mask) {
  const Tensor& L = t.value(logits);
  int rows = L.rows();
  if (score_mask && static_cast<int>(score_mask->size()) != rows)
    throw ShapeError("cross_entropy: mask length mismatch");
  std::vector<double> per_row = cross_entropy_per_row(L, targets);
  int n_scored = 0;
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    if (score_mask && !(*score_mask)[static_cast<size_t>(r)]) continue;
    total += per_row[static_cast<size_t>(r)];
    ++n_scored;
  }
  if (n_scored == 0) throw ContractError("cross_entropy: no scored positions");
  Tensor out = Tensor::scalar(total / n_scored);
  std::vector<int> tg = targets;
  std::vector<uint8_t> mask = score_mask ? *score_mask : std::vector<uint8_t>(static_cast<size_t>(rows), 1);
  std::array<Var, 1> ps{logits};
  return t.record(std::move(out), ps, [logits, tg, mask, n_scored](Tape& t, int self) {
    double g = t.grad(Var{self}).data[0] / n_scored;
    const Tensor& L = t.value(logits);
    int rows = L.rows(), cols = L.cols();
    Tensor dl = Tensor::zeros(L.shape);
    for (int r = 0; r < rows; ++r) {
      if (!mask[static_cast<size_t>(r)]) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < cols; ++c) mx = std::max(mx, L.at(r, c));
      double sum = 0.0;
      for (int c = 0; c < cols; ++c) sum += std::exp(L.at(r, c) - mx);
      for (int c = 0; c < cols; ++c) dl.at(r, c) = std::exp(L.at(r, c) - mx) / sum * g;
      dl.at(r, tg[static_cast<size_t>(r)]) -= g;
    }
    t.accumulate(logits, dl);
  });
}

// ---------------------------------------------------------------------------
// Gather / concat / slice / reductions
// ---------------------------------------------------------------------------

Var embedding_rows(Tape& t, Var table, const std::vector<int>& ids) {
  const Tensor& T = t.value(table);
  int V = T.rows(), d = T.cols();
  Tensor out({static_cast<int>(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding: id " + std::to_string(id) + " out of range for table rows " + std::to_string(V));
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = T.at(id, c);
  }
  std::vector<int> ids_copy = ids;
  std::array<Var, 1> ps{table};
  return t.record(std::move(out), ps, [table, ids_copy](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor dT = Tensor::zeros(t.value(table).shape);
    int d = dT.cols();
    for (size_t i = 0; i < ids_copy.size(); ++i)
      for (int c = 0; c < d; ++c) dT.at(ids_copy[i], c) += g.at(static_cast<int>(i), c);
    t.accumulate(table, dT);
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty input");
  int cols = t.value(parts[0]).cols();
  int rows = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    if (P.cols() != cols) throw ShapeError("concat_rows: width mismatch " + P.shape_str());
    rows += P.rows();
  }
  Tensor out({rows, cols});
  int r0 = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<size_t>(r0) * cols);
    r0 += P.rows();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return t.record(std::move(out), parents, [parents](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    int cols = g.cols();
    int r0 = 0;
    for (Var p : parents) {
      const Tensor& P = t.value(p);
      if (t.requires_grad(p)) {
        Tensor dp({P.rows(), cols});
        std::copy(g.data.begin() + static_cast<size_t>(r0) * cols,
                  g.data.begin() + static_cast<size_t>(r0 + P.rows()) * cols, dp.data.begin());
        t.accumulate(p, dp);
      }
      r0 += P.rows();
    }
  });
}

Var concat_cols(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols: empty input");
  int rows = t.value(parts[0]).rows();
  int cols = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    if (P.rows() != rows) throw ShapeError("concat_cols: height mismatch " + P.shape_str());
    cols += P.cols();
  }
  Tensor out({rows, cols});
  int c0 = 0;
  for (Var p : parts) {
    const Tensor& P = t.value(p);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < P.cols(); ++c) out.at(r, c0 + c) = P.at(r, c);
    c0 += P.cols();
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return t.record(std::move(out), parents, [parents, rows](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    int c0 = 0;
    for (Var p : parents) {
      const Tensor& P = t.value(p);
      if (t.requires_grad(p)) {
        Tensor dp({rows, P.cols()});
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < P.cols(); ++c) dp.at(r, c) = g.at(r, c0 + c);
        t.accumulate(p, dp);
      }
      c0 += P.cols();
    }
  });
}

Var slice_rows(Tape& t, Var a, int r0, int r1) {
  const Tensor& A = t.value(a);
  if (r0 < 0 || r1 > A.rows() || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + ", " + std::to_string(r1) + ") for " + A.shape_str());
  int cols = A.cols();
  Tensor out({r1 - r0, cols});
  std::copy(A.data.begin() + static_cast<size_t>(r0) * cols, A.data.begin() + static_cast<size_t>(r1) * cols,
            out.data.begin());
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, r0, r1](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor da = Tensor::zeros(t.value(a).shape);
    int cols = da.cols();
    std::copy(g.data.begin(), g.data.end(), da.data.begin() + static_cast<size_t>(r0) * cols);
    t.accumulate(a, da);
  });
}

Var slice_cols(Tape& t, Var a, int c0, int c1) {
  const Tensor& A = t.value(a);
  if (c0 < 0 || c1 > A.cols() || c0 >= c1)
    throw ShapeError("slice_cols: bad range [" + std::to_string(c0) + ", " + std::to_string(c1) + ") for " + A.shape_str());
  int rows = A.rows();
  Tensor out({rows, c1 - c0});
  for (int r = 0; r < rows; ++r)
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = A.at(r, c);
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, c0, c1](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor da = Tensor::zeros(t.value(a).shape);
    for (int r = 0; r < g.rows(); ++r)
      for (int c = c0; c < c1; ++c) da.at(r, c) = g.at(r, c - c0);
    t.accumulate(a, da);
  });
}

Var mean_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  double s = 0.0;
  for (double v : A.data) s += v;
  size_t n = A.size();
  std::array<Var, 1> ps{a};
  return t.record(Tensor::scalar(s / n), ps, [a, n](Tape& t, int self) {
    double g = t.grad(Var{self}).data[0] / n;
    Tensor da = Tensor::full(t.value(a).shape, g);
    t.accumulate(a, da);
  });
}

Var sum_all(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  double s = 0.0;
  for (double v : A.data) s += v;
  std::array<Var, 1> ps{a};
  return t.record(Tensor::scalar(s), ps, [a](Tape& t, int self) {
    double g = t.grad(Var{self}).data[0];
    Tensor da = Tensor::full(t.value(a).shape, g);
    t.accumulate(a, da);
  });
}

Var mean_rows(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  int rows = A.rows(), cols = A.cols();
  Tensor out({1, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(0, c) += A.at(r, c);
  for (int c = 0; c < cols; ++c) out.at(0, c) /= rows;
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, rows, cols](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor da({rows, cols});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) da.at(r, c) = g.at(0, c) / rows;
    t.accumulate(a, da);
  });
}

Var normalize_rows(Tape& t, Var a, double eps) {
  const Tensor& A = t.value(a);
  int rows = A.rows(), cols = A.cols();
  Tensor out({rows, cols});
  std::vector<double> norms(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += A.at(r, c) * A.at(r, c);
    double n = std::sqrt(s + eps);
    norms[static_cast<size_t>(r)] = n;
    for (int c = 0; c < cols; ++c) out.at(r, c) = A.at(r, c) / n;
  }
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, norms](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    const Tensor& A = t.value(a);
    int rows = A.rows(), cols = A.cols();
    Tensor da({rows, cols});
    for (int r = 0; r < rows; ++r) {
      double n = norms[static_cast<size_t>(r)];
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += g.at(r, c) * A.at(r, c);
      for (int c = 0; c < cols; ++c) da.at(r, c) = g.at(r, c) / n - A.at(r, c) * dot / (n * n * n);
    }
    t.accumulate(a, da);
  });
}

Var colmax(Tape& t, Var a) {
  const Tensor& A = t.value(a);
  int rows = A.rows(), cols = A.cols();
  if (rows == 0) throw ContractError("colmax: empty input");
  Tensor out({1, cols});
  std::vector<int> arg(static_cast<size_t>(cols), 0);
  for (int c = 0; c < cols; ++c) {
    double best = A.at(0, c);
    int bi = 0;
    for (int r = 1; r < rows; ++r) {
      if (A.at(r, c) > best) {
        best = A.at(r, c);
        bi = r;
      }
    }
    out.at(0, c) = best;
    arg[static_cast<size_t>(c)] = bi;
  }
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, arg](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor da = Tensor::zeros(t.value(a).shape);
    for (int c = 0; c < da.cols(); ++c) da.at(arg[static_cast<size_t>(c)], c) = g.at(0, c);
    t.accumulate(a, da);
  });
}

Var dropout(Tape& t, Var a, double rate, Rng& rng, bool enabled) {
  if (!enabled || rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const Tensor& A = t.value(a);
  double keep = 1.0 - rate;
  std::vector<uint8_t> mask(A.size());
  Tensor out = A;
  for (size_t i = 0; i < A.size(); ++i) {
    mask[i] = rng.bernoulli(keep) ? 1 : 0;
    out[i] = mask[i] ? A[i] / keep : 0.0;
  }
  std::array<Var, 1> ps{a};
  return t.record(std::move(out), ps, [a, mask, keep](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    Tensor da = Tensor::zeros(t.value(a).shape);
    for (size_t i = 0; i < da.size(); ++i)
      if (mask[i]) da[i] = g[i] / keep;
    t.accumulate(a, da);
  });
}

// ---------------------------------------------------------------------------
// Fused multi-head attention
// ---------------------------------------------------------------------------

namespace {
Tensor head_slice(const Tensor& x, int h, int dh) {
  Tensor out({x.rows(), dh});
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < dh; ++c) out.at(r, c) = x.at(r, h * dh + c);
  return out;
}

void head_write_add(Tensor& full, const Tensor& part, int h, int dh) {
  for (int r = 0; r < part.rows(); ++r)
    for (int c = 0; c < dh; ++c) full.at(r, h * dh + c) += part.at(r, c);
}
}  // namespace

Var attention_core(Tape& t, Var q, Var k, Var v, int heads, const RowMask* mask) {
  const Tensor& Q = t.value(q);
  const Tensor& K = t.value(k);
  const Tensor& V = t.value(v);
  int d = Q.cols();
  int tq = Q.rows(), tk = K.rows();
  if (K.cols() != d || V.cols() != d)
    throw ShapeError("attention: dim mismatch q" + Q.shape_str() + " k" + K.shape_str() + " v" + V.shape_str());
  if (V.rows() != tk) throw ShapeError("attention: k/v length mismatch");
  if (heads <= 0 || d % heads != 0) throw ContractError("attention: model dim not divisible by head count");
  if (tk == 0) throw ContractError("attention: empty key/value set");
  int dh = d / heads;
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMask local;
  if (mask) {
    if (mask->rows != tq || mask->cols != tk) throw ShapeError("attention: mask shape mismatch");
    local = *mask;
  }
  bool has_mask = mask != nullptr;

  Tensor out({tq, d});
  // Attention probabilities per head, kept for backward.
  auto probs = std::make_shared<std::vector<Tensor>>();
  probs->reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = head_slice(Q, h, dh);
    Tensor kh = head_slice(K, h, dh);
    Tensor vh = head_slice(V, h, dh);
    Tensor scores = vmatmul_nt(qh, kh);
    for (double& s : scores.data) s *= sc;
    Tensor p = softmax_rows_value(scores, has_mask ? &local : nullptr);
    Tensor oh = vmatmul(p, vh);
    head_write_add(out, oh, h, dh);
    probs->push_back(std::move(p));
  }

  std::array<Var, 3> ps{q, k, v};
  return t.record(std::move(out), ps, [q, k, v, heads, dh, sc, probs](Tape& t, int self) {
    const Tensor& g = t.grad(Var{self});
    const Tensor& Q = t.value(q);
    const Tensor& K = t.value(k);
    const Tensor& V = t.value(v);
    Tensor dq = Tensor::zeros(Q.shape);
    Tensor dk = Tensor::zeros(K.shape);
    Tensor dv = Tensor::zeros(V.shape);
    for (int h = 0; h < heads; ++h) {
      const Tensor& p = (*probs)[static_cast<size_t>(h)];
      Tensor qh = head_slice(Q, h, dh);
      Tensor kh = head_slice(K, h, dh);
      Tensor vh = head_slice(V, h, dh);
      Tensor go = head_slice(g, h, dh);
      Tensor dvh = vmatmul_tn(p, go);
      Tensor dp = vmatmul_nt(go, vh);
      // softmax backward per row; zero-probability (masked) cells stay zero
      Tensor ds = Tensor::zeros(p.shape);
      softmax_rows_backward(p, dp, ds);
      for (double& x : ds.data) x *= sc;
      Tensor dqh = vmatmul(ds, kh);
      Tensor dkh = vmatmul_tn(ds, qh);
      head_write_add(dq, dqh, h, dh);
      head_write_add(dk, dkh, h, dh);
      head_write_add(dv, dvh, h, dh);
    }
    if (t.requires_grad(q)) t.accumulate(q, dq);
    if (t.requires_grad(k)) t.accumulate(k, dk);
    if (t.requires_grad(v)) t.accumulate(v, dv);
  });
}

}  // namespace qp
