#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qp/tensor.hpp"

namespace qp {

class Tape;

// Handle to a node on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// A trainable (or frozen) model tensor living outside any tape. Forward
// passes lift it onto a tape with Tape::param(); backward accumulates into
// `grad`.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Tensor::zeros(value.shape);
  }
  void zero_grad() { grad.fill(0.0); }
};

struct NamedParam {
  std::string path;
  Parameter* param = nullptr;
};

// Per-(row, key) attention visibility. allow[r * cols + c] != 0 means row r
// may look at column c.
struct RowMask {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> allow;

  static RowMask full(int r, int c) {
    RowMask m{r, c, std::vector<uint8_t>(static_cast<size_t>(r) * c, 1)};
    return m;
  }
  // Lower-triangular visibility: position t sees positions <= t.
  static RowMask causal(int n);
  // Same key-validity vector applied to every row.
  static RowMask keys(int rows, const std::vector<uint8_t>& valid);

  uint8_t at(int r, int c) const { return allow[static_cast<size_t>(r) * cols + c]; }
  void set(int r, int c, uint8_t v) { allow[static_cast<size_t>(r) * cols + c] = v; }
  // Elementwise AND; masks must agree on shape.
  RowMask combined(const RowMask& o) const;
};

// Reverse-mode tape. Nodes are recorded in evaluation order, which is a
// topological order by construction; backward() walks it once in reverse.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward;  // nullptr for leaves
  };

  Var leaf(Tensor value, bool requires_grad = false);
  // Memoized per tape: calling twice with the same Parameter returns the
  // same Var so its gradient accumulates once per backward.
  Var param(Parameter& p);

  Var record(Tensor value, std::span<const Var> parents, std::function<void(Tape&, int)> backward);

  const Tensor& value(Var v) const { return node(v).value; }
  const Tensor& grad(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // Adds `delta` into the grad slot of `v` (allocating it on first touch).
  // No-op when the node does not require grad.
  void accumulate(Var v, const Tensor& delta);
  Tensor& grad_slot(Var v);
  bool grad_touched(Var v) const { return !node(v).grad.data.empty(); }

  // Backpropagates from a scalar loss to every requires-grad leaf.
  void backward(Var loss);

  size_t size() const { return nodes_.size(); }
  void clear();

  const Node& node(Var v) const;
  Node& node(Var v);

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_vars_;
};

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

Var add(Tape& t, Var a, Var b);            // same shape
Var add_rowvec(Tape& t, Var x, Var b);     // (T x d) + (1 x d), broadcast over rows
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);            // elementwise
Var scale(Tape& t, Var a, double c);
Var mul_scalarvar(Tape& t, Var x, Var s);  // s is a scalar node
Var exp_elem(Tape& t, Var a);
Var neg(Tape& t, Var a);
Var matmul(Tape& t, Var a, Var b);
Var transpose(Tape& t, Var a);
Var gelu(Tape& t, Var a);
Var softmax_rows(Tape& t, Var x, const RowMask* mask = nullptr);
// axis = 1 normalizes rows (last dim), axis = 0 normalizes columns.
Var softmax(Tape& t, Var x, int axis);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);
// Mean negative log-likelihood over scored rows. `score_mask`, when given,
// marks rows included in the mean (non-zero = scored).
Var cross_entropy(Tape& t, Var logits, const std::vector<int>& targets,
                  const std::vector<uint8_t>* score_mask = nullptr);
// Per-row loss vector for the same contract, value-level (used by tests and
// metric audits).
std::vector<double> cross_entropy_per_row(const Tensor& logits, const std::vector<int>& targets);
Var embedding_rows(Tape& t, Var table, const std::vector<int>& ids);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var concat_cols(Tape& t, std::span<const Var> parts);
Var slice_rows(Tape& t, Var a, int r0, int r1);  // half-open [r0, r1)
Var slice_cols(Tape& t, Var a, int c0, int c1);
Var mean_all(Tape& t, Var a);
Var sum_all(Tape& t, Var a);
Var mean_rows(Tape& t, Var a);       // (T x d) -> (1 x d)
Var normalize_rows(Tape& t, Var a, double eps = 1e-12);
Var colmax(Tape& t, Var a);          // (R x C) -> (1 x C), subgradient to the argmax row
Var dropout(Tape& t, Var a, double rate, Rng& rng, bool enabled);

// Fused scaled-dot-product attention over h heads.
//   q: Tq x d, k/v: Tk x d, d divisible by heads.
// Masked keys receive exactly zero weight; a row with no visible key is a
// contract error.
Var attention_core(Tape& t, Var q, Var k, Var v, int heads, const RowMask* mask);

}  // namespace qp
