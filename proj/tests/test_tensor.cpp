#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "qp/autodiff.hpp"
#include "qp/error.hpp"
#include "qp/rng.hpp"
#include "qp/tensor.hpp"
#include "testutil.hpp"

using namespace qp;
using qptest::fd_check_op;
using qptest::random_tensor;
using qptest::rel_err;

namespace {

// Reduces an arbitrary op output to a scalar through a fixed probe so FD
// checks see every output coordinate.
Var probe_loss(Tape& t, Var v, const Tensor& probe) {
  Var p = t.leaf(probe, false);
  return sum_all(t, mul(t, v, p));
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tape t;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  Rng rng(7);
  Tensor b = random_tensor(3, 5, rng);
  Var out = matmul(t, t.leaf(eye), t.leaf(b));
  for (size_t i = 0; i < b.size(); ++i) CHECK(t.value(out)[i] == doctest::Approx(b[i]).epsilon(1e-15));

  Var prod = matmul(t, t.leaf(Tensor::from_rows(2, 2, {1, 2, 3, 4})), t.leaf(Tensor::from_rows(2, 1, {0, 1})));
  CHECK(t.value(prod).at(0, 0) == 2.0);
  CHECK(t.value(prod).at(1, 0) == 4.0);
}

TEST_CASE("matmul shape error names both shapes") {
  Tape t;
  Var a = t.leaf(Tensor({2, 3}));
  Var b = t.leaf(Tensor({4, 2}));
  CHECK_THROWS_WITH_AS(matmul(t, a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(11);
  Tensor a = random_tensor(5, 4, rng);
  Tensor b = random_tensor(4, 3, rng);
  Tensor probe = random_tensor(5, 3, rng);
  double err = fd_check_op({a, b}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, matmul(t, v[0], v[1]), probe);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax symmetry, stability, row sums") {
  Tape t;
  Var s = softmax_rows(t, t.leaf(Tensor::row({0, 0, 0})));
  for (int c = 0; c < 3; ++c) CHECK(t.value(s).at(0, c) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Var big = softmax_rows(t, t.leaf(Tensor::row({1000, 0})));
  CHECK(t.value(big).at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.value(big).at(0, 1) < 1e-300);
  CHECK(t.value(big).all_finite());

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor(4, 7, rng, 3.0);
    Tape tt;
    Var y = softmax_rows(tt, tt.leaf(x));
    for (int r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (int c = 0; c < 7; ++c) {
        double p = tt.value(y).at(r, c);
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
        sum += p;
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax jacobian vs finite differences") {
  Rng rng(5);
  Tensor x = random_tensor(3, 6, rng);
  Tensor probe = random_tensor(3, 6, rng);
  double err = fd_check_op({x}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, softmax_rows(t, v[0]), probe);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("softmax axis 0 normalizes columns") {
  Tape t;
  Rng rng(9);
  Tensor x = random_tensor(4, 3, rng);
  Var y = softmax(t, t.leaf(x), 0);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (int r = 0; r < 4; ++r) sum += t.value(y).at(r, c);
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("masked softmax gives exact zeros and errors on dead rows") {
  Tape t;
  Tensor x = Tensor::row({1.0, 2.0, 3.0});
  RowMask m = RowMask::full(1, 3);
  m.set(0, 1, 0);
  Var y = softmax_rows(t, t.leaf(x), &m);
  CHECK(t.value(y).at(0, 1) == 0.0);
  CHECK(t.value(y).at(0, 0) + t.value(y).at(0, 2) == doctest::Approx(1.0).epsilon(1e-15));

  RowMask dead{1, 3, {0, 0, 0}};
  CHECK_THROWS_AS(softmax_rows(t, t.leaf(x), &dead), ContractError);
}

TEST_CASE("layer_norm normalizes and matches finite differences") {
  Tape t;
  Tensor gain = Tensor::row({1, 1, 1, 1});
  Tensor bias = Tensor::row({0, 0, 0, 0});

  // constant row maps to zero
  Var z = layer_norm(t, t.leaf(Tensor::row({5, 5, 5, 5})), t.leaf(gain), t.leaf(bias));
  for (int c = 0; c < 4; ++c) CHECK(std::fabs(t.value(z).at(0, c)) < 1e-9);

  // two-point normalization
  Var two = layer_norm(t, t.leaf(Tensor::row({1, 3})), t.leaf(Tensor::row({1, 1})), t.leaf(Tensor::row({0, 0})));
  CHECK(t.value(two).at(0, 0) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(t.value(two).at(0, 1) == doctest::Approx(1.0).epsilon(1e-4));

  // mean 0, variance 1 before affine (rows with variance >> eps)
  Rng rng(13);
  Tensor x = random_tensor(3, 8, rng, 5.0);
  Var y = layer_norm(t, t.leaf(x), t.leaf(Tensor::row(std::vector<double>(8, 1.0))), t.leaf(Tensor::row(std::vector<double>(8, 0.0))));
  for (int r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (int c = 0; c < 8; ++c) mu += t.value(y).at(r, c);
    mu /= 8;
    for (int c = 0; c < 8; ++c) var += (t.value(y).at(r, c) - mu) * (t.value(y).at(r, c) - mu);
    var /= 8;
    CHECK(std::fabs(mu) < 1e-12);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }

  Tensor xin = random_tensor(4, 6, rng);
  Tensor g2 = random_tensor(1, 6, rng);
  Tensor b2 = random_tensor(1, 6, rng);
  Tensor probe = random_tensor(4, 6, rng);
  double err = fd_check_op({xin, g2, b2}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, layer_norm(t, v[0], v[1], v[2]), probe);
  });
  CHECK(err < 1e-5);
}

TEST_CASE("cross_entropy uniform, margin limit, oracle equality") {
  Tape t;
  Var uni = cross_entropy(t, t.leaf(Tensor({3, 4})), {0, 1, 2});
  CHECK(t.value(uni).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  // loss -> 0 as the correct-logit margin grows
  double prev = 1e9;
  for (double margin : {2.0, 8.0, 32.0}) {
    Tensor l({1, 5});
    l.at(0, 2) = margin;
    Tape tt;
    double v = tt.value(cross_entropy(tt, tt.leaf(l), {2})).item();
    CHECK(v < prev);
    prev = v;
  }
  CHECK(prev < 1e-10);

  // direct summation oracle on a random case
  Rng rng(17);
  Tensor logits = random_tensor(6, 10, rng, 2.0);
  std::vector<int> targets;
  for (int i = 0; i < 6; ++i) targets.push_back(rng.uniform_int(0, 9));
  Tape tt;
  double got = tt.value(cross_entropy(tt, tt.leaf(logits), targets)).item();
  double expect = 0.0;
  for (int r = 0; r < 6; ++r) {
    double denom = 0.0;
    for (int c = 0; c < 10; ++c) denom += std::exp(logits.at(r, c));
    expect += -std::log(std::exp(logits.at(r, targets[size_t(r)])) / denom);
  }
  expect /= 6;
  CHECK(std::fabs(got - expect) < 1e-12);

  CHECK_THROWS_AS((void)cross_entropy(tt, tt.leaf(logits), {0, 1, 2, 3, 4, 99}), std::out_of_range);
}

TEST_CASE("cross_entropy respects the score mask and matches FD") {
  Rng rng(29);
  Tensor logits = random_tensor(5, 7, rng);
  std::vector<int> targets{1, 2, 3, 4, 5};
  std::vector<uint8_t> mask{1, 0, 1, 0, 1};

  Tape t;
  double masked = t.value(cross_entropy(t, t.leaf(logits), targets, &mask)).item();
  auto rows = cross_entropy_per_row(logits, targets);
  double expect = (rows[0] + rows[2] + rows[4]) / 3.0;
  CHECK(masked == doctest::Approx(expect).epsilon(1e-15));

  double err = fd_check_op({logits}, [&](Tape& tt, const std::vector<Var>& v) {
    return cross_entropy(tt, v[0], targets, &mask);
  });
  CHECK(err < 1e-6);
}

TEST_CASE("backward basics: sum and dot") {
  Tape t;
  Rng rng(23);
  Tensor x = random_tensor(3, 4, rng);
  Var vx = t.leaf(x, true);
  t.backward(sum_all(t, vx));
  for (size_t i = 0; i < x.size(); ++i) CHECK(t.grad(vx)[i] == 1.0);

  Tape t2;
  Var vy = t2.leaf(x, true);
  Var loss = sum_all(t2, mul(t2, vy, vy));
  t2.backward(loss);
  for (size_t i = 0; i < x.size(); ++i) CHECK(t2.grad(vy)[i] == doctest::Approx(2 * x[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape t;
  Var v = t.leaf(Tensor({2, 2}), true);
  CHECK_THROWS_AS(t.backward(v), ContractError);
}

TEST_CASE("elementwise and reshaping ops match finite differences") {
  Rng rng(31);
  auto check = [&](const char* name, int n_in,
                   const std::function<Var(Tape&, const std::vector<Var>&)>& build) {
    std::vector<Tensor> ins;
    for (int i = 0; i < n_in; ++i) ins.push_back(random_tensor(4, 5, rng));
    double err = fd_check_op(ins, build);
    INFO(name);
    CHECK(err < 1e-5);
  };

  Tensor probe = random_tensor(4, 5, rng);
  check("add", 2, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, add(t, v[0], v[1]), probe); });
  check("sub", 2, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, sub(t, v[0], v[1]), probe); });
  check("mul", 2, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, mul(t, v[0], v[1]), probe); });
  check("scale", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, scale(t, v[0], -2.5), probe); });
  check("gelu", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, gelu(t, v[0]), probe); });
  check("exp", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, exp_elem(t, v[0]), probe); });
  check("mean_all", 1, [&](Tape& t, const std::vector<Var>& v) { return mean_all(t, v[0]); });
  check("norm_rows", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, normalize_rows(t, v[0]), probe); });

  Tensor probe_t = random_tensor(5, 4, rng);
  check("transpose", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, transpose(t, v[0]), probe_t); });

  Tensor probe_row = random_tensor(1, 5, rng);
  check("mean_rows", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, mean_rows(t, v[0]), probe_row); });
  check("colmax", 1, [&](Tape& t, const std::vector<Var>& v) { return probe_loss(t, colmax(t, v[0]), probe_row); });

  // row-broadcast add
  Tensor x = random_tensor(4, 5, rng);
  Tensor b = random_tensor(1, 5, rng);
  double err = fd_check_op({x, b}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, add_rowvec(t, v[0], v[1]), probe);
  });
  CHECK(err < 1e-5);

  // scalar multiply by a variable
  Tensor s = Tensor::scalar(0.7);
  err = fd_check_op({x, s}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, mul_scalarvar(t, v[0], v[1]), probe);
  });
  CHECK(err < 1e-5);
}

TEST_CASE("embedding lookup gathers rows and scatters gradients") {
  Rng rng(37);
  Tensor table = random_tensor(6, 3, rng);
  std::vector<int> ids{0, 2, 2, 5};

  Tape t;
  Var out = embedding_rows(t, t.leaf(table), ids);
  CHECK(t.value(out).rows() == 4);
  for (int c = 0; c < 3; ++c) {
    CHECK(t.value(out).at(1, c) == table.at(2, c));
    CHECK(t.value(out).at(2, c) == table.at(2, c));
  }
  CHECK_THROWS_AS((void)embedding_rows(t, t.leaf(table), std::vector<int>{6}), std::out_of_range);

  Tensor probe = random_tensor(4, 3, rng);
  double err = fd_check_op({table}, [&](Tape& tt, const std::vector<Var>& v) {
    return probe_loss(tt, embedding_rows(tt, v[0], ids), probe);
  });
  CHECK(err < 1e-5);
}

TEST_CASE("concat and slice round trips with gradients") {
  Rng rng(41);
  Tensor a = random_tensor(2, 4, rng);
  Tensor b = random_tensor(3, 4, rng);
  Tensor probe = random_tensor(5, 4, rng);
  double err = fd_check_op({a, b}, [&](Tape& t, const std::vector<Var>& v) {
    std::vector<Var> parts{v[0], v[1]};
    return probe_loss(t, concat_rows(t, parts), probe);
  });
  CHECK(err < 1e-5);

  Tensor c = random_tensor(4, 3, rng);
  Tensor d = random_tensor(4, 2, rng);
  Tensor probe_c = random_tensor(4, 5, rng);
  err = fd_check_op({c, d}, [&](Tape& t, const std::vector<Var>& v) {
    std::vector<Var> parts{v[0], v[1]};
    return probe_loss(t, concat_cols(t, parts), probe_c);
  });
  CHECK(err < 1e-5);

  Tensor x = random_tensor(6, 5, rng);
  Tensor probe_r = random_tensor(3, 5, rng);
  err = fd_check_op({x}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, slice_rows(t, v[0], 1, 4), probe_r);
  });
  CHECK(err < 1e-5);

  Tensor probe_s = random_tensor(6, 2, rng);
  err = fd_check_op({x}, [&](Tape& t, const std::vector<Var>& v) {
    return probe_loss(t, slice_cols(t, v[0], 2, 4), probe_s);
  });
  CHECK(err < 1e-5);
}

TEST_CASE("fused attention matches finite differences, masked and causal") {
  Rng rng(43);
  Tensor q = random_tensor(3, 8, rng);
  Tensor k = random_tensor(5, 8, rng);
  Tensor v = random_tensor(5, 8, rng);
  Tensor probe = random_tensor(3, 8, rng);

  double err = fd_check_op({q, k, v}, [&](Tape& t, const std::vector<Var>& vars) {
    return probe_loss(t, attention_core(t, vars[0], vars[1], vars[2], 2, nullptr), probe);
  });
  CHECK(err < 1e-5);

  RowMask m = RowMask::full(3, 5);
  m.set(0, 4, 0);
  m.set(2, 1, 0);
  err = fd_check_op({q, k, v}, [&](Tape& t, const std::vector<Var>& vars) {
    return probe_loss(t, attention_core(t, vars[0], vars[1], vars[2], 2, &m), probe);
  });
  CHECK(err < 1e-5);

  Tensor sq = random_tensor(4, 8, rng);
  RowMask causal = RowMask::causal(4);
  Tensor probe_sq = random_tensor(4, 8, rng);
  err = fd_check_op({sq}, [&](Tape& t, const std::vector<Var>& vars) {
    return probe_loss(t, attention_core(t, vars[0], vars[0], vars[0], 4, &causal), probe_sq);
  });
  CHECK(err < 1e-4);
}

TEST_CASE("dropout is identity when disabled and rescales when enabled") {
  Rng rng(47);
  Tensor x = random_tensor(10, 10, rng);
  Tape t;
  Var in = t.leaf(x, true);
  Rng drop_rng(1);
  Var same = dropout(t, in, 0.5, drop_rng, false);
  CHECK(same.id == in.id);

  Var dropped = dropout(t, in, 0.5, drop_rng, true);
  int zeros = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    double v = t.value(dropped)[i];
    if (v == 0.0)
      ++zeros;
    else
      CHECK(v == doctest::Approx(x[i] / 0.5).epsilon(1e-12));
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);
}

TEST_CASE("parameters accumulate gradients once per backward") {
  Rng rng(53);
  Parameter p("w", random_tensor(2, 2, rng));
  Tape t;
  Var w1 = t.param(p);
  Var w2 = t.param(p);
  CHECK(w1.id == w2.id);  // memoized
  Var loss = sum_all(t, mul(t, w1, w2));  // = sum w^2
  t.backward(loss);
  for (size_t i = 0; i < p.value.size(); ++i)
    CHECK(p.grad[i] == doctest::Approx(2 * p.value[i]).epsilon(1e-12));
}

TEST_CASE("frozen parameters receive no gradient but pass it through") {
  Rng rng(59);
  Parameter frozen("f", random_tensor(3, 3, rng), /*train=*/false);
  Tensor x = random_tensor(2, 3, rng);
  Tape t;
  Var vx = t.leaf(x, true);
  Var out = matmul(t, vx, t.param(frozen));
  t.backward(mean_all(t, out));
  CHECK(frozen.grad.data == Tensor::zeros({3, 3}).data);
  bool any = false;
  for (size_t i = 0; i < t.grad(vx).size(); ++i) any |= t.grad(vx)[i] != 0.0;
  CHECK(any);
}

TEST_CASE("forward results are bit-identical across repeated seeded runs") {
  auto run = [] {
    Rng rng(101);
    Tape t;
    Tensor x = random_tensor(6, 6, rng);
    Var v = t.leaf(x);
    Var y = softmax_rows(t, matmul(t, v, transpose(t, v)));
    Var z = layer_norm(t, y, t.leaf(Tensor::row(std::vector<double>(6, 1.0))), t.leaf(Tensor::row(std::vector<double>(6, 0.0))));
    return t.value(gelu(t, z)).data;
  };
  auto a = run();
  auto b = run();
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("finite forward outputs on random finite inputs") {
  Rng rng(61);
  for (int rep = 0; rep < 20; ++rep) {
    Tape t;
    Tensor x = random_tensor(5, 5, rng, 10.0);
    Var v = t.leaf(x);
    CHECK(t.value(softmax_rows(t, v)).all_finite());
    CHECK(t.value(gelu(t, v)).all_finite());
    CHECK(t.value(normalize_rows(t, v)).all_finite());
    CHECK(t.value(layer_norm(t, v, t.leaf(Tensor::row(std::vector<double>(5, 1.0))),
                             t.leaf(Tensor::row(std::vector<double>(5, 0.0)))))
              .all_finite());
  }
}
