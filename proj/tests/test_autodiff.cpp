#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gfslt/ad.hpp"
#include "support/gradcheck.hpp"

using namespace gfslt;
using namespace gfslt::ad;
using gfslt::testing::grad_check;
using gfslt::testing::grad_check_input;

namespace {

Mat rand_mat(long r, long c, uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Mat m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = d(rng);
  return m;
}

}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
  Param a("a", rand_mat(3, 4, 1));
  Param b("b", rand_mat(3, 4, 2));

  auto check = [&](auto make) {
    auto res = grad_check({&a, &b}, [&](Tape& t) {
      return sum_all(make(t, t.param(a), t.param(b)));
    });
    CHECK(res.max_rel < 1e-6);
  };
  check([](Tape&, Var x, Var y) { return add(x, y); });
  check([](Tape&, Var x, Var y) { return sub(x, y); });
  check([](Tape&, Var x, Var y) { return mul(x, y); });
  check([](Tape&, Var x, Var) { return scale(x, -2.5); });
  check([](Tape&, Var x, Var) { return gelu(x); });
  check([](Tape&, Var x, Var) { return exp(scale(x, 0.3)); });

  Tape t;
  CHECK_THROWS_AS(add(t.param(a), t.constant(Mat::Zero(2, 2))), ShapeError);
}

TEST_CASE("scale_by learnable scalar") {
  Param x("x", rand_mat(2, 3, 3));
  Param s("s", Mat::Constant(1, 1, 0.7));
  auto res = grad_check({&x, &s}, [&](Tape& t) {
    return sum_all(scale_by(mul(t.param(x), t.param(x)), t.param(s)));
  });
  CHECK(res.max_rel < 1e-6);
}

TEST_CASE("matrix products and linear") {
  Param a("a", rand_mat(3, 4, 4));
  Param b("b", rand_mat(4, 2, 5));
  auto r1 = grad_check({&a, &b}, [&](Tape& t) {
    return sum_all(gelu(matmul(t.param(a), t.param(b))));
  });
  CHECK(r1.max_rel < 1e-6);

  Param c("c", rand_mat(5, 4, 6));
  auto r2 = grad_check({&a, &c}, [&](Tape& t) {
    return sum_all(gelu(matmul_nt(t.param(a), t.param(c))));
  });
  CHECK(r2.max_rel < 1e-6);

  Param w("w", rand_mat(2, 4, 7));
  Param bias("bias", rand_mat(1, 2, 8));
  auto r3 = grad_check({&a, &w, &bias}, [&](Tape& t) {
    return sum_all(gelu(linear(t.param(a), t.param(w), t.param(bias))));
  });
  CHECK(r3.max_rel < 1e-6);

  Tape t;
  CHECK_THROWS_AS(matmul(t.param(a), t.param(a)), ShapeError);
}

TEST_CASE("layout ops") {
  Param a("a", rand_mat(3, 2, 9));
  Param b("b", rand_mat(3, 4, 10));
  auto r1 = grad_check({&a, &b}, [&](Tape& t) {
    return sum_all(gelu(concat_cols(t.param(a), t.param(b))));
  });
  CHECK(r1.max_rel < 1e-6);

  Param c("c", rand_mat(2, 2, 11));
  auto r2 = grad_check({&a, &c}, [&](Tape& t) {
    return sum_all(gelu(concat_rows({t.param(a), t.param(c), t.param(a)})));
  });
  CHECK(r2.max_rel < 1e-6);

  auto r3 = grad_check({&b}, [&](Tape& t) {
    return sum_all(gelu(slice_cols(t.param(b), 1, 2)));
  });
  CHECK(r3.max_rel < 1e-6);

  auto r4 = grad_check({&b}, [&](Tape& t) {
    return sum_all(gelu(gather_rows(t.param(b), {2, 0, 0, 1})));
  });
  CHECK(r4.max_rel < 1e-6);

  auto r5 = grad_check({&a}, [&](Tape& t) {
    return sum_all(gelu(repeat_rows(t.param(a), 3)));
  });
  CHECK(r5.max_rel < 1e-6);

  Param d("d", rand_mat(6, 2, 12));
  auto r6 = grad_check({&a, &d}, [&](Tape& t) {
    return sum_all(gelu(interleave_rows(t.param(a), t.param(d), 1, 2)));
  });
  CHECK(r6.max_rel < 1e-6);

  // interleave layout: block k is 1 row of a then 2 rows of d
  Tape t;
  Var iv = interleave_rows(t.param(a), t.param(d), 1, 2);
  CHECK(iv.val().row(0) == a.value.row(0));
  CHECK(iv.val().row(1) == d.value.row(0));
  CHECK(iv.val().row(2) == d.value.row(1));
  CHECK(iv.val().row(3) == a.value.row(1));

  CHECK_THROWS_AS(gather_rows(t.param(b), {7}), LookupError);
  CHECK_THROWS_AS(interleave_rows(t.param(a), t.param(b), 1, 2), ShapeError);
}

TEST_CASE("reductions") {
  Param a("a", rand_mat(4, 3, 13));
  auto r1 = grad_check({&a}, [&](Tape& t) {
    return sum_all(gelu(logsumexp_rows(t.param(a))));
  });
  CHECK(r1.max_rel < 1e-6);

  Param sq("sq", rand_mat(3, 3, 14));
  auto r2 = grad_check({&sq}, [&](Tape& t) {
    return sum_all(gelu(diag_col(t.param(sq))));
  });
  CHECK(r2.max_rel < 1e-6);

  auto r3 = grad_check({&a}, [&](Tape& t) { return mean_all(t.param(a)); });
  CHECK(r3.max_rel < 1e-6);

  // logsumexp value against direct computation
  Tape t;
  Var l = logsumexp_rows(t.param(a));
  for (long i = 0; i < 4; ++i)
    CHECK(l.val()(i, 0) ==
          doctest::Approx(std::log(a.value.row(i).array().exp().sum()))
              .epsilon(1e-12));
}

TEST_CASE("normalization and pooling") {
  Param a("a", rand_mat(4, 3, 15));
  auto r1 = grad_check({&a}, [&](Tape& t) {
    return sum_all(gelu(normalize_rows(t.param(a))));
  });
  CHECK(r1.max_rel < 1e-6);

  std::vector<uint8_t> mask{1, 0, 1, 1};
  auto r2 = grad_check({&a}, [&](Tape& t) {
    return sum_all(gelu(masked_mean_pool(t.param(a), mask)));
  });
  CHECK(r2.max_rel < 1e-6);

  auto r3 = grad_check({&a}, [&](Tape& t) {
    return sum_all(gelu(time_pool_rows(t.param(a), 3, mask)));
  });
  CHECK(r3.max_rel < 1e-6);

  Param g("g", Mat::Ones(1, 3) * 1.3);
  Param be("be", rand_mat(1, 3, 16));
  auto r4 = grad_check({&a, &g, &be}, [&](Tape& t) {
    return sum_all(gelu(layer_norm(t.param(a), t.param(g), t.param(be))));
  });
  CHECK(r4.max_rel < 1e-5);

  Tape t;
  Param z("z", Mat::Zero(2, 3));
  CHECK_THROWS_AS(normalize_rows(t.param(z)), ValueError);
  CHECK_THROWS_AS(masked_mean_pool(t.param(a), {0, 0, 0, 0}), ValueError);

  // pooled_mask marks a group valid iff any member is valid
  auto pm = pooled_mask({0, 0, 1, 0, 0, 0, 1}, 3);
  CHECK(pm == std::vector<uint8_t>{1, 0, 1});
}

TEST_CASE("dropout") {
  Param a("a", Mat::Ones(50, 40));
  std::mt19937_64 rng(3);
  Tape t;
  Var kept = dropout(t.param(a), 0.25, rng, true);
  // entries are 0 or 1/(1-p)
  long zeros = 0;
  for (long i = 0; i < kept.rows(); ++i)
    for (long j = 0; j < kept.cols(); ++j) {
      double v = kept.val()(i, j);
      CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
      zeros += v == 0.0;
    }
  CHECK(zeros > 300);
  CHECK(zeros < 700);
  // identity at eval
  Var ev = dropout(t.param(a), 0.25, rng, false);
  CHECK(ev.val() == a.value);
  CHECK_THROWS_AS(dropout(t.param(a), 1.0, rng, true), ConfigError);
}

TEST_CASE("fused losses") {
  Param a("a", rand_mat(3, 5, 17));
  Param b("b", rand_mat(3, 5, 18));
  auto r1 = grad_check({&a, &b}, [&](Tape& t) {
    return mean_abs_diff(t.param(a), t.param(b));
  });
  CHECK(r1.max_rel < 1e-6);
  auto r2 = grad_check({&a, &b}, [&](Tape& t) {
    return mean_sq_diff(t.param(a), t.param(b));
  });
  CHECK(r2.max_rel < 1e-6);

  Param logits("logits", rand_mat(4, 6, 19));
  std::vector<int> targets{2, 0, 5, 1};  // index 1 is pad and skipped
  auto r3 = grad_check({&logits}, [&](Tape& t) {
    return cross_entropy_tokens(t.param(logits), targets, 0).sum;
  });
  CHECK(r3.max_rel < 1e-6);

  Tape t;
  auto ce = cross_entropy_tokens(t.param(logits), targets, 0);
  CHECK(ce.count == 3);
  // value against direct computation
  double expect = 0.0;
  for (long i : {0L, 2L, 3L}) {
    auto row = logits.value.row(i);
    expect += std::log(row.array().exp().sum()) - row(targets[i]);
  }
  CHECK(ce.sum.val()(0, 0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy_tokens(t.param(logits), {9, 0, 0, 0}, 0),
                  LookupError);
}

TEST_CASE("tape mechanics") {
  Param a("a", rand_mat(2, 2, 20));
  Tape t;
  // binding the same Param twice returns the same node
  Var v1 = t.param(a);
  Var v2 = t.param(a);
  CHECK(v1.id == v2.id);

  // using the same Var twice accumulates gradients
  Var l = sum_all(mul(v1, v1));
  t.backward(l);
  CHECK(a.grad.isApprox(2.0 * a.value));

  // grads accumulate across backward passes until zeroed
  Tape t2;
  t2.backward(sum_all(t2.param(a)));
  CHECK(a.grad.isApprox(2.0 * a.value + Mat::Ones(2, 2)));
  a.zero_grad();
  CHECK(a.grad.isZero());

  // loss must be scalar
  Tape t3;
  CHECK_THROWS_AS(t3.backward(t3.param(a)), ShapeError);
}

TEST_CASE("input-side gradients") {
  Mat x0 = rand_mat(3, 4, 21);
  auto res = grad_check_input(x0, [&](Tape& t, Var x) {
    return sum_all(gelu(normalize_rows(x)));
  });
  CHECK(res.max_rel < 1e-6);
}
