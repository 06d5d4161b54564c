#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gfslt/temporal.hpp"
#include "support/gradcheck.hpp"

using namespace gfslt;
using namespace gfslt::ad;
using gfslt::testing::grad_check;

namespace {

TemporalConfig small_cfg() {
  TemporalConfig c;
  c.num_layers = 2;
  c.input_dim = 8;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.window_size = 3;
  c.downsample_after_layer = 1;
  c.downsample_factor = 2;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  TemporalConfig c = small_cfg();
  c.validate();
  c.downsample_after_layer = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg();
  c.window_size = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_cfg();
  c.hidden_dim = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("output length and mask downsampling") {
  TemporalConfig cfg = small_cfg();
  std::mt19937_64 rng(1);
  TemporalEncoder enc(cfg, rng);
  Mat x = Mat::Random(7, 8);
  std::mt19937_64 r2(0);
  Tape t;
  auto out = enc.encode(t, t.constant(x), {}, r2, false);
  CHECK(out.z.rows() == 4);  // ceil(7 / 2)
  CHECK(out.z.cols() == 8);
  CHECK(out.mask == std::vector<uint8_t>{1, 1, 1, 1});

  auto out2 =
      enc.encode(t, t.constant(x), {1, 1, 0, 0, 1, 1, 1}, r2, false);
  CHECK(out2.mask == std::vector<uint8_t>{1, 0, 1, 1});

  CHECK_THROWS_AS(enc.encode(t, t.constant(Mat::Random(3, 5)), {}, r2, false),
                  ShapeError);
  CHECK_THROWS_AS(enc.encode(t, t.constant(x), {1, 0}, r2, false), ShapeError);
}

TEST_CASE("padded rows do not influence valid outputs") {
  TemporalConfig cfg = small_cfg();
  std::mt19937_64 rng(2);
  TemporalEncoder enc(cfg, rng);
  std::mt19937_64 r2(0);
  Mat x = Mat::Random(6, 8);
  Mat x2 = x;
  x2.row(5).setConstant(99.0);  // padded position gets garbage
  std::vector<uint8_t> mask{1, 1, 1, 1, 1, 0};
  Tape t;
  auto a = enc.encode(t, t.constant(x), mask, r2, false);
  auto b = enc.encode(t, t.constant(x2), mask, r2, false);
  // first pooled group (frames 0-1) is far from frame 5's window, and
  // masked keys never contribute; outputs agree on valid positions
  CHECK((a.z.val().row(0) - b.z.val().row(0)).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((a.z.val().row(1) - b.z.val().row(1)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("temporal encoder gradients") {
  TemporalConfig cfg = small_cfg();
  std::mt19937_64 rng(3);
  TemporalEncoder enc(cfg, rng);
  Mat x = Mat::Random(5, 8);
  std::vector<Param*> ps;
  enc.collect(ps);
  auto res = grad_check(
      ps,
      [&](Tape& t) {
        std::mt19937_64 r2(0);
        auto out = enc.encode(t, t.constant(x), {}, r2, false);
        return sum_all(gelu(out.z));
      },
      1e-5, 5);
  CHECK(res.max_rel < 1e-4);
}
