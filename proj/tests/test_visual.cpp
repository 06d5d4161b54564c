#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gfslt/teacher.hpp"
#include "gfslt/visual.hpp"
#include "support/gradcheck.hpp"

using namespace gfslt;
using namespace gfslt::ad;
using gfslt::testing::grad_check;

namespace {

FrameSequence random_video(long T, const VisualConfig& cfg, uint64_t seed) {
  FrameSequence v;
  v.frames = T;
  v.channels = cfg.channels;
  v.height = cfg.image;
  v.width = cfg.image;
  v.sample_id = "test";
  v.data.resize(T * v.frame_size());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.f, 1.f);
  for (float& p : v.data) p = d(rng);
  return v;
}

VisualConfig small_cfg() {
  VisualConfig c;
  c.image = 16;
  c.spatial_pool = 2;
  c.patch = 4;
  c.dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  return c;
}

}  // namespace

TEST_CASE("teacher: rotation validity and determinism") {
  auto rots = gesture_rotations(3, 42);
  CHECK(rots.size() == kTeacherBlocks);
  for (const auto& r : rots) CHECK(is_rotation(r, 1e-9));

  auto t1 = synthetic_teacher({0, 0, 1, 2}, 5, 42);
  auto t2 = synthetic_teacher({0, 0, 1, 2}, 5, 42);
  CHECK(t1.per_frame == t2.per_frame);
  t1.validate(1e-6);  // every 3x3 block is a valid rotation
  CHECK_THROWS_AS(synthetic_teacher({5}, 5, 42), LookupError);

  // flatten / unflatten round trip
  std::vector<Rotation> pose, orient;
  hamer_unflatten(t1.per_frame.row(0), pose, orient);
  auto flat = hamer_flatten(pose, orient);
  CHECK((flat - t1.per_frame.row(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patch extraction geometry") {
  VisualConfig cfg = small_cfg();
  cfg.validate();
  CHECK(cfg.pooled_side() == 8);
  CHECK(cfg.num_patches() == 4);
  CHECK(cfg.patch_dim() == 3 * 16);
  FrameSequence v = random_video(2, cfg, 1);
  Mat rows = frames_to_patch_rows(v, cfg);
  CHECK(rows.rows() == 2 * 4);
  CHECK(rows.cols() == cfg.patch_dim());

  // first entry is the average of the top-left 2x2 pixel block, channel 0
  double expect = (double(v.at(0, 0, 0, 0)) + double(v.at(0, 0, 0, 1)) +
                   double(v.at(0, 0, 1, 0)) + double(v.at(0, 0, 1, 1))) /
                  4.0;
  CHECK(rows(0, 0) == doctest::Approx(expect).epsilon(1e-12));

  VisualConfig bad = cfg;
  bad.patch = 3;
  CHECK_THROWS_AS(frames_to_patch_rows(v, bad), ConfigError);
}

TEST_CASE("visual frontend shapes and determinism") {
  VisualConfig cfg = small_cfg();
  std::mt19937_64 rng(2);
  VisualFrontend vf(cfg, rng);
  FrameSequence v = random_video(3, cfg, 3);
  std::mt19937_64 r2(0);
  Tape t;
  Var f1 = vf.encode_frames(t, v, r2, false);
  CHECK(f1.rows() == 3);
  CHECK(f1.cols() == cfg.dim);
  Tape t2;
  Var f2 = vf.encode_frames(t2, v, r2, false);
  CHECK(f1.val() == f2.val());
}

TEST_CASE("visual frontend gradients") {
  VisualConfig cfg = small_cfg();
  std::mt19937_64 rng(4);
  VisualFrontend vf(cfg, rng);
  FrameSequence v = random_video(2, cfg, 5);
  std::vector<Param*> ps;
  vf.collect(ps);
  auto res = grad_check(
      ps,
      [&](Tape& t) {
        std::mt19937_64 r2(0);
        return sum_all(gelu(vf.encode_frames(t, v, r2, false)));
      },
      1e-5, 7);
  CHECK(res.max_rel < 1e-4);
}

TEST_CASE("distill fuse and loss") {
  std::mt19937_64 rng(6);
  long D = 8;
  MapperBlock m1("m1", D, kTeacherDim, rng);
  MapperBlock m2("m2", kTeacherDim, D, rng);
  Mat f = Mat::Random(4, D);
  Tape t;
  auto fused = distill_fuse(t, t.constant(f), m1, m2);
  CHECK(fused.f_star.rows() == 4);
  CHECK(fused.f_star.cols() == kTeacherDim);
  CHECK(fused.f_hat.cols() == 2 * D);
  // fusion keeps the raw features in the right half
  CHECK(fused.f_hat.val().rightCols(D) == f);

  HandTeacherFeatures teacher = synthetic_teacher({0, 1, 0, 1}, 2, 7);
  Var labs = distill_loss(t, fused.f_star, teacher, DistillLossKind::kAbs);
  Var lsq = distill_loss(t, fused.f_star, teacher, DistillLossKind::kSquared);
  // value equals the mean elementwise deviation
  Mat diff = fused.f_star.val() - teacher.per_frame;
  CHECK(labs.val()(0, 0) ==
        doctest::Approx(diff.cwiseAbs().mean()).epsilon(1e-12));
  CHECK(lsq.val()(0, 0) ==
        doctest::Approx(diff.array().square().mean()).epsilon(1e-12));

  std::vector<Param*> ps;
  m1.collect(ps);
  m2.collect(ps);
  auto res = grad_check(
      ps,
      [&](Tape& tt) {
        auto fu = distill_fuse(tt, tt.constant(f), m1, m2);
        return add(distill_loss(tt, fu.f_star, teacher),
                   sum_all(gelu(fu.f_hat)));
      },
      1e-5, 11);
  CHECK(res.max_rel < 1e-4);

  HandTeacherFeatures wrong;
  wrong.per_frame = Mat::Zero(3, kTeacherDim);
  CHECK_THROWS_AS(distill_loss(t, fused.f_star, wrong), ShapeError);
}

TEST_CASE("lora attachment on top visual layers") {
  VisualConfig cfg = small_cfg();
  cfg.depth = 2;
  cfg.use_lora = true;
  cfg.lora_top_layers = 1;
  std::mt19937_64 rng(8);
  VisualFrontend vf(cfg, rng);
  std::vector<Param*> ps;
  vf.collect(ps);
  long lora_params = 0;
  for (Param* p : ps)
    if (p->name.find("lora") != std::string::npos) lora_params++;
  // only the top layer carries adapters: 4 attn + 2 ffn = 6 sites, A and B
  CHECK(lora_params == 12);
  for (Param* p : ps)
    if (p->name.find("lora") != std::string::npos)
      CHECK(p->name.find("layer1") != std::string::npos);
}
