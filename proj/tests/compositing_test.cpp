#include <gtest/gtest.h>

#include <cmath>

#include "advobj/compositing.hpp"
#include "advobj/gradcheck.hpp"
#include "advobj/models.hpp"

using namespace advobj;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed, double lo = 0.0,
                    double hi = 1.0) {
  Rng rng(seed);
  Tensor t({3, h, w});
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor crop(const Tensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  Tensor out({3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(c, i, j) = img.at(c, y + i, x + j);
  return out;
}

Tensor overlay_value(const Tensor& bg, const Tensor& patch, double x, double y) {
  Tape tape;
  return overlay(tape.constant(bg), tape.constant(patch), x, y).value();
}

}  // namespace

TEST(Overlay, PatchEqualToBackgroundCropIsIdempotent) {
  const Tensor bg = random_image(64, 64, 1);
  EXPECT_EQ(overlay_value(bg, crop(bg, 10, 20, 32, 32), 20, 10), bg);
}

TEST(Overlay, IntegerPlacementIndexIdentity) {
  const Tensor bg = random_image(64, 64, 2);
  const Tensor patch = random_image(32, 32, 3);
  const Tensor out = overlay_value(bg, patch, 8, 8);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(out.at(c, 8, 8), patch.at(c, 0, 0));
    EXPECT_EQ(out.at(c, 39, 39), patch.at(c, 31, 31));
    EXPECT_EQ(out.at(c, 20, 13), patch.at(c, 12, 5));
  }
}

TEST(Overlay, FractionalPlacementBlendsColumns) {
  const Tensor bg = random_image(64, 64, 4);
  const Tensor patch = random_image(32, 32, 5);
  const Tensor out = overlay_value(bg, patch, 8.5, 8.0);
  for (std::size_t c = 0; c < 3; ++c) {
    // Pixel j samples patch column j - 8.5.
    for (std::size_t j = 9; j <= 39; ++j) {
      const double expect = 0.5 * patch.at(c, 0, j - 9) + 0.5 * patch.at(c, 0, j - 8);
      EXPECT_NEAR(out.at(c, 8, j), expect, 1e-12) << "column " << j;
    }
    EXPECT_EQ(out.at(c, 8, 8), bg.at(c, 8, 8));
    EXPECT_EQ(out.at(c, 8, 40), bg.at(c, 8, 40));
  }
}

TEST(Overlay, OutsideFootprintUntouched) {
  const Tensor bg = random_image(48, 48, 6);
  const Tensor patch = random_image(16, 16, 7);
  const double x = 10.25, y = 5.75;
  const Tensor out = overlay_value(bg, patch, x, y);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 48; ++i)
      for (std::size_t j = 0; j < 48; ++j) {
        const bool inside = i >= y && i <= y + 15 && j >= x && j <= x + 15;
        if (!inside) ASSERT_EQ(out.at(c, i, j), bg.at(c, i, j));
      }
}

TEST(Overlay, ClampsToUnitRange) {
  Tensor patch({3, 4, 4}, 1.7);
  patch[0] = -0.3;
  const Tensor out = overlay_value(Tensor({3, 8, 8}, 0.5), patch, 2, 2);
  for (double v : out.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Overlay, OutOfBoundsThrows) {
  const Tensor bg({3, 64, 64}, 0.5);
  const Tensor patch({3, 32, 32}, 0.5);
  EXPECT_THROW(overlay_value(bg, patch, 33, 0), PlacementError);
  EXPECT_THROW(overlay_value(bg, patch, 0, 32.5), PlacementError);
  EXPECT_THROW(overlay_value(bg, patch, -0.5, 0), PlacementError);
  EXPECT_NO_THROW(overlay_value(bg, patch, 32, 32));
}

TEST(Overlay, GradientFlowsOnlyFromFootprint) {
  Tape tape;
  const Var patch = tape.leaf(random_image(8, 8, 8, 0.1, 0.9));
  const Var out = overlay(tape.constant(random_image(16, 16, 9)), patch, 4, 4);
  const Tensor g = tape.backward(sum(out))[patch];
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Transform, IdentityEqualsOverlayBitExact) {
  Tape tape;
  const Var bg = tape.constant(random_image(64, 64, 10));
  const Var patch = tape.constant(random_image(32, 32, 11));
  const PlacementSpec p{12.5, 7.0};
  EXPECT_EQ(apply_transform(patch, bg, TransformParams::identity(), p).value(),
            overlay(bg, patch, 12.5, 7.0).value());
}

TEST(Transform, IntegerShiftMovesPatchExactly) {
  const Tensor bg = random_image(64, 64, 12);
  const Tensor patch = random_image(16, 16, 13);
  Tape tape;
  TransformParams t;
  t.dx = 3;
  const Tensor out =
      apply_transform(tape.constant(patch), tape.constant(bg), t, PlacementSpec{10, 20}).value();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j) {
        const bool inside = i >= 20 && i < 36 && j >= 13 && j < 29;
        const double expect = inside ? patch.at(c, i - 20, j - 13) : bg.at(c, i, j);
        ASSERT_EQ(out.at(c, i, j), expect);
      }
}

TEST(Transform, BrightnessScalesComposite) {
  Tape tape;
  TransformParams t;
  t.brightness = 0.5;
  const Tensor out = apply_transform(tape.constant(Tensor({3, 8, 8}, 0.8)),
                                     tape.constant(Tensor({3, 32, 32}, 0.8)), t, {4, 4})
                         .value();
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.4);
}

TEST(Transform, BrightnessClamps) {
  Tape tape;
  TransformParams t;
  t.brightness = 1.3;
  const Tensor out = apply_transform(tape.constant(Tensor({3, 8, 8}, 0.9)),
                                     tape.constant(Tensor({3, 32, 32}, 0.2)), t, {4, 4})
                         .value();
  EXPECT_DOUBLE_EQ(out.at(0, 5, 5), 1.0);
  EXPECT_NEAR(out.at(0, 20, 20), 0.26, 1e-15);
}

TEST(Transform, ScaleKeepsPatchCentre) {
  Tape tape;
  TransformParams t;
  t.scale = 0.5;
  const Tensor out = apply_transform(tape.constant(Tensor({3, 16, 16}, 1.0)),
                                     tape.constant(Tensor({3, 48, 48}, 0.0)), t, {16, 16})
                         .value();
  // 8x8 footprint centred where the 16x16 one was: rows/cols 20..27.
  EXPECT_EQ(out.at(0, 20, 20), 1.0);
  EXPECT_EQ(out.at(0, 27, 27), 1.0);
  EXPECT_EQ(out.at(0, 19, 20), 0.0);
  EXPECT_EQ(out.at(0, 28, 27), 0.0);
}

TEST(Transform, OutOfBoundsAfterShiftThrows) {
  Tape tape;
  TransformParams t;
  t.dx = -4;
  EXPECT_THROW(apply_transform(tape.constant(Tensor({3, 8, 8})), tape.constant(Tensor({3, 32, 32})),
                               t, {2, 2}),
               PlacementError);
  t.dx = 0;
  t.scale = 1.2;
  EXPECT_THROW(apply_transform(tape.constant(Tensor({3, 32, 32})),
                               tape.constant(Tensor({3, 32, 32})), t, {0, 0}),
               PlacementError);
}

TEST(Transform, InvalidParamsRejected) {
  Tape tape;
  TransformParams t;
  t.scale = 0;
  EXPECT_THROW(apply_transform(tape.constant(Tensor({3, 8, 8})), tape.constant(Tensor({3, 32, 32})),
                               t, {2, 2}),
               std::invalid_argument);
}

TEST(Blur, ConstantImagePreserved) {
  Tape tape;
  for (double sigma : {0.3, 0.7, 1.0, 2.5}) {
    const Tensor out = gaussian_blur(tape.constant(Tensor({3, 20, 20}, 0.37)), sigma).value();
    for (double v : out.data()) EXPECT_NEAR(v, 0.37, 1e-15);
    double s = 0.0;
    for (double k : gaussian_kernel(sigma)) s += k;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Sampling, DegenerateRangesReturnValue) {
  TransformDistribution d{{2, 2}, {-1, -1}, {0.9, 0.9}, {1.1, 1.1}, {0.5, 0.5}};
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const auto t = sample_transform(d, rng);
    EXPECT_EQ(t.dx, 2);
    EXPECT_EQ(t.dy, -1);
    EXPECT_EQ(t.brightness, 0.9);
    EXPECT_EQ(t.scale, 1.1);
    EXPECT_EQ(t.smoothing_sigma, 0.5);
  }
}

TEST(Sampling, SeedDeterministic) {
  const TransformDistribution d;
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_transform(d, a), sample_transform(d, b));
}

TEST(Sampling, ShiftMeanNearZeroAndInRange) {
  const TransformDistribution d;
  Rng rng(7);
  double total = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto t = sample_transform(d, rng);
    ASSERT_GE(t.dx, -4.0);
    ASSERT_LE(t.dx, 4.0);
    ASSERT_GE(t.brightness, 0.7);
    ASSERT_LE(t.brightness, 1.3);
    ASSERT_GE(t.scale, 0.8);
    ASSERT_LE(t.scale, 1.2);
    ASSERT_GE(t.smoothing_sigma, 0.0);
    ASSERT_LE(t.smoothing_sigma, 1.0);
    total += t.dx;
  }
  EXPECT_LT(std::abs(total / 10000.0), 0.1);
}

TEST(Sampling, DistributionValidation) {
  TransformDistribution d;
  EXPECT_NO_THROW(d.validate());
  d.brightness = {1.1, 1.3};
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d = {};
  d.dx = {2, -2};
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d = {};
  d.scale = {0.0, 1.2};
  EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(Sampling, JsonRoundTrip) {
  TransformDistribution d;
  d.dx = {-2, 3};
  const auto back = transform_distribution_from_json(to_json(d));
  EXPECT_EQ(back.dx, d.dx);
  EXPECT_EQ(back.smoothing_sigma, d.smoothing_sigma);
  EXPECT_THROW(transform_distribution_from_json({{"rotation", {0, 1}}}), std::invalid_argument);
  const auto t = transform_params_from_json({{"dx", 1.5}, {"brightness", 0.8}});
  EXPECT_EQ(t.dx, 1.5);
  EXPECT_EQ(t.scale, 1.0);
}

TEST(ComposeAfterResize, SameSizeEqualsOverlay) {
  Tape tape;
  const Var bg = tape.constant(random_image(64, 64, 14));
  const Var patch = tape.constant(random_image(16, 16, 15));
  EXPECT_EQ(compose_after_resize(bg, patch, 64, 64, 5, 6).value(), overlay(bg, patch, 5, 6).value());
}

TEST(ComposeAfterResize, TopLeftBlockIsPatch) {
  Tape tape;
  const Tensor patch = random_image(32, 32, 16);
  const Tensor out =
      compose_after_resize(tape.constant(random_image(128, 128, 17)), tape.constant(patch), 64, 64, 0, 0)
          .value();
  EXPECT_EQ(out.shape(), (Shape{3, 64, 64}));
  EXPECT_EQ(crop(out, 0, 0, 32, 32), patch);
}

TEST(ComposeAfterResize, Errors) {
  Tape tape;
  const Var bg = tape.constant(Tensor({3, 64, 64}));
  EXPECT_THROW(compose_after_resize(bg, tape.constant(Tensor({3, 40, 40})), 32, 32, 0, 0),
               PlacementError);
  EXPECT_THROW(compose_after_resize(bg, tape.constant(Tensor({3, 8, 8})), 80, 80, 0, 0),
               std::invalid_argument);
}

TEST(ComposeAfterResize, TargetLogitGradientMatchesFiniteDifferences) {
  NetworkSpec spec = reference_detector_spec(4, 2);
  spec.input_shape = {3, 64, 64};
  Rng rng(18);
  const Detector det(Network::initialized(spec, rng), AnchorSpec{}, reference_class_names());
  const Tensor bg = random_image(128, 128, 19);
  const ScalarFn fn = [&](Tape& tape, const Var& patch) {
    const Var img = compose_after_resize(tape.constant(bg), patch, 64, 64, 20.5, 16);
    return sum(select_column(det.forward(tape, img).logits, 2));
  };
  // Interior values keep the clamp inactive.
  EXPECT_LT(grad_check(fn, random_image(16, 16, 20, 0.1, 0.9)), 1e-4);
}

TEST(ComposeAfterResize, BackgroundResizeDoesNotDiluteGradient) {
  Tape tape;
  const Var patch = tape.leaf(random_image(8, 8, 21, 0.2, 0.8));
  const Var out = compose_after_resize(tape.constant(random_image(64, 64, 22)), patch, 32, 32, 4, 4);
  const Tensor g = tape.backward(sum(out))[patch];
  for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(TransformGradient, DefaultDistributionPassesGradCheck) {
  const TransformDistribution d;
  Rng rng(23);
  const Tensor bg = random_image(64, 64, 24, 0.05, 0.75);
  const Tensor patch = random_image(16, 16, 25, 0.05, 0.75);
  Rng wrng(26);
  Tensor w({3, 64, 64});
  for (double& v : w.data()) v = wrng.uniform(-1, 1);
  for (int k = 0; k < 20; ++k) {
    const auto t = sample_transform(d, rng);
    const ScalarFn plain = [&](Tape& tape, const Var& p) {
      return sum(apply_transform(p, tape.constant(bg), t, PlacementSpec{24, 24}));
    };
    const ScalarFn weighted = [&](Tape& tape, const Var& p) {
      return sum(mul(apply_transform(p, tape.constant(bg), t, PlacementSpec{24, 24}),
                     tape.constant(w)));
    };
    EXPECT_LT(grad_check(plain, patch), 1e-5) << "transform " << to_json(t).dump();
    EXPECT_LT(grad_check(weighted, patch), 1e-5) << "transform " << to_json(t).dump();
  }
}
