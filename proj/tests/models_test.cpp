#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <thread>

#include "advobj/bundle.hpp"
#include "advobj/gradcheck.hpp"
#include "advobj/models.hpp"
#include "advobj/rng.hpp"
#include "advobj/scene.hpp"
#include "advobj/train.hpp"

using namespace advobj;

namespace {

Generator random_generator(std::uint64_t seed = 3) {
  Rng rng(seed);
  return Generator(Network::initialized(reference_generator_spec(32), rng));
}

Detector random_detector(std::uint64_t seed = 4) {
  Rng rng(seed);
  return Detector(Network::initialized(reference_detector_spec(4, 2), rng), AnchorSpec{},
                  reference_class_names());
}

Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Rewrites the manifest and recomputes the header so only the intended
// field changes.
std::string with_manifest(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
  const auto eol = bytes.find('\n');
  std::string tag;
  std::size_t len = 0;
  char crc[16];
  std::sscanf(bytes.substr(0, eol).c_str(), "%*s %zu %15s", &len, crc);
  auto manifest = nlohmann::json::parse(bytes.substr(eol + 1, len));
  edit(manifest);
  const std::string m = manifest.dump();
  char header[64];
  std::snprintf(header, sizeof header, "advobj-bundle %zu %08x\n", m.size(), crc32_of(m));
  return header + m + bytes.substr(eol + 1 + len);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("advobj_models_" + name);
}

}  // namespace

TEST(Generator, OutputInUnitRange) {
  const auto g = random_generator();
  Rng rng(11);
  for (int s = 0; s < 16; ++s) {
    Tensor z({32});
    for (double& v : z.data()) v = 3.0 * rng.normal();
    const Tensor p = g.generate(z);
    EXPECT_EQ(p.shape(), (Shape{3, 32, 32}));
    for (double v : p.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Generator, Deterministic) {
  const auto g = random_generator();
  const Tensor z = random_tensor({32}, 5, -1, 1);
  EXPECT_EQ(g.generate(z), g.generate(z));
}

TEST(Generator, WrongLatentLengthThrows) {
  const auto g = random_generator();
  EXPECT_THROW(g.generate(Tensor({31})), ShapeError);
  EXPECT_THROW(g.generate(Tensor({32, 1})), ShapeError);
}

TEST(Generator, LatentGradientMatchesFiniteDifferences) {
  const auto g = random_generator();
  const Tensor w = random_tensor({3, 32, 32}, 21, -1, 1);
  const auto report = grad_check_report(
      [&](Tape& tape, const Var& z) {
        return sum(mul(g.generate(tape, z), tape.constant(w)));
      },
      random_tensor({32}, 6, -1, 1));
  EXPECT_LT(report.max_rel_error, 1e-5);
}

TEST(Detector, ProposalCountFollowsGrid) {
  const auto d = random_detector();
  EXPECT_EQ(d.proposal_count(), 8u * 8u * 2u);
  EXPECT_EQ(anchor_boxes(64, 96, AnchorSpec{16, {24.0}}).size(), 4u * 6u);
}

TEST(Detector, ProposalsInsideImageAndSoftmaxNormalized) {
  const auto d = random_detector();
  const auto scores = d.detect(random_tensor({3, 128, 128}, 8));
  ASSERT_EQ(scores.size(), 128u);
  for (const auto& s : scores) {
    EXPECT_GE(s.box.x, 0.0);
    EXPECT_GE(s.box.y, 0.0);
    EXPECT_LE(s.box.x + s.box.w, 128.0);
    EXPECT_LE(s.box.y + s.box.h, 128.0);
    ASSERT_EQ(s.probs.size(), 4u);
    double total = 0.0, mx = s.logits[0];
    for (double l : s.logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : s.logits) z += std::exp(l - mx);
    for (std::size_t c = 0; c < 4; ++c) {
      total += s.probs[c];
      EXPECT_NEAR(s.probs[c], std::exp(s.logits[c] - mx) / z, 1e-9);
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Detector, ShapeMismatchThrows) {
  const auto d = random_detector();
  EXPECT_THROW(d.detect(Tensor({3, 64, 64})), ShapeError);
}

// The strongest-gradient pixels plus a random sample; a full sweep over
// 49k pixels is too slow for the unit suite.
std::vector<std::size_t> probe_coords(const Tensor& grad, std::size_t top, std::size_t random,
                                      std::uint64_t seed) {
  std::vector<std::size_t> idx(grad.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                    [&](std::size_t a, std::size_t b) { return std::abs(grad[a]) > std::abs(grad[b]); });
  idx.resize(top);
  Rng rng(seed);
  for (std::size_t k = 0; k < random; ++k)
    idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(grad.size()) - 1)));
  return idx;
}

TEST(Detector, MaxTargetLogitGradCheck) {
  const auto d = random_detector();
  const ScalarFn fn = [&](Tape& tape, const Var& x) {
    const auto out = d.forward(tape, x);
    const Var col = select_column(out.logits, 2);
    std::size_t best = 0;
    for (std::size_t i = 1; i < col.value().size(); ++i)
      if (col.value()[i] > col.value()[best]) best = i;
    return sum(gather(col, {best}));
  };
  const Tensor x = random_tensor({3, 128, 128}, 9);
  const auto report = grad_check_report(fn, x, probe_coords(analytic_gradient(fn, x), 200, 200, 31));
  EXPECT_LT(report.max_rel_error, 1e-4);
}

TEST(Detector, ConcurrentDetectAgrees) {
  const auto d = random_detector();
  const Tensor img = random_tensor({3, 128, 128}, 10);
  std::vector<ProposalScore> a, b;
  std::thread t1([&] { a = d.detect(img); });
  std::thread t2([&] { b = d.detect(img); });
  t1.join();
  t2.join();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].logits, b[i].logits);
}

TEST(CropProposal, FullBoxIsIdentity) {
  Tape tape;
  const Tensor img = random_tensor({3, 12, 10}, 12);
  const Var c = crop_proposal(tape.constant(img), Box{0, 0, 10, 12}, 12, 10);
  EXPECT_EQ(c.value(), img);
}

TEST(CropProposal, UnitBoxAtOriginIsTopLeftPixel) {
  Tape tape;
  const Tensor img = random_tensor({3, 6, 6}, 13);
  const Var c = crop_proposal(tape.constant(img), Box{0, 0, 1, 1}, 1, 1);
  for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ(c.value().at(ch, 0, 0), img.at(ch, 0, 0));
}

TEST(CropProposal, HalfPixelOffsetAveragesNeighbours) {
  Tape tape;
  const Tensor img = random_tensor({3, 6, 6}, 14);
  // A unit box centred on the corner shared by pixels (1,1), (1,2), (2,1), (2,2).
  const Var c = crop_proposal(tape.constant(img), Box{1.5, 1.5, 1, 1}, 1, 1);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double expect =
        (img.at(ch, 1, 1) + img.at(ch, 1, 2) + img.at(ch, 2, 1) + img.at(ch, 2, 2)) / 4.0;
    EXPECT_NEAR(c.value().at(ch, 0, 0), expect, 1e-12);
  }
  // Horizontal half-pixel shift only.
  const Var h = crop_proposal(tape.constant(img), Box{2.5, 3, 1, 1}, 1, 1);
  EXPECT_NEAR(h.value().at(0, 0, 0), 0.5 * (img.at(0, 3, 2) + img.at(0, 3, 3)), 1e-12);
}

TEST(CropProposal, OutOfBoundsThrows) {
  Tape tape;
  const Var img = tape.constant(Tensor({3, 8, 8}));
  EXPECT_THROW(crop_proposal(img, Box{4, 4, 5, 2}, 2, 2), std::out_of_range);
  EXPECT_THROW(crop_proposal(img, Box{-1, 0, 2, 2}, 2, 2), std::out_of_range);
}

TEST(Bundle, RoundTripIsExact) {
  const auto d = random_detector();
  const auto b = to_bundle(d, {{"note", "x"}});
  const auto path = temp_path("rt.bundle");
  save_bundle(b, path);
  const auto loaded = load_bundle(path);
  EXPECT_TRUE(loaded == b);
  EXPECT_EQ(loaded.architecture, b.architecture);
  EXPECT_EQ(loaded.weights, b.weights);

  const Detector back = detector_from_bundle(loaded);
  const Tensor img = random_tensor({3, 128, 128}, 15);
  const auto q = Detector(quantize_to_float32(d.network()), d.anchors(), d.class_names());
  EXPECT_EQ(back.detect(img)[17].logits, q.detect(img)[17].logits);
  std::filesystem::remove(path);
}

TEST(Bundle, GeneratorRoundTrip) {
  const auto g = random_generator();
  const Generator back = generator_from_bundle(parse_bundle(serialize_bundle(to_bundle(g))));
  const Generator q(quantize_to_float32(g.network()));
  const Tensor z = random_tensor({32}, 16, -1, 1);
  EXPECT_EQ(back.generate(z), q.generate(z));
  EXPECT_THROW(detector_from_bundle(to_bundle(g)), BundleFormatError);
}

TEST(Bundle, FlippedBlobByteIsChecksumError) {
  std::string bytes = serialize_bundle(to_bundle(random_generator()));
  bytes[bytes.size() - 100] ^= 0x10;
  EXPECT_THROW(parse_bundle(bytes), ChecksumError);
}

TEST(Bundle, FlippedManifestByteIsChecksumError) {
  std::string bytes = serialize_bundle(to_bundle(random_generator()));
  bytes[bytes.find('\n') + 5] ^= 0x01;
  EXPECT_THROW(parse_bundle(bytes), ChecksumError);
}

TEST(Bundle, UnknownVersionRejected) {
  const std::string bytes = serialize_bundle(to_bundle(random_generator()));
  const std::string bumped = with_manifest(bytes, [](nlohmann::json& m) { m["version"] = 999; });
  EXPECT_THROW(parse_bundle(bumped), UnsupportedVersionError);
}

TEST(Bundle, TruncatedBlobRejected) {
  const std::string bytes = serialize_bundle(to_bundle(random_generator()));
  EXPECT_THROW(parse_bundle(bytes.substr(0, bytes.size() - 7)), TruncatedBundleError);
  EXPECT_THROW(parse_bundle(bytes.substr(0, 20)), TruncatedBundleError);
}

TEST(Bundle, ErrorsAreDistinct) {
  const std::string bytes = serialize_bundle(to_bundle(random_generator()));
  std::string flipped = bytes;
  flipped.back() ^= 0x01;
  try {
    parse_bundle(flipped);
    FAIL();
  } catch (const UnsupportedVersionError&) {
    FAIL();
  } catch (const TruncatedBundleError&) {
    FAIL();
  } catch (const ChecksumError&) {
  }
}

TEST(Scene, SameSeedSamePixels) {
  const auto spec = SceneSpec::reference();
  const auto a = render_scene(spec, 7), b = render_scene(spec, 7);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.annotations.size(), b.annotations.size());
  EXPECT_FALSE(render_scene(spec, 8).image == a.image);
}

TEST(Scene, PixelsInUnitRange) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = render_scene(SceneSpec::reference(), seed);
    for (double v : s.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Scene, SignFreeHasNoAnnotations) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    EXPECT_TRUE(render_scene(SceneSpec::sign_free(), seed).annotations.empty());
  }
}

TEST(Scene, CircleCentreMatchesPalette) {
  auto spec = SceneSpec::reference();
  spec.noise = 0.0;
  spec.min_signs = 1;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = render_scene(spec, seed);
    for (const auto& ann : s.annotations) {
      const auto& cls = spec.classes[ann.class_id - 1];
      if (cls.shape == SignShape::kTriangle) continue;
      const auto cx = static_cast<std::size_t>(ann.box.x + ann.box.w / 2);
      const auto cy = static_cast<std::size_t>(ann.box.y + ann.box.h / 2);
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_DOUBLE_EQ(s.image.at(ch, cy, cx), cls.fill[ch]);
      ++checked;
    }
  }
  EXPECT_GT(checked, 10u);
}

TEST(Scene, AnnotationsInsideImageAndDisjoint) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = render_scene(SceneSpec::reference(), seed);
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      const Box& b = s.annotations[i].box;
      EXPECT_GE(b.x, 0.0);
      EXPECT_LE(b.x + b.w, 128.0);
      for (std::size_t j = i + 1; j < s.annotations.size(); ++j)
        EXPECT_FALSE(b.intersects(s.annotations[j].box));
    }
  }
}

TEST(Scene, SpecJsonRoundTripAndErrors) {
  const auto spec = SceneSpec::reference();
  const auto back = scene_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_EQ(render_scene(back, 3).image, render_scene(spec, 3).image);

  auto j = to_json(spec);
  j["colour"] = 1;
  try {
    scene_spec_from_json(j);
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_NE(std::string(e.what()).find("colour"), std::string::npos);
  }
  j = to_json(spec);
  j["background"] = "plaid";
  EXPECT_THROW(scene_spec_from_json(j), SpecError);
  j = to_json(spec);
  j["classes"][0]["shape"] = "hexagon";
  EXPECT_THROW(scene_spec_from_json(j), SpecError);
}

TEST(Patch, DeterministicAndInRange) {
  const PatchSpec spec;
  EXPECT_EQ(render_patch(spec, 4), render_patch(spec, 4));
  const Tensor p = render_patch(spec, 5);
  EXPECT_EQ(p.shape(), (Shape{3, 32, 32}));
  for (double v : p.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Training, DetectorDeterministicAndUntrainedFails) {
  DetectorTrainConfig c;
  c.train_scenes = 6;
  c.epochs = 1;
  c.heldout_scenes = 10;
  c.require_targets = false;
  const auto a = train_detector(c);
  const auto b = train_detector(c);
  EXPECT_EQ(serialize_bundle(to_bundle(a.detector)), serialize_bundle(to_bundle(b.detector)));

  c.epochs = 0;
  c.require_targets = true;
  try {
    train_detector(c);
    FAIL();
  } catch (const TrainingTargetError& e) {
    EXPECT_FALSE(e.metrics().at("targets_met").get<bool>());
    EXPECT_TRUE(e.metrics().contains("detected_rate"));
  }
}

TEST(Training, GeneratorDeterministicAndInRange) {
  GeneratorTrainConfig c;
  c.train_patches = 8;
  c.heldout_patches = 4;
  c.epochs = 1;
  c.require_targets = false;
  const auto a = train_generator(c);
  const auto b = train_generator(c);
  EXPECT_EQ(serialize_bundle(to_bundle(a.generator)), serialize_bundle(to_bundle(b.generator)));

  c.epochs = 0;
  c.require_targets = true;
  EXPECT_THROW(train_generator(c), TrainingTargetError);
}
