#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "support.hpp"
#include "tsuda/perturb.hpp"
#include "tsuda/synthdata.hpp"

using namespace tsuda;

namespace {

Raster ramp_image(std::size_t h, std::size_t w) {
  Raster r(h, w);
  for (std::size_t i = 0; i < r.size(); ++i) r.values[i] = static_cast<float>(i % 97) / 96.0f;
  return r;
}

Raster real_frame(std::uint64_t seed) { return generate_sample(Domain::real, seed, DomainParams::real()).image; }

bool in_unit_range(const Raster& r) {
  return std::all_of(r.values.begin(), r.values.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
}

}  // namespace

TEST(PerturbUnlabeled, EveryFamilyPairKeepsShapeAndRange) {
  const Raster img = real_frame(3);
  for (auto iop : kIntensityOps)
    for (auto cop : kCorruptionOps)
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        const Raster out = perturb_unlabeled(img, PerturbSpec{{iop}, {cop}, seed});
        SCOPED_TRACE(std::string(name(iop)) + "+" + std::string(name(cop)));
        EXPECT_TRUE(out.same_dims(img));
        EXPECT_TRUE(in_unit_range(out));
      }
}

TEST(PerturbUnlabeled, DeterministicPerSeed) {
  const Raster img = real_frame(4);
  EXPECT_EQ(perturb_unlabeled(img, PerturbSpec{.rng_seed = 9}), perturb_unlabeled(img, PerturbSpec{.rng_seed = 9}));
  int differing = 0;
  for (std::uint64_t s = 1; s <= 10; ++s)
    differing += perturb_unlabeled(img, PerturbSpec{.rng_seed = s}) != perturb_unlabeled(img, PerturbSpec{.rng_seed = s + 100});
  EXPECT_GE(differing, 8);
}

TEST(PerturbUnlabeled, EmptyFamilyRejected) {
  const Raster img = ramp_image(8, 8);
  EXPECT_THROW(perturb_unlabeled(img, PerturbSpec{{}, {CorruptionOp::fog}, 1}), std::invalid_argument);
  EXPECT_THROW(perturb_unlabeled(img, PerturbSpec{{IntensityOp::gamma}, {}, 1}), std::invalid_argument);
}

TEST(Intensity, Identities) {
  const Raster img = ramp_image(16, 16);
  EXPECT_EQ(solarize(img, 1.0f), img);
  EXPECT_EQ(gamma_shift(img, 1.0f), img);
  const Raster bc = brightness_contrast(img, 0.0f, 1.0f);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(bc.values[i], img.values[i], 1e-7);
}

TEST(Intensity, PosterizeTwoLevels) {
  const Raster out = posterize(ramp_image(16, 16), 2);
  for (float v : out.values) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  Raster r(1, 3);
  r.values = {0.2f, 0.5f, 0.9f};
  EXPECT_EQ(posterize(r, 2).values, (std::vector<float>{0.0f, 1.0f, 1.0f}));
  EXPECT_THROW(posterize(r, 1), std::invalid_argument);
}

TEST(Intensity, SolarizeInvertsAboveThreshold) {
  Raster r(1, 3);
  r.values = {0.2f, 0.8f, 0.95f};
  EXPECT_EQ(solarize(r, 0.75f).values, (std::vector<float>{0.2f, 1.0f - 0.8f, 1.0f - 0.95f}));
}

TEST(Intensity, HistEqualizeSpreadsRange) {
  Raster r(8, 8);
  for (std::size_t i = 0; i < r.size(); ++i) r.values[i] = 0.4f + 0.1f * static_cast<float>(i) / 63.0f;
  const Raster out = hist_equalize(r);
  EXPECT_FLOAT_EQ(*std::min_element(out.values.begin(), out.values.end()), 0.0f);
  EXPECT_FLOAT_EQ(*std::max_element(out.values.begin(), out.values.end()), 1.0f);
  EXPECT_TRUE(std::is_sorted(out.values.begin(), out.values.end()));
}

TEST(Corruption, GaussianNoiseSigma) {
  Raster flat(128, 128, 0.5f);
  Rng rng(1);
  const Raster out = gaussian_noise(flat, 0.05f, rng);
  double ss = 0;
  for (float v : out.values) ss += (v - 0.5) * (v - 0.5);
  const double sd = std::sqrt(ss / static_cast<double>(out.size()));
  EXPECT_NEAR(sd, 0.05, 0.05 * 0.2);
}

TEST(Corruption, MotionBlurPreservesConstantAndValidatesArgs) {
  Raster flat(8, 8, 0.3f);
  for (int a : {0, 45, 90, 135})
    for (float v : motion_blur(flat, 5, a).values) EXPECT_NEAR(v, 0.3f, 1e-6);
  EXPECT_THROW(motion_blur(flat, 4, 0), std::invalid_argument);
  EXPECT_THROW(motion_blur(flat, 3, 30), std::invalid_argument);
}

TEST(Corruption, DropoutOnlyZeroes) {
  const Raster img = ramp_image(32, 32);
  Rng rng(2);
  const Raster out = pixel_dropout(img, 0.5, rng);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_TRUE(out.values[i] == img.values[i] || out.values[i] == 0.0f);
}

TEST(Geometry, FlipAndTurnIdentities) {
  Raster img = ramp_image(6, 10);
  EXPECT_EQ(hflip(hflip(img)), img);
  EXPECT_EQ(vflip(vflip(img)), img);
  Raster r = img;
  for (int i = 0; i < 4; ++i) r = rot90(r);
  EXPECT_EQ(r, img);
  const Raster once = rot90(img);
  EXPECT_EQ(once.height, 10u);
  EXPECT_EQ(once.width, 6u);
  EXPECT_EQ(rot90(rot90(img)), hflip(vflip(img)));
  EXPECT_EQ(once.at(0, 0), img.at(0, 9));
}

TEST(AugmentLabeled, MaskMovesWithImageAndKeepsArea) {
  const Sample s = generate_sample(Domain::sim, 12, DomainParams::sim());
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    AugmentSpec spec;
    spec.intensity_family.clear();
    spec.rng_seed = seed;
    const auto [img, mask] = augment_labeled(s.image, *s.mask, spec);
    EXPECT_EQ(foreground_count(mask), foreground_count(*s.mask));
    std::vector<float> a = img.values, b = s.image.values;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
    // Geometry is applied jointly: the foreground pixels carry the same values.
    double fa = 0, fb = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask.values[i]) fa += img.values[i];
      if (s.mask->values[i]) fb += s.image.values[i];
    }
    EXPECT_NEAR(fa, fb, 1e-3);
  }
}

TEST(AugmentLabeled, IntensityLeavesMaskAlone) {
  const Sample s = generate_sample(Domain::sim, 13, DomainParams::sim());
  AugmentSpec spec{.hflip = false, .vflip = false, .rot90 = false, .rng_seed = 5};
  const auto [img, mask] = augment_labeled(s.image, *s.mask, spec);
  EXPECT_EQ(mask, *s.mask);
  EXPECT_TRUE(in_unit_range(img));
  EXPECT_THROW(augment_labeled(s.image, BinaryMask(8, 8), spec), std::invalid_argument);
}

TEST(CircularMask, CornersBlackCentreKeptIdempotent) {
  Raster img(64, 64, 0.6f);
  BinaryMask mask(64, 64, 1);
  Rng rng(3);
  auto [out, m] = apply_circular_mask(img, mask, rng);
  for (auto [y, x] : {std::pair{0, 0}, {0, 63}, {63, 0}, {63, 63}}) {
    EXPECT_EQ(out.at(y, x), 0.0f);
    EXPECT_EQ(m.at(y, x), 0);
  }
  EXPECT_EQ(out.at(32, 32), 0.6f);
  EXPECT_EQ(m.at(32, 32), 1);
  Rng again(3);
  auto [out2, m2] = apply_circular_mask(out, m, again);
  EXPECT_EQ(out2, out);
  EXPECT_EQ(m2, m);
}

TEST(CircularMask, RadiusVariesWithSeed) {
  std::set<std::size_t> areas;
  for (std::uint64_t s = 1; s <= 10; ++s) {
    Rng rng(s);
    areas.insert(foreground_count(apply_circular_mask(Raster(64, 64, 1.0f), BinaryMask(64, 64, 1), rng).second));
  }
  EXPECT_GE(areas.size(), 5u);
}
