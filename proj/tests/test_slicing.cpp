#include <gtest/gtest.h>

#include <sstream>

#include "robwe/slicing.hpp"

using namespace robwe;
using namespace robwe::slicing;

TEST(CommonWatermark, DeterministicPerSeed) {
  EXPECT_EQ(generate_common_watermark(128, 4, 3).bits, generate_common_watermark(128, 4, 3).bits);
  EXPECT_NE(generate_common_watermark(128, 4, 3).bits, generate_common_watermark(128, 4, 4).bits);
}

TEST(CommonWatermark, BitBalance) {
  const auto c = generate_common_watermark(1000, 10, 1);
  double ones = 0.0;
  for (auto b : c.bits.bits()) ones += b;
  EXPECT_GT(ones / 1000.0, 0.4);
  EXPECT_LT(ones / 1000.0, 0.6);
}

TEST(CommonWatermark, OneBitPerClientAtBoundary) {
  const auto c = generate_common_watermark(6, 6, 1);
  ASSERT_EQ(c.num_slices(), 6u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(c.slice(k).size(), 1u);
}

TEST(CommonWatermark, TooFewBits) { EXPECT_THROW(generate_common_watermark(3, 4, 1), std::invalid_argument); }

TEST(CommonWatermark, RemainderToLastSlice) {
  const auto c = generate_common_watermark(10, 3, 1);
  EXPECT_EQ(c.bounds, (std::vector<std::size_t>{0, 3, 6, 10}));
}

TEST(AssignSlices, EqualSlices) {
  const auto c = generate_common_watermark(128, 4, 1);
  const auto a = assign_slices(c, 4, 1000, 250, 1);
  BitVector joined;
  for (const auto& s : a) {
    EXPECT_EQ(s.bits.size(), 32u);
    joined.append(s.bits);
  }
  EXPECT_EQ(joined, c.bits);
}

TEST(AssignSlices, ContiguousDisjointRegions) {
  const auto c = generate_common_watermark(128, 4, 1);
  const auto a = assign_slices(c, 4, 1000, 250, 1);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(a[k].region_begin, 250 * k);
    EXPECT_EQ(a[k].region_end, 250 * (k + 1));
  }
  EXPECT_TRUE(regions_disjoint(a));
}

TEST(AssignSlices, DefaultRegionUsesWholeRepresentation) {
  const auto c = generate_common_watermark(40, 4, 1);
  const auto a = assign_slices(c, 4, 1003, 0, 1);
  EXPECT_EQ(a[3].region_end, 1000u);
  EXPECT_EQ(a[0].region_size(), 250u);
}

TEST(AssignSlices, Errors) {
  const auto c = generate_common_watermark(128, 4, 1);
  EXPECT_THROW(assign_slices(c, 4, 1000, 20, 1), std::invalid_argument);   // region < slice
  EXPECT_THROW(assign_slices(c, 4, 1000, 300, 1), std::invalid_argument);  // 4 x 300 > 1000
  EXPECT_THROW(assign_slices(c, 5, 1000, 100, 1), std::invalid_argument);  // slice count mismatch
}

TEST(AssignSlices, PerClientMatrixSeeds) {
  const auto c = generate_common_watermark(64, 2, 1);
  const auto a = assign_slices(c, 2, 400, 0, 9);
  EXPECT_NE(a[0].matrix_seed, a[1].matrix_seed);
  EXPECT_EQ(a[0].matrix().entries, assign_slices(c, 2, 400, 0, 9)[0].matrix().entries);
  EXPECT_EQ(a[0].matrix().rows(), 200u);
  EXPECT_EQ(a[0].matrix().cols(), 32u);
}

TEST(RegionsDisjoint, DetectsOverlap) {
  std::vector<SliceAssignment> a(2);
  a[0].region_begin = 0;
  a[0].region_end = 10;
  a[1].region_begin = 9;
  a[1].region_end = 20;
  EXPECT_FALSE(regions_disjoint(a));
  a[1].region_begin = 10;
  EXPECT_TRUE(regions_disjoint(a));
}

TEST(ExtractSlice, ConvergedEmbeddingReadsBack) {
  const auto c = generate_common_watermark(64, 4, 2);
  const auto a = assign_slices(c, 4, 800, 0, 2);
  Rng rng(1);
  std::vector<double> rep(800);
  for (auto& v : rep) v = rng.normal() * 0.1;
  for (const auto& s : a) {
    const auto e = s.matrix();
    for (int step = 0; step < 300; ++step) nn::apply_sgd(rep, slice_loss_and_grad(rep, s, e, s.bits).grad, 0.1);
  }
  for (const auto& s : a) EXPECT_EQ(wm::detection_rate(s.bits, extract_slice(rep, s)), 1.0);
  EXPECT_EQ(reconstruct_common(rep, a), c.bits);
}

TEST(ExtractSlice, WrongClientMatrixIsNearChance) {
  double mean = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto c = generate_common_watermark(64, 2, seed);
    const auto a = assign_slices(c, 2, 400, 0, seed);
    Rng rng(seed + 100);
    std::vector<double> rep(400);
    for (auto& v : rep) v = rng.normal() * 0.1;
    const auto e = a[0].matrix();
    for (int step = 0; step < 300; ++step) nn::apply_sgd(rep, slice_loss_and_grad(rep, a[0], e, a[0].bits).grad, 0.1);
    ASSERT_EQ(wm::detection_rate(a[0].bits, extract_slice(rep, a[0])), 1.0);
    // Right region, client 1's projection.
    mean += wm::detection_rate(a[0].bits, extract_slice(rep, a[0], a[1].matrix())) / 20.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.15);
}

TEST(ExtractSlice, ZeroRegionReadsAllZero) {
  const auto c = generate_common_watermark(32, 2, 1);
  const auto a = assign_slices(c, 2, 100, 0, 1);
  std::vector<double> rep(100, 1.0);
  std::fill(rep.begin(), rep.begin() + 50, 0.0);
  EXPECT_EQ(extract_slice(rep, a[0]), BitVector(std::vector<std::uint8_t>(16, 0)));
}

TEST(ExtractSlice, OutOfRange) {
  const auto c = generate_common_watermark(32, 2, 1);
  const auto a = assign_slices(c, 2, 100, 0, 1);
  const std::vector<double> rep(60, 1.0);
  EXPECT_THROW(extract_slice(rep, a[1]), std::out_of_range);
}

TEST(SliceLoss, GradientSupportInsideRegion) {
  const auto c = generate_common_watermark(48, 3, 5);
  const auto a = assign_slices(c, 3, 300, 0, 5);
  Rng rng(2);
  std::vector<double> rep(300);
  for (auto& v : rep) v = rng.normal();
  for (const auto& s : a) {
    const auto g = slice_loss_and_grad(rep, s, s.matrix(), s.bits).grad;
    ASSERT_EQ(g.size(), rep.size());
    for (std::size_t i = 0; i < g.size(); ++i)
      if (i < s.region_begin || i >= s.region_end) EXPECT_EQ(g[i], 0.0);
  }
}

TEST(Manifest, RoundTrip) {
  const auto c = generate_common_watermark(100, 3, 5);
  const auto a = assign_slices(c, 3, 900, 0, 5);
  std::stringstream ss;
  write_manifest(ss, a);
  const auto back = read_manifest(ss);
  EXPECT_EQ(back, a);
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  std::stringstream bad_header("client,bits\n");
  EXPECT_THROW(read_manifest(bad_header), std::runtime_error);
  std::stringstream bad_row(std::string(manifest_header) + "\n0,8,ff,0,10,1\n1,8,zz,10,20,2\n");
  try {
    read_manifest(bad_row);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}
