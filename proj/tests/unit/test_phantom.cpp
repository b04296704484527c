#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "dosediff/sample_io.hpp"

using namespace dosediff;
using namespace dosediff::data;

namespace {

double masked_mean(const std::vector<float>& v, const std::vector<float>& m) {
  double s = 0.0, n = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (m[i] > 0.0f) {
      s += v[i];
      n += 1.0;
    }
  return s / n;
}

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() /
           ("dosediff_phantom_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Phantom, SameSeedBitIdentical) {
  EXPECT_EQ(generate_phantom(7, 32, 3), generate_phantom(7, 32, 3));
  EXPECT_NE(generate_phantom(7, 32, 3).dose, generate_phantom(8, 32, 3).dose);
}

TEST(Phantom, PtvMeanDoseIsOne) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = generate_phantom(seed, 16 + 16 * (seed % 3), 1 + seed % 4);
    EXPECT_NEAR(masked_mean(s.dose, s.ptv), 1.0, 1e-6) << seed;
  }
}

TEST(Phantom, GeometryInvariants) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const std::size_t H = seed % 2 ? 16 : 32;
    const auto s = generate_phantom(seed, H, 3);
    const auto body = body_mask(s);
    ASSERT_EQ(s.oars.size(), 3u);
    double ptv_n = 0.0;
    for (std::size_t p = 0; p < s.pixels(); ++p) {
      EXPECT_TRUE(s.ptv[p] == 0.0f || s.ptv[p] == 1.0f);
      EXPECT_GE(s.ct[p], 0.0f);
      EXPECT_LE(s.ct[p], 1.0f);
      EXPECT_GE(s.dose[p], 0.0f);
      if (s.ptv[p] > 0.0f) EXPECT_GT(body[p], 0.0f);
      if (body[p] == 0.0f) EXPECT_EQ(s.dose[p], 0.0f);
      for (const auto& m : s.oars) {
        EXPECT_TRUE(m[p] == 0.0f || m[p] == 1.0f);
        if (m[p] > 0.0f) EXPECT_GT(body[p], 0.0f);
      }
      ptv_n += s.ptv[p];
    }
    EXPECT_GT(ptv_n, 0.0);
    for (const auto& m : s.oars) {
      EXPECT_GT(masked_mean(s.dose, s.ptv), masked_mean(s.dose, m)) << "seed " << seed;
      if (s.meta.at("oar_overlap") == "0")
        for (std::size_t p = 0; p < s.pixels(); ++p) EXPECT_FALSE(m[p] > 0.0f && s.ptv[p] > 0.0f);
    }
  }
}

TEST(Phantom, MetadataRecordsProvenance) {
  const auto s = generate_phantom(11, 16, 2, 4);
  EXPECT_EQ(s.meta.at("seed"), "11");
  EXPECT_EQ(s.meta.at("beam_count"), "4");
  EXPECT_EQ(s.meta.at("generator_version"), std::to_string(kGeneratorVersion));
  EXPECT_EQ(std::count(s.meta.at("beam_angles").begin(), s.meta.at("beam_angles").end(), ','), 3);
}

TEST(Phantom, NoAttenuationSingleBeamDependsOnlyOnLateralDistance) {
  PhantomOptions opt;
  opt.mu = 0.0;
  const auto g = make_geometry(3, 32, 2, 1, opt);
  const auto s = render_phantom(g, 3, opt);
  const double sigma = opt.sigma_fraction * 32.0;
  const double ux = std::cos(g.beam_angles[0]), uy = std::sin(g.beam_angles[0]);
  double ratio = -1.0;
  const auto body = body_mask(s);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 32; ++j) {
      if (body[i * 32 + j] == 0.0f) continue;
      const double rx = j + 0.5 - g.centroid_x, ry = i + 0.5 - g.centroid_y;
      const double lateral = rx * uy - ry * ux;
      const double profile = std::exp(-lateral * lateral / (2 * sigma * sigma));
      if (profile < 1e-3) continue;
      const double r = s.dose[i * 32 + j] / profile;
      if (ratio < 0) ratio = r;
      EXPECT_NEAR(r / ratio, 1.0, 1e-6);
    }
  // And along the axis itself the analytic dose is constant in depth.
  const double d0 = beam_dose(g, g.centroid_x, g.centroid_y, opt);
  for (double t = -6.0; t <= 6.0; t += 0.5) {
    const double x = g.centroid_x + t * ux, y = g.centroid_y + t * uy;
    if (g.body.contains(x, y)) EXPECT_NEAR(beam_dose(g, x, y, opt), d0, 1e-12);
  }
}

TEST(Phantom, AttenuationDecaysWithDepth) {
  const auto g = make_geometry(5, 64, 1, 1);
  const double ux = std::cos(g.beam_angles[0]), uy = std::sin(g.beam_angles[0]);
  double prev = std::numeric_limits<double>::infinity();
  for (double t = -20.0; t <= 20.0; t += 1.0) {
    const double x = g.centroid_x + t * ux, y = g.centroid_y + t * uy;
    if (!g.body.contains(x, y)) continue;
    const double d = beam_dose(g, x, y);
    EXPECT_NEAR(d, std::exp(-0.02 * g.body.depth(x, y, ux, uy)), 1e-12);
    EXPECT_LT(d, prev);
    prev = d;
  }
}

TEST(Phantom, EllipseDepthMatchesChordGeometry) {
  // Circle of radius 5 at the origin; ray along +x through (x, 0) has
  // travelled x + 5 inside.
  const Ellipse c{0.0, 0.0, 5.0, 5.0, 0.3};
  for (double x : {-4.5, -1.0, 0.0, 2.0, 4.9}) EXPECT_NEAR(c.depth(x, 0.0, 1.0, 0.0), x + 5.0, 1e-12);
  EXPECT_EQ(c.depth(6.0, 0.0, 1.0, 0.0), 0.0);
  // Rotated ellipse, ray along its major axis.
  const Ellipse e{1.0, 2.0, 4.0, 2.0, std::numbers::pi / 2};
  EXPECT_NEAR(e.depth(1.0, 2.0, 0.0, 1.0), 4.0, 1e-12);
}

TEST(Phantom, Preconditions) {
  EXPECT_THROW(generate_phantom(1, 8, 3), std::invalid_argument);
  EXPECT_THROW(generate_phantom(1, 16, 0), std::invalid_argument);
  EXPECT_THROW(generate_phantom(1, 16, 3, 0), std::invalid_argument);
}

TEST(Split, DefaultProportionsDisjointExhaustive) {
  const auto s = make_split(320, 9);
  EXPECT_EQ(s.train.size(), 220u);
  EXPECT_EQ(s.val.size(), 20u);
  EXPECT_EQ(s.test.size(), 80u);
  for (std::size_t n : {1, 5, 8, 13, 64, 100}) {
    const auto sp = make_split(n, 3);
    std::set<std::size_t> all;
    for (const auto* v : {&sp.train, &sp.val, &sp.test}) all.insert(v->begin(), v->end());
    EXPECT_EQ(all.size(), n);
    EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), n);
    EXPECT_EQ(sp.train.size(), static_cast<std::size_t>(std::llround(n * 220.0 / 320.0)));
  }
  EXPECT_EQ(make_split(40, 1), make_split(40, 1));
  EXPECT_NE(make_split(40, 1).train, make_split(40, 2).train);
}

TEST(Normalize, EndpointsAndInverse) {
  EXPECT_EQ(normalize_dose(0.0), -1.0);
  EXPECT_EQ(normalize_dose(1.25), 1.0);
  const auto s = generate_phantom(2, 16, 3);
  const auto b = normalize_batch(std::vector<PhantomSample>{s});
  for (std::size_t p = 0; p < s.pixels(); ++p)
    if (s.dose[p] <= kDoseScale) EXPECT_EQ(denormalize_dose(b.dose[p]), s.dose[p]);
}

TEST(Normalize, ConditionChannelOrder) {
  const auto a = generate_phantom(1, 16, 3), c = generate_phantom(2, 16, 3);
  const auto b = normalize_batch(std::vector<PhantomSample>{a, c});
  ASSERT_EQ(b.condition.shape(), (Shape{2, 5, 16, 16}));
  ASSERT_EQ(b.dose.shape(), (Shape{2, 1, 16, 16}));
  const std::size_t P = 256;
  for (std::size_t p = 0; p < P; ++p) {
    EXPECT_EQ(b.condition[p], a.ct[p]);
    EXPECT_EQ(b.condition[P + p], a.ptv[p]);
    EXPECT_EQ(b.condition[(2 + 2) * P + p], a.oars[2][p]);
    EXPECT_EQ(b.condition[5 * P + p], c.ct[p]);
  }
}

TEST(Normalize, ClampsAboveScale) {
  auto s = generate_phantom(2, 16, 1);
  s.dose[0] = 2.0f;
  s.dose[1] = 1.25f;
  const auto b = normalize_batch(std::vector<PhantomSample>{s});
  EXPECT_EQ(b.clamped, 1u);
  EXPECT_EQ(b.dose[0], 1.0);
  EXPECT_EQ(b.dose[1], 1.0);
}

TEST(Normalize, MixedBatchRejected) {
  EXPECT_THROW(normalize_batch(std::vector<PhantomSample>{generate_phantom(1, 16, 3), generate_phantom(1, 32, 3)}),
               ShapeError);
}

TEST(SampleIo, RoundTripIsBitExact) {
  const auto dir = temp_dir();
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto s = generate_phantom(seed, 16 * (seed + 1), 1 + seed);
    write_sample(dir / "a.spdp", s);
    const auto back = read_sample(dir / "a.spdp");
    EXPECT_EQ(back, s);
    write_sample(dir / "b.spdp", back);
    EXPECT_EQ(read_file(dir / "a.spdp"), read_file(dir / "b.spdp"));
  }
}

TEST(SampleIo, HeaderLayout) {
  const std::string bytes = encode_sample(generate_phantom(4, 16, 3));
  EXPECT_EQ(bytes.substr(0, 4), "SPDP");
  const auto h = peek_header(bytes);
  EXPECT_EQ(h.version, kSampleVersion);
  EXPECT_EQ(h.height, 16);
  EXPECT_EQ(h.width, 16);
  EXPECT_EQ(h.oar_count, 3);
  EXPECT_EQ(h.channel_count(), 6u);
  // little-endian u16 H right after version
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 16);
  EXPECT_EQ(static_cast<unsigned char>(bytes[7]), 0);
}

TEST(SampleIo, DistinctErrors) {
  const std::string good = encode_sample(generate_phantom(4, 16, 2));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_sample(bad), BadMagicError);
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(decode_sample(bad), VersionMismatchError);
  for (std::size_t cut : {std::size_t{2}, std::size_t{9}, good.size() / 2, good.size() - 1})
    EXPECT_THROW(decode_sample(good.substr(0, cut)), TruncatedError) << cut;
  EXPECT_THROW(decode_sample(good + "x"), SampleFormatError);
  EXPECT_THROW(decode_dose_map(good), SampleFormatError);
}

TEST(SampleIo, DoseOnlyRoundTrip) {
  DoseMap d{16, generate_phantom(5, 16, 1).dose, {{"case", "case_0003"}, {"seed", "12"}}};
  const std::string bytes = encode_dose_map(d);
  EXPECT_TRUE(peek_header(bytes).dose_only());
  EXPECT_EQ(peek_header(bytes).channel_count(), 1u);
  EXPECT_EQ(decode_dose_map(bytes), d);
  EXPECT_THROW(decode_sample(bytes), SampleFormatError);
}
