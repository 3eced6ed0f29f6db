#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "nrgs/image_io.hpp"
#include "nrgs/priors.hpp"

using namespace nrgs;

TEST_CASE("validity mask thresholds inclusively") {
  Image black(4, 3, 3);
  auto m = validityMask(black, 0.2);
  CHECK(m.countTrue() == 0);

  Image gray(4, 3, 3, 0.5);
  m = validityMask(gray, 0.2);
  CHECK(m.countTrue() == 12);

  // pixel exactly at the threshold stays valid
  Image edge(1, 1, 3, 0.2);
  m = validityMask(edge, 0.2);
  CHECK(m.at(0, 0));
  Image below(1, 1, 3, 0.2 - 1e-9);
  CHECK(!validityMask(below, 0.2).at(0, 0));

  CHECK_THROWS_AS(validityMask(gray, 0.5), std::invalid_argument);
}

TEST_CASE("map mask uses a strict transmittance bound") {
  Image t(2, 1, 1);
  t.at(0, 0) = 1.0;   // empty map
  t.at(1, 0) = 0.0;   // fully covered
  auto m = mapMask(t, 0.1);
  CHECK(!m.at(0, 0));
  CHECK(m.at(1, 0));

  Image boundary(1, 1, 1, 0.1);
  CHECK(!mapMask(boundary, 0.1).at(0, 0));  // strict inequality
}

TEST_CASE("track mask covers the hull of corner points") {
  std::vector<Vec2> corners = {{0, 0}, {15, 0}, {15, 11}, {0, 11}};
  auto m = trackMask(corners, 16, 12);
  CHECK(m.countTrue() == 16 * 12);
}

TEST_CASE("track mask handles degenerate and empty inputs") {
  CHECK(trackMask({}, 8, 8).countTrue() == 0);
  CHECK(trackMask({{1, 1}, {5, 5}}, 8, 8).countTrue() == 0);

  // collinear: one-pixel dilated segment, verified against a distance oracle
  std::vector<Vec2> line = {{1, 4}, {4, 4}, {7, 4}};
  auto m = trackMask(line, 10, 9);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 10; ++x) {
      const double t = std::clamp((x - 1.0) / 6.0, 0.0, 1.0);
      const Vec2 proj(1 + 6 * t, 4);
      const bool expect = (Vec2(x, y) - proj).norm() <= 1.0;
      CHECK(m.at(x, y) == expect);
    }
}

TEST_CASE("concave hull digs into a reflex corner the convex hull spans") {
  // an L-shaped unit grid: the convex hull bridges the missing quadrant
  std::vector<Vec2> pts;
  for (int y = 0; y <= 9; ++y)
    for (int x = 0; x <= 9; ++x)
      if (x < 5 || y < 5) pts.emplace_back(x, y);
  const auto hull = concaveHull(pts, 4.0);
  REQUIRE(hull.size() >= 5);
  CHECK(!pointInPolygon(Vec2(8.0, 8.0), hull));  // center of the missing quadrant
  CHECK(pointInPolygon(Vec2(2.0, 2.0), hull));
  CHECK(pointInPolygon(Vec2(8.0, 2.0), hull));
  CHECK(pointInPolygon(Vec2(2.0, 8.0), hull));
}

TEST_CASE("covis mask is the pointwise intersection") {
  std::mt19937_64 rng(3);
  MaskImage a(9, 7), b(9, 7);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      a.set(x, y, rng() & 1);
      b.set(x, y, rng() & 1);
    }
  const auto c = covisMask(a, b);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      CHECK(c.at(x, y) == (a.at(x, y) && b.at(x, y)));
      if (c.at(x, y)) {
        CHECK(a.at(x, y));
        CHECK(b.at(x, y));
      }
    }
  const MaskImage ones(3, 3, true), zeros(3, 3, false);
  CHECK(covisMask(ones, ones).countTrue() == 9);
  CHECK(covisMask(ones, zeros).countTrue() == 0);
}

TEST_CASE("file prior provider reads and validates the dataset layout") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/nrgs_test_priors";
  fs::remove_all(dir);
  fs::create_directories(dir + "/depth");
  fs::create_directories(dir + "/tracks");

  Image depth(6, 5, 1);
  for (size_t i = 0; i < depth.size(); ++i) depth.data()[i] = 40.0 + 0.1 * i;
  saveDepthPng16(dir + "/depth/000000.png", depth);
  std::vector<Track> tracks(2);
  tracks[0] = {7, 0, Vec2(1.5, 2.5), Vec2(2.0, 3.0), Vec3(1, 2, 50), Vec3(1.1, 2.1, 50.2)};
  tracks[1] = {3, 0, Vec2(4, 1), Vec2(4.5, 1.5), Vec3(-2, 0, 45), Vec3(-2, 0, 45)};
  saveTracksCsv(dir + "/tracks/000000.csv", tracks);

  FilePriorProvider provider(dir, 6, 5);
  const Priors p = provider.acquire(0);
  CHECK(p.depth.width() == 6);
  CHECK(p.tracks.size() == 2);
  CHECK(p.tracks[0].id == 3);  // sorted by id
  CHECK(p.tracks[1].u0.x() == doctest::Approx(1.5));
  CHECK(std::abs(p.depth.at(1, 0) - depth.at(1, 0)) <= kDepthPngScale / 2 + 1e-12);

  CHECK_THROWS_WITH_AS(provider.acquire(1), doctest::Contains("MissingPriorFile"), std::runtime_error);

  FilePriorProvider wrong(dir, 7, 5);
  CHECK_THROWS_WITH_AS(wrong.acquire(0), doctest::Contains("ShapeMismatch"), std::runtime_error);
}

TEST_CASE("track csv roundtrip preserves values exactly") {
  std::vector<Track> tracks(3);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-10, 90);
  for (size_t i = 0; i < tracks.size(); ++i) {
    tracks[i].id = static_cast<int>(i * 11);
    tracks[i].t0Frame = static_cast<int>(i);
    tracks[i].u0 = Vec2(u(rng), u(rng));
    tracks[i].ut = Vec2(u(rng), u(rng));
    tracks[i].x0 = Vec3(u(rng), u(rng), u(rng));
    tracks[i].xt = Vec3(u(rng), u(rng), u(rng));
  }
  const std::string path = "/tmp/nrgs_test_tracks.csv";
  saveTracksCsv(path, tracks);
  const auto back = loadTracksCsv(path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == tracks[i].id);
    CHECK(back[i].u0 == tracks[i].u0);
    CHECK(back[i].xt == tracks[i].xt);
  }
}

TEST_CASE("grayscale conversion matches the channel-equal case") {
  Image g(3, 2, 3);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x)
      for (int c = 0; c < 3; ++c) g.at(x, y, c) = 0.1 * (x + y);
  const Image gray = toGrayscale(g);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) CHECK(gray.at(x, y) == doctest::Approx(0.1 * (x + y)).epsilon(1e-12));
}
