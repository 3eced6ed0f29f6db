#include "nrgs/priors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nrgs/image_io.hpp"

namespace nrgs {

namespace {

std::string frameFile(const std::string& dir, const char* sub, int frame, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%06d.%s", frame, ext);
  return dir + "/" + sub + "/" + buf;
}

}  // namespace

FilePriorProvider::FilePriorProvider(std::string datasetDir, int width, int height)
    : dir_(std::move(datasetDir)), width_(width), height_(height) {}

Priors FilePriorProvider::acquire(int frame) {
  Priors p;
  const std::string depthPath = frameFile(dir_, "depth", frame, "png");
  if (!std::filesystem::exists(depthPath))
    throw std::runtime_error("MissingPriorFile: " + depthPath);
  p.depth = loadDepthPng16(depthPath);
  if (p.depth.width() != width_ || p.depth.height() != height_)
    throw std::runtime_error("ShapeMismatch: depth prior size differs from frame size: " + depthPath);
  const std::string trackPath = frameFile(dir_, "tracks", frame, "csv");
  if (!std::filesystem::exists(trackPath))
    throw std::runtime_error("MissingPriorFile: " + trackPath);
  p.tracks = loadTracksCsv(trackPath);
  return p;
}

std::vector<Track> loadTracksCsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("MissingPriorFile: " + path);
  std::vector<Track> out;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Track t;
    char c;
    std::istringstream ss(line);
    ss >> t.id >> c >> t.t0Frame >> c >> t.u0.x() >> c >> t.u0.y() >> c >> t.ut.x() >> c >> t.ut.y() >> c >>
        t.x0.x() >> c >> t.x0.y() >> c >> t.x0.z() >> c >> t.xt.x() >> c >> t.xt.y() >> c >> t.xt.z();
    if (ss.fail()) throw std::runtime_error("MissingPriorFile: malformed track row in " + path);
    out.push_back(t);
  }
  std::sort(out.begin(), out.end(), [](const Track& a, const Track& b) { return a.id < b.id; });
  return out;
}

void saveTracksCsv(const std::string& path, const std::vector<Track>& tracks) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "id,t0,u0x,u0y,ux,uy,x0,y0,z0,x,y,z\n";
  char buf[512];
  for (const Track& t : tracks) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", t.id,
                  t.t0Frame, t.u0.x(), t.u0.y(), t.ut.x(), t.ut.y(), t.x0.x(), t.x0.y(), t.x0.z(), t.xt.x(),
                  t.xt.y(), t.xt.z());
    out << buf;
  }
}

MaskImage validityMask(const Image& rgbOrGray, double delta) {
  if (delta < 0 || delta >= 0.5) throw std::invalid_argument("validityMask: delta in [0, 0.5) required");
  const Image gray = toGrayscale(rgbOrGray);
  MaskImage m(gray.width(), gray.height());
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x) {
      const double g = gray.at(x, y);
      m.set(x, y, g >= delta && g <= 1.0 - delta);
    }
  return m;
}

MaskImage mapMask(const Image& transmittance, double tauT) {
  MaskImage m(transmittance.width(), transmittance.height());
  for (int y = 0; y < transmittance.height(); ++y)
    for (int x = 0; x < transmittance.width(); ++x) m.set(x, y, transmittance.at(x, y) < tauT);
  return m;
}

MaskImage covisMask(const MaskImage& mapM, const MaskImage& trackM) { return maskAnd(mapM, trackM); }

namespace {

double cross2(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

std::vector<Vec2> convexHull(std::vector<Vec2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  pts.erase(std::unique(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) { return a == b; }), pts.end());
  const int n = static_cast<int>(pts.size());
  if (n < 3) return pts;
  std::vector<Vec2> h(2 * n);
  int k = 0;
  for (int i = 0; i < n; ++i) {
    while (k >= 2 && cross2(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  const int lower = k + 1;
  for (int i = n - 2; i >= 0; --i) {
    while (k >= lower && cross2(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

double segDist(const Vec2& p, const Vec2& a, const Vec2& b) {
  const Vec2 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

bool segmentsProperlyIntersect(const Vec2& a, const Vec2& b, const Vec2& c, const Vec2& d) {
  const double d1 = cross2(c, d, a), d2 = cross2(c, d, b);
  const double d3 = cross2(a, b, c), d4 = cross2(a, b, d);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

std::vector<Vec2> concaveHull(std::vector<Vec2> points, double maxEdgeFactor) {
  std::vector<Vec2> hull = convexHull(points);
  if (hull.size() < 3) return hull;

  // degenerate (zero-area) hulls collapse to the extreme segment
  double area = 0;
  for (size_t i = 0; i < hull.size(); ++i) {
    const Vec2& a = hull[i];
    const Vec2& b = hull[(i + 1) % hull.size()];
    area += a.x() * b.y() - b.x() * a.y();
  }
  if (std::abs(area) < 1e-12) {
    auto [mn, mx] = std::minmax_element(points.begin(), points.end(), [](const Vec2& a, const Vec2& b) {
      return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
    });
    return {*mn, *mx};
  }

  // median nearest-neighbor spacing
  std::vector<double> nn(points.size(), std::numeric_limits<double>::max());
  for (size_t i = 0; i < points.size(); ++i)
    for (size_t j = 0; j < points.size(); ++j) {
      if (i == j) continue;
      nn[i] = std::min(nn[i], (points[i] - points[j]).norm());
    }
  std::nth_element(nn.begin(), nn.begin() + nn.size() / 2, nn.end());
  const double maxEdge = maxEdgeFactor * nn[nn.size() / 2];
  if (!(maxEdge > 0)) return hull;

  auto inHull = [&](const Vec2& p) {
    return std::find(hull.begin(), hull.end(), p) != hull.end();
  };

  // peel long edges through the nearest interior point while staying simple
  size_t guard = points.size() + hull.size();
  bool changed = true;
  while (changed && guard-- > 0) {
    changed = false;
    for (size_t i = 0; i < hull.size(); ++i) {
      const Vec2 a = hull[i];
      const Vec2 b = hull[(i + 1) % hull.size()];
      const double len = (b - a).norm();
      if (len <= maxEdge) continue;

      int best = -1;
      double bestCost = std::numeric_limits<double>::max();
      for (size_t c = 0; c < points.size(); ++c) {
        const Vec2& p = points[c];
        if (inHull(p)) continue;
        if (segDist(p, a, b) > len) continue;  // no wild spikes
        const double cost = (p - a).norm() + (p - b).norm();
        if (cost >= bestCost) continue;
        bool ok = true;
        for (size_t e = 0; e < hull.size() && ok; ++e) {
          if (e == i) continue;
          const Vec2& c1 = hull[e];
          const Vec2& c2 = hull[(e + 1) % hull.size()];
          if (segmentsProperlyIntersect(a, p, c1, c2) || segmentsProperlyIntersect(p, b, c1, c2)) ok = false;
        }
        if (ok) {
          bestCost = cost;
          best = static_cast<int>(c);
        }
      }
      if (best >= 0) {
        hull.insert(hull.begin() + i + 1, points[best]);
        changed = true;
        break;
      }
    }
  }
  return hull;
}

bool pointInPolygon(const Vec2& p, const std::vector<Vec2>& poly, double boundaryTol) {
  const size_t n = poly.size();
  if (n < 3) return false;
  for (size_t i = 0; i < n; ++i)
    if (segDist(p, poly[i], poly[(i + 1) % n]) <= boundaryTol) return true;
  bool inside = false;
  for (size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double xCross = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < xCross) inside = !inside;
    }
  }
  return inside;
}

MaskImage trackMask(const std::vector<Vec2>& points, int width, int height) {
  MaskImage m(width, height);
  if (points.size() < 3) return m;  // TooFewPoints: all-zero mask
  const std::vector<Vec2> hull = concaveHull(points);
  if (hull.size() == 2) {
    // collinear input: one-pixel dilated segment
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        m.set(x, y, segDist(Vec2(x, y), hull[0], hull[1]) <= 1.0);
    return m;
  }
  if (hull.size() < 3) return m;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) m.set(x, y, pointInPolygon(Vec2(x, y), hull, 1e-9));
  return m;
}

}  // namespace nrgs
