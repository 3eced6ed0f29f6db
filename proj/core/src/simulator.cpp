#include "nrgs/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "nrgs/image_io.hpp"
#include "nrgs/random.hpp"
#include "nrgs/renderer.hpp"
#include "nrgs/trajectory_io.hpp"

namespace nrgs {

void SceneSpec::validate() const {
  if (gridX < 2 || gridY < 2) throw std::invalid_argument("InvalidSpec: grid must be at least 2x2");
  if (extentMm <= 0) throw std::invalid_argument("InvalidSpec: extent must be positive");
  if (frames < 2) throw std::invalid_argument("InvalidSpec: at least 2 frames required");
  if (imageWidth < 8 || imageHeight < 8) throw std::invalid_argument("InvalidSpec: image too small");
  if (focalPx <= 0) throw std::invalid_argument("InvalidSpec: focal must be positive");
  for (const auto& s : sinusoids)
    if (s.amplitudeMm < 0) throw std::invalid_argument("InvalidSpec: amplitude must be >= 0");
  if (noiseDepthSigma < 0 || noiseTrackPxSigma < 0 || noiseTrackMmSigma < 0)
    throw std::invalid_argument("InvalidSpec: noise sigmas must be >= 0");
  if (trackStridePx < 1 || trackReseedFrames < 1) throw std::invalid_argument("InvalidSpec: track sampling");
}

namespace {

std::vector<std::string> splitWs(const std::string& s) {
  std::istringstream ss(s);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

}  // namespace

SceneSpec SceneSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("InvalidSpec: cannot open " + path);
  SceneSpec s;
  s.sinusoids.clear();
  s.trajectoryControl.clear();
  std::string line;
  int lineNo = 0;
  while (std::getline(in, line)) {
    ++lineNo;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      if (!splitWs(line).empty()) throw std::runtime_error("InvalidSpec: malformed line " + std::to_string(lineNo));
      continue;
    }
    const auto keyToks = splitWs(line.substr(0, eq));
    const auto v = splitWs(line.substr(eq + 1));
    if (keyToks.size() != 1) throw std::runtime_error("InvalidSpec: malformed key on line " + std::to_string(lineNo));
    const std::string& key = keyToks[0];
    auto want = [&](size_t n) {
      if (v.size() != n)
        throw std::runtime_error("InvalidSpec: key '" + key + "' expects " + std::to_string(n) + " values");
    };
    if (key == "grid") {
      want(2);
      s.gridX = std::stoi(v[0]);
      s.gridY = std::stoi(v[1]);
    } else if (key == "extent_mm") {
      want(1);
      s.extentMm = std::stod(v[0]);
    } else if (key == "relief_amp_mm") {
      want(1);
      s.reliefAmpMm = std::stod(v[0]);
    } else if (key == "texture_seed") {
      want(1);
      s.textureSeed = std::stoull(v[0]);
    } else if (key == "texture_octaves") {
      want(1);
      s.textureOctaves = std::stoi(v[0]);
    } else if (key == "deform_region_min_x") {
      want(1);
      s.deformRegionMinX = v[0] == "none" ? std::numeric_limits<double>::infinity() : std::stod(v[0]);
    } else if (key == "sinusoid") {
      want(6);
      SinusoidSpec ss;
      ss.amplitudeMm = std::stod(v[0]);
      ss.spatialFreq = std::stod(v[1]);
      ss.temporalFreq = std::stod(v[2]);
      ss.phase = std::stod(v[3]);
      ss.direction = Vec2(std::stod(v[4]), std::stod(v[5]));
      s.sinusoids.push_back(ss);
    } else if (key == "frames") {
      want(1);
      s.frames = std::stoi(v[0]);
    } else if (key == "image") {
      want(2);
      s.imageWidth = std::stoi(v[0]);
      s.imageHeight = std::stoi(v[1]);
    } else if (key == "focal_px") {
      want(1);
      s.focalPx = std::stod(v[0]);
    } else if (key == "traj_ctrl") {
      want(3);
      s.trajectoryControl.emplace_back(std::stod(v[0]), std::stod(v[1]), std::stod(v[2]));
    } else if (key == "noise_depth_sigma") {
      want(1);
      s.noiseDepthSigma = std::stod(v[0]);
    } else if (key == "noise_track_px_sigma") {
      want(1);
      s.noiseTrackPxSigma = std::stod(v[0]);
    } else if (key == "noise_track_mm_sigma") {
      want(1);
      s.noiseTrackMmSigma = std::stod(v[0]);
    } else if (key == "track_stride_px") {
      want(1);
      s.trackStridePx = std::stoi(v[0]);
    } else if (key == "track_reseed_frames") {
      want(1);
      s.trackReseedFrames = std::stoi(v[0]);
    } else {
      throw std::runtime_error("InvalidSpec: unknown key '" + key + "'");
    }
  }
  s.validate();
  return s;
}

void SceneSpec::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "grid = " << gridX << " " << gridY << "\n";
  out << "extent_mm = " << extentMm << "\n";
  out << "relief_amp_mm = " << reliefAmpMm << "\n";
  out << "texture_seed = " << textureSeed << "\n";
  out << "texture_octaves = " << textureOctaves << "\n";
  if (std::isinf(deformRegionMinX))
    out << "deform_region_min_x = none\n";
  else
    out << "deform_region_min_x = " << deformRegionMinX << "\n";
  for (const auto& ss : sinusoids)
    out << "sinusoid = " << ss.amplitudeMm << " " << ss.spatialFreq << " " << ss.temporalFreq << " " << ss.phase
        << " " << ss.direction.x() << " " << ss.direction.y() << "\n";
  out << "frames = " << frames << "\n";
  out << "image = " << imageWidth << " " << imageHeight << "\n";
  out << "focal_px = " << focalPx << "\n";
  for (const auto& c : trajectoryControl)
    out << "traj_ctrl = " << c.x() << " " << c.y() << " " << c.z() << "\n";
  out << "noise_depth_sigma = " << noiseDepthSigma << "\n";
  out << "noise_track_px_sigma = " << noiseTrackPxSigma << "\n";
  out << "noise_track_mm_sigma = " << noiseTrackMmSigma << "\n";
  out << "track_stride_px = " << trackStridePx << "\n";
  out << "track_reseed_frames = " << trackReseedFrames << "\n";
}

namespace {

// seeded 2D value noise with bilinear interpolation and octave stacking
double valueNoise(uint64_t seed, double x, double y, int octaves) {
  double sum = 0, amp = 1, norm = 0, freq = 1;
  for (int o = 0; o < octaves; ++o) {
    const double fx = x * freq, fy = y * freq;
    const int ix = static_cast<int>(std::floor(fx)), iy = static_cast<int>(std::floor(fy));
    const double tx = fx - ix, ty = fy - iy;
    auto lattice = [&](int gx, int gy) {
      const uint64_t h = deriveSeed(seed + 1315423911ULL * o, (static_cast<uint64_t>(gx) << 32) ^
                                                                  static_cast<uint32_t>(gy));
      return static_cast<double>(h % 100000ULL) / 99999.0;
    };
    const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
    const double v = (1 - sx) * ((1 - sy) * lattice(ix, iy) + sy * lattice(ix, iy + 1)) +
                     sx * ((1 - sy) * lattice(ix + 1, iy) + sy * lattice(ix + 1, iy + 1));
    sum += v * amp;
    norm += amp;
    amp *= 0.55;
    freq *= 2.1;
  }
  return sum / norm;
}

Pose lookAt(const Vec3& eye, const Vec3& target, const Vec3& up) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = up.cross(z).normalized();
  if (x.norm() < 1e-9) x = Vec3(1, 0, 0);
  const Vec3 y = z.cross(x);
  Mat3 R;
  R.col(0) = x;
  R.col(1) = y;
  R.col(2) = z;
  return Pose(Quat(R), eye);
}

Vec3 catmullRom(const std::vector<Vec3>& c, double u) {
  const int n = static_cast<int>(c.size());
  if (n == 1) return c[0];
  const double s = u * (n - 1);
  const int i = std::min(n - 2, static_cast<int>(std::floor(s)));
  const double t = s - i;
  const Vec3 p0 = c[std::max(0, i - 1)], p1 = c[i], p2 = c[i + 1], p3 = c[std::min(n - 1, i + 2)];
  return 0.5 * ((2.0 * p1) + (-p0 + p2) * t + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t +
                (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t);
}

struct SurfaceModel {
  std::vector<Vec3> rest;       // rest positions (pre-deformation)
  std::vector<uint8_t> rigid;   // 1 = outside the deforming region
  std::vector<Vec3> color;
  double spacing = 0;
};

SurfaceModel buildSurface(const SceneSpec& spec) {
  SurfaceModel m;
  const int nx = spec.gridX, ny = spec.gridY;
  m.rest.reserve(static_cast<size_t>(nx) * ny);
  m.spacing = spec.extentMm / (nx - 1);
  const bool anyAmp = std::any_of(spec.sinusoids.begin(), spec.sinusoids.end(),
                                  [](const SinusoidSpec& s) { return s.amplitudeMm > 0; });
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const double x = (static_cast<double>(ix) / (nx - 1) - 0.5) * spec.extentMm;
      const double y = (static_cast<double>(iy) / (ny - 1) - 0.5) * spec.extentMm;
      const double z =
          spec.reliefAmpMm * (2.0 * valueNoise(spec.textureSeed + 77, x / 40.0 + 3.1, y / 40.0 + 7.7, 3) - 1.0);
      m.rest.emplace_back(x, y, z);
      m.rigid.push_back(anyAmp && x >= spec.deformRegionMinX ? 0 : 1);
      m.color.emplace_back(0.15 + 0.75 * valueNoise(spec.textureSeed + 1, x / 9.0, y / 9.0, spec.textureOctaves),
                           0.15 + 0.75 * valueNoise(spec.textureSeed + 2, x / 9.0, y / 9.0, spec.textureOctaves),
                           0.15 + 0.75 * valueNoise(spec.textureSeed + 3, x / 9.0, y / 9.0, spec.textureOctaves));
    }
  return m;
}

}  // namespace

Vec3 surfacePointAt(const SceneSpec& spec, const Vec3& restPoint, bool deforming, int frame) {
  if (!deforming) return restPoint;
  double dz = 0;
  for (const SinusoidSpec& s : spec.sinusoids) {
    if (s.amplitudeMm <= 0) continue;
    const Vec2 dir = s.direction.norm() > 0 ? Vec2(s.direction.normalized()) : Vec2(1, 0);
    const double arg = 2.0 * M_PI * (s.spatialFreq * (dir.x() * restPoint.x() + dir.y() * restPoint.y()) -
                                     s.temporalFreq * frame) +
                       s.phase;
    dz += 0.5 * s.amplitudeMm * (1.0 + std::sin(arg));
  }
  return restPoint + Vec3(0, 0, dz);
}

GroundTruth generate(const SceneSpec& spec, const std::string& outDir, uint64_t seed) {
  spec.validate();
  const SurfaceModel surf = buildSurface(spec);
  const int nVerts = static_cast<int>(surf.rest.size());

  GroundTruth gt;
  gt.K.fx = gt.K.fy = spec.focalPx;
  gt.K.cx = (spec.imageWidth - 1) / 2.0;
  gt.K.cy = (spec.imageHeight - 1) / 2.0;
  gt.K.width = spec.imageWidth;
  gt.K.height = spec.imageHeight;
  gt.gridSpacingMm = surf.spacing;
  gt.rigidLabel = surf.rigid;

  std::vector<Vec3> control = spec.trajectoryControl;
  if (control.empty())
    control = {Vec3(-16, -4, -76), Vec3(-5, 3, -72), Vec3(6, -3, -75), Vec3(16, 4, -71)};

  const bool writeFiles = !outDir.empty();
  if (writeFiles) {
    std::filesystem::create_directories(outDir + "/rgb");
    std::filesystem::create_directories(outDir + "/depth");
    std::filesystem::create_directories(outDir + "/tracks");
    gt.K.save(outDir + "/intrinsics.txt");
    spec.save(outDir + "/scene_spec.txt");
  }

  gt.times.resize(spec.frames);
  gt.camToWorld.resize(spec.frames);
  gt.depth.resize(spec.frames);
  gt.tracks.resize(spec.frames);
  gt.surfaceFrame0.resize(nVerts);
  for (int v = 0; v < nVerts; ++v) gt.surfaceFrame0[v] = surfacePointAt(spec, surf.rest[v], !surf.rigid[v], 0);

  // per-vertex render primitives; only means move over time
  std::vector<DeformedGaussian> prims(nVerts);
  for (int v = 0; v < nVerts; ++v) {
    DeformedGaussian& g = prims[v];
    g.logScale = Vec3(std::log(0.7 * surf.spacing), std::log(0.7 * surf.spacing), std::log(0.25 * surf.spacing));
    g.rot = Quat::Identity();
    g.opacity = 0.98;
    g.rgb = surf.color[v];
    g.wd = surf.rigid[v] ? 0.0 : 1.0;
    g.disp = Vec3::Zero();
  }

  // track seeding epochs: a regular pixel grid snapped to the nearest
  // projected vertex at the epoch's first frame
  struct Epoch {
    int seedFrame;
    std::vector<std::pair<int, int>> anchors;  // (track id, vertex)
  };
  std::vector<Epoch> epochs;

  std::vector<Vec2> noiseBuf;
  for (int f = 0; f < spec.frames; ++f) {
    gt.times[f] = static_cast<double>(f) / (spec.frames - 1);
    const Pose cam = lookAt(catmullRom(control, gt.times[f]), Vec3(0, 0, 0), Vec3(0, 1, 0));
    gt.camToWorld[f] = cam;
    const Pose camFromWorld = cam.inverse();

    for (int v = 0; v < nVerts; ++v) prims[v].mean = surfacePointAt(spec, surf.rest[v], !surf.rigid[v], f);

    RenderOptions ro;
    ro.keepContributors = false;
    const RenderOutput out = render(prims, gt.K, camFromWorld, ro);
    gt.depth[f] = out.depth;

    if (f % spec.trackReseedFrames == 0) {
      Epoch ep;
      ep.seedFrame = f;
      std::map<int, int> vertexToGrid;  // dedupe: vertex -> first grid slot
      std::vector<Vec2> proj(nVerts, Vec2(-1e9, -1e9));
      for (int v = 0; v < nVerts; ++v) {
        const Vec3 p = camFromWorld * prims[v].mean;
        if (p.z() <= kNearPlane) continue;
        proj[v] = Vec2(gt.K.fx * p.x() / p.z() + gt.K.cx, gt.K.fy * p.y() / p.z() + gt.K.cy);
      }
      int nextId = static_cast<int>(epochs.size()) * 1000000;
      for (int gy = spec.trackStridePx / 2; gy < spec.imageHeight; gy += spec.trackStridePx)
        for (int gx = spec.trackStridePx / 2; gx < spec.imageWidth; gx += spec.trackStridePx) {
          int bestV = -1;
          double bestD = 0.75 * spec.trackStridePx;
          for (int v = 0; v < nVerts; ++v) {
            const double d = (proj[v] - Vec2(gx, gy)).norm();
            if (d < bestD) {
              bestD = d;
              bestV = v;
            }
          }
          if (bestV < 0 || vertexToGrid.count(bestV)) continue;
          vertexToGrid[bestV] = 1;
          ep.anchors.emplace_back(nextId++, bestV);
        }
      epochs.push_back(std::move(ep));
    }

    const Epoch& ep = epochs.back();
    auto& list = gt.tracks[f];
    for (const auto& [id, v] : ep.anchors) {
      Track t;
      t.id = id;
      t.t0Frame = ep.seedFrame;
      const Vec3 x0World = surfacePointAt(spec, surf.rest[v], !surf.rigid[v], ep.seedFrame);
      const Vec3 xtWorld = prims[v].mean;
      const Pose seedCamFromWorld = gt.camToWorld[ep.seedFrame].inverse();
      // 3D endpoints are expressed in the seed frame's camera coordinates,
      // the way a monocular geometric prior is actually observable
      t.x0 = seedCamFromWorld * x0World;
      t.xt = seedCamFromWorld * xtWorld;
      const Vec3 pt = camFromWorld * xtWorld;
      if (t.x0.z() <= kNearPlane || pt.z() <= kNearPlane) continue;
      t.u0 = Vec2(gt.K.fx * t.x0.x() / t.x0.z() + gt.K.cx, gt.K.fy * t.x0.y() / t.x0.z() + gt.K.cy);
      t.ut = Vec2(gt.K.fx * pt.x() / pt.z() + gt.K.cx, gt.K.fy * pt.y() / pt.z() + gt.K.cy);
      if (t.ut.x() < 0 || t.ut.x() > spec.imageWidth - 1 || t.ut.y() < 0 || t.ut.y() > spec.imageHeight - 1)
        continue;
      list.push_back(t);
    }

    if (writeFiles) {
      char name[32];
      std::snprintf(name, sizeof(name), "%06d", f);
      savePng8(outDir + "/rgb/" + name + ".png", out.rgb);

      Image depthFile = out.depth;
      std::vector<Track> trackFile = list;
      if (spec.noiseDepthSigma > 0 || spec.noiseTrackPxSigma > 0 || spec.noiseTrackMmSigma > 0) {
        std::mt19937_64 rng = makeRng(seed, 0xD00D + f);
        std::normal_distribution<double> N(0, 1);
        if (spec.noiseDepthSigma > 0)
          for (size_t i = 0; i < depthFile.size(); ++i)
            depthFile.data()[i] = std::max(0.0, depthFile.data()[i] * (1.0 + spec.noiseDepthSigma * N(rng)));
        for (Track& t : trackFile) {
          if (spec.noiseTrackPxSigma > 0) t.ut += spec.noiseTrackPxSigma * Vec2(N(rng), N(rng));
          if (spec.noiseTrackMmSigma > 0) t.xt += spec.noiseTrackMmSigma * Vec3(N(rng), N(rng), N(rng));
        }
      }
      saveDepthPng16(outDir + "/depth/" + name + ".png", depthFile);
      saveTracksCsv(outDir + "/tracks/" + name + ".csv", trackFile);
    }
  }

  if (writeFiles) {
    saveTrajectoryTum(outDir + "/gt_traj.txt", gt.camToWorld, gt.times);
    std::ofstream sf(outDir + "/gt_surface.csv");
    sf << "vertex,x,y,z,rigid\n";
    char buf[256];
    for (int v = 0; v < nVerts; ++v) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%d\n", v, gt.surfaceFrame0[v].x(),
                    gt.surfaceFrame0[v].y(), gt.surfaceFrame0[v].z(), surf.rigid[v] ? 1 : 0);
      sf << buf;
    }
  }
  return gt;
}

double rocAuc(const std::vector<double>& scores, const std::vector<int>& labels) {
  // Mann-Whitney U with average ranks for ties
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * (i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double posRankSum = 0;
  size_t nPos = 0;
  for (size_t k = 0; k < n; ++k)
    if (labels[k]) {
      posRankSum += rank[k];
      ++nPos;
    }
  const size_t nNeg = n - nPos;
  if (nPos == 0 || nNeg == 0) return 0.5;
  return (posRankSum - 0.5 * nPos * (nPos + 1)) / (static_cast<double>(nPos) * nNeg);
}

double labelAuc(const std::vector<double>& scores, const std::vector<Vec3>& primMeans, const GroundTruth& gt) {
  std::vector<double> s;
  std::vector<int> labels;
  const double maxDist = 2.0 * gt.gridSpacingMm;
  for (size_t i = 0; i < primMeans.size(); ++i) {
    int best = -1;
    double bestD = maxDist;
    for (size_t v = 0; v < gt.surfaceFrame0.size(); ++v) {
      const double d = (primMeans[i] - gt.surfaceFrame0[v]).norm();
      if (d < bestD) {
        bestD = d;
        best = static_cast<int>(v);
      }
    }
    if (best < 0) continue;
    s.push_back(scores[i]);
    labels.push_back(gt.rigidLabel[best] ? 0 : 1);  // positive class = deforming
  }
  return rocAuc(s, labels);
}

OraclePriorProvider::OraclePriorProvider(const GroundTruth& gt, double depthSigma, double trackPxSigma,
                                         double trackMmSigma, uint64_t seed)
    : gt_(gt), depthSigma_(depthSigma), trackPxSigma_(trackPxSigma), trackMmSigma_(trackMmSigma), seed_(seed) {}

Priors OraclePriorProvider::acquire(int frame) {
  if (frame < 0 || frame >= static_cast<int>(gt_.depth.size()))
    throw std::runtime_error("MissingPriorFile: oracle has no frame " + std::to_string(frame));
  Priors p;
  p.depth = gt_.depth[frame];
  p.tracks = gt_.tracks[frame];
  if (depthSigma_ > 0 || trackPxSigma_ > 0 || trackMmSigma_ > 0) {
    std::mt19937_64 rng = makeRng(seed_, 0xD00D + frame);
    std::normal_distribution<double> N(0, 1);
    if (depthSigma_ > 0)
      for (size_t i = 0; i < p.depth.size(); ++i)
        p.depth.data()[i] = std::max(0.0, p.depth.data()[i] * (1.0 + depthSigma_ * N(rng)));
    for (Track& t : p.tracks) {
      if (trackPxSigma_ > 0) t.ut += trackPxSigma_ * Vec2(N(rng), N(rng));
      if (trackMmSigma_ > 0) t.xt += trackMmSigma_ * Vec3(N(rng), N(rng), N(rng));
    }
  }
  std::sort(p.tracks.begin(), p.tracks.end(), [](const Track& a, const Track& b) { return a.id < b.id; });
  return p;
}

}  // namespace nrgs
