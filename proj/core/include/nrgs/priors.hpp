// Measurement preprocessing: geometric prior acquisition through a provider
// abstraction plus validity and co-visibility mask computation.
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "nrgs/geometry.hpp"
#include "nrgs/image.hpp"

namespace nrgs {

/// One tracked point: seed-frame anchor and current-frame observation, 2D and
/// 3D aligned by construction.
struct Track {
  int id = 0;
  int t0Frame = 0;
  Vec2 u0 = Vec2::Zero();
  Vec2 ut = Vec2::Zero();
  Vec3 x0 = Vec3::Zero();
  Vec3 xt = Vec3::Zero();
};

struct Priors {
  Image depth;                // HxW mm, 0 = invalid
  std::vector<Track> tracks;  // sorted by id
};

struct MaskSet {
  MaskImage valid;
  MaskImage mapMask;
  MaskImage trackMask;
  MaskImage covis;  // mapMask AND trackMask
};

class PriorProvider {
 public:
  virtual ~PriorProvider() = default;
  virtual Priors acquire(int frame) = 0;
};

/// Reads depth/%06d.png (16-bit, 0.1 mm per unit) and tracks/%06d.csv from a
/// dataset directory. Throws std::runtime_error ("MissingPriorFile") when a
/// file is absent and ("ShapeMismatch") when the depth size disagrees with
/// the frame size.
class FilePriorProvider : public PriorProvider {
 public:
  FilePriorProvider(std::string datasetDir, int width, int height);
  Priors acquire(int frame) override;

 private:
  std::string dir_;
  int width_, height_;
};

std::vector<Track> loadTracksCsv(const std::string& path);
void saveTracksCsv(const std::string& path, const std::vector<Track>& tracks);

/// mask(u) = 1 iff delta <= gray(u) <= 1 - delta (ITU-R 601 luma, inclusive).
MaskImage validityMask(const Image& rgbOrGray, double delta);

/// mask(u) = 1 iff transmittance(u) < tauT (strict).
MaskImage mapMask(const Image& transmittance, double tauT);

/// Rasterized interior (boundary inclusive) of the concave hull of the
/// current-frame track endpoints. Fewer than 3 points yields an all-zero
/// mask; collinear points yield the segment dilated by one pixel.
MaskImage trackMask(const std::vector<Vec2>& points, int width, int height);

MaskImage covisMask(const MaskImage& mapM, const MaskImage& trackM);

/// Concave hull via convex-hull edge refinement: edges longer than
/// `maxEdgeFactor` x the median nearest-neighbor spacing are split through
/// the best interior point while the polygon stays simple. Degenerate input
/// (collinear) returns the two extreme points.
std::vector<Vec2> concaveHull(std::vector<Vec2> points, double maxEdgeFactor = 4.0);

bool pointInPolygon(const Vec2& p, const std::vector<Vec2>& poly, double boundaryTol = 1e-9);

}  // namespace nrgs
