#pragma once

#include <string>
#include <vector>

#include "nrgs/geometry.hpp"

namespace nrgs {

/// TUM-style lines: `timestamp tx ty tz qx qy qz qw`, camera-to-world.
void saveTrajectoryTum(const std::string& path, const std::vector<Pose>& camToWorld,
                       const std::vector<double>& timestamps);

struct TrajectoryFile {
  std::vector<double> timestamps;
  std::vector<Pose> camToWorld;
};

TrajectoryFile loadTrajectoryTum(const std::string& path);

}  // namespace nrgs
