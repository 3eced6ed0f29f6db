#include "nrgs/trajectory_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nrgs {

void saveTrajectoryTum(const std::string& path, const std::vector<Pose>& camToWorld,
                       const std::vector<double>& timestamps) {
  if (camToWorld.size() != timestamps.size())
    throw std::invalid_argument("saveTrajectoryTum: size mismatch");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  char buf[512];
  for (size_t i = 0; i < camToWorld.size(); ++i) {
    const Pose& p = camToWorld[i];
    const Quat& q = p.rotation();
    std::snprintf(buf, sizeof(buf), "%.9f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", timestamps[i],
                  p.translation().x(), p.translation().y(), p.translation().z(), q.x(), q.y(), q.z(), q.w());
    out << buf;
  }
}

TrajectoryFile loadTrajectoryTum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trajectory " + path);
  TrajectoryFile tf;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    ss >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw;
    if (ss.fail()) throw std::runtime_error("malformed trajectory line in " + path);
    tf.timestamps.push_back(ts);
    tf.camToWorld.emplace_back(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz));
  }
  return tf;
}

}  // namespace nrgs
