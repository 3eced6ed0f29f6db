#include "nrgs/map_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace nrgs {

namespace {

Attr attrFromTag(const std::string& tag) {
  if (tag == "mean") return Attr::Mean;
  if (tag == "scale") return Attr::Scale;
  if (tag == "rot") return Attr::Rotation;
  throw std::runtime_error("map snapshot: unknown attribute tag '" + tag + "'");
}

void printd(std::ostream& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out << buf;
}

}  // namespace

void saveMapSnapshot(const std::string& path, const CanonicalMap& map) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "NRGS_MAP 1\n";
  out << "primitives " << map.size() << "\n";
  for (const GaussianPrimitive& g : map.primitives) {
    out << "p";
    const double vals[15] = {g.mean.x(),     g.mean.y(),   g.mean.z(),   g.logScale.x(), g.logScale.y(),
                             g.logScale.z(), g.rot.w(),    g.rot.x(),    g.rot.y(),      g.rot.z(),
                             g.opacityLogit, g.rgb.x(),    g.rgb.y(),    g.rgb.z(),      g.defLogit};
    for (double v : vals) {
      out << ' ';
      printd(out, v);
    }
    out << "\n";
  }
  size_t nb = 0;
  for (const BasisSet& bs : map.bases)
    for (const auto& attr : bs.attr) nb += attr.size();
  out << "bases " << nb << "\n";
  for (size_t i = 0; i < map.bases.size(); ++i)
    for (Attr a : kAllAttrs)
      for (const TemporalBasis& b : map.bases[i][a]) {
        out << "b " << i << ' ' << attrName(a) << ' ' << b.id << ' ';
        printd(out, b.center);
        out << ' ';
        printd(out, b.extent);
        out << ' ' << (b.frozen ? 1 : 0);
        for (int d = 0; d < b.weight.size(); ++d) {
          out << ' ';
          printd(out, b.weight[d]);
        }
        out << "\n";
      }
  out << "nextid " << map.nextBasisId << "\n";
}

CanonicalMap loadMapSnapshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open map snapshot " + path);
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "NRGS_MAP" || version != 1) throw std::runtime_error("map snapshot: bad header in " + path);

  CanonicalMap map;
  std::string tok;
  size_t n = 0;
  in >> tok >> n;
  if (tok != "primitives") throw std::runtime_error("map snapshot: expected 'primitives'");
  map.primitives.resize(n);
  map.bases.resize(n);
  for (size_t i = 0; i < n; ++i) {
    in >> tok;
    if (tok != "p") throw std::runtime_error("map snapshot: expected 'p' record");
    GaussianPrimitive& g = map.primitives[i];
    double qw, qx, qy, qz;
    in >> g.mean.x() >> g.mean.y() >> g.mean.z() >> g.logScale.x() >> g.logScale.y() >> g.logScale.z() >> qw >>
        qx >> qy >> qz >> g.opacityLogit >> g.rgb.x() >> g.rgb.y() >> g.rgb.z() >> g.defLogit;
    g.rot = Quat(qw, qx, qy, qz);
  }
  size_t nb = 0;
  in >> tok >> nb;
  if (tok != "bases") throw std::runtime_error("map snapshot: expected 'bases'");
  for (size_t k = 0; k < nb; ++k) {
    in >> tok;
    if (tok != "b") throw std::runtime_error("map snapshot: expected 'b' record");
    size_t prim;
    std::string tag;
    TemporalBasis b;
    int frozen;
    in >> prim >> tag >> b.id >> b.center >> b.extent >> frozen;
    const Attr a = attrFromTag(tag);
    b.frozen = frozen != 0;
    b.weight = VecX::Zero(attrDim(a));
    for (int d = 0; d < b.weight.size(); ++d) in >> b.weight[d];
    if (prim >= n) throw std::runtime_error("map snapshot: basis references missing primitive");
    map.bases[prim][a].push_back(b);
  }
  in >> tok >> map.nextBasisId;
  if (tok != "nextid" || !in) throw std::runtime_error("map snapshot: missing trailer");
  return map;
}

void saveResiduals(const std::string& path, const std::map<int, ResidualSet>& perFrame) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "NRGS_RESIDUALS 1\n";
  for (const auto& [frame, rs] : perFrame) {
    size_t count = 0;
    for (const auto& [prim, e] : rs.prims)
      for (const auto& attr : e.attr) count += attr.size();
    out << "frame " << frame << ' ' << count << "\n";
    for (const auto& [prim, e] : rs.prims)
      for (int a = 0; a < kNumAttrs; ++a)
        for (const auto& [id, v] : e.attr[a]) {
          out << "r " << prim << ' ' << attrName(static_cast<Attr>(a)) << ' ' << id;
          for (int d = 0; d < v.size(); ++d) {
            out << ' ';
            printd(out, v[d]);
          }
          out << "\n";
        }
  }
}

std::map<int, ResidualSet> loadResiduals(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open residuals " + path);
  std::string magic;
  int version;
  in >> magic >> version;
  if (magic != "NRGS_RESIDUALS" || version != 1) throw std::runtime_error("residuals: bad header in " + path);
  std::map<int, ResidualSet> out;
  std::string tok;
  while (in >> tok) {
    if (tok != "frame") throw std::runtime_error("residuals: expected 'frame'");
    int frame;
    size_t count;
    in >> frame >> count;
    ResidualSet& rs = out[frame];
    for (size_t k = 0; k < count; ++k) {
      in >> tok;
      if (tok != "r") throw std::runtime_error("residuals: expected 'r' record");
      int prim;
      std::string tag;
      int64_t id;
      in >> prim >> tag >> id;
      const Attr a = attrFromTag(tag);
      VecX v = VecX::Zero(attrDim(a));
      for (int d = 0; d < v.size(); ++d) in >> v[d];
      rs.prims[prim].attr[static_cast<int>(a)].emplace_back(id, v);
    }
  }
  return out;
}

}  // namespace nrgs
