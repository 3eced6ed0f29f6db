#pragma once

#include <map>
#include <string>

#include "nrgs/gaussian_map.hpp"

namespace nrgs {

/// Versioned plain-text snapshot (format documented in docs/map_format.md).
/// Doubles are printed with %.17g so reload is value-exact.
void saveMapSnapshot(const std::string& path, const CanonicalMap& map);
CanonicalMap loadMapSnapshot(const std::string& path);

/// Per-frame residual sets, one file for the whole run.
void saveResiduals(const std::string& path, const std::map<int, ResidualSet>& perFrame);
std::map<int, ResidualSet> loadResiduals(const std::string& path);

}  // namespace nrgs
