#include "nrgs/image.hpp"

#include <stdexcept>

namespace nrgs {

Image toGrayscale(const Image& rgb) {
  if (rgb.channels() == 1) return rgb;
  if (rgb.channels() != 3) throw std::invalid_argument("toGrayscale: expected 1 or 3 channels");
  Image g(rgb.width(), rgb.height(), 1);
  for (int y = 0; y < rgb.height(); ++y)
    for (int x = 0; x < rgb.width(); ++x)
      g.at(x, y) = 0.299 * rgb.at(x, y, 0) + 0.587 * rgb.at(x, y, 1) + 0.114 * rgb.at(x, y, 2);
  return g;
}

MaskImage maskAnd(const MaskImage& a, const MaskImage& b) {
  if (!a.sameShape(b)) throw std::invalid_argument("maskAnd: shape mismatch");
  MaskImage out(a.width(), a.height());
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) out.set(x, y, a.at(x, y) && b.at(x, y));
  return out;
}

}  // namespace nrgs
