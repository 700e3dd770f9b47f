#include "smolpipe/shuffle.hpp"

#include <string>

#include "smolpipe/common.hpp"

namespace smolpipe {

namespace {

void check_map(const Tensor& m, const char* op) {
  if (!m.defined() || m.rank() != 3) {
    throw GeometryError(std::string(op) + " expects a [h, w, c] map, got " +
                        (m.defined() ? format_shape(m.shape()) : std::string("undefined")));
  }
}

}  // namespace

Tensor pixel_shuffle(const Tensor& m, std::size_t r) {
  check_map(m, "pixel_shuffle");
  if (r < 1) throw GeometryError("shuffle ratio must be >= 1");
  std::size_t h = m.shape()[0], w = m.shape()[1], c = m.shape()[2];
  if (h % r != 0 || w % r != 0) {
    throw GeometryError("map " + format_shape(m.shape()) + " not divisible by shuffle ratio " +
                        std::to_string(r));
  }
  if (r == 1) return reshape(m, m.shape());
  // [h, w, c] -> [h/r, r, w/r, r, c] -> (0,2,1,3,4) -> [h/r, w/r, r^2*c]
  Tensor split = reshape(m, {h / r, r, w / r, r, c});
  return permute_reshape(split, {0, 2, 1, 3, 4}, {h / r, w / r, r * r * c});
}

Tensor pixel_unshuffle(const Tensor& m, std::size_t r) {
  check_map(m, "pixel_unshuffle");
  if (r < 1) throw GeometryError("shuffle ratio must be >= 1");
  std::size_t h = m.shape()[0], w = m.shape()[1], c = m.shape()[2];
  if (c % (r * r) != 0) {
    throw GeometryError("channel count " + std::to_string(c) + " not divisible by r^2 = " +
                        std::to_string(r * r));
  }
  if (r == 1) return reshape(m, m.shape());
  std::size_t c_out = c / (r * r);
  // [h, w, r, r, c'] -> (0,2,1,3,4) -> [h*r, w*r, c']
  Tensor split = reshape(m, {h, w, r, r, c_out});
  return permute_reshape(split, {0, 2, 1, 3, 4}, {h * r, w * r, c_out});
}

Tensor flatten_tokens(const Tensor& m) {
  check_map(m, "flatten_tokens");
  return reshape(m, {m.shape()[0] * m.shape()[1], m.shape()[2]});
}

}  // namespace smolpipe
