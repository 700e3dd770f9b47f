#pragma once

#include "smolpipe/tensor.hpp"

namespace smolpipe {

// Feature maps are rank-3 tensors [h, w, c] in raster order.

// Space-to-depth: [h, w, c] -> [h/r, w/r, c*r^2], shrinking the token count
// exactly r^2-fold. out[i, j, (di*r + dj)*c + k] = in[i*r + di, j*r + dj, k].
// Differentiable; the gradient is the inverse index map.
Tensor pixel_shuffle(const Tensor& m, std::size_t r);

// Exact inverse: pixel_unshuffle(pixel_shuffle(x, r), r) == x bitwise.
Tensor pixel_unshuffle(const Tensor& m, std::size_t r);

// [h, w, c] -> [h*w, c] in raster order over (i, j).
Tensor flatten_tokens(const Tensor& m);

}  // namespace smolpipe
