#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "smolpipe/tensor.hpp"

namespace smolpipe {

// Interleaved RGB, row-major, 8 bits per channel.
struct RawImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const {
    return data[(y * width + x) * 3 + c];
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) {
    return data[(y * width + x) * 3 + c];
  }
};

RawImage make_image(std::size_t height, std::size_t width, std::uint8_t fill = 0);

RawImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RawImage& img, const std::filesystem::path& path);

// Average of the 4 nearest source pixels with fractional weights, half-pixel
// centers, clamped at borders, rounded half up to u8. Equal dims copy bytes.
RawImage bilinear_resize(const RawImage& img, std::size_t out_height, std::size_t out_width);

// Downscales so the longest side equals cap, preserving aspect. No-op when
// already within cap.
RawImage resize_longest_edge(const RawImage& img, std::size_t cap);

struct Tile {
  std::size_t row = 0;
  std::size_t col = 0;
  RawImage image;
};

struct TileGrid {
  std::size_t rows = 0;  // zero when the image fits a single tile
  std::size_t cols = 0;
  std::size_t tile_size = 0;
  std::vector<Tile> tiles;  // raster order, rows*cols entries
  RawImage global;          // whole image at tile_size^2, always present
};

inline constexpr std::size_t kMaxTileGrid = 8;

// Post-cap dimensions for resize_longest_edge, without touching pixels.
std::pair<std::size_t, std::size_t> longest_edge_fit(std::size_t height, std::size_t width,
                                                     std::size_t cap);
// (rows, cols) the tiler would produce for an image of these dimensions;
// (0, 0) when it fits a single tile.
std::pair<std::size_t, std::size_t> grid_shape(std::size_t height, std::size_t width,
                                               std::size_t tile_size);

// Resizes each dimension up to the nearest tile multiple (grid capped at
// 8x8), cuts the grid in raster order, and adds the downsized global view.
TileGrid split_into_tiles(const RawImage& img, std::size_t tile_size);

// Video stand-in: a directory of numbered PPM frames plus manifest.txt with
// fps=<rate> (and optional duration).
struct FrameSource {
  std::vector<std::filesystem::path> frame_paths;
  double fps = 1.0;
};

FrameSource open_frame_dir(const std::filesystem::path& dir);

struct FrameSet {
  std::vector<RawImage> frames;      // all tile_size^2
  std::vector<double> timestamps;    // seconds, strictly increasing
  bool clamped = false;              // fewer frames available than requested
};

// n uniformly spaced frames (midpoint for n=1, inclusive endpoints for n>=2),
// each rescaled to tile_size^2. Requests beyond the source length clamp.
FrameSet sample_frames(const FrameSource& source, std::size_t n, std::size_t tile_size);

// Per-pixel mean over consecutive groups of k frames.
FrameSet average_frames(const FrameSet& fs, std::size_t k);

// Square tile into raster-ordered patch vectors, values scaled to [0,1]:
// [(side/patch)^2, patch*patch*3].
Tensor patchify(const RawImage& tile, std::size_t patch);

// Inverse of patchify for a side*side tile (test and tooling helper).
RawImage unpatchify(const Tensor& patches, std::size_t side, std::size_t patch);

Tensor image_to_tensor(const RawImage& img);   // [h, w, 3] in [0,1]
RawImage tensor_to_image(const Tensor& t);     // round half up, clamp to u8

}  // namespace smolpipe
