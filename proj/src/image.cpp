#include "smolpipe/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <string>

#include "smolpipe/common.hpp"

namespace smolpipe {

namespace {

std::uint8_t round_to_u8(double v) {
  double r = std::floor(v + 0.5);
  if (r < 0.0) r = 0.0;
  if (r > 255.0) r = 255.0;
  return static_cast<std::uint8_t>(r);
}

// Skips whitespace and '#' comments between PPM header fields.
void skip_ppm_space(std::istream& is) {
  for (;;) {
    int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      is.get();
    } else {
      return;
    }
  }
}

std::size_t read_ppm_number(std::istream& is, const std::string& path, const char* what) {
  skip_ppm_space(is);
  long long v = -1;
  if (!(is >> v) || v < 0) {
    throw InputError(path + ": bad PPM " + std::string(what));
  }
  return static_cast<std::size_t>(v);
}

}  // namespace

RawImage make_image(std::size_t height, std::size_t width, std::uint8_t fill) {
  if (height < 1 || width < 1) {
    throw GeometryError("image dimensions must be >= 1, got " + std::to_string(height) + "x" +
                        std::to_string(width));
  }
  RawImage img;
  img.height = height;
  img.width = width;
  img.data.assign(height * width * 3, fill);
  return img;
}

RawImage read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  char magic[2] = {0, 0};
  is.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') {
    throw InputError(path.string() + ": not a P6 PPM file");
  }
  std::size_t w = read_ppm_number(is, path.string(), "width");
  std::size_t h = read_ppm_number(is, path.string(), "height");
  std::size_t maxval = read_ppm_number(is, path.string(), "maxval");
  if (w < 1 || h < 1) throw InputError(path.string() + ": degenerate dimensions");
  if (maxval != 255) {
    throw InputError(path.string() + ": unsupported maxval " + std::to_string(maxval));
  }
  is.get();  // single whitespace byte before the raster
  RawImage img = make_image(h, w);
  is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.data.size()) {
    throw InputError(path.string() + ": truncated pixel data");
  }
  return img;
}

void write_ppm(const RawImage& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write " + path.string());
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size()));
  if (!os) throw InputError("write failed for " + path.string());
}

RawImage bilinear_resize(const RawImage& img, std::size_t out_height, std::size_t out_width) {
  if (out_height < 1 || out_width < 1) {
    throw GeometryError("resize target must be >= 1, got " + std::to_string(out_height) + "x" +
                        std::to_string(out_width));
  }
  if (out_height == img.height && out_width == img.width) return img;

  RawImage out = make_image(out_height, out_width);
  double sy = static_cast<double>(img.height) / static_cast<double>(out_height);
  double sx = static_cast<double>(img.width) / static_cast<double>(out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    if (fy < 0.0) fy = 0.0;
    std::size_t y0 = std::min(static_cast<std::size_t>(fy), img.height - 1);
    std::size_t y1 = std::min(y0 + 1, img.height - 1);
    double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_width; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      if (fx < 0.0) fx = 0.0;
      std::size_t x0 = std::min(static_cast<std::size_t>(fx), img.width - 1);
      std::size_t x1 = std::min(x0 + 1, img.width - 1);
      double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        double top = (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
        double bot = (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
        out.at(y, x, c) = round_to_u8((1.0 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> longest_edge_fit(std::size_t height, std::size_t width,
                                                     std::size_t cap) {
  if (cap < 1) throw GeometryError("longest-edge cap must be >= 1");
  std::size_t longest = std::max(height, width);
  if (longest <= cap) return {height, width};
  double scale = static_cast<double>(cap) / static_cast<double>(longest);
  auto shrink = [scale](std::size_t v) {
    auto s = static_cast<std::size_t>(std::llround(static_cast<double>(v) * scale));
    return std::max<std::size_t>(s, 1);
  };
  if (height >= width) return {cap, shrink(width)};
  return {shrink(height), cap};
}

RawImage resize_longest_edge(const RawImage& img, std::size_t cap) {
  auto [h, w] = longest_edge_fit(img.height, img.width, cap);
  return bilinear_resize(img, h, w);
}

std::pair<std::size_t, std::size_t> grid_shape(std::size_t height, std::size_t width,
                                               std::size_t tile_size) {
  if (tile_size < 1) throw GeometryError("tile size must be >= 1");
  if (height <= tile_size && width <= tile_size) return {0, 0};
  std::size_t rows = (height + tile_size - 1) / tile_size;
  std::size_t cols = (width + tile_size - 1) / tile_size;
  return {std::min(rows, kMaxTileGrid), std::min(cols, kMaxTileGrid)};
}

TileGrid split_into_tiles(const RawImage& img, std::size_t tile_size) {
  TileGrid grid;
  grid.tile_size = tile_size;
  auto [rows, cols] = grid_shape(img.height, img.width, tile_size);
  grid.rows = rows;
  grid.cols = cols;
  grid.global = bilinear_resize(img, tile_size, tile_size);
  if (rows == 0) return grid;

  RawImage resized = bilinear_resize(img, rows * tile_size, cols * tile_size);
  grid.tiles.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      Tile tile;
      tile.row = r;
      tile.col = c;
      tile.image = make_image(tile_size, tile_size);
      for (std::size_t y = 0; y < tile_size; ++y) {
        const std::uint8_t* src = &resized.at(r * tile_size + y, c * tile_size, 0);
        std::memcpy(&tile.image.at(y, 0, 0), src, tile_size * 3);
      }
      grid.tiles.push_back(std::move(tile));
    }
  }
  return grid;
}

FrameSource open_frame_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw InputError("frame directory not found: " + dir.string());
  }
  KeyValueFile manifest = KeyValueFile::parse(dir / "manifest.txt");
  FrameSource src;
  src.fps = manifest.get_double("fps");
  if (src.fps <= 0.0) throw InputError(dir.string() + ": fps must be positive");
  std::set<std::filesystem::path> ordered;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".ppm") ordered.insert(entry.path());
  }
  src.frame_paths.assign(ordered.begin(), ordered.end());
  if (src.frame_paths.empty()) throw InputError(dir.string() + ": no PPM frames");
  return src;
}

FrameSet sample_frames(const FrameSource& source, std::size_t n, std::size_t tile_size) {
  if (n < 1) throw GeometryError("frame sample count must be >= 1");
  std::size_t count = source.frame_paths.size();
  if (count == 0) throw InputError("empty frame source");
  FrameSet out;
  if (n > count) {
    n = count;
    out.clamped = true;
  }
  std::vector<std::size_t> indices;
  if (n == 1) {
    indices.push_back(count / 2);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      double pos = static_cast<double>(i) * static_cast<double>(count - 1) /
                   static_cast<double>(n - 1);
      indices.push_back(static_cast<std::size_t>(std::llround(pos)));
    }
  }
  for (std::size_t idx : indices) {
    RawImage frame = read_ppm(source.frame_paths[idx]);
    out.frames.push_back(bilinear_resize(frame, tile_size, tile_size));
    out.timestamps.push_back(static_cast<double>(idx) / source.fps);
  }
  return out;
}

FrameSet average_frames(const FrameSet& fs, std::size_t k) {
  if (k != 1 && k != 2 && k != 4 && k != 8) {
    throw GeometryError("frame averaging factor must be one of 1,2,4,8, got " + std::to_string(k));
  }
  if (fs.frames.size() % k != 0) {
    throw GeometryError("frame count " + std::to_string(fs.frames.size()) +
                        " not divisible by averaging factor " + std::to_string(k));
  }
  if (k == 1) return fs;
  FrameSet out;
  out.clamped = fs.clamped;
  for (std::size_t g = 0; g < fs.frames.size(); g += k) {
    const RawImage& first = fs.frames[g];
    RawImage avg = make_image(first.height, first.width);
    double ts = 0.0;
    for (std::size_t p = 0; p < avg.data.size(); ++p) {
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += fs.frames[g + j].data[p];
      avg.data[p] = round_to_u8(sum / static_cast<double>(k));
    }
    for (std::size_t j = 0; j < k; ++j) ts += fs.timestamps[g + j];
    out.frames.push_back(std::move(avg));
    out.timestamps.push_back(ts / static_cast<double>(k));
  }
  return out;
}

Tensor patchify(const RawImage& tile, std::size_t patch) {
  if (tile.height != tile.width) {
    throw GeometryError("patchify expects a square tile, got " + std::to_string(tile.height) +
                        "x" + std::to_string(tile.width));
  }
  std::size_t side = tile.height;
  if (patch < 1 || side % patch != 0) {
    throw GeometryError("tile side " + std::to_string(side) + " not divisible by patch " +
                        std::to_string(patch));
  }
  std::size_t grid = side / patch;
  std::size_t dim = patch * patch * 3;
  std::vector<double> data(grid * grid * dim);
  std::size_t out_row = 0;
  for (std::size_t py = 0; py < grid; ++py) {
    for (std::size_t px = 0; px < grid; ++px) {
      double* dst = data.data() + out_row * dim;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            dst[k++] = tile.at(py * patch + y, px * patch + x, c) / 255.0;
          }
        }
      }
      ++out_row;
    }
  }
  return Tensor::from_data({grid * grid, dim}, std::move(data));
}

RawImage unpatchify(const Tensor& patches, std::size_t side, std::size_t patch) {
  std::size_t grid = side / patch;
  std::size_t dim = patch * patch * 3;
  if (patch < 1 || side % patch != 0 || patches.rank() != 2 ||
      patches.shape()[0] != grid * grid || patches.shape()[1] != dim) {
    throw GeometryError("unpatchify: shape " + format_shape(patches.shape()) +
                        " does not match side " + std::to_string(side) + ", patch " +
                        std::to_string(patch));
  }
  RawImage img = make_image(side, side);
  const auto& d = patches.data();
  for (std::size_t py = 0; py < grid; ++py) {
    for (std::size_t px = 0; px < grid; ++px) {
      const double* src = d.data() + (py * grid + px) * dim;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < 3; ++c) {
            img.at(py * patch + y, px * patch + x, c) = round_to_u8(src[k++] * 255.0);
          }
        }
      }
    }
  }
  return img;
}

Tensor image_to_tensor(const RawImage& img) {
  std::vector<double> data(img.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = img.data[i] / 255.0;
  return Tensor::from_data({img.height, img.width, 3}, std::move(data));
}

RawImage tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.shape()[2] != 3) {
    throw GeometryError("tensor_to_image expects [h, w, 3], got " + format_shape(t.shape()));
  }
  RawImage img = make_image(t.shape()[0], t.shape()[1]);
  const auto& d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) img.data[i] = round_to_u8(d[i] * 255.0);
  return img;
}

}  // namespace smolpipe
