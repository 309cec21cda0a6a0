#include "tarflow/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace fs = std::filesystem;

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t at) {
  if (at + 4 > bytes.size()) {
    throw ParseError("IDX: truncated header, expected 4 more bytes", at);
  }
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

std::string hex(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xf];
  return s;
}

Dataset from_rasters(const std::vector<RasterImage>& rasters,
                     std::vector<std::size_t> labels, std::size_t num_classes) {
  Dataset ds;
  if (rasters.empty()) return ds;
  std::size_t side = std::min(rasters[0].height, rasters[0].width);
  ds.channels = rasters[0].channels;
  for (const auto& r : rasters) {
    if (r.channels != ds.channels) {
      throw ShapeError("images mix " + std::to_string(ds.channels) + " and " +
                       std::to_string(r.channels) + " channels");
    }
    side = std::min({side, r.height, r.width});
  }
  ds.height = ds.width = side;
  for (const auto& r : rasters) ds.images.push_back(center_crop(raster_to_tensor(r), side));
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  return ds;
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const std::size_t n = std::stoul(s);
      return {n, n};
    }
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ParameterError("image size '" + s + "' is not of the form HxW");
  }
}

// Snaps a [-1, 1] value onto the 8-bit grid.
double quantize(double v) { return pixel_to_unit(unit_to_pixel(v)); }

}  // namespace

void Dataset::validate() const {
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != Shape{channels, height, width}) {
      throw ShapeError("dataset image " + std::to_string(i) + " has shape " +
                       to_string(images[i].shape()) + ", expected " +
                       to_string(Shape{channels, height, width}));
    }
  }
  if (!labels.empty()) {
    if (labels.size() != images.size()) {
      throw ShapeError("dataset has " + std::to_string(labels.size()) +
                       " labels for " + std::to_string(images.size()) + " images");
    }
    for (std::size_t label : labels) {
      if (label >= num_classes) {
        throw ShapeError("label " + std::to_string(label) + " out of range for " +
                         std::to_string(num_classes) + " classes");
      }
    }
  }
}

std::uint8_t unit_to_pixel(double x) {
  if (std::isnan(x)) throw DomainError("cannot quantize NaN pixel");
  const double v = std::clamp((x + 1.0) * 127.5, 0.0, 255.0);
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

Tensor center_crop(const Tensor& image, std::size_t size) {
  if (image.rank() != 3 || size == 0 || size > image.dim(1) || size > image.dim(2)) {
    throw ShapeError("cannot center crop " + to_string(image.shape()) + " to " +
                     std::to_string(size) + "x" + std::to_string(size));
  }
  const std::size_t top = (image.dim(1) - size) / 2;
  const std::size_t left = (image.dim(2) - size) / 2;
  return slice(slice(image, 1, top, top + size), 2, left, left + size);
}

Tensor flip_horizontal(const Tensor& image) {
  if (image.rank() != 3) {
    throw ShapeError("flip_horizontal expects [C, H, W], got " +
                     to_string(image.shape()));
  }
  Tensor out(image.shape(), image.precision());
  const std::size_t w = image.dim(2);
  const std::size_t rows = image.dim(0) * image.dim(1);
  auto src = image.data();
  auto dst = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t x = 0; x < w; ++x) dst[r * w + x] = src[r * w + (w - 1 - x)];
  }
  return out;
}

// ---- IDX ------------------------------------------------------------------

Dataset parse_idx_images(const std::vector<std::uint8_t>& bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000803u) {
    throw ParseError("IDX: magic " + hex(magic) + " is not 0x00000803 (ubyte, 3 dims)",
                     0);
  }
  std::size_t dims[3];
  for (std::size_t k = 0; k < 3; ++k) {
    dims[k] = read_be32(bytes, 4 + 4 * k);
    if (dims[k] == 0) throw ParseError("IDX: dimension " + std::to_string(k) + " is 0", 4 + 4 * k);
  }
  const std::size_t count = dims[0], h = dims[1], w = dims[2];
  const std::size_t expected = 16 + count * h * w;
  if (bytes.size() != expected) {
    throw ParseError("IDX: header promises " + std::to_string(count) + " images of " +
                         std::to_string(h) + "x" + std::to_string(w) + " (" +
                         std::to_string(expected) + " bytes) but the file has " +
                         std::to_string(bytes.size()),
                     std::min(bytes.size(), expected));
  }
  std::vector<RasterImage> rasters(count);
  for (std::size_t i = 0; i < count; ++i) {
    rasters[i].height = h;
    rasters[i].width = w;
    const auto begin = bytes.begin() + static_cast<std::ptrdiff_t>(16 + i * h * w);
    rasters[i].pixels.assign(begin, begin + static_cast<std::ptrdiff_t>(h * w));
  }
  return from_rasters(rasters, {}, 0);
}

std::vector<std::size_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != 0x00000801u) {
    throw ParseError("IDX labels: magic " + hex(magic) + " is not 0x00000801", 0);
  }
  const std::size_t count = read_be32(bytes, 4);
  if (bytes.size() != 8 + count) {
    throw ParseError("IDX labels: header promises " + std::to_string(count) +
                         " labels but the file has " + std::to_string(bytes.size()) +
                         " bytes",
                     std::min(bytes.size(), 8 + count));
  }
  return std::vector<std::size_t>(bytes.begin() + 8, bytes.end());
}

Dataset load_idx_images(const fs::path& path) {
  return parse_idx_images(read_file(path));
}

void attach_idx_labels(Dataset& dataset, const fs::path& path) {
  auto labels = parse_idx_labels(read_file(path));
  if (labels.size() != dataset.size()) {
    throw ShapeError(path.string() + ": " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(dataset.size()) + " images");
  }
  dataset.num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  dataset.labels = std::move(labels);
}

// ---- PGM / PPM ------------------------------------------------------------

RasterImage parse_pnm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* field) {
    skip_space();
    const std::size_t start = pos;
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos] - '0');
      if (value > (1u << 24)) throw ParseError(std::string("PNM: ") + field + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("PNM: expected ") + field, start);
    return value;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("PNM: expected binary P5 or P6 magic", 0);
  }
  RasterImage img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = read_number("width");
  img.height = read_number("height");
  skip_space();
  const std::size_t maxval_at = pos;
  const std::size_t maxval = read_number("maxval");
  if (img.width == 0 || img.height == 0) throw ParseError("PNM: zero image size", 2);
  if (maxval != 255) {
    throw ParseError("PNM: only 8-bit images (maxval 255) are supported, got " +
                         std::to_string(maxval),
                     maxval_at);
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ParseError("PNM: expected whitespace before raster", pos);
  }
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) {
    throw ParseError("PNM: raster needs " + std::to_string(n) + " bytes, found " +
                         std::to_string(bytes.size() - pos),
                     pos);
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

std::vector<std::uint8_t> encode_pnm(const RasterImage& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw ShapeError("PNM output needs 1 or 3 channels, got " +
                     std::to_string(image.channels));
  }
  const std::string header = std::string(image.channels == 1 ? "P5" : "P6") + "\n" +
                             std::to_string(image.width) + " " +
                             std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

Dataset load_pnm_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw ParameterError(dir.string() + " is not a directory");
  }
  auto image_files = [](const fs::path& d) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(d)) {
      const auto ext = entry.path().extension().string();
      if (entry.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    return files;
  };

  std::vector<RasterImage> rasters;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  auto files = image_files(dir);
  if (files.empty()) {
    std::vector<fs::path> classes;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_directory()) classes.push_back(entry.path());
    }
    std::sort(classes.begin(), classes.end());
    for (std::size_t c = 0; c < classes.size(); ++c) {
      for (const auto& f : image_files(classes[c])) {
        rasters.push_back(parse_pnm(read_file(f)));
        labels.push_back(c);
      }
    }
    num_classes = classes.size();
  } else {
    for (const auto& f : files) rasters.push_back(parse_pnm(read_file(f)));
  }
  if (rasters.empty()) {
    throw ParameterError("no .pgm or .ppm images under " + dir.string());
  }
  return from_rasters(rasters, std::move(labels), num_classes);
}

std::vector<std::uint8_t> encode_image(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("write_image expects [1|3, H, W], got " + to_string(image.shape()));
  }
  RasterImage r;
  r.channels = image.dim(0);
  r.height = image.dim(1);
  r.width = image.dim(2);
  r.pixels.resize(image.size());
  auto d = image.data();
  for (std::size_t c = 0; c < r.channels; ++c) {
    for (std::size_t y = 0; y < r.height; ++y) {
      for (std::size_t x = 0; x < r.width; ++x) {
        r.pixels[(y * r.width + x) * r.channels + c] =
            unit_to_pixel(d[(c * r.height + y) * r.width + x]);
      }
    }
  }
  return encode_pnm(r);
}

Tensor raster_to_tensor(const RasterImage& r) {
  Tensor image({r.channels, r.height, r.width});
  auto d = image.mutable_data();
  for (std::size_t y = 0; y < r.height; ++y) {
    for (std::size_t x = 0; x < r.width; ++x) {
      for (std::size_t c = 0; c < r.channels; ++c) {
        d[(c * r.height + y) * r.width + x] =
            pixel_to_unit(r.pixels[(y * r.width + x) * r.channels + c]);
      }
    }
  }
  return image;
}

Tensor read_image(const fs::path& path) { return raster_to_tensor(parse_pnm(read_file(path))); }

void write_image(const Tensor& image, const fs::path& path) {
  write_file(path, encode_image(image));
}

Tensor tile_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("tile_images: no images");
  const Shape& s = images[0].shape();
  if (s.size() != 3) throw ShapeError("tile_images expects [C, H, W] images");
  const std::size_t n = images.size();
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(double(n))));
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t out_h = rows * (h + 1) + 1, out_w = cols * (w + 1) + 1;
  Tensor grid = Tensor::full({c, out_h, out_w}, -1.0);
  auto g = grid.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    if (images[i].shape() != s) {
      throw ShapeError("tile_images: image " + std::to_string(i) + " has shape " +
                       to_string(images[i].shape()) + ", expected " + to_string(s));
    }
    const std::size_t top = 1 + (i / cols) * (h + 1), left = 1 + (i % cols) * (w + 1);
    auto d = images[i].data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          g[(ch * out_h + top + y) * out_w + left + x] = d[(ch * h + y) * w + x];
        }
      }
    }
  }
  return grid;
}

// ---- generators -----------------------------------------------------------

Dataset gaussian2d(double sigma, std::size_t count, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw ParameterError("gaussian2d sigma must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, sigma);
  Dataset ds;
  ds.width = 2;
  for (std::size_t i = 0; i < count; ++i) {
    ds.images.emplace_back(Shape{1, 1, 2}, std::vector<double>{normal(rng), normal(rng)});
  }
  return ds;
}

Dataset checkerboard2d(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> cell(0, 7);
  std::uniform_real_distribution<double> offset(0.0, 0.5);
  Dataset ds;
  ds.width = 2;
  for (std::size_t i = 0; i < count; ++i) {
    const int k = cell(rng);
    const int row = k / 2;
    const int col = 2 * (k % 2) + (row % 2);  // dark squares: row + col even
    const double x = -1.0 + 0.5 * col + offset(rng);
    const double y = -1.0 + 0.5 * row + offset(rng);
    ds.images.emplace_back(Shape{1, 1, 2}, std::vector<double>{x, y});
  }
  return ds;
}

Dataset textures(std::size_t height, std::size_t width, std::size_t count,
                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> period(3.0, 8.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  Dataset ds;
  ds.height = height;
  ds.width = width;
  for (std::size_t i = 0; i < count; ++i) {
    const double theta = angle(rng);
    const double k = 2.0 * std::numbers::pi / period(rng);
    const double p = phase(rng);
    Tensor img({1, height, width});
    auto d = img.mutable_data();
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double u = std::cos(theta) * double(x) + std::sin(theta) * double(y);
        d[y * width + x] = quantize(0.8 * std::sin(k * u + p));
      }
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

Dataset two_class_blobs(std::size_t height, std::size_t width, std::size_t count,
                        std::uint64_t seed) {
  if (height < 4 || width < 4) throw ParameterError("blobs need at least 4x4 images");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, 0.1);
  const std::size_t side_h = height / 2 - 1, side_w = width / 2 - 1;
  Dataset ds;
  ds.height = height;
  ds.width = width;
  ds.num_classes = 2;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = coin(rng) ? 1 : 0;
    const std::size_t jy = coin(rng) ? 1 : 0, jx = coin(rng) ? 1 : 0;
    const std::size_t top = label == 0 ? jy : height / 2 + jy - 1;
    const std::size_t left = label == 0 ? jx : width / 2 + jx - 1;
    Tensor img({1, height, width});
    auto d = img.mutable_data();
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const bool inside = y >= top && y < top + side_h && x >= left && x < left + side_w;
        d[y * width + x] = quantize((inside ? 0.7 : -0.7) + noise(rng));
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

Dataset load_dataset(const std::string& source, std::size_t count,
                     std::uint64_t seed) {
  const auto colon = source.find(':');
  const std::string kind = source.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : source.substr(colon + 1);
  if (kind == "gaussian2d") {
    try {
      return gaussian2d(arg.empty() ? 0.5 : std::stod(arg), count, seed);
    } catch (const std::invalid_argument&) {
      throw ParameterError("gaussian2d sigma '" + arg + "' is not a number");
    }
  }
  if (kind == "checkerboard2d") return checkerboard2d(count, seed);
  if (kind == "textures") {
    const auto [h, w] = parse_size(arg.empty() ? "8x8" : arg);
    return textures(h, w, count, seed);
  }
  if (kind == "blobs") {
    const auto [h, w] = parse_size(arg.empty() ? "8x8" : arg);
    return two_class_blobs(h, w, count, seed);
  }
  if (kind == "idx") {
    const auto sep = arg.find(':');
    Dataset ds = load_idx_images(arg.substr(0, sep));
    if (sep != std::string::npos) attach_idx_labels(ds, arg.substr(sep + 1));
    return ds;
  }
  if (kind == "pnm") return load_pnm_directory(arg);
  if (fs::is_regular_file(source)) return load_idx_images(source);
  if (fs::is_directory(source)) return load_pnm_directory(source);
  throw ParameterError("dataset '" + source +
                       "' is not a file, a directory or one of gaussian2d:<sigma>, "
                       "checkerboard2d, textures:<H>x<W>, blobs:<H>x<W>, "
                       "idx:<path>, pnm:<dir>");
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace tarflow
