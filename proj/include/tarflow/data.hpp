#pragma once

// In-memory image datasets scaled to [-1, 1], their on-disk sources (IDX
// files, PGM/PPM directories, built-in generators) and 8-bit image output.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tarflow/tensor.hpp"

namespace tarflow {

struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::vector<Tensor> images;        // each [C, H, W]
  std::vector<std::size_t> labels;   // empty or one per image
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }
  bool labeled() const { return !labels.empty(); }
  // Throws ShapeError if an image or label disagrees with the header fields.
  void validate() const;
};

// 8-bit pixel to [-1, 1]: p / 127.5 - 1.
inline double pixel_to_unit(std::uint8_t p) { return p / 127.5 - 1.0; }
// [-1, 1] to 8-bit: round-half-up of (x + 1) * 127.5, clamped to [0, 255].
std::uint8_t unit_to_pixel(double x);

// Center crop of a [C, H, W] image to [C, size, size].
Tensor center_crop(const Tensor& image, std::size_t size);

// Horizontal mirror of a [C, H, W] image.
Tensor flip_horizontal(const Tensor& image);

// ---- IDX ------------------------------------------------------------------

// Unsigned-byte image tensor file (magic 0x00000803). Images are center
// cropped to squares. Errors carry the byte offset of the bad field.
Dataset load_idx_images(const std::filesystem::path& path);
Dataset parse_idx_images(const std::vector<std::uint8_t>& bytes);
// Label file (magic 0x00000801); num_classes becomes max label + 1.
std::vector<std::size_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes);
void attach_idx_labels(Dataset& dataset, const std::filesystem::path& path);

// ---- PGM / PPM ------------------------------------------------------------

struct RasterImage {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

RasterImage parse_pnm(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_pnm(const RasterImage& image);

// Reads every .pgm/.ppm file in `dir`, sorted by name. If `dir` holds only
// subdirectories, each subdirectory (sorted) is one class. All images are
// center cropped to the largest square that fits the smallest of them.
Dataset load_pnm_directory(const std::filesystem::path& dir);

// Interleaved 8-bit raster to [C, H, W] in [-1, 1].
Tensor raster_to_tensor(const RasterImage& raster);
// A P5/P6 file as [C, H, W] in [-1, 1], without cropping.
Tensor read_image(const std::filesystem::path& path);

// [C, H, W] in [-1, 1] to a P5 (C = 1) or P6 (C = 3) file.
void write_image(const Tensor& image, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_image(const Tensor& image);
// Tiles images row-major into a near-square grid with a 1-pixel -1 border.
Tensor tile_images(const std::vector<Tensor>& images);

// ---- generators -----------------------------------------------------------

// Points in R^2 as 1 x 1 x 2 images.
Dataset gaussian2d(double sigma, std::size_t count, std::uint64_t seed);
// Uniform on the dark squares of a 4 x 4 board over [-1, 1]^2.
Dataset checkerboard2d(std::size_t count, std::uint64_t seed);
// Single-channel 8-bit sinusoidal gratings with random orientation, period
// and phase.
Dataset textures(std::size_t height, std::size_t width, std::size_t count,
                 std::uint64_t seed);
// Two labeled classes of 8-bit images: a bright square in the top-left
// quadrant (class 0) or the bottom-right quadrant (class 1), with jitter and
// pixel noise.
Dataset two_class_blobs(std::size_t height, std::size_t width, std::size_t count,
                        std::uint64_t seed);

// Dataset source by description: "idx:<path>[:<labels path>]",
// "pnm:<dir>", "gaussian2d:<sigma>", "checkerboard2d", "textures:<H>x<W>",
// "blobs:<H>x<W>". A bare path is read as IDX if it is a file and as a
// PGM/PPM directory otherwise. Generators use `count` and `seed`.
Dataset load_dataset(const std::string& source, std::size_t count = 4096,
                     std::uint64_t seed = 0);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes);

}  // namespace tarflow
