#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tarflow/checkpoint.hpp"
#include "tarflow/data.hpp"
#include "tarflow/errors.hpp"
#include "tarflow/training.hpp"
#include "test_support.hpp"

namespace tarflow {
namespace {

namespace fs = std::filesystem;
using testing::randomize_model;
using testing::small_config;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() /
                   ("tarflow_data_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

// Three 4x4 images: all 0, all 255, then 0..15.
std::vector<std::uint8_t> idx_fixture() {
  std::vector<std::uint8_t> bytes;
  put_be32(bytes, 0x00000803);
  put_be32(bytes, 3);
  put_be32(bytes, 4);
  put_be32(bytes, 4);
  bytes.insert(bytes.end(), 16, 0);
  bytes.insert(bytes.end(), 16, 255);
  for (std::uint8_t i = 0; i < 16; ++i) bytes.push_back(i);
  return bytes;
}

std::size_t parse_offset(const std::function<void()>& f) {
  try {
    f();
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected a ParseError";
  return static_cast<std::size_t>(-1);
}

// ---- pixels ----------------------------------------------------------------

TEST(Pixels, AffineEndpoints) {
  EXPECT_EQ(pixel_to_unit(255), 1.0);
  EXPECT_EQ(pixel_to_unit(0), -1.0);
  EXPECT_EQ(unit_to_pixel(-1.0), 0);
  EXPECT_EQ(unit_to_pixel(1.0), 255);
  EXPECT_EQ(unit_to_pixel(0.0), 128);  // 127.5 rounds half up
  EXPECT_EQ(unit_to_pixel(-7.0), 0);
  EXPECT_EQ(unit_to_pixel(3.0), 255);
  for (int p = 0; p < 256; ++p) EXPECT_EQ(unit_to_pixel(pixel_to_unit(std::uint8_t(p))), p);
  EXPECT_THROW(unit_to_pixel(std::nan("")), DomainError);
}

// ---- IDX -------------------------------------------------------------------

TEST(Idx, ParsesThreeFourByFourImages) {
  const Dataset ds = parse_idx_images(idx_fixture());
  ASSERT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.channels, 1u);
  EXPECT_EQ(ds.height, 4u);
  EXPECT_EQ(ds.width, 4u);
  for (const auto& img : ds.images) EXPECT_EQ(img.shape(), (Shape{1, 4, 4}));
  for (double v : ds.images[0].data()) EXPECT_EQ(v, -1.0);
  for (double v : ds.images[1].data()) EXPECT_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(ds.images[2][5], 5.0 / 127.5 - 1.0);
  EXPECT_FALSE(ds.labeled());
}

TEST(Idx, CropsRectangularImagesToCenterSquare) {
  std::vector<std::uint8_t> bytes;
  put_be32(bytes, 0x00000803);
  put_be32(bytes, 1);
  put_be32(bytes, 2);
  put_be32(bytes, 4);
  for (std::uint8_t v : {0, 10, 20, 30, 40, 50, 60, 70}) bytes.push_back(v);
  const Dataset ds = parse_idx_images(bytes);
  EXPECT_EQ(ds.images[0].shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(unit_to_pixel(ds.images[0][0]), 10);
  EXPECT_EQ(unit_to_pixel(ds.images[0][3]), 60);
}

TEST(Idx, MalformedHeadersReportByteOffsets) {
  auto bytes = idx_fixture();
  bytes[3] = 0x01;
  EXPECT_EQ(parse_offset([&] { parse_idx_images(bytes); }), 0u);

  bytes = idx_fixture();
  bytes[8] = bytes[9] = bytes[10] = bytes[11] = 0;  // height 0
  EXPECT_EQ(parse_offset([&] { parse_idx_images(bytes); }), 8u);

  bytes = idx_fixture();
  bytes.pop_back();
  EXPECT_EQ(parse_offset([&] { parse_idx_images(bytes); }), bytes.size());

  bytes.resize(6);
  EXPECT_EQ(parse_offset([&] { parse_idx_images(bytes); }), 4u);
}

TEST(Idx, LabelsAttachAndDefineClasses) {
  const auto dir = scratch_dir("idx");
  write_file(dir / "images.idx", idx_fixture());
  std::vector<std::uint8_t> labels;
  put_be32(labels, 0x00000801);
  put_be32(labels, 3);
  for (std::uint8_t l : {2, 0, 1}) labels.push_back(l);
  write_file(dir / "labels.idx", labels);
  const Dataset ds = load_dataset("idx:" + (dir / "images.idx").string() + ":" +
                                  (dir / "labels.idx").string());
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{2, 0, 1}));
  EXPECT_EQ(ds.num_classes, 3u);
  EXPECT_EQ(load_dataset((dir / "images.idx").string()).size(), 3u);

  labels[3] = 0x03;
  EXPECT_EQ(parse_offset([&] { parse_idx_labels(labels); }), 0u);
  fs::remove_all(dir);
}

// ---- PGM / PPM -------------------------------------------------------------

TEST(Pnm, EncodeParseRoundTrip) {
  for (std::size_t channels : {1u, 3u}) {
    RasterImage r;
    r.channels = channels;
    r.height = 3;
    r.width = 5;
    for (std::size_t i = 0; i < 15 * channels; ++i) r.pixels.push_back(std::uint8_t(i * 7));
    const RasterImage back = parse_pnm(encode_pnm(r));
    EXPECT_EQ(back.channels, channels);
    EXPECT_EQ(back.height, 3u);
    EXPECT_EQ(back.width, 5u);
    EXPECT_EQ(back.pixels, r.pixels);
  }
}

TEST(Pnm, HeaderCommentsAndErrors) {
  const std::string text = "P5\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.push_back(0);
  bytes.push_back(255);
  const RasterImage r = parse_pnm(bytes);
  EXPECT_EQ(r.pixels, (std::vector<std::uint8_t>{0, 255}));

  const std::string p2 = "P2\n1 1\n255\n0";
  EXPECT_EQ(parse_offset([&] { parse_pnm({p2.begin(), p2.end()}); }), 0u);
  const std::string deep = "P5\n1 1\n65535\n\0\0";
  EXPECT_EQ(parse_offset([&] { parse_pnm({deep.begin(), deep.end()}); }), 7u);
  bytes.pop_back();
  EXPECT_THROW(parse_pnm(bytes), ParseError);
}

TEST(Pnm, DirectoryOfClassFolders) {
  const auto dir = scratch_dir("pnm");
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  RasterImage r;
  r.height = 4;
  r.width = 6;
  r.pixels.assign(24, 200);
  write_file(dir / "a" / "0.pgm", encode_pnm(r));
  write_file(dir / "b" / "0.pgm", encode_pnm(r));
  write_file(dir / "b" / "1.pgm", encode_pnm(r));
  const Dataset ds = load_dataset("pnm:" + dir.string());
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.height, 4u);
  EXPECT_EQ(ds.width, 4u);
  EXPECT_EQ(ds.labels, (std::vector<std::size_t>{0, 1, 1}));
  EXPECT_EQ(ds.num_classes, 2u);
  fs::remove_all(dir);
}

// ---- image output ------------------------------------------------------------

std::vector<std::uint8_t> raster_of(const Tensor& image) {
  return parse_pnm(encode_image(image)).pixels;
}

TEST(WriteImage, QuantizesWithRoundHalfUp) {
  for (std::uint8_t b : raster_of(Tensor::full({1, 2, 3}, -1.0))) EXPECT_EQ(b, 0);
  for (std::uint8_t b : raster_of(Tensor::full({3, 2, 2}, 1.0))) EXPECT_EQ(b, 255);
  for (std::uint8_t b : raster_of(Tensor::full({1, 1, 1}, 0.0))) EXPECT_EQ(b, 128);
  const auto bytes = encode_image(Tensor::full({1, 2, 3}, -1.0));
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + header.size()), header);
}

TEST(WriteImage, InterleavesColourChannels) {
  Tensor image = Tensor::full({3, 1, 2}, -1.0);
  image.mutable_data()[0] = 1.0;   // R of pixel 0
  image.mutable_data()[3] = 1.0;   // G of pixel 1
  EXPECT_EQ(raster_of(image), (std::vector<std::uint8_t>{255, 0, 0, 0, 255, 0}));
}

TEST(WriteImage, RejectsOtherChannelCounts) {
  EXPECT_THROW(encode_image(Tensor::zeros({2, 2, 2})), ShapeError);
  EXPECT_THROW(encode_image(Tensor::zeros({4, 4})), ShapeError);
}

TEST(WriteImage, FileRoundTripsThroughReadImage) {
  const auto dir = scratch_dir("img");
  Tensor image({1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) image.mutable_data()[i] = pixel_to_unit(std::uint8_t(60 * i));
  write_image(image, dir / "x.pgm");
  EXPECT_EQ(read_image(dir / "x.pgm"), image);
  fs::remove_all(dir);
}

TEST(TileImages, GridWithBorders) {
  std::vector<Tensor> images(5, Tensor::full({1, 2, 2}, 1.0));
  const Tensor grid = tile_images(images);
  EXPECT_EQ(grid.shape(), (Shape{1, 2 * 2 + 3, 3 * 2 + 4}));  // 2 rows, 3 columns
  EXPECT_EQ(grid[0], -1.0);
}

// ---- generators --------------------------------------------------------------

TEST(Generators, Gaussian2dHasRequestedSpread) {
  const Dataset ds = gaussian2d(0.5, 100000, 1);
  double sum = 0.0;
  double sq = 0.0;
  for (const auto& img : ds.images) {
    for (double v : img.data()) {
      sum += v;
      sq += v * v;
    }
  }
  const double n = 2.0 * ds.size();
  const double mean = sum / n;
  EXPECT_NEAR(std::sqrt(sq / n - mean * mean), 0.5, 0.01);
  EXPECT_EQ(ds.images[0].shape(), (Shape{1, 1, 2}));
}

TEST(Generators, ImageGeneratorsAreQuantizedAndSeeded) {
  const Dataset tex = load_dataset("textures:8x6", 10, 3);
  EXPECT_EQ(tex.images[0].shape(), (Shape{1, 8, 6}));
  for (const auto& img : tex.images) {
    for (double v : img.data()) EXPECT_EQ(pixel_to_unit(unit_to_pixel(v)), v);
  }
  EXPECT_EQ(load_dataset("textures:8x6", 10, 3).images[7], tex.images[7]);
  const Dataset blobs = load_dataset("blobs:8x8", 20, 4);
  EXPECT_EQ(blobs.num_classes, 2u);
  EXPECT_EQ(blobs.labels.size(), 20u);
  EXPECT_NO_THROW(blobs.validate());
  const Dataset board = load_dataset("checkerboard2d", 50, 5);
  for (const auto& img : board.images) {
    EXPECT_GE(img[0], -1.0);
    EXPECT_LE(img[1], 1.0);
  }
  EXPECT_THROW(load_dataset("nonsense:3"), ParameterError);
}

// ---- checkpoints -------------------------------------------------------------

Checkpoint trained_checkpoint(Precision precision, bool vp, std::size_t classes) {
  ModelConfig cfg = small_config(1, 4, 4, 2, 2, 1, classes);
  cfg.vp_mode = vp;
  TrainState state = TrainState::fresh(cfg, 6, precision);
  Dataset data = classes > 0 ? two_class_blobs(4, 4, 64, 7) : textures(4, 4, 64, 7);
  TrainOptions opt;
  opt.batch_size = 16;
  opt.epochs = 1;
  train(data, state, opt);
  return make_checkpoint(state);
}

TEST(CheckpointFile, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch_dir("ckpt");
  for (Precision p : {Precision::f64, Precision::f32}) {
    for (bool vp : {false, true}) {
      const Checkpoint ckpt = trained_checkpoint(p, vp, vp ? 0 : 2);
      save_checkpoint(ckpt, dir / "a.ckpt");
      const Checkpoint loaded = load_checkpoint(dir / "a.ckpt");
      save_checkpoint(loaded, dir / "b.ckpt");
      EXPECT_EQ(read_file(dir / "a.ckpt"), read_file(dir / "b.ckpt"));
      EXPECT_EQ(loaded.model.config(), ckpt.model.config());
      EXPECT_EQ(loaded.model.precision(), p);
      EXPECT_EQ(loaded.step, ckpt.step);
      ASSERT_TRUE(loaded.optimizer.has_value());
      EXPECT_EQ(*loaded.optimizer, *ckpt.optimizer);
    }
  }
  fs::remove_all(dir);
}

TEST(CheckpointFile, WithoutOptimizerState) {
  TarFlowModel model = TarFlowModel::init(small_config(1, 4, 4, 2, 1, 1), 8);
  std::mt19937_64 rng(9);
  randomize_model(model, rng);
  Checkpoint ckpt;
  ckpt.model = model;
  const auto bytes = serialize_checkpoint(ckpt);
  const Checkpoint back = deserialize_checkpoint(bytes);
  EXPECT_FALSE(back.optimizer.has_value());
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  TrainState state = restore_train_state(back);
  EXPECT_EQ(state.optimizer.first_moment.size(), model_parameters(state.model).size());
}

TEST(CheckpointFile, CorruptionIsReportedWithOffsets) {
  Checkpoint ckpt;
  ckpt.model = TarFlowModel::init(small_config(1, 4, 4, 2, 1, 1), 10);
  const auto good = serialize_checkpoint(ckpt);

  auto bad = good;
  bad[0] = 'X';
  EXPECT_EQ(parse_offset([&] { deserialize_checkpoint(bad); }), 0u);

  bad = good;
  bad[8] = 9;  // version
  EXPECT_EQ(parse_offset([&] { deserialize_checkpoint(bad); }), 8u);

  bad = good;
  bad[12] = 7;  // precision code
  EXPECT_EQ(parse_offset([&] { deserialize_checkpoint(bad); }), 12u);

  bad = good;
  bad[24] = 100;  // width 100 is not a multiple of 64
  EXPECT_EQ(parse_offset([&] { deserialize_checkpoint(bad); }), 16u);

  for (std::size_t cut : {std::size_t{5}, std::size_t{40}, good.size() / 2, good.size() - 1}) {
    bad.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_LE(parse_offset([&] { deserialize_checkpoint(bad); }), cut);
  }

  bad = good;
  bad.push_back(0);
  EXPECT_EQ(parse_offset([&] { deserialize_checkpoint(bad); }), good.size());
}

TEST(CheckpointFile, MissingFileThrows) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.ckpt"), std::runtime_error);
}

}  // namespace
}  // namespace tarflow
