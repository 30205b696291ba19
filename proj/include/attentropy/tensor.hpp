#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace attentropy {

// Dense row-major float32 array. Storage only: arithmetic elsewhere in the
// library is carried out in double precision.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  // Throws ShapeError when data.size() != product(shape) or shape is empty,
  // DomainError when any element is NaN or infinite.
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  // Rounds each double to float32.
  static Tensor from_doubles(std::vector<std::size_t> shape,
                             std::span<const double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }
  std::vector<double> to_doubles() const;

  bool operator==(const Tensor&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0);
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px);

  std::uint8_t at(std::size_t x, std::size_t y) const {
    return pixels[y * width + x];
  }
  std::uint8_t& at(std::size_t x, std::size_t y) {
    return pixels[y * width + x];
  }

  bool operator==(const GrayImage&) const = default;
};

// Per-pixel labels: 0 background, 1 object, 255 ignore.
class BinaryMask {
 public:
  static constexpr std::uint8_t kBackground = 0;
  static constexpr std::uint8_t kObject = 1;
  static constexpr std::uint8_t kIgnore = 255;

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h, std::uint8_t fill = kBackground);
  // Throws FormatError on any value outside {0, 1, 255}.
  BinaryMask(std::size_t w, std::size_t h, std::vector<std::uint8_t> values);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::span<const std::uint8_t> values() const { return values_; }

  std::uint8_t at(std::size_t x, std::size_t y) const {
    return values_[y * width_ + x];
  }
  void set(std::size_t x, std::size_t y, std::uint8_t v);

  bool operator==(const BinaryMask&) const = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> values_;
};

// NPY v1.0, '<f4', C order.
Tensor load_tensor(const std::filesystem::path& path);
void save_tensor(const Tensor& t, const std::filesystem::path& path);

// Byte-level codec, exposed for in-memory use and tests.
Tensor decode_npy(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_npy(const Tensor& t);

// PGM P5, maxval 255.
GrayImage load_image(const std::filesystem::path& path);
void save_image(const GrayImage& image, const std::filesystem::path& path);
BinaryMask load_mask(const std::filesystem::path& path);
void save_mask(const BinaryMask& mask, const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes);

}  // namespace attentropy
