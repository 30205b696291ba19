#include "attentropy/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "attentropy/error.hpp"

namespace attentropy {
namespace {

constexpr std::string_view kNpyMagic{"\x93NUMPY", 6};
constexpr std::size_t kNpyAlign = 64;

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) |
        (v >> 24);
  }
  return v;
}

FormatError header_error(const std::string& field, const std::string& what) {
  return FormatError(FormatError::Kind::kMalformedHeader, field,
                     "malformed NPY header: " + field + ": " + what);
}

// Returns the text following `'key':` in a Python dict literal, trimmed.
std::optional<std::string_view> dict_value(std::string_view dict,
                                           std::string_view key) {
  std::string quoted = "'" + std::string(key) + "'";
  auto pos = dict.find(quoted);
  if (pos == std::string_view::npos) return std::nullopt;
  pos = dict.find(':', pos + quoted.size());
  if (pos == std::string_view::npos) return std::nullopt;
  ++pos;
  while (pos < dict.size() && std::isspace(static_cast<unsigned char>(dict[pos])))
    ++pos;
  return dict.substr(pos);
}

std::vector<std::size_t> parse_shape(std::string_view text) {
  if (text.empty() || text.front() != '(')
    throw header_error("shape", "expected tuple");
  auto close = text.find(')');
  if (close == std::string_view::npos)
    throw header_error("shape", "unterminated tuple");
  std::string_view body = text.substr(1, close - 1);
  std::vector<std::size_t> shape;
  std::size_t i = 0;
  while (i < body.size()) {
    while (i < body.size() &&
           (std::isspace(static_cast<unsigned char>(body[i])) || body[i] == ','))
      ++i;
    if (i >= body.size()) break;
    if (!std::isdigit(static_cast<unsigned char>(body[i])))
      throw header_error("shape", "non-integer extent");
    std::size_t v = 0;
    while (i < body.size() && std::isdigit(static_cast<unsigned char>(body[i]))) {
      v = v * 10 + static_cast<std::size_t>(body[i] - '0');
      ++i;
    }
    shape.push_back(v);
  }
  if (shape.empty()) throw header_error("shape", "zero-dimensional arrays unsupported");
  return shape;
}

std::string format_shape(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

// Parses a PGM P5 header and returns (width, height, payload offset).
struct PgmHeader {
  std::size_t width;
  std::size_t height;
  std::size_t offset;
};

PgmHeader parse_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw FormatError(FormatError::Kind::kMalformedHeader, "magic",
                      "malformed PGM: magic must be P5");
  std::size_t pos = 2;
  auto next_token = [&](const char* field) -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos]))
      throw FormatError(FormatError::Kind::kMalformedHeader, field,
                        std::string("malformed PGM: bad ") + field);
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (std::size_t{1} << 31))
        throw FormatError(FormatError::Kind::kMalformedHeader, field,
                          std::string("malformed PGM: ") + field + " too large");
      ++pos;
    }
    return v;
  };
  const std::size_t w = next_token("width");
  const std::size_t h = next_token("height");
  const std::size_t maxval = next_token("maxval");
  if (w == 0 || h == 0)
    throw FormatError(FormatError::Kind::kMalformedHeader, "dimensions",
                      "malformed PGM: bad dimensions " + std::to_string(w) +
                          "x" + std::to_string(h));
  if (maxval != 255)
    throw FormatError(FormatError::Kind::kUnsupportedDtype, "maxval",
                      "unsupported PGM maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos]))
    throw FormatError(FormatError::Kind::kMalformedHeader, "maxval",
                      "malformed PGM: missing separator after maxval");
  ++pos;
  if (bytes.size() - pos != w * h)
    throw FormatError(FormatError::Kind::kTruncatedPayload, "payload",
                      "PGM payload has " + std::to_string(bytes.size() - pos) +
                          " bytes, header implies " + std::to_string(w * h));
  return {w, h, pos};
}

std::vector<std::uint8_t> encode_pgm(std::size_t w, std::size_t h,
                                     std::span<const std::uint8_t> px) {
  std::string header =
      "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), px.begin(), px.end());
  return out;
}

void check_mask_values(std::span<const std::uint8_t> values) {
  for (auto v : values) {
    if (v != BinaryMask::kBackground && v != BinaryMask::kObject &&
        v != BinaryMask::kIgnore)
      throw FormatError(FormatError::Kind::kIllegalValue, "pixel",
                        "illegal mask value " + std::to_string(v));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty()) throw ShapeError("tensor needs at least one dimension");
  if (product(shape_) != data_.size())
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape product " +
                     std::to_string(product(shape_)));
  for (float v : data_)
    if (!std::isfinite(v)) throw DomainError("tensor contains non-finite value");
}

Tensor Tensor::from_doubles(std::vector<std::size_t> shape,
                            std::span<const double> values) {
  std::vector<float> data(values.size());
  std::transform(values.begin(), values.end(), data.begin(),
                 [](double v) { return static_cast<float>(v); });
  return Tensor(std::move(shape), std::move(data));
}

std::vector<double> Tensor::to_doubles() const {
  return std::vector<double>(data_.begin(), data_.end());
}

GrayImage::GrayImage(std::size_t w, std::size_t h, std::uint8_t fill)
    : width(w), height(h), pixels(w * h, fill) {}

GrayImage::GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px)
    : width(w), height(h), pixels(std::move(px)) {
  if (pixels.size() != w * h)
    throw ShapeError("image pixel count does not match dimensions");
}

BinaryMask::BinaryMask(std::size_t w, std::size_t h, std::uint8_t fill)
    : width_(w), height_(h), values_(w * h, fill) {
  check_mask_values(values_);
}

BinaryMask::BinaryMask(std::size_t w, std::size_t h,
                       std::vector<std::uint8_t> values)
    : width_(w), height_(h), values_(std::move(values)) {
  if (values_.size() != w * h)
    throw ShapeError("mask value count does not match dimensions");
  check_mask_values(values_);
}

void BinaryMask::set(std::size_t x, std::size_t y, std::uint8_t v) {
  check_mask_values(std::span<const std::uint8_t>(&v, 1));
  values_[y * width_ + x] = v;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path,
                std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor decode_npy(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 10 ||
      std::memcmp(bytes.data(), kNpyMagic.data(), kNpyMagic.size()) != 0)
    throw header_error("magic", "missing \\x93NUMPY");
  if (bytes[6] != 1 || bytes[7] != 0)
    throw header_error("version", "only NPY 1.0 is supported");
  const std::size_t header_len = bytes[8] | (std::size_t{bytes[9]} << 8);
  if (bytes.size() < 10 + header_len)
    throw header_error("header_len", "header extends past end of file");
  std::string_view dict(reinterpret_cast<const char*>(bytes.data() + 10),
                        header_len);

  auto descr = dict_value(dict, "descr");
  if (!descr) throw header_error("descr", "missing");
  if (descr->empty() || descr->front() != '\'')
    throw header_error("descr", "expected quoted string");
  auto end = descr->find('\'', 1);
  if (end == std::string_view::npos) throw header_error("descr", "unterminated");
  std::string_view dtype = descr->substr(1, end - 1);
  if (dtype != "<f4")
    throw FormatError(FormatError::Kind::kUnsupportedDtype, "descr",
                      "unsupported dtype " + std::string(dtype));

  auto fortran = dict_value(dict, "fortran_order");
  if (!fortran) throw header_error("fortran_order", "missing");
  if (fortran->starts_with("True"))
    throw header_error("fortran_order", "Fortran order unsupported");
  if (!fortran->starts_with("False")) throw header_error("fortran_order", "not a bool");

  auto shape_text = dict_value(dict, "shape");
  if (!shape_text) throw header_error("shape", "missing");
  auto shape = parse_shape(*shape_text);

  const std::size_t count = product(shape);
  const std::size_t payload = bytes.size() - 10 - header_len;
  if (payload != count * 4)
    throw FormatError(FormatError::Kind::kTruncatedPayload, "payload",
                      "truncated payload: " + std::to_string(payload) +
                          " bytes, shape " + format_shape(shape) + " needs " +
                          std::to_string(count * 4));

  std::vector<float> data(count);
  const std::uint8_t* src = bytes.data() + 10 + header_len;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t raw;
    std::memcpy(&raw, src + 4 * i, 4);
    data[i] = std::bit_cast<float>(to_little(raw));
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> encode_npy(const Tensor& t) {
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': " +
                     format_shape(t.shape()) + ", }";
  // Pad with spaces so that the payload starts on an aligned offset.
  std::size_t total = 10 + dict.size() + 1;
  dict.append((kNpyAlign - total % kNpyAlign) % kNpyAlign, ' ');
  dict.push_back('\n');

  std::vector<std::uint8_t> out(kNpyMagic.begin(), kNpyMagic.end());
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(dict.size() & 0xFF));
  out.push_back(static_cast<std::uint8_t>(dict.size() >> 8));
  out.insert(out.end(), dict.begin(), dict.end());
  const std::size_t offset = out.size();
  out.resize(offset + 4 * t.size());
  auto data = t.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint32_t raw = to_little(std::bit_cast<std::uint32_t>(data[i]));
    std::memcpy(out.data() + offset + 4 * i, &raw, 4);
  }
  return out;
}

Tensor load_tensor(const std::filesystem::path& path) {
  return decode_npy(read_file(path));
}

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file(path, encode_npy(t));
}

GrayImage load_image(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  auto h = parse_pgm(bytes);
  return GrayImage(h.width, h.height,
                   std::vector<std::uint8_t>(bytes.begin() + h.offset, bytes.end()));
}

void save_image(const GrayImage& image, const std::filesystem::path& path) {
  write_file(path, encode_pgm(image.width, image.height, image.pixels));
}

BinaryMask load_mask(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  auto h = parse_pgm(bytes);
  return BinaryMask(h.width, h.height,
                    std::vector<std::uint8_t>(bytes.begin() + h.offset, bytes.end()));
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& path) {
  write_file(path, encode_pgm(mask.width(), mask.height(), mask.values()));
}

}  // namespace attentropy
