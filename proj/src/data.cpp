#include "issnet/data.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>

#include "issnet/errors.hpp"
#include "issnet/rng.hpp"

namespace issnet {

namespace {

std::uint32_t read_be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
}

std::size_t element_size(std::uint8_t code) {
  switch (code) {
    case 0x08:
    case 0x09:
      return 1;
    case 0x0B:
      return 2;
    case 0x0C:
    case 0x0D:
      return 4;
    case 0x0E:
      return 8;
    default:
      return 0;
  }
}

double decode(std::uint8_t code, const std::uint8_t* p) {
  switch (code) {
    case 0x08:
      return p[0];
    case 0x09:
      return static_cast<std::int8_t>(p[0]);
    case 0x0B:
      return static_cast<std::int16_t>((p[0] << 8) | p[1]);
    case 0x0C:
      return static_cast<std::int32_t>(read_be32(p));
    case 0x0D:
      return std::bit_cast<float>(read_be32(p));
    case 0x0E: {
      const std::uint64_t v = (std::uint64_t{read_be32(p)} << 32) | read_be32(p + 4);
      return std::bit_cast<double>(v);
    }
    default:
      return 0.0;
  }
}

}  // namespace

Dataset Dataset::select(std::span<const std::size_t> rows) const {
  Dataset out;
  const std::size_t width = size() ? x.size() / size() : 0;
  Shape shape = x.shape();
  shape[0] = rows.size();
  out.x = Tensor(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw DimensionError("dataset row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(x.data() + rows[i] * width, width, out.x.data() + i * width);
  }
  out.y = y.select(rows);
  return out;
}

Dataset Dataset::head(std::size_t n) const {
  std::vector<std::size_t> rows(std::min(n, size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return select(rows);
}

SyntheticRegression gen_synthetic(std::size_t n, std::size_t d, std::size_t s, double noise_sigma,
                                  std::uint64_t seed) {
  if (n == 0 || d == 0 || s == 0 || s > d) throw ArgumentError("gen_synthetic: need n, d >= 1 and 0 < s <= d");
  if (!(noise_sigma >= 0.0)) throw ArgumentError("gen_synthetic: noise sigma must be non-negative");
  SeededRng rng(seed);
  SyntheticRegression out;

  std::vector<std::size_t> coords(d);
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(coords));
  out.support.assign(coords.begin(), coords.begin() + static_cast<std::ptrdiff_t>(s));
  std::sort(out.support.begin(), out.support.end());

  out.w_star = Tensor({d});
  for (std::size_t j : out.support) {
    const double magnitude = 1.0 + rng.uniform();
    out.w_star[j] = rng.uniform() < 0.5 ? -magnitude : magnitude;
  }

  out.data.x = Tensor({n, d});
  for (double& v : out.data.x.values()) v = rng.normal();
  out.data.y.values = Tensor({n, 1});
  for (std::size_t i = 0; i < n; ++i) {
    double yi = 0.0;
    for (std::size_t j = 0; j < d; ++j) yi += out.data.x.at(i, j) * out.w_star[j];
    out.data.y.values[i] = yi + noise_sigma * rng.normal();
  }
  return out;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < 4) throw FormatError(origin + ": file shorter than the 4-byte IDX magic (offset 0)");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError(origin + ": bad IDX magic at byte offset 0");
  IdxArray out;
  out.type_code = bytes[2];
  const std::size_t esize = element_size(out.type_code);
  if (esize == 0) throw FormatError(origin + ": unknown IDX type code at byte offset 2");
  const std::size_t rank = bytes[3];
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header)
    throw FormatError(origin + ": truncated IDX header, expected " + std::to_string(header) + " bytes, found " +
                      std::to_string(bytes.size()));
  for (std::size_t i = 0; i < rank; ++i) out.dims.push_back(read_be32(bytes.data() + 4 + 4 * i));
  const std::size_t count = shape_size(out.dims);
  const std::size_t expected = header + count * esize;
  if (bytes.size() != expected)
    throw FormatError(origin + ": IDX payload length mismatch at byte offset " + std::to_string(header) +
                      ": expected " + std::to_string(expected) + " bytes in total, found " +
                      std::to_string(bytes.size()));
  out.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) out.values[i] = decode(out.type_code, bytes.data() + header + i * esize);
  return out;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes, path.string());
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, ImageLayout layout) {
  IdxArray img = read_idx(images);
  IdxArray lab = read_idx(labels);
  if (img.type_code != 0x08 || img.dims.size() != 3)
    throw FormatError(images.string() + ": expected unsigned-byte rank-3 images");
  if (lab.type_code != 0x08 || lab.dims.size() != 1 || lab.dims[0] != img.dims[0])
    throw FormatError(labels.string() + ": expected one unsigned-byte label per image");
  const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
  for (double& v : img.values) v /= 255.0;
  Dataset out;
  out.x = layout == ImageLayout::flat ? Tensor({n, h * w}, std::move(img.values))
                                      : Tensor({n, 1, h, w}, std::move(img.values));
  out.y.classes.reserve(n);
  for (double v : lab.values) out.y.classes.push_back(static_cast<std::size_t>(v));
  return out;
}

TrainTest load_mnist_dir(const std::filesystem::path& dir, ImageLayout layout) {
  return {load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", layout),
          load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", layout)};
}

}  // namespace issnet
