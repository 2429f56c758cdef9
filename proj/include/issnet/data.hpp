#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "issnet/network.hpp"
#include "issnet/tensor.hpp"

namespace issnet {

/// Inputs (n x per-sample shape) with their targets.
struct Dataset {
  Tensor x;
  Targets y;

  std::size_t size() const { return x.rank() ? x.extent(0) : 0; }
  Shape sample_shape() const { return Shape(x.shape().begin() + 1, x.shape().end()); }
  Dataset select(std::span<const std::size_t> rows) const;
  Dataset head(std::size_t n) const;
};

struct SyntheticRegression {
  Dataset data;  // x: n x d, y: n x 1 (mse targets)
  Tensor w_star;
  std::vector<std::size_t> support;  // sorted indices of the nonzero coordinates
};

/// X with i.i.d. standard normal entries; w* with `s` nonzero coordinates at
/// random positions, magnitudes uniform on [1, 2) with random signs;
/// y = X w* + sigma * noise.
SyntheticRegression gen_synthetic(std::size_t n, std::size_t d, std::size_t s, double noise_sigma,
                                  std::uint64_t seed);

/// Decoded IDX file: big-endian header (0x00 0x00, type code, rank, extents)
/// followed by the raw payload, converted to doubles.
struct IdxArray {
  std::uint8_t type_code = 0;
  Shape dims;
  std::vector<double> values;
};

IdxArray read_idx(const std::filesystem::path& path);
IdxArray parse_idx(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

enum class ImageLayout { flat, chw };

/// Unsigned-byte images scaled to [0, 1] and integer labels. `flat` yields
/// n x (h*w) inputs for dense nets, `chw` yields n x 1 x h x w.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 ImageLayout layout = ImageLayout::flat);

/// The standard four-file layout: <dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte.
struct TrainTest {
  Dataset train;
  Dataset test;
};
TrainTest load_mnist_dir(const std::filesystem::path& dir, ImageLayout layout = ImageLayout::flat);

}  // namespace issnet
