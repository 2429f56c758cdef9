#pragma once

#include <cstddef>
#include <span>

#include "issnet/tensor.hpp"

namespace issnet {

/// c = a * b for rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Single-image cross-correlation.
/// input: c_in x h x w, kernels: c_out x c_in x kh x kw; output: c_out x h' x w'
/// with h' = (h + 2 pad - kh) / stride + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding);

/// Largest eigenvalue of x^T x by power iteration from a fixed pseudo-random
/// start; accurate to 1e-8 relative.
double spectral_norm_sq(const Tensor& x);

namespace kernels {

// Raw row-major GEMM kernels used by the network passes. All accumulate into c.

/// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
/// c[m x n] += a^T * b, with a stored k x m and b stored k x n
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);
/// c[m x n] += a * b^T, with a stored m x k and b stored n x k
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c);

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  /// Throws DimensionError when the kernel does not fit the padded input.
  void validate() const;
};

/// Unfolds one image (channels x h x w) into a patch() x (out_h * out_w) matrix.
void im2col(const ConvGeometry& g, const double* image, double* columns);
/// Adjoint of im2col: scatters-adds columns back into the image gradient.
void col2im(const ConvGeometry& g, const double* columns, double* image);

}  // namespace kernels

}  // namespace issnet
