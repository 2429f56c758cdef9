#include "issnet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "issnet/errors.hpp"
#include "issnet/rng.hpp"

namespace issnet {

namespace kernels {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      if (av == 0.0) continue;
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t t = 0; t < k; ++t) {
    const double* at = a + t * m;
    const double* bt = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = at[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      // Four partial sums, lane fixed by t % 4 so appending terms never
      // reorders the existing ones.
      double s[4] = {0.0, 0.0, 0.0, 0.0};
      std::size_t t = 0;
      for (; t + 4 <= k; t += 4)
        for (std::size_t l = 0; l < 4; ++l) s[l] += ai[t + l] * bj[t + l];
      for (std::size_t l = 0; t < k; ++t, ++l) s[l] += ai[t] * bj[t];
      c[i * n + j] += (s[0] + s[1]) + (s[2] + s[3]);
    }
  }
}

void ConvGeometry::validate() const {
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  if (kernel_h > height + 2 * padding || kernel_w > width + 2 * padding) {
    throw DimensionError("conv2d: kernel " + std::to_string(kernel_h) + "x" + std::to_string(kernel_w) +
                         " larger than padded input " + std::to_string(height + 2 * padding) + "x" +
                         std::to_string(width + 2 * padding));
  }
}

void im2col(const ConvGeometry& g, const double* image, double* columns) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        double* row = columns + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            const bool inside = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(g.height) &&
                                x < static_cast<std::ptrdiff_t>(g.width);
            row[oy * ow + ox] = inside ? image[(c * g.height + y) * g.width + x] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* columns, double* image) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const double* row = columns + ((c * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t x =
                static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.width)) continue;
            image[(c * g.height + y) * g.width + x] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data());
  require_finite(c, "matmul");
  return c;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride, std::size_t padding) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.extent(1) != input.extent(0)) {
    throw DimensionError("conv2d: input " + shape_to_string(input.shape()) + " kernels " +
                         shape_to_string(kernels.shape()));
  }
  const kernels::ConvGeometry g{input.extent(0), input.extent(1), input.extent(2), kernels.extent(2),
                                kernels.extent(3), stride,          padding};
  g.validate();
  const std::size_t c_out = kernels.extent(0);
  const std::size_t plane = g.out_h() * g.out_w();
  std::vector<double> columns(g.patch() * plane);
  kernels::im2col(g, input.data(), columns.data());
  Tensor out({c_out, g.out_h(), g.out_w()});
  kernels::gemm_nn(c_out, plane, g.patch(), kernels.data(), columns.data(), out.data());
  require_finite(out, "conv2d");
  return out;
}

double spectral_norm_sq(const Tensor& x) {
  if (x.rank() != 2 || x.extent(0) == 0 || x.extent(1) == 0) {
    throw DimensionError("spectral_norm_sq: need a non-empty matrix, got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.extent(0), d = x.extent(1);
  constexpr int kMaxIterations = 100000;
  // Successive estimates must agree far below the 1e-8 target because the
  // error can exceed the step-to-step change when the spectral gap is small.
  constexpr double kTolerance = 1e-13;

  SeededRng rng(0x5eed);
  std::vector<double> v(d), xv(n), next(d);
  for (double& e : v) e = rng.normal();

  auto normalize = [](std::vector<double>& u) {
    double s = 0.0;
    for (double e : u) s += e * e;
    s = std::sqrt(s);
    if (s > 0.0)
      for (double& e : u) e /= s;
    return s;
  };
  normalize(v);

  double estimate = 0.0;
  for (int it = 0; it < kMaxIterations; ++it) {
    std::fill(xv.begin(), xv.end(), 0.0);
    std::fill(next.begin(), next.end(), 0.0);
    kernels::gemm_nn(n, 1, d, x.data(), v.data(), xv.data());
    kernels::gemm_tn(d, 1, n, x.data(), xv.data(), next.data());
    // Rayleigh quotient v^T (x^T x) v with |v| = 1.
    double rayleigh = 0.0;
    for (std::size_t i = 0; i < d; ++i) rayleigh += v[i] * next[i];
    if (!std::isfinite(rayleigh)) throw NumericError("spectral_norm_sq: non-finite estimate");
    if (normalize(next) == 0.0) return 0.0;
    v.swap(next);
    if (it > 0 && std::abs(rayleigh - estimate) <= kTolerance * std::abs(rayleigh)) return rayleigh;
    estimate = rayleigh;
  }
  throw NumericError("spectral_norm_sq: power iteration did not converge");
}

}  // namespace issnet
