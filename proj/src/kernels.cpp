#include "dynainfer/kernels.hpp"

#include <cmath>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace dynainfer::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Row kernels shared by both variants so that the per-element arithmetic is
// literally the same code.
inline void forward_row(const double* xi, std::size_t in, const double* w,
                        const double* b, std::size_t out, double* yi) {
  if (b) {
    for (std::size_t o = 0; o < out; ++o) yi[o] = b[o];
  } else {
    for (std::size_t o = 0; o < out; ++o) yi[o] = 0.0;
  }
  for (std::size_t k = 0; k < in; ++k) {
    const double xk = xi[k];
    const double* wk = w + k * out;
    for (std::size_t o = 0; o < out; ++o) yi[o] += xk * wk[o];
  }
}

inline void input_grad_row(const double* dyi, std::size_t out,
                           const double* wt, std::size_t in, double* dxi) {
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dyi[o];
    const double* wo = wt + o * in;
    for (std::size_t k = 0; k < in; ++k) dxi[k] += g * wo[k];
  }
}

inline void weight_grad_row(const double* dy, const double* x,
                            std::size_t rows, std::size_t in, std::size_t out,
                            std::size_t k, double* dwk) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double xik = x[i * in + k];
    const double* dyi = dy + i * out;
    for (std::size_t o = 0; o < out; ++o) dwk[o] += xik * dyi[o];
  }
}

inline void bias_grad(const double* dy, std::size_t rows, std::size_t out,
                      double* db) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* dyi = dy + i * out;
    for (std::size_t o = 0; o < out; ++o) db[o] += dyi[o];
  }
}

std::vector<double> transpose(const double* w, std::size_t in,
                              std::size_t out) {
  std::vector<double> wt(in * out);
  for (std::size_t k = 0; k < in; ++k) {
    for (std::size_t o = 0; o < out; ++o) wt[o * in + k] = w[k * out + o];
  }
  return wt;
}

inline double swish_grad(double x) {
  const double s = sigmoid(x);
  return s + x * s * (1.0 - s);
}

inline double laplacian_at(const double* f, std::size_t side, double inv_ds2,
                           std::size_t r, std::size_t c) {
  const std::size_t up = (r + side - 1) % side;
  const std::size_t down = (r + 1) % side;
  const std::size_t left = (c + side - 1) % side;
  const std::size_t right = (c + 1) % side;
  return (f[up * side + c] + f[down * side + c] + f[r * side + left] +
          f[r * side + right] - 4.0 * f[r * side + c]) *
         inv_ds2;
}

}  // namespace

namespace ref {

void linear_forward(const double* x, std::size_t rows, std::size_t in,
                    const double* w, const double* b, std::size_t out,
                    double* y) {
  for (std::size_t i = 0; i < rows; ++i) {
    forward_row(x + i * in, in, w, b, out, y + i * out);
  }
}

void linear_backward_input(const double* dy, std::size_t rows,
                           std::size_t out, const double* w, std::size_t in,
                           double* dx) {
  const std::vector<double> wt = transpose(w, in, out);
  for (std::size_t i = 0; i < rows; ++i) {
    input_grad_row(dy + i * out, out, wt.data(), in, dx + i * in);
  }
}

void linear_backward_params(const double* dy, const double* x,
                            std::size_t rows, std::size_t in, std::size_t out,
                            double* dw, double* db) {
  for (std::size_t k = 0; k < in; ++k) {
    weight_grad_row(dy, x, rows, in, out, k, dw + k * out);
  }
  if (db) bias_grad(dy, rows, out, db);
}

void swish_forward(const double* x, std::size_t n, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void swish_backward(const double* x, const double* dy, std::size_t n,
                    double* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * swish_grad(x[i]);
}

void laplacian_periodic(const double* field, std::size_t side, double ds,
                        double* out) {
  const double inv = 1.0 / (ds * ds);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] = laplacian_at(field, side, inv, r, c);
    }
  }
}

void laplacian_periodic_accumulate(const double* field, std::size_t side,
                                   double ds, double* out) {
  const double inv = 1.0 / (ds * ds);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] += laplacian_at(field, side, inv, r, c);
    }
  }
}

}  // namespace ref

namespace par {

void linear_forward(const double* x, std::size_t rows, std::size_t in,
                    const double* w, const double* b, std::size_t out,
                    double* y) {
  const bool big = rows * in * out >= kParallelWork;
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    forward_row(x + i * in, in, w, b, out, y + i * out);
  }
}

void linear_backward_input(const double* dy, std::size_t rows,
                           std::size_t out, const double* w, std::size_t in,
                           double* dx) {
  const std::vector<double> wt = transpose(w, in, out);
  const bool big = rows * in * out >= kParallelWork;
  const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    input_grad_row(dy + i * out, out, wt.data(), in, dx + i * in);
  }
}

void linear_backward_params(const double* dy, const double* x,
                            std::size_t rows, std::size_t in, std::size_t out,
                            double* dw, double* db) {
  const bool big = rows * in * out >= kParallelWork;
  const auto n = static_cast<std::ptrdiff_t>(in);
#pragma omp parallel for schedule(static) if (big)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    weight_grad_row(dy, x, rows, in, out, static_cast<std::size_t>(k),
                    dw + k * out);
  }
  if (db) bias_grad(dy, rows, out, db);
}

void swish_forward(const double* x, std::size_t n, double* y) {
  const auto m = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < m; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void swish_backward(const double* x, const double* dy, std::size_t n,
                    double* dx) {
  const auto m = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < m; ++i) dx[i] += dy[i] * swish_grad(x[i]);
}

void laplacian_periodic(const double* field, std::size_t side, double ds,
                        double* out) {
  const double inv = 1.0 / (ds * ds);
  const auto n = static_cast<std::ptrdiff_t>(side);
#pragma omp parallel for schedule(static) if (side * side >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] =
          laplacian_at(field, side, inv, static_cast<std::size_t>(r), c);
    }
  }
}

void laplacian_periodic_accumulate(const double* field, std::size_t side,
                                   double ds, double* out) {
  const double inv = 1.0 / (ds * ds);
  const auto n = static_cast<std::ptrdiff_t>(side);
#pragma omp parallel for schedule(static) if (side * side >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      out[r * side + c] +=
          laplacian_at(field, side, inv, static_cast<std::size_t>(r), c);
    }
  }
}

}  // namespace par

int thread_count() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_thread_count(int n) {
#if defined(_OPENMP)
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace dynainfer::kernels
