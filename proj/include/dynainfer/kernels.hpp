#pragma once

#include <cstddef>

// Dense inner loops shared by the autodiff engine, the models and the
// integrators. Every kernel exists twice: a serial reference in `ref` and an
// OpenMP version in `par`. The parallel kernels split work only over
// independent output elements, so each output is produced by one thread with
// the same summation order as the reference and results are bit-identical
// for any thread count.
//
// Matrices are row-major. A linear layer maps x[rows, in] to
// y[rows, out] = x * w[in, out] + b[out].

namespace dynainfer::kernels {

namespace ref {

void linear_forward(const double* x, std::size_t rows, std::size_t in,
                    const double* w, const double* b, std::size_t out,
                    double* y);
void linear_backward_input(const double* dy, std::size_t rows,
                           std::size_t out, const double* w, std::size_t in,
                           double* dx);
void linear_backward_params(const double* dy, const double* x,
                            std::size_t rows, std::size_t in, std::size_t out,
                            double* dw, double* db);
void swish_forward(const double* x, std::size_t n, double* y);
void swish_backward(const double* x, const double* dy, std::size_t n,
                    double* dx);
void laplacian_periodic(const double* field, std::size_t side, double ds,
                        double* out);
void laplacian_periodic_accumulate(const double* field, std::size_t side,
                                   double ds, double* out);

}  // namespace ref

namespace par {

void linear_forward(const double* x, std::size_t rows, std::size_t in,
                    const double* w, const double* b, std::size_t out,
                    double* y);
void linear_backward_input(const double* dy, std::size_t rows,
                           std::size_t out, const double* w, std::size_t in,
                           double* dx);
void linear_backward_params(const double* dy, const double* x,
                            std::size_t rows, std::size_t in, std::size_t out,
                            double* dw, double* db);
void swish_forward(const double* x, std::size_t n, double* y);
void swish_backward(const double* x, const double* dy, std::size_t n,
                    double* dx);
void laplacian_periodic(const double* field, std::size_t side, double ds,
                        double* out);
void laplacian_periodic_accumulate(const double* field, std::size_t side,
                                   double ds, double* out);

}  // namespace par

// The library calls through these.
using par::laplacian_periodic;
using par::laplacian_periodic_accumulate;
using par::linear_backward_input;
using par::linear_backward_params;
using par::linear_forward;
using par::swish_backward;
using par::swish_forward;

/// Number of threads the parallel kernels use (1 when built without OpenMP).
int thread_count();
void set_thread_count(int n);

}  // namespace dynainfer::kernels
