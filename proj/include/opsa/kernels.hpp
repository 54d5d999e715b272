#pragma once

// Dense row kernels used by the model. Every kernel has a serial reference
// implementation and an OpenMP variant; the two produce bitwise identical
// results because rows are independent and each row is computed by the same
// scalar loop.

#include <cstddef>
#include <span>

namespace opsa::kernels {

// y[r, :] = b + x[r, :] * W for r in [0, rows), W is in x out, row-major.
void linear_rows_serial(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                        std::span<double> y, std::size_t rows, std::size_t in, std::size_t out);
void linear_rows_parallel(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                          std::span<double> y, std::size_t rows, std::size_t in, std::size_t out);

// Single-row form shared by the two variants above and by incremental decoding.
void linear_row(const double* x, const double* w, const double* b, double* y, std::size_t in, std::size_t out);
// Contiguous rows; b may be null.
void linear_rows(const double* x, const double* w, const double* b, double* y, std::size_t rows, std::size_t in,
                 std::size_t out);

// dx[i] += dot(dy, W[i, :])
void linear_row_backward_input(const double* dy, const double* w, double* dx, std::size_t in, std::size_t out);
// dW[i, :] += x[i] * dy, db += dy
void linear_row_backward_weight(const double* x, const double* dy, double* dw, double* db, std::size_t in,
                                std::size_t out);

// In-place log-softmax over each row.
void log_softmax_rows_serial(std::span<double> logits, std::size_t rows, std::size_t cols);
void log_softmax_rows_parallel(std::span<double> logits, std::size_t rows, std::size_t cols);
void log_softmax_row(double* row, std::size_t cols);

// Ordered sum of equally sized buffers: out = sum_k parts[k], k ascending.
void ordered_sum_serial(std::span<const double* const> parts, std::span<double> out);
void ordered_sum_parallel(std::span<const double* const> parts, std::span<double> out);

int max_threads();

}  // namespace opsa::kernels
