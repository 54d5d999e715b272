#include "opsa/kernels.hpp"

#include <algorithm>
#include <cmath>

#include <omp.h>

namespace opsa::kernels {

namespace {

// acc[k] = b[j0 + k] + sum_i x[i] * W[i, j0 + k], summed in ascending i.
template <std::size_t Tile>
void linear_tile(const double* x, const double* w, const double* b, double* y, std::size_t in, std::size_t out,
                 std::size_t j0) {
  double acc[Tile];
  for (std::size_t k = 0; k < Tile; ++k) acc[k] = b ? b[j0 + k] : 0.0;
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    const double* wi = w + i * out + j0;
    for (std::size_t k = 0; k < Tile; ++k) acc[k] += xi * wi[k];
  }
  for (std::size_t k = 0; k < Tile; ++k) y[j0 + k] = acc[k];
}

}  // namespace

// Output columns are accumulated in registers one tile at a time; every
// output still sums its inputs in ascending order.
void linear_row(const double* x, const double* w, const double* b, double* y, std::size_t in, std::size_t out) {
  std::size_t j0 = 0;
  for (; j0 + 16 <= out; j0 += 16) linear_tile<16>(x, w, b, y, in, out, j0);
  for (; j0 + 4 <= out; j0 += 4) linear_tile<4>(x, w, b, y, in, out, j0);
  for (; j0 < out; ++j0) linear_tile<1>(x, w, b, y, in, out, j0);
}

void linear_rows(const double* x, const double* w, const double* b, double* y, std::size_t rows, std::size_t in,
                 std::size_t out) {
  for (std::size_t r = 0; r < rows; ++r) linear_row(x + r * in, w, b, y + r * out, in, out);
}

void linear_rows_serial(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                        std::span<double> y, std::size_t rows, std::size_t in, std::size_t out) {
  linear_rows(x.data(), w.data(), b.empty() ? nullptr : b.data(), y.data(), rows, in, out);
}

void linear_rows_parallel(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                          std::span<double> y, std::size_t rows, std::size_t in, std::size_t out) {
  const double* bias = b.empty() ? nullptr : b.data();
  const long n = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < n; ++r) {
    const auto ru = static_cast<std::size_t>(r);
    linear_row(x.data() + ru * in, w.data(), bias, y.data() + ru * out, in, out);
  }
}

void linear_row_backward_input(const double* dy, const double* w, double* dx, std::size_t in, std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) {
    const double* wi = w + i * out;
    double acc = 0.0;
    for (std::size_t j = 0; j < out; ++j) acc += dy[j] * wi[j];
    dx[i] += acc;
  }
}

void linear_row_backward_weight(const double* x, const double* dy, double* dw, double* db, std::size_t in,
                                std::size_t out) {
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    double* dwi = dw + i * out;
    for (std::size_t j = 0; j < out; ++j) dwi[j] += xi * dy[j];
  }
  if (db) {
    for (std::size_t j = 0; j < out; ++j) db[j] += dy[j];
  }
}

void log_softmax_row(double* row, std::size_t cols) {
  double mx = row[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) sum += std::exp(row[j] - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t j = 0; j < cols; ++j) row[j] -= lse;
}

void log_softmax_rows_serial(std::span<double> logits, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) log_softmax_row(logits.data() + r * cols, cols);
}

void log_softmax_rows_parallel(std::span<double> logits, std::size_t rows, std::size_t cols) {
  const long n = static_cast<long>(rows);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < n; ++r) log_softmax_row(logits.data() + static_cast<std::size_t>(r) * cols, cols);
}

void ordered_sum_serial(std::span<const double* const> parts, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (const double* p : parts) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
  }
}

void ordered_sum_parallel(std::span<const double* const> parts, std::span<double> out) {
  // Each element is reduced over parts in ascending order, so the result
  // matches the serial version exactly for any thread count.
  const long n = static_cast<long>(out.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) {
    double acc = 0.0;
    for (const double* p : parts) acc += p[i];
    out[static_cast<std::size_t>(i)] = acc;
  }
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace opsa::kernels
