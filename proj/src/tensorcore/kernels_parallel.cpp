#include <omp.h>

#include <algorithm>
#include <cstdint>
#include <vector>

#include "rcbm/tensorcore/kernels.hpp"

namespace rcbm::kernels::parallel {

namespace {

// Below this many multiply-adds the fork/join costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

using Index = std::int64_t;

// Row i of C = A·B with B row-major k×n, accumulated over p in ascending
// order so each element matches the reference dot product.
inline void row_times_matrix(std::size_t k, std::size_t n, const double* a_row,
                             std::size_t a_stride, const double* b, double* c_row) {
  std::fill(c_row, c_row + n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double scale = a_row[p * a_stride];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += scale * b_row[j];
  }
}

}  // namespace

int max_threads() { return omp_get_max_threads(); }

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (Index i = 0; i < rows; ++i) {
    row_times_matrix(k, n, a + i * k, 1, b, c + i * n);
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  // Transposing B once turns the strided dot products into contiguous
  // row updates.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (Index i = 0; i < rows; ++i) {
    row_times_matrix(k, n, a + i * k, 1, bt.data(), c + i * n);
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  const Index rows = static_cast<Index>(m);
#pragma omp parallel for schedule(static) if (m * n * k >= kParallelWork)
  for (Index i = 0; i < rows; ++i) {
    row_times_matrix(k, n, a + i, m, b, c + i * n);
  }
}

void add_row(std::size_t rows, std::size_t cols, const double* x, const double* row, double* out) {
  const Index count = static_cast<Index>(rows);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (Index r = 0; r < count; ++r) {
    const double* src = x + r * cols;
    double* dst = out + r * cols;
    for (std::size_t j = 0; j < cols; ++j) dst[j] = src[j] + row[j];
  }
}

void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out) {
  // Split over columns; every column is still summed top to bottom.
  const Index count = static_cast<Index>(cols);
#pragma omp parallel for schedule(static) if (rows * cols >= kParallelWork)
  for (Index j = 0; j < count; ++j) {
    double sum = 0.0;
    for (std::size_t r = 0; r < rows; ++r) sum += x[r * cols + j];
    out[j] = sum;
  }
}

}  // namespace rcbm::kernels::parallel
