#include "rcbm/tensorcore/kernels.hpp"

namespace rcbm::kernels::serial {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
      c[i * n + j] = sum;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

void add_row(std::size_t rows, std::size_t cols, const double* x, const double* row, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = x[r * cols + j] + row[j];
  }
}

void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out) {
  for (std::size_t j = 0; j < cols; ++j) {
    double sum = 0.0;
    for (std::size_t r = 0; r < rows; ++r) sum += x[r * cols + j];
    out[j] = sum;
  }
}

}  // namespace rcbm::kernels::serial
