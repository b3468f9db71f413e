#pragma once

#include <cstddef>

// Dense row-major kernels behind the tensor ops. `serial` is the plain
// reference; `parallel` splits the outer loop across OpenMP threads. Each
// output element is accumulated in the same order in both, so the results
// are bit-identical for any thread count.
//
// All kernels overwrite their output.
namespace rcbm::kernels {

namespace serial {

/// C[m×n] = A[m×k] · B[k×n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// C[m×n] = A[m×k] · B[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// C[m×n] = A[k×m]ᵀ · B[k×n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// out[r×c] = x[r×c] + row[c] broadcast over rows
void add_row(std::size_t rows, std::size_t cols, const double* x, const double* row, double* out);
/// out[c] = Σ_r x[r×c]
void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out);

}  // namespace serial

namespace parallel {

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
void add_row(std::size_t rows, std::size_t cols, const double* x, const double* row, double* out);
void column_sums(std::size_t rows, std::size_t cols, const double* x, double* out);

/// Threads the parallel kernels will use.
int max_threads();

}  // namespace parallel

// Ops call these.
using parallel::add_row;
using parallel::column_sums;
using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;

}  // namespace rcbm::kernels
