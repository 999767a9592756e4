#include "gemm.hpp"

#include <cblas.h>

#include <cstddef>
#include <mutex>

namespace nvs::detail {
namespace {

// Reduction order must not depend on the host's core count.
void pin_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc) {
  if (m == 0 || n == 0) return;
  pin_single_thread();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

// OpenBLAS 0.3.20 selects a DGEMM kernel on Cooper Lake cores that returns
// wrong products for most shapes above a few dozen rows, so the 64-bit path
// (used only for gradient checks) is a plain loop.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
          int ldb, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    double* row = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) row[j] = beta == 0.0 ? 0.0 : beta * row[j];
    for (int p = 0; p < k; ++p) {
      const double av = alpha * (trans_a ? a[static_cast<std::size_t>(p) * lda + i] : a[static_cast<std::size_t>(i) * lda + p]);
      if (trans_b) {
        for (int j = 0; j < n; ++j) row[j] += av * b[static_cast<std::size_t>(j) * ldb + p];
      } else {
        const double* brow = b + static_cast<std::size_t>(p) * ldb;
        for (int j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
  }
}

}  // namespace nvs::detail
