#pragma once

// Numerical kernels used by the autodiff tape and the inference paths.
//
// Two implementations share one interface:
//   kernels::serial  straightforward loops, the reference used by tests
//   kernels::omp     cache-friendly loops parallelised with OpenMP
//
// The OpenMP kernels only partition output elements between threads and
// never split a reduction, so results do not depend on the thread count.

#include <span>
#include <vector>

#include "recipecrit/matrix.hpp"

namespace recipecrit::kernels {

// One block of attention: queries [q_begin, q_begin + q_len) attend to
// keys/values [k_begin, k_begin + k_len).
struct AttentionSegment {
    int q_begin = 0;
    int q_len = 0;
    int k_begin = 0;
    int k_len = 0;
};

struct AttentionShape {
    int heads = 1;
    // Query i may attend key j iff j <= i + (k_len - q_len).
    bool causal = false;
};

// Offsets of each (segment, head) probability block inside a flat buffer.
std::vector<std::size_t> attention_prob_offsets(std::span<const AttentionSegment> segs, int heads);

#define RECIPECRIT_KERNEL_DECLS                                                                   \
    /* c = a * b, or c += a * b when accumulate */                                                \
    void gemm(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);              \
    /* c = a^T * b */                                                                             \
    void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);           \
    /* c = a * b^T */                                                                             \
    void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate = false);           \
    void layer_norm_forward(const Matrix& x, std::span<const double> gamma,                       \
                            std::span<const double> beta, double eps, Matrix& y,                  \
                            std::vector<double>& mean, std::vector<double>& rstd);                \
    /* dx, dgamma, dbeta are accumulated into */                                                  \
    void layer_norm_backward(const Matrix& x, std::span<const double> gamma,                      \
                             const std::vector<double>& mean, const std::vector<double>& rstd,    \
                             const Matrix& dy, Matrix& dx, std::span<double> dgamma,              \
                             std::span<double> dbeta);                                            \
    void attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,                     \
                           std::span<const AttentionSegment> segs, AttentionShape shape,          \
                           Matrix& out, std::vector<double>& probs);                              \
    /* dq, dk, dv are accumulated into */                                                         \
    void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,                    \
                            std::span<const AttentionSegment> segs, AttentionShape shape,         \
                            const std::vector<double>& probs, const Matrix& dout, Matrix& dq,     \
                            Matrix& dk, Matrix& dv);

namespace serial {
RECIPECRIT_KERNEL_DECLS
}  // namespace serial

namespace omp {
RECIPECRIT_KERNEL_DECLS
}  // namespace omp

#undef RECIPECRIT_KERNEL_DECLS

// The library runs on the OpenMP kernels.
using omp::attention_backward;
using omp::attention_forward;
using omp::gemm;
using omp::gemm_nt;
using omp::gemm_tn;
using omp::layer_norm_backward;
using omp::layer_norm_forward;

// Number of OpenMP threads used by the parallel kernels (1 when built without OpenMP).
void set_num_threads(int n);
int num_threads();

}  // namespace recipecrit::kernels
