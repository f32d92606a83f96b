#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "recipecrit/kernels.hpp"

namespace recipecrit::kernels {

void set_num_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(std::max(1, n));
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

namespace omp {

namespace {

void prepare(Matrix& c, int rows, int cols, bool accumulate) {
    if (accumulate) {
        if (c.rows != rows || c.cols != cols) throw std::invalid_argument("gemm: accumulator shape");
    } else {
        c = Matrix(rows, cols);
    }
}

// Small problems are not worth a parallel region.
constexpr long kParallelWork = 1L << 15;

inline double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double alpha, const double* x, double* y, int n) {
#pragma omp simd
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace

void gemm(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.rows) throw std::invalid_argument("gemm: inner dimension mismatch");
    prepare(c, a.rows, b.cols, accumulate);
    const int n = a.rows, inner = a.cols, m = b.cols;
    const long work = static_cast<long>(n) * inner * m;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
    for (int i = 0; i < n; ++i) {
        double* crow = c.data.data() + static_cast<std::size_t>(i) * m;
        const double* arow = a.data.data() + static_cast<std::size_t>(i) * inner;
        for (int k = 0; k < inner; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            axpy(aik, b.data.data() + static_cast<std::size_t>(k) * m, crow, m);
        }
    }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dimension mismatch");
    prepare(c, a.cols, b.cols, accumulate);
    const int n = a.cols, inner = a.rows, m = b.cols;
    const long work = static_cast<long>(n) * inner * m;
    // Each thread owns a block of output rows and streams b once.
#pragma omp parallel if (work > kParallelWork)
    {
        int tid = 0, nt = 1;
#ifdef _OPENMP
        tid = omp_get_thread_num();
        nt = omp_get_num_threads();
#endif
        const int lo = static_cast<int>(static_cast<long>(n) * tid / nt);
        const int hi = static_cast<int>(static_cast<long>(n) * (tid + 1) / nt);
        for (int k = 0; k < inner; ++k) {
            const double* brow = b.data.data() + static_cast<std::size_t>(k) * m;
            const double* arow = a.data.data() + static_cast<std::size_t>(k) * n;
            for (int i = lo; i < hi; ++i) {
                const double aki = arow[i];
                if (aki == 0.0) continue;
                axpy(aki, brow, c.data.data() + static_cast<std::size_t>(i) * m, m);
            }
        }
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dimension mismatch");
    Matrix bt(b.cols, b.rows);
    for (int i = 0; i < b.rows; ++i)
        for (int j = 0; j < b.cols; ++j) bt(j, i) = b(i, j);
    gemm(a, bt, c, accumulate);
}

void layer_norm_forward(const Matrix& x, std::span<const double> gamma, std::span<const double> beta,
                        double eps, Matrix& y, std::vector<double>& mean, std::vector<double>& rstd) {
    const int n = x.cols;
    y = Matrix(x.rows, n);
    mean.assign(x.rows, 0.0);
    rstd.assign(x.rows, 0.0);
#pragma omp parallel for schedule(static) if (static_cast<long>(x.rows) * n > kParallelWork)
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.data.data() + static_cast<std::size_t>(r) * n;
        double* yr = y.data.data() + static_cast<std::size_t>(r) * n;
        double m = 0.0;
        for (int c = 0; c < n; ++c) m += xr[c];
        m /= n;
        double var = 0.0;
        for (int c = 0; c < n; ++c) var += (xr[c] - m) * (xr[c] - m);
        var /= n;
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = m;
        rstd[r] = rs;
        for (int c = 0; c < n; ++c) yr[c] = (xr[c] - m) * rs * gamma[c] + beta[c];
    }
}

void layer_norm_backward(const Matrix& x, std::span<const double> gamma, const std::vector<double>& mean,
                         const std::vector<double>& rstd, const Matrix& dy, Matrix& dx,
                         std::span<double> dgamma, std::span<double> dbeta) {
    const int n = x.cols;
    const bool par = static_cast<long>(x.rows) * n > kParallelWork;
#pragma omp parallel for schedule(static) if (par)
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.data.data() + static_cast<std::size_t>(r) * n;
        const double* dyr = dy.data.data() + static_cast<std::size_t>(r) * n;
        double* dxr = dx.data.data() + static_cast<std::size_t>(r) * n;
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (int c = 0; c < n; ++c) {
            const double xhat = (xr[c] - mean[r]) * rstd[r];
            const double g = dyr[c] * gamma[c];
            sum_g += g;
            sum_gx += g * xhat;
        }
        for (int c = 0; c < n; ++c) {
            const double xhat = (xr[c] - mean[r]) * rstd[r];
            dxr[c] += rstd[r] * (dyr[c] * gamma[c] - sum_g / n - xhat * sum_gx / n);
        }
    }
    // Parameter gradients reduce over rows; keep the row order fixed.
#pragma omp parallel for schedule(static) if (par)
    for (int c = 0; c < n; ++c) {
        double g = 0.0, b = 0.0;
        for (int r = 0; r < x.rows; ++r) {
            const double xhat = (x(r, c) - mean[r]) * rstd[r];
            g += dy(r, c) * xhat;
            b += dy(r, c);
        }
        dgamma[c] += g;
        dbeta[c] += b;
    }
}

namespace {

void attention_block_forward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionSegment& seg,
                             int h, int hd, bool causal, double scale, Matrix& out, double* p) {
    const int shift = seg.k_len - seg.q_len;
    for (int i = 0; i < seg.q_len; ++i) {
        const double* qi = q.data.data() + static_cast<std::size_t>(seg.q_begin + i) * q.cols + h * hd;
        double* oi = out.data.data() + static_cast<std::size_t>(seg.q_begin + i) * out.cols + h * hd;
        double* pi = p + static_cast<std::size_t>(i) * seg.k_len;
        const int limit = causal ? std::min(seg.k_len, i + shift + 1) : seg.k_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < limit; ++j) {
            const double* kj = k.data.data() + static_cast<std::size_t>(seg.k_begin + j) * k.cols + h * hd;
            pi[j] = dot(qi, kj, hd) * scale;
            mx = std::max(mx, pi[j]);
        }
        double z = 0.0;
        for (int j = 0; j < limit; ++j) {
            pi[j] = std::exp(pi[j] - mx);
            z += pi[j];
        }
        for (int j = 0; j < limit; ++j) pi[j] /= z;
        for (int c = 0; c < hd; ++c) oi[c] = 0.0;
        for (int j = 0; j < limit; ++j) {
            const double* vj = v.data.data() + static_cast<std::size_t>(seg.k_begin + j) * v.cols + h * hd;
            axpy(pi[j], vj, oi, hd);
        }
    }
}

void attention_block_backward(const Matrix& q, const Matrix& k, const Matrix& v, const AttentionSegment& seg,
                              int h, int hd, double scale, const double* p, const Matrix& dout, Matrix& dq,
                              Matrix& dk, Matrix& dv) {
    std::vector<double> dp(seg.k_len);
    for (int i = 0; i < seg.q_len; ++i) {
        const std::size_t qrow = static_cast<std::size_t>(seg.q_begin + i);
        const double* doi = dout.data.data() + qrow * dout.cols + h * hd;
        const double* qi = q.data.data() + qrow * q.cols + h * hd;
        double* dqi = dq.data.data() + qrow * dq.cols + h * hd;
        const double* pi = p + static_cast<std::size_t>(i) * seg.k_len;
        double total = 0.0;
        for (int j = 0; j < seg.k_len; ++j) {
            const double* vj = v.data.data() + static_cast<std::size_t>(seg.k_begin + j) * v.cols + h * hd;
            dp[j] = dot(doi, vj, hd);
            total += dp[j] * pi[j];
        }
        for (int j = 0; j < seg.k_len; ++j) {
            const double pij = pi[j];
            if (pij == 0.0) continue;
            const std::size_t krow = static_cast<std::size_t>(seg.k_begin + j);
            const double ds = pij * (dp[j] - total) * scale;
            axpy(pij, doi, dv.data.data() + krow * dv.cols + h * hd, hd);
            axpy(ds, k.data.data() + krow * k.cols + h * hd, dqi, hd);
            axpy(ds, qi, dk.data.data() + krow * dk.cols + h * hd, hd);
        }
    }
}

bool key_ranges_disjoint(std::span<const AttentionSegment> segs) {
    std::vector<std::pair<int, int>> ranges;
    ranges.reserve(segs.size());
    for (const auto& s : segs) ranges.emplace_back(s.k_begin, s.k_begin + s.k_len);
    std::sort(ranges.begin(), ranges.end());
    for (std::size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second) return false;
    return true;
}

}  // namespace

void attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                       std::span<const AttentionSegment> segs, AttentionShape shape, Matrix& out,
                       std::vector<double>& probs) {
    const int d = q.cols;
    const int hd = d / shape.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto offsets = attention_prob_offsets(segs, shape.heads);
    out = Matrix(q.rows, d);
    probs.assign(offsets.back(), 0.0);
    const int pairs = static_cast<int>(segs.size()) * shape.heads;
    const long work = static_cast<long>(offsets.back()) * hd;
#pragma omp parallel for schedule(dynamic, 4) if (work > kParallelWork)
    for (int idx = 0; idx < pairs; ++idx) {
        const int s = idx / shape.heads;
        const int h = idx % shape.heads;
        const auto& seg = segs[s];
        double* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * seg.q_len * seg.k_len;
        attention_block_forward(q, k, v, seg, h, hd, shape.causal, scale, out, p);
    }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                        std::span<const AttentionSegment> segs, AttentionShape shape,
                        const std::vector<double>& probs, const Matrix& dout, Matrix& dq, Matrix& dk,
                        Matrix& dv) {
    const int hd = q.cols / shape.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto offsets = attention_prob_offsets(segs, shape.heads);
    const long work = static_cast<long>(offsets.back()) * hd;
    const int nseg = static_cast<int>(segs.size());
    auto block = [&](int s, int h) {
        const auto& seg = segs[s];
        const double* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * seg.q_len * seg.k_len;
        attention_block_backward(q, k, v, seg, h, hd, scale, p, dout, dq, dk, dv);
    };
    if (key_ranges_disjoint(segs)) {
        const int pairs = nseg * shape.heads;
#pragma omp parallel for schedule(dynamic, 4) if (work > kParallelWork)
        for (int idx = 0; idx < pairs; ++idx) block(idx / shape.heads, idx % shape.heads);
    } else {
        // Shared keys: only heads touch disjoint columns.
#pragma omp parallel for schedule(static) if (work > kParallelWork)
        for (int h = 0; h < shape.heads; ++h)
            for (int s = 0; s < nseg; ++s) block(s, h);
    }
}

}  // namespace omp
}  // namespace recipecrit::kernels
