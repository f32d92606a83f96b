// Reference kernels. Deliberately plain: one output element at a time.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "recipecrit/kernels.hpp"

namespace recipecrit::kernels {

std::vector<std::size_t> attention_prob_offsets(std::span<const AttentionSegment> segs, int heads) {
    std::vector<std::size_t> offsets;
    offsets.reserve(segs.size() + 1);
    std::size_t total = 0;
    for (const auto& s : segs) {
        offsets.push_back(total);
        total += static_cast<std::size_t>(heads) * s.q_len * s.k_len;
    }
    offsets.push_back(total);
    return offsets;
}

namespace serial {

namespace {
void prepare(Matrix& c, int rows, int cols, bool accumulate) {
    if (accumulate) {
        if (c.rows != rows || c.cols != cols) throw std::invalid_argument("gemm: accumulator shape");
    } else {
        c = Matrix(rows, cols);
    }
}
}  // namespace

void gemm(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.rows) throw std::invalid_argument("gemm: inner dimension mismatch");
    prepare(c, a.rows, b.cols, accumulate);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
            c(i, j) += s;
        }
    }
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.rows != b.rows) throw std::invalid_argument("gemm_tn: inner dimension mismatch");
    prepare(c, a.cols, b.cols, accumulate);
    for (int i = 0; i < a.cols; ++i) {
        for (int j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.rows; ++k) s += a(k, i) * b(k, j);
            c(i, j) += s;
        }
    }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c, bool accumulate) {
    if (a.cols != b.cols) throw std::invalid_argument("gemm_nt: inner dimension mismatch");
    prepare(c, a.rows, b.rows, accumulate);
    for (int i = 0; i < a.rows; ++i) {
        for (int j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a(i, k) * b(j, k);
            c(i, j) += s;
        }
    }
}

void layer_norm_forward(const Matrix& x, std::span<const double> gamma, std::span<const double> beta,
                        double eps, Matrix& y, std::vector<double>& mean, std::vector<double>& rstd) {
    const int n = x.cols;
    y = Matrix(x.rows, n);
    mean.assign(x.rows, 0.0);
    rstd.assign(x.rows, 0.0);
    for (int r = 0; r < x.rows; ++r) {
        double m = 0.0;
        for (int c = 0; c < n; ++c) m += x(r, c);
        m /= n;
        double var = 0.0;
        for (int c = 0; c < n; ++c) var += (x(r, c) - m) * (x(r, c) - m);
        var /= n;
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[r] = m;
        rstd[r] = rs;
        for (int c = 0; c < n; ++c) y(r, c) = (x(r, c) - m) * rs * gamma[c] + beta[c];
    }
}

void layer_norm_backward(const Matrix& x, std::span<const double> gamma, const std::vector<double>& mean,
                         const std::vector<double>& rstd, const Matrix& dy, Matrix& dx,
                         std::span<double> dgamma, std::span<double> dbeta) {
    const int n = x.cols;
    for (int r = 0; r < x.rows; ++r) {
        double sum_g = 0.0;
        double sum_gx = 0.0;
        for (int c = 0; c < n; ++c) {
            const double xhat = (x(r, c) - mean[r]) * rstd[r];
            const double g = dy(r, c) * gamma[c];
            sum_g += g;
            sum_gx += g * xhat;
            dgamma[c] += dy(r, c) * xhat;
            dbeta[c] += dy(r, c);
        }
        for (int c = 0; c < n; ++c) {
            const double xhat = (x(r, c) - mean[r]) * rstd[r];
            const double g = dy(r, c) * gamma[c];
            dx(r, c) += rstd[r] * (g - sum_g / n - xhat * sum_gx / n);
        }
    }
}

void attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                       std::span<const AttentionSegment> segs, AttentionShape shape, Matrix& out,
                       std::vector<double>& probs) {
    const int d = q.cols;
    const int hd = d / shape.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto offsets = attention_prob_offsets(segs, shape.heads);
    out = Matrix(q.rows, d);
    probs.assign(offsets.back(), 0.0);
    for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto& seg = segs[s];
        const int shift = seg.k_len - seg.q_len;
        for (int h = 0; h < shape.heads; ++h) {
            double* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * seg.q_len * seg.k_len;
            for (int i = 0; i < seg.q_len; ++i) {
                const int limit = shape.causal ? std::min(seg.k_len, i + shift + 1) : seg.k_len;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < limit; ++j) {
                    double sc = 0.0;
                    for (int c = 0; c < hd; ++c)
                        sc += q(seg.q_begin + i, h * hd + c) * k(seg.k_begin + j, h * hd + c);
                    p[i * seg.k_len + j] = sc * scale;
                    mx = std::max(mx, sc * scale);
                }
                double z = 0.0;
                for (int j = 0; j < limit; ++j) {
                    p[i * seg.k_len + j] = std::exp(p[i * seg.k_len + j] - mx);
                    z += p[i * seg.k_len + j];
                }
                for (int j = 0; j < limit; ++j) p[i * seg.k_len + j] /= z;
                for (int c = 0; c < hd; ++c) {
                    double acc = 0.0;
                    for (int j = 0; j < limit; ++j) acc += p[i * seg.k_len + j] * v(seg.k_begin + j, h * hd + c);
                    out(seg.q_begin + i, h * hd + c) = acc;
                }
            }
        }
    }
}

void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                        std::span<const AttentionSegment> segs, AttentionShape shape,
                        const std::vector<double>& probs, const Matrix& dout, Matrix& dq, Matrix& dk,
                        Matrix& dv) {
    const int d = q.cols;
    const int hd = d / shape.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto offsets = attention_prob_offsets(segs, shape.heads);
    for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto& seg = segs[s];
        for (int h = 0; h < shape.heads; ++h) {
            const double* p = probs.data() + offsets[s] + static_cast<std::size_t>(h) * seg.q_len * seg.k_len;
            for (int i = 0; i < seg.q_len; ++i) {
                std::vector<double> dp(seg.k_len, 0.0);
                double dot = 0.0;
                for (int j = 0; j < seg.k_len; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < hd; ++c)
                        acc += dout(seg.q_begin + i, h * hd + c) * v(seg.k_begin + j, h * hd + c);
                    dp[j] = acc;
                    dot += acc * p[i * seg.k_len + j];
                }
                for (int j = 0; j < seg.k_len; ++j) {
                    const double pij = p[i * seg.k_len + j];
                    const double ds = pij * (dp[j] - dot) * scale;
                    for (int c = 0; c < hd; ++c) {
                        dv(seg.k_begin + j, h * hd + c) += pij * dout(seg.q_begin + i, h * hd + c);
                        dq(seg.q_begin + i, h * hd + c) += ds * k(seg.k_begin + j, h * hd + c);
                        dk(seg.k_begin + j, h * hd + c) += ds * q(seg.q_begin + i, h * hd + c);
                    }
                }
            }
        }
    }
}

}  // namespace serial
}  // namespace recipecrit::kernels
