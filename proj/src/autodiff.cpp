#include "recipecrit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace recipecrit {

double sigmoid(double x) {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

namespace {
constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
}  // namespace

double gelu_value(double x) {
    return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluC * x * x * x)));
}

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix m) {
    Node n;
    n.value = std::move(m);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Matrix m) {
    Node n;
    n.value = std::move(m);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p, bool trainable) {
    Node n;
    n.external = &p.value;
    if (trainable && record_) {
        n.requires_grad = true;
        n.external_grad = &p.grad;
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
}

Matrix& Tape::grad_buffer(int id) {
    Node& n = nodes_[id];
    const Matrix& v = value(id);
    Matrix& g = n.external_grad ? *n.external_grad : n.grad;
    if (g.empty() && !v.empty()) g = Matrix(v.rows, v.cols);
    return g;
}

bool Tape::has_grad(int id) const {
    const Node& n = nodes_[id];
    return n.external_grad ? !n.external_grad->empty() : !n.grad.empty();
}

const Matrix& Tape::grad(Var v) const {
    static const Matrix kEmpty;
    const Node& n = nodes_[v.id];
    return n.external_grad ? *n.external_grad : (n.grad.empty() ? kEmpty : n.grad);
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward fn) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward fn) {
    Node n;
    n.value = std::move(value);
    for (const Var& p : parents) n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    if (record_ && n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var scalar) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    const Matrix& v = value(scalar.id);
    if (v.rows != 1 || v.cols != 1) throw std::invalid_argument("backward needs a 1x1 value");
    grad_buffer(scalar.id)(0, 0) += 1.0;
    for (int id = scalar.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.backward && has_grad(id)) n.backward(*this, id);
    }
}

namespace ad {

namespace {

void require(bool cond, const char* what) {
    if (!cond) throw std::invalid_argument(what);
}

void add_into(Matrix& dst, const Matrix& src) {
    for (std::size_t i = 0; i < src.data.size(); ++i) dst.data[i] += src.data[i];
}

void add_colsum(Matrix& dst_row, const Matrix& g) {
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) dst_row(0, c) += g(r, c);
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    Matrix out;
    kernels::gemm(a.value(), b.value(), out);
    return t.push(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        if (tp.requires_grad(a.id)) kernels::gemm_nt(g, tp.value(b.id), tp.grad_buffer(a.id), true);
        if (tp.requires_grad(b.id)) kernels::gemm_tn(tp.value(a.id), g, tp.grad_buffer(b.id), true);
    });
}

Var linear(Var x, Var w, Var b) {
    Tape& t = *x.tape;
    require(b.value().rows == 1 && b.value().cols == w.value().cols, "linear: bias shape");
    Matrix out;
    kernels::gemm(x.value(), w.value(), out);
    const Matrix& bv = b.value();
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += bv(0, c);
    return t.push(std::move(out), {x, w, b}, [x, w, b](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        if (tp.requires_grad(x.id)) kernels::gemm_nt(g, tp.value(w.id), tp.grad_buffer(x.id), true);
        if (tp.requires_grad(w.id)) kernels::gemm_tn(tp.value(x.id), g, tp.grad_buffer(w.id), true);
        if (tp.requires_grad(b.id)) add_colsum(tp.grad_buffer(b.id), g);
    });
}

Var add(Var a, Var b) {
    require(a.value().same_shape(b.value()), "add: shape mismatch");
    Matrix out = a.value();
    add_into(out, b.value());
    return a.tape->push(std::move(out), {a, b}, [a, b](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        if (tp.requires_grad(a.id)) add_into(tp.grad_buffer(a.id), g);
        if (tp.requires_grad(b.id)) add_into(tp.grad_buffer(b.id), g);
    });
}

Var add_row(Var x, Var row) {
    require(row.value().rows == 1 && row.value().cols == x.value().cols, "add_row: shape mismatch");
    Matrix out = x.value();
    const Matrix& rv = row.value();
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += rv(0, c);
    return x.tape->push(std::move(out), {x, row}, [x, row](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        if (tp.requires_grad(x.id)) add_into(tp.grad_buffer(x.id), g);
        if (tp.requires_grad(row.id)) add_colsum(tp.grad_buffer(row.id), g);
    });
}

Var scale(Var x, double s) {
    Matrix out = x.value();
    for (double& v : out.data) v *= s;
    return x.tape->push(std::move(out), {x}, [x, s](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dx = tp.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += s * g.data[i];
    });
}

Var gelu(Var x) {
    Matrix out = x.value();
    for (double& v : out.data) v = gelu_value(v);
    return x.tape->push(std::move(out), {x}, [x](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        const Matrix& xv = tp.value(x.id);
        Matrix& dx = tp.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double u = xv.data[i];
            const double th = std::tanh(kSqrt2OverPi * (u + kGeluC * u * u * u));
            const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * u * u);
            dx.data[i] += g.data[i] * (0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * du);
        }
    });
}

Var tanh(Var x) {
    Matrix out = x.value();
    for (double& v : out.data) v = std::tanh(v);
    const int self_id = static_cast<int>(x.tape->size());
    return x.tape->push(std::move(out), {x}, [x, self_id](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        const Matrix& y = tp.value(self_id);
        Matrix& dx = tp.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    struct Stats {
        std::vector<double> mean, rstd;
    };
    auto stats = std::make_shared<Stats>();
    Matrix out;
    kernels::layer_norm_forward(x.value(), gamma.value().data, beta.value().data, eps, out, stats->mean,
                                stats->rstd);
    return x.tape->push(std::move(out), {x, gamma, beta}, [x, gamma, beta, stats](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        const Matrix& xv = tp.value(x.id);
        // Scratch buffers stand in for inputs that do not need gradients.
        Matrix dx_scratch, dg_scratch, db_scratch;
        Matrix& dx = tp.requires_grad(x.id) ? tp.grad_buffer(x.id) : (dx_scratch = Matrix(xv.rows, xv.cols));
        Matrix& dg = tp.requires_grad(gamma.id) ? tp.grad_buffer(gamma.id)
                                                : (dg_scratch = Matrix(1, xv.cols));
        Matrix& db = tp.requires_grad(beta.id) ? tp.grad_buffer(beta.id) : (db_scratch = Matrix(1, xv.cols));
        kernels::layer_norm_backward(xv, tp.value(gamma.id).data, stats->mean, stats->rstd, g, dx, dg.data,
                                     db.data);
    });
}

Var attention(Var q, Var k, Var v, std::vector<kernels::AttentionSegment> segs, kernels::AttentionShape shape) {
    require(q.value().cols == k.value().cols && k.value().cols == v.value().cols, "attention: width mismatch");
    require(k.value().rows == v.value().rows, "attention: key/value rows");
    require(q.value().cols % shape.heads == 0, "attention: heads must divide width");
    auto seg_ptr = std::make_shared<const std::vector<kernels::AttentionSegment>>(std::move(segs));
    auto probs = std::make_shared<std::vector<double>>();
    Matrix out;
    kernels::attention_forward(q.value(), k.value(), v.value(), *seg_ptr, shape, out, *probs);
    return q.tape->push(std::move(out), {q, k, v}, [q, k, v, seg_ptr, probs, shape](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        const Matrix& qv = tp.value(q.id);
        const Matrix& kv = tp.value(k.id);
        Matrix sq, sk, sv;
        Matrix& dq = tp.requires_grad(q.id) ? tp.grad_buffer(q.id) : (sq = Matrix(qv.rows, qv.cols));
        Matrix& dk = tp.requires_grad(k.id) ? tp.grad_buffer(k.id) : (sk = Matrix(kv.rows, kv.cols));
        Matrix& dv = tp.requires_grad(v.id) ? tp.grad_buffer(v.id) : (sv = Matrix(kv.rows, kv.cols));
        kernels::attention_backward(qv, kv, tp.value(v.id), *seg_ptr, shape, *probs, g, dq, dk, dv);
    });
}

Var gather_rows(Var table, std::vector<int> ids) {
    const Matrix& tv = table.value();
    Matrix out(static_cast<int>(ids.size()), tv.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < tv.rows, "gather_rows: index out of range");
        std::copy(tv.row(ids[i]).begin(), tv.row(ids[i]).end(), out.row(static_cast<int>(i)).begin());
    }
    auto id_ptr = std::make_shared<const std::vector<int>>(std::move(ids));
    return table.tape->push(std::move(out), {table}, [table, id_ptr](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dt = tp.grad_buffer(table.id);
        for (std::size_t i = 0; i < id_ptr->size(); ++i) {
            auto src = g.row(static_cast<int>(i));
            auto dst = dt.row((*id_ptr)[i]);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int rows = parts.front().value().rows;
    int cols = 0;
    for (const Var& p : parts) {
        require(p.value().rows == rows, "concat_cols: row mismatch");
        cols += p.value().cols;
    }
    Matrix out(rows, cols);
    int off = 0;
    for (const Var& p : parts) {
        const Matrix& pv = p.value();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pv.cols; ++c) out(r, off + c) = pv(r, c);
        off += pv.cols;
    }
    std::vector<Var> copy = parts;
    return parts.front().tape->push(std::move(out), std::span<const Var>(parts), [copy](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        int o = 0;
        for (const Var& p : copy) {
            const int w = tp.value(p.id).cols;
            if (tp.requires_grad(p.id)) {
                Matrix& dp = tp.grad_buffer(p.id);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < w; ++c) dp(r, c) += g(r, o + c);
            }
            o += w;
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    const int cols = parts.front().value().cols;
    int rows = 0;
    for (const Var& p : parts) {
        require(p.value().cols == cols, "concat_rows: column mismatch");
        rows += p.value().rows;
    }
    Matrix out(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<long>(off));
        off += p.value().data.size();
    }
    std::vector<Var> copy = parts;
    return parts.front().tape->push(std::move(out), std::span<const Var>(parts), [copy](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        std::size_t o = 0;
        for (const Var& p : copy) {
            const std::size_t n = tp.value(p.id).data.size();
            if (tp.requires_grad(p.id)) {
                Matrix& dp = tp.grad_buffer(p.id);
                for (std::size_t i = 0; i < n; ++i) dp.data[i] += g.data[o + i];
            }
            o += n;
        }
    });
}

Var slice_cols(Var x, int begin, int end) {
    const Matrix& xv = x.value();
    require(0 <= begin && begin <= end && end <= xv.cols, "slice_cols: bad range");
    Matrix out(xv.rows, end - begin);
    for (int r = 0; r < xv.rows; ++r)
        for (int c = begin; c < end; ++c) out(r, c - begin) = xv(r, c);
    return x.tape->push(std::move(out), {x}, [x, begin](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dx = tp.grad_buffer(x.id);
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) dx(r, begin + c) += g(r, c);
    });
}

Var reshape(Var x, int rows, int cols) {
    require(static_cast<std::size_t>(rows) * cols == x.value().size(), "reshape: size mismatch");
    Matrix out = x.value();
    out.rows = rows;
    out.cols = cols;
    return x.tape->push(std::move(out), {x}, [x](Tape& tp, int self) {
        add_into(tp.grad_buffer(x.id), tp.grad_buffer(self));
    });
}

Var segment_mean(Var x, std::vector<RowSegment> segs) {
    const Matrix& xv = x.value();
    Matrix out(static_cast<int>(segs.size()), xv.cols);
    for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto& sg = segs[s];
        require(sg.begin >= 0 && sg.begin + sg.len <= xv.rows, "segment_mean: bad segment");
        if (sg.len == 0) continue;
        for (int r = sg.begin; r < sg.begin + sg.len; ++r)
            for (int c = 0; c < xv.cols; ++c) out(static_cast<int>(s), c) += xv(r, c);
        for (int c = 0; c < xv.cols; ++c) out(static_cast<int>(s), c) /= sg.len;
    }
    auto seg_ptr = std::make_shared<const std::vector<RowSegment>>(std::move(segs));
    return x.tape->push(std::move(out), {x}, [x, seg_ptr](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dx = tp.grad_buffer(x.id);
        for (std::size_t s = 0; s < seg_ptr->size(); ++s) {
            const auto& sg = (*seg_ptr)[s];
            for (int r = sg.begin; r < sg.begin + sg.len; ++r)
                for (int c = 0; c < g.cols; ++c) dx(r, c) += g(static_cast<int>(s), c) / sg.len;
        }
    });
}

Var segment_max(Var x, std::vector<RowSegment> segs) {
    const Matrix& xv = x.value();
    Matrix out(static_cast<int>(segs.size()), xv.cols);
    auto arg = std::make_shared<std::vector<int>>(segs.size() * xv.cols, -1);
    for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto& sg = segs[s];
        require(sg.len > 0 && sg.begin >= 0 && sg.begin + sg.len <= xv.rows, "segment_max: bad segment");
        for (int c = 0; c < xv.cols; ++c) {
            int best = sg.begin;
            for (int r = sg.begin + 1; r < sg.begin + sg.len; ++r)
                if (xv(r, c) > xv(best, c)) best = r;
            out(static_cast<int>(s), c) = xv(best, c);
            (*arg)[s * xv.cols + c] = best;
        }
    }
    return x.tape->push(std::move(out), {x}, [x, arg](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dx = tp.grad_buffer(x.id);
        for (int s = 0; s < g.rows; ++s)
            for (int c = 0; c < g.cols; ++c) dx((*arg)[static_cast<std::size_t>(s) * g.cols + c], c) += g(s, c);
    });
}

Var dropout(Var x, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return x;
    require(p < 1.0, "dropout: p must be < 1");
    const Matrix& xv = x.value();
    auto mask = std::make_shared<std::vector<double>>(xv.size());
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    Matrix out = xv;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        (*mask)[i] = keep(rng) ? s : 0.0;
        out.data[i] *= (*mask)[i];
    }
    return x.tape->push(std::move(out), {x}, [x, mask](Tape& tp, int self) {
        const Matrix& g = tp.grad_buffer(self);
        Matrix& dx = tp.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i] * (*mask)[i];
    });
}

Var weighted_bce(Var logits, Matrix targets, Matrix weights, double eps) {
    const Matrix& lv = logits.value();
    require(lv.same_shape(targets) && lv.same_shape(weights), "weighted_bce: shape mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < lv.data.size(); ++i) {
        if (weights.data[i] == 0.0) continue;
        const double p = std::clamp(sigmoid(lv.data[i]), eps, 1.0 - eps);
        const double y = targets.data[i];
        total += weights.data[i] * -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    auto tw = std::make_shared<std::pair<Matrix, Matrix>>(std::move(targets), std::move(weights));
    return logits.tape->push(Matrix(1, 1, total), {logits}, [logits, tw](Tape& tp, int self) {
        const double g = tp.grad_buffer(self)(0, 0);
        const Matrix& lv2 = tp.value(logits.id);
        Matrix& dl = tp.grad_buffer(logits.id);
        for (std::size_t i = 0; i < lv2.data.size(); ++i) {
            const double w = tw->second.data[i];
            if (w == 0.0) continue;
            // The clamp only guards the logarithm; the gradient is that of the
            // unclamped loss so saturated wrong predictions still get a signal.
            dl.data[i] += g * w * (sigmoid(lv2.data[i]) - tw->first.data[i]);
        }
    });
}

Var softmax_xent(Var logits, std::vector<int> targets) {
    const Matrix& lv = logits.value();
    require(static_cast<int>(targets.size()) == lv.rows && lv.rows > 0, "softmax_xent: target count");
    auto probs = std::make_shared<Matrix>(lv.rows, lv.cols);
    double total = 0.0;
    for (int r = 0; r < lv.rows; ++r) {
        require(targets[r] >= 0 && targets[r] < lv.cols, "softmax_xent: target out of range");
        auto row = lv.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (int c = 0; c < lv.cols; ++c) {
            (*probs)(r, c) = std::exp(row[c] - mx);
            z += (*probs)(r, c);
        }
        for (int c = 0; c < lv.cols; ++c) (*probs)(r, c) /= z;
        total += std::log(z) + mx - row[targets[r]];
    }
    const double n = lv.rows;
    auto tgt = std::make_shared<const std::vector<int>>(std::move(targets));
    return logits.tape->push(Matrix(1, 1, total / n), {logits}, [logits, probs, tgt, n](Tape& tp, int self) {
        const double g = tp.grad_buffer(self)(0, 0) / n;
        Matrix& dl = tp.grad_buffer(logits.id);
        for (int r = 0; r < probs->rows; ++r) {
            for (int c = 0; c < probs->cols; ++c) dl(r, c) += g * (*probs)(r, c);
            dl(r, (*tgt)[r]) -= g;
        }
    });
}

Var sum(Var x) {
    double total = 0.0;
    for (double v : x.value().data) total += v;
    return x.tape->push(Matrix(1, 1, total), {x}, [x](Tape& tp, int self) {
        const double g = tp.grad_buffer(self)(0, 0);
        for (double& d : tp.grad_buffer(x.id).data) d += g;
    });
}

}  // namespace ad
}  // namespace recipecrit
