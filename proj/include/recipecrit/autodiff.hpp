#pragma once

// Reverse-mode differentiation over row-major matrices.
//
// A Tape records every operation applied to its variables. Calling
// backward() on a 1x1 variable walks the record in reverse and accumulates
// gradients. Parameters live outside the tape; their gradients are added
// into Parameter::grad so several tapes (one per batch) can share them.

#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "recipecrit/kernels.hpp"
#include "recipecrit/matrix.hpp"

namespace recipecrit {

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    void zero_grad() { grad = Matrix(value.rows, value.cols); }
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;

    [[nodiscard]] const Matrix& value() const;
    [[nodiscard]] int rows() const { return value().rows; }
    [[nodiscard]] int cols() const { return value().cols; }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, int self)>;

    // With record = false no backward closures are kept (inference).
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix m);
    // A differentiable input whose gradient can be read back with grad().
    Var leaf(Matrix m);
    // Binds an external parameter. Gradients accumulate into p.grad when trainable.
    Var param(Parameter& p, bool trainable = true);

    void backward(Var scalar);

    [[nodiscard]] const Matrix& value(int id) const;
    [[nodiscard]] const Matrix& grad(Var v) const;
    [[nodiscard]] bool recording() const { return record_; }
    [[nodiscard]] bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    // Used by operations.
    Var push(Matrix value, std::initializer_list<Var> parents, Backward fn);
    Var push(Matrix value, std::span<const Var> parents, Backward fn);
    Matrix& grad_buffer(int id);
    [[nodiscard]] bool has_grad(int id) const;

private:
    struct Node {
        Matrix value;
        const Matrix* external = nullptr;
        Matrix grad;
        Matrix* external_grad = nullptr;
        bool requires_grad = false;
        Backward backward;
    };
    std::deque<Node> nodes_;
    bool record_;
};

// Segment of consecutive rows [begin, begin + len).
struct RowSegment {
    int begin = 0;
    int len = 0;
};

namespace ad {

Var matmul(Var a, Var b);
// x * w + b (b is 1 x out).
Var linear(Var x, Var w, Var b);
Var add(Var a, Var b);
// Adds a 1 x n row to every row of x.
Var add_row(Var x, Var row);
Var scale(Var x, double s);
Var gelu(Var x);
Var tanh(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var attention(Var q, Var k, Var v, std::vector<kernels::AttentionSegment> segs, kernels::AttentionShape shape);
Var gather_rows(Var table, std::vector<int> ids);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, int begin, int end);
Var reshape(Var x, int rows, int cols);
Var segment_mean(Var x, std::vector<RowSegment> segs);
// Column-wise max over each segment; the gradient goes to the first maximising row.
Var segment_max(Var x, std::vector<RowSegment> segs);
// Inverted dropout. Identity when p == 0.
Var dropout(Var x, double p, std::mt19937_64& rng);
// sum_ij w_ij * BCE(clamp(sigmoid(logit_ij), eps, 1 - eps), target_ij). Returns 1x1.
// The gradient is w * (sigmoid(logit) - target) everywhere, clamp included.
Var weighted_bce(Var logits, Matrix targets, Matrix weights, double eps);
// Mean over rows of -log softmax(logits)[row, target[row]]. Returns 1x1.
Var softmax_xent(Var logits, std::vector<int> targets);
Var sum(Var x);

}  // namespace ad

[[nodiscard]] double sigmoid(double x);
[[nodiscard]] double gelu_value(double x);

}  // namespace recipecrit
