#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unicon/tensor.hpp"

namespace unicon {

// A named weight array. Ownership lives with the model or adapter module; the
// tape only ever copies values in and hands gradients back out.
struct Parameter {
    std::string name;
    Tensor value;
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Records operations in execution order (which is a topological order) and
// replays them in reverse for reverse-mode differentiation. One tape per
// worker; not thread-safe.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    // Leaf bound to a parameter. Repeated calls with the same parameter on one
    // tape return the same node, so gradients from every use accumulate there.
    Var param(const Parameter& p, bool trainable);

    // Used by op implementations. `backward` is dropped when no input needs a
    // gradient. Throws NumericError when the value is not finite.
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
    Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward);

    // Seeds d(loss)/d(loss) = 1 and propagates. Gradients accumulate across
    // calls until zero_grad().
    void backward(Var loss);
    void zero_grad();

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }
    const Tensor& grad(Var v) const;
    Tensor& grad_buffer(std::size_t id);

    // Gradient for every trainable parameter leaf that received one.
    std::vector<std::pair<const Parameter*, Tensor>> param_grads() const;

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
        const Parameter* param = nullptr;
    };

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Differentiable operations. All take and return tape handles; inputs must
// share one tape. Matrices are rank-2; "rows" means every axis but the last.
namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var add_row(Var a, Var row);  // a[..., j] + row[j]
Var mul_row(Var a, Var row);  // a[..., j] * row[j]
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var neg(Var a);

Var exp(Var a);
Var log(Var a);
Var gelu(Var a);  // tanh approximation
Var sigmoid(Var a);
Var softplus(Var a);

Var sum(Var a);   // -> [1]
Var mean(Var a);  // -> [1]
Var sum_cols(Var a);   // [r x c] -> [r x 1]
Var mean_rows(Var a);  // [r x c] -> [1 x c]

Var reshape(Var a, Shape shape);
Var transpose(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t start, std::size_t len);
Var slice_rows(Var a, std::size_t start, std::size_t len);
Var embedding(Var table, const std::vector<std::size_t>& ids);
// out[i] = a[index[i]] (flat indices), reshaped to `shape`.
Var gather(Var a, const std::vector<std::size_t>& index, Shape shape);

Var softmax(Var a);  // over the last axis
// log sum_j exp(a[r, j]) over entries with mask[r, j] true; -> [r x 1].
// Every row needs at least one selected entry.
Var logsumexp_masked(Var a, const std::vector<bool>& mask);
Var layer_norm(Var x, Var gamma, Var beta, double eps);
Var l2_normalize_rows(Var a);

// softmax(q k^T / sqrt(dk)) v for one head.
Var attention(Var q, Var k, Var v);

}  // namespace ops

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |fd|, 1e-8) for scalar-valued f.
using ScalarFn = std::function<Var(Tape&, Var)>;
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-5);

}  // namespace unicon
