#include "unicon/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unicon/errors.hpp"

namespace unicon {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    if (!value.all_finite()) throw NumericError("non-finite leaf value");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p, bool trainable) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        if (nodes_[it->second].requires_grad != trainable) {
            throw ContractError("parameter '" + p.name + "' recorded with conflicting trainability");
        }
        return Var(this, it->second);
    }
    Var v = leaf(p.value, trainable);
    nodes_[v.id()].param = &p;
    param_nodes_.emplace(&p, v.id());
    return v;
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite result");
    bool needs = false;
    for (const auto& in : inputs) {
        if (&in.tape() != this) throw ContractError(std::string(op) + ": inputs recorded on different tapes");
        needs = needs || nodes_[in.id()].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.requires_grad = needs;
    if (needs) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape(), 0.0);
        n.has_grad = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_.at(v.id());
    if (!n.has_grad) throw ContractError("no gradient recorded for node " + std::to_string(v.id()));
    return n.grad;
}

void Tape::backward(Var loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to a different tape");
    const Node& ln = nodes_[loss.id()];
    if (ln.value.numel() != 1) {
        throw ContractError("backward needs a scalar loss, got shape " + shape_str(ln.value.shape()));
    }
    if (!ln.requires_grad) throw ContractError("loss does not depend on any differentiable leaf");

    for (auto& n : nodes_) {
        if (n.backward) {
            n.has_grad = false;
            n.grad = Tensor();
        }
    }
    grad_buffer(loss.id())[0] += 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || !n.has_grad) continue;
        // The closure may grow grad buffers of earlier nodes but never this one.
        const Tensor g = n.grad;
        n.backward(*this, g);
    }
}

void Tape::zero_grad() {
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad = Tensor();
    }
}

std::vector<std::pair<const Parameter*, Tensor>> Tape::param_grads() const {
    std::vector<std::pair<const Parameter*, Tensor>> out;
    for (const auto& n : nodes_) {
        if (n.param && n.requires_grad && n.has_grad) out.emplace_back(n.param, n.grad);
    }
    return out;
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x k] += g[m x n] * b[k x n]^T, via a transposed copy of b so the inner
// loop runs over contiguous memory.
void gemm_nt(const double* __restrict g, const double* __restrict b, double* __restrict c, std::size_t m, std::size_t n, std::size_t k) {
    std::vector<double> bt(n * k);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
    const double* __restrict btp = bt.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            const double* brow = btp + j * k;
            for (std::size_t p = 0; p < k; ++p) crow[p] += gv * brow[p];
        }
    }
}

// c[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* __restrict a, const double* __restrict g, double* __restrict c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            double* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

template <class Fwd, class Deriv>
Var unary(const char* op, Var a, Fwd fwd, Deriv deriv) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = fwd(x[i]);
    const std::size_t ia = a.id();
    return a.tape().record(op, std::move(out), {a}, [ia, deriv](Tape& t, const Tensor& g) {
        const Tensor& x = t.value(ia);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < x.numel(); ++i) ga[i] += g[i] * deriv(x[i]);
    });
}

double sigmoid_scalar(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

namespace ops {

Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " + shape_str(B.shape()));
    }
    const std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor C({m, n}, 0.0);
    gemm_nn(A.data().data(), B.data().data(), C.data().data(), m, k, n);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record("matmul", std::move(C), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
        if (t.requires_grad(ia)) {
            gemm_nt(g.data().data(), t.value(ib).data().data(), t.grad_buffer(ia).data().data(), m, n, k);
        }
        if (t.requires_grad(ib)) {
            gemm_tn(t.value(ia).data().data(), g.data().data(), t.grad_buffer(ib).data().data(), m, k, n);
        }
    });
}

namespace {

template <class Fwd, class Back>
Var binary(const char* op, Var a, Var b, Fwd fwd, Back back) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    require_same_shape(op, A, B);
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.numel(); ++i) out[i] = fwd(A[i], B[i]);
    const std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(op, std::move(out), {a, b}, [ia, ib, back](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
        Tensor* ga = ga_on ? &t.grad_buffer(ia) : nullptr;
        Tensor* gb = gb_on ? &t.grad_buffer(ib) : nullptr;
        for (std::size_t i = 0; i < A.numel(); ++i) {
            double da = 0, db = 0;
            back(A[i], B[i], g[i], da, db);
            if (ga) (*ga)[i] += da;
            if (gb) (*gb)[i] += db;
        }
    });
}

}  // namespace

Var add(Var a, Var b) {
    return binary("add", a, b, [](double x, double y) { return x + y; },
                  [](double, double, double g, double& da, double& db) { da = g; db = g; });
}

Var sub(Var a, Var b) {
    return binary("sub", a, b, [](double x, double y) { return x - y; },
                  [](double, double, double g, double& da, double& db) { da = g; db = -g; });
}

Var mul(Var a, Var b) {
    return binary("mul", a, b, [](double x, double y) { return x * y; },
                  [](double x, double y, double g, double& da, double& db) { da = g * y; db = g * x; });
}

Var div(Var a, Var b) {
    return binary("div", a, b, [](double x, double y) { return x / y; },
                  [](double x, double y, double g, double& da, double& db) {
                      da = g / y;
                      db = -g * x / (y * y);
                  });
}

Var add_row(Var a, Var row) {
    const Tensor& A = a.value();
    const Tensor& R = row.value();
    if (R.numel() != A.cols()) {
        throw ShapeError("add_row: row " + shape_str(R.shape()) + " does not match trailing axis of " +
                         shape_str(A.shape()));
    }
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += R[i % c];
    const std::size_t ia = a.id(), ir = row.id();
    return a.tape().record("add_row", std::move(out), {a, row}, [ia, ir, c](Tape& t, const Tensor& g) {
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_buffer(ir);
            for (std::size_t i = 0; i < g.numel(); ++i) gr[i % c] += g[i];
        }
    });
}

Var mul_row(Var a, Var row) {
    const Tensor& A = a.value();
    const Tensor& R = row.value();
    if (R.numel() != A.cols()) {
        throw ShapeError("mul_row: row " + shape_str(R.shape()) + " does not match trailing axis of " +
                         shape_str(A.shape()));
    }
    Tensor out = A;
    const std::size_t c = A.cols();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= R[i % c];
    const std::size_t ia = a.id(), ir = row.id();
    return a.tape().record("mul_row", std::move(out), {a, row}, [ia, ir, c](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ia);
        const Tensor& R = t.value(ir);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * R[i % c];
        }
        if (t.requires_grad(ir)) {
            Tensor& gr = t.grad_buffer(ir);
            for (std::size_t i = 0; i < g.numel(); ++i) gr[i % c] += g[i] * A[i];
        }
    });
}

Var scale(Var a, double c) {
    return unary("scale", a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Var add_scalar(Var a, double c) {
    return unary("add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var exp(Var a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    return unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var gelu(Var a) {
    return unary(
        "gelu", a,
        [](double x) {
            const double u = kGeluC * (x + kGeluA * x * x * x);
            return 0.5 * x * (1.0 + std::tanh(u));
        },
        [](double x) {
            const double u = kGeluC * (x + kGeluA * x * x * x);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var sigmoid(Var a) {
    return unary("sigmoid", a, sigmoid_scalar, [](double x) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 - s);
    });
}

Var softplus(Var a) {
    return unary(
        "softplus", a,
        [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        sigmoid_scalar);
}

Var sum(Var a) {
    const Tensor& x = a.value();
    double s = 0.0;
    for (double v : x.data()) s += v;
    const std::size_t ia = a.id();
    return a.tape().record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[0];
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var sum_cols(Var a) {
    const Tensor& x = a.value();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({r, 1}, 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
        out[i] = s;
    }
    const std::size_t ia = a.id();
    return a.tape().record("sum_cols", std::move(out), {a}, [ia, r, c](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i];
    });
}

Var mean_rows(Var a) {
    const Tensor& x = a.value();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({1, c}, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += x[i * c + j];
    const double inv = 1.0 / static_cast<double>(r);
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
    const std::size_t ia = a.id();
    return a.tape().record("mean_rows", std::move(out), {a}, [ia, r, c, inv](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j] * inv;
    });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    const std::size_t ia = a.id();
    return a.tape().record("reshape", std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    });
}

Var transpose(Var a) {
    const Tensor& x = a.value();
    require_matrix("transpose", x);
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    const std::size_t ia = a.id();
    return a.tape().record("transpose", std::move(out), {a}, [ia, r, c](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts[0].value().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        require_matrix("concat_cols", v);
        if (v.rows() != r) throw ShapeError("concat_cols: row count mismatch at " + shape_str(v.shape()));
        widths.push_back(v.cols());
        total += v.cols();
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(v.data().data() + i * widths[k], widths[k], out.data().data() + i * total + off);
        off += widths[k];
    }
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    return parts[0].tape().record("concat_cols", std::move(out), parts,
                                  [ids, widths, r, total](Tape& t, const Tensor& g) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < ids.size(); ++k) {
                                          if (t.requires_grad(ids[k])) {
                                              Tensor& gk = t.grad_buffer(ids[k]);
                                              for (std::size_t i = 0; i < r; ++i)
                                                  for (std::size_t j = 0; j < widths[k]; ++j)
                                                      gk[i * widths[k] + j] += g[i * total + off + j];
                                          }
                                          off += widths[k];
                                      }
                                  });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts[0].value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        require_matrix("concat_rows", v);
        if (v.cols() != c) throw ShapeError("concat_rows: column count mismatch at " + shape_str(v.shape()));
        rows += v.rows();
    }
    std::vector<double> data;
    data.reserve(rows * c);
    std::vector<std::size_t> ids, sizes;
    for (const auto& p : parts) {
        const auto d = p.value().data();
        data.insert(data.end(), d.begin(), d.end());
        ids.push_back(p.id());
        sizes.push_back(d.size());
    }
    return parts[0].tape().record("concat_rows", Tensor({rows, c}, std::move(data)), parts,
                                  [ids, sizes](Tape& t, const Tensor& g) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < ids.size(); ++k) {
                                          if (t.requires_grad(ids[k])) {
                                              Tensor& gk = t.grad_buffer(ids[k]);
                                              for (std::size_t i = 0; i < sizes[k]; ++i) gk[i] += g[off + i];
                                          }
                                          off += sizes[k];
                                      }
                                  });
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const Tensor& x = a.value();
    require_matrix("slice_cols", x);
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (len == 0 || start + len > c) throw ShapeError("slice_cols: range out of bounds for " + shape_str(x.shape()));
    Tensor out({r, len});
    for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data().data() + i * c + start, len, out.data().data() + i * len);
    const std::size_t ia = a.id();
    return a.tape().record("slice_cols", std::move(out), {a}, [ia, r, c, start, len](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < len; ++j) ga[i * c + start + j] += g[i * len + j];
    });
}

Var slice_rows(Var a, std::size_t start, std::size_t len) {
    const Tensor& x = a.value();
    require_matrix("slice_rows", x);
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (len == 0 || start + len > r) throw ShapeError("slice_rows: range out of bounds for " + shape_str(x.shape()));
    Tensor out({len, c});
    std::copy_n(x.data().data() + start * c, len * c, out.data().data());
    const std::size_t ia = a.id();
    return a.tape().record("slice_rows", std::move(out), {a}, [ia, c, start, len](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < len * c; ++i) ga[start * c + i] += g[i];
    });
}

Var embedding(Var table, const std::vector<std::size_t>& ids) {
    const Tensor& w = table.value();
    require_matrix("embedding", w);
    if (ids.empty()) throw ShapeError("embedding: empty id list");
    const std::size_t v = w.dim(0), d = w.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary");
        std::copy_n(w.data().data() + ids[i] * d, d, out.data().data() + i * d);
    }
    const std::size_t it = table.id();
    return table.tape().record("embedding", std::move(out), {table}, [it, ids, d](Tape& t, const Tensor& g) {
        Tensor& gt = t.grad_buffer(it);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += g[i * d + j];
    });
}

Var gather(Var a, const std::vector<std::size_t>& index, Shape shape) {
    const Tensor& x = a.value();
    if (shape_numel(shape) != index.size()) throw ShapeError("gather: index count does not match " + shape_str(shape));
    Tensor out(std::move(shape));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.numel()) throw ShapeError("gather: index out of range");
        out[i] = x[index[i]];
    }
    const std::size_t ia = a.id();
    return a.tape().record("gather", std::move(out), {a}, [ia, index](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
    });
}

Var softmax(Var a) {
    const Tensor& x = a.value();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = x.data().data() + i * c;
        double* yr = out.data().data() + i * c;
        const double m = *std::max_element(xr, xr + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        for (std::size_t j = 0; j < c; ++j) yr[j] /= s;
    }
    const std::size_t ia = a.id();
    // record() appends exactly one node, so the output id is known up front.
    const std::size_t iy = a.tape().size();
    return a.tape().record("softmax", std::move(out), {a}, [ia, iy, r, c](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(iy);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
        }
    });
}

Var logsumexp_masked(Var a, const std::vector<bool>& mask) {
    const Tensor& x = a.value();
    if (mask.size() != x.numel()) throw ShapeError("logsumexp_masked: mask size mismatch");
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out({r, 1});
    std::vector<double> probs(x.numel(), 0.0);
    for (std::size_t i = 0; i < r; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (mask[i * c + j]) m = std::max(m, x[i * c + j]);
        if (!std::isfinite(m)) throw ContractError("logsumexp_masked: row " + std::to_string(i) + " selects nothing");
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (mask[i * c + j]) {
                probs[i * c + j] = std::exp(x[i * c + j] - m);
                s += probs[i * c + j];
            }
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
        out[i] = m + std::log(s);
    }
    const std::size_t ia = a.id();
    return a.tape().record("logsumexp_masked", std::move(out), {a}, [ia, probs, r, c](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i] * probs[i * c + j];
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& X = x.value();
    const std::size_t r = X.rows(), d = X.cols();
    if (gamma.value().numel() != d || beta.value().numel() != d) {
        throw ShapeError("layer_norm: gamma/beta do not match trailing axis of " + shape_str(X.shape()));
    }
    if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
    const Tensor& G = gamma.value();
    const Tensor& B = beta.value();
    Tensor out(X.shape());
    std::vector<double> xhat(X.numel());
    std::vector<double> inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xr = X.data().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xr[j] - mu) * inv_std[i];
            out[i * d + j] = xhat[i * d + j] * G[j] + B[j];
        }
    }
    const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
    return x.tape().record(
        "layer_norm", std::move(out), {x, gamma, beta},
        [ix, ig, ib, xhat, inv_std, r, d](Tape& t, const Tensor& g) {
            const Tensor& G = t.value(ig);
            if (t.requires_grad(ig)) {
                Tensor& gg = t.grad_buffer(ig);
                for (std::size_t i = 0; i < r * d; ++i) gg[i % d] += g[i] * xhat[i];
            }
            if (t.requires_grad(ib)) {
                Tensor& gb = t.grad_buffer(ib);
                for (std::size_t i = 0; i < r * d; ++i) gb[i % d] += g[i];
            }
            if (t.requires_grad(ix)) {
                Tensor& gx = t.grad_buffer(ix);
                const double dd = static_cast<double>(d);
                for (std::size_t i = 0; i < r; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * G[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = g[i * d + j] * G[j];
                        gx[i * d + j] += inv_std[i] / dd * (dd * dxh - s1 - xhat[i * d + j] * s2);
                    }
                }
            }
        });
}

Var l2_normalize_rows(Var a) {
    const Tensor& x = a.value();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out(x.shape());
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += x[i * c + j] * x[i * c + j];
        norms[i] = std::sqrt(s);
        if (!(norms[i] > 0)) throw NumericError("l2_normalize_rows: zero-norm row");
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] / norms[i];
    }
    const std::size_t ia = a.id();
    const std::size_t iy = a.tape().size();
    return a.tape().record("l2_normalize_rows", std::move(out), {a}, [ia, iy, norms, r, c](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(iy);
        Tensor& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * g[i * c + j];
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - y[i * c + j] * dot) / norms[i];
        }
    });
}

Var attention(Var q, Var k, Var v) {
    const double dk = static_cast<double>(q.value().cols());
    Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(dk));
    return matmul(softmax(scores), v);
}

}  // namespace ops

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
    if (!(h > 0 && h <= 1e-3)) throw ContractError("grad_check: h must lie in (0, 1e-3]");
    Tensor analytic(x.shape(), 0.0);
    {
        Tape t;
        Var xv = t.leaf(x, true);
        Var out = f(t, xv);
        if (out.value().numel() != 1) throw ContractError("grad_check: function is not scalar-valued");
        if (out.requires_grad()) {
            t.backward(out);
            if (t.has_grad(xv.id())) analytic = t.grad(xv);
        }
    }
    auto eval = [&](const Tensor& at) {
        Tape t;
        return f(t, t.leaf(at, false)).value().item();
    };
    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        probe[i] = x[i] + h;
        const double fp = eval(probe);
        probe[i] = x[i] - h;
        const double fm = eval(probe);
        probe[i] = x[i];
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

}  // namespace unicon
