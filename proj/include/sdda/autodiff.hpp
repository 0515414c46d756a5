#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Tape records every primitive application in creation order, so the
// record list is topologically sorted by construction. backward() walks it in
// reverse once. Leaves come in three kinds:
//   constant   no gradient is ever propagated into it
//   input      owns a gradient buffer, read back with Tape::grad()
//   parameter  bound to an external Tensor; backward() adds into its .grad
//
// Broadcasting is limited to (rows, cols) + (cols) for add/sub.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "sdda/errors.hpp"
#include "sdda/tensor.hpp"

namespace sdda {

enum class Op {
    Constant,
    Input,
    Parameter,
    MatMul,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
    Softmax,
    LogSoftmax,
    LogSumExp,
    Mean,
    Sum,
    Concat,
    GradReverse,
    Pick,
    GaussianKernelMean,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::Constant: return "constant";
    case Op::Input: return "input";
    case Op::Parameter: return "parameter";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::LogSumExp: return "logsumexp";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::Concat: return "concat";
    case Op::GradReverse: return "grad_reverse";
    case Op::Pick: return "pick";
    case Op::GaussianKernelMean: return "gaussian_kernel_mean";
    }
    return "?";
}

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;
};

class Tape {
public:
    struct Record {
        Op op;
        std::vector<std::size_t> inputs;
        std::size_t output;
    };

    // Propagates the output gradient into input gradients.
    using Backward = std::function<void(Tape&, const std::vector<double>& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor t) { return push_leaf(Op::Constant, std::move(t), false, nullptr); }
    Var input(Tensor t) { return push_leaf(Op::Input, std::move(t), true, nullptr); }

    Var parameter(Tensor& t) {
        Tensor copy(t.shape, t.values);
        return push_leaf(Op::Parameter, std::move(copy), true, &t);
    }

    const Tensor& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    // Gradient of the last backward() loss w.r.t. v; zeros when unreachable.
    std::vector<double> grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
        return n.grad;
    }

    void backward(Var loss) {
        const Node& out = node(loss);
        if (out.value.size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape "
                                + shape_string(out.value.shape));
        }
        for (Node& n : nodes_) n.grad.clear();
        if (!out.requires_grad) return;
        nodes_[loss.id].grad.assign(1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.backward) continue;
            // Closures only touch buffers of earlier nodes, so n.grad stays put.
            n.backward(*this, n.grad);
        }
        for (Node& n : nodes_) {
            if (n.bound == nullptr || n.grad.empty()) continue;
            std::vector<double>& dst = n.bound->ensure_grad();
            for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
        }
    }

    std::span<const Record> records() const { return records_; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient buffer of an input node, allocated on first use. Returns
    // nullptr when the node does not take gradients.
    std::vector<double>* grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return &n.grad;
    }

    Var push(Op op, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
        if (!value.all_finite()) {
            throw NumericError(std::string(op_name(op)) + ": non-finite value produced");
        }
        bool needs = false;
        for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
        const std::size_t id = nodes_.size();
        nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backward) : Backward{}});
        records_.push_back(Record{op, std::move(inputs), id});
        return Var{this, id};
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool requires_grad = false;
        Tensor* bound = nullptr;
        Backward backward;
    };

    Var push_leaf(Op op, Tensor t, bool takes_grad, Tensor* bound) {
        if (!t.all_finite()) {
            throw NumericError(std::string(op_name(op)) + ": non-finite input " + shape_string(t.shape));
        }
        t.grad.reset();
        const std::size_t id = nodes_.size();
        nodes_.push_back(Node{std::move(t), {}, takes_grad, bound, {}});
        records_.push_back(Record{op, {}, id});
        return Var{this, id};
    }

    const Node& node(Var v) const {
        if (v.tape != this || v.id >= nodes_.size()) throw ContractError("tape: variable from another tape");
        return nodes_[v.id];
    }

    std::deque<Node> nodes_; // deque: value() references survive later pushes
    std::vector<Record> records_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

inline Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape) throw ContractError("ops: operands live on different tapes");
    return *a.tape;
}

inline void add_into(std::vector<double>* dst, const std::vector<double>& src, double scale = 1.0) {
    if (dst == nullptr) return;
    for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += scale * src[i];
}

// Rows and columns of a rank-1 or rank-2 tensor viewed along its last axis.
inline std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t, const char* op) {
    if (t.rank() == 1) return {1, t.shape[0]};
    if (t.rank() == 2) return {t.shape[0], t.shape[1]};
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " + shape_string(t.shape));
}

template <class F, class DF>
Var unary(Var x, Op op, F f, DF df) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    Tensor out(in.shape);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const std::size_t xi = x.id;
    // df receives (input, output) so sigmoid/tanh can reuse the output.
    return tape.push(op, out, {xi}, [xi, in_v = in.values, out_v = out.values, df](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * df(in_v[i], out_v[i]);
    });
}

enum class Broadcast { Same, RowBias };

inline Broadcast broadcast_rule(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape == b.shape) return Broadcast::Same;
    if (a.rank() == 2 && b.rank() == 1 && b.shape[0] == a.shape[1]) return Broadcast::RowBias;
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a.shape) + " and "
                         + shape_string(b.shape));
}

inline Var add_sub(Var a, Var b, double sign, Op op) {
    Tape& tape = same_tape(a, b);
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    const Broadcast rule = broadcast_rule(av, bv, op_name(op));
    Tensor out(av.shape, av.values);
    const std::size_t n = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * bv[rule == Broadcast::Same ? i : i % n];
    const std::size_t ai = a.id, bi = b.id;
    return tape.push(op, std::move(out), {ai, bi}, [ai, bi, sign, rule, n](Tape& t, const std::vector<double>& g) {
        add_into(t.grad_buffer(ai), g);
        if (std::vector<double>* db = t.grad_buffer(bi)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*db)[rule == Broadcast::Same ? i : i % n] += sign * g[i];
        }
    });
}

} // namespace detail

inline Var matmul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_string(av.shape) + " and "
                             + shape_string(bv.shape));
    }
    const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out(Shape{m, n});
    detail::MutMap(out.values.data(), m, n).noalias() =
        detail::ConstMap(av.values.data(), m, k) * detail::ConstMap(bv.values.data(), k, n);
    const std::size_t ai = a.id, bi = b.id;
    return tape.push(Op::MatMul, std::move(out), {ai, bi},
                     [ai, bi, m, k, n, a_v = av.values, b_v = bv.values](Tape& t, const std::vector<double>& g) {
                         detail::ConstMap gm(g.data(), m, n);
                         if (std::vector<double>* da = t.grad_buffer(ai)) {
                             detail::MutMap(da->data(), m, k).noalias() += gm * detail::ConstMap(b_v.data(), k, n).transpose();
                         }
                         if (std::vector<double>* db = t.grad_buffer(bi)) {
                             detail::MutMap(db->data(), k, n).noalias() += detail::ConstMap(a_v.data(), m, k).transpose() * gm;
                         }
                     });
}

inline Var add(Var a, Var b) { return detail::add_sub(a, b, 1.0, Op::Add); }
inline Var sub(Var a, Var b) { return detail::add_sub(a, b, -1.0, Op::Sub); }

inline Var mul(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.shape != bv.shape) {
        throw DimensionError("mul: incompatible shapes " + shape_string(av.shape) + " and " + shape_string(bv.shape));
    }
    Tensor out(av.shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    const std::size_t ai = a.id, bi = b.id;
    return tape.push(Op::Mul, std::move(out), {ai, bi},
                     [ai, bi, a_v = av.values, b_v = bv.values](Tape& t, const std::vector<double>& g) {
                         if (std::vector<double>* da = t.grad_buffer(ai)) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b_v[i];
                         }
                         if (std::vector<double>* db = t.grad_buffer(bi)) {
                             for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a_v[i];
                         }
                     });
}

inline Var scale(Var x, double s) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    Tensor out(in.shape);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = s * in[i];
    const std::size_t xi = x.id;
    return tape.push(Op::Scale, std::move(out), {xi}, [xi, s](Tape& t, const std::vector<double>& g) {
        detail::add_into(t.grad_buffer(xi), g, s);
    });
}

inline Var neg(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    Tensor out(in.shape);
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = -in[i];
    const std::size_t xi = x.id;
    return tape.push(Op::Neg, std::move(out), {xi}, [xi](Tape& t, const std::vector<double>& g) {
        detail::add_into(t.grad_buffer(xi), g, -1.0);
    });
}

inline Var tanh(Var x) {
    return detail::unary(x, Op::Tanh, [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
    return detail::unary(x, Op::Relu, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// log(1 + exp(v)) without overflow.
inline double stable_softplus(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

inline Var sigmoid(Var x) {
    return detail::unary(x, Op::Sigmoid, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

inline Var softplus(Var x) {
    return detail::unary(x, Op::Softplus, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

// Reduces the last axis: (rows, cols) -> (rows), (n) -> (1).
inline Var logsumexp(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    const auto [rows, cols] = detail::rows_cols(in, "logsumexp");
    Tensor out(Shape{rows});
    std::vector<double> soft(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.values.data() + r * cols;
        const double hi = *std::max_element(row, row + cols);
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += std::exp(row[c] - hi);
        out[r] = hi + std::log(acc);
        for (std::size_t c = 0; c < cols; ++c) soft[r * cols + c] = std::exp(row[c] - out[r]);
    }
    const std::size_t xi = x.id;
    return tape.push(Op::LogSumExp, std::move(out), {xi},
                     [xi, rows, cols, soft = std::move(soft)](Tape& t, const std::vector<double>& g) {
                         std::vector<double>* dx = t.grad_buffer(xi);
                         if (dx == nullptr) return;
                         for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < cols; ++c) (*dx)[r * cols + c] += g[r] * soft[r * cols + c];
                         }
                     });
}

inline Var log_softmax(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    const auto [rows, cols] = detail::rows_cols(in, "log_softmax");
    Tensor out(in.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.values.data() + r * cols;
        const double hi = *std::max_element(row, row + cols);
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += std::exp(row[c] - hi);
        const double lse = hi + std::log(acc);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = row[c] - lse;
    }
    const std::size_t xi = x.id;
    return tape.push(Op::LogSoftmax, out, {xi},
                     [xi, rows, cols, y = out.values](Tape& t, const std::vector<double>& g) {
                         std::vector<double>* dx = t.grad_buffer(xi);
                         if (dx == nullptr) return;
                         for (std::size_t r = 0; r < rows; ++r) {
                             double gsum = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c) {
                                 (*dx)[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gsum;
                             }
                         }
                     });
}

inline Var softmax(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    const auto [rows, cols] = detail::rows_cols(in, "softmax");
    Tensor out(in.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in.values.data() + r * cols;
        const double hi = *std::max_element(row, row + cols);
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(row[c] - hi);
            acc += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= acc;
    }
    const std::size_t xi = x.id;
    return tape.push(Op::Softmax, out, {xi}, [xi, rows, cols, y = out.values](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c) {
                (*dx)[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
            }
        }
    });
}

inline Var sum(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    double acc = 0.0;
    for (double v : in.values) acc += v;
    const std::size_t xi = x.id;
    return tape.push(Op::Sum, Tensor::scalar(acc), {xi}, [xi](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (double& d : *dx) d += g[0];
    });
}

inline Var mean(Var x) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    double acc = 0.0;
    for (double v : in.values) acc += v;
    const double inv = 1.0 / static_cast<double>(in.size());
    const std::size_t xi = x.id;
    return tape.push(Op::Mean, Tensor::scalar(acc * inv), {xi}, [xi, inv](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (double& d : *dx) d += g[0] * inv;
    });
}

// Concatenates along the last axis; leading extents must agree.
inline Var concat(Var a, Var b) {
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    const auto [ar, ac] = detail::rows_cols(av, "concat");
    const auto [br, bc] = detail::rows_cols(bv, "concat");
    if (av.rank() != bv.rank() || ar != br) {
        throw DimensionError("concat: incompatible shapes " + shape_string(av.shape) + " and "
                             + shape_string(bv.shape));
    }
    Shape shape = av.shape;
    shape.back() = ac + bc;
    Tensor out(shape);
    for (std::size_t r = 0; r < ar; ++r) {
        std::copy_n(av.values.begin() + r * ac, ac, out.values.begin() + r * (ac + bc));
        std::copy_n(bv.values.begin() + r * bc, bc, out.values.begin() + r * (ac + bc) + ac);
    }
    const std::size_t ai = a.id, bi = b.id;
    const std::size_t rows = ar, a_cols = ac, b_cols = bc;
    return tape.push(Op::Concat, std::move(out), {ai, bi},
                     [ai, bi, rows, a_cols, b_cols](Tape& t, const std::vector<double>& g) {
                         const std::size_t w = a_cols + b_cols;
                         if (std::vector<double>* da = t.grad_buffer(ai)) {
                             for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < a_cols; ++c) (*da)[r * a_cols + c] += g[r * w + c];
                             }
                         }
                         if (std::vector<double>* db = t.grad_buffer(bi)) {
                             for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < b_cols; ++c) (*db)[r * b_cols + c] += g[r * w + a_cols + c];
                             }
                         }
                     });
}

// Identity forward; the backward pass multiplies the incoming gradient by -lambda.
inline Var grad_reverse(Var x, double lambda) {
    if (!std::isfinite(lambda)) throw ContractError("grad_reverse: lambda must be finite");
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    const std::size_t xi = x.id;
    return tape.push(Op::GradReverse, Tensor(in.shape, in.values), {xi}, [xi, lambda](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += -lambda * g[i];
    });
}

// Selects x[r, index[r]] for every row.
inline Var pick(Var x, std::span<const int> index) {
    Tape& tape = *x.tape;
    const Tensor& in = tape.value(x);
    if (in.rank() != 2 || index.size() != in.shape[0]) {
        throw DimensionError("pick: shape " + shape_string(in.shape) + " with " + std::to_string(index.size())
                             + " indices");
    }
    const std::size_t rows = in.shape[0], cols = in.shape[1];
    Tensor out(Shape{rows});
    std::vector<int> idx(index.begin(), index.end());
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) {
            throw ContractError("pick: index " + std::to_string(idx[r]) + " out of range [0, " + std::to_string(cols) + ")");
        }
        out[r] = in.at(r, static_cast<std::size_t>(idx[r]));
    }
    const std::size_t xi = x.id;
    return tape.push(Op::Pick, std::move(out), {xi}, [xi, cols, idx = std::move(idx)](Tape& t, const std::vector<double>& g) {
        std::vector<double>* dx = t.grad_buffer(xi);
        if (dx == nullptr) return;
        for (std::size_t r = 0; r < idx.size(); ++r) (*dx)[r * cols + static_cast<std::size_t>(idx[r])] += g[r];
    });
}

// Mean of exp(-|a_i - b_j|^2 / (2 sigma^2)) over all row pairs of a and b.
inline Var gaussian_kernel_mean(Var a, Var b, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ContractError("gaussian_kernel_mean: bandwidth must be positive");
    Tape& tape = detail::same_tape(a, b);
    const Tensor& av = tape.value(a);
    const Tensor& bv = tape.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1]) {
        throw DimensionError("gaussian_kernel_mean: incompatible shapes " + shape_string(av.shape) + " and "
                             + shape_string(bv.shape));
    }
    const std::size_t m = av.shape[0], n = bv.shape[0], d = av.shape[1];
    const double inv_two_s2 = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> k(m * n);
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double dist2 = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                const double diff = av.at(i, c) - bv.at(j, c);
                dist2 += diff * diff;
            }
            k[i * n + j] = std::exp(-dist2 * inv_two_s2);
        }
    }
    // Summing in sorted order makes the value independent of operand order.
    std::vector<double> sorted = k;
    std::sort(sorted.begin(), sorted.end());
    for (double v : sorted) acc += v;
    const double inv_mn = 1.0 / static_cast<double>(m * n);
    const std::size_t ai = a.id, bi = b.id;
    return tape.push(Op::GaussianKernelMean, Tensor::scalar(acc * inv_mn), {ai, bi},
                     [ai, bi, m, n, d, inv_mn, sigma, k = std::move(k), a_v = av.values,
                      b_v = bv.values](Tape& t, const std::vector<double>& g) {
                         const double coef = g[0] * inv_mn / (sigma * sigma);
                         std::vector<double>* da = t.grad_buffer(ai);
                         std::vector<double>* db = t.grad_buffer(bi);
                         for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) {
                                 const double w = coef * k[i * n + j];
                                 for (std::size_t c = 0; c < d; ++c) {
                                     const double diff = a_v[i * d + c] - b_v[j * d + c];
                                     if (da) (*da)[i * d + c] -= w * diff;
                                     if (db) (*db)[j * d + c] += w * diff;
                                 }
                             }
                         }
                     });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(double s, Var x) { return scale(x, s); }

// Constant copy of a node's value; gradients stop here.
inline Var detach(Var x) { return x.tape->constant(Tensor(x.tape->value(x).shape, x.tape->value(x).values)); }

} // namespace sdda
