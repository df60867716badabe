#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// Tensors are immutable values once they participate in tape operations.
// A Tape records one forward computation; backward() replays it in reverse
// construction order exactly once. Training runs at float, gradient checks
// at double: every op is templated on the scalar type.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "alst/error.hpp"

namespace alst {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(check_shape(shape_), T(0))) {}

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(data))) {
        if (static_cast<std::int64_t>(data_->size()) != check_shape(shape_))
            throw shape_error("tensor: " + std::to_string(data_->size()) +
                              " values do not fill shape " + shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }
    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }
    const std::vector<T>& values() const { return *data_; }
    std::vector<T>& values() { return *data_; }
    std::shared_ptr<std::vector<T>> storage() const { return data_; }

    T item() const {
        if (size() != 1) throw shape_error("item: tensor has shape " + shape_str(shape_));
        return (*data_)[0];
    }

    bool on_tape() const { return node_ >= 0; }
    int node() const { return node_; }
    Tape<T>* tape() const { return tape_; }
    bool requires_grad() const { return requires_grad_; }

    void attach(Tape<T>* tape, int node) {
        tape_ = tape;
        node_ = node;
        requires_grad_ = true;
    }

private:
    static std::int64_t check_shape(const Shape& shape) {
        for (int d : shape)
            if (d < 0) throw shape_error("tensor: negative dim in " + shape_str(shape));
        return numel(shape);
    }

    Shape shape_;
    std::shared_ptr<std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
    bool requires_grad_ = false;
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(const T* grad_out, Tape<T>&)>;

    // Registers a copy of `value` as a differentiable leaf.
    Tensor<T> leaf(const Tensor<T>& value) {
        Tensor<T> t(value.shape(), value.values());
        t.attach(this, add_node(t.size(), nullptr));
        return t;
    }

    int add_node(std::int64_t out_size, BackwardFn back) {
        if (consumed_)
            throw autodiff_error("tape: cannot extend a tape after backward");
        nodes_.push_back(Node{out_size, std::move(back)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Gradient accumulation buffer for a node, zero-initialized on first use.
    T* grad_buffer(int node) {
        auto& g = grads_[static_cast<std::size_t>(node)];
        if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].out_size), T(0));
        return g.data();
    }

    void backward(const Tensor<T>& loss) {
        if (consumed_) throw autodiff_error("tape: backward called twice");
        if (!loss.on_tape() || loss.tape() != this)
            throw autodiff_error("tape: loss does not live on this tape");
        if (loss.size() != 1)
            throw shape_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
        consumed_ = true;
        grad_buffer(loss.node())[0] = T(1);
        visits_ = 0;
        for (int i = loss.node(); i >= 0; --i) {
            ++visits_;
            auto& node = nodes_[static_cast<std::size_t>(i)];
            auto& g = grads_[static_cast<std::size_t>(i)];
            if (node.back && !g.empty()) node.back(g.data(), *this);
        }
    }

    Tensor<T> grad(const Tensor<T>& t) const {
        if (!t.on_tape() || t.tape() != this)
            throw autodiff_error("grad: tensor does not live on this tape");
        const auto& g = grads_[static_cast<std::size_t>(t.node())];
        if (g.empty()) return Tensor<T>(t.shape());
        return Tensor<T>(t.shape(), g);
    }

    bool consumed() const { return consumed_; }
    std::size_t node_count() const { return nodes_.size(); }
    std::size_t last_backward_visits() const { return visits_; }

private:
    struct Node {
        std::int64_t out_size;
        BackwardFn back;  // null for leaves
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::size_t visits_ = 0;
    bool consumed_ = false;
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
Tape<T>* joint_tape(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
        throw autodiff_error("op: inputs live on different tapes");
    return a.on_tape() ? a.tape() : (b.on_tape() ? b.tape() : nullptr);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " differ");
}

template <typename T>
void axpy(T* dst, const T* src, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <typename T>
int last_dim(const Tensor<T>& x, const char* op) {
    if (x.rank() < 1 || x.size() == 0)
        throw shape_error(std::string(op) + ": needs a non-empty tensor, got " + shape_str(x.shape()));
    return x.dim(x.rank() - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw shape_error("matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> out({m, n});
    detail::EMap<T>(out.data(), m, n).noalias() =
        detail::ECMap<T>(a.data(), m, k) * detail::ECMap<T>(b.data(), k, n);

    Tape<T>* tape = detail::joint_tape(a, b);
    if (!tape) return out;
    const int an = a.node(), bn = b.node();
    auto ad = a.storage(), bd = b.storage();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        detail::ECMap<T> G(g, m, n);
        if (an >= 0)
            detail::EMap<T>(tp.grad_buffer(an), m, k).noalias() +=
                G * detail::ECMap<T>(bd->data(), k, n).transpose();
        if (bn >= 0)
            detail::EMap<T>(tp.grad_buffer(bn), k, n).noalias() +=
                detail::ECMap<T>(ad->data(), m, k).transpose() * G;
    }));
    return out;
}

// a[m,k] . b[n,k]^T -> [m,n]; avoids a transpose when scoring attention.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw shape_error("matmul_nt: inner dims disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + "^T");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> out({m, n});
    detail::EMap<T>(out.data(), m, n).noalias() =
        detail::ECMap<T>(a.data(), m, k) * detail::ECMap<T>(b.data(), n, k).transpose();

    Tape<T>* tape = detail::joint_tape(a, b);
    if (!tape) return out;
    const int an = a.node(), bn = b.node();
    auto ad = a.storage(), bd = b.storage();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        detail::ECMap<T> G(g, m, n);
        if (an >= 0)
            detail::EMap<T>(tp.grad_buffer(an), m, k).noalias() +=
                G * detail::ECMap<T>(bd->data(), n, k);
        if (bn >= 0)
            detail::EMap<T>(tp.grad_buffer(bn), n, k).noalias() +=
                G.transpose() * detail::ECMap<T>(ad->data(), m, k);
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    Tape<T>* tape = detail::joint_tape(a, b);
    if (!tape) return out;
    const int an = a.node(), bn = b.node();
    out.attach(tape, tape->add_node(n, [=](const T* g, Tape<T>& tp) {
        if (an >= 0) detail::axpy(tp.grad_buffer(an), g, n);
        if (bn >= 0) detail::axpy(tp.grad_buffer(bn), g, n);
    }));
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    Tape<T>* tape = detail::joint_tape(a, b);
    if (!tape) return out;
    const int an = a.node(), bn = b.node();
    out.attach(tape, tape->add_node(n, [=](const T* g, Tape<T>& tp) {
        if (an >= 0) detail::axpy(tp.grad_buffer(an), g, n);
        if (bn >= 0) {
            T* gb = tp.grad_buffer(bn);
            for (std::int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    }));
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    Tape<T>* tape = detail::joint_tape(a, b);
    if (!tape) return out;
    const int an = a.node(), bn = b.node();
    auto ad = a.storage(), bd = b.storage();
    out.attach(tape, tape->add_node(n, [=](const T* g, Tape<T>& tp) {
        if (an >= 0) {
            T* ga = tp.grad_buffer(an);
            for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * (*bd)[i];
        }
        if (bn >= 0) {
            T* gb = tp.grad_buffer(bn);
            for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * (*ad)[i];
        }
    }));
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * c;
    if (!x.on_tape()) return out;
    const int xn = x.node();
    out.attach(x.tape(), x.tape()->add_node(n, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * c;
    }));
    return out;
}

// x[R,d] + row-broadcast bias[d].
template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
        throw shape_error("add_rows: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
    const int rows = x.dim(0), d = x.dim(1);
    Tensor<T> out(x.shape());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < d; ++c) out.data()[r * d + c] = x.data()[r * d + c] + bias.data()[c];
    Tape<T>* tape = detail::joint_tape(x, bias);
    if (!tape) return out;
    const int xn = x.node(), bn = bias.node();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        if (xn >= 0) detail::axpy(tp.grad_buffer(xn), g, static_cast<std::int64_t>(rows) * d);
        if (bn >= 0) {
            T* gb = tp.grad_buffer(bn);
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
    }));
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    const std::int64_t n = x.size();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (!x.on_tape()) return out;
    const int xn = x.node();
    out.attach(x.tape(), x.tape()->add_node(1, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[0];
    }));
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.size() == 0) throw shape_error("mean: empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    if (!x.on_tape()) return out;
    const int xn = x.node();
    auto xd = x.storage();
    out.attach(x.tape(), x.tape()->add_node(n, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i)
            if ((*xd)[i] > T(0)) gx[i] += g[i];
    }));
    return out;
}

template <typename T>
inline T sigmoid_val(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = sigmoid_val(x.data()[i]);
    if (!x.on_tape()) return out;
    const int xn = x.node();
    auto od = out.storage();
    out.attach(x.tape(), x.tape()->add_node(n, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i) {
            const T s = (*od)[i];
            gx[i] += g[i] * s * (T(1) - s);
        }
    }));
    return out;
}

// swish(x) = x * sigmoid(x)
template <typename T>
Tensor<T> swish(const Tensor<T>& x) {
    Tensor<T> out(x.shape());
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sigmoid_val(x.data()[i]);
    if (!x.on_tape()) return out;
    const int xn = x.node();
    auto xd = x.storage();
    out.attach(x.tape(), x.tape()->add_node(n, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i) {
            const T s = sigmoid_val((*xd)[i]);
            gx[i] += g[i] * (s + (*xd)[i] * s * (T(1) - s));
        }
    }));
    return out;
}

// glu(a || b) = a * sigmoid(b), split on the last dim.
template <typename T>
Tensor<T> glu(const Tensor<T>& x) {
    const int two_d = detail::last_dim(x, "glu");
    if (two_d % 2 != 0)
        throw shape_error("glu: last dim must be even, got " + shape_str(x.shape()));
    const int d = two_d / 2;
    const std::int64_t rows = x.size() / two_d;
    Shape out_shape = x.shape();
    out_shape.back() = d;
    Tensor<T> out(out_shape);
    for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < d; ++c) {
            const T a = x.data()[r * two_d + c];
            const T b = x.data()[r * two_d + d + c];
            out.data()[r * d + c] = a * sigmoid_val(b);
        }
    if (!x.on_tape()) return out;
    const int xn = x.node();
    auto xd = x.storage();
    out.attach(x.tape(), x.tape()->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < d; ++c) {
                const T a = (*xd)[r * two_d + c];
                const T s = sigmoid_val((*xd)[r * two_d + d + c]);
                const T go = g[r * d + c];
                gx[r * two_d + c] += go * s;
                gx[r * two_d + d + c] += go * a * s * (T(1) - s);
            }
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

// Row softmax over the last dim. `mask`, when given, matches x element for
// element; false entries get probability exactly 0 and never enter the
// row max or the normalizer, so masked columns cannot perturb live ones.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, const std::vector<std::uint8_t>* mask = nullptr) {
    const int d = detail::last_dim(x, "softmax");
    if (mask && static_cast<std::int64_t>(mask->size()) != x.size())
        throw shape_error("softmax: mask size " + std::to_string(mask->size()) +
                          " does not match tensor " + shape_str(x.shape()));
    const std::int64_t rows = x.size() / d;
    Tensor<T> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = x.data() + r * d;
        T* orow = out.data() + r * d;
        const std::uint8_t* mrow = mask ? mask->data() + r * d : nullptr;
        T mx = -std::numeric_limits<T>::infinity();
        bool any_unmasked = false;
        for (int c = 0; c < d; ++c) {
            if (mrow && !mrow[c]) continue;
            any_unmasked = true;
            if (!(row[c] <= mx)) mx = row[c];  // NaN-propagating max
        }
        if (!any_unmasked)
            throw numeric_error("softmax: fully masked row " + std::to_string(r));
        T denom = T(0);
        for (int c = 0; c < d; ++c) {
            if (mrow && !mrow[c]) {
                orow[c] = T(0);
            } else {
                orow[c] = std::exp(row[c] - mx);
                denom += orow[c];
            }
        }
        for (int c = 0; c < d; ++c) orow[c] /= denom;
        if (mrow)
            for (int c = 0; c < d; ++c)
                if (!mrow[c]) orow[c] = T(0);
    }
    if (!x.on_tape()) return out;
    const int xn = x.node();
    auto od = out.storage();
    out.attach(x.tape(), x.tape()->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* p = od->data() + r * d;
            const T* gr = g + r * d;
            T dot = T(0);
            for (int c = 0; c < d; ++c) dot += gr[c] * p[c];
            for (int c = 0; c < d; ++c) gx[r * d + c] += p[c] * (gr[c] - dot);
        }
    }));
    return out;
}

// Per-row normalization over the last dim, then affine gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    const int d = detail::last_dim(x, "layer_norm");
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw shape_error("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                          shape_str(bias.shape()) + " do not match last dim of " +
                          shape_str(x.shape()));
    const std::int64_t rows = x.size() / d;
    Tensor<T> out(x.shape());
    // Saved per row for backward: 1/sqrt(var+eps) and the normalized values.
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = x.data() + r * d;
        T mu = T(0);
        for (int c = 0; c < d; ++c) mu += row[c];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (int c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int c = 0; c < d; ++c) {
            const T h = (row[c] - mu) * is;
            (*xhat)[r * d + c] = h;
            out.data()[r * d + c] = gain.data()[c] * h + bias.data()[c];
        }
    }
    Tape<T>* tape = detail::joint_tape(x, gain);
    if (!tape && bias.on_tape()) tape = bias.tape();
    if (!tape) return out;
    const int xn = x.node(), gn = gain.node(), bn = bias.node();
    auto gd = gain.storage();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * d;
            const T* h = xhat->data() + r * d;
            if (gn >= 0) {
                T* gg = tp.grad_buffer(gn);
                for (int c = 0; c < d; ++c) gg[c] += gr[c] * h[c];
            }
            if (bn >= 0) {
                T* gb = tp.grad_buffer(bn);
                for (int c = 0; c < d; ++c) gb[c] += gr[c];
            }
            if (xn >= 0) {
                T* gx = tp.grad_buffer(xn) + r * d;
                T mean_dh = T(0), mean_dh_h = T(0);
                for (int c = 0; c < d; ++c) {
                    const T dh = gr[c] * (*gd)[c];
                    mean_dh += dh;
                    mean_dh_h += dh * h[c];
                }
                mean_dh /= static_cast<T>(d);
                mean_dh_h /= static_cast<T>(d);
                const T is = (*inv_std)[r];
                for (int c = 0; c < d; ++c) {
                    const T dh = gr[c] * (*gd)[c];
                    gx[c] += is * (dh - mean_dh - h[c] * mean_dh_h);
                }
            }
        }
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

// Per-channel convolution with 'same' zero padding: x[T,d] * kernel[w,d].
template <typename T>
Tensor<T> depthwise_conv1d(const Tensor<T>& x, const Tensor<T>& kernel) {
    if (x.rank() != 2 || kernel.rank() != 2 || kernel.dim(1) != x.dim(1))
        throw shape_error("depthwise_conv1d: " + shape_str(x.shape()) + " * " +
                          shape_str(kernel.shape()));
    const int w = kernel.dim(0);
    if (w % 2 == 0)
        throw config_error("depthwise_conv1d: kernel width must be odd, got " + std::to_string(w));
    const int len = x.dim(0), d = x.dim(1), pad = (w - 1) / 2;
    Tensor<T> out(x.shape());
    for (int t = 0; t < len; ++t)
        for (int c = 0; c < d; ++c) {
            T acc = T(0);
            for (int j = 0; j < w; ++j) {
                const int s = t + j - pad;
                if (s >= 0 && s < len) acc += x.data()[s * d + c] * kernel.data()[j * d + c];
            }
            out.data()[t * d + c] = acc;
        }
    Tape<T>* tape = detail::joint_tape(x, kernel);
    if (!tape) return out;
    const int xn = x.node(), kn = kernel.node();
    auto xd = x.storage(), kd = kernel.storage();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        if (xn >= 0) {
            T* gx = tp.grad_buffer(xn);
            for (int t = 0; t < len; ++t)
                for (int j = 0; j < w; ++j) {
                    const int s = t + j - pad;
                    if (s < 0 || s >= len) continue;
                    for (int c = 0; c < d; ++c)
                        gx[s * d + c] += g[t * d + c] * (*kd)[j * d + c];
                }
        }
        if (kn >= 0) {
            T* gk = tp.grad_buffer(kn);
            for (int t = 0; t < len; ++t)
                for (int j = 0; j < w; ++j) {
                    const int s = t + j - pad;
                    if (s < 0 || s >= len) continue;
                    for (int c = 0; c < d; ++c)
                        gk[j * d + c] += g[t * d + c] * (*xd)[s * d + c];
                }
        }
    }));
    return out;
}

// Strided full convolution over time with 'same' padding: x[T,ci] *
// kernel[w,ci,co] -> [ceil(T/stride), co]. Used by the subsampling stack.
template <typename T>
Tensor<T> conv1d_strided(const Tensor<T>& x, const Tensor<T>& kernel, int stride) {
    if (x.rank() != 2 || kernel.rank() != 3 || kernel.dim(1) != x.dim(1))
        throw shape_error("conv1d_strided: " + shape_str(x.shape()) + " * " +
                          shape_str(kernel.shape()));
    const int w = kernel.dim(0);
    if (w % 2 == 0)
        throw config_error("conv1d_strided: kernel width must be odd, got " + std::to_string(w));
    if (stride < 1) throw config_error("conv1d_strided: stride must be >= 1");
    const int len = x.dim(0), ci = x.dim(1), co = kernel.dim(2), pad = (w - 1) / 2;
    const int out_len = (len + stride - 1) / stride;
    Tensor<T> out({out_len, co});
    for (int t = 0; t < out_len; ++t) {
        T* orow = out.data() + static_cast<std::int64_t>(t) * co;
        for (int j = 0; j < w; ++j) {
            const int s = t * stride + j - pad;
            if (s < 0 || s >= len) continue;
            const T* xrow = x.data() + static_cast<std::int64_t>(s) * ci;
            const T* krow = kernel.data() + static_cast<std::int64_t>(j) * ci * co;
            for (int c = 0; c < ci; ++c) {
                const T xv = xrow[c];
                if (xv == T(0)) continue;
                const T* kslice = krow + static_cast<std::int64_t>(c) * co;
                for (int o = 0; o < co; ++o) orow[o] += xv * kslice[o];
            }
        }
    }
    Tape<T>* tape = detail::joint_tape(x, kernel);
    if (!tape) return out;
    const int xn = x.node(), kn = kernel.node();
    auto xd = x.storage(), kd = kernel.storage();
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        T* gx = xn >= 0 ? tp.grad_buffer(xn) : nullptr;
        T* gk = kn >= 0 ? tp.grad_buffer(kn) : nullptr;
        for (int t = 0; t < out_len; ++t) {
            const T* grow = g + static_cast<std::int64_t>(t) * co;
            for (int j = 0; j < w; ++j) {
                const int s = t * stride + j - pad;
                if (s < 0 || s >= len) continue;
                for (int c = 0; c < ci; ++c) {
                    const std::int64_t koff = (static_cast<std::int64_t>(j) * ci + c) * co;
                    if (gx) {
                        T acc = T(0);
                        for (int o = 0; o < co; ++o) acc += grow[o] * (*kd)[koff + o];
                        gx[static_cast<std::int64_t>(s) * ci + c] += acc;
                    }
                    if (gk) {
                        const T xv = (*xd)[static_cast<std::int64_t>(s) * ci + c];
                        if (xv != T(0))
                            for (int o = 0; o < co; ++o) gk[koff + o] += xv * grow[o];
                    }
                }
            }
        }
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw shape_error("embedding_lookup: table must be rank 2");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw index_error("embedding_lookup: id " + std::to_string(id) +
                              " outside table of " + std::to_string(v) + " rows");
    const int len = static_cast<int>(ids.size());
    Tensor<T> out({len, d});
    for (int i = 0; i < len; ++i)
        std::copy_n(table.data() + static_cast<std::int64_t>(ids[i]) * d, d,
                    out.data() + static_cast<std::int64_t>(i) * d);
    if (!table.on_tape()) return out;
    const int tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    out.attach(table.tape(), table.tape()->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        T* gt = tp.grad_buffer(tn);
        for (int i = 0; i < len; ++i)
            detail::axpy(gt + static_cast<std::int64_t>((*ids_copy)[i]) * d,
                         g + static_cast<std::int64_t>(i) * d, d);
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Label-smoothed cross entropy
// ---------------------------------------------------------------------------

// Mean over non-pad positions of the cross entropy between the smoothed
// one-hot target distribution (1-s on the target, s/(V-1) elsewhere) and
// softmax(logits). smoothing = 0 is plain negative log-likelihood.
template <typename T>
Tensor<T> cross_entropy_label_smoothed(const Tensor<T>& logits, const std::vector<int>& targets,
                                       T smoothing, int pad_id) {
    if (logits.rank() != 2) throw shape_error("cross_entropy: logits must be [T,V]");
    if (smoothing < T(0) || smoothing >= T(1))
        throw config_error("cross_entropy: smoothing must be in [0,1)");
    const int len = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != len)
        throw shape_error("cross_entropy: " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(len) + " logit rows");
    for (int y : targets)
        if (y < 0 || y >= v)
            throw index_error("cross_entropy: target id " + std::to_string(y) +
                              " outside vocabulary of " + std::to_string(v));
    int n_valid = 0;
    for (int y : targets)
        if (y != pad_id) ++n_valid;
    if (n_valid == 0) throw numeric_error("cross_entropy: all positions padded, loss undefined");

    const T off = v > 1 ? smoothing / static_cast<T>(v - 1) : T(0);
    const T on = T(1) - smoothing;
    auto probs = std::make_shared<std::vector<T>>(logits.size());
    T loss = T(0);
    for (int t = 0; t < len; ++t) {
        const T* row = logits.data() + static_cast<std::int64_t>(t) * v;
        T* prow = probs->data() + static_cast<std::int64_t>(t) * v;
        T mx = row[0];
        for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
        T denom = T(0);
        for (int c = 0; c < v; ++c) denom += std::exp(row[c] - mx);
        const T log_denom = std::log(denom);
        for (int c = 0; c < v; ++c) prow[c] = std::exp(row[c] - mx) / denom;
        if (targets[static_cast<std::size_t>(t)] == pad_id) continue;
        T row_loss = T(0);
        for (int c = 0; c < v; ++c) {
            const T q = c == targets[static_cast<std::size_t>(t)] ? on : off;
            if (q != T(0)) row_loss -= q * (row[c] - mx - log_denom);
        }
        loss += row_loss;
    }
    loss /= static_cast<T>(n_valid);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (!logits.on_tape()) return out;
    const int ln = logits.node();
    auto tgt = std::make_shared<std::vector<int>>(targets);
    out.attach(logits.tape(), logits.tape()->add_node(1, [=](const T* g, Tape<T>& tp) {
        T* gl = tp.grad_buffer(ln);
        const T go = g[0] / static_cast<T>(n_valid);
        for (int t = 0; t < len; ++t) {
            const int y = (*tgt)[static_cast<std::size_t>(t)];
            if (y == pad_id) continue;
            const T* prow = probs->data() + static_cast<std::int64_t>(t) * v;
            T* grow = gl + static_cast<std::int64_t>(t) * v;
            for (int c = 0; c < v; ++c) {
                const T q = c == y ? on : off;
                grow[c] += go * (prow[c] - q);
            }
        }
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Dropout and structural ops
// ---------------------------------------------------------------------------

// Inverted dropout driven by an explicit RNG stream; callers decide whether
// they are in training mode and skip the op entirely otherwise.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, std::mt19937& rng) {
    if (p < T(0) || p >= T(1)) throw config_error("dropout: p must be in [0,1)");
    if (p == T(0)) return x;
    const std::int64_t n = x.size();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(n);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep_scale = T(1) / (T(1) - p);
    Tensor<T> out(x.shape());
    for (std::int64_t i = 0; i < n; ++i) {
        const bool keep = u(rng) >= static_cast<double>(p);
        (*mask)[i] = keep;
        out.data()[i] = keep ? x.data()[i] * keep_scale : T(0);
    }
    if (!x.on_tape()) return out;
    const int xn = x.node();
    out.attach(x.tape(), x.tape()->add_node(n, [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (std::int64_t i = 0; i < n; ++i)
            if ((*mask)[i]) gx[i] += g[i] * keep_scale;
    }));
    return out;
}

// Zeroes rows at index >= row0; keeps padded frames from leaking into
// convolutions that look across time.
template <typename T>
Tensor<T> zero_rows_from(const Tensor<T>& x, int row0) {
    if (x.rank() != 2) throw shape_error("zero_rows_from: needs rank 2");
    const int rows = x.dim(0), d = x.dim(1);
    if (row0 < 0 || row0 > rows)
        throw shape_error("zero_rows_from: row " + std::to_string(row0) + " outside " +
                          shape_str(x.shape()));
    Tensor<T> out(x.shape());
    std::copy_n(x.data(), static_cast<std::int64_t>(row0) * d, out.data());
    if (!x.on_tape()) return out;
    const int xn = x.node();
    out.attach(x.tape(), x.tape()->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        detail::axpy(tp.grad_buffer(xn), g, static_cast<std::int64_t>(row0) * d);
    }));
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int col0, int width) {
    if (x.rank() != 2) throw shape_error("slice_cols: needs rank 2");
    const int rows = x.dim(0), d = x.dim(1);
    if (col0 < 0 || width < 0 || col0 + width > d)
        throw shape_error("slice_cols: [" + std::to_string(col0) + "," +
                          std::to_string(col0 + width) + ") outside " + shape_str(x.shape()));
    Tensor<T> out({rows, width});
    for (int r = 0; r < rows; ++r)
        std::copy_n(x.data() + static_cast<std::int64_t>(r) * d + col0, width,
                    out.data() + static_cast<std::int64_t>(r) * width);
    if (!x.on_tape()) return out;
    const int xn = x.node();
    out.attach(x.tape(), x.tape()->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        T* gx = tp.grad_buffer(xn);
        for (int r = 0; r < rows; ++r)
            detail::axpy(gx + static_cast<std::int64_t>(r) * d + col0,
                         g + static_cast<std::int64_t>(r) * width, width);
    }));
    return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw shape_error("concat_cols: no parts");
    const int rows = parts[0].dim(0);
    int total = 0;
    Tape<T>* tape = nullptr;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw shape_error("concat_cols: row counts differ");
        total += p.dim(1);
        if (p.on_tape()) {
            if (tape && tape != p.tape()) throw autodiff_error("concat_cols: mixed tapes");
            tape = p.tape();
        }
    }
    Tensor<T> out({rows, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy_n(p.data() + static_cast<std::int64_t>(r) * w, w,
                        out.data() + static_cast<std::int64_t>(r) * total + off);
        off += w;
    }
    if (!tape) return out;
    struct Piece {
        int node, off, width;
    };
    auto pieces = std::make_shared<std::vector<Piece>>();
    off = 0;
    for (const auto& p : parts) {
        if (p.on_tape()) pieces->push_back({p.node(), off, p.dim(1)});
        off += p.dim(1);
    }
    out.attach(tape, tape->add_node(out.size(), [=](const T* g, Tape<T>& tp) {
        for (const auto& pc : *pieces) {
            T* gp = tp.grad_buffer(pc.node);
            for (int r = 0; r < rows; ++r)
                detail::axpy(gp + static_cast<std::int64_t>(r) * pc.width,
                             g + static_cast<std::int64_t>(r) * total + pc.off, pc.width);
        }
    }));
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max relative error between the analytic gradient of f at x0 and central
// finite differences: |a - cd| / (|a| + |cd| + 1e-12). f must be a scalar-
// valued deterministic function built from tape ops.
template <typename T, typename F>
double finite_diff_check(F&& f, const Tensor<T>& x0, T step) {
    Tape<T> tape;
    Tensor<T> x = tape.leaf(x0);
    Tensor<T> y = f(x);
    if (y.size() != 1) throw shape_error("finite_diff_check: f must be scalar-valued");
    tape.backward(y);
    Tensor<T> analytic = tape.grad(x);

    double max_err = 0.0;
    Tensor<T> probe(x0.shape(), x0.values());
    for (std::int64_t i = 0; i < x0.size(); ++i) {
        const T orig = probe.data()[i];
        probe.data()[i] = orig + step;
        const double fp = static_cast<double>(f(probe).item());
        probe.data()[i] = orig - step;
        const double fm = static_cast<double>(f(probe).item());
        probe.data()[i] = orig;
        const double cd = (fp - fm) / (2.0 * static_cast<double>(step));
        const double a = static_cast<double>(analytic.data()[i]);
        const double err = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// Same check restricted to `n_coords` randomly chosen coordinates; used for
// end-to-end models where sweeping every weight is too slow.
template <typename T, typename F>
double finite_diff_check_sampled(F&& f, const Tensor<T>& x0, T step, int n_coords,
                                 std::mt19937& rng) {
    Tape<T> tape;
    Tensor<T> x = tape.leaf(x0);
    Tensor<T> y = f(x);
    if (y.size() != 1) throw shape_error("finite_diff_check: f must be scalar-valued");
    tape.backward(y);
    Tensor<T> analytic = tape.grad(x);

    std::uniform_int_distribution<std::int64_t> pick(0, x0.size() - 1);
    double max_err = 0.0;
    Tensor<T> probe(x0.shape(), x0.values());
    for (int k = 0; k < n_coords; ++k) {
        const std::int64_t i = pick(rng);
        const T orig = probe.data()[i];
        probe.data()[i] = orig + step;
        const double fp = static_cast<double>(f(probe).item());
        probe.data()[i] = orig - step;
        const double fm = static_cast<double>(f(probe).item());
        probe.data()[i] = orig;
        const double cd = (fp - fm) / (2.0 * static_cast<double>(step));
        const double a = static_cast<double>(analytic.data()[i]);
        const double err = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// ---------------------------------------------------------------------------
// Random fills
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> random_uniform(Shape shape, T lo, T hi, std::mt19937& rng) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> u(static_cast<double>(lo), static_cast<double>(hi));
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(u(rng));
    return t;
}

template <typename T>
Tensor<T> random_normal(Shape shape, T mean, T stddev, std::mt19937& rng) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> n(static_cast<double>(mean), static_cast<double>(stddev));
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<T>(n(rng));
    return t;
}

}  // namespace alst
