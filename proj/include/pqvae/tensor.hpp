#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pqvae/rng.hpp"

namespace pqvae {

/// Dense row-major float64 array participating in a dynamic reverse-mode
/// autodiff tape. A Tensor is a value-semantic handle to a graph node; ops
/// below record backward closures when any input requires gradients.
///
/// Execution is single-threaded per graph and all reductions run in a fixed
/// index order, so forward values and gradients are bitwise reproducible.
class Tensor {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;  // allocated lazily, same length as data
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void()> backward;  // adds this node's grad into parents

        std::vector<double>& ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
            return grad;
        }
    };

    Tensor() = default;

    static Tensor from(std::vector<double> data, std::vector<int> shape,
                       bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        long long want = 1;
        for (int d : n->shape) want *= d;
        if (want != static_cast<long long>(n->data.size()))
            throw std::invalid_argument("Tensor::from: shape does not match data length");
        return Tensor(std::move(n));
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false) {
        long long n = 1;
        for (int d : shape) n *= d;
        return from(std::vector<double>(static_cast<std::size_t>(n), value),
                    std::move(shape), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({value}, {1}, requires_grad);
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                          bool requires_grad = false) {
        long long n = 1;
        for (int d : shape) n *= d;
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = rng.uniform(lo, hi);
        return from(std::move(v), std::move(shape), requires_grad);
    }

    static Tensor normal(std::vector<int> shape, Rng& rng, double mean, double stddev,
                         bool requires_grad = false) {
        long long n = 1;
        for (int d : shape) n *= d;
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = rng.normal(mean, stddev);
        return from(std::move(v), std::move(shape), requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    long long numel() const { return static_cast<long long>(n_->data.size()); }
    int rows() const { return n_->shape.at(0); }
    int cols() const { return n_->shape.at(1); }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    /// Gradient buffer; zero-filled on first access.
    std::vector<double>& grad() { return n_->ensure_grad(); }
    const std::vector<double>& grad() const { return n_->ensure_grad(); }

    void zero_grad() {
        auto& g = n_->ensure_grad();
        std::fill(g.begin(), g.end(), 0.0);
    }

    double value() const {
        if (n_->data.size() != 1) throw std::invalid_argument("Tensor::value: not a scalar");
        return n_->data[0];
    }

    bool same_node(const Tensor& other) const { return n_ == other.n_; }

    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& handle() const { return n_; }

    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

private:
    std::shared_ptr<Node> n_;
};

/// Scoped switch that disables tape recording (for evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(enabled()) { enabled() = false; }
    ~NoGradGuard() { enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }

private:
    bool prev_;
};

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!NoGradGuard::enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_node(std::vector<double> data, std::vector<int> shape,
                        std::initializer_list<const Tensor*> inputs,
                        std::function<void()> backward) {
    Tensor out = Tensor::from(std::move(data), std::move(shape), false);
    if (recording(inputs)) {
        out.set_requires_grad(true);
        auto* n = out.node();
        for (const Tensor* t : inputs) n->parents.push_back(t->handle());
        n->backward = std::move(backward);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> y(a.data().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] + b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    Tensor out = detail::make_node(std::move(y), a.shape(), {&a, &b}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, bn, on] {
            auto& ga = an->ensure_grad();
            auto& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                ga[i] += on->grad[i];
                gb[i] += on->grad[i];
            }
        };
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> y(a.data().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] - b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    Tensor out = detail::make_node(std::move(y), a.shape(), {&a, &b}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, bn, on] {
            auto& ga = an->ensure_grad();
            auto& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                ga[i] += on->grad[i];
                gb[i] -= on->grad[i];
            }
        };
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> y(a.data().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    Tensor out = detail::make_node(std::move(y), a.shape(), {&a, &b}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, bn, on] {
            auto& ga = an->ensure_grad();
            auto& gb = bn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                ga[i] += bn->data[i] * on->grad[i];
                gb[i] += an->data[i] * on->grad[i];
            }
        };
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> y(a.data().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = s * a.data()[i];
    auto an = a.node();
    Tensor out = detail::make_node(std::move(y), a.shape(), {&a}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, on, s] {
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += s * on->grad[i];
        };
    }
    return out;
}

inline Tensor square(const Tensor& a) {
    std::vector<double> y(a.data().size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.data()[i] * a.data()[i];
    auto an = a.node();
    Tensor out = detail::make_node(std::move(y), a.shape(), {&a}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, on] {
            auto& ga = an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                ga[i] += 2.0 * an->data[i] * on->grad[i];
        };
    }
    return out;
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    Tensor out = detail::make_node({s}, {1}, {&a}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, on] {
            auto& ga = an->ensure_grad();
            const double g = on->grad[0];
            for (double& v : ga) v += g;
        };
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    Tensor out = detail::make_node({s * inv}, {1}, {&a}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [an, on, inv] {
            auto& ga = an->ensure_grad();
            const double g = on->grad[0] * inv;
            for (double& v : ga) v += g;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { Elu, Tanh };

/// Elementwise activation. ELU uses alpha = 1: x for x >= 0, exp(x)-1 below.
inline Tensor activation(Act kind, const Tensor& x) {
    std::vector<double> y(x.data().size());
    if (kind == Act::Elu) {
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double v = x.data()[i];
            y[i] = v >= 0.0 ? v : std::expm1(v);
        }
    } else {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(x.data()[i]);
    }
    auto xn = x.node();
    Tensor out = detail::make_node(std::move(y), x.shape(), {&x}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [xn, on, kind] {
            auto& gx = xn->ensure_grad();
            if (kind == Act::Elu) {
                for (std::size_t i = 0; i < on->grad.size(); ++i) {
                    const double d = xn->data[i] >= 0.0 ? 1.0 : on->data[i] + 1.0;
                    gx[i] += d * on->grad[i];
                }
            } else {
                for (std::size_t i = 0; i < on->grad.size(); ++i)
                    gx[i] += (1.0 - on->data[i] * on->data[i]) * on->grad[i];
            }
        };
    }
    return out;
}

inline Tensor elu(const Tensor& x) { return activation(Act::Elu, x); }
inline Tensor tanh_act(const Tensor& x) { return activation(Act::Tanh, x); }

// ---------------------------------------------------------------------------
// Gradient routing
// ---------------------------------------------------------------------------

/// Identity forward; contributes exactly zero gradient to its input.
inline Tensor stop_gradient(const Tensor& x) {
    return Tensor::from(x.data(), x.shape(), false);
}

/// Forward value is exactly z; the incoming gradient is routed to e
/// unchanged and z receives none. Quantizer bridge: z carries the looked-up
/// codewords, e keeps the differentiable path.
inline Tensor straight_through(const Tensor& e, const Tensor& z) {
    detail::require_same_shape(e, z, "straight_through");
    auto en = e.node();
    Tensor out = detail::make_node(std::vector<double>(z.data()), z.shape(), {&e}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [en, on] {
            auto& ge = en->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) ge[i] += on->grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    long long n = 1;
    for (int d : shape) n *= d;
    if (n != x.numel())
        throw std::invalid_argument("reshape: element count mismatch " +
                                    detail::shape_str(x.shape()) + " -> " +
                                    detail::shape_str(shape));
    auto xn = x.node();
    Tensor out = detail::make_node(std::vector<double>(x.data()), std::move(shape), {&x}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [xn, on] {
            auto& gx = xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
        };
    }
    return out;
}

/// Columns [c0, c1) of a 2-D tensor.
inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.shape().size() != 2) throw std::invalid_argument("slice_cols: expects 2-D input");
    const int r = x.rows(), c = x.cols();
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") for " + std::to_string(c) + " cols");
    const int w = c1 - c0;
    std::vector<double> y(static_cast<std::size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            y[static_cast<std::size_t>(i) * w + j] = x.data()[static_cast<std::size_t>(i) * c + c0 + j];
    auto xn = x.node();
    Tensor out = detail::make_node(std::move(y), {r, w}, {&x}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [xn, on, r, c, c0, w] {
            auto& gx = xn->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    gx[static_cast<std::size_t>(i) * c + c0 + j] +=
                        on->grad[static_cast<std::size_t>(i) * w + j];
        };
    }
    return out;
}

/// Concatenate 2-D tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int r = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.rows() != r)
            throw std::invalid_argument("concat_cols: row mismatch");
        total += p.cols();
    }
    std::vector<double> y(static_cast<std::size_t>(r) * total);
    int off = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j)
                y[static_cast<std::size_t>(i) * total + off + j] =
                    p.data()[static_cast<std::size_t>(i) * w + j];
        off += w;
    }
    bool rec = NoGradGuard::enabled();
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    Tensor out = Tensor::from(std::move(y), {r, total});
    if (rec && any) {
        out.set_requires_grad(true);
        auto on = out.node();
        std::vector<std::shared_ptr<Tensor::Node>> ps;
        for (const Tensor& p : parts) ps.push_back(p.handle());
        on->parents = ps;
        on->backward = [ps, on, r, total] {
            int off2 = 0;
            for (auto& pn : ps) {
                const int w = pn->shape[1];
                auto& gp = pn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < w; ++j)
                        gp[static_cast<std::size_t>(i) * w + j] +=
                            on->grad[static_cast<std::size_t>(i) * total + off2 + j];
                off2 += w;
            }
        };
    }
    return out;
}

/// y[t, :] = table[index[t], :]. Backward scatter-adds into the table rows,
/// which makes gradient-trained codebooks possible.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& index) {
    if (table.shape().size() != 2) throw std::invalid_argument("gather_rows: expects 2-D table");
    const int n = table.rows(), d = table.cols();
    const int t = static_cast<int>(index.size());
    std::vector<double> y(static_cast<std::size_t>(t) * d);
    for (int i = 0; i < t; ++i) {
        const int r = index[i];
        if (r < 0 || r >= n)
            throw std::out_of_range("gather_rows: index " + std::to_string(r) +
                                    " out of [0," + std::to_string(n) + ")");
        for (int j = 0; j < d; ++j)
            y[static_cast<std::size_t>(i) * d + j] = table.data()[static_cast<std::size_t>(r) * d + j];
    }
    auto tn = table.node();
    Tensor out = detail::make_node(std::move(y), {t, d}, {&table}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [tn, on, index, d] {
            auto& gt = tn->ensure_grad();
            for (std::size_t i = 0; i < index.size(); ++i)
                for (int j = 0; j < d; ++j)
                    gt[static_cast<std::size_t>(index[i]) * d + j] += on->grad[i * d + j];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// y = x W + b with x:[B,in], W:[in,out], b:[out].
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || b.shape().size() != 1)
        throw std::invalid_argument("affine: expects x[B,in], W[in,out], b[out]");
    const int batch = x.rows(), in = x.cols(), out_dim = w.cols();
    if (w.rows() != in || b.shape()[0] != out_dim)
        throw std::invalid_argument("affine: dimension mismatch x" + detail::shape_str(x.shape()) +
                                    " W" + detail::shape_str(w.shape()) + " b" +
                                    detail::shape_str(b.shape()));
    std::vector<double> y(static_cast<std::size_t>(batch) * out_dim);
    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = b.data().data();
    for (int r = 0; r < batch; ++r) {
        double* yr = y.data() + static_cast<std::size_t>(r) * out_dim;
        for (int j = 0; j < out_dim; ++j) yr[j] = bd[j];
        const double* xr = xd + static_cast<std::size_t>(r) * in;
        for (int k = 0; k < in; ++k) {
            const double a = xr[k];
            const double* wk = wd + static_cast<std::size_t>(k) * out_dim;
            for (int j = 0; j < out_dim; ++j) yr[j] += a * wk[j];
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    Tensor out = detail::make_node(std::move(y), {batch, out_dim}, {&x, &w, &b}, nullptr);
    if (out.requires_grad()) {
        auto on = out.node();
        on->backward = [xn, wn, bn, on, batch, in, out_dim] {
            auto& gx = xn->ensure_grad();
            auto& gw = wn->ensure_grad();
            auto& gb = bn->ensure_grad();
            const double* gy = on->grad.data();
            const double* xd2 = xn->data.data();
            const double* wd2 = wn->data.data();
            for (int r = 0; r < batch; ++r) {
                const double* gyr = gy + static_cast<std::size_t>(r) * out_dim;
                const double* xr = xd2 + static_cast<std::size_t>(r) * in;
                double* gxr = gx.data() + static_cast<std::size_t>(r) * in;
                for (int k = 0; k < in; ++k) {
                    const double* wk = wd2 + static_cast<std::size_t>(k) * out_dim;
                    double acc = 0.0;
                    for (int j = 0; j < out_dim; ++j) acc += gyr[j] * wk[j];
                    gxr[k] += acc;
                    const double a = xr[k];
                    double* gwk = gw.data() + static_cast<std::size_t>(k) * out_dim;
                    for (int j = 0; j < out_dim; ++j) gwk[j] += a * gyr[j];
                }
                for (int j = 0; j < out_dim; ++j) gb[j] += gyr[j];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a finite scalar loss. Gradients accumulate into
/// every requires_grad node reachable through the tape; callers zero
/// parameter grads between steps. Same graph, same gradients, bitwise.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!std::isfinite(loss.value()))
        throw std::runtime_error("backward: non-finite loss value");

    // Iterative post-order DFS; order is fixed by graph construction.
    std::vector<Tensor::Node*> order;
    std::unordered_set<Tensor::Node*> seen;
    struct Frame {
        Tensor::Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    if (loss.node()->requires_grad) {
        stack.push_back({loss.node(), 0});
        seen.insert(loss.node());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            Tensor::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward) (*it)->backward();
}

}  // namespace pqvae
