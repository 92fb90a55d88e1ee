#include "snbi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "snbi/errors.hpp"

namespace snbi::nn {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[" << n << "," << c << "," << h << "," << w << "]";
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool v) { g_grad_enabled = v; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value.assign(static_cast<size_t>(shape.numel()), 0.0);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape.numel())
        throw ShapeError("from_data: data size does not match shape " + shape.str());
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1, 1, 1, 1}, {value}); }

Shape Tensor::shape() const {
    if (!node_) throw ShapeError("shape() on undefined tensor");
    return node_->shape;
}

double* Tensor::data() { return node_->value.data(); }
const double* Tensor::data() const { return node_->value.data(); }
std::vector<double>& Tensor::values() { return node_->value; }
const std::vector<double>& Tensor::values() const { return node_->value; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
void Tensor::set_requires_grad(bool v) { node_->requires_grad = v; }

std::vector<double>& Tensor::grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), 0.0);
}

double Tensor::item() const {
    if (!node_ || node_->value.size() != 1)
        throw ShapeError("item() requires a scalar tensor");
    return node_->value[0];
}

void Tensor::backward() {
    if (!node_) throw ShapeError("backward() on undefined tensor");
    if (node_->value.size() != 1) throw ShapeError("backward() requires a scalar root");

    // iterative topological order over the parent DAG
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next].get();
            ++next;
            if (!visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn();
    }
}

namespace {

bool track(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->node()->requires_grad) return true;
    return false;
}

Tensor make_result(Shape shape, std::vector<double> value, bool tracked,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void()> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->value = std::move(value);
    if (tracked) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                         b.shape().str());
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const auto &av = a.values(), &bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    const bool tracked = track({&a, &b});
    auto an = a.node(), bn = b.node();
    auto result = make_result(a.shape(), std::move(out), tracked, {an, bn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), an, bn]() {
            const auto& g = rn_w->grad;
            if (an->requires_grad) {
                auto& ag = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& bg = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) bg[i] += g[i];
            }
        };
    }
    return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const auto &av = a.values(), &bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    const bool tracked = track({&a, &b});
    auto an = a.node(), bn = b.node();
    auto result = make_result(a.shape(), std::move(out), tracked, {an, bn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), an, bn]() {
            const auto& g = rn_w->grad;
            if (an->requires_grad) {
                auto& ag = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& bg = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
            }
        };
    }
    return result;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const auto &av = a.values(), &bv = b.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    const bool tracked = track({&a, &b});
    auto an = a.node(), bn = b.node();
    auto result = make_result(a.shape(), std::move(out), tracked, {an, bn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), an, bn]() {
            const auto& g = rn_w->grad;
            if (an->requires_grad) {
                auto& ag = an->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto& bg = bn->ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * an->value[i];
            }
        };
    }
    return result;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    const bool tracked = track({&a});
    auto an = a.node();
    auto result = make_result(a.shape(), std::move(out), tracked, {an}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), an, bwd_factor]() {
            if (!an->requires_grad) return;
            auto& ag = an->ensure_grad();
            const auto& g = rn_w->grad;
            for (size_t i = 0; i < g.size(); ++i)
                ag[i] += g[i] * bwd_factor(an->value[i], rn_w->value[i]);
        };
    }
    return result;
}

} // namespace

Tensor scale(const Tensor& a, double s) {
    return unary_op(
        a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_op(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor tanh_op(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

Tensor abs_op(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::abs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum_all(const Tensor& a) {
    const auto& av = a.values();
    double s = 0.0;
    for (double v : av) s += v;
    const bool tracked = track({&a});
    auto an = a.node();
    auto result = make_result({1, 1, 1, 1}, {s}, tracked, {an}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), an]() {
            if (!an->requires_grad) return;
            auto& ag = an->ensure_grad();
            const double g = rn_w->grad[0];
            for (double& v : ag) v += g;
        };
    }
    return result;
}

Tensor mean_all(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    return scale(sum_all(a), inv);
}

Tensor pad2d(const Tensor& x, int pad, PadMode mode) {
    if (pad < 0) throw ShapeError("pad2d: negative pad");
    if (pad == 0) return x;
    const Shape s = x.shape();
    if (mode == PadMode::Reflect && (s.h <= pad || s.w <= pad))
        throw ShapeError("pad2d: reflect pad larger than image");
    const Shape os{s.n, s.c, s.h + 2 * pad, s.w + 2 * pad};
    std::vector<double> out(static_cast<size_t>(os.numel()), 0.0);
    const auto& xv = x.values();

    auto reflect = [](int i, int n) {
        if (i < 0) return -i;
        if (i >= n) return 2 * n - 2 - i;
        return i;
    };

    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const size_t xbase = (static_cast<size_t>(n) * s.c + c) * s.h * s.w;
            const size_t obase = (static_cast<size_t>(n) * s.c + c) * os.h * os.w;
            for (int oy = 0; oy < os.h; ++oy)
                for (int ox = 0; ox < os.w; ++ox) {
                    const int iy = oy - pad, ix = ox - pad;
                    double v = 0.0;
                    if (mode == PadMode::Reflect) {
                        v = xv[xbase + static_cast<size_t>(reflect(iy, s.h)) * s.w +
                               reflect(ix, s.w)];
                    } else if (iy >= 0 && iy < s.h && ix >= 0 && ix < s.w) {
                        v = xv[xbase + static_cast<size_t>(iy) * s.w + ix];
                    }
                    out[obase + static_cast<size_t>(oy) * os.w + ox] = v;
                }
        }

    const bool tracked = track({&x});
    auto xn = x.node();
    auto result = make_result(os, std::move(out), tracked, {xn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), xn, pad, mode, s, os, reflect]() {
            if (!xn->requires_grad) return;
            auto& xg = xn->ensure_grad();
            const auto& g = rn_w->grad;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const size_t xbase = (static_cast<size_t>(n) * s.c + c) * s.h * s.w;
                    const size_t obase = (static_cast<size_t>(n) * s.c + c) * os.h * os.w;
                    for (int oy = 0; oy < os.h; ++oy)
                        for (int ox = 0; ox < os.w; ++ox) {
                            const int iy = oy - pad, ix = ox - pad;
                            const double gv = g[obase + static_cast<size_t>(oy) * os.w + ox];
                            if (mode == PadMode::Reflect) {
                                xg[xbase + static_cast<size_t>(reflect(iy, s.h)) * s.w +
                                   reflect(ix, s.w)] += gv;
                            } else if (iy >= 0 && iy < s.h && ix >= 0 && ix < s.w) {
                                xg[xbase + static_cast<size_t>(iy) * s.w + ix] += gv;
                            }
                        }
                }
        };
    }
    return result;
}

namespace {

// col layout: [Cin*kh*kw, Hout*Wout]
void im2col(const double* x, int cin, int h, int w, int kh, int kw, int stride, int hout,
            int wout, double* col) {
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* dst = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) *
                                        (static_cast<size_t>(hout) * wout);
                for (int oy = 0; oy < hout; ++oy) {
                    const double* src =
                        x + (static_cast<size_t>(c) * h + (oy * stride + ky)) * w + kx;
                    for (int ox = 0; ox < wout; ++ox) dst[oy * wout + ox] = src[ox * stride];
                }
            }
}

void col2im_accum(const double* col, int cin, int h, int w, int kh, int kw, int stride,
                  int hout, int wout, double* x) {
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* src = col + ((static_cast<size_t>(c) * kh + ky) * kw + kx) *
                                              (static_cast<size_t>(hout) * wout);
                for (int oy = 0; oy < hout; ++oy) {
                    double* dst = x + (static_cast<size_t>(c) * h + (oy * stride + ky)) * w + kx;
                    for (int ox = 0; ox < wout; ++ox) dst[ox * stride] += src[oy * wout + ox];
                }
            }
}

// C[i,j] += sum_k A[i,k] * B[k,j]
void gemm_accum(const double* a, const double* b, double* c, int rows, int inner, int cols) {
    for (int i = 0; i < rows; ++i) {
        const double* arow = a + static_cast<size_t>(i) * inner;
        double* crow = c + static_cast<size_t>(i) * cols;
        for (int k = 0; k < inner; ++k) {
            const double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(k) * cols;
            for (int j = 0; j < cols; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[i,j] += sum_k A[k,i] * B[k,j]  (A transposed)
void gemm_at_b_accum(const double* a, const double* b, double* c, int rows, int inner,
                     int cols) {
    for (int k = 0; k < inner; ++k) {
        const double* arow = a + static_cast<size_t>(k) * rows;
        const double* brow = b + static_cast<size_t>(k) * cols;
        for (int i = 0; i < rows; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[i,j] += sum_k A[i,k] * B[j,k]  (B transposed)
void gemm_a_bt_accum(const double* a, const double* b, double* c, int rows, int inner,
                     int cols) {
    for (int i = 0; i < rows; ++i) {
        const double* arow = a + static_cast<size_t>(i) * inner;
        double* crow = c + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            const double* brow = b + static_cast<size_t>(j) * inner;
            double s = 0.0;
            for (int k = 0; k < inner; ++k) s += arow[k] * brow[k];
            crow[j] += s;
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    const Shape xs = x.shape(), ws = w.shape();
    if (xs.c != ws.c)
        throw ShapeError("conv2d: input channels " + std::to_string(xs.c) +
                         " != kernel channels " + std::to_string(ws.c));
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (xs.h < ws.h || xs.w < ws.w) throw ShapeError("conv2d: kernel larger than input");
    const int hout = (xs.h - ws.h) / stride + 1;
    const int wout = (xs.w - ws.w) / stride + 1;
    const int cout = ws.n;
    const int kdim = ws.c * ws.h * ws.w;
    const int spatial = hout * wout;

    if (b.defined()) {
        const Shape bs = b.shape();
        if (!(bs == Shape{1, cout, 1, 1}))
            throw ShapeError("conv2d: bias shape must be [1,Cout,1,1]");
    }

    const Shape os{xs.n, cout, hout, wout};
    std::vector<double> out(static_cast<size_t>(os.numel()), 0.0);
    std::vector<double> col(static_cast<size_t>(kdim) * spatial);

    const auto& xv = x.values();
    const auto& wv = w.values();
    for (int n = 0; n < xs.n; ++n) {
        const double* xp = xv.data() + static_cast<size_t>(n) * xs.c * xs.h * xs.w;
        double* op = out.data() + static_cast<size_t>(n) * cout * spatial;
        im2col(xp, xs.c, xs.h, xs.w, ws.h, ws.w, stride, hout, wout, col.data());
        gemm_accum(wv.data(), col.data(), op, cout, kdim, spatial);
        if (b.defined()) {
            const auto& bv = b.values();
            for (int co = 0; co < cout; ++co) {
                double* orow = op + static_cast<size_t>(co) * spatial;
                for (int j = 0; j < spatial; ++j) orow[j] += bv[co];
            }
        }
    }

    const bool tracked = b.defined() ? track({&x, &w, &b}) : track({&x, &w});
    std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
    if (b.defined()) parents.push_back(b.node());
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    auto result = make_result(os, std::move(out), tracked, std::move(parents), nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), xn, wn, bn, xs, ws, os, stride]() {
            const int hout = os.h, wout = os.w, cout = ws.n;
            const int kdim = ws.c * ws.h * ws.w;
            const int spatial = hout * wout;
            std::vector<double> col(static_cast<size_t>(kdim) * spatial);
            std::vector<double> dcol;
            const auto& g = rn_w->grad;
            for (int n = 0; n < xs.n; ++n) {
                const double* gp = g.data() + static_cast<size_t>(n) * cout * spatial;
                const double* xp =
                    xn->value.data() + static_cast<size_t>(n) * xs.c * xs.h * xs.w;
                if (wn->requires_grad || xn->requires_grad)
                    im2col(xp, xs.c, xs.h, xs.w, ws.h, ws.w, stride, hout, wout, col.data());
                if (wn->requires_grad) {
                    auto& wg = wn->ensure_grad();
                    gemm_a_bt_accum(gp, col.data(), wg.data(), cout, spatial, kdim);
                }
                if (xn->requires_grad) {
                    dcol.assign(static_cast<size_t>(kdim) * spatial, 0.0);
                    gemm_at_b_accum(wn->value.data(), gp, dcol.data(), kdim, cout, spatial);
                    auto& xg = xn->ensure_grad();
                    col2im_accum(dcol.data(), xs.c, xs.h, xs.w, ws.h, ws.w, stride, hout,
                                 wout,
                                 xg.data() + static_cast<size_t>(n) * xs.c * xs.h * xs.w);
                }
                if (bn && bn->requires_grad) {
                    auto& bg = bn->ensure_grad();
                    for (int co = 0; co < cout; ++co) {
                        const double* grow = gp + static_cast<size_t>(co) * spatial;
                        double s = 0.0;
                        for (int j = 0; j < spatial; ++j) s += grow[j];
                        bg[co] += s;
                    }
                }
            }
        };
    }
    return result;
}

Tensor upsample_nearest2x(const Tensor& x) {
    const Shape s = x.shape();
    const Shape os{s.n, s.c, s.h * 2, s.w * 2};
    std::vector<double> out(static_cast<size_t>(os.numel()));
    const auto& xv = x.values();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const size_t xbase = (static_cast<size_t>(n) * s.c + c) * s.h * s.w;
            const size_t obase = (static_cast<size_t>(n) * s.c + c) * os.h * os.w;
            for (int y = 0; y < os.h; ++y) {
                const double* src = xv.data() + xbase + static_cast<size_t>(y / 2) * s.w;
                double* dst = out.data() + obase + static_cast<size_t>(y) * os.w;
                for (int xx = 0; xx < os.w; ++xx) dst[xx] = src[xx / 2];
            }
        }
    const bool tracked = track({&x});
    auto xn = x.node();
    auto result = make_result(os, std::move(out), tracked, {xn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), xn, s, os]() {
            if (!xn->requires_grad) return;
            auto& xg = xn->ensure_grad();
            const auto& g = rn_w->grad;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const size_t xbase = (static_cast<size_t>(n) * s.c + c) * s.h * s.w;
                    const size_t obase = (static_cast<size_t>(n) * s.c + c) * os.h * os.w;
                    for (int y = 0; y < os.h; ++y) {
                        const double* src = g.data() + obase + static_cast<size_t>(y) * os.w;
                        double* dst = xg.data() + xbase + static_cast<size_t>(y / 2) * s.w;
                        for (int xx = 0; xx < os.w; ++xx) dst[xx / 2] += src[xx];
                    }
                }
        };
    }
    return result;
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Shape s = x.shape();
    if (!(gamma.shape() == Shape{1, s.c, 1, 1}) || !(beta.shape() == Shape{1, s.c, 1, 1}))
        throw ShapeError("instance_norm: gamma/beta must be [1,C,1,1]");
    const int hw = s.h * s.w;
    if (hw < 2) throw ShapeError("instance_norm: spatial size must be >= 2");

    std::vector<double> out(static_cast<size_t>(s.numel()));
    auto xhat = std::make_shared<std::vector<double>>(out.size());
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(s.n) * s.c);

    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            const size_t base = (static_cast<size_t>(n) * s.c + c) * hw;
            double mean = 0.0;
            for (int i = 0; i < hw; ++i) mean += xv[base + i];
            mean /= hw;
            double var = 0.0;
            for (int i = 0; i < hw; ++i) {
                const double d = xv[base + i] - mean;
                var += d * d;
            }
            var /= hw;
            const double is = 1.0 / std::sqrt(var + eps);
            (*invstd)[static_cast<size_t>(n) * s.c + c] = is;
            for (int i = 0; i < hw; ++i) {
                const double xh = (xv[base + i] - mean) * is;
                (*xhat)[base + i] = xh;
                out[base + i] = gv[c] * xh + bv[c];
            }
        }

    const bool tracked = track({&x, &gamma, &beta});
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    auto result = make_result(s, std::move(out), tracked, {xn, gn, bn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), xn, gn, bn, s, hw, xhat, invstd]() {
            const auto& g = rn_w->grad;
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) {
                    const size_t base = (static_cast<size_t>(n) * s.c + c) * hw;
                    const double is = (*invstd)[static_cast<size_t>(n) * s.c + c];
                    const double gammac = gn->value[c];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int i = 0; i < hw; ++i) {
                        sum_g += g[base + i];
                        sum_gx += g[base + i] * (*xhat)[base + i];
                    }
                    if (gn->requires_grad) gn->ensure_grad()[c] += sum_gx;
                    if (bn->requires_grad) bn->ensure_grad()[c] += sum_g;
                    if (xn->requires_grad) {
                        auto& xg = xn->ensure_grad();
                        const double mg = sum_g / hw;
                        const double mgx = sum_gx / hw;
                        for (int i = 0; i < hw; ++i)
                            xg[base + i] +=
                                gammac * is * (g[base + i] - mg - (*xhat)[base + i] * mgx);
                    }
                }
        };
    }
    return result;
}

namespace {

// numerically stable log(sigmoid(z)) and log(1 - sigmoid(z))
inline double log_sigmoid(double z) {
    return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}
inline double log_one_minus_sigmoid(double z) { return log_sigmoid(-z); }
inline double sigmoid(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

} // namespace

Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, const Tensor& mask,
                          double alpha, double gamma, double normalizer) {
    check_same_shape(logits, targets, "sigmoid_focal_loss");
    check_same_shape(logits, mask, "sigmoid_focal_loss");
    if (normalizer <= 0.0) throw NumericError("sigmoid_focal_loss: normalizer must be > 0");

    const auto& zv = logits.values();
    const auto& tv = targets.values();
    const auto& mv = mask.values();
    double total = 0.0;
    for (size_t i = 0; i < zv.size(); ++i) {
        if (mv[i] == 0.0) continue;
        const double z = zv[i];
        const double p = sigmoid(z);
        if (tv[i] > 0.5) {
            const double one_minus_p = 1.0 - p;
            total += -alpha * std::pow(one_minus_p, gamma) * log_sigmoid(z);
        } else {
            total += -(1.0 - alpha) * std::pow(p, gamma) * log_one_minus_sigmoid(z);
        }
    }
    total /= normalizer;

    const bool tracked = track({&logits});
    auto zn = logits.node(), tn = targets.node(), mn = mask.node();
    auto result = make_result({1, 1, 1, 1}, {total}, tracked, {zn, tn, mn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), zn, tn, mn, alpha, gamma, normalizer]() {
            if (!zn->requires_grad) return;
            auto& zg = zn->ensure_grad();
            const double gout = rn_w->grad[0] / normalizer;
            for (size_t i = 0; i < zn->value.size(); ++i) {
                if (mn->value[i] == 0.0) continue;
                const double z = zn->value[i];
                const double p = sigmoid(z);
                double d;
                if (tn->value[i] > 0.5) {
                    // d/dz of -a (1-p)^g log p  ==  a (1-p)^g (g p log p - (1-p))
                    d = alpha * std::pow(1.0 - p, gamma) *
                        (gamma * p * log_sigmoid(z) - (1.0 - p));
                } else {
                    // d/dz of -(1-a) p^g log(1-p)  ==  (1-a) p^g (p - g (1-p) log(1-p))
                    d = (1.0 - alpha) * std::pow(p, gamma) *
                        (p - gamma * (1.0 - p) * log_one_minus_sigmoid(z));
                }
                zg[i] += gout * d;
            }
        };
    }
    return result;
}

Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask,
                      double normalizer) {
    check_same_shape(pred, target, "smooth_l1_loss");
    check_same_shape(pred, mask, "smooth_l1_loss");
    if (normalizer <= 0.0) throw NumericError("smooth_l1_loss: normalizer must be > 0");

    const auto& pv = pred.values();
    const auto& tv = target.values();
    const auto& mv = mask.values();
    double total = 0.0;
    for (size_t i = 0; i < pv.size(); ++i) {
        if (mv[i] == 0.0) continue;
        const double e = pv[i] - tv[i];
        const double a = std::abs(e);
        total += a < 1.0 ? 0.5 * e * e : a - 0.5;
    }
    total /= normalizer;

    const bool tracked = track({&pred});
    auto pn = pred.node(), tn = target.node(), mn = mask.node();
    auto result = make_result({1, 1, 1, 1}, {total}, tracked, {pn, tn, mn}, nullptr);
    if (tracked) {
        auto rn = result.node();
        rn->backward_fn = [rn_w = rn.get(), pn, tn, mn, normalizer]() {
            if (!pn->requires_grad) return;
            auto& pg = pn->ensure_grad();
            const double gout = rn_w->grad[0] / normalizer;
            for (size_t i = 0; i < pn->value.size(); ++i) {
                if (mn->value[i] == 0.0) continue;
                const double e = pn->value[i] - tn->value[i];
                pg[i] += gout * (std::abs(e) < 1.0 ? e : (e > 0.0 ? 1.0 : -1.0));
            }
        };
    }
    return result;
}

Tensor detach(const Tensor& a) {
    auto node = std::make_shared<Node>();
    node->shape = a.shape();
    node->value = a.values();
    return Tensor(std::move(node));
}

} // namespace snbi::nn
