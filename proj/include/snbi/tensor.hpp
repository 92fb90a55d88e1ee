#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace snbi::nn {

/// NCHW shape; scalars are {1,1,1,1}.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    int64_t numel() const {
        return static_cast<int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

struct Node;

/// Value-semantic handle onto a graph node. All math is double precision;
/// graphs are dynamic and freed when the handles go out of scope.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    Shape shape() const;
    int64_t numel() const { return shape().numel(); }

    double* data();
    const double* data() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;

    bool requires_grad() const;
    void set_requires_grad(bool v);
    std::vector<double>& grad(); // allocated (zeroed) on first access
    void zero_grad();

    /// Reverse-mode sweep from this scalar.
    void backward();

    double item() const; // value of a scalar tensor

    std::shared_ptr<Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn; // reads this->grad, accumulates into parents
    std::string name;                  // set for named parameters

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

/// Graph recording toggle; off during inference.
bool grad_enabled();
void set_grad_enabled(bool v);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }

private:
    bool prev_;
};

enum class PadMode { Zero, Reflect };

// elementwise
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor tanh_op(const Tensor& a);
Tensor abs_op(const Tensor& a);
Tensor square(const Tensor& a);

// reductions (scalar results)
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

/// Border padding on H and W.
Tensor pad2d(const Tensor& x, int pad, PadMode mode);

/// Valid convolution (pad beforehand). w: [Cout, Cin, kh, kw], optional bias
/// b: [1, Cout, 1, 1].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride);

Tensor upsample_nearest2x(const Tensor& x);

/// Per-(n,c) normalization over HxW. gamma/beta: [1, C, 1, 1].
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps = 1e-5);

/// Focal sigmoid classification loss, summed over mask then divided by
/// normalizer. targets hold {0,1}, mask {0,1}; both are plain data tensors.
Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets, const Tensor& mask,
                          double alpha, double gamma, double normalizer);

/// Huber(1) regression loss, summed over mask then divided by normalizer.
Tensor smooth_l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask,
                      double normalizer);

/// Detaches a tensor from the graph (copy of the value, no parents).
Tensor detach(const Tensor& a);

} // namespace snbi::nn
