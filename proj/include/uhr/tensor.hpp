#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uhr/common.hpp"

namespace uhr {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Dense double-precision tensor. Data is shared and treated as immutable once
// the tensor has been handed to an op; gradients live on the tape, not here.
// A tensor is "tracked" when it carries a tape node handle.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;

    int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
    int rank() const { return static_cast<int>(shape.size()); }
    bool tracked() const { return tape != nullptr && node >= 0; }

    const double* ptr() const { return data->data(); }
    const std::vector<double>& values() const { return *data; }

    double at(int i) const { return (*data)[i]; }
    double at(int i, int j) const { return (*data)[static_cast<int64_t>(i) * shape[1] + j]; }
    double at(int i, int j, int k) const {
        return (*data)[(static_cast<int64_t>(i) * shape[1] + j) * shape[2] + k];
    }
    double item() const;  // numel()==1 only

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor from(Shape s, std::vector<double> v);
    static Tensor scalar(double v) { return from({1}, {v}); }
};

// Reverse-mode tape. One tape per forward pass; append order is the
// topological order, and backward() walks it once in reverse. Leaves are
// registered with watch(); everything else is pushed by the ops.
class Tape {
  public:
    using BackFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

    // Registers a leaf that should receive a gradient; returns a tracked
    // handle sharing the same data. Watching the same buffer twice yields two
    // independent leaves, so callers should watch each parameter once.
    Tensor watch(const Tensor& t);

    // Pushes an interior node; used by ops.
    int push(Shape shape, std::vector<int> parents, BackFn fn);

    // Reverse accumulation from a scalar root (numel()==1). May be called
    // once per tape.
    void backward(const Tensor& root);

    // Gradient of a watched/tracked tensor after backward(); zeros if the
    // node was never reached.
    std::vector<double> grad(const Tensor& t) const;

    std::vector<double>& grad_buf(int node);
    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        int64_t numel;
        BackFn fn;  // null for leaves
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_ = false;
};

// ---- op suite -------------------------------------------------------------
// Every op validates shapes, produces a fresh tensor and records the backward
// closure when an input is tracked. All outputs are checked finite; an op
// that would produce NaN/Inf throws NumericError instead of returning.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_over_axis(const Tensor& z, int axis);
// Dilated 2-D cross-correlation with "same" zero padding. x: [Cin,H,W],
// w: [Cout,Cin,k,k] (k odd), optional bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, int dilation = 1);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int dilation);

Tensor add(const Tensor& a, const Tensor& b);  // identical shapes or scalar b
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);

Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor log_eps(const Tensor& x, double eps);  // log(x + eps)
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor power_of_two(const Tensor& x);  // 2^x, implemented as exp(x*ln2)
Tensor clamp_min(const Tensor& x, double lo);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reduce_sum(const Tensor& x, int axis);
Tensor reduce_mean(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);   // -> shape {1}
Tensor mean_all(const Tensor& x);  // -> shape {1}

Tensor reshape(const Tensor& x, Shape s);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);  // [C,H,W] or [H,W]
Tensor nearest_resize(const Tensor& x, int out_h, int out_w);
Tensor detach(const Tensor& x);

// Central finite-difference audit of the tape gradient of f at x. f must be
// deterministic and return a scalar. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h);

// ---- UHRT dump format -----------------------------------------------------
// magic "UHRT", u32 rank, rank x u32 dims, dims-product f32 values, all
// little-endian. Doubles are truncated to f32 on write.
void uhrt_write(const std::string& path, const Tensor& t);
Tensor uhrt_read(const std::string& path);

}  // namespace uhr
