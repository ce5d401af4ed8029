#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hemotrack/common.hpp"

namespace hemo::nn {

// Minimal reverse-mode autograd over dense double tensors (row-major, up to
// 4 axes). Doubles are used throughout: the finite-difference gradient tests
// run at eps = 1e-4 with 1e-3 relative tolerance, which single precision
// cannot reliably meet.

struct Node {
    std::vector<int> shape;
    std::vector<double> val;
    std::vector<double> grad;  // sized lazily during backward
    std::vector<std::shared_ptr<Node>> prev;
    std::function<void(Node&)> back;
    bool needs_grad = false;
    const char* op = "leaf";
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(std::vector<int> shape, bool needs_grad);
    static Var scalar(double v, bool needs_grad = false);
    static Var from(std::vector<int> shape, std::vector<double> vals, bool needs_grad = false);

    bool defined() const { return n_ != nullptr; }
    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& ptr() const { return n_; }

    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(i); }
    int64_t size() const { return int64_t(n_->val.size()); }
    const std::vector<double>& val() const { return n_->val; }
    std::vector<double>& val() { return n_->val; }
    std::vector<double>& grad() { return n_->grad; }
    double item() const;
    bool needs_grad() const { return n_->needs_grad; }

    void zero_grad() { n_->grad.assign(n_->val.size(), 0.0); }
    Var detach() const;

private:
    std::shared_ptr<Node> n_;
};

int64_t numel(const std::vector<int>& shape);

// Gradient recording switch (thread-local). Inference paths wrap themselves in
// NoGradGuard so no graph is retained.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();

private:
    bool prev_;
};

void backward(const Var& scalar_loss);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_op(const Var& a);
Var exp_op(const Var& a);
Var log_op(const Var& a);
Var sqrt_op(const Var& a);
Var clamp(const Var& a, double lo, double hi);
Var square(const Var& a);
// Huber of each element of (a) with threshold delta (applied to a directly;
// callers subtract first).
Var huber_elem(const Var& a, double delta);

// ---- reductions ----
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var max_all(const Var& a);             // subgradient to first argmax
Var mean0(const Var& a);               // {T,d} -> {d}
Var div_by_scalar(const Var& a, const Var& s);  // s has 1 element
Var mul_by_scalar(const Var& a, const Var& s);  // s has 1 element
Var scale_channels(const Var& x, const Var& s);  // {C,H,W} * per-channel {C}

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var concat0(const std::vector<Var>& xs);
Var slice0(const Var& a, int start, int len);
Var permute102(const Var& a);          // {A,B,C} -> {B,A,C}
// Every sy-th row / sx-th column of a {C,H,W} map (used to bound attention
// key counts at large resolutions).
Var stride_sample(const Var& a, int sy, int sx);

// ---- dense algebra ----
Var matmul(const Var& a, const Var& b);                     // {m,k}x{k,n}
Var matmul_nt(const Var& a, const Var& b);                  // {m,k}x{n,k} -> {m,n}
Var bmm(const Var& a, const Var& b);                        // {B,m,k}x{B,k,n}
Var bmm_nt(const Var& a, const Var& b);                     // {B,m,k}x{B,n,k} -> {B,m,n}
Var linear(const Var& x, const Var& w, const Var& b);       // rows x {out,in}^T + b
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var resize_bilinear(const Var& x, int hout, int wout);
Var global_avgpool(const Var& x);                           // {C,H,W} -> {C}
Var softmax_last(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Bilinear sample of a {C,H,W} map at continuous pixel coords (x, y); the
// coordinates are constants, gradients flow into the map.
Var bilinear_sample(const Var& map, double x, double y);

// ---- losses ----
Var mse(const Var& pred, const Var& target);                       // mean
Var bce(const Var& prob, const std::vector<double>& targets);      // mean, prob in (0,1)
Var huber_sum(const Var& a, const Var& b, double delta);           // sum of per-elem Huber(a-b)

}  // namespace hemo::nn
