#include "hemotrack/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "hemotrack/kernels.hpp"

namespace hemo::nn {

namespace {

thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_node(std::vector<int> shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.assign(numel(n->shape), 0.0);
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
}

bool tracking(std::initializer_list<const Var*> ins) {
    if (!g_grad_enabled) return false;
    for (const Var* v : ins)
        if (v->defined() && v->needs_grad()) return true;
    return false;
}

// Unary elementwise helper: fwd maps x->y, dfn gives dy/dx from (x, y).
template <typename F, typename D>
Var unary(const Var& a, const char* name, F fwd, D dfn) {
    auto out = make_node(a.shape());
    out->op = name;
    const auto& x = a.val();
    for (size_t i = 0; i < x.size(); ++i) out->val[i] = fwd(x[i]);
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, dfn](Node& self) {
            ensure_grad(*an);
            for (size_t i = 0; i < self.val.size(); ++i)
                an->grad[i] += self.grad[i] * dfn(an->val[i], self.val[i]);
        };
    }
    return Var(out);
}

}  // namespace

int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        HEMO_CHECK(d > 0, "numel: non-positive dim ", d);
        n *= d;
    }
    return n;
}

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var Var::leaf(std::vector<int> shape, bool needs_grad) {
    auto n = make_node(std::move(shape));
    n->needs_grad = needs_grad;
    return Var(n);
}

Var Var::scalar(double v, bool needs_grad) {
    auto n = make_node({1});
    n->val[0] = v;
    n->needs_grad = needs_grad;
    return Var(n);
}

Var Var::from(std::vector<int> shape, std::vector<double> vals, bool needs_grad) {
    HEMO_CHECK(numel(shape) == int64_t(vals.size()), "Var::from: ", vals.size(),
               " values for shape of ", numel(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(vals);
    n->needs_grad = needs_grad;
    return Var(n);
}

double Var::item() const {
    HEMO_CHECK(n_ && n_->val.size() == 1, "item: tensor is not scalar");
    return n_->val[0];
}

Var Var::detach() const {
    auto n = make_node(n_->shape);
    n->val = n_->val;
    return Var(n);
}

void backward(const Var& loss) {
    Node* root = loss.node();
    HEMO_CHECK(root, "backward: undefined loss");
    HEMO_CHECK(root->val.size() == 1, "backward: loss must be scalar");
    HEMO_CHECK(root->needs_grad, "backward: loss has no gradient path");

    std::vector<Node*> order;
    std::unordered_map<Node*, char> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen[root] = 1;
    while (!stack.empty()) {
        auto& top = stack.back();
        Node* n = top.first;
        if (top.second < n->prev.size()) {
            Node* c = n->prev[top.second++].get();
            if (c->needs_grad && !seen.count(c)) {
                seen[c] = 1;
                stack.emplace_back(c, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back) n->back(*n);
    }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape() == b.shape(), "add: shape mismatch");
    auto out = make_node(a.shape());
    out->op = "add";
    for (int64_t i = 0; i < a.size(); ++i) out->val[i] = a.val()[i] + b.val()[i];
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->needs_grad) {
                ensure_grad(*bn);
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        };
    }
    return Var(out);
}

Var sub(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape() == b.shape(), "sub: shape mismatch");
    auto out = make_node(a.shape());
    out->op = "sub";
    for (int64_t i = 0; i < a.size(); ++i) out->val[i] = a.val()[i] - b.val()[i];
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->needs_grad) {
                ensure_grad(*bn);
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        };
    }
    return Var(out);
}

Var mul(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape() == b.shape(), "mul: shape mismatch");
    auto out = make_node(a.shape());
    out->op = "mul";
    for (int64_t i = 0; i < a.size(); ++i) out->val[i] = a.val()[i] * b.val()[i];
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->val[i];
            }
            if (bn->needs_grad) {
                ensure_grad(*bn);
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->val[i];
            }
        };
    }
    return Var(out);
}

Var scale(const Var& a, double c) {
    return unary(a, "scale", [c](double x) { return c * x; },
                 [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
    return unary(a, "add_scalar", [c](double x) { return x + c; },
                 [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
    return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
    return unary(a, "sigmoid",
                 [](double x) {
                     if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                     double e = std::exp(x);
                     return e / (1.0 + e);
                 },
                 [](double, double y) { return y * (1.0 - y); });
}

Var tanh_op(const Var& a) {
    return unary(a, "tanh", [](double x) { return std::tanh(x); },
                 [](double, double y) { return 1.0 - y * y; });
}

Var exp_op(const Var& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); },
                 [](double, double y) { return y; });
}

Var log_op(const Var& a) {
    return unary(a, "log", [](double x) { return std::log(x); },
                 [](double x, double) { return 1.0 / x; });
}

Var sqrt_op(const Var& a) {
    return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}

Var clamp(const Var& a, double lo, double hi) {
    return unary(a, "clamp",
                 [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                 [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var square(const Var& a) {
    return unary(a, "square", [](double x) { return x * x; },
                 [](double x, double) { return 2.0 * x; });
}

Var huber_elem(const Var& a, double delta) {
    HEMO_CHECK(delta > 0, "huber: delta must be > 0");
    return unary(a, "huber",
                 [delta](double x) {
                     double ax = std::abs(x);
                     return ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
                 },
                 [delta](double x, double) {
                     if (std::abs(x) <= delta) return x;
                     return x > 0 ? delta : -delta;
                 });
}

// ---------------- reductions ----------------

Var sum_all(const Var& a) {
    auto out = make_node({1});
    out->op = "sum";
    double s = 0.0;
    for (double v : a.val()) s += v;
    out->val[0] = s;
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an](Node& self) {
            ensure_grad(*an);
            const double g = self.grad[0];
            for (auto& gi : an->grad) gi += g;
        };
    }
    return Var(out);
}

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / double(a.size())); }

Var max_all(const Var& a) {
    auto out = make_node({1});
    out->op = "max";
    const auto& x = a.val();
    size_t best = 0;
    for (size_t i = 1; i < x.size(); ++i)
        if (x[i] > x[best]) best = i;
    out->val[0] = x[best];
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, best](Node& self) {
            ensure_grad(*an);
            an->grad[best] += self.grad[0];
        };
    }
    return Var(out);
}

Var mean0(const Var& a) {
    HEMO_CHECK(a.shape().size() == 2, "mean0: expected {T,d}");
    const int t = a.dim(0), d = a.dim(1);
    auto out = make_node({d});
    out->op = "mean0";
    for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int i = 0; i < t; ++i) s += a.val()[int64_t(i) * d + j];
        out->val[j] = s / t;
    }
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, t, d](Node& self) {
            ensure_grad(*an);
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < d; ++j) an->grad[int64_t(i) * d + j] += self.grad[j] / t;
        };
    }
    return Var(out);
}

Var div_by_scalar(const Var& a, const Var& s) {
    HEMO_CHECK(s.size() == 1, "div_by_scalar: divisor must be scalar");
    const double sv = s.val()[0];
    HEMO_CHECK(sv != 0.0, "div_by_scalar: division by zero");
    auto out = make_node(a.shape());
    out->op = "div_s";
    for (int64_t i = 0; i < a.size(); ++i) out->val[i] = a.val()[i] / sv;
    if (tracking({&a, &s})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), s.ptr()};
        Node *an = a.node(), *sn = s.node();
        out->back = [an, sn, sv](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] / sv;
            }
            if (sn->needs_grad) {
                ensure_grad(*sn);
                double acc = 0.0;
                for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.val[i];
                sn->grad[0] -= acc / sv;
            }
        };
    }
    return Var(out);
}

Var mul_by_scalar(const Var& a, const Var& s) {
    HEMO_CHECK(s.size() == 1, "mul_by_scalar: factor must be scalar");
    const double sv = s.val()[0];
    auto out = make_node(a.shape());
    out->op = "mul_s";
    for (int64_t i = 0; i < a.size(); ++i) out->val[i] = a.val()[i] * sv;
    if (tracking({&a, &s})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), s.ptr()};
        Node *an = a.node(), *sn = s.node();
        out->back = [an, sn, sv](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sv;
            }
            if (sn->needs_grad) {
                ensure_grad(*sn);
                double acc = 0.0;
                for (size_t i = 0; i < self.grad.size(); ++i)
                    acc += self.grad[i] * an->val[i];
                sn->grad[0] += acc;
            }
        };
    }
    return Var(out);
}

Var scale_channels(const Var& x, const Var& s) {
    HEMO_CHECK(x.shape().size() == 3, "scale_channels: expected {C,H,W}");
    const int C = x.dim(0);
    const int64_t hw = int64_t(x.dim(1)) * x.dim(2);
    HEMO_CHECK(s.size() == C, "scale_channels: got ", s.size(), " scales for ", C, " channels");
    auto out = make_node(x.shape());
    out->op = "scale_ch";
    for (int c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) out->val[c * hw + i] = x.val()[c * hw + i] * s.val()[c];
    if (tracking({&x, &s})) {
        out->needs_grad = true;
        out->prev = {x.ptr(), s.ptr()};
        Node *xn = x.node(), *sn = s.node();
        out->back = [xn, sn, C, hw](Node& self) {
            if (xn->needs_grad) {
                ensure_grad(*xn);
                for (int c = 0; c < C; ++c)
                    for (int64_t i = 0; i < hw; ++i)
                        xn->grad[c * hw + i] += self.grad[c * hw + i] * sn->val[c];
            }
            if (sn->needs_grad) {
                ensure_grad(*sn);
                for (int c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < hw; ++i)
                        acc += self.grad[c * hw + i] * xn->val[c * hw + i];
                    sn->grad[c] += acc;
                }
            }
        };
    }
    return Var(out);
}

// ---------------- shape ----------------

Var reshape(const Var& a, std::vector<int> shape) {
    HEMO_CHECK(numel(shape) == a.size(), "reshape: size mismatch");
    auto out = std::make_shared<Node>();
    out->shape = std::move(shape);
    out->val = a.val();
    out->op = "reshape";
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an](Node& self) {
            ensure_grad(*an);
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        };
    }
    return Var(out);
}

Var concat0(const std::vector<Var>& xs) {
    HEMO_CHECK(!xs.empty(), "concat0: empty input list");
    auto inner = xs[0].shape();
    inner.erase(inner.begin());
    int total = 0;
    for (const auto& x : xs) {
        auto s = x.shape();
        const int head = s[0];
        s.erase(s.begin());
        HEMO_CHECK(s == inner, "concat0: trailing shape mismatch");
        total += head;
    }
    std::vector<int> oshape = xs[0].shape();
    oshape[0] = total;
    auto out = make_node(oshape);
    out->op = "concat0";
    int64_t off = 0;
    for (const auto& x : xs) {
        std::copy(x.val().begin(), x.val().end(), out->val.begin() + off);
        off += x.size();
    }
    bool track = false;
    if (g_grad_enabled)
        for (const auto& x : xs)
            if (x.needs_grad()) track = true;
    if (track) {
        out->needs_grad = true;
        std::vector<std::pair<Node*, int64_t>> parts;
        int64_t o = 0;
        for (const auto& x : xs) {
            out->prev.push_back(x.ptr());
            parts.emplace_back(x.node(), o);
            o += x.size();
        }
        out->back = [parts](Node& self) {
            for (auto& [n, start] : parts) {
                if (!n->needs_grad) continue;
                ensure_grad(*n);
                for (size_t i = 0; i < n->val.size(); ++i) n->grad[i] += self.grad[start + i];
            }
        };
    }
    return Var(out);
}

Var slice0(const Var& a, int start, int len) {
    HEMO_CHECK(start >= 0 && len > 0 && start + len <= a.dim(0), "slice0: out of range");
    std::vector<int> oshape = a.shape();
    oshape[0] = len;
    const int64_t block = a.size() / a.dim(0);
    auto out = make_node(oshape);
    out->op = "slice0";
    std::copy(a.val().begin() + start * block, a.val().begin() + (start + len) * block,
              out->val.begin());
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        const int64_t off = start * block;
        out->back = [an, off](Node& self) {
            ensure_grad(*an);
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[off + i] += self.grad[i];
        };
    }
    return Var(out);
}

Var permute102(const Var& a) {
    HEMO_CHECK(a.shape().size() == 3, "permute102: expected 3 axes");
    const int A = a.dim(0), B = a.dim(1), C = a.dim(2);
    auto out = make_node({B, A, C});
    out->op = "permute102";
    for (int i = 0; i < A; ++i)
        for (int j = 0; j < B; ++j)
            for (int c = 0; c < C; ++c)
                out->val[(int64_t(j) * A + i) * C + c] = a.val()[(int64_t(i) * B + j) * C + c];
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, A, B, C](Node& self) {
            ensure_grad(*an);
            for (int i = 0; i < A; ++i)
                for (int j = 0; j < B; ++j)
                    for (int c = 0; c < C; ++c)
                        an->grad[(int64_t(i) * B + j) * C + c] +=
                            self.grad[(int64_t(j) * A + i) * C + c];
        };
    }
    return Var(out);
}

Var stride_sample(const Var& a, int sy, int sx) {
    HEMO_CHECK(a.shape().size() == 3, "stride_sample: expected {C,H,W}");
    HEMO_CHECK(sy >= 1 && sx >= 1, "stride_sample: strides must be >= 1");
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    const int ho = (H + sy - 1) / sy, wo = (W + sx - 1) / sx;
    auto out = make_node({C, ho, wo});
    out->op = "stride_sample";
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x)
                out->val[(int64_t(c) * ho + y) * wo + x] =
                    a.val()[(int64_t(c) * H + y * sy) * W + x * sx];
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, C, H, W, ho, wo, sy, sx](Node& self) {
            ensure_grad(*an);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < ho; ++y)
                    for (int x = 0; x < wo; ++x)
                        an->grad[(int64_t(c) * H + y * sy) * W + x * sx] +=
                            self.grad[(int64_t(c) * ho + y) * wo + x];
        };
    }
    return Var(out);
}

// ---------------- dense algebra ----------------

Var matmul(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
               "matmul: incompatible shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_node({m, n});
    out->op = "matmul";
    kern::dispatch::matmul(m, k, n, a.val().data(), b.val().data(), out->val.data(), false);
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn, m, k, n](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);
                kern::dispatch::matmul_nt(m, n, k, self.grad.data(), bn->val.data(),
                                          an->grad.data(), true);
            }
            if (bn->needs_grad) {
                ensure_grad(*bn);
                kern::dispatch::matmul_tn(m, k, n, an->val.data(), self.grad.data(),
                                          bn->grad.data(), true);
            }
        };
    }
    return Var(out);
}

Var matmul_nt(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
               "matmul_nt: incompatible shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = make_node({m, n});
    out->op = "matmul_nt";
    kern::dispatch::matmul_nt(m, k, n, a.val().data(), b.val().data(), out->val.data(), false);
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn, m, k, n](Node& self) {
            if (an->needs_grad) {
                ensure_grad(*an);   // dA = G * B   {m,n}x{n,k}
                kern::dispatch::matmul(m, n, k, self.grad.data(), bn->val.data(),
                                       an->grad.data(), true);
            }
            if (bn->needs_grad) {
                ensure_grad(*bn);   // dB = G^T * A   {n,m}x{m,k}
                kern::dispatch::matmul_tn(m, n, k, self.grad.data(), an->val.data(),
                                          bn->grad.data(), true);
            }
        };
    }
    return Var(out);
}

Var bmm(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(1),
               "bmm: incompatible shapes");
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    auto out = make_node({bs, m, n});
    out->op = "bmm";
    for (int i = 0; i < bs; ++i)
        kern::dispatch::matmul(m, k, n, a.val().data() + int64_t(i) * m * k,
                               b.val().data() + int64_t(i) * k * n,
                               out->val.data() + int64_t(i) * m * n, false);
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn, bs, m, k, n](Node& self) {
            for (int i = 0; i < bs; ++i) {
                const double* g = self.grad.data() + int64_t(i) * m * n;
                if (an->needs_grad) {
                    ensure_grad(*an);
                    kern::dispatch::matmul_nt(m, n, k, g, bn->val.data() + int64_t(i) * k * n,
                                              an->grad.data() + int64_t(i) * m * k, true);
                }
                if (bn->needs_grad) {
                    ensure_grad(*bn);
                    kern::dispatch::matmul_tn(m, k, n, an->val.data() + int64_t(i) * m * k, g,
                                              bn->grad.data() + int64_t(i) * k * n, true);
                }
            }
        };
    }
    return Var(out);
}

Var bmm_nt(const Var& a, const Var& b) {
    HEMO_CHECK(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0) &&
                   a.dim(2) == b.dim(2),
               "bmm_nt: incompatible shapes");
    const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    auto out = make_node({bs, m, n});
    out->op = "bmm_nt";
    for (int i = 0; i < bs; ++i)
        kern::dispatch::matmul_nt(m, k, n, a.val().data() + int64_t(i) * m * k,
                                  b.val().data() + int64_t(i) * n * k,
                                  out->val.data() + int64_t(i) * m * n, false);
    if (tracking({&a, &b})) {
        out->needs_grad = true;
        out->prev = {a.ptr(), b.ptr()};
        Node *an = a.node(), *bn = b.node();
        out->back = [an, bn, bs, m, k, n](Node& self) {
            for (int i = 0; i < bs; ++i) {
                const double* g = self.grad.data() + int64_t(i) * m * n;
                if (an->needs_grad) {
                    ensure_grad(*an);
                    kern::dispatch::matmul(m, n, k, g, bn->val.data() + int64_t(i) * n * k,
                                           an->grad.data() + int64_t(i) * m * k, true);
                }
                if (bn->needs_grad) {
                    ensure_grad(*bn);
                    kern::dispatch::matmul_tn(m, n, k, g, an->val.data() + int64_t(i) * m * k,
                                              bn->grad.data() + int64_t(i) * n * k, true);
                }
            }
        };
    }
    return Var(out);
}

Var linear(const Var& x, const Var& w, const Var& b) {
    HEMO_CHECK(w.shape().size() == 2, "linear: weight must be {out,in}");
    const int in = w.dim(1), out_dim = w.dim(0);
    HEMO_CHECK(x.shape().back() == in, "linear: input last dim ", x.shape().back(),
               " != weight in dim ", in);
    const int rows = int(x.size() / in);
    std::vector<int> oshape = x.shape();
    oshape.back() = out_dim;
    auto out = make_node(oshape);
    out->op = "linear";
    kern::dispatch::matmul_nt(rows, in, out_dim, x.val().data(), w.val().data(), out->val.data(),
                              false);
    if (b.defined()) {
        HEMO_CHECK(b.size() == out_dim, "linear: bias size mismatch");
        for (int r = 0; r < rows; ++r)
            for (int o = 0; o < out_dim; ++o) out->val[int64_t(r) * out_dim + o] += b.val()[o];
    }
    if (tracking({&x, &w, &b})) {
        out->needs_grad = true;
        out->prev = {x.ptr(), w.ptr()};
        if (b.defined()) out->prev.push_back(b.ptr());
        Node *xn = x.node(), *wn = w.node();
        Node* bn = b.defined() ? b.node() : nullptr;
        out->back = [xn, wn, bn, rows, in, out_dim](Node& self) {
            if (xn->needs_grad) {
                ensure_grad(*xn);
                kern::dispatch::matmul(rows, out_dim, in, self.grad.data(), wn->val.data(),
                                       xn->grad.data(), true);
            }
            if (wn->needs_grad) {
                ensure_grad(*wn);
                kern::dispatch::matmul_tn(rows, out_dim, in, self.grad.data(), xn->val.data(),
                                          wn->grad.data(), true);
            }
            if (bn && bn->needs_grad) {
                ensure_grad(*bn);
                for (int r = 0; r < rows; ++r)
                    for (int o = 0; o < out_dim; ++o)
                        bn->grad[o] += self.grad[int64_t(r) * out_dim + o];
            }
        };
    }
    return Var(out);
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    HEMO_CHECK(x.shape().size() == 3 && w.shape().size() == 4, "conv2d: expected {C,H,W} input");
    HEMO_CHECK(x.dim(0) == w.dim(1), "conv2d: channel mismatch");
    kern::Conv2dShape s{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), w.dim(3), stride, pad};
    HEMO_CHECK(s.hout() > 0 && s.wout() > 0, "conv2d: empty output");
    auto out = make_node({s.cout, s.hout(), s.wout()});
    out->op = "conv2d";
    kern::dispatch::conv2d_fwd(s, x.val().data(), w.val().data(),
                               b.defined() ? b.val().data() : nullptr, out->val.data());
    if (tracking({&x, &w, &b})) {
        out->needs_grad = true;
        out->prev = {x.ptr(), w.ptr()};
        if (b.defined()) out->prev.push_back(b.ptr());
        Node *xn = x.node(), *wn = w.node();
        Node* bn = b.defined() ? b.node() : nullptr;
        out->back = [xn, wn, bn, s](Node& self) {
            if (xn->needs_grad) {
                ensure_grad(*xn);
                kern::dispatch::conv2d_bwd_input(s, self.grad.data(), wn->val.data(),
                                                 xn->grad.data());
            }
            if (wn->needs_grad || (bn && bn->needs_grad)) {
                double* gw = nullptr;
                double* gb = nullptr;
                if (wn->needs_grad) {
                    ensure_grad(*wn);
                    gw = wn->grad.data();
                }
                if (bn && bn->needs_grad) {
                    ensure_grad(*bn);
                    gb = bn->grad.data();
                }
                if (gw)
                    kern::dispatch::conv2d_bwd_weight(s, xn->val.data(), self.grad.data(), gw, gb);
            }
        };
    }
    return Var(out);
}

Var resize_bilinear(const Var& x, int hout, int wout) {
    HEMO_CHECK(x.shape().size() == 3, "resize_bilinear: expected {C,H,W}");
    HEMO_CHECK(hout > 0 && wout > 0, "resize_bilinear: bad target size");
    const int c = x.dim(0), hin = x.dim(1), win = x.dim(2);
    auto out = make_node({c, hout, wout});
    out->op = "resize";
    kern::dispatch::resize_bilinear_fwd(c, hin, win, hout, wout, x.val().data(), out->val.data());
    if (tracking({&x})) {
        out->needs_grad = true;
        out->prev = {x.ptr()};
        Node* xn = x.node();
        out->back = [xn, c, hin, win, hout, wout](Node& self) {
            ensure_grad(*xn);
            kern::dispatch::resize_bilinear_bwd(c, hin, win, hout, wout, self.grad.data(),
                                                xn->grad.data());
        };
    }
    return Var(out);
}

Var global_avgpool(const Var& x) {
    HEMO_CHECK(x.shape().size() == 3, "global_avgpool: expected {C,H,W}");
    const int c = x.dim(0);
    const int64_t hw = int64_t(x.dim(1)) * x.dim(2);
    auto out = make_node({c});
    out->op = "gap";
    for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += x.val()[ch * hw + i];
        out->val[ch] = s / double(hw);
    }
    if (tracking({&x})) {
        out->needs_grad = true;
        out->prev = {x.ptr()};
        Node* xn = x.node();
        out->back = [xn, c, hw](Node& self) {
            ensure_grad(*xn);
            for (int ch = 0; ch < c; ++ch) {
                const double g = self.grad[ch] / double(hw);
                for (int64_t i = 0; i < hw; ++i) xn->grad[ch * hw + i] += g;
            }
        };
    }
    return Var(out);
}

Var softmax_last(const Var& a) {
    const int n = a.shape().back();
    const int rows = int(a.size() / n);
    auto out = make_node(a.shape());
    out->op = "softmax";
    kern::dispatch::softmax_rows(rows, n, a.val().data(), out->val.data());
    if (tracking({&a})) {
        out->needs_grad = true;
        out->prev = {a.ptr()};
        Node* an = a.node();
        out->back = [an, rows, n](Node& self) {
            ensure_grad(*an);
            for (int r = 0; r < rows; ++r) {
                const double* y = self.val.data() + int64_t(r) * n;
                const double* g = self.grad.data() + int64_t(r) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += y[j] * g[j];
                double* gx = an->grad.data() + int64_t(r) * n;
                for (int j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return Var(out);
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int d = x.shape().back();
    HEMO_CHECK(gamma.size() == d && beta.size() == d, "layer_norm: param size mismatch");
    const int rows = int(x.size() / d);
    auto out = make_node(x.shape());
    out->op = "layer_norm";
    std::vector<double> mean(rows), inv_std(rows);
    for (int r = 0; r < rows; ++r) {
        const double* xr = x.val().data() + int64_t(r) * d;
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += xr[j];
        m /= d;
        double v = 0.0;
        for (int j = 0; j < d; ++j) v += (xr[j] - m) * (xr[j] - m);
        v /= d;
        mean[r] = m;
        inv_std[r] = 1.0 / std::sqrt(v + eps);
        double* yr = out->val.data() + int64_t(r) * d;
        for (int j = 0; j < d; ++j)
            yr[j] = gamma.val()[j] * (xr[j] - m) * inv_std[r] + beta.val()[j];
    }
    if (tracking({&x, &gamma, &beta})) {
        out->needs_grad = true;
        out->prev = {x.ptr(), gamma.ptr(), beta.ptr()};
        Node *xn = x.node(), *gn = gamma.node(), *bn = beta.node();
        out->back = [xn, gn, bn, rows, d, mean, inv_std](Node& self) {
            for (int r = 0; r < rows; ++r) {
                const double* xr = xn->val.data() + int64_t(r) * d;
                const double* g = self.grad.data() + int64_t(r) * d;
                const double is = inv_std[r], m = mean[r];
                if (gn->needs_grad || bn->needs_grad) {
                    ensure_grad(*gn);
                    ensure_grad(*bn);
                    for (int j = 0; j < d; ++j) {
                        gn->grad[j] += g[j] * (xr[j] - m) * is;
                        bn->grad[j] += g[j];
                    }
                }
                if (xn->needs_grad) {
                    ensure_grad(*xn);
                    double s1 = 0.0, s2 = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double gg = g[j] * gn->val[j];
                        const double xh = (xr[j] - m) * is;
                        s1 += gg;
                        s2 += gg * xh;
                    }
                    s1 /= d;
                    s2 /= d;
                    double* gx = xn->grad.data() + int64_t(r) * d;
                    for (int j = 0; j < d; ++j) {
                        const double gg = g[j] * gn->val[j];
                        const double xh = (xr[j] - m) * is;
                        gx[j] += is * (gg - s1 - xh * s2);
                    }
                }
            }
        };
    }
    return Var(out);
}

Var bilinear_sample(const Var& map, double x, double y) {
    HEMO_CHECK(map.shape().size() == 3, "bilinear_sample: expected {C,H,W}");
    const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
    double fx = std::min(std::max(x, 0.0), double(w - 1));
    double fy = std::min(std::max(y, 0.0), double(h - 1));
    const int x0 = int(fx), y0 = int(fy);
    const int x1 = x0 + 1 < w ? x0 + 1 : x0;
    const int y1 = y0 + 1 < h ? y0 + 1 : y0;
    const double wx = fx - x0, wy = fy - y0;
    auto out = make_node({c});
    out->op = "bsample";
    for (int ch = 0; ch < c; ++ch) {
        const double* m = map.val().data() + int64_t(ch) * h * w;
        out->val[ch] = (1 - wy) * ((1 - wx) * m[int64_t(y0) * w + x0] + wx * m[int64_t(y0) * w + x1]) +
                       wy * ((1 - wx) * m[int64_t(y1) * w + x0] + wx * m[int64_t(y1) * w + x1]);
    }
    if (tracking({&map})) {
        out->needs_grad = true;
        out->prev = {map.ptr()};
        Node* mn = map.node();
        out->back = [mn, c, h, w, x0, x1, y0, y1, wx, wy](Node& self) {
            ensure_grad(*mn);
            for (int ch = 0; ch < c; ++ch) {
                double* g = mn->grad.data() + int64_t(ch) * h * w;
                const double go = self.grad[ch];
                g[int64_t(y0) * w + x0] += (1 - wy) * (1 - wx) * go;
                g[int64_t(y0) * w + x1] += (1 - wy) * wx * go;
                g[int64_t(y1) * w + x0] += wy * (1 - wx) * go;
                g[int64_t(y1) * w + x1] += wy * wx * go;
            }
        };
    }
    return Var(out);
}

// ---------------- losses ----------------

Var mse(const Var& pred, const Var& target) { return mean_all(square(sub(pred, target))); }

Var bce(const Var& prob, const std::vector<double>& targets) {
    HEMO_CHECK(int64_t(targets.size()) == prob.size(), "bce: target count mismatch");
    constexpr double kEps = 1e-7;
    auto out = make_node({1});
    out->op = "bce";
    const int64_t n = prob.size();
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double p = std::min(std::max(prob.val()[i], kEps), 1.0 - kEps);
        loss -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(1.0 - p);
    }
    out->val[0] = loss / double(n);
    if (tracking({&prob})) {
        out->needs_grad = true;
        out->prev = {prob.ptr()};
        Node* pn = prob.node();
        out->back = [pn, targets, n](Node& self) {
            ensure_grad(*pn);
            const double eps = 1e-7;
            const double g = self.grad[0] / double(n);
            for (int64_t i = 0; i < n; ++i) {
                const double raw = pn->val[i];
                if (raw <= eps || raw >= 1.0 - eps) continue;  // clamped region
                pn->grad[i] += g * (-targets[i] / raw + (1.0 - targets[i]) / (1.0 - raw));
            }
        };
    }
    return Var(out);
}

Var huber_sum(const Var& a, const Var& b, double delta) {
    return sum_all(huber_elem(sub(a, b), delta));
}

}  // namespace hemo::nn
