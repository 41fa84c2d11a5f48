#include "uhr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace uhr {

namespace {

constexpr double kLn2 = 0.6931471805599453094172321214581766;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

Tape* merged_tape(std::initializer_list<const Tensor*> ins) {
    Tape* tp = nullptr;
    for (const Tensor* t : ins) {
        if (!t->tracked()) continue;
        if (tp == nullptr) {
            tp = t->tape;
        } else if (tp != t->tape) {
            throw ContractError("operands belong to different tapes");
        }
    }
    return tp;
}

void require(bool cond, const char* msg) {
    if (!cond) throw ShapeError(msg);
}

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor");
    return (*data)[0];
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }

Tensor Tensor::full(Shape s, double v) {
    Tensor t;
    int64_t n = shape_numel(s);
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(n, v);
    return t;
}

Tensor Tensor::from(Shape s, std::vector<double> v) {
    if (shape_numel(s) != static_cast<int64_t>(v.size())) {
        throw ShapeError("from(): data length does not match shape " + shape_str(s));
    }
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<double>>(std::move(v));
    return t;
}

// ---- Tape -------------------------------------------------------------

Tensor Tape::watch(const Tensor& t) {
    Tensor out = t;
    out.tape = this;
    out.node = push(t.shape, {}, nullptr);
    return out;
}

int Tape::push(Shape shape, std::vector<int>, BackFn fn) {
    nodes_.push_back(Node{shape_numel(shape), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buf(int node) {
    if (grads_[node].empty()) grads_[node].assign(nodes_[node].numel, 0.0);
    return grads_[node];
}

void Tape::backward(const Tensor& root) {
    if (ran_) throw ContractError("backward() may run once per tape");
    if (!root.tracked() || root.tape != this) {
        throw ContractError("backward() root is not tracked on this tape");
    }
    if (root.numel() != 1) throw ShapeError("backward() root must be scalar");
    grads_.assign(nodes_.size(), {});
    grad_buf(root.node)[0] = 1.0;
    for (int i = root.node; i >= 0; --i) {
        if (!grads_[i].empty() && nodes_[i].fn) nodes_[i].fn(*this, grads_[i]);
    }
    ran_ = true;
}

std::vector<double> Tape::grad(const Tensor& t) const {
    if (!ran_) throw ContractError("grad() queried before backward()");
    if (!t.tracked() || t.tape != this) throw ContractError("grad(): tensor not on this tape");
    if (grads_[t.node].empty()) return std::vector<double>(t.numel(), 0.0);
    return grads_[t.node];
}

// ---- helpers for op construction ---------------------------------------

namespace {

Tensor make_op_result(Shape shape, std::vector<double> vals, const char* op, Tape* tp,
                      std::vector<int> parents, Tape::BackFn fn) {
    check_finite(vals, op);
    Tensor out = Tensor::from(std::move(shape), std::move(vals));
    if (tp != nullptr) {
        out.tape = tp;
        out.node = tp->push(out.shape, std::move(parents), std::move(fn));
    }
    return out;
}

}  // namespace

// ---- matmul -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D operands");
    if (a.shape[1] != b.shape[0]) {
        throw ShapeError("matmul inner dims differ: " + shape_str(a.shape) + " x " +
                         shape_str(b.shape));
    }
    const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
    std::vector<double> c(static_cast<size_t>(n) * m, 0.0);
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    for (int i = 0; i < n; ++i) {
        double* crow = &c[static_cast<size_t>(i) * m];
        for (int p = 0; p < k; ++p) {
            const double av = ad[static_cast<size_t>(i) * k + p];
            const double* brow = &bd[static_cast<size_t>(p) * m];
            for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }

    Tape* tp = merged_tape({&a, &b});
    if (!tp) return make_op_result({n, m}, std::move(c), "matmul", nullptr, {}, nullptr);

    int pa = a.tracked() ? a.node : -1;
    int pb = b.tracked() ? b.node : -1;
    auto ad_s = a.data;
    auto bd_s = b.data;
    auto fn = [pa, pb, ad_s, bd_s, n, k, m](Tape& t, const std::vector<double>& g) {
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            const double* bp = bd_s->data();
            for (int i = 0; i < n; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * m];
                for (int p = 0; p < k; ++p) {
                    const double* brow = &bp[static_cast<size_t>(p) * m];
                    double acc = 0.0;
                    for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    ga[static_cast<size_t>(i) * k + p] += acc;
                }
            }
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            const double* ap = ad_s->data();
            for (int i = 0; i < n; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * m];
                for (int p = 0; p < k; ++p) {
                    const double av = ap[static_cast<size_t>(i) * k + p];
                    double* gbrow = &gb[static_cast<size_t>(p) * m];
                    for (int j = 0; j < m; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    };
    return make_op_result({n, m}, std::move(c), "matmul", tp, {pa, pb}, std::move(fn));
}

// ---- softmax --------------------------------------------------------------

Tensor softmax_over_axis(const Tensor& z, int axis) {
    if (axis < 0 || axis >= z.rank()) throw ShapeError("softmax axis out of range");
    const int len = z.shape[axis];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= z.shape[i];
    for (int i = axis + 1; i < z.rank(); ++i) inner *= z.shape[i];

    std::vector<double> y(z.numel());
    const double* zd = z.ptr();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            double mx = zd[base];
            for (int i = 1; i < len; ++i) mx = std::max(mx, zd[base + i * inner]);
            double sum = 0.0;
            for (int i = 0; i < len; ++i) {
                double e = std::exp(zd[base + i * inner] - mx);
                y[base + i * inner] = e;
                sum += e;
            }
            for (int i = 0; i < len; ++i) y[base + i * inner] /= sum;
        }
    }

    Tape* tp = merged_tape({&z});
    if (!tp) return make_op_result(z.shape, std::move(y), "softmax", nullptr, {}, nullptr);

    Tensor out = make_op_result(z.shape, std::move(y), "softmax", nullptr, {}, nullptr);
    auto yd = out.data;
    int pz = z.node;
    auto fn = [pz, yd, outer, inner, len](Tape& t, const std::vector<double>& g) {
        auto& gz = t.grad_buf(pz);
        const double* yp = yd->data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double dot = 0.0;
                for (int i = 0; i < len; ++i) dot += g[base + i * inner] * yp[base + i * inner];
                for (int i = 0; i < len; ++i) {
                    const int64_t ix = base + i * inner;
                    gz[ix] += yp[ix] * (g[ix] - dot);
                }
            }
        }
    };
    out.tape = tp;
    out.node = tp->push(out.shape, {pz}, std::move(fn));
    return out;
}

// ---- conv2d ---------------------------------------------------------------

static Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int dilation) {
    require(x.rank() == 3 && w.rank() == 4, "conv2d expects x[C,H,W], w[Co,Ci,k,k]");
    const int ci = x.shape[0], h = x.shape[1], wd = x.shape[2];
    const int co = w.shape[0], k = w.shape[2];
    if (w.shape[1] != ci) throw ShapeError("conv2d channel mismatch");
    if (w.shape[2] != w.shape[3]) throw ShapeError("conv2d kernel must be square");
    if (k % 2 == 0) throw ConfigError("conv2d kernel size must be odd for same padding");
    if (dilation < 1) throw ConfigError("conv2d dilation must be >= 1");
    if (bias && (bias->rank() != 1 || bias->shape[0] != co)) {
        throw ShapeError("conv2d bias must be [Cout]");
    }
    const int pad = dilation * (k - 1) / 2;
    const int64_t plane = static_cast<int64_t>(h) * wd;

    std::vector<double> out(static_cast<size_t>(co) * plane, 0.0);
    if (bias) {
        const double* bp = bias->ptr();
        for (int oc = 0; oc < co; ++oc) {
            std::fill(out.begin() + oc * plane, out.begin() + (oc + 1) * plane, bp[oc]);
        }
    }
    const double* xd = x.ptr();
    const double* wdt = w.ptr();
    for (int oc = 0; oc < co; ++oc) {
        for (int ic = 0; ic < ci; ++ic) {
            const double* xplane = xd + static_cast<int64_t>(ic) * plane;
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const double wv =
                        wdt[((static_cast<int64_t>(oc) * ci + ic) * k + ky) * k + kx];
                    if (wv == 0.0) continue;
                    const int dy = ky * dilation - pad, dx = kx * dilation - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                    for (int y = y0; y < y1; ++y) {
                        const double* xrow = xplane + static_cast<int64_t>(y + dy) * wd + x0 + dx;
                        double* orow = &out[oc * plane + static_cast<int64_t>(y) * wd + x0];
                        for (int i = 0; i < x1 - x0; ++i) orow[i] += wv * xrow[i];
                    }
                }
            }
        }
    }

    Tape* tp = bias ? merged_tape({&x, &w, bias}) : merged_tape({&x, &w});
    if (!tp) return make_op_result({co, h, wd}, std::move(out), "conv2d", nullptr, {}, nullptr);

    const int px = x.tracked() ? x.node : -1;
    const int pw = w.tracked() ? w.node : -1;
    const int pb = (bias && bias->tracked()) ? bias->node : -1;
    auto xs = x.data;
    auto ws = w.data;
    auto fn = [=](Tape& t, const std::vector<double>& g) {
        if (px >= 0) {
            auto& gx = t.grad_buf(px);
            const double* wp = ws->data();
            for (int oc = 0; oc < co; ++oc) {
                for (int ic = 0; ic < ci; ++ic) {
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const double wv =
                                wp[((static_cast<int64_t>(oc) * ci + ic) * k + ky) * k + kx];
                            if (wv == 0.0) continue;
                            const int dy = ky * dilation - pad, dx = kx * dilation - pad;
                            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                            for (int y = y0; y < y1; ++y) {
                                double* gxrow =
                                    &gx[ic * plane + static_cast<int64_t>(y + dy) * wd + x0 + dx];
                                const double* grow =
                                    &g[oc * plane + static_cast<int64_t>(y) * wd + x0];
                                for (int i = 0; i < x1 - x0; ++i) gxrow[i] += wv * grow[i];
                            }
                        }
                    }
                }
            }
        }
        if (pw >= 0) {
            auto& gw = t.grad_buf(pw);
            const double* xp = xs->data();
            for (int oc = 0; oc < co; ++oc) {
                for (int ic = 0; ic < ci; ++ic) {
                    const double* xplane = xp + static_cast<int64_t>(ic) * plane;
                    for (int ky = 0; ky < k; ++ky) {
                        for (int kx = 0; kx < k; ++kx) {
                            const int dy = ky * dilation - pad, dx = kx * dilation - pad;
                            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                            const int x0 = std::max(0, -dx), x1 = std::min(wd, wd - dx);
                            double acc = 0.0;
                            for (int y = y0; y < y1; ++y) {
                                const double* xrow =
                                    xplane + static_cast<int64_t>(y + dy) * wd + x0 + dx;
                                const double* grow =
                                    &g[oc * plane + static_cast<int64_t>(y) * wd + x0];
                                for (int i = 0; i < x1 - x0; ++i) acc += xrow[i] * grow[i];
                            }
                            gw[((static_cast<int64_t>(oc) * ci + ic) * k + ky) * k + kx] += acc;
                        }
                    }
                }
            }
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (int oc = 0; oc < co; ++oc) {
                double acc = 0.0;
                const double* grow = &g[oc * plane];
                for (int64_t i = 0; i < plane; ++i) acc += grow[i];
                gb[oc] += acc;
            }
        }
    };
    return make_op_result({co, h, wd}, std::move(out), "conv2d", tp, {px, pw, pb}, std::move(fn));
}

Tensor conv2d(const Tensor& x, const Tensor& w, int dilation) {
    return conv2d_impl(x, w, nullptr, dilation);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int dilation) {
    return conv2d_impl(x, w, &bias, dilation);
}

// ---- binary elementwise -----------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul, Div };

// Identical shapes, or either side a single-element tensor.
Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape != b.shape) {
        throw ShapeError(std::string(name) + ": shapes " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape) + " (broadcast allows scalars only)");
    }
    const Shape& shape = a_scalar ? b.shape : a.shape;
    const int64_t n = std::max(a.numel(), b.numel());
    std::vector<double> out(n);
    const double* ad = a.ptr();
    const double* bd = b.ptr();
    for (int64_t i = 0; i < n; ++i) {
        const double av = ad[a_scalar ? 0 : i];
        const double bv = bd[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: out[i] = av + bv; break;
            case BinKind::Sub: out[i] = av - bv; break;
            case BinKind::Mul: out[i] = av * bv; break;
            case BinKind::Div: out[i] = av / bv; break;
        }
    }

    Tape* tp = merged_tape({&a, &b});
    if (!tp) return make_op_result(shape, std::move(out), name, nullptr, {}, nullptr);

    const int pa = a.tracked() ? a.node : -1;
    const int pb = b.tracked() ? b.node : -1;
    auto as = a.data;
    auto bs = b.data;
    auto fn = [=](Tape& t, const std::vector<double>& g) {
        const double* ad2 = as->data();
        const double* bd2 = bs->data();
        if (pa >= 0) {
            auto& ga = t.grad_buf(pa);
            for (int64_t i = 0; i < n; ++i) {
                double gi = g[i];
                switch (kind) {
                    case BinKind::Add:
                    case BinKind::Sub: break;
                    case BinKind::Mul: gi *= bd2[b_scalar ? 0 : i]; break;
                    case BinKind::Div: gi /= bd2[b_scalar ? 0 : i]; break;
                }
                ga[a_scalar ? 0 : i] += gi;
            }
        }
        if (pb >= 0) {
            auto& gb = t.grad_buf(pb);
            for (int64_t i = 0; i < n; ++i) {
                double gi = g[i];
                const double bv = bd2[b_scalar ? 0 : i];
                switch (kind) {
                    case BinKind::Add: break;
                    case BinKind::Sub: gi = -gi; break;
                    case BinKind::Mul: gi *= ad2[a_scalar ? 0 : i]; break;
                    case BinKind::Div: gi = -gi * ad2[a_scalar ? 0 : i] / (bv * bv); break;
                }
                gb[b_scalar ? 0 : i] += gi;
            }
        }
    };
    return make_op_result(shape, std::move(out), name, tp, {pa, pb}, std::move(fn));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Div, "div"); }

// ---- unary elementwise ------------------------------------------------------

namespace {

// dy is evaluated from (x, y) pairs; keeps each op a one-liner below.
Tensor unary_op(const Tensor& x, const char* name, const std::function<double(double)>& f,
                const std::function<double(double x, double y)>& df) {
    std::vector<double> out(x.numel());
    const double* xd = x.ptr();
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = f(xd[i]);

    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result(x.shape, std::move(out), name, nullptr, {}, nullptr);

    Tensor result = make_op_result(x.shape, std::move(out), name, nullptr, {}, nullptr);
    auto xs = x.data;
    auto ys = result.data;
    const int px = x.node;
    auto fn = [px, xs, ys, df](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        const double* xp = xs->data();
        const double* yp = ys->data();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xp[i], yp[i]);
    };
    result.tape = tp;
    result.node = tp->push(result.shape, {px}, std::move(fn));
    return result;
}

}  // namespace

Tensor add(const Tensor& a, double b) {
    return unary_op(a, "add_scalar", [b](double x) { return x + b; },
                    [](double, double) { return 1.0; });
}

Tensor sub(double a, const Tensor& b) {
    return unary_op(b, "sub_from_scalar", [a](double x) { return a - x; },
                    [](double, double) { return -1.0; });
}

Tensor scalar_mul(const Tensor& a, double s) {
    return unary_op(a, "scalar_mul", [s](double x) { return x * s; },
                    [s](double, double) { return s; });
}

Tensor exp(const Tensor& x) {
    return unary_op(x, "exp", [](double v) { return std::exp(v); },
                    [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& x) {
    return unary_op(x, "sqrt", [](double v) { return std::sqrt(v); },
                    [](double, double y) { return 0.5 / y; });
}

Tensor log_eps(const Tensor& x, double eps) {
    return unary_op(x, "log_eps", [eps](double v) { return std::log(v + eps); },
                    [eps](double v, double) { return 1.0 / (v + eps); });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(x, "sigmoid",
                    [](double v) {
                        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                        const double e = std::exp(v);
                        return e / (1.0 + e);
                    },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
    return unary_op(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                    [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor power_of_two(const Tensor& x) { return uhr::exp(scalar_mul(x, kLn2)); }

Tensor clamp_min(const Tensor& x, double lo) {
    return unary_op(x, "clamp_min", [lo](double v) { return v < lo ? lo : v; },
                    [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary_op(x, "clamp",
                    [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
                    [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---- concat / reductions ----------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
    Shape shape = parts[0].shape;
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != axis && p.shape[i] != shape[i]) throw ShapeError("concat dim mismatch");
        }
        total += p.shape[axis];
    }
    shape[axis] = total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[i];

    std::vector<double> out(shape_numel(shape));
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t len = p.shape[axis] * inner;
        const double* pd = p.ptr();
        for (int64_t o = 0; o < outer; ++o) {
            std::memcpy(&out[o * total * inner + off], &pd[o * len],
                        static_cast<size_t>(len) * sizeof(double));
        }
        off += len;
    }

    std::initializer_list<const Tensor*> dummy = {};
    Tape* tp = nullptr;
    for (const Tensor& p : parts) {
        if (p.tracked()) {
            if (tp && tp != p.tape) throw ContractError("concat across tapes");
            tp = p.tape;
        }
    }
    (void)dummy;
    if (!tp) return make_op_result(shape, std::move(out), "concat", nullptr, {}, nullptr);

    struct Piece {
        int node;
        int64_t len, off;
    };
    std::vector<Piece> pieces;
    off = 0;
    for (const Tensor& p : parts) {
        const int64_t len = p.shape[axis] * inner;
        pieces.push_back({p.tracked() ? p.node : -1, len, off});
        off += len;
    }
    auto fn = [pieces, outer, total, inner](Tape& t, const std::vector<double>& g) {
        for (const Piece& pc : pieces) {
            if (pc.node < 0) continue;
            auto& gp = t.grad_buf(pc.node);
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = &g[o * total * inner + pc.off];
                double* dst = &gp[o * pc.len];
                for (int64_t i = 0; i < pc.len; ++i) dst[i] += src[i];
            }
        }
    };
    return make_op_result(shape, std::move(out), "concat", tp, {}, std::move(fn));
}

namespace {

Tensor reduce_impl(const Tensor& x, int axis, bool mean, const char* name) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("reduce axis out of range");
    const int len = x.shape[axis];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape[i];
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];

    Shape shape;
    for (int i = 0; i < x.rank(); ++i) {
        if (i != axis) shape.push_back(x.shape[i]);
    }
    if (shape.empty()) shape = {1};

    const double scale = mean ? 1.0 / len : 1.0;
    std::vector<double> out(outer * inner, 0.0);
    const double* xd = x.ptr();
    for (int64_t o = 0; o < outer; ++o) {
        for (int i = 0; i < len; ++i) {
            const double* row = &xd[(o * len + i) * inner];
            double* orow = &out[o * inner];
            for (int64_t in = 0; in < inner; ++in) orow[in] += row[in];
        }
    }
    if (mean) {
        for (double& v : out) v *= scale;
    }

    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result(shape, std::move(out), name, nullptr, {}, nullptr);

    const int px = x.node;
    auto fn = [px, outer, inner, len, scale](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        for (int64_t o = 0; o < outer; ++o) {
            for (int i = 0; i < len; ++i) {
                double* grow = &gx[(o * len + i) * inner];
                const double* srow = &g[o * inner];
                for (int64_t in = 0; in < inner; ++in) grow[in] += srow[in] * scale;
            }
        }
    };
    return make_op_result(shape, std::move(out), name, tp, {px}, std::move(fn));
}

}  // namespace

Tensor reduce_sum(const Tensor& x, int axis) { return reduce_impl(x, axis, false, "reduce_sum"); }
Tensor reduce_mean(const Tensor& x, int axis) { return reduce_impl(x, axis, true, "reduce_mean"); }

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result({1}, {acc}, "sum_all", nullptr, {}, nullptr);
    const int px = x.node;
    const int64_t n = x.numel();
    auto fn = [px, n](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
    };
    return make_op_result({1}, {acc}, "sum_all", tp, {px}, std::move(fn));
}

Tensor mean_all(const Tensor& x) { return scalar_mul(sum_all(x), 1.0 / x.numel()); }

// ---- shape ops ---------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape s) {
    if (shape_numel(s) != x.numel()) {
        throw ShapeError("reshape " + shape_str(x.shape) + " -> " + shape_str(s));
    }
    Tensor out;
    out.shape = std::move(s);
    out.data = x.data;  // immutable, safe to alias
    Tape* tp = merged_tape({&x});
    if (tp) {
        const int px = x.node;
        out.tape = tp;
        out.node = tp->push(out.shape, {px}, [px](Tape& t, const std::vector<double>& g) {
            auto& gx = t.grad_buf(px);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor transpose(const Tensor& x) {
    require(x.rank() == 2, "transpose expects a 2-D tensor");
    const int n = x.shape[0], m = x.shape[1];
    std::vector<double> out(x.numel());
    const double* xd = x.ptr();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = xd[static_cast<size_t>(i) * m + j];
    }
    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result({m, n}, std::move(out), "transpose", nullptr, {}, nullptr);
    const int px = x.node;
    auto fn = [px, n, m](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        for (int j = 0; j < m; ++j) {
            for (int i = 0; i < n; ++i) gx[static_cast<size_t>(i) * m + j] += g[static_cast<size_t>(j) * n + i];
        }
    };
    return make_op_result({m, n}, std::move(out), "transpose", tp, {px}, std::move(fn));
}

// ---- resizing ------------------------------------------------------------------

namespace {

struct ResizeDims {
    int c, h, w;
    bool had_channel;
};

ResizeDims resize_dims(const Tensor& x) {
    if (x.rank() == 2) return {1, x.shape[0], x.shape[1], false};
    if (x.rank() == 3) return {x.shape[0], x.shape[1], x.shape[2], true};
    throw ShapeError("resize expects [H,W] or [C,H,W]");
}

inline double lerp(double a, double b, double t) { return a + t * (b - a); }

}  // namespace

// align-corners=false: output pixel centers map to (o+0.5)*scale-0.5 in input
// pixel coordinates. The nested-lerp form keeps results inside the hull of
// the four taps, so [0,1] inputs stay in [0,1] exactly.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
    const ResizeDims d = resize_dims(x);
    if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be >= 1x1");
    if (out_h == d.h && out_w == d.w) {
        Shape s = x.shape;
        return reshape(x, s);  // identity, bit-exact
    }
    const double sy = static_cast<double>(d.h) / out_h;
    const double sx = static_cast<double>(d.w) / out_w;
    const int64_t oplane = static_cast<int64_t>(out_h) * out_w;
    const int64_t iplane = static_cast<int64_t>(d.h) * d.w;

    // Precompute per-row/col taps.
    std::vector<int> y0(out_h), y1(out_h);
    std::vector<double> ty(out_h);
    for (int oy = 0; oy < out_h; ++oy) {
        double src = (oy + 0.5) * sy - 0.5;
        int b = static_cast<int>(std::floor(src));
        ty[oy] = src - b;
        y0[oy] = std::clamp(b, 0, d.h - 1);
        y1[oy] = std::clamp(b + 1, 0, d.h - 1);
    }
    std::vector<int> x0(out_w), x1(out_w);
    std::vector<double> tx(out_w);
    for (int ox = 0; ox < out_w; ++ox) {
        double src = (ox + 0.5) * sx - 0.5;
        int b = static_cast<int>(std::floor(src));
        tx[ox] = src - b;
        x0[ox] = std::clamp(b, 0, d.w - 1);
        x1[ox] = std::clamp(b + 1, 0, d.w - 1);
    }

    std::vector<double> out(static_cast<size_t>(d.c) * oplane);
    const double* xd = x.ptr();
    for (int c = 0; c < d.c; ++c) {
        const double* plane = xd + c * iplane;
        for (int oy = 0; oy < out_h; ++oy) {
            const double* r0 = plane + static_cast<int64_t>(y0[oy]) * d.w;
            const double* r1 = plane + static_cast<int64_t>(y1[oy]) * d.w;
            double* orow = &out[c * oplane + static_cast<int64_t>(oy) * out_w];
            for (int ox = 0; ox < out_w; ++ox) {
                const double top = lerp(r0[x0[ox]], r0[x1[ox]], tx[ox]);
                const double bot = lerp(r1[x0[ox]], r1[x1[ox]], tx[ox]);
                orow[ox] = lerp(top, bot, ty[oy]);
            }
        }
    }

    Shape oshape = d.had_channel ? Shape{d.c, out_h, out_w} : Shape{out_h, out_w};
    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result(oshape, std::move(out), "bilinear_resize", nullptr, {}, nullptr);

    const int px = x.node;
    const int c_n = d.c, ih = d.h, iw = d.w;
    auto fn = [=](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        const int64_t ipl = static_cast<int64_t>(ih) * iw;
        for (int c = 0; c < c_n; ++c) {
            for (int oy = 0; oy < out_h; ++oy) {
                const double wy1 = ty[oy], wy0 = 1.0 - ty[oy];
                for (int ox = 0; ox < out_w; ++ox) {
                    const double gv = g[c * oplane + static_cast<int64_t>(oy) * out_w + ox];
                    if (gv == 0.0) continue;
                    const double wx1 = tx[ox], wx0 = 1.0 - tx[ox];
                    gx[c * ipl + static_cast<int64_t>(y0[oy]) * iw + x0[ox]] += gv * wy0 * wx0;
                    gx[c * ipl + static_cast<int64_t>(y0[oy]) * iw + x1[ox]] += gv * wy0 * wx1;
                    gx[c * ipl + static_cast<int64_t>(y1[oy]) * iw + x0[ox]] += gv * wy1 * wx0;
                    gx[c * ipl + static_cast<int64_t>(y1[oy]) * iw + x1[ox]] += gv * wy1 * wx1;
                }
            }
        }
    };
    return make_op_result(oshape, std::move(out), "bilinear_resize", tp, {px}, std::move(fn));
}

Tensor nearest_resize(const Tensor& x, int out_h, int out_w) {
    const ResizeDims d = resize_dims(x);
    if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be >= 1x1");
    const double sy = static_cast<double>(d.h) / out_h;
    const double sx = static_cast<double>(d.w) / out_w;
    std::vector<int> ys(out_h), xs(out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        ys[oy] = std::clamp(static_cast<int>(std::floor((oy + 0.5) * sy)), 0, d.h - 1);
    }
    for (int ox = 0; ox < out_w; ++ox) {
        xs[ox] = std::clamp(static_cast<int>(std::floor((ox + 0.5) * sx)), 0, d.w - 1);
    }
    const int64_t oplane = static_cast<int64_t>(out_h) * out_w;
    const int64_t iplane = static_cast<int64_t>(d.h) * d.w;
    std::vector<double> out(static_cast<size_t>(d.c) * oplane);
    const double* xd = x.ptr();
    for (int c = 0; c < d.c; ++c) {
        for (int oy = 0; oy < out_h; ++oy) {
            const double* irow = xd + c * iplane + static_cast<int64_t>(ys[oy]) * d.w;
            double* orow = &out[c * oplane + static_cast<int64_t>(oy) * out_w];
            for (int ox = 0; ox < out_w; ++ox) orow[ox] = irow[xs[ox]];
        }
    }
    Shape oshape = d.had_channel ? Shape{d.c, out_h, out_w} : Shape{out_h, out_w};
    Tape* tp = merged_tape({&x});
    if (!tp) return make_op_result(oshape, std::move(out), "nearest_resize", nullptr, {}, nullptr);
    const int px = x.node;
    const int c_n = d.c, iw = d.w, ih = d.h;
    auto fn = [=](Tape& t, const std::vector<double>& g) {
        auto& gx = t.grad_buf(px);
        const int64_t ipl = static_cast<int64_t>(ih) * iw;
        for (int c = 0; c < c_n; ++c) {
            for (int oy = 0; oy < out_h; ++oy) {
                for (int ox = 0; ox < out_w; ++ox) {
                    gx[c * ipl + static_cast<int64_t>(ys[oy]) * iw + xs[ox]] +=
                        g[c * oplane + static_cast<int64_t>(oy) * out_w + ox];
                }
            }
        }
    };
    return make_op_result(oshape, std::move(out), "nearest_resize", tp, {px}, std::move(fn));
}

Tensor detach(const Tensor& x) {
    Tensor out;
    out.shape = x.shape;
    out.data = x.data;
    return out;
}

// ---- grad_check -----------------------------------------------------------------

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double h) {
    Tape tape;
    Tensor xt = tape.watch(x);
    Tensor y = f(tape, xt);
    if (y.numel() != 1) throw ContractError("grad_check objective must be scalar");
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite objective");
    tape.backward(y);
    const std::vector<double> analytic = tape.grad(xt);

    auto eval = [&](const Tensor& probe) {
        Tape t;
        Tensor v = f(t, t.watch(probe));
        double r = v.item();
        if (!std::isfinite(r)) throw NumericError("grad_check: non-finite objective");
        return r;
    };

    double max_rel = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        std::vector<double> vals = x.values();
        vals[i] += h;
        Tensor xp = Tensor::from(x.shape, vals);
        vals[i] -= 2 * h;
        Tensor xm = Tensor::from(x.shape, std::move(vals));
        const double numeric = (eval(xp) - eval(xm)) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

// ---- UHRT -----------------------------------------------------------------------

void uhrt_write(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write("UHRT", 4);
    const uint32_t rank = static_cast<uint32_t>(t.rank());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : t.shape) {
        const uint32_t u = static_cast<uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&u), 4);
    }
    std::vector<float> vals(t.numel());
    for (int64_t i = 0; i < t.numel(); ++i) vals[i] = static_cast<float>(t.at(static_cast<int>(i)));
    f.write(reinterpret_cast<const char*>(vals.data()), vals.size() * sizeof(float));
    if (!f) throw IoError("short write: " + path);
}

Tensor uhrt_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "UHRT", 4) != 0) {
        throw ParseError(path + ": bad magic at byte 0");
    }
    uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || rank > 8) throw ParseError(path + ": bad rank at byte 4");
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t d = 0;
        f.read(reinterpret_cast<char*>(&d), 4);
        if (!f || d == 0) throw ParseError(path + ": bad dim at byte " + std::to_string(8 + 4 * i));
        shape[i] = static_cast<int>(d);
    }
    std::vector<float> vals(shape_numel(shape));
    f.read(reinterpret_cast<char*>(vals.data()), vals.size() * sizeof(float));
    if (!f) throw ParseError(path + ": truncated data at byte " + std::to_string(8 + 4 * rank));
    std::vector<double> d(vals.begin(), vals.end());
    return Tensor::from(std::move(shape), std::move(d));
}

}  // namespace uhr
