#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

#include "tensor.hpp"

namespace entran::ad {

namespace detail {

inline void check_same_shape(const char* op, const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

inline void check_scalar(const char* op, const TensorPtr& s) {
    if (s->size() != 1)
        throw ShapeError(std::string(op) + ": expected scalar, got " + shape_str(s->shape));
}

inline bool any_requires_grad(std::initializer_list<TensorPtr> ts) {
    for (const auto& t : ts)
        if (t->requires_grad) return true;
    return false;
}

inline std::uint64_t fnv1a(std::uint64_t h, std::uint64_t x) {
    h ^= x;
    return h * 0x100000001b3ULL;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("add", a, b);
    auto out = make_tensor(a->shape, detail::any_requires_grad({a, b}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
    tape.record("add", out, [a, b, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i) {
            double g = out->grad[i];
            if (a->requires_grad) a->grad[i] += g;
            if (b->requires_grad) b->grad[i] += g;
        }
    });
    return out;
}

inline TensorPtr add_n(Tape& tape, const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n: empty operand list");
    bool rg = false;
    for (const auto& x : xs) {
        detail::check_same_shape("add_n", xs[0], x);
        rg = rg || x->requires_grad;
    }
    auto out = make_tensor(xs[0]->shape, rg);
    for (const auto& x : xs)
        for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] += x->data[i];
    tape.record("add_n", out, [xs, out] {
        for (const auto& x : xs)
            if (x->requires_grad)
                for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

inline TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("sub", a, b);
    auto out = make_tensor(a->shape, detail::any_requires_grad({a, b}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] - b->data[i];
    tape.record("sub", out, [a, b, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i) {
            double g = out->grad[i];
            if (a->requires_grad) a->grad[i] += g;
            if (b->requires_grad) b->grad[i] -= g;
        }
    });
    return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
    detail::check_same_shape("mul", a, b);
    auto out = make_tensor(a->shape, detail::any_requires_grad({a, b}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
    tape.record("mul", out, [a, b, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i) {
            double g = out->grad[i];
            if (a->requires_grad) a->grad[i] += g * b->data[i];
            if (b->requires_grad) b->grad[i] += g * a->data[i];
        }
    });
    return out;
}

// x * s with s a scalar tensor (taped in both operands)
inline TensorPtr scale(Tape& tape, const TensorPtr& x, const TensorPtr& s) {
    detail::check_scalar("scale", s);
    double sv = s->data[0];
    auto out = make_tensor(x->shape, detail::any_requires_grad({x, s}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * sv;
    tape.record("scale", out, [x, s, out, sv] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i] * sv;
        if (s->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < out->data.size(); ++i) acc += out->grad[i] * x->data[i];
            s->grad[0] += acc;
        }
    });
    return out;
}

inline TensorPtr scale_const(Tape& tape, const TensorPtr& x, double c) {
    auto out = make_tensor(x->shape, x->requires_grad);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * c;
    tape.record("scale_const", out, [x, out, c] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i] * c;
    });
    return out;
}

// x_i - s, s scalar
inline TensorPtr sub_scalar(Tape& tape, const TensorPtr& x, const TensorPtr& s) {
    detail::check_scalar("sub_scalar", s);
    double sv = s->data[0];
    auto out = make_tensor(x->shape, detail::any_requires_grad({x, s}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] - sv;
    tape.record("sub_scalar", out, [x, s, out] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i];
        if (s->requires_grad) {
            double acc = 0.0;
            for (double g : out->grad) acc += g;
            s->grad[0] -= acc;
        }
    });
    return out;
}

// x_i / s, s scalar, s != 0
inline TensorPtr div_scalar(Tape& tape, const TensorPtr& x, const TensorPtr& s) {
    detail::check_scalar("div_scalar", s);
    double sv = s->data[0];
    if (sv == 0.0) throw std::domain_error("div_scalar: division by zero");
    auto out = make_tensor(x->shape, detail::any_requires_grad({x, s}));
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] / sv;
    tape.record("div_scalar", out, [x, s, out, sv] {
        if (x->requires_grad)
            for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i] / sv;
        if (s->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < out->data.size(); ++i) acc += out->grad[i] * x->data[i];
            s->grad[0] -= acc / (sv * sv);
        }
    });
    return out;
}

inline TensorPtr relu(Tape& tape, const TensorPtr& x) {
    auto out = make_tensor(x->shape, x->requires_grad);
    std::uint64_t sig = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        bool active = x->data[i] > 0.0;  // subgradient at 0 is 0
        out->data[i] = active ? x->data[i] : 0.0;
        sig = detail::fnv1a(sig, active ? i * 2 + 1 : i * 2);
    }
    tape.note_kink(sig);
    tape.record("relu", out, [x, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i)
            if (x->data[i] > 0.0) x->grad[i] += out->grad[i];
    });
    return out;
}

inline TensorPtr sigmoid(Tape& tape, const TensorPtr& x) {
    auto out = make_tensor(x->shape, x->requires_grad);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-x->data[i]));
    tape.record("sigmoid", out, [x, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i) {
            double y = out->data[i];
            x->grad[i] += out->grad[i] * y * (1.0 - y);
        }
    });
    return out;
}

inline TensorPtr log_op(Tape& tape, const TensorPtr& x) {
    auto out = make_tensor(x->shape, x->requires_grad);
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        if (x->data[i] <= 0.0)
            throw std::domain_error("log: non-positive input " + std::to_string(x->data[i]) + " at index " +
                                    std::to_string(i));
        out->data[i] = std::log(x->data[i]);
    }
    tape.record("log", out, [x, out] {
        for (std::size_t i = 0; i < out->data.size(); ++i) x->grad[i] += out->grad[i] / x->data[i];
    });
    return out;
}

// softmax(x / tau) over a 1-D tensor
inline TensorPtr softmax_t(Tape& tape, const TensorPtr& x, double tau) {
    if (tau <= 0.0) throw std::invalid_argument("softmax_t: temperature must be positive, got " + std::to_string(tau));
    if (x->shape.size() != 1) throw ShapeError("softmax_t: expected 1-D tensor, got " + shape_str(x->shape));
    auto out = make_tensor(x->shape, x->requires_grad);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x->data) mx = std::max(mx, v / tau);
    double z = 0.0;
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        out->data[i] = std::exp(x->data[i] / tau - mx);
        z += out->data[i];
    }
    for (auto& v : out->data) v /= z;
    tape.record("softmax_t", out, [x, out, tau] {
        double dot = 0.0;
        for (std::size_t i = 0; i < out->data.size(); ++i) dot += out->grad[i] * out->data[i];
        for (std::size_t i = 0; i < out->data.size(); ++i)
            x->grad[i] += out->data[i] * (out->grad[i] - dot) / tau;
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum(Tape& tape, const TensorPtr& x) {
    auto out = make_tensor({1}, x->requires_grad);
    for (double v : x->data) out->data[0] += v;
    tape.record("sum", out, [x, out] {
        double g = out->grad[0];
        for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += g;
    });
    return out;
}

inline TensorPtr mean(Tape& tape, const TensorPtr& x) {
    if (x->data.empty()) throw ShapeError("mean: empty tensor");
    auto out = make_tensor({1}, x->requires_grad);
    for (double v : x->data) out->data[0] += v;
    double n = double(x->data.size());
    out->data[0] /= n;
    tape.record("mean", out, [x, out, n] {
        double g = out->grad[0] / n;
        for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += g;
    });
    return out;
}

// max over all entries; gradient routes to the first (lowest-index) arg-max
inline TensorPtr max_all(Tape& tape, const TensorPtr& x) {
    if (x->data.empty()) throw ShapeError("max_all: empty tensor");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x->data.size(); ++i)
        if (x->data[i] > x->data[arg]) arg = i;
    auto out = make_tensor({1}, x->requires_grad);
    out->data[0] = x->data[arg];
    tape.note_kink(detail::fnv1a(0x2000, arg));
    tape.record("max_all", out, [x, out, arg] { x->grad[arg] += out->grad[0]; });
    return out;
}

// ---------------------------------------------------------------------------
// indexing / assembly
// ---------------------------------------------------------------------------

inline TensorPtr concat(Tape& tape, const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: empty operand list");
    bool rg = false;
    std::int64_t total = 0;
    for (const auto& x : xs) {
        if (x->shape.size() != 1) throw ShapeError("concat: expected 1-D tensors, got " + shape_str(x->shape));
        total += x->size();
        rg = rg || x->requires_grad;
    }
    auto out = make_tensor({int(total)}, rg);
    std::size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->data.begin(), x->data.end(), out->data.begin() + off);
        off += x->data.size();
    }
    tape.record("concat", out, [xs, out] {
        std::size_t off = 0;
        for (const auto& x : xs) {
            if (x->requires_grad)
                for (std::size_t i = 0; i < x->data.size(); ++i) x->grad[i] += out->grad[off + i];
            off += x->data.size();
        }
    });
    return out;
}

inline TensorPtr slice_row(Tape& tape, const TensorPtr& m, int row) {
    if (m->shape.size() != 2) throw ShapeError("slice_row: expected 2-D tensor, got " + shape_str(m->shape));
    int rows = m->shape[0], cols = m->shape[1];
    if (row < 0 || row >= rows)
        throw ShapeError("slice_row: row " + std::to_string(row) + " out of range for " + shape_str(m->shape));
    auto out = make_tensor({cols}, m->requires_grad);
    std::copy(m->data.begin() + std::size_t(row) * cols, m->data.begin() + std::size_t(row + 1) * cols,
              out->data.begin());
    tape.record("slice_row", out, [m, out, row, cols] {
        for (int c = 0; c < cols; ++c) m->grad[std::size_t(row) * cols + c] += out->grad[c];
    });
    return out;
}

inline TensorPtr index(Tape& tape, const TensorPtr& v, int i) {
    if (i < 0 || std::int64_t(i) >= v->size())
        throw ShapeError("index: position " + std::to_string(i) + " out of range for " + shape_str(v->shape));
    auto out = make_tensor({1}, v->requires_grad);
    out->data[0] = v->data[std::size_t(i)];
    tape.record("index", out, [v, out, i] { v->grad[std::size_t(i)] += out->grad[0]; });
    return out;
}

inline TensorPtr zeros_like_shape(const std::vector<int>& shape) { return make_tensor(shape, false); }

// NCHW concatenation along channels
inline TensorPtr concat_channels(Tape& tape, const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty operand list");
    const auto& s0 = xs[0]->shape;
    if (s0.size() != 4) throw ShapeError("concat_channels: expected NCHW tensors, got " + shape_str(s0));
    int n = s0[0], h = s0[2], w = s0[3];
    int ctotal = 0;
    bool rg = false;
    for (const auto& x : xs) {
        if (x->shape.size() != 4 || x->shape[0] != n || x->shape[2] != h || x->shape[3] != w)
            throw ShapeError("concat_channels: incompatible shapes " + shape_str(s0) + " vs " + shape_str(x->shape));
        ctotal += x->shape[1];
        rg = rg || x->requires_grad;
    }
    auto out = make_tensor({n, ctotal, h, w}, rg);
    std::size_t plane = std::size_t(h) * w;
    for (int b = 0; b < n; ++b) {
        std::size_t coff = 0;
        for (const auto& x : xs) {
            std::size_t cx = std::size_t(x->shape[1]);
            std::copy(x->data.begin() + std::size_t(b) * cx * plane, x->data.begin() + std::size_t(b + 1) * cx * plane,
                      out->data.begin() + (std::size_t(b) * ctotal + coff) * plane);
            coff += cx;
        }
    }
    tape.record("concat_channels", out, [xs, out, n, ctotal, plane] {
        for (int b = 0; b < n; ++b) {
            std::size_t coff = 0;
            for (const auto& x : xs) {
                std::size_t cx = std::size_t(x->shape[1]);
                if (x->requires_grad) {
                    auto src = out->grad.begin() + (std::size_t(b) * ctotal + coff) * plane;
                    auto dst = x->grad.begin() + std::size_t(b) * cx * plane;
                    for (std::size_t i = 0; i < cx * plane; ++i) dst[i] += src[i];
                }
                coff += cx;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// neural-net layers
// ---------------------------------------------------------------------------

// (N,D) x (D,M) + (M,)
inline TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    if (x->shape.size() != 2 || w->shape.size() != 2 || b->shape.size() != 1 || x->shape[1] != w->shape[0] ||
        w->shape[1] != b->shape[0])
        throw ShapeError("linear: incompatible shapes x" + shape_str(x->shape) + " w" + shape_str(w->shape) + " b" +
                         shape_str(b->shape));
    int n = x->shape[0], d = x->shape[1], m = w->shape[1];
    auto out = make_tensor({n, m}, detail::any_requires_grad({x, w, b}));
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < m; ++c) {
            double acc = b->data[c];
            for (int k = 0; k < d; ++k) acc += x->data[std::size_t(r) * d + k] * w->data[std::size_t(k) * m + c];
            out->data[std::size_t(r) * m + c] = acc;
        }
    tape.record("linear", out, [x, w, b, out, n, d, m] {
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c) {
                double g = out->grad[std::size_t(r) * m + c];
                if (g == 0.0) continue;
                if (b->requires_grad) b->grad[c] += g;
                for (int k = 0; k < d; ++k) {
                    if (x->requires_grad) x->grad[std::size_t(r) * d + k] += g * w->data[std::size_t(k) * m + c];
                    if (w->requires_grad) w->grad[std::size_t(k) * m + c] += g * x->data[std::size_t(r) * d + k];
                }
            }
    });
    return out;
}

struct Conv2dAttrs {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
    int dilation = 1;
    int groups = 1;
};

// Direct convolution. x: (N, Cin, H, W), w: (Cout, Cin/groups, KH, KW).
inline TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const Conv2dAttrs& a) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw ShapeError("conv2d: expected 4-D tensors, got x" + shape_str(x->shape) + " w" + shape_str(w->shape));
    int n = x->shape[0], cin = x->shape[1], h = x->shape[2], ww = x->shape[3];
    int cout = w->shape[0], cing = w->shape[1], kh = w->shape[2], kw = w->shape[3];
    if (a.groups < 1 || cin % a.groups != 0 || cout % a.groups != 0 || cin / a.groups != cing)
        throw ShapeError("conv2d: channel/group mismatch, x" + shape_str(x->shape) + " w" + shape_str(w->shape) +
                         " groups=" + std::to_string(a.groups));
    int oh = (h + 2 * a.pad_h - a.dilation * (kh - 1) - 1) / a.stride_h + 1;
    int ow = (ww + 2 * a.pad_w - a.dilation * (kw - 1) - 1) / a.stride_w + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeError("conv2d: kernel " + shape_str(w->shape) + " does not fit input " + shape_str(x->shape) +
                         " with pad (" + std::to_string(a.pad_h) + "," + std::to_string(a.pad_w) + ")");
    auto out = make_tensor({n, cout, oh, ow}, detail::any_requires_grad({x, w}));
    int cpg_out = cout / a.groups;

    auto for_each_tap = [=](auto&& fn) {
        for (int b = 0; b < n; ++b)
            for (int oc = 0; oc < cout; ++oc) {
                int g = oc / cpg_out;
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        std::size_t oidx = ((std::size_t(b) * cout + oc) * oh + oy) * ow + ox;
                        for (int ic = 0; ic < cing; ++ic) {
                            int xc = g * cing + ic;
                            for (int ky = 0; ky < kh; ++ky) {
                                int iy = oy * a.stride_h - a.pad_h + ky * a.dilation;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    int ix = ox * a.stride_w - a.pad_w + kx * a.dilation;
                                    if (ix < 0 || ix >= ww) continue;
                                    std::size_t xidx = ((std::size_t(b) * cin + xc) * h + iy) * ww + ix;
                                    std::size_t widx = ((std::size_t(oc) * cing + ic) * kh + ky) * kw + kx;
                                    fn(oidx, xidx, widx);
                                }
                            }
                        }
                    }
            }
    };

    for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) { out->data[oi] += x->data[xi] * w->data[wi]; });
    tape.record("conv2d", out, [x, w, out, for_each_tap] {
        for_each_tap([&](std::size_t oi, std::size_t xi, std::size_t wi) {
            double g = out->grad[oi];
            if (x->requires_grad) x->grad[xi] += g * w->data[wi];
            if (w->requires_grad) w->grad[wi] += g * x->data[xi];
        });
    });
    return out;
}

inline TensorPtr max_pool2d(Tape& tape, const TensorPtr& x, int k, int stride, int pad) {
    if (x->shape.size() != 4) throw ShapeError("max_pool2d: expected NCHW tensor, got " + shape_str(x->shape));
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int oh = (h + 2 * pad - k) / stride + 1;
    int ow = (w + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeError("max_pool2d: window " + std::to_string(k) + " does not fit input " + shape_str(x->shape));
    auto out = make_tensor({n, c, oh, ow}, x->requires_grad);
    std::vector<std::int64_t> argmax(out->data.size(), -1);
    std::uint64_t sig = 0xcbf29ce484222325ULL;
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t bi = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            std::size_t xi = ((std::size_t(b) * c + ch) * h + iy) * w + ix;
                            if (x->data[xi] > best) {
                                best = x->data[xi];
                                bi = std::int64_t(xi);
                            }
                        }
                    }
                    std::size_t oi = ((std::size_t(b) * c + ch) * oh + oy) * ow + ox;
                    // windows fully inside padding cannot occur with pad < k
                    out->data[oi] = best;
                    argmax[oi] = bi;
                    sig = detail::fnv1a(sig, std::uint64_t(bi));
                }
    tape.note_kink(sig);
    tape.record("max_pool2d", out, [x, out, argmax] {
        for (std::size_t i = 0; i < out->data.size(); ++i)
            if (argmax[i] >= 0) x->grad[std::size_t(argmax[i])] += out->grad[i];
    });
    return out;
}

// fixed k*k divisor; zero padding counts toward the average
inline TensorPtr avg_pool2d(Tape& tape, const TensorPtr& x, int k, int stride, int pad) {
    if (x->shape.size() != 4) throw ShapeError("avg_pool2d: expected NCHW tensor, got " + shape_str(x->shape));
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int oh = (h + 2 * pad - k) / stride + 1;
    int ow = (w + 2 * pad - k) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not fit input " + shape_str(x->shape));
    auto out = make_tensor({n, c, oh, ow}, x->requires_grad);
    double inv = 1.0 / (k * k);
    auto for_each_tap = [=](auto&& fn) {
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        std::size_t oi = ((std::size_t(b) * c + ch) * oh + oy) * ow + ox;
                        for (int ky = 0; ky < k; ++ky) {
                            int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < k; ++kx) {
                                int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= w) continue;
                                fn(oi, ((std::size_t(b) * c + ch) * h + iy) * w + ix);
                            }
                        }
                    }
    };
    for_each_tap([&](std::size_t oi, std::size_t xi) { out->data[oi] += x->data[xi] * inv; });
    tape.record("avg_pool2d", out, [x, out, for_each_tap, inv] {
        for_each_tap([&](std::size_t oi, std::size_t xi) { x->grad[xi] += out->grad[oi] * inv; });
    });
    return out;
}

// parameter-free spatial halving: keeps every other pixel starting at (0,0)
inline TensorPtr subsample2(Tape& tape, const TensorPtr& x) {
    if (x->shape.size() != 4) throw ShapeError("subsample2: expected NCHW tensor, got " + shape_str(x->shape));
    int n = x->shape[0], c = x->shape[1], h = x->shape[2], w = x->shape[3];
    int oh = (h + 1) / 2, ow = (w + 1) / 2;
    auto out = make_tensor({n, c, oh, ow}, x->requires_grad);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox)
                    out->data[((std::size_t(b) * c + ch) * oh + oy) * ow + ox] =
                        x->data[((std::size_t(b) * c + ch) * h + 2 * oy) * w + 2 * ox];
    tape.record("subsample2", out, [x, out, n, c, h, w, oh, ow] {
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        x->grad[((std::size_t(b) * c + ch) * h + 2 * oy) * w + 2 * ox] +=
                            out->grad[((std::size_t(b) * c + ch) * oh + oy) * ow + ox];
    });
    return out;
}

// Per-sample RMS normalization over (C,H,W); keeps node magnitudes
// comparable between weighted-sum and unit-coefficient evaluation. The eps
// floor caps the gain on near-silent nodes (e.g. all connections on the zero
// op) at 1/sqrt(eps) instead of letting noise blow up.
inline TensorPtr rms_norm(Tape& tape, const TensorPtr& x, double eps = 1e-2) {
    if (x->shape.size() != 4) throw ShapeError("rms_norm: expected NCHW tensor, got " + shape_str(x->shape));
    int n = x->shape[0];
    std::size_t per = x->data.size() / std::size_t(n);
    auto out = make_tensor(x->shape, x->requires_grad);
    auto rms = std::make_shared<std::vector<double>>(std::size_t(n));
    for (int b = 0; b < n; ++b) {
        double sq = 0.0;
        for (std::size_t i = 0; i < per; ++i) {
            double v = x->data[std::size_t(b) * per + i];
            sq += v * v;
        }
        (*rms)[std::size_t(b)] = std::sqrt(sq / double(per) + eps);
        for (std::size_t i = 0; i < per; ++i)
            out->data[std::size_t(b) * per + i] = x->data[std::size_t(b) * per + i] / (*rms)[std::size_t(b)];
    }
    tape.record("rms_norm", out, [x, out, rms, n, per] {
        for (int b = 0; b < n; ++b) {
            double r = (*rms)[std::size_t(b)];
            double dot = 0.0;
            for (std::size_t i = 0; i < per; ++i)
                dot += out->grad[std::size_t(b) * per + i] * x->data[std::size_t(b) * per + i];
            for (std::size_t i = 0; i < per; ++i) {
                std::size_t idx = std::size_t(b) * per + i;
                x->grad[idx] += out->grad[idx] / r - x->data[idx] * dot / (double(per) * r * r * r);
            }
        }
    });
    return out;
}

// (N,C,H,W) -> (N,C)
inline TensorPtr global_avg_pool(Tape& tape, const TensorPtr& x) {
    if (x->shape.size() != 4) throw ShapeError("global_avg_pool: expected NCHW tensor, got " + shape_str(x->shape));
    int n = x->shape[0], c = x->shape[1];
    std::size_t plane = std::size_t(x->shape[2]) * x->shape[3];
    auto out = make_tensor({n, c}, x->requires_grad);
    for (int b = 0; b < n; ++b)
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += x->data[(std::size_t(b) * c + ch) * plane + i];
            out->data[std::size_t(b) * c + ch] = acc / double(plane);
        }
    tape.record("global_avg_pool", out, [x, out, n, c, plane] {
        for (int b = 0; b < n; ++b)
            for (int ch = 0; ch < c; ++ch) {
                double g = out->grad[std::size_t(b) * c + ch] / double(plane);
                for (std::size_t i = 0; i < plane; ++i) x->grad[(std::size_t(b) * c + ch) * plane + i] += g;
            }
    });
    return out;
}

// mean softmax cross-entropy over the batch; logits (N,M), integer labels
inline TensorPtr cross_entropy(Tape& tape, const TensorPtr& logits, const std::vector<int>& labels) {
    if (logits->shape.size() != 2) throw ShapeError("cross_entropy: expected (N,M) logits, got " + shape_str(logits->shape));
    int n = logits->shape[0], m = logits->shape[1];
    if (int(labels.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
    auto probs = std::make_shared<std::vector<double>>(logits->data.size());
    auto out = make_tensor({1}, logits->requires_grad);
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        if (labels[r] < 0 || labels[r] >= m)
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[r]) + " out of range for " +
                                    std::to_string(m) + " classes");
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < m; ++c) mx = std::max(mx, logits->data[std::size_t(r) * m + c]);
        double z = 0.0;
        for (int c = 0; c < m; ++c) z += std::exp(logits->data[std::size_t(r) * m + c] - mx);
        for (int c = 0; c < m; ++c) (*probs)[std::size_t(r) * m + c] = std::exp(logits->data[std::size_t(r) * m + c] - mx) / z;
        total += mx + std::log(z) - logits->data[std::size_t(r) * m + labels[r]];
    }
    out->data[0] = total / n;
    tape.record("cross_entropy", out, [logits, out, probs, labels, n, m] {
        double g = out->grad[0] / n;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < m; ++c)
                logits->grad[std::size_t(r) * m + c] +=
                    g * ((*probs)[std::size_t(r) * m + c] - (labels[r] == c ? 1.0 : 0.0));
    });
    return out;
}

}  // namespace entran::ad
