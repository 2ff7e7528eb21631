#include "vxda/ops.hpp"

#include <cmath>
#include <numeric>

#include "kernels.hpp"

namespace vxda {

namespace {

template <typename T>
std::vector<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = *self.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

template <typename T>
const std::vector<T>& parent_data(const Node<T>& self, std::size_t i) {
    return self.parents[i]->data;
}

enum class BinaryKind { add, sub, mul };

template <typename T>
BasicTensor<T> binary(BinaryKind kind, const BasicTensor<T>& a, const BasicTensor<T>& b, std::string_view name) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = !same && a.numel() == 1;
    const bool b_scalar = !same && b.numel() == 1;
    if (!same && !a_scalar && !b_scalar) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const auto n = static_cast<std::size_t>(numel(out_shape));
    const auto ad = a.data();
    const auto bd = b.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = ad[a_scalar ? 0 : i];
        const T y = bd[b_scalar ? 0 : i];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
        }
    }
    return make_op<T>(out_shape, std::move(out), name, {a, b}, [kind, a_scalar, b_scalar](Node<T>& self) {
        const auto& g = self.grad;
        const auto& ad = parent_data(self, 0);
        const auto& bd = parent_data(self, 1);
        const T sign_b = kind == BinaryKind::sub ? T(-1) : T(1);
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T local = kind == BinaryKind::mul ? bd[b_scalar ? 0 : i] : T(1);
                (*ga)[a_scalar ? 0 : i] += g[i] * local;
            }
        }
        if (auto* gb = parent_grad(self, 1)) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T local = kind == BinaryKind::mul ? ad[a_scalar ? 0 : i] : sign_b;
                (*gb)[b_scalar ? 0 : i] += g[i] * local;
            }
        }
    });
}

// Unary op whose derivative is expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(const BasicTensor<T>& a, std::string_view name, Fwd fwd, Deriv deriv) {
    const auto ad = a.data();
    std::vector<T> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = fwd(ad[i]);
    return make_op<T>(a.shape(), std::move(out), name, {a}, [deriv](Node<T>& self) {
        auto* ga = parent_grad(self, 0);
        if (!ga) return;
        const auto& x = parent_data(self, 0);
        for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * deriv(x[i], self.data[i]);
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        const T z = std::exp(-x);
        return T(1) / (T(1) + z);
    }
    const T z = std::exp(x);
    return z / (T(1) + z);
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(BinaryKind::add, a, b, "add");
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(BinaryKind::sub, a, b, "sub");
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary(BinaryKind::mul, a, b, "mul");
}

template <typename T>
BasicTensor<T> neg(const BasicTensor<T>& a) {
    return unary(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
    return unary(a, "relu", [](T x) { return x < T(0) ? T(0) : x; }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> elu(const BasicTensor<T>& a, double alpha) {
    const T al = static_cast<T>(alpha);
    return unary(
        a, "elu", [al](T x) { return x > T(0) ? x : al * std::expm1(x); },
        [al](T x, T y) { return x > T(0) ? T(1) : y + al; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
    return unary(a, "sigmoid", [](T x) { return stable_sigmoid(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
    return unary(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& a) {
    return unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
    const T f = static_cast<T>(factor);
    return unary(a, "scale", [f](T x) { return f * x; }, [f](T, T) { return f; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, double offset) {
    const T c = static_cast<T>(offset);
    return unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> elementwise(Elementwise kind, const BasicTensor<T>& a, const BasicTensor<T>* b) {
    auto need_b = [&]() -> const BasicTensor<T>& {
        if (!b) throw std::invalid_argument("binary elementwise op requires a second operand");
        return *b;
    };
    switch (kind) {
        case Elementwise::add: return add(a, need_b());
        case Elementwise::sub: return sub(a, need_b());
        case Elementwise::mul: return mul(a, need_b());
        case Elementwise::neg: return neg(a);
        case Elementwise::relu: return relu(a);
        case Elementwise::elu: return elu(a);
        case Elementwise::sigmoid: return sigmoid(a);
        case Elementwise::log: return log(a);
        case Elementwise::exp: return exp(a);
    }
    throw std::invalid_argument("unknown elementwise kind");
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
    }
    const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(n * m), T(0));
    kernels::gemm_nn(n, m, k, a.data().data(), b.data().data(), out.data());
    return make_op<T>({n, m}, std::move(out), "matmul", {a, b}, [n, k, m](Node<T>& self) {
        const auto& ad = parent_data(self, 0);
        const auto& bd = parent_data(self, 1);
        if (auto* ga = parent_grad(self, 0)) {
            // dA = G * B^T
            std::vector<T> bt(static_cast<std::size_t>(k * m));
            kernels::transpose(k, m, bd.data(), bt.data());
            kernels::gemm_nn(n, k, m, self.grad.data(), bt.data(), ga->data());
        }
        if (auto* gb = parent_grad(self, 1)) {
            // dB = A^T * G
            kernels::gemm_tn(k, m, n, ad.data(), self.grad.data(), gb->data());
        }
    });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(a.shape()));
    const auto r = a.dim(0), c = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(r * c));
    kernels::transpose(r, c, a.data().data(), out.data());
    return make_op<T>({c, r}, std::move(out), "transpose", {a}, [r, c](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) {
            std::vector<T> back(static_cast<std::size_t>(r * c));
            kernels::transpose(c, r, self.grad.data(), back.data());
            accumulate<T>(*ga, back);
        }
    });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    return make_op<T>(std::move(shape), std::move(out), "reshape", {a}, [](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) accumulate<T>(*ga, self.grad);
    });
}

template <typename T>
BasicTensor<T> expand(const BasicTensor<T>& a, Shape shape) {
    const auto& src = a.shape();
    if (src.size() != shape.size()) {
        throw ShapeError("expand: rank mismatch " + to_string(src) + " to " + to_string(shape));
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
        if (src[i] != shape[i] && src[i] != 1) {
            throw ShapeError("expand: cannot broadcast " + to_string(src) + " to " + to_string(shape));
        }
    }
    // Source offset for every output element, via broadcast strides.
    const auto rank = shape.size();
    std::vector<std::int64_t> sstride(rank, 0);
    std::int64_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
        sstride[i] = src[i] == 1 ? 0 : acc;
        acc *= src[i];
    }
    const auto n = numel(shape);
    auto index = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
    std::vector<std::int64_t> pos(rank, 0);
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t off = 0;
        for (std::size_t d = 0; d < rank; ++d) off += pos[d] * sstride[d];
        (*index)[static_cast<std::size_t>(i)] = off;
        for (std::size_t d = rank; d-- > 0;) {
            if (++pos[d] < shape[d]) break;
            pos[d] = 0;
        }
    }
    const auto ad = a.data();
    std::vector<T> out(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[static_cast<std::size_t>((*index)[i])];
    return make_op<T>(std::move(shape), std::move(out), "expand", {a}, [index](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[static_cast<std::size_t>((*index)[i])] += self.grad[i];
        }
    });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const auto& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw ShapeError("concat: incompatible shapes " + to_string(first) + " and " + to_string(s));
        out_shape[axis] += s[axis];
    }
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

    std::vector<std::int64_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
    const auto total = out_shape[axis] * inner;
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    for (std::int64_t o = 0; o < outer; ++o) {
        std::int64_t col = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const auto d = parts[i].data();
            std::copy_n(d.begin() + o * widths[i], widths[i], out.begin() + o * total + col);
            col += widths[i];
        }
    }
    return make_op<T>(std::move(out_shape), std::move(out), "concat", parts, [outer, widths, total](Node<T>& self) {
        std::int64_t col = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (auto* gp = parent_grad(self, i)) {
                for (std::int64_t o = 0; o < outer; ++o) {
                    const T* src = self.grad.data() + o * total + col;
                    T* dst = gp->data() + o * widths[i];
                    for (std::int64_t j = 0; j < widths[i]; ++j) dst[j] += src[j];
                }
            }
            col += widths[i];
        }
    });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& a, std::size_t axis, std::int64_t begin, std::int64_t end) {
    const auto& s = a.shape();
    if (axis >= s.size() || begin < 0 || end > s[axis] || begin >= end) {
        throw ShapeError("slice: invalid range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + to_string(s));
    }
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const auto src_w = s[axis] * inner;
    const auto dst_w = (end - begin) * inner;
    const auto off = begin * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    std::vector<T> out(static_cast<std::size_t>(outer * dst_w));
    const auto ad = a.data();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(ad.begin() + o * src_w + off, dst_w, out.begin() + o * dst_w);
    }
    return make_op<T>(std::move(out_shape), std::move(out), "slice", {a}, [outer, src_w, dst_w, off](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) {
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t j = 0; j < dst_w; ++j) (*ga)[o * src_w + off + j] += self.grad[o * dst_w + j];
            }
        }
    });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    T total = T(0);
    for (T v : a.data()) total += v;
    return make_op<T>({}, {total}, "sum", {a}, [](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) {
            for (auto& v : *ga) v += self.grad[0];
        }
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    T total = T(0);
    for (T v : a.data()) total += v;
    const T inv = T(1) / static_cast<T>(a.numel());
    return make_op<T>({}, {total * inv}, "mean", {a}, [inv](Node<T>& self) {
        if (auto* ga = parent_grad(self, 0)) {
            for (auto& v : *ga) v += self.grad[0] * inv;
        }
    });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    auto y = matmul(x, w);
    if (b.numel() != y.dim(1)) {
        throw ShapeError("linear: bias " + to_string(b.shape()) + " does not match output " + to_string(y.shape()));
    }
    return add(y, expand(reshape(b, {1, y.dim(1)}), y.shape()));
}

template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& b) {
    if (x.rank() < 2 || b.numel() != x.dim(1)) {
        throw ShapeError("add_channel_bias: bias " + to_string(b.shape()) + " does not match " + to_string(x.shape()));
    }
    Shape view(x.rank(), 1);
    view[1] = x.dim(1);
    return add(x, expand(reshape(b, view), x.shape()));
}

namespace {

std::int64_t conv_extent(std::int64_t in, std::int64_t k, int stride, int pad, std::string_view name) {
    if (stride <= 0 || pad < 0) throw std::invalid_argument(std::string(name) + ": stride must be positive and pad non-negative");
    const auto span = in + 2 * pad - k;
    if (span < 0) {
        throw ShapeError(std::string(name) + ": kernel extent " + std::to_string(k) + " exceeds padded input " +
                         std::to_string(in + 2 * pad));
    }
    return span / stride + 1;
}

// Shared forward/backward for conv2d and conv3d. Spatial axes are padded to 3
// (a 2-D input is a 3-D one with depth 1 and a depth-1 kernel).
template <typename T>
BasicTensor<T> conv_nd(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad,
                       std::size_t spatial, std::string_view name) {
    if (input.rank() != spatial + 2 || kernel.rank() != spatial + 2 || input.dim(1) != kernel.dim(1)) {
        throw ShapeError(std::string(name) + ": incompatible input " + to_string(input.shape()) + " and kernel " +
                         to_string(kernel.shape()));
    }
    kernels::ConvGeometry g;
    g.channels = input.dim(1);
    const auto lead = 3 - spatial;
    for (std::size_t d = 0; d < spatial; ++d) {
        g.in[lead + d] = input.dim(2 + d);
        g.kernel[lead + d] = kernel.dim(2 + d);
        g.stride[lead + d] = stride;
        g.pad[lead + d] = pad;
        g.out[lead + d] = conv_extent(g.in[lead + d], g.kernel[lead + d], stride, pad, name);
    }
    const auto n = input.dim(0), f = kernel.dim(0);
    const auto ckk = g.channels * g.taps();
    const auto p = g.out_size();
    Shape out_shape{n, f};
    for (std::size_t d = 0; d < spatial; ++d) out_shape.push_back(g.out[lead + d]);

    std::vector<T> out(static_cast<std::size_t>(n * f * p), T(0));
    std::vector<T> cols(static_cast<std::size_t>(ckk * p));
    const T* x = input.data().data();
    const T* k = kernel.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        kernels::im2col(g, x + i * g.channels * g.in_size(), cols.data());
        kernels::gemm_nn(f, p, ckk, k, cols.data(), out.data() + i * f * p);
    }
    return make_op<T>(std::move(out_shape), std::move(out), name, {input, kernel}, [g, n, f, ckk, p](Node<T>& self) {
        const auto& x = parent_data(self, 0);
        const auto& k = parent_data(self, 1);
        auto* gx = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        std::vector<T> cols(static_cast<std::size_t>(ckk * p));
        std::vector<T> cols_t(gk ? cols.size() : 0);
        for (std::int64_t i = 0; i < n; ++i) {
            const T* gy = self.grad.data() + i * f * p;
            if (gk) {
                kernels::im2col(g, x.data() + i * g.channels * g.in_size(), cols.data());
                kernels::transpose(ckk, p, cols.data(), cols_t.data());
                kernels::gemm_nn(f, ckk, p, gy, cols_t.data(), gk->data());
            }
            if (gx) {
                std::fill(cols.begin(), cols.end(), T(0));
                kernels::gemm_tn(ckk, p, f, k.data(), gy, cols.data());
                kernels::col2im(g, cols.data(), gx->data() + i * g.channels * g.in_size());
            }
        }
    });
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad) {
    return conv_nd(input, kernel, stride, pad, 2, "conv2d");
}

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad) {
    return conv_nd(input, kernel, stride, pad, 3, "conv3d");
}

template <typename T>
BasicTensor<T> conv_transpose3d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, int stride, int pad) {
    if (input.rank() != 5 || kernel.rank() != 5 || input.dim(1) != kernel.dim(0)) {
        throw ShapeError("conv_transpose3d: incompatible input " + to_string(input.shape()) + " and kernel " +
                         to_string(kernel.shape()));
    }
    if (stride <= 0 || pad < 0) throw std::invalid_argument("conv_transpose3d: stride must be positive and pad non-negative");
    const auto n = input.dim(0), c = input.dim(1), f = kernel.dim(1);
    // Geometry of the forward conv3d that this op is the adjoint of: it reads
    // the (large) output volume and produces the (small) input volume.
    kernels::ConvGeometry g;
    g.channels = f;
    Shape out_shape{n, f};
    for (std::size_t d = 0; d < 3; ++d) {
        const auto k = kernel.dim(2 + d);
        const auto extent = (input.dim(2 + d) - 1) * stride - 2 * pad + k;
        if (extent <= 0) {
            throw ShapeError("conv_transpose3d: non-positive output extent for input " + to_string(input.shape()));
        }
        g.in[d] = extent;
        g.kernel[d] = k;
        g.stride[d] = stride;
        g.pad[d] = pad;
        g.out[d] = input.dim(2 + d);
        out_shape.push_back(extent);
        if (conv_extent(extent, k, stride, pad, "conv_transpose3d") != g.out[d]) {
            throw ShapeError("conv_transpose3d: inconsistent geometry for input " + to_string(input.shape()));
        }
    }
    const auto fkk = f * g.taps();
    const auto small = g.out_size();
    const auto big = g.in_size();
    std::vector<T> out(static_cast<std::size_t>(n * f * big), T(0));
    std::vector<T> cols(static_cast<std::size_t>(fkk * small));
    const T* x = input.data().data();
    const T* w = kernel.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        std::fill(cols.begin(), cols.end(), T(0));
        kernels::gemm_tn(fkk, small, c, w, x + i * c * small, cols.data());
        kernels::col2im(g, cols.data(), out.data() + i * f * big);
    }
    return make_op<T>(std::move(out_shape), std::move(out), "conv_transpose3d", {input, kernel},
                      [g, n, c, f, fkk, small, big](Node<T>& self) {
                          const auto& x = parent_data(self, 0);
                          const auto& w = parent_data(self, 1);
                          auto* gx = parent_grad(self, 0);
                          auto* gw = parent_grad(self, 1);
                          std::vector<T> cols(static_cast<std::size_t>(fkk * small));
                          std::vector<T> cols_t(gw ? cols.size() : 0);
                          for (std::int64_t i = 0; i < n; ++i) {
                              kernels::im2col(g, self.grad.data() + i * f * big, cols.data());
                              if (gx) kernels::gemm_nn(c, small, fkk, w.data(), cols.data(), gx->data() + i * c * small);
                              if (gw) {
                                  kernels::transpose(fkk, small, cols.data(), cols_t.data());
                                  kernels::gemm_nn(c, fkk, small, x.data() + i * c * small, cols_t.data(), gw->data());
                              }
                          }
                      });
}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                         Mode mode, BatchNormStats<T>& stats) {
    if (input.rank() < 2) throw ShapeError("batchnorm: expected [N,C,...], got " + to_string(input.shape()));
    const auto n = input.dim(0), c = input.dim(1);
    if (gamma.numel() != c || beta.numel() != c || stats.running_mean.numel() != c || stats.running_var.numel() != c) {
        throw ShapeError("batchnorm: parameters do not match " + std::to_string(c) + " channels");
    }
    if (mode == Mode::train && n < 2) {
        throw std::invalid_argument("batchnorm: train mode needs a batch of at least 2, got " + std::to_string(n));
    }
    const auto s = input.numel() / (n * c);
    const auto m = n * s;
    const T eps = static_cast<T>(kBatchNormEps);
    const T mom = static_cast<T>(kBatchNormMomentum);
    const auto x = input.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();

    std::vector<T> mu(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
    if (mode == Mode::train) {
        auto rm = stats.running_mean.mutable_data();
        auto rv = stats.running_var.mutable_data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* p = x.data() + (i * c + ch) * s;
                for (std::int64_t j = 0; j < s; ++j) acc += p[j];
            }
            const T mean = acc / static_cast<T>(m);
            T var = T(0);
            for (std::int64_t i = 0; i < n; ++i) {
                const T* p = x.data() + (i * c + ch) * s;
                for (std::int64_t j = 0; j < s; ++j) var += (p[j] - mean) * (p[j] - mean);
            }
            const T unbiased = var / static_cast<T>(m - 1);
            var /= static_cast<T>(m);
            mu[ch] = mean;
            inv_std[ch] = T(1) / std::sqrt(var + eps);
            rm[ch] = (T(1) - mom) * rm[ch] + mom * mean;
            rv[ch] = (T(1) - mom) * rv[ch] + mom * unbiased;
        }
    } else {
        const auto rm = stats.running_mean.data();
        const auto rv = stats.running_var.data();
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mu[ch] = rm[ch];
            inv_std[ch] = T(1) / std::sqrt(rv[ch] + eps);
        }
    }

    auto xhat = std::make_shared<std::vector<T>>(x.size());
    std::vector<T> out(x.size());
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const auto base = (i * c + ch) * s;
            for (std::int64_t j = 0; j < s; ++j) {
                const T h = (x[base + j] - mu[ch]) * inv_std[ch];
                (*xhat)[base + j] = h;
                out[base + j] = gd[ch] * h + bd[ch];
            }
        }
    }
    const bool batch_stats = mode == Mode::train;
    return make_op<T>(input.shape(), std::move(out), "batchnorm", {input, gamma, beta},
                      [xhat, inv_std, n, c, s, m, batch_stats](Node<T>& self) {
                          const auto& g = self.grad;
                          const auto& gam = parent_data(self, 1);
                          auto* gx = parent_grad(self, 0);
                          auto* gg = parent_grad(self, 1);
                          auto* gb = parent_grad(self, 2);
                          for (std::int64_t ch = 0; ch < c; ++ch) {
                              T sum_g = T(0), sum_gh = T(0);
                              for (std::int64_t i = 0; i < n; ++i) {
                                  const auto base = (i * c + ch) * s;
                                  for (std::int64_t j = 0; j < s; ++j) {
                                      sum_g += g[base + j];
                                      sum_gh += g[base + j] * (*xhat)[base + j];
                                  }
                              }
                              if (gg) (*gg)[ch] += sum_gh;
                              if (gb) (*gb)[ch] += sum_g;
                              if (!gx) continue;
                              const T k = gam[ch] * inv_std[ch];
                              const T mg = sum_g / static_cast<T>(m);
                              const T mgh = sum_gh / static_cast<T>(m);
                              for (std::int64_t i = 0; i < n; ++i) {
                                  const auto base = (i * c + ch) * s;
                                  for (std::int64_t j = 0; j < s; ++j) {
                                      const auto idx = base + j;
                                      (*gx)[idx] += batch_stats ? k * (g[idx] - mg - (*xhat)[idx] * mgh) : k * g[idx];
                                  }
                              }
                          }
                      });
}

#define VXDA_INSTANTIATE_OPS(T)                                                                               \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> neg(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> elu(const BasicTensor<T>&, double);                                               \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                   \
    template BasicTensor<T> log(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> exp(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> scale(const BasicTensor<T>&, double);                                             \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, double);                                        \
    template BasicTensor<T> elementwise(Elementwise, const BasicTensor<T>&, const BasicTensor<T>*);           \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> transpose(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                            \
    template BasicTensor<T> expand(const BasicTensor<T>&, Shape);                                             \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                          \
    template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::int64_t, std::int64_t);            \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> mean(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);      \
    template BasicTensor<T> add_channel_bias(const BasicTensor<T>&, const BasicTensor<T>&);                   \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, int, int);                   \
    template BasicTensor<T> conv3d(const BasicTensor<T>&, const BasicTensor<T>&, int, int);                   \
    template BasicTensor<T> conv_transpose3d(const BasicTensor<T>&, const BasicTensor<T>&, int, int);         \
    template BasicTensor<T> batchnorm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, Mode, \
                                      BatchNormStats<T>&);

VXDA_INSTANTIATE_OPS(float)
VXDA_INSTANTIATE_OPS(double)

#undef VXDA_INSTANTIATE_OPS

}  // namespace vxda
