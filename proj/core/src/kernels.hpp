#pragma once

// Internal dense kernels shared by the tensor ops. Loops are ordered so the
// innermost one is a contiguous axpy, which the compiler vectorizes without
// reassociating reductions (results stay bitwise reproducible).

#include <algorithm>
#include <array>
#include <cstdint>
#include <vector>

namespace vxda::kernels {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c) {
    for (std::int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// out[cols,rows] = in[rows,cols]^T
template <typename T>
void transpose(std::int64_t rows, std::int64_t cols, const T* in, T* out) {
    constexpr std::int64_t kBlock = 32;
    for (std::int64_t r0 = 0; r0 < rows; r0 += kBlock) {
        for (std::int64_t c0 = 0; c0 < cols; c0 += kBlock) {
            const auto r1 = std::min(rows, r0 + kBlock);
            const auto c1 = std::min(cols, c0 + kBlock);
            for (std::int64_t r = r0; r < r1; ++r) {
                for (std::int64_t c = c0; c < c1; ++c) out[c * rows + r] = in[r * cols + c];
            }
        }
    }
}

// Geometry of a (up to) 3-D strided, zero-padded cross-correlation window.
// `in` is the spatial extent being read, `out` the extent produced.
struct ConvGeometry {
    std::int64_t channels = 1;
    std::array<std::int64_t, 3> in{1, 1, 1};
    std::array<std::int64_t, 3> kernel{1, 1, 1};
    std::array<std::int64_t, 3> stride{1, 1, 1};
    std::array<std::int64_t, 3> pad{0, 0, 0};
    std::array<std::int64_t, 3> out{1, 1, 1};

    std::int64_t in_size() const { return in[0] * in[1] * in[2]; }
    std::int64_t out_size() const { return out[0] * out[1] * out[2]; }
    std::int64_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

// cols[(c,kd,kh,kw), (od,oh,ow)] = x[c, od*s-p+kd, ...] or 0 outside.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
    const auto out_size = g.out_size();
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        const T* xc = x + c * g.in_size();
        for (std::int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh) {
                for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    T* dst = cols + row * out_size;
                    for (std::int64_t od = 0; od < g.out[0]; ++od) {
                        const auto id = od * g.stride[0] - g.pad[0] + kd;
                        const bool dok = id >= 0 && id < g.in[0];
                        for (std::int64_t oh = 0; oh < g.out[1]; ++oh) {
                            const auto ih = oh * g.stride[1] - g.pad[1] + kh;
                            const bool hok = dok && ih >= 0 && ih < g.in[1];
                            T* d = dst + (od * g.out[1] + oh) * g.out[2];
                            if (!hok) {
                                for (std::int64_t ow = 0; ow < g.out[2]; ++ow) d[ow] = T(0);
                                continue;
                            }
                            const T* src = xc + (id * g.in[1] + ih) * g.in[2];
                            for (std::int64_t ow = 0; ow < g.out[2]; ++ow) {
                                const auto iw = ow * g.stride[2] - g.pad[2] + kw;
                                d[ow] = (iw >= 0 && iw < g.in[2]) ? src[iw] : T(0);
                            }
                        }
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: x[c, ...] += cols[...]
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* x) {
    const auto out_size = g.out_size();
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        T* xc = x + c * g.in_size();
        for (std::int64_t kd = 0; kd < g.kernel[0]; ++kd) {
            for (std::int64_t kh = 0; kh < g.kernel[1]; ++kh) {
                for (std::int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    const T* src = cols + row * out_size;
                    for (std::int64_t od = 0; od < g.out[0]; ++od) {
                        const auto id = od * g.stride[0] - g.pad[0] + kd;
                        if (id < 0 || id >= g.in[0]) continue;
                        for (std::int64_t oh = 0; oh < g.out[1]; ++oh) {
                            const auto ih = oh * g.stride[1] - g.pad[1] + kh;
                            if (ih < 0 || ih >= g.in[1]) continue;
                            const T* s = src + (od * g.out[1] + oh) * g.out[2];
                            T* dst = xc + (id * g.in[1] + ih) * g.in[2];
                            for (std::int64_t ow = 0; ow < g.out[2]; ++ow) {
                                const auto iw = ow * g.stride[2] - g.pad[2] + kw;
                                if (iw >= 0 && iw < g.in[2]) dst[iw] += s[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

}  // namespace vxda::kernels
