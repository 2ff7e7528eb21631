#include "oracles.hpp"

#include <cmath>

namespace vxda::testing::oracle {

Vec matmul(const Vec& a, const Vec& b, int n, int k, int m) {
    Vec out(static_cast<std::size_t>(n * m), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * m + j];
            out[i * m + j] = acc;
        }
    return out;
}

Vec conv2d(const Vec& x, const Vec& w, int n, int c, int h, int wd, int f, int kh, int kw, int stride, int pad) {
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    Vec out(static_cast<std::size_t>(n * f * ho * wo), 0.0);
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < f; ++o)
            for (int y = 0; y < ho; ++y)
                for (int z = 0; z < wo; ++z) {
                    double acc = 0;
                    for (int ch = 0; ch < c; ++ch)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                const int iy = y * stride - pad + i;
                                const int iz = z * stride - pad + j;
                                if (iy < 0 || iy >= h || iz < 0 || iz >= wd) continue;
                                acc += x[((b * c + ch) * h + iy) * wd + iz] * w[((o * c + ch) * kh + i) * kw + j];
                            }
                    out[((b * f + o) * ho + y) * wo + z] = acc;
                }
    return out;
}

Vec conv3d(const Vec& x, const Vec& w, int n, int c, int d, int f, int k, int stride, int pad, int& out_extent) {
    const int o = (d + 2 * pad - k) / stride + 1;
    out_extent = o;
    Vec out(static_cast<std::size_t>(n * f * o * o * o), 0.0);
    auto xi = [&](int b, int ch, int z, int y, int q) { return x[(((b * c + ch) * d + z) * d + y) * d + q]; };
    auto wi = [&](int of, int ch, int z, int y, int q) { return w[(((of * c + ch) * k + z) * k + y) * k + q]; };
    for (int b = 0; b < n; ++b)
        for (int of = 0; of < f; ++of)
            for (int z = 0; z < o; ++z)
                for (int y = 0; y < o; ++y)
                    for (int q = 0; q < o; ++q) {
                        double acc = 0;
                        for (int ch = 0; ch < c; ++ch)
                            for (int a = 0; a < k; ++a)
                                for (int bb = 0; bb < k; ++bb)
                                    for (int cc = 0; cc < k; ++cc) {
                                        const int iz = z * stride - pad + a;
                                        const int iy = y * stride - pad + bb;
                                        const int iq = q * stride - pad + cc;
                                        if (iz < 0 || iz >= d || iy < 0 || iy >= d || iq < 0 || iq >= d) continue;
                                        acc += xi(b, ch, iz, iy, iq) * wi(of, ch, a, bb, cc);
                                    }
                        out[(((b * f + of) * o + z) * o + y) * o + q] = acc;
                    }
    return out;
}

Vec covariance(const Vec& x, int n, int d) {
    Vec mu(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mu[j] += x[i * d + j];
    for (auto& m : mu) m /= n;
    Vec c(static_cast<std::size_t>(d * d), 0.0);
    for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) {
            double acc = 0;
            for (int i = 0; i < n; ++i) acc += (x[i * d + a] - mu[a]) * (x[i * d + b] - mu[b]);
            c[a * d + b] = acc / (n - 1);
        }
    return c;
}

double coral(const Vec& s, int ns, const Vec& t, int nt, int d) {
    const auto cs = covariance(s, ns, d);
    const auto ct = covariance(t, nt, d);
    double acc = 0;
    for (std::size_t i = 0; i < cs.size(); ++i) acc += (cs[i] - ct[i]) * (cs[i] - ct[i]);
    return acc / (4.0 * d * d);
}

namespace {
double kernel(const double* a, const double* b, int d, double bandwidth) {
    double acc = 0;
    if (bandwidth <= 0) {
        for (int i = 0; i < d; ++i) acc += a[i] * b[i];
        return acc;
    }
    for (int i = 0; i < d; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::exp(-acc / (2 * bandwidth * bandwidth));
}
}  // namespace

double mmd_squared(const Vec& s, int ns, const Vec& t, int nt, int d, double bandwidth) {
    double ss = 0, tt = 0, st = 0;
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < ns; ++j) ss += kernel(&s[i * d], &s[j * d], d, bandwidth);
    for (int i = 0; i < nt; ++i)
        for (int j = 0; j < nt; ++j) tt += kernel(&t[i * d], &t[j * d], d, bandwidth);
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < nt; ++j) st += kernel(&s[i * d], &t[j * d], d, bandwidth);
    return ss / (double(ns) * ns) + tt / (double(nt) * nt) - 2 * st / (double(ns) * nt);
}

double iou(const Vec& pred, const Vec& gt, double threshold) {
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] > threshold;
        const bool g = gt[i] > 0.5;
        inter += (p && g) ? 1 : 0;
        uni += (p || g) ? 1 : 0;
    }
    return uni == 0 ? 1.0 : double(inter) / uni;
}

double dot(const Vec& a, const Vec& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace vxda::testing::oracle
