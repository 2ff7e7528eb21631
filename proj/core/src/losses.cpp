#include "vxda/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace vxda::losses {

void LossWeights::validate() const {
    const double all[] = {recon, domain, cls, coral, mmd, grl_lambda};
    for (double w : all) {
        if (!std::isfinite(w) || w < 0) throw std::invalid_argument("loss weights must be finite and non-negative");
    }
    if (recon <= 0) throw std::invalid_argument("reconstruction weight must be positive");
}

namespace {

template <typename T>
void require_matrix(const BasicTensor<T>& m, std::string_view what) {
    if (m.rank() != 2) throw ShapeError(std::string(what) + ": expected an [n,d] matrix, got " + to_string(m.shape()));
}

// Row-wise squared norms as an [n,1] column.
template <typename T>
BasicTensor<T> row_sq_norms(const BasicTensor<T>& x) {
    auto ones = BasicTensor<T>::full({x.dim(1), 1}, T(1));
    return matmul(mul(x, x), ones);
}

template <typename T>
BasicTensor<T> kernel_matrix(const BasicTensor<T>& a, const BasicTensor<T>& b, KernelKind kind, double bandwidth) {
    auto cross = matmul(a, transpose(b));
    if (kind == KernelKind::linear) return cross;
    const Shape s = cross.shape();
    auto na = expand(row_sq_norms(a), s);
    auto nb = expand(transpose(row_sq_norms(b)), s);
    auto dist = sub(add(na, nb), scale(cross, 2.0));
    return exp(scale(dist, -1.0 / (2.0 * bandwidth * bandwidth)));
}

}  // namespace

template <typename T>
BasicTensor<T> covariance(const BasicTensor<T>& features) {
    require_matrix(features, "covariance");
    const auto n = features.dim(0);
    if (n < 2) throw std::invalid_argument("covariance: need at least 2 rows, got " + std::to_string(n));
    auto ones = BasicTensor<T>::full({1, n}, T(1));
    auto col_sums = matmul(ones, features);                   // [1,d]
    auto outer = matmul(transpose(col_sums), col_sums);       // [d,d]
    auto gram = matmul(transpose(features), features);        // [d,d]
    auto centered = sub(gram, scale(outer, 1.0 / static_cast<double>(n)));
    return scale(centered, 1.0 / static_cast<double>(n - 1));
}

template <typename T>
BasicTensor<T> coral_loss(const BasicTensor<T>& source, const BasicTensor<T>& target) {
    require_matrix(source, "coral_loss");
    require_matrix(target, "coral_loss");
    if (source.dim(1) != target.dim(1)) {
        throw ShapeError("coral_loss: feature widths differ: " + to_string(source.shape()) + " vs " +
                         to_string(target.shape()));
    }
    const double d = static_cast<double>(source.dim(1));
    auto diff = sub(covariance(source), covariance(target));
    return scale(sum(mul(diff, diff)), 1.0 / (4.0 * d * d));
}

template <typename T>
double median_heuristic(const BasicTensor<T>& source, const BasicTensor<T>& target) {
    require_matrix(source, "median_heuristic");
    require_matrix(target, "median_heuristic");
    if (source.dim(1) != target.dim(1)) throw ShapeError("median_heuristic: feature widths differ");
    const auto d = source.dim(1);
    std::vector<const T*> rows;
    for (std::int64_t i = 0; i < source.dim(0); ++i) rows.push_back(source.data().data() + i * d);
    for (std::int64_t i = 0; i < target.dim(0); ++i) rows.push_back(target.data().data() + i * d);
    if (rows.size() < 2) throw std::invalid_argument("median_heuristic: need at least 2 pooled points");

    std::vector<double> dists;
    dists.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            double acc = 0;
            for (std::int64_t k = 0; k < d; ++k) {
                const double diff = static_cast<double>(rows[i][k]) - static_cast<double>(rows[j][k]);
                acc += diff * diff;
            }
            dists.push_back(std::sqrt(acc));
        }
    }
    std::sort(dists.begin(), dists.end());
    const auto m = dists.size();
    const double median = m % 2 ? dists[m / 2] : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
    return median > 0 ? median : 1.0;
}

template <typename T>
BasicTensor<T> mmd_loss(const BasicTensor<T>& source, const BasicTensor<T>& target, const KernelSpec& kernel) {
    require_matrix(source, "mmd_loss");
    require_matrix(target, "mmd_loss");
    if (source.dim(1) != target.dim(1)) {
        throw ShapeError("mmd_loss: feature widths differ: " + to_string(source.shape()) + " vs " +
                         to_string(target.shape()));
    }
    double bandwidth = 1.0;
    if (kernel.kind == KernelKind::rbf) {
        bandwidth = kernel.bandwidth ? *kernel.bandwidth : median_heuristic(source, target);
        if (!(bandwidth > 0) || !std::isfinite(bandwidth)) {
            throw std::invalid_argument("mmd_loss: bandwidth must be positive");
        }
    }
    auto kss = mean(kernel_matrix(source, source, kernel.kind, bandwidth));
    auto ktt = mean(kernel_matrix(target, target, kernel.kind, bandwidth));
    auto kst = mean(kernel_matrix(source, target, kernel.kind, bandwidth));
    auto value = sub(add(kss, ktt), scale(kst, 2.0));
    const double v = static_cast<double>(value.item());
    if (v < -1e-6) throw NumericalError("mmd", "mmd_loss: negative estimate " + std::to_string(v));
    return v < 0 ? relu(value) : value;
}

template <typename T>
BasicTensor<T> grl(const BasicTensor<T>& x, double lambda) {
    if (lambda < 0) throw std::invalid_argument("grl: lambda must be non-negative");
    std::vector<T> out(x.data().begin(), x.data().end());
    const T factor = static_cast<T>(-lambda);
    return make_op<T>(x.shape(), std::move(out), "grl", {x}, [factor](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <typename T>
BasicTensor<T> domain_loss(const BasicTensor<T>& logits, std::span<const int> tags) {
    if (logits.numel() != static_cast<std::int64_t>(tags.size()) || (logits.rank() == 2 && logits.dim(1) != 1)) {
        throw ShapeError("domain_loss: " + std::to_string(tags.size()) + " tags for logits " + to_string(logits.shape()));
    }
    const auto z = logits.data();
    const auto n = z.size();
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (tags[i] != 0 && tags[i] != 1) throw std::invalid_argument("domain_loss: tags must be 0 or 1");
        const T y = static_cast<T>(tags[i]);
        total += std::max(z[i], T(0)) - z[i] * y + std::log1p(std::exp(-std::abs(z[i])));
    }
    std::vector<T> y(tags.begin(), tags.end());
    const T inv = T(1) / static_cast<T>(n);
    return make_op<T>({}, {total * inv}, "domain_loss", {logits}, [y = std::move(y), inv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < y.size(); ++i) {
            const T z = p.data[i];
            const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
            g[i] += self.grad[0] * inv * (s - y[i]);
        }
    });
}

template <typename T>
BasicTensor<T> recon_loss(const BasicTensor<T>& pred, const BasicTensor<T>& gt) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError("recon_loss: prediction " + to_string(pred.shape()) + " vs ground truth " + to_string(gt.shape()));
    }
    const T lo = static_cast<T>(kProbabilityClamp);
    const T hi = T(1) - lo;
    const auto p = pred.data();
    const auto g = gt.data();
    T total = T(0);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T q = std::clamp(p[i], lo, hi);
        total -= g[i] * std::log(q) + (T(1) - g[i]) * std::log(T(1) - q);
    }
    const T inv = T(1) / static_cast<T>(p.size());
    // Gradients are evaluated at the clamped probability so saturated voxels still get a signal.
    return make_op<T>({}, {total * inv}, "recon_loss", {pred, gt}, [inv, lo, hi](Node<T>& self) {
        auto& pn = *self.parents[0];
        if (!pn.requires_grad) return;
        const auto& gd = self.parents[1]->data;
        auto& grad = pn.ensure_grad();
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const T q = std::clamp(pn.data[i], lo, hi);
            grad[i] += self.grad[0] * inv * (-(gd[i] / q) + (T(1) - gd[i]) / (T(1) - q));
        }
    });
}

template <typename T>
BasicTensor<T> class_loss(const BasicTensor<T>& logits, std::span<const int> labels) {
    require_matrix(logits, "class_loss");
    const auto n = logits.dim(0), k = logits.dim(1);
    if (n != static_cast<std::int64_t>(labels.size())) {
        throw ShapeError("class_loss: " + std::to_string(labels.size()) + " labels for logits " + to_string(logits.shape()));
    }
    const auto z = logits.data();
    auto probs = std::make_shared<std::vector<T>>(z.size());
    T total = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= k) {
            throw std::invalid_argument("class_loss: label " + std::to_string(label) + " outside [0, " +
                                        std::to_string(k) + ")");
        }
        const T* row = z.data() + i * k;
        const T mx = *std::max_element(row, row + k);
        T se = T(0);
        for (std::int64_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
        const T lse = mx + std::log(se);
        total += lse - row[label];
        for (std::int64_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(row[j] - lse);
    }
    std::vector<int> lab(labels.begin(), labels.end());
    const T inv = T(1) / static_cast<T>(n);
    return make_op<T>({}, {total * inv}, "class_loss", {logits}, [probs, lab = std::move(lab), k, inv](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < lab.size(); ++i) {
            for (std::int64_t j = 0; j < k; ++j) {
                const auto idx = i * static_cast<std::size_t>(k) + static_cast<std::size_t>(j);
                const T onehot = j == lab[i] ? T(1) : T(0);
                g[idx] += self.grad[0] * inv * ((*probs)[idx] - onehot);
            }
        }
    });
}

template <typename T>
CompositeLoss<T> composite_loss(const LossParts<T>& parts, const LossWeights& weights) {
    weights.validate();
    CompositeLoss<T> result;
    result.report.weights = weights;
    std::optional<BasicTensor<T>> total;
    auto take = [&](const std::optional<BasicTensor<T>>& part, double weight, double& slot, const char* name) {
        if (!part) return;
        const double v = static_cast<double>(part->item());
        if (!std::isfinite(v)) {
            throw NumericalError(name, std::string("loss part '") + name + "' is not finite");
        }
        slot = v;
        if (weight <= 0) return;
        auto term = weight == 1.0 ? *part : scale(*part, weight);
        total = total ? add(*total, term) : term;
    };
    take(parts.recon, weights.recon, result.report.recon, "recon");
    take(parts.cls, weights.cls, result.report.cls, "class");
    take(parts.domain, weights.domain, result.report.domain, "domain");
    take(parts.coral, weights.coral, result.report.coral, "coral");
    take(parts.mmd, weights.mmd, result.report.mmd, "mmd");
    if (!total) throw std::invalid_argument("composite_loss: no weighted part present");
    result.total = *total;
    result.report.total = static_cast<double>(result.total.item());
    return result;
}

#define VXDA_INSTANTIATE_LOSSES(T)                                                                     \
    template BasicTensor<T> covariance(const BasicTensor<T>&);                                         \
    template BasicTensor<T> coral_loss(const BasicTensor<T>&, const BasicTensor<T>&);                  \
    template double median_heuristic(const BasicTensor<T>&, const BasicTensor<T>&);                    \
    template BasicTensor<T> mmd_loss(const BasicTensor<T>&, const BasicTensor<T>&, const KernelSpec&); \
    template BasicTensor<T> grl(const BasicTensor<T>&, double);                                        \
    template BasicTensor<T> domain_loss(const BasicTensor<T>&, std::span<const int>);                  \
    template BasicTensor<T> recon_loss(const BasicTensor<T>&, const BasicTensor<T>&);                  \
    template BasicTensor<T> class_loss(const BasicTensor<T>&, std::span<const int>);                   \
    template CompositeLoss<T> composite_loss(const LossParts<T>&, const LossWeights&);

VXDA_INSTANTIATE_LOSSES(float)
VXDA_INSTANTIATE_LOSSES(double)

#undef VXDA_INSTANTIATE_LOSSES

}  // namespace vxda::losses
