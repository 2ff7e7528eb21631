#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "vxda/ops.hpp"

namespace vxda::losses {

/// Raised when a loss term is NaN/inf or a discrepancy goes meaningfully negative.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string part, const std::string& what) : std::runtime_error(what), part_(std::move(part)) {}
    const std::string& part() const { return part_; }

private:
    std::string part_;
};

enum class KernelKind { linear, rbf };

struct KernelSpec {
    KernelKind kind = KernelKind::rbf;
    std::optional<double> bandwidth;  // rbf only; empty selects the median heuristic

    static KernelSpec linear() { return {KernelKind::linear, std::nullopt}; }
    static KernelSpec rbf_median() { return {KernelKind::rbf, std::nullopt}; }
    static KernelSpec rbf(double bandwidth) { return {KernelKind::rbf, bandwidth}; }
};

struct LossWeights {
    double recon = 1.0;
    double domain = 0.1;
    double cls = 0.1;
    double coral = 0.0;
    double mmd = 0.0;
    double grl_lambda = 1.0;

    void validate() const;
    // True when any term needs target-domain samples in the batch.
    bool uses_target() const { return domain > 0 || cls > 0 || coral > 0 || mmd > 0; }
};

// Unbiased feature covariance of the rows of `features` [n,d], n >= 2:
//   C = (D^T D - (1/n) (1^T D)^T (1^T D)) / (n - 1)
template <typename T>
BasicTensor<T> covariance(const BasicTensor<T>& features);

// ||C_S - C_T||_F^2 / (4 d^2)
template <typename T>
BasicTensor<T> coral_loss(const BasicTensor<T>& source, const BasicTensor<T>& target);

/// Median pairwise Euclidean distance over the pooled rows; 1.0 when that median is 0.
template <typename T>
double median_heuristic(const BasicTensor<T>& source, const BasicTensor<T>& target);

/// Squared MMD, biased V-statistic:
///   mean k(s,s') + mean k(t,t') - 2 mean k(s,t)
/// with k(x,y) = <x,y> (linear) or exp(-||x-y||^2 / (2 bw^2)) (rbf).
/// Rounding negatives down to -1e-6 clamp to 0; anything lower throws.
template <typename T>
BasicTensor<T> mmd_loss(const BasicTensor<T>& source, const BasicTensor<T>& target, const KernelSpec& kernel);

/// Gradient reversal: identity forward, -lambda * grad backward.
template <typename T>
BasicTensor<T> grl(const BasicTensor<T>& x, double lambda);

// Mean binary cross-entropy on logits [n,1]; tags are 0 (source) or 1 (target).
template <typename T>
BasicTensor<T> domain_loss(const BasicTensor<T>& logits, std::span<const int> tags);

inline constexpr double kProbabilityClamp = 1e-7;

// Mean voxel-wise binary cross-entropy of probabilities against a binary grid.
template <typename T>
BasicTensor<T> recon_loss(const BasicTensor<T>& pred, const BasicTensor<T>& gt);

// Mean softmax cross-entropy of logits [n,K] at the true labels.
template <typename T>
BasicTensor<T> class_loss(const BasicTensor<T>& logits, std::span<const int> labels);

template <typename T>
struct LossParts {
    std::optional<BasicTensor<T>> recon;
    std::optional<BasicTensor<T>> cls;
    std::optional<BasicTensor<T>> domain;
    std::optional<BasicTensor<T>> coral;
    std::optional<BasicTensor<T>> mmd;
};

struct LossReport {
    double recon = 0, cls = 0, domain = 0, coral = 0, mmd = 0;
    double total = 0;
    LossWeights weights;
};

template <typename T>
struct CompositeLoss {
    BasicTensor<T> total;
    LossReport report;
};

/// Weighted sum of the present parts. Parts with zero weight are reported but
/// left out of the graph. Non-finite parts throw NumericalError naming the part.
template <typename T>
CompositeLoss<T> composite_loss(const LossParts<T>& parts, const LossWeights& weights);

}  // namespace vxda::losses
