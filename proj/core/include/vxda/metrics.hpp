#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vxda/data.hpp"
#include "vxda/model.hpp"

namespace vxda::metrics {

inline constexpr double kDefaultThreshold = 0.4;

/// |{p > t} & {gt}| / |{p > t} | {gt}|, with gt cells occupied when > 0.5.
/// Both sets empty gives 1.0.
double iou(std::span<const float> pred, std::span<const float> gt, double threshold);

enum class DomainSelector { source, target, both };
DomainSelector domain_selector_from_string(std::string_view s);

struct EvalConfig {
    double threshold = kDefaultThreshold;
    data::Split split = data::Split::test;
    DomainSelector domain = DomainSelector::both;

    void validate() const;
};

struct ClassIoU {
    std::string name;
    double iou = 0;
    std::size_t count = 0;
};

/// Per-class means and the per-sample weighted overall mean.
struct IoUReport {
    std::string method;
    double threshold = kDefaultThreshold;
    std::vector<ClassIoU> classes;
    double overall = 0;
    std::size_t count = 0;
};

struct SampleIoU {
    int class_label = 0;
    double iou = 0;
};

IoUReport summarize(std::span<const SampleIoU> samples, const std::vector<std::string>& class_names,
                    const std::string& method, double threshold);

/// Eval-mode network outputs for a list of samples, in order.
struct Predictions {
    std::int64_t count = 0;
    std::int64_t voxel_cells = 0;
    std::int64_t latent_dim = 0;
    std::vector<float> voxels;  // refined probabilities, count * V^3
    std::vector<float> domain_logits;
    std::vector<float> latent;  // count * d
};

Predictions predict(const nn::NetworkConfig& config, nn::ModelParams<float>& params, const std::vector<data::Sample>& samples,
                    std::span<const std::size_t> indices, int batch_size = 32);

IoUReport iou_report(const Predictions& predictions, const std::vector<data::Sample>& samples,
                     std::span<const std::size_t> indices, const std::vector<std::string>& class_names,
                     const std::string& method, double threshold);

IoUReport iou_report(const nn::NetworkConfig& config, nn::ModelParams<float>& params, const std::vector<data::Sample>& samples,
                     std::span<const std::size_t> indices, const std::vector<std::string>& class_names,
                     const std::string& method, double threshold);

/// Fraction of samples whose logit sign (> 0 means target) matches the tag.
/// Throws unless both domains are present.
double domain_confusion_accuracy(std::span<const float> logits, std::span<const int> tags);

struct Embedding {
    std::int64_t rows = 0;
    int dims = 2;
    std::vector<double> coords;      // rows * dims
    std::vector<double> components;  // dims * d, unit loadings
    std::vector<double> explained;   // variance along each component
    double total_variance = 0;
};

/// Projects mean-centred rows onto the leading principal axes (Jacobi
/// eigendecomposition of the covariance). Each axis is signed so that its
/// largest-magnitude loading is positive.
Embedding pca_embed(std::span<const double> features, std::int64_t rows, std::int64_t cols, int dims = 2);

// Symmetric eigendecomposition by cyclic Jacobi rotations; eigenvalues
// descending, eigenvectors as rows.
void symmetric_eigen(std::vector<double> matrix, int n, std::vector<double>& values, std::vector<double>& vectors);

// "class,method,iou,count,threshold" rows, one per class then "overall".
std::string iou_csv(const IoUReport& report);

// One "# domain=<name>" line and a full CSV table per report.
std::string iou_csv(const std::vector<std::pair<std::string, IoUReport>>& stanzas);

// "x,y,domain,class"
std::string embedding_csv(const Embedding& embedding, std::span<const int> tags, std::span<const std::string> classes);

// Scatter plot, one colour per domain.
std::string embedding_svg(const Embedding& embedding, std::span<const int> tags);

}  // namespace vxda::metrics
