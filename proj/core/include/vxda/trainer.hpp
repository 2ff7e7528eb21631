#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vxda/data.hpp"
#include "vxda/losses.hpp"
#include "vxda/metrics.hpp"
#include "vxda/model.hpp"

namespace vxda::train {

enum class Method { none, dann, dann_class, coral, mmd };
std::string_view to_string(Method m);
Method method_from_string(std::string_view s);

/// Default maximum gradient-reversal strength.
inline constexpr double kDefaultGrlLambda = 0.03;

/// All presets use grl_lambda = kDefaultGrlLambda.
/// none: reconstruction only; dann: + domain 0.1; dann+class: + class 0.1;
/// coral: + CORAL 1; mmd: + MMD 1 (rbf, median bandwidth).
losses::LossWeights method_weights(Method m);

enum class GrlSchedule { constant, ramp };
std::string_view to_string(GrlSchedule s);
GrlSchedule grl_schedule_from_string(std::string_view s);

/// constant: lambda_max. ramp: lambda_max * (2 / (1 + exp(-10 p)) - 1), p = epoch / total.
double grl_schedule(int epoch, int total_epochs, GrlSchedule mode, double lambda_max);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update at step `t` (1-based). Throws
/// NumericalError naming `name` on a non-finite gradient.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                 const AdamConfig& config, const std::string& name);

/// Adam over the trainable entries of a parameter set. Entries that received
/// no gradient in a step are left untouched, moments included.
template <typename T>
class Adam {
public:
    Adam(const nn::ModelParams<T>& params, AdamConfig config);
    void step(nn::ModelParams<T>& params);
    std::int64_t steps() const { return t_; }

private:
    AdamConfig config_;
    std::int64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 32;  // source half + target half
    AdamConfig adam;
    std::string method = "dann+class";
    losses::LossWeights weights = method_weights(Method::dann_class);
    GrlSchedule grl = GrlSchedule::ramp;
    std::uint64_t seed = 0;
    int eval_every = 1;
    int checkpoint_every = 0;  // 0 writes only the final checkpoint
    // image_size, image_channels, voxel_size and num_classes come from the dataset.
    nn::NetworkConfig network;

    void validate() const;
    // Sets `method` and its preset weights, keeping grl_lambda.
    void apply_method(Method m);
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Network shape for a dataset: `base` with the data-determined fields replaced.
nn::NetworkConfig network_for(const data::DatasetManifest& manifest, nn::NetworkConfig base);

struct EpochRecord {
    int epoch = 0;  // 1-based
    losses::LossReport losses;  // means over the epoch's steps
    double iou_source = 0;
    double iou_target = 0;
    double domain_acc = 0;
};

struct TrainLog {
    std::vector<EpochRecord> records;

    static std::string csv_header();
    static std::string csv_row(const EpochRecord& r);
    std::string to_csv() const;
};

struct TrainResult {
    nn::Checkpoint checkpoint;
    TrainLog log;
};

/// Mixed-batch training. Target samples feed the domain, class, CORAL and MMD
/// terms only; their ground-truth voxels are never read. With a non-empty
/// `out_dir`, `train_log.csv` grows by one row per evaluated epoch and
/// `checkpoint.bin` (plus `checkpoint_eNNN.bin` every checkpoint_every
/// epochs) is written there.
TrainResult train(const TrainConfig& config, const std::vector<data::Sample>& samples,
                  const data::DatasetManifest& manifest, const std::filesystem::path& out_dir = {},
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

class ConfigMismatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Throws ConfigMismatchError unless the checkpoint's input and output shapes fit the dataset.
void check_compatible(const nn::NetworkConfig& network, const data::DatasetManifest& manifest);

struct EvalResult {
    std::vector<std::pair<std::string, metrics::IoUReport>> reports;  // (domain, report)
    std::optional<double> domain_acc;  // when both domains are evaluated
};

/// Eval-mode IoU reports and domain-confusion accuracy for a checkpoint.
/// Throws ConfigMismatchError if the checkpoint does not fit the dataset.
EvalResult evaluate(const nn::Checkpoint& checkpoint, const std::vector<data::Sample>& samples,
                    const data::DatasetManifest& manifest, const metrics::EvalConfig& config);

}  // namespace vxda::train
