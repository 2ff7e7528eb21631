#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxda/ops.hpp"

namespace vxda::nn {

/// Network shape. Defaults are the desk-scale configuration; the full-scale
/// 32^3 voxel grid is supported through `voxel_size`.
struct NetworkConfig {
    int image_size = 32;
    int image_channels = 3;
    int voxel_size = 16;
    int num_classes = 6;
    int latent_dim = 128;
    bool refiner_enabled = true;
    // Stride-2 encoder stages take the leading entries, down to 4x4 spatial.
    std::vector<int> encoder_widths{16, 32, 64, 128};
    // Seed-volume channels, then one entry per stride-2 decoder stage (last repeats).
    std::vector<int> decoder_widths{32, 16, 8, 4};
    int refiner_width = 8;
    int domain_hidden = 64;

    void validate() const;
    int encoder_stages() const;
    int decoder_stages() const;
    int encoder_width(int stage) const;
    int decoder_width(int stage) const;

    nlohmann::json to_json() const;
    static NetworkConfig from_json(const nlohmann::json& j);
    bool operator==(const NetworkConfig&) const = default;
};

// Hidden widths of the voxel-classification head.
inline constexpr int kClassHidden1 = 100;
inline constexpr int kClassHidden2 = 20;

enum class Submodule { encoder, decoder, refiner, domain_head, class_head };
std::string_view to_string(Submodule s);

template <typename T>
struct Parameter {
    std::string name;
    Submodule owner;
    BasicTensor<T> tensor;
    bool trainable = true;  // false for batchnorm running statistics
};

/// Every weight, bias, batchnorm affine and running-statistic tensor of the
/// network, in creation order.
template <typename T>
class ModelParams {
public:
    void add(std::string name, Submodule owner, BasicTensor<T> tensor, bool trainable);

    BasicTensor<T>& at(const std::string& name);
    const BasicTensor<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    BatchNormStats<T> batchnorm_stats(const std::string& prefix) const;

    std::vector<Parameter<T>>& entries() { return entries_; }
    const std::vector<Parameter<T>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grad();
    // Deep copy; the result shares no storage with this set.
    ModelParams clone() const;
    template <typename U>
    ModelParams<U> cast() const;

private:
    std::vector<Parameter<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases,
/// batchnorm gamma=1 beta=0, running mean 0 / var 1. Fully determined by seed.
template <typename T>
ModelParams<T> init_params(const NetworkConfig& config, std::uint64_t seed);

template <typename T>
struct ForwardOutputs {
    BasicTensor<T> latent;         // [n,d]
    BasicTensor<T> voxel_raw;      // [n,V,V,V] probabilities
    BasicTensor<T> voxel_refined;  // [n,V,V,V] probabilities
    BasicTensor<T> domain_logits;  // [n,1]
    BasicTensor<T> class_logits;   // [n,K]
};

// images [n,C,H,W] -> latent [n,d]
template <typename T>
BasicTensor<T> encode(const BasicTensor<T>& images, const NetworkConfig& config, ModelParams<T>& params, Mode mode);

// latent [n,d] -> probabilities [n,V,V,V]
template <typename T>
BasicTensor<T> decode(const BasicTensor<T>& latent, const NetworkConfig& config, ModelParams<T>& params, Mode mode);

// [n,V,V,V] -> [n,V,V,V]; identity when the refiner is disabled.
template <typename T>
BasicTensor<T> refine(const BasicTensor<T>& voxels, const NetworkConfig& config, ModelParams<T>& params, Mode mode);

// grl(latent) -> dense -> ReLU -> dense, logits [n,1]
template <typename T>
BasicTensor<T> classify_domain(const BasicTensor<T>& latent, const NetworkConfig& config, ModelParams<T>& params,
                               double grl_lambda);

// flattened voxels -> dense(100) -> ReLU -> dense(20) -> ReLU -> dense(K)
template <typename T>
BasicTensor<T> classify_voxel(const BasicTensor<T>& voxels, const NetworkConfig& config, ModelParams<T>& params);

template <typename T>
ForwardOutputs<T> forward_full(const BasicTensor<T>& images, const NetworkConfig& config, ModelParams<T>& params,
                               double grl_lambda, Mode mode);

// ---------------------------------------------------------------------------
// Checkpoint container.
//
//   "VXDA"  u32 version  u32 header_len  header_json
//   u32 record_count
//   per record: u32 name_len  name  u32 rank  u64 extents[rank]  f32 payload
//
// All integers and floats little-endian. The header is canonical JSON
// {"config": NetworkConfig, "meta": {...}}.

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    NetworkConfig config;
    ModelParams<float> params;
    nlohmann::json meta = nlohmann::json::object();
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vxda::nn
