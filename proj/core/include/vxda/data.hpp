#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vxda/rng.hpp"
#include "vxda/tensor.hpp"

namespace vxda::data {

inline constexpr int kShapeClasses = 6;
inline constexpr int kImageChannels = 3;

std::string_view class_name(int class_id);

/// V x V x V occupancy, indexed [z][y][x]; y is up, the camera looks down -z.
struct VoxelGrid {
    int size = 0;
    std::vector<float> cells;

    VoxelGrid() = default;
    explicit VoxelGrid(int v) : size(v), cells(static_cast<std::size_t>(v) * v * v, 0.0f) {}

    float& at(int x, int y, int z) { return cells[(static_cast<std::size_t>(z) * size + y) * size + x]; }
    float at(int x, int y, int z) const { return cells[(static_cast<std::size_t>(z) * size + y) * size + x]; }
    std::size_t occupied() const;
    bool operator==(const VoxelGrid&) const = default;
};

/// C x H x W, values in [0,1].
struct Image {
    int channels = kImageChannels;
    int size = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int c, int s, float fill) : channels(c), size(s), pixels(static_cast<std::size_t>(c) * s * s, fill) {}

    float& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * size + y) * size + x]; }
    float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * size + y) * size + x]; }
    bool operator==(const Image&) const = default;
};

/// Parametric shape grammar for each class: plane, car, monitor, lamp,
/// telephone, boat. Jitter is drawn from `instance_seed`; the result is the
/// largest 6-connected component and fits the unit cylinder about y.
VoxelGrid generate_shape(int class_id, std::uint64_t instance_seed, int voxel_size);

inline constexpr float kBackground = 1.0f;

/// Rotates about y by `azimuth_deg` (a multiple of 45) with nearest-neighbour
/// resampling, then projects orthographically along z. Nearer surfaces are
/// brighter; empty pixels are white.
Image render_view(const VoxelGrid& grid, int azimuth_deg, int image_size);

// Pixels that are not pure background.
std::vector<std::uint8_t> object_mask(const Image& image);

enum class Background { none, textured_clutter };

struct DomainProfile {
    std::string name = "source";
    Background background = Background::none;
    double blur_sigma = 0;
    double noise_sigma = 0;
    double resolution_scale = 1;

    void validate() const;
    bool is_identity() const;
    nlohmann::json to_json() const;
    static DomainProfile from_json(const nlohmann::json& j);
    bool operator==(const DomainProfile&) const = default;

    static DomainProfile source();
    static DomainProfile lab();        // blur + low resolution
    static DomainProfile wild();       // cluttered background + blur
    static DomainProfile segmented();  // mild noise only
    static DomainProfile by_name(std::string_view name);
};

/// Background paste (behind the object mask) -> Gaussian blur -> down/up
/// resampling -> clipped Gaussian noise. The identity profile returns the
/// input unchanged.
Image apply_domain_shift(const Image& image, const DomainProfile& profile, Rng& rng);

enum class Domain : int { source = 0, target = 1 };
std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

struct Sample {
    Image image;
    VoxelGrid gt;
    int class_label = 0;
    Domain domain = Domain::source;
    int instance_id = 0;
    int azimuth_deg = 0;
};

struct GenConfig {
    int classes = kShapeClasses;
    int instances = 10;
    int views = 8;
    int voxel_size = 16;
    int image_size = 32;
    std::uint64_t seed = 0;
    DomainProfile target = DomainProfile::wild();
    double train_fraction = 0.8;

    void validate() const;
    std::vector<int> azimuths() const;
    std::size_t record_count() const { return static_cast<std::size_t>(classes) * instances * views * 2; }
};

inline constexpr std::string_view kDatasetFormat = "vxds-1";

struct SampleRecord {
    std::string blob;  // relative to the dataset root
    int class_label = 0;
    Domain domain = Domain::source;
    int instance_id = 0;
    int azimuth_deg = 0;
    bool train = true;
    std::uint32_t crc32 = 0;
    std::uint64_t bytes = 0;
};

struct DatasetManifest {
    std::string format{kDatasetFormat};
    GenConfig config;
    std::vector<std::string> class_names;
    std::vector<SampleRecord> records;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class VersionError : public DatasetError {
public:
    using DatasetError::DatasetError;
};
class TruncatedBlobError : public DatasetError {
public:
    using DatasetError::DatasetError;
};
class ChecksumError : public DatasetError {
public:
    using DatasetError::DatasetError;
};

/// Instance ids assigned to the training split of `class_id` (the rest are test).
std::vector<int> train_instances(const GenConfig& config, int class_id);

/// Writes `manifest.json` and `blobs/NNNN.bin` under `out`. Instances are
/// generated on up to `threads` workers (0 = hardware concurrency); output
/// bytes do not depend on the thread count.
DatasetManifest build_dataset(const GenConfig& config, const std::filesystem::path& out, int threads = 0);

class Dataset {
public:
    static Dataset open(const std::filesystem::path& root);

    const DatasetManifest& manifest() const { return manifest_; }
    const std::filesystem::path& root() const { return root_; }
    std::size_t size() const { return manifest_.records.size(); }

    // Reads and verifies one blob.
    Sample load(std::size_t index) const;
    std::vector<Sample> load_all() const;

private:
    std::filesystem::path root_;
    DatasetManifest manifest_;
};

enum class Split { train, test, all };
Split split_from_string(std::string_view s);

std::vector<std::size_t> select(const std::vector<Sample>& samples, const DatasetManifest& manifest, Split split,
                                Domain domain);

/// A batch as network inputs. `gt` is built only when requested.
struct Batch {
    Tensor images;  // [n,C,H,W]
    Tensor gt;      // [n,V,V,V] or undefined
    std::vector<int> labels;
    std::vector<int> tags;
};
Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, bool with_gt);

/// One training step: a source half and an equally sized target half.
struct MixedStep {
    std::vector<std::size_t> source;
    std::vector<std::size_t> target;
};

/// Each epoch visits every source sample once in shuffled order, in chunks of
/// `half_batch`; each chunk is paired with as many target samples drawn
/// uniformly with replacement. Chunks smaller than 2 are dropped.
class MixedBatchLoader {
public:
    MixedBatchLoader(std::vector<std::size_t> source, std::vector<std::size_t> target, int half_batch);
    std::vector<MixedStep> epoch(Rng& rng) const;

private:
    std::vector<std::size_t> source_;
    std::vector<std::size_t> target_;
    int half_batch_;
};

}  // namespace vxda::data
