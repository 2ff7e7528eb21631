#include "vxda/model.hpp"

#include <bit>
#include <cmath>

#include "binary_io.hpp"
#include "vxda/losses.hpp"
#include "vxda/rng.hpp"

namespace vxda::nn {

namespace {

bool power_of_two_at_least(int v, int lo) { return v >= lo && std::has_single_bit(static_cast<unsigned>(v)); }

int log2i(int v) { return std::countr_zero(static_cast<unsigned>(v)); }

}  // namespace

void NetworkConfig::validate() const {
    if (!power_of_two_at_least(image_size, 8)) {
        throw std::invalid_argument("image_size must be a power of two >= 8, got " + std::to_string(image_size));
    }
    if (!power_of_two_at_least(voxel_size, 8)) {
        throw std::invalid_argument("voxel_size must be a power of two >= 8, got " + std::to_string(voxel_size));
    }
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (latent_dim < 8) throw std::invalid_argument("latent_dim must be >= 8");
    if (image_channels < 1) throw std::invalid_argument("image_channels must be >= 1");
    if (encoder_widths.empty() || decoder_widths.empty()) throw std::invalid_argument("channel widths must be non-empty");
    for (int w : encoder_widths) if (w < 1) throw std::invalid_argument("encoder widths must be positive");
    for (int w : decoder_widths) if (w < 1) throw std::invalid_argument("decoder widths must be positive");
    if (refiner_width < 1 || domain_hidden < 1) throw std::invalid_argument("refiner_width and domain_hidden must be positive");
}

int NetworkConfig::encoder_stages() const { return log2i(image_size) - 2; }
int NetworkConfig::decoder_stages() const { return log2i(voxel_size) - 1; }

int NetworkConfig::encoder_width(int stage) const {
    return encoder_widths[std::min<std::size_t>(static_cast<std::size_t>(stage), encoder_widths.size() - 1)];
}
int NetworkConfig::decoder_width(int stage) const {
    return decoder_widths[std::min<std::size_t>(static_cast<std::size_t>(stage), decoder_widths.size() - 1)];
}

nlohmann::json NetworkConfig::to_json() const {
    return {
        {"image_size", image_size},
        {"image_channels", image_channels},
        {"voxel_size", voxel_size},
        {"num_classes", num_classes},
        {"latent_dim", latent_dim},
        {"refiner_enabled", refiner_enabled},
        {"encoder_widths", encoder_widths},
        {"decoder_widths", decoder_widths},
        {"refiner_width", refiner_width},
        {"domain_hidden", domain_hidden},
    };
}

NetworkConfig NetworkConfig::from_json(const nlohmann::json& j) {
    NetworkConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "image_size") c.image_size = value.get<int>();
        else if (key == "image_channels") c.image_channels = value.get<int>();
        else if (key == "voxel_size") c.voxel_size = value.get<int>();
        else if (key == "num_classes") c.num_classes = value.get<int>();
        else if (key == "latent_dim") c.latent_dim = value.get<int>();
        else if (key == "refiner_enabled") c.refiner_enabled = value.get<bool>();
        else if (key == "encoder_widths") c.encoder_widths = value.get<std::vector<int>>();
        else if (key == "decoder_widths") c.decoder_widths = value.get<std::vector<int>>();
        else if (key == "refiner_width") c.refiner_width = value.get<int>();
        else if (key == "domain_hidden") c.domain_hidden = value.get<int>();
        else throw std::invalid_argument("unknown network config key '" + key + "'");
    }
    c.validate();
    return c;
}

std::string_view to_string(Submodule s) {
    switch (s) {
        case Submodule::encoder: return "encoder";
        case Submodule::decoder: return "decoder";
        case Submodule::refiner: return "refiner";
        case Submodule::domain_head: return "domain_head";
        case Submodule::class_head: return "class_head";
    }
    return "unknown";
}

template <typename T>
void ModelParams<T>::add(std::string name, Submodule owner, BasicTensor<T> tensor, bool trainable) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(trainable);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), owner, std::move(tensor), trainable});
}

template <typename T>
BasicTensor<T>& ModelParams<T>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
}

template <typename T>
const BasicTensor<T>& ModelParams<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
}

template <typename T>
BatchNormStats<T> ModelParams<T>::batchnorm_stats(const std::string& prefix) const {
    return {at(prefix + ".running_mean"), at(prefix + ".running_var")};
}

template <typename T>
void ModelParams<T>::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
    return cast<T>();
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    for (const auto& e : entries_) out.add(e.name, e.owner, e.tensor.template cast<U>(), e.trainable);
    return out;
}

namespace {

template <typename T>
class Builder {
public:
    Builder(ModelParams<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

    void weight(const std::string& name, Submodule owner, Shape shape, std::int64_t fan_in) {
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::vector<T> values(static_cast<std::size_t>(numel(shape)));
        for (auto& v : values) v = static_cast<T>(rng_.uniform(-bound, bound));
        params_.add(name, owner, BasicTensor<T>::from(std::move(shape), std::move(values)), true);
    }
    void bias(const std::string& name, Submodule owner, std::int64_t n) {
        params_.add(name, owner, BasicTensor<T>::zeros({n}), true);
    }
    void batchnorm(const std::string& prefix, Submodule owner, std::int64_t channels) {
        params_.add(prefix + ".gamma", owner, BasicTensor<T>::full({channels}, T(1)), true);
        params_.add(prefix + ".beta", owner, BasicTensor<T>::zeros({channels}), true);
        params_.add(prefix + ".running_mean", owner, BasicTensor<T>::zeros({channels}), false);
        params_.add(prefix + ".running_var", owner, BasicTensor<T>::full({channels}, T(1)), false);
    }
    void dense(const std::string& prefix, Submodule owner, std::int64_t in, std::int64_t out) {
        weight(prefix + ".weight", owner, {in, out}, in);
        bias(prefix + ".bias", owner, out);
    }

private:
    ModelParams<T>& params_;
    Rng rng_;
};

constexpr int kEncoderKernel = 3;
constexpr int kVolumeKernel = 4;

std::string stage(const char* prefix, int i) { return std::string(prefix) + std::to_string(i); }

}  // namespace

template <typename T>
ModelParams<T> init_params(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams<T> params;
    Builder<T> b(params, seed);
    using S = Submodule;

    std::int64_t channels = config.image_channels;
    for (int s = 0; s < config.encoder_stages(); ++s) {
        const std::int64_t w = config.encoder_width(s);
        b.weight(stage("encoder.conv", s) + ".weight", S::encoder, {w, channels, kEncoderKernel, kEncoderKernel},
                 channels * kEncoderKernel * kEncoderKernel);
        b.batchnorm(stage("encoder.bn", s), S::encoder, w);
        channels = w;
    }
    const std::int64_t d = config.latent_dim;
    b.dense("encoder.fc", S::encoder, channels * 16, d);

    const std::int64_t seed_channels = config.decoder_width(0);
    b.dense("decoder.fc", S::decoder, d, seed_channels * 8);
    b.batchnorm("decoder.bn0", S::decoder, seed_channels);
    channels = seed_channels;
    const std::int64_t taps = kVolumeKernel * kVolumeKernel * kVolumeKernel;
    for (int s = 0; s < config.decoder_stages(); ++s) {
        const std::int64_t w = config.decoder_width(s + 1);
        b.weight(stage("decoder.deconv", s) + ".weight", S::decoder, {channels, w, kVolumeKernel, kVolumeKernel, kVolumeKernel},
                 channels * taps);
        b.batchnorm(stage("decoder.bn", s + 1), S::decoder, w);
        channels = w;
    }
    b.weight("decoder.out.weight", S::decoder, {1, channels, 1, 1, 1}, channels);
    b.bias("decoder.out.bias", S::decoder, 1);

    if (config.refiner_enabled) {
        const std::int64_t r = config.refiner_width;
        b.weight("refiner.down.weight", S::refiner, {r, 1, kVolumeKernel, kVolumeKernel, kVolumeKernel}, taps);
        b.batchnorm("refiner.bn_down", S::refiner, r);
        b.weight("refiner.up.weight", S::refiner, {r, r, kVolumeKernel, kVolumeKernel, kVolumeKernel}, r * taps);
        b.batchnorm("refiner.bn_up", S::refiner, r);
        b.weight("refiner.out.weight", S::refiner, {1, r + 1, 1, 1, 1}, r + 1);
        b.bias("refiner.out.bias", S::refiner, 1);
    }

    b.dense("domain_head.fc1", S::domain_head, d, config.domain_hidden);
    b.dense("domain_head.fc2", S::domain_head, config.domain_hidden, 1);

    const std::int64_t v3 = static_cast<std::int64_t>(config.voxel_size) * config.voxel_size * config.voxel_size;
    b.dense("class_head.fc1", S::class_head, v3, kClassHidden1);
    b.dense("class_head.fc2", S::class_head, kClassHidden1, kClassHidden2);
    b.dense("class_head.fc3", S::class_head, kClassHidden2, config.num_classes);
    return params;
}

namespace {

template <typename T>
BasicTensor<T> bn(const BasicTensor<T>& x, ModelParams<T>& params, const std::string& prefix, Mode mode) {
    auto stats = params.batchnorm_stats(prefix);
    return batchnorm(x, params.at(prefix + ".gamma"), params.at(prefix + ".beta"), mode, stats);
}

template <typename T>
BasicTensor<T> dense(const BasicTensor<T>& x, ModelParams<T>& params, const std::string& prefix) {
    return linear(x, params.at(prefix + ".weight"), params.at(prefix + ".bias"));
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

}  // namespace

template <typename T>
BasicTensor<T> encode(const BasicTensor<T>& images, const NetworkConfig& config, ModelParams<T>& params, Mode mode) {
    require(images.rank() == 4 && images.dim(1) == config.image_channels && images.dim(2) == config.image_size &&
                images.dim(3) == config.image_size,
            "encode: expected images [n," + std::to_string(config.image_channels) + "," +
                std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "], got " +
                vxda::to_string(images.shape()));
    auto x = images;
    for (int s = 0; s < config.encoder_stages(); ++s) {
        x = conv2d(x, params.at(stage("encoder.conv", s) + ".weight"), 2, 1);
        x = elu(bn(x, params, stage("encoder.bn", s), mode));
    }
    const auto n = x.dim(0);
    x = reshape(x, {n, x.numel() / n});
    return dense(x, params, "encoder.fc");
}

template <typename T>
BasicTensor<T> decode(const BasicTensor<T>& latent, const NetworkConfig& config, ModelParams<T>& params, Mode mode) {
    require(latent.rank() == 2 && latent.dim(1) == config.latent_dim,
            "decode: expected latent [n," + std::to_string(config.latent_dim) + "], got " + vxda::to_string(latent.shape()));
    const auto n = latent.dim(0);
    auto h = dense(latent, params, "decoder.fc");
    h = reshape(h, {n, config.decoder_width(0), 2, 2, 2});
    h = relu(bn(h, params, "decoder.bn0", mode));
    for (int s = 0; s < config.decoder_stages(); ++s) {
        h = conv_transpose3d(h, params.at(stage("decoder.deconv", s) + ".weight"), 2, 1);
        h = relu(bn(h, params, stage("decoder.bn", s + 1), mode));
    }
    h = add_channel_bias(conv3d(h, params.at("decoder.out.weight"), 1, 0), params.at("decoder.out.bias"));
    const std::int64_t v = config.voxel_size;
    return reshape(sigmoid(h), {n, v, v, v});
}

template <typename T>
BasicTensor<T> refine(const BasicTensor<T>& voxels, const NetworkConfig& config, ModelParams<T>& params, Mode mode) {
    const std::int64_t v = config.voxel_size;
    require(voxels.rank() == 4 && voxels.dim(1) == v && voxels.dim(2) == v && voxels.dim(3) == v,
            "refine: expected voxels [n," + std::to_string(v) + "," + std::to_string(v) + "," + std::to_string(v) +
                "], got " + vxda::to_string(voxels.shape()));
    if (!config.refiner_enabled) return voxels;
    const auto n = voxels.dim(0);
    auto x = reshape(voxels, {n, 1, v, v, v});
    auto down = elu(bn(conv3d(x, params.at("refiner.down.weight"), 2, 1), params, "refiner.bn_down", mode));
    auto up = relu(bn(conv_transpose3d(down, params.at("refiner.up.weight"), 2, 1), params, "refiner.bn_up", mode));
    auto skip = concat<T>({up, x}, 1);
    auto out = add_channel_bias(conv3d(skip, params.at("refiner.out.weight"), 1, 0), params.at("refiner.out.bias"));
    return reshape(sigmoid(out), {n, v, v, v});
}

template <typename T>
BasicTensor<T> classify_domain(const BasicTensor<T>& latent, const NetworkConfig& config, ModelParams<T>& params,
                               double grl_lambda) {
    require(latent.rank() == 2 && latent.dim(1) == config.latent_dim,
            "classify_domain: expected latent [n," + std::to_string(config.latent_dim) + "], got " +
                vxda::to_string(latent.shape()));
    auto h = relu(dense(losses::grl(latent, grl_lambda), params, "domain_head.fc1"));
    return dense(h, params, "domain_head.fc2");
}

template <typename T>
BasicTensor<T> classify_voxel(const BasicTensor<T>& voxels, const NetworkConfig& config, ModelParams<T>& params) {
    const std::int64_t v = config.voxel_size;
    require(voxels.rank() == 4 && voxels.dim(1) == v && voxels.dim(2) == v && voxels.dim(3) == v,
            "classify_voxel: expected voxels [n," + std::to_string(v) + "," + std::to_string(v) + "," +
                std::to_string(v) + "], got " + vxda::to_string(voxels.shape()));
    const auto n = voxels.dim(0);
    auto h = reshape(voxels, {n, v * v * v});
    h = relu(dense(h, params, "class_head.fc1"));
    h = relu(dense(h, params, "class_head.fc2"));
    return dense(h, params, "class_head.fc3");
}

template <typename T>
ForwardOutputs<T> forward_full(const BasicTensor<T>& images, const NetworkConfig& config, ModelParams<T>& params,
                               double grl_lambda, Mode mode) {
    ForwardOutputs<T> out;
    out.latent = encode(images, config, params, mode);
    out.voxel_raw = decode(out.latent, config, params, mode);
    out.voxel_refined = refine(out.voxel_raw, config, params, mode);
    out.domain_logits = classify_domain(out.latent, config, params, grl_lambda);
    out.class_logits = classify_voxel(out.voxel_refined, config, params);
    return out;
}

// --- checkpoint -------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'V', 'X', 'D', 'A'};
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
    io::Writer w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    const nlohmann::json header = {{"config", checkpoint.config.to_json()}, {"meta", checkpoint.meta}};
    const std::string text = header.dump();
    w.u32(static_cast<std::uint32_t>(text.size()));
    w.str(text);
    const auto& entries = checkpoint.params.entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        w.u32(static_cast<std::uint32_t>(e.name.size()));
        w.str(e.name);
        const auto& shape = e.tensor.shape();
        w.u32(static_cast<std::uint32_t>(shape.size()));
        for (auto extent : shape) w.u64(static_cast<std::uint64_t>(extent));
        for (float v : e.tensor.data()) w.f32(v);
    }
    return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes);
    try {
        char magic[4];
        r.bytes(magic, 4);
        if (!std::equal(magic, magic + 4, kMagic)) throw CheckpointError("not a checkpoint (bad magic)");
        const auto version = r.u32();
        if (version != kCheckpointVersion) {
            throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
        }
        const auto header = nlohmann::json::parse(r.str(r.u32()));
        Checkpoint ck;
        ck.config = NetworkConfig::from_json(header.at("config"));
        ck.meta = header.value("meta", nlohmann::json::object());
        // The expected layout comes from the config; every record must match it.
        ck.params = init_params<float>(ck.config, 0);
        const auto count = r.u32();
        if (count != ck.params.size()) {
            throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config expects " +
                                  std::to_string(ck.params.size()));
        }
        for (auto& e : ck.params.entries()) {
            const auto name = r.str(r.u32());
            if (name != e.name) throw CheckpointError("unexpected tensor '" + name + "', expected '" + e.name + "'");
            const auto rank = r.u32();
            Shape shape;
            for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(r.u64()));
            if (shape != e.tensor.shape()) {
                throw CheckpointError("tensor '" + name + "' has shape " + vxda::to_string(shape) + ", expected " +
                                      vxda::to_string(e.tensor.shape()));
            }
            auto dst = e.tensor.mutable_data();
            for (auto& v : dst) v = r.f32();
        }
        if (r.remaining() != 0) throw CheckpointError("trailing bytes after checkpoint records");
        return ck;
    } catch (const std::out_of_range&) {
        throw CheckpointError("checkpoint is truncated");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
    io::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(io::read_file(path)); }

#define VXDA_INSTANTIATE_MODEL(T)                                                                                   \
    template class ModelParams<T>;                                                                                  \
    template ModelParams<T> init_params<T>(const NetworkConfig&, std::uint64_t);                                   \
    template BasicTensor<T> encode(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&, Mode);            \
    template BasicTensor<T> decode(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&, Mode);            \
    template BasicTensor<T> refine(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&, Mode);            \
    template BasicTensor<T> classify_domain(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&, double); \
    template BasicTensor<T> classify_voxel(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&);          \
    template ForwardOutputs<T> forward_full(const BasicTensor<T>&, const NetworkConfig&, ModelParams<T>&, double, Mode);

VXDA_INSTANTIATE_MODEL(float)
VXDA_INSTANTIATE_MODEL(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;

#undef VXDA_INSTANTIATE_MODEL

}  // namespace vxda::nn
