#include "vxda/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "vxda/rng.hpp"

namespace vxda::train {

std::string_view to_string(Method m) {
    switch (m) {
        case Method::none: return "none";
        case Method::dann: return "dann";
        case Method::dann_class: return "dann+class";
        case Method::coral: return "coral";
        case Method::mmd: return "mmd";
    }
    return "?";
}

Method method_from_string(std::string_view s) {
    for (auto m : {Method::none, Method::dann, Method::dann_class, Method::coral, Method::mmd}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown method '" + std::string(s) + "' (expected none, dann, dann+class, coral or mmd)");
}

losses::LossWeights method_weights(Method m) {
    losses::LossWeights w;
    w.recon = 1;
    w.domain = w.cls = w.coral = w.mmd = 0;
    w.grl_lambda = kDefaultGrlLambda;
    switch (m) {
        case Method::none: break;
        case Method::dann: w.domain = 0.1; break;
        case Method::dann_class:
            w.domain = 0.1;
            w.cls = 0.1;
            break;
        case Method::coral: w.coral = 1; break;
        case Method::mmd: w.mmd = 1; break;
    }
    return w;
}

std::string_view to_string(GrlSchedule s) { return s == GrlSchedule::constant ? "constant" : "ramp"; }

GrlSchedule grl_schedule_from_string(std::string_view s) {
    if (s == "constant") return GrlSchedule::constant;
    if (s == "ramp") return GrlSchedule::ramp;
    throw std::invalid_argument("unknown grl schedule '" + std::string(s) + "' (expected constant or ramp)");
}

double grl_schedule(int epoch, int total_epochs, GrlSchedule mode, double lambda_max) {
    if (total_epochs < 1 || epoch < 0 || epoch >= total_epochs) throw std::out_of_range("grl_schedule: epoch out of range");
    if (mode == GrlSchedule::constant) return lambda_max;
    const double p = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return lambda_max * (2.0 / (1.0 + std::exp(-10.0 * p)) - 1.0);
}

// --- Adam -------------------------------------------------------------------

template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                 const AdamConfig& config, const std::string& name) {
    if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
        throw ShapeError("adam: size mismatch for '" + name + "'");
    }
    if (t < 1) throw std::invalid_argument("adam: step index must be >= 1");
    for (T g : grad) {
        if (!std::isfinite(g)) throw losses::NumericalError(name, "non-finite gradient for parameter '" + name + "'");
    }
    const T b1 = static_cast<T>(config.beta1), b2 = static_cast<T>(config.beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(config.beta1, static_cast<double>(t)));
    const T c2 = static_cast<T>(1.0 - std::pow(config.beta2, static_cast<double>(t)));
    const T lr = static_cast<T>(config.lr), eps = static_cast<T>(config.eps);
    for (std::size_t i = 0; i < theta.size(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * grad[i];
        v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
        const T mhat = m[i] / c1, vhat = v[i] / c2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

template <typename T>
Adam<T>::Adam(const nn::ModelParams<T>& params, AdamConfig config) : config_(config) {
    for (const auto& e : params.entries()) {
        const auto n = e.trainable ? static_cast<std::size_t>(e.tensor.numel()) : 0;
        m_.emplace_back(n, T(0));
        v_.emplace_back(n, T(0));
    }
}

template <typename T>
void Adam<T>::step(nn::ModelParams<T>& params) {
    auto& entries = params.entries();
    if (entries.size() != m_.size()) throw std::invalid_argument("adam: parameter set changed");
    ++t_;
    for (std::size_t k = 0; k < entries.size(); ++k) {
        auto& e = entries[k];
        if (!e.trainable || !e.tensor.has_grad()) continue;
        adam_update<T>(e.tensor.mutable_data(), e.tensor.grad(), m_[k], v_[k], t_, config_, e.name);
    }
}

template void adam_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                 std::int64_t, const AdamConfig&, const std::string&);
template void adam_update<double>(std::span<double>, std::span<const double>, std::span<double>, std::span<double>,
                                  std::int64_t, const AdamConfig&, const std::string&);
template class Adam<float>;
template class Adam<double>;

// --- config -----------------------------------------------------------------

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 4 || batch_size % 2 != 0) throw std::invalid_argument("batch size must be even and >= 4");
    if (!(adam.lr > 0) || !std::isfinite(adam.lr)) throw std::invalid_argument("learning rate must be positive");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1) || !(adam.eps > 0)) {
        throw std::invalid_argument("adam hyperparameters out of range");
    }
    if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
    method_from_string(method);
    weights.validate();
    network.validate();
}

void TrainConfig::apply_method(Method m) {
    const double lambda = weights.grl_lambda;
    method = std::string(to_string(m));
    weights = method_weights(m);
    weights.grl_lambda = lambda;
}

nlohmann::json TrainConfig::to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"method", method},
            {"weights",
             {{"recon", weights.recon},
              {"domain", weights.domain},
              {"cls", weights.cls},
              {"coral", weights.coral},
              {"mmd", weights.mmd},
              {"grl_lambda", weights.grl_lambda}}},
            {"grl_schedule", std::string(to_string(grl))},
            {"seed", seed},
            {"eval_every", eval_every},
            {"checkpoint_every", checkpoint_every},
            {"network", network.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("method")) c.apply_method(method_from_string(j.at("method").get<std::string>()));
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "lr") c.adam.lr = value.get<double>();
        else if (key == "beta1") c.adam.beta1 = value.get<double>();
        else if (key == "beta2") c.adam.beta2 = value.get<double>();
        else if (key == "eps") c.adam.eps = value.get<double>();
        else if (key == "method") continue;
        else if (key == "weights") {
            for (const auto& [wk, wv] : value.items()) {
                const double w = wv.get<double>();
                if (wk == "recon") c.weights.recon = w;
                else if (wk == "domain") c.weights.domain = w;
                else if (wk == "cls") c.weights.cls = w;
                else if (wk == "coral") c.weights.coral = w;
                else if (wk == "mmd") c.weights.mmd = w;
                else if (wk == "grl_lambda") c.weights.grl_lambda = w;
                else throw std::invalid_argument("unknown weights key '" + wk + "'");
            }
        } else if (key == "grl_schedule") c.grl = grl_schedule_from_string(value.get<std::string>());
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "eval_every") c.eval_every = value.get<int>();
        else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
        else if (key == "network") c.network = nn::NetworkConfig::from_json(value);
        else throw std::invalid_argument("unknown train config key '" + key + "'");
    }
    c.validate();
    return c;
}

nn::NetworkConfig network_for(const data::DatasetManifest& manifest, nn::NetworkConfig base) {
    base.image_size = manifest.config.image_size;
    base.image_channels = 3;
    base.voxel_size = manifest.config.voxel_size;
    base.num_classes = manifest.config.classes;
    base.validate();
    return base;
}

// --- log --------------------------------------------------------------------

std::string TrainLog::csv_header() {
    return "epoch,loss_recon,loss_domain,loss_class,loss_coral,loss_mmd,iou_source,iou_target,domain_acc\n";
}

std::string TrainLog::csv_row(const EpochRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%d,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g,%.8g\n", r.epoch, r.losses.recon,
                  r.losses.domain, r.losses.cls, r.losses.coral, r.losses.mmd, r.iou_source, r.iou_target, r.domain_acc);
    return buf;
}

std::string TrainLog::to_csv() const {
    std::string out = csv_header();
    for (const auto& r : records) out += csv_row(r);
    return out;
}

// --- training ---------------------------------------------------------------

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kLoaderStream = 0x10AD;

void append_file(const std::filesystem::path& path, const std::string& text, bool truncate) {
    std::ofstream f(path, std::ios::binary | (truncate ? std::ios::trunc : std::ios::app));
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    f.flush();
    if (!f) throw std::runtime_error("write failed for " + path.string());
}

struct HeldOut {
    std::vector<std::size_t> source, target;
};

struct EvalRow {
    metrics::IoUReport source, target;
    double domain_acc = 0;
};

EvalRow evaluate_split(const nn::NetworkConfig& network, nn::ModelParams<float>& params,
                       const std::vector<data::Sample>& samples, const data::DatasetManifest& manifest,
                       const HeldOut& split, const std::string& method, double threshold) {
    EvalRow row;
    const auto ps = metrics::predict(network, params, samples, split.source);
    const auto pt = metrics::predict(network, params, samples, split.target);
    row.source = metrics::iou_report(ps, samples, split.source, manifest.class_names, method, threshold);
    row.target = metrics::iou_report(pt, samples, split.target, manifest.class_names, method, threshold);
    std::vector<float> logits(ps.domain_logits);
    logits.insert(logits.end(), pt.domain_logits.begin(), pt.domain_logits.end());
    std::vector<int> tags(ps.domain_logits.size(), 0);
    tags.resize(logits.size(), 1);
    row.domain_acc = metrics::domain_confusion_accuracy(logits, tags);
    return row;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<data::Sample>& samples,
                  const data::DatasetManifest& manifest, const std::filesystem::path& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    config.validate();
    if (samples.size() != manifest.records.size()) throw std::invalid_argument("samples do not match the manifest");
    const auto network = network_for(manifest, config.network);
    const auto& w = config.weights;
    const bool with_target = w.uses_target();

    const auto train_source = data::select(samples, manifest, data::Split::train, data::Domain::source);
    const auto train_target = data::select(samples, manifest, data::Split::train, data::Domain::target);
    const HeldOut held_out{data::select(samples, manifest, data::Split::test, data::Domain::source),
                           data::select(samples, manifest, data::Split::test, data::Domain::target)};
    if (held_out.source.empty() || held_out.target.empty()) throw std::invalid_argument("dataset has no test split");
    const data::MixedBatchLoader loader(train_source, train_target, config.batch_size / 2);

    auto params = nn::init_params<float>(network, mix_seed(config.seed, kInitStream));
    Adam<float> adam(params, config.adam);
    Rng rng(mix_seed(config.seed, kLoaderStream));

    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        append_file(out_dir / "train_log.csv", TrainLog::csv_header(), true);
    }
    auto snapshot = [&](int epoch) {
        nn::Checkpoint ck{network, params.clone(), {}};
        ck.meta = {{"epoch", epoch}, {"method", config.method}, {"seed", config.seed}, {"train", config.to_json()}};
        return ck;
    };

    TrainResult result;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lambda = grl_schedule(epoch, config.epochs, config.grl, w.grl_lambda);
        const auto steps = loader.epoch(rng);
        losses::LossReport mean;
        for (const auto& step : steps) {
            const auto src = data::make_batch(samples, step.source, true);
            params.zero_grad();

            // Each domain is normalised with its own batch statistics.
            losses::LossParts<float> parts;
            const auto zs = nn::encode(src.images, network, params, Mode::train);
            const auto raw_s = nn::decode(zs, network, params, Mode::train);
            const auto ref_s = nn::refine(raw_s, network, params, Mode::train);
            parts.recon = scale(add(losses::recon_loss(raw_s, src.gt), losses::recon_loss(ref_s, src.gt)), 0.5);
            if (with_target) {
                const auto tgt = data::make_batch(samples, step.target, false);
                const auto zt = nn::encode(tgt.images, network, params, Mode::train);
                if (w.domain > 0) {
                    std::vector<int> tags = src.tags;
                    tags.insert(tags.end(), tgt.tags.begin(), tgt.tags.end());
                    const auto logits = nn::classify_domain(concat<float>({zs, zt}, 0), network, params, lambda);
                    parts.domain = losses::domain_loss(logits, tags);
                }
                if (w.cls > 0) {
                    const auto ref_t = nn::refine(nn::decode(zt, network, params, Mode::train), network, params, Mode::train);
                    std::vector<int> labels = src.labels;
                    labels.insert(labels.end(), tgt.labels.begin(), tgt.labels.end());
                    parts.cls = losses::class_loss(nn::classify_voxel(concat<float>({ref_s, ref_t}, 0), network, params), labels);
                }
                if (w.coral > 0) parts.coral = losses::coral_loss(zs, zt);
                if (w.mmd > 0) parts.mmd = losses::mmd_loss(zs, zt, losses::KernelSpec::rbf_median());
            } else if (w.cls > 0) {
                parts.cls = losses::class_loss(nn::classify_voxel(ref_s, network, params), src.labels);
            }
            const auto loss = losses::composite_loss(parts, w);
            loss.total.backward();
            adam.step(params);

            mean.recon += loss.report.recon;
            mean.cls += loss.report.cls;
            mean.domain += loss.report.domain;
            mean.coral += loss.report.coral;
            mean.mmd += loss.report.mmd;
            mean.total += loss.report.total;
        }
        const auto count = static_cast<double>(std::max<std::size_t>(steps.size(), 1));
        for (double* v : {&mean.recon, &mean.cls, &mean.domain, &mean.coral, &mean.mmd, &mean.total}) *v /= count;
        mean.weights = w;

        const int done = epoch + 1;
        const bool last = done == config.epochs;
        if (done % config.eval_every == 0 || last) {
            const auto row = evaluate_split(network, params, samples, manifest, held_out, config.method,
                                            metrics::kDefaultThreshold);
            EpochRecord rec{done, mean, row.source.overall, row.target.overall, row.domain_acc};
            result.log.records.push_back(rec);
            if (!out_dir.empty()) append_file(out_dir / "train_log.csv", TrainLog::csv_row(rec), false);
            if (on_epoch) on_epoch(rec);
        }
        if (!out_dir.empty() && config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && !last) {
            char name[64];
            std::snprintf(name, sizeof name, "checkpoint_e%03d.bin", done);
            nn::save_checkpoint(out_dir / name, snapshot(done));
        }
    }
    result.checkpoint = snapshot(config.epochs);
    if (!out_dir.empty()) nn::save_checkpoint(out_dir / "checkpoint.bin", result.checkpoint);
    return result;
}

void check_compatible(const nn::NetworkConfig& net, const data::DatasetManifest& manifest) {
    const auto& g = manifest.config;
    if (net.image_size != g.image_size || net.voxel_size != g.voxel_size || net.num_classes != g.classes) {
        throw ConfigMismatchError("checkpoint expects " + std::to_string(net.image_size) + "px images, " +
                                  std::to_string(net.voxel_size) + "^3 voxels and " + std::to_string(net.num_classes) +
                                  " classes; dataset has " + std::to_string(g.image_size) + "px, " +
                                  std::to_string(g.voxel_size) + "^3 and " + std::to_string(g.classes));
    }
}

EvalResult evaluate(const nn::Checkpoint& checkpoint, const std::vector<data::Sample>& samples,
                    const data::DatasetManifest& manifest, const metrics::EvalConfig& config) {
    config.validate();
    const auto& net = checkpoint.config;
    check_compatible(net, manifest);
    const std::string method = checkpoint.meta.value("method", std::string("unknown"));
    auto params = checkpoint.params.clone();

    EvalResult result;
    std::vector<float> logits;
    std::vector<int> tags;
    auto run = [&](data::Domain d) {
        const auto idx = data::select(samples, manifest, config.split, d);
        if (idx.empty()) throw std::invalid_argument("no " + std::string(data::to_string(d)) + " samples in the split");
        const auto p = metrics::predict(net, params, samples, idx);
        result.reports.emplace_back(std::string(data::to_string(d)),
                                    metrics::iou_report(p, samples, idx, manifest.class_names, method, config.threshold));
        logits.insert(logits.end(), p.domain_logits.begin(), p.domain_logits.end());
        tags.resize(logits.size(), d == data::Domain::target ? 1 : 0);
    };
    if (config.domain != metrics::DomainSelector::target) run(data::Domain::source);
    if (config.domain != metrics::DomainSelector::source) run(data::Domain::target);
    if (config.domain == metrics::DomainSelector::both) result.domain_acc = metrics::domain_confusion_accuracy(logits, tags);
    return result;
}

}  // namespace vxda::train
