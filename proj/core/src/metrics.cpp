#include "vxda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace vxda::metrics {

double iou(std::span<const float> pred, std::span<const float> gt, double threshold) {
    if (pred.size() != gt.size()) {
        throw ShapeError("iou: prediction has " + std::to_string(pred.size()) + " cells, ground truth " +
                         std::to_string(gt.size()));
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] > threshold;
        const bool g = gt[i] > 0.5f;
        inter += p && g;
        uni += p || g;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

DomainSelector domain_selector_from_string(std::string_view s) {
    if (s == "source") return DomainSelector::source;
    if (s == "target") return DomainSelector::target;
    if (s == "both") return DomainSelector::both;
    throw std::invalid_argument("unknown domain '" + std::string(s) + "' (expected source, target or both)");
}

void EvalConfig::validate() const {
    if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("threshold must be in (0, 1)");
}

IoUReport summarize(std::span<const SampleIoU> samples, const std::vector<std::string>& class_names,
                    const std::string& method, double threshold) {
    if (samples.empty()) throw std::invalid_argument("iou report over an empty split");
    IoUReport r;
    r.method = method;
    r.threshold = threshold;
    r.classes.resize(class_names.size());
    for (std::size_t c = 0; c < class_names.size(); ++c) r.classes[c].name = class_names[c];
    double total = 0;
    for (const auto& s : samples) {
        if (s.class_label < 0 || static_cast<std::size_t>(s.class_label) >= class_names.size()) {
            throw std::out_of_range("sample class out of range");
        }
        auto& c = r.classes[static_cast<std::size_t>(s.class_label)];
        c.iou += s.iou;
        ++c.count;
        total += s.iou;
    }
    for (auto& c : r.classes) {
        if (c.count > 0) c.iou /= static_cast<double>(c.count);
    }
    r.count = samples.size();
    r.overall = total / static_cast<double>(samples.size());
    return r;
}

Predictions predict(const nn::NetworkConfig& config, nn::ModelParams<float>& params, const std::vector<data::Sample>& samples,
                    std::span<const std::size_t> indices, int batch_size) {
    NoGradGuard no_grad;
    Predictions p;
    p.count = static_cast<std::int64_t>(indices.size());
    p.voxel_cells = static_cast<std::int64_t>(config.voxel_size) * config.voxel_size * config.voxel_size;
    p.latent_dim = config.latent_dim;
    for (std::size_t pos = 0; pos < indices.size(); pos += static_cast<std::size_t>(batch_size)) {
        const auto chunk = indices.subspan(pos, std::min(indices.size() - pos, static_cast<std::size_t>(batch_size)));
        const auto batch = data::make_batch(samples, chunk, false);
        const auto out = nn::forward_full(batch.images, config, params, 0.0, Mode::eval);
        p.voxels.insert(p.voxels.end(), out.voxel_refined.data().begin(), out.voxel_refined.data().end());
        p.domain_logits.insert(p.domain_logits.end(), out.domain_logits.data().begin(), out.domain_logits.data().end());
        p.latent.insert(p.latent.end(), out.latent.data().begin(), out.latent.data().end());
    }
    return p;
}

IoUReport iou_report(const Predictions& predictions, const std::vector<data::Sample>& samples,
                     std::span<const std::size_t> indices, const std::vector<std::string>& class_names,
                     const std::string& method, double threshold) {
    if (static_cast<std::int64_t>(indices.size()) != predictions.count) {
        throw std::invalid_argument("predictions do not match the sample list");
    }
    std::vector<SampleIoU> per;
    per.reserve(indices.size());
    const auto cells = static_cast<std::size_t>(predictions.voxel_cells);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& s = samples.at(indices[i]);
        const std::span<const float> pred(predictions.voxels.data() + i * cells, cells);
        per.push_back({s.class_label, iou(pred, s.gt.cells, threshold)});
    }
    return summarize(per, class_names, method, threshold);
}

IoUReport iou_report(const nn::NetworkConfig& config, nn::ModelParams<float>& params, const std::vector<data::Sample>& samples,
                     std::span<const std::size_t> indices, const std::vector<std::string>& class_names,
                     const std::string& method, double threshold) {
    if (indices.empty()) throw std::invalid_argument("iou report over an empty split");
    return iou_report(predict(config, params, samples, indices), samples, indices, class_names, method, threshold);
}

double domain_confusion_accuracy(std::span<const float> logits, std::span<const int> tags) {
    if (logits.size() != tags.size()) throw std::invalid_argument("logit and tag counts differ");
    bool has_source = false, has_target = false;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        has_source |= tags[i] == 0;
        has_target |= tags[i] == 1;
        correct += (logits[i] > 0) == (tags[i] == 1);
    }
    if (!has_source || !has_target) throw std::invalid_argument("domain confusion needs both source and target samples");
    return static_cast<double>(correct) / static_cast<double>(logits.size());
}

// --- PCA --------------------------------------------------------------------

void symmetric_eigen(std::vector<double> a, int n, std::vector<double>& values, std::vector<double>& vectors) {
    const auto N = static_cast<std::size_t>(n);
    std::vector<double> v(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i) v[i * N + i] = 1;
    auto at = [&a, N](std::size_t i, std::size_t j) -> double& { return a[i * N + j]; };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0, diag = 0;
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < N; ++j) (i == j ? diag : off) += at(i, j) * at(i, j);
        if (off <= 1e-30 * std::max(diag, 1e-300)) break;
        for (std::size_t p = 0; p + 1 < N; ++p)
            for (std::size_t q = p + 1; q < N; ++q) {
                const double apq = at(p, q);
                if (apq == 0) continue;
                const double theta = (at(q, q) - at(p, p)) / (2 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
                const double c = 1 / std::sqrt(t * t + 1), s = t * c;
                for (std::size_t k = 0; k < N; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < N; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < N; ++k) {
                    const double vkp = v[k * N + p], vkq = v[k * N + q];
                    v[k * N + p] = c * vkp - s * vkq;
                    v[k * N + q] = s * vkp + c * vkq;
                }
            }
    }
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return at(x, x) > at(y, y); });
    values.resize(N);
    vectors.resize(N * N);
    for (std::size_t r = 0; r < N; ++r) {
        values[r] = at(order[r], order[r]);
        for (std::size_t k = 0; k < N; ++k) vectors[r * N + k] = v[k * N + order[r]];
    }
}

Embedding pca_embed(std::span<const double> features, std::int64_t rows, std::int64_t cols, int dims) {
    if (rows < 3) throw std::invalid_argument("pca_embed needs at least 3 rows, got " + std::to_string(rows));
    if (cols < 1 || dims < 1 || dims > cols) throw std::invalid_argument("pca_embed: bad dimensions");
    if (static_cast<std::int64_t>(features.size()) != rows * cols) throw ShapeError("pca_embed: feature size mismatch");
    const auto n = static_cast<std::size_t>(rows), d = static_cast<std::size_t>(cols);

    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += features[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> centred(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centred[i * d + j] = features[i * d + j] - mean[j];

    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = centred[i * d + a];
            for (std::size_t b = a; b < d; ++b) cov[a * d + b] += xa * centred[i * d + b];
        }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] /= static_cast<double>(n - 1);
            cov[b * d + a] = cov[a * d + b];
        }

    std::vector<double> values, vectors;
    symmetric_eigen(cov, static_cast<int>(d), values, vectors);

    Embedding e;
    e.rows = rows;
    e.dims = dims;
    for (std::size_t j = 0; j < d; ++j) e.total_variance += cov[j * d + j];
    for (int k = 0; k < dims; ++k) {
        std::vector<double> axis(vectors.begin() + static_cast<std::ptrdiff_t>(k * d),
                                 vectors.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
        std::size_t big = 0;
        for (std::size_t j = 1; j < d; ++j) {
            if (std::abs(axis[j]) > std::abs(axis[big])) big = j;
        }
        if (axis[big] < 0) {
            for (auto& x : axis) x = -x;
        }
        e.components.insert(e.components.end(), axis.begin(), axis.end());
        e.explained.push_back(std::max(0.0, values[static_cast<std::size_t>(k)]));
    }
    e.coords.assign(n * static_cast<std::size_t>(dims), 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < dims; ++k) {
            double acc = 0;
            for (std::size_t j = 0; j < d; ++j) acc += centred[i * d + j] * e.components[static_cast<std::size_t>(k) * d + j];
            e.coords[i * static_cast<std::size_t>(dims) + static_cast<std::size_t>(k)] = acc;
        }
    return e;
}

// --- export -----------------------------------------------------------------

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

std::string iou_csv(const IoUReport& report) {
    std::string out = "class,method,iou,count,threshold\n";
    auto row = [&](const std::string& name, double iou_value, std::size_t count) {
        out += name + "," + report.method + "," + fmt("%.6f", iou_value) + "," + std::to_string(count) + "," +
               fmt("%.2f", report.threshold) + "\n";
    };
    for (const auto& c : report.classes) row(c.name, c.iou, c.count);
    row("overall", report.overall, report.count);
    return out;
}

std::string iou_csv(const std::vector<std::pair<std::string, IoUReport>>& stanzas) {
    std::string out;
    for (const auto& [domain, report] : stanzas) out += "# domain=" + domain + "\n" + iou_csv(report);
    return out;
}

std::string embedding_csv(const Embedding& embedding, std::span<const int> tags, std::span<const std::string> classes) {
    const auto n = static_cast<std::size_t>(embedding.rows);
    if (tags.size() != n || classes.size() != n) throw std::invalid_argument("embedding_csv: label count mismatch");
    if (embedding.dims < 2) throw std::invalid_argument("embedding_csv needs two dimensions");
    std::string out = "x,y,domain,class\n";
    const auto dims = static_cast<std::size_t>(embedding.dims);
    for (std::size_t i = 0; i < n; ++i) {
        out += fmt("%.8g", embedding.coords[i * dims]) + "," + fmt("%.8g", embedding.coords[i * dims + 1]) + "," +
               std::string(data::to_string(static_cast<data::Domain>(tags[i]))) + "," + classes[i] + "\n";
    }
    return out;
}

std::string embedding_svg(const Embedding& embedding, std::span<const int> tags) {
    const auto n = static_cast<std::size_t>(embedding.rows);
    if (tags.size() != n) throw std::invalid_argument("embedding_svg: tag count mismatch");
    const auto dims = static_cast<std::size_t>(embedding.dims);
    double lo_x = 0, hi_x = 0, lo_y = 0, hi_y = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = embedding.coords[i * dims], y = embedding.coords[i * dims + 1];
        lo_x = i ? std::min(lo_x, x) : x;
        hi_x = i ? std::max(hi_x, x) : x;
        lo_y = i ? std::min(lo_y, y) : y;
        hi_y = i ? std::max(hi_y, y) : y;
    }
    const double span_x = std::max(hi_x - lo_x, 1e-12), span_y = std::max(hi_y - lo_y, 1e-12);
    constexpr double size = 400, margin = 20;
    std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
                      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"440\" height=\"440\" viewBox=\"0 0 440 440\">\n"
                      "<rect width=\"440\" height=\"440\" fill=\"#ffffff\"/>\n";
    for (std::size_t i = 0; i < n; ++i) {
        const double x = margin + size * (embedding.coords[i * dims] - lo_x) / span_x;
        const double y = margin + size * (1 - (embedding.coords[i * dims + 1] - lo_y) / span_y);
        out += "<circle cx=\"" + fmt("%.2f", x) + "\" cy=\"" + fmt("%.2f", y) + "\" r=\"3\" fill=\"" +
               (tags[i] == 0 ? "#1f77b4" : "#d62728") + "\" fill-opacity=\"0.7\"/>\n";
    }
    out += "<text x=\"24\" y=\"16\" font-size=\"12\" fill=\"#1f77b4\">source</text>\n"
           "<text x=\"84\" y=\"16\" font-size=\"12\" fill=\"#d62728\">target</text>\n"
           "</svg>\n";
    return out;
}

}  // namespace vxda::metrics
