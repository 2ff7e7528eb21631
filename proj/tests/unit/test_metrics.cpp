#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "vxda/metrics.hpp"
#include "vxda/rng.hpp"

using namespace vxda;
using namespace vxda::metrics;

namespace {

std::vector<float> grid(std::initializer_list<float> v) { return std::vector<float>(v); }

data::Sample sample_with(int cls, const std::vector<float>& cells, int v) {
    data::Sample s;
    s.class_label = cls;
    s.gt.size = v;
    s.gt.cells = cells;
    return s;
}

Predictions predictions_from(const std::vector<std::vector<float>>& voxels) {
    Predictions p;
    p.count = static_cast<std::int64_t>(voxels.size());
    p.voxel_cells = static_cast<std::int64_t>(voxels.front().size());
    for (const auto& v : voxels) p.voxels.insert(p.voxels.end(), v.begin(), v.end());
    return p;
}

}  // namespace

TEST_CASE("iou examples") {
    auto gt = grid({1, 0, 1, 0, 0, 0, 1, 1});
    std::vector<float> probs(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) probs[i] = gt[i] > 0 ? 0.9f : 0.1f;
    CHECK(iou(probs, gt, 0.4) == 1.0);

    auto disjoint = grid({0, 0.9f, 0, 0.9f, 0.9f, 0.9f, 0, 0});
    CHECK(iou(disjoint, gt, 0.4) == 0.0);

    // 4 predicted, 4 gt, 2 shared
    auto pred = grid({0.9f, 0.9f, 0.9f, 0.9f, 0, 0, 0, 0});
    auto g = grid({1, 1, 0, 0, 1, 1, 0, 0});
    CHECK(std::abs(iou(pred, g, 0.4) - 2.0 / 6.0) < 1e-6);

    auto empty = grid({0, 0, 0, 0, 0, 0, 0, 0});
    CHECK(iou(empty, empty, 0.4) == 1.0);
    CHECK_THROWS_AS(iou(grid({0.5f}), gt, 0.4), ShapeError);
}

TEST_CASE("iou strict threshold") {
    auto g = grid({1, 1, 0, 0});
    // p == t is neither predicted nor intersecting
    CHECK(iou(grid({0.4f, 0.9f, 0, 0}), g, 0.4f) == 0.5);
    CHECK(iou(grid({0.4f, 0.4f, 0.4f, 0.4f}), g, 0.4f) == 0.0);
    CHECK(iou(grid({std::nextafter(0.4f, 1.0f), 0.9f, 0, 0}), g, 0.4f) == 1.0);
    // a cell at t outside gt does not enlarge the union
    CHECK(iou(grid({0.9f, 0.9f, 0.4f, 0}), g, 0.4f) == 1.0);
}

TEST_CASE("iou properties") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 64;
        std::vector<float> p(n), g(n);
        for (auto& x : p) x = static_cast<float>(rng.uniform(0, 1));
        for (auto& x : g) x = rng.uniform(0, 1) < 0.3 ? 1.0f : 0.0f;
        g[0] = 1;
        const double v = iou(p, g, 0.4);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(iou(g, g, 0.4) == 1.0);

        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm.begin(), perm.end());
        std::vector<float> pp(n), gp(n);
        for (std::size_t i = 0; i < n; ++i) {
            pp[i] = p[perm[i]];
            gp[i] = g[perm[i]];
        }
        CHECK(iou(pp, gp, 0.4) == v);

        // brute-force count
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < n; ++i) {
            inter += (p[i] > 0.4f) && (g[i] == 1);
            uni += (p[i] > 0.4f) || (g[i] == 1);
        }
        CHECK(v == static_cast<double>(inter) / static_cast<double>(uni));
    }
}

TEST_CASE("eval config") {
    EvalConfig c;
    CHECK(c.threshold == 0.4);
    CHECK_NOTHROW(c.validate());
    c.threshold = 0;
    CHECK_THROWS(c.validate());
    c.threshold = 1;
    CHECK_THROWS(c.validate());
    CHECK(domain_selector_from_string("both") == DomainSelector::both);
    CHECK_THROWS(domain_selector_from_string("all"));
}

TEST_CASE("iou report") {
    const int v = 2;
    std::vector<data::Sample> samples;
    Rng rng(3);
    for (int i = 0; i < 12; ++i) {
        std::vector<float> cells(8);
        for (auto& x : cells) x = rng.uniform(0, 1) < 0.5 ? 1.0f : 0.0f;
        cells[static_cast<std::size_t>(i % 8)] = 1;
        samples.push_back(sample_with(i % 3, cells, v));
    }
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    const std::vector<std::string> names{"a", "b", "c"};

    SUBCASE("exact prediction") {
        std::vector<std::vector<float>> vox;
        for (const auto& s : samples) vox.push_back(s.gt.cells);
        auto r = iou_report(predictions_from(vox), samples, idx, names, "none", 0.4);
        for (const auto& c : r.classes) CHECK(c.iou == 1.0);
        CHECK(r.overall == 1.0);
        CHECK(r.count == 12);
    }
    SUBCASE("constant 0.5") {
        std::vector<std::vector<float>> vox(samples.size(), std::vector<float>(8, 0.5f));
        auto r = iou_report(predictions_from(vox), samples, idx, names, "none", 0.4);
        double total = 0;
        std::vector<double> per_class(3, 0);
        for (const auto& s : samples) {
            const double expected = static_cast<double>(std::count(s.gt.cells.begin(), s.gt.cells.end(), 1.0f)) / 8.0;
            total += expected;
            per_class[static_cast<std::size_t>(s.class_label)] += expected / 4.0;
        }
        CHECK(std::abs(r.overall - total / 12.0) < 1e-12);
        for (int c = 0; c < 3; ++c) {
            CHECK(std::abs(r.classes[static_cast<std::size_t>(c)].iou - per_class[static_cast<std::size_t>(c)]) < 1e-12);
            CHECK(r.classes[static_cast<std::size_t>(c)].count == 4);
        }
    }
    SUBCASE("overall is the sample mean") {
        std::vector<std::vector<float>> vox;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            std::vector<float> p(8);
            for (auto& x : p) x = static_cast<float>(rng.uniform(0, 1));
            vox.push_back(p);
        }
        // unbalanced subset
        std::vector<std::size_t> sub{0, 1, 2, 3, 6, 9};
        std::vector<std::vector<float>> sub_vox;
        for (auto i : sub) sub_vox.push_back(vox[i]);
        auto r = iou_report(predictions_from(sub_vox), samples, sub, names, "dann", 0.4);
        double total = 0;
        for (std::size_t k = 0; k < sub.size(); ++k) total += iou(sub_vox[k], samples[sub[k]].gt.cells, 0.4);
        CHECK(std::abs(r.overall - total / 6.0) < 1e-12);
        CHECK(r.classes[0].count == 4);
        double weighted = 0;
        for (const auto& c : r.classes) {
            CHECK(c.iou >= 0.0);
            CHECK(c.iou <= 1.0);
            weighted += c.iou * static_cast<double>(c.count);
        }
        CHECK(std::abs(weighted / 6.0 - r.overall) < 1e-12);
    }
    SUBCASE("errors") {
        CHECK_THROWS(summarize({}, names, "none", 0.4));
        Predictions p;
        CHECK_THROWS(iou_report(p, samples, idx, names, "none", 0.4));
    }
}

TEST_CASE("iou csv") {
    IoUReport r;
    r.method = "dann+class";
    r.threshold = 0.4;
    r.classes = {{"plane", 0.5, 2}, {"car", 0.25, 2}};
    r.overall = 0.375;
    r.count = 4;
    CHECK(iou_csv(r) ==
          "class,method,iou,count,threshold\n"
          "plane,dann+class,0.500000,2,0.40\n"
          "car,dann+class,0.250000,2,0.40\n"
          "overall,dann+class,0.375000,4,0.40\n");
    auto both = iou_csv({{"source", r}, {"target", r}});
    CHECK(both.rfind("# domain=source\nclass,method", 0) == 0);
    CHECK(both.find("# domain=target\nclass,method") != std::string::npos);
    CHECK(std::count(both.begin(), both.end(), '\n') == 10);
}

TEST_CASE("domain confusion accuracy") {
    std::vector<int> tags;
    for (int i = 0; i < 200; ++i) tags.push_back(i % 2);
    std::vector<float> always_source(200, -1.0f);
    CHECK(domain_confusion_accuracy(always_source, tags) == 0.5);
    std::vector<float> perfect(200);
    for (int i = 0; i < 200; ++i) perfect[static_cast<std::size_t>(i)] = tags[static_cast<std::size_t>(i)] ? 2.0f : -2.0f;
    CHECK(domain_confusion_accuracy(perfect, tags) == 1.0);

    int inside = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        std::vector<float> logits(200);
        for (auto& x : logits) x = static_cast<float>(rng.normal());
        const double acc = domain_confusion_accuracy(logits, tags);
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        inside += acc >= 0.35 && acc <= 0.65;
    }
    CHECK(inside >= 95);

    std::vector<int> one_domain(200, 0);
    CHECK_THROWS(domain_confusion_accuracy(always_source, one_domain));
    CHECK_THROWS(domain_confusion_accuracy(std::vector<float>(3), tags));
}

TEST_CASE("symmetric eigen") {
    Rng rng(11);
    const int n = 6;
    std::vector<double> a(n * n);
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) a[i * n + j] = a[j * n + i] = rng.uniform(-1, 1);
    std::vector<double> values, vectors;
    symmetric_eigen(a, n, values, vectors);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(a.data(), n, n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
    for (int k = 0; k < n; ++k) {
        CHECK(std::abs(values[static_cast<std::size_t>(k)] - solver.eigenvalues()(n - 1 - k)) < 1e-10);
        Eigen::VectorXd vk(n);
        for (int j = 0; j < n; ++j) vk(j) = vectors[static_cast<std::size_t>(k * n + j)];
        CHECK(((m * vk) - values[static_cast<std::size_t>(k)] * vk).norm() < 1e-10);
        CHECK(std::abs(vk.norm() - 1) < 1e-12);
    }
}

TEST_CASE("pca embed") {
    SUBCASE("eigen oracle on random 50x8") {
        Rng rng(21);
        const int n = 50, d = 8;
        std::vector<double> x(n * d);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) x[i * d + j] = rng.normal() * (1.0 + j);
        auto e = pca_embed(x, n, d);
        CHECK(e.dims == 2);
        CHECK(e.coords.size() == static_cast<std::size_t>(n * 2));

        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(x.data(), n, d);
        Eigen::MatrixXd centred = m.rowwise() - m.colwise().mean();
        Eigen::MatrixXd cov = centred.transpose() * centred / (n - 1);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
        CHECK(std::abs(e.explained[0] - solver.eigenvalues()(d - 1)) < 1e-8);
        CHECK(std::abs(e.explained[1] - solver.eigenvalues()(d - 2)) < 1e-8);
        CHECK(std::abs(e.total_variance - cov.trace()) < 1e-8);

        // orthonormal loadings, sign convention, projections
        double dot = 0, n0 = 0, n1 = 0;
        for (int j = 0; j < d; ++j) {
            dot += e.components[j] * e.components[d + j];
            n0 += e.components[j] * e.components[j];
            n1 += e.components[d + j] * e.components[d + j];
        }
        CHECK(std::abs(dot) < 1e-8);
        CHECK(std::abs(n0 - 1) < 1e-10);
        CHECK(std::abs(n1 - 1) < 1e-10);
        for (int k = 0; k < 2; ++k) {
            auto first = e.components.begin() + k * d;
            auto big = std::max_element(first, first + d, [](double a, double b) { return std::abs(a) < std::abs(b); });
            CHECK(*big > 0);
        }
        for (int k = 0; k < 2; ++k) {
            double var = 0;
            for (int i = 0; i < n; ++i) var += e.coords[i * 2 + k] * e.coords[i * 2 + k];
            CHECK(std::abs(var / (n - 1) - e.explained[static_cast<std::size_t>(k)]) < 1e-8);
        }
    }
    SUBCASE("centred 2-D data keeps its variance") {
        Rng rng(4);
        const int n = 30;
        std::vector<double> x(n * 2);
        for (auto& v : x) v = rng.normal();
        double mx = 0, my = 0;
        for (int i = 0; i < n; ++i) {
            mx += x[i * 2];
            my += x[i * 2 + 1];
        }
        for (int i = 0; i < n; ++i) {
            x[i * 2] -= mx / n;
            x[i * 2 + 1] -= my / n;
        }
        auto e = pca_embed(x, n, 2);
        CHECK(std::abs(e.explained[0] + e.explained[1] - e.total_variance) < 1e-10);
        for (int i = 0; i < n; ++i) {
            const double r0 = std::hypot(x[i * 2], x[i * 2 + 1]);
            const double r1 = std::hypot(e.coords[i * 2], e.coords[i * 2 + 1]);
            CHECK(std::abs(r0 - r1) < 1e-10);
        }
    }
    SUBCASE("duplicated points give duplicated coordinates") {
        Rng rng(8);
        const int n = 10, d = 4;
        std::vector<double> x(n * d);
        for (auto& v : x) v = rng.normal();
        std::vector<double> twice(x);
        twice.insert(twice.end(), x.begin(), x.end());
        auto e = pca_embed(twice, 2 * n, d);
        for (int i = 0; i < n; ++i) {
            CHECK(e.coords[i * 2] == e.coords[(i + n) * 2]);
            CHECK(e.coords[i * 2 + 1] == e.coords[(i + n) * 2 + 1]);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS(pca_embed(std::vector<double>(4), 2, 2));
        CHECK_THROWS(pca_embed(std::vector<double>(5), 3, 2));
        CHECK_THROWS(pca_embed(std::vector<double>(6), 3, 2, 3));
    }
}

TEST_CASE("embedding export") {
    Embedding e;
    e.rows = 4;
    e.dims = 2;
    e.coords = {0, 0, 1, 2, -1, 0.5, 3, -2};
    std::vector<int> tags{0, 1, 0, 1};
    std::vector<std::string> classes{"plane", "car", "lamp", "boat"};
    auto csv = embedding_csv(e, tags, classes);
    CHECK(csv.rfind("x,y,domain,class\n0,0,source,plane\n1,2,target,car\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

    auto svg = embedding_svg(e, tags);
    CHECK(svg.find("<svg") != std::string::npos);
    CHECK(svg.find("</svg>") != std::string::npos);
    std::size_t circles = 0;
    for (auto p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
    CHECK(circles == 4);
    CHECK(svg.find("#1f77b4") != std::string::npos);
    CHECK(svg.find("#d62728") != std::string::npos);
    CHECK_THROWS(embedding_csv(e, std::vector<int>{0}, classes));
}

TEST_CASE("predict is batch independent") {
    nn::NetworkConfig cfg;
    cfg.image_size = 16;
    cfg.voxel_size = 8;
    cfg.latent_dim = 16;
    cfg.encoder_widths = {4, 8};
    cfg.decoder_widths = {8, 4};
    cfg.refiner_width = 4;
    auto params = nn::init_params<float>(cfg, 3);
    std::vector<data::Sample> samples;
    for (int c = 0; c < 2; ++c)
        for (int a : {0, 90, 180}) {
            data::Sample s;
            s.gt = data::generate_shape(c, 7, 8);
            s.image = data::render_view(s.gt, a, 16);
            s.class_label = c;
            samples.push_back(s);
        }
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto all = predict(cfg, params, samples, idx, 32);
    auto small = predict(cfg, params, samples, idx, 2);
    CHECK(all.voxels == small.voxels);
    CHECK(all.domain_logits == small.domain_logits);
    CHECK(all.latent == small.latent);
    CHECK(all.latent.size() == idx.size() * 16);
    auto r1 = iou_report(cfg, params, samples, idx, {"plane", "car"}, "none", 0.4);
    auto r2 = iou_report(cfg, params, samples, idx, {"plane", "car"}, "none", 0.4);
    CHECK(iou_csv(r1) == iou_csv(r2));
    CHECK(r1.overall >= 0.0);
    CHECK(r1.overall <= 1.0);
}
