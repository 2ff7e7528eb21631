#include "vxda/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <functional>
#include <thread>

#include "binary_io.hpp"

namespace vxda::data {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::string_view, kShapeClasses> kClassNames{"plane", "car", "monitor", "lamp", "telephone", "boat"};

double sq(double v) { return v * v; }

// ---------------------------------------------------------------------------
// Shape grammars. Coordinates are cell centres in [-1,1], y up.

using Inside = std::function<bool(double, double, double)>;

struct Jitter {
    Rng rng;
    double operator()(double lo, double hi) { return rng.uniform(lo, hi); }
};

Inside plane(Jitter& j, double thin) {
    const double len = j(0.7, 0.88), radius = std::max(j(0.11, 0.17), thin);
    const double span = j(0.65, 0.88), wing_z = j(-0.1, 0.15), chord = j(0.12, 0.2);
    const double fin = j(0.25, 0.4), stab = j(0.2, 0.35);
    const double sheet = std::max(0.05, thin);
    return [=](double x, double y, double z) {
        const bool body = sq(x) + sq(y) <= sq(radius) && std::abs(z) <= len;
        const bool wings = std::abs(x) <= span && std::abs(y) <= sheet && std::abs(z - wing_z) <= chord;
        const bool tail = z >= -len && z <= -len + 0.22;
        const bool stabilizer = tail && std::abs(x) <= stab && std::abs(y) <= sheet;
        const bool fin_plate = tail && std::abs(x) <= sheet && y >= 0 && y <= fin;
        return body || wings || stabilizer || fin_plate;
    };
}

Inside car(Jitter& j, double thin) {
    const double half_len = j(0.65, 0.82), half_w = j(0.32, 0.45), body_h = j(0.25, 0.35);
    const double cabin_h = j(0.18, 0.3), cabin_z = j(-0.15, 0.05), cabin_len = j(0.25, 0.38);
    const double wheel_r = std::max(j(0.13, 0.18), thin);
    const double floor = -0.3, top = floor + body_h;
    const double axle = half_len - wheel_r - 0.05;
    return [=](double x, double y, double z) {
        const bool body = std::abs(x) <= half_w && y >= floor && y <= top && std::abs(z) <= half_len;
        const bool cabin = std::abs(x) <= 0.85 * half_w && y >= top && y <= top + cabin_h && std::abs(z - cabin_z) <= cabin_len;
        const bool wheel_x = std::abs(x) >= half_w - 0.1 && std::abs(x) <= half_w + 0.06;
        const bool wheel = wheel_x && (sq(y - floor) + sq(z - axle) <= sq(wheel_r) || sq(y - floor) + sq(z + axle) <= sq(wheel_r));
        return body || cabin || wheel;
    };
}

Inside monitor(Jitter& j, double thin) {
    const double half_w = j(0.55, 0.8), bottom = j(-0.15, 0.0), height = j(0.55, 0.8);
    const double depth = std::max(j(0.04, 0.08), thin), neck = std::max(0.06, thin);
    const double base_w = j(0.25, 0.4), base_d = j(0.2, 0.3);
    return [=](double x, double y, double z) {
        const bool screen = std::abs(x) <= half_w && y >= bottom && y <= bottom + height && std::abs(z) <= depth;
        const bool stem = std::abs(x) <= neck && std::abs(z) <= neck && y >= -0.56 && y <= bottom;
        const bool base = std::abs(x) <= base_w && std::abs(z) <= base_d && y >= -0.7 && y <= -0.55;
        return screen || stem || base;
    };
}

Inside lamp(Jitter& j, double thin) {
    const double pole = std::max(j(0.05, 0.08), thin), bulb_r = j(0.28, 0.38), bulb_y = j(0.15, 0.3);
    const double base_r = j(0.35, 0.5);
    const double centre = bulb_y + 0.6 * bulb_r;
    return [=](double x, double y, double z) {
        const double r2 = sq(x) + sq(z);
        const bool stem = r2 <= sq(pole) && y >= -0.66 && y <= centre;
        const bool bulb = r2 + sq(y - centre) <= sq(bulb_r);
        const bool base = r2 <= sq(base_r) && y >= -0.82 && y <= -0.6;
        return stem || bulb || base;
    };
}

Inside telephone(Jitter& j, double thin) {
    const double base_w = j(0.4, 0.55), base_d = j(0.3, 0.45), reach = j(0.45, 0.6);
    const double bar = std::max(j(0.1, 0.14), thin);
    const double cup = 1.6 * bar;
    return [=](double x, double y, double z) {
        const bool base = std::abs(x) <= base_w && std::abs(z) <= base_d && y >= -0.55 && y <= -0.1;
        // capsule from (-reach, -0.02, 0) to (reach, -0.02, 0)
        const double cx = std::clamp(x, -reach, reach);
        const bool handset = sq(x - cx) + sq(y + 0.02) + sq(z) <= sq(bar);
        const bool cups = sq(std::abs(x) - reach) + sq(y + 0.05) + sq(z) <= sq(cup);
        return base || handset || cups;
    };
}

Inside boat(Jitter& j, double thin) {
    const double half_len = j(0.7, 0.88), half_w = j(0.28, 0.4), mast_top = j(0.55, 0.8);
    const double mast_z = j(-0.05, 0.15), sail_len = j(0.3, 0.45);
    const double keel = std::max(0.04, thin), mast = std::max(0.04, thin);
    return [=](double x, double y, double z) {
        bool hull = false;
        if (y >= -0.35 && y <= 0.05 && std::abs(z) <= half_len) {
            const double t = (y + 0.35) / 0.4;
            const double w = half_w * (0.35 + 0.65 * t) * std::sqrt(std::max(0.0, 1 - sq(z / half_len)));
            hull = std::abs(x) <= std::max(w, keel);
        }
        const bool fin = std::abs(x) <= keel && y >= -0.6 && y <= -0.35 && std::abs(z) <= 0.5 * half_len;
        const bool pole = sq(x) + sq(z - mast_z) <= sq(mast) && y >= 0.05 && y <= mast_top;
        const bool sail = std::abs(x) <= keel && y >= 0.2 && y <= mast_top - 0.1 && z <= mast_z && z >= mast_z - sail_len;
        return hull || fin || pole || sail;
    };
}

void keep_largest_component(VoxelGrid& g) {
    const int v = g.size;
    const std::size_t total = g.cells.size();
    std::vector<int> label(total, -1);
    std::vector<std::size_t> sizes;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < total; ++start) {
        if (g.cells[start] == 0.0f || label[start] >= 0) continue;
        const int id = static_cast<int>(sizes.size());
        std::size_t count = 0;
        stack.push_back(start);
        label[start] = id;
        while (!stack.empty()) {
            const std::size_t c = stack.back();
            stack.pop_back();
            ++count;
            const int x = static_cast<int>(c % v), y = static_cast<int>((c / v) % v), z = static_cast<int>(c / (v * v));
            const int nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z}, {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
            for (const auto& n : nb) {
                if (n[0] < 0 || n[0] >= v || n[1] < 0 || n[1] >= v || n[2] < 0 || n[2] >= v) continue;
                const std::size_t k = (static_cast<std::size_t>(n[2]) * v + n[1]) * v + n[0];
                if (g.cells[k] != 0.0f && label[k] < 0) {
                    label[k] = id;
                    stack.push_back(k);
                }
            }
        }
        sizes.push_back(count);
    }
    if (sizes.size() <= 1) return;
    const int keep = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    for (std::size_t i = 0; i < total; ++i) {
        if (label[i] != keep) g.cells[i] = 0.0f;
    }
}

// cos/sin of k * 45 degrees, exact at the axis-aligned angles.
std::pair<double, double> rotation(int azimuth_deg) {
    constexpr double r = 0.70710678118654752440;
    static constexpr double cs[8][2] = {{1, 0}, {r, r}, {0, 1}, {-r, r}, {-1, 0}, {-r, -r}, {0, -1}, {r, -r}};
    const int k = azimuth_deg / 45;
    return {cs[k][0], cs[k][1]};
}

int normalize_azimuth(int azimuth_deg) {
    if (azimuth_deg % 45 != 0) {
        throw std::invalid_argument("azimuth must be a multiple of 45 degrees, got " + std::to_string(azimuth_deg));
    }
    return ((azimuth_deg % 360) + 360) % 360;
}

constexpr std::array<float, kImageChannels> kTint{1.0f, 0.85f, 0.7f};

// ---------------------------------------------------------------------------
// Image corruption.

void paste_clutter(Image& img, const std::vector<std::uint8_t>& mask, Rng& rng) {
    const int s = img.size;
    Image bg(img.channels, s, 0.0f);
    std::vector<double> base(static_cast<std::size_t>(img.channels)), phase(base.size());
    for (int c = 0; c < img.channels; ++c) {
        base[c] = rng.uniform(0.2, 0.8);
        phase[c] = rng.uniform(0, 6.283185307179586);
    }
    const double fx = rng.uniform(0.2, 0.8), fy = rng.uniform(0.2, 0.8);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) bg.at(c, y, x) = static_cast<float>(base[c] + 0.25 * std::sin(fx * x + fy * y + phase[c]));
    for (int r = 0; r < 8; ++r) {
        const int w = 2 + static_cast<int>(rng.index(static_cast<std::uint64_t>(std::max(1, s / 2))));
        const int h = 2 + static_cast<int>(rng.index(static_cast<std::uint64_t>(std::max(1, s / 2))));
        const int x0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(s)));
        const int y0 = static_cast<int>(rng.index(static_cast<std::uint64_t>(s)));
        std::vector<float> colour(static_cast<std::size_t>(img.channels));
        for (auto& v : colour) v = static_cast<float>(rng.uniform());
        for (int c = 0; c < img.channels; ++c)
            for (int y = y0; y < std::min(s, y0 + h); ++y)
                for (int x = x0; x < std::min(s, x0 + w); ++x) bg.at(c, y, x) = colour[c];
    }
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    for (int c = 0; c < img.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
            if (!mask[p]) img.pixels[c * plane + p] = std::clamp(bg.pixels[c * plane + p], 0.0f, 1.0f);
        }
}

void gaussian_blur(Image& img, double sigma) {
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double norm = 0;
    for (int i = -radius; i <= radius; ++i) norm += k[i + radius] = std::exp(-0.5 * sq(i / sigma));
    for (auto& w : k) w /= norm;
    const int s = img.size;
    std::vector<float> tmp(img.pixels.size());
    auto clampi = [s](int i) { return std::clamp(i, 0, s - 1); };
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(c, y, clampi(x + i));
                tmp[(static_cast<std::size_t>(c) * s + y) * s + x] = static_cast<float>(acc);
            }
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[(static_cast<std::size_t>(c) * s + clampi(y + i)) * s + x];
                img.at(c, y, x) = static_cast<float>(acc);
            }
    }
}

void resample(Image& img, double scale) {
    const int s = img.size;
    const int small = std::max(1, static_cast<int>(std::lround(s * scale)));
    if (small >= s) return;
    // area average down
    std::vector<double> low(static_cast<std::size_t>(img.channels) * small * small);
    for (int c = 0; c < img.channels; ++c)
        for (int i = 0; i < small; ++i)
            for (int j = 0; j < small; ++j) {
                const int y0 = i * s / small, y1 = (i + 1) * s / small;
                const int x0 = j * s / small, x1 = (j + 1) * s / small;
                double acc = 0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) acc += img.at(c, y, x);
                low[(static_cast<std::size_t>(c) * small + i) * small + j] = acc / ((y1 - y0) * (x1 - x0));
            }
    // bilinear up, pixel-centre aligned
    auto coord = [s, small](int i, int& lo, int& hi, double& t) {
        const double u = std::clamp((i + 0.5) * small / s - 0.5, 0.0, static_cast<double>(small - 1));
        lo = static_cast<int>(std::floor(u));
        hi = std::min(lo + 1, small - 1);
        t = u - lo;
    };
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < s; ++y) {
            int ya, yb;
            double ty;
            coord(y, ya, yb, ty);
            for (int x = 0; x < s; ++x) {
                int xa, xb;
                double tx;
                coord(x, xa, xb, tx);
                auto at = [&](int i, int j) { return low[(static_cast<std::size_t>(c) * small + i) * small + j]; };
                const double top = at(ya, xa) * (1 - tx) + at(ya, xb) * tx;
                const double bottom = at(yb, xa) * (1 - tx) + at(yb, xb) * tx;
                img.at(c, y, x) = static_cast<float>(top * (1 - ty) + bottom * ty);
            }
        }
}

// ---------------------------------------------------------------------------
// Blob encoding.

std::vector<std::uint8_t> encode_blob(const Sample& s) {
    io::Writer w;
    for (float v : s.image.pixels) w.f32(v);
    for (float v : s.gt.cells) w.f32(v);
    return std::move(w.buffer());
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = crc32(crc, bytes.data() + pos, chunk);
        pos += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::string blob_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "blobs/%04zu.bin", index);
    return buf;
}

std::string_view background_name(Background b) { return b == Background::none ? "none" : "textured_clutter"; }

}  // namespace

std::string_view class_name(int class_id) {
    if (class_id < 0 || class_id >= kShapeClasses) throw std::out_of_range("class id out of range");
    return kClassNames[static_cast<std::size_t>(class_id)];
}

std::size_t VoxelGrid::occupied() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](float v) { return v > 0.5f; }));
}

VoxelGrid generate_shape(int class_id, std::uint64_t instance_seed, int voxel_size) {
    if (class_id < 0 || class_id >= kShapeClasses) {
        throw std::invalid_argument("class_id must be in [0, 6), got " + std::to_string(class_id));
    }
    if (voxel_size < 4) throw std::invalid_argument("voxel_size must be >= 4");
    Jitter j{Rng(mix_seed(0x5EA9EULL, static_cast<std::uint64_t>(class_id), instance_seed))};
    // Radius that always covers at least one cell centre of a cross-section
    // (the slab case needs only 1/V; a disc needs sqrt(2)/V).
    const double thin = 1.5 / voxel_size;
    Inside inside;
    switch (class_id) {
        case 0: inside = plane(j, thin); break;
        case 1: inside = car(j, thin); break;
        case 2: inside = monitor(j, thin); break;
        case 3: inside = lamp(j, thin); break;
        case 4: inside = telephone(j, thin); break;
        default: inside = boat(j, thin); break;
    }
    VoxelGrid g(voxel_size);
    for (int z = 0; z < voxel_size; ++z)
        for (int y = 0; y < voxel_size; ++y)
            for (int x = 0; x < voxel_size; ++x) {
                const double px = (2.0 * x + 1) / voxel_size - 1;
                const double py = (2.0 * y + 1) / voxel_size - 1;
                const double pz = (2.0 * z + 1) / voxel_size - 1;
                // stay inside the cylinder swept by the azimuth rotation
                if (sq(px) + sq(pz) > 0.98) continue;
                if (inside(px, py, pz)) g.at(x, y, z) = 1.0f;
            }
    keep_largest_component(g);
    return g;
}

Image render_view(const VoxelGrid& grid, int azimuth_deg, int image_size) {
    const int az = normalize_azimuth(azimuth_deg);
    if (image_size < 1) throw std::invalid_argument("image_size must be positive");
    const int v = grid.size;
    const auto [c, s] = rotation(az);

    // Inverse map: rotated cell -> source cell.
    VoxelGrid rotated(v);
    const double half = v / 2.0;
    for (int z = 0; z < v; ++z)
        for (int x = 0; x < v; ++x) {
            const double u = x + 0.5 - half, w = z + 0.5 - half;
            const int sx = static_cast<int>(std::floor(c * u - s * w + half));
            const int sz = static_cast<int>(std::floor(s * u + c * w + half));
            if (sx < 0 || sx >= v || sz < 0 || sz >= v) continue;
            for (int y = 0; y < v; ++y) rotated.at(x, y, z) = grid.at(sx, y, sz);
        }

    Image img(kImageChannels, image_size, kBackground);
    for (int row = 0; row < image_size; ++row)
        for (int col = 0; col < image_size; ++col) {
            const int x = static_cast<int>((col + 0.5) * v / image_size);
            const int y = v - 1 - static_cast<int>((row + 0.5) * v / image_size);
            for (int z = v - 1; z >= 0; --z) {
                if (rotated.at(x, y, z) > 0.5f) {
                    const float shade = 0.2f + 0.65f * static_cast<float>(z + 1) / static_cast<float>(v);
                    for (int ch = 0; ch < kImageChannels; ++ch) img.at(ch, row, col) = shade * kTint[ch];
                    break;
                }
            }
        }
    return img;
}

std::vector<std::uint8_t> object_mask(const Image& image) {
    const std::size_t plane = static_cast<std::size_t>(image.size) * image.size;
    std::vector<std::uint8_t> mask(plane, 0);
    for (int c = 0; c < image.channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
            if (image.pixels[c * plane + p] != kBackground) mask[p] = 1;
        }
    return mask;
}

// --- profiles ----------------------------------------------------------------

void DomainProfile::validate() const {
    if (!(blur_sigma >= 0) || !std::isfinite(blur_sigma)) throw std::invalid_argument("blur_sigma must be >= 0");
    if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma)) throw std::invalid_argument("noise_sigma must be >= 0");
    if (!(resolution_scale > 0 && resolution_scale <= 1)) throw std::invalid_argument("resolution_scale must be in (0, 1]");
}

bool DomainProfile::is_identity() const {
    return background == Background::none && blur_sigma == 0 && noise_sigma == 0 && resolution_scale == 1;
}

nlohmann::json DomainProfile::to_json() const {
    return {{"name", name},
            {"background", background_name(background)},
            {"blur_sigma", blur_sigma},
            {"noise_sigma", noise_sigma},
            {"resolution_scale", resolution_scale}};
}

DomainProfile DomainProfile::from_json(const nlohmann::json& j) {
    DomainProfile p;
    for (const auto& [key, value] : j.items()) {
        if (key == "name") p.name = value.get<std::string>();
        else if (key == "background") {
            const auto b = value.get<std::string>();
            if (b == "none") p.background = Background::none;
            else if (b == "textured_clutter") p.background = Background::textured_clutter;
            else throw std::invalid_argument("unknown background '" + b + "'");
        } else if (key == "blur_sigma") p.blur_sigma = value.get<double>();
        else if (key == "noise_sigma") p.noise_sigma = value.get<double>();
        else if (key == "resolution_scale") p.resolution_scale = value.get<double>();
        else throw std::invalid_argument("unknown domain profile key '" + key + "'");
    }
    p.validate();
    return p;
}

DomainProfile DomainProfile::source() { return {"source", Background::none, 0, 0, 1}; }
DomainProfile DomainProfile::lab() { return {"lab", Background::none, 1.5, 0.02, 0.5}; }
DomainProfile DomainProfile::wild() { return {"wild", Background::textured_clutter, 1.0, 0.02, 1.0}; }
DomainProfile DomainProfile::segmented() { return {"segmented", Background::none, 0, 0.01, 1}; }

DomainProfile DomainProfile::by_name(std::string_view name) {
    if (name == "source") return source();
    if (name == "lab") return lab();
    if (name == "wild") return wild();
    if (name == "segmented") return segmented();
    throw std::invalid_argument("unknown domain profile '" + std::string(name) + "' (expected lab, wild or segmented)");
}

Image apply_domain_shift(const Image& image, const DomainProfile& profile, Rng& rng) {
    profile.validate();
    Image out = image;
    if (profile.is_identity()) return out;
    if (profile.background == Background::textured_clutter) paste_clutter(out, object_mask(image), rng);
    if (profile.blur_sigma > 0) gaussian_blur(out, profile.blur_sigma);
    if (profile.resolution_scale < 1) resample(out, profile.resolution_scale);
    if (profile.noise_sigma > 0) {
        for (auto& p : out.pixels) p = static_cast<float>(p + profile.noise_sigma * rng.normal());
    }
    for (auto& p : out.pixels) p = std::clamp(p, 0.0f, 1.0f);
    return out;
}

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(std::string_view s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw std::invalid_argument("unknown domain '" + std::string(s) + "'");
}

// --- generation -------------------------------------------------------------

void GenConfig::validate() const {
    if (classes < 1 || classes > kShapeClasses) throw std::invalid_argument("classes must be in [1, 6]");
    if (instances < 1) throw std::invalid_argument("instances must be >= 1");
    if (views < 1 || 8 % views != 0) throw std::invalid_argument("views must divide 8 (45 degree grid)");
    if (voxel_size < 8 || (voxel_size & (voxel_size - 1)) != 0) throw std::invalid_argument("voxel_size must be a power of two >= 8");
    if (image_size < 8 || (image_size & (image_size - 1)) != 0) throw std::invalid_argument("image_size must be a power of two >= 8");
    if (!(train_fraction > 0 && train_fraction <= 1)) throw std::invalid_argument("train_fraction must be in (0, 1]");
    target.validate();
}

std::vector<int> GenConfig::azimuths() const {
    std::vector<int> out;
    const int step = 360 / views;
    for (int i = 0; i < views; ++i) out.push_back(i * step);
    return out;
}

std::vector<int> train_instances(const GenConfig& config, int class_id) {
    std::vector<int> ids(static_cast<std::size_t>(config.instances));
    for (int i = 0; i < config.instances; ++i) ids[i] = i;
    Rng rng(mix_seed(config.seed, 0x5B117ULL, static_cast<std::uint64_t>(class_id)));
    rng.shuffle(ids.begin(), ids.end());
    auto n = static_cast<int>(std::lround(config.instances * config.train_fraction));
    if (config.instances >= 2) n = std::clamp(n, 1, config.instances - 1);
    else n = 1;
    ids.resize(static_cast<std::size_t>(n));
    std::sort(ids.begin(), ids.end());
    return ids;
}

nlohmann::json DatasetManifest::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        recs.push_back({{"blob", r.blob},
                        {"class", r.class_label},
                        {"domain", to_string(r.domain)},
                        {"instance", r.instance_id},
                        {"azimuth", r.azimuth_deg},
                        {"split", r.train ? "train" : "test"},
                        {"crc32", r.crc32},
                        {"bytes", r.bytes}});
    }
    return {{"format", format},
            {"config",
             {{"classes", config.classes},
              {"instances", config.instances},
              {"views", config.views},
              {"voxel_size", config.voxel_size},
              {"image_size", config.image_size},
              {"image_channels", kImageChannels},
              {"seed", config.seed},
              {"train_fraction", config.train_fraction},
              {"source_profile", DomainProfile::source().to_json()},
              {"target_profile", config.target.to_json()}}},
            {"class_names", class_names},
            {"records", recs}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.format = j.at("format").get<std::string>();
    if (m.format != kDatasetFormat) {
        throw VersionError("unsupported dataset format '" + m.format + "' (expected " + std::string(kDatasetFormat) + ")");
    }
    const auto& c = j.at("config");
    m.config.classes = c.at("classes").get<int>();
    m.config.instances = c.at("instances").get<int>();
    m.config.views = c.at("views").get<int>();
    m.config.voxel_size = c.at("voxel_size").get<int>();
    m.config.image_size = c.at("image_size").get<int>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    m.config.train_fraction = c.at("train_fraction").get<double>();
    m.config.target = DomainProfile::from_json(c.at("target_profile"));
    if (c.at("image_channels").get<int>() != kImageChannels) throw DatasetError("unsupported image_channels");
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& r : j.at("records")) {
        SampleRecord rec;
        rec.blob = r.at("blob").get<std::string>();
        rec.class_label = r.at("class").get<int>();
        rec.domain = domain_from_string(r.at("domain").get<std::string>());
        rec.instance_id = r.at("instance").get<int>();
        rec.azimuth_deg = r.at("azimuth").get<int>();
        const auto split = r.at("split").get<std::string>();
        if (split != "train" && split != "test") throw DatasetError("bad split '" + split + "'");
        rec.train = split == "train";
        rec.crc32 = r.at("crc32").get<std::uint32_t>();
        rec.bytes = r.at("bytes").get<std::uint64_t>();
        m.records.push_back(std::move(rec));
    }
    return m;
}

DatasetManifest build_dataset(const GenConfig& config, const fs::path& out, int threads) {
    config.validate();
    struct Unit {
        int class_id, instance;
    };
    std::vector<Unit> units;
    for (int c = 0; c < config.classes; ++c)
        for (int i = 0; i < config.instances; ++i) units.push_back({c, i});

    const auto azimuths = config.azimuths();
    const auto source_profile = DomainProfile::source();
    std::vector<std::vector<Sample>> produced(units.size());
    auto work = [&](std::size_t u) {
        const auto [c, inst] = units[u];
        auto grid = generate_shape(c, mix_seed(config.seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(inst)),
                                   config.voxel_size);
        auto& bucket = produced[u];
        for (int az : azimuths) {
            const Image clean = render_view(grid, az, config.image_size);
            for (Domain d : {Domain::source, Domain::target}) {
                Rng rng(mix_seed(config.seed, 0x1A6EULL, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(inst),
                                 static_cast<std::uint64_t>(az), static_cast<std::uint64_t>(d)));
                Sample s;
                s.image = apply_domain_shift(clean, d == Domain::source ? source_profile : config.target, rng);
                s.gt = grid;
                s.class_label = c;
                s.domain = d;
                s.instance_id = inst;
                s.azimuth_deg = az;
                bucket.push_back(std::move(s));
            }
        }
    };

    int workers = threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    workers = std::min<int>(workers, static_cast<int>(units.size()));
    if (workers <= 1) {
        for (std::size_t u = 0; u < units.size(); ++u) work(u);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t u; (u = next.fetch_add(1)) < units.size();) work(u);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    DatasetManifest manifest;
    manifest.config = config;
    for (int c = 0; c < config.classes; ++c) manifest.class_names.emplace_back(class_name(c));
    std::vector<std::vector<int>> train_ids;
    for (int c = 0; c < config.classes; ++c) train_ids.push_back(train_instances(config, c));

    try {
        fs::create_directories(out / "blobs");
        std::size_t index = 0;
        for (std::size_t u = 0; u < units.size(); ++u) {
            for (const auto& s : produced[u]) {
                const auto bytes = encode_blob(s);
                SampleRecord rec;
                rec.blob = blob_name(index++);
                rec.class_label = s.class_label;
                rec.domain = s.domain;
                rec.instance_id = s.instance_id;
                rec.azimuth_deg = s.azimuth_deg;
                const auto& ids = train_ids[static_cast<std::size_t>(s.class_label)];
                rec.train = std::binary_search(ids.begin(), ids.end(), s.instance_id);
                rec.crc32 = crc_of(bytes);
                rec.bytes = bytes.size();
                io::write_file(out / rec.blob, bytes);
                manifest.records.push_back(std::move(rec));
            }
            produced[u].clear();
        }
        const std::string text = manifest.to_json().dump(2) + "\n";
        io::write_file(out / "manifest.json",
                       std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } catch (const fs::filesystem_error& e) {
        throw DatasetError("cannot write dataset at " + out.string() + ": " + e.what());
    } catch (const std::runtime_error& e) {
        if (dynamic_cast<const DatasetError*>(&e)) throw;
        throw DatasetError("cannot write dataset at " + out.string() + ": " + e.what());
    }
    return manifest;
}

// --- reading ----------------------------------------------------------------

Dataset Dataset::open(const fs::path& root) {
    Dataset ds;
    ds.root_ = root;
    const auto path = root / "manifest.json";
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw DatasetError("cannot read dataset manifest " + path.string() + ": " + e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("malformed manifest " + path.string() + ": " + e.what());
    }
    try {
        ds.manifest_ = DatasetManifest::from_json(j);
    } catch (const DatasetError&) {
        throw;
    } catch (const std::exception& e) {
        throw DatasetError("invalid manifest " + path.string() + ": " + e.what());
    }
    if (ds.manifest_.records.size() != ds.manifest_.config.record_count()) {
        throw DatasetError("manifest lists " + std::to_string(ds.manifest_.records.size()) + " records, config implies " +
                           std::to_string(ds.manifest_.config.record_count()));
    }
    return ds;
}

Sample Dataset::load(std::size_t index) const {
    const auto& rec = manifest_.records.at(index);
    const auto path = root_ / rec.blob;
    std::vector<std::uint8_t> bytes;
    try {
        bytes = io::read_file(path);
    } catch (const std::runtime_error& e) {
        throw DatasetError(e.what());
    }
    if (bytes.size() < rec.bytes) {
        throw TruncatedBlobError(path.string() + " is truncated: " + std::to_string(bytes.size()) + " of " +
                                 std::to_string(rec.bytes) + " bytes");
    }
    if (bytes.size() != rec.bytes) {
        throw DatasetError(path.string() + " has " + std::to_string(bytes.size()) + " bytes, manifest says " +
                           std::to_string(rec.bytes));
    }
    if (crc_of(bytes) != rec.crc32) throw ChecksumError("checksum mismatch in " + path.string());

    const auto& cfg = manifest_.config;
    Sample s;
    s.image = Image(kImageChannels, cfg.image_size, 0.0f);
    s.gt = VoxelGrid(cfg.voxel_size);
    if (bytes.size() != 4 * (s.image.pixels.size() + s.gt.cells.size())) {
        throw DatasetError(path.string() + " does not match the manifest image/voxel sizes");
    }
    io::Reader r(bytes);
    for (auto& v : s.image.pixels) v = r.f32();
    for (auto& v : s.gt.cells) v = r.f32();
    s.class_label = rec.class_label;
    s.domain = rec.domain;
    s.instance_id = rec.instance_id;
    s.azimuth_deg = rec.azimuth_deg;
    return s;
}

std::vector<Sample> Dataset::load_all() const {
    std::vector<Sample> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(load(i));
    return out;
}

Split split_from_string(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    if (s == "all") return Split::all;
    throw std::invalid_argument("unknown split '" + std::string(s) + "' (expected train, test or all)");
}

std::vector<std::size_t> select(const std::vector<Sample>& samples, const DatasetManifest& manifest, Split split,
                                Domain domain) {
    if (samples.size() != manifest.records.size()) throw std::invalid_argument("samples do not match the manifest");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& r = manifest.records[i];
        if (r.domain != domain) continue;
        if (split == Split::train && !r.train) continue;
        if (split == Split::test && r.train) continue;
        out.push_back(i);
    }
    return out;
}

Batch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices, bool with_gt) {
    if (indices.empty()) throw std::invalid_argument("empty batch");
    const auto& first = samples.at(indices[0]);
    const std::int64_t n = static_cast<std::int64_t>(indices.size());
    const std::size_t img = first.image.pixels.size();
    std::vector<float> pixels;
    pixels.reserve(img * indices.size());
    Batch b;
    for (std::size_t i : indices) {
        const auto& s = samples.at(i);
        if (s.image.pixels.size() != img) throw std::invalid_argument("mixed image sizes in batch");
        pixels.insert(pixels.end(), s.image.pixels.begin(), s.image.pixels.end());
        b.labels.push_back(s.class_label);
        b.tags.push_back(static_cast<int>(s.domain));
    }
    b.images = Tensor::from({n, first.image.channels, first.image.size, first.image.size}, std::move(pixels));
    if (with_gt) {
        const std::int64_t v = first.gt.size;
        std::vector<float> cells;
        cells.reserve(first.gt.cells.size() * indices.size());
        for (std::size_t i : indices) {
            const auto& g = samples[i].gt;
            if (g.size != v) throw std::invalid_argument("mixed voxel sizes in batch");
            cells.insert(cells.end(), g.cells.begin(), g.cells.end());
        }
        b.gt = Tensor::from({n, v, v, v}, std::move(cells));
    }
    return b;
}

MixedBatchLoader::MixedBatchLoader(std::vector<std::size_t> source, std::vector<std::size_t> target, int half_batch)
    : source_(std::move(source)), target_(std::move(target)), half_batch_(half_batch) {
    if (half_batch_ < 2) throw std::invalid_argument("half batch must be >= 2");
    if (source_.empty()) throw std::invalid_argument("no source samples");
    if (target_.empty()) throw std::invalid_argument("no target samples");
}

std::vector<MixedStep> MixedBatchLoader::epoch(Rng& rng) const {
    auto order = source_;
    rng.shuffle(order.begin(), order.end());
    std::vector<MixedStep> steps;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(half_batch_)) {
        const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(half_batch_));
        if (end - pos < 2) break;
        MixedStep step;
        step.source.assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(end));
        for (std::size_t i = pos; i < end; ++i) step.target.push_back(target_[rng.index(target_.size())]);
        steps.push_back(std::move(step));
    }
    return steps;
}

}  // namespace vxda::data
