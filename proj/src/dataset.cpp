#include "gtfmn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "gtfmn/image_io.hpp"

namespace fs = std::filesystem;

namespace gtfmn {

namespace {

// Flip/rotate a 3 x H x W image; k90 quarter turns then optional horizontal
// flip. Used for paired augmentation, so both sides get the same transform.
Tensor<float> orient(const Tensor<float>& img, unsigned k90, bool flip) {
    const std::size_t C = img.extent(0), H = img.extent(1), W = img.extent(2);
    const std::size_t oh = (k90 % 2 == 0) ? H : W;
    const std::size_t ow = (k90 % 2 == 0) ? W : H;
    Tensor<float> out = Tensor<float>::zeros({C, oh, ow});
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                std::size_t ty, tx;
                switch (k90 % 4) {
                    case 0: ty = y; tx = x; break;
                    case 1: ty = x; tx = H - 1 - y; break;       // 90 deg cw
                    case 2: ty = H - 1 - y; tx = W - 1 - x; break;
                    default: ty = W - 1 - x; tx = y; break;      // 270 deg cw
                }
                if (flip) tx = ow - 1 - tx;
                out.data()[(c * oh + ty) * ow + tx] = img.data()[(c * H + y) * W + x];
            }
        }
    }
    return out;
}

} // namespace

std::vector<ManifestEntry> build_corpus(const std::string& hr_dir, const DegradationSpec& spec,
                                        const std::string& out_dir, std::uint64_t seed) {
    spec.validate();
    if (!fs::is_directory(hr_dir)) {
        throw std::runtime_error("build_corpus: not a directory: " + hr_dir);
    }
    std::vector<fs::path> sources;
    for (const auto& e : fs::directory_iterator(hr_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") {
            sources.push_back(e.path());
        }
    }
    std::sort(sources.begin(), sources.end());
    if (sources.empty()) {
        throw std::runtime_error("build_corpus: no PNG images in " + hr_dir);
    }

    fs::create_directories(fs::path(out_dir) / "hr");
    fs::create_directories(fs::path(out_dir) / "lr");

    Rng rng(seed);
    std::vector<ManifestEntry> manifest;
    for (const auto& src : sources) {
        Tensor<float> hr;
        try {
            hr = read_png(src.string());
        } catch (const std::exception& e) {
            std::cerr << "build_corpus: skipping " << src << ": " << e.what() << "\n";
            continue;
        }
        const std::size_t s = spec.scale;
        const std::size_t H = (hr.extent(1) / s) * s;
        const std::size_t W = (hr.extent(2) / s) * s;
        if (H < s || W < s) {
            std::cerr << "build_corpus: skipping " << src << ": smaller than scale\n";
            continue;
        }
        if (H != hr.extent(1) || W != hr.extent(2)) {
            hr = crop_image(hr, 0, 0, H, W);
        }

        const double gamma = spec.sample_gamma ? rng.uniform(spec.gamma_lo, spec.gamma_hi)
                                               : spec.gamma;
        Tensor<float> dark = gamma_darken(hr, gamma);
        Tensor<float> lr = bicubic_resize(dark, H / s, W / s);

        const std::string id = src.stem().string();
        const std::string hr_rel = "hr/" + id + ".png";
        const std::string lr_rel = "lr/" + id + ".png";
        write_png((fs::path(out_dir) / hr_rel).string(), hr);
        write_png((fs::path(out_dir) / lr_rel).string(), lr);
        manifest.push_back({id, hr_rel, lr_rel, gamma});
    }
    if (manifest.empty()) {
        throw std::runtime_error("build_corpus: no readable images in " + hr_dir);
    }
    write_manifest((fs::path(out_dir) / "manifest.tsv").string(), manifest);
    return manifest;
}

void write_manifest(const std::string& manifest_path, const std::vector<ManifestEntry>& entries) {
    std::ofstream os(manifest_path);
    if (!os) throw std::runtime_error("cannot open for writing: " + manifest_path);
    os.precision(17);
    for (const auto& e : entries) {
        os << e.id << '\t' << e.hr_path << '\t' << e.lr_path << '\t' << e.gamma << '\n';
    }
}

std::vector<ManifestEntry> read_manifest(const std::string& manifest_path) {
    std::ifstream is(manifest_path);
    if (!is) throw std::runtime_error("cannot open manifest: " + manifest_path);
    std::vector<ManifestEntry> entries;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string gamma;
        if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.hr_path, '\t') ||
            !std::getline(ls, e.lr_path, '\t') || !std::getline(ls, gamma, '\t')) {
            throw std::runtime_error("malformed manifest line: " + line);
        }
        e.gamma = std::stod(gamma);
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw std::runtime_error("empty manifest: " + manifest_path);
    return entries;
}

std::vector<PairedSample> load_pairs(const std::string& manifest_path) {
    const fs::path root = fs::path(manifest_path).parent_path();
    std::vector<PairedSample> pairs;
    for (const auto& e : read_manifest(manifest_path)) {
        PairedSample p;
        p.id = e.id;
        p.hr = read_png((root / e.hr_path).string());
        p.lr = read_png((root / e.lr_path).string());
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::size_t pairs_scale(const std::vector<PairedSample>& pairs) {
    if (pairs.empty()) throw std::invalid_argument("pairs_scale: no pairs");
    std::size_t s = 0;
    for (const auto& p : pairs) {
        const std::size_t h = p.lr.extent(1), w = p.lr.extent(2);
        if (h == 0 || w == 0 || p.hr.extent(1) % h != 0 || p.hr.extent(2) % w != 0 ||
            p.hr.extent(1) / h != p.hr.extent(2) / w) {
            throw std::runtime_error("pair '" + p.id + "' has inconsistent HR/LR dimensions");
        }
        const std::size_t si = p.hr.extent(1) / h;
        if (s == 0) s = si;
        if (si != s) {
            throw std::runtime_error("pair '" + p.id + "' scale " + std::to_string(si) +
                                     " differs from corpus scale " + std::to_string(s));
        }
    }
    return s;
}

Tensor<float> make_test_chart(std::size_t index, std::size_t height, std::size_t width) {
    Rng rng(0x9e3779b97f4a7c15ull ^ (index * 0xbf58476d1ce4e5b9ull + 1));
    Tensor<float> img = Tensor<float>::zeros({3, height, width});

    // Base: smooth two-corner gradient in a random color pair.
    float c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = float(rng.uniform(0.2, 1.0));
        c1[c] = float(rng.uniform(0.2, 1.0));
    }
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const float t = float(x + y) / float(width + height - 2);
            for (int c = 0; c < 3; ++c) {
                img.data()[(c * height + y) * width + x] = (1 - t) * c0[c] + t * c1[c];
            }
        }
    }

    // Oriented sinusoid texture.
    const double theta = rng.uniform(0.0, 3.14159265);
    const double freq = rng.uniform(0.15, 0.55);
    const double amp = rng.uniform(0.08, 0.2);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            const double phase = freq * (std::cos(theta) * double(x) + std::sin(theta) * double(y));
            const float v = float(amp * std::sin(phase));
            for (int c = 0; c < 3; ++c) {
                float& px = img.data()[(c * height + y) * width + x];
                px = std::min(1.f, std::max(0.f, px + v));
            }
        }
    }

    // A few filled disks and a checker patch for hard edges.
    const std::size_t disks = 2 + index % 3;
    for (std::size_t d = 0; d < disks; ++d) {
        const double cy = rng.uniform(0.1, 0.9) * double(height);
        const double cx = rng.uniform(0.1, 0.9) * double(width);
        const double r = rng.uniform(0.05, 0.2) * double(std::min(height, width));
        float col[3] = {float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0)),
                        float(rng.uniform(0.0, 1.0))};
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const double dy = double(y) - cy, dx = double(x) - cx;
                if (dy * dy + dx * dx <= r * r) {
                    for (int c = 0; c < 3; ++c) {
                        img.data()[(c * height + y) * width + x] = col[c];
                    }
                }
            }
        }
    }
    const std::size_t cell = 2 + rng.below(5);
    const std::size_t ph = height / 3, pw = width / 3;
    const std::size_t oy = rng.below(std::max<std::size_t>(1, height - ph));
    const std::size_t ox = rng.below(std::max<std::size_t>(1, width - pw));
    for (std::size_t y = oy; y < oy + ph && y < height; ++y) {
        for (std::size_t x = ox; x < ox + pw && x < width; ++x) {
            const float v = (((y / cell) + (x / cell)) % 2 == 0) ? 0.9f : 0.15f;
            for (int c = 0; c < 3; ++c) {
                img.data()[(c * height + y) * width + x] =
                    0.5f * img.data()[(c * height + y) * width + x] + 0.5f * v;
            }
        }
    }
    return img;
}

std::vector<std::string> generate_charts(const std::string& dir, std::size_t count,
                                         std::size_t height, std::size_t width) {
    fs::create_directories(dir);
    std::vector<std::string> paths;
    for (std::size_t i = 0; i < count; ++i) {
        std::ostringstream name;
        name << "chart_" << std::setw(3) << std::setfill('0') << i << ".png";
        const std::string path = (fs::path(dir) / name.str()).string();
        write_png(path, make_test_chart(i, height, width));
        paths.push_back(path);
    }
    return paths;
}

PatchSampler::PatchSampler(std::vector<PairedSample> pairs, std::size_t lr_patch,
                           std::size_t batch, std::uint64_t seed, bool augment)
    : pairs_(std::move(pairs)), lr_patch_(lr_patch), batch_(batch), augment_(augment),
      scale_(pairs_scale(pairs_)), rng_(seed) {
    if (lr_patch_ == 0 || batch_ == 0) {
        throw std::invalid_argument("PatchSampler: patch and batch sizes must be positive");
    }
    for (const auto& p : pairs_) {
        if (p.lr.extent(1) < lr_patch_ || p.lr.extent(2) < lr_patch_) {
            throw std::invalid_argument("PatchSampler: patch " + std::to_string(lr_patch_) +
                                        " exceeds LR image '" + p.id + "' " +
                                        shape_str(p.lr.shape()));
        }
    }
}

PatchSampler::Batch PatchSampler::next() {
    const std::size_t p = lr_patch_, sp = lr_patch_ * scale_;
    Batch out;
    out.lr = Tensor<float>::zeros({batch_, 3, p, p});
    out.hr = Tensor<float>::zeros({batch_, 3, sp, sp});
    for (std::size_t b = 0; b < batch_; ++b) {
        const PairedSample& pair = pairs_[rng_.below(pairs_.size())];
        const std::size_t maxy = pair.lr.extent(1) - p;
        const std::size_t maxx = pair.lr.extent(2) - p;
        const std::size_t y = maxy ? rng_.below(maxy + 1) : 0;
        const std::size_t x = maxx ? rng_.below(maxx + 1) : 0;
        Tensor<float> lr = crop_image(pair.lr, y, x, p, p);
        Tensor<float> hr = crop_image(pair.hr, y * scale_, x * scale_, sp, sp);
        if (augment_) {
            const unsigned k90 = unsigned(rng_.below(4));
            const bool flip = rng_.below(2) != 0;
            lr = orient(lr, k90, flip);
            hr = orient(hr, k90, flip);
        }
        std::copy(lr.data(), lr.data() + lr.numel(), out.lr.data() + b * 3 * p * p);
        std::copy(hr.data(), hr.data() + hr.numel(), out.hr.data() + b * 3 * sp * sp);
    }
    return out;
}

} // namespace gtfmn
