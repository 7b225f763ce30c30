#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gtfmn/degrade.hpp"
#include "gtfmn/rng.hpp"
#include "gtfmn/tensor.hpp"

// Paired-corpus construction and patch sampling. A corpus directory holds
// hr/<id>.png, lr/<id>.png and manifest.tsv with one line per pair:
//   id <tab> hr_path <tab> lr_path <tab> gamma
// Paths are relative to the manifest's directory.

namespace gtfmn {

struct ManifestEntry {
    std::string id;
    std::string hr_path;
    std::string lr_path;
    double gamma = 0.0;
};

struct PairedSample {
    Tensor<float> hr;  // 3 x sH x sW
    Tensor<float> lr;  // 3 x H x W
    std::string id;
};

// Degrades every decodable PNG under hr_dir (sorted by filename) and writes
// the paired corpus into out_dir. HR images are cropped to multiples of the
// scale first. Unreadable files are skipped with a warning on stderr; an
// empty or fully unreadable directory is an error. Returns the manifest.
std::vector<ManifestEntry> build_corpus(const std::string& hr_dir, const DegradationSpec& spec,
                                        const std::string& out_dir, std::uint64_t seed = 0);

std::vector<ManifestEntry> read_manifest(const std::string& manifest_path);

void write_manifest(const std::string& manifest_path, const std::vector<ManifestEntry>& entries);

// Loads all pairs of a manifest into memory, resolving relative paths.
std::vector<PairedSample> load_pairs(const std::string& manifest_path);

// Scale factor of a loaded pair set; every pair must agree or this throws.
std::size_t pairs_scale(const std::vector<PairedSample>& pairs);

// Deterministic procedural RGB test chart; gradients, checker fields,
// oriented sinusoids and disks parameterized by the index. Stands in for a
// real HR photo set at desk scale.
Tensor<float> make_test_chart(std::size_t index, std::size_t height, std::size_t width);

// Writes `count` charts as chart_<i>.png under dir (created if needed).
std::vector<std::string> generate_charts(const std::string& dir, std::size_t count,
                                         std::size_t height, std::size_t width);

// Streams aligned LR/HR patch batches. The HR patch is the exact s-scaled
// window of the LR patch; optional flip/rotate augmentation is applied
// identically to both sides.
class PatchSampler {
public:
    struct Batch {
        Tensor<float> lr;  // B x 3 x p x p
        Tensor<float> hr;  // B x 3 x sp x sp
    };

    PatchSampler(std::vector<PairedSample> pairs, std::size_t lr_patch, std::size_t batch,
                 std::uint64_t seed, bool augment = false);

    Batch next();

    std::size_t scale() const { return scale_; }

private:
    std::vector<PairedSample> pairs_;
    std::size_t lr_patch_;
    std::size_t batch_;
    bool augment_;
    std::size_t scale_;
    Rng rng_;
};

} // namespace gtfmn
