#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "gtfmn/dataset.hpp"
#include "gtfmn/metrics.hpp"
#include "gtfmn/model.hpp"

// Training orchestration: the sample -> forward -> L1 -> backward -> Adam
// loop, periodic checkpoints and evaluations, and the two ablation sweeps.
// A run directory holds config.txt, loss.csv, eval_*.csv and ckpt_*.bin.

namespace gtfmn {

struct TrainConfig {
    GtfmnConfig model;
    std::string manifest;          // training corpus manifest
    std::string eval_manifest;     // optional; empty disables periodic eval
    std::string run_dir;
    std::size_t lr_patch = 32;
    std::size_t batch = 8;
    std::size_t steps = 20000;
    std::uint64_t seed = 0;
    std::size_t checkpoint_every = 2000;  // 0 = only the final checkpoint
    std::size_t eval_every = 0;           // 0 = only at the end
    bool deterministic = true;  // execution is single-threaded either way;
                                // the flag is recorded with the run
    bool augment = true;
    double lr = 2e-4;
    std::vector<std::size_t> lr_halve_at;  // steps at which lr halves
    double map_smooth_lambda = 0.0;        // optional illumination-map TV loss
    std::size_t border_crop = kCropDefault;

    static constexpr std::size_t kCropDefault = std::numeric_limits<std::size_t>::max();

    std::size_t resolved_border_crop() const {
        return border_crop == kCropDefault ? model.scale : border_crop;
    }

    void validate() const;
    std::string echo() const;  // resolved key=value dump
};

struct EvalRow {
    std::string id;
    MetricReport report;
};

struct EvalResult {
    std::vector<EvalRow> rows;
    MetricReport mean;  // per-image metrics averaged over the set
};

struct RunLog {
    std::vector<double> losses;  // one entry per completed step
    std::vector<std::pair<std::size_t, EvalResult>> evals;
    std::string final_checkpoint;
    bool aborted_nan = false;
    std::string started_at;   // wall clock, ISO-8601 UTC
    std::string finished_at;
};

RunLog train(const TrainConfig& config);

// Evaluates a checkpoint against a paired manifest. border_crop of
// TrainConfig::kCropDefault resolves to the model scale. When out_prefix is
// non-empty, writes <out_prefix>.csv and <out_prefix>.json.
EvalResult evaluate(const std::string& checkpoint_path, const std::string& manifest_path,
                    std::size_t border_crop = TrainConfig::kCropDefault,
                    const std::string& out_prefix = "");

// In-memory variant used by the training loop and tests.
EvalResult evaluate_model(const GtfmnModel<float>& model, const std::vector<PairedSample>& pairs,
                          std::size_t border_crop);

// Plain bicubic upscaling of an LR image, the reference baseline.
Tensor<float> bicubic_upscale(const Tensor<float>& lr, std::size_t scale);

// Single-image inference: returns the clamped SR image (3 x sH x sW) and,
// if map_out is non-null, the illumination map (1 x H x W).
Tensor<float> infer_image(const GtfmnModel<float>& model, const Tensor<float>& lr,
                          Tensor<float>* map_out = nullptr);

struct BlockAblationRow {
    std::size_t depth = 0;
    std::size_t param_count = 0;
    std::vector<std::pair<std::string, MetricReport>> per_set;  // test set name -> mean metrics
};

// Trains one run per depth with a shared seed and corpus, evaluating each
// against every test manifest. Writes ablate_blocks.csv/.json in run_dir.
std::vector<BlockAblationRow> ablate_blocks(const TrainConfig& base,
                                            const std::vector<std::size_t>& depths,
                                            const std::vector<std::string>& test_manifests);

struct IllumAblationRow {
    std::string variant;  // "with_illumination" / "without_illumination"
    std::size_t param_count = 0;
    std::int64_t guidance_reads = 0;  // IGM map reads observed over the run
    std::vector<std::pair<std::string, MetricReport>> per_set;
};

// Matched runs with the illumination stream on and off (guide dropped).
// Writes ablate_illumination.csv/.json in run_dir.
std::vector<IllumAblationRow> ablate_illumination(const TrainConfig& base,
                                                  const std::vector<std::string>& test_manifests);

} // namespace gtfmn
