// gtfmn: command-line front end for the low-light super-resolution pipeline.
//
// Subcommands: synth-data, train, infer, eval, ablate-blocks, ablate-illum,
// selftest. Exit codes: 0 success, 1 usage error, 2 runtime failure,
// 3 selftest failure.

#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gtfmn/dataset.hpp"
#include "gtfmn/image_io.hpp"
#include "gtfmn/model.hpp"
#include "gtfmn/selftest.hpp"
#include "gtfmn/trainer.hpp"

namespace fs = std::filesystem;
using namespace gtfmn;

namespace {

std::vector<std::size_t> parse_size_list(const std::string& csv) {
    std::vector<std::size_t> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoul(tok));
    }
    return out;
}

// Horizontal composite [left | right]; both 3 x H x W with equal dims.
Tensor<float> side_by_side(const Tensor<float>& left, const Tensor<float>& right) {
    const std::size_t H = left.extent(1), W = left.extent(2);
    Tensor<float> out = Tensor<float>::zeros({3, H, 2 * W});
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t x = 0; x < W; ++x) {
                out.data()[(c * H + y) * 2 * W + x] = left.data()[(c * H + y) * W + x];
                out.data()[(c * H + y) * 2 * W + W + x] = right.data()[(c * H + y) * W + x];
            }
        }
    }
    return out;
}

struct ModelFlags {
    std::size_t scale = 2;
    std::size_t channels = 32;
    std::size_t blocks = 4;
    double epsilon = 1e-4;
    bool illumination = true;
    std::string guide_mode = "drop";
    std::string msa_kernels = "3,5,7";
    std::size_t ffn_expansion = 2;
    double lrelu_slope = 0.2;

    void attach(CLI::App* cmd) {
        cmd->add_option("--scale", scale, "Upscaling factor (2 or 4)")->capture_default_str();
        cmd->add_option("--channels", channels, "Feature width C")->capture_default_str();
        cmd->add_option("--blocks", blocks, "IGM block count N")->capture_default_str();
        cmd->add_option("--epsilon", epsilon, "Map-synthesis stabilizer")->capture_default_str();
        cmd->add_flag("--illumination,!--no-illumination", illumination,
                      "Enable the illumination stream")
            ->capture_default_str();
        cmd->add_option("--guide-mode", guide_mode,
                        "Blocks when the stream is off: drop|const1")
            ->capture_default_str();
        cmd->add_option("--msa-kernels", msa_kernels, "Attention kernel sizes, comma separated")
            ->capture_default_str();
        cmd->add_option("--ffn-expansion", ffn_expansion, "FFN width multiplier")
            ->capture_default_str();
        cmd->add_option("--lrelu-slope", lrelu_slope, "Leaky ReLU negative slope")
            ->capture_default_str();
    }

    GtfmnConfig to_config() const {
        GtfmnConfig c;
        c.scale = scale;
        c.channels = channels;
        c.num_blocks = blocks;
        c.epsilon = epsilon;
        c.use_illumination_stream = illumination;
        c.guide_mode = guide_mode_from_string(guide_mode);
        c.msa_kernels = parse_size_list(msa_kernels);
        c.ffn_expansion = ffn_expansion;
        c.lrelu_slope = lrelu_slope;
        c.validate();
        return c;
    }
};

struct TrainFlags {
    ModelFlags model;
    std::string manifest;
    std::string eval_manifest;
    std::string run_dir;
    std::size_t patch = 32;
    std::size_t batch = 8;
    std::size_t steps = 20000;
    std::uint64_t seed = 0;
    std::size_t ckpt_every = 2000;
    std::size_t eval_every = 0;
    bool deterministic = true;
    bool augment = true;
    double lr = 2e-4;
    std::string halve_lr_at;
    double map_smooth_lambda = 0.0;
    std::size_t border_crop = TrainConfig::kCropDefault;

    void attach(CLI::App* cmd, bool with_model = true) {
        if (with_model) model.attach(cmd);
        cmd->add_option("--manifest", manifest, "Training corpus manifest")->required();
        cmd->add_option("--eval-manifest", eval_manifest, "Held-out manifest for periodic eval");
        cmd->add_option("--run-dir", run_dir, "Output directory for the run")
            ->envname("GTFMN_RUN_DIR")
            ->required();
        cmd->add_option("--patch", patch, "LR patch size")->capture_default_str();
        cmd->add_option("--batch", batch, "Batch size")->capture_default_str();
        cmd->add_option("--steps", steps, "Training steps")->capture_default_str();
        cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
        cmd->add_option("--ckpt-every", ckpt_every, "Checkpoint cadence (0 = final only)")
            ->capture_default_str();
        cmd->add_option("--eval-every", eval_every, "Eval cadence (0 = final only)")
            ->capture_default_str();
        cmd->add_flag("--deterministic,!--non-deterministic", deterministic,
                      "Record the determinism contract with the run")
            ->capture_default_str();
        cmd->add_flag("--augment,!--no-augment", augment, "Flip/rotate augmentation")
            ->capture_default_str();
        cmd->add_option("--lr", lr, "Adam learning rate")->capture_default_str();
        cmd->add_option("--halve-lr-at", halve_lr_at, "Steps at which lr halves, comma separated");
        cmd->add_option("--map-smooth-lambda", map_smooth_lambda,
                        "Weight of the optional illumination-map smoothness loss")
            ->capture_default_str();
        cmd->add_option("--border-crop", border_crop,
                        "Metric border crop in pixels (default: the scale factor)");
    }

    TrainConfig to_config() const {
        TrainConfig c;
        c.model = model.to_config();
        c.manifest = manifest;
        c.eval_manifest = eval_manifest;
        c.run_dir = run_dir;
        c.lr_patch = patch;
        c.batch = batch;
        c.steps = steps;
        c.seed = seed;
        c.checkpoint_every = ckpt_every;
        c.eval_every = eval_every;
        c.deterministic = deterministic;
        c.augment = augment;
        c.lr = lr;
        c.lr_halve_at = parse_size_list(halve_lr_at);
        c.map_smooth_lambda = map_smooth_lambda;
        c.border_crop = border_crop;
        c.validate();
        return c;
    }
};

int run_synth_data(const std::string& hr_dir, std::size_t procedural, std::size_t chart_size,
                   const std::string& out, std::size_t scale, double gamma,
                   const std::string& gamma_range, std::uint64_t seed) {
    DegradationSpec spec;
    spec.scale = scale;
    spec.gamma = gamma;
    if (!gamma_range.empty()) {
        std::istringstream is(gamma_range);
        std::string lo, hi;
        if (!std::getline(is, lo, ',') || !std::getline(is, hi, ',')) {
            throw std::invalid_argument("synth-data: --gamma-range expects lo,hi");
        }
        spec.sample_gamma = true;
        spec.gamma_lo = std::stod(lo);
        spec.gamma_hi = std::stod(hi);
    }
    spec.validate();

    std::string source_dir = hr_dir;
    if (procedural > 0) {
        source_dir = (fs::path(out) / "hr_src").string();
        generate_charts(source_dir, procedural, chart_size, chart_size);
        std::cout << "generated " << procedural << " procedural charts in " << source_dir << "\n";
    }
    if (source_dir.empty()) {
        throw std::invalid_argument("synth-data: provide --hr-dir or --procedural N");
    }

    std::cout << "synth-data: hr_dir=" << source_dir << " out=" << out << " scale=" << spec.scale
              << " gamma=" << spec.gamma << " sample_gamma=" << (spec.sample_gamma ? 1 : 0);
    if (spec.sample_gamma) std::cout << " range=[" << spec.gamma_lo << "," << spec.gamma_hi << "]";
    std::cout << " seed=" << seed << "\n";

    const auto manifest = build_corpus(source_dir, spec, out, seed);
    std::cout << "wrote " << manifest.size() << " pairs; manifest: "
              << (fs::path(out) / "manifest.tsv").string() << "\n";
    return 0;
}

int run_infer(const std::string& checkpoint, const std::vector<std::string>& inputs,
              const std::string& out_dir, bool emit_map, bool emit_side_by_side) {
    GtfmnModel<float> model = load_checkpoint<float>(checkpoint);
    const auto& cfg = model.config();
    std::cout << "infer: checkpoint=" << checkpoint << " scale=" << cfg.scale
              << " channels=" << cfg.channels << " blocks=" << cfg.num_blocks
              << " illumination=" << (cfg.use_illumination_stream ? 1 : 0) << "\n";
    fs::create_directories(out_dir);

    bool any_failed = false;
    for (const auto& input : inputs) {
        try {
            Tensor<float> lr = read_png(input);
            Tensor<float> map;
            Tensor<float> sr = infer_image(model, lr, emit_map ? &map : nullptr);
            const std::string stem = fs::path(input).stem().string();
            const std::string sr_path = (fs::path(out_dir) / (stem + "_sr.png")).string();
            write_png(sr_path, sr);
            std::cout << input << " -> " << sr_path << "\n";
            if (emit_map) {
                const std::string map_path = (fs::path(out_dir) / (stem + "_map.png")).string();
                write_png(map_path, map);
                std::cout << input << " -> " << map_path << "\n";
            }
            if (emit_side_by_side) {
                Tensor<float> baseline = bicubic_upscale(lr, cfg.scale);
                const std::string sbs_path = (fs::path(out_dir) / (stem + "_sxs.png")).string();
                write_png(sbs_path, side_by_side(baseline, sr));
                std::cout << input << " -> " << sbs_path << "\n";
            }
        } catch (const std::exception& e) {
            std::cerr << "infer: " << input << ": " << e.what() << "\n";
            any_failed = true;
        }
    }
    return any_failed ? 2 : 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GTFMN low-light super-resolution: data synthesis, training, "
                 "inference, evaluation and ablations"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read defaults from a config file (flags win)");

    // synth-data ------------------------------------------------------------
    auto* synth = app.add_subcommand("synth-data", "Build a darkened+downsampled paired corpus");
    std::string sd_hr_dir, sd_out, sd_gamma_range;
    std::size_t sd_procedural = 0, sd_scale = 2, sd_chart = 96;
    double sd_gamma = 2.2;
    std::uint64_t sd_seed = 0;
    synth->add_option("--hr-dir", sd_hr_dir, "Directory of HR PNG images");
    synth->add_option("--procedural", sd_procedural,
                      "Generate this many procedural test charts as the HR set");
    synth->add_option("--chart-size", sd_chart, "Procedural chart edge length")
        ->capture_default_str();
    synth->add_option("--out", sd_out, "Corpus output directory")->required();
    synth->add_option("--scale", sd_scale, "Downsampling factor (2 or 4)")->capture_default_str();
    synth->add_option("--gamma", sd_gamma, "Darkening gamma")->capture_default_str();
    synth->add_option("--gamma-range", sd_gamma_range,
                      "lo,hi: sample gamma per image from this range");
    synth->add_option("--seed", sd_seed, "Seed for gamma sampling")->capture_default_str();

    // train -----------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Train a model on a paired corpus");
    TrainFlags tf;
    tf.attach(train_cmd);

    // infer -----------------------------------------------------------------
    auto* infer_cmd = app.add_subcommand("infer", "Super-resolve images with a checkpoint");
    std::string if_ckpt, if_out;
    std::vector<std::string> if_inputs;
    bool if_map = false, if_sbs = false;
    infer_cmd->add_option("--checkpoint", if_ckpt, "Model checkpoint")->required();
    infer_cmd->add_option("input", if_inputs, "Input PNG image(s)")->required();
    infer_cmd->add_option("--out-dir", if_out, "Output directory")->required();
    infer_cmd->add_flag("--emit-map", if_map, "Also write the illumination map as grayscale PNG");
    infer_cmd->add_flag("--side-by-side", if_sbs,
                        "Also write a [bicubic | model] comparison image");

    // eval ------------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint against a paired manifest");
    std::string ev_ckpt, ev_manifest, ev_out = "eval_report";
    std::size_t ev_crop = TrainConfig::kCropDefault;
    eval_cmd->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    eval_cmd->add_option("--manifest", ev_manifest, "Test manifest")->required();
    eval_cmd->add_option("--out", ev_out, "Report prefix (.csv/.json appended)")
        ->capture_default_str();
    eval_cmd->add_option("--border-crop", ev_crop,
                         "Metric border crop (default: the scale factor)");

    // ablate-blocks ---------------------------------------------------------
    auto* ab_cmd = app.add_subcommand("ablate-blocks", "Depth sweep over the IGM block count");
    TrainFlags abf;
    abf.attach(ab_cmd);
    std::string ab_depths = "1,2,4,8";
    std::vector<std::string> ab_tests;
    ab_cmd->add_option("--depths", ab_depths, "Block counts to sweep, comma separated")
        ->capture_default_str();
    ab_cmd->add_option("--test-manifest", ab_tests, "Test manifest(s) to score")->required();

    // ablate-illum ----------------------------------------------------------
    auto* ai_cmd = app.add_subcommand("ablate-illum",
                                      "Matched runs with and without the illumination stream");
    TrainFlags aif;
    aif.attach(ai_cmd);
    std::vector<std::string> ai_tests;
    ai_cmd->add_option("--test-manifest", ai_tests, "Test manifest(s) to score")->required();

    // selftest ----------------------------------------------------------------
    app.add_subcommand("selftest", "Run the embedded oracle suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) {
            return run_synth_data(sd_hr_dir, sd_procedural, sd_chart, sd_out, sd_scale, sd_gamma,
                                  sd_gamma_range, sd_seed);
        }
        if (train_cmd->parsed()) {
            TrainConfig cfg = tf.to_config();
            std::cout << "train: resolved config\n" << cfg.echo();
            RunLog log = train(cfg);
            if (log.aborted_nan) {
                std::cerr << "train: aborted on non-finite loss\n";
                return 2;
            }
            std::cout << "final loss: " << (log.losses.empty() ? 0.0 : log.losses.back())
                      << "\ncheckpoint: " << log.final_checkpoint << "\n";
            return 0;
        }
        if (infer_cmd->parsed()) {
            return run_infer(if_ckpt, if_inputs, if_out, if_map, if_sbs);
        }
        if (eval_cmd->parsed()) {
            std::cout << "eval: checkpoint=" << ev_ckpt << " manifest=" << ev_manifest
                      << " out=" << ev_out << "\n";
            EvalResult r = evaluate(ev_ckpt, ev_manifest, ev_crop, ev_out);
            std::cout << "images: " << r.rows.size() << "  mean psnr: " << r.mean.psnr
                      << " dB  mean mse: " << r.mean.mse << "  mean ssim: " << r.mean.ssim
                      << "  (border crop " << r.mean.border_crop << ")\n";
            return 0;
        }
        if (ab_cmd->parsed()) {
            TrainConfig cfg = abf.to_config();
            std::cout << "ablate-blocks: depths=" << ab_depths << "\n" << cfg.echo();
            auto rows = ablate_blocks(cfg, parse_size_list(ab_depths), ab_tests);
            for (const auto& row : rows) {
                std::cout << "blocks=" << row.depth << " params=" << row.param_count;
                for (const auto& [name, rep] : row.per_set) {
                    std::cout << "  " << name << ": " << rep.psnr << " dB / " << rep.ssim;
                }
                std::cout << "\n";
            }
            return 0;
        }
        if (ai_cmd->parsed()) {
            TrainConfig cfg = aif.to_config();
            std::cout << "ablate-illum:\n" << cfg.echo();
            auto rows = ablate_illumination(cfg, ai_tests);
            for (const auto& row : rows) {
                std::cout << row.variant << ": params=" << row.param_count
                          << " guidance_reads=" << row.guidance_reads;
                for (const auto& [name, rep] : row.per_set) {
                    std::cout << "  " << name << ": " << rep.psnr << " dB / " << rep.ssim;
                }
                std::cout << "\n";
            }
            return 0;
        }
        if (app.get_subcommand("selftest")->parsed()) {
            return selftest_report(std::cout);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
