#include "gtfmn/trainer.hpp"

#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "gtfmn/optim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gtfmn {

namespace {

// Infinite PSNR (zero MSE) becomes the string "inf" in JSON, which has no
// infinity literal.
json psnr_json(double psnr) {
    if (std::isinf(psnr)) return json("inf");
    return json(psnr);
}

void write_eval_files(const std::string& prefix, const EvalResult& result) {
    std::ofstream csv(prefix + ".csv");
    if (!csv) throw std::runtime_error("cannot open for writing: " + prefix + ".csv");
    csv << std::setprecision(10);
    csv << "id,psnr,mse,ssim\n";
    for (const auto& row : result.rows) {
        csv << row.id << ',' << row.report.psnr << ',' << row.report.mse << ','
            << row.report.ssim << '\n';
    }
    csv << "mean," << result.mean.psnr << ',' << result.mean.mse << ',' << result.mean.ssim
        << '\n';

    json j;
    j["border_crop"] = result.mean.border_crop;
    j["aggregation"] = "per-image metrics, then mean over images";
    j["mean"] = {{"psnr", psnr_json(result.mean.psnr)},
                 {"mse", result.mean.mse},
                 {"ssim", result.mean.ssim}};
    j["images"] = json::array();
    for (const auto& row : result.rows) {
        j["images"].push_back({{"id", row.id},
                               {"psnr", psnr_json(row.report.psnr)},
                               {"mse", row.report.mse},
                               {"ssim", row.report.ssim}});
    }
    std::ofstream js(prefix + ".json");
    js << j.dump(2) << '\n';
}

std::string checkpoint_name(std::size_t step) {
    return "ckpt_" + std::to_string(step) + ".bin";
}

std::string set_name(const std::string& manifest_path) {
    return fs::path(manifest_path).parent_path().filename().string();
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

} // namespace

void TrainConfig::validate() const {
    model.validate();
    if (manifest.empty()) throw std::invalid_argument("TrainConfig: manifest is required");
    if (run_dir.empty()) throw std::invalid_argument("TrainConfig: run_dir is required");
    if (lr_patch == 0 || batch == 0 || steps == 0) {
        throw std::invalid_argument("TrainConfig: lr_patch, batch and steps must be positive");
    }
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (map_smooth_lambda < 0) {
        throw std::invalid_argument("TrainConfig: map_smooth_lambda must be >= 0");
    }
}

std::string TrainConfig::echo() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "model.scale=" << model.scale << "\n";
    os << "model.channels=" << model.channels << "\n";
    os << "model.blocks=" << model.num_blocks << "\n";
    os << "model.epsilon=" << model.epsilon << "\n";
    os << "model.illumination_stream=" << (model.use_illumination_stream ? 1 : 0) << "\n";
    os << "model.guide_mode=" << to_string(model.guide_mode) << "\n";
    os << "model.ffn_expansion=" << model.ffn_expansion << "\n";
    os << "model.lrelu_slope=" << model.lrelu_slope << "\n";
    os << "model.msa_kernels=";
    for (std::size_t i = 0; i < model.msa_kernels.size(); ++i) {
        if (i) os << ',';
        os << model.msa_kernels[i];
    }
    os << "\n";
    os << "manifest=" << manifest << "\n";
    os << "eval_manifest=" << eval_manifest << "\n";
    os << "run_dir=" << run_dir << "\n";
    os << "lr_patch=" << lr_patch << "\n";
    os << "batch=" << batch << "\n";
    os << "steps=" << steps << "\n";
    os << "seed=" << seed << "\n";
    os << "checkpoint_every=" << checkpoint_every << "\n";
    os << "eval_every=" << eval_every << "\n";
    os << "deterministic=" << (deterministic ? 1 : 0) << "\n";
    os << "augment=" << (augment ? 1 : 0) << "\n";
    os << "lr=" << lr << "\n";
    os << "lr_halve_at=";
    for (std::size_t i = 0; i < lr_halve_at.size(); ++i) {
        if (i) os << ',';
        os << lr_halve_at[i];
    }
    os << "\n";
    os << "map_smooth_lambda=" << map_smooth_lambda << "\n";
    os << "border_crop=" << resolved_border_crop() << "\n";
    return os.str();
}

Tensor<float> bicubic_upscale(const Tensor<float>& lr, std::size_t scale) {
    return bicubic_resize(lr, lr.extent(1) * scale, lr.extent(2) * scale);
}

Tensor<float> infer_image(const GtfmnModel<float>& model, const Tensor<float>& lr,
                          Tensor<float>* map_out) {
    if (lr.rank() != 3 || lr.extent(0) != 3) {
        throw std::invalid_argument("infer_image: expected 3 x H x W input, got " +
                                    shape_str(lr.shape()));
    }
    auto batched = lr.reshaped({1, 3, lr.extent(1), lr.extent(2)});
    auto result = model.forward(batched);
    Tensor<float> sr = clamp(result.sr, 0.f, 1.f)
                           .reshaped({3, result.sr.extent(2), result.sr.extent(3)});
    if (map_out) {
        *map_out = result.map.values.reshaped({1, lr.extent(1), lr.extent(2)}).clone();
    }
    return sr;
}

EvalResult evaluate_model(const GtfmnModel<float>& model, const std::vector<PairedSample>& pairs,
                          std::size_t border_crop) {
    if (pairs.empty()) throw std::invalid_argument("evaluate_model: no pairs");
    const std::size_t scale = pairs_scale(pairs);
    if (scale != model.config().scale) {
        throw std::invalid_argument("evaluate_model: corpus scale " + std::to_string(scale) +
                                    " does not match model scale " +
                                    std::to_string(model.config().scale));
    }
    EvalResult result;
    double psnr = 0, mse = 0, ssim_acc = 0;
    for (const auto& pair : pairs) {
        Tensor<float> sr = infer_image(model, pair.lr);
        MetricReport rep = evaluate_pair(sr, pair.hr, border_crop);
        psnr += rep.psnr;
        mse += rep.mse;
        ssim_acc += rep.ssim;
        result.rows.push_back({pair.id, rep});
    }
    const double n = double(result.rows.size());
    result.mean.psnr = psnr / n;
    result.mean.mse = mse / n;
    result.mean.ssim = ssim_acc / n;
    result.mean.border_crop = border_crop;
    return result;
}

EvalResult evaluate(const std::string& checkpoint_path, const std::string& manifest_path,
                    std::size_t border_crop, const std::string& out_prefix) {
    GtfmnModel<float> model = load_checkpoint<float>(checkpoint_path);
    const std::size_t crop =
        border_crop == TrainConfig::kCropDefault ? model.config().scale : border_crop;
    auto pairs = load_pairs(manifest_path);
    EvalResult result = evaluate_model(model, pairs, crop);
    if (!out_prefix.empty()) {
        write_eval_files(out_prefix, result);
    }
    return result;
}

RunLog train(const TrainConfig& config) {
    config.validate();
    fs::create_directories(config.run_dir);
    {
        std::ofstream cfg(fs::path(config.run_dir) / "config.txt");
        cfg << config.echo();
    }

    auto pairs = load_pairs(config.manifest);
    const std::size_t corpus_scale = pairs_scale(pairs);
    if (corpus_scale != config.model.scale) {
        throw std::invalid_argument("train: corpus scale " + std::to_string(corpus_scale) +
                                    " does not match model scale " +
                                    std::to_string(config.model.scale));
    }
    std::vector<PairedSample> eval_pairs;
    if (!config.eval_manifest.empty()) {
        eval_pairs = load_pairs(config.eval_manifest);
    }

    GtfmnModel<float> model(config.model, config.seed);
    typename Adam<float>::Options adam_opts;
    adam_opts.lr = static_cast<float>(config.lr);
    Adam<float> adam(model.named_parameters(), adam_opts);
    PatchSampler sampler(std::move(pairs), config.lr_patch, config.batch, config.seed + 1,
                         config.augment);

    std::ofstream loss_csv(fs::path(config.run_dir) / "loss.csv");
    loss_csv << "step,loss\n" << std::setprecision(10);

    RunLog log;
    log.started_at = utc_now();
    std::string last_checkpoint;
    std::size_t next_halve = 0;
    for (std::size_t step = 1; step <= config.steps; ++step) {
        if (next_halve < config.lr_halve_at.size() && step == config.lr_halve_at[next_halve]) {
            adam.set_learning_rate(adam.learning_rate() * 0.5f);
            ++next_halve;
        }

        auto batch = sampler.next();
        Tape<float> tape;
        float loss_value = 0;
        {
            Tape<float>::Scope scope(tape);
            auto out = model.forward(batch.lr);
            Tensor<float> loss = l1_loss(out.sr, batch.hr);
            if (config.map_smooth_lambda > 0 && config.model.use_illumination_stream) {
                loss = add(loss, scale(total_variation(out.map.values),
                                       static_cast<float>(config.map_smooth_lambda)));
            }
            loss_value = loss.data()[0];
            if (!std::isfinite(loss_value)) {
                // Abort and keep the last good checkpoint for debugging.
                std::cerr << "train: non-finite loss at step " << step
                          << "; aborting, last checkpoint: "
                          << (last_checkpoint.empty() ? "<none>" : last_checkpoint) << "\n";
                log.aborted_nan = true;
                log.final_checkpoint = last_checkpoint;
                log.finished_at = utc_now();
                std::ofstream meta(fs::path(config.run_dir) / "run_meta.txt");
                meta << "started=" << log.started_at << "\nfinished=" << log.finished_at
                     << "\naborted_nan=1\n";
                return log;
            }
            adam.zero_grad();
            tape.backward(loss);
        }
        adam.step();
        log.losses.push_back(loss_value);
        loss_csv << step << ',' << loss_value << '\n';

        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            const std::string name = checkpoint_name(step);
            save_checkpoint((fs::path(config.run_dir) / name).string(), model);
            last_checkpoint = name;
        }
        if (!eval_pairs.empty() && config.eval_every > 0 && step % config.eval_every == 0) {
            EvalResult r = evaluate_model(model, eval_pairs, config.resolved_border_crop());
            write_eval_files((fs::path(config.run_dir) / ("eval_" + std::to_string(step))).string(),
                             r);
            log.evals.emplace_back(step, std::move(r));
        }
    }

    const std::string final_path = (fs::path(config.run_dir) / "ckpt_final.bin").string();
    save_checkpoint(final_path, model);
    log.final_checkpoint = final_path;
    if (!eval_pairs.empty()) {
        EvalResult r = evaluate_model(model, eval_pairs, config.resolved_border_crop());
        write_eval_files((fs::path(config.run_dir) / "eval_final").string(), r);
        log.evals.emplace_back(config.steps, std::move(r));
    }
    log.finished_at = utc_now();
    {
        std::ofstream meta(fs::path(config.run_dir) / "run_meta.txt");
        meta << "started=" << log.started_at << "\nfinished=" << log.finished_at
             << "\naborted_nan=0\n";
    }
    return log;
}

std::vector<BlockAblationRow> ablate_blocks(const TrainConfig& base,
                                            const std::vector<std::size_t>& depths,
                                            const std::vector<std::string>& test_manifests) {
    if (depths.empty()) throw std::invalid_argument("ablate_blocks: depths must be non-empty");
    fs::create_directories(base.run_dir);
    std::vector<BlockAblationRow> rows;
    for (std::size_t depth : depths) {
        TrainConfig cfg = base;
        cfg.model.num_blocks = depth;
        cfg.run_dir = (fs::path(base.run_dir) / ("blocks_" + std::to_string(depth))).string();
        RunLog log = train(cfg);
        if (log.aborted_nan) {
            throw std::runtime_error("ablate_blocks: run with depth " + std::to_string(depth) +
                                     " aborted on non-finite loss");
        }
        BlockAblationRow row;
        row.depth = depth;
        row.param_count = GtfmnModel<float>(cfg.model, cfg.seed).count_parameters();
        for (const auto& tm : test_manifests) {
            EvalResult r = evaluate(log.final_checkpoint, tm, cfg.resolved_border_crop());
            row.per_set.emplace_back(set_name(tm), r.mean);
        }
        rows.push_back(std::move(row));
    }

    // Table: one row per depth, PSNR/SSIM per test set.
    std::ofstream csv(fs::path(base.run_dir) / "ablate_blocks.csv");
    csv << std::setprecision(10) << "blocks,params";
    for (const auto& [name, rep] : rows.front().per_set) {
        csv << ',' << name << "_psnr," << name << "_ssim";
    }
    csv << '\n';
    json j = json::array();
    for (const auto& row : rows) {
        csv << row.depth << ',' << row.param_count;
        json sets = json::object();
        for (const auto& [name, rep] : row.per_set) {
            csv << ',' << rep.psnr << ',' << rep.ssim;
            sets[name] = {{"psnr", rep.psnr}, {"mse", rep.mse}, {"ssim", rep.ssim}};
        }
        csv << '\n';
        j.push_back({{"blocks", row.depth}, {"params", row.param_count}, {"sets", sets}});
    }
    std::ofstream js(fs::path(base.run_dir) / "ablate_blocks.json");
    js << j.dump(2) << '\n';
    return rows;
}

std::vector<IllumAblationRow> ablate_illumination(const TrainConfig& base,
                                                  const std::vector<std::string>& test_manifests) {
    fs::create_directories(base.run_dir);
    std::vector<IllumAblationRow> rows;
    for (bool with_stream : {true, false}) {
        TrainConfig cfg = base;
        cfg.model.use_illumination_stream = with_stream;
        cfg.model.guide_mode = GuideMode::kDrop;
        cfg.run_dir = (fs::path(base.run_dir) /
                       (with_stream ? "with_illumination" : "without_illumination"))
                          .string();
        RunLog log = train(cfg);
        if (log.aborted_nan) {
            throw std::runtime_error("ablate_illumination: run aborted on non-finite loss");
        }

        IllumAblationRow row;
        row.variant = with_stream ? "with_illumination" : "without_illumination";

        GtfmnModel<float> model = load_checkpoint<float>(log.final_checkpoint);
        row.param_count = model.count_parameters();
        model.reset_guidance_read_count();
        for (const auto& tm : test_manifests) {
            EvalResult r = evaluate_model(model, load_pairs(tm), cfg.resolved_border_crop());
            row.per_set.emplace_back(set_name(tm), r.mean);
        }
        row.guidance_reads = model.guidance_read_count();
        rows.push_back(std::move(row));
    }

    std::ofstream csv(fs::path(base.run_dir) / "ablate_illumination.csv");
    csv << std::setprecision(10) << "variant,params,guidance_reads";
    for (const auto& [name, rep] : rows.front().per_set) {
        csv << ',' << name << "_psnr," << name << "_ssim";
    }
    csv << '\n';
    json j = json::array();
    for (const auto& row : rows) {
        csv << row.variant << ',' << row.param_count << ',' << row.guidance_reads;
        json sets = json::object();
        for (const auto& [name, rep] : row.per_set) {
            csv << ',' << rep.psnr << ',' << rep.ssim;
            sets[name] = {{"psnr", rep.psnr}, {"mse", rep.mse}, {"ssim", rep.ssim}};
        }
        csv << '\n';
        j.push_back({{"variant", row.variant},
                     {"params", row.param_count},
                     {"guidance_reads", row.guidance_reads},
                     {"sets", sets}});
    }
    std::ofstream js(fs::path(base.run_dir) / "ablate_illumination.json");
    js << j.dump(2) << '\n';
    return rows;
}

} // namespace gtfmn
