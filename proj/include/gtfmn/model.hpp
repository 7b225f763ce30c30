#pragma once

#include <atomic>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gtfmn/ops.hpp"
#include "gtfmn/rng.hpp"
#include "gtfmn/serialize.hpp"
#include "gtfmn/tensor.hpp"

// GTFMN: a dual-stream network for low-light super-resolution. The
// illumination stream estimates a per-pixel light map M in [0,1] and a
// global intensity g; the texture stream restores content through a chain
// of illumination-guided modulation (IGM) blocks and reconstructs the
// upscaled image with a convolution followed by sub-pixel shuffling.

namespace gtfmn {

// What the IGM blocks do when the illumination stream is disabled:
// kDrop removes the guide adapter entirely, kConst1 keeps the adapter and
// feeds it a constant all-ones map.
enum class GuideMode { kDrop, kConst1 };

inline std::string to_string(GuideMode m) {
    return m == GuideMode::kDrop ? "drop" : "const1";
}

inline GuideMode guide_mode_from_string(const std::string& s) {
    if (s == "drop") return GuideMode::kDrop;
    if (s == "const1") return GuideMode::kConst1;
    throw std::invalid_argument("unknown guide mode '" + s + "' (expected drop|const1)");
}

struct GtfmnConfig {
    std::size_t scale = 2;             // upscaling factor s
    std::size_t channels = 32;         // feature width C
    std::size_t num_blocks = 4;        // IGM block count N
    double epsilon = 1e-4;             // stabilizer in the map synthesis
    bool use_illumination_stream = true;
    GuideMode guide_mode = GuideMode::kDrop;
    std::vector<std::size_t> msa_kernels = {3, 5, 7};
    std::size_t ffn_expansion = 2;
    double lrelu_slope = 0.2;

    void validate() const {
        if (scale != 2 && scale != 4) {
            throw std::invalid_argument("GtfmnConfig: scale must be 2 or 4, got " +
                                        std::to_string(scale));
        }
        if (channels < 1 || num_blocks < 1) {
            throw std::invalid_argument("GtfmnConfig: channels and num_blocks must be >= 1");
        }
        if (!(epsilon > 0)) {
            throw std::invalid_argument("GtfmnConfig: epsilon must be positive");
        }
        if (ffn_expansion < 1) {
            throw std::invalid_argument("GtfmnConfig: ffn_expansion must be >= 1");
        }
        if (msa_kernels.empty()) {
            throw std::invalid_argument("GtfmnConfig: msa_kernels must not be empty");
        }
        for (std::size_t k : msa_kernels) {
            if (k % 2 == 0 || k == 0) {
                throw std::invalid_argument(
                    "GtfmnConfig: msa kernel sizes must be odd, got " + std::to_string(k));
            }
        }
    }

    std::size_t max_msa_kernel() const {
        std::size_t m = 0;
        for (std::size_t k : msa_kernels) m = std::max(m, k);
        return m;
    }

    // Blocks consume guidance unless the stream is off in drop mode.
    bool guided() const {
        return use_illumination_stream || guide_mode == GuideMode::kConst1;
    }

    bool operator==(const GtfmnConfig& o) const {
        return scale == o.scale && channels == o.channels && num_blocks == o.num_blocks &&
               epsilon == o.epsilon && use_illumination_stream == o.use_illumination_stream &&
               guide_mode == o.guide_mode && msa_kernels == o.msa_kernels &&
               ffn_expansion == o.ffn_expansion && lrelu_slope == o.lrelu_slope;
    }
};

// Single-channel light map plus per-sample global intensity, both in [0,1].
template <typename Scalar>
struct IlluminationMap {
    Tensor<Scalar> values;            // N x 1 x H x W
    Tensor<Scalar> global_intensity;  // N x 1 x 1 x 1
};

template <typename Scalar>
struct ForwardResult {
    Tensor<Scalar> sr;                // N x 3 x sH x sW
    IlluminationMap<Scalar> map;
};

// Optional per-forward instrumentation for tests and debugging.
template <typename Scalar>
struct GtfmnTrace {
    Tensor<Scalar> m_spatial;
    Tensor<Scalar> global_intensity;
    Tensor<Scalar> map;
    std::vector<Tensor<Scalar>> a_self;
    std::vector<Tensor<Scalar>> a_guide;   // empty entries when unguided
    std::vector<Tensor<Scalar>> a_final;
};

template <typename Scalar>
struct ConvLayer {
    Tensor<Scalar> weight;
    Tensor<Scalar> bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t groups = 1;

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
        return conv2d(x, weight, bias, stride, padding, groups);
    }
};

template <typename Scalar>
class GtfmnModel {
public:
    explicit GtfmnModel(GtfmnConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
        config_.validate();
        Rng rng(seed);
        const std::size_t C = config_.channels;
        const Scalar slope = static_cast<Scalar>(config_.lrelu_slope);

        if (config_.use_illumination_stream) {
            illum_.enc1 = make_conv(3, C, 3, 1, 1, rng, slope);
            illum_.enc2 = make_conv(C, C, 3, 1, 1, rng, slope);
            illum_.enc3 = make_conv(C, C, 3, 1, 1, rng, slope);
            illum_.struct_dec = make_conv(C, 1, 3, 1, 1, rng, slope);
            const std::size_t hidden = std::max<std::size_t>(1, C / 2);
            illum_.global1 = make_conv(C, hidden, 1, 0, 1, rng, slope);
            illum_.global2 = make_conv(hidden, 1, 1, 0, 1, rng, slope);
        }

        texture_.head = make_conv(3, C, 3, 1, 1, rng, slope);
        texture_.blocks.resize(config_.num_blocks);
        for (auto& blk : texture_.blocks) {
            blk.norm_gamma = Tensor<Scalar>::ones({1, C, 1, 1});
            blk.norm_beta = Tensor<Scalar>::zeros({1, C, 1, 1});
            for (std::size_t k : config_.msa_kernels) {
                blk.msa_dw.push_back(make_conv(C, C, k, k / 2, C, rng, slope));
            }
            blk.msa_proj = make_conv(C, C, 1, 0, 1, rng, slope);
            if (config_.guided()) {
                blk.adapter1 = make_conv(1, C, 1, 0, 1, rng, slope);
                blk.adapter2 = make_conv(C, C, 1, 0, 1, rng, slope);
            }
            const std::size_t E = config_.ffn_expansion * C;
            blk.ffn1 = make_conv(C, E, 1, 0, 1, rng, slope);
            blk.ffn2 = make_conv(E, C, 1, 0, 1, rng, slope);
        }
        const std::size_t out_ch = 3 * config_.scale * config_.scale;
        texture_.recon = make_conv(C, out_ch, 3, 1, 1, rng, slope);

        for (auto& p : named_parameters()) p.tensor.set_requires_grad(true);
    }

    GtfmnModel(const GtfmnModel&) = delete;
    GtfmnModel& operator=(const GtfmnModel&) = delete;
    GtfmnModel(GtfmnModel&& other) noexcept
        : config_(std::move(other.config_)), illum_(std::move(other.illum_)),
          texture_(std::move(other.texture_)), guidance_reads_(other.guidance_reads_.load()) {}
    GtfmnModel& operator=(GtfmnModel&& other) noexcept {
        config_ = std::move(other.config_);
        illum_ = std::move(other.illum_);
        texture_ = std::move(other.texture_);
        guidance_reads_.store(other.guidance_reads_.load());
        return *this;
    }

    const GtfmnConfig& config() const { return config_; }

    ForwardResult<Scalar> forward(const Tensor<Scalar>& input,
                                  GtfmnTrace<Scalar>* trace = nullptr) const {
        if (input.rank() != 4 || input.extent(1) != 3) {
            throw std::invalid_argument("GtfmnModel::forward: expected N x 3 x H x W input, got " +
                                        shape_str(input.shape()));
        }
        const std::size_t H = input.extent(2), W = input.extent(3);
        const std::size_t kmin = config_.max_msa_kernel();
        if (H < kmin || W < kmin) {
            throw std::invalid_argument("GtfmnModel::forward: spatial dims " + shape_str(input.shape()) +
                                        " below the minimum " + std::to_string(kmin) + "x" +
                                        std::to_string(kmin));
        }

        const Scalar slope = static_cast<Scalar>(config_.lrelu_slope);
        IlluminationMap<Scalar> map;
        if (config_.use_illumination_stream) {
            Tensor<Scalar> f = illum_.enc1(input);
            f = leaky_relu(f, slope);
            f = leaky_relu(illum_.enc2(f), slope);
            f = illum_.enc3(f);
            Tensor<Scalar> m_spatial = sigmoid(illum_.struct_dec(f));
            Tensor<Scalar> pooled = spatial_mean(f);
            Tensor<Scalar> g = sigmoid(illum_.global2(leaky_relu(illum_.global1(pooled), slope)));
            map.values = synthesize_illumination_map(m_spatial, g, static_cast<Scalar>(config_.epsilon));
            map.global_intensity = g;
            if (trace) {
                trace->m_spatial = m_spatial;
                trace->global_intensity = g;
                trace->map = map.values;
            }
        } else {
            map.values = Tensor<Scalar>::ones({input.extent(0), 1, H, W});
            map.global_intensity = Tensor<Scalar>::ones({input.extent(0), 1, 1, 1});
            if (trace) {
                trace->map = map.values;
                trace->global_intensity = map.global_intensity;
            }
        }

        Tensor<Scalar> feat = texture_.head(input);
        for (const auto& blk : texture_.blocks) {
            feat = run_block(blk, feat, map.values, trace);
        }
        Tensor<Scalar> sr = pixel_shuffle(texture_.recon(feat), config_.scale);
        return {sr, map};
    }

    // Map synthesis: normalize the spatial map to unit mean, scale by the
    // global intensity, and saturate into [0,1]. The epsilon guards the
    // all-zero map.
    static Tensor<Scalar> synthesize_illumination_map(const Tensor<Scalar>& m_spatial,
                                                      const Tensor<Scalar>& g, Scalar epsilon) {
        Tensor<Scalar> denom = add_scalar(spatial_mean(m_spatial), epsilon);
        Tensor<Scalar> scaled = mul(div(m_spatial, denom), g);
        return clamp(scaled, Scalar{0}, Scalar{1});
    }

    // One IGM block applied to explicit features and map; the same code path
    // forward() runs, exposed for probing individual blocks.
    Tensor<Scalar> igm_block_forward(std::size_t index, const Tensor<Scalar>& f_in,
                                     const Tensor<Scalar>& map,
                                     GtfmnTrace<Scalar>* trace = nullptr) const {
        return run_block(texture_.blocks.at(index), f_in, map, trace);
    }

    std::vector<NamedTensor<Scalar>> named_parameters() {
        std::vector<NamedTensor<Scalar>> out;
        collect_parameters([&](const std::string& name, Tensor<Scalar>& t) {
            out.push_back({name, t});
        });
        return out;
    }

    std::vector<NamedTensor<Scalar>> named_parameters() const {
        return const_cast<GtfmnModel*>(this)->named_parameters();
    }

    std::size_t count_parameters() const {
        std::size_t total = 0;
        for (const auto& p : named_parameters()) total += p.tensor.numel();
        return total;
    }

    void zero_grads() {
        for (auto& p : named_parameters()) p.tensor.zero_grad();
    }

    // Number of times any IGM block has consumed the illumination map.
    std::int64_t guidance_read_count() const { return guidance_reads_.load(); }
    void reset_guidance_read_count() { guidance_reads_.store(0); }

private:
    struct IgmBlock {
        Tensor<Scalar> norm_gamma, norm_beta;
        std::vector<ConvLayer<Scalar>> msa_dw;
        ConvLayer<Scalar> msa_proj;
        ConvLayer<Scalar> adapter1, adapter2;  // only when guided
        ConvLayer<Scalar> ffn1, ffn2;
    };

    struct IlluminationStream {
        ConvLayer<Scalar> enc1, enc2, enc3;
        ConvLayer<Scalar> struct_dec;
        ConvLayer<Scalar> global1, global2;
    };

    struct TextureStream {
        ConvLayer<Scalar> head;
        std::vector<IgmBlock> blocks;
        ConvLayer<Scalar> recon;
    };

    static ConvLayer<Scalar> make_conv(std::size_t cin, std::size_t cout, std::size_t k,
                                       std::size_t padding, std::size_t groups, Rng& rng,
                                       Scalar slope) {
        // He-style uniform init with leaky-ReLU gain.
        const std::size_t fan_in = (cin / groups) * k * k;
        const double gain = std::sqrt(2.0 / (1.0 + static_cast<double>(slope) * slope));
        const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
        ConvLayer<Scalar> layer;
        layer.weight = Tensor<Scalar>::rand_uniform({cout, cin / groups, k, k}, rng,
                                                    static_cast<Scalar>(-bound),
                                                    static_cast<Scalar>(bound));
        layer.bias = Tensor<Scalar>::zeros({cout});
        layer.stride = 1;
        layer.padding = padding;
        layer.groups = groups;
        return layer;
    }

    Tensor<Scalar> run_block(const IgmBlock& blk, const Tensor<Scalar>& f_in,
                             const Tensor<Scalar>& m, GtfmnTrace<Scalar>* trace) const {
        if (m.extent(2) != f_in.extent(2) || m.extent(3) != f_in.extent(3)) {
            throw std::invalid_argument("igm_block: map " + shape_str(m.shape()) +
                                        " does not match features " + shape_str(f_in.shape()));
        }
        const Scalar slope = static_cast<Scalar>(config_.lrelu_slope);
        Tensor<Scalar> f_norm = add(mul(channel_norm(f_in), blk.norm_gamma), blk.norm_beta);

        Tensor<Scalar> msa;
        for (std::size_t i = 0; i < blk.msa_dw.size(); ++i) {
            Tensor<Scalar> branch = blk.msa_dw[i](f_norm);
            msa = i == 0 ? branch : add(msa, branch);
        }
        Tensor<Scalar> a_self = sigmoid(blk.msa_proj(msa));

        Tensor<Scalar> a_final = a_self;
        Tensor<Scalar> a_guide;
        if (config_.guided()) {
            ++guidance_reads_;
            a_guide = sigmoid(blk.adapter2(leaky_relu(blk.adapter1(m), slope)));
            a_final = add(a_self, a_guide);
        }
        if (trace) {
            trace->a_self.push_back(a_self);
            trace->a_guide.push_back(a_guide);
            trace->a_final.push_back(a_final);
        }

        Tensor<Scalar> f_mod = mul(a_final, f_norm);
        Tensor<Scalar> ffn = blk.ffn2(leaky_relu(blk.ffn1(f_mod), slope));
        return add(f_in, add(f_mod, ffn));
    }

    template <typename Fn>
    void collect_parameters(Fn&& visit) {
        auto conv = [&](const std::string& name, ConvLayer<Scalar>& c) {
            visit(name + ".weight", c.weight);
            visit(name + ".bias", c.bias);
        };
        if (config_.use_illumination_stream) {
            conv("illum.enc1", illum_.enc1);
            conv("illum.enc2", illum_.enc2);
            conv("illum.enc3", illum_.enc3);
            conv("illum.struct_dec", illum_.struct_dec);
            conv("illum.global1", illum_.global1);
            conv("illum.global2", illum_.global2);
        }
        conv("texture.head", texture_.head);
        for (std::size_t i = 0; i < texture_.blocks.size(); ++i) {
            auto& blk = texture_.blocks[i];
            const std::string p = "texture.block" + std::to_string(i);
            visit(p + ".norm.gamma", blk.norm_gamma);
            visit(p + ".norm.beta", blk.norm_beta);
            for (std::size_t j = 0; j < blk.msa_dw.size(); ++j) {
                conv(p + ".msa_dw" + std::to_string(config_.msa_kernels[j]), blk.msa_dw[j]);
            }
            conv(p + ".msa_proj", blk.msa_proj);
            if (config_.guided()) {
                conv(p + ".adapter1", blk.adapter1);
                conv(p + ".adapter2", blk.adapter2);
            }
            conv(p + ".ffn1", blk.ffn1);
            conv(p + ".ffn2", blk.ffn2);
        }
        conv("texture.recon", texture_.recon);
    }

    GtfmnConfig config_;
    IlluminationStream illum_;
    TextureStream texture_;
    mutable std::atomic<std::int64_t> guidance_reads_{0};
};

// ---------------------------------------------------------------------------
// Checkpoints: a line-oriented text header recording the config, a "---"
// separator, then the binary tensor container.

inline std::string checkpoint_header_line(const GtfmnConfig& c, DType dtype) {
    std::ostringstream os;
    os << "GTFMN-CHECKPOINT 1\n";
    os << "scale=" << c.scale << "\n";
    os << "channels=" << c.channels << "\n";
    os << "blocks=" << c.num_blocks << "\n";
    os << "epsilon=" << std::setprecision(17) << c.epsilon << "\n";
    os << "illumination_stream=" << (c.use_illumination_stream ? 1 : 0) << "\n";
    os << "guide_mode=" << to_string(c.guide_mode) << "\n";
    os << "msa_kernels=";
    for (std::size_t i = 0; i < c.msa_kernels.size(); ++i) {
        if (i) os << ',';
        os << c.msa_kernels[i];
    }
    os << "\n";
    os << "ffn_expansion=" << c.ffn_expansion << "\n";
    os << "lrelu_slope=" << std::setprecision(17) << c.lrelu_slope << "\n";
    os << "dtype=" << (dtype == DType::f32 ? "f32" : "f64") << "\n";
    os << "---\n";
    return os.str();
}

inline GtfmnConfig parse_checkpoint_header(std::istream& is, DType* dtype_out = nullptr) {
    std::string line;
    if (!std::getline(is, line) || line != "GTFMN-CHECKPOINT 1") {
        throw std::runtime_error("checkpoint: missing or unsupported header line");
    }
    GtfmnConfig c;
    DType dtype = DType::f32;
    while (std::getline(is, line)) {
        if (line == "---") {
            if (dtype_out) *dtype_out = dtype;
            return c;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("checkpoint: malformed header line '" + line + "'");
        }
        const std::string key = line.substr(0, eq);
        const std::string val = line.substr(eq + 1);
        if (key == "scale") c.scale = std::stoul(val);
        else if (key == "channels") c.channels = std::stoul(val);
        else if (key == "blocks") c.num_blocks = std::stoul(val);
        else if (key == "epsilon") c.epsilon = std::stod(val);
        else if (key == "illumination_stream") c.use_illumination_stream = val != "0";
        else if (key == "guide_mode") c.guide_mode = guide_mode_from_string(val);
        else if (key == "msa_kernels") {
            c.msa_kernels.clear();
            std::istringstream ks(val);
            std::string tok;
            while (std::getline(ks, tok, ',')) c.msa_kernels.push_back(std::stoul(tok));
        } else if (key == "ffn_expansion") c.ffn_expansion = std::stoul(val);
        else if (key == "lrelu_slope") c.lrelu_slope = std::stod(val);
        else if (key == "dtype") dtype = (val == "f64") ? DType::f64 : DType::f32;
        else throw std::runtime_error("checkpoint: unknown header key '" + key + "'");
    }
    throw std::runtime_error("checkpoint: header not terminated by ---");
}

template <typename Scalar>
void save_checkpoint(const std::string& path, GtfmnModel<Scalar>& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << checkpoint_header_line(model.config(), dtype_of<Scalar>());
    write_tensor_container(os, model.named_parameters());
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

template <typename Scalar>
GtfmnModel<Scalar> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open for reading: " + path);
    DType dtype;
    GtfmnConfig config = parse_checkpoint_header(is, &dtype);
    if (dtype != dtype_of<Scalar>()) {
        throw std::runtime_error("checkpoint " + path + " stores " +
                                 std::string(dtype == DType::f32 ? "f32" : "f64") +
                                 " tensors; requested scalar type does not match");
    }
    auto entries = read_tensor_container<Scalar>(is);
    GtfmnModel<Scalar> model(config, /*seed=*/0);
    auto params = model.named_parameters();
    if (entries.size() != params.size()) {
        throw std::runtime_error("checkpoint: expected " + std::to_string(params.size()) +
                                 " tensors, found " + std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (entries[i].name != params[i].name) {
            throw std::runtime_error("checkpoint: tensor '" + entries[i].name +
                                     "' does not match expected '" + params[i].name + "'");
        }
        if (entries[i].tensor.shape() != params[i].tensor.shape()) {
            throw std::runtime_error("checkpoint: tensor '" + entries[i].name + "' has shape " +
                                     shape_str(entries[i].tensor.shape()) + ", expected " +
                                     shape_str(params[i].tensor.shape()));
        }
        params[i].tensor.values() = entries[i].tensor.values();
    }
    return model;
}

} // namespace gtfmn
