#ifndef S2RD_AUTOENCODER_HPP
#define S2RD_AUTOENCODER_HPP

#include <utility>
#include <vector>

#include "s2rd/checkpoint.hpp"
#include "s2rd/image.hpp"
#include "s2rd/metrics.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

// Perceptual compressor: conv encoder mapping [-1,1] RGB images to latents at
// a 2^k downsample factor, mirrored nearest-upsample decoder with a tanh
// output. Deterministic bottleneck; a small L2 penalty on latent magnitude
// replaces the KL term at this scale.
class AutoencoderModel {
public:
    struct Config {
        int latent_channels = 4;
        int downsample_factor = 8;  // power of two
        int groups = 8;
    };

    void init(const Config& cfg, Rng& rng);

    // x [B,3,H,W] with H,W divisible by the downsample factor.
    Tensor encode(const Tensor& x) const;
    // z [B,c,h,w] -> [B,3,h*f,w*f], values in [-1,1].
    Tensor decode(const Tensor& z) const;

    const Config& config() const { return cfg_; }
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

private:
    Config cfg_;
    std::vector<int> widths_;  // per-scale channel counts
    Tensor enc_in_w, enc_in_b;
    std::vector<Tensor> enc_w_, enc_b_, enc_gn_g_, enc_gn_b_;
    Tensor enc_out_w, enc_out_b;
    Tensor dec_in_w, dec_in_b;
    std::vector<Tensor> dec_w_, dec_b_, dec_gn_g_, dec_gn_b_;
    Tensor dec_out_w, dec_out_b;
};

struct AutoencoderTrainConfig {
    int steps = 1500;
    int batch = 8;
    float lr = 2e-3f;
    float feature_weight = 0.1f;  // feature-matching term against fx
    float latent_weight = 1e-4f;  // L2 penalty on latent magnitude
    std::uint64_t seed = 0;
};

struct TrainCurve {
    std::vector<std::pair<int, float>> points;  // (step, loss)

    std::string to_csv() const;  // "step,loss" lines
    void save_csv(const std::string& path) const;
};

// Trains in place; fx is optional (feature-matching skipped when null).
// Throws TrainingError with the step index if the loss turns non-finite.
TrainCurve train_autoencoder(AutoencoderModel& model, const std::vector<Image>& dataset,
                             const AutoencoderTrainConfig& cfg, const FeatureExtractor* fx);

// 1/std of encoded latents over a dataset; multiplies latents fed to the
// diffusion model so they are roughly unit-variance.
float compute_latent_scale(const AutoencoderModel& model, const std::vector<Image>& dataset);

}  // namespace s2rd

#endif
