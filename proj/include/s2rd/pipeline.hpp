#ifndef S2RD_PIPELINE_HPP
#define S2RD_PIPELINE_HPP

#include <string>
#include <vector>

#include "s2rd/config.hpp"
#include "s2rd/diffusion.hpp"
#include "s2rd/finetune.hpp"
#include "s2rd/simworld.hpp"

namespace s2rd {

// Effective settings for the training stages, assembled from the TOML config
// plus command-line overrides. Defaults here are the model-scale defaults;
// configs/desk.toml shrinks them to the CPU budget.
struct PipelineConfig {
    WorldConfig world;
    int image_size = 64;
    int corpus_per_style = 192;  // rendered poses per style
    float holdout_fraction = 0.2f;

    // feature extractor phase
    int fx_steps = 250;
    int fx_batch = 8;
    float fx_lr = 1.5e-3f;

    AutoencoderModel::Config ae;
    AutoencoderTrainConfig ae_train;

    ConditioningConfig cond;
    UNetConfig unet;

    int T = 1000;
    double beta_min = 1e-4, beta_max = 0.02;
    LossMode mode = LossMode::IPCLDM;
    int diff_steps = 2200;
    int diff_batch = 8;
    float diff_lr = 8e-4f;
    float cond_dropout = 0.1f;  // classifier-free guidance dropout
    bool corpus_both_styles = true;

    AdapterConfig adapt;

    // fine-tune defaults
    int ft_steps = 400;
    float ft_lr = 1e-4f;
    int ft_batch = 2;
    float ft_prior_weight = 0.0f;
    std::string ft_trigger = "<autodrive_small_onroad>";
    int ft_examples = 8;

    BCTrainConfig bc;
    int bc_laps = 5;
    ClosedLoopConfig drive;
    AdapterConfig drive_adapt;  // cheaper settings for the closed loop

    static PipelineConfig from_config(const RunConfig& cfg);
};

// A rendered pose corpus with procedural captions.
struct RenderedCorpus {
    std::vector<Image> images;
    std::vector<std::string> captions;
    std::vector<WorldStyle> styles;
};

std::string style_caption(WorldStyle style, Rng& rng);

RenderedCorpus render_corpus(const WorldConfig& world_cfg, int per_style, int image_size,
                             bool both_styles, Rng rng);

// Frames at seeded poses along the centerline. Paired calls with the same rng
// produce pose-matched frames across styles.
std::vector<Image> render_poses(const WorldConfig& world_cfg, WorldStyle style, int n,
                                int image_size, Rng rng);

// Phase 1 of train-ae: style discrimination + caption alignment shape the
// extractor's features before the autoencoder leans on them.
TrainCurve train_feature_extractor(FeatureExtractor& fx, const Vocabulary& vocab,
                                   const RenderedCorpus& corpus, int steps, int batch, float lr,
                                   std::uint64_t seed);

struct DiffusionTrainConfig {
    int steps = 2200;
    int batch = 8;
    float lr = 8e-4f;
    float cond_dropout = 0.1f;
    LossMode mode = LossMode::IPCLDM;
    float lambda_ip = 1.0f;
    std::uint64_t seed = 0;
};

// Joint optimization of the U-Net and both condition encoders on encoded
// latents; the image prompt during training is the target frame itself.
TrainCurve train_diffusion(ModelBundle& mb, const RenderedCorpus& corpus,
                           const DiffusionTrainConfig& cfg);

// Report helpers: every run directory gets an INCOMPLETE marker while work is
// in flight and a manifest on success.
void mark_run_started(const std::string& outdir);
void mark_run_complete(const std::string& outdir, const Manifest& manifest);

std::string csv_escape(const std::string& field);

}  // namespace s2rd

#endif
