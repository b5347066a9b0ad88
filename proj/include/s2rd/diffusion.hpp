#ifndef S2RD_DIFFUSION_HPP
#define S2RD_DIFFUSION_HPP

#include <string>
#include <vector>

#include "s2rd/autoencoder.hpp"
#include "s2rd/conditioning.hpp"
#include "s2rd/denoiser.hpp"
#include "s2rd/image.hpp"
#include "s2rd/rng.hpp"

namespace s2rd {

// Markov-chain noising coefficients. alpha_bar is indexed 0..T with the
// alpha_bar[0] = 1 convention; products are accumulated in double.
struct NoiseSchedule {
    int T = 0;
    std::vector<float> beta;       // [T+1], beta[0] unused
    std::vector<float> alpha;      // 1 - beta
    std::vector<float> alpha_bar;  // cumulative product

    static NoiseSchedule make_linear(int T, double beta_min, double beta_max);
};

// Closed-form forward noising: sqrt(ab_t) z0 + sqrt(1-ab_t) eps, t in 0..T.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

enum class LossMode { DPM, LDM, CLDM, IPCLDM };

LossMode loss_mode_from_string(const std::string& name);

struct DiffusionBatch {
    Tensor z0;            // [B,c,h,w] latents (or raw images for DPM)
    std::vector<int> ts;  // one timestep per row, 1..T
    Tensor eps;           // noise draw shaped like z0
    Tensor cond_txt;      // [B,M,d]; undefined = unconditional
    Tensor cond_img;      // [B,P,d]; IPC mode only
};

// Noise-prediction MSE for the selected objective. Conditional modes throw
// UsageError when their condition is missing; lambda_ip = 0 reduces IPC-LDM
// to C-LDM bit-for-bit.
Tensor diffusion_loss(const UNetModel& unet, const NoiseSchedule& sched,
                      const DiffusionBatch& batch, LossMode mode, float lambda_ip);

// One ancestral DDPM step; sigma_t^2 = beta_t (1-ab_{t-1})/(1-ab_t), zero at t=1.
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched,
                 Rng& rng);

// Deterministic DDIM transition t -> t_prev (t_prev < t, 0 allowed).
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched);

// Noise predictor plugged into the chain runner; tests substitute oracles.
using DenoiseFn = std::function<Tensor(const Tensor& z_t, int t)>;

// Runs `steps` DDIM transitions over a strided sub-schedule from start_t down
// to 0. The latent state is carried in double between steps: float storage
// noise is amplified by 1/sqrt(alpha_bar) over long chains and would break
// the exact-inversion property.
Tensor sample_chain(const NoiseSchedule& sched, const Tensor& init, int start_t, int steps,
                    const DenoiseFn& denoise, int* iterations = nullptr);

struct AdapterConfig {
    float strength = 0.6f;      // fraction of the chain applied to the input
    int steps = 20;             // denoising iterations
    float guidance_scale = 3.0f;
    std::string prompt;
    std::string image_prompt;   // path to an image prompt PNG, empty = none
    float lambda_ip = 1.0f;
};

// Trained artifacts needed by the adapter and the samplers.
struct ModelBundle {
    AutoencoderModel ae;
    FeatureExtractor fx;
    TextEncoder txt;
    ImagePromptEncoder imgenc;
    UNetModel unet;
    Vocabulary vocab;
    NoiseSchedule sched;
    float latent_scale = 1.0f;

    Tensor encode_prompt(const std::string& prompt, int batch = 1) const;
    Tensor null_condition(int batch = 1) const;  // encoded empty prompt

    void save(const std::string& path) const;
    static ModelBundle load(const std::string& path);
};

// Reverse process over a strided DDIM sub-schedule with classifier-free
// guidance. init is the latent at start_t (pure noise for start_t = T).
Tensor sample(const UNetModel& unet, const NoiseSchedule& sched, const Tensor& init, int start_t,
              int steps, const Tensor& cond_txt, const Tensor& uncond_txt, const Tensor& cond_img,
              float guidance_scale, float lambda_ip, int* iterations = nullptr);

struct AdaptResult {
    Image output;
    int n_iter = 0;        // denoising iterations run
    double seconds = 0.0;  // wall-clock around the denoising loop
};

// encode -> q_sample at round(strength*T) -> denoise -> decode.
AdaptResult adapt(const Image& input, const ModelBundle& models, const AdapterConfig& cfg,
                  Rng& rng);

}  // namespace s2rd

#endif
