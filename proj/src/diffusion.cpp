#include "s2rd/diffusion.hpp"

#include <chrono>
#include <cmath>

namespace s2rd {

NoiseSchedule NoiseSchedule::make_linear(int T, double beta_min, double beta_max) {
    if (T < 1) throw ConfigError("schedule length T must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
        throw ConfigError("schedule requires 0 < beta_min <= beta_max < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(T + 1, 0.0f);
    s.alpha.assign(T + 1, 1.0f);
    s.alpha_bar.assign(T + 1, 1.0f);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b =
            T == 1 ? beta_min : beta_min + (beta_max - beta_min) * (t - 1) / (T - 1.0);
        s.beta[t] = static_cast<float>(b);
        s.alpha[t] = static_cast<float>(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bar[t] = static_cast<float>(prod);
    }
    return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.T)
        throw UsageError("q_sample: t=" + std::to_string(t) + " outside 0.." +
                         std::to_string(sched.T));
    if (eps.shape() != z0.shape()) throw ShapeError("q_sample: eps shape mismatch");
    const float ab = sched.alpha_bar[t];
    const float sa = std::sqrt(ab);
    const float sb = std::sqrt(1.0f - ab);
    return add(scale(z0, sa), scale(eps, sb));
}

LossMode loss_mode_from_string(const std::string& name) {
    if (name == "dpm") return LossMode::DPM;
    if (name == "ldm") return LossMode::LDM;
    if (name == "c-ldm") return LossMode::CLDM;
    if (name == "ipc-ldm") return LossMode::IPCLDM;
    throw ConfigError("unknown loss mode '" + name + "' (dpm|ldm|c-ldm|ipc-ldm)");
}

Tensor diffusion_loss(const UNetModel& unet, const NoiseSchedule& sched,
                      const DiffusionBatch& batch, LossMode mode, float lambda_ip) {
    if (!batch.z0.defined() || batch.z0.rank() != 4) throw ShapeError("diffusion_loss: bad z0");
    const int B = batch.z0.dim(0);
    if (static_cast<int>(batch.ts.size()) != B)
        throw UsageError("diffusion_loss: need one t per batch row");
    for (int t : batch.ts)
        if (t < 1 || t > sched.T)
            throw UsageError("diffusion_loss: t=" + std::to_string(t) + " outside 1..T");

    if ((mode == LossMode::CLDM || mode == LossMode::IPCLDM) && !batch.cond_txt.defined())
        throw UsageError("conditional loss mode requires a text condition");
    if (mode == LossMode::IPCLDM && !batch.cond_img.defined())
        throw UsageError("IPC-LDM loss requires an image condition");

    // per-row noising with the closed form
    std::vector<float> zt(batch.z0.numel());
    const std::int64_t per = batch.z0.numel() / B;
    for (int b = 0; b < B; ++b) {
        const float ab = sched.alpha_bar[batch.ts[b]];
        const float sa = std::sqrt(ab), sb = std::sqrt(1.0f - ab);
        for (std::int64_t i = 0; i < per; ++i)
            zt[b * per + i] = sa * batch.z0.data()[b * per + i] + sb * batch.eps.data()[b * per + i];
    }
    auto z_t = Tensor::from_data(batch.z0.shape(), std::move(zt));

    Tensor cond_txt = batch.cond_txt;
    if (!cond_txt.defined())
        cond_txt = Tensor::zeros({B, 1, unet.config().d_cond});  // null condition
    const Tensor cond_img =
        mode == LossMode::IPCLDM ? batch.cond_img : Tensor();
    const float lam = mode == LossMode::IPCLDM ? lambda_ip : 0.0f;

    auto eps_hat = unet.predict(z_t, batch.ts, cond_txt, cond_img, lam);
    return mse(batch.eps, eps_hat);
}

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched,
                 Rng& rng) {
    if (t < 1 || t > sched.T)
        throw UsageError("ddpm_step: t=" + std::to_string(t) + " outside 1..T");
    if (eps_hat.shape() != z_t.shape()) throw ShapeError("ddpm_step: eps_hat shape mismatch");
    const double ab_t = sched.alpha_bar[t];
    const double ab_prev = sched.alpha_bar[t - 1];
    const double beta_t = sched.beta[t];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(static_cast<double>(sched.alpha[t]));
    const double coef = beta_t / std::sqrt(1.0 - ab_t);
    const double sigma = t == 1 ? 0.0 : std::sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t));
    std::vector<float> out(z_t.numel());
    for (std::int64_t i = 0; i < z_t.numel(); ++i) {
        double v = inv_sqrt_alpha * (z_t.data()[i] - coef * eps_hat.data()[i]);
        if (sigma > 0.0) v += sigma * rng.normal();
        out[i] = static_cast<float>(v);
    }
    return Tensor::from_data(z_t.shape(), std::move(out));
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T || t_prev < 0 || t_prev >= t)
        throw UsageError("ddim_step: need 0 <= t_prev < t <= T");
    // double internals: float cancellation in the x0 estimate compounds over
    // long chains and breaks the 1e-4 oracle round-trip
    const double ab_t = sched.alpha_bar[t];
    const double ab_p = sched.alpha_bar[t_prev];
    const double sa_t = std::sqrt(ab_t), sb_t = std::sqrt(1.0 - ab_t);
    const double sa_p = std::sqrt(ab_p), sb_p = std::sqrt(1.0 - ab_p);
    std::vector<float> out(z_t.numel());
    for (std::int64_t i = 0; i < z_t.numel(); ++i) {
        const double e = eps_hat.data()[i];
        const double x0 = (z_t.data()[i] - sb_t * e) / sa_t;
        out[i] = static_cast<float>(sa_p * x0 + sb_p * e);
    }
    return Tensor::from_data(z_t.shape(), std::move(out));
}

Tensor sample_chain(const NoiseSchedule& sched, const Tensor& init, int start_t, int steps,
                    const DenoiseFn& denoise, int* iterations) {
    if (steps < 1) throw ConfigError("sample: steps must be >= 1");
    if (steps > sched.T) throw ConfigError("sample: steps exceed schedule length");
    if (start_t < 1 || start_t > sched.T) throw ConfigError("sample: start_t outside 1..T");
    NoGradGuard ng;

    // strided sub-schedule start_t -> 0, strictly decreasing
    std::vector<int> ts;
    ts.push_back(start_t);
    for (int i = 1; i <= steps; ++i) {
        int t = static_cast<int>(std::lround(start_t * (1.0 - static_cast<double>(i) / steps)));
        if (t >= ts.back()) t = ts.back() - 1;
        if (t < 0) t = 0;
        ts.push_back(t);
        if (t == 0) break;
    }

    std::vector<double> z(init.data().begin(), init.data().end());
    std::vector<float> zf(z.size());
    int iters = 0;
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        const int t = ts[i], t_prev = ts[i + 1];
        for (size_t k = 0; k < z.size(); ++k) zf[k] = static_cast<float>(z[k]);
        const auto eps_hat = denoise(Tensor::from_data(init.shape(), zf), t);
        if (eps_hat.shape() != init.shape()) throw ShapeError("denoiser changed latent shape");
        const double ab_t = sched.alpha_bar[t];
        const double ab_p = sched.alpha_bar[t_prev];
        const double sa_t = std::sqrt(ab_t), sb_t = std::sqrt(1.0 - ab_t);
        const double sa_p = std::sqrt(ab_p), sb_p = std::sqrt(1.0 - ab_p);
        for (size_t k = 0; k < z.size(); ++k) {
            const double e = eps_hat.data()[k];
            const double x0 = (z[k] - sb_t * e) / sa_t;
            z[k] = sa_p * x0 + sb_p * e;
        }
        ++iters;
    }
    if (iterations) *iterations = iters;
    for (size_t k = 0; k < z.size(); ++k) zf[k] = static_cast<float>(z[k]);
    return Tensor::from_data(init.shape(), zf);
}

Tensor sample(const UNetModel& unet, const NoiseSchedule& sched, const Tensor& init, int start_t,
              int steps, const Tensor& cond_txt, const Tensor& uncond_txt, const Tensor& cond_img,
              float guidance_scale, float lambda_ip, int* iterations) {
    if (guidance_scale < 0.0f) throw ConfigError("sample: guidance must be >= 0");
    const int B = init.dim(0);
    DenoiseFn fn = [&](const Tensor& z, int t) {
        std::vector<int> tb(B, t);
        if (guidance_scale == 0.0f) return unet.predict(z, tb, uncond_txt, Tensor(), 0.0f);
        if (guidance_scale == 1.0f) return unet.predict(z, tb, cond_txt, cond_img, lambda_ip);
        auto e_c = unet.predict(z, tb, cond_txt, cond_img, lambda_ip);
        auto e_u = unet.predict(z, tb, uncond_txt, Tensor(), 0.0f);
        // e_u + g (e_c - e_u)
        return add(e_u, scale(sub(e_c, e_u), guidance_scale));
    };
    return sample_chain(sched, init, start_t, steps, fn, iterations);
}

Tensor ModelBundle::encode_prompt(const std::string& prompt, int batch) const {
    std::vector<int> ids;
    const auto one = tokenize(vocab, prompt, txt.config().m_txt);
    for (int b = 0; b < batch; ++b) ids.insert(ids.end(), one.begin(), one.end());
    return txt.encode(ids, batch);
}

Tensor ModelBundle::null_condition(int batch) const { return encode_prompt("", batch); }

void ModelBundle::save(const std::string& path) const {
    Checkpoint ck;
    ae.save(ck, "ae.");
    fx.save(ck, "fx.");
    txt.save(ck, "txt.");
    imgenc.save(ck, "img.");
    unet.save(ck, "unet.");
    ck.put("diff.schedule_meta",
           Tensor::from_data({3}, {static_cast<float>(sched.T), sched.T >= 1 ? sched.beta[1] : 0.0f,
                                   sched.T >= 1 ? sched.beta[sched.T] : 0.0f}));
    ck.put("diff.latent_scale", Tensor::from_data({1}, {latent_scale}));
    ck.save(path);
    // vocabulary lives beside the checkpoint as UTF-8 "token<TAB>id" lines
    vocab.save(path + ".vocab");
}

ModelBundle ModelBundle::load(const std::string& path) {
    Checkpoint ck = Checkpoint::load(path);
    ModelBundle mb;
    mb.ae.load(ck, "ae.");
    mb.fx.load(ck, "fx.");
    mb.txt.load(ck, "txt.");
    mb.imgenc.load(ck, "img.");
    mb.unet.load(ck, "unet.");
    const auto smeta = ck.get("diff.schedule_meta");
    mb.sched = NoiseSchedule::make_linear(static_cast<int>(smeta.data()[0]), smeta.data()[1],
                                          smeta.data()[2]);
    mb.latent_scale = ck.get("diff.latent_scale").data()[0];
    mb.vocab = Vocabulary::load(path + ".vocab");
    return mb;
}

AdaptResult adapt(const Image& input, const ModelBundle& models, const AdapterConfig& cfg,
                  Rng& rng) {
    if (!(cfg.strength > 0.0f) || cfg.strength > 1.0f)
        throw ConfigError("adapt: strength must be in (0,1]");
    if (cfg.steps < 1 || cfg.steps > models.sched.T)
        throw ConfigError("adapt: steps must be in 1..T");
    NoGradGuard ng;

    const int start_t =
        std::max(1, static_cast<int>(std::lround(cfg.strength * models.sched.T)));
    const int steps = std::min(cfg.steps, start_t);

    auto x = image_to_tensor(input);
    auto z0 = scale(models.ae.encode(x), models.latent_scale);
    auto eps = Tensor::randn(z0.shape(), rng);
    auto z_t = q_sample(z0, start_t, eps, models.sched);

    auto cond_txt = models.encode_prompt(cfg.prompt);
    auto uncond = models.null_condition();
    Tensor cond_img;
    float lambda_ip = 0.0f;
    if (!cfg.image_prompt.empty()) {
        cond_img = models.imgenc.encode(image_to_tensor(read_png(cfg.image_prompt)));
        lambda_ip = cfg.lambda_ip;
    }

    int iters = 0;
    const auto t0 = std::chrono::steady_clock::now();
    auto z = sample(models.unet, models.sched, z_t, start_t, steps, cond_txt, uncond, cond_img,
                    cfg.guidance_scale, lambda_ip, &iters);
    const auto t1 = std::chrono::steady_clock::now();

    auto out = models.ae.decode(scale(z, 1.0f / models.latent_scale));
    AdaptResult res;
    res.output = tensor_to_image(out);
    res.n_iter = iters;
    res.seconds = std::chrono::duration<double>(t1 - t0).count();
    return res;
}

}  // namespace s2rd
