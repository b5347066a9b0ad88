#include "s2rd/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "s2rd/optim.hpp"

namespace s2rd {

PipelineConfig PipelineConfig::from_config(const RunConfig& cfg) {
    PipelineConfig p;

    p.world.track_a = static_cast<float>(cfg.get_float("world.track_a", p.world.track_a));
    p.world.track_b = static_cast<float>(cfg.get_float("world.track_b", p.world.track_b));
    p.world.half_width = static_cast<float>(cfg.get_float("world.half_width", p.world.half_width));
    p.world.real_grain = static_cast<float>(cfg.get_float("world.real_grain", p.world.real_grain));
    p.world.real_exposure_gain =
        static_cast<float>(cfg.get_float("world.real_exposure_gain", p.world.real_exposure_gain));
    p.world.real_exposure_offset = static_cast<float>(
        cfg.get_float("world.real_exposure_offset", p.world.real_exposure_offset));
    p.world.real_texture = static_cast<float>(cfg.get_float("world.real_texture", p.world.real_texture));
    p.world.real_fold = static_cast<float>(cfg.get_float("world.real_fold", p.world.real_fold));
    p.world.real_crease = static_cast<float>(cfg.get_float("world.real_crease", p.world.real_crease));
    p.world.real_reflection =
        static_cast<float>(cfg.get_float("world.real_reflection", p.world.real_reflection));
    p.world.real_edge_wobble =
        static_cast<float>(cfg.get_float("world.real_edge_wobble", p.world.real_edge_wobble));
    p.world.real_box_imprints = cfg.get_bool("world.real_box_imprints", p.world.real_box_imprints);
    p.world.style_seed = static_cast<std::uint64_t>(cfg.get_int("world.style_seed", 1234));

    p.image_size = static_cast<int>(cfg.get_int("world.image_size", p.image_size));
    p.corpus_per_style = static_cast<int>(cfg.get_int("corpus.per_style", p.corpus_per_style));
    p.holdout_fraction = static_cast<float>(cfg.get_float("corpus.holdout", p.holdout_fraction));
    p.corpus_both_styles = cfg.get_bool("corpus.both_styles", p.corpus_both_styles);

    p.fx_steps = static_cast<int>(cfg.get_int("fx.steps", p.fx_steps));
    p.fx_batch = static_cast<int>(cfg.get_int("fx.batch", p.fx_batch));
    p.fx_lr = static_cast<float>(cfg.get_float("fx.lr", p.fx_lr));

    p.ae.latent_channels = static_cast<int>(cfg.get_int("ae.latent_channels", 4));
    p.ae.downsample_factor = static_cast<int>(cfg.get_int("ae.downsample_factor", 8));
    p.ae_train.steps = static_cast<int>(cfg.get_int("ae.steps", 1500));
    p.ae_train.batch = static_cast<int>(cfg.get_int("ae.batch", 8));
    p.ae_train.lr = static_cast<float>(cfg.get_float("ae.lr", 2e-3));
    p.ae_train.feature_weight = static_cast<float>(cfg.get_float("ae.feature_weight", 0.1));
    p.ae_train.latent_weight = static_cast<float>(cfg.get_float("ae.latent_weight", 1e-4));

    p.cond.d_cond = static_cast<int>(cfg.get_int("cond.d_tau", 64));
    p.cond.m_txt = static_cast<int>(cfg.get_int("cond.m_txt", 16));
    p.cond.n_blocks = static_cast<int>(cfg.get_int("cond.blocks", 2));
    p.cond.prompt_size = p.image_size;
    p.cond.patch = static_cast<int>(cfg.get_int("cond.patch", 8));

    p.unet.latent_channels = p.ae.latent_channels;
    p.unet.width0 = static_cast<int>(cfg.get_int("unet.width0", 64));
    p.unet.width1 = static_cast<int>(cfg.get_int("unet.width1", 128));
    p.unet.res_blocks = static_cast<int>(cfg.get_int("unet.res_blocks", 2));
    p.unet.groups = static_cast<int>(cfg.get_int("unet.groups", 8));
    p.unet.d_cond = p.cond.d_cond;
    p.unet.lambda_ip = static_cast<float>(cfg.get_float("ip.weight", 1.0));

    p.T = static_cast<int>(cfg.get_int("diff.T", 1000));
    p.beta_min = cfg.get_float("diff.beta_min", 1e-4);
    p.beta_max = cfg.get_float("diff.beta_max", 0.02);
    p.mode = loss_mode_from_string(cfg.get_str("diff.mode", "ipc-ldm"));
    p.diff_steps = static_cast<int>(cfg.get_int("diff.steps", p.diff_steps));
    p.diff_batch = static_cast<int>(cfg.get_int("diff.batch", p.diff_batch));
    p.diff_lr = static_cast<float>(cfg.get_float("diff.lr", p.diff_lr));
    p.cond_dropout = static_cast<float>(cfg.get_float("diff.cond_dropout", p.cond_dropout));

    p.adapt.strength = static_cast<float>(cfg.get_float("adapt.strength", 0.6));
    p.adapt.steps = static_cast<int>(cfg.get_int("adapt.steps", 20));
    p.adapt.guidance_scale = static_cast<float>(cfg.get_float("adapt.guidance", 3.0));
    p.adapt.prompt = cfg.get_str("adapt.prompt", "photo of <autodrive_small_onroad> road");
    p.adapt.image_prompt = cfg.get_str("adapt.image_prompt", "");
    p.adapt.lambda_ip = p.unet.lambda_ip;

    p.ft_steps = static_cast<int>(cfg.get_int("ft.steps", p.ft_steps));
    p.ft_lr = static_cast<float>(cfg.get_float("ft.lr", p.ft_lr));
    p.ft_batch = static_cast<int>(cfg.get_int("ft.batch", p.ft_batch));
    p.ft_prior_weight = static_cast<float>(cfg.get_float("ft.prior_weight", p.ft_prior_weight));
    p.ft_trigger = cfg.get_str("ft.trigger", p.ft_trigger);
    p.ft_examples = static_cast<int>(cfg.get_int("ft.examples", p.ft_examples));

    p.bc.epochs = static_cast<int>(cfg.get_int("bc.epochs", 4));
    p.bc.lr = static_cast<float>(cfg.get_float("bc.lr", 1e-3));
    p.bc.batch = static_cast<int>(cfg.get_int("bc.batch", 32));
    p.bc_laps = static_cast<int>(cfg.get_int("bc.laps", 5));

    p.drive.max_steps = static_cast<int>(cfg.get_int("drive.max_steps", 900));
    p.drive.dt = static_cast<float>(cfg.get_float("drive.dt", 0.05));
    p.drive.image_size = p.image_size;
    p.drive.frame_dump_stride = static_cast<int>(cfg.get_int("drive.frame_dump_stride", 0));

    p.drive_adapt = p.adapt;
    p.drive_adapt.steps = static_cast<int>(cfg.get_int("drive.adapt_steps", 8));
    p.drive_adapt.guidance_scale = static_cast<float>(cfg.get_float("drive.adapt_guidance", 1.0));
    p.drive_adapt.strength = static_cast<float>(cfg.get_float("drive.adapt_strength", 0.5));

    return p;
}

std::string style_caption(WorldStyle style, Rng& rng) {
    const char* kind = style == WorldStyle::Sim ? "sim" : "real";
    switch (rng.next_below(4)) {
        case 0: return std::string("photo of ") + kind + " style road scene";
        case 1: return std::string("a ") + kind + " style driving frame";
        case 2: return std::string(kind) + " style figure eight track";
        default: return std::string("camera view of the ") + kind + " style world";
    }
}

RenderedCorpus render_corpus(const WorldConfig& world_cfg, int per_style, int image_size,
                             bool both_styles, Rng rng) {
    RenderedCorpus out;
    std::vector<WorldStyle> styles = {WorldStyle::Sim};
    if (both_styles) styles.push_back(WorldStyle::Real);
    for (WorldStyle style : styles) {
        TrackWorld world(world_cfg, style);
        for (int i = 0; i < per_style; ++i) {
            // random pose near the centerline, heading roughly along the track
            const float s = static_cast<float>(rng.uniform(0.0, world.length()));
            const float lateral = static_cast<float>(rng.uniform(-0.3, 0.3)) * world_cfg.half_width;
            const float yaw_off = static_cast<float>(rng.uniform(-0.4, 0.4));
            VehicleState st;
            float cx, cy;
            world.point_at(s, &cx, &cy);
            const float h = world.heading_at(s);
            st.x = cx + lateral * std::cos(h + 1.5707964f);
            st.y = cy + lateral * std::sin(h + 1.5707964f);
            st.heading = h + yaw_off;
            out.images.push_back(render_frame(world, st, style, image_size, rng.next_u64()));
            out.captions.push_back(style_caption(style, rng));
            out.styles.push_back(style);
        }
    }
    return out;
}

std::vector<Image> render_poses(const WorldConfig& world_cfg, WorldStyle style, int n,
                                int image_size, Rng rng) {
    TrackWorld world(world_cfg, style);
    std::vector<Image> out;
    for (int i = 0; i < n; ++i) {
        const float s = static_cast<float>(rng.uniform(0.0, world.length()));
        VehicleState st;
        world.point_at(s, &st.x, &st.y);
        st.heading = world.heading_at(s);
        out.push_back(render_frame(world, st, style, image_size, rng.next_u64()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// feature extractor training
// ---------------------------------------------------------------------------

namespace {

// row-wise cosine similarity of two [B,d] embeddings -> [B,1]
Tensor cosine_rows(const Tensor& a, const Tensor& b) {
    const int B = a.dim(0), d = a.dim(1);
    auto ar = reshape(a, {B, 1, d});
    auto br = reshape(b, {B, d, 1});
    auto dots = reshape(bmm(ar, br), {B, 1});
    auto na = sqrt_elem(add_scalar(reshape(bmm(ar, reshape(a, {B, d, 1})), {B, 1}), 1e-8f));
    auto nb = sqrt_elem(
        add_scalar(reshape(bmm(reshape(b, {B, 1, d}), br), {B, 1}), 1e-8f));
    return div(dots, mul(na, nb));
}

}  // namespace

TrainCurve train_feature_extractor(FeatureExtractor& fx, const Vocabulary& vocab,
                                   const RenderedCorpus& corpus, int steps, int batch, float lr,
                                   std::uint64_t seed) {
    if (corpus.images.empty()) throw UsageError("train_feature_extractor: empty corpus");
    Rng rng = Rng(seed).substream("fx-train");

    std::vector<Tensor> params;
    fx.collect(params);
    Adam opt(Adam::Options{.lr = lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f});
    opt.add_params(params);

    const int m = 8;  // caption token window for the text head
    auto caption_ids = [&](WorldStyle style, Rng& r) {
        auto ids = tokenize(vocab, style_caption(style, r), m);
        return ids;
    };

    TrainCurve curve;
    for (int step = 0; step < steps; ++step) {
        std::vector<Image> frames;
        std::vector<float> style_targets;
        std::vector<int> ids_match, ids_mismatch;
        for (int b = 0; b < batch; ++b) {
            const size_t i = rng.next_below(corpus.images.size());
            frames.push_back(corpus.images[i]);
            const WorldStyle st = corpus.styles[i];
            style_targets.push_back(st == WorldStyle::Sim ? 1.0f : -1.0f);
            const WorldStyle other = st == WorldStyle::Sim ? WorldStyle::Real : WorldStyle::Sim;
            auto mi = caption_ids(st, rng);
            auto mm = caption_ids(other, rng);
            ids_match.insert(ids_match.end(), mi.begin(), mi.end());
            ids_mismatch.insert(ids_mismatch.end(), mm.begin(), mm.end());
        }
        auto imgs = images_to_tensor(frames);

        opt.zero_grad();
        // style discrimination head
        auto logit = fx.style_logit(imgs);
        auto loss = mse(logit, Tensor::from_data({batch, 1}, style_targets));
        // caption alignment in the shared embedding space
        auto ei = fx.embed_image(imgs);
        auto et_match = fx.embed_text(ids_match, batch, m);
        auto et_mismatch = fx.embed_text(ids_mismatch, batch, m);
        auto cos_match = cosine_rows(ei, et_match);
        auto cos_mismatch = cosine_rows(ei, et_mismatch);
        loss = add(loss, scale(mean_all(sub(Tensor::full({batch, 1}, 1.0f), cos_match)), 0.5f));
        loss = add(loss, scale(mean_all(add_scalar(cos_mismatch, 1.0f)), 0.25f));

        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("feature extractor loss diverged at step " + std::to_string(step));
        backward(loss);
        opt.step();
        curve.points.emplace_back(step, lv);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// diffusion training
// ---------------------------------------------------------------------------

TrainCurve train_diffusion(ModelBundle& mb, const RenderedCorpus& corpus,
                           const DiffusionTrainConfig& cfg) {
    if (corpus.images.empty()) throw UsageError("train_diffusion: empty corpus");
    Rng rng = Rng(cfg.seed).substream("diff-train");

    // freeze the autoencoder: precompute scaled latents once
    std::vector<std::vector<float>> latents;
    Shape latent_shape;
    {
        NoGradGuard ng;
        for (const auto& img : corpus.images) {
            auto z = scale(mb.ae.encode(image_to_tensor(img)), mb.latent_scale);
            latent_shape = z.shape();
            latents.push_back(z.data());
        }
    }
    const int c = latent_shape[1], h = latent_shape[2], w = latent_shape[3];

    std::vector<std::vector<int>> caption_ids;
    for (const auto& cap : corpus.captions)
        caption_ids.push_back(tokenize(mb.vocab, cap, mb.txt.config().m_txt));
    const auto empty_ids = tokenize(mb.vocab, "", mb.txt.config().m_txt);

    std::vector<Tensor> params;
    mb.unet.collect(params);
    mb.txt.collect(params);
    if (cfg.mode == LossMode::IPCLDM) mb.imgenc.collect(params);
    Adam opt(Adam::Options{.lr = cfg.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f});
    opt.add_params(params);

    const int B = cfg.batch;
    TrainCurve curve;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<float> z0_data;
        z0_data.reserve(static_cast<size_t>(B) * c * h * w);
        std::vector<int> ts, txt_ids;
        std::vector<Image> prompt_frames;
        std::vector<float> ip_mask;  // 1 keeps the row, 0 drops it
        for (int b = 0; b < B; ++b) {
            const size_t i = rng.next_below(latents.size());
            z0_data.insert(z0_data.end(), latents[i].begin(), latents[i].end());
            ts.push_back(1 + static_cast<int>(rng.next_below(mb.sched.T)));
            const bool drop_txt = rng.uniform() < cfg.cond_dropout;
            const auto& ids = drop_txt ? empty_ids : caption_ids[i];
            txt_ids.insert(txt_ids.end(), ids.begin(), ids.end());
            if (cfg.mode == LossMode::IPCLDM) {
                prompt_frames.push_back(corpus.images[i]);
                const bool drop_img = rng.uniform() < cfg.cond_dropout;
                ip_mask.push_back(drop_img ? 0.0f : 1.0f);
            }
        }

        DiffusionBatch batch;
        batch.z0 = Tensor::from_data({B, c, h, w}, std::move(z0_data));
        batch.ts = ts;
        batch.eps = Tensor::randn(batch.z0.shape(), rng);
        batch.cond_txt = mb.txt.encode(txt_ids, B);
        if (cfg.mode == LossMode::IPCLDM) {
            auto emb = mb.imgenc.encode(images_to_tensor(prompt_frames));
            // condition dropout zeroes the embedding rows (null image prompt)
            std::vector<float> mask(emb.numel());
            const std::int64_t per = emb.numel() / B;
            for (int b = 0; b < B; ++b)
                for (std::int64_t k = 0; k < per; ++k) mask[b * per + k] = ip_mask[b];
            batch.cond_img = mul(emb, Tensor::from_data(emb.shape(), std::move(mask)));
        }

        opt.zero_grad();
        auto loss = diffusion_loss(mb.unet, mb.sched, batch, cfg.mode, cfg.lambda_ip);
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("diffusion loss diverged at step " + std::to_string(step));
        backward(loss);
        opt.clip_grad_norm(1.0f);
        opt.step();
        curve.points.emplace_back(step, lv);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// run-report helpers
// ---------------------------------------------------------------------------

void mark_run_started(const std::string& outdir) {
    std::filesystem::create_directories(outdir);
    write_file_bytes(outdir + "/INCOMPLETE", {'r', 'u', 'n', '\n'});
}

void mark_run_complete(const std::string& outdir, const Manifest& manifest) {
    manifest.save(outdir + "/manifest");
    std::filesystem::remove(outdir + "/INCOMPLETE");
}

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out += "\"\"";
        else out += ch;
    }
    return out + "\"";
}

}  // namespace s2rd
