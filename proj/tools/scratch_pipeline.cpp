// Temporary tuning harness: runs the training pipeline end to end at small
// scale and prints stage timings plus the style-difference reduction.
#include <chrono>
#include <cstdio>
#include <filesystem>

#include "s2rd/pipeline.hpp"

using namespace s2rd;

namespace {
double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}
}  // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    for (int i = 1; i < argc; ++i) rc.apply_override(argv[i]);
    PipelineConfig cfg = PipelineConfig::from_config(rc);
    const std::uint64_t seed = rc.get_int("seed", 7);
    Rng root(seed);

    std::filesystem::create_directories("scratch_out");

    const double t0 = now_s();
    auto corpus = render_corpus(cfg.world, cfg.corpus_per_style, cfg.image_size,
                                cfg.corpus_both_styles, root.substream("corpus"));
    std::printf("corpus: %zu images %.1fs\n", corpus.images.size(), now_s() - t0);

    // holdout real frames + sim style refs
    TrackWorld sim_world(cfg.world, WorldStyle::Sim);
    TrackWorld real_world(cfg.world, WorldStyle::Real);
    Rng hold_rng = root.substream("holdout");
    std::vector<Image> holdout_real, sim_refs;
    for (int i = 0; i < 50; ++i) {
        const float s = static_cast<float>(hold_rng.uniform(0.0, real_world.length()));
        VehicleState st;
        real_world.point_at(s, &st.x, &st.y);
        st.heading = real_world.heading_at(s);
        holdout_real.push_back(
            render_frame(real_world, st, WorldStyle::Real, cfg.image_size, hold_rng.next_u64()));
        sim_refs.push_back(
            render_frame(sim_world, st, WorldStyle::Sim, cfg.image_size, hold_rng.next_u64()));
    }
    write_png("scratch_out/real_frame.png", holdout_real[0]);
    write_png("scratch_out/sim_frame.png", sim_refs[0]);

    ModelBundle mb;
    mb.vocab = Vocabulary::base();
    Rng init_rng = root.substream("init");
    FeatureExtractor::Config fxc;
    fxc.vocab_size = mb.vocab.size() + 8;  // room for trigger tokens
    mb.fx.init(fxc, init_rng);
    mb.ae.init(cfg.ae, init_rng);
    mb.txt.init(cfg.cond, mb.vocab.size(), init_rng);
    mb.imgenc.init(cfg.cond, init_rng);
    mb.unet.init(cfg.unet, init_rng);
    mb.sched = NoiseSchedule::make_linear(cfg.T, cfg.beta_min, cfg.beta_max);

    double t = now_s();
    auto fx_curve = train_feature_extractor(mb.fx, mb.vocab, corpus, cfg.fx_steps, cfg.fx_batch,
                                            cfg.fx_lr, seed);
    std::printf("fx: steps=%d first=%.4f last=%.4f %.1fs\n", cfg.fx_steps,
                fx_curve.points.front().second, fx_curve.points.back().second, now_s() - t);

    // style gap measured by the trained extractor
    double sd_real = 0, sd_sim = 0;
    for (int i = 0; i < 20; ++i) {
        sd_real += style_difference(holdout_real[i], sim_refs[i], mb.fx);
        sd_sim += style_difference(sim_refs[(i + 1) % 20], sim_refs[i], mb.fx);
    }
    std::printf("gap: mean SD(real,simref)=%.5g mean SD(sim,simref)=%.5g ratio=%.2f\n",
                sd_real / 20, sd_sim / 20, sd_real / std::max(1e-12, sd_sim));

    t = now_s();
    auto ae_curve = train_autoencoder(mb.ae, corpus.images, cfg.ae_train, &mb.fx);
    mb.latent_scale = compute_latent_scale(mb.ae, corpus.images);
    std::printf("ae: steps=%d first=%.4f last=%.4f scale=%.3f %.1fs\n", cfg.ae_train.steps,
                ae_curve.points.front().second, ae_curve.points.back().second, mb.latent_scale,
                now_s() - t);
    {
        NoGradGuard ng;
        auto recon_sim = tensor_to_image(mb.ae.decode(mb.ae.encode(image_to_tensor(sim_refs[0]))));
        auto recon_real =
            tensor_to_image(mb.ae.decode(mb.ae.encode(image_to_tensor(holdout_real[0]))));
        write_png("scratch_out/recon_sim.png", recon_sim);
        write_png("scratch_out/recon_real.png", recon_real);
        std::printf("ae recon: sim mse=%.5f real mse=%.5f\n",
                    mse(image_to_tensor(recon_sim), image_to_tensor(sim_refs[0])).item(),
                    mse(image_to_tensor(recon_real), image_to_tensor(holdout_real[0])).item());
    }

    t = now_s();
    DiffusionTrainConfig dcfg;
    dcfg.steps = cfg.diff_steps;
    dcfg.batch = cfg.diff_batch;
    dcfg.lr = cfg.diff_lr;
    dcfg.cond_dropout = cfg.cond_dropout;
    dcfg.mode = cfg.mode;
    dcfg.lambda_ip = cfg.unet.lambda_ip;
    dcfg.seed = seed + 1;
    auto dcurve = train_diffusion(mb, corpus, dcfg);
    std::printf("diff: steps=%d first=%.4f last=%.4f %.1fs\n", dcfg.steps,
                dcurve.points.front().second, dcurve.points.back().second, now_s() - t);

    // fine-tune the trigger concept on a few sim frames
    t = now_s();
    Rng trig_rng = root.substream("trigger");
    add_trigger_token(mb.vocab, mb.txt, cfg.ft_trigger, trig_rng);
    ConceptSpec spec;
    spec.trigger = cfg.ft_trigger;
    for (int i = 0; i < cfg.ft_examples; ++i) spec.examples.push_back(sim_refs[i]);
    spec.steps = cfg.ft_steps;
    spec.lr = cfg.ft_lr;
    spec.batch = cfg.ft_batch;
    spec.prior_weight = cfg.ft_prior_weight;
    spec.seed = seed + 2;
    const float ft_loss0 = concept_eval_loss(mb, spec, 99);
    auto ft_curve = finetune_concept(mb, spec);
    const float ft_loss1 = concept_eval_loss(mb, spec, 99);
    std::printf("ft: steps=%d eval %.4f -> %.4f (%.1f%%) %.1fs\n", spec.steps, ft_loss0, ft_loss1,
                100.0 * (1.0 - ft_loss1 / ft_loss0), now_s() - t);

    // adapt holdout frames and measure the style reduction
    t = now_s();
    AdapterConfig acfg = cfg.adapt;
    acfg.prompt = concept_prompt(spec);
    double sd_is = 0, sd_os = 0;
    Rng arng = root.substream("adapt");
    for (size_t i = 0; i < holdout_real.size(); ++i) {
        Rng frng = arng.substream("f", i);
        auto res = adapt(holdout_real[i], mb, acfg, frng);
        sd_is += style_difference(holdout_real[i], sim_refs[i], mb.fx);
        sd_os += style_difference(res.output, sim_refs[i], mb.fx);
        if (i < 3) write_png("scratch_out/adapt_" + std::to_string(i) + ".png", res.output);
    }
    sd_is /= holdout_real.size();
    sd_os /= holdout_real.size();
    std::printf("adapt: SD-IS=%.5g SD-OS=%.5g reduction=%.1f%% %.1fs\n", sd_is, sd_os,
                100.0 * (1.0 - sd_os / sd_is), now_s() - t);
    std::printf("total %.1fs\n", now_s() - t0);
    return 0;
}
