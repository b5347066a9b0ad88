#include "s2rd/finetune.hpp"

#include <cmath>

#include "s2rd/optim.hpp"

namespace s2rd {

std::string concept_prompt(const ConceptSpec& spec) {
    std::string prompt = spec.prompt_template;
    const auto pos = prompt.find("{}");
    if (pos == std::string::npos) throw UsageError("prompt template needs a {} placeholder");
    return prompt.replace(pos, 2, spec.trigger);
}

namespace {

void check_spec(const ModelBundle& mb, const ConceptSpec& spec) {
    if (!is_trigger_token(spec.trigger))
        throw UsageError("trigger '" + spec.trigger + "' does not match <[a-z0-9_]+>");
    if (!mb.vocab.contains(spec.trigger))
        throw UsageError("trigger '" + spec.trigger +
                         "' is not registered; call add_trigger_token first");
    if (spec.examples.empty() || spec.examples.size() > 32)
        throw UsageError("concept needs 1..32 example images, got " +
                         std::to_string(spec.examples.size()));
}

// latents for a set of images, scaled for the diffusion model
std::vector<Tensor> encode_examples(const ModelBundle& mb, const std::vector<Image>& images) {
    NoGradGuard ng;
    std::vector<Tensor> out;
    for (const auto& img : images)
        out.push_back(scale(mb.ae.encode(image_to_tensor(img)), mb.latent_scale));
    return out;
}

Tensor stack_latents(const std::vector<Tensor>& latents, const std::vector<size_t>& idx) {
    const auto& s = latents[0].shape();
    Shape os = {static_cast<int>(idx.size()), s[1], s[2], s[3]};
    std::vector<float> data;
    data.reserve(shape_numel(os));
    for (size_t i : idx)
        data.insert(data.end(), latents[i].data().begin(), latents[i].data().end());
    return Tensor::from_data(os, std::move(data));
}

}  // namespace

TrainCurve finetune_concept(ModelBundle& mb, const ConceptSpec& spec) {
    check_spec(mb, spec);
    Rng rng = Rng(spec.seed).substream("finetune");

    const auto latents = encode_examples(mb, spec.examples);
    const std::string prompt = concept_prompt(spec);
    const auto prompt_ids = tokenize(mb.vocab, prompt, mb.txt.config().m_txt);

    // prior-preservation batch generated from the base model before any update
    std::vector<Tensor> prior_latents;
    const std::string prior_prompt = "photo of road";
    if (spec.prior_weight > 0.0f) {
        NoGradGuard ng;
        const auto& ls = latents[0].shape();
        auto cond = mb.encode_prompt(prior_prompt);
        auto uncond = mb.null_condition();
        Rng prior_rng = rng.substream("prior");
        for (int i = 0; i < std::max(4, spec.batch); ++i) {
            auto init = Tensor::randn({1, ls[1], ls[2], ls[3]}, prior_rng);
            prior_latents.push_back(sample(mb.unet, mb.sched, init, mb.sched.T, 12, cond, uncond,
                                           Tensor(), 1.0f, 0.0f));
        }
    }

    // only the U-Net and the trigger embedding row are trainable
    std::vector<Tensor> unet_params;
    mb.unet.collect(unet_params);
    Adam opt(Adam::Options{.lr = spec.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f});
    opt.add_params(unet_params);
    {
        auto& table = mb.txt.token_table();
        const int d = table.dim(1);
        std::vector<char> mask(table.numel(), 0);
        const int row = mb.vocab.id(spec.trigger);
        for (int j = 0; j < d; ++j) mask[static_cast<size_t>(row) * d + j] = 1;
        opt.add_param(table, std::move(mask));
    }

    TrainCurve curve;
    for (int step = 0; step < spec.steps; ++step) {
        std::vector<size_t> idx;
        for (int b = 0; b < spec.batch; ++b) idx.push_back(rng.next_below(latents.size()));
        auto z0 = stack_latents(latents, idx);
        std::vector<int> ts;
        for (int b = 0; b < spec.batch; ++b)
            ts.push_back(1 + static_cast<int>(rng.next_below(mb.sched.T)));
        auto eps = Tensor::randn(z0.shape(), rng);

        std::vector<int> ids;
        for (int b = 0; b < spec.batch; ++b)
            ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());

        opt.zero_grad();
        DiffusionBatch batch;
        batch.z0 = z0;
        batch.ts = ts;
        batch.eps = eps;
        batch.cond_txt = mb.txt.encode(ids, spec.batch);
        auto loss = diffusion_loss(mb.unet, mb.sched, batch, LossMode::CLDM, 0.0f);

        if (spec.prior_weight > 0.0f && !prior_latents.empty()) {
            std::vector<size_t> pidx;
            for (int b = 0; b < spec.batch; ++b) pidx.push_back(rng.next_below(prior_latents.size()));
            DiffusionBatch pb;
            pb.z0 = stack_latents(prior_latents, pidx);
            pb.ts.clear();
            for (int b = 0; b < spec.batch; ++b)
                pb.ts.push_back(1 + static_cast<int>(rng.next_below(mb.sched.T)));
            pb.eps = Tensor::randn(pb.z0.shape(), rng);
            std::vector<int> pids;
            const auto prior_ids = tokenize(mb.vocab, prior_prompt, mb.txt.config().m_txt);
            for (int b = 0; b < spec.batch; ++b)
                pids.insert(pids.end(), prior_ids.begin(), prior_ids.end());
            pb.cond_txt = mb.txt.encode(pids, spec.batch);
            loss = add(loss, scale(diffusion_loss(mb.unet, mb.sched, pb, LossMode::CLDM, 0.0f),
                                   spec.prior_weight));
        }

        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("fine-tuning loss diverged at step " + std::to_string(step));
        backward(loss);
        opt.clip_grad_norm(1.0f);
        opt.step();
        curve.points.emplace_back(step, lv);
    }
    return curve;
}

float concept_eval_loss(const ModelBundle& mb, const ConceptSpec& spec, std::uint64_t seed) {
    check_spec(mb, spec);
    NoGradGuard ng;
    Rng rng = Rng(seed).substream("concept-eval");
    const auto latents = encode_examples(mb, spec.examples);
    const auto prompt_ids = tokenize(mb.vocab, concept_prompt(spec), mb.txt.config().m_txt);

    const int B = static_cast<int>(latents.size());
    std::vector<size_t> idx(latents.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    DiffusionBatch batch;
    batch.z0 = stack_latents(latents, idx);
    // timesteps spread across the chain, fixed noise per seed
    for (int b = 0; b < B; ++b)
        batch.ts.push_back(1 + (mb.sched.T - 1) * b / std::max(1, B - 1));
    batch.eps = Tensor::randn(batch.z0.shape(), rng);
    std::vector<int> ids;
    for (int b = 0; b < B; ++b) ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
    batch.cond_txt = mb.txt.encode(ids, B);
    return diffusion_loss(mb.unet, mb.sched, batch, LossMode::CLDM, 0.0f).item();
}

MetricReport validate_concept(const ModelBundle& mb, const ConceptSpec& spec,
                              const std::vector<Image>& holdout, const Image& style_ref,
                              AdapterConfig adapt_cfg, Rng& rng) {
    check_spec(mb, spec);
    if (holdout.empty()) throw UsageError("validate_concept: empty holdout set");
    adapt_cfg.prompt = concept_prompt(spec);

    const auto cap_orig = tokenize(mb.vocab, "photo of real style road scene",
                                   mb.txt.config().m_txt);
    const auto cap_mod = tokenize(mb.vocab, adapt_cfg.prompt, mb.txt.config().m_txt);

    std::vector<CorpusPair> pairs;
    for (size_t i = 0; i < holdout.size(); ++i) {
        Rng frame_rng = rng.substream("validate", i);
        auto res = adapt(holdout[i], mb, adapt_cfg, frame_rng);
        CorpusPair p;
        p.id = "holdout_" + std::to_string(i);
        p.input = holdout[i];
        p.output = res.output;
        p.style_ref = style_ref;
        p.caption_orig = cap_orig;
        p.caption_mod = cap_mod;
        p.ips_value = ips(res.n_iter, res.seconds);
        pairs.push_back(std::move(p));
    }
    return evaluate_corpus(pairs, mb.fx);
}

}  // namespace s2rd
