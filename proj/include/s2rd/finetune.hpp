#ifndef S2RD_FINETUNE_HPP
#define S2RD_FINETUNE_HPP

#include <string>
#include <vector>

#include "s2rd/diffusion.hpp"
#include "s2rd/metrics.hpp"

namespace s2rd {

// Few-shot concept binding: a handful of example images tied to a trigger
// token. Only the U-Net and the trigger's embedding row move; the text
// encoder body, image encoder and autoencoder stay frozen.
struct ConceptSpec {
    std::string trigger;                  // "<sim_scale_odd>" form, already in the vocabulary
    std::vector<Image> examples;          // 1..32 images (5-10 typical)
    std::string prompt_template = "photo of {} road";  // {} is replaced by the trigger
    int steps = 400;
    float lr = 1e-4f;
    int batch = 2;
    float prior_weight = 0.0f;  // lambda_pp, prior-preservation mix-in
    std::uint64_t seed = 0;
};

std::string concept_prompt(const ConceptSpec& spec);

// Trains in place; returns the per-step loss curve. Requires the trigger to
// be registered (add_trigger_token) beforehand.
TrainCurve finetune_concept(ModelBundle& mb, const ConceptSpec& spec);

// C-LDM loss on the concept set with frozen timesteps/noise drawn from the
// seed; comparable before/after fine-tuning.
float concept_eval_loss(const ModelBundle& mb, const ConceptSpec& spec, std::uint64_t seed);

// Runs the adapter over holdout frames with the trigger prompt and reports
// the full metric set against the style reference.
MetricReport validate_concept(const ModelBundle& mb, const ConceptSpec& spec,
                              const std::vector<Image>& holdout, const Image& style_ref,
                              AdapterConfig adapt_cfg, Rng& rng);

}  // namespace s2rd

#endif
