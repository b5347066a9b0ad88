#ifndef S2RD_METRICS_HPP
#define S2RD_METRICS_HPP

#include <optional>
#include <string>
#include <vector>

#include "s2rd/checkpoint.hpp"
#include "s2rd/image.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

// Small convolutional feature extractor standing in for the pretrained
// CLIP/AlexNet/VGG backbones: layered feature maps for LPIPS and Gram style
// difference, a pooled embedding head for CS, and a bag-of-words text head
// sharing the embedding space for CLIP-DS. All metric code is parameterized
// over this class, so a heavier backbone could be slotted in unchanged.
class FeatureExtractor {
public:
    struct Config {
        std::vector<int> widths = {12, 24, 32};  // conv stack channel counts
        int kernel = 3;
        int stride = 2;
        int embed_dim = 32;
        int vocab_size = 0;  // text head rows; set from the vocabulary
        int d_text = 32;
    };

    void init(const Config& cfg, Rng& rng);

    // Per-layer post-activation feature maps, shallow to deep. imgs [B,3,H,W].
    std::vector<Tensor> features(const Tensor& imgs) const;

    // Pooled global embedding [B, embed_dim].
    Tensor embed_image(const Tensor& imgs) const;

    // Mean-pooled token embedding projected into the shared space [B, embed_dim].
    Tensor embed_text(const std::vector<int>& ids, int batch, int m) const;

    // Style logit in (-1,1) used only while training the extractor.
    Tensor style_logit(const Tensor& imgs) const;

    int num_layers() const { return static_cast<int>(cfg_.widths.size()); }

    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

private:
    Config cfg_;
    std::vector<Tensor> conv_w_, conv_b_;
    Tensor embed_w_, embed_b_;
    Tensor cls_w_, cls_b_;
    Tensor txt_table_, txt_w_, txt_b_;
};

// Eq-level metric primitives. Plain double math over extractor outputs.
double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);
double lpips(const Image& x, const Image& y, const FeatureExtractor& fx);
double style_difference(const Image& x, const Image& s, const FeatureExtractor& fx);
double clip_directional_similarity(const Image& img_in, const Image& img_out,
                                   const std::vector<int>& caption_orig,
                                   const std::vector<int>& caption_mod,
                                   const FeatureExtractor& fx);
double ips(std::int64_t n_iter, double dt_seconds);

struct MetricRow {
    std::string id;
    double cs = 0, clip_ds = 0, lpips = 0, sd_is = 0, sd_os = 0, ips = 0;
    std::string error;  // non-empty marks a failed row, excluded from aggregates
};

struct MetricReport {
    std::vector<MetricRow> rows;
    MetricRow best, mean, std_dev;  // aggregates over successful rows

    void finalize();                       // fills best/mean/std
    std::string to_csv() const;            // documented Table-3-style layout
    void save_csv(const std::string& path) const;
};

struct CorpusPair {
    std::string id;
    Image input, output, style_ref;
    std::vector<int> caption_orig, caption_mod;
    double ips_value = 0.0;
};

MetricReport evaluate_corpus(const std::vector<CorpusPair>& pairs, const FeatureExtractor& fx);

}  // namespace s2rd

#endif
