#ifndef S2RD_DENOISER_HPP
#define S2RD_DENOISER_HPP

#include <vector>

#include "s2rd/checkpoint.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

// Attention weights for one cross-attention site. Projections are biasless;
// the decoupled K'/V' pair serves the image-prompt path.
struct CrossAttentionWeights {
    Tensor wq;      // [d, d_feат] -> queries from flattened spatial features
    Tensor wk, wv;  // [d, d_cond], [d_feat, d_cond] -> text keys/values
    Tensor wk2, wv2;  // decoupled image-prompt keys/values
};

// Softmax(Q K^T / sqrt(d)) V with Q from features, K/V from the condition.
// features [B,N,d_feat], cond [B,M,d_cond]; returns [B,N,d_feat].
Tensor cross_attention(const Tensor& features, const Tensor& cond, const Tensor& wq,
                       const Tensor& wk, const Tensor& wv);

// Text term plus lambda_ip * image term. lambda_ip == 0 (or an undefined
// cond_img) reproduces the text-only path bit-for-bit.
Tensor decoupled_cross_attention(const Tensor& features, const Tensor& cond_txt,
                                 const Tensor& cond_img, const CrossAttentionWeights& w,
                                 float lambda_ip);

struct UNetConfig {
    int latent_channels = 4;
    int width0 = 64;   // full-resolution level
    int width1 = 128;  // downsampled level
    int res_blocks = 2;
    int groups = 8;
    int d_cond = 64;
    int time_dim = 64;
    int time_mlp = 128;
    float lambda_ip = 1.0f;
};

struct ResBlock {
    Tensor gn1_g, gn1_b, conv1_w, conv1_b;
    Tensor time_w, time_b;
    Tensor gn2_g, gn2_b, conv2_w, conv2_b;
    Tensor skip_w, skip_b;  // 1x1 conv when channel counts differ

    void init(int c_in, int c_out, int time_mlp, int groups, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& temb, int groups) const;
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);
};

struct AttentionBlock {
    Tensor gn_g, gn_b;
    CrossAttentionWeights attn;
    Tensor wo_w, wo_b;

    void init(int width, int d_cond, int groups, Rng& rng);
    Tensor forward(const Tensor& x, const Tensor& cond_txt, const Tensor& cond_img,
                   float lambda_ip, int groups) const;
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);
};

// Time-conditioned U-Net noise predictor over latents: two resolutions,
// ResNet blocks, per-level skip concatenation, cross-attention after each
// block stack.
class UNetModel {
public:
    void init(const UNetConfig& cfg, Rng& rng);

    // z_t [B,c,h,w], one timestep per batch row; cond_img may be undefined.
    Tensor predict(const Tensor& z_t, const std::vector<int>& ts, const Tensor& cond_txt,
                   const Tensor& cond_img, float lambda_ip) const;

    Tensor predict(const Tensor& z_t, const std::vector<int>& ts, const Tensor& cond_txt) const {
        return predict(z_t, ts, cond_txt, Tensor(), 0.0f);
    }

    const UNetConfig& config() const { return cfg_; }
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

private:
    Tensor time_embedding(const std::vector<int>& ts) const;

    UNetConfig cfg_;
    Tensor conv_in_w, conv_in_b;
    Tensor time_w1, time_b1, time_w2, time_b2;
    std::vector<ResBlock> down0_, down1_;
    AttentionBlock attn_down0_, attn_down1_;
    Tensor down_conv_w, down_conv_b;
    ResBlock mid1_, mid2_;
    AttentionBlock attn_mid_;
    std::vector<ResBlock> up1_, up0_;
    AttentionBlock attn_up1_, attn_up0_;
    Tensor up_conv_w, up_conv_b;
    Tensor gn_out_g, gn_out_b, conv_out_w, conv_out_b;
};

}  // namespace s2rd

#endif
