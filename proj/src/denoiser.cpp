#include "s2rd/denoiser.hpp"

#include <cmath>

namespace s2rd {

namespace {

Tensor ones_param(int n) {
    auto t = Tensor::full({n}, 1.0f);
    t.set_requires_grad(true);
    return t;
}

Tensor zeros_param(const Shape& s) {
    auto t = Tensor::zeros(s);
    t.set_requires_grad(true);
    return t;
}

Tensor conv_weight(int oc, int ic, int k, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(ic * k * k));
    return Tensor::randn({oc, ic, k, k}, rng, s, true);
}

Tensor dense_weight(int out, int in, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::randn({out, in}, rng, s, true);
}

}  // namespace

Tensor cross_attention(const Tensor& features, const Tensor& cond, const Tensor& wq,
                       const Tensor& wk, const Tensor& wv) {
    if (features.rank() != 3 || cond.rank() != 3)
        throw ShapeError("cross_attention expects [B,N,d_feat] features and [B,M,d_cond] cond");
    if (cond.dim(2) != wk.dim(1))
        throw ShapeError("cross_attention: cond width " + std::to_string(cond.dim(2)) +
                         " vs W_K in-dim " + std::to_string(wk.dim(1)));
    const int d = wq.dim(0);
    auto q = linear(features, wq);
    auto k = linear(cond, wk);
    auto v = linear(cond, wv);
    auto scores = scale(bmm(q, k, /*tb=*/true), 1.0f / std::sqrt(static_cast<float>(d)));
    return bmm(softmax(scores, 2), v);
}

Tensor decoupled_cross_attention(const Tensor& features, const Tensor& cond_txt,
                                 const Tensor& cond_img, const CrossAttentionWeights& w,
                                 float lambda_ip) {
    if (lambda_ip < 0.0f) throw UsageError("lambda_ip must be >= 0");
    auto text_term = cross_attention(features, cond_txt, w.wq, w.wk, w.wv);
    if (lambda_ip == 0.0f || !cond_img.defined()) return text_term;
    auto image_term = cross_attention(features, cond_img, w.wq, w.wk2, w.wv2);
    return add(text_term, scale(image_term, lambda_ip));
}

// ---------------------------------------------------------------------------
// ResBlock
// ---------------------------------------------------------------------------

void ResBlock::init(int c_in, int c_out, int time_mlp, int groups, Rng& rng) {
    (void)groups;
    gn1_g = ones_param(c_in);
    gn1_b = zeros_param({c_in});
    conv1_w = conv_weight(c_out, c_in, 3, rng);
    conv1_b = zeros_param({c_out});
    time_w = dense_weight(c_out, time_mlp, rng);
    time_b = zeros_param({c_out});
    gn2_g = ones_param(c_out);
    gn2_b = zeros_param({c_out});
    conv2_w = conv_weight(c_out, c_out, 3, rng);
    conv2_b = zeros_param({c_out});
    if (c_in != c_out) {
        skip_w = conv_weight(c_out, c_in, 1, rng);
        skip_b = zeros_param({c_out});
    }
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb, int groups) const {
    auto h = conv2d(silu(group_norm(x, gn1_g, gn1_b, groups)), conv1_w, conv1_b, 1, 1);
    h = add_spatial(h, linear(silu(temb), time_w, time_b));
    h = conv2d(silu(group_norm(h, gn2_g, gn2_b, groups)), conv2_w, conv2_b, 1, 1);
    auto sk = skip_w.defined() ? conv2d(x, skip_w, skip_b, 1, 0) : x;
    return add(h, sk);
}

void ResBlock::collect(std::vector<Tensor>& out) const {
    for (const Tensor& t :
         {gn1_g, gn1_b, conv1_w, conv1_b, time_w, time_b, gn2_g, gn2_b, conv2_w, conv2_b})
        out.push_back(t);
    if (skip_w.defined()) {
        out.push_back(skip_w);
        out.push_back(skip_b);
    }
}

void ResBlock::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "gn1_g", gn1_g);
    ck.put(prefix + "gn1_b", gn1_b);
    ck.put(prefix + "conv1_w", conv1_w);
    ck.put(prefix + "conv1_b", conv1_b);
    ck.put(prefix + "time_w", time_w);
    ck.put(prefix + "time_b", time_b);
    ck.put(prefix + "gn2_g", gn2_g);
    ck.put(prefix + "gn2_b", gn2_b);
    ck.put(prefix + "conv2_w", conv2_w);
    ck.put(prefix + "conv2_b", conv2_b);
    if (skip_w.defined()) {
        ck.put(prefix + "skip_w", skip_w);
        ck.put(prefix + "skip_b", skip_b);
    }
}

void ResBlock::load(const Checkpoint& ck, const std::string& prefix) {
    gn1_g = ck.get(prefix + "gn1_g", true);
    gn1_b = ck.get(prefix + "gn1_b", true);
    conv1_w = ck.get(prefix + "conv1_w", true);
    conv1_b = ck.get(prefix + "conv1_b", true);
    time_w = ck.get(prefix + "time_w", true);
    time_b = ck.get(prefix + "time_b", true);
    gn2_g = ck.get(prefix + "gn2_g", true);
    gn2_b = ck.get(prefix + "gn2_b", true);
    conv2_w = ck.get(prefix + "conv2_w", true);
    conv2_b = ck.get(prefix + "conv2_b", true);
    if (ck.has(prefix + "skip_w")) {
        skip_w = ck.get(prefix + "skip_w", true);
        skip_b = ck.get(prefix + "skip_b", true);
    } else {
        skip_w = Tensor();
        skip_b = Tensor();
    }
}

// ---------------------------------------------------------------------------
// AttentionBlock
// ---------------------------------------------------------------------------

void AttentionBlock::init(int width, int d_cond, int groups, Rng& rng) {
    (void)groups;
    gn_g = ones_param(width);
    gn_b = zeros_param({width});
    // single head, head dim d == level width
    attn.wq = dense_weight(width, width, rng);
    attn.wk = dense_weight(width, d_cond, rng);
    attn.wv = dense_weight(width, d_cond, rng);
    attn.wk2 = dense_weight(width, d_cond, rng);
    attn.wv2 = dense_weight(width, d_cond, rng);
    wo_w = dense_weight(width, width, rng);
    wo_b = zeros_param({width});
}

Tensor AttentionBlock::forward(const Tensor& x, const Tensor& cond_txt, const Tensor& cond_img,
                               float lambda_ip, int groups) const {
    const int h = x.dim(2), w = x.dim(3);
    auto rows = rows_from_nchw(group_norm(x, gn_g, gn_b, groups));
    auto ctx = decoupled_cross_attention(rows, cond_txt, cond_img, attn, lambda_ip);
    return add(x, rows_to_nchw(linear(ctx, wo_w, wo_b), h, w));
}

void AttentionBlock::collect(std::vector<Tensor>& out) const {
    for (const Tensor& t : {gn_g, gn_b, attn.wq, attn.wk, attn.wv, attn.wk2, attn.wv2, wo_w, wo_b})
        out.push_back(t);
}

void AttentionBlock::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "gn_g", gn_g);
    ck.put(prefix + "gn_b", gn_b);
    ck.put(prefix + "wq", attn.wq);
    ck.put(prefix + "wk", attn.wk);
    ck.put(prefix + "wv", attn.wv);
    ck.put(prefix + "wk2", attn.wk2);
    ck.put(prefix + "wv2", attn.wv2);
    ck.put(prefix + "wo_w", wo_w);
    ck.put(prefix + "wo_b", wo_b);
}

void AttentionBlock::load(const Checkpoint& ck, const std::string& prefix) {
    gn_g = ck.get(prefix + "gn_g", true);
    gn_b = ck.get(prefix + "gn_b", true);
    attn.wq = ck.get(prefix + "wq", true);
    attn.wk = ck.get(prefix + "wk", true);
    attn.wv = ck.get(prefix + "wv", true);
    attn.wk2 = ck.get(prefix + "wk2", true);
    attn.wv2 = ck.get(prefix + "wv2", true);
    wo_w = ck.get(prefix + "wo_w", true);
    wo_b = ck.get(prefix + "wo_b", true);
}

// ---------------------------------------------------------------------------
// UNetModel
// ---------------------------------------------------------------------------

void UNetModel::init(const UNetConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    conv_in_w = conv_weight(cfg.width0, cfg.latent_channels, 3, rng);
    conv_in_b = zeros_param({cfg.width0});
    time_w1 = dense_weight(cfg.time_mlp, cfg.time_dim, rng);
    time_b1 = zeros_param({cfg.time_mlp});
    time_w2 = dense_weight(cfg.time_mlp, cfg.time_mlp, rng);
    time_b2 = zeros_param({cfg.time_mlp});

    down0_.resize(cfg.res_blocks);
    for (auto& b : down0_) b.init(cfg.width0, cfg.width0, cfg.time_mlp, cfg.groups, rng);
    attn_down0_.init(cfg.width0, cfg.d_cond, cfg.groups, rng);
    down_conv_w = conv_weight(cfg.width1, cfg.width0, 3, rng);
    down_conv_b = zeros_param({cfg.width1});
    down1_.resize(cfg.res_blocks);
    for (auto& b : down1_) b.init(cfg.width1, cfg.width1, cfg.time_mlp, cfg.groups, rng);
    attn_down1_.init(cfg.width1, cfg.d_cond, cfg.groups, rng);

    mid1_.init(cfg.width1, cfg.width1, cfg.time_mlp, cfg.groups, rng);
    attn_mid_.init(cfg.width1, cfg.d_cond, cfg.groups, rng);
    mid2_.init(cfg.width1, cfg.width1, cfg.time_mlp, cfg.groups, rng);

    up1_.resize(cfg.res_blocks);
    up1_[0].init(2 * cfg.width1, cfg.width1, cfg.time_mlp, cfg.groups, rng);
    for (int i = 1; i < cfg.res_blocks; ++i)
        up1_[i].init(cfg.width1, cfg.width1, cfg.time_mlp, cfg.groups, rng);
    attn_up1_.init(cfg.width1, cfg.d_cond, cfg.groups, rng);
    up_conv_w = conv_weight(cfg.width0, cfg.width1, 3, rng);
    up_conv_b = zeros_param({cfg.width0});
    up0_.resize(cfg.res_blocks);
    up0_[0].init(2 * cfg.width0, cfg.width0, cfg.time_mlp, cfg.groups, rng);
    for (int i = 1; i < cfg.res_blocks; ++i)
        up0_[i].init(cfg.width0, cfg.width0, cfg.time_mlp, cfg.groups, rng);
    attn_up0_.init(cfg.width0, cfg.d_cond, cfg.groups, rng);

    gn_out_g = ones_param(cfg.width0);
    gn_out_b = zeros_param({cfg.width0});
    // small-scale output init: near-zero initial prediction while keeping
    // gradient flowing into the body on the first step
    const float s_out = 0.01f / std::sqrt(static_cast<float>(cfg.width0 * 9));
    conv_out_w = Tensor::randn({cfg.latent_channels, cfg.width0, 3, 3}, rng, s_out, true);
    conv_out_b = zeros_param({cfg.latent_channels});
}

Tensor UNetModel::time_embedding(const std::vector<int>& ts) const {
    const int B = static_cast<int>(ts.size());
    const int half = cfg_.time_dim / 2;
    std::vector<float> emb(static_cast<size_t>(B) * cfg_.time_dim);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(1, half - 1));
            emb[static_cast<size_t>(b) * cfg_.time_dim + i] =
                static_cast<float>(std::sin(ts[b] * freq));
            emb[static_cast<size_t>(b) * cfg_.time_dim + half + i] =
                static_cast<float>(std::cos(ts[b] * freq));
        }
    return Tensor::from_data({B, cfg_.time_dim}, std::move(emb));
}

Tensor UNetModel::predict(const Tensor& z_t, const std::vector<int>& ts, const Tensor& cond_txt,
                          const Tensor& cond_img, float lambda_ip) const {
    if (z_t.rank() != 4 || z_t.dim(1) != cfg_.latent_channels)
        throw ShapeError("predict_noise: latent shape " + shape_str(z_t.shape()) +
                         " does not match model");
    if (static_cast<int>(ts.size()) != z_t.dim(0))
        throw UsageError("predict_noise: one timestep per batch row required");
    if (!cond_txt.defined() || cond_txt.rank() != 3 || cond_txt.dim(0) != z_t.dim(0) ||
        cond_txt.dim(2) != cfg_.d_cond)
        throw ShapeError("predict_noise: text condition must be [B,M,d_cond]");
    if (cond_img.defined() && (cond_img.rank() != 3 || cond_img.dim(0) != z_t.dim(0) ||
                               cond_img.dim(2) != cfg_.d_cond))
        throw ShapeError("predict_noise: image condition must be [B,P,d_cond]");

    auto temb = linear(silu(linear(time_embedding(ts), time_w1, time_b1)), time_w2, time_b2);
    const float lam = lambda_ip;

    auto h = conv2d(z_t, conv_in_w, conv_in_b, 1, 1);
    for (const auto& b : down0_) h = b.forward(h, temb, cfg_.groups);
    h = attn_down0_.forward(h, cond_txt, cond_img, lam, cfg_.groups);
    auto skip0 = h;

    h = conv2d(h, down_conv_w, down_conv_b, 2, 1);
    for (const auto& b : down1_) h = b.forward(h, temb, cfg_.groups);
    h = attn_down1_.forward(h, cond_txt, cond_img, lam, cfg_.groups);
    auto skip1 = h;

    h = mid1_.forward(h, temb, cfg_.groups);
    h = attn_mid_.forward(h, cond_txt, cond_img, lam, cfg_.groups);
    h = mid2_.forward(h, temb, cfg_.groups);

    h = concat(h, skip1, 1);
    for (const auto& b : up1_) h = b.forward(h, temb, cfg_.groups);
    h = attn_up1_.forward(h, cond_txt, cond_img, lam, cfg_.groups);

    h = conv2d(upsample_nearest2x(h), up_conv_w, up_conv_b, 1, 1);
    h = concat(h, skip0, 1);
    for (const auto& b : up0_) h = b.forward(h, temb, cfg_.groups);
    h = attn_up0_.forward(h, cond_txt, cond_img, lam, cfg_.groups);

    h = silu(group_norm(h, gn_out_g, gn_out_b, cfg_.groups));
    return conv2d(h, conv_out_w, conv_out_b, 1, 1);
}

void UNetModel::collect(std::vector<Tensor>& out) const {
    for (const Tensor& t : {conv_in_w, conv_in_b, time_w1, time_b1, time_w2, time_b2})
        out.push_back(t);
    for (const auto& b : down0_) b.collect(out);
    attn_down0_.collect(out);
    out.push_back(down_conv_w);
    out.push_back(down_conv_b);
    for (const auto& b : down1_) b.collect(out);
    attn_down1_.collect(out);
    mid1_.collect(out);
    attn_mid_.collect(out);
    mid2_.collect(out);
    for (const auto& b : up1_) b.collect(out);
    attn_up1_.collect(out);
    out.push_back(up_conv_w);
    out.push_back(up_conv_b);
    for (const auto& b : up0_) b.collect(out);
    attn_up0_.collect(out);
    for (const Tensor& t : {gn_out_g, gn_out_b, conv_out_w, conv_out_b}) out.push_back(t);
}

void UNetModel::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "meta",
           Tensor::from_data({8}, {static_cast<float>(cfg_.latent_channels),
                                   static_cast<float>(cfg_.width0),
                                   static_cast<float>(cfg_.width1),
                                   static_cast<float>(cfg_.res_blocks),
                                   static_cast<float>(cfg_.groups),
                                   static_cast<float>(cfg_.d_cond),
                                   static_cast<float>(cfg_.time_dim),
                                   static_cast<float>(cfg_.time_mlp)}));
    ck.put(prefix + "conv_in_w", conv_in_w);
    ck.put(prefix + "conv_in_b", conv_in_b);
    ck.put(prefix + "time_w1", time_w1);
    ck.put(prefix + "time_b1", time_b1);
    ck.put(prefix + "time_w2", time_w2);
    ck.put(prefix + "time_b2", time_b2);
    for (size_t i = 0; i < down0_.size(); ++i)
        down0_[i].save(ck, prefix + "down0." + std::to_string(i) + ".");
    attn_down0_.save(ck, prefix + "attn_down0.");
    ck.put(prefix + "down_conv_w", down_conv_w);
    ck.put(prefix + "down_conv_b", down_conv_b);
    for (size_t i = 0; i < down1_.size(); ++i)
        down1_[i].save(ck, prefix + "down1." + std::to_string(i) + ".");
    attn_down1_.save(ck, prefix + "attn_down1.");
    mid1_.save(ck, prefix + "mid1.");
    attn_mid_.save(ck, prefix + "attn_mid.");
    mid2_.save(ck, prefix + "mid2.");
    for (size_t i = 0; i < up1_.size(); ++i)
        up1_[i].save(ck, prefix + "up1." + std::to_string(i) + ".");
    attn_up1_.save(ck, prefix + "attn_up1.");
    ck.put(prefix + "up_conv_w", up_conv_w);
    ck.put(prefix + "up_conv_b", up_conv_b);
    for (size_t i = 0; i < up0_.size(); ++i)
        up0_[i].save(ck, prefix + "up0." + std::to_string(i) + ".");
    attn_up0_.save(ck, prefix + "attn_up0.");
    ck.put(prefix + "gn_out_g", gn_out_g);
    ck.put(prefix + "gn_out_b", gn_out_b);
    ck.put(prefix + "conv_out_w", conv_out_w);
    ck.put(prefix + "conv_out_b", conv_out_b);
}

void UNetModel::load(const Checkpoint& ck, const std::string& prefix) {
    const auto meta = ck.get(prefix + "meta");
    cfg_.latent_channels = static_cast<int>(meta.data()[0]);
    cfg_.width0 = static_cast<int>(meta.data()[1]);
    cfg_.width1 = static_cast<int>(meta.data()[2]);
    cfg_.res_blocks = static_cast<int>(meta.data()[3]);
    cfg_.groups = static_cast<int>(meta.data()[4]);
    cfg_.d_cond = static_cast<int>(meta.data()[5]);
    cfg_.time_dim = static_cast<int>(meta.data()[6]);
    cfg_.time_mlp = static_cast<int>(meta.data()[7]);
    conv_in_w = ck.get(prefix + "conv_in_w", true);
    conv_in_b = ck.get(prefix + "conv_in_b", true);
    time_w1 = ck.get(prefix + "time_w1", true);
    time_b1 = ck.get(prefix + "time_b1", true);
    time_w2 = ck.get(prefix + "time_w2", true);
    time_b2 = ck.get(prefix + "time_b2", true);
    down0_.resize(cfg_.res_blocks);
    for (size_t i = 0; i < down0_.size(); ++i)
        down0_[i].load(ck, prefix + "down0." + std::to_string(i) + ".");
    attn_down0_.load(ck, prefix + "attn_down0.");
    down_conv_w = ck.get(prefix + "down_conv_w", true);
    down_conv_b = ck.get(prefix + "down_conv_b", true);
    down1_.resize(cfg_.res_blocks);
    for (size_t i = 0; i < down1_.size(); ++i)
        down1_[i].load(ck, prefix + "down1." + std::to_string(i) + ".");
    attn_down1_.load(ck, prefix + "attn_down1.");
    mid1_.load(ck, prefix + "mid1.");
    attn_mid_.load(ck, prefix + "attn_mid.");
    mid2_.load(ck, prefix + "mid2.");
    up1_.resize(cfg_.res_blocks);
    for (size_t i = 0; i < up1_.size(); ++i)
        up1_[i].load(ck, prefix + "up1." + std::to_string(i) + ".");
    attn_up1_.load(ck, prefix + "attn_up1.");
    up_conv_w = ck.get(prefix + "up_conv_w", true);
    up_conv_b = ck.get(prefix + "up_conv_b", true);
    up0_.resize(cfg_.res_blocks);
    for (size_t i = 0; i < up0_.size(); ++i)
        up0_[i].load(ck, prefix + "up0." + std::to_string(i) + ".");
    attn_up0_.load(ck, prefix + "attn_up0.");
    gn_out_g = ck.get(prefix + "gn_out_g", true);
    gn_out_b = ck.get(prefix + "gn_out_b", true);
    conv_out_w = ck.get(prefix + "conv_out_w", true);
    conv_out_b = ck.get(prefix + "conv_out_b", true);
}

}  // namespace s2rd
