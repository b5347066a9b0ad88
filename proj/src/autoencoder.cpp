#include "s2rd/autoencoder.hpp"

#include <cmath>
#include <cstdio>

#include "s2rd/optim.hpp"

namespace s2rd {

namespace {

Tensor conv_weight(int oc, int ic, int k, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(ic * k * k));
    return Tensor::randn({oc, ic, k, k}, rng, s, true);
}

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

int log2_exact(int v) {
    int k = 0;
    while ((1 << k) < v) ++k;
    if ((1 << k) != v) throw ConfigError("downsample factor must be a power of two");
    return k;
}

}  // namespace

void AutoencoderModel::init(const Config& cfg, Rng& rng) {
    cfg_ = cfg;
    const int k = log2_exact(cfg.downsample_factor);
    const std::vector<int> table = {16, 24, 32, 48, 64, 96};
    widths_.assign(table.begin(), table.begin() + std::min<size_t>(k + 1, table.size()));
    while (static_cast<int>(widths_.size()) < k + 1) widths_.push_back(widths_.back());

    enc_in_w = conv_weight(widths_[0], 3, 3, rng);
    enc_in_b = zeros_param({widths_[0]});
    enc_w_.clear();
    enc_b_.clear();
    enc_gn_g_.clear();
    enc_gn_b_.clear();
    for (int i = 0; i < k; ++i) {
        enc_w_.push_back(conv_weight(widths_[i + 1], widths_[i], 3, rng));
        enc_b_.push_back(zeros_param({widths_[i + 1]}));
        enc_gn_g_.push_back(ones_param(widths_[i + 1]));
        enc_gn_b_.push_back(zeros_param({widths_[i + 1]}));
    }
    enc_out_w = conv_weight(cfg.latent_channels, widths_.back(), 3, rng);
    enc_out_b = zeros_param({cfg.latent_channels});

    dec_in_w = conv_weight(widths_.back(), cfg.latent_channels, 3, rng);
    dec_in_b = zeros_param({widths_.back()});
    dec_w_.clear();
    dec_b_.clear();
    dec_gn_g_.clear();
    dec_gn_b_.clear();
    for (int i = k; i > 0; --i) {
        dec_w_.push_back(conv_weight(widths_[i - 1], widths_[i], 3, rng));
        dec_b_.push_back(zeros_param({widths_[i - 1]}));
        dec_gn_g_.push_back(ones_param(widths_[i - 1]));
        dec_gn_b_.push_back(zeros_param({widths_[i - 1]}));
    }
    dec_out_w = conv_weight(3, widths_[0], 3, rng);
    dec_out_b = zeros_param({3});
}

Tensor AutoencoderModel::encode(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 3)
        throw ShapeError("encode expects [B,3,H,W], got " + shape_str(x.shape()));
    if (x.dim(2) % cfg_.downsample_factor != 0 || x.dim(3) % cfg_.downsample_factor != 0)
        throw ShapeError("encode: image size " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) + " not divisible by factor " +
                         std::to_string(cfg_.downsample_factor));
    auto h = silu(conv2d(x, enc_in_w, enc_in_b, 1, 1));
    for (size_t i = 0; i < enc_w_.size(); ++i) {
        h = conv2d(h, enc_w_[i], enc_b_[i], 2, 1);
        h = silu(group_norm(h, enc_gn_g_[i], enc_gn_b_[i], cfg_.groups));
    }
    return conv2d(h, enc_out_w, enc_out_b, 1, 1);
}

Tensor AutoencoderModel::decode(const Tensor& z) const {
    if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels)
        throw ShapeError("decode expects [B," + std::to_string(cfg_.latent_channels) +
                         ",h,w], got " + shape_str(z.shape()));
    auto h = silu(conv2d(z, dec_in_w, dec_in_b, 1, 1));
    for (size_t i = 0; i < dec_w_.size(); ++i) {
        h = conv2d(upsample_nearest2x(h), dec_w_[i], dec_b_[i], 1, 1);
        h = silu(group_norm(h, dec_gn_g_[i], dec_gn_b_[i], cfg_.groups));
    }
    return tanh_act(conv2d(h, dec_out_w, dec_out_b, 1, 1));
}

void AutoencoderModel::collect(std::vector<Tensor>& out) const {
    out.push_back(enc_in_w);
    out.push_back(enc_in_b);
    for (size_t i = 0; i < enc_w_.size(); ++i) {
        out.push_back(enc_w_[i]);
        out.push_back(enc_b_[i]);
        out.push_back(enc_gn_g_[i]);
        out.push_back(enc_gn_b_[i]);
    }
    out.push_back(enc_out_w);
    out.push_back(enc_out_b);
    out.push_back(dec_in_w);
    out.push_back(dec_in_b);
    for (size_t i = 0; i < dec_w_.size(); ++i) {
        out.push_back(dec_w_[i]);
        out.push_back(dec_b_[i]);
        out.push_back(dec_gn_g_[i]);
        out.push_back(dec_gn_b_[i]);
    }
    out.push_back(dec_out_w);
    out.push_back(dec_out_b);
}

void AutoencoderModel::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "meta",
           Tensor::from_data({3}, {static_cast<float>(cfg_.latent_channels),
                                   static_cast<float>(cfg_.downsample_factor),
                                   static_cast<float>(cfg_.groups)}));
    ck.put(prefix + "enc_in_w", enc_in_w);
    ck.put(prefix + "enc_in_b", enc_in_b);
    for (size_t i = 0; i < enc_w_.size(); ++i) {
        const std::string p = prefix + "enc" + std::to_string(i) + ".";
        ck.put(p + "w", enc_w_[i]);
        ck.put(p + "b", enc_b_[i]);
        ck.put(p + "gn_g", enc_gn_g_[i]);
        ck.put(p + "gn_b", enc_gn_b_[i]);
    }
    ck.put(prefix + "enc_out_w", enc_out_w);
    ck.put(prefix + "enc_out_b", enc_out_b);
    ck.put(prefix + "dec_in_w", dec_in_w);
    ck.put(prefix + "dec_in_b", dec_in_b);
    for (size_t i = 0; i < dec_w_.size(); ++i) {
        const std::string p = prefix + "dec" + std::to_string(i) + ".";
        ck.put(p + "w", dec_w_[i]);
        ck.put(p + "b", dec_b_[i]);
        ck.put(p + "gn_g", dec_gn_g_[i]);
        ck.put(p + "gn_b", dec_gn_b_[i]);
    }
    ck.put(prefix + "dec_out_w", dec_out_w);
    ck.put(prefix + "dec_out_b", dec_out_b);
}

void AutoencoderModel::load(const Checkpoint& ck, const std::string& prefix) {
    const auto meta = ck.get(prefix + "meta");
    Config cfg;
    cfg.latent_channels = static_cast<int>(meta.data()[0]);
    cfg.downsample_factor = static_cast<int>(meta.data()[1]);
    cfg.groups = static_cast<int>(meta.data()[2]);
    cfg_ = cfg;
    const int k = log2_exact(cfg.downsample_factor);
    const std::vector<int> table = {16, 24, 32, 48, 64, 96};
    widths_.assign(table.begin(), table.begin() + std::min<size_t>(k + 1, table.size()));
    while (static_cast<int>(widths_.size()) < k + 1) widths_.push_back(widths_.back());

    enc_in_w = ck.get(prefix + "enc_in_w", true);
    enc_in_b = ck.get(prefix + "enc_in_b", true);
    enc_w_.resize(k);
    enc_b_.resize(k);
    enc_gn_g_.resize(k);
    enc_gn_b_.resize(k);
    for (int i = 0; i < k; ++i) {
        const std::string p = prefix + "enc" + std::to_string(i) + ".";
        enc_w_[i] = ck.get(p + "w", true);
        enc_b_[i] = ck.get(p + "b", true);
        enc_gn_g_[i] = ck.get(p + "gn_g", true);
        enc_gn_b_[i] = ck.get(p + "gn_b", true);
    }
    enc_out_w = ck.get(prefix + "enc_out_w", true);
    enc_out_b = ck.get(prefix + "enc_out_b", true);
    dec_in_w = ck.get(prefix + "dec_in_w", true);
    dec_in_b = ck.get(prefix + "dec_in_b", true);
    dec_w_.resize(k);
    dec_b_.resize(k);
    dec_gn_g_.resize(k);
    dec_gn_b_.resize(k);
    for (int i = 0; i < k; ++i) {
        const std::string p = prefix + "dec" + std::to_string(i) + ".";
        dec_w_[i] = ck.get(p + "w", true);
        dec_b_[i] = ck.get(p + "b", true);
        dec_gn_g_[i] = ck.get(p + "gn_g", true);
        dec_gn_b_[i] = ck.get(p + "gn_b", true);
    }
    dec_out_w = ck.get(prefix + "dec_out_w", true);
    dec_out_b = ck.get(prefix + "dec_out_b", true);
}

std::string TrainCurve::to_csv() const {
    std::string out = "step,loss\n";
    for (const auto& [step, loss] : points) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d,%.8g\n", step, static_cast<double>(loss));
        out += buf;
    }
    return out;
}

void TrainCurve::save_csv(const std::string& path) const {
    const std::string text = to_csv();
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

TrainCurve train_autoencoder(AutoencoderModel& model, const std::vector<Image>& dataset,
                             const AutoencoderTrainConfig& cfg, const FeatureExtractor* fx) {
    if (dataset.empty()) throw UsageError("train_autoencoder: empty dataset");
    if (cfg.steps < 0 || cfg.batch < 1) throw ConfigError("train_autoencoder: bad steps/batch");
    Rng rng = Rng(cfg.seed).substream("ae-train");

    std::vector<Tensor> params;
    model.collect(params);
    Adam opt(Adam::Options{.lr = cfg.lr, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f});
    opt.add_params(params);

    TrainCurve curve;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Image> batch;
        for (int i = 0; i < cfg.batch; ++i)
            batch.push_back(dataset[rng.next_below(dataset.size())]);
        auto x = images_to_tensor(batch);

        opt.zero_grad();
        auto z = model.encode(x);
        auto recon = model.decode(z);
        auto loss = mse(recon, x);
        if (cfg.latent_weight > 0.0f)
            loss = add(loss, scale(mean_all(mul(z, z)), cfg.latent_weight));
        if (fx && cfg.feature_weight > 0.0f) {
            // feature matching through the frozen extractor
            auto fr = fx->features(recon);
            auto ft = fx->features(x);
            for (size_t l = 0; l < fr.size(); ++l)
                loss = add(loss, scale(mse(fr[l], ft[l]),
                                       cfg.feature_weight / static_cast<float>(fr.size())));
        }
        const float lv = loss.item();
        if (!std::isfinite(lv))
            throw TrainingError("autoencoder loss diverged at step " + std::to_string(step));
        backward(loss);
        opt.step();
        curve.points.emplace_back(step, lv);
    }
    return curve;
}

float compute_latent_scale(const AutoencoderModel& model, const std::vector<Image>& dataset) {
    NoGradGuard ng;
    double sum = 0.0, sumsq = 0.0;
    std::int64_t n = 0;
    for (const auto& img : dataset) {
        auto z = model.encode(image_to_tensor(img));
        for (float v : z.data()) {
            sum += v;
            sumsq += static_cast<double>(v) * v;
            ++n;
        }
    }
    const double mean = sum / static_cast<double>(n);
    const double var = sumsq / static_cast<double>(n) - mean * mean;
    const double stdv = std::sqrt(std::max(var, 1e-12));
    return static_cast<float>(1.0 / stdv);
}

}  // namespace s2rd
