#include "s2rd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace s2rd {

// ---------------------------------------------------------------------------
// FeatureExtractor
// ---------------------------------------------------------------------------

namespace {

Tensor conv_weight(int oc, int ic, int k, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(ic * k * k));
    return Tensor::randn({oc, ic, k, k}, rng, s, true);
}

Tensor dense_weight(int out, int in, Rng& rng) {
    const float s = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::randn({out, in}, rng, s, true);
}

Tensor zeros_param(const Shape& s) {
    auto t = Tensor::zeros(s);
    t.set_requires_grad(true);
    return t;
}

// Global average pool [B,C,H,W] -> [B,C], composed as a bmm with a constant
// averaging row so gradients flow through existing ops.
Tensor global_avg_pool(const Tensor& x) {
    const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    auto rows = reshape(x, {B * C, HW, 1});
    auto avg = Tensor::full({B * C, 1, HW}, 1.0f / static_cast<float>(HW));
    return reshape(bmm(avg, rows), {B, C});
}

}  // namespace

void FeatureExtractor::init(const Config& cfg, Rng& rng) {
    cfg_ = cfg;
    conv_w_.clear();
    conv_b_.clear();
    int in = 3;
    for (int w : cfg.widths) {
        conv_w_.push_back(conv_weight(w, in, cfg.kernel, rng));
        conv_b_.push_back(zeros_param({w}));
        in = w;
    }
    embed_w_ = dense_weight(cfg.embed_dim, in, rng);
    embed_b_ = zeros_param({cfg.embed_dim});
    cls_w_ = dense_weight(1, in, rng);
    cls_b_ = zeros_param({1});
    txt_table_ = Tensor::randn({cfg.vocab_size, cfg.d_text}, rng, 0.05f, true);
    txt_w_ = dense_weight(cfg.embed_dim, cfg.d_text, rng);
    txt_b_ = zeros_param({cfg.embed_dim});
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& imgs) const {
    if (imgs.rank() != 4 || imgs.dim(1) != 3)
        throw ShapeError("feature extractor expects [B,3,H,W], got " + shape_str(imgs.shape()));
    std::vector<Tensor> out;
    Tensor h = imgs;
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        h = silu(conv2d(h, conv_w_[i], conv_b_[i], cfg_.stride, cfg_.kernel / 2));
        out.push_back(h);
    }
    return out;
}

Tensor FeatureExtractor::embed_image(const Tensor& imgs) const {
    auto maps = features(imgs);
    return linear(global_avg_pool(maps.back()), embed_w_, embed_b_);
}

Tensor FeatureExtractor::style_logit(const Tensor& imgs) const {
    auto maps = features(imgs);
    return tanh_act(linear(global_avg_pool(maps.back()), cls_w_, cls_b_));
}

Tensor FeatureExtractor::embed_text(const std::vector<int>& ids, int batch, int m) const {
    auto rows = embedding(txt_table_, ids, {batch, m});      // [B,m,d_text]
    auto avg = Tensor::full({batch, 1, m}, 1.0f / static_cast<float>(m));
    auto pooled = reshape(bmm(avg, rows), {batch, cfg_.d_text});
    return linear(pooled, txt_w_, txt_b_);
}

void FeatureExtractor::collect(std::vector<Tensor>& out) const {
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        out.push_back(conv_w_[i]);
        out.push_back(conv_b_[i]);
    }
    for (const Tensor& t : {embed_w_, embed_b_, cls_w_, cls_b_, txt_table_, txt_w_, txt_b_})
        out.push_back(t);
}

void FeatureExtractor::save(Checkpoint& ck, const std::string& prefix) const {
    std::vector<float> meta = {static_cast<float>(cfg_.widths.size()),
                               static_cast<float>(cfg_.embed_dim),
                               static_cast<float>(cfg_.vocab_size),
                               static_cast<float>(cfg_.d_text),
                               static_cast<float>(cfg_.kernel),
                               static_cast<float>(cfg_.stride)};
    for (int w : cfg_.widths) meta.push_back(static_cast<float>(w));
    ck.put(prefix + "meta", Tensor::from_data({static_cast<int>(meta.size())}, std::move(meta)));
    for (size_t i = 0; i < conv_w_.size(); ++i) {
        ck.put(prefix + "conv" + std::to_string(i) + "_w", conv_w_[i]);
        ck.put(prefix + "conv" + std::to_string(i) + "_b", conv_b_[i]);
    }
    ck.put(prefix + "embed_w", embed_w_);
    ck.put(prefix + "embed_b", embed_b_);
    ck.put(prefix + "cls_w", cls_w_);
    ck.put(prefix + "cls_b", cls_b_);
    ck.put(prefix + "txt_table", txt_table_);
    ck.put(prefix + "txt_w", txt_w_);
    ck.put(prefix + "txt_b", txt_b_);
}

void FeatureExtractor::load(const Checkpoint& ck, const std::string& prefix) {
    const auto meta = ck.get(prefix + "meta");
    const int n_layers = static_cast<int>(meta.data()[0]);
    cfg_.embed_dim = static_cast<int>(meta.data()[1]);
    cfg_.vocab_size = static_cast<int>(meta.data()[2]);
    cfg_.d_text = static_cast<int>(meta.data()[3]);
    cfg_.kernel = static_cast<int>(meta.data()[4]);
    cfg_.stride = static_cast<int>(meta.data()[5]);
    cfg_.widths.clear();
    for (int i = 0; i < n_layers; ++i)
        cfg_.widths.push_back(static_cast<int>(meta.data()[6 + i]));
    conv_w_.resize(n_layers);
    conv_b_.resize(n_layers);
    for (int i = 0; i < n_layers; ++i) {
        conv_w_[i] = ck.get(prefix + "conv" + std::to_string(i) + "_w", true);
        conv_b_[i] = ck.get(prefix + "conv" + std::to_string(i) + "_b", true);
    }
    embed_w_ = ck.get(prefix + "embed_w", true);
    embed_b_ = ck.get(prefix + "embed_b", true);
    cls_w_ = ck.get(prefix + "cls_w", true);
    cls_b_ = ck.get(prefix + "cls_b", true);
    txt_table_ = ck.get(prefix + "txt_table", true);
    txt_w_ = ck.get(prefix + "txt_w", true);
    txt_b_ = ck.get(prefix + "txt_b", true);
}

// ---------------------------------------------------------------------------
// metric primitives
// ---------------------------------------------------------------------------

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity: lengths differ");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0)
        throw UsageError("cosine_similarity undefined for a zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double lpips(const Image& x, const Image& y, const FeatureExtractor& fx) {
    if (x.h != y.h || x.w != y.w) throw ShapeError("lpips: image sizes differ");
    NoGradGuard ng;
    const auto fa = fx.features(images_to_tensor({x}));
    const auto fb = fx.features(images_to_tensor({y}));
    const double wl = 1.0 / fx.num_layers();  // uniform channel weights
    double total = 0.0;
    for (size_t l = 0; l < fa.size(); ++l) {
        const int C = fa[l].dim(1), H = fa[l].dim(2), W = fa[l].dim(3);
        double layer = 0.0;
        for (int hwi = 0; hwi < H * W; ++hwi) {
            double pix = 0.0;
            for (int c = 0; c < C; ++c) {
                const double d = static_cast<double>(fa[l].data()[c * H * W + hwi]) -
                                 fb[l].data()[c * H * W + hwi];
                pix += (wl * d) * (wl * d);
            }
            layer += pix;
        }
        total += layer / (static_cast<double>(H) * W);
    }
    return total;
}

double style_difference(const Image& x, const Image& s, const FeatureExtractor& fx) {
    if (x.h != s.h || x.w != s.w) throw ShapeError("style_difference: image sizes differ");
    NoGradGuard ng;
    const auto fa = fx.features(images_to_tensor({x}));
    const auto fb = fx.features(images_to_tensor({s}));
    const double wl = 1.0 / fx.num_layers();  // uniform layer weights
    double total = 0.0;
    for (size_t l = 0; l < fa.size(); ++l) {
        const int C = fa[l].dim(1), H = fa[l].dim(2), W = fa[l].dim(3);
        const double norm = static_cast<double>(C) * H * W;
        // Frobenius norm of the Gram difference
        double fro = 0.0;
        for (int ci = 0; ci < C; ++ci)
            for (int cj = 0; cj < C; ++cj) {
                double ga = 0.0, gb = 0.0;
                const float* fai = fa[l].data().data() + static_cast<std::int64_t>(ci) * H * W;
                const float* faj = fa[l].data().data() + static_cast<std::int64_t>(cj) * H * W;
                const float* fbi = fb[l].data().data() + static_cast<std::int64_t>(ci) * H * W;
                const float* fbj = fb[l].data().data() + static_cast<std::int64_t>(cj) * H * W;
                for (int k = 0; k < H * W; ++k) {
                    ga += static_cast<double>(fai[k]) * faj[k];
                    gb += static_cast<double>(fbi[k]) * fbj[k];
                }
                const double d = ga / norm - gb / norm;
                fro += d * d;
            }
        total += wl * fro;
    }
    return total;
}

double clip_directional_similarity(const Image& img_in, const Image& img_out,
                                   const std::vector<int>& caption_orig,
                                   const std::vector<int>& caption_mod,
                                   const FeatureExtractor& fx) {
    NoGradGuard ng;
    const auto ein = fx.embed_image(images_to_tensor({img_in}));
    const auto eout = fx.embed_image(images_to_tensor({img_out}));
    if (caption_orig.size() != caption_mod.size())
        throw ShapeError("clip_directional_similarity: caption lengths differ");
    const int m = static_cast<int>(caption_orig.size());
    const auto torig = fx.embed_text(caption_orig, 1, m);
    const auto tmod = fx.embed_text(caption_mod, 1, m);
    std::vector<float> di(ein.numel()), dt(torig.numel());
    for (std::int64_t i = 0; i < ein.numel(); ++i) di[i] = eout.data()[i] - ein.data()[i];
    for (std::int64_t i = 0; i < torig.numel(); ++i) dt[i] = tmod.data()[i] - torig.data()[i];
    return cosine_similarity(di, dt);  // throws on zero direction vectors
}

double ips(std::int64_t n_iter, double dt_seconds) {
    if (dt_seconds <= 0.0) throw UsageError("ips: time interval must be positive");
    if (n_iter < 0) throw UsageError("ips: iteration count must be >= 0");
    return static_cast<double>(n_iter) / dt_seconds;
}

// ---------------------------------------------------------------------------
// corpus evaluation
// ---------------------------------------------------------------------------

void MetricReport::finalize() {
    best = MetricRow{};
    mean = MetricRow{};
    std_dev = MetricRow{};
    best.id = "best";
    mean.id = "mean";
    std_dev.id = "std";

    // aggregate per field over rows where that field evaluated (non-NaN)
    auto agg = [&](auto getter, bool higher_is_better, double MetricRow::*field) {
        std::vector<double> vals;
        for (const auto& r : rows) {
            const double v = getter(r);
            if (std::isfinite(v)) vals.push_back(v);
        }
        if (vals.empty()) {
            best.*field = mean.*field = std_dev.*field =
                std::numeric_limits<double>::quiet_NaN();
            return;
        }
        double b = vals[0], m = 0.0;
        for (double v : vals) {
            m += v;
            b = higher_is_better ? std::max(b, v) : std::min(b, v);
        }
        m /= static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - m) * (v - m);
        var /= static_cast<double>(vals.size());
        best.*field = b;
        mean.*field = m;
        std_dev.*field = std::sqrt(var);
    };
    agg([](const MetricRow& r) { return r.cs; }, true, &MetricRow::cs);
    agg([](const MetricRow& r) { return r.clip_ds; }, true, &MetricRow::clip_ds);
    agg([](const MetricRow& r) { return r.lpips; }, false, &MetricRow::lpips);
    agg([](const MetricRow& r) { return r.sd_is; }, false, &MetricRow::sd_is);
    agg([](const MetricRow& r) { return r.sd_os; }, false, &MetricRow::sd_os);
    agg([](const MetricRow& r) { return r.ips; }, true, &MetricRow::ips);
}

namespace {

std::string fmt_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string row_csv(const MetricRow& r) {
    return r.id + "," + fmt_metric(r.cs) + "," + fmt_metric(r.clip_ds) + "," +
           fmt_metric(r.lpips) + "," + fmt_metric(r.sd_is) + "," + fmt_metric(r.sd_os) + "," +
           fmt_metric(r.ips);
}

}  // namespace

std::string MetricReport::to_csv() const {
    std::string out = "id,cs,clip_ds,lpips,sd_is,sd_os,ips\n";
    for (const auto& r : rows) out += row_csv(r) + "\n";
    out += row_csv(best) + "\n";
    out += row_csv(mean) + "\n";
    out += row_csv(std_dev) + "\n";
    return out;
}

void MetricReport::save_csv(const std::string& path) const {
    const std::string text = to_csv();
    write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

MetricReport evaluate_corpus(const std::vector<CorpusPair>& pairs, const FeatureExtractor& fx) {
    if (pairs.empty()) throw UsageError("evaluate_corpus: empty corpus");
    const double nan = std::numeric_limits<double>::quiet_NaN();
    MetricReport report;
    for (const auto& p : pairs) {
        MetricRow row;
        row.id = p.id;
        // failures are recorded per field (NaN) and noted on the row; the
        // aggregates run over whatever evaluated successfully
        auto guard = [&row](const char* name, double& slot, auto&& fn) {
            try {
                slot = fn();
            } catch (const std::exception& e) {
                slot = std::numeric_limits<double>::quiet_NaN();
                if (!row.error.empty()) row.error += "; ";
                row.error += std::string(name) + ": " + e.what();
            }
        };
        row.cs = row.clip_ds = row.lpips = row.sd_is = row.sd_os = row.ips = nan;
        NoGradGuard ng;
        guard("cs", row.cs, [&] {
            const auto ein = fx.embed_image(images_to_tensor({p.input}));
            const auto eout = fx.embed_image(images_to_tensor({p.output}));
            return cosine_similarity(ein.data(), eout.data());
        });
        guard("clip_ds", row.clip_ds, [&] {
            return clip_directional_similarity(p.input, p.output, p.caption_orig, p.caption_mod,
                                               fx);
        });
        guard("lpips", row.lpips, [&] { return lpips(p.input, p.output, fx); });
        guard("sd_is", row.sd_is, [&] { return style_difference(p.input, p.style_ref, fx); });
        guard("sd_os", row.sd_os, [&] { return style_difference(p.output, p.style_ref, fx); });
        guard("ips", row.ips, [&] { return p.ips_value; });
        report.rows.push_back(std::move(row));
    }
    report.finalize();
    return report;
}

}  // namespace s2rd
