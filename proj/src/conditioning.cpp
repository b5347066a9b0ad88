#include "s2rd/conditioning.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace s2rd {

Vocabulary::Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

Vocabulary Vocabulary::base() {
    Vocabulary v;
    // words used by the procedural caption generator and the sweep prompts
    for (const char* t :
         {"a",     "photo", "of",    "road",   "scene", "driving", "track", "on",
          "style", "sim",   "real",  "clean",  "noisy", "figure",  "eight", "toy",
          "lane",  "the",   "world", "camera", "frame", "view",    "in",    "markings"})
        v.add(t);
    return v;
}

int Vocabulary::add(const std::string& token) {
    if (ids_.count(token)) throw UsageError("vocabulary already contains '" + token + "'");
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_[token] = id;
    return id;
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw UsageError("token id out of range");
    return tokens_[id];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write vocabulary '" + path + "'");
    for (int i = 0; i < size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open vocabulary '" + path + "'");
    Vocabulary v;
    v.tokens_.clear();
    v.ids_.clear();
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw LoadError("malformed vocabulary line: " + line);
        const std::string token = line.substr(0, tab);
        const int id = std::stoi(line.substr(tab + 1));
        if (id != static_cast<int>(v.tokens_.size()))
            throw LoadError("vocabulary ids must be dense, got " + line);
        v.tokens_.push_back(token);
        v.ids_[token] = id;
    }
    if (v.size() < 4) throw LoadError("vocabulary missing reserved tokens");
    return v;
}

bool is_trigger_token(const std::string& word) {
    if (word.size() < 3 || word.front() != '<' || word.back() != '>') return false;
    for (size_t i = 1; i + 1 < word.size(); ++i) {
        const char c = word[i];
        if (!(std::islower(static_cast<unsigned char>(c)) ||
              std::isdigit(static_cast<unsigned char>(c)) || c == '_'))
            return false;
    }
    return true;
}

std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt, int m_txt) {
    std::vector<int> ids;
    ids.push_back(Vocabulary::kBos);
    std::istringstream in(prompt);
    std::string word;
    bool truncated = false;
    while (in >> word) {
        std::transform(word.begin(), word.end(), word.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (static_cast<int>(ids.size()) >= m_txt - 1) {
            truncated = true;
            break;
        }
        ids.push_back(vocab.id(word));
    }
    ids.push_back(Vocabulary::kEos);
    while (static_cast<int>(ids.size()) < m_txt) ids.push_back(Vocabulary::kPad);
    if (truncated)
        std::fprintf(stderr, "[tokenize] prompt truncated to %d tokens: \"%s\"\n", m_txt,
                     prompt.c_str());
    return ids;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
    std::string out;
    for (int id : ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kEos || id == Vocabulary::kPad) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

// ---------------------------------------------------------------------------
// TransformerBlock
// ---------------------------------------------------------------------------

namespace {

Tensor affine_ones(int n) {
    auto t = Tensor::full({n}, 1.0f);
    t.set_requires_grad(true);
    return t;
}

Tensor affine_zeros(int n) {
    auto t = Tensor::zeros({n});
    t.set_requires_grad(true);
    return t;
}

Tensor init_weight(int out, int in, Rng& rng) {
    // scaled-normal init, fan-in
    const float s = 1.0f / std::sqrt(static_cast<float>(in));
    return Tensor::randn({out, in}, rng, s, true);
}

}  // namespace

void TransformerBlock::init(int d, Rng& rng) {
    ln1_g = affine_ones(d);
    ln1_b = affine_zeros(d);
    wq = init_weight(d, d, rng);
    wk = init_weight(d, d, rng);
    wv = init_weight(d, d, rng);
    wo_w = init_weight(d, d, rng);
    wo_b = affine_zeros(d);
    ln2_g = affine_ones(d);
    ln2_b = affine_zeros(d);
    fc1_w = init_weight(2 * d, d, rng);
    fc1_b = affine_zeros(2 * d);
    fc2_w = init_weight(d, 2 * d, rng);
    fc2_b = affine_zeros(d);
}

Tensor TransformerBlock::forward(const Tensor& x) const {
    const int d = x.dim(2);
    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
    auto h = layer_norm(x, ln1_g, ln1_b);
    auto q = linear(h, wq);
    auto k = linear(h, wk);
    auto v = linear(h, wv);
    auto attn = softmax(scale(bmm(q, k, /*tb=*/true), inv_sqrt_d), 2);
    auto ctx = linear(bmm(attn, v), wo_w, wo_b);
    auto x1 = add(x, ctx);
    auto m = layer_norm(x1, ln2_g, ln2_b);
    auto mlp = linear(silu(linear(m, fc1_w, fc1_b)), fc2_w, fc2_b);
    return add(x1, mlp);
}

void TransformerBlock::collect(std::vector<Tensor>& out) const {
    for (const Tensor& t : {ln1_g, ln1_b, wq, wk, wv, wo_w, wo_b, ln2_g, ln2_b, fc1_w, fc1_b,
                            fc2_w, fc2_b})
        out.push_back(t);
}

void TransformerBlock::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "ln1_g", ln1_g);
    ck.put(prefix + "ln1_b", ln1_b);
    ck.put(prefix + "wq", wq);
    ck.put(prefix + "wk", wk);
    ck.put(prefix + "wv", wv);
    ck.put(prefix + "wo_w", wo_w);
    ck.put(prefix + "wo_b", wo_b);
    ck.put(prefix + "ln2_g", ln2_g);
    ck.put(prefix + "ln2_b", ln2_b);
    ck.put(prefix + "fc1_w", fc1_w);
    ck.put(prefix + "fc1_b", fc1_b);
    ck.put(prefix + "fc2_w", fc2_w);
    ck.put(prefix + "fc2_b", fc2_b);
}

void TransformerBlock::load(const Checkpoint& ck, const std::string& prefix) {
    ln1_g = ck.get(prefix + "ln1_g", true);
    ln1_b = ck.get(prefix + "ln1_b", true);
    wq = ck.get(prefix + "wq", true);
    wk = ck.get(prefix + "wk", true);
    wv = ck.get(prefix + "wv", true);
    wo_w = ck.get(prefix + "wo_w", true);
    wo_b = ck.get(prefix + "wo_b", true);
    ln2_g = ck.get(prefix + "ln2_g", true);
    ln2_b = ck.get(prefix + "ln2_b", true);
    fc1_w = ck.get(prefix + "fc1_w", true);
    fc1_b = ck.get(prefix + "fc1_b", true);
    fc2_w = ck.get(prefix + "fc2_w", true);
    fc2_b = ck.get(prefix + "fc2_b", true);
}

// ---------------------------------------------------------------------------
// TextEncoder
// ---------------------------------------------------------------------------

void TextEncoder::init(const ConditioningConfig& cfg, int vocab_size, Rng& rng) {
    cfg_ = cfg;
    token_table_ = Tensor::randn({vocab_size, cfg.d_cond}, rng, 0.02f, true);
    pos_ = Tensor::randn({cfg.m_txt, cfg.d_cond}, rng, 0.02f, true);
    blocks_.resize(cfg.n_blocks);
    for (auto& b : blocks_) b.init(cfg.d_cond, rng);
    ln_f_g = affine_ones(cfg.d_cond);
    ln_f_b = affine_zeros(cfg.d_cond);
}

Tensor TextEncoder::encode(const std::vector<int>& ids, int batch) const {
    if (static_cast<int>(ids.size()) != batch * cfg_.m_txt)
        throw ShapeError("encode_text: ids length " + std::to_string(ids.size()) +
                         " != batch*m_txt");
    auto x = embedding(token_table_, ids, {batch, cfg_.m_txt});
    x = add_bcast0(x, pos_);
    for (const auto& b : blocks_) x = b.forward(x);
    return layer_norm(x, ln_f_g, ln_f_b);
}

void TextEncoder::grow_vocab_row(Rng& rng) {
    const int v = token_table_.dim(0), d = token_table_.dim(1);
    std::vector<float> data(static_cast<size_t>(v + 1) * d);
    std::copy(token_table_.data().begin(), token_table_.data().end(), data.begin());
    // new row = mean of existing rows + small seeded noise
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < v; ++i) acc += token_table_.data()[static_cast<size_t>(i) * d + j];
        data[static_cast<size_t>(v) * d + j] =
            static_cast<float>(acc / v) + 0.01f * rng.normal_f();
    }
    token_table_ = Tensor::from_data({v + 1, d}, std::move(data), true);
}

void TextEncoder::collect_body(std::vector<Tensor>& out) const {
    out.push_back(pos_);
    for (const auto& b : blocks_) b.collect(out);
    out.push_back(ln_f_g);
    out.push_back(ln_f_b);
}

void TextEncoder::collect(std::vector<Tensor>& out) const {
    out.push_back(token_table_);
    collect_body(out);
}

void TextEncoder::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "meta",
           Tensor::from_data({4}, {static_cast<float>(cfg_.d_cond), static_cast<float>(cfg_.m_txt),
                                   static_cast<float>(cfg_.n_blocks),
                                   static_cast<float>(token_table_.dim(0))}));
    ck.put(prefix + "token_table", token_table_);
    ck.put(prefix + "pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].save(ck, prefix + "block" + std::to_string(i) + ".");
    ck.put(prefix + "ln_f_g", ln_f_g);
    ck.put(prefix + "ln_f_b", ln_f_b);
}

void TextEncoder::load(const Checkpoint& ck, const std::string& prefix) {
    const auto meta = ck.get(prefix + "meta");
    cfg_.d_cond = static_cast<int>(meta.data()[0]);
    cfg_.m_txt = static_cast<int>(meta.data()[1]);
    cfg_.n_blocks = static_cast<int>(meta.data()[2]);
    token_table_ = ck.get(prefix + "token_table", true);
    pos_ = ck.get(prefix + "pos", true);
    blocks_.resize(cfg_.n_blocks);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].load(ck, prefix + "block" + std::to_string(i) + ".");
    ln_f_g = ck.get(prefix + "ln_f_g", true);
    ln_f_b = ck.get(prefix + "ln_f_b", true);
}

// ---------------------------------------------------------------------------
// ImagePromptEncoder
// ---------------------------------------------------------------------------

void ImagePromptEncoder::init(const ConditioningConfig& cfg, Rng& rng) {
    cfg_ = cfg;
    const int pixels = cfg.patch * cfg.patch * 3;
    proj_w = init_weight(cfg.d_cond, pixels, rng);
    proj_b = affine_zeros(cfg.d_cond);
    pos_ = Tensor::randn({patch_count(), cfg.d_cond}, rng, 0.02f, true);
    blocks_.resize(cfg.n_blocks);
    for (auto& b : blocks_) b.init(cfg.d_cond, rng);
    ln_f_g = affine_ones(cfg.d_cond);
    ln_f_b = affine_zeros(cfg.d_cond);
}

int ImagePromptEncoder::patch_count() const {
    const int g = cfg_.prompt_size / cfg_.patch;
    return g * g;
}

Tensor ImagePromptEncoder::encode(const Tensor& imgs) const {
    if (imgs.rank() != 4 || imgs.dim(1) != 3 || imgs.dim(2) != cfg_.prompt_size ||
        imgs.dim(3) != cfg_.prompt_size)
        throw ShapeError("encode_image_prompt expects [B,3," + std::to_string(cfg_.prompt_size) +
                         "," + std::to_string(cfg_.prompt_size) + "], got " +
                         shape_str(imgs.shape()));
    auto x = linear(extract_patches(imgs, cfg_.patch), proj_w, proj_b);
    x = add_bcast0(x, pos_);
    for (const auto& b : blocks_) x = b.forward(x);
    return layer_norm(x, ln_f_g, ln_f_b);
}

void ImagePromptEncoder::collect(std::vector<Tensor>& out) const {
    out.push_back(proj_w);
    out.push_back(proj_b);
    out.push_back(pos_);
    for (const auto& b : blocks_) b.collect(out);
    out.push_back(ln_f_g);
    out.push_back(ln_f_b);
}

void ImagePromptEncoder::save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + "meta",
           Tensor::from_data({4}, {static_cast<float>(cfg_.d_cond),
                                   static_cast<float>(cfg_.prompt_size),
                                   static_cast<float>(cfg_.patch),
                                   static_cast<float>(cfg_.n_blocks)}));
    ck.put(prefix + "proj_w", proj_w);
    ck.put(prefix + "proj_b", proj_b);
    ck.put(prefix + "pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].save(ck, prefix + "block" + std::to_string(i) + ".");
    ck.put(prefix + "ln_f_g", ln_f_g);
    ck.put(prefix + "ln_f_b", ln_f_b);
}

void ImagePromptEncoder::load(const Checkpoint& ck, const std::string& prefix) {
    const auto meta = ck.get(prefix + "meta");
    cfg_.d_cond = static_cast<int>(meta.data()[0]);
    cfg_.prompt_size = static_cast<int>(meta.data()[1]);
    cfg_.patch = static_cast<int>(meta.data()[2]);
    cfg_.n_blocks = static_cast<int>(meta.data()[3]);
    proj_w = ck.get(prefix + "proj_w", true);
    proj_b = ck.get(prefix + "proj_b", true);
    pos_ = ck.get(prefix + "pos", true);
    blocks_.resize(cfg_.n_blocks);
    for (size_t i = 0; i < blocks_.size(); ++i)
        blocks_[i].load(ck, prefix + "block" + std::to_string(i) + ".");
    ln_f_g = ck.get(prefix + "ln_f_g", true);
    ln_f_b = ck.get(prefix + "ln_f_b", true);
}

int add_trigger_token(Vocabulary& vocab, TextEncoder& enc, const std::string& name, Rng& rng) {
    if (!is_trigger_token(name))
        throw UsageError("trigger token must match <[a-z0-9_]+>, got '" + name + "'");
    if (vocab.contains(name)) throw UsageError("trigger token '" + name + "' already registered");
    const int id = vocab.add(name);
    enc.grow_vocab_row(rng);
    if (enc.token_table().dim(0) != vocab.size())
        throw TrainingError("vocabulary and embedding table out of sync");
    return id;
}

}  // namespace s2rd
