#ifndef S2RD_CONDITIONING_HPP
#define S2RD_CONDITIONING_HPP

#include <string>
#include <unordered_map>
#include <vector>

#include "s2rd/checkpoint.hpp"
#include "s2rd/rng.hpp"
#include "s2rd/tensor.hpp"

namespace s2rd {

// Word-level vocabulary with reserved ids and dynamically appended trigger
// tokens of the form <sim_scale_odd>. Ids are dense and stable once assigned.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Vocabulary();

    // Vocabulary covering the artifact's procedural prompt corpus.
    static Vocabulary base();

    int add(const std::string& token);
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    int id(const std::string& token) const;           // UNK for unknown words
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(tokens_.size()); }

    void save(const std::string& path) const;  // UTF-8 lines "token<TAB>id"
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

bool is_trigger_token(const std::string& word);

// Whitespace word tokenizer, lowercased, padded/truncated to m_txt with
// BOS/EOS framing. Trigger tokens map to exactly one id.
std::vector<int> tokenize(const Vocabulary& vocab, const std::string& prompt, int m_txt);
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

struct ConditioningConfig {
    int d_cond = 64;   // d_tau, shared by both encoders
    int m_txt = 16;    // text sequence length
    int n_blocks = 2;  // transformer blocks per encoder
    int prompt_size = 64;  // image prompt resolution
    int patch = 8;         // image prompt patch size
};

// Pre-LN single-head transformer block over [B, M, d] rows.
struct TransformerBlock {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo_w, wo_b;
    Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

    void init(int d, Rng& rng);
    Tensor forward(const Tensor& x) const;
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);
};

// Learned token + positional embedding followed by a small self-attention
// stack; produces the M_txt x d_tau condition rows.
class TextEncoder {
public:
    void init(const ConditioningConfig& cfg, int vocab_size, Rng& rng);

    // ids laid out [batch * m_txt]; returns [B, M, d].
    Tensor encode(const std::vector<int>& ids, int batch) const;

    // Appends one embedding row initialized from the mean of existing rows
    // plus small seeded noise; returns nothing, table grows in place.
    void grow_vocab_row(Rng& rng);

    Tensor& token_table() { return token_table_; }
    const Tensor& token_table() const { return token_table_; }

    // Everything except the token table (the fine-tune freeze boundary).
    void collect_body(std::vector<Tensor>& out) const;
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

    const ConditioningConfig& config() const { return cfg_; }

private:
    ConditioningConfig cfg_;
    Tensor token_table_;  // [V, d]
    Tensor pos_;          // [M, d]
    std::vector<TransformerBlock> blocks_;
    Tensor ln_f_g, ln_f_b;
};

// Non-overlapping patch embedding + transformer stack for image prompts.
class ImagePromptEncoder {
public:
    void init(const ConditioningConfig& cfg, Rng& rng);

    // imgs [B,3,H,W] at the configured prompt resolution; returns [B, P, d].
    Tensor encode(const Tensor& imgs) const;

    int patch_count() const;
    void collect(std::vector<Tensor>& out) const;
    void save(Checkpoint& ck, const std::string& prefix) const;
    void load(const Checkpoint& ck, const std::string& prefix);

private:
    ConditioningConfig cfg_;
    Tensor proj_w, proj_b;  // patch pixels -> d
    Tensor pos_;            // [P, d]
    std::vector<TransformerBlock> blocks_;
    Tensor ln_f_g, ln_f_b;
};

// Registers a new trigger token: validates the <[a-z0-9_]+> form, extends the
// vocabulary and the text encoder's table. Returns the new id.
int add_trigger_token(Vocabulary& vocab, TextEncoder& enc, const std::string& name, Rng& rng);

}  // namespace s2rd

#endif
