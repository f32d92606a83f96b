#pragma once

// Recipe auto-encoder: encoder E (recipe -> z), set predictor C (z -> ingredient
// set with EOS cardinality) and instruction decoder D (z, ingredients -> steps).
//
// The tape-level functions below build differentiable graphs for training and
// gradient-based critiquing; the plain functions at the end are inference paths.

#include <cstdint>
#include <deque>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "recipecrit/autodiff.hpp"
#include "recipecrit/corpus.hpp"
#include "recipecrit/text.hpp"

namespace recipecrit {

inline constexpr double kProbClamp = 1e-7;

struct ModelConfig {
    int hidden_dim = 64;
    int num_layers = 2;
    int num_heads = 2;
    int ffn_dim = 128;
    int latent_dim = 64;
    int max_sentence_tokens = 32;
    int max_sentences = kMaxRecipeItems;
    int max_decode_tokens = 256;
    int set_decoder_steps = kMaxRecipeItems;  // upper bound on the predicted set size
    int memory_slots = 4;                     // predictor cross-attention slots derived from z
    double dropout = 0.2;
    int ingredient_vocab_size = 0;
    int token_vocab_size = 0;
    double eos_loss_weight = 1.0;
    // One sentence encoder for title, ingredient lines and steps, or one each.
    bool shared_sentence_encoder = true;

    // Throws std::invalid_argument.
    void validate() const;
    [[nodiscard]] std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    static ModelConfig paper_scale(int ingredient_vocab_size, int token_vocab_size);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Token ids for one (possibly noised) recipe.
struct EncoderInput {
    std::vector<int> title;
    std::vector<std::vector<int>> ingredients;
    std::vector<std::vector<int>> instructions;
    std::vector<bool> ingredient_masked;
    std::vector<bool> instruction_masked;
};

EncoderInput make_encoder_input(const NoisedRecipe& r, const TokenVocab& vocab);
EncoderInput make_encoder_input(const Recipe& r, const TokenVocab& vocab);

// BOS s1 SEP s2 ... sn for the decoder input; the target is the same shifted by
// one with EOS appended.
struct InstructionSequence {
    std::vector<int> input;
    std::vector<int> target;
};
InstructionSequence make_instruction_sequence(const std::vector<std::string>& steps, const TokenVocab& vocab,
                                              int max_tokens);
// Splits generated ids on SEP into sentences.
std::vector<std::string> split_steps(const std::vector<int>& ids, const TokenVocab& vocab);

// Desired ingredient vector ỹ (length |I|) and the step at which EOS should fire.
struct IngredientTarget {
    std::vector<double> y;
    int eos_step = 1;  // 1-based

    static IngredientTarget from_set(const std::vector<int>& ids, int vocab_size);
    [[nodiscard]] std::vector<int> positives() const;
};

struct IngredientPrediction {
    std::vector<double> probabilities;      // sigmoid of max-pooled logits, length |I|
    std::vector<double> eos_probabilities;  // one per set-decoder step
    Matrix step_logits;                     // steps x (|I| + 1)
    std::vector<int> top_set;               // sorted ids
    int cardinality = 0;

    // First 1-based step whose EOS probability exceeds 0.5, else the step count.
    static int cardinality_from_eos(const std::vector<double>& eos);
};

// Which parameter groups receive gradients on a tape.
struct Trainable {
    bool encoder = false;
    bool predictor = false;
    bool decoder = false;
};

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t init_seed);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    std::deque<Parameter>& parameters() { return params_; }
    [[nodiscard]] const std::deque<Parameter>& parameters() const { return params_; }
    Parameter& parameter(const std::string& name);
    // "enc.", "pred." or "dec." prefixed parameters.
    std::vector<Parameter*> group(const std::string& prefix);
    void zero_grad();

    // Graph construction. `dropout` is the rate to apply (0 at inference); rng
    // may be null when dropout is 0.
    struct Pass {
        Tape& tape;
        Trainable trainable;
        double dropout = 0.0;
        std::mt19937_64* rng = nullptr;
        std::unordered_map<const Parameter*, Var> bound;

        Var bind(Parameter& p, bool group_trainable);
        Var drop(Var x);
    };

    // B x latent_dim.
    Var encode(Pass& pass, std::span<const EncoderInput> batch);

    struct SetLogits {
        Var pooled;  // B x |I|
        Var eos;     // (B * steps) x 1
        Var steps;   // (B * steps) x (|I| + 1)
    };
    SetLogits predict(Pass& pass, Var z);
    // Mean over the batch of sum_i BCE(ŷ_i, y_i) + λ * mean_{s <= k} BCE(eos_s, [s == k]).
    Var ingredient_loss(const SetLogits& out, std::span<const IngredientTarget> targets);

    // Token logits for teacher forcing, (sum of sequence lengths) x |V|.
    Var decoder_logits(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                       std::span<const std::vector<int>> inputs);
    // Mean token cross-entropy.
    Var instruction_loss(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                         std::span<const InstructionSequence> sequences);

    // Inference.
    Matrix encode(const EncoderInput& input);
    IngredientPrediction predict_ingredients(const Matrix& z);
    double ingredient_loss_value(const Matrix& z, const IngredientTarget& target);
    // Exact gradient of the ingredient loss with respect to z (1 x latent_dim).
    Matrix grad_ingredient_loss_wrt_z(const Matrix& z, const IngredientTarget& target, double* loss = nullptr);
    // Greedy decoding with cached keys and values; stops at EOS or after max_len
    // tokens (0 means the configured limit). When logits is given, the logits of
    // every step are appended to it as rows.
    std::vector<int> greedy_decode(const Matrix& z, const std::vector<int>& ingredient_set, int max_len = 0,
                                   Matrix* logits = nullptr);

private:
    struct Attn {
        Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    };
    struct Layer {
        Parameter *ln1_g, *ln1_b;
        Attn self;
        bool cross = false;
        Parameter *lnc_g = nullptr, *lnc_b = nullptr;
        Attn xattn{};
        Parameter *ln2_g, *ln2_b, *w1, *b1, *w2, *b2;
    };
    struct Stack {
        std::string group;
        std::vector<Layer> layers;
        Parameter *lnf_g, *lnf_b;
    };

    Parameter& add(const std::string& name, int rows, int cols, double init_std, std::mt19937_64& rng,
                   double fill = 0.0);
    Attn make_attn(const std::string& prefix, std::mt19937_64& rng);
    Stack make_stack(const std::string& group, const std::string& prefix, bool cross, std::mt19937_64& rng);

    [[nodiscard]] bool group_trainable(const Pass& pass, const std::string& group) const;
    Var run_stack(Pass& pass, const Stack& s, Var x, const std::vector<kernels::AttentionSegment>& self_segs,
                  bool causal, Var memory, const std::vector<kernels::AttentionSegment>& cross_segs);
    Var attend(Pass& pass, const Attn& a, const std::string& group, Var xq, Var xkv,
               const std::vector<kernels::AttentionSegment>& segs, bool causal);
    Var encode_sentences(Pass& pass, int which, const std::vector<const std::vector<int>*>& sentences);
    Var decoder_memory(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                       std::vector<kernels::AttentionSegment>& cross_segs, int& total_rows);

    ModelConfig cfg_;
    std::deque<Parameter> params_;
    std::unordered_map<std::string, Parameter*> by_name_;

    // encoder
    std::vector<Parameter*> tok_emb_, tok_pos_;  // one per sentence encoder
    std::vector<Stack> sentence_;
    Parameter* mask_sentence_;
    Parameter* step_pos_;
    Stack ing_set_, ins_set_;
    Parameter *latent_w_, *latent_b_;
    // predictor
    Parameter *mem_w_, *mem_b_, *queries_;
    Stack set_decoder_;
    Parameter *set_out_w_, *set_out_b_;
    // decoder
    Parameter *dec_tok_emb_, *dec_pos_, *ing_emb_, *zproj_w_, *zproj_b_;
    Stack decoder_;
    Parameter *dec_out_w_, *dec_out_b_;
};

// Sets of ids ordered for the decoder memory.
std::vector<int> sorted_ids(const std::set<int>& s);

}  // namespace recipecrit
