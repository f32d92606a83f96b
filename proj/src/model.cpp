#include "recipecrit/model.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace recipecrit {

using kernels::AttentionSegment;
using nlohmann::json;

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("model config: ") + what);
    };
    need(hidden_dim > 0 && num_heads > 0 && hidden_dim % num_heads == 0, "hidden_dim must be divisible by num_heads");
    need(num_layers >= 1, "num_layers must be positive");
    need(ffn_dim > 0, "ffn_dim must be positive");
    need(latent_dim > 0, "latent_dim must be positive");
    need(max_sentence_tokens > 0 && max_sentences > 0 && max_decode_tokens > 1, "length limits must be positive");
    need(set_decoder_steps >= 1 && memory_slots >= 1, "set decoder sizes must be positive");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    need(ingredient_vocab_size > 0, "ingredient_vocab_size must be positive");
    need(token_vocab_size > TokenVocab::kNumSpecials, "token_vocab_size too small");
    need(eos_loss_weight >= 0.0, "eos_loss_weight must be nonnegative");
}

std::string ModelConfig::to_json() const {
    json j{{"hidden_dim", hidden_dim},
           {"num_layers", num_layers},
           {"num_heads", num_heads},
           {"ffn_dim", ffn_dim},
           {"latent_dim", latent_dim},
           {"max_sentence_tokens", max_sentence_tokens},
           {"max_sentences", max_sentences},
           {"max_decode_tokens", max_decode_tokens},
           {"set_decoder_steps", set_decoder_steps},
           {"memory_slots", memory_slots},
           {"dropout", dropout},
           {"ingredient_vocab_size", ingredient_vocab_size},
           {"token_vocab_size", token_vocab_size},
           {"eos_loss_weight", eos_loss_weight},
           {"shared_sentence_encoder", shared_sentence_encoder}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.num_layers = j.value("num_layers", c.num_layers);
        c.num_heads = j.value("num_heads", c.num_heads);
        c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.max_sentence_tokens = j.value("max_sentence_tokens", c.max_sentence_tokens);
        c.max_sentences = j.value("max_sentences", c.max_sentences);
        c.max_decode_tokens = j.value("max_decode_tokens", c.max_decode_tokens);
        c.set_decoder_steps = j.value("set_decoder_steps", c.set_decoder_steps);
        c.memory_slots = j.value("memory_slots", c.memory_slots);
        c.dropout = j.value("dropout", c.dropout);
        c.ingredient_vocab_size = j.value("ingredient_vocab_size", c.ingredient_vocab_size);
        c.token_vocab_size = j.value("token_vocab_size", c.token_vocab_size);
        c.eos_loss_weight = j.value("eos_loss_weight", c.eos_loss_weight);
        c.shared_sentence_encoder = j.value("shared_sentence_encoder", c.shared_sentence_encoder);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("model config: ") + e.what());
    }
    return c;
}

ModelConfig ModelConfig::paper_scale(int ingredient_vocab_size, int token_vocab_size) {
    ModelConfig c;
    c.hidden_dim = 512;
    c.num_layers = 4;
    c.num_heads = 4;
    c.ffn_dim = 2048;
    c.latent_dim = 512;
    c.ingredient_vocab_size = ingredient_vocab_size;
    c.token_vocab_size = token_vocab_size;
    return c;
}

// ---------------------------------------------------------------- inputs

namespace {

std::vector<bool> mask_flags(std::size_t n, const std::set<int>& masked) {
    std::vector<bool> out(n, false);
    for (int p : masked)
        if (p >= 0 && static_cast<std::size_t>(p) < n) out[p] = true;
    return out;
}

}  // namespace

EncoderInput make_encoder_input(const NoisedRecipe& r, const TokenVocab& vocab) {
    EncoderInput in;
    in.title = vocab.encode(r.base.title);
    for (const auto& l : r.base.ingredient_lines) in.ingredients.push_back(vocab.encode(l));
    for (const auto& s : r.base.instructions) in.instructions.push_back(vocab.encode(s));
    in.ingredient_masked = mask_flags(in.ingredients.size(), r.masked_ingredient_positions);
    in.instruction_masked = mask_flags(in.instructions.size(), r.masked_instruction_positions);
    return in;
}

EncoderInput make_encoder_input(const Recipe& r, const TokenVocab& vocab) {
    return make_encoder_input(unmasked(r), vocab);
}

InstructionSequence make_instruction_sequence(const std::vector<std::string>& steps, const TokenVocab& vocab,
                                              int max_tokens) {
    if (steps.empty()) throw std::invalid_argument("instruction sequence needs at least one step");
    std::vector<int> body;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i) body.push_back(TokenVocab::kSep);
        const auto ids = vocab.encode(steps[i]);
        body.insert(body.end(), ids.begin(), ids.end());
    }
    InstructionSequence s;
    s.input.push_back(TokenVocab::kBos);
    s.input.insert(s.input.end(), body.begin(), body.end());
    s.target = body;
    s.target.push_back(TokenVocab::kEos);
    if (static_cast<int>(s.input.size()) > max_tokens) {
        s.input.resize(max_tokens);
        s.target.resize(max_tokens);
    }
    return s;
}

std::vector<std::string> split_steps(const std::vector<int>& ids, const TokenVocab& vocab) {
    std::vector<std::string> out;
    std::vector<int> cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(vocab.decode(cur));
        cur.clear();
    };
    for (int id : ids) {
        if (id == TokenVocab::kEos) break;
        if (id == TokenVocab::kSep) {
            flush();
        } else if (id != TokenVocab::kBos && id != TokenVocab::kPad) {
            cur.push_back(id);
        }
    }
    flush();
    return out;
}

IngredientTarget IngredientTarget::from_set(const std::vector<int>& ids, int vocab_size) {
    IngredientTarget t;
    t.y.assign(vocab_size, 0.0);
    for (int id : ids) {
        if (id < 0 || id >= vocab_size) throw std::invalid_argument("ingredient id out of range");
        t.y[id] = 1.0;
    }
    t.eos_step = std::max(1, static_cast<int>(t.positives().size()));
    return t;
}

std::vector<int> IngredientTarget::positives() const {
    std::vector<int> out;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] > 0.5) out.push_back(static_cast<int>(i));
    return out;
}

int IngredientPrediction::cardinality_from_eos(const std::vector<double>& eos) {
    for (std::size_t s = 0; s < eos.size(); ++s)
        if (eos[s] > 0.5) return static_cast<int>(s) + 1;
    return static_cast<int>(eos.size());
}

std::vector<int> sorted_ids(const std::set<int>& s) { return {s.begin(), s.end()}; }

// ---------------------------------------------------------------- parameters

Parameter& Model::add(const std::string& name, int rows, int cols, double init_std, std::mt19937_64& rng,
                      double fill) {
    Parameter p;
    p.name = name;
    p.value = Matrix(rows, cols, fill);
    if (init_std > 0.0) {
        std::normal_distribution<double> nd(0.0, init_std);
        for (double& v : p.value.data) v = nd(rng);
    }
    params_.push_back(std::move(p));
    Parameter& ref = params_.back();
    if (!by_name_.emplace(name, &ref).second) throw std::logic_error("duplicate parameter " + name);
    return ref;
}

Model::Attn Model::make_attn(const std::string& prefix, std::mt19937_64& rng) {
    const int d = cfg_.hidden_dim;
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    Attn a{};
    a.wq = &add(prefix + ".wq", d, d, s, rng);
    a.bq = &add(prefix + ".bq", 1, d, 0, rng);
    a.wk = &add(prefix + ".wk", d, d, s, rng);
    a.bk = &add(prefix + ".bk", 1, d, 0, rng);
    a.wv = &add(prefix + ".wv", d, d, s, rng);
    a.bv = &add(prefix + ".bv", 1, d, 0, rng);
    a.wo = &add(prefix + ".wo", d, d, s / std::sqrt(2.0 * cfg_.num_layers), rng);
    a.bo = &add(prefix + ".bo", 1, d, 0, rng);
    return a;
}

Model::Stack Model::make_stack(const std::string& group, const std::string& prefix, bool cross, std::mt19937_64& rng) {
    const int d = cfg_.hidden_dim, f = cfg_.ffn_dim;
    Stack st;
    st.group = group;
    for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::string p = prefix + ".l" + std::to_string(l);
        Layer L{};
        L.ln1_g = &add(p + ".ln1.g", 1, d, 0, rng, 1.0);
        L.ln1_b = &add(p + ".ln1.b", 1, d, 0, rng);
        L.self = make_attn(p + ".self", rng);
        L.cross = cross;
        if (cross) {
            L.lnc_g = &add(p + ".lnc.g", 1, d, 0, rng, 1.0);
            L.lnc_b = &add(p + ".lnc.b", 1, d, 0, rng);
            L.xattn = make_attn(p + ".cross", rng);
        }
        L.ln2_g = &add(p + ".ln2.g", 1, d, 0, rng, 1.0);
        L.ln2_b = &add(p + ".ln2.b", 1, d, 0, rng);
        L.w1 = &add(p + ".ffn.w1", d, f, 1.0 / std::sqrt(static_cast<double>(d)), rng);
        L.b1 = &add(p + ".ffn.b1", 1, f, 0, rng);
        L.w2 = &add(p + ".ffn.w2", f, d, 1.0 / std::sqrt(2.0 * cfg_.num_layers * f), rng);
        L.b2 = &add(p + ".ffn.b2", 1, d, 0, rng);
        st.layers.push_back(L);
    }
    st.lnf_g = &add(prefix + ".lnf.g", 1, d, 0, rng, 1.0);
    st.lnf_b = &add(prefix + ".lnf.b", 1, d, 0, rng);
    return st;
}

Model::Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(init_seed);
    const int d = cfg_.hidden_dim, V = cfg_.token_vocab_size, I = cfg_.ingredient_vocab_size;
    const double emb = 1.0 / std::sqrt(static_cast<double>(d));

    const int n_sent = cfg_.shared_sentence_encoder ? 1 : 3;
    for (int e = 0; e < n_sent; ++e) {
        const std::string p = n_sent == 1 ? "enc.sent" : "enc.sent" + std::to_string(e);
        tok_emb_.push_back(&add(p + ".tok_emb", V, d, emb, rng));
        tok_pos_.push_back(&add(p + ".tok_pos", cfg_.max_sentence_tokens, d, emb, rng));
        sentence_.push_back(make_stack("enc", p, false, rng));
    }
    mask_sentence_ = &add("enc.mask_sentence", 1, d, emb, rng);
    step_pos_ = &add("enc.step_pos", cfg_.max_sentences, d, emb, rng);
    ing_set_ = make_stack("enc", "enc.ing_set", false, rng);
    ins_set_ = make_stack("enc", "enc.ins_set", false, rng);
    latent_w_ = &add("enc.latent.w", 3 * d, cfg_.latent_dim, 1.0 / std::sqrt(3.0 * d), rng);
    latent_b_ = &add("enc.latent.b", 1, cfg_.latent_dim, 0, rng);

    mem_w_ = &add("pred.mem.w", cfg_.latent_dim, cfg_.memory_slots * d, 1.0 / std::sqrt(double(cfg_.latent_dim)), rng);
    mem_b_ = &add("pred.mem.b", 1, cfg_.memory_slots * d, 0, rng);
    queries_ = &add("pred.queries", cfg_.set_decoder_steps, d, emb, rng);
    set_decoder_ = make_stack("pred", "pred.dec", true, rng);
    set_out_w_ = &add("pred.out.w", d, I + 1, emb, rng);
    set_out_b_ = &add("pred.out.b", 1, I + 1, 0, rng);

    dec_tok_emb_ = &add("dec.tok_emb", V, d, emb, rng);
    dec_pos_ = &add("dec.tok_pos", cfg_.max_decode_tokens, d, emb, rng);
    ing_emb_ = &add("dec.ing_emb", I, d, emb, rng);
    zproj_w_ = &add("dec.zproj.w", cfg_.latent_dim, d, 1.0 / std::sqrt(double(cfg_.latent_dim)), rng);
    zproj_b_ = &add("dec.zproj.b", 1, d, 0, rng);
    decoder_ = make_stack("dec", "dec.dec", true, rng);
    dec_out_w_ = &add("dec.out.w", d, V, emb, rng);
    dec_out_b_ = &add("dec.out.b", 1, V, 0, rng);
}

Parameter& Model::parameter(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::invalid_argument("unknown parameter " + name);
    return *it->second;
}

std::vector<Parameter*> Model::group(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_)
        if (p.name.starts_with(prefix)) out.push_back(&p);
    return out;
}

void Model::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

// ---------------------------------------------------------------- graph helpers

Var Model::Pass::bind(Parameter& p, bool group_trainable) {
    auto it = bound.find(&p);
    if (it != bound.end()) return it->second;
    Var v = tape.param(p, group_trainable);
    bound.emplace(&p, v);
    return v;
}

Var Model::Pass::drop(Var x) {
    if (dropout <= 0.0) return x;
    if (!rng) throw std::logic_error("dropout without a generator");
    return ad::dropout(x, dropout, *rng);
}

bool Model::group_trainable(const Pass& pass, const std::string& group) const {
    if (group == "enc") return pass.trainable.encoder;
    if (group == "pred") return pass.trainable.predictor;
    return pass.trainable.decoder;
}

Var Model::attend(Pass& pass, const Attn& a, const std::string& group, Var xq, Var xkv,
                  const std::vector<AttentionSegment>& segs, bool causal) {
    const bool tr = group_trainable(pass, group);
    auto P = [&](Parameter* p) { return pass.bind(*p, tr); };
    Var q = ad::linear(xq, P(a.wq), P(a.bq));
    Var k = ad::linear(xkv, P(a.wk), P(a.bk));
    Var v = ad::linear(xkv, P(a.wv), P(a.bv));
    Var o = ad::attention(q, k, v, segs, {cfg_.num_heads, causal});
    return ad::linear(o, P(a.wo), P(a.bo));
}

Var Model::run_stack(Pass& pass, const Stack& s, Var x, const std::vector<AttentionSegment>& self_segs, bool causal,
                     Var memory, const std::vector<AttentionSegment>& cross_segs) {
    const bool tr = group_trainable(pass, s.group);
    auto P = [&](Parameter* p) { return pass.bind(*p, tr); };
    for (const Layer& L : s.layers) {
        Var h = ad::layer_norm(x, P(L.ln1_g), P(L.ln1_b));
        x = ad::add(x, pass.drop(attend(pass, L.self, s.group, h, h, self_segs, causal)));
        if (L.cross) {
            h = ad::layer_norm(x, P(L.lnc_g), P(L.lnc_b));
            x = ad::add(x, pass.drop(attend(pass, L.xattn, s.group, h, memory, cross_segs, false)));
        }
        h = ad::layer_norm(x, P(L.ln2_g), P(L.ln2_b));
        h = ad::gelu(ad::linear(h, P(L.w1), P(L.b1)));
        x = ad::add(x, pass.drop(ad::linear(h, P(L.w2), P(L.b2))));
    }
    return ad::layer_norm(x, P(s.lnf_g), P(s.lnf_b));
}

namespace {

std::vector<AttentionSegment> block_segments(const std::vector<int>& lens) {
    std::vector<AttentionSegment> segs;
    int off = 0;
    for (int n : lens) {
        segs.push_back({off, n, off, n});
        off += n;
    }
    return segs;
}

std::vector<RowSegment> row_segments(const std::vector<int>& lens) {
    std::vector<RowSegment> segs;
    int off = 0;
    for (int n : lens) {
        segs.push_back({off, n});
        off += n;
    }
    return segs;
}

void warn_once(std::atomic<bool>& flag, const char* what) {
    if (flag.exchange(true)) return;
    std::cerr << "warning: " << what << '\n';
}

std::atomic<bool> g_warned_tokens{false};
std::atomic<bool> g_warned_sentences{false};
std::atomic<bool> g_warned_decode{false};

}  // namespace

Var Model::encode_sentences(Pass& pass, int which, const std::vector<const std::vector<int>*>& sentences) {
    const bool tr = pass.trainable.encoder;
    std::vector<int> ids, pos, lens;
    for (const auto* s : sentences) {
        int n = static_cast<int>(s->size());
        if (n > cfg_.max_sentence_tokens) {
            warn_once(g_warned_tokens, "sentence truncated to max_sentence_tokens");
            n = cfg_.max_sentence_tokens;
        }
        if (n == 0) {
            ids.push_back(TokenVocab::kPad);
            pos.push_back(0);
            lens.push_back(1);
            continue;
        }
        for (int i = 0; i < n; ++i) {
            const int id = (*s)[i];
            ids.push_back(id >= 0 && id < cfg_.token_vocab_size ? id : TokenVocab::kUnk);
            pos.push_back(i);
        }
        lens.push_back(n);
    }
    Var x = ad::add(ad::gather_rows(pass.bind(*tok_emb_[which], tr), ids),
                    ad::gather_rows(pass.bind(*tok_pos_[which], tr), pos));
    x = pass.drop(x);
    x = run_stack(pass, sentence_[which], x, block_segments(lens), false, x, {});
    return ad::segment_mean(x, row_segments(lens));
}

Var Model::encode(Pass& pass, std::span<const EncoderInput> batch) {
    if (batch.empty()) throw std::invalid_argument("encode: empty batch");
    const bool tr = pass.trainable.encoder;
    const int n_enc = static_cast<int>(sentence_.size());
    const int M = cfg_.max_sentences;

    // Sentences per encoder; slot indices refer to rows of the combined table.
    std::vector<std::vector<const std::vector<int>*>> sents(n_enc);
    struct Slot {
        int enc = 0;
        int idx = -1;  // -1: MASK
    };
    std::vector<Slot> title_slots;
    std::vector<std::vector<Slot>> ing_slots(batch.size()), ins_slots(batch.size());
    auto enc_of = [&](int which) { return n_enc == 1 ? 0 : which; };
    auto take = [&](int which, const std::vector<int>& s) {
        const int e = enc_of(which);
        sents[e].push_back(&s);
        return Slot{e, static_cast<int>(sents[e].size()) - 1};
    };

    for (std::size_t b = 0; b < batch.size(); ++b) {
        const EncoderInput& in = batch[b];
        bool any = !in.title.empty();
        title_slots.push_back(take(0, in.title));
        auto add_list = [&](int which, const std::vector<std::vector<int>>& list, const std::vector<bool>& masked,
                            std::vector<Slot>& out) {
            std::size_t n = list.size();
            if (static_cast<int>(n) > M) {
                warn_once(g_warned_sentences, "recipe truncated to max_sentences");
                n = M;
            }
            for (std::size_t i = 0; i < n; ++i) {
                if (i < masked.size() && masked[i]) {
                    out.push_back(Slot{0, -1});
                } else {
                    out.push_back(take(which, list[i]));
                    any = true;
                }
            }
            if (out.empty()) out.push_back(Slot{0, -1});
        };
        add_list(1, in.ingredients, in.ingredient_masked, ing_slots[b]);
        add_list(2, in.instructions, in.instruction_masked, ins_slots[b]);
        if (!any) throw std::invalid_argument("encode: recipe has no title and no unmasked sentences");
    }

    std::vector<Var> parts;
    std::vector<int> offset(n_enc, 0);
    int rows = 0;
    for (int e = 0; e < n_enc; ++e) {
        offset[e] = rows;
        if (sents[e].empty()) continue;
        parts.push_back(encode_sentences(pass, e, sents[e]));
        rows += static_cast<int>(sents[e].size());
    }
    const int mask_row = rows;
    parts.push_back(pass.bind(*mask_sentence_, tr));
    Var table = ad::concat_rows(parts);
    auto row_of = [&](const Slot& s) { return s.idx < 0 ? mask_row : offset[s.enc] + s.idx; };

    std::vector<int> title_rows;
    for (const auto& s : title_slots) title_rows.push_back(row_of(s));
    Var title = ad::gather_rows(table, title_rows);

    auto set_encode = [&](const std::vector<std::vector<Slot>>& slots, const Stack& stack, bool positional) {
        std::vector<int> rows_idx, pos, lens;
        for (const auto& list : slots) {
            for (std::size_t i = 0; i < list.size(); ++i) {
                rows_idx.push_back(row_of(list[i]));
                pos.push_back(static_cast<int>(i));
            }
            lens.push_back(static_cast<int>(list.size()));
        }
        Var x = ad::gather_rows(table, rows_idx);
        if (positional) x = ad::add(x, ad::gather_rows(pass.bind(*step_pos_, tr), pos));
        x = pass.drop(x);
        x = run_stack(pass, stack, x, block_segments(lens), false, x, {});
        return ad::segment_mean(x, row_segments(lens));
    };
    Var ing = set_encode(ing_slots, ing_set_, false);
    Var ins = set_encode(ins_slots, ins_set_, true);
    Var cat = ad::concat_cols({title, ing, ins});
    return ad::tanh(ad::linear(cat, pass.bind(*latent_w_, tr), pass.bind(*latent_b_, tr)));
}

Model::SetLogits Model::predict(Pass& pass, Var z) {
    const bool tr = pass.trainable.predictor;
    const int B = z.rows(), K = cfg_.set_decoder_steps, m = cfg_.memory_slots, d = cfg_.hidden_dim;
    const int I = cfg_.ingredient_vocab_size;
    if (z.cols() != cfg_.latent_dim) throw std::invalid_argument("predict: latent width mismatch");
    Var mem = ad::reshape(ad::linear(z, pass.bind(*mem_w_, tr), pass.bind(*mem_b_, tr)), B * m, d);
    std::vector<int> q_ids;
    std::vector<AttentionSegment> self_segs, cross_segs;
    std::vector<RowSegment> pool;
    for (int b = 0; b < B; ++b) {
        for (int s = 0; s < K; ++s) q_ids.push_back(s);
        self_segs.push_back({b * K, K, b * K, K});
        cross_segs.push_back({b * K, K, b * m, m});
        pool.push_back({b * K, K});
    }
    Var x = ad::gather_rows(pass.bind(*queries_, tr), q_ids);
    x = run_stack(pass, set_decoder_, x, self_segs, false, mem, cross_segs);
    SetLogits out;
    out.steps = ad::linear(x, pass.bind(*set_out_w_, tr), pass.bind(*set_out_b_, tr));
    out.pooled = ad::segment_max(ad::slice_cols(out.steps, 0, I), pool);
    out.eos = ad::slice_cols(out.steps, I, I + 1);
    return out;
}

Var Model::ingredient_loss(const SetLogits& out, std::span<const IngredientTarget> targets) {
    const int B = out.pooled.rows(), I = cfg_.ingredient_vocab_size, K = cfg_.set_decoder_steps;
    if (static_cast<int>(targets.size()) != B) throw std::invalid_argument("ingredient_loss: batch size mismatch");
    Matrix y(B, I), w(B, I, 1.0 / B);
    Matrix ey(B * K, 1), ew(B * K, 1);
    for (int b = 0; b < B; ++b) {
        if (static_cast<int>(targets[b].y.size()) != I)
            throw std::invalid_argument("ingredient_loss: target has the wrong dimension");
        std::copy(targets[b].y.begin(), targets[b].y.end(), y.row(b).begin());
        const int k = std::clamp(targets[b].eos_step, 1, K);
        for (int s = 0; s < k; ++s) {
            ew(b * K + s, 0) = cfg_.eos_loss_weight / (static_cast<double>(k) * B);
            ey(b * K + s, 0) = s == k - 1 ? 1.0 : 0.0;
        }
    }
    return ad::add(ad::weighted_bce(out.pooled, std::move(y), std::move(w), kProbClamp),
                   ad::weighted_bce(out.eos, std::move(ey), std::move(ew), kProbClamp));
}

Var Model::decoder_memory(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                          std::vector<AttentionSegment>& cross_segs, int& total_rows) {
    const bool tr = pass.trainable.decoder;
    const int B = z.rows();
    Var zrows = ad::linear(z, pass.bind(*zproj_w_, tr), pass.bind(*zproj_b_, tr));
    std::vector<int> ing_ids;
    for (const auto& s : ingredient_sets)
        for (int id : s) {
            if (id < 0 || id >= cfg_.ingredient_vocab_size) throw std::invalid_argument("ingredient id out of range");
            ing_ids.push_back(id);
        }
    std::vector<int> order;  // rows of [zrows; ingredient rows] in memory order
    int ing_off = B;
    cross_segs.clear();
    int mem_off = 0;
    for (int b = 0; b < B; ++b) {
        order.push_back(b);
        const int n = static_cast<int>(ingredient_sets[b].size());
        for (int i = 0; i < n; ++i) order.push_back(ing_off + i);
        ing_off += n;
        cross_segs.push_back({0, 0, mem_off, n + 1});
        mem_off += n + 1;
    }
    total_rows = mem_off;
    Var table = ing_ids.empty() ? zrows : ad::concat_rows({zrows, ad::gather_rows(pass.bind(*ing_emb_, tr), ing_ids)});
    return pass.drop(ad::gather_rows(table, order));
}

Var Model::decoder_logits(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                          std::span<const std::vector<int>> inputs) {
    const bool tr = pass.trainable.decoder;
    const int B = z.rows();
    if (static_cast<int>(ingredient_sets.size()) != B || static_cast<int>(inputs.size()) != B)
        throw std::invalid_argument("decoder: batch size mismatch");
    std::vector<AttentionSegment> cross_segs;
    int mem_rows = 0;
    Var memory = decoder_memory(pass, z, ingredient_sets, cross_segs, mem_rows);
    std::vector<int> ids, pos, lens;
    int off = 0;
    for (int b = 0; b < B; ++b) {
        const int n = static_cast<int>(inputs[b].size());
        if (n == 0) throw std::invalid_argument("decoder: empty input sequence");
        if (n > cfg_.max_decode_tokens) throw std::invalid_argument("decoder: sequence longer than max_decode_tokens");
        for (int i = 0; i < n; ++i) {
            const int id = inputs[b][i];
            ids.push_back(id >= 0 && id < cfg_.token_vocab_size ? id : TokenVocab::kUnk);
            pos.push_back(i);
        }
        lens.push_back(n);
        cross_segs[b].q_begin = off;
        cross_segs[b].q_len = n;
        off += n;
    }
    Var x = ad::add(ad::gather_rows(pass.bind(*dec_tok_emb_, tr), ids), ad::gather_rows(pass.bind(*dec_pos_, tr), pos));
    x = pass.drop(x);
    x = run_stack(pass, decoder_, x, block_segments(lens), true, memory, cross_segs);
    return ad::linear(x, pass.bind(*dec_out_w_, tr), pass.bind(*dec_out_b_, tr));
}

Var Model::instruction_loss(Pass& pass, Var z, std::span<const std::vector<int>> ingredient_sets,
                            std::span<const InstructionSequence> sequences) {
    std::vector<std::vector<int>> inputs;
    std::vector<int> targets;
    for (const auto& s : sequences) {
        if (s.target.empty() || s.input.size() != s.target.size())
            throw std::invalid_argument("instruction_loss: empty or misaligned target");
        inputs.push_back(s.input);
        targets.insert(targets.end(), s.target.begin(), s.target.end());
    }
    Var logits = decoder_logits(pass, z, ingredient_sets, inputs);
    return ad::softmax_xent(logits, std::move(targets));
}

// ---------------------------------------------------------------- inference

Matrix Model::encode(const EncoderInput& input) {
    Tape t(false);
    Pass pass{t, {}, 0.0, nullptr, {}};
    return encode(pass, std::span<const EncoderInput>(&input, 1)).value();
}

IngredientPrediction Model::predict_ingredients(const Matrix& z) {
    if (z.rows != 1) throw std::invalid_argument("predict_ingredients: expects a single latent row");
    Tape t(false);
    Pass pass{t, {}, 0.0, nullptr, {}};
    const SetLogits out = predict(pass, t.constant(z));
    const int I = cfg_.ingredient_vocab_size, K = cfg_.set_decoder_steps;
    IngredientPrediction p;
    p.step_logits = out.steps.value();
    for (int i = 0; i < I; ++i) p.probabilities.push_back(sigmoid(out.pooled.value()(0, i)));
    for (int s = 0; s < K; ++s) p.eos_probabilities.push_back(sigmoid(out.eos.value()(s, 0)));
    p.cardinality = IngredientPrediction::cardinality_from_eos(p.eos_probabilities);
    std::vector<int> order(I);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p.probabilities[a] > p.probabilities[b]; });
    order.resize(std::min(I, p.cardinality));
    std::sort(order.begin(), order.end());
    p.top_set = std::move(order);
    return p;
}

Matrix Model::grad_ingredient_loss_wrt_z(const Matrix& z, const IngredientTarget& target, double* loss) {
    Tape t(true);
    Pass pass{t, {}, 0.0, nullptr, {}};
    Var zv = t.leaf(z);
    Var l = ingredient_loss(predict(pass, zv), std::span<const IngredientTarget>(&target, 1));
    if (loss) *loss = l.value()(0, 0);
    t.backward(l);
    const Matrix& g = t.grad(zv);
    return g.empty() ? Matrix(z.rows, z.cols) : g;
}

double Model::ingredient_loss_value(const Matrix& z, const IngredientTarget& target) {
    Tape t(false);
    Pass pass{t, {}, 0.0, nullptr, {}};
    return ingredient_loss(predict(pass, t.constant(z)), std::span<const IngredientTarget>(&target, 1))
        .value()(0, 0);
}

namespace {

Matrix affine(const Matrix& x, const Parameter& w, const Parameter& b) {
    Matrix out;
    kernels::gemm(x, w.value, out);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) out(r, c) += b.value(0, c);
    return out;
}

Matrix norm(const Matrix& x, const Parameter& g, const Parameter& b) {
    Matrix y;
    std::vector<double> mean, rstd;
    kernels::layer_norm_forward(x, g.value.row(0), b.value.row(0), 1e-5, y, mean, rstd);
    return y;
}

void add_to(Matrix& x, const Matrix& y) {
    for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

}  // namespace

std::vector<int> Model::greedy_decode(const Matrix& z, const std::vector<int>& ingredient_set, int max_len,
                                      Matrix* logits_out) {
    if (z.rows != 1 || z.cols != cfg_.latent_dim) throw std::invalid_argument("greedy_decode: bad latent shape");
    const int d = cfg_.hidden_dim, V = cfg_.token_vocab_size;
    if (max_len <= 0 || max_len > cfg_.max_decode_tokens) {
        if (max_len > cfg_.max_decode_tokens) warn_once(g_warned_decode, "decode length capped at max_decode_tokens");
        max_len = cfg_.max_decode_tokens;
    }

    // Memory: [zproj(z); A(ingredients)].
    const Matrix zrow = affine(z, *zproj_w_, *zproj_b_);
    Matrix memory(1 + static_cast<int>(ingredient_set.size()), d);
    std::copy(zrow.data.begin(), zrow.data.end(), memory.row(0).begin());
    for (std::size_t i = 0; i < ingredient_set.size(); ++i) {
        const int id = ingredient_set[i];
        if (id < 0 || id >= cfg_.ingredient_vocab_size) throw std::invalid_argument("ingredient id out of range");
        auto src = ing_emb_->value.row(id);
        std::copy(src.begin(), src.end(), memory.row(static_cast<int>(i) + 1).begin());
    }

    const auto& layers = decoder_.layers;
    const int L = static_cast<int>(layers.size());
    std::vector<Matrix> ck(L), cv(L), sk(L, Matrix(max_len, d)), sv(L, Matrix(max_len, d));
    for (int l = 0; l < L; ++l) {
        const Matrix h = memory;
        ck[l] = affine(h, *layers[l].xattn.wk, *layers[l].xattn.bk);
        cv[l] = affine(h, *layers[l].xattn.wv, *layers[l].xattn.bv);
    }
    const kernels::AttentionShape shape{cfg_.num_heads, false};
    const AttentionSegment cross_seg{0, 1, 0, memory.rows};

    std::vector<int> out;
    int token = TokenVocab::kBos;
    std::vector<double> probs;
    for (int t = 0; t < max_len; ++t) {
        Matrix x(1, d);
        for (int c = 0; c < d; ++c) x(0, c) = dec_tok_emb_->value(token, c) + dec_pos_->value(t, c);
        for (int l = 0; l < L; ++l) {
            const Layer& ly = layers[l];
            Matrix h = norm(x, *ly.ln1_g, *ly.ln1_b);
            const Matrix q = affine(h, *ly.self.wq, *ly.self.bq);
            const Matrix k = affine(h, *ly.self.wk, *ly.self.bk);
            const Matrix v = affine(h, *ly.self.wv, *ly.self.bv);
            std::copy(k.data.begin(), k.data.end(), sk[l].row(t).begin());
            std::copy(v.data.begin(), v.data.end(), sv[l].row(t).begin());
            Matrix a;
            const AttentionSegment self_seg{0, 1, 0, t + 1};
            kernels::attention_forward(q, sk[l], sv[l], std::span(&self_seg, 1), shape, a, probs);
            add_to(x, affine(a, *ly.self.wo, *ly.self.bo));

            h = norm(x, *ly.lnc_g, *ly.lnc_b);
            const Matrix qc = affine(h, *ly.xattn.wq, *ly.xattn.bq);
            kernels::attention_forward(qc, ck[l], cv[l], std::span(&cross_seg, 1), shape, a, probs);
            add_to(x, affine(a, *ly.xattn.wo, *ly.xattn.bo));

            h = norm(x, *ly.ln2_g, *ly.ln2_b);
            Matrix f = affine(h, *ly.w1, *ly.b1);
            for (double& e : f.data) e = gelu_value(e);
            add_to(x, affine(f, *ly.w2, *ly.b2));
        }
        const Matrix logits = affine(norm(x, *decoder_.lnf_g, *decoder_.lnf_b), *dec_out_w_, *dec_out_b_);
        if (logits_out) {
            if (logits_out->empty()) *logits_out = Matrix(0, V);
            logits_out->data.insert(logits_out->data.end(), logits.data.begin(), logits.data.end());
            ++logits_out->rows;
        }
        token = static_cast<int>(std::max_element(logits.data.begin(), logits.data.end()) - logits.data.begin());
        if (token == TokenVocab::kEos) break;
        out.push_back(token);
    }
    return out;
}

}  // namespace recipecrit
