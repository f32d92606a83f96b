#include "recipecrit/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace recipecrit {

using json = nlohmann::json;

void TrainConfig::validate() const {
    auto need = [](bool ok, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("train config: ") + what);
    };
    need(batch_size >= 1, "batch_size must be at least 1");
    need(learning_rate > 0.0, "learning_rate must be positive");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    need(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio must be in [0, 1]");
    need(max_epochs >= 1, "max_epochs must be at least 1");
    need(patience_epochs >= 1, "patience_epochs must be at least 1");
    need(stage == 1 || stage == 2, "stage must be 1 or 2");
    need(clip_norm >= 0.0, "clip_norm must be nonnegative");
    need(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam betas must be in [0, 1)");
    need(adam_eps > 0.0, "adam_eps must be positive");
}

std::string TrainConfig::to_json() const {
    json j{{"batch_size", batch_size},       {"learning_rate", learning_rate}, {"dropout", dropout},
           {"mask_ratio", mask_ratio},       {"max_epochs", max_epochs},       {"patience_epochs", patience_epochs},
           {"seed", seed},                   {"stage", stage},                 {"clip_norm", clip_norm},
           {"adam_beta1", adam_beta1},       {"adam_beta2", adam_beta2},       {"adam_eps", adam_eps}};
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    TrainConfig c;
    try {
        const json j = json::parse(text);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.dropout = j.value("dropout", c.dropout);
        c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience_epochs = j.value("patience_epochs", c.patience_epochs);
        c.seed = j.value("seed", c.seed);
        c.stage = j.value("stage", c.stage);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
        c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string TrainReport::to_json() const {
    json epochs_j = json::array();
    for (const auto& e : epochs)
        epochs_j.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                            {"seconds", e.seconds}});
    json j{{"stage", stage},
           {"epochs", epochs_j},
           {"best_epoch", best_epoch},
           {"best_val_loss", best_val_loss},
           {"early_stopped", early_stopped},
           {"wall_seconds", wall_seconds},
           {"checkpoint", checkpoint}};
    return j.dump();
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto* p : params_) {
        m_.emplace_back(p->value.rows, p->value.cols);
        v_.emplace_back(p->value.rows, p->value.cols);
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        if (p.grad.empty()) continue;
        auto& m = m_[k].data;
        auto& v = v_[k].data;
        for (std::size_t i = 0; i < p.value.data.size(); ++i) {
            const double g = p.grad.data[i];
            m[i] = b1_ * m[i] + (1.0 - b1_) * g;
            v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
            p.value.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

double clip_global_norm(const std::vector<Parameter*>& params, double max_norm) {
    double sq = 0.0;
    for (auto* p : params)
        for (double g : p->grad.data) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto* p : params)
            for (double& g : p->grad.data) g *= s;
    }
    return norm;
}

TokenVocab build_token_vocab(const std::vector<Recipe>& recipes, int min_count) {
    std::vector<std::vector<std::string>> sentences;
    for (const auto& r : recipes) {
        sentences.push_back(tokenize(r.title));
        for (const auto& l : r.ingredient_lines) sentences.push_back(tokenize(l));
        for (const auto& s : r.instructions) sentences.push_back(tokenize(s));
    }
    return TokenVocab::build(sentences, min_count);
}

std::vector<NoisedRecipe> noise_epoch(const std::vector<Recipe>& recipes, double mask_ratio, std::mt19937_64& rng) {
    std::vector<NoisedRecipe> out;
    out.reserve(recipes.size());
    for (const auto& r : recipes) out.push_back(apply_denoising_noise(r, mask_ratio, rng));
    return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_ids(const std::vector<Recipe>& recipes, int vocab_size) {
    for (const auto& r : recipes)
        for (int id : r.ingredient_ids)
            if (id < 0 || id >= vocab_size)
                throw std::invalid_argument("recipe " + r.id + " has an ingredient outside the vocabulary");
}

// Per-epoch shuffled batches of indices.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::mt19937_64* rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (rng) std::shuffle(order.begin(), order.end(), *rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    return out;
}

// Mask patterns for the validation split are drawn once so that its loss is comparable across epochs.
std::vector<EncoderInput> fixed_noise_inputs(const std::vector<Recipe>& recipes, double mask_ratio,
                                             std::uint64_t seed, const TokenVocab& tokens) {
    std::mt19937_64 rng(seed ^ 0x5eed0f0a11da7aULL);
    std::vector<EncoderInput> out;
    out.reserve(recipes.size());
    for (const auto& r : noise_epoch(recipes, mask_ratio, rng)) out.push_back(make_encoder_input(r, tokens));
    return out;
}

std::vector<Matrix> copy_values(const std::vector<Parameter*>& params) {
    std::vector<Matrix> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(p->value);
    return out;
}

void restore_values(const std::vector<Parameter*>& params, const std::vector<Matrix>& values) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

void require_finite(double loss, int stage, int epoch, std::size_t batch) {
    if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "training diverged: stage " << stage << " epoch " << epoch << " batch " << batch << " loss " << loss
           << "; lower the learning rate or enable clipping";
        throw DivergenceError(os.str());
    }
}

// Shared epoch loop with validation-based early stopping. run_epoch returns the
// mean train loss; validate returns the validation loss.
TrainReport run_loop(int stage, const TrainConfig& cfg, const std::vector<Parameter*>& trainable,
                     const std::function<double(int)>& run_epoch, const std::function<double()>& validate,
                     const EpochCallback& on_epoch) {
    TrainReport report;
    report.stage = stage;
    const auto t0 = Clock::now();
    std::vector<Matrix> best = copy_values(trainable);
    double best_val = 0.0;
    int stale = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto te = Clock::now();
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = run_epoch(epoch);
        rec.val_loss = validate();
        require_finite(rec.val_loss, stage, epoch, 0);
        rec.seconds = seconds_since(te);
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (report.best_epoch == 0 || rec.val_loss < best_val) {
            best_val = rec.val_loss;
            report.best_epoch = epoch;
            best = copy_values(trainable);
            stale = 0;
        } else if (++stale >= cfg.patience_epochs) {
            report.early_stopped = true;
            break;
        }
    }
    restore_values(trainable, best);
    report.best_val_loss = best_val;
    report.wall_seconds = seconds_since(t0);
    return report;
}

std::vector<IngredientTarget> targets_for(const std::vector<Recipe>& recipes, int vocab_size) {
    std::vector<IngredientTarget> out;
    out.reserve(recipes.size());
    for (const auto& r : recipes) out.push_back(IngredientTarget::from_set(r.ingredient_ids, vocab_size));
    return out;
}

template <typename T>
std::vector<T> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

}  // namespace

TrainReport train_stage1(const Splits& data, Model& model, const TokenVocab& tokens,
                         const IngredientVocab& ingredients, const TrainConfig& cfg,
                         const std::string& checkpoint_path, const EpochCallback& on_epoch) {
    cfg.validate();
    if (cfg.stage != 1) throw std::invalid_argument("train_stage1 needs stage = 1");
    const int I = model.config().ingredient_vocab_size;
    if (I != ingredients.size() || model.config().token_vocab_size != tokens.size())
        throw std::invalid_argument("model config does not match the vocabularies");
    if (data.train.empty() || data.val.empty()) throw std::invalid_argument("stage 1 needs train and validation recipes");
    check_ids(data.train, I);
    check_ids(data.val, I);

    std::vector<Parameter*> trainable = model.group("enc.");
    for (auto* p : model.group("pred.")) trainable.push_back(p);
    Adam adam(trainable, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::mt19937_64 rng(cfg.seed);

    const auto train_targets = targets_for(data.train, I);
    const auto val_targets = targets_for(data.val, I);
    const auto val_inputs = fixed_noise_inputs(data.val, cfg.mask_ratio, cfg.seed, tokens);

    auto run_epoch = [&](int epoch) {
        double total = 0.0;
        const auto noised = noise_epoch(data.train, cfg.mask_ratio, rng);
        const auto batches = make_batches(data.train.size(), cfg.batch_size, &rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            std::vector<EncoderInput> inputs;
            for (auto i : batches[b]) inputs.push_back(make_encoder_input(noised[i], tokens));
            const auto targets = pick(train_targets, batches[b]);
            model.zero_grad();
            Tape tape;
            Model::Pass pass{tape, {true, true, false}, cfg.dropout, &rng, {}};
            Var z = model.encode(pass, inputs);
            Var loss = model.ingredient_loss(model.predict(pass, z), targets);
            const double l = loss.value()(0, 0);
            require_finite(l, 1, epoch, b);
            tape.backward(loss);
            clip_global_norm(trainable, cfg.clip_norm);
            adam.step();
            total += l * static_cast<double>(batches[b].size());
        }
        return total / static_cast<double>(data.train.size());
    };

    auto validate = [&]() {
        double total = 0.0;
        for (const auto& idx : make_batches(data.val.size(), cfg.batch_size, nullptr)) {
            Tape tape(false);
            Model::Pass pass{tape, {}, 0.0, nullptr, {}};
            const auto inputs = pick(val_inputs, idx);
            const auto targets = pick(val_targets, idx);
            Var loss = model.ingredient_loss(model.predict(pass, model.encode(pass, inputs)), targets);
            total += loss.value()(0, 0) * static_cast<double>(idx.size());
        }
        return total / static_cast<double>(data.val.size());
    };

    TrainReport report = run_loop(1, cfg, trainable, run_epoch, validate, on_epoch);
    if (!checkpoint_path.empty()) {
        save_checkpoint(model, 1, tokens, ingredients, checkpoint_path);
        report.checkpoint = checkpoint_path;
    }
    return report;
}

TrainReport train_stage2(const Splits& data, LoadedModel& loaded, const TrainConfig& cfg,
                         const std::string& checkpoint_path, const EpochCallback& on_epoch) {
    cfg.validate();
    if (cfg.stage != 2) throw std::invalid_argument("train_stage2 needs stage = 2");
    if (!loaded.model || loaded.stage < 1) throw std::invalid_argument("stage 2 needs a stage-1 checkpoint");
    if (data.train.empty() || data.val.empty()) throw std::invalid_argument("stage 2 needs train and validation recipes");
    Model& model = *loaded.model;
    const TokenVocab& tokens = loaded.tokens;
    const int I = model.config().ingredient_vocab_size;
    const int max_tokens = model.config().max_decode_tokens;
    check_ids(data.train, I);
    check_ids(data.val, I);

    std::vector<Parameter*> trainable = model.group("dec.");
    Adam adam(trainable, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    std::mt19937_64 rng(cfg.seed);

    auto sequences = [&](const std::vector<Recipe>& rs) {
        std::vector<InstructionSequence> out;
        for (const auto& r : rs) out.push_back(make_instruction_sequence(r.instructions, tokens, max_tokens));
        return out;
    };
    auto sets = [](const std::vector<Recipe>& rs) {
        std::vector<std::vector<int>> out;
        for (const auto& r : rs) out.push_back(r.ingredient_ids);
        return out;
    };
    const auto train_seq = sequences(data.train), val_seq = sequences(data.val);
    const auto train_sets = sets(data.train), val_sets = sets(data.val);

    // The encoder is frozen and evaluated without dropout, so its latents are plain values.
    auto latents = [&](const std::vector<EncoderInput>& inputs) {
        Tape tape(false);
        Model::Pass pass{tape, {}, 0.0, nullptr, {}};
        return model.encode(pass, inputs).value();
    };
    const auto val_inputs = fixed_noise_inputs(data.val, cfg.mask_ratio, cfg.seed, tokens);

    auto token_count = [](const std::vector<InstructionSequence>& seqs) {
        double n = 0;
        for (const auto& s : seqs) n += static_cast<double>(s.target.size());
        return n;
    };

    auto run_epoch = [&](int epoch) {
        double total = 0.0, count = 0.0;
        const auto noised = noise_epoch(data.train, cfg.mask_ratio, rng);
        const auto batches = make_batches(data.train.size(), cfg.batch_size, &rng);
        for (std::size_t b = 0; b < batches.size(); ++b) {
            std::vector<EncoderInput> inputs;
            for (auto i : batches[b]) inputs.push_back(make_encoder_input(noised[i], tokens));
            const auto seqs = pick(train_seq, batches[b]);
            const auto ing = pick(train_sets, batches[b]);
            model.zero_grad();
            Tape tape;
            Model::Pass pass{tape, {false, false, true}, cfg.dropout, &rng, {}};
            Var z = tape.constant(latents(inputs));
            Var loss = model.instruction_loss(pass, z, ing, seqs);
            const double l = loss.value()(0, 0);
            require_finite(l, 2, epoch, b);
            tape.backward(loss);
            clip_global_norm(trainable, cfg.clip_norm);
            adam.step();
            const double n = token_count(seqs);
            total += l * n;
            count += n;
        }
        return total / count;
    };

    auto validate = [&]() {
        double total = 0.0, count = 0.0;
        for (const auto& idx : make_batches(data.val.size(), cfg.batch_size, nullptr)) {
            const auto seqs = pick(val_seq, idx);
            Tape tape(false);
            Model::Pass pass{tape, {}, 0.0, nullptr, {}};
            Var z = tape.constant(latents(pick(val_inputs, idx)));
            Var loss = model.instruction_loss(pass, z, pick(val_sets, idx), seqs);
            const double n = token_count(seqs);
            total += loss.value()(0, 0) * n;
            count += n;
        }
        return total / count;
    };

    TrainReport report = run_loop(2, cfg, trainable, run_epoch, validate, on_epoch);
    loaded.stage = 2;
    if (!checkpoint_path.empty()) {
        save_checkpoint(model, 2, tokens, loaded.ingredients, checkpoint_path);
        report.checkpoint = checkpoint_path;
    }
    return report;
}

}  // namespace recipecrit
