#include <cmath>

#include "doctest.h"
#include "recipecrit/model.hpp"
#include "test_util.hpp"

using namespace recipecrit;

namespace {

ModelConfig small(int ingredients = 12, int tokens = 40) {
    ModelConfig c;
    c.hidden_dim = 16;
    c.num_layers = 1;
    c.num_heads = 2;
    c.ffn_dim = 32;
    c.latent_dim = 8;
    c.set_decoder_steps = 6;
    c.memory_slots = 2;
    c.max_decode_tokens = 40;
    c.dropout = 0.0;
    c.ingredient_vocab_size = ingredients;
    c.token_vocab_size = tokens;
    return c;
}

std::vector<int> random_sentence(std::mt19937_64& rng, int vocab, int max_len = 6) {
    std::uniform_int_distribution<int> len(1, max_len), tok(TokenVocab::kNumSpecials, vocab - 1);
    std::vector<int> s(len(rng));
    for (int& t : s) t = tok(rng);
    return s;
}

EncoderInput random_input(std::mt19937_64& rng, int vocab) {
    std::uniform_int_distribution<int> count(1, 5);
    std::bernoulli_distribution coin(0.3);
    EncoderInput in;
    in.title = random_sentence(rng, vocab);
    for (int i = count(rng); i > 0; --i) {
        in.ingredients.push_back(random_sentence(rng, vocab, 3));
        in.ingredient_masked.push_back(coin(rng));
    }
    for (int i = count(rng); i > 0; --i) {
        in.instructions.push_back(random_sentence(rng, vocab));
        in.instruction_masked.push_back(coin(rng));
    }
    return in;
}

double bce(double p, double y) {
    p = std::clamp(p, kProbClamp, 1 - kProbClamp);
    return -(y * std::log(p) + (1 - y) * std::log(1 - p));
}

// Scalar-by-scalar loss from the prediction probabilities.
double reference_loss(const IngredientPrediction& p, const IngredientTarget& t, double lambda, bool with_eos = true) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.y.size(); ++i) s += bce(p.probabilities[i], t.y[i]);
    if (!with_eos) return s;
    const int k = t.eos_step;
    double e = 0.0;
    for (int j = 1; j <= k; ++j) e += bce(p.eos_probabilities[j - 1], j == k ? 1.0 : 0.0);
    return s + lambda * e / k;
}

IngredientTarget random_target(std::mt19937_64& rng, int n) {
    std::vector<int> ids;
    std::bernoulli_distribution coin(0.3);
    for (int i = 0; i < n; ++i)
        if (coin(rng)) ids.push_back(i);
    if (ids.empty()) ids.push_back(0);
    return IngredientTarget::from_set(ids, n);
}

}  // namespace

TEST_CASE("config validation, json round trip and paper scale") {
    auto c = small();
    CHECK_NOTHROW(c.validate());
    CHECK(ModelConfig::from_json(c.to_json()) == c);
    auto bad = c;
    bad.num_heads = 3;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.latent_dim = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    const auto p = ModelConfig::paper_scale(1488, 20000);
    CHECK(p.hidden_dim == 512);
    CHECK(p.num_layers == 4);
    CHECK(p.num_heads == 4);
    CHECK(p.eos_loss_weight == 1.0);
    CHECK_NOTHROW(p.validate());
}

TEST_CASE("latent coordinates stay inside (-1, 1)") {
    Model m(small(), 1);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 1000; ++i) {
        const Matrix z = m.encode(random_input(rng, 40));
        REQUIRE(z.cols == 8);
        for (double v : z.data) CHECK((v > -1.0 && v < 1.0));
    }
}

TEST_CASE("encoding is deterministic and ingredient order does not matter") {
    Model m(small(), 3);
    std::mt19937_64 rng(4);
    const EncoderInput in = random_input(rng, 40);
    CHECK(m.encode(in) == m.encode(in));

    EncoderInput a;
    a.title = {7, 8};
    a.ingredients = {{10, 11}, {12}};
    a.instructions = {{13, 14, 15}};
    EncoderInput b = a;
    std::swap(b.ingredients[0], b.ingredients[1]);
    CHECK(testutil::max_abs_diff(m.encode(a), m.encode(b)) < 1e-5);
    EncoderInput c = a;
    std::swap(c.instructions[0], c.instructions[0]);
    c.instructions.push_back({16});
    a.instructions.insert(a.instructions.begin(), {16});
    CHECK(testutil::max_abs_diff(m.encode(a), m.encode(c)) > 1e-6);
}

TEST_CASE("masking substitutes content and keeps shapes") {
    Model m(small(), 5);
    EncoderInput a;
    a.title = {7};
    a.ingredients = {{10}, {12}};
    a.instructions = {{13, 14}, {15}};
    EncoderInput b = a;
    b.ingredient_masked = {true, false};
    b.instruction_masked = {false, true};
    const Matrix za = m.encode(a), zb = m.encode(b);
    CHECK(za.same_shape(zb));
    CHECK(testutil::max_abs_diff(za, zb) > 1e-9);
    // Masked sentences do not contribute their tokens.
    EncoderInput c = b;
    c.ingredients[0] = {20, 21, 22};
    c.instructions[1] = {30};
    CHECK(m.encode(c) == zb);

    EncoderInput empty;
    empty.ingredients = {{10}};
    empty.ingredient_masked = {true};
    CHECK_THROWS_AS(m.encode(empty), std::invalid_argument);
}

TEST_CASE("batched encoding equals single encodings") {
    Model m(small(), 6);
    std::mt19937_64 rng(7);
    std::vector<EncoderInput> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_input(rng, 40));
    Tape t(false);
    Model::Pass pass{t, {}, 0.0, nullptr, {}};
    const Matrix zb = m.encode(pass, batch).value();
    for (int i = 0; i < 4; ++i) {
        const Matrix zi = m.encode(batch[i]);
        for (int c = 0; c < zb.cols; ++c) CHECK(std::abs(zb(i, c) - zi(0, c)) < 1e-12);
    }
}

TEST_CASE("separate sentence encoders are supported") {
    auto cfg = small();
    cfg.shared_sentence_encoder = false;
    Model m(cfg, 8);
    std::mt19937_64 rng(9);
    const Matrix z = m.encode(random_input(rng, 40));
    CHECK(z.cols == cfg.latent_dim);
    CHECK_NOTHROW(m.parameter("enc.sent2.tok_emb"));
}

TEST_CASE("cardinality rule") {
    CHECK(IngredientPrediction::cardinality_from_eos({0.9, 0.1, 0.1}) == 1);
    CHECK(IngredientPrediction::cardinality_from_eos({0.2, 0.5, 0.7}) == 3);
    CHECK(IngredientPrediction::cardinality_from_eos(std::vector<double>(20, 0.4)) == 20);

    auto cfg = small();
    Model m(cfg, 10);
    std::mt19937_64 rng(11);
    for (int i = 0; i < 20; ++i) {
        const auto p = m.predict_ingredients(testutil::random_matrix(1, cfg.latent_dim, rng, 0.5));
        CHECK(static_cast<int>(p.top_set.size()) == std::min(p.cardinality, cfg.ingredient_vocab_size));
        // top_set holds the highest probabilities
        double lowest_in = 1.0, highest_out = 0.0;
        for (int id = 0; id < cfg.ingredient_vocab_size; ++id) {
            const bool in = std::binary_search(p.top_set.begin(), p.top_set.end(), id);
            (in ? lowest_in : highest_out) =
                in ? std::min(lowest_in, p.probabilities[id]) : std::max(highest_out, p.probabilities[id]);
        }
        CHECK(lowest_in >= highest_out);
    }
    // EOS forced on at step 1 and never.
    m.parameter("pred.out.w").value.set_zero();
    m.parameter("pred.out.b").value(0, cfg.ingredient_vocab_size) = 5.0;
    CHECK(m.predict_ingredients(Matrix(1, cfg.latent_dim)).top_set.size() == 1);
    m.parameter("pred.out.b").value(0, cfg.ingredient_vocab_size) = -5.0;
    CHECK(m.predict_ingredients(Matrix(1, cfg.latent_dim)).cardinality == cfg.set_decoder_steps);
}

TEST_CASE("ingredient loss closed forms") {
    auto cfg = small(8);
    cfg.eos_loss_weight = 0.7;
    Model m(cfg, 12);
    std::mt19937_64 rng(13);
    SUBCASE("uniform predictions") {
        m.parameter("pred.out.w").value.set_zero();
        m.parameter("pred.out.b").value.set_zero();
        const auto t = random_target(rng, 8);
        const double want = 8 * std::log(2.0) + 0.7 * std::log(2.0);
        CHECK(std::abs(m.ingredient_loss_value(testutil::random_matrix(1, 8, rng), t) - want) < 1e-9);
    }
    SUBCASE("perfect prediction") {
        m.parameter("pred.out.w").value.set_zero();
        auto& b = m.parameter("pred.out.b").value;
        for (int i = 0; i < 8; ++i) b(0, i) = i == 3 ? 50.0 : -50.0;
        b(0, 8) = 50.0;
        const auto t = IngredientTarget::from_set({3}, 8);
        const double loss = m.ingredient_loss_value(Matrix(1, 8), t);
        CHECK(loss >= 0.0);
        CHECK(loss <= (8 + 0.7) * -std::log(1 - kProbClamp) + 1e-15);
    }
    SUBCASE("matches scalar reference on random cases") {
        for (int i = 0; i < 20; ++i) {
            const Matrix z = testutil::random_matrix(1, 8, rng, 0.7);
            const auto t = random_target(rng, 8);
            const auto p = m.predict_ingredients(z);
            CHECK(std::abs(m.ingredient_loss_value(z, t) - reference_loss(p, t, 0.7)) < 1e-10);
        }
    }
    SUBCASE("dimension mismatch") {
        const auto t = IngredientTarget::from_set({1}, 9);
        CHECK_THROWS_AS(m.ingredient_loss_value(Matrix(1, 8), t), std::invalid_argument);
    }
}

TEST_CASE("latent gradient agrees with finite differences") {
    auto cfg = small(10);
    Model m(cfg, 14);
    std::mt19937_64 rng(15);
    const double h = 1e-3;
    for (int trial = 0; trial < 10; ++trial) {
        const Matrix z = testutil::random_matrix(1, cfg.latent_dim, rng, 0.5);
        const auto t = random_target(rng, 10);
        double loss = 0.0;
        const Matrix g = m.grad_ingredient_loss_wrt_z(z, t, &loss);
        CHECK(loss == doctest::Approx(m.ingredient_loss_value(z, t)).epsilon(1e-12));
        for (int c = 0; c < cfg.latent_dim; ++c) {
            Matrix zp = z, zm = z;
            zp(0, c) += h;
            zm(0, c) -= h;
            const double fd = (m.ingredient_loss_value(zp, t) - m.ingredient_loss_value(zm, t)) / (2 * h);
            const double denom = std::max({std::abs(fd), std::abs(g(0, c)), 1e-8});
            CHECK(std::abs(fd - g(0, c)) / denom < 1e-3);
        }
    }
}

TEST_CASE("zero EOS weight leaves the gradient of the ingredient terms") {
    auto cfg = small(10);
    cfg.eos_loss_weight = 0.0;
    Model m(cfg, 16);
    std::mt19937_64 rng(17);
    const Matrix z = testutil::random_matrix(1, cfg.latent_dim, rng, 0.5);
    const auto t = random_target(rng, 10);
    const Matrix g = m.grad_ingredient_loss_wrt_z(z, t);
    const Matrix fd = testutil::numeric_gradient(
        [&](const Matrix& x) { return reference_loss(m.predict_ingredients(x), t, 0.0, false); }, z, 1e-5);
    CHECK(testutil::max_abs_diff(g, fd) < 1e-6);
}

TEST_CASE("saturated matching target is near stationary") {
    auto cfg = small(10);
    Model m(cfg, 18);
    auto& b = m.parameter("pred.out.b").value;
    for (int i = 0; i < 10; ++i) b(0, i) = i % 3 == 0 ? 30.0 : -30.0;
    b(0, 10) = 30.0;  // EOS fires at the first step
    std::mt19937_64 rng(19);
    const Matrix z = testutil::random_matrix(1, cfg.latent_dim, rng, 0.5);
    const auto p = m.predict_ingredients(z);
    IngredientTarget own;
    own.y.resize(10);
    for (int i = 0; i < 10; ++i) own.y[i] = p.probabilities[i] > 0.5 ? 1.0 : 0.0;
    own.eos_step = p.cardinality;
    auto norm = [](const Matrix& g) {
        double s = 0;
        for (double v : g.data) s += v * v;
        return std::sqrt(s);
    };
    IngredientTarget other = own;
    for (double& v : other.y) v = 1.0 - v;
    CHECK(norm(m.grad_ingredient_loss_wrt_z(z, own)) < 1e-3 * norm(m.grad_ingredient_loss_wrt_z(z, other)));
}

TEST_CASE("instruction sequences") {
    const auto v = TokenVocab::build({tokenize("chop the kale . toss with oil")}, 1);
    const auto s = make_instruction_sequence({"chop the kale.", "toss with oil"}, v, 100);
    CHECK(s.input.front() == TokenVocab::kBos);
    CHECK(s.target.back() == TokenVocab::kEos);
    CHECK(s.input.size() == s.target.size());
    for (std::size_t i = 1; i < s.input.size(); ++i) CHECK(s.input[i] == s.target[i - 1]);
    CHECK(split_steps(s.target, v) == std::vector<std::string>{"chop the kale .", "toss with oil"});
    CHECK(make_instruction_sequence({"chop the kale.", "toss with oil"}, v, 4).input.size() == 4);
    CHECK_THROWS_AS(make_instruction_sequence({}, v, 10), std::invalid_argument);
}

TEST_CASE("instruction loss closed forms") {
    auto cfg = small(6, 30);
    Model m(cfg, 20);
    std::mt19937_64 rng(21);
    Tape t(false);
    Model::Pass pass{t, {}, 0.0, nullptr, {}};
    const std::vector<std::vector<int>> sets{{1, 4}};
    const std::vector<InstructionSequence> seqs{{{2, 10, 11, 5, 12}, {10, 11, 5, 12, 3}}};
    Var z = t.constant(testutil::random_matrix(1, cfg.latent_dim, rng));

    SUBCASE("uniform decoder") {
        m.parameter("dec.out.w").value.set_zero();
        m.parameter("dec.out.b").value.set_zero();
        CHECK(std::abs(m.instruction_loss(pass, z, sets, seqs).value()(0, 0) - std::log(30.0)) < 1e-9);
    }
    SUBCASE("per-token reference") {
        const Matrix logits = m.decoder_logits(pass, z, sets, std::vector<std::vector<int>>{seqs[0].input}).value();
        double want = 0.0;
        for (int r = 0; r < 5; ++r) {
            double mx = -1e300, s = 0.0;
            for (int c = 0; c < 30; ++c) mx = std::max(mx, logits(r, c));
            for (int c = 0; c < 30; ++c) s += std::exp(logits(r, c) - mx);
            want += -(logits(r, seqs[0].target[r]) - mx - std::log(s));
        }
        CHECK(std::abs(m.instruction_loss(pass, z, sets, seqs).value()(0, 0) - want / 5) < 1e-10);
    }
    SUBCASE("confident decoder") {
        m.parameter("dec.out.w").value.set_zero();
        auto& b = m.parameter("dec.out.b").value;
        b.set_zero();
        const std::vector<InstructionSequence> same{{{2, 7, 7}, {7, 7, 7}}};
        b(0, 7) = 100.0;
        CHECK(m.instruction_loss(pass, z, sets, same).value()(0, 0) < 1e-12);
    }
}

TEST_CASE("cached greedy decoding matches teacher forcing on its own output") {
    auto cfg = small(6, 30);
    Model m(cfg, 22);
    std::mt19937_64 rng(23);
    // Make EOS unlikely so that the sequence runs to the cap.
    m.parameter("dec.out.b").value(0, TokenVocab::kEos) = -20.0;
    const Matrix z = testutil::random_matrix(1, cfg.latent_dim, rng);
    const std::vector<int> set{0, 3, 5};
    Matrix cached;
    const auto out = m.greedy_decode(z, set, 12, &cached);
    REQUIRE(out.size() == 12);
    std::vector<int> input{TokenVocab::kBos};
    input.insert(input.end(), out.begin(), out.end() - 1);
    Tape t(false);
    Model::Pass pass{t, {}, 0.0, nullptr, {}};
    const Matrix forced =
        m.decoder_logits(pass, t.constant(z), std::vector<std::vector<int>>{set}, std::vector<std::vector<int>>{input})
            .value();
    REQUIRE(forced.same_shape(cached));
    CHECK(testutil::max_abs_diff(forced, cached) < 1e-9);
    CHECK(m.greedy_decode(z, set, 12) == out);
}

TEST_CASE("dropout is active only when requested") {
    auto cfg = small();
    Model m(cfg, 24);
    std::mt19937_64 rng(25);
    const EncoderInput in = random_input(rng, 40);
    Tape t1(false), t2(false);
    std::mt19937_64 r1(1), r2(2);
    Model::Pass p1{t1, {}, 0.3, &r1, {}}, p2{t2, {}, 0.3, &r2, {}};
    const Matrix a = m.encode(p1, std::span(&in, 1)).value();
    const Matrix b = m.encode(p2, std::span(&in, 1)).value();
    CHECK(testutil::max_abs_diff(a, b) > 1e-9);
}
