#include "recipecrit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace recipecrit {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'C', 'P', 'T'};
constexpr std::uint8_t kDtypeF64 = 1;

class Writer {
public:
    void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    explicit Reader(const std::string& in) : in_(in) {}
    void bytes(void* p, std::size_t n) {
        if (n > in_.size() - pos_) throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint is truncated");
        std::memcpy(p, in_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        bytes(&v, 4);
        return v;
    }
    std::uint8_t u8() {
        std::uint8_t v = 0;
        bytes(&v, 1);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        if (n > in_.size() - pos_) throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint is truncated");
        std::string s(in_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    [[nodiscard]] bool done() const { return pos_ == in_.size(); }

private:
    const std::string& in_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot read checkpoint: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

LoadedModel build(const Checkpoint& c, const std::string& bytes, TokenVocab tokens, IngredientVocab ingredients) {
    if (tokens.digest() != c.token_digest)
        throw CheckpointError(CheckpointError::Kind::VocabMismatch, "token vocabulary does not match the checkpoint");
    if (ingredients.digest() != c.ingredient_digest)
        throw CheckpointError(CheckpointError::Kind::VocabMismatch,
                              "ingredient vocabulary does not match the checkpoint");
    LoadedModel out;
    try {
        out.model = std::make_unique<Model>(c.config, 0);
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(CheckpointError::Kind::Corrupt, std::string("checkpoint config: ") + e.what());
    }
    if (c.tensors.size() != out.model->parameters().size())
        throw CheckpointError(CheckpointError::Kind::Corrupt, "checkpoint tensor count does not match the model");
    for (const auto& [name, value] : c.tensors) {
        Parameter* p = nullptr;
        try {
            p = &out.model->parameter(name);
        } catch (const std::invalid_argument&) {
            throw CheckpointError(CheckpointError::Kind::Corrupt, "unexpected tensor " + name);
        }
        if (!p->value.same_shape(value)) throw CheckpointError(CheckpointError::Kind::Corrupt, "shape mismatch for " + name);
        p->value = value;
    }
    out.tokens = std::move(tokens);
    out.ingredients = std::move(ingredients);
    out.stage = c.stage;
    out.digest = sha256(bytes);
    return out;
}

}  // namespace

std::string token_vocab_path(const std::string& checkpoint) { return checkpoint + ".tokens.txt"; }
std::string ingredient_vocab_path(const std::string& checkpoint) { return checkpoint + ".ingredients.tsv"; }

std::string serialize_checkpoint(const Checkpoint& c) {
    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(c.config.to_json());
    w.u32(static_cast<std::uint32_t>(c.stage));
    w.bytes(c.token_digest.data(), c.token_digest.size());
    w.bytes(c.ingredient_digest.data(), c.ingredient_digest.size());
    w.u32(static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, m] : c.tensors) {
        w.str(name);
        w.u8(kDtypeF64);
        w.u32(2);
        w.u32(static_cast<std::uint32_t>(m.rows));
        w.u32(static_cast<std::uint32_t>(m.cols));
        w.bytes(m.data.data(), m.data.size() * sizeof(double));
    }
    return w.take();
}

Checkpoint parse_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError(CheckpointError::Kind::Corrupt, "not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::Version,
                              "checkpoint version " + std::to_string(version) + ", expected " +
                                  std::to_string(kCheckpointVersion));
    Checkpoint c;
    try {
        c.config = ModelConfig::from_json(r.str());
    } catch (const std::invalid_argument& e) {
        throw CheckpointError(CheckpointError::Kind::Corrupt, e.what());
    }
    c.stage = static_cast<int>(r.u32());
    r.bytes(c.token_digest.data(), c.token_digest.size());
    r.bytes(c.ingredient_digest.data(), c.ingredient_digest.size());
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        if (r.u8() != kDtypeF64) throw CheckpointError(CheckpointError::Kind::Corrupt, "unknown dtype for " + name);
        if (r.u32() != 2) throw CheckpointError(CheckpointError::Kind::Corrupt, "unexpected rank for " + name);
        const std::uint32_t rows = r.u32(), cols = r.u32();
        if (static_cast<std::uint64_t>(rows) * cols * sizeof(double) > bytes.size())
            throw CheckpointError(CheckpointError::Kind::Corrupt, "tensor " + name + " larger than the file");
        Matrix m(static_cast<int>(rows), static_cast<int>(cols));
        r.bytes(m.data.data(), m.data.size() * sizeof(double));
        c.tensors.emplace_back(std::move(name), std::move(m));
    }
    if (!r.done()) throw CheckpointError(CheckpointError::Kind::Corrupt, "trailing bytes after the tensor table");
    return c;
}

Checkpoint snapshot(const Model& m, int stage, const TokenVocab& tokens, const IngredientVocab& ingredients) {
    Checkpoint c;
    c.config = m.config();
    c.stage = stage;
    c.token_digest = tokens.digest();
    c.ingredient_digest = ingredients.digest();
    for (const auto& p : m.parameters()) c.tensors.emplace_back(p.name, p.value);
    return c;
}

void save_checkpoint(const Model& m, int stage, const TokenVocab& tokens, const IngredientVocab& ingredients,
                     const std::string& path) {
    const std::string bytes = serialize_checkpoint(snapshot(m, stage, tokens, ingredients));
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write checkpoint: " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::Io, "write failed: " + path);
    tokens.save(token_vocab_path(path));
    ingredients.save(ingredient_vocab_path(path));
}

LoadedModel load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    const Checkpoint c = parse_checkpoint(bytes);
    TokenVocab tokens;
    IngredientVocab ingredients;
    try {
        tokens = TokenVocab::load(token_vocab_path(path));
        ingredients = IngredientVocab::load(ingredient_vocab_path(path));
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointError::Kind::Io, e.what());
    }
    return build(c, bytes, std::move(tokens), std::move(ingredients));
}

LoadedModel load_checkpoint(const std::string& path, const TokenVocab& tokens, const IngredientVocab& ingredients) {
    const std::string bytes = read_file(path);
    return build(parse_checkpoint(bytes), bytes, tokens, ingredients);
}

Digest parameter_digest(const Model& m, const std::string& prefix) {
    std::string blob;
    for (const auto& p : m.parameters()) {
        if (!p.name.starts_with(prefix)) continue;
        blob += p.name;
        blob.append(reinterpret_cast<const char*>(p.value.data.data()), p.value.data.size() * sizeof(double));
    }
    return sha256(blob);
}

}  // namespace recipecrit
