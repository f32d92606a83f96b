#pragma once

// Binary checkpoint, little-endian:
//   "RCPT" | u32 version | u32 n + config JSON | u32 stage
//   | 32-byte token vocab digest | 32-byte ingredient vocab digest
//   | u32 tensor count | tensors: u32 n + name, u8 dtype, u32 ndim, u32 dims..., raw data
// The vocabularies are stored next to the checkpoint as <path>.tokens.txt and
// <path>.ingredients.tsv.

#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recipecrit/corpus.hpp"
#include "recipecrit/model.hpp"
#include "recipecrit/text.hpp"

namespace recipecrit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { Io, Corrupt, Version, VocabMismatch };
    CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct Checkpoint {
    ModelConfig config;
    int stage = 0;
    Digest token_digest{};
    Digest ingredient_digest{};
    std::vector<std::pair<std::string, Matrix>> tensors;
};

std::string token_vocab_path(const std::string& checkpoint);
std::string ingredient_vocab_path(const std::string& checkpoint);

std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(const std::string& bytes);

Checkpoint snapshot(const Model& m, int stage, const TokenVocab& tokens, const IngredientVocab& ingredients);
// Writes the checkpoint and both vocabulary files.
void save_checkpoint(const Model& m, int stage, const TokenVocab& tokens, const IngredientVocab& ingredients,
                     const std::string& path);

struct LoadedModel {
    std::unique_ptr<Model> model;
    TokenVocab tokens;
    IngredientVocab ingredients;
    int stage = 0;
    Digest digest{};  // of the checkpoint file
};

// Loads the checkpoint with the vocabularies stored beside it.
LoadedModel load_checkpoint(const std::string& path);
// Loads against caller-provided vocabularies; their digests must match.
LoadedModel load_checkpoint(const std::string& path, const TokenVocab& tokens, const IngredientVocab& ingredients);

// Digest over the values of every parameter whose name starts with prefix.
Digest parameter_digest(const Model& m, const std::string& prefix = "");

}  // namespace recipecrit
