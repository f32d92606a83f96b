#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace recipecrit {

// Lowercases and splits text into maximal alphanumeric runs; every other
// non-space character becomes a token of its own.
std::vector<std::string> tokenize(std::string_view text);

// Joins tokens with single spaces.
std::string detokenize(const std::vector<std::string>& tokens);

using Digest = std::array<std::uint8_t, 32>;
Digest sha256(std::string_view bytes);
std::string to_hex(const Digest& d);

// Word vocabulary for the sentence encoder and the instruction decoder.
class TokenVocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kBos = 2;
    static constexpr int kEos = 3;
    static constexpr int kUnk = 4;
    // Separates instruction steps in decoder sequences.
    static constexpr int kSep = 5;
    static constexpr int kNumSpecials = 6;

    TokenVocab();
    explicit TokenVocab(std::vector<std::string> tokens);

    // Words seen at least min_count times, most frequent first, ties lexicographic.
    static TokenVocab build(const std::vector<std::vector<std::string>>& tokenized, int min_count,
                            int max_size = 0);

    [[nodiscard]] int size() const { return static_cast<int>(tokens_.size()); }
    [[nodiscard]] int id(const std::string& token) const;
    [[nodiscard]] const std::string& token(int id) const { return tokens_.at(id); }
    [[nodiscard]] const std::vector<std::string>& tokens() const { return tokens_; }

    [[nodiscard]] std::vector<int> encode(std::string_view sentence) const;
    [[nodiscard]] std::string decode(const std::vector<int>& ids) const;

    [[nodiscard]] Digest digest() const;
    void save(const std::string& path) const;
    static TokenVocab load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace recipecrit
