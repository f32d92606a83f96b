#include "recipecrit/text.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace recipecrit {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isalnum(u)) {
            cur.push_back(static_cast<char>(std::tolower(u)));
            continue;
        }
        if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
        if (!std::isspace(u)) out.emplace_back(1, ch);
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) out.push_back(' ');
        out += t;
    }
    return out;
}

Digest sha256(std::string_view bytes) {
    Digest d{};
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx, d.data(), &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("sha256 failed");
    }
    EVP_MD_CTX_free(ctx);
    return d;
}

std::string to_hex(const Digest& d) {
    static const char* hex = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (auto b : d) {
        s.push_back(hex[b >> 4]);
        s.push_back(hex[b & 15]);
    }
    return s;
}

namespace {
const std::vector<std::string> kSpecials{"<pad>", "<mask>", "<bos>", "<eos>", "<unk>", "<sep>"};
}

TokenVocab::TokenVocab() : TokenVocab(kSpecials) {}

TokenVocab::TokenVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < kSpecials.size() ||
        !std::equal(kSpecials.begin(), kSpecials.end(), tokens_.begin()))
        throw std::invalid_argument("token vocabulary must start with the special tokens");
    for (int i = 0; i < size(); ++i) {
        if (!index_.emplace(tokens_[i], i).second)
            throw std::invalid_argument("duplicate token in vocabulary: " + tokens_[i]);
    }
}

TokenVocab TokenVocab::build(const std::vector<std::vector<std::string>>& tokenized, int min_count,
                             int max_size) {
    std::map<std::string, int> counts;
    for (const auto& sent : tokenized)
        for (const auto& t : sent) ++counts[t];
    std::vector<std::pair<std::string, int>> kept;
    for (auto& [tok, c] : counts)
        if (c >= min_count) kept.emplace_back(tok, c);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = kSpecials;
    for (auto& [tok, c] : kept) {
        if (max_size > 0 && static_cast<int>(tokens.size()) >= max_size) break;
        tokens.push_back(tok);
    }
    return TokenVocab(std::move(tokens));
}

int TokenVocab::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<int> TokenVocab::encode(std::string_view sentence) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(sentence)) ids.push_back(id(t));
    return ids;
}

std::string TokenVocab::decode(const std::vector<int>& ids) const {
    std::vector<std::string> toks;
    toks.reserve(ids.size());
    for (int i : ids) toks.push_back(token(i));
    return detokenize(toks);
}

Digest TokenVocab::digest() const {
    std::string blob;
    for (const auto& t : tokens_) {
        blob += t;
        blob.push_back('\n');
    }
    return sha256(blob);
}

void TokenVocab::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write token vocabulary: " + path);
    for (const auto& t : tokens_) out << t << '\n';
}

TokenVocab TokenVocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read token vocabulary: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return TokenVocab(std::move(tokens));
}

}  // namespace recipecrit
