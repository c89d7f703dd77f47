#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "numprobe/contexts.hpp"
#include "numprobe/errors.hpp"

namespace numprobe {

// Word-level vocabulary: ids 0..999 are the integers themselves, followed by
// special/operator tokens and then an ordered list of filler words.
class Tokenizer {
public:
    static constexpr int n_numbers = 1000;

    static const std::vector<std::string>& specials() {
        static const std::vector<std::string> s{"<pad>", "<bos>", "+", "-", "*", "/", "="};
        return s;
    }

    Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

    explicit Tokenizer(std::vector<std::string> words) {
        for (const auto& s : specials()) {
            add(s);
        }
        for (auto& w : words) {
            if (!ids_.count(w) && !is_number(w)) {
                add(w);
            }
        }
    }

    static Tokenizer from_bank(const TemplateBank& bank) { return Tokenizer(bank.vocabulary()); }

    int vocab_size() const { return n_numbers + static_cast<int>(words_.size()); }

    // Extra words in id order (specials first), used for checkpointing.
    const std::vector<std::string>& words() const { return words_; }

    static bool is_number(std::string_view s) {
        if (s.empty() || s.size() > 3) {
            return false;
        }
        for (char c : s) {
            if (c < '0' || c > '9') {
                return false;
            }
        }
        return s.size() == 1 || s[0] != '0';
    }

    int id(std::string_view token) const {
        if (is_number(token)) {
            return std::stoi(std::string(token));
        }
        const auto it = ids_.find(std::string(token));
        if (it == ids_.end()) {
            throw TokenError("unknown token '" + std::string(token) + "'");
        }
        return it->second;
    }

    int pad_id() const { return id("<pad>"); }
    int bos_id() const { return id("<bos>"); }

    std::string token(int id) const {
        if (id >= 0 && id < n_numbers) {
            return std::to_string(id);
        }
        const auto w = static_cast<std::size_t>(id - n_numbers);
        if (id < 0 || w >= words_.size()) {
            throw TokenError("token id " + std::to_string(id) + " outside vocabulary");
        }
        return words_[w];
    }

    std::vector<int> encode(std::span<const std::string> tokens) const {
        std::vector<int> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) {
            out.push_back(id(t));
        }
        return out;
    }

    std::vector<std::string> decode(std::span<const int> ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) {
            out.push_back(token(i));
        }
        return out;
    }

private:
    void add(const std::string& w) {
        ids_.emplace(w, n_numbers + static_cast<int>(words_.size()));
        words_.push_back(w);
    }

    std::vector<std::string> words_;
    std::unordered_map<std::string, int> ids_;
};

}  // namespace numprobe
