#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "numprobe/errors.hpp"
#include "numprobe/rng.hpp"

namespace numprobe {

// ---------------------------------------------------------------------------
// Multi-token numbers: 3-digit chunks, most significant first.
// ---------------------------------------------------------------------------

inline constexpr std::uint64_t multitoken_limit = 1'000'000'000'000'000'000ULL;  // 10^18

inline std::vector<int> encode_multitoken(std::uint64_t value) {
    if (value >= multitoken_limit) {
        throw RangeError("value " + std::to_string(value) + " needs more than six 3-digit chunks");
    }
    std::vector<int> chunks;
    do {
        chunks.insert(chunks.begin(), static_cast<int>(value % 1000));
        value /= 1000;
    } while (value > 0);
    return chunks;
}

inline std::uint64_t decode_multitoken(std::span<const int> chunks) {
    if (chunks.empty() || chunks.size() > 6) {
        throw RangeError("chunk list must hold 1..6 chunks");
    }
    std::uint64_t v = 0;
    for (int c : chunks) {
        if (c < 0 || c > 999) {
            throw RangeError("chunk " + std::to_string(c) + " outside 0..999");
        }
        v = v * 1000 + static_cast<std::uint64_t>(c);
    }
    return v;
}

// Decimal rendering from chunks: leading chunk bare, the rest zero-padded.
inline std::string chunks_to_decimal(std::span<const int> chunks) {
    std::string out;
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        std::string part = std::to_string(chunks[i]);
        if (i > 0) {
            part.insert(0, 3 - part.size(), '0');
        }
        out += part;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prompt records
// ---------------------------------------------------------------------------

enum class ContextType { math, culinary, temporal, medical, arithmetic_word };

inline std::string_view context_name(ContextType c) {
    switch (c) {
        case ContextType::math: return "math";
        case ContextType::culinary: return "culinary";
        case ContextType::temporal: return "temporal";
        case ContextType::medical: return "medical";
        case ContextType::arithmetic_word: return "arithmetic_word";
    }
    return "?";
}

inline ContextType parse_context(std::string_view s) {
    for (auto c : {ContextType::math, ContextType::culinary, ContextType::temporal,
                   ContextType::medical, ContextType::arithmetic_word}) {
        if (context_name(c) == s) {
            return c;
        }
    }
    throw ConfigError("unknown context type '" + std::string(s) + "'");
}

inline const std::vector<ContextType>& natural_domains() {
    static const std::vector<ContextType> d{ContextType::culinary, ContextType::temporal,
                                            ContextType::medical, ContextType::arithmetic_word};
    return d;
}

struct NumberSpan {
    std::vector<std::size_t> positions;  // token positions, one per chunk
    std::uint64_t value = 0;
    std::vector<int> chunks;

    friend bool operator==(const NumberSpan&, const NumberSpan&) = default;
};

enum class MathOp { add, sub, mul, div };

inline std::string_view op_symbol(MathOp op) {
    switch (op) {
        case MathOp::add: return "+";
        case MathOp::sub: return "-";
        case MathOp::mul: return "*";
        case MathOp::div: return "/";
    }
    return "?";
}

inline MathOp parse_op(std::string_view s) {
    if (s == "add" || s == "+") return MathOp::add;
    if (s == "sub" || s == "-") return MathOp::sub;
    if (s == "mul" || s == "*") return MathOp::mul;
    if (s == "div" || s == "/") return MathOp::div;
    throw ConfigError("unknown operation '" + std::string(s) + "'");
}

struct PromptRecord {
    std::string prompt_id;
    std::vector<std::string> tokens;
    std::vector<NumberSpan> number_spans;
    ContextType context_type = ContextType::math;
    std::optional<std::int64_t> target;
    std::vector<std::int64_t> operands;  // math prompts: x1, x2

    friend bool operator==(const PromptRecord&, const PromptRecord&) = default;
};

// Single-token value for an integer in 0..999.
inline std::string number_token(std::int64_t v) { return std::to_string(v); }

// ---------------------------------------------------------------------------
// Math prompts: [x1] [op] [x2] [=]
// ---------------------------------------------------------------------------

struct OperandRange {
    std::int64_t lo = 0;
    std::int64_t hi = 999;
};

inline std::optional<std::int64_t> apply_op(MathOp op, std::int64_t a, std::int64_t b) {
    switch (op) {
        case MathOp::add: return a + b;
        case MathOp::sub: return a - b;
        case MathOp::mul: return a * b;
        case MathOp::div:
            if (b == 0 || a % b != 0) {
                return std::nullopt;
            }
            return a / b;
    }
    return std::nullopt;
}

inline bool single_token_value(std::int64_t v) { return v >= 0 && v <= 999; }

// Draws (x1, x2) whose result is a single-token integer (exact quotient for
// division). Returns nullopt when the drawn first operand admits no partner.
inline std::optional<std::pair<std::int64_t, std::int64_t>> draw_operands(MathOp op, OperandRange r,
                                                                          Rng& rng) {
    auto pick = [&](std::int64_t lo, std::int64_t hi) -> std::optional<std::int64_t> {
        if (lo > hi) {
            return std::nullopt;
        }
        return rng.integer(lo, hi);
    };
    switch (op) {
        case MathOp::add: {
            const auto a = rng.integer(r.lo, r.hi);
            const auto b = pick(std::max(r.lo, -a), std::min(r.hi, 999 - a));
            return b ? std::optional(std::pair{a, *b}) : std::nullopt;
        }
        case MathOp::sub: {
            const auto a = rng.integer(r.lo, r.hi);
            const auto b = pick(std::max(r.lo, a - 999), std::min(r.hi, a));
            return b ? std::optional(std::pair{a, *b}) : std::nullopt;
        }
        case MathOp::mul: {
            const auto a = rng.integer(r.lo, r.hi);
            const std::int64_t cap = a == 0 ? r.hi : std::min(r.hi, 999 / a);
            const auto b = pick(std::max<std::int64_t>(r.lo, 0), cap);
            if (a < 0) {
                return std::nullopt;
            }
            return b ? std::optional(std::pair{a, *b}) : std::nullopt;
        }
        case MathOp::div: {
            const auto b = pick(std::max<std::int64_t>(r.lo, 1), r.hi);
            if (!b) {
                return std::nullopt;
            }
            const std::int64_t qlo = std::max<std::int64_t>(0, (std::max<std::int64_t>(r.lo, 0) + *b - 1) / *b);
            const std::int64_t qhi = std::min<std::int64_t>(999, r.hi / *b);
            const auto q = pick(qlo, qhi);
            return q ? std::optional(std::pair{*q * *b, *b}) : std::nullopt;
        }
    }
    return std::nullopt;
}

inline PromptRecord make_math_prompt(MathOp op, std::int64_t x1, std::int64_t x2, std::string id) {
    PromptRecord p;
    p.prompt_id = std::move(id);
    p.context_type = ContextType::math;
    p.tokens = {number_token(x1), std::string(op_symbol(op)), number_token(x2), "="};
    p.number_spans = {{{0}, static_cast<std::uint64_t>(x1), {static_cast<int>(x1)}},
                      {{2}, static_cast<std::uint64_t>(x2), {static_cast<int>(x2)}}};
    p.operands = {x1, x2};
    const auto r = apply_op(op, x1, x2);
    if (r && single_token_value(*r)) {
        p.target = *r;
    }
    return p;
}

// Math prompts with single-token results. Division draws exact quotients.
inline std::vector<PromptRecord> gen_math_prompts(MathOp op, OperandRange range, std::size_t n,
                                                  std::uint64_t seed) {
    if (range.lo > range.hi || range.lo < 0 || range.hi > 999) {
        throw ConfigError("operand range [" + std::to_string(range.lo) + ", " +
                          std::to_string(range.hi) + "] must be a non-empty subrange of 0..999");
    }
    Rng rng(seed);
    std::vector<PromptRecord> out;
    out.reserve(n);
    std::size_t misses = 0;
    while (out.size() < n) {
        const auto xy = draw_operands(op, range, rng);
        if (!xy) {
            if (++misses > 1000 + 100 * n) {
                throw ConfigError("operand range admits no single-token results for this operation");
            }
            continue;
        }
        out.push_back(make_math_prompt(op, xy->first, xy->second,
                                       std::string(context_name(ContextType::math)) + "-" +
                                           std::to_string(seed) + "-" + std::to_string(out.size())));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Natural-language prompts from template files
// ---------------------------------------------------------------------------

inline constexpr std::string_view slot_token = "{N}";

// Domain -> templates, each a token list containing at least one slot.
class TemplateBank {
public:
    static TemplateBank load(const std::filesystem::path& dir) {
        TemplateBank bank;
        for (auto domain : natural_domains()) {
            const auto path = dir / (std::string(context_name(domain)) + ".txt");
            std::ifstream in(path);
            if (!in) {
                throw ConfigError("missing template file " + path.string());
            }
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty() || line[0] == '#') {
                    continue;
                }
                std::istringstream ss(line);
                std::vector<std::string> toks;
                for (std::string t; ss >> t;) {
                    toks.push_back(t);
                }
                if (std::find(toks.begin(), toks.end(), slot_token) == toks.end()) {
                    throw ConfigError(path.string() + ": template without {N} slot: " + line);
                }
                bank.templates_[domain].push_back(std::move(toks));
            }
        }
        return bank;
    }

    void add(ContextType domain, std::vector<std::string> tokens) {
        templates_[domain].push_back(std::move(tokens));
    }

    const std::vector<std::vector<std::string>>& of(ContextType domain) const {
        static const std::vector<std::vector<std::string>> none;
        const auto it = templates_.find(domain);
        return it == templates_.end() ? none : it->second;
    }

    // Every non-slot word used by any template, sorted and unique.
    std::vector<std::string> vocabulary() const {
        std::vector<std::string> words;
        for (const auto& [_, list] : templates_) {
            for (const auto& t : list) {
                for (const auto& w : t) {
                    if (w != slot_token) {
                        words.push_back(w);
                    }
                }
            }
        }
        std::sort(words.begin(), words.end());
        words.erase(std::unique(words.begin(), words.end()), words.end());
        return words;
    }

private:
    std::map<ContextType, std::vector<std::vector<std::string>>> templates_;
};

using ValueSampler = std::function<std::uint64_t(Rng&)>;

// Uniform over the single-token integers 0..999.
inline ValueSampler uniform_single_token() {
    return [](Rng& rng) { return rng.below(1000); };
}

// Chunk count uniform over 2..6, then a uniform value with exactly that many chunks.
inline ValueSampler balanced_multitoken() {
    return [](Rng& rng) {
        const auto chunks = 2 + rng.below(5);
        std::uint64_t lo = 1;
        for (std::uint64_t i = 1; i < chunks; ++i) {
            lo *= 1000;
        }
        return lo + rng.below(lo * 1000 - lo);
    };
}

inline std::vector<PromptRecord> gen_natural_prompts(const TemplateBank& bank, ContextType domain,
                                                     std::size_t n, const ValueSampler& sampler,
                                                     std::uint64_t seed) {
    const auto& templates = bank.of(domain);
    if (templates.empty()) {
        throw ConfigError("no templates for domain " + std::string(context_name(domain)));
    }
    Rng rng(seed);
    std::vector<PromptRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& tpl = templates[rng.below(templates.size())];
        PromptRecord p;
        p.prompt_id = std::string(context_name(domain)) + "-" + std::to_string(seed) + "-" + std::to_string(i);
        p.context_type = domain;
        for (const auto& w : tpl) {
            if (w != slot_token) {
                p.tokens.push_back(w);
                continue;
            }
            NumberSpan span;
            span.value = sampler(rng);
            span.chunks = encode_multitoken(span.value);
            for (int c : span.chunks) {
                span.positions.push_back(p.tokens.size());
                p.tokens.push_back(number_token(c));
            }
            p.number_spans.push_back(std::move(span));
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines interchange
// ---------------------------------------------------------------------------

inline nlohmann::json prompt_to_json(const PromptRecord& p) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : p.number_spans) {
        spans.push_back({{"positions", s.positions}, {"value", s.value}, {"chunks", s.chunks}});
    }
    nlohmann::json j{{"prompt_id", p.prompt_id},
                     {"tokens", p.tokens},
                     {"number_spans", spans},
                     {"context_type", context_name(p.context_type)},
                     {"target", nullptr},
                     {"operands", p.operands}};
    if (p.target) {
        j["target"] = *p.target;
    }
    return j;
}

inline PromptRecord prompt_from_json(const nlohmann::json& j) {
    try {
        PromptRecord p;
        p.prompt_id = j.at("prompt_id").get<std::string>();
        p.tokens = j.at("tokens").get<std::vector<std::string>>();
        p.context_type = parse_context(j.at("context_type").get<std::string>());
        for (const auto& s : j.at("number_spans")) {
            NumberSpan span{s.at("positions").get<std::vector<std::size_t>>(),
                            s.at("value").get<std::uint64_t>(), s.at("chunks").get<std::vector<int>>()};
            if (chunks_to_decimal(span.chunks) != std::to_string(span.value)) {
                throw SchemaError("span chunks do not spell value " + std::to_string(span.value));
            }
            p.number_spans.push_back(std::move(span));
        }
        if (j.contains("target") && !j["target"].is_null()) {
            p.target = j["target"].get<std::int64_t>();
        }
        if (j.contains("operands")) {
            p.operands = j["operands"].get<std::vector<std::int64_t>>();
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("prompt record: ") + e.what());
    }
}

inline void write_prompts_jsonl(const std::filesystem::path& path, std::span<const PromptRecord> prompts) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw StoreError("cannot write " + path.string());
    }
    for (const auto& p : prompts) {
        out << prompt_to_json(p).dump() << '\n';
    }
}

inline std::vector<PromptRecord> read_prompts_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw StoreError("cannot open " + path.string());
    }
    std::vector<PromptRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(prompt_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError(path.string() + ": " + e.what());
        }
    }
    return out;
}

}  // namespace numprobe
