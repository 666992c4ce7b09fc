#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "moeroute/error.hpp"
#include "moeroute/rng.hpp"

namespace moeroute {

// ---- tokenizer ----

/// Byte-level tokenizer: every byte is its own id in [0, 256).
inline std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id > 255) throw IndexError("token id " + std::to_string(id) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

inline constexpr int kVocabSize = 256;
/// Answer slot j is fed to the experts as byte kSlotBase + j.
inline constexpr int kSlotBase = 1;
inline constexpr std::size_t kMaxAnswer = 16;

inline int slot_token(std::size_t j) { return kSlotBase + static_cast<int>(j); }
inline bool is_slot_token(int id) { return id >= kSlotBase && id < kSlotBase + static_cast<int>(kMaxAnswer); }

// ---- records ----

struct QAPair {
    std::string question;
    std::string answer;
    std::string domain;

    bool operator==(const QAPair&) const = default;
};

/// Maps domain identifiers onto the binary router feature d.
struct DomainMap {
    std::map<std::string, int> ids{{"long", 0}, {"short", 1}};

    int lookup(const std::string& name) const {
        auto it = ids.find(name);
        if (it == ids.end()) {
            std::string known;
            for (const auto& [k, v] : ids) known += (known.empty() ? "" : ", ") + k;
            throw ParseError("unknown domain '" + name + "'; known domains: " + known);
        }
        return it->second;
    }
};

// ---- synthetic corpus ----

enum class TaskFamily { CopyWithLookup, PatternQA };

inline std::string to_string(TaskFamily f) { return f == TaskFamily::CopyWithLookup ? "copy-with-lookup" : "pattern-qa"; }

inline TaskFamily task_family_from_string(const std::string& s) {
    if (s == "copy-with-lookup") return TaskFamily::CopyWithLookup;
    if (s == "pattern-qa") return TaskFamily::PatternQA;
    throw ConfigError("unknown task family '" + s + "' (expected copy-with-lookup or pattern-qa)");
}

struct SyntheticSpec {
    double long_fraction = 0.95;
    std::size_t long_min = 256;
    std::size_t long_max = 1024;
    std::size_t short_min = 8;
    std::size_t short_max = 64;
    std::size_t vocab = kVocabSize;
    TaskFamily family = TaskFamily::CopyWithLookup;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(long_fraction >= 0.0 && long_fraction <= 1.0)) throw ConfigError("long_fraction must lie in [0, 1]");
        if (long_min >= long_max || short_min >= short_max) throw ConfigError("length ranges must be non-degenerate");
        if (short_min < 8 || long_min < 8) throw ConfigError("sequences need at least 8 tokens");
        if (vocab != kVocabSize) throw ConfigError("only the 256-entry byte vocabulary is supported");
    }
};

namespace detail {

inline char random_letter(SeededRng& rng) { return static_cast<char>('a' + rng.below(26)); }

inline std::string random_letters(SeededRng& rng, std::size_t n) {
    std::string s(n, 'a');
    for (auto& c : s) c = random_letter(rng);
    return s;
}

inline char shift_letter(char c) { return static_cast<char>('a' + (c - 'a' + 1) % 26); }

inline constexpr std::size_t kQueryRepeats = 4;

// Long contexts end in a local lookup: '?' then the query letter a few times
// right before the slot, so a causal recurrence with any decay can answer it
// no matter how long the filler is.
inline QAPair long_item(SeededRng& rng, std::size_t total, TaskFamily fam) {
    const std::size_t filler = total - 2 - kQueryRepeats;  // '?', queries, one answer slot
    const char q = random_letter(rng);
    std::string question = random_letters(rng, filler) + "?" + std::string(kQueryRepeats, q);
    const char a = fam == TaskFamily::CopyWithLookup ? shift_letter(q) : static_cast<char>(q - 'a' + 'A');
    return {std::move(question), std::string(1, a), "long"};
}

// Short queries need content from the far end of the context (its opening
// letters, or values bound to queried keys), which rewards global attention.
inline QAPair short_item(SeededRng& rng, std::size_t total, TaskFamily fam) {
    if (fam == TaskFamily::CopyWithLookup) {
        std::size_t k = static_cast<std::size_t>(rng.between(2, 4));
        const std::size_t ctx = total - 1 - k;
        k = std::min(k, ctx);
        std::string context = random_letters(rng, total - 1 - k);
        return {context + "?", context.substr(0, k), "short"};
    }
    // pattern QA: key/value pairs, then two queried keys.
    const std::size_t pairs = std::max<std::size_t>(2, (total - 5) / 2);
    std::string keys;
    while (keys.size() < std::min<std::size_t>(pairs, 26)) {
        const char c = random_letter(rng);
        if (keys.find(c) == std::string::npos) keys.push_back(c);
    }
    std::string context, values;
    for (char k : keys) {
        const char v = static_cast<char>('0' + rng.below(10));
        context += k;
        context += v;
        values += v;
    }
    const auto i = rng.below(keys.size());
    auto j = rng.below(keys.size());
    if (j == i) j = (j + 1) % keys.size();
    std::string question = context + "?" + keys[i] + keys[j] + "=";
    return {std::move(question), std::string{values[i], values[j]}, "short"};
}

}  // namespace detail

/// Seeded dual-regime corpus: a `long_fraction` share of long, easy contexts
/// and the remainder short, harder queries. Lengths count question plus
/// answer tokens.
inline std::vector<QAPair> gen_synthetic(const SyntheticSpec& spec, std::size_t n) {
    spec.validate();
    if (n == 0) throw ContractError("gen_synthetic needs n >= 1");
    SeededRng rng(spec.seed);
    std::vector<QAPair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (rng.bernoulli(spec.long_fraction)) {
            const auto len = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.long_min),
                                                                   static_cast<std::int64_t>(spec.long_max)));
            out.push_back(detail::long_item(rng, len, spec.family));
        } else {
            const auto len = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.short_min),
                                                                   static_cast<std::int64_t>(spec.short_max)));
            out.push_back(detail::short_item(rng, len, spec.family));
        }
    }
    return out;
}

// ---- JSONL ingestion ----

inline QAPair parse_qa_line(const std::string& line, std::size_t line_no, const DomainMap& domains) {
    const auto where = "line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ParseError(where + "expected a JSON object");
    QAPair p;
    for (auto [key, dst] : {std::pair{"question", &p.question}, std::pair{"answer", &p.answer}, std::pair{"domain", &p.domain}}) {
        if (!j.contains(key) || !j[key].is_string()) throw ParseError(where + "missing string field '" + key + "'");
        *dst = j[key].get<std::string>();
    }
    if (p.question.empty() || p.answer.empty()) throw ParseError(where + "question and answer must be nonempty");
    try {
        domains.lookup(p.domain);
    } catch (const ParseError& e) {
        throw ParseError(where + e.what());
    }
    return p;
}

/// One {"question", "answer", "domain"} object per line, in file order.
/// Blank lines are skipped.
inline std::vector<QAPair> load_jsonl(const std::string& path, const DomainMap& domains = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<QAPair> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(parse_qa_line(line, line_no, domains));
    }
    return out;
}

inline std::string to_jsonl(const std::vector<QAPair>& pairs) {
    std::string out;
    for (const auto& p : pairs) {
        nlohmann::json j{{"question", p.question}, {"answer", p.answer}, {"domain", p.domain}};
        out += j.dump() + "\n";
    }
    return out;
}

/// FNV-1a, used for dataset manifests and config hashes.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---- splits ----

struct DatasetSplits {
    std::vector<std::size_t> train, valid, test;
};

/// Seeded shuffle, then 80/10/10 with train and valid rounded down.
inline DatasetSplits split_dataset(std::size_t n, std::uint64_t seed) {
    if (n < 10) throw ContractError("split_dataset needs at least 10 pairs, got " + std::to_string(n));
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    SeededRng rng(seed);
    rng.shuffle(idx);
    const std::size_t n_train = n * 8 / 10, n_valid = n / 10;
    DatasetSplits s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.valid.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                   idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
    s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), idx.end());
    return s;
}

// ---- model inputs ----

inline constexpr std::size_t kDefaultLengthCap = 1024;

/// Normalized length min(L, L_max) / L_max.
inline double length_feature(std::size_t length, std::size_t length_cap = kDefaultLengthCap) {
    if (length_cap == 0) throw ContractError("length cap must be positive");
    return static_cast<double>(std::min(length, length_cap)) / static_cast<double>(length_cap);
}

/// A QA pair as the experts see it: question bytes followed by one slot
/// token per answer byte. Targets are the answer bytes at those slots.
struct Example {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::size_t answer_offset = 0;
    int domain = 0;

    std::size_t length() const { return tokens.size(); }
    std::size_t answer_length() const { return targets.size(); }
    std::vector<int> question_tokens() const {
        return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(answer_offset)};
    }
};

struct EncodeOptions {
    std::size_t max_len = 1024;
    DomainMap domains{};
};

/// Truncates the question from the left to fit max_len and the answer to
/// kMaxAnswer bytes.
inline Example encode(const QAPair& pair, const EncodeOptions& opt = {}) {
    Example ex;
    ex.domain = opt.domains.lookup(pair.domain);
    auto answer = tokenize(pair.answer);
    if (answer.empty()) throw ContractError("answer must be nonempty");
    if (answer.size() > kMaxAnswer) answer.resize(kMaxAnswer);
    if (opt.max_len <= answer.size()) throw ConfigError("max_len too small for the answer");
    auto question = tokenize(pair.question);
    const std::size_t room = opt.max_len - answer.size();
    if (question.size() > room) question.erase(question.begin(), question.end() - static_cast<std::ptrdiff_t>(room));
    ex.tokens = std::move(question);
    ex.answer_offset = ex.tokens.size();
    for (std::size_t j = 0; j < answer.size(); ++j) ex.tokens.push_back(slot_token(j));
    ex.targets = std::move(answer);
    return ex;
}

}  // namespace moeroute
