// Corpus preparation: rule-based filtering, exact deduplication, and
// MinHash + LSH fuzzy deduplication over byte shingles.
//
// Shingles are FNV-1a 64 hashes of k-byte windows. MinHash component i is
// min over shingles of splitmix64(shingle ^ mix64(seed, i)); the empty set
// maps to an all-max sentinel. LSH splits signatures into b bands of r rows;
// documents identical on any full band become candidates, candidates at or
// above the Jaccard threshold are clustered with union-find, and the
// lexicographically smallest id survives per cluster.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"

#include "infill/common.hpp"
#include "infill/rng.hpp"

namespace infill {

// ----------------------------- documents -----------------------------

struct Document {
    std::string id;
    std::string url;
    std::string text;
    nlohmann::json meta = nlohmann::json::object();
};

inline std::vector<Document> read_jsonl(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    INFILL_CHECK_DATA(f.good(), "jsonl: cannot open ", path);
    std::vector<Document> docs;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        INFILL_CHECK_DATA(j.is_object(), "jsonl: malformed object at ", path, ":", lineno);
        Document d;
        INFILL_CHECK_DATA(j.contains("id") && j.contains("text"),
                          "jsonl: missing id/text at ", path, ":", lineno);
        d.id = j.at("id").get<std::string>();
        d.text = j.at("text").get<std::string>();
        d.url = j.value("url", std::string{});
        d.meta = j.value("meta", nlohmann::json::object());
        docs.push_back(std::move(d));
    }
    return docs;
}

inline void write_jsonl(const std::string &path, std::span<const Document> docs) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    INFILL_CHECK_DATA(f.good(), "jsonl: cannot open ", path, " for writing");
    for (const Document &d : docs) {
        nlohmann::json j{{"id", d.id}, {"url", d.url}, {"text", d.text}, {"meta", d.meta}};
        f << j.dump() << '\n';
    }
    INFILL_CHECK_DATA(f.good(), "jsonl: write failed for ", path);
}

// ----------------------------- filtering -----------------------------

struct FilterRules {
    std::vector<std::string> url_blacklist;     // substring patterns
    std::vector<std::string> keyword_blocklist; // substring patterns over text
    int64_t min_length = 0;                     // UTF-8 bytes
    double max_symbol_ratio = 1.0; // non-alphanumeric, non-whitespace share
};

struct FilterDecision {
    bool keep = true;
    std::string reason; // first failing rule: url | keyword | length | symbol_ratio
};

// Pluggable stand-in for a quality classifier; evaluated after the rules.
using QualityPredicate = std::function<bool(const Document &)>;

inline FilterDecision rule_filter(const Document &doc, const FilterRules &rules) {
    for (const std::string &pattern : rules.url_blacklist) {
        if (!pattern.empty() && doc.url.find(pattern) != std::string::npos) {
            return {false, "url"};
        }
    }
    for (const std::string &keyword : rules.keyword_blocklist) {
        if (!keyword.empty() && doc.text.find(keyword) != std::string::npos) {
            return {false, "keyword"};
        }
    }
    if (static_cast<int64_t>(doc.text.size()) < rules.min_length) {
        return {false, "length"};
    }
    if (rules.max_symbol_ratio < 1.0 && !doc.text.empty()) {
        int64_t symbols = 0;
        for (const char c : doc.text) {
            const unsigned char u = static_cast<unsigned char>(c);
            const bool word = (u >= '0' && u <= '9') || (u >= 'A' && u <= 'Z') ||
                              (u >= 'a' && u <= 'z') || u == ' ' || u == '\n' ||
                              u == '\t' || u == '\r' || u >= 0x80; // multi-byte text
            symbols += word ? 0 : 1;
        }
        const double ratio =
            static_cast<double>(symbols) / static_cast<double>(doc.text.size());
        if (ratio > rules.max_symbol_ratio) {
            return {false, "symbol_ratio"};
        }
    }
    return {true, {}};
}

struct FilterReport {
    std::vector<Document> kept; // input order preserved
    std::vector<std::pair<std::string, std::string>> dropped; // (id, reason)
};

inline FilterReport filter_corpus(std::span<const Document> docs, const FilterRules &rules,
                                  const QualityPredicate &quality = {}) {
    FilterReport report;
    for (const Document &d : docs) {
        const FilterDecision decision = rule_filter(d, rules);
        if (!decision.keep) {
            report.dropped.emplace_back(d.id, decision.reason);
            continue;
        }
        if (quality && !quality(d)) {
            report.dropped.emplace_back(d.id, "quality");
            continue;
        }
        report.kept.push_back(d);
    }
    return report;
}

// ----------------------------- shingles & MinHash -----------------------------

inline uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 1469598103934665603ull;
    for (const char c : bytes) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

// Hashes of all k-byte sliding windows, deduplicated and sorted.
inline std::vector<uint64_t> shingle(std::string_view text, int64_t k) {
    INFILL_CHECK_ARG(k >= 1, "shingle: k must be positive, got ", k);
    std::vector<uint64_t> out;
    if (static_cast<int64_t>(text.size()) < k) {
        return out;
    }
    out.reserve(text.size() - static_cast<size_t>(k) + 1);
    for (size_t i = 0; i + static_cast<size_t>(k) <= text.size(); ++i) {
        out.push_back(fnv1a64(text.substr(i, static_cast<size_t>(k))));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct MinHashSignature {
    std::vector<uint64_t> values;
    int64_t n_perm = 0;
    uint64_t seed = 0;
};

// splitmix64 finalizer as a stateless hash.
inline uint64_t mix_hash(uint64_t x) {
    uint64_t s = x;
    return splitmix64(s);
}

inline MinHashSignature minhash_signature(std::span<const uint64_t> shingles,
                                          int64_t n_perm, uint64_t seed) {
    INFILL_CHECK_ARG(n_perm >= 1, "minhash: n_perm must be positive, got ", n_perm);
    MinHashSignature sig;
    sig.n_perm = n_perm;
    sig.seed = seed;
    sig.values.assign(static_cast<size_t>(n_perm), UINT64_MAX);
    for (int64_t i = 0; i < n_perm; ++i) {
        const uint64_t stream_key = mix64(seed, static_cast<uint64_t>(i));
        uint64_t best = UINT64_MAX;
        for (const uint64_t s : shingles) {
            const uint64_t h = mix_hash(s ^ stream_key);
            if (h < best) {
                best = h;
            }
        }
        sig.values[static_cast<size_t>(i)] = best;
    }
    return sig;
}

// Fraction of equal components; the unbiased Jaccard estimator.
inline double estimate_jaccard(const MinHashSignature &a, const MinHashSignature &b) {
    INFILL_CHECK_ARG(a.n_perm == b.n_perm && a.seed == b.seed,
                     "minhash: signatures from different configurations");
    int64_t equal = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        equal += a.values[i] == b.values[i];
    }
    return static_cast<double>(equal) / static_cast<double>(a.n_perm);
}

// ----------------------------- LSH dedup -----------------------------

struct DedupParams {
    int64_t n_perm = 128;
    int64_t bands = 16;
    int64_t rows = 8;
    double threshold = 0.71; // ~ (1/bands)^(1/rows) for the defaults
    int64_t shingle_k = 8;
    uint64_t seed = 1;
};

struct DupPair {
    std::string kept_id;
    std::string dropped_id;
    double estimated_jaccard = 0.0;
};

struct DedupResult {
    std::vector<Document> kept; // input order preserved
    std::vector<DupPair> pairs; // one entry per dropped document
};

namespace detail {

struct UnionFind {
    std::vector<size_t> parent;

    explicit UnionFind(size_t n) : parent(n) {
        for (size_t i = 0; i < n; ++i) {
            parent[i] = i;
        }
    }
    size_t find(size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(size_t a, size_t b) {
        const size_t ra = find(a), rb = find(b);
        if (ra != rb) {
            parent[std::max(ra, rb)] = std::min(ra, rb);
        }
    }
};

// Deterministic parallel map: worker w handles indices w, w+threads, ...;
// every index writes only its own slot, so the result is independent of the
// thread count.
inline void parallel_for(int64_t n, int64_t threads, const std::function<void(int64_t)> &fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    for (int64_t w = 0; w < std::min(threads, n); ++w) {
        pool.emplace_back([&, w]() {
            for (int64_t i = w; i < n; i += threads) {
                fn(i);
            }
        });
    }
    for (auto &t : pool) {
        t.join();
    }
}

} // namespace detail

inline DedupResult lsh_dedup(std::span<const Document> docs, const DedupParams &params,
                             int64_t threads = 1) {
    INFILL_CHECK_ARG(params.bands * params.rows == params.n_perm,
                     "dedup: bands*rows must equal n_perm (", params.bands, "*",
                     params.rows, " != ", params.n_perm, ")");
    INFILL_CHECK_ARG(params.threshold >= 0.0 && params.threshold <= 1.0,
                     "dedup: threshold must lie in [0, 1]");
    const size_t n = docs.size();
    {
        std::set<std::string> ids;
        for (const Document &d : docs) {
            INFILL_CHECK_DATA(ids.insert(d.id).second, "dedup: duplicate document id ",
                              d.id);
        }
    }

    // Signatures in parallel; each document owns its output slot.
    std::vector<MinHashSignature> sigs(n);
    std::vector<uint64_t> text_hash(n);
    detail::parallel_for(static_cast<int64_t>(n), threads, [&](int64_t i) {
        const Document &d = docs[static_cast<size_t>(i)];
        const std::vector<uint64_t> sh = shingle(d.text, params.shingle_k);
        sigs[static_cast<size_t>(i)] = minhash_signature(sh, params.n_perm, params.seed);
        text_hash[static_cast<size_t>(i)] = fnv1a64(d.text);
    });

    detail::UnionFind uf(n);

    // Exact duplicates first: identical text joins a cluster outright.
    {
        std::map<uint64_t, std::vector<size_t>> by_hash;
        for (size_t i = 0; i < n; ++i) {
            by_hash[text_hash[i]].push_back(i);
        }
        for (const auto &[hash, members] : by_hash) {
            for (size_t m = 1; m < members.size(); ++m) {
                if (docs[members[m]].text == docs[members[0]].text) {
                    uf.unite(members[0], members[m]);
                }
            }
        }
    }

    // LSH banding: candidates share one identical band of r components.
    {
        std::map<std::string, std::vector<size_t>> buckets;
        for (size_t i = 0; i < n; ++i) {
            for (int64_t b = 0; b < params.bands; ++b) {
                std::string key;
                key.reserve(static_cast<size_t>(params.rows) * 8 + 8);
                for (int64_t r = 0; r < 8; ++r) {
                    key.push_back(static_cast<char>((b >> (8 * r)) & 0xff));
                }
                for (int64_t r = 0; r < params.rows; ++r) {
                    const uint64_t v = sigs[i].values[static_cast<size_t>(b * params.rows + r)];
                    for (int64_t byte = 0; byte < 8; ++byte) {
                        key.push_back(static_cast<char>((v >> (8 * byte)) & 0xff));
                    }
                }
                buckets[key].push_back(i);
            }
        }
        for (const auto &[key, members] : buckets) {
            for (size_t a = 0; a < members.size(); ++a) {
                for (size_t b = a + 1; b < members.size(); ++b) {
                    if (uf.find(members[a]) == uf.find(members[b])) {
                        continue;
                    }
                    if (estimate_jaccard(sigs[members[a]], sigs[members[b]]) >=
                        params.threshold) {
                        uf.unite(members[a], members[b]);
                    }
                }
            }
        }
    }

    // Survivor per cluster: lexicographically smallest id.
    std::vector<size_t> keeper_of(n);
    {
        std::map<size_t, size_t> best; // cluster root -> keeper index
        for (size_t i = 0; i < n; ++i) {
            const size_t root = uf.find(i);
            const auto it = best.find(root);
            if (it == best.end() || docs[i].id < docs[it->second].id) {
                best[root] = i;
            }
        }
        for (size_t i = 0; i < n; ++i) {
            keeper_of[i] = best[uf.find(i)];
        }
    }

    DedupResult result;
    for (size_t i = 0; i < n; ++i) {
        if (keeper_of[i] == i) {
            result.kept.push_back(docs[i]);
        } else {
            result.pairs.push_back({docs[keeper_of[i]].id, docs[i].id,
                                    estimate_jaccard(sigs[keeper_of[i]], sigs[i])});
        }
    }
    return result;
}

inline void write_dup_report(const std::string &path, std::span<const DupPair> pairs) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    INFILL_CHECK_DATA(f.good(), "dedup: cannot open ", path, " for writing");
    for (const DupPair &p : pairs) {
        nlohmann::json j{{"kept_id", p.kept_id},
                         {"dropped_id", p.dropped_id},
                         {"estimated_jaccard", p.estimated_jaccard}};
        f << j.dump() << '\n';
    }
    INFILL_CHECK_DATA(f.good(), "dedup: write failed for ", path);
}

} // namespace infill
