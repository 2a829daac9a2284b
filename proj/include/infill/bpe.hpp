// Byte-level BPE: train merges on a corpus, encode/decode, and merge two
// independently trained vocabularies into one.
//
// The 256 single bytes are ids 0..255, merge products follow, and special
// control tokens (which have no byte expansion and are never merged) sit on
// top. Training is greedy highest-frequency pair merging; ties break on the
// lexicographically smallest (left bytes, right bytes), which makes the
// result deterministic across platforms.

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "infill/common.hpp"

namespace infill {

// ----------------------------- base64 -----------------------------

namespace detail {

inline const char *b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string b64_encode(std::string_view bytes) {
    const char *alpha = b64_alphabet();
    std::string out;
    size_t i = 0;
    while (i + 3 <= bytes.size()) {
        const uint32_t v = (static_cast<uint32_t>(static_cast<uint8_t>(bytes[i])) << 16) |
                           (static_cast<uint32_t>(static_cast<uint8_t>(bytes[i + 1])) << 8) |
                           static_cast<uint32_t>(static_cast<uint8_t>(bytes[i + 2]));
        out.push_back(alpha[(v >> 18) & 63]);
        out.push_back(alpha[(v >> 12) & 63]);
        out.push_back(alpha[(v >> 6) & 63]);
        out.push_back(alpha[v & 63]);
        i += 3;
    }
    const size_t rem = bytes.size() - i;
    if (rem == 1) {
        const uint32_t v = static_cast<uint32_t>(static_cast<uint8_t>(bytes[i])) << 16;
        out.push_back(alpha[(v >> 18) & 63]);
        out.push_back(alpha[(v >> 12) & 63]);
        out += "==";
    } else if (rem == 2) {
        const uint32_t v = (static_cast<uint32_t>(static_cast<uint8_t>(bytes[i])) << 16) |
                           (static_cast<uint32_t>(static_cast<uint8_t>(bytes[i + 1])) << 8);
        out.push_back(alpha[(v >> 18) & 63]);
        out.push_back(alpha[(v >> 12) & 63]);
        out.push_back(alpha[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::string b64_decode(std::string_view text) {
    int8_t inv[256];
    for (auto &v : inv) {
        v = -1;
    }
    const char *alpha = b64_alphabet();
    for (int i = 0; i < 64; ++i) {
        inv[static_cast<uint8_t>(alpha[i])] = static_cast<int8_t>(i);
    }
    INFILL_CHECK_DATA(text.size() % 4 == 0, "base64: length not a multiple of 4");
    std::string out;
    for (size_t i = 0; i < text.size(); i += 4) {
        uint32_t v = 0;
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            const char c = text[i + static_cast<size_t>(j)];
            if (c == '=') {
                ++pad;
                v <<= 6;
                continue;
            }
            INFILL_CHECK_DATA(pad == 0 && inv[static_cast<uint8_t>(c)] >= 0,
                              "base64: invalid character");
            v = (v << 6) | static_cast<uint32_t>(inv[static_cast<uint8_t>(c)]);
        }
        out.push_back(static_cast<char>((v >> 16) & 0xff));
        if (pad < 2) {
            out.push_back(static_cast<char>((v >> 8) & 0xff));
        }
        if (pad < 1) {
            out.push_back(static_cast<char>(v & 0xff));
        }
    }
    return out;
}

} // namespace detail

// ----------------------------- vocabulary -----------------------------

struct BPEVocab {
    std::vector<std::string> id_to_token; // byte strings; empty slot for specials
    std::unordered_map<std::string, int32_t> token_to_id; // regular tokens only
    std::vector<std::pair<int32_t, int32_t>> merges;      // (left id, right id), in order
    std::map<std::string, int32_t> specials;              // control tokens, no bytes

    int32_t size() const { return static_cast<int32_t>(id_to_token.size()); }

    bool is_special(int32_t id) const {
        for (const auto &[name, sid] : specials) {
            if (sid == id) {
                return true;
            }
        }
        return false;
    }

    const std::string *special_name(int32_t id) const {
        for (const auto &[name, sid] : specials) {
            if (sid == id) {
                return &name;
            }
        }
        return nullptr;
    }

    int32_t merge_result(size_t merge_index) const {
        const auto &[l, r] = merges[merge_index];
        const std::string bytes = id_to_token[static_cast<size_t>(l)] +
                                  id_to_token[static_cast<size_t>(r)];
        const auto it = token_to_id.find(bytes);
        INFILL_CHECK_DATA(it != token_to_id.end(), "vocab: merge ", merge_index,
                          " result token missing");
        return it->second;
    }

    void validate() const {
        INFILL_CHECK_DATA(size() >= 256, "vocab: missing byte base");
        for (int i = 0; i < 256; ++i) {
            INFILL_CHECK_DATA(id_to_token[static_cast<size_t>(i)] ==
                                  std::string(1, static_cast<char>(i)),
                              "vocab: id ", i, " is not its base byte");
        }
        size_t regular = 0;
        for (int32_t id = 0; id < size(); ++id) {
            const std::string &tok = id_to_token[static_cast<size_t>(id)];
            if (tok.empty()) {
                INFILL_CHECK_DATA(is_special(id), "vocab: id ", id,
                                  " has neither bytes nor a special name");
                continue;
            }
            ++regular;
            const auto it = token_to_id.find(tok);
            INFILL_CHECK_DATA(it != token_to_id.end() && it->second == id,
                              "vocab: token_to_id and id_to_token disagree at id ", id);
        }
        INFILL_CHECK_DATA(regular == token_to_id.size(),
                          "vocab: token_to_id holds stale entries");
        // Parts must be constructible before their merge runs: base bytes,
        // an earlier merge's result, or an imported token that no merge in
        // this list produces (e.g. fixture vocabularies without merges).
        std::map<int32_t, size_t> first_produced;
        for (size_t m = 0; m < merges.size(); ++m) {
            const int32_t result = merge_result(m);
            if (!first_produced.count(result)) {
                first_produced[result] = m;
            }
        }
        for (size_t m = 0; m < merges.size(); ++m) {
            for (const int32_t part : {merges[m].first, merges[m].second}) {
                if (part < 256) {
                    continue;
                }
                INFILL_CHECK_DATA(part >= 0 && part < size() &&
                                      !id_to_token[static_cast<size_t>(part)].empty(),
                                  "vocab: merge ", m, " references id ", part,
                                  " which is not a regular token");
                const auto it = first_produced.find(part);
                INFILL_CHECK_DATA(it == first_produced.end() || it->second < m,
                                  "vocab: merge ", m, " uses a part produced later");
            }
        }
        for (const auto &[name, id] : specials) {
            INFILL_CHECK_DATA(id >= 0 && id < size(), "vocab: special ", name,
                              " id out of range");
        }
    }
};

namespace detail {

// Replace every (left, right) adjacency left-to-right.
inline void apply_merge(std::vector<int32_t> &seq, int32_t left, int32_t right,
                        int32_t result) {
    size_t w = 0;
    for (size_t r = 0; r < seq.size();) {
        if (r + 1 < seq.size() && seq[r] == left && seq[r + 1] == right) {
            seq[w++] = result;
            r += 2;
        } else {
            seq[w++] = seq[r++];
        }
    }
    seq.resize(w);
}

inline BPEVocab byte_base_vocab() {
    BPEVocab v;
    for (int i = 0; i < 256; ++i) {
        v.id_to_token.emplace_back(1, static_cast<char>(i));
        v.token_to_id.emplace(v.id_to_token.back(), i);
    }
    return v;
}

} // namespace detail

// ----------------------------- training -----------------------------

// Greedy pair merging until the vocabulary reaches target_size (byte base +
// merges) or no pair occurs at least twice. Special tokens are appended on
// top afterwards and never participate in merging.
inline BPEVocab bpe_train(std::string_view corpus, int64_t target_size,
                          std::span<const std::string> special_names = {}) {
    INFILL_CHECK_ARG(target_size > 256, "bpe_train: target_size must exceed 256, got ",
                     target_size);
    INFILL_CHECK_ARG(!corpus.empty(), "bpe_train: empty corpus");

    BPEVocab vocab = detail::byte_base_vocab();
    std::vector<int32_t> seq;
    seq.reserve(corpus.size());
    for (const char c : corpus) {
        seq.push_back(static_cast<int32_t>(static_cast<uint8_t>(c)));
    }

    while (vocab.size() < target_size) {
        std::map<std::pair<int32_t, int32_t>, int64_t> counts;
        for (size_t i = 0; i + 1 < seq.size(); ++i) {
            ++counts[{seq[i], seq[i + 1]}];
        }
        int64_t best_count = 0;
        std::pair<int32_t, int32_t> best{};
        for (const auto &[pair, count] : counts) {
            if (count < 2 || count < best_count) {
                continue;
            }
            if (count > best_count) {
                best_count = count;
                best = pair;
                continue;
            }
            // tie: lexicographically smallest (left bytes, right bytes)
            const auto &lb = vocab.id_to_token[static_cast<size_t>(pair.first)];
            const auto &rb = vocab.id_to_token[static_cast<size_t>(pair.second)];
            const auto &cl = vocab.id_to_token[static_cast<size_t>(best.first)];
            const auto &cr = vocab.id_to_token[static_cast<size_t>(best.second)];
            if (std::tie(lb, rb) < std::tie(cl, cr)) {
                best = pair;
            }
        }
        if (best_count < 2) {
            break; // no pair repeats
        }
        const int32_t result = vocab.size();
        vocab.id_to_token.push_back(
            vocab.id_to_token[static_cast<size_t>(best.first)] +
            vocab.id_to_token[static_cast<size_t>(best.second)]);
        vocab.token_to_id.emplace(vocab.id_to_token.back(), result);
        vocab.merges.push_back(best);
        detail::apply_merge(seq, best.first, best.second, result);
    }

    for (const std::string &name : special_names) {
        INFILL_CHECK_ARG(!vocab.specials.count(name), "bpe_train: duplicate special ",
                         name);
        vocab.specials.emplace(name, vocab.size());
        vocab.id_to_token.emplace_back();
    }
    return vocab;
}

// ----------------------------- encode / decode -----------------------------

inline std::vector<int32_t> encode(const BPEVocab &vocab, std::string_view bytes) {
    std::vector<int32_t> seq;
    seq.reserve(bytes.size());
    for (const char c : bytes) {
        seq.push_back(static_cast<int32_t>(static_cast<uint8_t>(c)));
    }
    for (size_t m = 0; m < vocab.merges.size(); ++m) {
        const auto &[l, r] = vocab.merges[m];
        detail::apply_merge(seq, l, r, vocab.merge_result(m));
    }
    return seq;
}

// Concatenates token byte sequences; special ids expand to their names.
inline std::string decode(const BPEVocab &vocab, std::span<const int32_t> ids) {
    std::string out;
    for (const int32_t id : ids) {
        INFILL_CHECK_DATA(id >= 0 && id < vocab.size(), "decode: unknown id ", id);
        const std::string &tok = vocab.id_to_token[static_cast<size_t>(id)];
        if (tok.empty()) {
            const std::string *name = vocab.special_name(id);
            INFILL_CHECK_DATA(name != nullptr, "decode: unknown id ", id);
            out += *name;
        } else {
            out += tok;
        }
    }
    return out;
}

// ----------------------------- vocabulary merging -----------------------------

// All of `a` survives with its ids intact; `b`'s novel tokens are appended
// in b's id order; b's merges follow a's (duplicates skipped).
inline BPEVocab merge_vocabs(const BPEVocab &a, const BPEVocab &b) {
    a.validate();
    b.validate();
    BPEVocab out = a;

    std::vector<int32_t> b_to_out(static_cast<size_t>(b.size()), -1);
    for (int32_t id = 0; id < 256; ++id) {
        b_to_out[static_cast<size_t>(id)] = id;
    }
    for (int32_t id = 256; id < b.size(); ++id) {
        const std::string &tok = b.id_to_token[static_cast<size_t>(id)];
        if (tok.empty()) {
            const std::string &name = *b.special_name(id);
            const auto it = out.specials.find(name);
            if (it != out.specials.end()) {
                b_to_out[static_cast<size_t>(id)] = it->second;
            } else {
                b_to_out[static_cast<size_t>(id)] = out.size();
                out.specials.emplace(name, out.size());
                out.id_to_token.emplace_back();
            }
            continue;
        }
        const auto it = out.token_to_id.find(tok);
        if (it != out.token_to_id.end()) {
            b_to_out[static_cast<size_t>(id)] = it->second;
        } else {
            b_to_out[static_cast<size_t>(id)] = out.size();
            out.token_to_id.emplace(tok, out.size());
            out.id_to_token.push_back(tok);
        }
    }

    std::map<std::pair<int32_t, int32_t>, bool> seen;
    for (const auto &m : out.merges) {
        seen[m] = true;
    }
    for (const auto &[l, r] : b.merges) {
        const std::pair<int32_t, int32_t> translated{b_to_out[static_cast<size_t>(l)],
                                                     b_to_out[static_cast<size_t>(r)]};
        if (!seen[translated]) {
            seen[translated] = true;
            out.merges.push_back(translated);
        }
    }
    out.validate();
    return out;
}

// ----------------------------- file format -----------------------------

inline nlohmann::json vocab_to_json(const BPEVocab &vocab) {
    nlohmann::json tokens = nlohmann::json::array();
    for (int32_t id = 0; id < vocab.size(); ++id) {
        const std::string &tok = vocab.id_to_token[static_cast<size_t>(id)];
        if (tok.empty()) {
            tokens.push_back(nullptr);
        } else {
            tokens.push_back(detail::b64_encode(tok));
        }
    }
    nlohmann::json merges = nlohmann::json::array();
    for (const auto &[l, r] : vocab.merges) {
        merges.push_back({l, r});
    }
    nlohmann::json specials = nlohmann::json::object();
    for (const auto &[name, id] : vocab.specials) {
        specials[name] = id;
    }
    return nlohmann::json{
        {"version", 1}, {"tokens", tokens}, {"merges", merges}, {"specials", specials}};
}

inline BPEVocab vocab_from_json(const nlohmann::json &j) {
    INFILL_CHECK_DATA(j.value("version", 0) == 1, "vocab: unsupported version");
    BPEVocab v;
    const auto &tokens = j.at("tokens");
    for (size_t id = 0; id < tokens.size(); ++id) {
        if (tokens[id].is_null()) {
            v.id_to_token.emplace_back();
        } else {
            v.id_to_token.push_back(detail::b64_decode(tokens[id].get<std::string>()));
            v.token_to_id.emplace(v.id_to_token.back(), static_cast<int32_t>(id));
        }
    }
    for (const auto &pair : j.at("merges")) {
        v.merges.emplace_back(pair.at(0).get<int32_t>(), pair.at(1).get<int32_t>());
    }
    for (const auto &[name, id] : j.at("specials").items()) {
        v.specials.emplace(name, id.get<int32_t>());
    }
    v.validate();
    return v;
}

inline void save_vocab(const std::string &path, const BPEVocab &vocab) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    INFILL_CHECK_DATA(f.good(), "vocab: cannot open ", path, " for writing");
    f << vocab_to_json(vocab).dump(2) << '\n';
    INFILL_CHECK_DATA(f.good(), "vocab: write failed for ", path);
}

inline BPEVocab load_vocab(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    INFILL_CHECK_DATA(f.good(), "vocab: cannot open ", path);
    nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
    INFILL_CHECK_DATA(!j.is_discarded(), "vocab: malformed JSON in ", path);
    return vocab_from_json(j);
}

} // namespace infill
