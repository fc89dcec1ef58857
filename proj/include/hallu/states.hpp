#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/error.hpp"
#include "hallu/jsonl.hpp"
#include "hallu/text.hpp"

/// Internal-state capture files, shared with the external capture process:
///
///   responses.jsonl       {prompt_id, response, truncated, sentences:[{index, text, start, end,
///                          token_start, token_end}]}
///   states.bin            raw little-endian float32 rows, back to back
///   states_manifest.json  {format, version, model_id, quantization, num_decoder_blocks,
///                          middle_block, last_block, dims:{kind: n}, records:[{prompt_id,
///                          sentence_index, kind, offset, length}]}   (offset/length in bytes)
namespace hallu::states {

using json = nlohmann::json;

inline constexpr std::array<std::string_view, 4> kStateKinds = {"cev_middle", "cev_last", "iav_middle", "iav_last"};
inline constexpr std::array<std::string_view, 4> kQuantizations = {"none", "float8", "int8", "int4"};
inline constexpr std::string_view kManifestFormat = "hallu-states";
inline constexpr int kManifestVersion = 1;

inline bool is_state_kind(std::string_view k) {
    return std::find(kStateKinds.begin(), kStateKinds.end(), k) != kStateKinds.end();
}

inline std::size_t middle_block(std::size_t num_blocks) { return num_blocks / 2; }
inline std::size_t last_block(std::size_t num_blocks) { return num_blocks - 1; }

struct Entry {
    std::string prompt_id;
    std::size_t sentence_index = 0;
    std::string kind;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct Manifest {
    std::string model_id;
    std::string quantization = "none";
    std::size_t num_decoder_blocks = 0;
    std::map<std::string, std::size_t> dims;
    std::vector<Entry> entries;

    json to_json() const {
        json recs = json::array();
        for (const auto& e : entries)
            recs.push_back({{"prompt_id", e.prompt_id}, {"sentence_index", e.sentence_index}, {"kind", e.kind},
                            {"offset", e.offset}, {"length", e.length}});
        return json{{"format", kManifestFormat},
                    {"version", kManifestVersion},
                    {"model_id", model_id},
                    {"quantization", quantization},
                    {"num_decoder_blocks", num_decoder_blocks},
                    {"middle_block", num_decoder_blocks ? middle_block(num_decoder_blocks) : 0},
                    {"last_block", num_decoder_blocks ? last_block(num_decoder_blocks) : 0},
                    {"dims", dims},
                    {"records", recs}};
    }

    static Manifest from_json(const json& j) {
        if (j.value("format", std::string{}) != kManifestFormat) throw Error("not a hallu-states manifest");
        if (j.value("version", 0) != kManifestVersion)
            throw Error(fmt::format("unsupported manifest version {}", j.value("version", 0)));
        Manifest m;
        m.model_id = j.at("model_id").get<std::string>();
        m.quantization = j.at("quantization").get<std::string>();
        m.num_decoder_blocks = j.value("num_decoder_blocks", std::size_t{0});
        if (m.num_decoder_blocks) {
            if (j.value("middle_block", std::size_t{0}) != middle_block(m.num_decoder_blocks) ||
                j.value("last_block", std::size_t{0}) != last_block(m.num_decoder_blocks))
                throw Error("manifest block indices disagree with num_decoder_blocks");
        }
        m.dims = j.at("dims").get<std::map<std::string, std::size_t>>();
        for (const auto& r : j.at("records")) {
            m.entries.push_back({r.at("prompt_id").get<std::string>(), r.at("sentence_index").get<std::size_t>(),
                                 r.at("kind").get<std::string>(), r.at("offset").get<std::uint64_t>(),
                                 r.at("length").get<std::uint64_t>()});
        }
        return m;
    }

    /// Offsets strictly increasing, contiguous from 0, covering exactly `blob_size`
    /// bytes; every length equals 4 x the declared dimension of its kind.
    void validate(std::uint64_t blob_size) const {
        std::uint64_t expected = 0;
        for (const auto& e : entries) {
            auto dim = dims.find(e.kind);
            if (dim == dims.end()) throw Error(fmt::format("record kind '{}' has no declared dimension", e.kind));
            if (e.length != dim->second * sizeof(float))
                throw Error(fmt::format("{}/{}/{}: length {} != 4 x {}", e.prompt_id, e.sentence_index, e.kind,
                                        e.length, dim->second));
            if (e.offset != expected)
                throw Error(fmt::format("{}/{}/{}: offset {} leaves a gap or overlap (expected {})", e.prompt_id,
                                        e.sentence_index, e.kind, e.offset, expected));
            expected += e.length;
        }
        if (expected != blob_size)
            throw Error(fmt::format("manifest covers {} bytes but blob has {}", expected, blob_size));
    }
};

namespace detail {

inline void to_little_endian(std::span<const float> in, std::vector<char>& out) {
    out.resize(in.size() * 4);
    for (std::size_t i = 0; i < in.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(in[i]);
        for (int b = 0; b < 4; ++b) out[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
}

inline void from_little_endian(std::span<const char> in, std::span<float> out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= std::uint32_t(static_cast<unsigned char>(in[i * 4 + b])) << (8 * b);
        out[i] = std::bit_cast<float>(bits);
    }
}

}  // namespace detail

/// Appends vectors to states.bin and records them; `finish()` writes the manifest.
class Writer {
public:
    Writer(std::filesystem::path dir, std::string model_id, std::string quantization, std::size_t num_blocks)
        : dir_(std::move(dir)) {
        std::filesystem::create_directories(dir_);
        blob_.open(dir_ / "states.bin", std::ios::binary | std::ios::trunc);
        if (!blob_) throw Error(fmt::format("cannot write {}", (dir_ / "states.bin").string()));
        manifest_.model_id = std::move(model_id);
        manifest_.quantization = std::move(quantization);
        manifest_.num_decoder_blocks = num_blocks;
    }

    void append(const std::string& prompt_id, std::size_t sentence_index, const std::string& kind,
                std::span<const float> values) {
        auto [it, inserted] = manifest_.dims.emplace(kind, values.size());
        if (!inserted && it->second != values.size())
            throw Error(fmt::format("kind {} has dimension {}, got {}", kind, it->second, values.size()));
        detail::to_little_endian(values, scratch_);
        blob_.write(scratch_.data(), static_cast<std::streamsize>(scratch_.size()));
        manifest_.entries.push_back({prompt_id, sentence_index, kind, offset_, scratch_.size()});
        offset_ += scratch_.size();
    }

    void finish() {
        blob_.close();
        jsonl::write_json(dir_ / "states_manifest.json", manifest_.to_json());
    }

    const Manifest& manifest() const { return manifest_; }

private:
    std::filesystem::path dir_;
    std::ofstream blob_;
    Manifest manifest_;
    std::uint64_t offset_ = 0;
    std::vector<char> scratch_;
};

/// Random access to a validated states.bin by (prompt_id, sentence_index, kind).
class Reader {
public:
    Reader(const std::filesystem::path& blob, Manifest manifest) : path_(blob), manifest_(std::move(manifest)) {
        manifest_.validate(std::filesystem::file_size(path_));
        for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
            const auto& e = manifest_.entries[i];
            index_[{e.prompt_id, e.sentence_index, e.kind}] = i;
        }
        in_.open(path_, std::ios::binary);
        if (!in_) throw Error(fmt::format("cannot open {}", path_.string()));
    }

    static Reader open_dir(const std::filesystem::path& dir) {
        return Reader(dir / "states.bin", Manifest::from_json(jsonl::read_json(dir / "states_manifest.json")));
    }

    const Manifest& manifest() const { return manifest_; }

    std::optional<Entry> find(const std::string& prompt_id, std::size_t sentence_index, const std::string& kind) const {
        auto it = index_.find({prompt_id, sentence_index, kind});
        if (it == index_.end()) return std::nullopt;
        return manifest_.entries[it->second];
    }

    std::vector<float> read(const Entry& e) {
        std::vector<float> out(e.length / 4);
        read_into(e.offset, e.length, out);
        return out;
    }

    void read_into(std::uint64_t offset, std::uint64_t length, std::span<float> out) {
        buffer_.resize(length);
        in_.seekg(static_cast<std::streamoff>(offset));
        in_.read(buffer_.data(), static_cast<std::streamsize>(length));
        if (static_cast<std::uint64_t>(in_.gcount()) != length) throw Error("short read from state blob");
        detail::from_little_endian(buffer_, out.first(length / 4));
    }

private:
    std::filesystem::path path_;
    Manifest manifest_;
    std::map<std::tuple<std::string, std::size_t, std::string>, std::size_t> index_;
    std::ifstream in_;
    std::vector<char> buffer_;
};

// ---------------------------------------------------------------------------
// responses.jsonl

struct SentenceSpan {
    std::size_t index = 0;
    std::string text;
    std::size_t start = 0;
    std::size_t end = 0;
    std::size_t token_start = 0;
    std::size_t token_end = 0;
};

struct ResponseRecord {
    std::string prompt_id;
    std::string response;
    bool truncated = false;
    std::vector<SentenceSpan> sentences;
};

inline json to_json(const ResponseRecord& r) {
    json ss = json::array();
    for (const auto& s : r.sentences)
        ss.push_back({{"index", s.index}, {"text", s.text}, {"start", s.start}, {"end", s.end},
                      {"token_start", s.token_start}, {"token_end", s.token_end}});
    return json{{"prompt_id", r.prompt_id}, {"response", r.response}, {"truncated", r.truncated}, {"sentences", ss}};
}

inline ResponseRecord response_from_json(const json& j) {
    ResponseRecord r;
    r.prompt_id = j.at("prompt_id").get<std::string>();
    r.response = j.at("response").get<std::string>();
    r.truncated = j.value("truncated", false);
    if (auto ss = j.find("sentences"); ss != j.end()) {
        for (const auto& s : *ss) {
            SentenceSpan span;
            span.index = s.at("index").get<std::size_t>();
            span.text = s.at("text").get<std::string>();
            span.start = s.value("start", std::size_t{0});
            span.end = s.value("end", std::size_t{0});
            span.token_start = s.value("token_start", std::size_t{0});
            span.token_end = s.value("token_end", std::size_t{0});
            r.sentences.push_back(std::move(span));
        }
    } else {
        // Segment here when the producer did not.
        std::size_t i = 0;
        for (const auto& sp : text::split_sentences(r.response))
            r.sentences.push_back({i++, r.response.substr(sp.start, sp.size()), sp.start, sp.end, 0, 0});
    }
    return r;
}

}  // namespace hallu::states
