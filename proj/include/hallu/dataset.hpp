#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/error.hpp"
#include "hallu/jsonl.hpp"
#include "hallu/labeler.hpp"
#include "hallu/prompts.hpp"
#include "hallu/rng.hpp"
#include "hallu/states.hpp"

namespace hallu::dataset {

using json = nlohmann::json;

struct VectorRef {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct DatasetRecord {
    std::string record_id;
    std::string question_id;
    std::string model_id;
    std::string quantization;
    std::optional<prompts::TemplateId> template_id;
    std::optional<int> chunk_size;
    std::optional<int> chunks_per_prompt;
    std::optional<bool> answerable;
    int label = 0;  // 1 hallucinated, 0 grounded
    std::size_t source = 0;
    std::map<std::string, VectorRef> vectors;
};

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

inline Split split_from_string(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw Error(fmt::format("unknown split '{}'", s));
}

using SplitAssignment = std::map<std::string, Split>;

struct Ratios {
    double train = 0.7;
    double val = 0.15;
    double test = 0.15;
};

inline Ratios parse_ratios(const std::string& s) {
    auto parts = text::split(s, ',');
    if (parts.size() != 3) throw ConfigError(fmt::format("ratios '{}' must have three comma-separated values", s));
    try {
        return {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    } catch (const std::exception&) {
        throw ConfigError(fmt::format("ratios '{}' are not numbers", s));
    }
}

/// Sizes of the three partitions of `n` question ids: floor of each share, then any
/// remainder goes one at a time to the later splits first (test, val, train), skipping
/// splits whose ratio is zero.
inline std::array<std::size_t, 3> partition_sizes(std::size_t n, const Ratios& r) {
    const std::array<double, 3> ratio = {r.train, r.val, r.test};
    std::array<std::size_t, 3> size{};
    std::size_t used = 0;
    for (int i = 0; i < 3; ++i) {
        size[i] = static_cast<std::size_t>(std::floor(ratio[i] * static_cast<double>(n) + 1e-9));
        used += size[i];
    }
    std::size_t remainder = n - std::min(n, used);
    while (remainder > 0) {
        for (int i = 2; i >= 0 && remainder > 0; --i) {
            if (ratio[i] > 0) {
                ++size[i];
                --remainder;
            }
        }
    }
    return size;
}

/// Assigns whole questions to splits: the distinct question ids (sorted) are shuffled
/// with `seed` and cut by cumulative ratio, so every sentence of both prompts of a
/// question lands in one split.
inline SplitAssignment split(std::span<const DatasetRecord> records, const Ratios& ratios, std::uint64_t seed) {
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
        std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-6)
        throw Error("split ratios must be non-negative and sum to 1");
    std::set<std::string> ids;
    for (const auto& r : records) ids.insert(r.question_id);
    if (ids.size() < 3) throw Error(fmt::format("need at least 3 question ids to split, have {}", ids.size()));
    std::vector<std::string> order(ids.begin(), ids.end());
    KeyedRng rng(seed, "split");
    rng.shuffle(order);
    auto sizes = partition_sizes(order.size(), ratios);
    SplitAssignment out;
    std::size_t i = 0;
    for (int s = 0; s < 3; ++s) {
        for (std::size_t k = 0; k < sizes[s]; ++k, ++i) out[order[i]] = static_cast<Split>(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Balancing

/// Which factors to balance. Label and answerability are balanced to exactly 1:1;
/// each listed configuration factor to 1/k of the records, within one record, over
/// the values in its domain. An empty domain switches a factor off.
struct BalanceSpec {
    bool label = true;
    bool answerability = true;
    std::vector<int> templates = {0, 1, 2};   // TemplateId ordinals
    std::vector<int> chunk_sizes = {350, 550, 750};
    std::vector<int> chunk_counts = {1, 3, 5};

    /// Label only: for sources without answerability or prompt configuration.
    static BalanceSpec label_only() { return {true, false, {}, {}, {}}; }
};

namespace detail {

inline constexpr std::size_t kFactors = 5;
using Key = std::array<int, kFactors>;  // value index per factor, 0 when inactive

struct Factor {
    const char* name;
    std::vector<int> domain;  // raw values
    bool exact;
};

inline std::vector<Factor> factors(const BalanceSpec& spec) {
    return {{"label", spec.label ? std::vector<int>{0, 1} : std::vector<int>{}, true},
            {"answerable", spec.answerability ? std::vector<int>{0, 1} : std::vector<int>{}, true},
            {"template_id", spec.templates, false},
            {"chunk_size", spec.chunk_sizes, false},
            {"chunks_per_prompt", spec.chunk_counts, false}};
}

inline std::optional<int> raw_value(const DatasetRecord& r, std::size_t f) {
    switch (f) {
        case 0: return r.label;
        case 1: return r.answerable ? std::optional<int>(*r.answerable ? 1 : 0) : std::nullopt;
        case 2: return r.template_id ? std::optional<int>(static_cast<int>(*r.template_id)) : std::nullopt;
        case 3: return r.chunk_size;
        case 4: return r.chunks_per_prompt;
    }
    return std::nullopt;
}

inline std::string describe_value(std::size_t f, int raw) {
    if (f == 0) return raw ? "hallucinated" : "grounded";
    if (f == 1) return raw ? "answerable" : "unanswerable";
    if (f == 2) return std::string(prompts::to_string(static_cast<prompts::TemplateId>(raw)));
    return std::to_string(raw);
}

inline Key key_of(const DatasetRecord& r, const std::vector<Factor>& fs) {
    Key k{};
    for (std::size_t f = 0; f < kFactors; ++f) {
        if (fs[f].domain.empty()) continue;
        auto v = raw_value(r, f);
        if (!v) throw Error(fmt::format("record {} has no {} but it is balanced", r.record_id, fs[f].name));
        auto it = std::find(fs[f].domain.begin(), fs[f].domain.end(), *v);
        if (it == fs[f].domain.end())
            throw Error(fmt::format("record {} has {}={} outside the balanced domain", r.record_id, fs[f].name,
                                    describe_value(f, *v)));
        k[f] = static_cast<int>(it - fs[f].domain.begin());
    }
    return k;
}

}  // namespace detail

struct BalanceViolation {
    std::string factor;
    std::string detail;
};

/// Checks a multiset (indices into `records`) against the balance post-conditions.
inline std::vector<BalanceViolation> check_balance(std::span<const DatasetRecord> records,
                                                   std::span<const std::size_t> chosen, const BalanceSpec& spec) {
    std::vector<BalanceViolation> out;
    const auto fs = detail::factors(spec);
    const auto n = static_cast<double>(chosen.size());
    for (std::size_t f = 0; f < detail::kFactors; ++f) {
        if (fs[f].domain.empty()) continue;
        std::vector<std::size_t> counts(fs[f].domain.size(), 0);
        for (auto i : chosen) counts[static_cast<std::size_t>(detail::key_of(records[i], fs)[f])]++;
        const double target = n / static_cast<double>(fs[f].domain.size());
        for (std::size_t v = 0; v < counts.size(); ++v) {
            const double diff = static_cast<double>(counts[v]) - target;
            const bool bad = fs[f].exact ? counts[v] != counts[0] : std::abs(diff) > 1.0 + 1e-9;
            if (bad)
                out.push_back({fs[f].name, fmt::format("{} has {} of {} records (target {:.2f})",
                                                       detail::describe_value(f, fs[f].domain[v]), counts[v],
                                                       chosen.size(), target)});
        }
    }
    return out;
}

/// Configuration-stratified oversampling.
///
/// Returns a multiset of indices into `records` that contains every input record at
/// least once plus duplicates drawn with replacement inside strata (the cross product
/// of the balanced factors), such that label and answerability are exactly 1:1 and
/// every configuration value holds a 1/k share within one record. Input that already
/// meets the targets comes back unchanged. Output is ordered by record_id, then
/// duplicate number.
///
/// Throws when a required (answerability x label) cell or a configuration value has no
/// records, or when the populated strata cannot reach the targets.
inline std::vector<std::size_t> oversample(std::span<const DatasetRecord> records, const BalanceSpec& spec,
                                           std::uint64_t seed) {
    using detail::Key;
    const auto fs = detail::factors(spec);
    if (records.empty()) throw Error("cannot oversample an empty split");

    std::map<Key, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < records.size(); ++i) strata[detail::key_of(records[i], fs)].push_back(i);

    // Required cells.
    if (spec.label && spec.answerability) {
        for (int a = 0; a < 2; ++a) {
            for (int l = 0; l < 2; ++l) {
                bool found = std::any_of(strata.begin(), strata.end(),
                                         [&](const auto& kv) { return kv.first[0] == l && kv.first[1] == a; });
                if (!found)
                    throw Error(fmt::format("empty stratum: {} x {}", detail::describe_value(1, a),
                                            detail::describe_value(0, l)));
            }
        }
    }
    for (std::size_t f = 0; f < detail::kFactors; ++f) {
        for (std::size_t v = 0; v < fs[f].domain.size(); ++v) {
            bool found = std::any_of(strata.begin(), strata.end(),
                                     [&](const auto& kv) { return kv.first[f] == static_cast<int>(v); });
            if (!found)
                throw Error(fmt::format("empty stratum: {}={}", fs[f].name, detail::describe_value(f, fs[f].domain[v])));
        }
    }

    auto canonical = [&](std::vector<std::pair<std::size_t, std::size_t>> items) {
        std::sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
            if (records[a.first].record_id != records[b.first].record_id)
                return records[a.first].record_id < records[b.first].record_id;
            return std::tie(a.first, a.second) < std::tie(b.first, b.second);
        });
        std::vector<std::size_t> out;
        out.reserve(items.size());
        for (const auto& it : items) out.push_back(it.first);
        return out;
    };

    std::vector<std::size_t> identity(records.size());
    std::iota(identity.begin(), identity.end(), 0);
    if (check_balance(records, identity, spec).empty())
        return canonical([&] {
            std::vector<std::pair<std::size_t, std::size_t>> v;
            for (auto i : identity) v.emplace_back(i, 0);
            return v;
        }());

    // Current per-value counts and the smallest admissible total.
    std::vector<std::vector<long long>> count(detail::kFactors);
    std::size_t step = 1;
    std::size_t n_min = records.size();
    for (std::size_t f = 0; f < detail::kFactors; ++f) {
        const auto d = fs[f].domain.size();
        if (d == 0) continue;
        count[f].assign(d, 0);
        for (const auto& [key, members] : strata) count[f][static_cast<std::size_t>(key[f])] += static_cast<long long>(members.size());
        step = std::lcm(step, d);
        n_min = std::max(n_min, d * static_cast<std::size_t>(*std::max_element(count[f].begin(), count[f].end())));
    }
    n_min = (n_min + step - 1) / step * step;

    std::vector<Key> keys;
    std::vector<long long> sizes;
    for (const auto& [key, members] : strata) {
        keys.push_back(key);
        sizes.push_back(static_cast<long long>(members.size()));
    }

    // Greedy fill: only cells whose exact factors (label, answerability) still need
    // records are eligible, and the cell that most reduces the remaining deficits wins.
    // Configuration factors may end up off by one; anything worse tries a larger total.
    std::optional<std::vector<long long>> added;
    for (std::size_t total = n_min; total <= n_min * 8 + step * 64 && !added; total += step) {
        std::vector<std::vector<long long>> deficit(detail::kFactors);
        for (std::size_t f = 0; f < detail::kFactors; ++f) {
            if (fs[f].domain.empty()) continue;
            const auto target = static_cast<long long>(total / fs[f].domain.size());
            for (auto c : count[f]) deficit[f].push_back(target - c);
        }
        std::vector<long long> add(keys.size(), 0);
        long long remaining = static_cast<long long>(total - records.size());
        bool stuck = false;
        while (remaining > 0) {
            std::size_t best = keys.size();
            double best_score = 0;
            double best_load = 0;
            for (std::size_t c = 0; c < keys.size(); ++c) {
                double score = 0;
                bool ok = true;
                for (std::size_t f = 0; f < detail::kFactors && ok; ++f) {
                    if (fs[f].domain.empty()) continue;
                    const auto d = deficit[f][static_cast<std::size_t>(keys[c][f])];
                    if (fs[f].exact) ok = d > 0;
                    score += static_cast<double>(d) * static_cast<double>(fs[f].domain.size());
                }
                if (!ok) continue;
                const double load = static_cast<double>(add[c]) / static_cast<double>(sizes[c]);
                if (best == keys.size() || score > best_score || (score == best_score && load < best_load)) {
                    best = c;
                    best_score = score;
                    best_load = load;
                }
            }
            if (best == keys.size()) {
                stuck = true;
                break;
            }
            ++add[best];
            for (std::size_t f = 0; f < detail::kFactors; ++f) {
                if (!fs[f].domain.empty()) --deficit[f][static_cast<std::size_t>(keys[best][f])];
            }
            --remaining;
        }
        if (stuck) continue;
        // Repair: move one addition between cells that agree on the exact factors while
        // that lowers the summed squared configuration deficit.
        for (bool improved = true; improved;) {
            improved = false;
            for (std::size_t c = 0; c < keys.size() && !improved; ++c) {
                if (add[c] == 0) continue;
                for (std::size_t o = 0; o < keys.size() && !improved; ++o) {
                    long long delta = 0;
                    bool same_exact = true;
                    for (std::size_t f = 0; f < detail::kFactors; ++f) {
                        if (fs[f].domain.empty() || keys[c][f] == keys[o][f]) continue;
                        if (fs[f].exact) {
                            same_exact = false;
                            break;
                        }
                        const auto d1 = deficit[f][static_cast<std::size_t>(keys[c][f])];
                        const auto d2 = deficit[f][static_cast<std::size_t>(keys[o][f])];
                        delta += 2 * (d1 - d2) + 2;
                    }
                    if (!same_exact || o == c || delta >= 0) continue;
                    --add[c];
                    ++add[o];
                    for (std::size_t f = 0; f < detail::kFactors; ++f) {
                        if (fs[f].domain.empty()) continue;
                        ++deficit[f][static_cast<std::size_t>(keys[c][f])];
                        --deficit[f][static_cast<std::size_t>(keys[o][f])];
                    }
                    improved = true;
                }
            }
        }
        bool within = true;
        for (std::size_t f = 0; f < detail::kFactors && within; ++f) {
            for (auto d : deficit[f]) within = within && (fs[f].exact ? d == 0 : d >= -1 && d <= 1);
        }
        if (within) added = std::move(add);
    }
    if (!added) throw Error("cannot balance: the populated strata cannot reach the target ratios");

    std::vector<std::pair<std::size_t, std::size_t>> items;
    std::vector<std::size_t> dup_count(records.size(), 0);
    for (std::size_t i = 0; i < records.size(); ++i) items.emplace_back(i, 0);
    for (std::size_t c = 0; c < keys.size(); ++c) {
        const auto& members = strata[keys[c]];
        std::string name;
        for (auto v : keys[c]) name += std::to_string(v);
        KeyedRng rng(seed, "oversample/" + name);
        for (long long k = 0; k < (*added)[c]; ++k) {
            auto pick = members[static_cast<std::size_t>(rng.below(members.size()))];
            items.emplace_back(pick, ++dup_count[pick]);
        }
    }
    return canonical(std::move(items));
}

// ---------------------------------------------------------------------------
// Persistence

struct Source {
    std::string blob;      // file name inside the dataset directory
    std::string manifest;  // file name inside the dataset directory
    std::string model_id;
    std::string quantization;
    std::map<std::string, std::size_t> dims;
    std::size_t total_sentences = 0;
    std::size_t valid_sentences = 0;
    std::size_t invalid_sentences = 0;
};

inline json record_to_json(const DatasetRecord& r) {
    json j{{"record_id", r.record_id},       {"question_id", r.question_id}, {"model_id", r.model_id},
           {"quantization", r.quantization}, {"label", r.label},             {"source", r.source}};
    if (r.template_id) j["template_id"] = prompts::to_string(*r.template_id);
    if (r.chunk_size) j["chunk_size"] = *r.chunk_size;
    if (r.chunks_per_prompt) j["chunks_per_prompt"] = *r.chunks_per_prompt;
    if (r.answerable) j["answerable"] = *r.answerable;
    json v = json::object();
    for (const auto& [k, ref] : r.vectors) v[k] = {{"offset", ref.offset}, {"length", ref.length}};
    j["vectors"] = v;
    return j;
}

inline DatasetRecord record_from_json(const json& j) {
    DatasetRecord r;
    r.record_id = j.at("record_id").get<std::string>();
    r.question_id = j.at("question_id").get<std::string>();
    r.model_id = j.value("model_id", std::string{});
    r.quantization = j.value("quantization", std::string{"none"});
    r.label = j.at("label").get<int>();
    r.source = j.value("source", std::size_t{0});
    if (auto t = j.find("template_id"); t != j.end() && !t->is_null())
        r.template_id = prompts::template_from_string(t->get<std::string>());
    if (auto t = j.find("chunk_size"); t != j.end() && !t->is_null()) r.chunk_size = t->get<int>();
    if (auto t = j.find("chunks_per_prompt"); t != j.end() && !t->is_null()) r.chunks_per_prompt = t->get<int>();
    if (auto t = j.find("answerable"); t != j.end() && !t->is_null()) r.answerable = t->get<bool>();
    if (auto v = j.find("vectors"); v != j.end()) {
        for (const auto& [k, ref] : v->items())
            r.vectors[k] = {ref.at("offset").get<std::uint64_t>(), ref.at("length").get<std::uint64_t>()};
    }
    return r;
}

/// An assembled dataset directory: dataset.manifest.json plus the untouched state blobs.
struct Dataset {
    std::filesystem::path dir;
    std::vector<Source> sources;
    std::vector<DatasetRecord> records;
    SplitAssignment splits;
    std::uint64_t seed = 0;
    Ratios ratios;

    static constexpr const char* kManifestName = "dataset.manifest.json";

    std::vector<std::size_t> indices_in(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i) {
            auto it = splits.find(records[i].question_id);
            if (it != splits.end() && it->second == s) out.push_back(i);
        }
        return out;
    }

    /// Dimension of the concatenation of `kinds`, which must be equal across sources.
    std::size_t input_size(const std::vector<std::string>& kinds) const {
        std::size_t total = 0;
        for (const auto& k : kinds) {
            std::optional<std::size_t> dim;
            for (const auto& s : sources) {
                auto it = s.dims.find(k);
                if (it == s.dims.end()) throw Error(fmt::format("state kind '{}' missing from a source", k));
                if (dim && *dim != it->second) throw Error(fmt::format("state kind '{}' differs across sources", k));
                dim = it->second;
            }
            if (!dim) throw Error("dataset has no sources");
            total += *dim;
        }
        return total;
    }

    /// Row-major features for `which`, each row the concatenation of `kinds` in order.
    std::vector<float> features(std::span<const std::size_t> which, const std::vector<std::string>& kinds) const {
        const std::size_t width = input_size(kinds);
        std::vector<float> out(which.size() * width);
        std::vector<std::optional<states::Reader>> readers(sources.size());
        for (std::size_t row = 0; row < which.size(); ++row) {
            const auto& r = records[which[row]];
            auto& reader = readers[r.source];
            if (!reader) {
                const auto& s = sources[r.source];
                reader.emplace(dir / s.blob, states::Manifest::from_json(jsonl::read_json(dir / s.manifest)));
            }
            std::size_t col = 0;
            for (const auto& k : kinds) {
                auto ref = r.vectors.find(k);
                if (ref == r.vectors.end()) throw Error(fmt::format("record {} lacks '{}'", r.record_id, k));
                const std::size_t n = ref->second.length / 4;
                reader->read_into(ref->second.offset, ref->second.length,
                                  std::span<float>(out).subspan(row * width + col, n));
                col += n;
            }
        }
        return out;
    }

    json manifest_json(const std::map<Split, std::vector<std::size_t>>& balanced) const {
        json srcs = json::array();
        for (const auto& s : sources)
            srcs.push_back({{"blob", s.blob},
                            {"manifest", s.manifest},
                            {"model_id", s.model_id},
                            {"quantization", s.quantization},
                            {"dims", s.dims},
                            {"total_sentences", s.total_sentences},
                            {"valid_sentences", s.valid_sentences},
                            {"invalid_sentences", s.invalid_sentences}});
        json recs = json::array();
        for (const auto& r : records) recs.push_back(record_to_json(r));
        json split_json = json::object();
        for (const auto& [q, s] : splits) split_json[q] = to_string(s);
        json bal = json::object();
        for (const auto& [s, idx] : balanced) {
            std::map<std::string, std::size_t> multiplicity;
            std::map<std::string, std::size_t> strata;
            for (auto i : idx) {
                const auto& r = records[i];
                multiplicity[r.record_id]++;
                strata[fmt::format("label={}", r.label)]++;
                if (r.answerable) strata[fmt::format("answerable={}", *r.answerable)]++;
                if (r.template_id) strata[fmt::format("template_id={}", prompts::to_string(*r.template_id))]++;
                if (r.chunk_size) strata[fmt::format("chunk_size={}", *r.chunk_size)]++;
                if (r.chunks_per_prompt) strata[fmt::format("chunks_per_prompt={}", *r.chunks_per_prompt)]++;
            }
            json dups = json::object();
            for (const auto& [id, m] : multiplicity) {
                if (m > 1) dups[id] = m;
            }
            bal[std::string(to_string(s))] = {{"size", idx.size()}, {"stratum_counts", strata}, {"duplicates", dups}};
        }
        return json{{"format", "hallu-dataset"},
                     {"version", 1},
                     {"seed", seed},
                     {"ratios", {ratios.train, ratios.val, ratios.test}},
                     {"sources", srcs},
                     {"records", recs},
                     {"splits", split_json},
                     {"balanced", bal}};
    }

    static Dataset load(const std::filesystem::path& dir) {
        auto j = jsonl::read_json(dir / kManifestName);
        if (j.value("format", std::string{}) != "hallu-dataset") throw Error(fmt::format("{} is not a dataset", dir.string()));
        Dataset d;
        d.dir = dir;
        d.seed = j.value("seed", std::uint64_t{0});
        if (auto r = j.find("ratios"); r != j.end() && r->size() == 3)
            d.ratios = {(*r)[0].get<double>(), (*r)[1].get<double>(), (*r)[2].get<double>()};
        for (const auto& s : j.at("sources")) {
            Source src;
            src.blob = s.at("blob").get<std::string>();
            src.manifest = s.at("manifest").get<std::string>();
            src.model_id = s.value("model_id", std::string{});
            src.quantization = s.value("quantization", std::string{"none"});
            src.dims = s.at("dims").get<std::map<std::string, std::size_t>>();
            src.total_sentences = s.value("total_sentences", std::size_t{0});
            src.valid_sentences = s.value("valid_sentences", std::size_t{0});
            src.invalid_sentences = s.value("invalid_sentences", std::size_t{0});
            d.sources.push_back(std::move(src));
        }
        for (const auto& r : j.at("records")) d.records.push_back(record_from_json(r));
        for (const auto& [q, s] : j.at("splits").items()) d.splits[q] = split_from_string(s.get<std::string>());
        return d;
    }
};

// ---------------------------------------------------------------------------
// Assembly

struct SourceInput {
    std::filesystem::path labeled;     // labeled.jsonl
    std::filesystem::path states_dir;  // states.bin + states_manifest.json
};

/// Joins labeled sentences with their state vectors, drops invalid labels, splits by
/// question and writes the dataset directory (state blobs are copied byte for byte).
inline Dataset assemble(const std::vector<SourceInput>& inputs, const Ratios& ratios, std::uint64_t seed,
                        const std::filesystem::path& out_dir, Diagnostics& diags) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    Dataset d;
    d.dir = out_dir;
    d.seed = seed;
    d.ratios = ratios;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto& in = inputs[k];
        auto manifest = states::Manifest::from_json(jsonl::read_json(in.states_dir / "states_manifest.json"));
        manifest.validate(fs::file_size(in.states_dir / "states.bin"));
        Source src;
        src.blob = fmt::format("states_{}.bin", k);
        src.manifest = fmt::format("states_{}.manifest.json", k);
        src.model_id = manifest.model_id;
        src.quantization = manifest.quantization;
        src.dims = manifest.dims;
        fs::copy_file(in.states_dir / "states.bin", out_dir / src.blob, fs::copy_options::overwrite_existing);
        fs::copy_file(in.states_dir / "states_manifest.json", out_dir / src.manifest,
                      fs::copy_options::overwrite_existing);

        std::map<std::tuple<std::string, std::size_t, std::string>, const states::Entry*> index;
        for (const auto& e : manifest.entries) index[{e.prompt_id, e.sentence_index, e.kind}] = &e;

        jsonl::for_each(
            in.labeled,
            [&](std::size_t line, const json& row) {
                ++src.total_sentences;
                auto label = labeler::label_from_json(row.contains("label") ? row["label"] : json(nullptr));
                if (label == labeler::Label::invalid) {
                    ++src.invalid_sentences;
                    return;
                }
                DatasetRecord r;
                const auto prompt_id = row.at("prompt_id").get<std::string>();
                const auto sentence_index = row.at("sentence_index").get<std::size_t>();
                r.record_id = fmt::format("{}:{}:{}", k, prompt_id, sentence_index);
                r.question_id = row.value("question_id", prompt_id);
                r.model_id = manifest.model_id;
                r.quantization = manifest.quantization;
                r.label = label == labeler::Label::hallucinated ? 1 : 0;
                r.source = k;
                if (auto t = row.find("template_id"); t != row.end() && !t->is_null())
                    r.template_id = prompts::template_from_string(t->get<std::string>());
                if (auto t = row.find("chunk_size"); t != row.end() && !t->is_null()) r.chunk_size = t->get<int>();
                if (auto t = row.find("chunks_per_prompt"); t != row.end() && !t->is_null())
                    r.chunks_per_prompt = t->get<int>();
                if (auto t = row.find("answerable"); t != row.end() && !t->is_null()) r.answerable = t->get<bool>();
                for (const auto& [kind, dim] : manifest.dims) {
                    auto it = index.find({prompt_id, sentence_index, kind});
                    if (it == index.end()) continue;
                    r.vectors[kind] = {it->second->offset, it->second->length};
                }
                if (r.vectors.size() != manifest.dims.size()) {
                    diags.push_back({fmt::format("{}:{}", in.labeled.string(), line),
                                     fmt::format("{}#{} lacks state vectors, skipped", prompt_id, sentence_index)});
                    return;
                }
                ++src.valid_sentences;
                d.records.push_back(std::move(r));
            },
            diags);
        d.sources.push_back(std::move(src));
    }
    std::sort(d.records.begin(), d.records.end(),
              [](const DatasetRecord& a, const DatasetRecord& b) { return a.record_id < b.record_id; });
    d.splits = split(d.records, ratios, seed);

    std::map<Split, std::vector<std::size_t>> balanced;
    for (Split s : {Split::train, Split::val, Split::test}) {
        auto idx = d.indices_in(s);
        if (idx.empty()) continue;
        std::vector<DatasetRecord> subset;
        for (auto i : idx) subset.push_back(d.records[i]);
        const bool configured = std::all_of(subset.begin(), subset.end(), [](const DatasetRecord& r) {
            return r.answerable && r.template_id && r.chunk_size && r.chunks_per_prompt;
        });
        try {
            auto chosen = oversample(subset, configured ? BalanceSpec{} : BalanceSpec::label_only(), seed);
            for (auto& c : chosen) c = idx[c];
            balanced[s] = std::move(chosen);
        } catch (const Error& e) {
            diags.push_back({std::string(to_string(s)), fmt::format("not balanced: {}", e.what())});
        }
    }
    jsonl::write_json(out_dir / Dataset::kManifestName, d.manifest_json(balanced));
    return d;
}

// ---------------------------------------------------------------------------
// External corpora

/// Maps a RAGTruth-style release onto labeled rows. `annotations` holds the release's
/// response records ({id, source_id, response, labels:[{start, end, ...}]}); `responses`
/// holds the capture output for the same ids with per-sentence character spans. A
/// sentence is hallucinated iff it overlaps an annotated span. Answerability and prompt
/// configuration stay unset.
inline std::vector<json> ingest_ragtruth(const std::vector<json>& annotations, const std::vector<json>& responses,
                                         Diagnostics& diags) {
    std::map<std::string, const json*> by_id;
    for (const auto& a : annotations) {
        if (!a.contains("id")) continue;
        by_id[a["id"].is_string() ? a["id"].get<std::string>() : a["id"].dump()] = &a;
    }
    std::vector<json> rows;
    for (const auto& rj : responses) {
        auto r = states::response_from_json(rj);
        auto it = by_id.find(r.prompt_id);
        if (it == by_id.end()) {
            diags.push_back({r.prompt_id, "no annotation record, skipped"});
            continue;
        }
        const json& ann = *it->second;
        std::vector<std::pair<std::size_t, std::size_t>> spans;
        for (const auto& l : ann.value("labels", json::array()))
            spans.emplace_back(l.at("start").get<std::size_t>(), l.at("end").get<std::size_t>());
        const std::string question = ann.contains("source_id")
                                         ? (ann["source_id"].is_string() ? ann["source_id"].get<std::string>()
                                                                         : ann["source_id"].dump())
                                         : r.prompt_id;
        for (const auto& s : r.sentences) {
            bool hit = std::any_of(spans.begin(), spans.end(),
                                   [&](const auto& sp) { return sp.first < s.end && sp.second > s.start; });
            rows.push_back({{"prompt_id", r.prompt_id},
                            {"question_id", question},
                            {"sentence_index", s.index},
                            {"sentence", s.text},
                            {"label", hit ? 1 : 0}});
        }
    }
    return rows;
}

}  // namespace hallu::dataset
