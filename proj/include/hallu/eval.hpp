#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/dataset.hpp"
#include "hallu/error.hpp"
#include "hallu/kv_config.hpp"
#include "hallu/probe.hpp"
#include "hallu/text.hpp"

namespace hallu::eval {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Answerability { both, answerable_only, unanswerable_only };

inline std::string_view to_string(Answerability a) {
    switch (a) {
        case Answerability::both: return "both";
        case Answerability::answerable_only: return "answerable";
        case Answerability::unanswerable_only: return "unanswerable";
    }
    return "?";
}

struct Withhold {
    std::string field;  // answerable, chunk_size, chunks_per_prompt, template_id
    std::string value;

    std::string label() const { return field + "=" + value; }

    static Withhold parse(const std::string& s) {
        auto eq = s.find('=');
        if (eq == std::string::npos) throw ConfigError(fmt::format("withhold '{}' must look like field=value", s));
        Withhold w{std::string(text::trim(s.substr(0, eq))), std::string(text::trim(s.substr(eq + 1)))};
        static const std::vector<std::string> fields = {"answerable", "chunk_size", "chunks_per_prompt", "template_id"};
        if (std::find(fields.begin(), fields.end(), w.field) == fields.end())
            throw ConfigError(fmt::format("cannot withhold unknown field '{}'", w.field));
        return w;
    }

    bool matches(const dataset::DatasetRecord& r) const {
        if (field == "answerable") return r.answerable && (*r.answerable ? "true" : "false") == value;
        if (field == "chunk_size") return r.chunk_size && std::to_string(*r.chunk_size) == value;
        if (field == "chunks_per_prompt") return r.chunks_per_prompt && std::to_string(*r.chunks_per_prompt) == value;
        if (field == "template_id") return r.template_id && prompts::to_string(*r.template_id) == value;
        return false;
    }
};

struct Reference {
    double mean = 0;  // percent
    double std = 0;
};

/// Parsed experiment file. See README for the key list.
struct ExperimentSpec {
    std::string kind = "table";
    fs::path dataset;
    std::string model;  // empty selects every model in the dataset
    std::vector<std::string> quantizations = {"all"};
    std::vector<std::string> states = {"cev_middle"};
    Answerability answerability = Answerability::both;
    std::vector<Withhold> withhold;
    fs::path test_dataset;
    std::string test_model;
    std::size_t seeds = 10;
    std::size_t workers = 1;
    probe::ProbeConfig probe;
    std::map<std::pair<std::string, std::string>, Reference> reference;

    static ExperimentSpec from_config(const KeyValueConfig& c, const fs::path& base = {}) {
        ExperimentSpec s;
        s.kind = c.get_or("kind", s.kind);
        static const std::vector<std::string> kinds = {"table", "crosstest", "ablate", "rates"};
        if (std::find(kinds.begin(), kinds.end(), s.kind) == kinds.end())
            throw ConfigError(fmt::format("unknown experiment kind '{}'", s.kind));
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
        s.dataset = resolve(c.require("dataset"));
        s.model = c.get_or("model", "");
        if (auto q = c.list("quantizations"); !q.empty()) s.quantizations = q;
        for (const auto& q : s.quantizations) {
            if (q != "all" && std::find(states::kQuantizations.begin(), states::kQuantizations.end(), q) ==
                                  states::kQuantizations.end())
                throw ConfigError(fmt::format("unknown quantization '{}'", q));
        }
        if (auto st = c.list("states"); !st.empty()) s.states = st;
        for (const auto& row : s.states) {
            for (const auto& k : text::split(row, '+')) {
                if (!states::is_state_kind(k)) throw ConfigError(fmt::format("unknown state kind '{}'", k));
            }
        }
        const auto a = c.get_or("answerability", "both");
        if (a == "both") s.answerability = Answerability::both;
        else if (a == "answerable") s.answerability = Answerability::answerable_only;
        else if (a == "unanswerable") s.answerability = Answerability::unanswerable_only;
        else throw ConfigError(fmt::format("answerability must be both, answerable or unanswerable, not '{}'", a));
        for (const auto& w : c.list("withhold")) s.withhold.push_back(Withhold::parse(w));
        if (auto t = c.get("test_dataset")) s.test_dataset = resolve(*t);
        s.test_model = c.get_or("test_model", s.model);
        if (s.kind == "crosstest" && s.test_dataset.empty())
            throw ConfigError("crosstest needs test_dataset");
        if (s.kind == "ablate" && s.withhold.empty()) throw ConfigError("ablate needs at least one withhold entry");
        const auto seeds = c.get_int("seeds", 10);
        if (seeds < 1) throw ConfigError("seeds must be at least 1");
        s.seeds = static_cast<std::size_t>(seeds);
        s.workers = static_cast<std::size_t>(std::max<long long>(1, c.get_int("workers", 1)));
        s.probe.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
        s.probe.learning_rate = c.get_double("probe.learning_rate", s.probe.learning_rate);
        s.probe.weight_decay = c.get_double("probe.weight_decay", s.probe.weight_decay);
        s.probe.dropout = c.get_double("probe.dropout", s.probe.dropout);
        s.probe.max_epochs = static_cast<std::size_t>(c.get_int("probe.max_epochs", static_cast<long long>(s.probe.max_epochs)));
        s.probe.patience = static_cast<std::size_t>(c.get_int("probe.patience", static_cast<long long>(s.probe.patience)));
        s.probe.batch_size = static_cast<std::size_t>(c.get_int("probe.batch_size", static_cast<long long>(s.probe.batch_size)));
        s.probe.threshold = c.get_double("probe.threshold", s.probe.threshold);
        s.probe.standardize = c.get_or("probe.standardize", "false") == "true";
        for (const auto& [key, values] : c.raw()) {
            if (key.rfind("reference.", 0) != 0) continue;
            const auto rest = key.substr(10);
            const auto dot = rest.rfind('.');
            if (dot == std::string::npos || values.empty() || values.size() > 2)
                throw ConfigError(fmt::format("reference entry '{}' must be row.column = mean[, std]", key));
            Reference r;
            try {
                r.mean = std::stod(values[0]);
                r.std = values.size() > 1 ? std::stod(values[1]) : 0.0;
            } catch (const std::exception&) {
                throw ConfigError(fmt::format("reference entry '{}' is not numeric", key));
            }
            s.reference[{rest.substr(0, dot), rest.substr(dot + 1)}] = r;
        }
        return s;
    }

    static ExperimentSpec load(const fs::path& path) {
        return from_config(KeyValueConfig::load(path), path.parent_path());
    }

    json to_json() const {
        json w = json::array();
        for (const auto& x : withhold) w.push_back(x.label());
        auto p = probe::to_json(probe);
        p.erase("input_size");
        return {{"kind", kind},           {"dataset", dataset.string()},  {"model", model},
                {"quantizations", quantizations}, {"states", states}, {"answerability", to_string(answerability)},
                {"withhold", w},          {"test_dataset", test_dataset.string()}, {"test_model", test_model},
                {"seeds", seeds},         {"probe", p}};
    }
};

struct Cell {
    Cell() = default;
    Cell(std::string r, std::string c) : row(std::move(r)), col(std::move(c)) {}

    std::string row;
    std::string col;
    bool available = false;
    std::string reason;
    probe::TrainReport report;
    std::optional<double> value;  // percent: mean accuracy, or hallucination rate
    std::optional<double> spread;
    std::optional<Reference> reference;
    std::optional<bool> within_tolerance;
    std::optional<double> delta;
    json detail = json::object();
};

struct Grid {
    std::string kind;
    std::vector<std::string> rows;
    std::vector<std::string> cols;
    std::vector<Cell> cells;
    json spec;
    std::vector<std::string> notes;

    const Cell* find(const std::string& row, const std::string& col) const {
        for (const auto& c : cells) {
            if (c.row == row && c.col == col) return &c;
        }
        return nullptr;
    }

    /// False when any cell with a reference value falls outside its tolerance.
    bool tolerance_ok() const {
        return std::all_of(cells.begin(), cells.end(),
                           [](const Cell& c) { return !c.within_tolerance || *c.within_tolerance; });
    }

    json to_json() const {
        json cs = json::array();
        for (const auto& c : cells) {
            json j{{"row", c.row}, {"col", c.col}, {"available", c.available}};
            if (!c.available) j["reason"] = c.reason;
            if (c.value) j["value"] = *c.value;
            if (c.spread) j["std"] = *c.spread;
            if (c.reference) j["reference"] = {{"mean", c.reference->mean}, {"std", c.reference->std}};
            if (c.within_tolerance) j["within_tolerance"] = *c.within_tolerance;
            if (c.delta) j["delta"] = *c.delta;
            if (!c.report.seeds.empty()) j["report"] = probe::to_json(c.report);
            if (!c.detail.empty()) j["detail"] = c.detail;
            cs.push_back(std::move(j));
        }
        return {{"kind", kind}, {"rows", rows}, {"cols", cols}, {"cells", cs}, {"spec", spec}, {"notes", notes}};
    }

    std::string render() const {
        std::vector<std::vector<std::string>> table;
        std::vector<std::string> header = {""};
        header.insert(header.end(), cols.begin(), cols.end());
        table.push_back(header);
        for (const auto& r : rows) {
            std::vector<std::string> line = {r};
            for (const auto& col : cols) {
                const Cell* c = find(r, col);
                if (!c || !c->available) {
                    line.push_back("n/a");
                    continue;
                }
                std::string s = c->spread ? fmt::format("{:.2f}±{:.2f}", *c->value, *c->spread)
                                          : fmt::format("{:.2f}", *c->value);
                if (c->delta) s += fmt::format(" ({:+.2f})", *c->delta);
                if (c->within_tolerance) s += *c->within_tolerance ? " ok" : " MISS";
                line.push_back(std::move(s));
            }
            table.push_back(std::move(line));
        }
        std::vector<std::size_t> width(header.size(), 0);
        for (const auto& line : table) {
            for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], text::utf8_length(line[i]));
        }
        std::string out;
        for (const auto& line : table) {
            for (std::size_t i = 0; i < line.size(); ++i) {
                out += line[i];
                if (i + 1 < line.size()) out += std::string(width[i] - text::utf8_length(line[i]) + 2, ' ');
            }
            out += '\n';
        }
        for (const auto& n : notes) out += "note: " + n + "\n";
        return out;
    }

    void write(const fs::path& dir) const {
        fs::create_directories(dir);
        jsonl::write_json(dir / "grid.json", to_json());
        std::ofstream(dir / "grid.txt") << render();
    }
};

/// A reproduced mean matches when it lies within max(3 points, 2 x reference std).
inline bool within_tolerance(double mean_percent, const Reference& ref) {
    return std::abs(mean_percent - ref.mean) <= std::max(3.0, 2.0 * ref.std) + 1e-9;
}

// ---------------------------------------------------------------------------
// Cell preparation

/// Indices of records whose source matches (model, quantization) and that pass the
/// answerability filter.
inline std::vector<std::size_t> select(const dataset::Dataset& ds, const std::string& model,
                                       const std::string& quantization, Answerability answerability) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ds.records.size(); ++i) {
        const auto& r = ds.records[i];
        if (!model.empty() && r.model_id != model) continue;
        if (quantization != "all" && r.quantization != quantization) continue;
        if (answerability == Answerability::answerable_only && !(r.answerable && *r.answerable)) continue;
        if (answerability == Answerability::unanswerable_only && !(r.answerable && !*r.answerable)) continue;
        out.push_back(i);
    }
    return out;
}

inline dataset::BalanceSpec balance_for(const dataset::Dataset& ds, const std::vector<std::size_t>& idx,
                                        Answerability answerability, const Withhold* withheld) {
    const bool configured = std::all_of(idx.begin(), idx.end(), [&](std::size_t i) {
        const auto& r = ds.records[i];
        return r.answerable && r.template_id && r.chunk_size && r.chunks_per_prompt;
    });
    if (!configured) return dataset::BalanceSpec::label_only();
    dataset::BalanceSpec spec;
    if (answerability != Answerability::both) spec.answerability = false;
    if (withheld) {
        auto drop = [&](std::vector<int>& domain, int v) { domain.erase(std::remove(domain.begin(), domain.end(), v), domain.end()); };
        if (withheld->field == "answerable") spec.answerability = false;
        else if (withheld->field == "chunk_size") drop(spec.chunk_sizes, std::stoi(withheld->value));
        else if (withheld->field == "chunks_per_prompt") drop(spec.chunk_counts, std::stoi(withheld->value));
        else if (withheld->field == "template_id")
            drop(spec.templates, static_cast<int>(prompts::template_from_string(withheld->value)));
    }
    return spec;
}

inline std::vector<std::size_t> balanced(const dataset::Dataset& ds, const std::vector<std::size_t>& idx,
                                         const dataset::BalanceSpec& spec, std::string_view what) {
    if (idx.empty()) throw Error(fmt::format("no {} records", what));
    std::vector<dataset::DatasetRecord> subset;
    subset.reserve(idx.size());
    for (auto i : idx) subset.push_back(ds.records[i]);
    try {
        auto chosen = dataset::oversample(subset, spec, ds.seed);
        for (auto& c : chosen) c = idx[c];
        return chosen;
    } catch (const Error& e) {
        throw Error(fmt::format("{} split: {}", what, e.what()));
    }
}

inline probe::Samples load_samples(const dataset::Dataset& ds, const std::vector<std::size_t>& which,
                                   const std::vector<std::string>& kinds) {
    auto features = ds.features(which, kinds);
    std::vector<int> labels;
    labels.reserve(which.size());
    for (auto i : which) labels.push_back(ds.records[i].label);
    return probe::Samples::from_rows(features, ds.input_size(kinds), labels);
}

inline std::vector<std::size_t> in_split(const dataset::Dataset& ds, const std::vector<std::size_t>& idx,
                                         dataset::Split s) {
    std::vector<std::size_t> out;
    for (auto i : idx) {
        auto it = ds.splits.find(ds.records[i].question_id);
        if (it != ds.splits.end() && it->second == s) out.push_back(i);
    }
    return out;
}

/// Signals a cell that cannot be computed; the run continues with the next cell.
class Unavailable : public Error {
public:
    using Error::Error;
};

/// Builds train/val/test for one cell. Withheld records leave train and val only.
inline probe::TrainData prepare(const dataset::Dataset& ds, const std::vector<std::size_t>& idx,
                                const std::vector<std::string>& kinds, Answerability answerability,
                                const Withhold* withheld, bool withheld_is_fatal) {
    auto train = in_split(ds, idx, dataset::Split::train);
    auto val = in_split(ds, idx, dataset::Split::val);
    auto test = in_split(ds, idx, dataset::Split::test);
    const auto full = balance_for(ds, idx, answerability, nullptr);
    auto reduced = full;
    if (withheld) {
        auto keep = [&](std::vector<std::size_t>& v) {
            std::erase_if(v, [&](std::size_t i) { return withheld->matches(ds.records[i]); });
        };
        keep(train);
        keep(val);
        reduced = balance_for(ds, idx, answerability, withheld);
    }
    probe::TrainData data;
    try {
        data.train = load_samples(ds, balanced(ds, train, reduced, "train"), kinds);
        data.val = load_samples(ds, balanced(ds, val, reduced, "validation"), kinds);
    } catch (const Error& e) {
        if (withheld && withheld_is_fatal) throw Error(fmt::format("withholding {}: {}", withheld->label(), e.what()));
        throw Unavailable(e.what());
    }
    try {
        data.test = load_samples(ds, balanced(ds, test, full, "test"), kinds);
    } catch (const Error& e) {
        throw Unavailable(e.what());
    }
    return data;
}

inline void fill(Cell& cell, const probe::TrainReport& report) {
    cell.available = report.failed < report.seeds.size();
    if (!cell.available) cell.reason = "every seed failed";
    cell.report = report;
    cell.value = report.mean_accuracy * 100.0;
    cell.spread = report.std_accuracy * 100.0;
}

inline void attach_reference(Cell& cell, const ExperimentSpec& spec) {
    auto it = spec.reference.find({cell.row, cell.col});
    if (it == spec.reference.end()) return;
    cell.reference = it->second;
    if (cell.available) cell.within_tolerance = within_tolerance(*cell.value, it->second);
    else cell.within_tolerance = false;
}

inline std::vector<std::string> kinds_of(const std::string& row) { return text::split(row, '+'); }

// ---------------------------------------------------------------------------
// Experiments

/// Rows are state kinds (or '+'-joined concatenations), columns quantizations.
inline Grid run_table(const ExperimentSpec& spec, const dataset::Dataset& ds) {
    Grid g{"table", spec.states, spec.quantizations, {}, spec.to_json(), {}};
    for (const auto& row : spec.states) {
        for (const auto& col : spec.quantizations) {
            Cell cell{row, col};
            try {
                auto idx = select(ds, spec.model, col, spec.answerability);
                auto data = prepare(ds, idx, kinds_of(row), spec.answerability, nullptr, false);
                cell.detail = {{"input_size", data.train.x.rows()},
                               {"train", data.train.size()},
                               {"val", data.val.size()},
                               {"test", data.test.size()}};
                fill(cell, probe::train_seeds(data, spec.probe, spec.seeds, spec.workers));
            } catch (const Unavailable& e) {
                cell.reason = e.what();
            }
            attach_reference(cell, spec);
            g.cells.push_back(std::move(cell));
        }
    }
    return g;
}

/// Train and validate on one dataset, test on another's balanced test split.
inline Grid cross_test(const ExperimentSpec& spec, const dataset::Dataset& train_ds, const dataset::Dataset& test_ds) {
    const std::string col = "cross";
    Grid g{"crosstest", spec.states, {col}, {}, spec.to_json(), {}};
    for (const auto& row : spec.states) {
        const auto kinds = kinds_of(row);
        if (train_ds.input_size(kinds) != test_ds.input_size(kinds))
            throw Error(fmt::format("'{}' has dimension {} in the training dataset but {} in the test dataset", row,
                                    train_ds.input_size(kinds), test_ds.input_size(kinds)));
        Cell cell{row, col};
        try {
            const auto quant = spec.quantizations.front();
            auto idx = select(train_ds, spec.model, quant, spec.answerability);
            auto data = prepare(train_ds, idx, kinds, spec.answerability, nullptr, false);
            auto test_idx = in_split(test_ds, select(test_ds, spec.test_model, quant, Answerability::both),
                                     dataset::Split::test);
            const auto test_spec = balance_for(test_ds, test_idx, Answerability::both, nullptr);
            data.test = load_samples(test_ds, balanced(test_ds, test_idx, test_spec, "test"), kinds);
            cell.detail = {{"input_size", data.train.x.rows()}, {"test", data.test.size()}};
            fill(cell, probe::train_seeds(data, spec.probe, spec.seeds, spec.workers));
        } catch (const Unavailable& e) {
            cell.reason = e.what();
        } catch (const Error& e) {
            cell.reason = e.what();
        }
        attach_reference(cell, spec);
        g.cells.push_back(std::move(cell));
    }
    return g;
}

/// One reference row ("none") plus one row per withheld value; each reports the delta
/// against the reference. Uses the first state row and the first quantization.
inline Grid ablate_withheld(const ExperimentSpec& spec, const dataset::Dataset& ds) {
    const auto& state = spec.states.front();
    const auto& quant = spec.quantizations.front();
    Grid g{"ablate", {"none"}, {quant}, {}, spec.to_json(), {fmt::format("state {}", state)}};
    for (const auto& w : spec.withhold) g.rows.push_back(w.label());
    const auto idx = select(ds, spec.model, quant, spec.answerability);

    Cell base{"none", quant};
    try {
        fill(base, probe::train_seeds(prepare(ds, idx, kinds_of(state), spec.answerability, nullptr, false), spec.probe,
                                      spec.seeds, spec.workers));
        base.delta = 0.0;
    } catch (const Unavailable& e) {
        base.reason = e.what();
    }
    attach_reference(base, spec);
    g.cells.push_back(base);
    for (const auto& w : spec.withhold) {
        Cell cell{w.label(), quant};
        try {
            fill(cell, probe::train_seeds(prepare(ds, idx, kinds_of(state), spec.answerability, &w, true), spec.probe,
                                          spec.seeds, spec.workers));
            if (base.available) cell.delta = *cell.value - *base.value;
        } catch (const Unavailable& e) {
            cell.reason = e.what();
        }
        attach_reference(cell, spec);
        g.cells.push_back(std::move(cell));
    }
    return g;
}

struct RateCount {
    std::size_t hallucinated = 0;
    std::size_t valid = 0;
};

/// Hallucination rate = hallucinated / valid per (model, quantization), overall and by
/// template. Rows are "model/quantization"; columns "all" and the template ids. Rates
/// compare against references at two decimals with no tolerance.
inline Grid hallucination_rates(const ExperimentSpec& spec, const std::vector<dataset::DatasetRecord>& records) {
    std::map<std::string, std::map<std::string, RateCount>> counts;
    for (const auto& r : records) {
        if (!spec.model.empty() && r.model_id != spec.model) continue;
        const auto row = r.model_id + "/" + r.quantization;
        auto add = [&](const std::string& col) {
            auto& c = counts[row][col];
            ++c.valid;
            c.hallucinated += r.label == 1;
        };
        add("all");
        if (r.template_id) add(std::string(prompts::to_string(*r.template_id)));
    }
    Grid g{"rates", {}, {"all"}, {}, spec.to_json(), {}};
    for (auto t : prompts::kTemplates) g.cols.push_back(std::string(prompts::to_string(t)));
    for (const auto& [row, cols] : counts) {
        g.rows.push_back(row);
        std::size_t per_template = 0;
        for (const auto& col : g.cols) {
            Cell cell{row, col};
            auto it = cols.find(col);
            if (it == cols.end() || it->second.valid == 0) {
                cell.reason = "no valid records";
                g.notes.push_back(fmt::format("{} {}: no valid records, omitted", row, col));
            } else {
                cell.available = true;
                cell.value = 100.0 * static_cast<double>(it->second.hallucinated) / static_cast<double>(it->second.valid);
                cell.detail = {{"hallucinated", it->second.hallucinated}, {"valid", it->second.valid}};
                if (col != "all") per_template += it->second.valid;
            }
            if (auto ref = spec.reference.find({row, col}); ref != spec.reference.end()) {
                cell.reference = ref->second;
                cell.within_tolerance =
                    cell.available && std::abs(std::round(*cell.value * 100.0) / 100.0 - ref->second.mean) < 0.005;
            }
            g.cells.push_back(std::move(cell));
        }
        const auto all = cols.find("all");
        if (all != cols.end() && per_template && per_template != all->second.valid)
            g.notes.push_back(fmt::format("{}: per-template valid counts sum to {}, overall {}", row, per_template,
                                          all->second.valid));
    }
    return g;
}

inline Grid run(const ExperimentSpec& spec) {
    auto ds = dataset::Dataset::load(spec.dataset);
    if (spec.kind == "table") return run_table(spec, ds);
    if (spec.kind == "crosstest") return cross_test(spec, ds, dataset::Dataset::load(spec.test_dataset));
    if (spec.kind == "ablate") return ablate_withheld(spec, ds);
    return hallucination_rates(spec, ds.records);
}

}  // namespace hallu::eval
