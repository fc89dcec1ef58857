#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "hallu/chat.hpp"
#include "hallu/corpus.hpp"
#include "hallu/dataset.hpp"
#include "hallu/digest.hpp"
#include "hallu/error.hpp"
#include "hallu/eval.hpp"
#include "hallu/jsonl.hpp"
#include "hallu/kv_config.hpp"
#include "hallu/labeler.hpp"
#include "hallu/parallel.hpp"
#include "hallu/probe.hpp"
#include "hallu/prompts.hpp"
#include "hallu/qa.hpp"
#include "hallu/states.hpp"

namespace hallu::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr std::string_view kToolVersion = "0.1.0";

using ClientFactory = std::function<std::shared_ptr<chat::Client>(const std::string& endpoint)>;

struct EndpointSettings {
    std::string url;
    std::string model = "gpt-4o-2024-05-13";
    double rate = 0;  // requests per second, 0 = unlimited
    double burst = 1;
    std::size_t workers = 1;
    chat::RetryPolicy retry;
};

/// SHA-256 of a file, or of a directory as the sorted list of (relative path, digest).
inline std::string digest_path(const fs::path& p) {
    if (fs::is_regular_file(p)) return sha256_file(p);
    if (!fs::is_directory(p)) return {};
    std::vector<std::pair<std::string, std::string>> files;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.emplace_back(fs::relative(e.path(), p).generic_string(), sha256_file(e.path()));
    }
    std::sort(files.begin(), files.end());
    Sha256 h;
    for (const auto& [name, d] : files) h.update(name).update(std::string_view("\0", 1)).update(d).update("\n");
    return h.hex();
}

// ---------------------------------------------------------------------------
// Stage runners. Each reads only the paths it is given and writes only its outputs.

struct StageSummary {
    std::map<std::string, std::size_t> counts;
    Diagnostics diagnostics;
};

inline StageSummary harvest(const fs::path& input, const Date& cutoff, const fs::path& output) {
    StageSummary s;
    auto records = jsonl::read_all(input, s.diagnostics);
    auto candidates = corpus::harvest(records, cutoff, s.diagnostics);
    std::vector<json> rows;
    for (const auto& c : candidates) rows.push_back(corpus::to_json(c));
    jsonl::write_all(output, rows);
    s.counts = {{"articles", records.size()}, {"candidates", candidates.size()}};
    return s;
}

inline std::vector<corpus::SentenceCandidate> read_candidates(const fs::path& path, Diagnostics& diags) {
    std::vector<corpus::SentenceCandidate> out;
    jsonl::for_each(path, [&](std::size_t, const json& j) { out.push_back(corpus::candidate_from_json(j)); }, diags);
    return out;
}

/// Writes accepted pairs to `output` and rejections to `<output>.rejected.jsonl`,
/// both in candidate order.
inline StageSummary qagen(const fs::path& candidates_path, chat::Client& client, const EndpointSettings& ep,
                          const fs::path& output, const chat::Sleeper& sleep = chat::real_sleeper()) {
    StageSummary s;
    auto candidates = read_candidates(candidates_path, s.diagnostics);
    qa::Options opt;
    opt.model = ep.model;
    opt.retry = ep.retry;
    chat::TokenBucket limiter(ep.rate, ep.burst);
    std::vector<std::optional<qa::Outcome>> outcomes(candidates.size());
    parallel_for(candidates.size(), ep.workers,
                 [&](std::size_t i) { outcomes[i] = qa::generate_qa(candidates[i], client, opt, sleep, &limiter); });
    std::vector<json> accepted, rejected;
    for (const auto& o : outcomes) {
        if (auto q = std::get_if<qa::QaPair>(&*o)) accepted.push_back(qa::to_json(*q));
        else {
            const auto& r = std::get<qa::Rejection>(*o);
            rejected.push_back({{"candidate_id", r.candidate_ref}, {"reason", r.reason}});
        }
    }
    jsonl::write_all(output, accepted);
    jsonl::write_all(fs::path(output.string() + ".rejected.jsonl"), rejected);
    s.counts = {{"candidates", candidates.size()}, {"accepted", accepted.size()}, {"rejected", rejected.size()}};
    return s;
}

inline StageSummary build_prompts(const fs::path& qa_path, const fs::path& candidates_path, std::uint64_t seed,
                                  const fs::path& output) {
    StageSummary s;
    auto candidates = read_candidates(candidates_path, s.diagnostics);
    std::map<std::string, const corpus::SentenceCandidate*> by_id;
    for (const auto& c : candidates) by_id[c.candidate_id] = &c;
    const auto pool = prompts::DistractorPool::from_candidates(candidates);
    std::vector<json> rows;
    std::size_t questions = 0;
    jsonl::for_each(
        qa_path,
        [&](std::size_t line, const json& j) {
            auto q = qa::qa_from_json(j);
            auto it = by_id.find(q.candidate_ref);
            if (it == by_id.end()) {
                s.diagnostics.push_back({fmt::format("{}:{}", qa_path.string(), line),
                                         fmt::format("unknown candidate {}", q.candidate_ref)});
                return;
            }
            try {
                auto [a, u] = prompts::build_prompt_pair(q, it->second->passage, pool, seed);
                rows.push_back(prompts::to_json(a));
                rows.push_back(prompts::to_json(u));
                ++questions;
            } catch (const Error& e) {
                s.diagnostics.push_back({fmt::format("{}:{}", qa_path.string(), line), e.what()});
            }
        },
        s.diagnostics);
    jsonl::write_all(output, rows);
    s.counts = {{"questions", questions}, {"prompts", rows.size()}};
    return s;
}

/// Judges every sentence of every captured response and writes labeled rows in
/// (response order, sentence order).
inline StageSummary label(const fs::path& responses_path, const fs::path& prompts_path, chat::Client& client,
                          const EndpointSettings& ep, const fs::path& output,
                          const chat::Sleeper& sleep = chat::real_sleeper()) {
    StageSummary s;
    std::map<std::string, prompts::RagPrompt> by_id;
    jsonl::for_each(
        prompts_path, [&](std::size_t, const json& j) { auto p = prompts::prompt_from_json(j); by_id[p.prompt_id] = p; },
        s.diagnostics);

    struct Job {
        const prompts::RagPrompt* prompt;
        const states::ResponseRecord* response;
        const states::SentenceSpan* sentence;
    };
    std::vector<states::ResponseRecord> responses;
    jsonl::for_each(responses_path, [&](std::size_t, const json& j) { responses.push_back(states::response_from_json(j)); },
                    s.diagnostics);
    std::vector<Job> jobs;
    for (const auto& r : responses) {
        auto it = by_id.find(r.prompt_id);
        if (it == by_id.end()) {
            s.diagnostics.push_back({r.prompt_id, "response has no matching prompt, skipped"});
            continue;
        }
        for (const auto& sentence : r.sentences) jobs.push_back({&it->second, &r, &sentence});
    }

    chat::TokenBucket limiter(ep.rate, ep.burst);
    std::vector<json> rows(jobs.size());
    parallel_for(jobs.size(), ep.workers, [&](std::size_t i) {
        const auto& job = jobs[i];
        const auto& p = *job.prompt;
        labeler::JudgeInput in{job.sentence->text, job.response->response, text::join(p.chunks, prompts::kChunkSeparator),
                               p.question, p.answer_quote, p.config.answerable};
        auto result = labeler::judge_sentence(in, client, ep.model, ep.retry, sleep, &limiter);
        json row{{"prompt_id", p.prompt_id},
                 {"question_id", p.question_id},
                 {"sentence_index", job.sentence->index},
                 {"sentence", job.sentence->text},
                 {"answerable", p.config.answerable},
                 {"template_id", prompts::to_string(p.config.template_id)},
                 {"chunk_size", p.config.chunk_size},
                 {"chunks_per_prompt", p.config.chunks_per_prompt}};
        if (result.verdict) {
            const auto& v = *result.verdict;
            row["conflicting"] = v.conflicting;
            row["grounded"] = v.grounded;
            row["has_factual_information"] = v.has_factual_information;
            row["no_clear_answer"] = v.no_clear_answer;
            row["rationale"] = v.rationale;
            row["label"] = labeler::label_to_json(labeler::map_booleans(p.config.answerable, v));
        } else {
            row["label"] = nullptr;
            row["failure"] = result.failure;
        }
        rows[i] = std::move(row);
    });
    std::size_t hallucinated = 0, grounded = 0, invalid = 0, failed = 0;
    for (const auto& r : rows) {
        if (r["label"].is_null()) ++invalid;
        else if (r["label"].get<int>() == 1) ++hallucinated;
        else ++grounded;
        failed += r.contains("failure");
    }
    jsonl::write_all(output, rows);
    s.counts = {{"sentences", rows.size()},
                {"hallucinated", hallucinated},
                {"grounded", grounded},
                {"invalid", invalid},
                {"judge_failures", failed}};
    return s;
}

inline StageSummary assemble(const std::vector<dataset::SourceInput>& inputs, const dataset::Ratios& ratios,
                             std::uint64_t seed, const fs::path& output) {
    StageSummary s;
    auto ds = dataset::assemble(inputs, ratios, seed, output, s.diagnostics);
    s.counts["records"] = ds.records.size();
    for (std::size_t k = 0; k < ds.sources.size(); ++k) {
        s.counts[fmt::format("source{}.valid", k)] = ds.sources[k].valid_sentences;
        s.counts[fmt::format("source{}.invalid", k)] = ds.sources[k].invalid_sentences;
    }
    return s;
}

struct TrainOptions {
    std::vector<std::string> kinds = {"cev_middle"};
    std::size_t seeds = 10;
    std::size_t workers = 1;
    std::string model;
    std::string quantization = "all";
    probe::ProbeConfig probe;
};

/// Trains on the dataset's train/val splits, tests on its test split; writes
/// report.json and one checkpoint per seed.
inline StageSummary train(const fs::path& dataset_dir, const TrainOptions& opt, const fs::path& output) {
    StageSummary s;
    auto ds = dataset::Dataset::load(dataset_dir);
    auto idx = eval::select(ds, opt.model, opt.quantization, eval::Answerability::both);
    probe::TrainData data;
    try {
        data = eval::prepare(ds, idx, opt.kinds, eval::Answerability::both, nullptr, false);
    } catch (const eval::Unavailable& e) {
        throw StageError(e.what());
    }
    fs::create_directories(output);
    auto report = probe::train_seeds(data, opt.probe, opt.seeds, opt.workers, [&](std::size_t i, const probe::Checkpoint& ck) {
        probe::write_checkpoint(output / fmt::format("seed_{}.hprb", opt.probe.seed + i), ck);
    });
    auto j = probe::to_json(report);
    j["states"] = opt.kinds;
    j["dataset"] = {{"train", data.train.size()}, {"val", data.val.size()}, {"test", data.test.size()}};
    jsonl::write_json(output / "report.json", j);
    for (const auto& seed : report.seeds) {
        if (!seed.ok) s.diagnostics.push_back({fmt::format("seed {}", seed.seed), seed.diagnostic});
    }
    s.counts = {{"seeds", report.seeds.size()}, {"failed", report.failed}};
    return s;
}

// ---------------------------------------------------------------------------
// Whole-pipeline runs

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> order = {"harvest", "qagen", "prompts", "label", "assemble", "train", "eval"};
    return order;
}

inline bool is_networked(const std::string& stage) { return stage == "qagen" || stage == "label"; }

/// Pipeline configuration, read from a key-value file:
///
///   stages = harvest, qagen, prompts, label, assemble, train, eval
///   work_dir = run
///   seed = 0
///   cutoff = 2024-01-01
///   [paths]    articles, captures (list of capture dirs), dataset, spec
///   [endpoint] url, model, rate, burst, workers, max_parse_retries, max_transport_retries
///   [dataset]  ratios
///   [train]    states, seeds, workers, model, quantization, learning_rate, max_epochs, patience, batch_size
struct RunConfig {
    std::vector<std::string> stages;
    fs::path work_dir = "run";
    std::uint64_t seed = 0;
    std::optional<Date> cutoff;
    fs::path articles;
    std::vector<fs::path> captures;
    fs::path dataset;  // prebuilt dataset; defaults to <work_dir>/dataset
    fs::path spec;
    EndpointSettings endpoint;
    dataset::Ratios ratios;
    TrainOptions train;
    std::string config_digest;

    static RunConfig from_config(const KeyValueConfig& c, const fs::path& base = {}) {
        RunConfig r;
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
        r.stages = c.list("stages");
        if (r.stages.empty()) r.stages = stage_order();
        for (const auto& s : r.stages) {
            if (std::find(stage_order().begin(), stage_order().end(), s) == stage_order().end())
                throw ConfigError(fmt::format("unknown stage '{}'", s));
        }
        r.work_dir = resolve(c.get_or("work_dir", "run"));
        r.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));
        if (auto d = c.get("cutoff")) {
            r.cutoff = Date::parse(*d);
            if (!r.cutoff) throw ConfigError(fmt::format("cutoff '{}' is not YYYY-MM-DD", *d));
        }
        if (auto p = c.get("paths.articles")) r.articles = resolve(*p);
        for (const auto& p : c.list("paths.captures")) r.captures.push_back(resolve(p));
        r.dataset = c.get("paths.dataset") ? resolve(*c.get("paths.dataset")) : r.work_dir / "dataset";
        if (auto p = c.get("paths.spec")) r.spec = resolve(*p);
        r.endpoint.url = c.get_or("endpoint.url", "");
        r.endpoint.model = c.get_or("endpoint.model", r.endpoint.model);
        r.endpoint.rate = c.get_double("endpoint.rate", 0);
        r.endpoint.burst = c.get_double("endpoint.burst", 1);
        r.endpoint.workers = static_cast<std::size_t>(std::max<long long>(1, c.get_int("endpoint.workers", 1)));
        r.endpoint.retry.max_parse_retries = static_cast<int>(c.get_int("endpoint.max_parse_retries", 2));
        r.endpoint.retry.max_transport_retries = static_cast<int>(c.get_int("endpoint.max_transport_retries", 3));
        if (auto v = c.get("dataset.ratios")) r.ratios = dataset::parse_ratios(*v);
        if (auto k = c.list("train.states"); !k.empty()) r.train.kinds = k;
        r.train.seeds = static_cast<std::size_t>(std::max<long long>(1, c.get_int("train.seeds", 10)));
        r.train.workers = static_cast<std::size_t>(std::max<long long>(1, c.get_int("train.workers", 1)));
        r.train.model = c.get_or("train.model", "");
        r.train.quantization = c.get_or("train.quantization", "all");
        r.train.probe.seed = r.seed;
        r.train.probe.learning_rate = c.get_double("train.learning_rate", r.train.probe.learning_rate);
        r.train.probe.max_epochs = static_cast<std::size_t>(c.get_int("train.max_epochs", 800));
        r.train.probe.patience = static_cast<std::size_t>(c.get_int("train.patience", 30));
        r.train.probe.batch_size = static_cast<std::size_t>(c.get_int("train.batch_size", 128));
        r.train.probe.standardize = c.get_or("train.standardize", "false") == "true";
        json raw = c.raw();
        r.config_digest = sha256_hex(raw.dump());
        return r;
    }

    static RunConfig load(const fs::path& path) { return from_config(KeyValueConfig::load(path), path.parent_path()); }

    bool enabled(const std::string& stage) const {
        return std::find(stages.begin(), stages.end(), stage) != stages.end();
    }

    /// Checks everything that can be checked without running a stage.
    void validate() const {
        if (enabled("harvest")) {
            if (articles.empty()) throw ConfigError("harvest needs paths.articles");
            if (!cutoff) throw ConfigError("harvest needs cutoff");
        }
        for (const auto& s : {"qagen", "label"}) {
            if (enabled(s) && endpoint.url.empty()) throw ConfigError(fmt::format("{} needs endpoint.url", s));
        }
        if ((enabled("label") || enabled("assemble")) && captures.empty())
            throw ConfigError("label and assemble need paths.captures");
        if (enabled("eval") && spec.empty()) throw ConfigError("eval needs paths.spec");
    }

    fs::path candidates() const { return work_dir / "candidates.jsonl"; }
    fs::path qa() const { return work_dir / "qa.jsonl"; }
    fs::path prompts() const { return work_dir / "prompts.jsonl"; }
    fs::path labeled(const fs::path& capture) const {
        return work_dir / "labeled" / (capture.filename().string() + ".labeled.jsonl");
    }
    fs::path train_dir() const { return work_dir / "train"; }
    fs::path eval_dir() const { return work_dir / "eval"; }
};

struct StageRecord {
    std::string stage;
    std::map<std::string, std::string> inputs;   // path -> digest
    std::map<std::string, std::string> outputs;  // path -> digest
    std::string key;                             // digest of stage name, settings and inputs
    bool cache_hit = false;
    StageSummary summary;
};

struct RunResult {
    std::vector<StageRecord> stages;
    std::optional<eval::Grid> grid;
    bool tolerance_ok = true;
    json manifest;
};

/// Runs the enabled stages in order. A stage whose inputs, settings and previous
/// outputs are unchanged since the last run is skipped and flagged as a cache hit.
/// On failure the stage's outputs move to <work_dir>/quarantine/<stage>.
inline RunResult run(const RunConfig& cfg, const ClientFactory& make_client = chat::make_client,
                     const chat::Sleeper& sleep = chat::real_sleeper()) {
    cfg.validate();
    fs::create_directories(cfg.work_dir);
    const auto manifest_path = cfg.work_dir / "run_manifest.json";
    json previous = fs::exists(manifest_path) ? jsonl::read_json(manifest_path) : json::object();

    std::shared_ptr<chat::Client> client;
    auto get_client = [&]() -> chat::Client& {
        if (!client) client = make_client(cfg.endpoint.url);
        return *client;
    };

    RunResult result;
    // Written after every run, failed or not, so completed stages stay cached.
    auto write_manifest = [&] {
        json stages = json::array();
        for (const auto& r : result.stages) {
            json diags = json::array();
            for (const auto& d : r.summary.diagnostics) diags.push_back({{"where", d.where}, {"message", d.message}});
            stages.push_back({{"stage", r.stage},
                              {"key", r.key},
                              {"inputs", r.inputs},
                              {"outputs", r.outputs},
                              {"cache_hit", r.cache_hit},
                              {"counts", r.summary.counts},
                              {"diagnostics", diags}});
        }
        result.manifest = {{"tool_version", kToolVersion}, {"config_digest", cfg.config_digest}, {"stages", stages}};
        jsonl::write_json(manifest_path, result.manifest);
    };
    for (const auto& stage : stage_order()) {
        if (!cfg.enabled(stage)) continue;
        StageRecord rec;
        rec.stage = stage;
        std::vector<fs::path> inputs, outputs;
        json settings = json::object();
        if (stage == "harvest") {
            inputs = {cfg.articles};
            outputs = {cfg.candidates()};
            settings["cutoff"] = cfg.cutoff->to_string();
        } else if (stage == "qagen") {
            inputs = {cfg.candidates()};
            outputs = {cfg.qa(), fs::path(cfg.qa().string() + ".rejected.jsonl")};
            settings = {{"endpoint", cfg.endpoint.url}, {"model", cfg.endpoint.model}};
        } else if (stage == "prompts") {
            inputs = {cfg.qa(), cfg.candidates()};
            outputs = {cfg.prompts()};
            settings["seed"] = cfg.seed;
        } else if (stage == "label") {
            inputs = {cfg.prompts()};
            for (const auto& c : cfg.captures) {
                inputs.push_back(c / "responses.jsonl");
                outputs.push_back(cfg.labeled(c));
            }
            settings = {{"endpoint", cfg.endpoint.url}, {"model", cfg.endpoint.model}};
        } else if (stage == "assemble") {
            for (const auto& c : cfg.captures) {
                inputs.push_back(cfg.labeled(c));
                inputs.push_back(c / "states.bin");
                inputs.push_back(c / "states_manifest.json");
            }
            outputs = {cfg.dataset};
            settings = {{"seed", cfg.seed}, {"ratios", {cfg.ratios.train, cfg.ratios.val, cfg.ratios.test}}};
        } else if (stage == "train") {
            inputs = {cfg.dataset};
            outputs = {cfg.train_dir()};
            settings = {{"states", cfg.train.kinds}, {"seeds", cfg.train.seeds}, {"probe", probe::to_json(cfg.train.probe)},
                        {"model", cfg.train.model}, {"quantization", cfg.train.quantization}};
        } else if (stage == "eval") {
            inputs = {cfg.spec, cfg.dataset};
            outputs = {cfg.eval_dir()};
        }
        for (const auto& in : inputs) {
            if (!fs::exists(in)) {
                write_manifest();
                throw StageError(fmt::format("stage '{}': missing input {}", stage, in.string()));
            }
            rec.inputs[in.string()] = digest_path(in);
        }
        rec.key = sha256_hex(json{{"stage", stage}, {"version", kToolVersion}, {"settings", settings},
                                  {"inputs", rec.inputs}}.dump());

        // Cache check: same key and every recorded output still has its recorded digest.
        if (auto prev = previous.find("stages"); prev != previous.end()) {
            for (const auto& p : *prev) {
                if (p.value("stage", "") != stage || p.value("key", "") != rec.key) continue;
                bool intact = true;
                for (const auto& out : outputs) {
                    auto o = p["outputs"].find(out.string());
                    intact = intact && o != p["outputs"].end() && fs::exists(out) && digest_path(out) == o->get<std::string>();
                }
                rec.cache_hit = intact;
            }
        }
        if (!rec.cache_hit) {
            try {
                if (stage == "harvest") rec.summary = harvest(cfg.articles, *cfg.cutoff, cfg.candidates());
                else if (stage == "qagen") rec.summary = qagen(cfg.candidates(), get_client(), cfg.endpoint, cfg.qa(), sleep);
                else if (stage == "prompts") rec.summary = build_prompts(cfg.qa(), cfg.candidates(), cfg.seed, cfg.prompts());
                else if (stage == "label") {
                    for (const auto& c : cfg.captures) {
                        auto s = label(c / "responses.jsonl", cfg.prompts(), get_client(), cfg.endpoint, cfg.labeled(c), sleep);
                        for (const auto& [k, v] : s.counts) rec.summary.counts[c.filename().string() + "." + k] = v;
                        rec.summary.diagnostics.insert(rec.summary.diagnostics.end(), s.diagnostics.begin(), s.diagnostics.end());
                    }
                } else if (stage == "assemble") {
                    std::vector<dataset::SourceInput> src;
                    for (const auto& c : cfg.captures) src.push_back({cfg.labeled(c), c});
                    if (fs::exists(cfg.dataset)) fs::remove_all(cfg.dataset);
                    rec.summary = assemble(src, cfg.ratios, cfg.seed, cfg.dataset);
                } else if (stage == "train") {
                    if (fs::exists(cfg.train_dir())) fs::remove_all(cfg.train_dir());
                    rec.summary = train(cfg.dataset, cfg.train, cfg.train_dir());
                } else if (stage == "eval") {
                    auto spec = eval::ExperimentSpec::load(cfg.spec);
                    spec.dataset = cfg.dataset;
                    auto grid = eval::run(spec);
                    grid.write(cfg.eval_dir());
                    result.tolerance_ok = grid.tolerance_ok();
                    result.grid = std::move(grid);
                }
            } catch (const std::exception& e) {
                const auto quarantine = cfg.work_dir / "quarantine" / stage;
                fs::create_directories(quarantine);
                for (const auto& out : outputs) {
                    if (fs::exists(out)) {
                        fs::remove_all(quarantine / out.filename());
                        fs::rename(out, quarantine / out.filename());
                    }
                }
                write_manifest();
                throw StageError(fmt::format("stage '{}' failed: {}", stage, e.what()));
            }
        } else if (stage == "eval" && fs::exists(cfg.eval_dir() / "grid.json")) {
            result.tolerance_ok = true;
            for (const auto& c : jsonl::read_json(cfg.eval_dir() / "grid.json").at("cells"))
                result.tolerance_ok = result.tolerance_ok && c.value("within_tolerance", true);
        }
        for (const auto& out : outputs) rec.outputs[out.string()] = fs::exists(out) ? digest_path(out) : "";
        result.stages.push_back(std::move(rec));
    }

    write_manifest();
    return result;
}

}  // namespace hallu::pipeline
