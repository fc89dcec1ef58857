#pragma once

// Builds small assembled datasets with known structure: every (model, quantization)
// source answers the same questions, configurations are spread so that every value
// appears in each split, and state vectors carry a label signal of chosen strength.

#include <random>

#include "hallu/dataset.hpp"

namespace synthetic {

using namespace hallu;
using json = nlohmann::json;
namespace fs = std::filesystem;

struct Spec {
    std::vector<std::pair<std::string, std::string>> sources = {{"m7b", "none"}};
    std::size_t questions = 60;
    std::size_t sentences = 3;  // per response
    std::map<std::string, std::size_t> dims = {{"cev_middle", 6}, {"cev_last", 6}, {"iav_middle", 8}, {"iav_last", 8}};
    std::map<std::string, double> signal = {};  // mean shift per kind, default 3
    double hallucination_rate = 0.4;
    std::uint64_t seed = 1;
};

inline std::string question_id(std::size_t q) { return fmt::format("art{:03d}:0:0", q); }

/// Writes one labeled.jsonl and capture directory per source under `dir`, assembles
/// them into `dir / "dataset"` and returns it.
inline dataset::Dataset build(const Spec& spec, const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);

    // The split is a function of question ids and seed only, so configurations can be
    // laid out per split before anything is written.
    std::vector<dataset::DatasetRecord> probe_records;
    for (std::size_t q = 0; q < spec.questions; ++q) {
        dataset::DatasetRecord r;
        r.question_id = question_id(q);
        probe_records.push_back(r);
    }
    const auto splits = dataset::split(probe_records, dataset::Ratios{}, spec.seed);
    std::map<std::string, prompts::PromptConfig> config;
    std::map<dataset::Split, std::size_t> position;
    for (std::size_t q = 0; q < spec.questions; ++q) {
        auto& k = position[splits.at(question_id(q))];
        prompts::PromptConfig c;
        // Two orthogonal Latin squares: every run of three questions covers each value.
        c.template_id = prompts::kTemplates[k % 3];
        c.chunk_size = prompts::kChunkSizes[(k % 3 + k / 3) % 3];
        c.chunks_per_prompt = prompts::kChunkCounts[(k % 3 + 2 * (k / 3)) % 3];
        config[question_id(q)] = c;
        ++k;
    }

    std::vector<dataset::SourceInput> inputs;
    for (std::size_t s = 0; s < spec.sources.size(); ++s) {
        const auto& [model, quant] = spec.sources[s];
        const auto src = dir / fmt::format("source{}", s);
        states::Writer writer(src / "capture", model, quant, 32);
        std::ofstream labeled(src / "labeled.jsonl");
        KeyedRng rng(spec.seed, fmt::format("source/{}/{}", model, quant));
        std::normal_distribution<double> normal;
        for (std::size_t q = 0; q < spec.questions; ++q) {
            const auto qid = question_id(q);
            for (bool answerable : {true, false}) {
                const auto pid = qid + (answerable ? "#a" : "#u");
                for (std::size_t i = 0; i < spec.sentences; ++i) {
                    const int label = rng.uniform() < spec.hallucination_rate ? 1 : 0;
                    for (const auto& [kind, dim] : spec.dims) {
                        auto sig = spec.signal.find(kind);
                        const double shift = (sig == spec.signal.end() ? 3.0 : sig->second) / std::sqrt(double(dim));
                        std::vector<float> v(dim);
                        for (auto& x : v) x = static_cast<float>(normal(rng) + (label ? shift : -shift) / 2);
                        writer.append(pid, i, kind, v);
                    }
                    const auto& c = config.at(qid);
                    labeled << json{{"prompt_id", pid},
                                    {"question_id", qid},
                                    {"sentence_index", i},
                                    {"sentence", fmt::format("Sentence {}.", i)},
                                    {"answerable", answerable},
                                    {"template_id", prompts::to_string(c.template_id)},
                                    {"chunk_size", c.chunk_size},
                                    {"chunks_per_prompt", c.chunks_per_prompt},
                                    {"label", label}}
                                   .dump()
                            << "\n";
                }
            }
        }
        writer.finish();
        inputs.push_back({src / "labeled.jsonl", src / "capture"});
    }
    Diagnostics diags;
    auto ds = dataset::assemble(inputs, dataset::Ratios{}, spec.seed, dir / "dataset", diags);
    for (const auto& d : diags)
        throw Error(fmt::format("synthetic dataset: {}: {}", d.where, d.message));
    return ds;
}

}  // namespace synthetic
