#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "hallu/pipeline.hpp"

namespace fs = std::filesystem;
using namespace hallu;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;
constexpr int kToleranceFailure = 4;

void report(const pipeline::StageSummary& s, const std::string& stage) {
    for (const auto& d : s.diagnostics) spdlog::warn("{}: {}: {}", stage, d.where, d.message);
    for (const auto& [k, v] : s.counts) spdlog::info("{}: {} = {}", stage, k, v);
}

pipeline::EndpointSettings endpoint_settings(const std::string& config_path) {
    pipeline::EndpointSettings ep;
    if (config_path.empty()) return ep;
    auto rc = pipeline::RunConfig::load(config_path);
    return rc.endpoint;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Build recency-controlled hallucination datasets and train probes on model internal states."};
    app.require_subcommand(1);
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string log_level = "info";
    app.add_option("--config", config_path, "Run configuration (key = value file)");
    app.add_option("--seed", seed, "Seed for every randomized step");
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

    // harvest
    auto* harvest = app.add_subcommand("harvest", "Extract recent, referenced, link-free sentences");
    std::string h_input, h_cutoff, h_output;
    harvest->add_option("--input", h_input, "articles.jsonl")->required();
    harvest->add_option("--cutoff", h_cutoff, "YYYY-MM-DD")->required();
    harvest->add_option("--output", h_output, "candidates.jsonl")->required();

    // qagen
    auto* qagen = app.add_subcommand("qagen", "Generate question and answer quote per candidate");
    std::string q_input, q_endpoint, q_model, q_output;
    std::size_t q_workers = 0;
    qagen->add_option("--input", q_input, "candidates.jsonl")->required();
    qagen->add_option("--endpoint", q_endpoint, "http(s)://..., replay:<file> or record:<file>|<url>")->required();
    qagen->add_option("--model", q_model, "Generator model name");
    qagen->add_option("--workers", q_workers, "Concurrent requests");
    qagen->add_option("--output", q_output, "qa.jsonl")->required();

    // prompts
    auto* prompts_cmd = app.add_subcommand("prompts", "Build answerable and unanswerable RAG prompts");
    std::string p_qa, p_candidates, p_output;
    prompts_cmd->add_option("--qa", p_qa, "qa.jsonl")->required();
    prompts_cmd->add_option("--candidates", p_candidates, "candidates.jsonl")->required();
    prompts_cmd->add_option("--output", p_output, "prompts.jsonl")->required();

    // label
    auto* label = app.add_subcommand("label", "Judge every response sentence and map to a label");
    std::string l_responses, l_prompts, l_endpoint, l_model, l_output;
    std::size_t l_workers = 0;
    label->add_option("--responses", l_responses, "responses.jsonl")->required();
    label->add_option("--prompts", l_prompts, "prompts.jsonl")->required();
    label->add_option("--endpoint", l_endpoint, "http(s)://..., replay:<file> or record:<file>|<url>")->required();
    label->add_option("--model", l_model, "Judge model name");
    label->add_option("--workers", l_workers, "Concurrent requests");
    label->add_option("--output", l_output, "labeled.jsonl")->required();

    // assemble
    auto* assemble = app.add_subcommand("assemble", "Join labels with state vectors, split and balance");
    std::vector<std::string> a_labeled, a_states;
    std::string a_ratios = "0.7,0.15,0.15", a_output;
    assemble->add_option("--labeled", a_labeled, "labeled.jsonl (repeat, paired with --states)")->required();
    assemble->add_option("--states", a_states, "capture directory (repeat)")->required();
    assemble->add_option("--ratios", a_ratios, "train,val,test");
    assemble->add_option("--output", a_output, "dataset directory")->required();

    // ingest-ragtruth
    auto* ingest = app.add_subcommand("ingest-ragtruth", "Turn RAGTruth span annotations into labeled rows");
    std::string i_annotations, i_responses, i_output;
    ingest->add_option("--annotations", i_annotations, "response.jsonl of the release")->required();
    ingest->add_option("--responses", i_responses, "responses.jsonl from state capture")->required();
    ingest->add_option("--output", i_output, "labeled.jsonl")->required();

    // train
    auto* train = app.add_subcommand("train", "Train probes over several seeds");
    std::string t_dataset, t_states = "cev_middle", t_output;
    pipeline::TrainOptions topt;
    train->add_option("--dataset", t_dataset, "dataset directory")->required();
    train->add_option("--states", t_states, "state kinds, comma-separated; several are concatenated");
    train->add_option("--seeds", topt.seeds, "number of seeds");
    train->add_option("--model", topt.model, "restrict to one model id");
    train->add_option("--quantization", topt.quantization, "all, none, float8, int8 or int4");
    train->add_option("--workers", topt.workers, "seeds trained in parallel");
    train->add_option("--learning-rate", topt.probe.learning_rate);
    train->add_option("--max-epochs", topt.probe.max_epochs);
    train->add_option("--patience", topt.probe.patience);
    train->add_option("--batch-size", topt.probe.batch_size);
    train->add_flag("--standardize", topt.probe.standardize, "z-score inputs with train statistics");
    train->add_option("--output", t_output, "output directory")->required();

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Reproduce a result table");
    std::string e_kind, e_spec, e_output;
    eval_cmd->add_option("kind", e_kind, "table, crosstest, ablate or rates")
        ->required()
        ->check(CLI::IsMember({"table", "crosstest", "ablate", "rates"}));
    eval_cmd->add_option("--spec", e_spec, "experiment file")->required();
    eval_cmd->add_option("--output", e_output, "output directory")->required();

    // run
    auto* run = app.add_subcommand("run", "Run the configured pipeline stages");
    std::vector<std::string> r_stages;
    run->add_option("--stages", r_stages, "override the configured stage list")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigError;
    }

    auto logger = spdlog::stderr_color_mt("hallu");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        const std::uint64_t s = seed.value_or(0);
        if (*harvest) {
            auto cutoff = Date::parse(h_cutoff);
            if (!cutoff) throw ConfigError(fmt::format("cutoff '{}' is not YYYY-MM-DD", h_cutoff));
            report(pipeline::harvest(h_input, *cutoff, h_output), "harvest");
        } else if (*qagen) {
            auto ep = endpoint_settings(config_path);
            ep.url = q_endpoint;
            if (!q_model.empty()) ep.model = q_model;
            if (q_workers) ep.workers = q_workers;
            auto client = chat::make_client(ep.url);
            report(pipeline::qagen(q_input, *client, ep, q_output), "qagen");
        } else if (*prompts_cmd) {
            report(pipeline::build_prompts(p_qa, p_candidates, s, p_output), "prompts");
        } else if (*label) {
            auto ep = endpoint_settings(config_path);
            ep.url = l_endpoint;
            if (!l_model.empty()) ep.model = l_model;
            if (l_workers) ep.workers = l_workers;
            auto client = chat::make_client(ep.url);
            report(pipeline::label(l_responses, l_prompts, *client, ep, l_output), "label");
        } else if (*assemble) {
            if (a_labeled.size() != a_states.size())
                throw ConfigError("--labeled and --states must be given the same number of times");
            std::vector<dataset::SourceInput> inputs;
            for (std::size_t i = 0; i < a_labeled.size(); ++i) inputs.push_back({a_labeled[i], a_states[i]});
            report(pipeline::assemble(inputs, dataset::parse_ratios(a_ratios), s, a_output), "assemble");
        } else if (*ingest) {
            Diagnostics diags;
            auto annotations = jsonl::read_all(i_annotations, diags);
            auto responses = jsonl::read_all(i_responses, diags);
            auto rows = dataset::ingest_ragtruth(annotations, responses, diags);
            jsonl::write_all(i_output, rows);
            report({{{"sentences", rows.size()}}, diags}, "ingest-ragtruth");
        } else if (*train) {
            topt.kinds = text::split(t_states, ',');
            for (const auto& k : topt.kinds) {
                if (!states::is_state_kind(k)) throw ConfigError(fmt::format("unknown state kind '{}'", k));
            }
            topt.probe.seed = s;
            report(pipeline::train(t_dataset, topt, t_output), "train");
        } else if (*eval_cmd) {
            auto spec = eval::ExperimentSpec::load(e_spec);
            spec.kind = e_kind;
            if (seed) spec.probe.seed = *seed;
            auto grid = eval::run(spec);
            grid.write(e_output);
            std::cout << grid.render();
            if (!grid.tolerance_ok()) {
                spdlog::error("eval: at least one cell is outside the reproduction tolerance");
                return kToleranceFailure;
            }
        } else if (*run) {
            if (config_path.empty()) throw ConfigError("run needs --config");
            auto kv = KeyValueConfig::load(config_path);
            auto cfg = pipeline::RunConfig::from_config(kv, fs::path(config_path).parent_path());
            if (!r_stages.empty()) {
                for (const auto& st : r_stages) {
                    if (std::find(pipeline::stage_order().begin(), pipeline::stage_order().end(), st) ==
                        pipeline::stage_order().end())
                        throw ConfigError(fmt::format("unknown stage '{}'", st));
                }
                cfg.stages = r_stages;
            }
            if (seed) {
                cfg.seed = *seed;
                cfg.train.probe.seed = *seed;
            }
            auto result = pipeline::run(cfg);
            for (const auto& st : result.stages) {
                if (st.cache_hit) spdlog::info("{}: cache hit", st.stage);
                else report(st.summary, st.stage);
            }
            if (result.grid) std::cout << result.grid->render();
            if (!result.tolerance_ok) {
                spdlog::error("eval: at least one cell is outside the reproduction tolerance");
                return kToleranceFailure;
            }
        }
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return kConfigError;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kStageFailure;
    }
    return kOk;
}
