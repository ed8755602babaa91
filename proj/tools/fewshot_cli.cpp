#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fewshot/error.hpp"
#include "fewshot/pipeline.hpp"
#include "fewshot/runtime.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitFailure = 1;

struct Flags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::size_t workers = 1;
    bool verbose = false;
};

void add_flags(CLI::App& sub, Flags& f)
{
    sub.add_option("--config", f.config, "Pipeline config JSON (defaults apply to missing fields)")
        ->check(CLI::ExistingFile);
    sub.add_option("--out", f.out, "Workspace folder; the stage writes into <out>/<subcommand>")->required();
    sub.add_option("--seed", f.seed, "Master seed for generation and experiments");
    sub.add_option("--workers", f.workers, "Parallel trials or repeats")->check(CLI::PositiveNumber);
    sub.add_flag("--verbose", f.verbose, "Print progress");
}

} // namespace

int main(int argc, char** argv)
{
    fewshot::tune_allocator();

    CLI::App app{"Few-shot fault classification pipeline for screw-fastening torque series"};
    app.require_subcommand(1, 1);
    Flags flags;
    const std::pair<fewshot::Stage, const char*> stages[] = {
        {fewshot::Stage::gen, "Generate the synthetic dataset as CSV recordings"},
        {fewshot::Stage::preprocess, "Ingest the CSV recordings into a preprocessed dataset"},
        {fewshot::Stage::split, "Assign labels to train, validation and test with disjoint atomic labels"},
        {fewshot::Stage::train, "Train one model with early stopping"},
        {fewshot::Stage::search, "Random hyperparameter search"},
        {fewshot::Stage::eval, "Retrain repeatedly and score on test episodes"},
        {fewshot::Stage::report, "Render the evaluation metrics as text"},
    };
    for (const auto& [stage, help] : stages) add_flags(*app.add_subcommand(fewshot::to_string(stage), help), flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const fewshot::Stage stage = fewshot::parse_stage(app.get_subcommands().front()->get_name());
        fewshot::PipelineConfig cfg = flags.config.empty() ? fewshot::PipelineConfig{}
                                                           : fewshot::load_pipeline_config(flags.config);
        if (flags.seed) cfg = fewshot::with_master_seed(cfg, *flags.seed);
        fewshot::RunOptions options;
        options.out = flags.out;
        options.workers = flags.workers;
        options.log = flags.verbose ? &std::cerr : nullptr;
        fewshot::run_stage(stage, cfg, options);
    } catch (const fewshot::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
