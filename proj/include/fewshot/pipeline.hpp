#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <json.hpp>

#include "fewshot/eval.hpp"
#include "fewshot/preprocess.hpp"
#include "fewshot/split.hpp"
#include "fewshot/synth.hpp"

namespace fewshot {

// Everything a pipeline run reads: generator, preprocessing, split search and experiment.
struct PipelineConfig {
    SynthConfig synth;
    // The generator already emits series at the target length, so no decimation by default.
    PreprocessConfig preprocess{.downsample_rate = 1};
    SplitOptions split;
    ExperimentConfig experiment;

    void validate() const;
};

inline constexpr int kPipelineSchemaVersion = 1;

nlohmann::json pipeline_config_to_json(const PipelineConfig& cfg);
// Missing sections keep their defaults; unknown keys and out-of-range values raise ConfigError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// The master seed drives both the generator and the experiment.
PipelineConfig with_master_seed(PipelineConfig cfg, std::uint64_t seed);

enum class Stage { gen, preprocess, split, train, search, eval, report };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);

struct RunOptions {
    // Workspace root; each stage writes into <out>/<stage> and reads earlier stages' folders.
    std::filesystem::path out;
    std::size_t workers = 1;
    // Progress lines go here when set.
    std::ostream* log = nullptr;
};

// Runs one stage. The stage folder must not exist yet (or be empty); its manifest.json is
// written before any work starts. Outputs per stage:
//   gen        raw/*.csv, synth_manifest.json
//   preprocess dataset.json, dataset.bin
//   split      split.json
//   train      params.bin, history.json, metrics.json (validation and test)
//   search     trials.json, best_config.json
//   eval       metrics.json (from search/best_config.json when present)
//   report     report.txt
void run_stage(Stage stage, const PipelineConfig& cfg, const RunOptions& options);

// Manifest contents for a stage: resolved config, seed and artifact format versions.
nlohmann::json stage_manifest(Stage stage, const PipelineConfig& cfg, const RunOptions& options);

// Serialized JSON with a trailing newline, as written to every artifact.
std::string json_text(const nlohmann::json& j);

} // namespace fewshot
