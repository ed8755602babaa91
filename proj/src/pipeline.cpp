#include "fewshot/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include "fewshot/error.hpp"
#include "fewshot/random.hpp"

namespace fewshot {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw ConfigError(where + "." + key + ": unknown field");
    }
}

json preprocess_to_json(const PreprocessConfig& p)
{
    return {{"downsample_rate", p.downsample_rate},
            {"target_length", p.target_length},
            {"clamp_floor", p.clamp_floor}};
}

PreprocessConfig preprocess_from_json(const json& j, PreprocessConfig p)
{
    reject_unknown(j, {"downsample_rate", "target_length", "clamp_floor"}, "preprocess");
    p.downsample_rate = j.value("downsample_rate", p.downsample_rate);
    p.target_length = j.value("target_length", p.target_length);
    p.clamp_floor = j.value("clamp_floor", p.clamp_floor);
    return p;
}

json split_options_to_json(const SplitOptions& s)
{
    return {{"ratio", {s.ratio.train, s.ratio.validation, s.ratio.test}},
            {"max_abandoned", s.max_abandoned},
            {"min_atoms_per_slot", s.min_atoms_per_slot},
            {"max_labels", s.max_labels}};
}

SplitOptions split_options_from_json(const json& j)
{
    reject_unknown(j, {"ratio", "max_abandoned", "min_atoms_per_slot", "max_labels"}, "split");
    SplitOptions s;
    if (j.contains("ratio")) {
        const auto r = j["ratio"].get<std::vector<double>>();
        if (r.size() != 3) throw ConfigError("split.ratio: expected three shares [train, validation, test]");
        s.ratio = {r[0], r[1], r[2]};
    }
    s.max_abandoned = j.value("max_abandoned", s.max_abandoned);
    s.min_atoms_per_slot = j.value("min_atoms_per_slot", s.min_atoms_per_slot);
    s.max_labels = j.value("max_labels", s.max_labels);
    return s;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    out.close();
    if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& path)
{
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::string fixed3(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

fs::path stage_dir(const RunOptions& o, Stage s) { return o.out / to_string(s); }

void require_stage(const RunOptions& o, Stage s)
{
    if (!fs::exists(stage_dir(o, s) / "manifest.json")) {
        throw ContractError("missing output of stage '" + to_string(s) + "' under '" + o.out.string() +
                            "'; run it first");
    }
}

void log_line(const RunOptions& o, const std::string& text)
{
    if (o.log) *o.log << text << std::endl;
}

struct Splits {
    Dataset train;
    Dataset validation;
    Dataset test;
};

Splits load_splits(const RunOptions& o)
{
    require_stage(o, Stage::preprocess);
    require_stage(o, Stage::split);
    const Dataset ds = load_dataset(stage_dir(o, Stage::preprocess));
    const SplitSpec spec = split_from_json(read_json(stage_dir(o, Stage::split) / "split.json"));
    return {ds.subset(spec.train), ds.subset(spec.validation), ds.subset(spec.test)};
}

ExperimentConfig evaluated_config(const PipelineConfig& cfg, const RunOptions& o)
{
    const fs::path best = stage_dir(o, Stage::search) / "best_config.json";
    if (!fs::exists(best)) return cfg.experiment;
    ExperimentConfig c = experiment_from_json(read_json(best));
    c.seed = cfg.experiment.seed;
    return c;
}

void run_gen(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    const Dataset ds = generate(cfg.synth);
    export_csv(ds, dir / "raw");
    write_text(dir / "synth_manifest.json", json_text(synth_manifest(cfg.synth, ds)));
    log_line(o, "gen: " + std::to_string(ds.size()) + " samples");
}

void run_preprocess(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    require_stage(o, Stage::gen);
    const Dataset ds = load_csv_directory(stage_dir(o, Stage::gen) / "raw", cfg.preprocess, cfg.synth.label_width);
    save_dataset(ds, dir);
    log_line(o, "preprocess: " + std::to_string(ds.size()) + " series of length " +
                    std::to_string(cfg.preprocess.target_length));
}

void run_split(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    require_stage(o, Stage::preprocess);
    const Dataset ds = load_dataset(stage_dir(o, Stage::preprocess));
    const std::vector<ClassId> classes = ds.classes();
    const std::set<ClassId> labels(classes.begin(), classes.end());
    const auto spec = solve_split(labels, ds.class_counts(), cfg.split);
    if (!spec) {
        throw ContractError("no feasible split abandons at most " + std::to_string(cfg.split.max_abandoned) +
                            " labels");
    }
    write_text(dir / "split.json", json_text(split_to_json(*spec, ds.label_width())));
    log_line(o, "split: " + std::to_string(spec->abandoned.size()) + " labels abandoned");
}

void run_train(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    const Splits s = load_splits(o);
    const ExperimentConfig& e = cfg.experiment;
    const TrainResult r = train_with_early_stop(e, s.train, s.validation, e.seed);
    r.params.save(dir / "params.bin");
    write_text(dir / "history.json", json_text(history_to_json(r.history)));
    const Backbone net = make_backbone(e, s.train);
    const MetricsReport val = evaluate(e, net, r.params, s.validation, e.episodes.validation, derive_seed(e.seed, 3));
    const MetricsReport test = evaluate(e, net, r.params, s.test, e.episodes.test, derive_seed(e.seed, 4));
    write_text(dir / "metrics.json", json_text({{"method", to_string(e.method)},
                                                {"best_epoch", r.best_epoch},
                                                {"validation", metrics_to_json(val)},
                                                {"test", metrics_to_json(test)}}));
    log_line(o, "train: best epoch " + std::to_string(r.best_epoch) + ", validation F1 " +
                    fixed3(val.f1) + ", test F1 " +
                    fixed3(test.f1));
}

void run_search(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    const Splits s = load_splits(o);
    const ExperimentConfig& e = cfg.experiment;
    const SearchResult r = random_search(e, e.trials, s.train, s.validation, e.seed, o.workers);
    write_text(dir / "trials.json", json_text(trials_to_json(r)));
    write_text(dir / "best_config.json", json_text(experiment_to_json(r.best)));
    log_line(o, "search: best trial " + std::to_string(r.best_index) + " of " + std::to_string(r.trials.size()));
}

void run_eval(const PipelineConfig& cfg, const fs::path& dir, const RunOptions& o)
{
    const Splits s = load_splits(o);
    const ExperimentConfig e = evaluated_config(cfg, o);
    const FinalReport r = final_evaluation(e, s.train, s.validation, s.test, e.repeats, e.seed, o.workers);
    write_text(dir / "metrics.json", json_text(final_report_to_json(e, r)));
    log_line(o, "eval: F1 " + format_mean_std(r.f1) + " over " + std::to_string(r.repeats.size()) + " repeats");
}

void run_report(const RunOptions& o, const fs::path& dir)
{
    require_stage(o, Stage::eval);
    const std::string text = render_report(read_json(stage_dir(o, Stage::eval) / "metrics.json"));
    write_text(dir / "report.txt", text);
    if (o.log) *o.log << text;
}

} // namespace

void PipelineConfig::validate() const
{
    synth.validate();
    preprocess.validate();
    experiment.validate();
    if (preprocess.target_length == 0) throw ConfigError("preprocess.target_length: must be positive");
    if (split.ratio.train < 0 || split.ratio.validation < 0 || split.ratio.test < 0 ||
        split.ratio.train + split.ratio.validation + split.ratio.test <= 0) {
        throw ConfigError("split.ratio: shares must be non-negative with a positive sum");
    }
}

json pipeline_config_to_json(const PipelineConfig& cfg)
{
    return {{"schema_version", kPipelineSchemaVersion},
            {"synth", synth_config_to_json(cfg.synth)},
            {"preprocess", preprocess_to_json(cfg.preprocess)},
            {"split", split_options_to_json(cfg.split)},
            {"experiment", experiment_to_json(cfg.experiment)}};
}

PipelineConfig pipeline_config_from_json(const json& j)
{
    reject_unknown(j, {"schema_version", "synth", "preprocess", "split", "experiment"}, "config");
    if (j.value("schema_version", kPipelineSchemaVersion) != kPipelineSchemaVersion) {
        throw ConfigError("config.schema_version: expected " + std::to_string(kPipelineSchemaVersion));
    }
    PipelineConfig cfg;
    try {
        if (j.contains("synth")) {
            reject_unknown(j["synth"], {"seed", "noise_std", "length", "label_width", "samples_per_class"}, "synth");
            cfg.synth = synth_config_from_json(j["synth"]);
        }
        if (j.contains("preprocess")) cfg.preprocess = preprocess_from_json(j["preprocess"], cfg.preprocess);
        if (j.contains("split")) cfg.split = split_options_from_json(j["split"]);
        if (j.contains("experiment")) cfg.experiment = experiment_from_json(j["experiment"]);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path)
{
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return pipeline_config_from_json(j);
}

PipelineConfig with_master_seed(PipelineConfig cfg, std::uint64_t seed)
{
    cfg.synth.seed = seed;
    cfg.experiment.seed = seed;
    return cfg;
}

std::string to_string(Stage stage)
{
    switch (stage) {
    case Stage::gen: return "gen";
    case Stage::preprocess: return "preprocess";
    case Stage::split: return "split";
    case Stage::train: return "train";
    case Stage::search: return "search";
    case Stage::eval: return "eval";
    case Stage::report: return "report";
    }
    return "?";
}

Stage parse_stage(const std::string& name)
{
    for (Stage s : {Stage::gen, Stage::preprocess, Stage::split, Stage::train, Stage::search, Stage::eval,
                    Stage::report}) {
        if (to_string(s) == name) return s;
    }
    throw ConfigError("unknown subcommand '" + name + "'; allowed: gen, preprocess, split, train, search, eval, report");
}

json stage_manifest(Stage stage, const PipelineConfig& cfg, const RunOptions& options)
{
    return {{"subcommand", to_string(stage)},
            {"seed", cfg.experiment.seed},
            {"workers", options.workers},
            {"config", pipeline_config_to_json(cfg)},
            {"versions",
             {{"config_schema", kPipelineSchemaVersion},
              {"experiment_schema", kExperimentSchemaVersion},
              {"dataset_format", 1},
              {"params_format", 1}}}};
}

std::string json_text(const json& j) { return j.dump(2) + "\n"; }

void run_stage(Stage stage, const PipelineConfig& cfg, const RunOptions& options)
{
    cfg.validate();
    if (options.workers == 0) throw ConfigError("workers: must be at least 1");
    const fs::path dir = stage_dir(options, stage);
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        throw ContractError("output folder '" + dir.string() + "' already holds results; choose a new --out");
    }
    fs::create_directories(dir);
    write_text(dir / "manifest.json", json_text(stage_manifest(stage, cfg, options)));
    log_line(options, to_string(stage) + ": writing to " + dir.string());

    switch (stage) {
    case Stage::gen: run_gen(cfg, dir, options); break;
    case Stage::preprocess: run_preprocess(cfg, dir, options); break;
    case Stage::split: run_split(cfg, dir, options); break;
    case Stage::train: run_train(cfg, dir, options); break;
    case Stage::search: run_search(cfg, dir, options); break;
    case Stage::eval: run_eval(cfg, dir, options); break;
    case Stage::report: run_report(options, dir); break;
    }
}

} // namespace fewshot
