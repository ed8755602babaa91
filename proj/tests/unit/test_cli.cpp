#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "fewshot/error.hpp"
#include "fewshot/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_path()
{
    const char* p = std::getenv("FEWSHOT_CLI");
    REQUIRE_MESSAGE(p != nullptr, "FEWSHOT_CLI must point at the built command-line tool");
    return p;
}

struct Run {
    int status = -1;
    std::string output;
};

Run run_cli(const std::string& args)
{
    const std::string cmd = cli_path() + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
    const int status = pclose(pipe);
    r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("fewshot_cli_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

json tiny_config()
{
    const json block = {{"channels", 16}, {"kernel_size", 3}, {"pool_kernel", 2}, {"pooling", "avg"},
                        {"activation", "elu"}};
    json counts = json::object();
    for (const char* c : {"0", "1", "2", "3", "4", "5", "6", "7"}) counts[c] = 16;
    for (const char* c : {"16", "24", "27", "35", "37", "267", "357"}) counts[c] = 12;
    return {{"synth", {{"length", 48}, {"samples_per_class", counts}}},
            {"preprocess", {{"target_length", 48}}},
            {"experiment",
             {{"backbone",
               {{"type", "cnn"},
                {"conv_blocks", {block, block}},
                {"dense_blocks", {{{"features", 64}, {"activation", "elu"}}}},
                {"repr_dim", 64}}},
              {"sampler", {{"n_way", 2}, {"k_shot", 2}, {"m_query", 3}}},
              {"episodes", {{"train", 3}, {"validation", 2}, {"test", 2}}},
              {"max_epochs", 2},
              {"trials", 2},
              {"repeats", 2}}}};
}

fs::path write_config(const fs::path& dir, const json& j)
{
    const fs::path p = dir / "config.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

Run stage(const std::string& name, const fs::path& config, const fs::path& out, const std::string& extra = "")
{
    return run_cli(name + " --config " + config.string() + " --out " + out.string() + " " + extra);
}

void run_all(const fs::path& config, const fs::path& out, const std::string& extra = "")
{
    for (const char* s : {"gen", "preprocess", "split", "search", "eval", "report"}) {
        const Run r = stage(s, config, out, extra);
        INFO(s, ": ", r.output);
        REQUIRE(r.status == 0);
    }
}

std::map<std::string, std::string> snapshot(const fs::path& dir)
{
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
    }
    return files;
}

} // namespace

TEST_CASE("pipeline runs end to end and reports mean and std")
{
    const fs::path dir = scratch("e2e");
    const fs::path cfg = write_config(dir, tiny_config());
    run_all(cfg, dir / "ws", "--seed 3");
    for (const char* f : {"gen/manifest.json", "gen/synth_manifest.json", "preprocess/dataset.json",
                          "split/split.json", "search/trials.json", "search/best_config.json",
                          "eval/metrics.json", "report/report.txt"}) {
        CHECK_MESSAGE(fs::exists(dir / "ws" / f), f);
    }
    const std::string report = slurp(dir / "ws/report/report.txt");
    CHECK(report.find("±") != std::string::npos);
    CHECK(report.find("f1") != std::string::npos);

    const json trials = json::parse(slurp(dir / "ws/search/trials.json"));
    CHECK(trials["trials"].size() == 2);
    const json metrics = json::parse(slurp(dir / "ws/eval/metrics.json"));
    CHECK(metrics["repeats"].size() == 2);

    const json manifest = json::parse(slurp(dir / "ws/eval/manifest.json"));
    CHECK(manifest["seed"] == 3);
    CHECK(manifest["config"]["synth"]["seed"] == 3);
    CHECK(manifest["subcommand"] == "eval");
    CHECK(manifest.contains("versions"));
}

TEST_CASE("train writes a loadable parameter file and history")
{
    const fs::path dir = scratch("train");
    const fs::path cfg = write_config(dir, tiny_config());
    for (const char* s : {"gen", "preprocess", "split", "train"}) REQUIRE(stage(s, cfg, dir / "ws").status == 0);
    const auto params = fewshot::ad::ParamSet::load(dir / "ws/train/params.bin");
    CHECK(params.size() > 0);
    const json history = json::parse(slurp(dir / "ws/train/history.json"));
    CHECK(history.size() >= 1);
    const json metrics = json::parse(slurp(dir / "ws/train/metrics.json"));
    CHECK(metrics.contains("validation"));
    CHECK(metrics.contains("test"));
}

TEST_CASE("same seed gives byte-identical metrics, regardless of worker count")
{
    const fs::path dir = scratch("determinism");
    const fs::path cfg = write_config(dir, tiny_config());
    run_all(cfg, dir / "a", "--seed 11");
    run_all(cfg, dir / "b", "--seed 11");
    run_all(cfg, dir / "c", "--seed 11 --workers 2");
    const std::string a = slurp(dir / "a/eval/metrics.json");
    CHECK(!a.empty());
    CHECK(a == slurp(dir / "b/eval/metrics.json"));
    CHECK(a == slurp(dir / "c/eval/metrics.json"));
    CHECK(slurp(dir / "a/search/trials.json") == slurp(dir / "c/search/trials.json"));
}

TEST_CASE("later stages leave earlier outputs untouched")
{
    const fs::path dir = scratch("immutable");
    const fs::path cfg = write_config(dir, tiny_config());
    for (const char* s : {"gen", "preprocess"}) REQUIRE(stage(s, cfg, dir / "ws").status == 0);
    const auto before_gen = snapshot(dir / "ws/gen");
    const auto before_pre = snapshot(dir / "ws/preprocess");
    for (const char* s : {"split", "train", "eval", "report"}) REQUIRE(stage(s, cfg, dir / "ws").status == 0);
    CHECK(snapshot(dir / "ws/gen") == before_gen);
    CHECK(snapshot(dir / "ws/preprocess") == before_pre);

    const Run again = stage("gen", cfg, dir / "ws");
    CHECK(again.status != 0);
    CHECK(again.output.find("already holds results") != std::string::npos);
    CHECK(snapshot(dir / "ws/gen") == before_gen);
}

TEST_CASE("manifest is written before work starts")
{
    const fs::path dir = scratch("manifest_first");
    const fs::path cfg = write_config(dir, tiny_config());
    // Nothing to preprocess yet: the stage fails, but only after recording its manifest.
    const Run r = stage("preprocess", cfg, dir / "ws");
    CHECK(r.status == 1);
    CHECK(r.output.find("run it first") != std::string::npos);
    const json manifest = json::parse(slurp(dir / "ws/preprocess/manifest.json"));
    CHECK(manifest["subcommand"] == "preprocess");
    CHECK(manifest["config"] == fewshot::pipeline_config_to_json(fewshot::pipeline_config_from_json(tiny_config())));
}

TEST_CASE("invalid optimizer exits with a config error listing the allowed set")
{
    const fs::path dir = scratch("bad_optimizer");
    json j = tiny_config();
    j["experiment"]["optimizer"] = "adagrad";
    const Run r = stage("gen", write_config(dir, j), dir / "ws");
    CHECK(r.status == 2);
    CHECK(r.output.find("config error") != std::string::npos);
    CHECK(r.output.find("Adam, SGD, AdamW, RMSprop") != std::string::npos);
    CHECK(!fs::exists(dir / "ws/gen"));
}

TEST_CASE("out-of-range adaptation steps name the field and range")
{
    const fs::path dir = scratch("bad_steps");
    json j = tiny_config();
    j["experiment"]["method"] = "maml_multiclass";
    j["experiment"]["maml"] = {{"adaptation_steps", 20}};
    const Run r = stage("gen", write_config(dir, j), dir / "ws");
    CHECK(r.status == 2);
    CHECK(r.output.find("adaptation_steps") != std::string::npos);
    CHECK(r.output.find("[5, 15]") != std::string::npos);
}

TEST_CASE("unknown config keys and bad schema versions are rejected")
{
    json j = tiny_config();
    j["experimnet"] = json::object();
    CHECK_THROWS_AS(fewshot::pipeline_config_from_json(j), fewshot::ConfigError);

    j = tiny_config();
    j["preprocess"]["rate"] = 2;
    CHECK_THROWS_WITH_AS(fewshot::pipeline_config_from_json(j), "preprocess.rate: unknown field",
                         fewshot::ConfigError);

    j = tiny_config();
    j["schema_version"] = 99;
    CHECK_THROWS_AS(fewshot::pipeline_config_from_json(j), fewshot::ConfigError);

    const fs::path dir = scratch("malformed");
    std::ofstream(dir / "config.json") << "{ not json";
    const Run r = run_cli("gen --config " + (dir / "config.json").string() + " --out " + (dir / "ws").string());
    CHECK(r.status == 2);
}

TEST_CASE("config round trips through JSON")
{
    const auto cfg = fewshot::pipeline_config_from_json(tiny_config());
    const json once = fewshot::pipeline_config_to_json(cfg);
    CHECK(fewshot::pipeline_config_to_json(fewshot::pipeline_config_from_json(once)) == once);
    CHECK(fewshot::pipeline_config_to_json(fewshot::PipelineConfig{}) ==
          fewshot::pipeline_config_to_json(fewshot::pipeline_config_from_json(json::object())));
}

TEST_CASE("missing subcommand or output folder is a usage error")
{
    CHECK(run_cli("").status != 0);
    CHECK(run_cli("gen").status != 0);
    CHECK(run_cli("fly --out /tmp/x").status != 0);
}
