#include "fewshot/synth.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "fewshot/error.hpp"
#include "fewshot/preprocess.hpp"
#include "fewshot/random.hpp"

namespace fewshot {

namespace fs = std::filesystem;

namespace {

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double gauss(double t, double center, double width)
{
    const double z = (t - center) / width;
    return std::exp(-0.5 * z * z);
}

double position(std::size_t i, std::size_t length)
{
    return length <= 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(length - 1);
}

std::string format_double(double v)
{
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

} // namespace

std::map<ClassId, std::size_t> default_class_counts()
{
    std::map<ClassId, std::size_t> counts;
    counts[class_id(0)] = 200;
    for (std::uint32_t atom = 1; atom <= 7; ++atom) counts[class_id(1u << (atom - 1))] = 200;
    for (const char* digits : {"16", "24", "27", "35", "37", "267", "357"}) {
        std::uint32_t c = 0;
        for (const char* d = digits; *d; ++d) c |= 1u << (*d - '1');
        counts[class_id(c)] = 100;
    }
    return counts;
}

void SynthConfig::validate() const
{
    if (length < 2) throw ConfigError("synth.length must be >= 2");
    if (!(noise_std >= 0.0)) throw ConfigError("synth.noise_std must be >= 0");
    if (label_width < 1 || label_width > 7) throw ConfigError("synth.label_width must be in [1, 7]");
    for (const auto& [c, n] : samples_per_class) {
        if (raw(c) >> label_width) {
            throw ConfigError("synth.samples_per_class: class id " + std::to_string(raw(c)) + " exceeds label width");
        }
    }
}

std::vector<double> base_curve(std::size_t length)
{
    std::vector<double> out(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double t = position(i, length);
        const double run_down = 0.08 * logistic((t - 0.05) / 0.02);
        const double rise = 0.92 * logistic((t - 0.45) / 0.04);
        const double release = 1.0 - logistic((t - 0.96) / 0.006);
        out[i] = (run_down + rise) * release;
    }
    return out;
}

std::vector<double> signature(std::size_t atom, std::size_t length)
{
    std::vector<double> out(length, 0.0);
    for (std::size_t i = 0; i < length; ++i) {
        const double t = position(i, length);
        double v = 0.0;
        switch (atom) {
        case 1: v = 0.25 * gauss(t, 0.20, 0.03); break;
        case 2: v = -0.25 * gauss(t, 0.62, 0.03); break;
        case 3: v = t > 0.55 ? 0.25 * (t - 0.55) / 0.45 : 0.0; break;
        case 4: v = -0.15 * logistic((t - 0.72) / 0.01); break;
        case 5: v = 0.12 * std::sin(2.0 * std::numbers::pi * 60.0 * t) * gauss(t, 0.82, 0.025); break;
        case 6: v = 0.30 * gauss(t, 0.32, 0.015); break;
        case 7: v = 0.35 * gauss(t, 0.90, 0.008); break;
        default: throw InvalidClass("no signature for atomic label " + std::to_string(atom));
        }
        out[i] = v;
    }
    return out;
}

std::vector<double> noiseless_curve(const LabelVector& label, std::size_t length)
{
    std::vector<double> out = base_curve(length);
    for (std::size_t atom : supp(label)) {
        const auto sig = signature(atom, length);
        for (std::size_t i = 0; i < length; ++i) out[i] += sig[i];
    }
    return out;
}

std::vector<double> raw_torque(const LabelVector& label, std::size_t length, double noise_std, std::mt19937_64& rng)
{
    std::vector<double> out = noiseless_curve(label, length);
    for (auto& v : out) v += noise_std * standard_normal(rng);
    return out;
}

std::vector<std::pair<LabelVector, std::vector<double>>> generate_raw(const SynthConfig& cfg)
{
    cfg.validate();
    std::vector<std::pair<LabelVector, std::vector<double>>> out;
    for (const auto& [c, count] : cfg.samples_per_class) {
        const LabelVector label = decode_label(c, cfg.label_width);
        const std::uint64_t class_seed = derive_seed(cfg.seed, raw(c));
        for (std::size_t k = 0; k < count; ++k) {
            auto rng = derived_rng(class_seed, k);
            out.emplace_back(label, raw_torque(label, cfg.length, cfg.noise_std, rng));
        }
    }
    return out;
}

Dataset generate(const SynthConfig& cfg)
{
    const PreprocessConfig pre{.downsample_rate = 1, .target_length = cfg.length};
    std::vector<Sample> samples;
    for (auto& [label, torque] : generate_raw(cfg)) {
        std::ostringstream id;
        id << std::setw(6) << std::setfill('0') << samples.size() << "_class" << label.digits();
        RawRecording rec;
        rec.columns["torque"] = std::move(torque);
        samples.push_back({preprocess(rec, pre), label, id.str()});
    }
    return Dataset(std::move(samples), cfg.label_width);
}

void export_csv(const Dataset& ds, const fs::path& dir)
{
    fs::create_directories(dir);
    for (const auto& s : ds.samples()) {
        const fs::path path = dir / (s.source_id + ".csv");
        std::ofstream file(path, std::ios::trunc);
        if (!file) throw Error("cannot open '" + path.string() + "' for writing");
        file << "time (0.001 ms),rotational speed (RPM),torque (N·m),angle (°),program step,current (A)\n";
        const auto& v = s.series.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            file << i * 10 << ",250," << format_double(v[i]) << "," << format_double(0.5 * static_cast<double>(i))
                 << ",1,1.5\n";
        }
        if (!file) throw Error("failed writing '" + path.string() + "'");
    }
}

nlohmann::json synth_config_to_json(const SynthConfig& cfg)
{
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [c, n] : cfg.samples_per_class) counts[class_digits(c, cfg.label_width)] = n;
    return {{"seed", cfg.seed},
            {"noise_std", cfg.noise_std},
            {"length", cfg.length},
            {"label_width", cfg.label_width},
            {"samples_per_class", counts}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j)
{
    SynthConfig cfg;
    cfg.seed = j.value("seed", cfg.seed);
    cfg.noise_std = j.value("noise_std", cfg.noise_std);
    cfg.length = j.value("length", cfg.length);
    cfg.label_width = j.value("label_width", cfg.label_width);
    if (j.contains("samples_per_class")) {
        cfg.samples_per_class.clear();
        for (const auto& [digits, n] : j["samples_per_class"].items()) {
            const LabelVector label = label_from_filename("class" + digits, cfg.label_width);
            cfg.samples_per_class[encode_label(label)] = n.get<std::size_t>();
        }
    }
    cfg.validate();
    return cfg;
}

nlohmann::json synth_manifest(const SynthConfig& cfg, const Dataset& ds)
{
    return {{"seed", cfg.seed},
            {"config", synth_config_to_json(cfg)},
            {"sample_count", ds.size()},
            {"dataset_checksum", dataset_checksum(ds)}};
}

} // namespace fewshot
