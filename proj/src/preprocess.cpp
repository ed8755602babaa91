#include "fewshot/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "fewshot/error.hpp"

namespace fewshot {

namespace fs = std::filesystem;

void PreprocessConfig::validate() const
{
    if (downsample_rate < 1) throw ConfigError("downsample_rate must be >= 1");
    if (target_length < 1) throw ConfigError("target_length must be >= 1");
}

std::vector<double> extract_torque(const RawRecording& r)
{
    auto it = r.columns.find("torque");
    if (it == r.columns.end()) throw FormatError("recording has no torque column");
    if (it->second.empty()) throw FormatError("recording has an empty torque column");
    return it->second;
}

std::vector<double> clamp_invalid(std::span<const double> x, double floor)
{
    std::vector<double> out(x.begin(), x.end());
    for (auto& v : out) v = std::max(v, floor);
    return out;
}

std::vector<double> minmax_normalize(std::span<const double> x)
{
    if (x.empty()) throw ContractError("minmax_normalize: empty series");
    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(x.size(), 0.0);
    if (hi > lo) {
        const double range = hi - lo;
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - lo) / range;
    }
    return out;
}

TimeSeries resample_to_length(std::span<const double> x, const PreprocessConfig& cfg)
{
    cfg.validate();
    if (x.empty()) throw ContractError("resample_to_length: empty series");
    std::vector<double> out;
    out.reserve(cfg.target_length);
    for (std::size_t i = 0; i < x.size() && out.size() < cfg.target_length; i += cfg.downsample_rate) {
        out.push_back(x[i]);
    }
    out.resize(cfg.target_length, 0.0);
    return TimeSeries(std::move(out));
}

TimeSeries preprocess(const RawRecording& r, const PreprocessConfig& cfg)
{
    const auto torque = extract_torque(r);
    const auto clamped = clamp_invalid(torque, cfg.clamp_floor);
    const auto normalized = minmax_normalize(clamped);
    return resample_to_length(normalized, cfg);
}

std::string normalize_column_name(const std::string& header)
{
    std::string out;
    int depth = 0;
    bool pending_space = false;
    for (unsigned char c : header) {
        if (c == '(' || c == '[') {
            ++depth;
            continue;
        }
        if (c == ')' || c == ']') {
            depth = std::max(0, depth - 1);
            continue;
        }
        if (depth > 0) continue;
        if (std::isspace(c) || c == '-' || c == '_') {
            pending_space = !out.empty();
            continue;
        }
        if (c == '"' || c == '\'') continue;
        if (pending_space) out += '_';
        pending_space = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

namespace {

std::vector<std::string> split_fields(const std::string& line)
{
    std::vector<std::string> fields;
    std::string current;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(current);
            current.clear();
        } else {
            current += c;
        }
    }
    fields.push_back(current);
    for (auto& f : fields) {
        const auto first = f.find_first_not_of(" \t");
        const auto last = f.find_last_not_of(" \t");
        f = first == std::string::npos ? std::string() : f.substr(first, last - first + 1);
    }
    return fields;
}

double parse_number(const std::string& field, const std::string& origin, std::size_t line)
{
    double value = 0.0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    if (!field.empty() && *begin == '+') ++begin;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end || field.empty()) {
        throw FormatError(origin + ":" + std::to_string(line) + ": not a number: '" + field + "'");
    }
    return value;
}

} // namespace

RawRecording parse_csv(const std::string& text, const std::string& origin)
{
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> headers;
    RawRecording rec;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto fields = split_fields(line);
        if (headers.empty()) {
            for (auto& f : fields) {
                std::string name = normalize_column_name(f);
                if (name.empty()) throw FormatError(origin + ": empty column header");
                if (rec.columns.count(name)) throw FormatError(origin + ": duplicate column '" + name + "'");
                rec.columns[name];
                headers.push_back(name);
            }
            continue;
        }
        if (fields.size() != headers.size()) {
            throw FormatError(origin + ":" + std::to_string(line_no) + ": expected " + std::to_string(headers.size()) +
                              " fields, found " + std::to_string(fields.size()));
        }
        for (std::size_t i = 0; i < fields.size(); ++i) {
            rec.columns[headers[i]].push_back(parse_number(fields[i], origin, line_no));
        }
    }
    if (headers.empty()) throw FormatError(origin + ": missing header row");
    return rec;
}

RawRecording read_csv(const fs::path& path)
{
    std::ifstream file(path, std::ios::binary);
    if (!file) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream buffer;
    buffer << file.rdbuf();
    return parse_csv(buffer.str(), path.filename().string());
}

LabelVector label_from_filename(const std::string& filename, std::size_t width)
{
    std::string lower = filename;
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    std::size_t pos = 0;
    while ((pos = lower.find("class", pos)) != std::string::npos) {
        std::size_t end = pos + 5;
        while (end < lower.size() && std::isdigit(static_cast<unsigned char>(lower[end]))) ++end;
        if (end == pos + 5) {
            pos = end;
            continue;
        }
        const std::string digits = lower.substr(pos + 5, end - pos - 5);
        LabelVector label(width);
        if (digits == "0") return label;
        for (char d : digits) {
            const auto atom = static_cast<std::size_t>(d - '0');
            if (atom == 0 || atom > width) {
                throw FormatError(filename + ": label digit " + std::string(1, d) + " outside [1, " +
                                  std::to_string(width) + "]");
            }
            if (label.test(atom)) throw FormatError(filename + ": label digit " + std::string(1, d) + " repeated");
            label.set(atom);
        }
        return label;
    }
    throw FormatError(filename + ": no classNN token in filename");
}

Dataset load_csv_directory(const fs::path& dir, const PreprocessConfig& cfg, std::size_t width)
{
    cfg.validate();
    if (!fs::is_directory(dir)) throw Error("not a directory: '" + dir.string() + "'");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<Sample> samples;
    samples.reserve(files.size());
    for (const auto& path : files) {
        Sample s;
        s.label = label_from_filename(path.filename().string(), width);
        s.series = preprocess(read_csv(path), cfg);
        s.source_id = path.stem().string();
        samples.push_back(std::move(s));
    }
    return Dataset(std::move(samples), width);
}

std::string dataset_checksum(const Dataset& ds)
{
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& s : ds.samples()) {
        mix(s.source_id.data(), s.source_id.size());
        const std::uint32_t c = raw(encode_label(s.label));
        mix(&c, sizeof c);
        const auto& v = s.series.values();
        mix(v.data(), v.size() * sizeof(double));
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

void save_dataset(const Dataset& ds, const fs::path& dir)
{
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format"] = "fewshot-dataset";
    manifest["version"] = 1;
    manifest["label_width"] = ds.label_width();
    manifest["checksum"] = dataset_checksum(ds);
    manifest["samples"] = nlohmann::json::array();
    std::ofstream bin(dir / "dataset.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw Error("cannot open '" + (dir / "dataset.bin").string() + "' for writing");
    for (const auto& s : ds.samples()) {
        manifest["samples"].push_back({{"source_id", s.source_id},
                                       {"label", s.label.digits()},
                                       {"class_id", raw(encode_label(s.label))},
                                       {"length", s.series.length()}});
        const auto& v = s.series.values();
        bin.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!bin) throw Error("failed writing dataset.bin");
    std::ofstream json_file(dir / "dataset.json", std::ios::trunc);
    json_file << manifest.dump(2) << "\n";
    if (!json_file) throw Error("failed writing dataset.json");
}

Dataset load_dataset(const fs::path& dir)
{
    std::ifstream json_file(dir / "dataset.json");
    if (!json_file) throw Error("cannot open '" + (dir / "dataset.json").string() + "'");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(json_file);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset.json: ") + e.what());
    }
    const auto width = manifest.at("label_width").get<std::size_t>();
    std::ifstream bin(dir / "dataset.bin", std::ios::binary);
    if (!bin) throw Error("cannot open '" + (dir / "dataset.bin").string() + "'");
    std::vector<Sample> samples;
    for (const auto& entry : manifest.at("samples")) {
        Sample s;
        s.source_id = entry.at("source_id").get<std::string>();
        s.label = decode_label(class_id(entry.at("class_id").get<std::uint32_t>()), width);
        std::vector<double> values(entry.at("length").get<std::size_t>());
        bin.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!bin) throw FormatError("dataset.bin is shorter than its manifest");
        s.series = TimeSeries(std::move(values));
        samples.push_back(std::move(s));
    }
    Dataset ds(std::move(samples), width);
    if (manifest.contains("checksum") && manifest["checksum"].get<std::string>() != dataset_checksum(ds)) {
        throw FormatError("dataset checksum mismatch in '" + dir.string() + "'");
    }
    return ds;
}

} // namespace fewshot
