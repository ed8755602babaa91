#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fewshot/core.hpp"

namespace fewshot {

// Columns of one recording keyed by normalized header name
// (time, rotational_speed, torque, angle, program_step, current).
struct RawRecording {
    std::map<std::string, std::vector<double>> columns;
};

struct PreprocessConfig {
    std::size_t downsample_rate = 20;
    std::size_t target_length = 920;
    double clamp_floor = 0.0;

    void validate() const;
};

std::vector<double> extract_torque(const RawRecording& r);
// max(x, floor) pointwise.
std::vector<double> clamp_invalid(std::span<const double> x, double floor = 0.0);
// Min-max scaling to [0, 1]; a constant input maps to zeros.
std::vector<double> minmax_normalize(std::span<const double> x);
// Keeps every rate-th point from index 0, then truncates the tail or zero-pads to the target length.
TimeSeries resample_to_length(std::span<const double> x, const PreprocessConfig& cfg);
// extract -> clamp -> normalize -> downsample/pad.
TimeSeries preprocess(const RawRecording& r, const PreprocessConfig& cfg);

// Lowercases, drops bracketed units and joins words with underscores: "Torque (N·m)" -> "torque".
std::string normalize_column_name(const std::string& header);

RawRecording parse_csv(const std::string& text, const std::string& origin = "<memory>");
RawRecording read_csv(const std::filesystem::path& path);

// Label from a "classNN" filename token, one digit per atomic label ("class0" is in order).
LabelVector label_from_filename(const std::string& filename, std::size_t width);

// Preprocesses every *.csv file of a directory, in lexicographic filename order.
// The source id of each sample is the filename stem.
Dataset load_csv_directory(const std::filesystem::path& dir, const PreprocessConfig& cfg, std::size_t width);

// Preprocessed dataset storage: dataset.json (labels, ids, checksum) + dataset.bin (series values).
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// FNV-1a over the series bytes, labels and ids, as 16 hex digits.
std::string dataset_checksum(const Dataset& ds);

} // namespace fewshot
