#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <vector>

#include <json.hpp>

#include "fewshot/core.hpp"

namespace fewshot {

// Table of class sizes of the screw-fastening taxonomy: 200 for in-order and each single
// defect, 100 for each of the seven recorded defect combinations.
std::map<ClassId, std::size_t> default_class_counts();

struct SynthConfig {
    std::uint64_t seed = 0;
    std::map<ClassId, std::size_t> samples_per_class = default_class_counts();
    double noise_std = 0.02;
    std::size_t length = 920;
    std::size_t label_width = 7;

    void validate() const;
};

// Sigmoid torque rise to a plateau with a release drop at the end.
std::vector<double> base_curve(std::size_t length);
// Additive signature of atomic defect 1..7 (bump, dip, slope change, plateau shift,
// oscillation burst, early peak, tail spike).
std::vector<double> signature(std::size_t atom, std::size_t length);
// base + sum of the signatures of the active atoms.
std::vector<double> noiseless_curve(const LabelVector& label, std::size_t length);
// Noiseless curve plus i.i.d. Gaussian noise.
std::vector<double> raw_torque(const LabelVector& label, std::size_t length, double noise_std, std::mt19937_64& rng);

// Raw torque of every sample, in dataset order.
std::vector<std::pair<LabelVector, std::vector<double>>> generate_raw(const SynthConfig& cfg);

// Samples grouped by ascending ClassId; each series is the preprocessed raw torque
// (clamp, min-max, no decimation). Source ids are "NNNNNN_classDD".
Dataset generate(const SynthConfig& cfg);

// One CSV per sample named "<source_id>.csv" with the raw-recording columns; the torque
// column holds the series. Ingesting with downsample rate 1 and the same target length
// reproduces series that span [0, 1] (or are all zero) exactly.
void export_csv(const Dataset& ds, const std::filesystem::path& dir);

nlohmann::json synth_config_to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// Seed, resolved config, sample count and dataset checksum.
nlohmann::json synth_manifest(const SynthConfig& cfg, const Dataset& ds);

} // namespace fewshot
