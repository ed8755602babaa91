#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include <json.hpp>

#include "fewshot/core.hpp"

namespace fewshot {

struct SamplerConfig {
    std::size_t n_way = 3;
    std::size_t k_shot = 10;
    std::size_t m_query = 50;
    EpisodeMode mode = EpisodeMode::multi_class;
    std::uint64_t seed = 0;

    void validate() const;
};

// Class-based sampling: N classes, then K support and M query samples per class, all
// without replacement. Classes are considered in order of first appearance in the dataset.
Episode sample_episode_multiclass(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng);

// Label-based sampling over per-atom pools. Support samples may repeat across pools; query
// samples exclude every support sample and are kept once even when drawn from several pools.
Episode sample_episode_multilabel(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng);

Episode sample_episode(const Dataset& ds, const SamplerConfig& cfg, std::mt19937_64& rng);

// Episode `index` of the stream rooted at cfg.seed; reproducible in isolation.
Episode episode_at(const Dataset& ds, const SamplerConfig& cfg, std::uint64_t index);
std::vector<Episode> episode_stream(const Dataset& ds, const SamplerConfig& cfg, std::size_t count);

// Drops atoms outside `sampled` from a label vector.
LabelVector adapt_label(const LabelVector& label, const std::set<std::size_t>& sampled);
// Remaps a label to a mask over label_map positions (label_map holds ascending atoms).
LabelMask remap_atoms(const LabelVector& label, const std::vector<std::uint32_t>& label_map);

nlohmann::json episode_to_json(const Episode& episode);

} // namespace fewshot
